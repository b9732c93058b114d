//! Named parameter groups, initialization and the momentum SGD optimizer.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::error::{Result, RtnError};

use super::grid::Grid;
use super::tape::{Gradients, Tape, Var};

/// The four independently schedulable parts of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupName {
    Backbone,
    Fusion,
    RpnHeads,
    RegressionHead,
}

impl GroupName {
    pub const ALL: [GroupName; 4] = [
        GroupName::Backbone,
        GroupName::Fusion,
        GroupName::RpnHeads,
        GroupName::RegressionHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Backbone => "backbone",
            GroupName::Fusion => "fusion",
            GroupName::RpnHeads => "rpn_heads",
            GroupName::RegressionHead => "regression_head",
        }
    }

    /// Group owning a fully qualified parameter name (`<group>.<rest>`).
    pub fn of_param(name: &str) -> Option<GroupName> {
        let prefix = name.split('.').next()?;
        GroupName::ALL.into_iter().find(|g| g.as_str() == prefix)
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: GroupName,
    /// Fully qualified name and value, in registration order.
    pub params: Vec<(String, Grid)>,
    pub learning_rate: f64,
}

/// All trainable parameters, partitioned into the four groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            groups: GroupName::ALL
                .into_iter()
                .map(|name| ParamGroup {
                    name,
                    params: Vec::new(),
                    learning_rate: 0.0,
                })
                .collect(),
        }
    }

    /// Registers a parameter; the group is taken from the name prefix.
    pub fn insert(&mut self, name: impl Into<String>, value: Grid) -> Result<()> {
        let name = name.into();
        let group = GroupName::of_param(&name)
            .ok_or_else(|| RtnError::Config(format!("parameter `{name}` has no known group prefix")))?;
        if self.get(&name).is_some() {
            return Err(RtnError::Config(format!("duplicate parameter `{name}`")));
        }
        self.group_mut(group).params.push((name, value.trainable()));
        Ok(())
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn group(&self, name: GroupName) -> &ParamGroup {
        self.groups.iter().find(|g| g.name == name).expect("all groups exist")
    }

    pub fn group_mut(&mut self, name: GroupName) -> &mut ParamGroup {
        self.groups.iter_mut().find(|g| g.name == name).expect("all groups exist")
    }

    pub fn set_learning_rate(&mut self, name: GroupName, lr: f64) {
        self.group_mut(name).learning_rate = lr;
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.iter().find(|(n, _)| *n == name).map(|(_, g)| g)
    }

    /// `(name, grid)` over every parameter in store order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.groups
            .iter()
            .flat_map(|g| g.params.iter().map(|(n, v)| (n.as_str(), v)))
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.params.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, g)| g.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.len());
        let mut order = Vec::with_capacity(self.len());
        for (name, grid) in self.iter() {
            let v = tape.leaf(grid.clone());
            vars.insert(name.to_string(), v);
            order.push(v);
        }
        BoundParams { vars, order }
    }

    /// Stores flat per-parameter gradients (store order) on each grid.
    pub fn set_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.len() {
            return Err(RtnError::Usage(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        let mut it = grads.iter();
        for g in &mut self.groups {
            for (_, p) in &mut g.params {
                p.set_grad(it.next().expect("length checked").clone())?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.groups {
            for (_, p) in &mut g.params {
                p.clear_grad();
            }
        }
    }

    /// Replaces the values of parameters present in `other` by name.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for g in &mut self.groups {
            for (name, p) in &mut g.params {
                let src = other
                    .get(name)
                    .ok_or_else(|| RtnError::ModelFormat(format!("missing parameter `{name}`")))?;
                if src.shape() != p.shape() {
                    return Err(RtnError::ModelFormat(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        p.shape()
                    )));
                }
                p.values_mut().copy_from_slice(src.values());
            }
        }
        Ok(())
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| RtnError::Config(format!("model has no parameter `{name}`")))
    }

    /// Gradients for every parameter in store order; zero when unreachable.
    pub fn flat_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<Vec<f64>> {
        self.order.iter().map(|&v| grads.wrt(tape, v)).collect()
    }
}

/// Zero-mean uniform values with variance `1 / fan_in`.
pub fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Grid {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Grid::new(shape.to_vec(), values).expect("length from shape")
}

/// Stochastic gradient descent with heavy-ball momentum and per-group
/// learning rates.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(RtnError::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Sgd {
            momentum,
            velocity: HashMap::new(),
        })
    }

    /// `v <- momentum * v + grad; p <- p - lr * v`. Groups with a zero
    /// learning rate are skipped entirely.
    pub fn step(&mut self, groups: &mut [ParamGroup]) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| !(g.learning_rate >= 0.0)) {
            return Err(RtnError::Config(format!(
                "group {} has invalid learning rate {}",
                g.name, g.learning_rate
            )));
        }
        for group in groups.iter_mut() {
            let lr = group.learning_rate;
            if lr == 0.0 {
                continue;
            }
            for (name, p) in &mut group.params {
                let grad = p
                    .grad()
                    .ok_or_else(|| RtnError::Usage(format!("no gradient for `{name}`")))?
                    .to_vec();
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for ((vv, g), x) in v.iter_mut().zip(&grad).zip(p.values_mut()) {
                    *vv = self.momentum * *vv + g;
                    *x -= lr * *vv;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_group(lr: f64, p: f64, g: f64) -> Vec<ParamGroup> {
        let mut grid = Grid::scalar(p).trainable();
        grid.set_grad(vec![g]).unwrap();
        vec![ParamGroup {
            name: GroupName::Backbone,
            params: vec![("backbone.p".into(), grid)],
            learning_rate: lr,
        }]
    }

    #[test]
    fn plain_step() {
        let mut groups = scalar_group(0.1, 1.0, 2.0);
        Sgd::new(0.0).unwrap().step(&mut groups).unwrap();
        assert!((groups[0].params[0].1.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolled() {
        let mut groups = scalar_group(0.1, 0.0, 1.0);
        let mut opt = Sgd::new(0.9).unwrap();
        opt.step(&mut groups).unwrap();
        assert!((groups[0].params[0].1.item() + 0.1).abs() < 1e-15);
        opt.step(&mut groups).unwrap();
        assert!((groups[0].params[0].1.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut groups = scalar_group(0.0, 0.123456789, 7.0);
        let before = groups[0].params[0].1.item().to_bits();
        let mut opt = Sgd::new(0.9).unwrap();
        for _ in 0..10 {
            opt.step(&mut groups).unwrap();
        }
        assert_eq!(groups[0].params[0].1.item().to_bits(), before);
    }

    #[test]
    fn negative_lr_rejected() {
        let mut groups = scalar_group(-0.1, 0.0, 1.0);
        assert!(matches!(
            Sgd::new(0.0).unwrap().step(&mut groups),
            Err(RtnError::Config(_))
        ));
    }

    #[test]
    fn group_from_prefix() {
        assert_eq!(GroupName::of_param("fusion.proj16.weight"), Some(GroupName::Fusion));
        assert_eq!(GroupName::of_param("rpn_heads.cls.bias"), Some(GroupName::RpnHeads));
        assert_eq!(GroupName::of_param("head.x"), None);
        let mut store = ParamStore::new();
        store.insert("regression_head.fc.weight", Grid::zeros(&[2, 2])).unwrap();
        assert!(store.insert("regression_head.fc.weight", Grid::zeros(&[1])).is_err());
        assert!(store.insert("other.w", Grid::zeros(&[1])).is_err());
        assert_eq!(store.group(GroupName::RegressionHead).params.len(), 1);
    }
}
