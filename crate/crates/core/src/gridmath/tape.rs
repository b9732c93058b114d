//! Operation tape for reverse-mode differentiation.
//!
//! Forward calls append a node holding the produced [`Grid`] and enough
//! bookkeeping to propagate gradients. [`Tape::backward`] replays the nodes
//! in reverse recording order, visiting each exactly once.

use crate::error::{Result, RtnError};
use crate::geom::BBox;

use super::grid::Grid;
use super::kernels::{self, RnnDir};
use super::loss::{smooth_l1, smooth_l1_grad, softmax_cross_entropy, softmax_cross_entropy_grad};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of the width-wise bidirectional recurrence.
#[derive(Debug, Clone, Copy)]
pub struct RnnParams {
    pub fwd_wx: Var,
    pub fwd_wh: Var,
    pub fwd_b: Var,
    pub bwd_wx: Var,
    pub bwd_wh: Var,
    pub bwd_b: Var,
}

impl RnnParams {
    fn vars(&self) -> [Var; 6] {
        [
            self.fwd_wx,
            self.fwd_wh,
            self.fwd_b,
            self.bwd_wx,
            self.bwd_wh,
            self.bwd_b,
        ]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    TransposedConv2d {
        input: Var,
        kernel: Var,
        stride: usize,
    },
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Sum(Var),
    BiRnn {
        input: Var,
        params: RnnParams,
        hidden: usize,
    },
    RoiPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        targets: Vec<f64>,
        rows: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::TransposedConv2d { .. } => "transposed_conv2d",
            Op::Add(..) => "add",
            Op::Relu(_) => "relu",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::BiRnn { .. } => "birnn_width",
            Op::RoiPool { .. } => "roi_max_pool",
            Op::Linear { .. } => "linear",
            Op::Gather { .. } => "gather",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Grid,
    op: Op,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `var`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(var).len()])
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Grid {
        &self.nodes[var.0].value
    }

    /// Names of the recorded operations, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Grid, op: Op) -> Var {
        debug_assert!(value.all_finite() || matches!(op, Op::Leaf));
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter value.
    pub fn leaf(&mut self, value: Grid) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Upsampling by `stride` with a `[C_in, C_out, stride, stride]` kernel.
    pub fn transposed_conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let out = kernels::transposed_conv2d_forward(self.value(input), self.value(kernel), stride)?;
        Ok(self.push(out, Op::TransposedConv2d { input, kernel, stride }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ga, gb) = (self.value(a), self.value(b));
        if ga.shape() != gb.shape() {
            return Err(RtnError::FusionShape {
                expected: ga.shape().to_vec(),
                actual: gb.shape().to_vec(),
            });
        }
        let values = ga.values().iter().zip(gb.values()).map(|(x, y)| x + y).collect();
        let out = Grid::new(ga.shape().to_vec(), values)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let g = self.value(a);
        let values = g.values().iter().map(|&x| x.max(0.0)).collect();
        let out = Grid::new(g.shape().to_vec(), values).expect("same shape");
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let g = self.value(a);
        let values = g.values().iter().map(|&x| x * factor).collect();
        let out = Grid::new(g.shape().to_vec(), values).expect("same shape");
        self.push(out, Op::Scale(a, factor))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.push(Grid::scalar(s), Op::Sum(a))
    }

    /// Forward and backward plain tanh recurrences over the width axis of
    /// every row, concatenated along channels.
    pub fn birnn_width(&mut self, input: Var, hidden: usize, params: RnnParams) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if hidden == 0 || w == 0 {
            return Err(RtnError::Shape(format!(
                "recurrence needs hidden >= 1 and width >= 1, got {hidden} and {w}"
            )));
        }
        let expect: [(Var, Vec<usize>); 6] = [
            (params.fwd_wx, vec![hidden, c]),
            (params.fwd_wh, vec![hidden, hidden]),
            (params.fwd_b, vec![hidden]),
            (params.bwd_wx, vec![hidden, c]),
            (params.bwd_wh, vec![hidden, hidden]),
            (params.bwd_b, vec![hidden]),
        ];
        for (v, shape) in &expect {
            if self.value(*v).shape() != shape.as_slice() {
                return Err(RtnError::Config(format!(
                    "recurrence parameter has shape {:?}, expected {:?}",
                    self.value(*v).shape(),
                    shape
                )));
            }
        }
        let dirs = self.rnn_dirs(&params);
        let out = kernels::birnn_forward(self.value(input).values(), (n, c, h, w), hidden, dirs[0], dirs[1]);
        let out = Grid::new(vec![n, 2 * hidden, h, w], out)?;
        Ok(self.push(out, Op::BiRnn { input, params, hidden }))
    }

    fn rnn_dirs(&self, p: &RnnParams) -> [RnnDir<'_>; 2] {
        [
            RnnDir {
                wx: self.value(p.fwd_wx).values(),
                wh: self.value(p.fwd_wh).values(),
                b: self.value(p.fwd_b).values(),
            },
            RnnDir {
                wx: self.value(p.bwd_wx).values(),
                wh: self.value(p.bwd_wh).values(),
                b: self.value(p.bwd_b).values(),
            },
        ]
    }

    /// Max pooling of regions given in feature-cell coordinates to a fixed
    /// `bins x bins` grid. Output `[R, C, bins, bins]`.
    pub fn roi_max_pool(&mut self, input: Var, regions: &[BBox], bins: usize) -> Result<Var> {
        let (out, argmax) = kernels::roi_max_pool(self.value(input), regions, bins)?;
        Ok(self.push(out, Op::RoiPool { input, argmax }))
    }

    /// Fully connected map over rows; trailing axes of `input` are flattened.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    /// Selects flat elements of `input` into a new grid of `shape`.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(RtnError::Shape(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let values = indices.iter().map(|&i| src.values()[i]).collect();
        let out = Grid::new(shape, values)?;
        Ok(self.push(out, Op::Gather { input, indices }))
    }

    /// Mean two-class cross-entropy over the rows of `logits: [R, 2]`.
    /// Zero when `R == 0`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let g = self.value(logits);
        if g.rank() != 2 || g.shape()[1] != 2 || g.shape()[0] != labels.len() {
            return Err(RtnError::Shape(format!(
                "cross-entropy expects [{}, 2] logits, got {:?}",
                labels.len(),
                g.shape()
            )));
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let v = g.values();
            total += softmax_cross_entropy([v[2 * r], v[2 * r + 1]], label)?;
        }
        let mean = if labels.is_empty() { 0.0 } else { total / labels.len() as f64 };
        Ok(self.push(Grid::scalar(mean), Op::SoftmaxCe { logits, labels }))
    }

    /// Mean over rows of the row-wise sum of `smooth_l1(pred - target)`.
    /// `pred` is `[R, D]`, `targets` is flat `R * D`. Zero when `R == 0`.
    pub fn smooth_l1_loss(&mut self, pred: Var, targets: Vec<f64>) -> Result<Var> {
        let g = self.value(pred);
        if g.len() != targets.len() || g.rank() == 0 {
            return Err(RtnError::Shape(format!(
                "smooth-L1 targets of length {} for prediction {:?}",
                targets.len(),
                g.shape()
            )));
        }
        let rows = g.shape()[0];
        let total: f64 = g.values().iter().zip(&targets).map(|(p, t)| smooth_l1(p - t)).sum();
        let mean = if rows == 0 { 0.0 } else { total / rows as f64 };
        Ok(self.push(Grid::scalar(mean), Op::SmoothL1 { pred, targets, rows }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(RtnError::Usage(
                "backward called before any forward computation was recorded".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(RtnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::with_capacity(loss.0 + 1);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, d: &[f64]) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d.to_vec()),
            }
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (di, dk, db) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    self.value(*bias),
                    *stride,
                    *pad,
                    g,
                )?;
                acc(grads, *input, &di);
                acc(grads, *kernel, &dk);
                acc(grads, *bias, &db);
            }
            Op::TransposedConv2d { input, kernel, stride } => {
                let (di, dk) = kernels::transposed_conv2d_backward(self.value(*input), self.value(*kernel), *stride, g)?;
                acc(grads, *input, &di);
                acc(grads, *kernel, &dk);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = self
                    .value(*a)
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *a, &d);
            }
            Op::Scale(a, f) => {
                let d: Vec<f64> = g.iter().map(|x| x * f).collect();
                acc(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                acc(grads, *a, &d);
            }
            Op::BiRnn { input, params, hidden } => {
                let x = self.value(*input);
                let dims = x.dims4()?;
                let (dx, [gf, gb]) = kernels::birnn_backward(
                    x.values(),
                    node.value.values(),
                    dims,
                    *hidden,
                    self.rnn_dirs(params),
                    g,
                );
                acc(grads, *input, &dx);
                let [fwx, fwh, fb, bwx, bwh, bb] = params.vars();
                acc(grads, fwx, &gf.wx);
                acc(grads, fwh, &gf.wh);
                acc(grads, fb, &gf.b);
                acc(grads, bwx, &gb.wx);
                acc(grads, bwh, &gb.wh);
                acc(grads, bb, &gb.b);
            }
            Op::RoiPool { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] += gv;
                }
                acc(grads, *input, &d);
            }
            Op::Linear { input, weight, bias } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*input), self.value(*weight), g);
                acc(grads, *input, &dx);
                acc(grads, *weight, &dw);
                acc(grads, *bias, &db);
            }
            Op::Gather { input, indices } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&idx, &gv) in indices.iter().zip(g) {
                    d[idx] += gv;
                }
                acc(grads, *input, &d);
            }
            Op::SoftmaxCe { logits, labels } => {
                let v = self.value(*logits).values();
                let scale = if labels.is_empty() { 0.0 } else { g[0] / labels.len() as f64 };
                let mut d = vec![0.0; v.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let gr = softmax_cross_entropy_grad([v[2 * r], v[2 * r + 1]], label)?;
                    d[2 * r] = gr[0] * scale;
                    d[2 * r + 1] = gr[1] * scale;
                }
                acc(grads, *logits, &d);
            }
            Op::SmoothL1 { pred, targets, rows } => {
                let scale = if *rows == 0 { 0.0 } else { g[0] / *rows as f64 };
                let d: Vec<f64> = self
                    .value(*pred)
                    .values()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| smooth_l1_grad(p - t) * scale)
                    .collect();
                acc(grads, *pred, &d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_is_usage_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(RtnError::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::zeros(&[3]));
        assert!(matches!(tape.backward(a), Err(RtnError::Usage(_))));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::filled(&[2], 1.0));
        let p = tape.leaf(Grid::filled(&[2], 5.0));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).is_none());
        assert_eq!(g.wrt(&tape, p), vec![0.0, 0.0]);
    }

    #[test]
    fn visits_reachable_nodes_once_in_reverse_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::filled(&[3], 2.0));
        let b = tape.relu(a);
        let c = tape.add(a, b).unwrap();
        let d = tape.scale(c, 3.0);
        let s = tape.sum(d);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visit_order(), &[4, 3, 2, 1, 0]);
        // d/da of 3 * (a + relu(a)) with a > 0
        assert_eq!(g.get(a).unwrap(), &[6.0; 3]);
    }

    #[test]
    fn add_shape_mismatch_is_fusion_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::zeros(&[1, 1, 14, 14]));
        let b = tape.leaf(Grid::zeros(&[1, 1, 7, 7]));
        assert!(matches!(tape.add(a, b), Err(RtnError::FusionShape { .. })));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(a);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Grid::new(vec![2, 2], vec![0.5, -1.5, 2.0, 3.25]).unwrap());
        let z = tape.leaf(Grid::zeros(&[2, 2]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
    }
}
