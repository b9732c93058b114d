//! The full detector: parameters, configuration and the shared forward
//! pass up to the RPN outputs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, FusedFeature};
use crate::error::{Result, RtnError};
use crate::gridmath::{modelfile, uniform_fan_in, BoundParams, Grid, ParamStore, Tape};
use crate::vrpn::{self, AnchorConfig, RpnConfig, RpnOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn_hidden: usize,
    pub anchors: AnchorConfig,
    pub head_hidden: usize,
    pub pool_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rpn_hidden: 32,
            anchors: AnchorConfig::default(),
            head_hidden: 64,
            pool_bins: 4,
        }
    }
}

impl ModelConfig {
    pub fn rpn(&self) -> RpnConfig {
        RpnConfig {
            fused_channels: self.backbone.fused_channels,
            hidden: self.rpn_hidden,
            num_heights: self.anchors.num_heights(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if self.rpn_hidden == 0 || self.head_hidden == 0 || self.pool_bins == 0 {
            return Err(RtnError::Config("rpn_hidden, head_hidden and pool_bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RtnModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Network input: ink density `1 - intensity`, so zero padding reads as
/// blank paper.
pub fn ink(image: &Grid) -> Grid {
    let mut g = image.clone();
    g.clear_grad();
    g.set_requires_grad(false);
    for v in g.values_mut() {
        *v = 1.0 - *v;
    }
    g
}

pub(crate) fn init_regression_head(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.backbone.fused_channels * cfg.pool_bins * cfg.pool_bins;
    let h = cfg.head_hidden;
    store.insert("regression_head.fc1.weight", uniform_fan_in(&[h, d], d, rng))?;
    store.insert("regression_head.fc1.bias", Grid::zeros(&[h]))?;
    // zero output layer: an untrained head leaves line boxes unchanged
    store.insert("regression_head.fc2.weight", Grid::zeros(&[2, h]))?;
    store.insert("regression_head.fc2.bias", Grid::zeros(&[2]))?;
    Ok(())
}

fn dim(store: &ParamStore, name: &str, axis: usize) -> Result<usize> {
    store
        .get(name)
        .and_then(|g| g.shape().get(axis).copied())
        .ok_or_else(|| RtnError::ModelFormat(format!("missing or malformed parameter `{name}`")))
}

impl RtnModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, &mut params, &mut rng)?;
        vrpn::init_params(&config.rpn(), &mut params, &mut rng)?;
        init_regression_head(&config, &mut params, &mut rng)?;
        Ok(RtnModel { config, params })
    }

    /// Rebuilds the configuration from parameter shapes; anchor heights are
    /// not stored in the file and must agree with the head width.
    pub fn from_params(params: ParamStore, anchors: AnchorConfig) -> Result<Self> {
        let blocks = params
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.s16.block") && n.ends_with(".weight"))
            .count();
        let fused = dim(&params, "fusion.proj16.weight", 0)?;
        let k2 = dim(&params, "rpn_heads.cls.weight", 0)?;
        if k2 != 2 * anchors.num_heights() {
            return Err(RtnError::Config(format!(
                "model predicts {} anchor heights but {} are configured",
                k2 / 2,
                anchors.num_heights()
            )));
        }
        let d = dim(&params, "regression_head.fc1.weight", 1)?;
        let bins = ((d / fused.max(1)) as f64).sqrt().round() as usize;
        if bins * bins * fused != d {
            return Err(RtnError::ModelFormat(format!("regression head input {d} is not channels x bins^2")));
        }
        let config = ModelConfig {
            backbone: BackboneConfig {
                stage16_channels: dim(&params, "backbone.down16.weight", 0)?,
                stage32_channels: dim(&params, "backbone.down32.weight", 0)?,
                fused_channels: fused,
                blocks_per_stage: blocks,
            },
            rpn_hidden: dim(&params, "rpn_heads.rnn.fwd.wh", 0)?,
            anchors,
            head_hidden: dim(&params, "regression_head.fc1.weight", 0)?,
            pool_bins: bins,
        };
        config.validate()?;
        // the file must hold exactly the parameters of this configuration
        let mut checked = RtnModel::init(config.clone(), 0)?.params;
        if checked.len() != params.len() {
            return Err(RtnError::ModelFormat(format!(
                "model file holds {} parameters, configuration expects {}",
                params.len(),
                checked.len()
            )));
        }
        checked.load_values(&params)?;
        let params = checked;
        Ok(RtnModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        modelfile::save(&self.params, path)
    }

    pub fn load(path: &Path, anchors: AnchorConfig) -> Result<Self> {
        RtnModel::from_params(modelfile::load(path)?, anchors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        modelfile::to_bytes(&self.params)
    }
}

/// Tape nodes of one forward pass up to the RPN heads.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub fused: FusedFeature,
    pub rpn: RpnOutput,
}

/// Backbone, fusion and RPN on an intensity image `[1, 1, H, W]`.
pub fn forward(tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig, image: &Grid) -> Result<ForwardNodes> {
    let out = backbone::backbone_forward(tape, p, &cfg.backbone, &ink(image))?;
    let fused = backbone::fuse_hierarchy(tape, p, out.f16, out.f32map)?;
    let rpn = vrpn::rpn_forward(tape, p, &fused, &cfg.rpn())?;
    Ok(ForwardNodes { fused, rpn })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage16_channels: 8,
                stage32_channels: 12,
                fused_channels: 8,
                blocks_per_stage: 1,
            },
            rpn_hidden: 4,
            head_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_inferred_from_params() {
        let m = RtnModel::init(small(), 3).unwrap();
        let back = RtnModel::from_params(modelfile::from_bytes(&m.to_bytes()).unwrap(), AnchorConfig::default()).unwrap();
        assert_eq!(back.config, m.config);
        let wrong = AnchorConfig {
            heights: vec![10.0, 20.0],
            ..AnchorConfig::default()
        };
        assert!(RtnModel::from_params(m.params.clone(), wrong).is_err());
    }

    #[test]
    fn forward_shapes() {
        let m = RtnModel::init(small(), 1).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let img = Grid::filled(&[1, 1, 64, 96], 0.8);
        let f = forward(&mut tape, &p, &m.config, &img).unwrap();
        assert_eq!(tape.value(f.fused.var).shape(), &[1, 8, 4, 6]);
        assert_eq!(tape.value(f.rpn.cls).shape(), &[1, 20, 4, 6]);
        assert_eq!(tape.value(f.rpn.reg).shape(), &[1, 20, 4, 6]);
    }
}
