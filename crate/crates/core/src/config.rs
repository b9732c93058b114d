//! Flat `key=value` run configuration.
//!
//! Blank lines and `#` comments are skipped. Every key has a default, so an
//! empty file is valid; unknown keys are rejected by name.

use std::fs;
use std::path::Path;

use crate::assembler::{DetectConfig, TrainConfig};
use crate::error::{Result, RtnError};
use crate::evalbench::DEFAULT_IOU;
use crate::model::ModelConfig;
use crate::synthcorpus::SceneConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub scene: SceneConfig,
    pub eval_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            scene: SceneConfig::default(),
            eval_iou: DEFAULT_IOU,
        }
    }
}

/// `(key, description)` for every accepted key.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "training seed (init, sampling, jitter)"),
    ("scale_shortest", "resize rule: shortest side limit"),
    ("scale_longest", "resize rule: longest side limit"),
    ("anchor_heights", "comma-separated anchor heights in pixels"),
    ("pos_iou", "anchor positive IoU threshold"),
    ("neg_iou", "anchor negative IoU threshold"),
    ("stage16_channels", "backbone stride-16 channels"),
    ("stage32_channels", "backbone stride-32 channels"),
    ("fused_channels", "fused feature channels"),
    ("blocks_per_stage", "residual blocks per backbone stage"),
    ("rpn_hidden", "recurrent hidden size per direction"),
    ("head_hidden", "regression head hidden width"),
    ("pool_bins", "region pooling grid side"),
    ("stage1_epochs", "stage-one epochs"),
    ("stage1_lr", "stage-one learning rate (backbone, fusion, RPN)"),
    ("stage1_momentum", "stage-one momentum"),
    ("stage1_images_per_step", "stage-one images per update"),
    ("stage2_epochs", "stage-two epochs"),
    ("stage2_lr", "stage-two learning rate (regression head)"),
    ("stage2_momentum", "stage-two momentum"),
    ("stage2_images_per_step", "stage-two images per update"),
    ("anchor_batch", "anchors sampled per image"),
    ("rpn_lambda", "weight of the RPN regression term"),
    ("jitter_per_word", "stage-two jittered boxes per word"),
    ("jitter_center", "stage-two centre shift bound (fraction of width)"),
    ("jitter_width_min", "stage-two minimum width factor"),
    ("jitter_width_max", "stage-two maximum width factor"),
    ("jitter_snap", "snap stage-two boxes to the 16-px grid (true/false)"),
    ("score_threshold", "text score threshold for proposals"),
    ("max_gap_px", "connection: max horizontal centre distance"),
    ("min_v_overlap", "connection: min vertical IoU"),
    ("regression", "apply the x/w regression head at detection (true/false)"),
    ("eval_iou", "IoU threshold for evaluation"),
    ("noise", "generator pixel noise standard deviation"),
    ("words_min", "generator minimum words per image"),
    ("words_max", "generator maximum words per image"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RtnError::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| RtnError::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RtnError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "scale_shortest" => {
                t.limits.shortest = parse(key, v)?;
                self.detect.limits.shortest = t.limits.shortest;
            }
            "scale_longest" => {
                t.limits.longest = parse(key, v)?;
                self.detect.limits.longest = t.limits.longest;
            }
            "anchor_heights" => {
                m.anchors.heights = v.split(',').map(|h| parse(key, h.trim())).collect::<Result<_>>()?;
            }
            "pos_iou" => m.anchors.pos_iou = parse(key, v)?,
            "neg_iou" => m.anchors.neg_iou = parse(key, v)?,
            "stage16_channels" => m.backbone.stage16_channels = parse(key, v)?,
            "stage32_channels" => m.backbone.stage32_channels = parse(key, v)?,
            "fused_channels" => m.backbone.fused_channels = parse(key, v)?,
            "blocks_per_stage" => m.backbone.blocks_per_stage = parse(key, v)?,
            "rpn_hidden" => m.rpn_hidden = parse(key, v)?,
            "head_hidden" => m.head_hidden = parse(key, v)?,
            "pool_bins" => m.pool_bins = parse(key, v)?,
            "stage1_epochs" => t.stage1.epochs = parse(key, v)?,
            "stage1_lr" => t.stage1.learning_rate = parse(key, v)?,
            "stage1_momentum" => t.stage1.momentum = parse(key, v)?,
            "stage1_images_per_step" => t.stage1.images_per_step = parse(key, v)?,
            "stage2_epochs" => t.stage2.epochs = parse(key, v)?,
            "stage2_lr" => t.stage2.learning_rate = parse(key, v)?,
            "stage2_momentum" => t.stage2.momentum = parse(key, v)?,
            "stage2_images_per_step" => t.stage2.images_per_step = parse(key, v)?,
            "anchor_batch" => t.anchor_batch = parse(key, v)?,
            "rpn_lambda" => t.rpn_lambda = parse(key, v)?,
            "jitter_per_word" => t.jitter.per_word = parse(key, v)?,
            "jitter_center" => t.jitter.center = parse(key, v)?,
            "jitter_width_min" => t.jitter.width.0 = parse(key, v)?,
            "jitter_width_max" => t.jitter.width.1 = parse(key, v)?,
            "jitter_snap" => t.jitter.snap = parse(key, v)?,
            "score_threshold" => self.detect.score_threshold = parse(key, v)?,
            "max_gap_px" => self.detect.max_gap_px = parse(key, v)?,
            "min_v_overlap" => self.detect.min_v_overlap = parse(key, v)?,
            "regression" => self.detect.regression = parse(key, v)?,
            "eval_iou" => self.eval_iou = parse(key, v)?,
            "noise" => self.scene.noise = parse(key, v)?,
            "words_min" => self.scene.words.0 = parse(key, v)?,
            "words_max" => self.scene.words.1 = parse(key, v)?,
            _ => return Err(RtnError::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax [`RunConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let (t, m) = (&self.train, &self.model);
        let v = match key {
            "seed" => t.seed.to_string(),
            "scale_shortest" => t.limits.shortest.to_string(),
            "scale_longest" => t.limits.longest.to_string(),
            "anchor_heights" => m.anchors.heights.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "pos_iou" => m.anchors.pos_iou.to_string(),
            "neg_iou" => m.anchors.neg_iou.to_string(),
            "stage16_channels" => m.backbone.stage16_channels.to_string(),
            "stage32_channels" => m.backbone.stage32_channels.to_string(),
            "fused_channels" => m.backbone.fused_channels.to_string(),
            "blocks_per_stage" => m.backbone.blocks_per_stage.to_string(),
            "rpn_hidden" => m.rpn_hidden.to_string(),
            "head_hidden" => m.head_hidden.to_string(),
            "pool_bins" => m.pool_bins.to_string(),
            "stage1_epochs" => t.stage1.epochs.to_string(),
            "stage1_lr" => t.stage1.learning_rate.to_string(),
            "stage1_momentum" => t.stage1.momentum.to_string(),
            "stage1_images_per_step" => t.stage1.images_per_step.to_string(),
            "stage2_epochs" => t.stage2.epochs.to_string(),
            "stage2_lr" => t.stage2.learning_rate.to_string(),
            "stage2_momentum" => t.stage2.momentum.to_string(),
            "stage2_images_per_step" => t.stage2.images_per_step.to_string(),
            "anchor_batch" => t.anchor_batch.to_string(),
            "rpn_lambda" => t.rpn_lambda.to_string(),
            "jitter_per_word" => t.jitter.per_word.to_string(),
            "jitter_center" => t.jitter.center.to_string(),
            "jitter_width_min" => t.jitter.width.0.to_string(),
            "jitter_width_max" => t.jitter.width.1.to_string(),
            "jitter_snap" => t.jitter.snap.to_string(),
            "score_threshold" => self.detect.score_threshold.to_string(),
            "max_gap_px" => self.detect.max_gap_px.to_string(),
            "min_v_overlap" => self.detect.min_v_overlap.to_string(),
            "regression" => self.detect.regression.to_string(),
            "eval_iou" => self.eval_iou.to_string(),
            "noise" => self.scene.noise.to_string(),
            "words_min" => self.scene.words.0.to_string(),
            "words_max" => self.scene.words.1.to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if !(0.0..=1.0).contains(&self.eval_iou) {
            return Err(RtnError::Config(format!("eval_iou {} outside [0, 1]", self.eval_iou)));
        }
        Ok(())
    }
}
