//! Two-stage training: backbone, fusion and RPN first with the regression
//! head frozen, then the regression head alone.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode_xw, regression_forward};
use crate::backbone::feature_shape_for;
use crate::error::{Result, RtnError};
use crate::geom::BBox;
use crate::gridmath::{Grid, GroupName, Sgd, Tape};
use crate::model::{self, ModelConfig, RtnModel};
use crate::synthcorpus::{apply_scale_rule, load_manifest, pgm, resize_bilinear, CorpusManifest, ScaleLimits, WordAnnotation};
use crate::vrpn::{self, AnchorConfig, LabelAssignment};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[1, 1, H, W]` intensities.
    pub image: Grid,
    pub words: Vec<WordAnnotation>,
}

impl TrainSample {
    /// Every image of a manifest with its words.
    pub fn load_manifest(path: &Path) -> Result<Vec<TrainSample>> {
        let manifest = load_manifest(path)?;
        manifest
            .entries
            .iter()
            .map(|e| {
                Ok(TrainSample {
                    image: pgm::read_grid(&CorpusManifest::image_path(path, e))?,
                    words: e.annotations(),
                })
            })
            .collect()
    }
}

/// A training image after the resize rule, with its anchor labels.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub image: Grid,
    pub words: Vec<WordAnnotation>,
    pub extent: (usize, usize),
    pub assignment: LabelAssignment,
}

pub fn prepare_sample(sample: &TrainSample, anchors: &AnchorConfig, limits: ScaleLimits) -> Result<PreparedSample> {
    let (_, _, h, w) = sample.image.dims4()?;
    let scaled = apply_scale_rule((h, w), limits);
    let image = resize_bilinear(&sample.image, scaled.extent)?;
    let words: Vec<WordAnnotation> = sample.words.iter().map(|wd| wd.scaled_into(&scaled)).collect();
    let grid = vrpn::generate_anchors(feature_shape_for(scaled.extent)?, anchors);
    let mut slices = Vec::new();
    for (i, wd) in words.iter().enumerate() {
        slices.extend(vrpn::slice_ground_truth(i, wd)?);
    }
    let spaces = vrpn::derive_space_boxes(&words);
    let assignment = vrpn::assign_labels(&grid, &slices, &spaces, anchors);
    Ok(PreparedSample {
        image,
        words,
        extent: scaled.extent,
        assignment,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub images_per_step: usize,
}

/// Imperfect line boxes for stage two: ground-truth boxes shifted and
/// stretched horizontally, then snapped to the 16-px cell grid like
/// connected slices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    pub per_word: usize,
    /// Centre shift bound as a fraction of the word width.
    pub center: f64,
    pub width: (f64, f64),
    pub snap: bool,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            per_word: 4,
            center: 0.3,
            width: (0.7, 1.4),
            snap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub anchor_batch: usize,
    pub rpn_lambda: f64,
    pub jitter: JitterConfig,
    pub limits: ScaleLimits,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig {
                epochs: 20,
                learning_rate: 0.01,
                momentum: 0.9,
                images_per_step: 4,
            },
            stage2: StageConfig {
                epochs: 10,
                learning_rate: 0.01,
                momentum: 0.9,
                images_per_step: 4,
            },
            anchor_batch: 128,
            rpn_lambda: 1.0,
            jitter: JitterConfig::default(),
            limits: ScaleLimits::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if !(s.learning_rate >= 0.0) || s.images_per_step == 0 {
                return Err(RtnError::Config(format!(
                    "{name}: learning rate must be non-negative and images_per_step positive"
                )));
            }
        }
        if self.anchor_batch < 2 {
            return Err(RtnError::Config("anchor_batch must be at least 2".into()));
        }
        let j = &self.jitter;
        if j.per_word == 0 || !(j.center >= 0.0) || !(0.0 < j.width.0 && j.width.0 <= j.width.1) {
            return Err(RtnError::Config("invalid stage-two jitter settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
}

fn step_seed(seed: u64, stage: u8, epoch: usize, image: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stage as u64) << 56));
    rng.set_stream(((epoch as u64) << 32) | image as u64);
    rng.gen()
}

/// Runs one stage: mean per-image gradients over `images_per_step`
/// images, then a momentum step restricted to groups with nonzero rate.
fn run_stage<F>(
    model: &mut RtnModel,
    n: usize,
    stage: u8,
    cfg: &StageConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(EpochLog),
    per_image: F,
) -> Result<Vec<EpochLog>>
where
    F: Fn(&RtnModel, usize, u64) -> Result<Option<(f64, Vec<Vec<f64>>)>> + Sync + Send,
{
    let mut sgd = Sgd::new(cfg.momentum)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, stage, epoch, usize::MAX >> 32));
        order.shuffle(&mut rng);
        let (mut total, mut counted) = (0.0, 0usize);
        for chunk in order.chunks(cfg.images_per_step) {
            let results = crate::par::map(chunk, |&i| per_image(model, i, step_seed(seed, stage, epoch, i)));
            let mut sum: Option<Vec<Vec<f64>>> = None;
            let mut used = 0usize;
            for r in results {
                let Some((loss, grads)) = r? else { continue };
                total += loss;
                counted += 1;
                used += 1;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = sum else { continue };
            let inv = 1.0 / used as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            model.params.set_grads(&grads)?;
            sgd.step(model.params.groups_mut())?;
            model.params.clear_grads();
        }
        let log = EpochLog {
            stage,
            epoch,
            loss: if counted == 0 { 0.0 } else { total / counted as f64 },
        };
        on_epoch(log);
        logs.push(log);
    }
    Ok(logs)
}

fn set_rates(model: &mut RtnModel, detector: f64, head: f64) {
    for g in [GroupName::Backbone, GroupName::Fusion, GroupName::RpnHeads] {
        model.params.set_learning_rate(g, detector);
    }
    model.params.set_learning_rate(GroupName::RegressionHead, head);
}

/// Stage one: backbone, fusion and RPN train; the regression head's rate
/// is 0.
pub fn stage_one(
    model: &mut RtnModel,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RtnError::Config("training corpus is empty".into()));
    }
    set_rates(model, cfg.stage1.learning_rate, 0.0);
    let logs = run_stage(model, data.len(), 1, &cfg.stage1, cfg.seed, on_epoch, |m, i, seed| {
        let s = &data[i];
        let batch = vrpn::sample_minibatch(&s.assignment, cfg.anchor_batch, seed);
        if batch.is_empty() {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let out = model::forward(&mut tape, &p, &m.config, &s.image)?;
        let loss = vrpn::rpn_loss(&mut tape, &out.rpn, &s.assignment, &batch, cfg.rpn_lambda)?;
        let grads = tape.backward(loss)?;
        Ok(Some((tape.value(loss).item(), p.flat_grads(&tape, &grads))))
    })?;
    set_rates(model, 0.0, 0.0);
    Ok(logs)
}

/// Jittered, optionally grid-snapped copies of each word box paired with
/// the word box itself. The y-extent is the word's.
pub fn jitter_line_boxes<R: Rng>(
    words: &[WordAnnotation],
    cfg: &JitterConfig,
    extent: (usize, usize),
    rng: &mut R,
) -> Vec<(BBox, BBox)> {
    let cell = crate::backbone::STRIDE_FINE as f64;
    let (h, w) = (extent.0 as f64, extent.1 as f64);
    let mut out = Vec::with_capacity(words.len() * cfg.per_word);
    for wd in words {
        let gt = wd.bbox();
        for _ in 0..cfg.per_word {
            let cx = gt.cx() + rng.gen_range(-cfg.center..=cfg.center) * gt.width();
            let bw = gt.width() * rng.gen_range(cfg.width.0..=cfg.width.1);
            let (mut x0, mut x1) = (cx - bw / 2.0, cx + bw / 2.0);
            if cfg.snap {
                x0 = (x0 / cell).round() * cell;
                x1 = ((x1 / cell).round() * cell).max(x0 + cell);
            }
            let b = BBox::new(x0, gt.y0, x1, gt.y1).clip(w, h);
            if b.width() > 0.0 && b.height() > 0.0 {
                out.push((b, gt));
            }
        }
    }
    out
}

/// Stage two: only the regression head trains, on jittered line boxes over
/// cached fused features.
pub fn stage_two(
    model: &mut RtnModel,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(RtnError::Config("training corpus is empty".into()));
    }
    set_rates(model, 0.0, cfg.stage2.learning_rate);
    let frozen = &*model;
    let fused: Vec<Grid> = crate::par::map(data, |s| -> Result<Grid> {
        let mut tape = Tape::new();
        let p = frozen.params.bind(&mut tape);
        let out = model::forward(&mut tape, &p, &frozen.config, &s.image)?;
        Ok(tape.value(out.fused.var).clone())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let bins = model.config.pool_bins;
    let logs = run_stage(model, data.len(), 2, &cfg.stage2, cfg.seed, on_epoch, |m, i, seed| {
        let s = &data[i];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = jitter_line_boxes(&s.words, &cfg.jitter, s.extent, &mut rng);
        if pairs.is_empty() {
            return Ok(None);
        }
        let mut targets = Vec::with_capacity(2 * pairs.len());
        for (b, gt) in &pairs {
            let (vx, vw) = encode_xw(b, gt)?;
            targets.extend([vx, vw]);
        }
        let boxes: Vec<BBox> = pairs.iter().map(|(b, _)| *b).collect();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let f = tape.leaf(fused[i].clone());
        let out = regression_forward(&mut tape, &p, f, &boxes, s.extent, bins)?;
        let loss = tape.smooth_l1_loss(out.offsets, targets)?;
        let grads = tape.backward(loss)?;
        Ok(Some((tape.value(loss).item(), p.flat_grads(&tape, &grads))))
    })?;
    set_rates(model, 0.0, 0.0);
    Ok(logs)
}

/// Initializes a model and runs both stages.
pub fn two_stage_train(
    samples: &[TrainSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(EpochLog),
) -> Result<(RtnModel, Vec<EpochLog>)> {
    if samples.is_empty() {
        return Err(RtnError::Config("training corpus is empty".into()));
    }
    cfg.validate()?;
    let data = crate::par::map(samples, |s| prepare_sample(s, &model_cfg.anchors, cfg.limits))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut model = RtnModel::init(model_cfg.clone(), cfg.seed)?;
    let mut logs = stage_one(&mut model, &data, cfg, on_epoch)?;
    logs.extend(stage_two(&mut model, &data, cfg, on_epoch)?);
    Ok((model, logs))
}
