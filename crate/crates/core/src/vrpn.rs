//! Vertical-mechanism region proposal network.
//!
//! Anchors are fixed 16-pixel-wide boxes on the stride-16 grid with `K`
//! candidate heights. Ground-truth words are cut into 16-pixel slices, gaps
//! between same-line words become space boxes, and every anchor receives
//! exactly one label. The network predicts a text/non-text score and a
//! `(dy, dh)` vertical refinement per anchor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FusedFeature, STRIDE_FINE};
use crate::error::{Result, RtnError};
use crate::geom::{interval_iou, BBox};
use crate::gridmath::loss::softmax2;
use crate::gridmath::{uniform_fan_in, BoundParams, Grid, ParamStore, RnnParams, Tape, Var, CLASS_BACKGROUND, CLASS_TEXT};
use crate::synthcorpus::WordAnnotation;

pub use crate::geom::iou;

/// Width of every anchor, slice and vertical proposal.
pub const SLICE_WIDTH: f64 = 16.0;
/// IoU above which an anchor overlapping a space box is a space negative.
pub const SPACE_NEG_IOU: f64 = 0.5;
/// Minimum horizontal overlap (pixels) for a slice to be positive.
pub const MIN_SLICE_OVERLAP: f64 = 8.0;

pub const DEFAULT_HEIGHTS: [f64; 10] = [11.0, 16.0, 23.0, 33.0, 47.0, 67.0, 96.0, 137.0, 196.0, 280.0];

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub heights: Vec<f64>,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            heights: DEFAULT_HEIGHTS.to_vec(),
            pos_iou: 0.7,
            neg_iou: 0.3,
        }
    }
}

impl AnchorConfig {
    pub fn num_heights(&self) -> usize {
        self.heights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heights.is_empty() {
            return Err(RtnError::Config("at least one anchor height is required".into()));
        }
        if self.heights.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(RtnError::Config("anchor heights must be positive".into()));
        }
        if self.heights.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RtnError::Config("anchor heights must be strictly increasing".into()));
        }
        if !(self.neg_iou < self.pos_iou) {
            return Err(RtnError::Config(format!(
                "neg_iou {} must be below pos_iou {}",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub row: usize,
    pub col: usize,
    /// Index into [`AnchorConfig::heights`].
    pub k: usize,
    pub bbox: BBox,
}

impl Anchor {
    pub fn cy(&self) -> f64 {
        self.bbox.cy()
    }

    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

fn cell_center(i: usize) -> f64 {
    STRIDE_FINE as f64 * i as f64 + 0.5 * STRIDE_FINE as f64
}

/// All anchors of a `(rows, cols)` feature grid, ordered by row, column and
/// height index (`((row * cols) + col) * K + k`).
pub fn generate_anchors(feature_extent: (usize, usize), cfg: &AnchorConfig) -> Vec<Anchor> {
    let (rows, cols) = feature_extent;
    let mut out = Vec::with_capacity(rows * cols * cfg.num_heights());
    for row in 0..rows {
        for col in 0..cols {
            for (k, &h) in cfg.heights.iter().enumerate() {
                out.push(Anchor {
                    row,
                    col,
                    k,
                    bbox: BBox::from_center(cell_center(col), cell_center(row), SLICE_WIDTH, h),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceStatus {
    Positive,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtSlice {
    pub word_id: usize,
    pub cell: usize,
    pub bbox: BBox,
    pub status: SliceStatus,
}

/// Cuts a word into 16-pixel column slices.
///
/// A slice is positive when it overlaps the word by at least 8 pixels and
/// ignored otherwise; a word too narrow to reach 8 pixels in any cell keeps
/// its best-overlapping cell as the single positive.
pub fn slice_ground_truth(word_id: usize, word: &WordAnnotation) -> Result<Vec<GtSlice>> {
    let b = word.bbox();
    if !b.is_valid() {
        return Err(RtnError::Annotation(format!("word {word_id} has no area: {b:?}")));
    }
    let first = (b.x0 / SLICE_WIDTH).floor().max(0.0) as usize;
    let last = ((b.x1 / SLICE_WIDTH).ceil() as usize).max(first + 1);
    let mut out: Vec<GtSlice> = Vec::with_capacity(last - first);
    let mut overlaps = Vec::with_capacity(last - first);
    for cell in first..last {
        let c0 = cell as f64 * SLICE_WIDTH;
        let overlap = b.x1.min(c0 + SLICE_WIDTH) - b.x0.max(c0);
        if overlap <= 0.0 {
            continue;
        }
        overlaps.push(overlap);
        out.push(GtSlice {
            word_id,
            cell,
            bbox: BBox::new(c0, b.y0, c0 + SLICE_WIDTH, b.y1),
            status: if overlap >= MIN_SLICE_OVERLAP {
                SliceStatus::Positive
            } else {
                SliceStatus::Ignore
            },
        });
    }
    if !out.iter().any(|s| s.status == SliceStatus::Positive) {
        let best = overlaps
            .iter()
            .enumerate()
            .fold(0, |best, (i, &o)| if o > overlaps[best] { i } else { best });
        out[best].status = SliceStatus::Positive;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceBox {
    pub left_word: usize,
    pub right_word: usize,
    pub bbox: BBox,
}

/// Gap boxes between horizontally adjacent words on the same line.
///
/// Two words are on the same line when their vertical extents have 1-D IoU
/// of at least 0.5; they are adjacent when no other word intersects the gap.
/// Gaps of at least twice the pair's mean height are not spaces.
pub fn derive_space_boxes(words: &[WordAnnotation]) -> Vec<SpaceBox> {
    let boxes: Vec<BBox> = words.iter().map(WordAnnotation::bbox).collect();
    let mut out = Vec::new();
    for (i, a) in boxes.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            if i == j || b.x0 < a.x1 {
                continue;
            }
            let gap = b.x0 - a.x1;
            if gap <= 0.0 || interval_iou(a.y0, a.y1, b.y0, b.y1) < 0.5 {
                continue;
            }
            if gap >= a.height() + b.height() {
                continue;
            }
            let space = BBox::new(a.x1, a.y0.max(b.y0), b.x0, a.y1.min(b.y1));
            if !space.is_valid() {
                continue;
            }
            let blocked = boxes
                .iter()
                .enumerate()
                .any(|(k, c)| k != i && k != j && c.intersection_area(&space) > 0.0);
            if !blocked {
                out.push(SpaceBox {
                    left_word: i,
                    right_word: j,
                    bbox: space,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    SpaceNegative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    pub labels: Vec<Label>,
    /// Index into the slice list for positive anchors.
    pub matched_slice: Vec<Option<usize>>,
    /// `(dy, dh)` for positive anchors.
    pub regression_target: Vec<Option<(f64, f64)>>,
}

impl LabelAssignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// `(dy, dh)` that moves `anchor` onto the vertical extent of `target`.
pub fn encode_yh(anchor: &BBox, target: &BBox) -> (f64, f64) {
    let ha = anchor.height();
    ((target.cy() - anchor.cy()) / ha, (target.height() / ha).ln())
}

/// Inverse of [`encode_yh`]; x-extent is taken from the anchor.
pub fn decode_yh(anchor: &BBox, dy: f64, dh: f64) -> BBox {
    let ha = anchor.height();
    let cy = anchor.cy() + dy * ha;
    let h = ha * dh.exp();
    BBox::new(anchor.x0, cy - h / 2.0, anchor.x1, cy + h / 2.0)
}

/// Labels every anchor: positive (IoU >= pos_iou with a positive slice, or
/// the best anchor of that slice), space negative (IoU > 0.5 with a space
/// box), negative (IoU < neg_iou with every slice) or ignore.
pub fn assign_labels(anchors: &[Anchor], slices: &[GtSlice], spaces: &[SpaceBox], cfg: &AnchorConfig) -> LabelAssignment {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_pos: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut slice_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); slices.len()];

    let max_col = anchors.iter().map(|a| a.col + 1).max().unwrap_or(0);
    let mut by_col: Vec<Vec<usize>> = vec![Vec::new(); max_col];
    for (i, a) in anchors.iter().enumerate() {
        by_col[a.col].push(i);
    }
    for (si, s) in slices.iter().enumerate() {
        let Some(column) = by_col.get(s.cell) else {
            continue;
        };
        for &ai in column {
            let v = iou(&anchors[ai].bbox, &s.bbox);
            if v <= 0.0 {
                continue;
            }
            best_iou[ai] = best_iou[ai].max(v);
            if s.status == SliceStatus::Positive {
                if best_pos[ai].is_none_or(|(_, b)| v > b) {
                    best_pos[ai] = Some((si, v));
                }
                if v > slice_best[si].0 {
                    slice_best[si] = (v, Some(ai));
                }
            }
        }
    }

    let mut labels = vec![Label::Ignore; n];
    let mut matched = vec![None; n];
    for ai in 0..n {
        if let Some((si, v)) = best_pos[ai] {
            if v >= cfg.pos_iou {
                labels[ai] = Label::Positive;
                matched[ai] = Some(si);
            }
        }
    }
    for (si, &(_, best)) in slice_best.iter().enumerate() {
        if let Some(ai) = best {
            if labels[ai] != Label::Positive {
                labels[ai] = Label::Positive;
                matched[ai] = Some(si);
            }
        }
    }
    for ai in 0..n {
        if labels[ai] == Label::Positive {
            continue;
        }
        if spaces.iter().any(|s| iou(&anchors[ai].bbox, &s.bbox) > SPACE_NEG_IOU) {
            labels[ai] = Label::SpaceNegative;
        } else if best_iou[ai] < cfg.neg_iou {
            labels[ai] = Label::Negative;
        }
    }
    let regression_target = (0..n)
        .map(|ai| matched[ai].map(|si: usize| encode_yh(&anchors[ai].bbox, &slices[si].bbox)))
        .collect();
    LabelAssignment {
        labels,
        matched_slice: matched,
        regression_target,
    }
}

/// Anchor indices drawn for one training step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Minibatch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub space_negatives: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len() + self.space_negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every sampled index, sorted.
    pub fn indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .positives
            .iter()
            .chain(&self.negatives)
            .chain(&self.space_negatives)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }
}

/// Share of the negative quota reserved for space negatives.
pub const SPACE_SHARE: f64 = 0.1;

/// Draws at most `batch / 2` positives; negatives fill the rest, with about
/// 10% of them space negatives when the image has any.
pub fn sample_minibatch(assignment: &LabelAssignment, batch: usize, seed: u64) -> Minibatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |label: Label| -> Vec<usize> {
        assignment
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    };
    let mut pos = pick(Label::Positive);
    let mut neg = pick(Label::Negative);
    let mut space = pick(Label::SpaceNegative);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    space.shuffle(&mut rng);

    pos.truncate(batch / 2);
    let quota = batch - pos.len();
    let space_quota = ((quota as f64) * SPACE_SHARE).round() as usize;
    let n_space = space_quota.min(space.len());
    let n_neg = (quota - n_space).min(neg.len());
    // top up with further space negatives when plain negatives run out
    let n_space = (quota - n_neg).min(space.len()).max(n_space);
    neg.truncate(n_neg);
    space.truncate(n_space);
    pos.sort_unstable();
    neg.sort_unstable();
    space.sort_unstable();
    Minibatch {
        positives: pos,
        negatives: neg,
        space_negatives: space,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RpnConfig {
    pub fused_channels: usize,
    pub hidden: usize,
    pub num_heights: usize,
}

pub fn init_params<R: Rng>(cfg: &RpnConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    if cfg.hidden == 0 || cfg.num_heights == 0 {
        return Err(RtnError::Config("rpn hidden size and anchor count must be positive".into()));
    }
    let (f, h, k) = (cfg.fused_channels, cfg.hidden, cfg.num_heights);
    store.insert("rpn_heads.conv.weight", uniform_fan_in(&[f, f, 3, 3], f * 9, rng))?;
    store.insert("rpn_heads.conv.bias", Grid::zeros(&[f]))?;
    for dir in ["fwd", "bwd"] {
        store.insert(format!("rpn_heads.rnn.{dir}.wx"), uniform_fan_in(&[h, f], f, rng))?;
        store.insert(format!("rpn_heads.rnn.{dir}.wh"), uniform_fan_in(&[h, h], h, rng))?;
        store.insert(format!("rpn_heads.rnn.{dir}.bias"), Grid::zeros(&[h]))?;
    }
    store.insert("rpn_heads.cls.weight", uniform_fan_in(&[2 * k, 2 * h, 1, 1], 2 * h, rng))?;
    store.insert("rpn_heads.cls.bias", Grid::zeros(&[2 * k]))?;
    store.insert("rpn_heads.reg.weight", uniform_fan_in(&[2 * k, 2 * h, 1, 1], 2 * h, rng))?;
    store.insert("rpn_heads.reg.bias", Grid::zeros(&[2 * k]))?;
    Ok(())
}

/// Raw RPN outputs on the stride-16 grid.
///
/// `cls` holds `(background, text)` logits at channels `2k, 2k + 1` and
/// `reg` holds `(dy, dh)` at channels `2k, 2k + 1` for height index `k`.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    pub cls: Var,
    pub reg: Var,
}

/// 3x3 convolution, width-wise bidirectional recurrence, then 1x1 score and
/// refinement heads.
pub fn rpn_forward(tape: &mut Tape, p: &BoundParams, fused: &FusedFeature, cfg: &RpnConfig) -> Result<RpnOutput> {
    let x = tape.conv2d(fused.var, p.var("rpn_heads.conv.weight")?, p.var("rpn_heads.conv.bias")?, 1, 1)?;
    let x = tape.relu(x);
    let rnn = RnnParams {
        fwd_wx: p.var("rpn_heads.rnn.fwd.wx")?,
        fwd_wh: p.var("rpn_heads.rnn.fwd.wh")?,
        fwd_b: p.var("rpn_heads.rnn.fwd.bias")?,
        bwd_wx: p.var("rpn_heads.rnn.bwd.wx")?,
        bwd_wh: p.var("rpn_heads.rnn.bwd.wh")?,
        bwd_b: p.var("rpn_heads.rnn.bwd.bias")?,
    };
    let seq = tape.birnn_width(x, cfg.hidden, rnn)?;
    let cls = tape.conv2d(seq, p.var("rpn_heads.cls.weight")?, p.var("rpn_heads.cls.bias")?, 1, 0)?;
    let reg = tape.conv2d(seq, p.var("rpn_heads.reg.weight")?, p.var("rpn_heads.reg.bias")?, 1, 0)?;
    Ok(RpnOutput { cls, reg })
}

/// Flat index of channel `ch` of anchor `a` in a `[1, 2K, H, W]` map.
fn map_index(a: usize, ch: usize, k_count: usize, h: usize, w: usize) -> usize {
    let k = a % k_count;
    let cell = a / k_count;
    let (row, col) = (cell / w, cell % w);
    ((2 * k + ch) * h + row) * w + col
}

/// Mean cross-entropy over the minibatch plus `lambda` times the mean
/// (over positives) of the summed smooth-L1 on `(dy, dh)`.
pub fn rpn_loss(
    tape: &mut Tape,
    out: &RpnOutput,
    assignment: &LabelAssignment,
    batch: &Minibatch,
    lambda: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(RtnError::UndefinedLoss("no anchors were sampled".into()));
    }
    let (_, ch, h, w) = tape.value(out.cls).dims4()?;
    let k_count = ch / 2;
    let sampled = batch.indices();
    let mut idx = Vec::with_capacity(2 * sampled.len());
    let mut labels = Vec::with_capacity(sampled.len());
    for &a in &sampled {
        idx.push(map_index(a, 0, k_count, h, w));
        idx.push(map_index(a, 1, k_count, h, w));
        labels.push(if assignment.labels[a] == Label::Positive {
            CLASS_TEXT
        } else {
            CLASS_BACKGROUND
        });
    }
    let logits = tape.gather(out.cls, idx, vec![sampled.len(), 2])?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;

    let mut ridx = Vec::with_capacity(2 * batch.positives.len());
    let mut targets = Vec::with_capacity(2 * batch.positives.len());
    for &a in &batch.positives {
        let (dy, dh) = assignment.regression_target[a]
            .ok_or_else(|| RtnError::Usage(format!("positive anchor {a} has no regression target")))?;
        ridx.push(map_index(a, 0, k_count, h, w));
        ridx.push(map_index(a, 1, k_count, h, w));
        targets.extend([dy, dh]);
    }
    let pred = tape.gather(out.reg, ridx, vec![batch.positives.len(), 2])?;
    let reg = tape.smooth_l1_loss(pred, targets)?;
    let reg = tape.scale(reg, lambda);
    tape.add(ce, reg)
}

/// A scored 16-pixel-wide text slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerticalProposal {
    pub cell: usize,
    pub row: usize,
    pub cy: f64,
    pub height: f64,
    pub score: f64,
}

impl VerticalProposal {
    pub fn x_center(&self) -> f64 {
        cell_center(self.cell)
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.x_center(), self.cy, SLICE_WIDTH, self.height)
    }
}

/// Best anchor per grid cell, kept when its text probability reaches
/// `threshold`, refined vertically by its `(dy, dh)`.
pub fn decode_proposals(cls: &Grid, reg: &Grid, cfg: &AnchorConfig, threshold: f64) -> Result<Vec<VerticalProposal>> {
    let (_, ch, h, w) = cls.dims4()?;
    let k_count = cfg.num_heights();
    if ch != 2 * k_count || reg.shape() != cls.shape() {
        return Err(RtnError::Shape(format!(
            "rpn maps {:?}/{:?} do not match {k_count} anchor heights",
            cls.shape(),
            reg.shape()
        )));
    }
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..k_count {
                let p = softmax2([cls.at4(0, 2 * k, row, col), cls.at4(0, 2 * k + 1, row, col)])[CLASS_TEXT];
                if best.is_none_or(|(_, b)| p > b) {
                    best = Some((k, p));
                }
            }
            let Some((k, score)) = best else { continue };
            if score < threshold {
                continue;
            }
            let anchor = BBox::from_center(cell_center(col), cell_center(row), SLICE_WIDTH, cfg.heights[k]);
            let b = decode_yh(&anchor, reg.at4(0, 2 * k, row, col), reg.at4(0, 2 * k + 1, row, col));
            out.push(VerticalProposal {
                cell: col,
                row,
                cy: b.cy(),
                height: b.height(),
                score,
            });
        }
    }
    Ok(out)
}
