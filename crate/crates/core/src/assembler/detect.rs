//! End-to-end inference on one image.

use serde::{Deserialize, Serialize};

use super::{connect_proposals, decode_xw, regression_forward, TextLine, DEFAULT_MAX_GAP_PX, DEFAULT_MIN_V_OVERLAP};
use crate::error::Result;
use crate::geom::BBox;
use crate::gridmath::{Grid, Tape};
use crate::model::{self, RtnModel};
use crate::synthcorpus::{apply_scale_rule, resize_bilinear, ScaleLimits};
use crate::vrpn::{decode_proposals, VerticalProposal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub max_gap_px: f64,
    pub min_v_overlap: f64,
    pub limits: ScaleLimits,
    /// Run the x/w regression head; off gives raw connected lines.
    pub regression: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.7,
            max_gap_px: DEFAULT_MAX_GAP_PX,
            min_v_overlap: DEFAULT_MIN_V_OVERLAP,
            limits: ScaleLimits::default(),
            regression: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    /// Final boxes in original image pixels.
    pub detections: Vec<Detection>,
    /// Thresholded proposals, in resized-image pixels.
    pub proposals: Vec<VerticalProposal>,
    /// Assembled lines, in resized-image pixels, clipped to the image.
    pub lines: Vec<TextLine>,
    /// Resize factor applied before the network.
    pub factor: f64,
}

/// Resize, backbone, fusion, RPN, decode, connect, regress; boxes are
/// returned in the coordinates of `image` (`[1, 1, H, W]` intensities).
pub fn detect(image: &Grid, model: &RtnModel, cfg: &DetectConfig) -> Result<DetectionResult> {
    let (_, _, h, w) = image.dims4()?;
    let scaled = apply_scale_rule((h, w), cfg.limits);
    let input = resize_bilinear(image, scaled.extent)?;
    let (sh, sw) = scaled.extent;

    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model::forward(&mut tape, &p, &model.config, &input)?;
    let proposals = decode_proposals(
        tape.value(out.rpn.cls),
        tape.value(out.rpn.reg),
        &model.config.anchors,
        cfg.score_threshold,
    )?;
    let mut lines = connect_proposals(&proposals, cfg.max_gap_px, cfg.min_v_overlap);
    for line in &mut lines {
        line.bbox = line.bbox.clip(sw as f64, sh as f64);
    }
    lines.retain(|l| l.bbox.width() > 0.0 && l.bbox.height() > 0.0);

    if cfg.regression && !lines.is_empty() {
        let boxes: Vec<BBox> = lines.iter().map(|l| l.bbox).collect();
        let reg = regression_forward(&mut tape, &p, out.fused.var, &boxes, scaled.extent, model.config.pool_bins)?;
        let t = tape.value(reg.offsets).values();
        for (i, line) in lines.iter_mut().enumerate() {
            let r = decode_xw(&line.bbox, (t[2 * i], t[2 * i + 1]));
            let x0 = r.x0.clamp(0.0, sw as f64);
            let x1 = r.x1.clamp(0.0, sw as f64);
            if x1 > x0 {
                line.refined_bbox = Some(BBox { x0, x1, ..r });
            }
        }
    }

    let inv = 1.0 / scaled.factor;
    let detections = lines
        .iter()
        .filter_map(|l| {
            let b = if scaled.factor == 1.0 { l.final_bbox() } else { l.final_bbox().scale(inv) };
            let b = b.clip(w as f64, h as f64);
            (b.x1 > b.x0 && b.y1 > b.y0).then_some(Detection { bbox: b, score: l.score })
        })
        .collect();
    Ok(DetectionResult {
        detections,
        proposals,
        lines,
        factor: scaled.factor,
    })
}
