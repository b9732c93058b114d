//! Text-line assembly, horizontal (x, w) regression and the two training
//! stages.

mod detect;
mod train;

use petgraph::unionfind::UnionFind;

pub use detect::{detect, DetectConfig, Detection, DetectionResult};
pub use train::{
    jitter_line_boxes, prepare_sample, stage_one, stage_two, two_stage_train, EpochLog, JitterConfig, PreparedSample,
    StageConfig, TrainConfig, TrainSample,
};

use crate::backbone::STRIDE_FINE;
use crate::error::{Result, RtnError};
use crate::geom::{interval_iou, BBox};
use crate::gridmath::{smooth_l1, BoundParams, Tape, Var};
pub use crate::vrpn::VerticalProposal;

pub const DEFAULT_MAX_GAP_PX: f64 = 50.0;
pub const DEFAULT_MIN_V_OVERLAP: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct TextLine {
    /// Sorted by column, then row.
    pub members: Vec<VerticalProposal>,
    pub bbox: BBox,
    pub refined_bbox: Option<BBox>,
    pub score: f64,
}

impl TextLine {
    pub fn from_members(mut members: Vec<VerticalProposal>) -> Result<Self> {
        members.sort_by_key(|m| (m.cell, m.row));
        let bbox = line_bbox(&members)?;
        let score = members.iter().map(|m| m.score).sum::<f64>() / members.len() as f64;
        Ok(TextLine {
            members,
            bbox,
            refined_bbox: None,
            score,
        })
    }

    /// The refined box when regression ran, the assembled box otherwise.
    pub fn final_bbox(&self) -> BBox {
        self.refined_bbox.unwrap_or(self.bbox)
    }
}

/// Whether two proposals belong to the same line.
pub fn connected(a: &VerticalProposal, b: &VerticalProposal, max_gap_px: f64, min_v_overlap: f64) -> bool {
    let (ba, bb) = (a.bbox(), b.bbox());
    (a.x_center() - b.x_center()).abs() <= max_gap_px && interval_iou(ba.y0, ba.y1, bb.y0, bb.y1) >= min_v_overlap
}

/// Connected components of the proximity graph as text lines, ordered by
/// their first member.
pub fn connect_proposals(proposals: &[VerticalProposal], max_gap_px: f64, min_v_overlap: f64) -> Vec<TextLine> {
    let n = proposals.len();
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if connected(&proposals[i], &proposals[j], max_gap_px, min_v_overlap) {
                uf.union(i, j);
            }
        }
    }
    let labels = uf.into_labeling();
    let mut groups: Vec<(usize, Vec<VerticalProposal>)> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for (i, &root) in labels.iter().enumerate() {
        if slot[root] == usize::MAX {
            slot[root] = groups.len();
            groups.push((root, Vec::new()));
        }
        groups[slot[root]].1.push(proposals[i]);
    }
    let mut lines: Vec<TextLine> = groups
        .into_iter()
        .map(|(_, m)| TextLine::from_members(m).expect("components are non-empty"))
        .collect();
    lines.sort_by(|a, b| {
        let (ka, kb) = (&a.members[0], &b.members[0]);
        (ka.cell, ka.row).cmp(&(kb.cell, kb.row)).then(ka.cy.total_cmp(&kb.cy))
    });
    lines
}

/// Union of the member boxes.
pub fn line_bbox(members: &[VerticalProposal]) -> Result<BBox> {
    let mut it = members.iter().map(VerticalProposal::bbox);
    let first = it.next().ok_or_else(|| RtnError::Usage("a text line needs at least one member".into()))?;
    Ok(it.fold(first, |acc, b| acc.union(&b)))
}

/// `(v_x, v_w)` taking `proposal` onto the horizontal extent of `gt`.
pub fn encode_xw(proposal: &BBox, gt: &BBox) -> Result<(f64, f64)> {
    if !(gt.width() > 0.0) {
        return Err(RtnError::Annotation(format!("ground-truth box {gt:?} has no width")));
    }
    if !(proposal.width() > 0.0) {
        return Err(RtnError::Usage(format!("proposal box {proposal:?} has no width")));
    }
    let wp = proposal.width();
    Ok(((gt.cx() - proposal.cx()) / wp, (gt.width() / wp).ln()))
}

/// Applies `(t_x, t_w)` to `proposal`; y0 and y1 are copied untouched.
pub fn decode_xw(proposal: &BBox, t: (f64, f64)) -> BBox {
    let wp = proposal.width();
    let cx = proposal.cx() + t.0 * wp;
    let w = wp * t.1.exp();
    BBox {
        x0: cx - w / 2.0,
        y0: proposal.y0,
        x1: cx + w / 2.0,
        y1: proposal.y1,
    }
}

/// Summed smooth-L1 over the x and w residuals.
pub fn line_regression_loss(t: (f64, f64), v: (f64, f64)) -> f64 {
    smooth_l1(t.0 - v.0) + smooth_l1(t.1 - v.1)
}

/// Output of the regression head: `[R, 2]` offsets `(t_x, t_w)` and
/// nothing else.
#[derive(Debug, Clone, Copy)]
pub struct RegressionOutput {
    pub offsets: Var,
}

/// Projects image boxes onto the stride-16 feature grid after clipping them
/// to the `(height, width)` image.
pub fn project_boxes(boxes: &[BBox], extent: (usize, usize)) -> Result<Vec<BBox>> {
    let s = STRIDE_FINE as f64;
    boxes
        .iter()
        .map(|b| {
            let c = b.clip(extent.1 as f64, extent.0 as f64);
            if !(c.width() > 0.0 && c.height() > 0.0) {
                return Err(RtnError::DegenerateRegion(format!("line box {b:?} has no area inside the image")));
            }
            Ok(c.scale(1.0 / s))
        })
        .collect()
}

/// Pools the fused map over each line box to `bins x bins`, then
/// `fc2(relu(fc1(.)))`.
pub fn regression_forward(
    tape: &mut Tape,
    p: &BoundParams,
    fused: Var,
    boxes: &[BBox],
    extent: (usize, usize),
    bins: usize,
) -> Result<RegressionOutput> {
    let regions = project_boxes(boxes, extent)?;
    let pooled = tape.roi_max_pool(fused, &regions, bins)?;
    let h = tape.linear(pooled, p.var("regression_head.fc1.weight")?, p.var("regression_head.fc1.bias")?)?;
    let h = tape.relu(h);
    let offsets = tape.linear(h, p.var("regression_head.fc2.weight")?, p.var("regression_head.fc2.bias")?)?;
    Ok(RegressionOutput { offsets })
}
