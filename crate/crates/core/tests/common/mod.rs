//! Shared harnesses for the integration tests: finite-difference gradient
//! checks and brute-force oracles.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtn::assembler::{self, encode_xw, regression_forward, JitterConfig, TrainSample, VerticalProposal};
use rtn::backbone::BackboneConfig;
use rtn::geom::BBox;
use rtn::gridmath::gradcheck::{central_difference, relative_error, FLOOR, STEP};
use rtn::gridmath::{Grid, RnnParams, Tape, Var};
use rtn::model::{self, ModelConfig, RtnModel};
use rtn::synthcorpus::{ScaleLimits, WordAnnotation};
use rtn::vrpn::{self, AnchorConfig};

pub fn rand_grid(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Grid {
    let n = shape.iter().product();
    Grid::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Records `inputs` as leaves, applies `op`, and reduces the output with a
/// smooth-L1 loss against fixed targets so upstream gradients are
/// non-uniform.
pub fn loss_of<F>(inputs: &[Grid], targets: &[f64], op: &F) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
    let out = op(&mut tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let rows = shape.first().copied().unwrap_or(1).max(1);
    let flat = tape.value(out).len();
    let out2 = if shape.is_empty() {
        tape.gather(out, vec![0], vec![1, 1]).unwrap()
    } else {
        tape.gather(out, (0..flat).collect(), vec![rows, flat / rows]).unwrap()
    };
    let loss = tape.smooth_l1_loss(out2, targets.to_vec()).unwrap();
    (tape, vars, loss)
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    let mut coords: Vec<usize> = (0..len).collect();
    if len > k {
        for i in 0..k {
            let j = rng.gen_range(i..len);
            coords.swap(i, j);
        }
        coords.truncate(k);
    }
    coords
}

/// Worst relative error over up to `per_input` sampled coordinates of every
/// input.
pub fn max_grad_error<F>(inputs: &[Grid], op: F, per_input: usize, rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| probe.leaf(g.clone())).collect();
    let out = op(&mut probe, &vars);
    let targets: Vec<f64> = (0..probe.value(out).len()).map(|_| rng.gen_range(-0.3..0.3)).collect();

    let (tape, vars, loss) = loss_of(inputs, &targets, &op);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        let mut flat = input.values().to_vec();
        for idx in sample_coords(rng, input.len(), per_input) {
            let numeric = central_difference(&mut flat, idx, STEP, |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Grid::new(input.shape().to_vec(), x.to_vec()).unwrap();
                let (t, _, l) = loss_of(&perturbed, &targets, &op);
                t.value(l).item()
            });
            worst = worst.max(relative_error(analytic[idx], numeric, FLOOR));
        }
    }
    worst
}

pub fn rnn_inputs(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, hidden: usize, scale: f64) -> Vec<Grid> {
    vec![
        rand_grid(rng, &[n, c, h, w], 1.0),
        rand_grid(rng, &[hidden, c], scale),
        rand_grid(rng, &[hidden, hidden], scale),
        rand_grid(rng, &[hidden], scale),
        rand_grid(rng, &[hidden, c], scale),
        rand_grid(rng, &[hidden, hidden], scale),
        rand_grid(rng, &[hidden], scale),
    ]
}

pub fn rnn_op(hidden: usize) -> impl Fn(&mut Tape, &[Var]) -> Var {
    move |t: &mut Tape, v: &[Var]| {
        let p = RnnParams {
            fwd_wx: v[1],
            fwd_wh: v[2],
            fwd_b: v[3],
            bwd_wx: v[4],
            bwd_wh: v[5],
            bwd_b: v[6],
        };
        t.birnn_width(v[0], hidden, p).unwrap()
    }
}

pub const OP_NAMES: [&str; 8] = [
    "conv2d",
    "transposed_conv2d",
    "birnn_width",
    "add+relu",
    "cross_entropy",
    "smooth_l1",
    "roi_max_pool",
    "linear",
];

/// Worst relative error per primitive over `iterations` random instances.
pub fn op_gradient_suite(seed: u64, iterations: usize) -> [f64; 8] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 8];
    for _ in 0..iterations {
        let (c, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, stride, pad) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..2));
        let h = rng.gen_range(kh.max(2)..7);
        let inputs = vec![
            rand_grid(&mut rng, &[1, c, h, h + 1], 1.0),
            rand_grid(&mut rng, &[k, c, kh, kh], 0.5),
            rand_grid(&mut rng, &[k], 0.5),
        ];
        let e = max_grad_error(&inputs, |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap(), 20, &mut rng);
        worst[0] = worst[0].max(e);

        let s = rng.gen_range(1..4);
        let inputs = vec![rand_grid(&mut rng, &[1, c, 3, 2], 1.0), rand_grid(&mut rng, &[c, k, s, s], 0.5)];
        let e = max_grad_error(&inputs, |t, v| t.transposed_conv2d(v[0], v[1], s).unwrap(), 20, &mut rng);
        worst[1] = worst[1].max(e);

        let hidden = rng.gen_range(1..4);
        let (rh, rw) = (rng.gen_range(1..3), rng.gen_range(1..5));
        let inputs = rnn_inputs(&mut rng, 1, c, rh, rw, hidden, 0.7);
        let e = max_grad_error(&inputs, rnn_op(hidden), 20, &mut rng);
        worst[2] = worst[2].max(e);

        // keep relu inputs away from the kink
        let a: Vec<f64> = (0..12)
            .map(|_| {
                let v: f64 = rng.gen_range(0.05..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let inputs = vec![Grid::new(vec![3, 4], a).unwrap(), Grid::zeros(&[3, 4])];
        let e = max_grad_error(
            &inputs,
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                t.relu(s)
            },
            20,
            &mut rng,
        );
        worst[3] = worst[3].max(e);

        let rows = rng.gen_range(1..6);
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..2)).collect();
        let inputs = vec![rand_grid(&mut rng, &[rows, 2], 3.0)];
        let e = max_grad_error(&inputs, |t, v| t.softmax_cross_entropy(v[0], labels.clone()).unwrap(), 20, &mut rng);
        worst[4] = worst[4].max(e);

        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.5..2.5)).collect();
        let inputs = vec![rand_grid(&mut rng, &[3, 2], 2.5)];
        let e = max_grad_error(&inputs, |t, v| t.smooth_l1_loss(v[0], targets.clone()).unwrap(), 20, &mut rng);
        worst[5] = worst[5].max(e);

        let fmap = rand_grid(&mut rng, &[1, 2, 5, 6], 1.0);
        let x0 = rng.gen_range(0.0..3.0);
        let y0 = rng.gen_range(0.0..2.0);
        let region = BBox::new(x0, y0, x0 + rng.gen_range(0.5..3.0), y0 + rng.gen_range(0.5..3.0));
        let e = max_grad_error(&[fmap], |t, v| t.roi_max_pool(v[0], &[region], 4).unwrap(), 20, &mut rng);
        worst[6] = worst[6].max(e);

        let (r, d, o) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..4));
        let inputs = vec![
            rand_grid(&mut rng, &[r, d], 1.0),
            rand_grid(&mut rng, &[o, d], 0.5),
            rand_grid(&mut rng, &[o], 0.5),
        ];
        let e = max_grad_error(&inputs, |t, v| t.linear(v[0], v[1], v[2]).unwrap(), 20, &mut rng);
        worst[7] = worst[7].max(e);
    }
    worst
}

/// A deliberately small model so finite differences stay cheap.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stage16_channels: 4,
            stage32_channels: 6,
            fused_channels: 4,
            blocks_per_stage: 1,
        },
        rpn_hidden: 3,
        anchors: AnchorConfig::default(),
        head_hidden: 5,
        pool_bins: 4,
    }
}

/// Regression head (pooling, two linear maps) checked against finite
/// differences in both the fused map and the head parameters.
pub fn regression_head_gradient(seed: u64, iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..iterations {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(3..7));
        let hidden = rng.gen_range(1..5);
        let extent = (16 * h, 16 * w);
        let nboxes = rng.gen_range(1..4);
        let boxes: Vec<BBox> = (0..nboxes)
            .map(|_| {
                let x0 = rng.gen_range(0.0..extent.1 as f64 - 20.0);
                let y0 = rng.gen_range(0.0..extent.0 as f64 - 20.0);
                BBox::new(x0, y0, x0 + rng.gen_range(16.0..64.0), y0 + rng.gen_range(12.0..40.0))
            })
            .collect();
        let targets: Vec<f64> = (0..2 * nboxes).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let inputs = vec![
            rand_grid(&mut rng, &[1, c, h, w], 1.0),
            rand_grid(&mut rng, &[hidden, c * 16], 0.5),
            rand_grid(&mut rng, &[hidden], 0.5),
            rand_grid(&mut rng, &[2, hidden], 0.5),
            rand_grid(&mut rng, &[2], 0.5),
        ];
        let op = |t: &mut Tape, v: &[Var]| -> Var {
            let regions = assembler::project_boxes(&boxes, extent).unwrap();
            let pooled = t.roi_max_pool(v[0], &regions, 4).unwrap();
            let a = t.linear(pooled, v[1], v[2]).unwrap();
            let a = t.relu(a);
            let out = t.linear(a, v[3], v[4]).unwrap();
            t.smooth_l1_loss(out, targets.clone()).unwrap()
        };
        worst = worst.max(max_grad_error(&inputs, op, 12, &mut rng));
    }
    worst
}

pub fn random_words(rng: &mut ChaCha8Rng, extent: (usize, usize), n: usize) -> Vec<WordAnnotation> {
    (0..n)
        .map(|_| {
            let x0 = rng.gen_range(0..extent.1 - 20) as f64;
            let y0 = rng.gen_range(0..extent.0 - 14) as f64;
            let x1 = (x0 + rng.gen_range(10..40) as f64).min(extent.1 as f64);
            let y1 = (y0 + rng.gen_range(10..30) as f64).min(extent.0 as f64);
            WordAnnotation::new(x0, y0, x1, y1)
        })
        .collect()
}

/// Stage-one RPN loss plus the x/w regression loss on jittered boxes, all
/// on one tape from the image to the scalar.
fn pipeline_loss(
    model: &RtnModel,
    image: &Grid,
    prepared: &assembler::PreparedSample,
    batch: &vrpn::Minibatch,
    boxes: &[BBox],
    targets: &[f64],
) -> (Tape, rtn::gridmath::BoundParams, Var) {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let out = model::forward(&mut tape, &p, &model.config, image).unwrap();
    let rpn = vrpn::rpn_loss(&mut tape, &out.rpn, &prepared.assignment, batch, 1.0).unwrap();
    let reg = regression_forward(&mut tape, &p, out.fused.var, boxes, prepared.extent, model.config.pool_bins).unwrap();
    let reg = tape.smooth_l1_loss(reg.offsets, targets.to_vec()).unwrap();
    let loss = tape.add(rpn, reg).unwrap();
    (tape, p, loss)
}

const KINK_FLOOR: f64 = 1e-2;
const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Default, Clone, Copy)]
pub struct PipelineCheck {
    pub worst: f64,
    pub checks: usize,
    /// Coordinates skipped because the one-sided slopes disagree.
    pub kinks: usize,
}

/// Full pipeline loss gradient against central differences at
/// `per_instance` differentiable parameter coordinates in each of
/// `instances` random images.
pub fn pipeline_gradient(seed: u64, instances: usize, per_instance: usize) -> PipelineCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PipelineCheck::default();
    for inst in 0..instances {
        let mut model = RtnModel::init(tiny_model_config(), seed ^ inst as u64).unwrap();
        // nonzero output layer and biases so few units sit exactly at zero
        for (name, g) in model.params.groups_mut().iter_mut().flat_map(|g| g.params.iter_mut()) {
            if name.starts_with("regression_head.fc2") || name.ends_with("bias") {
                for v in g.values_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        let extent = (64, 64);
        let image = Grid::new(vec![1, 1, 64, 64], (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let nwords = rng.gen_range(1..3);
        let sample = TrainSample {
            image: image.clone(),
            words: random_words(&mut rng, extent, nwords),
        };
        let prepared = assembler::prepare_sample(&sample, &model.config.anchors, ScaleLimits::default()).unwrap();
        let batch = vrpn::sample_minibatch(&prepared.assignment, 16, rng.gen());
        let jitter = JitterConfig {
            per_word: 1,
            ..JitterConfig::default()
        };
        let pairs = assembler::jitter_line_boxes(&prepared.words, &jitter, extent, &mut rng);
        let boxes: Vec<BBox> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<f64> = pairs
            .iter()
            .flat_map(|(b, g)| {
                let (x, w) = encode_xw(b, g).unwrap();
                [x, w]
            })
            .collect();

        let (tape, p, loss) = pipeline_loss(&model, &image, &prepared, &batch, &boxes, &targets);
        let base = tape.value(loss).item();
        let grads = p.flat_grads(&tape, &tape.backward(loss).unwrap());
        let sizes: Vec<usize> = model.params.iter().map(|(_, g)| g.len()).collect();
        let mut done = 0;
        while done < per_instance {
            let pi = rng.gen_range(0..sizes.len());
            let idx = rng.gen_range(0..sizes[pi]);
            let analytic = grads[pi][idx];
            let eval = |delta: f64| -> f64 {
                let mut m = model.clone();
                let (_, g) = m.params.groups_mut().iter_mut().flat_map(|g| g.params.iter_mut()).nth(pi).unwrap();
                g.values_mut()[idx] += delta;
                let (t, _, l) = pipeline_loss(&m, &image, &prepared, &batch, &boxes, &targets);
                t.value(l).item()
            };
            let (up, down) = (eval(STEP), eval(-STEP));
            let (right, left) = ((up - base) / STEP, (base - down) / STEP);
            // a relu or max-pool kink inside the stencil: the loss has no
            // derivative here, so central differences are meaningless
            if relative_error(right, left, KINK_FLOOR) > KINK_TOL {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            report.worst = report.worst.max(relative_error(analytic, numeric, FLOOR));
            report.checks += 1;
            done += 1;
        }
    }
    report
}

/// Per-cell horizontal overlap by counting the integer pixel columns of
/// the word in each 16-px cell, then the >= 8 rule with a best-cell
/// fallback. Returns `(positive cells, ignore cells)`.
pub fn slice_oracle(x0: i64, x1: i64) -> (Vec<usize>, Vec<usize>) {
    let mut counts: Vec<(usize, i64)> = Vec::new();
    for col in x0..x1 {
        let cell = (col / 16) as usize;
        match counts.last_mut() {
            Some((c, n)) if *c == cell => *n += 1,
            _ => counts.push((cell, 1)),
        }
    }
    let mut pos: Vec<usize> = counts.iter().filter(|(_, n)| *n >= 8).map(|(c, _)| *c).collect();
    if pos.is_empty() {
        let best = counts.iter().map(|(_, n)| *n).max().unwrap();
        pos.push(counts.iter().find(|(_, n)| *n == best).unwrap().0);
    }
    let ign = counts.iter().map(|(c, _)| *c).filter(|c| !pos.contains(c)).collect();
    (pos, ign)
}

/// Connected components by breadth-first search over the same edge
/// predicate, as sorted index lists sorted by their first index.
pub fn components_oracle(props: &[VerticalProposal], gap: f64, v_overlap: f64) -> Vec<Vec<usize>> {
    let n = props.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && assembler::connected(&props[i], &props[j], gap, v_overlap) {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Maximum number of one-to-one pairs with IoU >= `thr`, by trying every
/// assignment.
pub fn exhaustive_matching(dets: &[BBox], gts: &[BBox], thr: f64) -> usize {
    fn go(d: usize, dets: &[BBox], gts: &[BBox], used: &mut [bool], thr: f64) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, dets, gts, used, thr);
        for g in 0..gts.len() {
            if !used[g] && rtn::geom::iou(&dets[d], &gts[g]) >= thr {
                used[g] = true;
                best = best.max(1 + go(d + 1, dets, gts, used, thr));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], thr)
}

/// IoU of integer boxes by counting covered pixels.
pub fn pixel_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let x_lo = a[0].min(b[0]);
    let x_hi = a[2].max(b[2]);
    let y_lo = a[1].min(b[1]);
    let y_hi = a[3].max(b[3]);
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise-disjoint random boxes (ground truth for the matching oracle).
pub fn disjoint_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BBox> {
    let mut out: Vec<BBox> = Vec::new();
    while out.len() < n {
        let x0 = rng.gen_range(0.0..80.0);
        let y0 = rng.gen_range(0.0..40.0);
        let b = BBox::new(x0, y0, x0 + rng.gen_range(4.0..30.0), y0 + rng.gen_range(4.0..20.0));
        if out.iter().all(|o| o.intersection_area(&b) == 0.0) {
            out.push(b);
        }
    }
    out
}

/// A detection near `gt`: every side moved by up to `spread` pixels.
pub fn perturbed(rng: &mut ChaCha8Rng, gt: &BBox, spread: f64) -> BBox {
    let mut d = || rng.gen_range(-spread..spread);
    let (x0, y0) = (gt.x0 + d(), gt.y0 + d());
    let (x1, y1) = (gt.x1 + d(), gt.y1 + d());
    BBox::new(x0.min(x1 - 1.0), y0.min(y1 - 1.0), x1.max(x0 + 1.0), y1.max(y0 + 1.0))
}

/// Random proposals on a small grid so components of every size occur.
pub fn random_proposals(rng: &mut ChaCha8Rng, n: usize) -> Vec<VerticalProposal> {
    (0..n)
        .map(|_| {
            let cell = rng.gen_range(0..20);
            let cy = rng.gen_range(10.0..90.0);
            VerticalProposal {
                cell,
                row: (cy / 16.0) as usize,
                cy,
                height: rng.gen_range(10.0..40.0),
                score: rng.gen_range(0.7..1.0),
            }
        })
        .collect()
}

/// Random integer words checked against [`slice_oracle`]. Returns the
/// number of words whose positive or ignore cells differ.
pub fn slicing_discrepancies(seed: u64, words: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for id in 0..words {
        let x0 = rng.gen_range(0..400i64);
        let x1 = x0 + rng.gen_range(1..120i64);
        let y0 = rng.gen_range(0..100) as f64;
        let word = WordAnnotation::new(x0 as f64, y0, x1 as f64, y0 + rng.gen_range(4..60) as f64);
        let slices = vrpn::slice_ground_truth(id, &word).unwrap();
        let cells = |st: vrpn::SliceStatus| -> Vec<usize> {
            slices.iter().filter(|s| s.status == st).map(|s| s.cell).collect()
        };
        let (pos, ign) = slice_oracle(x0, x1);
        if cells(vrpn::SliceStatus::Positive) != pos || cells(vrpn::SliceStatus::Ignore) != ign {
            bad += 1;
        }
    }
    bad
}

fn proposal_key(p: &VerticalProposal) -> (usize, usize, u64, u64, u64) {
    (p.cell, p.row, p.cy.to_bits(), p.height.to_bits(), p.score.to_bits())
}

/// Random proposal sets grouped by `connect_proposals` and by the BFS
/// oracle. Returns the number of sets whose components or boxes differ.
pub fn connection_discrepancies(seed: u64, sets: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let n = rng.gen_range(1..16);
        let props = random_proposals(&mut rng, n);
        let (gap, ov) = (assembler::DEFAULT_MAX_GAP_PX, assembler::DEFAULT_MIN_V_OVERLAP);
        let norm = |groups: Vec<Vec<VerticalProposal>>| {
            let mut keys: Vec<Vec<_>> = groups
                .iter()
                .map(|g| {
                    let mut k: Vec<_> = g.iter().map(proposal_key).collect();
                    k.sort_unstable();
                    k
                })
                .collect();
            keys.sort_unstable();
            keys
        };
        let lines = assembler::connect_proposals(&props, gap, ov);
        let expected: Vec<Vec<VerticalProposal>> = components_oracle(&props, gap, ov)
            .into_iter()
            .map(|c| c.into_iter().map(|i| props[i]).collect())
            .collect();
        let boxes_ok = lines.iter().all(|l| {
            let u = l.members.iter().skip(1).fold(l.members[0].bbox(), |acc, m| acc.union(&m.bbox()));
            u == l.bbox
        });
        if norm(lines.into_iter().map(|l| l.members).collect()) != norm(expected) || !boxes_ok {
            bad += 1;
        }
    }
    bad
}

/// Greedy matching against exhaustive search on instances with at most
/// six boxes per side. Ground truths are pairwise disjoint, as words in
/// an image are. Returns the number of instances with a different TP count.
pub fn matching_discrepancies(seed: u64, instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let ng = rng.gen_range(0..=6);
        let gts = disjoint_boxes(&mut rng, ng);
        let nd = rng.gen_range(0..=6);
        let dets: Vec<rtn::assembler::Detection> = (0..nd)
            .map(|_| {
                let bbox = if !gts.is_empty() && rng.gen_bool(0.8) {
                    let g = gts[rng.gen_range(0..gts.len())];
                    let spread = rng.gen_range(0.5..6.0);
                    perturbed(&mut rng, &g, spread)
                } else {
                    disjoint_boxes(&mut rng, 1)[0]
                };
                rtn::assembler::Detection {
                    bbox,
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let greedy = rtn::evalbench::match_detections(&dets, &gts, rtn::evalbench::DEFAULT_IOU);
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        if greedy.true_positives != exhaustive_matching(&boxes, &gts, rtn::evalbench::DEFAULT_IOU) {
            bad += 1;
        }
    }
    bad
}

/// Box IoU against pixel counting on random integer boxes, compared
/// bit for bit.
pub fn iou_discrepancies(seed: u64, pairs: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let int_box = |rng: &mut ChaCha8Rng| {
        let (x0, y0) = (rng.gen_range(0..30i64), rng.gen_range(0..30i64));
        [x0, y0, x0 + rng.gen_range(1..20), y0 + rng.gen_range(1..20)]
    };
    let mut bad = 0;
    for _ in 0..pairs {
        let (a, b) = (int_box(&mut rng), int_box(&mut rng));
        let f = |r: [i64; 4]| BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64);
        if rtn::geom::iou(&f(a), &f(b)).to_bits() != pixel_iou(a, b).to_bits() {
            bad += 1;
        }
    }
    bad
}
