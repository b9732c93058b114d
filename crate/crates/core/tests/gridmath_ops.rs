//! Operator checks for the grid math layer: reference values, shape
//! algebra, and analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtn::error::RtnError;
use rtn::gridmath::gradcheck::{central_difference, STEP};
use rtn::gridmath::{Grid, Tape, Var};

mod common;
use common::{max_grad_error, op_gradient_suite, rand_grid, rnn_inputs, rnn_op, OP_NAMES};

#[test]
fn conv2d_identity_kernel() {
    let x = Grid::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
    let k = Grid::filled(&[1, 1, 1, 1], 1.0);
    let b = Grid::zeros(&[1]);
    let y = rtn::gridmath::conv2d(&x, &k, &b, 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_sum_of_four_ones() {
    let x = Grid::filled(&[1, 1, 2, 2], 1.0);
    let k = Grid::filled(&[1, 1, 2, 2], 1.0);
    let y = rtn::gridmath::conv2d(&x, &k, &Grid::zeros(&[1]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.values(), &[4.0]);
}

#[test]
fn conv2d_channel_mismatch_is_config_error() {
    let x = Grid::zeros(&[1, 2, 4, 4]);
    let k = Grid::zeros(&[1, 3, 1, 1]);
    assert!(matches!(
        rtn::gridmath::conv2d(&x, &k, &Grid::zeros(&[1]), 1, 0),
        Err(RtnError::Config(_))
    ));
}

#[test]
fn conv2d_kernel_larger_than_padded_input() {
    let x = Grid::zeros(&[1, 1, 2, 2]);
    let k = Grid::zeros(&[1, 1, 5, 5]);
    assert!(rtn::gridmath::conv2d(&x, &k, &Grid::zeros(&[1]), 1, 1).is_err());
}

#[test]
fn conv2d_matches_direct_cross_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..40 {
        let (n, c, k) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let (h, w) = (rng.gen_range(kh..8), rng.gen_range(kw..8));
        let x = rand_grid(&mut rng, &[n, c, h, w], 1.0);
        let ker = rand_grid(&mut rng, &[k, c, kh, kw], 1.0);
        let bias = rand_grid(&mut rng, &[k], 1.0);
        let y = rtn::gridmath::conv2d(&x, &ker, &bias, stride, pad).unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        assert_eq!(y.shape(), &[n, k, ho, wo], "case {case}");
        for b in 0..n {
            for o in 0..k {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.values()[o];
                        for ci in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let yy = (oy * stride + i) as isize - pad as isize;
                                    let xx = (ox * stride + j) as isize - pad as isize;
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                        acc += x.at4(b, ci, yy as usize, xx as usize) * ker.at4(o, ci, i, j);
                                    }
                                }
                            }
                        }
                        assert!((y.at4(b, o, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn transposed_conv_doubles_extent() {
    let x = Grid::zeros(&[1, 1, 7, 7]);
    let k = Grid::zeros(&[1, 1, 2, 2]);
    let y = rtn::gridmath::transposed_conv2d(&x, &k, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 14, 14]);
}

#[test]
fn transposed_conv_broadcasts_one_cell() {
    let x = Grid::filled(&[1, 1, 1, 1], -1.75);
    let k = Grid::filled(&[1, 1, 2, 2], 1.0);
    let y = rtn::gridmath::transposed_conv2d(&x, &k, 2).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.values(), &[-1.75; 4]);
}

#[test]
fn transposed_conv_gradient_of_sum_is_four() {
    let build = |t: &mut Tape, v: &[Var]| t.transposed_conv2d(v[0], v[1], 2).unwrap();
    let x = Grid::filled(&[1, 1, 1, 1], 0.7);
    let k = Grid::filled(&[1, 1, 2, 2], 1.0);
    let mut tape = Tape::new();
    let vars = [tape.leaf(x.clone()), tape.leaf(k.clone())];
    let out = build(&mut tape, &vars);
    let s = tape.sum(out);
    let analytic = tape.backward(s).unwrap().wrt(&tape, vars[0])[0];
    let mut flat = vec![0.7];
    let numeric = central_difference(&mut flat, 0, STEP, |v| {
        let y = rtn::gridmath::transposed_conv2d(&Grid::new(vec![1, 1, 1, 1], v.to_vec()).unwrap(), &k, 2).unwrap();
        y.values().iter().sum()
    });
    assert!((numeric - 4.0).abs() < 1e-6);
    assert!((analytic - 4.0).abs() < 1e-12);
}

#[test]
fn transposed_conv_rejects_mismatched_kernel() {
    let x = Grid::zeros(&[1, 2, 3, 3]);
    assert!(rtn::gridmath::transposed_conv2d(&x, &Grid::zeros(&[2, 2, 3, 3]), 2).is_err());
    assert!(rtn::gridmath::transposed_conv2d(&x, &Grid::zeros(&[1, 2, 2, 2]), 2).is_err());
}

#[test]
fn birnn_degenerate_weights_give_tanh_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hidden = 3;
    let mut inputs = rnn_inputs(&mut rng, 1, 2, 2, 5, hidden, 0.5);
    for i in [1, 2, 4, 5] {
        inputs[i] = Grid::zeros(inputs[i].shape());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
    let out = rnn_op(hidden)(&mut tape, &vars);
    let y = tape.value(out);
    assert_eq!(y.shape(), &[1, 6, 2, 5]);
    for ch in 0..6 {
        let b = if ch < 3 { inputs[3].values()[ch] } else { inputs[6].values()[ch - 3] };
        for r in 0..2 {
            for t in 0..5 {
                assert_eq!(y.at4(0, ch, r, t), b.tanh());
            }
        }
    }
}

#[test]
fn birnn_single_column_depends_only_on_that_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hidden = 2;
    let inputs = rnn_inputs(&mut rng, 1, 3, 1, 1, hidden, 0.8);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
    let out = rnn_op(hidden)(&mut tape, &vars);
    let y = tape.value(out).values().to_vec();
    // both directions see h_prev = 0 and the same column
    let x = inputs[0].values();
    for (d, (wx, b)) in [(1usize, 3usize), (4, 6)].into_iter().enumerate() {
        for j in 0..hidden {
            let mut a = inputs[b].values()[j];
            for (c, xc) in x.iter().enumerate() {
                a += inputs[wx].values()[j * 3 + c] * xc;
            }
            assert!((y[d * hidden + j] - a.tanh()).abs() < 1e-15);
        }
    }
}

#[test]
fn birnn_gradient_small_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = rnn_inputs(&mut rng, 1, 2, 1, 3, 2, 0.8);
    let err = max_grad_error(&inputs, rnn_op(2), 64, &mut rng);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn randomized_gradient_suite() {
    let worst = op_gradient_suite(2024, 100);
    for (n, w) in OP_NAMES.iter().zip(worst) {
        assert!(w < 1e-4, "{n}: worst relative error {w}");
    }
}

#[test]
fn random_shapes_match_declared_output_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let (n, c, k) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, stride, pad) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(0..3));
        let (h, w) = (rng.gen_range(kh..12), rng.gen_range(kh..12));
        let y = rtn::gridmath::conv2d(&Grid::zeros(&[n, c, h, w]), &Grid::zeros(&[k, c, kh, kh]), &Grid::zeros(&[k]), stride, pad).unwrap();
        assert_eq!(y.shape(), &[n, k, (h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kh) / stride + 1]);
        let s = rng.gen_range(1..4);
        let y = rtn::gridmath::transposed_conv2d(&Grid::zeros(&[n, c, h, w]), &Grid::zeros(&[c, k, s, s]), s).unwrap();
        assert_eq!(y.shape(), &[n, k, h * s, w * s]);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = rnn_inputs(&mut rng, 2, 3, 2, 6, 4, 0.9);
    let run = || {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|g| tape.leaf(g.clone())).collect();
        let out = rnn_op(4)(&mut tape, &vars);
        tape.value(out).values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
