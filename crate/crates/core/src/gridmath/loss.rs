//! Scalar loss primitives shared by the RPN and the line regression head.

use crate::error::{Result, RtnError};

/// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]; bounded by 1 in magnitude.
pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Number of classes of the text/non-text classifier.
pub const NUM_CLASSES: usize = 2;
/// Class index for background (non-text) anchors.
pub const CLASS_BACKGROUND: usize = 0;
/// Class index for text anchors.
pub const CLASS_TEXT: usize = 1;

/// Two-class softmax probabilities, stabilized by max subtraction.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-log softmax(logits)[label]` for the two-class case.
pub fn softmax_cross_entropy(logits: [f64; 2], label: usize) -> Result<f64> {
    if label >= NUM_CLASSES {
        return Err(RtnError::Config(format!(
            "class label {label} outside {{0, 1}}"
        )));
    }
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    Ok(lse - logits[label])
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits.
pub fn softmax_cross_entropy_grad(logits: [f64; 2], label: usize) -> Result<[f64; 2]> {
    if label >= NUM_CLASSES {
        return Err(RtnError::Config(format!(
            "class label {label} outside {{0, 1}}"
        )));
    }
    let mut p = softmax2(logits);
    p[label] -= 1.0;
    Ok(p)
}
