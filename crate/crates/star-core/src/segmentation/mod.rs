//! Segmenter scoring and the three compression mechanisms: anchor
//! selection, continuous integrate-and-fire (CIF), and strided
//! convolution.
//!
//! All functions here are pure; the taped variants used during training
//! live next to the model builders and share these definitions.

mod cif;
pub mod conv;

pub use cif::{cif_aggregate, cif_segment, Boundary, Segmentation, TailRule};
pub use conv::StrideConfig;

use crate::autodiff::kernels;
use crate::error::{Result, StarError};

/// Weights of the two-layer feed-forward segmenter scorer.
/// The first layer maps the frame dimension onto itself, the second
/// reduces to one score per frame.
#[derive(Clone, Debug)]
pub struct SegmenterWeights<'a> {
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: f64,
    pub dim: usize,
}

/// Pre-sigmoid scores, one per frame: FFN2(relu(FFN1(x_t))).
pub fn score_frames(w: &SegmenterWeights, frames: &[f64]) -> Vec<f64> {
    let d = w.dim;
    debug_assert_eq!(frames.len() % d, 0);
    let t = frames.len() / d;
    let mut hidden = kernels::matmul(frames, w.w1, t, d, d);
    for (h, b) in hidden.iter_mut().zip(w.b1.iter().cycle()) {
        *h = (*h + b).max(0.0);
    }
    let mut scores = kernels::matmul(&hidden, w.w2, t, d, 1);
    for s in scores.iter_mut() {
        *s += w.b2;
    }
    scores
}

/// Scale raw scores to [0, 1] gates.
pub fn gate(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|&s| kernels::sigmoid(s)).collect()
}

/// Rescale gates so they sum to `beta * t_y`; leaves the relative
/// weighting untouched.
pub fn rescale(alpha: &[f64], t_y: usize, beta: f64) -> Result<Vec<f64>> {
    let sum: f64 = alpha.iter().sum();
    if sum <= 0.0 {
        return Err(StarError::InvalidArgument(
            "cannot rescale all-zero gates".into(),
        ));
    }
    let factor = beta * t_y as f64 / sum;
    Ok(alpha.iter().map(|a| a * factor).collect())
}

/// Squared difference between the target output length and the gate sum.
pub fn length_penalty(alpha: &[f64], t_y: usize) -> f64 {
    let diff = t_y as f64 - alpha.iter().sum::<f64>();
    diff * diff
}

/// Indices of the `k` largest scores, ties broken toward earlier
/// positions, returned in temporal order.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(StarError::InvalidArgument(format!(
            "top-k of {k} over {} positions",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Anchor count for a target compression rate: k = max(1, floor(t_x / r)).
pub fn anchors_from_rate(t_x: usize, rate: f64) -> usize {
    debug_assert!(rate >= 1.0);
    ((t_x as f64 / rate).floor() as usize).max(1)
}

/// Rows of `h` at the given boundary indices, order preserved.
pub fn anchor_rows(h: &[f64], cols: usize, boundaries: &[usize]) -> Result<Vec<f64>> {
    if boundaries.is_empty() {
        return Err(StarError::InvalidArgument("no anchor boundaries".into()));
    }
    let rows = h.len() / cols;
    let mut out = Vec::with_capacity(boundaries.len() * cols);
    for &b in boundaries {
        if b >= rows {
            return Err(StarError::shape("anchor-rows", format!("boundary {b} out of {rows}")));
        }
        out.extend_from_slice(&h[b * cols..(b + 1) * cols]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_is_sigmoid() {
        assert_eq!(gate(&[0.0]), vec![0.5]);
        let g = gate(&[-50.0, 50.0]);
        assert!(g[0] < 1e-15);
        assert!((g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gate_is_monotone() {
        let g = gate(&[-1.0, 0.0, 0.3, 2.0]);
        for w in g.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn rescale_arithmetic() {
        let out = rescale(&[0.2, 0.2, 0.2], 2, 1.0).unwrap();
        for v in &out {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert!((out.iter().sum::<f64>() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rescale_identity_and_scale_invariance() {
        let alpha = [0.5, 1.0, 0.5];
        let out = rescale(&alpha, 2, 1.0).unwrap();
        for (a, b) in alpha.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let scaled: Vec<f64> = alpha.iter().map(|a| a * 7.3).collect();
        let out2 = rescale(&scaled, 2, 1.0).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_rejects_zero_gates() {
        assert!(rescale(&[0.0, 0.0], 2, 1.0).is_err());
    }

    #[test]
    fn length_penalty_cases() {
        assert_eq!(length_penalty(&[0.5, 0.5, 0.5, 0.5], 2), 0.0);
        assert!((length_penalty(&[0.9, 0.9], 1) - 0.64).abs() < 1e-12);
    }

    #[test]
    fn top_k_selection() {
        assert_eq!(select_top_k(&[0.1, 0.9, 0.3, 0.8], 2).unwrap(), vec![1, 3]);
        assert_eq!(select_top_k(&[0.1, 0.9, 0.3], 3).unwrap(), vec![0, 1, 2]);
        // ties break toward earlier indices
        assert_eq!(select_top_k(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert!(select_top_k(&[0.5], 2).is_err());
    }

    #[test]
    fn anchors_from_rate_cases() {
        assert_eq!(anchors_from_rate(500, 12.0), 41);
        assert_eq!(anchors_from_rate(5, 1.0), 5);
        assert_eq!(anchors_from_rate(5, 10.0), 1);
    }

    #[test]
    fn anchor_rows_gather() {
        let h = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 3x2
        assert_eq!(anchor_rows(&h, 2, &[2]).unwrap(), vec![5.0, 6.0]);
        assert_eq!(anchor_rows(&h, 2, &[0, 1, 2]).unwrap(), h.to_vec());
        assert!(anchor_rows(&h, 2, &[]).is_err());
    }

    #[test]
    fn score_frames_matches_hand_computation() {
        // 2-dim frames, 3 frames; hand-evaluated two-matrix computation.
        let w1 = [1.0, 0.5, -1.0, 2.0]; // [2,2] row-major (in x out)
        let b1 = [0.1, -0.2];
        let w2 = [2.0, 1.0]; // [2,1]
        let sw = SegmenterWeights { w1: &w1, b1: &b1, w2: &w2, b2: 0.5, dim: 2 };
        let frames = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let scores = score_frames(&sw, &frames);
        // frame0: h = relu([1.0+0.1, 0.5-0.2]) = [1.1, 0.3]; s = 2.2+0.3+0.5 = 3.0
        // frame1: h = relu([-1.0+0.1, 2.0-0.2]) = [0, 1.8]; s = 1.8+0.5 = 2.3
        // frame2: h = relu([0.0+0.1, 2.5-0.2]) = [0.1, 2.3]; s = 0.2+2.3+0.5 = 3.0
        assert!((scores[0] - 3.0).abs() < 1e-12);
        assert!((scores[1] - 2.3).abs() < 1e-12);
        assert!((scores[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn score_frames_zero_weights_gives_bias() {
        let w1 = [0.0; 4];
        let b1 = [0.0; 2];
        let w2 = [0.0; 2];
        let sw = SegmenterWeights { w1: &w1, b1: &b1, w2: &w2, b2: -0.7, dim: 2 };
        let scores = score_frames(&sw, &[3.0, -1.0, 0.2, 0.9]);
        assert_eq!(scores, vec![-0.7, -0.7]);
    }
}
