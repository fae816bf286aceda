//! Continuous integrate-and-fire segmentation and aggregation.
//!
//! Gates are accumulated left to right; when the running mass reaches
//! the threshold, the current frame fires and its gate is split into a
//! left part (completing the segment at exactly `beta`) and a right
//! residual that seeds the next segment.

use crate::error::{Result, StarError};

/// What to do with leftover mass at the end of the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailRule {
    /// Fire a final segment if at least beta/2 remains (inference default).
    FireIfHalf,
    AlwaysDrop,
}

/// One firing position with its gate split.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    pub frame: usize,
    /// Portion of the boundary gate weighting this segment.
    pub alpha_left: f64,
    /// Residual carried into the next segment.
    pub alpha_right: f64,
    /// True when the boundary was forced by the tail rule rather than a
    /// threshold crossing; its left weight is the full leftover gate.
    pub tail: bool,
}

/// Firing positions plus the weight structure needed to aggregate and to
/// differentiate through the aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub boundaries: Vec<Boundary>,
    /// Gates, as seen by the scan (used to rebuild interior weights).
    pub gates: Vec<f64>,
    /// Mass left unaggregated after the last boundary (zero if the tail
    /// fired, since the tail segment then absorbs all remaining mass).
    pub tail_mass: f64,
    /// Whether the leftover mass was fired as a final segment.
    pub tail_fired: bool,
    pub frames: usize,
}

impl Segmentation {
    pub fn boundary_frames(&self) -> Vec<usize> {
        self.boundaries.iter().map(|b| b.frame).collect()
    }

    /// Dense aggregation weights, [boundaries x frames]: interior frames
    /// carry their gate, boundary frames their left split, and the
    /// previous boundary its right residual.
    pub fn weight_matrix(&self) -> Vec<f64> {
        let t = self.frames;
        let n = self.boundaries.len();
        let mut w = vec![0.0; n * t];
        let mut prev: Option<&Boundary> = None;
        for (m, b) in self.boundaries.iter().enumerate() {
            let row = &mut w[m * t..(m + 1) * t];
            let start = match prev {
                Some(p) => {
                    row[p.frame] = p.alpha_right;
                    p.frame + 1
                }
                None => 0,
            };
            for (f, gate) in self.gates.iter().enumerate().take(b.frame).skip(start) {
                row[f] = *gate;
            }
            row[b.frame] = b.alpha_left;
            prev = Some(b);
        }
        w
    }
}

/// Scan gates left to right, firing every time the accumulated mass
/// reaches `beta`.
pub fn cif_segment(alpha: &[f64], beta: f64, tail: TailRule) -> Segmentation {
    assert!(beta > 0.0, "threshold must be positive");
    let mut boundaries = Vec::new();
    let mut acc = 0.0;
    for (t, &a) in alpha.iter().enumerate() {
        acc += a;
        if acc >= beta {
            let right = acc - beta;
            boundaries.push(Boundary {
                frame: t,
                alpha_left: a - right,
                alpha_right: right,
                tail: false,
            });
            acc = right;
        }
    }
    let mut tail_mass = acc;
    let mut tail_fired = false;
    // A tail segment only makes sense when the last frame has not fired
    // already; boundaries stay strictly increasing either way.
    let last_unfired =
        !alpha.is_empty() && boundaries.last().map_or(true, |b| b.frame != alpha.len() - 1);
    if tail == TailRule::FireIfHalf && tail_mass >= beta / 2.0 && last_unfired {
        let last = alpha.len() - 1;
        boundaries.push(Boundary { frame: last, alpha_left: alpha[last], alpha_right: 0.0, tail: true });
        tail_fired = true;
        tail_mass = 0.0;
    }
    Segmentation { boundaries, gates: alpha.to_vec(), tail_mass, tail_fired, frames: alpha.len() }
}

/// Weighted per-segment aggregation of representations:
/// c_m = alpha_right(prev) * h_prev + sum of interior alpha_t * h_t +
/// alpha_left(this) * h_this.
pub fn cif_aggregate(h: &[f64], cols: usize, seg: &Segmentation) -> Result<Vec<f64>> {
    let rows = h.len() / cols;
    if rows != seg.frames {
        return Err(StarError::shape(
            "cif-aggregate",
            format!("segmentation over {} frames vs {} rows", seg.frames, rows),
        ));
    }
    let w = seg.weight_matrix();
    let n = seg.boundaries.len();
    let mut out = vec![0.0; n * cols];
    for m in 0..n {
        let dst = &mut out[m * cols..(m + 1) * cols];
        for t in 0..rows {
            let wv = w[m * rows + t];
            if wv == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(&h[t * cols..(t + 1) * cols]) {
                *d += wv * s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRACE_ALPHA: [f64; 4] = [0.4, 0.5, 0.3, 0.9];

    #[test]
    fn worked_trace() {
        // acc: 0.4, 0.9, 1.2 -> fire at frame 2 (left 0.1, right 0.2),
        // then 0.2+0.9=1.1 -> fire at frame 3 (left 0.8, right 0.1),
        // tail 0.1 dropped under fire-if-half (0.1 < 0.5).
        let seg = cif_segment(&TRACE_ALPHA, 1.0, TailRule::FireIfHalf);
        assert_eq!(seg.boundary_frames(), vec![2, 3]);
        let b0 = &seg.boundaries[0];
        assert!((b0.alpha_left - 0.1).abs() < 1e-12);
        assert!((b0.alpha_right - 0.2).abs() < 1e-12);
        let b1 = &seg.boundaries[1];
        assert!((b1.alpha_left - 0.8).abs() < 1e-12);
        assert!((b1.alpha_right - 0.1).abs() < 1e-12);
        assert!((seg.tail_mass - 0.1).abs() < 1e-12);
        assert!(!seg.tail_fired);
    }

    #[test]
    fn worked_trace_aggregation() {
        // c_2 = 0.2 * h_2 + 0.8 * h_3 (0-based h rows)
        let seg = cif_segment(&TRACE_ALPHA, 1.0, TailRule::FireIfHalf);
        let h: Vec<f64> = (0..8).map(|v| v as f64).collect(); // 4x2
        let c = cif_aggregate(&h, 2, &seg).unwrap();
        let expect_c2 = [0.2 * 4.0 + 0.8 * 6.0, 0.2 * 5.0 + 0.8 * 7.0];
        assert!((c[2] - expect_c2[0]).abs() < 1e-12);
        assert!((c[3] - expect_c2[1]).abs() < 1e-12);
    }

    #[test]
    fn exact_fires() {
        let seg = cif_segment(&[1.0, 1.0], 1.0, TailRule::FireIfHalf);
        assert_eq!(seg.boundary_frames(), vec![0, 1]);
        for b in &seg.boundaries {
            assert_eq!(b.alpha_left, 1.0);
            assert_eq!(b.alpha_right, 0.0);
        }
        // all-exact fires aggregate to the identity
        let h = [1.0, 2.0, 3.0, 4.0];
        let c = cif_aggregate(&h, 2, &seg).unwrap();
        assert_eq!(c, h.to_vec());
    }

    #[test]
    fn rescaled_gates_fire_exactly_t_y_times() {
        let alpha = crate::segmentation::rescale(&[0.2, 0.2, 0.2], 2, 1.0).unwrap();
        let seg = cif_segment(&alpha, 1.0, TailRule::FireIfHalf);
        assert_eq!(seg.boundaries.len(), 2);
        assert_eq!(seg.boundary_frames(), vec![1, 2]);
    }

    #[test]
    fn mass_conservation() {
        let alpha = [0.3, 0.7, 0.45, 0.8, 0.2, 0.61];
        let seg = cif_segment(&alpha, 1.0, TailRule::AlwaysDrop);
        let w = seg.weight_matrix();
        for m in 0..seg.boundaries.len() {
            let mass: f64 = w[m * seg.frames..(m + 1) * seg.frames].iter().sum();
            assert!((mass - 1.0).abs() < 1e-9, "segment {m} mass {mass}");
        }
    }

    #[test]
    fn tail_fire_if_half() {
        // acc 0.6, 1.2 -> fire at 1 (residual 0.2); tail 0.2+0.4 = 0.6 >= 0.5
        let seg = cif_segment(&[0.6, 0.6, 0.4], 1.0, TailRule::FireIfHalf);
        assert_eq!(seg.boundary_frames(), vec![1, 2]);
        assert!(seg.tail_fired);
        let last = seg.boundaries.last().unwrap();
        assert!(last.tail);
        assert!((last.alpha_left - 0.4).abs() < 1e-12);
        // dropped under the other rule
        let seg = cif_segment(&[0.6, 0.6, 0.4], 1.0, TailRule::AlwaysDrop);
        assert_eq!(seg.boundary_frames(), vec![1]);
        assert!(!seg.tail_fired);
    }
}
