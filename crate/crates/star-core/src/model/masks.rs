//! Attention visibility masks.

/// Dense boolean visibility matrix; `true` means the position may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisMask {
    pub rows: usize,
    pub cols: usize,
    pub visible: Vec<bool>,
}

impl VisMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        VisMask { rows, cols, visible: vec![true; rows * cols] }
    }

    /// Causal self-attention: row i sees columns 0..=i.
    pub fn causal(n: usize) -> Self {
        let mut visible = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                visible[i * n + j] = true;
            }
        }
        VisMask { rows: n, cols: n, visible }
    }

    pub fn at(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn transposed(&self) -> VisMask {
        let mut visible = vec![false; self.visible.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                visible[c * self.rows + r] = self.visible[r * self.cols + c];
            }
        }
        VisMask { rows: self.cols, cols: self.rows, visible }
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.visible[r * self.cols..(r + 1) * self.cols]
    }
}

/// Infinite-lookback visibility, `[num_anchors x t_y]`: output position
/// t (1-based) may attend anchor j iff j <= min(t + wait_k - 1, anchors).
pub fn il_mask(t_y: usize, num_anchors: usize, wait_k: usize) -> VisMask {
    assert!(wait_k >= 1, "wait-k must be at least 1");
    let mut visible = vec![false; num_anchors * t_y];
    for t in 1..=t_y {
        let limit = (t + wait_k - 1).min(num_anchors);
        for j in 1..=limit {
            visible[(j - 1) * t_y + (t - 1)] = true;
        }
    }
    VisMask { rows: num_anchors, cols: t_y, visible }
}

/// Generalization over arbitrary key groupings: key i belongs to segment
/// `key_segments[i]` (1-based); output position t may attend keys whose
/// segment is at most t + wait_k - 1. Returned as `[t_y x keys]` ready
/// for decoder use.
pub fn il_mask_by_segment(t_y: usize, key_segments: &[usize], wait_k: usize) -> VisMask {
    assert!(wait_k >= 1, "wait-k must be at least 1");
    let keys = key_segments.len();
    let mut visible = vec![false; t_y * keys];
    for t in 1..=t_y {
        let limit = t + wait_k - 1;
        for (i, &seg) in key_segments.iter().enumerate() {
            if seg <= limit {
                visible[(t - 1) * keys + i] = true;
            }
        }
    }
    VisMask { rows: t_y, cols: keys, visible }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wait_one_is_lower_triangular() {
        let m = il_mask(3, 3, 1);
        for t in 0..3 {
            for j in 0..3 {
                assert_eq!(m.at(j, t), j <= t, "anchor {j} token {t}");
            }
        }
    }

    #[test]
    fn large_wait_k_sees_everything() {
        let m = il_mask(4, 3, 10);
        assert!(m.visible.iter().all(|&v| v));
    }

    #[test]
    fn row_visibility_counts() {
        // t_y = 2, anchors = 4, wait_k = 2 -> tokens see 2 then 3 anchors
        let m = il_mask(2, 4, 2);
        for (t, expect) in [(0usize, 2usize), (1, 3)] {
            let count = (0..4).filter(|&j| m.at(j, t)).count();
            assert_eq!(count, expect);
        }
    }

    #[test]
    fn segment_grouping_matches_anchor_case() {
        // one key per segment reduces to the anchor mask transposed
        let segs: Vec<usize> = (1..=4).collect();
        let a = il_mask(3, 4, 2).transposed();
        let b = il_mask_by_segment(3, &segs, 2);
        assert_eq!(a, b);
    }
}
