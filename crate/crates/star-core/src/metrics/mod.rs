//! Quality, latency, segmentation, and similarity metrics.

use serde::Serialize;

use crate::error::{Result, StarError};

/// Word (token) error rate: unit-cost Levenshtein distance divided by
/// the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(StarError::InvalidArgument("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Unit-cost Levenshtein distance (substitution/insertion/deletion).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let n = a.len();
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Segment lengths (frames) plus the number of emitted tokens.
#[derive(Clone, Debug)]
pub struct LatencyInput {
    pub segment_lengths: Vec<usize>,
    pub t_y: usize,
}

/// Differentiable average lagging over a segment schedule.
///
/// The minimum delay per token is the mean input consumed per output;
/// each token's effective delay is the later of its segment completion
/// time and the previous effective delay plus the minimum delay.
pub fn dal(input: &LatencyInput) -> Result<f64> {
    if input.t_y == 0 {
        return Err(StarError::InvalidArgument("DAL needs at least one output token".into()));
    }
    if input.segment_lengths.is_empty() || input.segment_lengths.iter().any(|&l| l == 0) {
        return Err(StarError::InvalidArgument(
            "DAL needs non-empty segments of positive length".into(),
        ));
    }
    let total: usize = input.segment_lengths.iter().sum();
    let delays: Vec<f64> = (0..input.t_y)
        .map(|i| {
            let cum: usize = input.segment_lengths.iter().take(i + 1).sum::<usize>();
            if i < input.segment_lengths.len() {
                cum as f64
            } else {
                total as f64
            }
        })
        .collect();
    Ok(dal_from_delays(&delays, total as f64 / input.t_y as f64))
}

/// DAL from per-token completion delays (frames elapsed when each token
/// was emitted) and the minimum delay 1/gamma.
pub fn dal_from_delays(delays: &[f64], min_delay: f64) -> f64 {
    let t_y = delays.len();
    let mut adjusted = 0.0;
    let mut prev = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (i, &d) in delays.iter().enumerate() {
        adjusted = if i == 0 { d } else { d.max(prev + min_delay) };
        prev = adjusted;
        sum += adjusted - i as f64 * min_delay;
    }
    let _ = adjusted;
    sum / t_y as f64
}

/// Greedy one-to-one boundary matching within a frame tolerance.
pub fn boundary_f1(predicted: &[usize], truth: &[usize], tol: usize) -> (f64, f64, f64) {
    let mut used = vec![false; truth.len()];
    let mut matched = 0usize;
    for &p in predicted {
        let hit = truth.iter().enumerate().position(|(j, &t)| {
            !used[j] && t.abs_diff(p) <= tol
        });
        if let Some(j) = hit {
            used[j] = true;
            matched += 1;
        }
    }
    let precision = if predicted.is_empty() { 0.0 } else { matched as f64 / predicted.len() as f64 };
    let recall = if truth.is_empty() { 0.0 } else { matched as f64 / truth.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// Arithmetic mean of representation rows.
pub fn mean_pool(reprs: &[f64], cols: usize) -> Result<Vec<f64>> {
    if reprs.is_empty() || cols == 0 || reprs.len() % cols != 0 {
        return Err(StarError::shape("mean-pool", format!("{} values over {cols} columns", reprs.len())));
    }
    let rows = reprs.len() / cols;
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&reprs[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= rows as f64;
    }
    Ok(out)
}

fn l2_normalize_rows(x: &[f64], cols: usize) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(StarError::InvalidArgument("zero-norm row in cosine similarity".into()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// Mean over query rows of the maximum cosine similarity against any
/// candidate row.
pub fn max_sim(query: &[f64], candidates: &[f64], cols: usize) -> Result<f64> {
    if query.is_empty() || candidates.is_empty() {
        return Err(StarError::InvalidArgument("max-sim needs non-empty inputs".into()));
    }
    let q = l2_normalize_rows(query, cols)?;
    let c = l2_normalize_rows(candidates, cols)?;
    let m = q.len() / cols;
    let n = c.len() / cols;
    let mut total = 0.0;
    for i in 0..m {
        let qi = &q[i * cols..(i + 1) * cols];
        let best = (0..n)
            .map(|j| crate::autodiff::kernels::dot(qi, &c[j * cols..(j + 1) * cols]))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / m as f64)
}

/// Normalized discounted cumulative gain at `k` over relevance values in
/// ranked order; discount is 1/log2(position + 1).
pub fn ndcg_at_k(ranked_relevance: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(StarError::InvalidArgument("nDCG@k needs k >= 1".into()));
    }
    if ranked_relevance.iter().all(|&r| r <= 0.0) {
        return Err(StarError::InvalidArgument("nDCG undefined without a relevant item".into()));
    }
    let dcg = discounted_gain(ranked_relevance, k);
    let mut ideal = ranked_relevance.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let idcg = discounted_gain(&ideal, k);
    Ok(dcg / idcg)
}

fn discounted_gain(rel: &[f64], k: usize) -> f64 {
    rel.iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| r / ((i + 2) as f64).log2())
        .sum()
}

/// Reciprocal rank of the first relevant item within the top `k`, else 0.
pub fn mrr_at_k(ranked_relevant: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(StarError::InvalidArgument("MRR@k needs k >= 1".into()));
    }
    if !ranked_relevant.iter().any(|&r| r) {
        return Err(StarError::InvalidArgument("MRR undefined without a relevant item".into()));
    }
    Ok(ranked_relevant
        .iter()
        .take(k)
        .position(|&r| r)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

/// A single metric observation, serialized as one JSON line.
#[derive(Clone, Debug, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, value: f64, fingerprint: impl Into<String>) -> Self {
        MetricRecord { metric: metric.into(), value, fingerprint: fingerprint.into(), context: None }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context = Some(context.into());
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wer_cases() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(wer::<u32>(&[1, 2], &[]).unwrap(), 1.0);
        assert!((wer(&[1, 2, 3], &[1, 9, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(wer::<u32>(&[], &[1]).is_err());
    }

    #[test]
    fn dal_hand_cases() {
        let d = dal(&LatencyInput { segment_lengths: vec![2, 2, 2], t_y: 3 }).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let d = dal(&LatencyInput { segment_lengths: vec![1, 3, 2], t_y: 3 }).unwrap();
        assert!((d - 5.0 / 3.0).abs() < 1e-12);
        let d = dal(&LatencyInput { segment_lengths: vec![7], t_y: 1 }).unwrap();
        assert!((d - 7.0).abs() < 1e-12);
    }

    #[test]
    fn dal_rejects_empty_output() {
        assert!(dal(&LatencyInput { segment_lengths: vec![2], t_y: 0 }).is_err());
    }

    #[test]
    fn boundary_f1_cases() {
        let (_, _, f1) = boundary_f1(&[5, 11], &[5, 11], 0);
        assert_eq!(f1, 1.0);
        let (_, _, f1) = boundary_f1(&[1, 2], &[10, 20], 1);
        assert_eq!(f1, 0.0);
        let (p, r, f1) = boundary_f1(&[5, 11], &[5, 10, 20], 1);
        assert_eq!(p, 1.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn max_sim_cases() {
        assert_eq!(max_sim(&[1.0, 0.0], &[1.0, 0.0], 2).unwrap(), 1.0);
        assert_eq!(max_sim(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap(), 0.0);
        // two queries with best matches 1.0 and 0.5
        let q = [1.0, 0.0, 3.0, 3.0 * 3f64.sqrt()]; // second at 60 degrees
        let c = [1.0, 0.0, 0.0, 1.0];
        let ms = max_sim(&q, &c, 2).unwrap();
        assert!((ms - 0.75).abs() < 1e-12, "got {ms}");
        assert!(max_sim(&[0.0, 0.0], &[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn ndcg_and_mrr_cases() {
        assert_eq!(ndcg_at_k(&[1.0, 1.0, 0.0], 3).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[true, false], 10).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&[false, true, false], 10).unwrap(), 0.5);
        // relevance [0,1,1] ranked as-is: (1/log2(3) + 1/2) / (1 + 1/log2(3))
        let got = ndcg_at_k(&[0.0, 1.0, 1.0], 3).unwrap();
        let expect = (1.0 / 3f64.log2() + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.6934264036172708).abs() < 1e-12);
        // irrelevant tail ordering does not matter
        let a = ndcg_at_k(&[1.0, 1.0, 0.0, 0.0], 4).unwrap();
        let b = ndcg_at_k(&[1.0, 1.0, 0.0, 0.0], 4).unwrap();
        assert_eq!(a, b);
        assert!(ndcg_at_k(&[0.0, 0.0], 2).is_err());
        assert!(mrr_at_k(&[false, false], 2).is_err());
    }

    #[test]
    fn mean_pool_rows() {
        let got = mean_pool(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(got, vec![2.0, 3.0]);
    }
}
