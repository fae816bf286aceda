//! Evaluation modes: offline decoding under the model's own policy,
//! rate-override and robustness protocols, and streaming runs.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::FeatureSequence;
use crate::engine::{run_stream, Policy};
use crate::error::{Result, StarError};
use crate::metrics::{boundary_f1, wer, MetricRecord};
use crate::model::{
    encode_full, greedy_decode, KeySet, Method, TransducerModel, Visibility,
};
use crate::segmentation::{
    anchors_from_rate, cif_aggregate, cif_segment, select_top_k, TailRule,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// The model's own segmentation at its training rate, fully observed.
    OfflineFull,
    /// Re-segment at a different rate (top-k for anchors, score rescaling
    /// for CIF).
    OfflineTopK { rate: f64 },
    /// Uniform segments of floor(t_x / t_y) frames.
    FixedSeg,
    /// Every frame representation exposed to the decoder.
    AllCache,
    /// The live READ/YIELD engine.
    Stream { policy: Policy },
}

impl EvalMode {
    pub fn name(&self) -> String {
        match self {
            EvalMode::OfflineFull => "offline-full".into(),
            EvalMode::OfflineTopK { rate } => format!("offline-topk(r={rate})"),
            EvalMode::FixedSeg => "fixed-seg".into(),
            EvalMode::AllCache => "all-cache".into(),
            EvalMode::Stream { policy } => format!("stream({:?},k={})", policy.kind, policy.wait_k),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub sequences: usize,
    /// Mean token error rate (WER over token ids), in percent.
    pub token_error_percent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_f1: Option<f64>,
    /// Mean frames per decoder-visible representation.
    pub realized_rate: f64,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = vec![
            MetricRecord::new("token_error_percent", self.token_error_percent, &self.fingerprint)
                .with_context(self.mode.clone()),
            MetricRecord::new("realized_rate", self.realized_rate, &self.fingerprint)
                .with_context(self.mode.clone()),
        ];
        if let Some(d) = self.mean_dal {
            out.push(MetricRecord::new("dal", d, &self.fingerprint).with_context(self.mode.clone()));
        }
        if let Some(f1) = self.boundary_f1 {
            out.push(
                MetricRecord::new("boundary_f1", f1, &self.fingerprint)
                    .with_context(self.mode.clone()),
            );
        }
        out
    }
}

struct SeqEval {
    error: f64,
    dal: Option<f64>,
    f1: Option<f64>,
    keys: usize,
    frames: usize,
}

/// Uniform robustness boundaries: floor(t_x/t_y) * m for m = 1..=t_y,
/// clipped to the sequence, as 0-based final-frame indices.
pub fn fixed_seg_boundaries(t_x: usize, t_y: usize) -> Vec<usize> {
    let w = (t_x / t_y).max(1);
    let mut out: Vec<usize> = (1..=t_y).map(|m| (w * m).min(t_x) - 1).collect();
    out.dedup();
    out
}

fn offline_keys(
    model: &TransducerModel,
    seq: &FeatureSequence,
    mode: &EvalMode,
) -> Result<(KeySet, Option<Vec<usize>>)> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let frames = seq.frames_f64();
    let t_x = seq.t_x();
    let unsupported = || {
        StarError::Incompatible(format!(
            "mode {} is undefined for method {}",
            mode.name(),
            model.method.as_str()
        ))
    };
    match model.method {
        Method::None => {
            if !matches!(mode, EvalMode::OfflineFull | EvalMode::AllCache) {
                return Err(unsupported());
            }
            let h = encode_full(model, &frames, &vec![false; t_x])?;
            let mut keys = KeySet::default();
            for t in 0..t_x {
                keys.push_key(&h[t * d..(t + 1) * d], 1, None);
            }
            Ok((keys, None))
        }
        Method::Star => {
            let (scores, _) = model.score_and_gate(&frames).expect("anchor model has segmenter");
            let picked: Vec<usize> = match mode {
                EvalMode::OfflineFull => {
                    select_top_k(&scores, anchors_from_rate(t_x, model.rate))?
                }
                EvalMode::OfflineTopK { rate } => {
                    select_top_k(&scores, anchors_from_rate(t_x, *rate))?
                }
                // exposing everything means every position is selected
                EvalMode::AllCache => (0..t_x).collect(),
                EvalMode::FixedSeg => fixed_seg_boundaries(t_x, seq.t_y()),
                EvalMode::Stream { .. } => unreachable!("stream handled separately"),
            };
            let mut flags = vec![false; t_x];
            for &i in &picked {
                flags[i] = true;
            }
            let h = encode_full(model, &frames, &flags)?;
            let mut keys = KeySet::default();
            for (ord, &i) in picked.iter().enumerate() {
                keys.push_key(&h[i * d..(i + 1) * d], ord + 1, Some(scores[i]));
            }
            Ok((keys, Some(picked)))
        }
        Method::Cif => {
            let (_, gates) = model.score_and_gate(&frames).expect("cif model has segmenter");
            let h = encode_full(model, &frames, &vec![false; t_x])?;
            let (weights, boundaries): (Vec<f64>, Vec<usize>) = match mode {
                EvalMode::OfflineFull => {
                    let seg = cif_segment(&gates, 1.0, TailRule::FireIfHalf);
                    if seg.boundaries.is_empty() {
                        // degenerate scorer: treat the whole input as one segment
                        let seg = crate::train::graph::segmentation_with_flush(&gates, f64::INFINITY);
                        let c = cif_aggregate(&h, d, &seg)?;
                        return cif_keys(c, seg.boundary_frames());
                    }
                    let c = cif_aggregate(&h, d, &seg)?;
                    return cif_keys(c, seg.boundary_frames());
                }
                EvalMode::OfflineTopK { rate } => {
                    // force the fire count to t_x / rate by rescaling
                    let target = anchors_from_rate(t_x, *rate);
                    let rescaled = crate::segmentation::rescale(&gates, target, 1.0)?;
                    let seg = cif_segment(&rescaled, 1.0, TailRule::FireIfHalf);
                    let c = cif_aggregate(&h, d, &seg)?;
                    return cif_keys(c, seg.boundary_frames());
                }
                EvalMode::AllCache => {
                    let mut keys = KeySet::default();
                    for t in 0..t_x {
                        keys.push_key(&h[t * d..(t + 1) * d], 1, None);
                    }
                    return Ok((keys, None));
                }
                EvalMode::FixedSeg => {
                    // gate-weighted sums inside forced uniform segments
                    let bounds = fixed_seg_boundaries(t_x, seq.t_y());
                    let mut w = vec![0.0; bounds.len() * t_x];
                    let mut start = 0usize;
                    for (m, &b) in bounds.iter().enumerate() {
                        for t in start..=b {
                            w[m * t_x + t] = gates[t];
                        }
                        start = b + 1;
                    }
                    (w, bounds)
                }
                EvalMode::Stream { .. } => unreachable!("stream handled separately"),
            };
            let n = boundaries.len();
            let mut data = vec![0.0; n * d];
            for m in 0..n {
                for t in 0..t_x {
                    let wv = weights[m * t_x + t];
                    if wv == 0.0 {
                        continue;
                    }
                    for (o, hv) in data[m * d..(m + 1) * d].iter_mut().zip(&h[t * d..(t + 1) * d]) {
                        *o += wv * hv;
                    }
                }
            }
            let mut keys = KeySet::default();
            for (ord, chunk) in data.chunks(d).enumerate() {
                keys.push_key(chunk, ord + 1, None);
            }
            Ok((keys, Some(boundaries)))
        }
        Method::Cnn => {
            if !matches!(mode, EvalMode::OfflineFull) {
                return Err(unsupported());
            }
            let stride_cfg = model
                .stride_cfg
                .as_ref()
                .ok_or_else(|| StarError::Incompatible("cnn model without stride config".into()))?;
            let compressed = cnn_forward(model, &frames, t_x)?;
            let rows = compressed.len() / cfg.frame_dim;
            let h = encode_full(model, &compressed, &vec![false; rows])?;
            let mut keys = KeySet::default();
            for t in 0..rows {
                keys.push_key(&h[t * d..(t + 1) * d], 1, None);
            }
            let _ = stride_cfg;
            Ok((keys, None))
        }
    }
}

fn cif_keys(data: Vec<f64>, boundaries: Vec<usize>) -> Result<(KeySet, Option<Vec<usize>>)> {
    let n = boundaries.len();
    if n == 0 {
        return Err(StarError::InvalidArgument("CIF produced no segments".into()));
    }
    let d = data.len() / n;
    let mut keys = KeySet::default();
    for (ord, chunk) in data.chunks(d).enumerate() {
        keys.push_key(chunk, ord + 1, None);
    }
    Ok((keys, Some(boundaries)))
}

/// Untaped convolution compressor forward (inference path).
pub fn cnn_forward(model: &TransducerModel, frames: &[f64], t_x: usize) -> Result<Vec<f64>> {
    use crate::autodiff::kernels::conv1d;
    use crate::segmentation::conv::{RESIDUAL_KERNEL, RESIDUAL_LAYERS};
    let stride_cfg = model
        .stride_cfg
        .as_ref()
        .ok_or_else(|| StarError::Incompatible("cnn model without stride config".into()))?;
    let c = model.config.frame_dim;
    if t_x < stride_cfg.largest_kernel() {
        return Err(StarError::InvalidArgument(format!(
            "input of {t_x} frames shorter than kernel {}",
            stride_cfg.largest_kernel()
        )));
    }
    let mut x = frames.to_vec();
    let mut t = t_x;
    for (b, (kernel, stride)) in stride_cfg.blocks.iter().enumerate() {
        let w = model.params.get(&format!("conv.{b}.w")).data();
        let bias = model.params.get(&format!("conv.{b}.b")).data();
        x = conv1d(&x, w, bias, t, c, c, *kernel, *stride);
        t = x.len() / c;
        let mut r = x.clone();
        for layer in 0..RESIDUAL_LAYERS {
            let w = model.params.get(&format!("conv.{b}.res{layer}.w")).data();
            let bias = model.params.get(&format!("conv.{b}.res{layer}.b")).data();
            r = conv1d(&r, w, bias, t, c, c, RESIDUAL_KERNEL, 1);
            if layer + 1 < RESIDUAL_LAYERS {
                for v in r.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        for (xv, rv) in x.iter_mut().zip(r.iter()) {
            *xv += rv;
        }
    }
    Ok(x)
}

/// Evaluate a model on a split. Offline modes decode greedily with full
/// visibility over their key sets; stream mode runs the engine and adds
/// latency and boundary metrics.
pub fn evaluate(
    model: &TransducerModel,
    mode: EvalMode,
    seqs: &[FeatureSequence],
    max_out: usize,
    fingerprint: &str,
) -> Result<EvalReport> {
    if seqs.is_empty() {
        return Err(StarError::InvalidArgument("empty evaluation split".into()));
    }
    let per_seq: Vec<Result<SeqEval>> = seqs
        .par_iter()
        .map(|seq| -> Result<SeqEval> {
            let truth: Vec<usize> = seq.boundaries.iter().map(|&b| b as usize).collect();
            match &mode {
                EvalMode::Stream { policy } => {
                    let out = run_stream(model, *policy, &seq.frames_f64(), max_out)?;
                    let (_, _, f1) = boundary_f1(&out.boundaries, &truth, 1);
                    let dal = out.trace.dal().ok();
                    Ok(SeqEval {
                        error: wer(&seq.transcript, &out.hypothesis)?,
                        dal,
                        f1: Some(f1),
                        keys: out.boundaries.len().max(1),
                        frames: seq.t_x(),
                    })
                }
                offline => {
                    let (keys, boundaries) = offline_keys(model, seq, offline)?;
                    let hyp = greedy_decode(model, &keys, Visibility::Full, max_out)?;
                    let f1 = boundaries.as_ref().map(|b| boundary_f1(b, &truth, 1).2);
                    Ok(SeqEval {
                        error: wer(&seq.transcript, &hyp)?,
                        dal: None,
                        f1,
                        keys: keys.rows,
                        frames: seq.t_x(),
                    })
                }
            }
        })
        .collect();
    let mut error_sum = 0.0;
    let mut dal_sum = 0.0;
    let mut dal_n = 0usize;
    let mut f1_sum = 0.0;
    let mut f1_n = 0usize;
    let mut key_sum = 0usize;
    let mut frame_sum = 0usize;
    for r in per_seq {
        let e = r?;
        error_sum += e.error;
        if let Some(d) = e.dal {
            dal_sum += d;
            dal_n += 1;
        }
        if let Some(f) = e.f1 {
            f1_sum += f;
            f1_n += 1;
        }
        key_sum += e.keys;
        frame_sum += e.frames;
    }
    let n = seqs.len() as f64;
    Ok(EvalReport {
        mode: mode.name(),
        sequences: seqs.len(),
        token_error_percent: 100.0 * error_sum / n,
        mean_dal: if dal_n > 0 { Some(dal_sum / dal_n as f64) } else { None },
        boundary_f1: if f1_n > 0 { Some(f1_sum / f1_n as f64) } else { None },
        realized_rate: frame_sum as f64 / key_sum.max(1) as f64,
        fingerprint: fingerprint.to_string(),
    })
}
