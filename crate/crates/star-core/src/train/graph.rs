//! Per-sequence differentiable loss assembly for every compression
//! method and training phase.

use crate::autodiff::{Tape, VarId};
use crate::data::FeatureSequence;
use crate::error::{Result, StarError};
use crate::model::params::BoundParams;
use crate::model::{il_mask_by_segment, taped, vocab, Method, TransducerModel, VisMask};
use crate::segmentation::{
    anchors_from_rate, cif_segment, select_top_k, Boundary, Segmentation, TailRule,
};

/// How decoder visibility is arranged during teacher forcing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// Fully observed input, full anchor visibility.
    Offline { train_lp: bool },
    /// Policy-matched segmentation with infinite-lookback masking.
    Streaming { wait_k: usize, stride: usize },
}

/// Scalar outcomes of one sequence pass.
#[derive(Clone, Debug)]
pub struct SequenceLoss {
    pub total: f64,
    pub nll: f64,
    pub lp: Option<f64>,
    pub target_tokens: usize,
    pub grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Summed token NLL over non-pad targets; mask and target lengths must
/// already agree (the decoder enforces the mask shape).
pub fn nll_il(tape: &mut Tape, logits: VarId, targets: &[u32]) -> Result<VarId> {
    if tape.shape(logits)[0] != targets.len() {
        return Err(StarError::shape(
            "nll-il",
            format!("{} logit rows vs {} targets", tape.shape(logits)[0], targets.len()),
        ));
    }
    tape.cross_entropy(logits, targets, Some(vocab::PAD))
}

/// L = nll + gamma * lp while the segmenter trains; plain nll afterwards.
pub fn compose_loss(nll: f64, lp: f64, gamma: f64, in_window: bool) -> f64 {
    if in_window {
        nll + gamma * lp
    } else {
        nll
    }
}

/// Mirror of the engine's FLUSH: any mass left after the final threshold
/// fire becomes a last segment ending at the final frame.
pub fn segmentation_with_flush(alpha: &[f64], beta: f64) -> Segmentation {
    let mut seg = cif_segment(alpha, beta, TailRule::AlwaysDrop);
    let last = alpha.len().saturating_sub(1);
    let last_unfired = seg.boundaries.last().map_or(!alpha.is_empty(), |b| b.frame != last);
    if last_unfired {
        seg.boundaries.push(Boundary {
            frame: last,
            alpha_left: alpha[last],
            alpha_right: 0.0,
            tail: true,
        });
        seg.tail_fired = true;
        seg.tail_mass = 0.0;
    }
    seg
}

/// Boundary frames under threshold accumulation with reset (the anchor
/// policy), plus a forced final segment mirroring FLUSH.
pub fn star_threshold_boundaries(gates: &[f64], beta: f64) -> Vec<usize> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (i, g) in gates.iter().enumerate() {
        acc += g;
        if acc >= beta {
            out.push(i);
            acc = 0.0;
        }
    }
    if !gates.is_empty() && out.last().map_or(true, |&b| b != gates.len() - 1) {
        out.push(gates.len() - 1);
    }
    out
}

/// Build the taped loss for one sequence and optionally run backward.
pub fn sequence_loss(
    model: &TransducerModel,
    seq: &FeatureSequence,
    phase: Phase,
    gamma: f64,
    compute_grads: bool,
) -> Result<SequenceLoss> {
    let cfg = &model.config;
    if seq.frame_dim != cfg.frame_dim {
        return Err(StarError::shape(
            "sequence-loss",
            format!("frame dim {} vs model {}", seq.frame_dim, cfg.frame_dim),
        ));
    }
    let t_x = seq.t_x();
    let t_y = seq.t_y();
    if t_x == 0 || t_y == 0 {
        return Err(StarError::InvalidArgument("empty sequence".into()));
    }
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &model.params);
    let frames = tape.leaf_vec(vec![t_x, cfg.frame_dim], seq.frames_f64())?;

    let mut tokens_in = Vec::with_capacity(t_y + 1);
    tokens_in.push(vocab::BOS);
    tokens_in.extend_from_slice(&seq.transcript);
    let mut targets = Vec::with_capacity(t_y + 1);
    targets.extend_from_slice(&seq.transcript);
    targets.push(vocab::EOS);

    let beta = 1.0;
    let mut lp_var: Option<VarId> = None;
    let train_lp = matches!(phase, Phase::Offline { train_lp: true })
        && matches!(model.method, Method::Star | Method::Cif);

    // Assemble the decoder-visible keys per method.
    let (keys, key_segments, inject): (VarId, Vec<usize>, Option<VarId>) = match model.method {
        Method::None => {
            let h = taped::encode(&mut tape, &p, cfg, frames, &vec![false; t_x])?;
            let segments = match phase {
                Phase::Offline { .. } => vec![1usize; t_x],
                Phase::Streaming { stride, .. } => {
                    let w = stride.max(1);
                    (0..t_x).map(|i| i / w + 1).collect()
                }
            };
            (h, segments, None)
        }
        Method::Star => {
            let scores = taped::segmenter_scores(&mut tape, &p, frames)?;
            let alpha = tape.sigmoid(scores);
            if train_lp {
                lp_var = Some(taped::length_penalty(&mut tape, alpha, t_y)?);
            }
            let score_vals = tape.value(scores).to_vec();
            let picked = match phase {
                Phase::Offline { .. } => {
                    let k = anchors_from_rate(t_x, model.rate);
                    select_top_k(&score_vals, k)?
                }
                Phase::Streaming { .. } => star_threshold_boundaries(tape.value(alpha), beta),
            };
            let mut flags = vec![false; t_x];
            for &i in &picked {
                flags[i] = true;
            }
            let h = taped::encode(&mut tape, &p, cfg, frames, &flags)?;
            let anchors = tape.gather_rows(h, &picked)?;
            let s_col = tape.reshape(scores, vec![t_x, 1])?;
            let s_rows = tape.gather_rows(s_col, &picked)?;
            let s_vec = tape.reshape(s_rows, vec![picked.len()])?;
            let segments = (1..=picked.len()).collect();
            (anchors, segments, Some(s_vec))
        }
        Method::Cif => {
            let scores = taped::segmenter_scores(&mut tape, &p, frames)?;
            let alpha = tape.sigmoid(scores);
            if train_lp {
                lp_var = Some(taped::length_penalty(&mut tape, alpha, t_y)?);
            }
            let (weights, seg) = match phase {
                Phase::Offline { .. } => {
                    let rescaled = taped::rescale_gates(&mut tape, alpha, t_y, beta)?;
                    let seg = cif_segment(tape.value(rescaled), beta, TailRule::FireIfHalf);
                    (rescaled, seg)
                }
                Phase::Streaming { .. } => {
                    let seg = segmentation_with_flush(tape.value(alpha), beta);
                    (alpha, seg)
                }
            };
            if seg.boundaries.is_empty() {
                return Err(StarError::InvalidArgument(
                    "CIF produced no segments (all-zero gates)".into(),
                ));
            }
            let h = taped::encode(&mut tape, &p, cfg, frames, &vec![false; t_x])?;
            let compressed = tape.cif_aggregate(weights, h, &seg)?;
            let segments = (1..=seg.boundaries.len()).collect();
            (compressed, segments, None)
        }
        Method::Cnn => {
            let stride_cfg = model
                .stride_cfg
                .as_ref()
                .ok_or_else(|| StarError::Incompatible("cnn model without stride config".into()))?;
            if t_x < stride_cfg.largest_kernel() {
                return Err(StarError::InvalidArgument(format!(
                    "input of {t_x} frames shorter than kernel {}",
                    stride_cfg.largest_kernel()
                )));
            }
            let compressed = taped::cnn_compress(&mut tape, &p, stride_cfg, frames)?;
            let rows = tape.shape(compressed)[0];
            let h = taped::encode(&mut tape, &p, cfg, compressed, &vec![false; rows])?;
            (h, vec![1usize; rows], None)
        }
    };

    let mask = match phase {
        Phase::Offline { .. } => VisMask::full(tokens_in.len(), key_segments.len()),
        Phase::Streaming { wait_k, .. } => {
            il_mask_by_segment(tokens_in.len(), &key_segments, wait_k)
        }
    };
    let (logits, _) = taped::decode(&mut tape, &p, cfg, &tokens_in, keys, Some(&mask), inject)?;
    let nll = nll_il(&mut tape, logits, &targets)?;
    let loss = match lp_var {
        Some(lp) => {
            let scaled = tape.scale(lp, gamma);
            tape.add(nll, scaled)?
        }
        None => nll,
    };
    let nll_val = tape.value(nll)[0];
    let lp_val = lp_var.map(|v| tape.value(v)[0]);
    let total = tape.value(loss)[0];
    if !total.is_finite() {
        return Err(StarError::Diverged { step: 0, details: format!("loss {total}") });
    }
    let grads = if compute_grads {
        tape.backward(loss)?;
        Some(p.collect_grads(&tape))
    } else {
        None
    };
    Ok(SequenceLoss { total, nll: nll_val, lp: lp_val, target_tokens: targets.len(), grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};
    use crate::model::ModelConfig;

    fn tiny_setup(method: Method) -> (TransducerModel, Vec<FeatureSequence>) {
        let cfg = ModelConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            vocab: 11,
            max_src_positions: 128,
            max_tgt_positions: 32,
            frame_dim: 6,
        };
        let mut model = TransducerModel::new_uncompressed(cfg, 7).unwrap();
        if method != Method::None {
            model.enable_compression(method, 4.0, 3).unwrap();
        }
        let data_cfg = SyntheticConfig {
            content_vocab: 8,
            frame_dim: 6,
            tokens_per_utterance: (3, 6),
            seed: 5,
            ..Default::default()
        };
        (model, generate(&data_cfg, 4).unwrap())
    }

    #[test]
    fn loss_is_finite_for_every_method() {
        for method in [Method::None, Method::Star, Method::Cif, Method::Cnn] {
            let (model, seqs) = tiny_setup(method);
            for seq in &seqs {
                let out = sequence_loss(&model, seq, Phase::Offline { train_lp: true }, 0.01, true)
                    .unwrap();
                assert!(out.total.is_finite(), "method {method:?}");
                assert!(out.grads.is_some());
            }
        }
    }

    #[test]
    fn streaming_phase_builds_masks() {
        for method in [Method::None, Method::Star, Method::Cif] {
            let (model, seqs) = tiny_setup(method);
            let out = sequence_loss(
                &model,
                &seqs[0],
                Phase::Streaming { wait_k: 1, stride: 4 },
                0.01,
                false,
            )
            .unwrap();
            assert!(out.total.is_finite(), "method {method:?}");
        }
    }

    #[test]
    fn uniform_logits_nll_value() {
        // zeroed model head gives uniform logits: nll = (t_y + 1) ln V
        let (mut model, seqs) = tiny_setup(Method::None);
        let d = model.config.d_model;
        let v = model.config.vocab;
        model.params.set("lm_head.w", crate::autodiff::Tensor::zeros(vec![d, v])).unwrap();
        model.params.set("lm_head.b", crate::autodiff::Tensor::zeros(vec![v])).unwrap();
        let seq = &seqs[0];
        let out = sequence_loss(&model, seq, Phase::Offline { train_lp: false }, 0.0, false).unwrap();
        let expect = (seq.t_y() + 1) as f64 * (v as f64).ln();
        assert!((out.nll - expect).abs() < 1e-9, "{} vs {expect}", out.nll);
    }

    #[test]
    fn masking_future_keys_changes_loss() {
        // method None exposes the same keys either way; only the mask differs
        let (model, seqs) = tiny_setup(Method::None);
        let full = sequence_loss(&model, &seqs[0], Phase::Offline { train_lp: false }, 0.0, false)
            .unwrap();
        let il = sequence_loss(
            &model,
            &seqs[0],
            Phase::Streaming { wait_k: 1, stride: 2 },
            0.0,
            false,
        )
        .unwrap();
        assert!((full.nll - il.nll).abs() > 1e-9);
    }

    #[test]
    fn compose_loss_schedule() {
        assert_eq!(compose_loss(2.0, 0.64, 0.0, true), 2.0);
        assert!((compose_loss(2.0, 0.64, 0.01, true) - 2.0064).abs() < 1e-12);
        assert_eq!(compose_loss(2.0, 123.0, 0.01, false), 2.0);
    }

    #[test]
    fn star_boundaries_force_final_segment() {
        let b = star_threshold_boundaries(&[0.7, 0.7, 0.1], 1.0);
        assert_eq!(b, vec![1, 2]);
        let b = star_threshold_boundaries(&[0.7, 0.7, 0.7, 0.8], 1.0);
        assert_eq!(b, vec![1, 3]);
    }
}
