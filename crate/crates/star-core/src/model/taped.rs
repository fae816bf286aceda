//! Differentiable (taped) model forward passes used during training.

use crate::autodiff::{kernels, Tape, VarId};
use crate::error::Result;
use crate::segmentation::conv::RESIDUAL_LAYERS;
use crate::segmentation::StrideConfig;

use super::config::ModelConfig;
use super::masks::VisMask;
use super::params::BoundParams;

/// Layer norm followed by learned gain and bias.
fn ln_affine(tape: &mut Tape, p: &BoundParams, prefix: &str, x: VarId) -> Result<VarId> {
    let normed = tape.layernorm(x)?;
    let scaled = tape.mul(normed, p.get(&format!("{prefix}.g")))?;
    tape.add(scaled, p.get(&format!("{prefix}.b")))
}

fn ffn_block(tape: &mut Tape, p: &BoundParams, prefix: &str, x: VarId) -> Result<VarId> {
    let h = tape.matmul(x, p.get(&format!("{prefix}.w1")))?;
    let h = tape.add(h, p.get(&format!("{prefix}.b1")))?;
    let h = tape.relu(h);
    let out = tape.matmul(h, p.get(&format!("{prefix}.w2")))?;
    tape.add(out, p.get(&format!("{prefix}.b2")))
}

/// Multi-head scaled dot-product attention. Returns the mixed output and
/// the per-head score matrices (post-injection, pre-mask) for gradient
/// probes.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    cfg: &ModelConfig,
    queries_src: VarId,
    keys_src: VarId,
    mask: Option<&VisMask>,
    inject: Option<VarId>,
) -> Result<(VarId, Vec<VarId>)> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q_all = tape.matmul(queries_src, p.get(&format!("{prefix}.wq")))?;
    let k_all = tape.matmul(keys_src, p.get(&format!("{prefix}.wk")))?;
    let v_all = tape.matmul(keys_src, p.get(&format!("{prefix}.wv")))?;
    let t_q = tape.shape(q_all)[0];
    let t_k = tape.shape(k_all)[0];
    let mut mixed = Vec::with_capacity(cfg.heads);
    let mut score_vars = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q_h = tape.slice_cols(q_all, h * dh, dh)?;
        let k_h = tape.slice_cols(k_all, h * dh, dh)?;
        let v_h = tape.slice_cols(v_all, h * dh, dh)?;
        let raw = tape.matmul_nt(q_h, k_h)?;
        let mut scores = tape.scale(raw, scale);
        if let Some(s) = inject {
            scores = tape.add(scores, s)?;
        }
        score_vars.push(scores);
        let masked = match mask {
            Some(m) => {
                debug_assert_eq!((m.rows, m.cols), (t_q, t_k));
                tape.mask_add(scores, &m.visible)?
            }
            None => scores,
        };
        let probs = tape.softmax_last_axis(masked)?;
        mixed.push(tape.matmul(probs, v_h)?);
    }
    let concat = tape.concat_cols(&mixed)?;
    let out = tape.matmul(concat, p.get(&format!("{prefix}.wo")))?;
    let out = tape.add(out, p.get(&format!("{prefix}.bo")))?;
    Ok((out, score_vars))
}

/// Causal encoder over a full frame sequence. Anchor-flagged frames get
/// the anchor type embedding added to their input projection.
pub fn encode(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    frames: VarId,
    anchor_flags: &[bool],
) -> Result<VarId> {
    let t = tape.shape(frames)[0];
    let mut x = tape.matmul(frames, p.get("in_proj.w"))?;
    x = tape.add(x, p.get("in_proj.b"))?;
    if anchor_flags.iter().any(|&f| f) {
        debug_assert_eq!(anchor_flags.len(), t);
        let flags: Vec<f64> = anchor_flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let flag_col = tape.leaf_vec(vec![t, 1], flags)?;
        let e_row = tape.reshape(p.get("anchor_embed"), vec![1, cfg.d_model])?;
        let e_add = tape.matmul(flag_col, e_row)?;
        x = tape.add(x, e_add)?;
    }
    let pos = tape.leaf_vec(vec![t, cfg.d_model], kernels::sinusoidal_positions(0, t, cfg.d_model))?;
    x = tape.add(x, pos)?;
    let causal = VisMask::causal(t);
    for l in 0..cfg.enc_layers {
        let h = ln_affine(tape, p, &format!("enc.{l}.ln1"), x)?;
        let (attn, _) = attention(tape, p, &format!("enc.{l}.attn"), cfg, h, h, Some(&causal), None)?;
        x = tape.add(x, attn)?;
        let f = ln_affine(tape, p, &format!("enc.{l}.ln2"), x)?;
        let ffn = ffn_block(tape, p, &format!("enc.{l}.ffn"), f)?;
        x = tape.add(x, ffn)?;
    }
    ln_affine(tape, p, "enc.ln_f", x)
}

/// Teacher-forced decoder pass over a token prefix against a fixed key
/// matrix. Returns vocabulary logits for every position plus the
/// per-layer, per-head cross-attention score variables.
pub fn decode(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &ModelConfig,
    tokens: &[u32],
    keys: VarId,
    cross_mask: Option<&VisMask>,
    inject: Option<VarId>,
) -> Result<(VarId, Vec<Vec<VarId>>)> {
    let t = tokens.len();
    let mut x = tape.embed_lookup(p.get("tok_embed"), tokens)?;
    let pos = tape.leaf_vec(vec![t, cfg.d_model], kernels::sinusoidal_positions(0, t, cfg.d_model))?;
    x = tape.add(x, pos)?;
    let causal = VisMask::causal(t);
    let mut cross_scores = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let h = ln_affine(tape, p, &format!("dec.{l}.ln1"), x)?;
        let (attn, _) = attention(tape, p, &format!("dec.{l}.self"), cfg, h, h, Some(&causal), None)?;
        x = tape.add(x, attn)?;
        let hx = ln_affine(tape, p, &format!("dec.{l}.ln_x"), x)?;
        let (cross, scores) =
            attention(tape, p, &format!("dec.{l}.cross"), cfg, hx, keys, cross_mask, inject)?;
        x = tape.add(x, cross)?;
        cross_scores.push(scores);
        let f = ln_affine(tape, p, &format!("dec.{l}.ln2"), x)?;
        let ffn = ffn_block(tape, p, &format!("dec.{l}.ffn"), f)?;
        x = tape.add(x, ffn)?;
    }
    let x = ln_affine(tape, p, "dec.ln_f", x)?;
    let logits = tape.matmul(x, p.get("lm_head.w"))?;
    let logits = tape.add(logits, p.get("lm_head.b"))?;
    Ok((logits, cross_scores))
}

/// Segmenter scores over raw frames, shape [t, 1] reshaped to [t].
pub fn segmenter_scores(tape: &mut Tape, p: &BoundParams, frames: VarId) -> Result<VarId> {
    let t = tape.shape(frames)[0];
    let h = tape.matmul(frames, p.get("seg.w1"))?;
    let h = tape.add(h, p.get("seg.b1"))?;
    let h = tape.relu(h);
    let s = tape.matmul(h, p.get("seg.w2"))?;
    let s = tape.add(s, p.get("seg.b2"))?;
    tape.reshape(s, vec![t])
}

/// Rescale gates so they sum to beta * t_y, on the tape.
pub fn rescale_gates(tape: &mut Tape, alpha: VarId, t_y: usize, beta: f64) -> Result<VarId> {
    let sum = tape.sum_all(alpha);
    let inv = tape.recip(sum);
    let factor = tape.scale(inv, beta * t_y as f64);
    tape.mul(alpha, factor)
}

/// (t_y - sum(alpha))^2 on the tape.
pub fn length_penalty(tape: &mut Tape, alpha: VarId, t_y: usize) -> Result<VarId> {
    let sum = tape.sum_all(alpha);
    let neg = tape.scale(sum, -1.0);
    let diff = tape.add_const(neg, t_y as f64);
    tape.mul(diff, diff)
}

/// Strided convolution compressor: each block is a strided conv whose
/// output is refined by a residual pair of kernel-5 stride-1 convs.
pub fn cnn_compress(
    tape: &mut Tape,
    p: &BoundParams,
    stride_cfg: &StrideConfig,
    frames: VarId,
) -> Result<VarId> {
    let mut x = frames;
    for (b, (kernel, stride)) in stride_cfg.blocks.iter().enumerate() {
        x = tape.conv1d(x, p.get(&format!("conv.{b}.w")), p.get(&format!("conv.{b}.b")), *kernel, *stride)?;
        let mut r = x;
        for layer in 0..RESIDUAL_LAYERS {
            r = tape.conv1d(
                r,
                p.get(&format!("conv.{b}.res{layer}.w")),
                p.get(&format!("conv.{b}.res{layer}.b")),
                crate::segmentation::conv::RESIDUAL_KERNEL,
                1,
            )?;
            if layer + 1 < RESIDUAL_LAYERS {
                r = tape.relu(r);
            }
        }
        x = tape.add(x, r)?;
    }
    Ok(x)
}
