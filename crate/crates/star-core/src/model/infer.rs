//! Untaped inference: incremental causal encoding with key/value caches
//! and step-wise decoding. Shares its arithmetic kernels with the taped
//! path so batched and incremental evaluation agree bit for bit.

use crate::autodiff::kernels;
use crate::error::{Result, StarError};

use super::config::vocab;
use super::masks::VisMask;
use super::TransducerModel;

fn linear(x: &[f64], w: &[f64], t: usize, din: usize, dout: usize) -> Vec<f64> {
    kernels::matmul(x, w, t, din, dout)
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let n = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % n];
    }
}

fn ln_affine_plain(x: &mut [f64], g: &[f64], b: &[f64], cols: usize) {
    kernels::layernorm_rows(x, cols);
    for (i, v) in x.iter_mut().enumerate() {
        *v = *v * g[i % cols] + b[i % cols];
    }
}

/// Per-layer key/value caches over already-encoded frames.
#[derive(Clone, Debug, Default)]
pub struct EncoderState {
    layers: Vec<LayerKV>,
    len: usize,
}

#[derive(Clone, Debug, Default)]
struct LayerKV {
    k: Vec<f64>,
    v: Vec<f64>,
}

impl EncoderState {
    pub fn new(enc_layers: usize) -> Self {
        EncoderState { layers: vec![LayerKV::default(); enc_layers], len: 0 }
    }

    /// Number of frames encoded so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Encode a block of frames against the cached history. `anchor_flags`
/// marks frames that receive the anchor type embedding. Returns the new
/// encoder rows `[b, d]` and extends the caches in place.
pub fn encode_causal(
    model: &TransducerModel,
    frames: &[f64],
    anchor_flags: &[bool],
    state: &mut EncoderState,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let din = cfg.frame_dim;
    if frames.is_empty() || frames.len() % din != 0 {
        return Err(StarError::shape(
            "encode",
            format!("{} frame values over dim {din}", frames.len()),
        ));
    }
    let b = frames.len() / din;
    if anchor_flags.len() != b {
        return Err(StarError::shape(
            "encode",
            format!("{} anchor flags for {b} frames", anchor_flags.len()),
        ));
    }
    if state.layers.len() != cfg.enc_layers {
        return Err(StarError::InvalidArgument(format!(
            "encoder state has {} layers, model has {}",
            state.layers.len(),
            cfg.enc_layers
        )));
    }
    if state.len + b > cfg.max_src_positions {
        return Err(StarError::InvalidArgument(format!(
            "position overflow: {} + {b} frames exceeds {}",
            state.len, cfg.max_src_positions
        )));
    }
    let p = &model.params;
    let mut x = linear(frames, p.get("in_proj.w").data(), b, din, d);
    add_bias(&mut x, p.get("in_proj.b").data());
    if anchor_flags.iter().any(|&f| f) {
        let e = p
            .try_get("anchor_embed")
            .ok_or_else(|| StarError::InvalidArgument("model has no anchor embedding".into()))?
            .data();
        for (i, &flag) in anchor_flags.iter().enumerate() {
            if flag {
                for (v, ev) in x[i * d..(i + 1) * d].iter_mut().zip(e.iter()) {
                    *v += ev;
                }
            }
        }
    }
    let pos = kernels::sinusoidal_positions(state.len, b, d);
    for (v, pv) in x.iter_mut().zip(pos.iter()) {
        *v += pv;
    }
    let prev_len = state.len;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.enc_layers {
        let mut h = x.clone();
        ln_affine_plain(
            &mut h,
            p.get(&format!("enc.{l}.ln1.g")).data(),
            p.get(&format!("enc.{l}.ln1.b")).data(),
            d,
        );
        let q = linear(&h, p.get(&format!("enc.{l}.attn.wq")).data(), b, d, d);
        let k_new = linear(&h, p.get(&format!("enc.{l}.attn.wk")).data(), b, d, d);
        let v_new = linear(&h, p.get(&format!("enc.{l}.attn.wv")).data(), b, d, d);
        let cache = &mut state.layers[l];
        cache.k.extend_from_slice(&k_new);
        cache.v.extend_from_slice(&v_new);
        let mut concat = vec![0.0; b * d];
        for i in 0..b {
            let visible = prev_len + i + 1;
            for hh in 0..heads {
                let q_i = &q[i * d + hh * dh..i * d + (hh + 1) * dh];
                let mut scores = Vec::with_capacity(visible);
                for j in 0..visible {
                    let k_j = &cache.k[j * d + hh * dh..j * d + (hh + 1) * dh];
                    scores.push(kernels::dot(q_i, k_j) * scale);
                }
                kernels::softmax_rows(&mut scores, visible);
                let out = &mut concat[i * d + hh * dh..i * d + (hh + 1) * dh];
                for (j, &pr) in scores.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    let v_j = &cache.v[j * d + hh * dh..j * d + (hh + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(v_j.iter()) {
                        *o += pr * vv;
                    }
                }
            }
        }
        let mut attn = linear(&concat, p.get(&format!("enc.{l}.attn.wo")).data(), b, d, d);
        add_bias(&mut attn, p.get(&format!("enc.{l}.attn.bo")).data());
        for (xv, av) in x.iter_mut().zip(attn.iter()) {
            *xv += av;
        }
        let mut f = x.clone();
        ln_affine_plain(
            &mut f,
            p.get(&format!("enc.{l}.ln2.g")).data(),
            p.get(&format!("enc.{l}.ln2.b")).data(),
            d,
        );
        let mut hid = linear(&f, p.get(&format!("enc.{l}.ffn.w1")).data(), b, d, cfg.ffn_dim);
        add_bias(&mut hid, p.get(&format!("enc.{l}.ffn.b1")).data());
        for v in hid.iter_mut() {
            *v = v.max(0.0);
        }
        let mut ffn = linear(&hid, p.get(&format!("enc.{l}.ffn.w2")).data(), b, cfg.ffn_dim, d);
        add_bias(&mut ffn, p.get(&format!("enc.{l}.ffn.b2")).data());
        for (xv, fv) in x.iter_mut().zip(ffn.iter()) {
            *xv += fv;
        }
    }
    state.len += b;
    ln_affine_plain(&mut x, p.get("enc.ln_f.g").data(), p.get("enc.ln_f.b").data(), d);
    Ok(x)
}

/// One-shot encoding of a whole sequence with a fresh state.
pub fn encode_full(model: &TransducerModel, frames: &[f64], anchor_flags: &[bool]) -> Result<Vec<f64>> {
    let mut state = EncoderState::new(model.config.enc_layers);
    encode_causal(model, frames, anchor_flags, &mut state)
}

/// Compressed representations visible to the decoder.
#[derive(Clone, Debug, Default)]
pub struct KeySet {
    /// [rows, d] row-major.
    pub data: Vec<f64>,
    pub rows: usize,
    /// 1-based segment ordinal of each key (for wait-k visibility).
    pub segments: Vec<usize>,
    /// Injected segmenter scores, one per key, when the method uses them.
    pub inject: Option<Vec<f64>>,
}

impl KeySet {
    pub fn push_key(&mut self, row: &[f64], segment: usize, inject: Option<f64>) {
        self.data.extend_from_slice(row);
        self.rows += 1;
        self.segments.push(segment);
        if let Some(s) = inject {
            self.inject.get_or_insert_with(Vec::new).push(s);
        }
    }
}

/// Next-token logits for a prefix (which must start with BOS) against
/// visible keys. `cross_mask` is [prefix_len x keys].
pub fn decode_step(
    model: &TransducerModel,
    prefix: &[u32],
    keys: &KeySet,
    cross_mask: &VisMask,
) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let d = cfg.d_model;
    if prefix.first() != Some(&vocab::BOS) {
        return Err(StarError::InvalidArgument("decoder prefix must start with BOS".into()));
    }
    if keys.rows == 0 {
        return Err(StarError::InvalidArgument("decoder needs a non-empty key set".into()));
    }
    if prefix.len() > cfg.max_tgt_positions {
        return Err(StarError::InvalidArgument(format!(
            "prefix of {} exceeds {} decoder positions",
            prefix.len(),
            cfg.max_tgt_positions
        )));
    }
    if cross_mask.rows != prefix.len() || cross_mask.cols != keys.rows {
        return Err(StarError::shape(
            "decode",
            format!(
                "mask {}x{} vs prefix {} and {} keys",
                cross_mask.rows,
                cross_mask.cols,
                prefix.len(),
                keys.rows
            ),
        ));
    }
    if let Some(inj) = &keys.inject {
        if inj.len() != keys.rows {
            return Err(StarError::shape(
                "decode",
                format!("{} injected scores vs {} keys", inj.len(), keys.rows),
            ));
        }
    }
    let p = &model.params;
    let t = prefix.len();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let embed = p.get("tok_embed").data();
    let mut x = vec![0.0; t * d];
    for (i, &tok) in prefix.iter().enumerate() {
        if tok as usize >= cfg.vocab {
            return Err(StarError::InvalidArgument(format!("token {tok} out of vocabulary")));
        }
        x[i * d..(i + 1) * d].copy_from_slice(&embed[tok as usize * d..(tok as usize + 1) * d]);
    }
    let pos = kernels::sinusoidal_positions(0, t, d);
    for (v, pv) in x.iter_mut().zip(pos.iter()) {
        *v += pv;
    }
    for l in 0..cfg.dec_layers {
        // causal self-attention
        let mut h = x.clone();
        ln_affine_plain(
            &mut h,
            p.get(&format!("dec.{l}.ln1.g")).data(),
            p.get(&format!("dec.{l}.ln1.b")).data(),
            d,
        );
        let q = linear(&h, p.get(&format!("dec.{l}.self.wq")).data(), t, d, d);
        let k = linear(&h, p.get(&format!("dec.{l}.self.wk")).data(), t, d, d);
        let v = linear(&h, p.get(&format!("dec.{l}.self.wv")).data(), t, d, d);
        let mut concat = vec![0.0; t * d];
        for i in 0..t {
            for hh in 0..heads {
                let q_i = &q[i * d + hh * dh..i * d + (hh + 1) * dh];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    scores.push(kernels::dot(q_i, &k[j * d + hh * dh..j * d + (hh + 1) * dh]) * scale);
                }
                kernels::softmax_rows(&mut scores, i + 1);
                let out = &mut concat[i * d + hh * dh..i * d + (hh + 1) * dh];
                for (j, &pr) in scores.iter().enumerate() {
                    for (o, vv) in out.iter_mut().zip(&v[j * d + hh * dh..j * d + (hh + 1) * dh]) {
                        *o += pr * vv;
                    }
                }
            }
        }
        let mut attn = linear(&concat, p.get(&format!("dec.{l}.self.wo")).data(), t, d, d);
        add_bias(&mut attn, p.get(&format!("dec.{l}.self.bo")).data());
        for (xv, av) in x.iter_mut().zip(attn.iter()) {
            *xv += av;
        }
        // cross-attention over the key set with injected scores
        let mut hx = x.clone();
        ln_affine_plain(
            &mut hx,
            p.get(&format!("dec.{l}.ln_x.g")).data(),
            p.get(&format!("dec.{l}.ln_x.b")).data(),
            d,
        );
        let qx = linear(&hx, p.get(&format!("dec.{l}.cross.wq")).data(), t, d, d);
        let kx = linear(&keys.data, p.get(&format!("dec.{l}.cross.wk")).data(), keys.rows, d, d);
        let vx = linear(&keys.data, p.get(&format!("dec.{l}.cross.wv")).data(), keys.rows, d, d);
        let mut concat = vec![0.0; t * d];
        for i in 0..t {
            let vis_row = cross_mask.row(i);
            for hh in 0..heads {
                let q_i = &qx[i * d + hh * dh..i * d + (hh + 1) * dh];
                let mut scores = Vec::with_capacity(keys.rows);
                for j in 0..keys.rows {
                    let mut s =
                        kernels::dot(q_i, &kx[j * d + hh * dh..j * d + (hh + 1) * dh]) * scale;
                    if let Some(inj) = &keys.inject {
                        s += inj[j];
                    }
                    if !vis_row[j] {
                        s -= crate::autodiff::MASK_NEG;
                    }
                    scores.push(s);
                }
                kernels::softmax_rows(&mut scores, keys.rows);
                let out = &mut concat[i * d + hh * dh..i * d + (hh + 1) * dh];
                for (j, &pr) in scores.iter().enumerate() {
                    if pr == 0.0 {
                        continue;
                    }
                    for (o, vv) in out.iter_mut().zip(&vx[j * d + hh * dh..j * d + (hh + 1) * dh]) {
                        *o += pr * vv;
                    }
                }
            }
        }
        let mut cross = linear(&concat, p.get(&format!("dec.{l}.cross.wo")).data(), t, d, d);
        add_bias(&mut cross, p.get(&format!("dec.{l}.cross.bo")).data());
        for (xv, cv) in x.iter_mut().zip(cross.iter()) {
            *xv += cv;
        }
        // feed-forward
        let mut f = x.clone();
        ln_affine_plain(
            &mut f,
            p.get(&format!("dec.{l}.ln2.g")).data(),
            p.get(&format!("dec.{l}.ln2.b")).data(),
            d,
        );
        let mut hid = linear(&f, p.get(&format!("dec.{l}.ffn.w1")).data(), t, d, cfg.ffn_dim);
        add_bias(&mut hid, p.get(&format!("dec.{l}.ffn.b1")).data());
        for v in hid.iter_mut() {
            *v = v.max(0.0);
        }
        let mut ffn = linear(&hid, p.get(&format!("dec.{l}.ffn.w2")).data(), t, cfg.ffn_dim, d);
        add_bias(&mut ffn, p.get(&format!("dec.{l}.ffn.b2")).data());
        for (xv, fv) in x.iter_mut().zip(ffn.iter()) {
            *xv += fv;
        }
    }
    ln_affine_plain(&mut x, p.get("dec.ln_f.g").data(), p.get("dec.ln_f.b").data(), d);
    let last = &x[(t - 1) * d..t * d];
    let mut logits = linear(last, p.get("lm_head.w").data(), 1, d, cfg.vocab);
    add_bias(&mut logits, p.get("lm_head.b").data());
    Ok(logits)
}

/// Greedy argmax over logits, never picking PAD or BOS.
pub fn greedy_pick(logits: &[f64]) -> u32 {
    let mut best = vocab::EOS;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 == vocab::PAD || i as u32 == vocab::BOS {
            continue;
        }
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}

/// Visibility policy for offline greedy decoding.
pub enum Visibility {
    Full,
    WaitK(usize),
}

/// Greedy decode against a fixed key set until EOS or `max_len` tokens.
pub fn greedy_decode(
    model: &TransducerModel,
    keys: &KeySet,
    visibility: Visibility,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut prefix = vec![vocab::BOS];
    let mut out = Vec::new();
    while out.len() < max_len && prefix.len() < model.config.max_tgt_positions {
        let mask = match visibility {
            Visibility::Full => VisMask::full(prefix.len(), keys.rows),
            Visibility::WaitK(k) => {
                super::masks::il_mask_by_segment(prefix.len(), &keys.segments, k)
            }
        };
        let logits = decode_step(model, &prefix, keys, &mask)?;
        let tok = greedy_pick(&logits);
        if tok == vocab::EOS {
            break;
        }
        out.push(tok);
        prefix.push(tok);
    }
    Ok(out)
}

/// Raw cross-attention logit probe: per decoder layer and head,
/// S = (Z W_K)(Y W_Q)^T / sqrt(head_dim), shape [k x t_y].
pub struct CrossAttentionLogits {
    /// per_layer[l][h] is a [keys x queries] row-major matrix.
    pub per_layer: Vec<Vec<Vec<f64>>>,
    pub keys: usize,
    pub queries: usize,
}

pub fn cross_attention_scores(
    model: &TransducerModel,
    anchors: &[f64],
    queries: &[f64],
) -> Result<CrossAttentionLogits> {
    let cfg = &model.config;
    let d = cfg.d_model;
    if anchors.is_empty() {
        return Err(StarError::InvalidArgument("empty anchor cache".into()));
    }
    if anchors.len() % d != 0 || queries.len() % d != 0 {
        return Err(StarError::shape(
            "cross-attention",
            format!("{} anchor and {} query values over dim {d}", anchors.len(), queries.len()),
        ));
    }
    let k = anchors.len() / d;
    let t_y = queries.len() / d;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_layer = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let zk = linear(anchors, model.params.get(&format!("dec.{l}.cross.wk")).data(), k, d, d);
        let yq = linear(queries, model.params.get(&format!("dec.{l}.cross.wq")).data(), t_y, d, d);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let mut s = vec![0.0; k * t_y];
            for i in 0..k {
                for j in 0..t_y {
                    s[i * t_y + j] = kernels::dot(
                        &zk[i * d + h * dh..i * d + (h + 1) * dh],
                        &yq[j * d + h * dh..j * d + (h + 1) * dh],
                    ) * scale;
                }
            }
            heads.push(s);
        }
        per_layer.push(heads);
    }
    Ok(CrossAttentionLogits { per_layer, keys: k, queries: t_y })
}

/// Add segmenter scores onto every layer and head of the logit probe.
pub fn inject_scores(logits: &mut CrossAttentionLogits, scores: &[f64]) -> Result<()> {
    if scores.len() != logits.keys {
        return Err(StarError::shape(
            "inject-scores",
            format!("{} scores vs {} keys", scores.len(), logits.keys),
        ));
    }
    for layer in logits.per_layer.iter_mut() {
        for head in layer.iter_mut() {
            for (i, &s) in scores.iter().enumerate() {
                for j in 0..logits.queries {
                    head[i * logits.queries + j] += s;
                }
            }
        }
    }
    Ok(())
}
