//! Parameter initialization and tape binding.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, VarId};
use crate::segmentation::conv::{RESIDUAL_KERNEL, RESIDUAL_LAYERS};
use crate::segmentation::StrideConfig;

use super::config::ModelConfig;

const INIT_STD: f64 = 0.02;

fn attn_params(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(format!("{prefix}.{name}"), vec![d, d], INIT_STD, rng);
    }
    store.insert_const(format!("{prefix}.bo"), vec![d], 0.0);
}

fn ln_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert_const(format!("{prefix}.g"), vec![d], 1.0);
    store.insert_const(format!("{prefix}.b"), vec![d], 0.0);
}

fn ffn_params(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut ChaCha8Rng) {
    store.insert_normal(format!("{prefix}.w1"), vec![d, ffn], INIT_STD, rng);
    store.insert_const(format!("{prefix}.b1"), vec![ffn], 0.0);
    store.insert_normal(format!("{prefix}.w2"), vec![ffn, d], INIT_STD, rng);
    store.insert_const(format!("{prefix}.b2"), vec![d], 0.0);
}

/// Encoder, decoder, embeddings, and output head. Compression-specific
/// parameters are added separately when the module is enabled.
pub fn init_base_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5337_ab61_0c44_9d10);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    store.insert_normal("in_proj.w", vec![cfg.frame_dim, d], INIT_STD, &mut rng);
    store.insert_const("in_proj.b", vec![d], 0.0);
    for l in 0..cfg.enc_layers {
        ln_params(&mut store, &format!("enc.{l}.ln1"), d);
        attn_params(&mut store, &format!("enc.{l}.attn"), d, &mut rng);
        ln_params(&mut store, &format!("enc.{l}.ln2"), d);
        ffn_params(&mut store, &format!("enc.{l}.ffn"), d, cfg.ffn_dim, &mut rng);
    }
    ln_params(&mut store, "enc.ln_f", d);
    store.insert_normal("tok_embed", vec![cfg.vocab, d], INIT_STD, &mut rng);
    for l in 0..cfg.dec_layers {
        ln_params(&mut store, &format!("dec.{l}.ln1"), d);
        attn_params(&mut store, &format!("dec.{l}.self"), d, &mut rng);
        ln_params(&mut store, &format!("dec.{l}.ln_x"), d);
        attn_params(&mut store, &format!("dec.{l}.cross"), d, &mut rng);
        ln_params(&mut store, &format!("dec.{l}.ln2"), d);
        ffn_params(&mut store, &format!("dec.{l}.ffn"), d, cfg.ffn_dim, &mut rng);
    }
    ln_params(&mut store, "dec.ln_f", d);
    store.insert_normal("lm_head.w", vec![d, cfg.vocab], INIT_STD, &mut rng);
    store.insert_const("lm_head.b", vec![cfg.vocab], 0.0);
    store
}

/// Two-layer feed-forward segmenter over raw frames (used by the anchor
/// and CIF methods).
pub fn add_segmenter_params(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x91fb_2208_6c3d_55aa);
    let din = cfg.frame_dim;
    store.insert_normal("seg.w1", vec![din, din], 0.1, &mut rng);
    store.insert_const("seg.b1", vec![din], 0.0);
    store.insert_normal("seg.w2", vec![din, 1], 0.1, &mut rng);
    store.insert_const("seg.b2", vec![1], 0.0);
}

/// Anchor type embedding added to flagged frames before encoding.
pub fn add_anchor_embedding(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x04d9_ee12_83b7_61cf);
    store.insert_normal("anchor_embed", vec![cfg.d_model], INIT_STD, &mut rng);
}

/// Strided convolution stack with residual pairs, over raw frames.
pub fn add_conv_params(store: &mut ParamStore, cfg: &ModelConfig, stride_cfg: &StrideConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x66a0_4b7d_e91c_3f55);
    let c = cfg.frame_dim;
    for (b, (kernel, _)) in stride_cfg.blocks.iter().enumerate() {
        store.insert_normal(format!("conv.{b}.w"), vec![*kernel, c, c], 0.05, &mut rng);
        store.insert_const(format!("conv.{b}.b"), vec![c], 0.0);
        for r in 0..RESIDUAL_LAYERS {
            store.insert_normal(
                format!("conv.{b}.res{r}.w"),
                vec![RESIDUAL_KERNEL, c, c],
                0.05,
                &mut rng,
            );
            store.insert_const(format!("conv.{b}.res{r}.b"), vec![c], 0.0);
        }
    }
}

/// All parameters bound as tape leaves, in store order, addressable by
/// name. Collect gradients back in the same order after `backward`.
pub struct BoundParams {
    ids: Vec<VarId>,
    by_name: HashMap<String, VarId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut ids = Vec::with_capacity(store.len());
        let mut by_name = HashMap::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            let id = tape.leaf(tensor);
            ids.push(id);
            by_name.insert(name.to_string(), id);
        }
        BoundParams { ids, by_name }
    }

    pub fn get(&self, name: &str) -> VarId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    /// Per-parameter gradients aligned with store insertion order.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect()
    }
}
