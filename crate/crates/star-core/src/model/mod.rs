//! Causal transformer encoder/decoder with injectable cross-attention.

pub mod checkpoint;
mod config;
pub mod infer;
pub mod masks;
pub mod params;
pub mod taped;

pub use config::{vocab, Method, ModelConfig};
pub use infer::{
    cross_attention_scores, decode_step, encode_causal, encode_full, greedy_decode, greedy_pick,
    inject_scores, CrossAttentionLogits, EncoderState, KeySet, Visibility,
};
pub use masks::{il_mask, il_mask_by_segment, VisMask};

use crate::autodiff::ParamStore;
use crate::error::{Result, StarError};
use crate::segmentation::{SegmenterWeights, StrideConfig};

/// A complete transduction model: causal encoder, decoder, optional
/// segmenter/compressor parameters, and the compression method it was
/// trained for.
#[derive(Clone, Debug)]
pub struct TransducerModel {
    pub config: ModelConfig,
    pub method: Method,
    /// Target compression rate (frames per retained representation).
    pub rate: f64,
    pub params: ParamStore,
    pub stride_cfg: Option<StrideConfig>,
}

impl TransducerModel {
    /// Fresh model without any compression module.
    pub fn new_uncompressed(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = params::init_base_params(&config, seed);
        Ok(TransducerModel { config, method: Method::None, rate: 1.0, params, stride_cfg: None })
    }

    /// Enable a compression module, inserting its parameters. The base
    /// encoder/decoder parameters are untouched, so models branched from
    /// the same uncompressed checkpoint stay comparable.
    pub fn enable_compression(&mut self, method: Method, rate: f64, seed: u64) -> Result<()> {
        if self.method != Method::None {
            return Err(StarError::InvalidArgument(format!(
                "compression already enabled ({})",
                self.method.as_str()
            )));
        }
        if rate < 1.0 {
            return Err(StarError::InvalidArgument(format!("rate {rate} must be >= 1")));
        }
        match method {
            Method::None => {}
            Method::Star => {
                params::add_segmenter_params(&mut self.params, &self.config, seed);
                params::add_anchor_embedding(&mut self.params, &self.config, seed);
            }
            Method::Cif => {
                params::add_segmenter_params(&mut self.params, &self.config, seed);
            }
            Method::Cnn => {
                let stride_cfg = StrideConfig::from_rate(rate.round() as usize)?;
                params::add_conv_params(&mut self.params, &self.config, &stride_cfg, seed);
                self.stride_cfg = Some(stride_cfg);
            }
        }
        self.method = method;
        self.rate = rate;
        Ok(())
    }

    /// Reassemble a model from checkpoint pieces.
    pub fn from_parts(
        config: ModelConfig,
        method: Method,
        rate: f64,
        params: ParamStore,
    ) -> Result<Self> {
        let stride_cfg = match method {
            Method::Cnn => {
                let cfg = StrideConfig::from_rate(rate.round() as usize)?;
                for (b, (kernel, _)) in cfg.blocks.iter().enumerate() {
                    let name = format!("conv.{b}.w");
                    let tensor = params.try_get(&name).ok_or_else(|| {
                        StarError::Incompatible(format!("missing {name} for rate {rate}"))
                    })?;
                    if tensor.shape()[0] != *kernel {
                        return Err(StarError::Incompatible(format!(
                            "{name} kernel {} does not match stride config {kernel}",
                            tensor.shape()[0]
                        )));
                    }
                }
                Some(cfg)
            }
            _ => None,
        };
        if matches!(method, Method::Star | Method::Cif) && !params.contains("seg.w1") {
            return Err(StarError::Incompatible(format!(
                "method {} needs segmenter parameters",
                method.as_str()
            )));
        }
        if method == Method::Star && !params.contains("anchor_embed") {
            return Err(StarError::Incompatible("anchor method needs anchor_embed".into()));
        }
        Ok(TransducerModel { config, method, rate, params, stride_cfg })
    }

    /// View of the segmenter weights for untaped scoring.
    pub fn segmenter(&self) -> Option<SegmenterWeights<'_>> {
        let w1 = self.params.try_get("seg.w1")?;
        Some(SegmenterWeights {
            w1: w1.data(),
            b1: self.params.get("seg.b1").data(),
            w2: self.params.get("seg.w2").data(),
            b2: self.params.get("seg.b2").data()[0],
            dim: self.config.frame_dim,
        })
    }

    /// Raw scores and gates over frames, when a segmenter exists.
    pub fn score_and_gate(&self, frames: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let weights = self.segmenter()?;
        let scores = crate::segmentation::score_frames(&weights, frames);
        let gates = crate::segmentation::gate(&scores);
        Some((scores, gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::params::BoundParams;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            ffn_dim: 32,
            vocab: 11,
            max_src_positions: 64,
            max_tgt_positions: 16,
            frame_dim: 6,
        }
    }

    fn rand_frames(t: usize, d: usize, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..t * d).map(|_| crate::autodiff::adam::gaussian(&mut rng)).collect()
    }

    #[test]
    fn incremental_matches_batch_encoding() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let frames = rand_frames(7, cfg.frame_dim, 5);
        let flags = vec![false; 7];
        let batch = encode_full(&model, &frames, &flags).unwrap();
        let mut state = EncoderState::new(cfg.enc_layers);
        let mut incremental = Vec::new();
        for chunk in [0..3usize, 3..4, 4..7] {
            let part = &frames[chunk.start * cfg.frame_dim..chunk.end * cfg.frame_dim];
            let part_flags = vec![false; chunk.len()];
            incremental.extend(encode_causal(&model, part, &part_flags, &mut state).unwrap());
        }
        assert_eq!(batch.len(), incremental.len());
        for (a, b) in batch.iter().zip(incremental.iter()) {
            assert!((a - b).abs() <= 1e-10, "batch {a} vs incremental {b}");
        }
    }

    #[test]
    fn single_frame_encode_shapes() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let mut state = EncoderState::new(cfg.enc_layers);
        let h = encode_causal(&model, &rand_frames(1, cfg.frame_dim, 9), &[false], &mut state).unwrap();
        assert_eq!(h.len(), cfg.d_model);
        assert_eq!(state.len(), 1);
    }

    #[test]
    fn anchor_flag_changes_output() {
        let cfg = tiny_config();
        let mut model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        model.enable_compression(Method::Star, 4.0, 11).unwrap();
        let frames = rand_frames(4, cfg.frame_dim, 5);
        let plain = encode_full(&model, &frames, &[false; 4]).unwrap();
        let flagged = encode_full(&model, &frames, &[true; 4]).unwrap();
        assert!(plain.iter().zip(flagged.iter()).any(|(a, b)| (a - b).abs() > 1e-9));
        // zeroing the embedding restores equality
        let mut zeroed = model.clone();
        let d = cfg.d_model;
        zeroed
            .params
            .set("anchor_embed", crate::autodiff::Tensor::zeros(vec![d]))
            .unwrap();
        let z = encode_full(&zeroed, &frames, &[true; 4]).unwrap();
        for (a, b) in plain.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn taped_encoder_matches_plain() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let frames = rand_frames(5, cfg.frame_dim, 8);
        let plain = encode_full(&model, &frames, &[false; 5]).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.params);
        let leaf = tape.leaf_vec(vec![5, cfg.frame_dim], frames.clone()).unwrap();
        let h = taped::encode(&mut tape, &bound, &cfg, leaf, &[false; 5]).unwrap();
        for (a, b) in tape.value(h).iter().zip(plain.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn causality_by_perturbation() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let frames = rand_frames(6, cfg.frame_dim, 21);
        let base = encode_full(&model, &frames, &[false; 6]).unwrap();
        let mut perturbed = frames.clone();
        let hit = 3usize;
        perturbed[hit * cfg.frame_dim] += 0.5;
        let out = encode_full(&model, &perturbed, &[false; 6]).unwrap();
        let d = cfg.d_model;
        for t in 0..6 {
            let changed = base[t * d..(t + 1) * d]
                .iter()
                .zip(&out[t * d..(t + 1) * d])
                .any(|(a, b)| (a - b).abs() > 1e-12);
            assert_eq!(changed, t >= hit, "position {t}");
        }
    }

    #[test]
    fn position_overflow_rejected() {
        let mut cfg = tiny_config();
        cfg.max_src_positions = 4;
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let frames = rand_frames(5, cfg.frame_dim, 2);
        assert!(encode_full(&model, &frames, &[false; 5]).is_err());
    }

    #[test]
    fn cross_attention_scores_identity_case() {
        // W_K = W_Q = identity, unit basis anchors/queries -> diagonal scale
        let cfg = tiny_config();
        let mut model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let d = cfg.d_model;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        for l in 0..cfg.dec_layers {
            model
                .params
                .set(&format!("dec.{l}.cross.wk"), crate::autodiff::Tensor::new(vec![d, d], eye.clone()).unwrap())
                .unwrap();
            model
                .params
                .set(&format!("dec.{l}.cross.wq"), crate::autodiff::Tensor::new(vec![d, d], eye.clone()).unwrap())
                .unwrap();
        }
        let mut basis = vec![0.0; 2 * d];
        basis[0] = 1.0; // e_0
        basis[d + 1] = 1.0; // e_1
        let logits = cross_attention_scores(&model, &basis, &basis).unwrap();
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        // e_0 and e_1 both live in head 0
        let head0 = &logits.per_layer[0][0];
        assert!((head0[0] - scale).abs() < 1e-12);
        assert!((head0[3] - scale).abs() < 1e-12);
        assert!(head0[1].abs() < 1e-12 && head0[2].abs() < 1e-12);
        // shape checks
        assert_eq!(logits.keys, 2);
        assert_eq!(logits.queries, 2);
    }

    #[test]
    fn cross_attention_matches_double_loop_oracle() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 14).unwrap();
        let d = cfg.d_model;
        let anchors = rand_frames(3, d, 31);
        let queries = rand_frames(2, d, 32);
        let got = cross_attention_scores(&model, &anchors, &queries).unwrap();
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.dec_layers {
            let wk = model.params.get(&format!("dec.{l}.cross.wk")).data();
            let wq = model.params.get(&format!("dec.{l}.cross.wq")).data();
            for h in 0..cfg.heads {
                for i in 0..3 {
                    for j in 0..2 {
                        let mut dot = 0.0;
                        for c in 0..dh {
                            let col = h * dh + c;
                            let mut zk = 0.0;
                            let mut yq = 0.0;
                            for r in 0..d {
                                zk += anchors[i * d + r] * wk[r * d + col];
                                yq += queries[j * d + r] * wq[r * d + col];
                            }
                            dot += zk * yq;
                        }
                        let expect = dot * scale;
                        let gotv = got.per_layer[l][h][i * 2 + j];
                        assert!((gotv - expect).abs() < 1e-10, "layer {l} head {h} ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn inject_scores_cases() {
        let cfg = tiny_config();
        let model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        let d = cfg.d_model;
        let anchors = rand_frames(1, d, 41);
        let queries = rand_frames(2, d, 42);
        let mut logits = cross_attention_scores(&model, &anchors, &queries).unwrap();
        let before = logits.per_layer[0][0].clone();
        // zero injection is the identity
        inject_scores(&mut logits, &[0.0]).unwrap();
        assert_eq!(logits.per_layer[0][0], before);
        inject_scores(&mut logits, &[1.5]).unwrap();
        for (a, b) in logits.per_layer[0][0].iter().zip(before.iter()) {
            assert!((a - b - 1.5).abs() < 1e-12);
        }
        assert!(inject_scores(&mut logits, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_config();
        let mut model = TransducerModel::new_uncompressed(cfg.clone(), 3).unwrap();
        model.enable_compression(Method::Star, 6.0, 5).unwrap();
        checkpoint::save(&model, &path).unwrap();
        let loaded = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.method, Method::Star);
        assert_eq!(loaded.rate, 6.0);
        assert_eq!(loaded.params.len(), model.params.len());
        // float32 truncation is idempotent: a second save is bit-identical
        let path2 = dir.path().join("model2.ckpt");
        checkpoint::save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
