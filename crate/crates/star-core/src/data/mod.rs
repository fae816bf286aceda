//! Synthetic frame-stream transduction corpora.
//!
//! Each utterance is a sequence of token "templates" (fixed random unit
//! vectors per vocabulary entry) emitted over a variable number of
//! frames with additive Gaussian noise, optionally separated by
//! near-zero silence spans. Ground-truth boundaries mark the last frame
//! of each token's span.

mod format;
mod noise;

pub use format::{read_features, write_features, write_manifest, ManifestEntry, FEATURE_MAGIC};
pub use noise::{inject_noise, NoiseBank};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StarError};
use crate::model::vocab::{self};

/// Corpus generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    /// Content vocabulary size, excluding PAD/BOS/EOS.
    pub content_vocab: usize,
    pub frame_dim: usize,
    pub frames_per_token: (usize, usize),
    pub silence_prob: f64,
    pub silence_len: (usize, usize),
    pub noise_std: f64,
    pub tokens_per_utterance: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            content_vocab: 64,
            frame_dim: 32,
            frames_per_token: (3, 9),
            silence_prob: 0.2,
            silence_len: (1, 3),
            noise_std: 0.1,
            tokens_per_utterance: (5, 20),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_vocab < 2 {
            return Err(StarError::Config("content vocabulary must have at least 2 entries".into()));
        }
        if self.frame_dim == 0 {
            return Err(StarError::Config("frame dimension must be positive".into()));
        }
        let ok_range = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !ok_range(self.frames_per_token)
            || !ok_range(self.silence_len)
            || !ok_range(self.tokens_per_utterance)
        {
            return Err(StarError::Config("ranges must be non-empty".into()));
        }
        if self.noise_std < 0.0 {
            return Err(StarError::Config("noise std must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return Err(StarError::Config("silence probability must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Total vocabulary including PAD/BOS/EOS.
    pub fn vocab(&self) -> usize {
        self.content_vocab + vocab::SPECIAL_TOKENS
    }
}

/// One utterance: frames, transcript, and ground-truth segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// [t_x, frame_dim] row-major.
    pub frames: Vec<f32>,
    pub frame_dim: usize,
    pub transcript: Vec<u32>,
    /// Last frame index of each token's span; strictly increasing.
    pub boundaries: Vec<u32>,
    /// Per-frame silence flags; present when generated, not persisted.
    pub silence: Option<Vec<bool>>,
}

impl FeatureSequence {
    pub fn t_x(&self) -> usize {
        self.frames.len() / self.frame_dim
    }

    pub fn t_y(&self) -> usize {
        self.transcript.len()
    }

    pub fn frames_f64(&self) -> Vec<f64> {
        self.frames.iter().map(|&v| v as f64).collect()
    }
}

/// Fixed per-vocabulary-entry templates, frozen at corpus creation.
pub struct TokenTemplates {
    pub vectors: Vec<Vec<f32>>,
    pub dim: usize,
}

impl TokenTemplates {
    pub fn build(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e3a_11c0_95d2_f04b);
        let vectors = (0..cfg.content_vocab)
            .map(|_| {
                let mut v: Vec<f64> =
                    (0..cfg.frame_dim).map(|_| crate::autodiff::adam::gaussian(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                v.into_iter().map(|x| x as f32).collect()
            })
            .collect();
        TokenTemplates { vectors, dim: cfg.frame_dim }
    }

    /// Content token id for a template index (offset past specials).
    pub fn token_id(&self, template: usize) -> u32 {
        (template + vocab::SPECIAL_TOKENS) as u32
    }

    pub fn template_of(&self, token: u32) -> Option<&[f32]> {
        let t = (token as usize).checked_sub(vocab::SPECIAL_TOKENS)?;
        self.vectors.get(t).map(|v| v.as_slice())
    }

    /// Nearest-template classification of one frame.
    pub fn classify(&self, frame: &[f32]) -> u32 {
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for (i, tpl) in self.vectors.iter().enumerate() {
            let d: f32 = frame.iter().zip(tpl.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        self.token_id(best)
    }
}

fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17))
}

/// Generate one utterance, deterministic per (config seed, index).
pub fn generate_sequence(
    cfg: &SyntheticConfig,
    templates: &TokenTemplates,
    index: u64,
) -> FeatureSequence {
    fn push_frame(
        rng: &mut ChaCha8Rng,
        std: f64,
        d: usize,
        frames: &mut Vec<f32>,
        silence: &mut Vec<bool>,
        base: Option<&[f32]>,
    ) {
        for i in 0..d {
            let noise = crate::autodiff::adam::gaussian(rng) * std;
            let v = base.map_or(0.0, |b| b[i] as f64) + noise;
            frames.push(v as f32);
        }
        silence.push(base.is_none());
    }

    let mut rng = sequence_rng(cfg.seed, index);
    let d = cfg.frame_dim;
    let n_tokens = rng.gen_range(cfg.tokens_per_utterance.0..=cfg.tokens_per_utterance.1);
    let mut frames: Vec<f32> = Vec::new();
    let mut silence = Vec::new();
    let mut transcript = Vec::with_capacity(n_tokens);
    let mut boundaries = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        if rng.gen_bool(cfg.silence_prob) {
            let span = rng.gen_range(cfg.silence_len.0..=cfg.silence_len.1);
            for _ in 0..span {
                push_frame(&mut rng, cfg.noise_std, d, &mut frames, &mut silence, None);
            }
        }
        let template = rng.gen_range(0..cfg.content_vocab);
        let span = rng.gen_range(cfg.frames_per_token.0..=cfg.frames_per_token.1);
        for _ in 0..span {
            let base = &templates.vectors[template];
            push_frame(&mut rng, cfg.noise_std, d, &mut frames, &mut silence, Some(base));
        }
        transcript.push(templates.token_id(template));
        boundaries.push((frames.len() / d - 1) as u32);
    }
    if rng.gen_bool(cfg.silence_prob) {
        let span = rng.gen_range(cfg.silence_len.0..=cfg.silence_len.1);
        for _ in 0..span {
            push_frame(&mut rng, cfg.noise_std, d, &mut frames, &mut silence, None);
        }
    }
    FeatureSequence { frames, frame_dim: d, transcript, boundaries, silence: Some(silence) }
}

/// Generate a corpus of `n` utterances.
pub fn generate(cfg: &SyntheticConfig, n: usize) -> Result<Vec<FeatureSequence>> {
    if n == 0 {
        return Err(StarError::InvalidArgument("corpus size must be >= 1".into()));
    }
    cfg.validate()?;
    let templates = TokenTemplates::build(cfg);
    Ok((0..n as u64).map(|i| generate_sequence(cfg, &templates, i)).collect())
}

/// Mean frames per output token over a corpus, silence included — the
/// ground-truth compression rate of the data.
pub fn mean_frames_per_token(seqs: &[FeatureSequence]) -> f64 {
    let frames: usize = seqs.iter().map(|s| s.t_x()).sum();
    let tokens: usize = seqs.iter().map(|s| s.t_y()).sum();
    frames as f64 / tokens as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let cfg = SyntheticConfig { seed: 42, ..Default::default() };
        let a = generate(&cfg, 10).unwrap();
        let b = generate(&cfg, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_frames_are_identical_within_token() {
        let cfg = SyntheticConfig { noise_std: 0.0, silence_prob: 0.0, seed: 7, ..Default::default() };
        let seqs = generate(&cfg, 5).unwrap();
        for s in &seqs {
            let d = s.frame_dim;
            let mut start = 0usize;
            for (&b, &tok) in s.boundaries.iter().zip(s.transcript.iter()) {
                let first = &s.frames[start * d..(start + 1) * d];
                for f in start..=b as usize {
                    assert_eq!(&s.frames[f * d..(f + 1) * d], first);
                }
                let templates = TokenTemplates::build(&cfg);
                assert_eq!(templates.template_of(tok).unwrap(), first);
                start = b as usize + 1;
            }
        }
    }

    #[test]
    fn mean_span_matches_range() {
        let cfg = SyntheticConfig { silence_prob: 0.0, seed: 3, ..Default::default() };
        let seqs = generate(&cfg, 800).unwrap();
        let mean = mean_frames_per_token(&seqs);
        // frames per token are uniform on 3..=9, mean 6
        assert!((mean - 6.0).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn boundaries_strictly_increase_and_fit() {
        let cfg = SyntheticConfig { seed: 11, ..Default::default() };
        for s in generate(&cfg, 50).unwrap() {
            assert_eq!(s.boundaries.len(), s.t_y());
            for w in s.boundaries.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!((*s.boundaries.last().unwrap() as usize) < s.t_x());
        }
    }

    #[test]
    fn transcript_recoverable_without_noise() {
        let cfg = SyntheticConfig { noise_std: 0.0, seed: 19, ..Default::default() };
        let templates = TokenTemplates::build(&cfg);
        for s in generate(&cfg, 20).unwrap() {
            let d = s.frame_dim;
            let recovered: Vec<u32> = s
                .boundaries
                .iter()
                .map(|&b| templates.classify(&s.frames[b as usize * d..(b as usize + 1) * d]))
                .collect();
            assert_eq!(recovered, s.transcript);
        }
    }
}
