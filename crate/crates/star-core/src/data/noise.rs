//! Structured noise injection into feature streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StarError};

use super::FeatureSequence;

/// Pre-generated colored-noise templates (one-pole low-pass filtered
/// white noise), added onto a contiguous span of frames.
pub struct NoiseBank {
    templates: Vec<Vec<f32>>,
    pub dim: usize,
    pub max_len: usize,
}

impl NoiseBank {
    pub fn generate(seed: u64, count: usize, max_len: usize, dim: usize, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b5a_cd01_77f0_3c2e);
        let templates = (0..count)
            .map(|_| {
                let mut state = vec![0.0f64; dim];
                let mut out = Vec::with_capacity(max_len * dim);
                for _ in 0..max_len {
                    for s in state.iter_mut() {
                        let white = crate::autodiff::adam::gaussian(&mut rng);
                        *s = 0.9 * *s + 0.435 * white; // unit stationary variance
                        out.push((*s * amplitude) as f32);
                    }
                }
                out
            })
            .collect();
        NoiseBank { templates, dim, max_len }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Replace a contiguous span of floor(ratio * t_x) frames, at a seeded
/// random offset, with the original frames plus bank noise. Transcript
/// and boundaries are unchanged.
pub fn inject_noise(
    seq: &FeatureSequence,
    ratio: f64,
    bank: &NoiseBank,
    seed: u64,
) -> Result<FeatureSequence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(StarError::InvalidArgument(format!("noise ratio {ratio} outside [0,1]")));
    }
    if bank.is_empty() {
        return Err(StarError::InvalidArgument("empty noise bank".into()));
    }
    if bank.dim != seq.frame_dim {
        return Err(StarError::shape(
            "inject-noise",
            format!("bank dim {} vs frame dim {}", bank.dim, seq.frame_dim),
        ));
    }
    let t_x = seq.t_x();
    let span = (ratio * t_x as f64).floor() as usize;
    let mut out = seq.clone();
    if span == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.gen_range(0..=t_x - span);
    let template = &bank.templates[rng.gen_range(0..bank.len())];
    let d = seq.frame_dim;
    for f in 0..span {
        let src = (f % bank.max_len) * d;
        let dst = (offset + f) * d;
        for i in 0..d {
            out.frames[dst + i] += template[src + i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};

    fn sample() -> FeatureSequence {
        let cfg = SyntheticConfig { seed: 23, ..Default::default() };
        generate(&cfg, 1).unwrap().pop().unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let seq = sample();
        let bank = NoiseBank::generate(1, 4, 64, seq.frame_dim, 1.0);
        let out = inject_noise(&seq, 0.0, &bank, 9).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn full_ratio_perturbs_every_frame() {
        let seq = sample();
        let bank = NoiseBank::generate(1, 4, 512, seq.frame_dim, 1.0);
        let out = inject_noise(&seq, 1.0, &bank, 9).unwrap();
        let d = seq.frame_dim;
        for f in 0..seq.t_x() {
            assert_ne!(&out.frames[f * d..(f + 1) * d], &seq.frames[f * d..(f + 1) * d]);
        }
        assert_eq!(out.transcript, seq.transcript);
        assert_eq!(out.boundaries, seq.boundaries);
    }

    #[test]
    fn span_is_contiguous_with_expected_length() {
        let seq = sample();
        let t_x = seq.t_x();
        let bank = NoiseBank::generate(1, 4, 512, seq.frame_dim, 1.0);
        let out = inject_noise(&seq, 0.25, &bank, 13).unwrap();
        let d = seq.frame_dim;
        let changed: Vec<usize> = (0..t_x)
            .filter(|&f| out.frames[f * d..(f + 1) * d] != seq.frames[f * d..(f + 1) * d])
            .collect();
        assert_eq!(changed.len(), (0.25 * t_x as f64).floor() as usize);
        for w in changed.windows(2) {
            assert_eq!(w[0] + 1, w[1]);
        }
    }
}
