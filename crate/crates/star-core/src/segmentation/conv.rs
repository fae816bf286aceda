//! Strided-convolution compressor configuration.
//!
//! Each block is one strided 1-D convolution followed by a residual pair
//! of kernel-5, stride-1 convolutions added back onto the block output.

use crate::error::{Result, StarError};

pub const RESIDUAL_KERNEL: usize = 5;
pub const RESIDUAL_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrideConfig {
    /// (kernel, stride) per block; strides multiply to the target rate.
    pub blocks: Vec<(usize, usize)>,
}

impl StrideConfig {
    /// Factor an integer rate into as few strides as possible (each at
    /// most 6), balanced so the largest stride is minimal; e.g. 12
    /// becomes strides (4, 3). Kernel size is 2*stride + 1.
    pub fn from_rate(rate: usize) -> Result<Self> {
        if rate < 1 {
            return Err(StarError::InvalidArgument("compression rate must be >= 1".into()));
        }
        if rate == 1 {
            return Ok(StrideConfig { blocks: vec![(RESIDUAL_KERNEL, 1)] });
        }
        fn factor(rest: usize, max: usize) -> Option<Vec<usize>> {
            if rest == 1 {
                return Some(Vec::new());
            }
            for f in (2..=max.min(rest)).rev() {
                if rest % f == 0 {
                    if let Some(mut tail) = factor(rest / f, f) {
                        tail.insert(0, f);
                        return Some(tail);
                    }
                }
            }
            None
        }
        let mut best: Option<Vec<usize>> = None;
        for cap in 2..=8 {
            if let Some(strides) = factor(rate, cap) {
                let better = match &best {
                    None => true,
                    Some(b) => strides.len() < b.len(),
                };
                if better {
                    best = Some(strides);
                }
            }
        }
        let strides = best.ok_or_else(|| {
            StarError::InvalidArgument(format!("rate {rate} has a prime factor above 8"))
        })?;
        Ok(StrideConfig { blocks: strides.into_iter().map(|s| (2 * s + 1, s)).collect() })
    }

    pub fn rate(&self) -> usize {
        self.blocks.iter().map(|(_, s)| s).product()
    }

    /// Output length after all blocks: repeated ceil division.
    pub fn output_len(&self, t_x: usize) -> usize {
        self.blocks.iter().fold(t_x, |t, (_, s)| t.div_ceil(*s))
    }

    pub fn largest_kernel(&self) -> usize {
        self.blocks.iter().map(|(k, _)| *k).max().unwrap_or(RESIDUAL_KERNEL).max(RESIDUAL_KERNEL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorizations() {
        assert_eq!(StrideConfig::from_rate(12).unwrap().blocks, vec![(9, 4), (7, 3)]);
        assert_eq!(StrideConfig::from_rate(18).unwrap().blocks, vec![(13, 6), (7, 3)]);
        assert_eq!(StrideConfig::from_rate(6).unwrap().blocks, vec![(13, 6)]);
        assert_eq!(StrideConfig::from_rate(1).unwrap().blocks, vec![(5, 1)]);
        for r in [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 15, 16, 18, 20, 24, 30, 32, 36, 48] {
            assert_eq!(StrideConfig::from_rate(r).unwrap().rate(), r);
        }
        assert!(StrideConfig::from_rate(11).is_err());
    }

    #[test]
    fn output_lengths() {
        // stride (4,3) over 24 frames compresses to 2
        let cfg = StrideConfig { blocks: vec![(9, 4), (7, 3)] };
        assert_eq!(cfg.output_len(24), 2);
        assert_eq!(cfg.rate(), 12);
    }
}
