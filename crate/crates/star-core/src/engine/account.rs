//! Analytic memory and multiply-add accounting.

use serde::Serialize;

use super::trace::{EventKind, TraceLog};

/// Decoder-visible cache sizes with and without compression.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CacheReport {
    pub t_x: usize,
    pub rate: f64,
    pub dim: usize,
    pub batch: usize,
    /// b * d * t_x floats.
    pub uncompressed_floats: u64,
    /// b * d * ceil(t_x / r) floats.
    pub compressed_floats: u64,
    pub reduction_percent: f64,
}

/// Cached representations shrink from b*d*t_x to b*d*ceil(t_x/r) floats.
pub fn memory_account(t_x: usize, rate: f64, dim: usize, batch: usize) -> CacheReport {
    assert!(t_x > 0 && dim > 0 && batch > 0 && rate >= 1.0, "all inputs must be positive");
    let uncompressed = (batch * dim * t_x) as u64;
    let kept = (t_x as f64 / rate).ceil() as u64;
    let compressed = (batch * dim) as u64 * kept;
    let reduction = 100.0 * (1.0 - compressed as f64 / uncompressed as f64);
    CacheReport {
        t_x,
        rate,
        dim,
        batch,
        uncompressed_floats: uncompressed,
        compressed_floats: compressed,
        reduction_percent: reduction,
    }
}

/// Attention multiply-add counts derived from a trace, reported for the
/// compressed cache (one vector per yield) and the uncompressed cache
/// (every frame read). Cross-attention is bilinear in the cache size;
/// attention over the cached representations themselves is quadratic,
/// which is where the rate enters squared.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlopReport {
    pub yields: usize,
    pub reads: usize,
    pub t_y: usize,
    pub dim: usize,
    /// |Z| * t_y * d with the compressed cache.
    pub cross_attention_compressed: u64,
    /// t_x * t_y * d without compression.
    pub cross_attention_uncompressed: u64,
    /// Sum over yields of (cached vectors)^2 * d, compressed cache.
    pub cached_self_attention_compressed: u64,
    /// Same sum with every read frame cached instead.
    pub cached_self_attention_uncompressed: u64,
}

pub fn flop_account(trace: &TraceLog, dim: usize, t_y: usize) -> FlopReport {
    let mut yields = 0u64;
    let mut self_comp = 0u64;
    let mut self_unc = 0u64;
    for e in &trace.events {
        if e.kind == EventKind::Yield {
            yields += 1;
            self_comp += yields * yields * dim as u64;
            self_unc += e.step * e.step * dim as u64;
        }
    }
    let reads = trace.reads() as u64;
    FlopReport {
        yields: yields as usize,
        reads: reads as usize,
        t_y,
        dim,
        cross_attention_compressed: yields * t_y as u64 * dim as u64,
        cross_attention_uncompressed: reads * t_y as u64 * dim as u64,
        cached_self_attention_compressed: self_comp,
        cached_self_attention_uncompressed: self_unc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_example() {
        let r = memory_account(3000, 10.0, 512, 1);
        assert_eq!(r.uncompressed_floats, 1_536_000);
        assert_eq!(r.compressed_floats, 153_600);
        assert!((r.reduction_percent - 90.0).abs() < 1e-9);
    }

    #[test]
    fn rate_one_is_free() {
        let r = memory_account(100, 1.0, 8, 2);
        assert_eq!(r.uncompressed_floats, r.compressed_floats);
        assert_eq!(r.reduction_percent, 0.0);
    }

    #[test]
    fn reduction_monotone_in_rate() {
        let mut last = -1.0;
        for rate in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let r = memory_account(640, rate, 16, 1);
            assert!(r.reduction_percent >= last);
            last = r.reduction_percent;
        }
    }

    #[test]
    fn halved_cache_quarters_quadratic_and_halves_bilinear() {
        // two traces: w frames per yield, same totals, one with twice the yields
        let build = |yields: u64, stride: u64| {
            let mut t = TraceLog::default();
            let mut step = 0;
            for y in 0..yields {
                for f in 0..stride {
                    step += 1;
                    t.push(EventKind::Read, y * stride + f, step);
                }
                t.push(EventKind::Yield, 3, step);
            }
            t
        };
        let fine = flop_account(&build(8, 1), 4, 8);
        let coarse = flop_account(&build(4, 2), 4, 8);
        assert_eq!(fine.cross_attention_compressed, 2 * coarse.cross_attention_compressed);
        // sum k^2 for k=1..8 vs 4 * sum k^2 for k=1..4: 204 vs 120
        assert_eq!(fine.cached_self_attention_compressed, 204 * 4);
        assert_eq!(coarse.cached_self_attention_compressed, 30 * 4);
    }
}
