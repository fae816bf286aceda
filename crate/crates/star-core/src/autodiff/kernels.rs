//! Raw dense math shared by the tape forward pass and the untaped
//! inference paths. Keeping one set of kernels makes batched and
//! incremental model evaluation bit-identical.

/// C[m,n] = A[m,k] @ B[k,n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] @ B[n,k]^T. Both operands are read row-contiguously.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis, max-subtracted for stability.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    debug_assert_eq!(x.len() % cols, 0);
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-12;

/// Row-wise layer normalization (no affine terms).
pub fn layernorm_rows(x: &mut [f64], cols: usize) {
    debug_assert_eq!(x.len() % cols, 0);
    let n = cols as f64;
    for row in x.chunks_mut(cols) {
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
}

/// Left padding that gives a strided 1-D convolution output length
/// ceil(t / stride) with symmetric zero padding.
pub fn conv1d_pad(t: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out_len = t.div_ceil(stride);
    let span = (out_len - 1) * stride + kernel;
    let total = span.saturating_sub(t);
    (total / 2, out_len)
}

/// 1-D convolution over time. `x` is [t, c_in] row-major, `w` is
/// [kernel, c_in, c_out], `b` is [c_out]; output is [ceil(t/stride), c_out].
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    t: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), t * c_in);
    debug_assert_eq!(w.len(), kernel * c_in * c_out);
    let (pad_left, out_len) = conv1d_pad(t, kernel, stride);
    let mut out = vec![0.0; out_len * c_out];
    for o in 0..out_len {
        let row = &mut out[o * c_out..(o + 1) * c_out];
        row.copy_from_slice(b);
        for j in 0..kernel {
            let pos = (o * stride + j) as isize - pad_left as isize;
            if pos < 0 || pos >= t as isize {
                continue;
            }
            let x_row = &x[pos as usize * c_in..(pos as usize + 1) * c_in];
            let w_tap = &w[j * c_in * c_out..(j + 1) * c_in * c_out];
            for (ci, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &w_tap[ci * c_out..(ci + 1) * c_out];
                for (ov, &wv) in row.iter_mut().zip(w_row.iter()) {
                    *ov += xv * wv;
                }
            }
        }
    }
    out
}

/// Sinusoidal position encoding rows `[positions, dim]`.
pub fn sinusoidal_positions(start: usize, count: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; count * dim];
    for p in 0..count {
        let pos = (start + p) as f64;
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[p * dim + 2 * i] = (pos * freq).sin();
            out[p * dim + 2 * i + 1] = (pos * freq).cos();
        }
        if dim % 2 == 1 {
            let i = dim / 2;
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[p * dim + dim - 1] = (pos * freq).sin();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // [2,3] -> transposed [3,2]
        let bt = [1.0, 2.0, 0.5, 0.0, -1.0, 3.0];
        assert_eq!(matmul_nt(&a, &b, 2, 3, 2), matmul(&a, &bt, 2, 3, 2));
    }

    #[test]
    fn softmax_uniform() {
        let mut x = vec![0.0, 0.0];
        softmax_rows(&mut x, 2);
        assert_eq!(x, vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-50.0) < 1e-15);
    }

    #[test]
    fn layernorm_moments() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0];
        layernorm_rows(&mut x, 4);
        for row in x.chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_output_lengths() {
        // stride (4,3) over 24 frames: 24 -> 6 -> 2
        let (_, l1) = conv1d_pad(24, 9, 4);
        assert_eq!(l1, 6);
        let (_, l2) = conv1d_pad(l1, 7, 3);
        assert_eq!(l2, 2);
    }

    #[test]
    fn conv_identity_kernel() {
        // center-tap identity, stride 1 -> output equals input
        let t = 7;
        let c = 3;
        let kernel = 5;
        let mut w = vec![0.0; kernel * c * c];
        for ci in 0..c {
            w[2 * c * c + ci * c + ci] = 1.0;
        }
        let x: Vec<f64> = (0..t * c).map(|i| i as f64 * 0.25 - 2.0).collect();
        let y = conv1d(&x, &w, &vec![0.0; c], t, c, c, kernel, 1);
        assert_eq!(y, x);
    }
}
