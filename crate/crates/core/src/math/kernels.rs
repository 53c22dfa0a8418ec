//! Dense f32 kernels shared by the tape and the inference path.
//!
//! Every output element of [`gemm`] is accumulated in the same order
//! (`k = 0, 1, ...`, multiply then add, starting from zero) no matter how many
//! rows are processed together. Row `i` of a 21-row product is therefore
//! bit-identical to the same row computed alone, which is what makes block
//! (Jacobi) evaluation and incremental (AR) evaluation agree exactly.

/// `out = a · b` with `a: rows×inner`, `b: inner×cols`, all row-major.
pub fn gemm(a: &[f32], b: &[f32], out: &mut [f32], rows: usize, inner: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    let mut i = 0;
    while i + 4 <= rows {
        row_block::<4>(a, b, out, i, inner, cols);
        i += 4;
    }
    while i < rows {
        row_block::<1>(a, b, out, i, inner, cols);
        i += 1;
    }
}

fn row_block<const R: usize>(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    i0: usize,
    inner: usize,
    cols: usize,
) {
    let mut j = 0;
    if R == 1 {
        // a single row is latency bound; widen the tile to keep more
        // independent accumulators in flight
        while j + 64 <= cols {
            tile::<R, 64>(a, b, out, i0, j, inner, cols);
            j += 64;
        }
    }
    while j + 32 <= cols {
        tile::<R, 32>(a, b, out, i0, j, inner, cols);
        j += 32;
    }
    while j + 8 <= cols {
        tile::<R, 8>(a, b, out, i0, j, inner, cols);
        j += 8;
    }
    while j < cols {
        tile::<R, 1>(a, b, out, i0, j, inner, cols);
        j += 1;
    }
}

#[inline(always)]
fn tile<const R: usize, const W: usize>(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    i0: usize,
    j0: usize,
    inner: usize,
    cols: usize,
) {
    let mut acc = [[0f32; W]; R];
    let a_rows: [&[f32]; R] = std::array::from_fn(|r| &a[(i0 + r) * inner..(i0 + r + 1) * inner]);
    for kk in 0..inner {
        let brow: &[f32; W] = b[kk * cols + j0..kk * cols + j0 + W].try_into().unwrap();
        for r in 0..R {
            let av = a_rows[r][kk];
            for t in 0..W {
                acc[r][t] += av * brow[t];
            }
        }
    }
    for r in 0..R {
        out[(i0 + r) * cols + j0..(i0 + r) * cols + j0 + W].copy_from_slice(&acc[r]);
    }
}

/// Row-major transpose of a `rows×cols` matrix.
pub fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut dst = vec![0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
    dst
}

/// Sequential dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        add_assign(row, bias);
    }
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of one slice, computed with max subtraction.
pub fn log_sum_exp(x: &[f32]) -> f32 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f32;
    for v in x {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

pub const LN_EPS: f32 = 1e-5;

/// Layer norm of one row. Returns `(mean, 1/sqrt(var + eps))`.
pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mut mean = 0f32;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0f32;
    for v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Branch-free rational tanh (odd degree-13 over even degree-6), absolute
/// error below 5e-7; vectorizes where `f32::tanh` would not.
#[inline(always)]
pub fn tanh_fast(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16f32;
    p = p * x2 + 2.000_188e-13;
    p = p * x2 - 8.604_672e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    p *= x;
    let mut q = 1.198_258_4e-6f32;
    q = q * x2 + 1.185_347e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    p / q
}

/// tanh-approximated GELU.
#[inline(always)]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + tanh_fast(u))
}

#[inline(always)]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh_fast(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// GELU over a slice, in place.
pub fn gelu_in_place(x: &mut [f32]) {
    for z in x.iter_mut() {
        *z = gelu(*z);
    }
}

/// Lowest index of the maximum; ties go to the smallest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = x[0];
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    #[test]
    fn fast_tanh_is_close() {
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            let err = (super::tanh_fast(x) as f64 - (x as f64).tanh()).abs();
            assert!(err < 5e-7, "x={x} err={err}");
        }
    }

    use super::*;

    fn naive(a: &[f32], b: &[f32], r: usize, k: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0f64; r * c];
        for i in 0..r {
            for j in 0..c {
                for kk in 0..k {
                    out[i * c + j] += a[i * k + kk] as f64 * b[kk * c + j] as f64;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_on_odd_shapes() {
        for &(r, k, c) in &[(1, 1, 1), (3, 5, 7), (5, 17, 70), (9, 128, 262), (4, 33, 129)] {
            let a: Vec<f32> = (0..r * k).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect();
            let b: Vec<f32> = (0..k * c).map(|i| ((i * 5 % 11) as f32 - 5.0) * 0.1).collect();
            let mut out = vec![0f32; r * c];
            gemm(&a, &b, &mut out, r, k, c);
            let want = naive(&a, &b, r, k, c);
            for (x, y) in out.iter().zip(&want) {
                assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_rows_are_independent_of_batching() {
        let (r, k, c) = (7, 96, 262);
        let a: Vec<f32> = (0..r * k).map(|i| ((i as f32) * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * c).map(|i| ((i as f32) * 0.11).cos()).collect();
        let mut all = vec![0f32; r * c];
        gemm(&a, &b, &mut all, r, k, c);
        for i in 0..r {
            let mut one = vec![0f32; c];
            gemm(&a[i * k..(i + 1) * k], &b, &mut one, 1, k, c);
            assert_eq!(&all[i * c..(i + 1) * c], &one[..], "row {i}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut x = [1000.0f32, 0.0];
        softmax_in_place(&mut x);
        assert_eq!(x[0], 1.0);
        assert!(x[1] < 1e-12);
    }
}
