//! Convolution kernels shared by the forward and backward passes.
//!
//! All layouts are row-major: activations `[batch, channels, len]`,
//! convolution weights `[out_ch, in_ch, k]`. The transposed convolution
//! reuses the same weight tensor and is the exact adjoint of `conv1d`.

use super::tensor::Real;

/// Output length of a strided, zero-padded cross-correlation.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || k == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output length of the transposed convolution.
pub fn tconv_out_len(
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    if stride == 0 || k == 0 || len == 0 {
        return None;
    }
    let full = (len - 1) * stride + k + output_padding;
    if full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Unfolds `x` (`channels x len`) into columns (`channels*k x out_len`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), channels * k * out_len);
    for c in 0..channels {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut col[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * stride + kk) as isize - padding as isize;
                *slot = if pos >= 0 && (pos as usize) < len {
                    xc[pos as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Folds columns back onto `x`, accumulating overlaps. Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    x: &mut [T],
) {
    for c in 0..channels {
        for kk in 0..k {
            let row = &col[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * stride + kk) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < len {
                    x[c * len + pos as usize] = x[c * len + pos as usize] + v;
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Length on the `in_ch` side of the weight.
    pub in_len: usize,
    /// Length on the `out_ch` side of the weight.
    pub out_len: usize,
}

/// `y[b] = W * im2col(x[b]) + bias`; `x` lives on the `in_ch` side.
pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let ck = g.in_ch * g.k;
    let mut col = vec![T::zero(); ck * g.out_len];
    let mut y = vec![T::zero(); g.batch * g.out_ch * g.out_len];
    for b in 0..g.batch {
        let xb = &x[b * g.in_ch * g.in_len..(b + 1) * g.in_ch * g.in_len];
        im2col(xb, g.in_ch, g.in_len, g.k, g.stride, g.padding, g.out_len, &mut col);
        let yb = &mut y[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
        for (o, row) in yb.chunks_mut(g.out_len).enumerate() {
            row.fill(bias[o]);
        }
        T::gemm(
            g.out_ch,
            ck,
            g.out_len,
            T::one(),
            w,
            ck as isize,
            1,
            &col,
            g.out_len as isize,
            1,
            T::one(),
            yb,
            g.out_len as isize,
            1,
        );
    }
    y
}

/// Input-side map of `conv_forward`: takes `dy` on the `out_ch` side and
/// returns the accumulated values on the `in_ch` side. This is both the
/// input gradient of `conv1d` and the forward pass of `transpose_conv1d`.
pub(crate) fn conv_adjoint<T: Real>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let ck = g.in_ch * g.k;
    let mut dcol = vec![T::zero(); ck * g.out_len];
    let mut dx = vec![T::zero(); g.batch * g.in_ch * g.in_len];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
        T::gemm(
            ck,
            g.out_ch,
            g.out_len,
            T::one(),
            w,
            1,
            ck as isize,
            dyb,
            g.out_len as isize,
            1,
            T::zero(),
            &mut dcol,
            g.out_len as isize,
            1,
        );
        let dxb = &mut dx[b * g.in_ch * g.in_len..(b + 1) * g.in_ch * g.in_len];
        col2im(&dcol, g.in_ch, g.in_len, g.k, g.stride, g.padding, g.out_len, dxb);
    }
    dx
}

/// Accumulates `dW += dy * im2col(x)^T` over the batch.
pub(crate) fn conv_weight_grad<T: Real>(g: &ConvGeom, x: &[T], dy: &[T], dw: &mut [T]) {
    let ck = g.in_ch * g.k;
    let mut col = vec![T::zero(); ck * g.out_len];
    for b in 0..g.batch {
        let xb = &x[b * g.in_ch * g.in_len..(b + 1) * g.in_ch * g.in_len];
        im2col(xb, g.in_ch, g.in_len, g.k, g.stride, g.padding, g.out_len, &mut col);
        let dyb = &dy[b * g.out_ch * g.out_len..(b + 1) * g.out_ch * g.out_len];
        T::gemm(
            g.out_ch,
            g.out_len,
            ck,
            T::one(),
            dyb,
            g.out_len as isize,
            1,
            &col,
            1,
            g.out_len as isize,
            T::one(),
            dw,
            ck as isize,
            1,
        );
    }
}

/// Sums `dy` over batch and length into one value per `out_ch`.
pub(crate) fn channel_sums<T: Real>(
    dy: &[T],
    batch: usize,
    channels: usize,
    len: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * len;
            *acc = *acc + dy[start..start + len].iter().copied().sum::<T>();
        }
    }
    out
}
