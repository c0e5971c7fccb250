//! Raw slice kernels shared by the forward and backward passes.

/// Fresh `[batch, m, n]` buffer holding `op(a_i) · op(b_i)` for each batch
/// entry. A stride of zero shares that operand across the batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_batched_new(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    a_stride: usize,
    b: &[f64],
    b_t: bool,
    b_stride: usize,
) -> Vec<f64> {
    let len = batch * m * n;
    if k == 0 || len == 0 {
        return vec![0.0; len];
    }
    assert!(a.len() >= (batch - 1) * a_stride + m * k);
    assert!(b.len() >= (batch - 1) * b_stride + k * n);
    // one tall product when b is shared and the a blocks stack contiguously
    if b_stride == 0 && !a_t && a_stride == m * k {
        let mut out: Vec<f64> = Vec::with_capacity(len);
        // SAFETY: extents asserted above; beta = 0 means dgemm writes every
        // output slot without reading it.
        unsafe {
            raw_gemm(batch * m, k, n, a.as_ptr(), false, b.as_ptr(), b_t, out.as_mut_ptr());
            out.set_len(len);
        }
        return out;
    }
    let mut out: Vec<f64> = Vec::with_capacity(len);
    // SAFETY: as above, per batch block.
    unsafe {
        for i in 0..batch {
            raw_gemm(
                m,
                k,
                n,
                a.as_ptr().add(i * a_stride),
                a_t,
                b.as_ptr().add(i * b_stride),
                b_t,
                out.as_mut_ptr().add(i * m * n),
            );
        }
        out.set_len(len);
    }
    out
}

/// # Safety
/// `a`, `b` must address `m·k` and `k·n` readable values and `c` `m·n`
/// writable ones.
#[allow(clippy::too_many_arguments)]
unsafe fn raw_gemm(m: usize, k: usize, n: usize, a: *const f64, a_t: bool, b: *const f64, b_t: bool, c: *mut f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialise an axis permutation: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    if nd == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    loop {
        let base: usize = (0..last).map(|i| idx[i] * src_strides[i]).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| data[base + j * inner_stride]));
        }
        // advance the odometer over all axes except the innermost
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Standard normal CDF via the exact error function.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
