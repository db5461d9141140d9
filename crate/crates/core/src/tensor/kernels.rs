//! Raw numeric kernels over flat slices. No allocation tracking, no graph.

use super::graph::ConvSpec;

/// `c = a·b + beta·c` for row-major strided operands.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with strides
/// `(rsb, csb)`, `c` is a dense row-major `m×n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every strided access made by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_out_len(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

/// Unfolds `[C, H, W]` into a `[C·kh·kw, Ho·Wo]` column matrix (zero padding).
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut cols = vec![0.0; c * kh * kw * n];
    let pad = spec.padding as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let oy_off = (ky * spec.dilation) as isize - pad;
                let ox_off = (kx * spec.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * spec.stride) as isize + ox_off;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let n = ho * wo;
    let mut x = vec![0.0; c * h * w];
    let pad = spec.padding as isize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let oy_off = (ky * spec.dilation) as isize - pad;
                let ox_off = (kx * spec.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * spec.stride) as isize + oy_off;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * spec.stride) as isize + ox_off;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, s: &ConvShape, spec: ConvSpec) -> Vec<f64> {
    let n = s.ho * s.wo;
    let k = s.cin * s.kh * s.kw;
    let mut out = vec![0.0; s.cout * n];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[co]);
        }
    }
    // 1×1 stride-1 convolutions read the input directly as the column matrix.
    if s.kh == 1 && s.kw == 1 && spec.stride == 1 && spec.padding == 0 {
        gemm(s.cout, k, n, weight, k, 1, x, n, 1, 1.0, &mut out);
    } else {
        let cols = im2col(x, s.cin, s.h, s.w, s.kh, s.kw, spec, s.ho, s.wo);
        gemm(s.cout, k, n, weight, k, 1, &cols, n, 1, 1.0, &mut out);
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    s: &ConvShape,
    spec: ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let n = s.ho * s.wo;
    let k = s.cin * s.kh * s.kw;
    let db: Vec<f64> = grad_out.chunks(n).map(|c| c.iter().sum()).collect();
    let pointwise = s.kh == 1 && s.kw == 1 && spec.stride == 1 && spec.padding == 0;
    let owned_cols;
    let cols: &[f64] = if !need_dw {
        &[]
    } else if pointwise {
        x
    } else {
        owned_cols = im2col(x, s.cin, s.h, s.w, s.kh, s.kw, spec, s.ho, s.wo);
        &owned_cols
    };
    let dw = need_dw.then(|| {
        // dW[co, kk] = Σ_n G[co, n] · cols[kk, n]
        let mut dw = vec![0.0; s.cout * k];
        gemm(s.cout, n, k, grad_out, n, 1, cols, 1, n, 0.0, &mut dw);
        dw
    });
    let dx = need_dx.then(|| {
        // dcols[kk, n] = Σ_co W[co, kk] · G[co, n]
        let mut dcols = vec![0.0; k * n];
        gemm(k, s.cout, n, weight, 1, k, grad_out, n, 1, 0.0, &mut dcols);
        if pointwise {
            dcols
        } else {
            col2im(&dcols, s.cin, s.h, s.w, s.kh, s.kw, spec, s.ho, s.wo)
        }
    });
    (dx, dw, db)
}

/// Max pooling with `-inf` padding; returns output and flat argmax indices.
pub(crate) fn max_pool(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let spec = ConvSpec {
        stride,
        padding,
        dilation: 1,
    };
    let ho = conv_out_len(h, kernel, spec).unwrap_or(0);
    let wo = conv_out_len(w, kernel, spec).unwrap_or(0);
    let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
    let mut arg = vec![0usize; c * ho * wo];
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (ci * ho + oy) * wo + ox;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = (ci * h + iy as usize) * w + ix as usize;
                        if x[i] > out[o] {
                            out[o] = x[i];
                            arg[o] = i;
                        }
                    }
                }
            }
        }
    }
    (out, arg, ho, wo)
}

/// Standardizes each of `chunks` contiguous slices to zero mean, unit variance.
/// Returns the per-chunk reciprocal standard deviations.
pub(crate) fn normalize_chunks(x: &[f64], chunks: usize, eps: f64, out: &mut [f64]) -> Vec<f64> {
    let len = x.len() / chunks;
    let mut rstd = Vec::with_capacity(chunks);
    for (src, dst) in x.chunks(len).zip(out.chunks_mut(len)) {
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    rstd
}

pub(crate) fn normalize_chunks_backward(xhat: &[f64], rstd: &[f64], grad: &[f64]) -> Vec<f64> {
    let chunks = rstd.len();
    let len = xhat.len() / chunks;
    let mut dx = vec![0.0; xhat.len()];
    for (ci, r) in rstd.iter().enumerate() {
        let range = ci * len..(ci + 1) * len;
        let g = &grad[range.clone()];
        let xh = &xhat[range.clone()];
        let mean_g = g.iter().sum::<f64>() / len as f64;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for ((d, gi), xi) in dx[range].iter_mut().zip(g).zip(xh) {
            *d = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}
