//! Dense NCHW kernels shared by the forward and backward passes.

use matrixmultiply::dgemm;

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe regions inside the given slices.
    unsafe {
        dgemm(
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

/// Unfolds one `[c, h, w]` sample into `[c*9, h*w]` columns for a 3x3,
/// stride-1, zero-padded convolution.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, o) in out.iter_mut().enumerate() {
                        let sx = xx as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` sample.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv3x3_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let k = d.ci * 9;
    let mut out = vec![0.0; d.n * d.co * hw];
    let mut cols = vec![0.0; k * hw];
    for b in 0..d.n {
        im2col(&x[b * d.ci * hw..(b + 1) * d.ci * hw], d.ci, d.h, d.w, &mut cols);
        let o = &mut out[b * d.co * hw..(b + 1) * d.co * hw];
        gemm(d.co, k, hw, weight, k, 1, &cols, hw, 1, 0.0, o);
        if let Some(bias) = bias {
            for (co, bv) in bias.iter().enumerate() {
                o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a 3x3 convolution; each output is only computed when asked for.
pub fn conv3x3_backward(
    x: &[f64],
    weight: &[f64],
    gout: &[f64],
    d: &ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let k = d.ci * 9;
    let mut cols = vec![0.0; k * hw];
    for b in 0..d.n {
        let g = &gout[b * d.co * hw..(b + 1) * d.co * hw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * d.ci * hw..(b + 1) * d.ci * hw], d.ci, d.h, d.w, &mut cols);
            // dw += g . cols^T
            gemm(d.co, hw, k, g, hw, 1, &cols, 1, hw, 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = w^T . g
            gemm(k, d.co, hw, weight, 1, k, g, hw, 1, 0.0, &mut cols);
            col2im(&cols, d.ci, d.h, d.w, &mut dx[b * d.ci * hw..(b + 1) * d.ci * hw]);
        }
    }
    if let Some(db) = db {
        for b in 0..d.n {
            for co in 0..d.co {
                db[co] += gout[(b * d.co + co) * hw..(b * d.co + co + 1) * hw].iter().sum::<f64>();
            }
        }
    }
}

/// 2x2 max pool over `[planes, h, w]`; returns values and the flat source
/// index of each maximum. Ties go to the first element in row-major order.
pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let cands = [
                    base + 2 * y * w + 2 * xx,
                    base + 2 * y * w + 2 * xx + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if x[c] > x[best] {
                        best = c;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Source taps and weights along one axis for 2x bilinear upsampling with
/// half-pixel centers and edge clamping.
pub fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                d[y0 * w + x0] += gv * wy0 * wx0;
                d[y0 * w + x1] += gv * wy0 * wx1;
                d[y1 * w + x0] += gv * wy1 * wx0;
                d[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGroups {
    /// One group per channel across the batch.
    Batch,
    /// One group per (sample, channel) plane.
    Instance,
}

/// Iterates the contiguous planes of channel `c`, grouped per `groups`.
fn for_each_group(n: usize, c: usize, hw: usize, groups: NormGroups, mut f: impl FnMut(usize, &[std::ops::Range<usize>])) {
    match groups {
        NormGroups::Batch => {
            for ch in 0..c {
                let planes: Vec<_> = (0..n).map(|b| (b * c + ch) * hw..(b * c + ch + 1) * hw).collect();
                f(ch, &planes);
            }
        }
        NormGroups::Instance => {
            for b in 0..n {
                for ch in 0..c {
                    let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    f(ch, std::slice::from_ref(&r));
                }
            }
        }
    }
}

pub struct NormSaved {
    pub xhat: Vec<f64>,
    /// One inverse standard deviation per group, in group iteration order.
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes with batch statistics (biased variance) and applies the
/// per-channel affine transform.
pub fn norm_forward(x: &[f64], shape: [usize; 4], groups: NormGroups, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, NormSaved) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let mut y = vec![0.0; x.len()];
    let mut saved = NormSaved {
        xhat: vec![0.0; x.len()],
        inv_std: Vec::new(),
        mean: Vec::new(),
        var: Vec::new(),
    };
    for_each_group(n, c, hw, groups, |ch, planes| {
        let count = (planes.len() * hw) as f64;
        let mean = planes.iter().map(|r| x[r.clone()].iter().sum::<f64>()).sum::<f64>() / count;
        let var = planes
            .iter()
            .map(|r| x[r.clone()].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / count;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for r in planes {
            for i in r.clone() {
                let xh = (x[i] - mean) * inv;
                saved.xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
        saved.inv_std.push(inv);
        saved.mean.push(mean);
        saved.var.push(var);
    });
    (y, saved)
}

/// Normalizes with fixed per-channel statistics.
pub fn norm_forward_fixed(x: &[f64], shape: [usize; 4], mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, NormSaved) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            mean: mean.to_vec(),
            var: var.to_vec(),
        },
    )
}

pub struct NormGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dgamma: Option<&'a mut [f64]>,
    pub dbeta: Option<&'a mut [f64]>,
}

/// Backward of [`norm_forward`] (`fixed = false`) or [`norm_forward_fixed`].
pub fn norm_backward(g: &[f64], shape: [usize; 4], groups: NormGroups, fixed: bool, gamma: &[f64], saved: &NormSaved, grads: NormGrads<'_>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let NormGrads { mut dx, mut dgamma, mut dbeta } = grads;
    let groups = if fixed { NormGroups::Batch } else { groups };
    let mut gi = 0;
    for_each_group(n, c, hw, groups, |ch, planes| {
        let inv = if fixed { saved.inv_std[ch] } else { saved.inv_std[gi] };
        gi += 1;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for r in planes {
            for i in r.clone() {
                sum_g += g[i];
                sum_gx += g[i] * saved.xhat[i];
            }
        }
        if let Some(d) = dgamma.as_deref_mut() {
            d[ch] += sum_gx;
        }
        if let Some(d) = dbeta.as_deref_mut() {
            d[ch] += sum_g;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let count = (planes.len() * hw) as f64;
            for r in planes {
                for i in r.clone() {
                    dx[i] += if fixed {
                        gamma[ch] * inv * g[i]
                    } else {
                        gamma[ch] * inv * (g[i] - sum_g / count - saved.xhat[i] * sum_gx / count)
                    };
                }
            }
        }
    });
}

/// Horizontal Sobel kernel; the vertical one is its transpose.
pub const SOBEL_U: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

/// Sobel responses over the valid region of an `h x w` map. Differences are
/// taken before smoothing so constant maps give exact zeros.
pub fn sobel_responses(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (h.saturating_sub(2), w.saturating_sub(2));
    let mut ru = vec![0.0; oh * ow];
    let mut rv = vec![0.0; oh * ow];
    let at = |i: usize, j: usize| x[i * w + j];
    for i in 0..oh {
        for j in 0..ow {
            let du = |a: usize| at(i + a, j + 2) - at(i + a, j);
            let dv = |b: usize| at(i + 2, j + b) - at(i, j + b);
            ru[i * ow + j] = du(0) + 2.0 * du(1) + du(2);
            rv[i * ow + j] = dv(0) + 2.0 * dv(1) + dv(2);
        }
    }
    (ru, rv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], wt: &[f64], d: &ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.n * d.co * d.h * d.w];
        for b in 0..d.n {
            for co in 0..d.co {
                for y in 0..d.h as isize {
                    for xx in 0..d.w as isize {
                        let mut s = 0.0;
                        for ci in 0..d.ci {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy >= 0 && sy < d.h as isize && sx >= 0 && sx < d.w as isize {
                                        s += wt[((co * d.ci + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[((b * d.ci + ci) * d.h + sy as usize) * d.w + sx as usize];
                                    }
                                }
                            }
                        }
                        out[((b * d.co + co) * d.h + y as usize) * d.w + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_loops() {
        let d = ConvDims { n: 2, ci: 3, co: 4, h: 5, w: 6 };
        let x: Vec<f64> = (0..2 * 3 * 30).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
        let wt: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
        let a = conv3x3_forward(&x, &wt, None, &d);
        let b = direct_conv(&x, &wt, &d);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_picks_largest() {
        let (v, i) = maxpool2(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(v, vec![4.0]);
        assert_eq!(i, vec![3]);
        let (_, i) = maxpool2(&[5.0, 5.0, 5.0, 5.0], 1, 2, 2);
        assert_eq!(i, vec![0]);
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let out = upsample2(&[2.5; 12], 1, 3, 4);
        assert_eq!(out.len(), 48);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_interior_weights() {
        // A 1-D ramp stays a ramp away from the borders.
        let out = upsample2(&[0.0, 1.0, 2.0, 3.0], 1, 1, 4);
        let row = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        assert_eq!(out[..8], row);
        assert_eq!(out[8..], row);
    }

    #[test]
    fn sobel_of_ramp() {
        let x: Vec<f64> = (0..16).map(|i| (i % 4) as f64).collect();
        let (ru, rv) = sobel_responses(&x, 4, 4);
        assert!(ru.iter().all(|&v| v == 8.0));
        assert!(rv.iter().all(|&v| v == 0.0));
    }
}
