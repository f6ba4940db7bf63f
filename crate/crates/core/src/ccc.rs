//! Convolutional color constancy: filter/bias evaluation over a log-chroma
//! histogram and readout of a unit-norm illuminant.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{ChromaHistogram, HistogramConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvMode {
    #[default]
    Fft,
    Direct,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn check_square(len: usize, n: usize, what: &str) -> Result<()> {
    if len != n * n {
        return Err(Error::Shape(format!("{what} has {len} elements, expected {n}x{n}")));
    }
    Ok(())
}

/// Full linear convolution of two `n x n` arrays; the result is
/// `(2n-1) x (2n-1)`, row-major.
pub fn convolve_full(x: &[f64], k: &[f64], n: usize, mode: ConvMode) -> Result<Vec<f64>> {
    check_square(x.len(), n, "input")?;
    check_square(k.len(), n, "kernel")?;
    let m = 2 * n - 1;
    Ok(match mode {
        ConvMode::Direct => {
            let mut out = vec![0.0; m * m];
            for p in 0..n {
                for q in 0..n {
                    let kv = k[p * n + q];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        let row = &mut out[(i + p) * m + q..(i + p) * m + q + n];
                        for (o, xv) in row.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                            *o += kv * xv;
                        }
                    }
                }
            }
            out
        }
        ConvMode::Fft => fft_full(x, k, n),
    })
}

fn fft2(buf: &mut [Complex<f64>], size: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let fft = if inverse {
            planner.plan_fft_inverse(size)
        } else {
            planner.plan_fft_forward(size)
        };
        fft.process(buf);
        let mut col = vec![Complex::default(); size];
        for c in 0..size {
            for r in 0..size {
                col[r] = buf[r * size + c];
            }
            fft.process(&mut col);
            for r in 0..size {
                buf[r * size + c] = col[r];
            }
        }
    });
}

fn fft_full(x: &[f64], k: &[f64], n: usize) -> Vec<f64> {
    let size = 2 * n;
    let pad = |a: &[f64]| {
        let mut buf = vec![Complex::default(); size * size];
        for i in 0..n {
            for j in 0..n {
                buf[i * size + j] = Complex::new(a[i * n + j], 0.0);
            }
        }
        buf
    };
    let mut fx = pad(x);
    let mut fk = pad(k);
    fft2(&mut fx, size, false);
    fft2(&mut fk, size, false);
    for (a, b) in fx.iter_mut().zip(&fk) {
        *a *= b;
    }
    fft2(&mut fx, size, true);
    let scale = 1.0 / (size * size) as f64;
    let m = 2 * n - 1;
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        out.extend(fx[i * size..i * size + m].iter().map(|c| c.re * scale));
    }
    out
}

/// Extracts the `n x n` window starting at `(offset, offset)` from a full
/// `(2n-1) x (2n-1)` convolution.
pub fn crop_full(full: &[f64], n: usize, offset: usize) -> Vec<f64> {
    let m = 2 * n - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let start = (i + offset) * m + offset;
        out.extend_from_slice(&full[start..start + n]);
    }
    out
}

/// Same-size linear convolution with the kernel centered at `(n/2, n/2)` and
/// zero padding outside the array.
pub fn convolve2d(x: &[f64], k: &[f64], n: usize, mode: ConvMode) -> Result<Vec<f64>> {
    let full = convolve_full(x, k, n, mode)?;
    Ok(crop_full(&full, n, n / 2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CccParams {
    pub n: usize,
    pub filters: [Vec<f64>; 2],
    pub bias: Vec<f64>,
    pub gain: Option<Vec<f64>>,
}

impl CccParams {
    pub fn new(n: usize, filters: [Vec<f64>; 2], bias: Vec<f64>, gain: Option<Vec<f64>>) -> Result<Self> {
        let p = Self { n, filters, bias, gain };
        p.validate()?;
        Ok(p)
    }

    /// Zero filters with the given bias.
    pub fn from_bias(n: usize, bias: Vec<f64>) -> Result<Self> {
        Self::new(n, [vec![0.0; n * n], vec![0.0; n * n]], bias, None)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        check_square(self.filters[0].len(), n, "filter 0")?;
        check_square(self.filters[1].len(), n, "filter 1")?;
        check_square(self.bias.len(), n, "bias")?;
        if let Some(g) = &self.gain {
            check_square(g.len(), n, "gain")?;
        }
        let all = self.filters.iter().chain(Some(&self.bias)).chain(self.gain.as_ref());
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CCC parameters".into()));
        }
        Ok(())
    }
}

/// Softmax over all bins of the CCC logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    n: usize,
    p: Vec<f64>,
}

impl HeatMap {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn argmax(&self) -> (usize, usize) {
        let k = argmax(&self.p);
        (k / self.n, k % self.n)
    }
}

/// First index of the largest value.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax over the whole slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

/// `B + G . sum_i N_i * F_i` (the pre-softmax scores).
pub fn ccc_logits(h: &ChromaHistogram, params: &CccParams, mode: ConvMode) -> Result<Vec<f64>> {
    params.validate()?;
    let n = h.n();
    if params.n != n {
        return Err(Error::Shape(format!("histogram is {n}x{n} but params are {0}x{0}", params.n)));
    }
    let mut acc = vec![0.0; n * n];
    for (c, f) in params.filters.iter().enumerate() {
        let r = convolve2d(h.channel(c), f, n, mode)?;
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    if let Some(g) = &params.gain {
        acc.iter_mut().zip(g).for_each(|(a, g)| *a *= g);
    }
    acc.iter_mut().zip(&params.bias).for_each(|(a, b)| *a += b);
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CCC logits".into()));
    }
    Ok(acc)
}

pub fn evaluate_ccc(h: &ChromaHistogram, params: &CccParams) -> Result<HeatMap> {
    let logits = ccc_logits(h, params, ConvMode::Fft)?;
    Ok(HeatMap {
        n: h.n(),
        p: softmax(&logits),
    })
}

/// Heat map from precomputed logits.
pub fn heat_map_from_logits(n: usize, logits: &[f64]) -> Result<HeatMap> {
    check_square(logits.len(), n, "logits")?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CCC logits".into()));
    }
    Ok(HeatMap { n, p: softmax(logits) })
}

/// Expected bin-center coordinates under `p`.
pub fn soft_argmax(p: &HeatMap, cfg: &HistogramConfig) -> (f64, f64) {
    let centers = cfg.centers();
    let n = p.n;
    let mut u = 0.0;
    let mut v = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = p.p[i * n + j];
            u += w * centers[j];
            v += w * centers[i];
        }
    }
    (u, v)
}

/// Unit-norm illuminant color with strictly positive components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Illuminant([f64; 3]);

impl Illuminant {
    /// Normalizes `rgb`, which must be finite and strictly positive.
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Domain(format!("illuminant components must be positive, got {rgb:?}")));
        }
        let norm = rgb.iter().map(|c| c * c).sum::<f64>().sqrt();
        Ok(Self(rgb.map(|c| c / norm)))
    }

    pub fn neutral() -> Self {
        Self([1.0 / 3f64.sqrt(); 3])
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }

    pub fn uv(&self) -> (f64, f64) {
        let [r, g, b] = self.0;
        ((g / r).ln(), (g / b).ln())
    }
}

impl TryFrom<[f64; 3]> for Illuminant {
    type Error = Error;
    fn try_from(rgb: [f64; 3]) -> Result<Self> {
        Self::new(rgb)
    }
}

impl From<Illuminant> for [f64; 3] {
    fn from(l: Illuminant) -> Self {
        l.0
    }
}

pub const UV_LIMIT: f64 = 700.0;

/// The unit RGB vector whose log-chroma is `(u, v)`.
pub fn uv_to_rgb(u: f64, v: f64) -> Result<Illuminant> {
    if !(u.abs() <= UV_LIMIT && v.abs() <= UV_LIMIT) {
        return Err(Error::Domain(format!("log-chroma ({u}, {v}) out of range")));
    }
    // factor out the largest exponent so nothing overflows
    let m = 0f64.max(-u).max(-v);
    let rgb = [(-u - m).exp(), (-m).exp(), (-v - m).exp()];
    let z = rgb.iter().map(|c| c * c).sum::<f64>().sqrt();
    let rgb = rgb.map(|c| c / z);
    if rgb.iter().any(|&c| c <= 0.0) {
        return Err(Error::Domain(format!("log-chroma ({u}, {v}) underflows a channel")));
    }
    Ok(Illuminant(rgb))
}

pub fn estimate_illuminant(h: &ChromaHistogram, params: &CccParams, cfg: &HistogramConfig) -> Result<Illuminant> {
    estimate_illuminant_with(&evaluate_ccc(h, params)?, cfg)
}

/// Illuminant read out of an already evaluated heat map.
pub fn estimate_illuminant_with(p: &HeatMap, cfg: &HistogramConfig) -> Result<Illuminant> {
    let (u, v) = soft_argmax(p, cfg);
    uv_to_rgb(u, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::compute_uv;

    #[test]
    fn delta_kernel_is_identity() {
        let n = 6;
        let x: Vec<f64> = (0..n * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut k = vec![0.0; n * n];
        k[(n / 2) * n + n / 2] = 1.0;
        for mode in [ConvMode::Direct, ConvMode::Fft] {
            let y = convolve2d(&x, &k, n, mode).unwrap();
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shifted_delta_translates_without_wrap() {
        let n = 4;
        let x: Vec<f64> = (1..=16).map(f64::from).collect();
        let mut k = vec![0.0; 16];
        // one column right of center: output(i, j) = x(i, j - 1)
        k[2 * 4 + 3] = 1.0;
        let y = convolve2d(&x, &k, n, ConvMode::Direct).unwrap();
        for i in 0..4 {
            assert_eq!(y[i * 4], 0.0);
            for j in 1..4 {
                assert_eq!(y[i * 4 + j], x[i * 4 + j - 1]);
            }
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(convolve2d(&[0.0; 9], &[0.0; 16], 3, ConvMode::Fft).is_err());
    }

    #[test]
    fn uv_to_rgb_reference_values() {
        let l = uv_to_rgb(0.0, 0.0).unwrap().rgb();
        for c in l {
            assert!((c - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        }
        let ln2 = std::f64::consts::LN_2;
        let l = uv_to_rgb(ln2, 0.0).unwrap().rgb();
        for (a, b) in l.iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let l = uv_to_rgb(ln2, ln2).unwrap().rgb();
        let s = 1.5f64.sqrt();
        for (a, b) in l.iter().zip([0.5 / s, 1.0 / s, 0.5 / s]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(uv_to_rgb(701.0, 0.0).is_err());
        assert!(uv_to_rgb(0.0, f64::NAN).is_err());
        assert!(uv_to_rgb(-699.0, 699.0).is_err());
        let extreme = uv_to_rgb(-300.0, 300.0).unwrap().rgb();
        assert!(extreme.iter().all(|c| c.is_finite() && *c > 0.0));
    }

    #[test]
    fn uv_round_trip() {
        for (u, v) in [(0.3, -1.2), (-2.85, 2.85), (1e-3, 0.0)] {
            let (u2, v2) = compute_uv(uv_to_rgb(u, v).unwrap().rgb()).unwrap();
            assert!((u - u2).abs() < 1e-12 && (v - v2).abs() < 1e-12);
        }
    }

    #[test]
    fn illuminant_rejects_nonpositive() {
        assert!(Illuminant::new([1.0, 0.0, 1.0]).is_err());
        let l = Illuminant::new([1.0, 1.0, 1.0]).unwrap();
        assert_eq!(l, Illuminant::neutral());
        let json = serde_json::to_string(&l).unwrap();
        let back: Illuminant = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
        assert!(serde_json::from_str::<Illuminant>("[1.0, -1.0, 1.0]").is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
