//! Log-chroma histogram features.
//!
//! Every pixel with strictly positive channels maps to `u = ln(g/r)`,
//! `v = ln(g/b)`. A per-channel gain on the image becomes a translation in
//! this plane, which is what makes histogram localization work. Histograms
//! are laid out row-major with rows indexed by `v` and columns by `u`.

use crate::error::{Error, Result};
use crate::image::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistogramConfig {
    pub n: usize,
    pub b_min: f64,
    pub b_max: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            n: 64,
            b_min: -2.85,
            b_max: 2.85,
        }
    }
}

impl HistogramConfig {
    pub fn new(n: usize, b_min: f64, b_max: f64) -> Result<Self> {
        let cfg = Self { n, b_min, b_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("histogram needs n >= 2, got {}", self.n)));
        }
        if !(self.b_min.is_finite() && self.b_max.is_finite() && self.b_min < self.b_max) {
            return Err(Error::Config(format!(
                "histogram bounds must satisfy b_min < b_max, got [{}, {}]",
                self.b_min, self.b_max
            )));
        }
        Ok(())
    }

    /// Bin width.
    pub fn epsilon(&self) -> f64 {
        (self.b_max - self.b_min) / self.n as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.b_min + (i as f64 + 0.5) * self.epsilon()
    }

    /// Bin centers along one axis.
    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.bin_center(i)).collect()
    }

    /// Index of the half-open cell `[b_min + i*eps, b_min + (i+1)*eps)`
    /// containing `value`, or `None` outside the histogram.
    pub fn bin_of(&self, value: f64) -> Option<usize> {
        let t = ((value - self.b_min) / self.epsilon()).floor();
        (t >= 0.0 && t < self.n as f64).then_some(t as usize)
    }
}

/// Which quantity a histogram is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramSource {
    Pixels,
    Gradients,
}

/// Log-chroma of an RGB triplet, `None` if any channel is not strictly positive.
pub fn compute_uv(rgb: [f64; 3]) -> Option<(f64, f64)> {
    let [r, g, b] = rgb;
    if !(r > 0.0 && g > 0.0 && b > 0.0) || !(r.is_finite() && g.is_finite() && b.is_finite()) {
        return None;
    }
    Some(((g / r).ln(), (g / b).ln()))
}

/// A weighted log-chroma observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaSample {
    pub u: f64,
    pub v: f64,
    pub weight: f64,
}

/// Per-channel local absolute variation at each pixel: forward differences
/// to the right and below, summed. Only pixels whose neighbours are masked in
/// contribute.
pub fn gradient_triplets(img: &RawImage) -> Vec<[f64; 3]> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w.saturating_sub(1) * h.saturating_sub(1));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if !(img.is_masked_in(x, y) && img.is_masked_in(x + 1, y) && img.is_masked_in(x, y + 1)) {
                continue;
            }
            let c = img.pixel(x, y);
            let right = img.pixel(x + 1, y);
            let down = img.pixel(x, y + 1);
            out.push(std::array::from_fn(|k| {
                (right[k] - c[k]).abs() + (down[k] - c[k]).abs()
            }));
        }
    }
    out
}

fn l2(c: [f64; 3]) -> f64 {
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Chroma samples of every usable pixel (or gradient triplet), weighted by
/// the triplet's L2 norm. Triplets with a non-positive channel are dropped.
pub fn chroma_samples(img: &RawImage, source: HistogramSource) -> Vec<ChromaSample> {
    let to_sample = |c: [f64; 3]| compute_uv(c).map(|(u, v)| ChromaSample { u, v, weight: l2(c) });
    match source {
        HistogramSource::Pixels => img.valid_pixels().filter_map(to_sample).collect(),
        HistogramSource::Gradients => gradient_triplets(img).into_iter().filter_map(to_sample).collect(),
    }
}

/// Unnormalized histogram: each sample adds its weight to exactly one bin.
/// Samples outside the bounds are dropped.
pub fn accumulate(samples: &[ChromaSample], cfg: &HistogramConfig) -> Vec<f64> {
    let n = cfg.n;
    let mut hist = vec![0.0; n * n];
    for s in samples {
        if let (Some(i), Some(j)) = (cfg.bin_of(s.u), cfg.bin_of(s.v)) {
            hist[j * n + i] += s.weight;
        }
    }
    hist
}

/// Brightness-weighted, L1-normalized log-chroma histogram (`n*n`, rows = v).
///
/// For [`HistogramSource::Gradients`] an image without any usable gradient
/// (e.g. a constant image) yields an all-zero histogram rather than an error.
pub fn build_histogram(img: &RawImage, cfg: &HistogramConfig, source: HistogramSource) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut hist = accumulate(&chroma_samples(img, source), cfg);
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|v| *v /= total);
        Ok(hist)
    } else {
        match source {
            HistogramSource::Pixels => Err(Error::EmptyHistogram),
            HistogramSource::Gradients => Ok(hist),
        }
    }
}

/// Number of channels in a feature stack.
pub const STACK_CHANNELS: usize = 4;

/// Network input: pixel histogram, gradient histogram, and the bin-center
/// `u` and `v` coordinate planes, each `n*n`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaHistogram {
    n: usize,
    data: Vec<f64>,
}

impl ChromaHistogram {
    pub fn from_channels(n: usize, pixels: Vec<f64>, gradients: Vec<f64>, cfg: &HistogramConfig) -> Result<Self> {
        if pixels.len() != n * n || gradients.len() != n * n || cfg.n != n {
            return Err(Error::Shape(format!("feature channels must be {n}x{n}")));
        }
        let mut data = pixels;
        data.extend(gradients);
        let centers = cfg.centers();
        data.extend((0..n * n).map(|k| centers[k % n]));
        data.extend((0..n * n).map(|k| centers[k / n]));
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let nn = self.n * self.n;
        &self.data[c * nn..(c + 1) * nn]
    }

    pub fn pixel_histogram(&self) -> &[f64] {
        self.channel(0)
    }

    pub fn gradient_histogram(&self) -> &[f64] {
        self.channel(1)
    }

    /// All four channels, channel-major.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

pub fn assemble_feature_stack(img: &RawImage, cfg: &HistogramConfig) -> Result<ChromaHistogram> {
    let pixels = build_histogram(img, cfg, HistogramSource::Pixels)?;
    let gradients = build_histogram(img, cfg, HistogramSource::Gradients)?;
    ChromaHistogram::from_channels(cfg.n, pixels, gradients, cfg)
}

/// Trace of the 2x2 covariance of per-pixel `(u, v)`; a measure of how
/// colorful an image is. Returns 0 for images with fewer than two usable pixels.
pub fn chroma_variance(img: &RawImage) -> f64 {
    let pts: Vec<(f64, f64)> = img.valid_pixels().filter_map(compute_uv).collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let k = pts.len() as f64;
    let (mu, mv) = pts.iter().fold((0.0, 0.0), |(a, b), (u, v)| (a + u, b + v));
    let (mu, mv) = (mu / k, mv / k);
    pts.iter()
        .map(|(u, v)| (u - mu).powi(2) + (v - mv).powi(2))
        .sum::<f64>()
        / (k - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uv_of_reference_pixels() {
        assert_eq!(compute_uv([0.5, 0.5, 0.5]), Some((0.0, 0.0)));
        let (u, v) = compute_uv([0.25, 0.5, 0.5]).unwrap();
        assert!((u - std::f64::consts::LN_2).abs() < 1e-15 && v == 0.0);
        let (u, v) = compute_uv([0.5, 0.5, 0.25]).unwrap();
        assert!(u == 0.0 && (v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(compute_uv([0.0, 0.5, 0.5]), None);
        assert_eq!(compute_uv([0.1, -0.5, 0.5]), None);
    }

    #[test]
    fn uv_is_intensity_invariant() {
        let p = [0.12, 0.5, 0.31];
        let (u, v) = compute_uv(p).unwrap();
        for k in [1e-3, 0.5, 7.0, 1e4] {
            let (uk, vk) = compute_uv(p.map(|c| c * k)).unwrap();
            assert!((u - uk).abs() < 1e-12 && (v - vk).abs() < 1e-12);
        }
    }

    #[test]
    fn default_bin_width() {
        let cfg = HistogramConfig::default();
        assert_eq!(cfg.n, 64);
        assert!((cfg.epsilon() - 0.0890625).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(HistogramConfig::new(1, -1.0, 1.0).is_err());
        assert!(HistogramConfig::new(8, 1.0, 1.0).is_err());
        assert!(HistogramConfig::new(8, -1.0, 1.0).is_ok());
    }

    #[test]
    fn bins_are_half_open() {
        let cfg = HistogramConfig::new(4, -2.0, 2.0).unwrap();
        assert_eq!(cfg.bin_of(-2.0), Some(0));
        assert_eq!(cfg.bin_of(-1.0), Some(1));
        assert_eq!(cfg.bin_of(1.999), Some(3));
        assert_eq!(cfg.bin_of(2.0), None);
        assert_eq!(cfg.bin_of(-2.0001), None);
    }

    #[test]
    fn single_gray_pixel_lands_at_origin() {
        let cfg = HistogramConfig::default();
        let img = RawImage::uniform(1, 1, [1.0; 3]).unwrap();
        let h = build_histogram(&img, &cfg, HistogramSource::Pixels).unwrap();
        let (i, j) = (cfg.bin_of(0.0).unwrap(), cfg.bin_of(0.0).unwrap());
        assert_eq!(i, 32);
        assert_eq!(h[j * 64 + i], 1.0);
        assert_eq!(h.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn two_pixels_split_by_brightness() {
        let cfg = HistogramConfig::default();
        let c1 = [0.5, 0.5, 0.5];
        let c2 = [0.25, 0.5, 1.0];
        let img = RawImage::new(2, 1, vec![c1, c2]).unwrap();
        let h = build_histogram(&img, &cfg, HistogramSource::Pixels).unwrap();
        let w1 = (3.0f64 * 0.25).sqrt();
        let w2 = (0.0625f64 + 0.25 + 1.0).sqrt();
        let (u2, v2) = compute_uv(c2).unwrap();
        let b1 = cfg.bin_of(0.0).unwrap() * 64 + cfg.bin_of(0.0).unwrap();
        let b2 = cfg.bin_of(v2).unwrap() * 64 + cfg.bin_of(u2).unwrap();
        assert!((h[b1] - w1 / (w1 + w2)).abs() < 1e-15);
        assert!((h[b2] - w2 / (w1 + w2)).abs() < 1e-15);
    }

    #[test]
    fn masked_and_nonpositive_pixels_are_dropped() {
        let cfg = HistogramConfig::default();
        let img = RawImage::new(3, 1, vec![[1.0; 3], [0.0, 1.0, 1.0], [0.3, 0.6, 0.9]])
            .unwrap()
            .with_mask(vec![false, true, true])
            .unwrap();
        let samples = chroma_samples(&img, HistogramSource::Pixels);
        assert_eq!(samples.len(), 1);
        let empty = img.with_mask(vec![false, true, false]).unwrap();
        assert!(matches!(
            build_histogram(&empty, &cfg, HistogramSource::Pixels),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn uniform_image_stack() {
        let cfg = HistogramConfig::default();
        let img = RawImage::uniform(8, 8, [0.3; 3]).unwrap();
        let stack = assemble_feature_stack(&img, &cfg).unwrap();
        let origin = 32 * 64 + 32;
        assert_eq!(stack.pixel_histogram()[origin], 1.0);
        assert!(stack.gradient_histogram().iter().all(|&v| v == 0.0));
        for row in 0..64 {
            for col in 0..64 {
                assert_eq!(stack.channel(2)[row * 64 + col], cfg.bin_center(col));
                assert_eq!(stack.channel(3)[row * 64 + col], cfg.bin_center(row));
            }
        }
    }

    #[test]
    fn gradient_histogram_of_edges() {
        let cfg = HistogramConfig::default();
        // A vertical edge between two colors: the gradient triplet is |c1 - c2|.
        let img = RawImage::from_fn(4, 4, |x, _| if x < 2 { [0.2, 0.4, 0.3] } else { [0.4, 0.5, 0.5] }).unwrap();
        let h = build_histogram(&img, &cfg, HistogramSource::Gradients).unwrap();
        let (u, v) = compute_uv([0.2, 0.1, 0.2]).unwrap();
        let bin = cfg.bin_of(v).unwrap() * 64 + cfg.bin_of(u).unwrap();
        assert!((h[bin] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chroma_variance_of_gray_is_zero() {
        let img = RawImage::uniform(4, 4, [0.3, 0.6, 0.2]).unwrap();
        assert!(chroma_variance(&img).abs() < 1e-24);
        let vivid = RawImage::from_fn(4, 4, |x, _| if x % 2 == 0 { [0.1, 0.6, 0.2] } else { [0.6, 0.2, 0.5] }).unwrap();
        assert!(chroma_variance(&vivid) > 0.5);
    }
}
