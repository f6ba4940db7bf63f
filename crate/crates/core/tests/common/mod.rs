#![allow(dead_code)]

use c5_core::autodiff::Tensor;
use c5_core::ccc::Illuminant;
use c5_core::features::{ChromaHistogram, HistogramConfig};
use c5_core::image::RawImage;
use c5_core::network::ArchitectureConfig;
use c5_core::train::LabeledSample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn tiny_arch() -> (ArchitectureConfig, HistogramConfig) {
    let arch = ArchitectureConfig {
        n: 16,
        m: 3,
        depth: 2,
        base_channels: 4,
        convs_per_block: 1,
        emit_gain: false,
        leaky_slope: 0.2,
    };
    (arch, HistogramConfig::new(16, -2.85, 2.85).unwrap())
}

fn random_hist(nn: usize, rng: &mut impl Rng) -> Vec<f64> {
    // sparse, like a real histogram
    let mut h: Vec<f64> = (0..nn).map(|_| if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.0 }).collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

pub fn random_stack(cfg: &HistogramConfig, rng: &mut impl Rng) -> ChromaHistogram {
    let nn = cfg.n * cfg.n;
    ChromaHistogram::from_channels(cfg.n, random_hist(nn, rng), random_hist(nn, rng), cfg).unwrap()
}

pub fn random_illuminant(rng: &mut impl Rng) -> Illuminant {
    Illuminant::new([rng.random_range(0.2..1.0), rng.random_range(0.5..1.0), rng.random_range(0.2..1.0)]).unwrap()
}

pub fn random_samples(count: usize, cameras: usize, cfg: &HistogramConfig, rng: &mut impl Rng) -> Vec<LabeledSample> {
    (0..count)
        .map(|i| LabeledSample {
            stack: random_stack(cfg, rng),
            illuminant: random_illuminant(rng),
            camera: format!("cam{}", i % cameras),
        })
        .collect()
}

/// A smooth random scene under a random cast.
pub fn random_image(width: usize, height: usize, rng: &mut impl Rng) -> RawImage {
    let cast = random_illuminant(rng).rgb();
    let patches: Vec<[f64; 3]> = (0..16).map(|_| [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]).collect();
    RawImage::from_fn(width, height, |x, y| {
        let p = patches[(y * 4 / height) * 4 + x * 4 / width];
        let shade = 0.5 + 0.5 * ((x + 2 * y) as f64 / (width + 2 * height) as f64);
        [p[0] * cast[0] * shade, p[1] * cast[1] * shade, p[2] * cast[2] * shade]
    })
    .unwrap()
}

/// Checks the translation property of the pixel histogram for gains that
/// shift log-chroma by whole bins: `(du, dv)` bins along u and v.
///
/// Bin assignment must move by exactly `(du, dv)` for every pixel. The
/// accumulated mass is compared bin-for-bin using the unscaled brightness
/// weights, inside the region whose source bin is in bounds. Returns the
/// number of compared bins that carry mass.
pub fn check_translation(img: &RawImage, du: i64, dv: i64, cfg: &HistogramConfig) -> Result<usize, String> {
    use c5_core::features::{accumulate, build_histogram, chroma_samples, ChromaSample, HistogramSource};
    let eps = cfg.epsilon();
    let gains = [(-(du as f64) * eps).exp(), 1.0, (-(dv as f64) * eps).exp()];
    let scaled = img.scale_channels(gains).map_err(|e| e.to_string())?;
    let orig = chroma_samples(img, HistogramSource::Pixels);
    let moved = chroma_samples(&scaled, HistogramSource::Pixels);
    if orig.len() != moved.len() {
        return Err("sample count changed".into());
    }
    let reweighted: Vec<ChromaSample> = moved.iter().zip(&orig).map(|(m, o)| ChromaSample { weight: o.weight, ..*m }).collect();
    let a = accumulate(&orig, cfg);
    let b = accumulate(&reweighted, cfg);
    let na = build_histogram(img, cfg, HistogramSource::Pixels).ok();
    let nb = build_histogram(&scaled, cfg, HistogramSource::Pixels).ok();
    let n = cfg.n as i64;
    let mut compared = 0;
    for row in 0..n {
        for col in 0..n {
            let (sr, sc) = (row - dv, col - du);
            if !(0..n).contains(&sr) || !(0..n).contains(&sc) {
                continue;
            }
            let (t, s) = ((row * n + col) as usize, (sr * n + sc) as usize);
            if b[t] != a[s] {
                return Err(format!("bin ({row},{col}): {} vs shifted {}", b[t], a[s]));
            }
            if let (Some(na), Some(nb)) = (&na, &nb) {
                if (nb[t] > 0.0) != (na[s] > 0.0) {
                    return Err(format!("support differs at ({row},{col})"));
                }
            }
            compared += usize::from(a[s] > 0.0);
        }
    }
    Ok(compared)
}

/// rg chromaticities `[r, g, b]` on the cubic g(r) with `coeffs`.
pub fn on_cubic(coeffs: [f64; 4], rs: &[f64]) -> Vec<[f64; 3]> {
    rs.iter()
        .map(|&r| {
            let g = coeffs[0] + coeffs[1] * r + coeffs[2] * r * r + coeffs[3] * r * r * r;
            [r, g, 1.0 - r - g]
        })
        .collect()
}
