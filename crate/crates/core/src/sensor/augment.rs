//! Capture-metadata retrieval, illuminant sampling around the target
//! camera's Planckian cubic, and the full raw-to-raw augmentation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{estimate_cct, raw_to_xyz_with, xyz_to_target_raw, CameraProfile, CmfTable, CCT_MAX, CCT_MIN};
use crate::ccc::Illuminant;
use crate::error::{Error, Result};
use crate::image::RawImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureMeta {
    pub iso: f64,
    /// f-number.
    pub aperture: f64,
    /// Seconds.
    pub exposure_time: f64,
    pub baseline_exposure: f64,
    pub baseline_noise: f64,
    pub illuminant: Illuminant,
    pub camera: String,
}

impl CaptureMeta {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("iso", self.iso),
            ("aperture", self.aperture),
            ("exposure_time", self.exposure_time),
            ("baseline_noise", self.baseline_noise),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("capture {name} must be positive, got {v}")));
        }
        if !self.baseline_exposure.is_finite() {
            return Err(Error::Domain("baseline exposure must be finite".into()));
        }
        Ok(())
    }
}

/// Unnormalized capture feature `[q, BLN * ISO, f-number, sqrt(2^BLE) * t]`.
pub fn raw_capture_feature(meta: &CaptureMeta, q: f64) -> Result<[f64; 4]> {
    meta.validate()?;
    Ok([
        q,
        meta.baseline_noise * meta.iso,
        meta.aperture,
        2f64.powf(meta.baseline_exposure).sqrt() * meta.exposure_time,
    ])
}

/// Per-component min-max ranges of a feature set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorms {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl FeatureNorms {
    pub fn fit(features: &[[f64; 4]]) -> Result<Self> {
        let first = features.first().ok_or(Error::Empty("feature set"))?;
        let mut n = Self { min: *first, max: *first };
        for f in features {
            for c in 0..4 {
                n.min[c] = n.min[c].min(f[c]);
                n.max[c] = n.max[c].max(f[c]);
            }
        }
        Ok(n)
    }

    /// Min-max normalizes each component; a component with an empty range
    /// maps to 0.
    pub fn apply(&self, f: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|c| {
            let span = self.max[c] - self.min[c];
            if span > 0.0 {
                (f[c] - self.min[c]) / span
            } else {
                0.0
            }
        })
    }
}

pub fn capture_feature(meta: &CaptureMeta, q: f64, norms: &FeatureNorms) -> Result<[f64; 4]> {
    Ok(norms.apply(raw_capture_feature(meta, q)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Euclidean distance divided by the largest distance among the
    /// retrieved neighbors.
    pub distance: f64,
    pub weight: f64,
}

pub const DEFAULT_K: usize = 4;

/// The `k` nearest `targets` to `query` (fewer if the set is smaller), with
/// weights `softmax(1 - d)` over normalized distances. Ties in distance keep
/// the lower index first.
pub fn knn_retrieve(query: [f64; 4], targets: &[[f64; 4]], k: usize) -> Result<Vec<Neighbor>> {
    if targets.is_empty() {
        return Err(Error::Empty("target capture set"));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut d: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.iter().zip(&query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k.min(targets.len()));
    let max = d.iter().map(|x| x.1).fold(0.0, f64::max);
    let norm: Vec<f64> = d.iter().map(|x| if max > 0.0 { x.1 / max } else { 0.0 }).collect();
    let w = crate::ccc::softmax(&norm.iter().map(|x| 1.0 - x).collect::<Vec<_>>());
    Ok(d.iter()
        .zip(norm)
        .zip(w)
        .map(|((&(index, _), distance), weight)| Neighbor { index, distance, weight })
        .collect())
}

/// `(r, g)` chromaticity: each channel over the channel sum.
pub fn rg_chromaticity(rgb: [f64; 3]) -> (f64, f64) {
    let s: f64 = rgb.iter().sum();
    (rgb[0] / s, rgb[1] / s)
}

/// `g = c0 + c1 r + c2 r^2 + c3 r^3` fitted to a camera's illuminants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanckianCubic {
    pub coeffs: [f64; 4],
    /// Sample standard deviations of the fitted set's r and g.
    pub sigma_r: f64,
    pub sigma_g: f64,
}

impl PlanckianCubic {
    pub fn eval(&self, r: f64) -> f64 {
        let c = &self.coeffs;
        c[0] + r * (c[1] + r * (c[2] + r * c[3]))
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Least-squares cubic through the rg chromaticities of `illuminants`.
/// Only chromaticity matters, so the inputs need not be normalized.
pub fn fit_planckian_cubic(illuminants: &[[f64; 3]]) -> Result<PlanckianCubic> {
    if illuminants.len() < 4 {
        return Err(Error::RankDeficient(format!("a cubic needs 4 points, got {}", illuminants.len())));
    }
    if let Some(l) = illuminants.iter().find(|l| l.iter().any(|&c| !(c > 0.0 && c.is_finite()))) {
        return Err(Error::Domain(format!("illuminant must be positive, got {l:?}")));
    }
    let (r, g): (Vec<f64>, Vec<f64>) = illuminants.iter().map(|&l| rg_chromaticity(l)).unzip();
    let a = DMatrix::from_fn(r.len(), 4, |i, j| r[i].powi(j as i32));
    let svd = a.clone().svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::RankDeficient(format!(
            "rg design has condition {:.3e}; need 4 distinct r values",
            smax / smin
        )));
    }
    let x = svd
        .solve(&DVector::from_vec(g.clone()), 0.0)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let coeffs = [x[0], x[1], x[2], x[3]];
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cubic fit".into()));
    }
    Ok(PlanckianCubic {
        coeffs,
        sigma_r: sample_std(&r),
        sigma_g: sample_std(&g),
    })
}

pub const DEFAULT_LAMBDA_R: f64 = 0.7;
pub const DEFAULT_LAMBDA_G: f64 = 1.0;
pub const MAX_SAMPLING_TRIES: usize = 100;

/// Draws a target illuminant near the weighted mean r of `retrieved`
/// (weight, illuminant pairs) and near the cubic in g.
pub fn sample_illuminant(
    retrieved: &[(f64, Illuminant)],
    cubic: &PlanckianCubic,
    lambda_r: f64,
    lambda_g: f64,
    rng: &mut impl Rng,
) -> Result<Illuminant> {
    if retrieved.is_empty() {
        return Err(Error::Empty("retrieved illuminants"));
    }
    let total: f64 = retrieved.iter().map(|(w, _)| w).sum();
    if !((total - 1.0).abs() < 1e-9) {
        return Err(Error::Domain(format!("neighbor weights sum to {total}, not 1")));
    }
    let r_mean: f64 = retrieved.iter().map(|(w, l)| w * rg_chromaticity(l.rgb()).0).sum();
    for _ in 0..MAX_SAMPLING_TRIES {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let r = r_mean + lambda_r * cubic.sigma_r * x;
        let g = cubic.eval(r) + lambda_g * cubic.sigma_g * y;
        if let Ok(l) = Illuminant::new([r, g, 1.0 - r - g]) {
            return Ok(l);
        }
    }
    Err(Error::SamplingExhausted(MAX_SAMPLING_TRIES))
}

/// Temperature groups 250 K wide over 2500-7500 K.
pub const STRATUM_K: f64 = 250.0;

pub fn stratum(q: f64) -> usize {
    let groups = ((CCT_MAX - CCT_MIN) / STRATUM_K) as usize;
    (((q.clamp(CCT_MIN, CCT_MAX) - CCT_MIN) / STRATUM_K) as usize).min(groups - 1)
}

/// `count` source indices: each draw picks a non-empty temperature group
/// uniformly, then a member of it uniformly.
pub fn stratified_sources(temperatures: &[f64], count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if temperatures.is_empty() {
        return Err(Error::Empty("source set"));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &q) in temperatures.iter().enumerate() {
        groups.entry(stratum(q)).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    Ok((0..count)
        .map(|_| {
            let g = &groups[rng.random_range(0..groups.len())];
            g[rng.random_range(0..g.len())]
        })
        .collect())
}

/// Everything about a target camera the augmentation needs.
#[derive(Debug, Clone)]
pub struct TargetSet {
    pub profile: CameraProfile,
    pub metas: Vec<CaptureMeta>,
    pub temperatures: Vec<f64>,
    /// Normalized capture features, one per meta.
    pub features: Vec<[f64; 4]>,
    pub norms: FeatureNorms,
    pub cubic: PlanckianCubic,
}

impl TargetSet {
    pub fn new(profile: CameraProfile, metas: Vec<CaptureMeta>, cmf: &CmfTable) -> Result<Self> {
        profile.validate()?;
        if metas.is_empty() {
            return Err(Error::Empty("target capture set"));
        }
        let temperatures = metas
            .iter()
            .map(|m| Ok(estimate_cct(m.illuminant.rgb(), &profile, cmf)?.q))
            .collect::<Result<Vec<_>>>()?;
        let raw = metas
            .iter()
            .zip(&temperatures)
            .map(|(m, &q)| raw_capture_feature(m, q))
            .collect::<Result<Vec<_>>>()?;
        let norms = FeatureNorms::fit(&raw)?;
        let features = raw.into_iter().map(|f| norms.apply(f)).collect();
        let ills: Vec<[f64; 3]> = metas.iter().map(|m| m.illuminant.rgb()).collect();
        let cubic = fit_planckian_cubic(&ills)?;
        Ok(Self {
            profile,
            metas,
            temperatures,
            features,
            norms,
            cubic,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub k: usize,
    pub lambda_r: f64,
    pub lambda_g: f64,
    /// Crop area fraction range; `None` disables cropping.
    pub crop_area: Option<(f64, f64)>,
    /// Output size; `None` keeps the source size.
    pub output_size: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            lambda_r: DEFAULT_LAMBDA_R,
            lambda_g: DEFAULT_LAMBDA_G,
            crop_area: Some((0.8, 1.0)),
            output_size: None,
        }
    }
}

/// A crop covering a uniform fraction of the area in `[lo, hi]` with the
/// image's aspect ratio, at a uniform position.
pub fn random_crop(img: &RawImage, (lo, hi): (f64, f64), rng: &mut impl Rng) -> Result<RawImage> {
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("crop area range ({lo}, {hi}) must lie in (0, 1]")));
    }
    let s = rng.random_range(lo..=hi).sqrt();
    let (w, h) = (img.width(), img.height());
    let cw = ((w as f64 * s).round() as usize).clamp(1, w);
    let ch = ((h as f64 * s).round() as usize).clamp(1, h);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    img.crop(x0, y0, cw, ch)
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: RawImage,
    pub illuminant: Illuminant,
    pub source_temperature: f64,
    pub target_temperature: f64,
}

/// Re-renders a source capture as if taken by the target camera under an
/// illuminant sampled from the target's distribution.
pub fn augment_image(
    src: &RawImage,
    meta: &CaptureMeta,
    profile: &CameraProfile,
    target: &TargetSet,
    cfg: &AugmentConfig,
    cmf: &CmfTable,
    rng: &mut impl Rng,
) -> Result<Augmented> {
    let l = meta.illuminant.rgb();
    let source = estimate_cct(l, profile, cmf)?;
    let xyz = raw_to_xyz_with(src, l, &source.cst)?;
    let query = capture_feature(meta, source.q, &target.norms)?;
    let retrieved: Vec<(f64, Illuminant)> = knn_retrieve(query, &target.features, cfg.k)?
        .into_iter()
        .map(|n| (n.weight, target.metas[n.index].illuminant))
        .collect();
    let j = sample_illuminant(&retrieved, &target.cubic, cfg.lambda_r, cfg.lambda_g, rng)?;
    let q_t = estimate_cct(j.rgb(), &target.profile, cmf)?.q;
    let mut image = xyz_to_target_raw(&xyz, j.rgb(), &target.profile, q_t)?;
    if let Some(range) = cfg.crop_area {
        image = random_crop(&image, range, rng)?;
    }
    let (w, h) = cfg.output_size.unwrap_or((src.width(), src.height()));
    Ok(Augmented {
        image: image.resize(w, h)?,
        illuminant: j,
        source_temperature: source.q,
        target_temperature: q_t,
    })
}
