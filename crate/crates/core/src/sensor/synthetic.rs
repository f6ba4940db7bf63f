//! Virtual cameras and procedurally generated scenes for desk-scale
//! cross-camera experiments.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{from_matrix, is_invertible, planckian_raw, CameraProfile, CmfTable, CaptureMeta, CCT_MAX, CCT_MIN};
use crate::ccc::Illuminant;
use crate::error::{Error, Result};
use crate::image::RawImage;

/// Linear sRGB (D65) to XYZ.
pub const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// Standard illuminant A and D65 correlated color temperatures.
pub const REFERENCE_Q1: f64 = 2856.0;
pub const REFERENCE_Q2: f64 = 6504.0;

fn srgb() -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| SRGB_TO_XYZ[r][c])
}

/// Scales rows so that equal-energy white maps to `(1, 1, 1)`.
fn balance_rows(m: Matrix3<f64>) -> Option<Matrix3<f64>> {
    let sums = m * Vector3::repeat(1.0);
    if sums.iter().any(|&s| !(s > 0.0)) {
        return None;
    }
    Some(Matrix3::from_diagonal(&sums.map(|s| 1.0 / s)) * m)
}

/// XYZ to raw of a sensor `(I + p) * M^-1 * diag(tint)`, balanced so that
/// equal-energy white reads neutral; returns its inverse as the CST.
fn sensor_cst(p: Matrix3<f64>, tint: [f64; 3]) -> Option<Matrix3<f64>> {
    let inv = srgb().try_inverse()?;
    let sensor = balance_rows((Matrix3::identity() + p) * inv * Matrix3::from_diagonal(&Vector3::from(tint)))?;
    if !is_invertible(&sensor) {
        return None;
    }
    let cst = sensor.try_inverse()?;
    is_invertible(&cst).then_some(cst)
}

/// A camera whose raw space is linear sRGB balanced to equal-energy white,
/// at both calibration points.
pub fn reference_profile() -> CameraProfile {
    let cst = from_matrix(&sensor_cst(Matrix3::zeros(), [1.0; 3]).expect("sRGB is invertible"));
    CameraProfile {
        c1: cst,
        c2: cst,
        q1: REFERENCE_Q1,
        q2: REFERENCE_Q2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCameraSpec {
    /// Multipliers on X, Y and Z ahead of the sensor.
    pub tint: [f64; 3],
    /// Standard deviation of the entries of the random matrix perturbation.
    pub perturbation: f64,
    /// Number of illuminants in the population.
    pub population: usize,
    /// Standard deviation of the per-channel log jitter that moves
    /// illuminants off the blackbody locus.
    pub off_locus: f64,
    /// Temperature range of the light population, in kelvin.
    pub temperatures: (f64, f64),
}

impl Default for SyntheticCameraSpec {
    fn default() -> Self {
        Self {
            tint: [1.0; 3],
            perturbation: 0.0,
            population: 100,
            off_locus: 0.0,
            temperatures: (CCT_MIN, CCT_MAX),
        }
    }
}

impl SyntheticCameraSpec {
    /// X and Z tints log-uniform in `[1/1.15, 1.15]` and a light population
    /// confined to a random temperature window of width `window`.
    pub fn random(perturbation: f64, population: usize, off_locus: f64, window: f64, rng: &mut impl Rng) -> Self {
        let span = 1.15f64.ln();
        let mut tint = || rng.random_range(-span..span).exp();
        let tint = [tint(), 1.0, tint()];
        let window = window.clamp(0.0, CCT_MAX - CCT_MIN);
        let lo = rng.random_range(CCT_MIN..=CCT_MAX - window);
        Self {
            tint,
            perturbation,
            population,
            off_locus,
            temperatures: (lo, lo + window),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.temperatures;
        let ok = self.tint.iter().all(|&t| t > 0.0 && t.is_finite())
            && self.perturbation >= 0.0
            && self.off_locus >= 0.0
            && self.population > 0
            && (CCT_MIN..=CCT_MAX).contains(&lo)
            && (lo..=CCT_MAX).contains(&hi);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera spec {self:?}")))
        }
    }
}

/// A light in a camera's population: its temperature, the off-locus
/// multiplier, and the resulting raw illuminant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub q: f64,
    pub jitter: [f64; 3],
    pub illuminant: Illuminant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCamera {
    pub profile: CameraProfile,
    pub lights: Vec<Light>,
}

const MAX_TRIES: usize = 100;

/// Whether every blackbody over the working range reads positive raw.
fn physical(profile: &CameraProfile, cmf: &CmfTable) -> Result<bool> {
    let mut q = CCT_MIN;
    while q <= CCT_MAX {
        if planckian_raw(q, profile, cmf)?.iter().any(|&c| !(c > 0.0)) {
            return Ok(false);
        }
        q += 250.0;
    }
    Ok(true)
}

fn perturbed_profile(spec: &SyntheticCameraSpec, cmf: &CmfTable, rng: &mut impl Rng) -> Result<CameraProfile> {
    let noise = Normal::new(0.0, spec.perturbation).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = || sensor_cst(Matrix3::from_fn(|_, _| noise.sample(rng)), spec.tint);
    for _ in 0..MAX_TRIES {
        let (Some(c1), Some(c2)) = (draw(), draw()) else {
            continue;
        };
        let profile = CameraProfile::new(c1, c2, REFERENCE_Q1, REFERENCE_Q2)?;
        if physical(&profile, cmf)? {
            return Ok(profile);
        }
    }
    Err(Error::Singular("synthetic camera perturbation"))
}

/// A profile around the sRGB colorimetry plus a population of lights with
/// temperatures uniform over the spec's range. Sensors are balanced so that
/// equal-energy white reads neutral in every camera.
pub fn make_synthetic_camera(spec: &SyntheticCameraSpec, cmf: &CmfTable, rng: &mut impl Rng) -> Result<SyntheticCamera> {
    spec.validate()?;
    let profile = perturbed_profile(spec, cmf, rng)?;
    let jitter = Normal::new(0.0, spec.off_locus).map_err(|e| Error::Config(e.to_string()))?;
    let (lo, hi) = spec.temperatures;
    let mut lights = Vec::with_capacity(spec.population);
    let mut rejected = 0;
    while lights.len() < spec.population {
        let q = rng.random_range(lo..=hi);
        let j: [f64; 3] = std::array::from_fn(|_| jitter.sample(rng).exp());
        let raw = planckian_raw(q, &profile, cmf)?;
        match Illuminant::new(std::array::from_fn(|c| raw[c] * j[c])) {
            Ok(illuminant) => lights.push(Light { q, jitter: j, illuminant }),
            Err(_) => {
                rejected += 1;
                if rejected >= MAX_TRIES {
                    return Err(Error::SamplingExhausted(rejected));
                }
            }
        }
    }
    Ok(SyntheticCamera { profile, lights })
}

/// Linear sRGB reflectances in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub reflectance: Vec<[f64; 3]>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Scene {
    /// A scene with a dominant hue: a tinted background, rectangles that are
    /// mostly variations of that hue, an occasional gray patch, smooth
    /// shading and fine texture. Like outdoor imagery, dominant hues are
    /// mostly foliage and earth tones, so scene averages are not gray.
    pub fn random(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let hue: f64 = if rng.random_bool(0.75) {
            Normal::new(0.2, 0.07).expect("valid").sample(rng)
        } else {
            rng.random()
        };
        let sat = rng.random_range(0.2..0.7);
        let mut refl = vec![hsv(hue, sat, rng.random_range(0.4..0.9)); width * height];
        let patches = rng.random_range(4..12);
        for k in 0..patches {
            let color = if k == 0 && rng.random_bool(0.3) {
                [rng.random_range(0.3..0.9); 3]
            } else if rng.random_bool(0.65) {
                hsv(hue + rng.random_range(-0.08..0.08), (sat + rng.random_range(-0.2..0.2)).clamp(0.05, 1.0), rng.random_range(0.2..1.0))
            } else {
                hsv(rng.random(), rng.random_range(0.1..0.9), rng.random_range(0.2..1.0))
            };
            let w = rng.random_range(width / 8..=width / 2).max(1);
            let h = rng.random_range(height / 8..=height / 2).max(1);
            let x0 = rng.random_range(0..=width - w);
            let y0 = rng.random_range(0..=height - h);
            for y in y0..y0 + h {
                refl[y * width + x0..y * width + x0 + w].fill(color);
            }
        }
        let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        for y in 0..height {
            for x in 0..width {
                let shade = 0.75 + gx * (x as f64 / width as f64 - 0.5) + gy * (y as f64 / height as f64 - 0.5);
                let tex = 1.0 + 0.05 * (rng.random::<f64>() - 0.5);
                let p = &mut refl[y * width + x];
                *p = p.map(|c| (c * shade * tex).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            reflectance: refl,
        }
    }
}

/// Renders `scene` through `profile` under `light`, scaled by `exposure`.
/// A perfect white reflector renders to a multiple of the light's raw
/// illuminant. Out-of-gamut negative responses clip to zero.
pub fn render_scene(scene: &Scene, profile: &CameraProfile, light: &Light, exposure: f64, cmf: &CmfTable) -> Result<RawImage> {
    let m = srgb();
    let xyz = Vector3::from(super::temp_to_xyz(light.q, cmf)?);
    let white = m.try_inverse().expect("sRGB matrix is invertible") * xyz;
    let cst = super::interp_cst(profile, light.q)?;
    let to_raw = Matrix3::from_diagonal(&Vector3::from(light.jitter))
        * cst.try_inverse().ok_or(Error::Singular("scene CST"))?
        * m
        * Matrix3::from_diagonal(&white);
    let pixels = scene
        .reflectance
        .iter()
        .map(|&rho| {
            let v = to_raw * Vector3::from(rho) * exposure;
            [v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)]
        })
        .collect();
    RawImage::new(scene.width, scene.height, pixels)
}

/// Plausible random capture settings for an image lit by `illuminant`.
pub fn random_capture_meta(camera: &str, illuminant: Illuminant, rng: &mut impl Rng) -> CaptureMeta {
    const ISO: [f64; 6] = [100.0, 200.0, 400.0, 800.0, 1600.0, 3200.0];
    CaptureMeta {
        iso: ISO[rng.random_range(0..ISO.len())],
        aperture: rng.random_range(1.8..16.0),
        exposure_time: 2f64.powf(rng.random_range(-10.0..-3.0)),
        baseline_exposure: rng.random_range(-0.5..1.0),
        baseline_noise: rng.random_range(0.5..1.5),
        illuminant,
        camera: camera.to_string(),
    }
}
