//! Camera sensor simulation: blackbody illuminants, color space transforms
//! between a camera's raw space and CIE XYZ, correlated color temperature,
//! and the pieces of the raw-to-raw augmentation pipeline.
//!
//! Color space transforms (CSTs) are stored in the raw -> XYZ direction.

mod augment;
mod synthetic;

pub use augment::*;
pub use synthetic::*;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RawImage;
use crate::train::angular_error;

/// First radiation constant, W m^2.
pub const PLANCK_F1: f64 = 3.741832e-16;
/// Second radiation constant, m K.
pub const PLANCK_F2: f64 = 1.4388e-2;

pub const PLANCK_Q_RANGE: (f64, f64) = (500.0, 20_000.0);
pub const VISIBLE_RANGE_M: (f64, f64) = (380e-9, 780e-9);

/// Search range and step of [`estimate_cct`], in kelvin.
pub const CCT_MIN: f64 = 2500.0;
pub const CCT_MAX: f64 = 7500.0;
pub const CCT_STEP: f64 = 10.0;

/// Spectral power of a blackbody at temperature `q` (K) and wavelength
/// `lambda` (m).
pub fn planck_spd(q: f64, lambda: f64) -> Result<f64> {
    if !(PLANCK_Q_RANGE.0..=PLANCK_Q_RANGE.1).contains(&q) {
        return Err(Error::Domain(format!("temperature {q} K outside {PLANCK_Q_RANGE:?}")));
    }
    // wavelengths built as i * step pick up a few ulps
    let (lo, hi) = VISIBLE_RANGE_M;
    if !(lo * (1.0 - 1e-12)..=hi * (1.0 + 1e-12)).contains(&lambda) {
        return Err(Error::Domain(format!("wavelength {lambda} m outside the visible range")));
    }
    Ok(PLANCK_F1 * lambda.powi(-5) / (PLANCK_F2 / (lambda * q)).exp_m1())
}

/// Color matching functions sampled at a fixed wavelength step.
#[derive(Debug, Clone, PartialEq)]
pub struct CmfTable {
    start_nm: f64,
    step_nm: f64,
    bars: Vec<[f64; 3]>,
}

const CIE1931_2DEG_5NM: &str = include_str!("../../data/cie1931_2deg_5nm.csv");

impl CmfTable {
    /// The CIE 1931 2-degree observer, 380-780 nm at 5 nm.
    pub fn cie1931() -> Self {
        Self::parse(CIE1931_2DEG_5NM).expect("embedded CMF table is well formed")
    }

    /// Parses `wavelength_nm,x,y,z` rows; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("CMF table", msg);
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields, got {}", lineno + 1, vals.len())));
            }
            if vals.iter().any(|v| !v.is_finite()) || vals[1..].iter().any(|&v| v < 0.0) {
                return Err(bad(format!("line {}: values must be finite and non-negative", lineno + 1)));
            }
            rows.push(vals);
        }
        if rows.len() < 2 {
            return Err(bad("need at least two rows".into()));
        }
        let start_nm = rows[0][0];
        let step_nm = rows[1][0] - rows[0][0];
        if !(step_nm > 0.0) {
            return Err(bad("wavelengths must increase".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if (r[0] - (start_nm + i as f64 * step_nm)).abs() > 1e-9 * step_nm.max(1.0) {
                return Err(bad(format!("wavelength {} breaks the fixed {step_nm} nm step", r[0])));
            }
        }
        Ok(Self {
            start_nm,
            step_nm,
            bars: rows.iter().map(|r| [r[1], r[2], r[3]]).collect(),
        })
    }

    pub fn step_nm(&self) -> f64 {
        self.step_nm
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    /// `(wavelength in nm, [xbar, ybar, zbar])` pairs.
    pub fn samples(&self) -> impl Iterator<Item = (f64, [f64; 3])> + '_ {
        self.bars
            .iter()
            .enumerate()
            .map(|(i, b)| (self.start_nm + i as f64 * self.step_nm, *b))
    }
}

/// Chromaticity `(x, y, z)` of a blackbody at `q` kelvin; sums to one.
pub fn temp_to_xyz(q: f64, cmf: &CmfTable) -> Result<[f64; 3]> {
    let dl = cmf.step_nm * 1e-9;
    let mut xyz = [0.0; 3];
    for (nm, bar) in cmf.samples() {
        let s = planck_spd(q, nm * 1e-9)?;
        for c in 0..3 {
            xyz[c] += dl * bar[c] * s;
        }
    }
    let total: f64 = xyz.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Domain(format!("degenerate tristimulus at {q} K")));
    }
    Ok(xyz.map(|c| c / total))
}

/// A camera's two calibrated raw -> XYZ transforms and their temperatures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraProfile {
    pub c1: [[f64; 3]; 3],
    pub c2: [[f64; 3]; 3],
    pub q1: f64,
    pub q2: f64,
}

pub(crate) fn to_matrix(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

pub(crate) fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

pub(crate) fn is_invertible(m: &Matrix3<f64>) -> bool {
    let scale = m.iter().map(|v| v.abs()).fold(0.0, f64::max);
    scale > 0.0 && m.determinant().abs() > 1e-12 * scale.powi(3)
}

impl CameraProfile {
    pub fn new(c1: Matrix3<f64>, c2: Matrix3<f64>, q1: f64, q2: f64) -> Result<Self> {
        let p = Self {
            c1: from_matrix(&c1),
            c2: from_matrix(&c2),
            q1,
            q2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.q1 > 0.0 && self.q1 < self.q2 && self.q2.is_finite()) {
            return Err(Error::Config(format!(
                "calibration temperatures must satisfy 0 < q1 < q2, got {} and {}",
                self.q1, self.q2
            )));
        }
        for m in [&self.c1, &self.c2] {
            let m = to_matrix(m);
            if m.iter().any(|v| !v.is_finite()) || !is_invertible(&m) {
                return Err(Error::Singular("camera profile CST"));
            }
        }
        Ok(())
    }

    pub fn c1(&self) -> Matrix3<f64> {
        to_matrix(&self.c1)
    }

    pub fn c2(&self) -> Matrix3<f64> {
        to_matrix(&self.c2)
    }
}

/// Weight of `C1` at temperature `q`: one at `q1`, zero at `q2`, linear in
/// reciprocal temperature and clamped outside the calibrated range.
pub fn cst_alpha(q1: f64, q2: f64, q: f64) -> Result<f64> {
    if q1 == q2 {
        return Err(Error::Config("calibration temperatures coincide".into()));
    }
    if !(q > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {q}")));
    }
    Ok(((1.0 / q - 1.0 / q2) / (1.0 / q1 - 1.0 / q2)).clamp(0.0, 1.0))
}

/// The raw -> XYZ transform at temperature `q`.
pub fn interp_cst(profile: &CameraProfile, q: f64) -> Result<Matrix3<f64>> {
    let a = cst_alpha(profile.q1, profile.q2, q)?;
    Ok(profile.c1() * a + profile.c2() * (1.0 - a))
}

fn inverse(m: &Matrix3<f64>, what: &'static str) -> Result<Matrix3<f64>> {
    if !is_invertible(m) {
        return Err(Error::Singular(what));
    }
    m.try_inverse().ok_or(Error::Singular(what))
}

/// Raw illuminant of a blackbody at `q` as seen through `profile`, not
/// normalized.
pub fn planckian_raw(q: f64, profile: &CameraProfile, cmf: &CmfTable) -> Result<[f64; 3]> {
    let m = inverse(&interp_cst(profile, q)?, "interpolated CST")?;
    let raw = m * Vector3::from(temp_to_xyz(q, cmf)?);
    Ok([raw[0], raw[1], raw[2]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CctEstimate {
    pub q: f64,
    pub cst: Matrix3<f64>,
}

/// Index of the first minimum; NaNs never win.
fn first_min(xs: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs.into_iter().enumerate().filter(|(_, x)| !x.is_nan()) {
        if best.is_none_or(|(_, b)| x < b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Blackbody temperature on a 10 K grid over 2500-7500 K whose raw
/// illuminant through `profile` is angularly closest to `l_raw`. Ties go to
/// the lower temperature.
pub fn estimate_cct(l_raw: [f64; 3], profile: &CameraProfile, cmf: &CmfTable) -> Result<CctEstimate> {
    if l_raw.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::Domain(format!("raw illuminant must be positive, got {l_raw:?}")));
    }
    let steps = ((CCT_MAX - CCT_MIN) / CCT_STEP).round() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| CCT_MIN + i as f64 * CCT_STEP).collect();
    let errors = grid
        .iter()
        .map(|&q| {
            let cand = planckian_raw(q, profile, cmf)?;
            // a candidate with no length has no direction to compare
            Ok(angular_error(cand, l_raw).unwrap_or(f64::INFINITY))
        })
        .collect::<Result<Vec<f64>>>()?;
    let i = first_min(errors).expect("grid is non-empty");
    Ok(CctEstimate {
        q: grid[i],
        cst: interp_cst(profile, grid[i])?,
    })
}

/// Green-preserving white-balance gains `(g/r, 1, g/b)`.
pub fn white_balance_gains(l: [f64; 3]) -> Result<[f64; 3]> {
    if l.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
        return Err(Error::Domain(format!("illuminant must be positive, got {l:?}")));
    }
    Ok([l[1] / l[0], 1.0, l[1] / l[2]])
}

/// Per-pixel XYZ values. Unlike raw images these may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct XyzImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

fn apply(m: &Matrix3<f64>, p: [f64; 3]) -> [f64; 3] {
    let v = m * Vector3::from(p);
    [v[0], v[1], v[2]]
}

/// White-balances `img` for `l_raw` and maps it through `cst`.
pub fn raw_to_xyz_with(img: &RawImage, l_raw: [f64; 3], cst: &Matrix3<f64>) -> Result<XyzImage> {
    let m = cst * Matrix3::from_diagonal(&Vector3::from(white_balance_gains(l_raw)?));
    Ok(XyzImage {
        width: img.width(),
        height: img.height(),
        pixels: img.pixels().iter().map(|&p| apply(&m, p)).collect(),
        mask: img.mask().to_vec(),
    })
}

/// [`raw_to_xyz_with`] at the CST of the estimated correlated color
/// temperature of `l_raw`.
pub fn raw_to_xyz(img: &RawImage, l_raw: [f64; 3], profile: &CameraProfile, cmf: &CmfTable) -> Result<(XyzImage, CctEstimate)> {
    let cct = estimate_cct(l_raw, profile, cmf)?;
    Ok((raw_to_xyz_with(img, l_raw, &cct.cst)?, cct))
}

/// Maps XYZ pixels into the raw space of `profile` at temperature `q` and
/// casts them with `target`. Components that come out negative (out of the
/// sensor gamut) are clipped to zero.
pub fn xyz_to_target_raw(xyz: &XyzImage, target: [f64; 3], profile: &CameraProfile, q: f64) -> Result<RawImage> {
    let inv = inverse(&interp_cst(profile, q)?, "target CST")?;
    let g = white_balance_gains(target)?;
    let cast = Matrix3::from_diagonal(&Vector3::new(1.0 / g[0], 1.0, 1.0 / g[2]));
    let m = cast * inv;
    let pixels = xyz.pixels.iter().map(|&p| apply(&m, p).map(|c| c.max(0.0))).collect();
    RawImage::new(xyz.width, xyz.height, pixels)?.with_mask(xyz.mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_min_prefers_earliest_tie() {
        assert_eq!(first_min([3.0, 1.0, 1.0, 2.0]), Some(1));
        assert_eq!(first_min([f64::NAN, 2.0, 2.0]), Some(1));
        assert_eq!(first_min(std::iter::empty()), None);
    }

    #[test]
    fn embedded_table_spans_the_visible_range() {
        let t = CmfTable::cie1931();
        assert_eq!(t.len(), 81);
        assert_eq!(t.step_nm(), 5.0);
        let (first, _) = t.samples().next().unwrap();
        let (last, _) = t.samples().last().unwrap();
        assert_eq!((first, last), (380.0, 780.0));
    }

    #[test]
    fn parse_rejects_bad_tables() {
        assert!(CmfTable::parse("380,0,0,0\n").is_err());
        assert!(CmfTable::parse("380,0,0,0\n385,0,0\n").is_err());
        assert!(CmfTable::parse("380,0,0,0\n385,0,-1,0\n").is_err());
        assert!(CmfTable::parse("380,0,0,0\n385,0,0,0\n395,0,0,0\n").is_err());
        assert!(CmfTable::parse("385,0,0,0\n380,0,0,0\n").is_err());
    }

    #[test]
    fn alpha_endpoints_and_clamp() {
        assert_eq!(cst_alpha(2856.0, 6504.0, 2856.0).unwrap(), 1.0);
        assert_eq!(cst_alpha(2856.0, 6504.0, 6504.0).unwrap(), 0.0);
        assert_eq!(cst_alpha(2856.0, 6504.0, 2000.0).unwrap(), 1.0);
        assert_eq!(cst_alpha(2856.0, 6504.0, 9000.0).unwrap(), 0.0);
        assert!(cst_alpha(5000.0, 5000.0, 4000.0).is_err());
        assert!(cst_alpha(2856.0, 6504.0, 0.0).is_err());
    }
}
