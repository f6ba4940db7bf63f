//! Datasets on disk, leave-one-camera-out splits, evaluation statistics,
//! the gray-world baseline and the repeated evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccc::Illuminant;
use crate::error::{Error, Result};
use crate::features::{assemble_feature_stack, chroma_variance, ChromaHistogram, HistogramConfig};
use crate::image::RawImage;
use crate::network::{infer_stacks, NetworkWeights};
use crate::sensor::{CameraProfile, CaptureMeta};
use crate::train::{angular_error_deg, draw_additional, LabeledSample};

pub const DEFAULT_RESOLUTION: (usize, usize) = (384, 256);

/// Capture settings of one image; see [`CaptureMeta`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureSettings {
    pub iso: f64,
    pub aperture: f64,
    pub exposure_time: f64,
    pub baseline_exposure: f64,
    pub baseline_noise: f64,
}

impl CaptureSettings {
    pub fn from_meta(m: &CaptureMeta) -> Self {
        Self {
            iso: m.iso,
            aperture: m.aperture,
            exposure_time: m.exposure_time,
            baseline_exposure: m.baseline_exposure,
            baseline_noise: m.baseline_noise,
        }
    }

    pub fn to_meta(self, illuminant: Illuminant, camera: &str) -> CaptureMeta {
        CaptureMeta {
            iso: self.iso,
            aperture: self.aperture,
            exposure_time: self.exposure_time,
            baseline_exposure: self.baseline_exposure,
            baseline_noise: self.baseline_noise,
            illuminant,
            camera: camera.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// Relative paths resolve against the manifest's directory.
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub camera: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    pub illuminant: Illuminant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<CaptureSettings>,
}

impl Entry {
    pub fn meta(&self) -> Option<CaptureMeta> {
        self.capture.map(|c| c.to_meta(self.illuminant, &self.camera))
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Camera {
        id: String,
        profile: CameraProfile,
    },
    Image {
        image: PathBuf,
        #[serde(default)]
        mask: Option<PathBuf>,
        camera: String,
        #[serde(default)]
        scene: Option<String>,
        illuminant: [f64; 3],
        #[serde(default)]
        capture: Option<CaptureSettings>,
    },
}

/// A manifest: camera profiles plus image entries. Images are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: BTreeMap<String, CameraProfile>,
    pub entries: Vec<Entry>,
    pub resolution: (usize, usize),
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            cameras: BTreeMap::new(),
            entries: Vec::new(),
            resolution: DEFAULT_RESOLUTION,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, DEFAULT_RESOLUTION)
    }

    /// Reads a manifest whose images will be delivered at `resolution`.
    pub fn load_with(path: impl AsRef<Path>, resolution: (usize, usize)) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut ds = Self {
            root,
            resolution,
            ..Self::new("")
        };
        let what = || format!("manifest {}", path.display());
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::format(what(), format!("line {}: {e}", i + 1)))?;
            match rec {
                Record::Camera { id, profile } => {
                    profile.validate()?;
                    if ds.cameras.insert(id.clone(), profile).is_some() {
                        return Err(Error::format(what(), format!("line {}: camera `{id}` defined twice", i + 1)));
                    }
                }
                Record::Image {
                    image,
                    mask,
                    camera,
                    scene,
                    illuminant,
                    capture,
                } => {
                    let norm = illuminant.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let illuminant = Illuminant::new(illuminant)
                        .map_err(|e| Error::format(what(), format!("line {}: {e}", i + 1)))?;
                    if (norm - 1.0).abs() > 1e-6 {
                        log::warn!("{}: line {}: illuminant norm {norm}, re-normalized", path.display(), i + 1);
                    }
                    ds.entries.push(Entry {
                        image,
                        mask,
                        camera,
                        scene,
                        illuminant,
                        capture,
                    });
                }
            }
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Checks that every camera has a profile and every file exists.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !self.cameras.contains_key(&e.camera) {
                return Err(Error::UnknownCamera(e.camera.clone()));
            }
            for p in std::iter::once(&e.image).chain(e.mask.as_ref()) {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::io(full, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        for (id, profile) in &self.cameras {
            let rec = Record::Camera {
                id: id.clone(),
                profile: profile.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("plain data")).map_err(io)?;
        }
        for e in &self.entries {
            let rec = Record::Image {
                image: e.image.clone(),
                mask: e.mask.clone(),
                camera: e.camera.clone(),
                scene: e.scene.clone(),
                illuminant: e.illuminant.rgb(),
                capture: e.capture,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("plain data")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Image `i`, masked and resized to the working resolution.
    pub fn image(&self, i: usize) -> Result<RawImage> {
        let e = self.entries.get(i).ok_or_else(|| Error::Shape(format!("no entry {i}")))?;
        let mask = e.mask.as_ref().map(|m| self.root.join(m));
        let img = RawImage::load(&self.root.join(&e.image), mask.as_deref())?;
        img.resize(self.resolution.0, self.resolution.1)
    }

    pub fn camera_ids(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.camera.as_str()).collect()
    }

    /// Feature stacks and labels for the given entries.
    pub fn labeled(&self, indices: &[usize], hist: &HistogramConfig) -> Result<Vec<LabeledSample>> {
        indices
            .iter()
            .map(|&i| {
                let e = &self.entries[i];
                Ok(LabeledSample {
                    stack: assemble_feature_stack(&self.image(i)?, hist)?,
                    illuminant: e.illuminant,
                    camera: e.camera.clone(),
                })
            })
            .collect()
    }
}

/// Indices of `test_camera`'s images, and of every other image that shares
/// no scene with them.
pub fn leave_one_camera_out(ds: &Dataset, test_camera: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let cams = ds.camera_ids();
    if !cams.contains(test_camera) {
        return Err(Error::UnknownCamera(test_camera.to_string()));
    }
    if cams.len() < 2 {
        return Err(Error::Config("leave-one-camera-out needs at least two cameras".into()));
    }
    let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.entries[i].camera == test_camera).collect();
    let scenes: BTreeSet<&str> = test.iter().filter_map(|&i| ds.entries[i].scene.as_deref()).collect();
    let train = (0..ds.len())
        .filter(|&i| {
            let e = &ds.entries[i];
            e.camera != test_camera && !e.scene.as_deref().is_some_and(|s| scenes.contains(s))
        })
        .collect();
    Ok((train, test))
}

/// Summary statistics of angular errors in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
}

impl Stats {
    fn map2(a: &Self, b: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            mean: f(a.mean, b.mean),
            median: f(a.median, b.median),
            trimean: f(a.trimean, b.trimean),
            best25: f(a.best25, b.best25),
            worst25: f(a.worst25, b.worst25),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::map2(self, self, |a, _| f(a))
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mean {:.3} median {:.3} trimean {:.3} best25 {:.3} worst25 {:.3}",
            self.mean, self.median, self.trimean, self.best25, self.worst25
        )
    }
}

fn median_sorted(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean, median, Tukey trimean (hinges as quartiles) and the means of the
/// smallest and largest `ceil(n/4)` errors.
pub fn eval_stats(errors: &[f64]) -> Result<Stats> {
    if errors.is_empty() {
        return Err(Error::Empty("error list"));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite()) {
        return Err(Error::NonFinite(format!("angular error {e}")));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let half = n.div_ceil(2);
    let q = n.div_ceil(4);
    let median = median_sorted(&s);
    Ok(Stats {
        mean: mean(&s),
        median,
        trimean: (median_sorted(&s[..half]) + 2.0 * median + median_sorted(&s[n - half..])) / 4.0,
        best25: mean(&s[..q]),
        worst25: mean(&s[n - q..]),
    })
}

/// Normalized mean color of the masked-in pixels.
pub fn gray_world(img: &RawImage) -> Result<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut k = 0usize;
    for p in img.valid_pixels() {
        for c in 0..3 {
            sum[c] += p[c];
        }
        k += 1;
    }
    if k == 0 {
        return Err(Error::Empty("valid pixels"));
    }
    let norm = sum.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Domain("gray world of a black image".into()));
    }
    Ok(sum.map(|c| c / norm))
}

/// An evaluation image with its precomputed features.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image: RawImage,
    pub stack: ChromaHistogram,
    pub illuminant: Illuminant,
    pub camera: String,
    pub chroma_variance: f64,
}

impl EvalSample {
    pub fn new(image: RawImage, illuminant: Illuminant, camera: &str, hist: &HistogramConfig) -> Result<Self> {
        Ok(Self {
            stack: assemble_feature_stack(&image, hist)?,
            chroma_variance: chroma_variance(&image),
            image,
            illuminant,
            camera: camera.to_string(),
        })
    }
}

pub trait Estimator: Sync {
    fn estimate(&self, query: &EvalSample, additional: &[&EvalSample]) -> Result<[f64; 3]>;
}

impl Estimator for NetworkWeights {
    fn estimate(&self, query: &EvalSample, additional: &[&EvalSample]) -> Result<[f64; 3]> {
        let stacks: Vec<&ChromaHistogram> = additional.iter().map(|s| &s.stack).collect();
        Ok(infer_stacks(&query.stack, &stacks, self)?.illuminant.rgb())
    }
}

pub struct GrayWorld;

impl Estimator for GrayWorld {
    fn estimate(&self, query: &EvalSample, _: &[&EvalSample]) -> Result<[f64; 3]> {
        gray_world(&query.image)
    }
}

/// Where additional images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Any other image of the query's camera.
    Random,
    /// The query camera's most colorful images.
    Vivid,
    /// The query camera's least colorful images.
    Dull,
    /// Images of a different camera.
    CrossCamera,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "vivid" => Ok(Self::Vivid),
            "dull" => Ok(Self::Dull),
            "cross-camera" => Ok(Self::CrossCamera),
            _ => Err(Error::Config(format!("unknown policy `{s}` (random|vivid|dull|cross-camera)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Images per estimate, the query included.
    pub m: usize,
    pub repeats: usize,
    pub policy: Policy,
    /// Candidate pool size of the vivid and dull policies.
    pub pool: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m: 9,
            repeats: 10,
            policy: Policy::Random,
            pool: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<Stats>,
    pub mean: Stats,
    /// Sample standard deviation across runs; zero for a single run.
    pub std: Stats,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "runs: {}", self.runs.len())?;
        writeln!(f, "mean: {}", self.mean)?;
        write!(f, "std:  {}", self.std)
    }
}

fn by_camera(samples: &[EvalSample]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        m.entry(s.camera.as_str()).or_default().push(i);
    }
    m
}

/// Candidate additional images for each query under `policy`, as indices
/// into `queries` (or into `foreign` for the cross-camera policy).
fn candidate_pools(queries: &[EvalSample], foreign: &[EvalSample], cfg: &EvalConfig) -> Result<Vec<Vec<usize>>> {
    let cams = by_camera(queries);
    let ranked: BTreeMap<&str, Vec<usize>> = cams
        .iter()
        .map(|(&c, idx)| {
            let mut idx = idx.clone();
            idx.sort_by(|&a, &b| queries[b].chroma_variance.total_cmp(&queries[a].chroma_variance).then(a.cmp(&b)));
            (c, idx)
        })
        .collect();
    queries
        .iter()
        .map(|q| match cfg.policy {
            Policy::Random => Ok(cams[q.camera.as_str()].clone()),
            Policy::Vivid => Ok(ranked[q.camera.as_str()].iter().copied().take(cfg.pool).collect()),
            Policy::Dull => Ok(ranked[q.camera.as_str()].iter().rev().copied().take(cfg.pool).collect()),
            Policy::CrossCamera => {
                let pool: Vec<usize> = (0..foreign.len()).filter(|&i| foreign[i].camera != q.camera).collect();
                if pool.is_empty() && cfg.m > 1 {
                    return Err(Error::Empty("images from other cameras"));
                }
                Ok(pool)
            }
        })
        .collect()
}

pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Evaluates `est` on every query `cfg.repeats` times, each time with fresh
/// additional images drawn per `cfg.policy`. Draws happen serially, so the
/// report depends only on the rng state.
pub fn run_eval(est: &impl Estimator, queries: &[EvalSample], foreign: &[EvalSample], cfg: &EvalConfig, rng: &mut impl Rng) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if cfg.repeats == 0 || cfg.m == 0 {
        return Err(Error::Config("repeats and m must be positive".into()));
    }
    let pools = candidate_pools(queries, foreign, cfg)?;
    let mut runs = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let draws: Vec<(usize, Vec<usize>)> = pools
            .iter()
            .enumerate()
            .map(|(qi, pool)| {
                let extra = match cfg.policy {
                    Policy::CrossCamera => {
                        let mut p = pool.clone();
                        p.shuffle(rng);
                        p.iter().copied().cycle().take(cfg.m - 1).collect()
                    }
                    _ => draw_additional(qi, pool, cfg.m, rng),
                };
                (qi, extra)
            })
            .collect();
        let errors = parallel_map(&draws, |(qi, extra)| {
            let src = if cfg.policy == Policy::CrossCamera { foreign } else { queries };
            let add: Vec<&EvalSample> = extra.iter().map(|&i| &src[i]).collect();
            let q = &queries[*qi];
            angular_error_deg(est.estimate(q, &add)?, q.illuminant.rgb())
        })?;
        runs.push(eval_stats(&errors)?);
    }
    let k = runs.len() as f64;
    let mean = runs.iter().skip(1).fold(runs[0], |a, b| Stats::map2(&a, b, |x, y| x + y)).map(|x| x / k);
    let std = if runs.len() < 2 {
        mean.map(|_| 0.0)
    } else {
        runs.iter()
            .map(|r| Stats::map2(r, &mean, |x, m| (x - m).powi(2)))
            .fold(mean.map(|_| 0.0), |a, b| Stats::map2(&a, &b, |x, y| x + y))
            .map(|x| (x / (k - 1.0)).sqrt())
    };
    Ok(EvalReport { runs, mean, std })
}
