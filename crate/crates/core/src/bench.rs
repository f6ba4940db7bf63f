//! A desk-scale cross-camera benchmark on virtual cameras: train on
//! augmented images from a few cameras, test on a camera never seen in
//! training.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ccc::Illuminant;
use crate::error::{Error, Result};
use crate::features::{assemble_feature_stack, HistogramConfig};
use crate::harness::{parallel_map, run_eval, EvalConfig, EvalReport, EvalSample, GrayWorld, Policy};
use crate::image::RawImage;
use crate::network::{ArchitectureConfig, NetworkWeights};
use crate::sensor::{
    augment_image, make_synthetic_camera, random_capture_meta, render_scene, stratified_sources, AugmentConfig, CaptureMeta, CmfTable, Scene,
    SyntheticCamera, SyntheticCameraSpec, TargetSet,
};
use crate::train::{train, EpochMetrics, LabeledSample, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub train_cameras: usize,
    /// Rendered captures per training camera, used as augmentation sources
    /// and as each camera's capture set.
    pub sources_per_camera: usize,
    pub augmented: usize,
    pub test_images: usize,
    pub image_size: (usize, usize),
    pub perturbation: f64,
    pub off_locus: f64,
    pub population: usize,
    /// Width in kelvin of each camera's light temperature range, placed at
    /// random within 2500-7500 K.
    pub temperature_window: f64,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let n = 32;
        let arch = ArchitectureConfig {
            n,
            m: 9,
            depth: 2,
            base_channels: 8,
            convs_per_block: 1,
            emit_gain: false,
            leaky_slope: 0.2,
        };
        let hist = HistogramConfig::new(n, -2.85, 2.85).expect("valid bounds");
        Self {
            seed: 0,
            train_cameras: 3,
            sources_per_camera: 60,
            augmented: 500,
            test_images: 200,
            image_size: (64, 48),
            perturbation: 0.1,
            off_locus: 0.02,
            population: 100,
            temperature_window: 5000.0,
            augment: AugmentConfig {
                output_size: Some((64, 48)),
                ..AugmentConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                lr: 1e-2,
                batch_sizes: vec![16, 32],
                batch_switch_epochs: vec![21],
                arch,
                hist,
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                m: 9,
                repeats: 10,
                policy: Policy::Random,
                pool: 20,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Evaluated with `eval.m` images per estimate.
    pub c5: EvalReport,
    /// The same network with the query alone.
    pub c5_single: EvalReport,
    pub gray_world: EvalReport,
    pub train_images: usize,
    /// `(epoch, train error, validation error)`, errors in degrees.
    pub epochs: Vec<(usize, f64, f64)>,
}

struct Capture {
    image: RawImage,
    meta: CaptureMeta,
    q: f64,
}

/// Whether `img` and its label fit on the histogram grid.
fn representable(img: &RawImage, l: Illuminant, hist: &HistogramConfig) -> Result<bool> {
    let (u, v) = l.uv();
    if hist.bin_of(u).is_none() || hist.bin_of(v).is_none() {
        return Ok(false);
    }
    match assemble_feature_stack(img, hist) {
        Ok(_) => Ok(true),
        Err(Error::EmptyHistogram) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Renders `count` captures, redrawing scene and light for any capture
/// that is not representable.
fn render_captures(
    cam: &SyntheticCamera,
    name: &str,
    count: usize,
    size: (usize, usize),
    hist: &HistogramConfig,
    cmf: &CmfTable,
    rng: &mut impl Rng,
) -> Result<Vec<Capture>> {
    (0..count)
        .map(|_| {
            for _ in 0..MAX_REDRAWS {
                let scene = Scene::random(size.0, size.1, rng);
                let light = cam.lights[rng.random_range(0..cam.lights.len())];
                let image = render_scene(&scene, &cam.profile, &light, rng.random_range(0.5..1.0), cmf)?;
                if representable(&image, light.illuminant, hist)? {
                    return Ok(Capture {
                        image,
                        meta: random_capture_meta(name, light.illuminant, rng),
                        q: light.q,
                    });
                }
            }
            Err(Error::SamplingExhausted(MAX_REDRAWS))
        })
        .collect()
}

const MAX_REDRAWS: usize = 20;

fn stream(seed: u64, salt: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt);
    r.set_stream(i as u64);
    r
}

/// The trained network and the test set, for callers that evaluate further.
pub struct BenchRun {
    pub report: BenchReport,
    pub weights: NetworkWeights,
    pub test: Vec<EvalSample>,
    pub runtime: Duration,
}

pub fn synthetic_benchmark(cfg: &BenchConfig) -> Result<BenchRun> {
    let start = Instant::now();
    if cfg.train_cameras == 0 || cfg.sources_per_camera == 0 || cfg.test_images == 0 {
        return Err(Error::Config("benchmark needs cameras, sources and test images".into()));
    }
    let cmf = CmfTable::cie1931();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cameras = (0..=cfg.train_cameras)
        .map(|_| {
            let spec = SyntheticCameraSpec::random(cfg.perturbation, cfg.population, cfg.off_locus, cfg.temperature_window, &mut rng);
            make_synthetic_camera(&spec, &cmf, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let (train_cams, held_out) = cameras.split_at(cfg.train_cameras);
    let names: Vec<String> = (0..cfg.train_cameras).map(|i| format!("train-{i}")).collect();

    let mut sources: Vec<(usize, Capture)> = Vec::new();
    for (c, cam) in train_cams.iter().enumerate() {
        for cap in render_captures(cam, &names[c], cfg.sources_per_camera, cfg.image_size, &cfg.train.hist, &cmf, &mut rng)? {
            sources.push((c, cap));
        }
    }
    let targets = train_cams
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            let metas = sources.iter().filter(|(k, _)| *k == c).map(|(_, s)| s.meta.clone()).collect();
            TargetSet::new(cam.profile.clone(), metas, &cmf)
        })
        .collect::<Result<Vec<_>>>()?;
    let temps: Vec<f64> = sources.iter().map(|(_, s)| s.q).collect();
    let picks: Vec<(usize, usize)> = stratified_sources(&temps, cfg.augmented, &mut rng)?
        .into_iter()
        .enumerate()
        .collect();
    let samples: Vec<LabeledSample> = parallel_map(&picks, |&(i, src)| {
        let t = i % cfg.train_cameras;
        let (c, s) = &sources[src];
        let mut r = stream(cfg.seed, 0xa5a5, i);
        // sampling can leave the calibrated range where the cubic
        // extrapolates; such labels are not representable on the grid
        for _ in 0..MAX_REDRAWS {
            let out = augment_image(&s.image, &s.meta, &train_cams[*c].profile, &targets[t], &cfg.augment, &cmf, &mut r)?;
            if representable(&out.image, out.illuminant, &cfg.train.hist)? {
                return Ok(LabeledSample {
                    stack: assemble_feature_stack(&out.image, &cfg.train.hist)?,
                    illuminant: out.illuminant,
                    camera: names[t].clone(),
                });
            }
        }
        Err(Error::SamplingExhausted(MAX_REDRAWS))
    })?;

    let trained = train(&samples, &TrainConfig { seed: cfg.seed, ..cfg.train.clone() })?;
    let weights = trained.best_weights;

    let test: Vec<EvalSample> = render_captures(&held_out[0], "held-out", cfg.test_images, cfg.image_size, &cfg.train.hist, &cmf, &mut rng)?
        .into_iter()
        .map(|c| EvalSample::new(c.image, c.meta.illuminant, "held-out", &cfg.train.hist))
        .collect::<Result<_>>()?;
    let eval_seed = rng.random::<u64>();
    let eval_rng = || ChaCha8Rng::seed_from_u64(eval_seed);
    let c5 = run_eval(&weights, &test, &[], &cfg.eval, &mut eval_rng())?;
    let single = EvalConfig { m: 1, ..cfg.eval };
    let c5_single = run_eval(&weights, &test, &[], &single, &mut eval_rng())?;
    let gray_world = run_eval(&GrayWorld, &test, &[], &cfg.eval, &mut eval_rng())?;
    Ok(BenchRun {
        report: BenchReport {
            c5,
            c5_single,
            gray_world,
            train_images: samples.len(),
            epochs: trained.metrics.iter().map(|m: &EpochMetrics| (m.epoch, m.train_error_deg, m.val_error_deg)).collect(),
        },
        weights,
        test,
        runtime: start.elapsed(),
    })
}
