use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use c5_core::bench::{synthetic_benchmark, BenchConfig};
use c5_core::gradcheck::{loss_check, op_checks, Check};
use c5_core::harness::{leave_one_camera_out, run_eval, Dataset, Entry, EvalConfig, EvalSample, GrayWorld, Policy, CaptureSettings};
use c5_core::image::{FloatMap, RawImage};
use c5_core::network::{c5_infer, NetworkWeights};
use c5_core::sensor::{
    augment_image, make_synthetic_camera, random_capture_meta, render_scene, AugmentConfig, CmfTable, Scene, SyntheticCameraSpec,
    TargetSet,
};
use c5_core::train::{train_with_log, TrainConfig};
use c5_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "c5", version, about = "Cross-camera convolutional color constancy")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Estimate the illuminant of one image.
    Infer(InferArgs),
    /// Re-render source images as if captured by target cameras.
    Augment(AugmentArgs),
    /// Generate virtual cameras and render images with them.
    SynthCamera(SynthArgs),
    /// Evaluate a model or the gray-world baseline on a manifest.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradArgs),
    /// Train and evaluate on virtual cameras end to end.
    Bench(BenchArgs),
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let w = w.parse().map_err(|e| format!("{e}"))?;
    let h = h.parse().map_err(|e| format!("{e}"))?;
    Ok((w, h))
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Leave this camera (and scenes it shares) out of training.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long, value_parser = parse_size)]
    resolution: Option<(usize, usize)>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    weights: PathBuf,
    query: PathBuf,
    /// Unlabeled images from the same camera.
    additional: Vec<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Write the heat map as a float map.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Write filters, bias (and gain) as float maps with this path prefix.
    #[arg(long)]
    filters: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    count: usize,
    /// Output directory; receives the images and `manifest.jsonl`.
    #[arg(long, short)]
    out: PathBuf,
    /// TOML augmentation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Rendered images per camera.
    #[arg(long, default_value_t = 0)]
    images: usize,
    #[arg(long, default_value_t = 0.1)]
    perturbation: f64,
    #[arg(long, default_value_t = 0.02)]
    off_locus: f64,
    /// Width in kelvin of each camera's light temperatures.
    #[arg(long, default_value_t = 5000.0)]
    window: f64,
    #[arg(long, default_value_t = 100)]
    population: usize,
    #[arg(long, value_parser = parse_size, default_value = "384x256")]
    size: (usize, usize),
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model weights; the gray-world baseline is evaluated when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluate on this camera only; others serve as cross-camera images.
    #[arg(long)]
    camera: Option<String>,
    #[arg(long, default_value = "random")]
    policy: Policy,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Images per estimate including the query; defaults to the model's.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pool: usize,
    #[arg(long, value_parser = parse_size)]
    resolution: Option<(usize, usize)>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Skip the end-to-end loss check.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML benchmark configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Save the trained weights here.
    #[arg(long)]
    weights: Option<PathBuf>,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    let ds = match a.resolution {
        Some(r) => Dataset::load_with(&a.manifest, r)?,
        None => Dataset::load(&a.manifest)?,
    };
    let indices = match &a.holdout {
        Some(cam) => leave_one_camera_out(&ds, cam)?.0,
        None => (0..ds.len()).collect(),
    };
    let samples = ds.labeled(&indices, &cfg.hist)?;
    log::info!("training on {} images", samples.len());
    let outcome = train_with_log(&samples, &cfg, |m| {
        println!(
            "epoch {:>3}  batch {:>2}  lr {:.2e}  loss {:.4}  train {:.2}  val {:.2}",
            m.epoch, m.batch_size, m.lr, m.train_loss, m.train_error_deg, m.val_error_deg
        )
    })?;
    outcome.best_weights.save(&a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn load_image(path: &Path, mask: Option<&Path>) -> Result<RawImage> {
    RawImage::load(path, mask)
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let w = NetworkWeights::load(&a.weights)?;
    let query = load_image(&a.query, a.mask.as_deref())?;
    let extra = a.additional.iter().map(|p| load_image(p, None)).collect::<Result<Vec<_>>>()?;
    let out = c5_infer(&query, &extra, &w)?;
    let [r, g, b] = out.illuminant.rgb();
    println!("{r:.6} {g:.6} {b:.6}");
    let n = w.arch().n;
    if let Some(p) = &a.heatmap {
        FloatMap::gray(n, n, out.heat_map.as_slice()).write(p)?;
    }
    if let Some(prefix) = &a.filters {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        FloatMap::gray(n, n, &out.params.filters[0]).write(&with("_filter0.pfm"))?;
        FloatMap::gray(n, n, &out.params.filters[1]).write(&with("_filter1.pfm"))?;
        FloatMap::gray(n, n, &out.params.bias).write(&with("_bias.pfm"))?;
        if let Some(g) = &out.params.gain {
            FloatMap::gray(n, n, g).write(&with("_gain.pfm"))?;
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn augment_cmd(a: AugmentArgs, seed: u64) -> Result<()> {
    let cfg: AugmentConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => AugmentConfig::default(),
    };
    let src = Dataset::load(&a.source)?;
    let tgt = Dataset::load(&a.target)?;
    if src.is_empty() || a.count == 0 {
        return Err(Error::Empty("augmentation sources"));
    }
    let cmf = CmfTable::cie1931();
    let mut targets = Vec::new();
    for (id, profile) in &tgt.cameras {
        let metas: Vec<_> = tgt.entries.iter().filter(|e| &e.camera == id).filter_map(Entry::meta).collect();
        if metas.len() >= 4 {
            targets.push((id.clone(), TargetSet::new(profile.clone(), metas, &cmf)?));
        } else {
            log::warn!("target camera {id} has {} captures with settings; skipped", metas.len());
        }
    }
    if targets.is_empty() {
        return Err(Error::Empty("target cameras with capture settings"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    create_dir(&a.out)?;
    let mut out = Dataset::new(&a.out);
    for (id, t) in &targets {
        out.cameras.insert(id.clone(), t.profile.clone());
    }
    for i in 0..a.count {
        let s = rng.random_range(0..src.len());
        let e = &src.entries[s];
        let meta = e.meta().ok_or_else(|| Error::format("source entry", format!("{} has no capture settings", e.image.display())))?;
        let profile = src.cameras.get(&e.camera).ok_or_else(|| Error::UnknownCamera(e.camera.clone()))?;
        let (id, target) = &targets[i % targets.len()];
        let aug = augment_image(&src.image(s)?, &meta, profile, target, &cfg, &cmf, &mut rng)?;
        let name = PathBuf::from(format!("aug_{i:05}.pfm"));
        aug.image.save(&a.out.join(&name))?;
        out.entries.push(Entry {
            image: name,
            mask: None,
            camera: id.clone(),
            scene: e.scene.clone(),
            illuminant: aug.illuminant,
            capture: e.capture,
        });
    }
    out.save(a.out.join("manifest.jsonl"))?;
    println!("wrote {} images to {}", a.count, a.out.display());
    Ok(())
}

fn synth_cmd(a: SynthArgs, seed: u64) -> Result<()> {
    let cmf = CmfTable::cie1931();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    create_dir(&a.out)?;
    let mut ds = Dataset::new(&a.out);
    for c in 0..a.count {
        let spec = SyntheticCameraSpec::random(a.perturbation, a.population, a.off_locus, a.window, &mut rng);
        let cam = make_synthetic_camera(&spec, &cmf, &mut rng)?;
        let id = format!("synth-{c}");
        for k in 0..a.images {
            let light = cam.lights[rng.random_range(0..cam.lights.len())];
            let scene = Scene::random(a.size.0, a.size.1, &mut rng);
            let img = render_scene(&scene, &cam.profile, &light, rng.random_range(0.5..1.0), &cmf)?;
            let meta = random_capture_meta(&id, light.illuminant, &mut rng);
            let name = PathBuf::from(format!("{id}_{k:04}.pfm"));
            img.save(&a.out.join(&name))?;
            ds.entries.push(Entry {
                image: name,
                mask: None,
                camera: id.clone(),
                scene: None,
                illuminant: light.illuminant,
                capture: Some(CaptureSettings::from_meta(&meta)),
            });
        }
        println!("{id}: {} lights, {} K to {} K", cam.lights.len(), spec.temperatures.0.round(), spec.temperatures.1.round());
        ds.cameras.insert(id, cam.profile);
    }
    ds.save(a.out.join("manifest.jsonl"))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let weights = a.weights.as_ref().map(NetworkWeights::load).transpose()?;
    let ds = match a.resolution {
        Some(r) => Dataset::load_with(&a.manifest, r)?,
        None => Dataset::load(&a.manifest)?,
    };
    let hist = weights.as_ref().map(|w| *w.hist()).unwrap_or_default();
    let mut queries = Vec::new();
    let mut foreign = Vec::new();
    for (i, e) in ds.entries.iter().enumerate() {
        let s = EvalSample::new(ds.image(i)?, e.illuminant, &e.camera, &hist)?;
        match &a.camera {
            Some(c) if c != &e.camera => foreign.push(s),
            _ => queries.push(s),
        }
    }
    let cfg = EvalConfig {
        m: a.m.or(weights.as_ref().map(|w| w.arch().m)).unwrap_or(1),
        repeats: a.repeats,
        policy: a.policy,
        pool: a.pool,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = match &weights {
        Some(w) => run_eval(w, &queries, &foreign, &cfg, &mut rng)?,
        None => run_eval(&GrayWorld, &queries, &foreign, &cfg, &mut rng)?,
    };
    println!("{report}");
    Ok(())
}

fn print_check(c: &Check) {
    let worst = c.report.max_rel_error.iter().cloned().fold(0.0, f64::max);
    let verdict = if c.report.passed { "ok" } else { "FAILED" };
    println!("{:<26} max rel error {worst:.2e}  ({} checked)  {verdict}", c.name, c.report.checked);
}

fn gradcheck_cmd(a: GradArgs, seed: u64) -> Result<bool> {
    let mut checks = op_checks(seed, a.tol)?;
    if !a.ops_only {
        let arch = c5_core::network::ArchitectureConfig {
            n: 16,
            m: 3,
            depth: 2,
            base_channels: 4,
            convs_per_block: 1,
            emit_gain: false,
            leaky_slope: 0.2,
        };
        let hist = c5_core::features::HistogramConfig::new(16, -2.85, 2.85)?;
        checks.push(loss_check(arch, hist, seed, a.tol)?);
    }
    checks.iter().for_each(print_check);
    Ok(checks.iter().all(|c| c.report.passed))
}

fn bench_cmd(a: BenchArgs, seed: u64) -> Result<()> {
    let mut cfg: BenchConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => BenchConfig::default(),
    };
    cfg.seed = seed;
    let run = synthetic_benchmark(&cfg)?;
    let r = &run.report;
    println!("trained on {} augmented images in {:.0?}", r.train_images, run.runtime);
    println!("C5 (m = {}):\n{}", cfg.eval.m, r.c5);
    println!("C5 (m = 1):\n{}", r.c5_single);
    println!("gray world:\n{}", r.gray_world);
    if let Some(p) = &a.weights {
        run.weights.save(p)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let seed = cli.seed;
    let result = match cli.cmd {
        Cmd::Train(a) => train_cmd(a, seed),
        Cmd::Infer(a) => infer_cmd(a),
        Cmd::Augment(a) => augment_cmd(a, seed),
        Cmd::SynthCamera(a) => synth_cmd(a, seed),
        Cmd::Eval(a) => eval_cmd(a, seed),
        Cmd::Gradcheck(a) => match gradcheck_cmd(a, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Cmd::Bench(a) => bench_cmd(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
