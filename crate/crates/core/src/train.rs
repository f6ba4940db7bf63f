//! Training: angular loss with smoothness regularization of the emitted CCC
//! maps, Adam with decoupled weight decay, cosine annealing, a growing batch
//! size, and query/additional-image sampling within each camera.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::sobel_responses;
use crate::autodiff::{Tape, Tensor, Var};
use crate::ccc::{CccParams, Illuminant};
use crate::error::{Error, ErrorClass, Result};
use crate::features::{ChromaHistogram, HistogramConfig};
use crate::network::{self, ArchitectureConfig, Emitted, Mode, NetworkWeights};

/// Angle between two nonzero vectors, in radians.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::Domain("angular error of a zero or non-finite vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0).acos())
}

pub fn angular_error_deg(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    angular_error(a, b).map(f64::to_degrees)
}

/// Smoothness multipliers for the emitted filters, bias and gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub lambda_f: f64,
    pub lambda_b: f64,
    pub lambda_g: f64,
}

impl Default for Smoothness {
    fn default() -> Self {
        Self {
            lambda_f: 0.15,
            lambda_b: 0.02,
            lambda_g: 0.02,
        }
    }
}

fn sobel_energy(x: &[f64], n: usize) -> f64 {
    let (ru, rv) = sobel_responses(x, n, n);
    ru.iter().chain(&rv).map(|v| v * v).sum()
}

/// Weighted squared Sobel responses of the bias, filters and gain.
pub fn smoothness_penalty(params: &CccParams, s: &Smoothness) -> f64 {
    let n = params.n;
    let mut total = s.lambda_b * sobel_energy(&params.bias, n);
    total += s.lambda_f * params.filters.iter().map(|f| sobel_energy(f, n)).sum::<f64>();
    if let Some(g) = &params.gain {
        total += s.lambda_g * sobel_energy(g, n);
    }
    total
}

/// Mean of `angular error + smoothness` over per-sample pairs.
pub fn total_loss(per_sample: &[(f64, f64)]) -> Result<f64> {
    if per_sample.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let loss = per_sample.iter().map(|(a, s)| a + s).sum::<f64>() / per_sample.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(loss)
}

/// Cosine annealing from `lr_initial` to zero over `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr_initial: f64) -> f64 {
    if total_steps == 0 {
        return lr_initial;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_initial * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|k| (vec![0.0; k], vec![0.0; k])).unzip();
        Self { m, v, t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }
}

/// One Adam update with bias correction, followed by the decoupled decay
/// `w -= lr * weight_decay * w`.
pub fn adam_step(weights: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(Error::Shape("adam: weights, gradients and state differ in length".into()));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients".into()));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((w, g), m), v) in weights.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if w.len() != g.len() {
            return Err(Error::Shape("adam: gradient shape mismatch".into()));
        }
        for k in 0..w.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let step = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
            w[k] -= lr * step + lr * cfg.weight_decay * w[k];
        }
    }
    Ok(())
}

/// A training example: precomputed features and the true illuminant.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub stack: ChromaHistogram,
    pub illuminant: Illuminant,
    pub camera: String,
}

/// One query and the indices of its additional images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub query: usize,
    pub additional: Vec<usize>,
}

/// `m - 1` additional images for `query` drawn from its camera's `members`.
///
/// The query itself is excluded when the camera has at least `m` images;
/// otherwise the whole camera is cycled through in random order.
pub fn draw_additional(query: usize, members: &[usize], m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let k = m.saturating_sub(1);
    if k == 0 {
        return Vec::new();
    }
    let mut pool: Vec<usize> = if members.len() >= m {
        members.iter().copied().filter(|&i| i != query).collect()
    } else {
        members.to_vec()
    };
    if pool.is_empty() {
        pool.push(query);
    }
    if pool.len() >= k {
        pool.partial_shuffle(rng, k).0.to_vec()
    } else {
        pool.shuffle(rng);
        pool.iter().copied().cycle().take(k).collect()
    }
}

/// Sample indices grouped by camera name.
pub fn camera_groups(cameras: &[&str]) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in cameras.iter().enumerate() {
        groups.entry((*c).to_string()).or_default().push(i);
    }
    groups
}

/// Batches for one epoch: every index in `queries` once, in random order,
/// each paired with additional images from the same camera.
pub fn sample_batch(
    queries: &[usize],
    camera_of: &[&str],
    pools: &BTreeMap<String, Vec<usize>>,
    batch_size: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<BatchItem>>> {
    if queries.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order = queries.to_vec();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let mut items = Vec::with_capacity(chunk.len());
        for &q in chunk {
            let members = pools.get(camera_of[q]).ok_or_else(|| Error::UnknownCamera(camera_of[q].to_string()))?;
            items.push(BatchItem {
                query: q,
                additional: draw_additional(q, members, m, rng),
            });
        }
        batches.push(items);
    }
    Ok(batches)
}

/// Loss of one batch recorded on `tape`, plus per-sample angular errors in
/// radians.
pub struct BatchLoss {
    pub loss: Var,
    pub angles: Vec<f64>,
    pub emitted: Emitted,
}

fn grid(tape: &mut Tape, data: &[f64], n: usize) -> Var {
    tape.constant(Tensor::new(vec![n, n], data.to_vec()).expect("n x n channel"))
}

/// Builds the forward pass and the averaged loss for `items`.
pub fn batch_loss(
    tape: &mut Tape,
    w: &NetworkWeights,
    vars: &[Var],
    samples: &[LabeledSample],
    items: &[BatchItem],
    smooth: &Smoothness,
    mode: Mode,
) -> Result<BatchLoss> {
    let groups: Vec<Vec<&ChromaHistogram>> = items
        .iter()
        .map(|it| std::iter::once(it.query).chain(it.additional.iter().copied()).map(|i| &samples[i].stack).collect())
        .collect();
    let group = groups.first().map(|g| g.len()).ok_or(Error::Empty("loss batch"))?;
    let input = tape.constant(network::stack_input(&groups)?);
    let emitted = network::forward(tape, w, vars, input, group, mode)?;
    let n = w.arch().n;
    let nn = n * n;
    let centers = w.hist().centers();
    let mut terms = Vec::with_capacity(items.len());
    let mut angles = Vec::with_capacity(items.len());
    for (b, it) in items.iter().enumerate() {
        let sample = &samples[it.query];
        let bias = tape.slice(emitted.bias, b * nn, &[n, n])?;
        let f0 = tape.slice(emitted.filters, 2 * b * nn, &[n, n])?;
        let f1 = tape.slice(emitted.filters, (2 * b + 1) * nn, &[n, n])?;
        let h0 = grid(tape, sample.stack.channel(0), n);
        let h1 = grid(tape, sample.stack.channel(1), n);
        let c0 = tape.conv_same(h0, f0)?;
        let c1 = tape.conv_same(h1, f1)?;
        let mut score = tape.add(c0, c1)?;
        let gain = match emitted.gain {
            Some(g) => {
                let g = tape.slice(g, b * nn, &[n, n])?;
                score = tape.mul(score, g)?;
                Some(g)
            }
            None => None,
        };
        let logits = tape.add(score, bias)?;
        let p = tape.softmax(logits);
        let uv = tape.expectation(p, &centers)?;
        let rgb = tape.uv_to_rgb(uv)?;
        let truth = tape.constant(Tensor::new(vec![3], sample.illuminant.rgb().to_vec())?);
        let cos = tape.dot(rgb, truth)?;
        let angle = tape.acos(cos);
        angles.push(tape.value(angle).item());

        let mut reg = Vec::new();
        for (map, lambda) in [(bias, smooth.lambda_b), (f0, smooth.lambda_f), (f1, smooth.lambda_f)]
            .into_iter()
            .chain(gain.map(|g| (g, smooth.lambda_g)))
        {
            if lambda != 0.0 {
                let e = tape.sobel_energy(map)?;
                reg.push(tape.scale(e, lambda));
            }
        }
        let mut term = angle;
        for r in reg {
            term = tape.add(term, r)?;
        }
        terms.push(term);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let loss = tape.scale(sum, 1.0 / items.len() as f64);
    Ok(BatchLoss { loss, angles, emitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub smoothness: Smoothness,
    /// Batch sizes, one per phase.
    pub batch_sizes: Vec<usize>,
    /// First (1-based) epoch of every phase after the first.
    pub batch_switch_epochs: Vec<usize>,
    /// Fraction of each camera's images held out for validation.
    pub val_fraction: f64,
    /// Batch-norm running-average momentum (weight of the old value).
    pub bn_momentum: f64,
    pub seed: u64,
    pub arch: ArchitectureConfig,
    pub hist: HistogramConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 5e-4,
            adam: AdamConfig::default(),
            smoothness: Smoothness::default(),
            batch_sizes: vec![16, 32, 64],
            batch_switch_epochs: vec![21, 41],
            val_fraction: 0.1,
            bn_momentum: 0.9,
            seed: 0,
            arch: ArchitectureConfig::default(),
            hist: HistogramConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.smoothness;
        if [s.lambda_f, s.lambda_b, s.lambda_g, self.adam.weight_decay].iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("smoothness multipliers and weight decay must be >= 0".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be >= 0".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) || self.batch_sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("batch sizes must be positive and ascending".into()));
        }
        if self.batch_switch_epochs.len() + 1 != self.batch_sizes.len() || self.batch_switch_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("need one ascending switch epoch per batch-size change".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        self.arch.validate()?;
        self.hist.validate()?;
        if self.arch.n != self.hist.n {
            return Err(Error::Config("arch.n and hist.n differ".into()));
        }
        Ok(())
    }

    /// Batch size in effect during `epoch` (1-based).
    pub fn batch_size(&self, epoch: usize) -> usize {
        let phase = self.batch_switch_epochs.iter().filter(|&&e| epoch >= e).count();
        self.batch_sizes[phase]
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_error_deg: f64,
    pub val_error_deg: f64,
    pub best_val_error_deg: f64,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch,batch_size,lr,train_loss,train_error_deg,val_error_deg,best_val_error_deg";
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6e},{:.6},{:.4},{:.4},{:.4}",
            self.epoch, self.batch_size, self.lr, self.train_loss, self.train_error_deg, self.val_error_deg, self.best_val_error_deg
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_weights: NetworkWeights,
    /// Lowest validation error seen; the final weights when there is no
    /// validation split.
    pub best_weights: NetworkWeights,
    pub metrics: Vec<EpochMetrics>,
}

/// Splits off `fraction` of each camera's samples (at least one when the
/// camera has two or more) for validation.
pub fn validation_split(samples: &[LabeledSample], fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let cams: Vec<&str> = samples.iter().map(|s| s.camera.as_str()).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in camera_groups(&cams) {
        idx.shuffle(rng);
        let k = if fraction > 0.0 && idx.len() >= 2 {
            ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean angular error (degrees) of `weights` on `items`, evaluated in
/// chunks with running batch-norm statistics.
pub fn evaluate_items(w: &NetworkWeights, samples: &[LabeledSample], items: &[BatchItem]) -> Result<Vec<f64>> {
    let mut errs = Vec::with_capacity(items.len());
    for chunk in items.chunks(32) {
        let mut tape = Tape::new();
        let vars = w.register(&mut tape, false);
        let none = Smoothness {
            lambda_f: 0.0,
            lambda_b: 0.0,
            lambda_g: 0.0,
        };
        let bl = batch_loss(&mut tape, w, &vars, samples, chunk, &none, Mode::Eval)?;
        errs.extend(bl.angles.iter().map(|a| a.to_degrees()));
    }
    Ok(errs)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Trains from a fresh initialization drawn from `cfg.seed`.
pub fn train(samples: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_log(samples, cfg, |_| {})
}

/// Like [`train`], calling `log` after every epoch.
pub fn train_with_log(samples: &[LabeledSample], cfg: &TrainConfig, mut log: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(s) = samples.iter().find(|s| s.stack.n() != cfg.arch.n) {
        return Err(Error::Shape(format!("sample stack is {0}x{0}, network expects {1}", s.stack.n(), cfg.arch.n)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = NetworkWeights::init(cfg.arch, cfg.hist, &mut rng)?;
    let (train_idx, val_idx) = validation_split(samples, cfg.val_fraction, &mut rng);
    let cams: Vec<&str> = samples.iter().map(|s| s.camera.as_str()).collect();
    let train_cams: Vec<&str> = train_idx.iter().map(|&i| cams[i]).collect();
    let train_pools: BTreeMap<String, Vec<usize>> = camera_groups(&train_cams)
        .into_iter()
        .map(|(c, local)| (c, local.into_iter().map(|k| train_idx[k]).collect()))
        .collect();
    let all_pools = camera_groups(&cams);
    let m = cfg.arch.m;
    let val_items: Vec<BatchItem> = val_idx
        .iter()
        .map(|&q| BatchItem {
            query: q,
            additional: draw_additional(q, &all_pools[cams[q]], m, &mut rng),
        })
        .collect();

    let mut master: Vec<Vec<f64>> = weights.params().iter().map(|p| p.tensor.data().to_vec()).collect();
    let shapes: Vec<Vec<usize>> = weights.params().iter().map(|p| p.tensor.shape().to_vec()).collect();
    let mut running: Vec<Vec<f64>> = weights.buffers().iter().map(|b| b.tensor.data().to_vec()).collect();
    let mut adam = AdamState::new(master.iter().map(Vec::len));
    let steps_per_epoch = |e: usize| train_idx.len().div_ceil(cfg.batch_size(e));
    let total_steps: usize = (1..=cfg.epochs).map(steps_per_epoch).sum();

    let mut best = weights.clone();
    let mut best_val = f64::INFINITY;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let bs = cfg.batch_size(epoch);
        let batches = sample_batch(&train_idx, &cams, &train_pools, bs, m, &mut rng)?;
        let mut losses = Vec::with_capacity(batches.len());
        let mut angles = Vec::with_capacity(train_idx.len());
        let lr_epoch = lr_at(step, total_steps, cfg.lr);
        for items in &batches {
            let diverged = |reason: String, last_good: &NetworkWeights| Error::Diverged {
                epoch,
                step,
                reason,
                last_good: Box::new(last_good.clone()),
            };
            let mut tape = Tape::new();
            let vars: Vec<Var> = master
                .iter()
                .zip(&shapes)
                .map(|(v, s)| tape.param(Tensor::new(s.clone(), v.clone()).expect("layout shape")))
                .collect();
            let bl = match batch_loss(&mut tape, &weights, &vars, samples, items, &cfg.smoothness, Mode::Train) {
                Ok(bl) => bl,
                Err(e) if e.class() == ErrorClass::Numerical => return Err(diverged(e.to_string(), &weights)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(bl.loss).item();
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), &weights));
            }
            let mut grads = tape.backward(bl.loss)?;
            let g: Vec<Vec<f64>> = vars
                .iter()
                .zip(&master)
                .map(|(v, w)| grads.take(*v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; w.len()]))
                .collect();
            let lr = lr_at(step, total_steps, cfg.lr);
            if let Err(e) = adam_step(&mut master, &g, &mut adam, lr, &cfg.adam) {
                return Err(diverged(e.to_string(), &weights));
            }
            if master.iter().flatten().any(|v| !v.is_finite()) {
                return Err(diverged("non-finite weights".into(), &weights));
            }
            for (k, (mean, var)) in bl.emitted.bn_stats.iter().enumerate() {
                for (slot, stat) in [(2 * k, mean), (2 * k + 1, var)] {
                    for (r, s) in running[slot].iter_mut().zip(stat) {
                        *r = cfg.bn_momentum * *r + (1.0 - cfg.bn_momentum) * s;
                    }
                }
            }
            losses.push(loss * items.len() as f64);
            angles.extend(bl.angles);
            step += 1;
        }
        let last_good = weights.clone();
        weights.set_params(&master)?;
        weights.set_buffers(&running)?;
        let val_err = if val_items.is_empty() {
            f64::NAN
        } else {
            match evaluate_items(&weights, samples, &val_items) {
                Ok(errs) => mean(&errs),
                Err(e) if e.class() == ErrorClass::Numerical => {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        reason: format!("validation: {e}"),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            }
        };
        if val_items.is_empty() || val_err < best_val {
            best_val = if val_items.is_empty() { best_val } else { val_err };
            best = weights.clone();
        }
        let row = EpochMetrics {
            epoch,
            batch_size: bs,
            lr: lr_epoch,
            train_loss: losses.iter().sum::<f64>() / train_idx.len() as f64,
            train_error_deg: mean(&angles).to_degrees(),
            val_error_deg: val_err,
            best_val_error_deg: best_val,
        };
        log(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        final_weights: weights,
        best_weights: best,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angular_error_basics() {
        assert_eq!(angular_error([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!((angular_error_deg([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap() - 90.0).abs() < 1e-12);
        let a = [0.3, 0.5, 0.2];
        let b = [0.2, 0.6, 0.4];
        let e1 = angular_error(a, b).unwrap();
        let e2 = angular_error(a, b.map(|x| 2.0 * x)).unwrap();
        assert!((e1 - e2).abs() < 1e-15);
        assert_eq!(angular_error(b, a).unwrap(), e1);
        assert!(angular_error([0.0; 3], a).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(lr_at(0, 100, 5e-4), 5e-4);
        assert!(lr_at(100, 100, 5e-4).abs() < 1e-20);
        assert!((lr_at(50, 100, 5e-4) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn batch_schedule_phases() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.batch_size(1), 16);
        assert_eq!(cfg.batch_size(20), 16);
        assert_eq!(cfg.batch_size(21), 32);
        assert_eq!(cfg.batch_size(41), 64);
        assert_eq!(cfg.batch_size(60), 64);
    }

    #[test]
    fn default_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.smoothness.lambda_f, cfg.smoothness.lambda_b), (0.15, 0.02));
        assert_eq!((cfg.epochs, cfg.lr, cfg.adam.weight_decay), (60, 5e-4, 5e-4));
        assert_eq!((cfg.adam.beta1, cfg.adam.beta2), (0.9, 0.999));
        assert_eq!(cfg.arch.m - 1, 8);
    }

    #[test]
    fn adam_first_step_and_decay() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut w = vec![vec![1.0, -2.0, 0.5]];
        let g = vec![vec![0.3, -4.0, 0.0]];
        let mut st = AdamState::new([3]);
        adam_step(&mut w, &g, &mut st, 0.01, &cfg).unwrap();
        for ((w1, w0), g) in w[0].iter().zip([1.0, -2.0, 0.5]).zip(&g[0]) {
            let want = w0 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((w1 - want).abs() < 1e-12);
        }
        let decay = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut w = vec![vec![2.0]];
        let mut st = AdamState::new([1]);
        adam_step(&mut w, &[vec![0.0]], &mut st, 0.5, &decay).unwrap();
        assert!((w[0][0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
        assert!(adam_step(&mut w, &[vec![f64::NAN]], &mut st, 0.5, &decay).is_err());
    }

    #[test]
    fn additional_images_stay_in_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let extra = draw_additional(4, &[4], 3, &mut rng);
        assert_eq!(extra, vec![4, 4]);
        let members: Vec<usize> = (10..30).collect();
        for _ in 0..20 {
            let extra = draw_additional(12, &members, 9, &mut rng);
            assert_eq!(extra.len(), 8);
            assert!(extra.iter().all(|i| members.contains(i) && *i != 12));
            let mut d = extra.clone();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 8);
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.epochs = 7;
        cfg.smoothness.lambda_b = 0.5;
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml("epochs = 3\nseed = 9\n").unwrap();
        assert_eq!((partial.epochs, partial.seed, partial.lr), (3, 9, 5e-4));
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        assert!(TrainConfig::from_toml("batch_sizes = [32, 16]").is_err());
    }
}
