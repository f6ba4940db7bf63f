//! Finite-difference checks of every differentiable op and of the full
//! training loss, runnable outside the test suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Tape, Tensor, Var};
use crate::ccc::Illuminant;
use crate::error::Result;
use crate::features::{ChromaHistogram, HistogramConfig};
use crate::network::{ArchitectureConfig, Mode, NetworkWeights};
use crate::train::{batch_loss, BatchItem, LabeledSample, Smoothness};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Magnitudes in `[0.05, 1)` with random signs, clear of the ReLU kink.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let t = uniform(shape, 0.05, 1.0, r);
    let data = t.data().iter().map(|&v| if r.random_bool(0.5) { v } else { -v }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Shuffled, well-separated values so max selections never tie.
fn distinct(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(r);
    Tensor::new(shape.to_vec(), vals).expect("shape matches data")
}

fn probe(t: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone());
    t.dot(v, w)
}

/// Checks every op on randomized inputs at relative tolerance `tol`.
pub fn op_checks(seed: u64, tol: f64) -> Result<Vec<Check>> {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    let mut run = |name, leaves: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| -> Result<()> {
        let report = grad_check(f, leaves, cfg)?;
        out.push(Check { name, report });
        Ok(())
    };

    let x = [uniform(&[2, 3, 5, 4], -1.0, 1.0, r), uniform(&[4, 3, 3, 3], -1.0, 1.0, r), uniform(&[4], -1.0, 1.0, r)];
    let p = uniform(&[2, 4, 5, 4], -1.0, 1.0, r);
    run("conv3x3", &x, &|t, v| {
        let y = t.conv3x3(v[0], v[1], Some(v[2]))?;
        probe(t, y, &p)
    })?;

    let x = [away_from_zero(&[3, 7], r)];
    let p = uniform(&[3, 7], -1.0, 1.0, r);
    run("leaky_relu", &x, &|t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        probe(t, y, &p)
    })?;

    let x = [uniform(&[3, 2, 4, 4], -2.0, 2.0, r), uniform(&[2], 0.5, 1.5, r), uniform(&[2], -0.5, 0.5, r)];
    let p = uniform(&[3, 2, 4, 4], -1.0, 1.0, r);
    run("batch_norm", &x, &|t, v| {
        let (y, _, _) = t.batch_norm(v[0], v[1], v[2])?;
        probe(t, y, &p)
    })?;
    run("batch_norm_fixed", &x, &|t, v| {
        let y = t.batch_norm_fixed(v[0], v[1], v[2], &[0.3, -0.2], &[1.7, 0.4])?;
        probe(t, y, &p)
    })?;
    run("instance_norm", &x, &|t, v| {
        let y = t.instance_norm(v[0], v[1], v[2])?;
        probe(t, y, &p)
    })?;

    let x = [distinct(&[2, 3, 4, 6], r)];
    let p = uniform(&[2, 3, 2, 3], -1.0, 1.0, r);
    run("max_pool2", &x, &|t, v| {
        let y = t.max_pool2(v[0])?;
        probe(t, y, &p)
    })?;

    let x = [uniform(&[2, 2, 3, 4], -1.0, 1.0, r), uniform(&[2, 1, 6, 8], -1.0, 1.0, r)];
    let p = uniform(&[2, 3, 6, 8], -1.0, 1.0, r);
    run("upsample2+concat", &x, &|t, v| {
        let u = t.upsample2(v[0])?;
        let c = t.concat(u, v[1])?;
        probe(t, c, &p)
    })?;
    let p = uniform(&[2, 5], -1.0, 1.0, r);
    run("gather+slice", &x, &|t, v| {
        let g = t.gather(v[1], &[1, 0, 1])?;
        let s = t.slice(g, 17, &[2, 5])?;
        probe(t, s, &p)
    })?;

    let x = [distinct(&[6, 2, 2, 2], r)];
    let p = uniform(&[2, 2, 2, 2], -1.0, 1.0, r);
    run("group_max", &x, &|t, v| {
        let y = t.group_max(v[0], 3)?;
        probe(t, y, &p)
    })?;

    let x = [uniform(&[4, 3], -1.0, 1.0, r), uniform(&[4, 3], 0.5, 2.0, r)];
    let p = uniform(&[4, 3], -1.0, 1.0, r);
    run("add/sub/mul/div/scale", &x, &|t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[0])?;
        let m = t.mul(s, v[0])?;
        let d = t.div(m, v[1])?;
        let k = t.scale(d, -1.7);
        probe(t, k, &p)
    })?;

    for n in [6, 7] {
        let x = [uniform(&[n, n], -1.0, 1.0, r), uniform(&[n, n], -1.0, 1.0, r)];
        let p = uniform(&[n, n], -1.0, 1.0, r);
        run("conv_same", &x, &|t, v| {
            let y = t.conv_same(v[0], v[1])?;
            probe(t, y, &p)
        })?;
    }

    let x = [uniform(&[4, 4], -2.0, 2.0, r)];
    run("softmax+expectation", &x, &|t, v| {
        let p = t.softmax(v[0]);
        let uv = t.expectation(p, &[-1.5, -0.5, 0.5, 1.5])?;
        let w = t.constant(Tensor::new(vec![2], vec![0.7, -1.3])?);
        t.dot(uv, w)
    })?;

    let x = [uniform(&[2], -1.0, 1.0, r)];
    run("uv_to_rgb+acos", &x, &|t, v| {
        let rgb = t.uv_to_rgb(v[0])?;
        let gt = t.constant(Tensor::new(vec![3], vec![0.4, 0.8, 0.45])?);
        let d = t.dot(rgb, gt)?;
        let n = t.l2_norm(gt);
        let c = t.div(d, n)?;
        Ok(t.acos(c))
    })?;

    let x = [uniform(&[3, 4], -1.0, 1.0, r)];
    run("sum+sum_squares+l2_norm", &x, &|t, v| {
        let a = t.sum(v[0]);
        let b = t.sum_squares(v[0]);
        let c = t.l2_norm(v[0]);
        let ab = t.mul(a, b)?;
        t.add(ab, c)
    })?;

    let x = [uniform(&[6, 5], -1.0, 1.0, r)];
    run("sobel_energy", &x, &|t, v| t.sobel_energy(v[0]))?;
    Ok(out)
}

fn random_hist(nn: usize, r: &mut impl Rng) -> Vec<f64> {
    let mut h: Vec<f64> = (0..nn).map(|_| if r.random_bool(0.3) { r.random::<f64>() } else { 0.0 }).collect();
    let s: f64 = h.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Checks the batch loss of a freshly initialized network with respect to
/// all of its parameters, on two queries with `arch.m - 1` additional
/// histograms each.
pub fn loss_check(arch: ArchitectureConfig, hist: HistogramConfig, seed: u64, tol: f64) -> Result<Check> {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let w = NetworkWeights::init(arch, hist, r)?;
    let nn = hist.n * hist.n;
    let per = arch.m.max(1);
    let samples = (0..2 * per)
        .map(|i| {
            Ok(LabeledSample {
                stack: ChromaHistogram::from_channels(hist.n, random_hist(nn, r), random_hist(nn, r), &hist)?,
                illuminant: Illuminant::new([r.random_range(0.2..1.0), r.random_range(0.5..1.0), r.random_range(0.2..1.0)])?,
                camera: format!("cam{}", i % 2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem> = (0..2)
        .map(|b| BatchItem {
            query: b * per,
            additional: (1..per).map(|k| b * per + k).collect(),
        })
        .collect();
    let leaves: Vec<Tensor> = w.params().iter().map(|p| p.tensor.clone()).collect();
    let cfg = GradCheckConfig {
        tol,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        |t, v| Ok(batch_loss(t, &w, v, &samples, &items, &Smoothness::default(), Mode::Train)?.loss),
        &leaves,
        cfg,
    )?;
    Ok(Check { name: "c5 loss", report })
}
