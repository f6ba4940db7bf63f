use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// When a perturbation moves a piecewise operation onto another piece,
    /// the step is divided by ten up to this many times before the element
    /// is counted as a kink crossing instead of being compared.
    pub refinements: u32,
    /// Combine central differences at `step` and `step / 2` by Richardson
    /// extrapolation, which cancels the second-order truncation term.
    pub extrapolate: bool,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Added to the denominator of the relative error so that entries whose
    /// true gradient is ~0 are judged on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            refinements: 2,
            extrapolate: true,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error per leaf.
    pub max_rel_error: Vec<f64>,
    /// `(leaf, element, analytic, numeric)` of the worst entry overall.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Elements compared against finite differences.
    pub checked: usize,
    /// Elements compared only after refining the step.
    pub refined: usize,
    /// Elements whose every stencil straddled a kink; not compared.
    pub kink_crossings: usize,
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, leaves: &[Tensor]) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarOutput(v.shape.clone()));
    }
    Ok((v.item(), tape.branch_pattern()))
}

/// Central difference in one coordinate, or `None` when either side of the
/// stencil lands on a different piece than `pattern`.
fn central<F>(f: &F, work: &mut [Tensor], (li, k): (usize, usize), step: f64, pattern: &[usize]) -> Result<Option<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let orig = work[li].data()[k];
    work[li].data_mut()[k] = orig + step;
    let plus = eval(f, work);
    work[li].data_mut()[k] = orig - step;
    let minus = eval(f, work);
    work[li].data_mut()[k] = orig;
    let ((plus, pp), (minus, pm)) = (plus?, minus?);
    Ok((pp == pattern && pm == pattern).then(|| (plus - minus) / (2.0 * step)))
}

/// Compares reverse-mode gradients of the scalar graph built by `f` against
/// central finite differences, for every element of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let base = tape.value(out).item();
    let pattern = tape.branch_pattern();
    if eval(&f, leaves)?.0.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut work = leaves.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: vec![0.0; leaves.len()],
        worst: None,
        checked: 0,
        refined: 0,
        kink_crossings: 0,
        tol: cfg.tol,
        passed: true,
    };
    let mut worst_err = -1.0;
    for (li, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; leaves[li].numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let mut step = cfg.step;
            let mut numeric = None;
            for attempt in 0..=cfg.refinements {
                let Some(d) = central(&f, &mut work, (li, k), step, &pattern)? else {
                    step /= 10.0;
                    continue;
                };
                let d = if cfg.extrapolate {
                    match central(&f, &mut work, (li, k), step / 2.0, &pattern)? {
                        Some(half) => (4.0 * half - d) / 3.0,
                        None => {
                            step /= 10.0;
                            continue;
                        }
                    }
                } else {
                    d
                };
                if attempt > 0 {
                    report.refined += 1;
                }
                numeric = Some(d);
                break;
            }
            let Some(numeric) = numeric else {
                report.kink_crossings += 1;
                continue;
            };
            report.checked += 1;
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference gradient".into()));
            }
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()) + cfg.floor);
            report.max_rel_error[li] = report.max_rel_error[li].max(err);
            if err > worst_err {
                worst_err = err;
                report.worst = Some((li, k, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error.iter().all(|&e| e <= cfg.tol);
    Ok(report)
}
