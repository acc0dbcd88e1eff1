//! Integrated square of a discrete density, `Psi(P) = sum_x p(x)^2`.
//!
//! First- and second-order TMLE updates move a pmf along
//! `p -> (1 + eps D) p`, with `eps` fitted on a reference measure: the HAL
//! pmf (regularized mode) or the empirical pmf (empirical mode). The
//! second-order gradient is that of `P -> Psi(first-order update of P)`,
//! where the first-order update is always fitted on the HAL pmf.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{self, NumericError, ScoreFunction1D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PmfError {
    #[error("invalid pmf: {0}")]
    InvalidPmf(String),
    #[error("pmfs live on different supports")]
    SupportMismatch,
    #[error("1 + eps D is not positive at support point {index}")]
    DegenerateDenominator { index: usize },
    #[error("no convergence after {iterations} iterations (|ref D1| = {d1:e}, |ref D2| = {d2:e})")]
    MaxIterations { iterations: usize, d1: f64, d2: f64 },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, PmfError>;

const SUM_TOL: f64 = 1e-12;
const CENTERING_TOL: f64 = 1e-8;

/// A probability mass function on strictly increasing support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePmf {
    supports: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscretePmf {
    pub fn new(supports: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if supports.is_empty() || supports.len() != probs.len() {
            return Err(PmfError::InvalidPmf(format!(
                "{} supports, {} probabilities",
                supports.len(),
                probs.len()
            )));
        }
        if supports.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PmfError::InvalidPmf("supports must be strictly increasing".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(PmfError::InvalidPmf("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(PmfError::InvalidPmf(format!("probabilities sum to {total}")));
        }
        Ok(Self { supports, probs })
    }

    /// Rescales non-negative masses to sum to one.
    pub fn normalized(supports: Vec<f64>, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(PmfError::InvalidPmf("masses must have a positive finite sum".into()));
        }
        Self::new(supports, masses.into_iter().map(|m| m / total).collect())
    }

    pub fn uniform(supports: Vec<f64>) -> Result<Self> {
        let m = supports.len();
        Self::normalized(supports, vec![1.0; m])
    }

    /// Empirical pmf of a sample given as support indices.
    pub fn empirical(supports: Vec<f64>, sample: &[usize]) -> Result<Self> {
        if sample.is_empty() {
            return Err(PmfError::InvalidPmf("empty sample".into()));
        }
        let counts = counts(sample, supports.len())?;
        let n = sample.len() as f64;
        Self::new(supports, counts.iter().map(|&c| c as f64 / n).collect())
    }

    pub fn supports(&self) -> &[f64] {
        &self.supports
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        self.probs.iter().zip(f).map(|(p, v)| p * v).sum()
    }

    fn check_support(&self, other: &DiscretePmf) -> Result<()> {
        if self.supports != other.supports {
            return Err(PmfError::SupportMismatch);
        }
        Ok(())
    }

    /// `(1 + eps D) p`. The caller guarantees `sum p D = 0`; the rounding
    /// left over from centering is removed by rescaling.
    fn fluctuate(&self, direction: &[f64], eps: f64) -> Result<Self> {
        let probs = self
            .probs
            .iter()
            .zip(direction)
            .map(|(p, d)| p * (1.0 + eps * d))
            .collect::<Vec<_>>();
        if let Some(index) = probs.iter().position(|p| *p < 0.0) {
            return Err(PmfError::DegenerateDenominator { index });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > CENTERING_TOL {
            return Err(PmfError::InvalidPmf(format!("fluctuation moved total mass to {total}")));
        }
        Self::normalized(self.supports.clone(), probs)
    }

    /// Sum of `reference(x) log p(x)` over points where both are positive.
    pub fn loglik(&self, reference: &DiscretePmf) -> f64 {
        self.probs
            .iter()
            .zip(&reference.probs)
            .filter(|(p, r)| **p > 0.0 && **r > 0.0)
            .map(|(p, r)| r * p.ln())
            .sum()
    }
}

/// Occurrence counts of support indices.
pub fn counts(sample: &[usize], m: usize) -> Result<Vec<usize>> {
    let mut c = vec![0usize; m];
    for &i in sample {
        if i >= m {
            return Err(PmfError::InvalidPmf(format!("sample index {i} outside {m} supports")));
        }
        c[i] += 1;
    }
    Ok(c)
}

pub fn psi(p: &DiscretePmf) -> f64 {
    p.probs.iter().map(|v| v * v).sum()
}

/// First-order canonical gradient `2 p(x) - 2 Psi(p)`.
pub fn d1(p: &DiscretePmf) -> Vec<f64> {
    let s = psi(p);
    p.probs.iter().map(|v| 2.0 * v - 2.0 * s).collect()
}

/// Exact first-order remainder `-sum (p - p0)^2`, checked against
/// `Psi(p) - Psi(p0) + P0 D1_p`.
pub fn r1_exact(p: &DiscretePmf, p0: &DiscretePmf) -> Result<f64> {
    p.check_support(p0)?;
    let r: f64 = -p.probs.iter().zip(&p0.probs).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let identity = psi(p) - psi(p0) + p0.expect(&d1(p));
    debug_assert!((identity - r).abs() < 1e-12, "remainder identity off by {}", identity - r);
    Ok(r)
}

/// How the likelihood-maximizing step is located.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EpsSolver {
    /// Bisection on the (monotone) derivative of the concave log-likelihood.
    #[default]
    ScoreRoot,
    GoldenSection,
}

/// Open interval of `eps` keeping `1 + eps D > 0` where `p > 0`, shrunk by 1e-9.
pub fn feasible_interval(p: &DiscretePmf, direction: &[f64]) -> (f64, f64) {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (pv, &d) in p.probs.iter().zip(direction) {
        if *pv == 0.0 || d == 0.0 {
            continue;
        }
        let bound = -1.0 / d;
        if d > 0.0 {
            lo = lo.max(bound);
        } else {
            hi = hi.min(bound);
        }
    }
    let shrink = |b: f64| b * (1.0 - 1e-9);
    (shrink(lo), shrink(hi))
}

/// Maximizer of `sum_x reference(x) log((1 + eps D(x)) p(x))` over the
/// feasible interval intersected with `|eps| <= max_abs_eps`.
pub fn fit_eps(
    p: &DiscretePmf,
    direction: &[f64],
    reference: &DiscretePmf,
    max_abs_eps: Option<f64>,
    solver: EpsSolver,
) -> Result<f64> {
    p.check_support(reference)?;
    let (mut lo, mut hi) = feasible_interval(p, direction);
    if let Some(m) = max_abs_eps {
        lo = lo.max(-m);
        hi = hi.min(m);
    }
    let active: Vec<(f64, f64)> = p
        .probs
        .iter()
        .zip(&reference.probs)
        .zip(direction)
        .filter(|((pv, r), d)| **pv > 0.0 && **r > 0.0 && **d != 0.0)
        .map(|((_, r), d)| (*r, *d))
        .collect();
    if active.is_empty() {
        return Ok(0.0);
    }
    let score = |e: f64| active.iter().map(|(r, d)| r * d / (1.0 + e * d)).sum::<f64>();
    if !lo.is_finite() || !hi.is_finite() {
        // The likelihood is monotone in eps when all directions share a sign
        // on the reference support; bound the search at a generous width.
        lo = lo.max(-1e6);
        hi = hi.min(1e6);
    }
    match solver {
        EpsSolver::ScoreRoot => {
            if score(lo) <= 0.0 {
                return Ok(lo);
            }
            if score(hi) >= 0.0 {
                return Ok(hi);
            }
            let s = ScoreFunction1D::new(score, lo, hi);
            Ok(numeric::solve_score_near(&s, 0.0, 1e-3 * (hi - lo), 0.0, 2000)?)
        }
        EpsSolver::GoldenSection => {
            let ll = |e: f64| active.iter().map(|(r, d)| r * (1.0 + e * d).ln()).sum::<f64>();
            Ok(numeric::golden_max(ll, lo, hi, 1e-12))
        }
    }
}

/// One local least-favorable step of the first-order TMLE.
pub fn first_order_update(
    p: &DiscretePmf,
    reference: &DiscretePmf,
    max_abs_eps: Option<f64>,
    solver: EpsSolver,
) -> Result<(DiscretePmf, f64)> {
    let d = d1(p);
    let eps = fit_eps(p, &d, reference, max_abs_eps, solver)?;
    Ok((p.fluctuate(&d, eps)?, eps))
}

/// Scalars entering the second-order gradient at `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityGradCtx {
    pub eps1: f64,
    pub c: f64,
    pub d: f64,
    pub psi: f64,
}

/// Second-order canonical gradient of `P -> Psi(P~(1)(P))` where the
/// first-order update fits `eps1` on the HAL pmf `hal`.
pub fn d2(p: &DiscretePmf, hal: &DiscretePmf, eps1: f64) -> Result<(Vec<f64>, DensityGradCtx)> {
    p.check_support(hal)?;
    let pr = &p.probs;
    let ht = &hal.probs;
    let dd = d1(p);
    let u: Vec<f64> = dd.iter().map(|d| 1.0 + eps1 * d).collect();
    if let Some(index) = u.iter().position(|v| *v <= 0.0) {
        return Err(PmfError::DegenerateDenominator { index });
    }
    let p1: Vec<f64> = pr.iter().zip(&u).map(|(p, u)| p * u).collect();
    let psi_p = psi(p);
    let psi_1: f64 = p1.iter().map(|v| v * v).sum();
    let d1u: Vec<f64> = p1.iter().map(|v| 2.0 * v - 2.0 * psi_1).collect();
    let m = pr.len();
    let c: f64 = (0..m).map(|i| ht[i] * dd[i] * dd[i] / (u[i] * u[i])).sum();
    let zero = vec![0.0; m];
    if c <= 0.0 {
        // D1_p vanishes on the HAL support: the first-order update is flat.
        return Ok((
            zero,
            DensityGradCtx {
                eps1,
                c,
                d: 0.0,
                psi: psi_p,
            },
        ));
    }
    let d = (0..m).map(|i| pr[i] * d1u[i] * dd[i]).sum::<f64>() / c;
    let pinv: f64 = (0..m).map(|i| ht[i] / (u[i] * u[i])).sum();
    let e_d1u: f64 = (0..m).map(|i| pr[i] * d1u[i]).sum();
    let cross: f64 = (0..m).map(|i| pr[i] * ht[i] / (u[i] * u[i])).sum();
    let sq_term: f64 = (0..m).map(|i| pr[i] * pr[i] * (d1u[i] - 2.0 * e_d1u)).sum();
    let grad = (0..m)
        .map(|i| {
            d1u[i] * u[i] + 2.0 * d * (ht[i] / (u[i] * u[i]) - 2.0 * pr[i] * pinv) - 2.0 * d * cross
                + 4.0 * d * psi_p * pinv
                + 2.0 * eps1 * pr[i] * (d1u[i] - 2.0 * e_d1u)
                - 2.0 * eps1 * sq_term
        })
        .collect();
    Ok((
        grad,
        DensityGradCtx {
            eps1,
            c,
            d,
            psi: psi_p,
        },
    ))
}

/// Unconstrained first-order MLE step on the HAL pmf and the matching D2.
pub fn d2_at(p: &DiscretePmf, hal: &DiscretePmf) -> Result<(Vec<f64>, DensityGradCtx)> {
    let eps1 = fit_eps(p, &d1(p), hal, None, EpsSolver::ScoreRoot)?;
    d2(p, hal, eps1)
}

/// `Psi` after the unconstrained HAL-fitted first-order update of `p`.
pub fn psi_n1(p: &DiscretePmf, hal: &DiscretePmf) -> Result<f64> {
    let (p1, _) = first_order_update(p, hal, None, EpsSolver::ScoreRoot)?;
    Ok(psi(&p1))
}

impl numeric::Perturb for DiscretePmf {
    type Direction = Vec<f64>;

    /// Moves along `(1 + delta h) p` for a `p`-centered direction `h`.
    fn perturb(&self, direction: &Vec<f64>, delta: f64) -> numeric::Result<Self> {
        self.fluctuate(direction, delta)
            .map_err(|e| NumericError::InvalidPerturbation(e.to_string()))
    }
}

/// Which measure fits the fluctuation parameters and evaluates stopping scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Regularized,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Start,
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub stage: Stage,
    pub eps: f64,
    pub ref_d1: f64,
    pub ref_d2: f64,
    pub loglik: f64,
    pub psi: f64,
    /// The pmf after this step.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TmleTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
}

impl TmleTrace {
    fn push(&mut self, stage: Stage, eps: f64, p: &DiscretePmf, reference: &DiscretePmf, d2v: Option<&[f64]>) {
        self.records.push(TraceRecord {
            stage,
            eps,
            ref_d1: reference.expect(&d1(p)),
            ref_d2: d2v.map_or(f64::NAN, |d| reference.expect(d)),
            loglik: p.loglik(reference),
            psi: psi(p),
            probs: p.probs.clone(),
        });
    }
}

/// Universal least-favorable path for the second-order target: repeated
/// `p <- (1 ± step D2_p) p` in the direction that raises the reference
/// log-likelihood, until `|reference D2| < tol`. When neither direction
/// improves, the step is halved (down to `step / 2^20`) before giving up.
pub fn second_order_update(
    p: &DiscretePmf,
    hal: &DiscretePmf,
    reference: &DiscretePmf,
    step: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(DiscretePmf, TmleTrace)> {
    let mut cur = p.clone();
    let mut trace = TmleTrace::default();
    let (mut grad, _) = d2_at(&cur, hal)?;
    trace.push(Stage::Start, 0.0, &cur, reference, Some(&grad));
    let mut h = step;
    let min_step = step / f64::powi(2.0, 20);
    for _ in 0..max_steps {
        if reference.expect(&grad).abs() < tol {
            trace.converged = true;
            return Ok((cur, trace));
        }
        let ll = cur.loglik(reference);
        let best = [h, -h]
            .into_iter()
            .filter_map(|e| cur.fluctuate(&grad, e).ok().map(|q| (e, q)))
            .map(|(e, q)| (e, q.loglik(reference), q))
            .filter(|(_, l, _)| *l > ll)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((e, _, q)) => {
                cur = q;
                grad = d2_at(&cur, hal)?.0;
                trace.push(Stage::Second, e, &cur, reference, Some(&grad));
            }
            None if h > min_step => h *= 0.5,
            None => return Ok((cur, trace)),
        }
    }
    Ok((cur, trace))
}

/// Second-order step flavour inside [`iterate_2tmle`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SecondOrderPath {
    /// Local path `(1 + eps D2) p` with `|eps| <= max_abs_eps`.
    Local { max_abs_eps: f64 },
    /// Universal path with the given step size.
    Universal { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateConfig {
    pub max_abs_eps1: f64,
    pub second: SecondOrderPath,
    /// Stopping tolerance; `None` means `1/n`.
    pub tol: Option<f64>,
    pub max_iterations: usize,
    pub solver: EpsSolver,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            max_abs_eps1: 0.1,
            second: SecondOrderPath::Local { max_abs_eps: 0.1 },
            tol: None,
            max_iterations: 500,
            solver: EpsSolver::ScoreRoot,
        }
    }
}

/// Per-support gradients at the final update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEvals {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl GradientEvals {
    pub fn total(&self) -> Vec<f64> {
        self.d1.iter().zip(&self.d2).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TmleResult {
    pub estimate: f64,
    pub pmf: DiscretePmf,
    pub gradients: GradientEvals,
    pub trace: TmleTrace,
    pub iterations: usize,
}

/// Reference measure used by `mode`.
pub fn reference_for<'a>(mode: Mode, hal: &'a DiscretePmf, empirical: &'a DiscretePmf) -> &'a DiscretePmf {
    match mode {
        Mode::Regularized => hal,
        Mode::Empirical => empirical,
    }
}

/// Iterated first-order TMLE: clamped local steps until `|reference D1| < tol`.
pub fn iterate_1tmle(
    p0: &DiscretePmf,
    reference: &DiscretePmf,
    tol: f64,
    max_abs_eps: f64,
    max_iterations: usize,
    solver: EpsSolver,
) -> Result<TmleResult> {
    let mut p = p0.clone();
    let mut trace = TmleTrace::default();
    trace.push(Stage::Start, 0.0, &p, reference, None);
    let mut it = 0;
    while reference.expect(&d1(&p)).abs() >= tol {
        if it == max_iterations {
            return Err(PmfError::MaxIterations {
                iterations: it,
                d1: reference.expect(&d1(&p)).abs(),
                d2: f64::NAN,
            });
        }
        let (q, eps) = first_order_update(&p, reference, Some(max_abs_eps), solver)?;
        if eps == 0.0 {
            break;
        }
        p = q;
        trace.push(Stage::First, eps, &p, reference, None);
        it += 1;
    }
    trace.converged = true;
    Ok(TmleResult {
        estimate: psi(&p),
        gradients: GradientEvals {
            d1: d1(&p),
            d2: vec![0.0; p.len()],
        },
        pmf: p,
        trace,
        iterations: it,
    })
}

/// Iterative second-order TMLE: a second-order update followed by a
/// first-order update, each skipped when its reference score is already
/// below `tol`, repeated until both scores are below `tol`.
pub fn iterate_2tmle(
    p0: &DiscretePmf,
    hal: &DiscretePmf,
    reference: &DiscretePmf,
    n: usize,
    cfg: &IterateConfig,
) -> Result<TmleResult> {
    p0.check_support(hal)?;
    p0.check_support(reference)?;
    let tol = cfg.tol.unwrap_or(1.0 / n as f64);
    let mut p = p0.clone();
    let mut trace = TmleTrace::default();
    let (mut grad2, _) = d2_at(&p, hal)?;
    trace.push(Stage::Start, 0.0, &p, reference, Some(&grad2));
    for it in 0..cfg.max_iterations {
        let p2 = if reference.expect(&grad2).abs() >= tol {
            match cfg.second {
                SecondOrderPath::Local { max_abs_eps } => {
                    let eps = fit_eps(&p, &grad2, reference, Some(max_abs_eps), cfg.solver)?;
                    let q = p.fluctuate(&grad2, eps)?;
                    grad2 = d2_at(&q, hal)?.0;
                    trace.push(Stage::Second, eps, &q, reference, Some(&grad2));
                    q
                }
                SecondOrderPath::Universal { step } => {
                    let (q, sub) = second_order_update(&p, hal, reference, step, tol, 100_000)?;
                    trace.records.extend(sub.records.into_iter().skip(1));
                    grad2 = d2_at(&q, hal)?.0;
                    q
                }
            }
        } else {
            p.clone()
        };
        let s2 = reference.expect(&grad2);
        let next = if reference.expect(&d1(&p2)).abs() >= tol {
            let (q, eps) = first_order_update(&p2, reference, Some(cfg.max_abs_eps1), cfg.solver)?;
            trace.push(Stage::First, eps, &q, reference, None);
            q
        } else {
            p2
        };
        let s1 = reference.expect(&d1(&next));
        if s1.abs() < tol && s2.abs() < tol {
            trace.converged = true;
            return Ok(TmleResult {
                estimate: psi(&next),
                gradients: GradientEvals {
                    d1: d1(&next),
                    d2: grad2,
                },
                pmf: next,
                trace,
                iterations: it,
            });
        }
        p = next;
        grad2 = d2_at(&p, hal)?.0;
    }
    Err(PmfError::MaxIterations {
        iterations: cfg.max_iterations,
        d1: reference.expect(&d1(&p)).abs(),
        d2: reference.expect(&grad2).abs(),
    })
}

/// Exact total remainder of the first-order update map at `p`:
/// `(hal - p0)(D1_{update(p)} - D1_{update(p0)}) + R1(update(p), p0)`,
/// with `update` the unconstrained HAL-fitted first-order step.
pub fn total_remainder(p: &DiscretePmf, hal: &DiscretePmf, p0: &DiscretePmf) -> Result<f64> {
    let (up, _) = first_order_update(p, hal, None, EpsSolver::ScoreRoot)?;
    let (u0, _) = first_order_update(p0, hal, None, EpsSolver::ScoreRoot)?;
    let (dp, d0) = (d1(&up), d1(&u0));
    let diff: f64 = (0..p.len())
        .map(|i| (hal.probs[i] - p0.probs[i]) * (dp[i] - d0[i]))
        .sum();
    Ok(diff + r1_exact(&up, p0)?)
}
