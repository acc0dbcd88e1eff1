//! Treatment-specific mean `Psi = E[E(Y | A = 1, W)]` for binary `A` and `Y`.
//!
//! Every estimate is evaluated on the sample: the `W`-marginal is the
//! (weighted) empirical measure of the observed `W_i`, so a state only needs
//! `gbar(W_i)` and `qbar(W_i, a)` for `a in {0, 1}`. Both are logistic
//! models stored as base logits plus a stack of frozen fluctuations.
//!
//! Expectations under the HAL state `P~` enumerate `A ~ g~(. | W_i)` and
//! `Y ~ q~(. | W_i, A)` exactly; nothing is sampled.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density2::Mode;
use crate::hal::{HalError, HalFit};
use crate::numeric::{self, clamp_prob, expit, logit, ConfidenceInterval, EmpiricalMeasure, NumericError, ScoreFunction1D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsmError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("qbar (1 - qbar) vanishes at observation {index}")]
    DegenerateDenominator { index: usize },
    #[error("universal path stalled after {steps} steps (|score| = {score:e})")]
    PathStalled { steps: usize, score: f64 },
    #[error("no convergence after {rounds} rounds (scores {scores:?})")]
    MaxIterations { rounds: usize, scores: StopScores },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Hal(#[from] HalError),
}

pub type Result<T> = std::result::Result<T, TsmError>;

/// Observations `(W, A, Y)` with optional non-uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TsmData {
    w: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    weights: Vec<f64>,
}

impl TsmData {
    pub fn new(w: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = w.len();
        Self::with_weights(w, a, y, vec![1.0 / n.max(1) as f64; n])
    }

    /// Weighted rows, e.g. a discrete `W` law with one row per support point.
    pub fn with_weights(w: Vec<f64>, a: Vec<f64>, y: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = w.len();
        if n == 0 {
            return Err(TsmError::InvalidData("no observations".into()));
        }
        if a.len() != n || y.len() != n || weights.len() != n {
            return Err(TsmError::InvalidData(format!(
                "lengths differ: W {n}, A {}, Y {}, weights {}",
                a.len(),
                y.len(),
                weights.len()
            )));
        }
        if w.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(TsmError::InvalidData("non-finite W or Y".into()));
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(TsmError::InvalidData("A must be 0 or 1".into()));
        }
        if !a.iter().any(|&v| v == 1.0) {
            return Err(TsmError::InvalidData("no treated (A = 1) observation".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(TsmError::InvalidData(format!("weights must be non-negative and sum to 1 (sum {total})")));
        }
        Ok(Self { w, a, y, weights })
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_binary_outcome(&self) -> bool {
        self.y.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// `W`-marginal shared by every state built on this data.
    pub fn marginal(&self) -> Arc<EmpiricalMeasure<f64>> {
        Arc::new(EmpiricalMeasure::weighted(self.w.clone(), self.weights.clone()).expect("validated weights"))
    }

    /// Covariates `[W]` for the treatment model.
    pub fn g_points(&self) -> Vec<Vec<f64>> {
        self.w.iter().map(|&w| vec![w]).collect()
    }

    /// Covariates `[W, A]` for the outcome model.
    pub fn q_points(&self) -> Vec<Vec<f64>> {
        self.w.iter().zip(&self.a).map(|(&w, &a)| vec![w, a]).collect()
    }

    fn mean(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| w * f(i)).sum()
    }
}

/// One frozen logistic fluctuation: `logit += eps * covariate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fluctuation {
    /// Covariate values per arm and observation, evaluated when fitted.
    pub covariate: Arc<Vec<Vec<f64>>>,
    pub eps: f64,
}

/// A logistic model on the sample, one column of logits per arm.
///
/// Predictions are `expit(base + sum eps_j cov_j)` clamped to
/// `[bound, 1 - bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuatedModel {
    base: Arc<Vec<Vec<f64>>>,
    fluctuations: Vec<Fluctuation>,
    logits: Vec<Vec<f64>>,
    bound: f64,
}

impl FluctuatedModel {
    pub fn from_logits(arms: Vec<Vec<f64>>, bound: f64) -> Result<Self> {
        if arms.is_empty() || arms.iter().any(|c| c.len() != arms[0].len()) {
            return Err(TsmError::InvalidData("arms must be non-empty and of equal length".into()));
        }
        if arms.iter().flatten().any(|v| v.is_nan()) {
            return Err(TsmError::InvalidData("NaN logit".into()));
        }
        if !(0.0..0.5).contains(&bound) {
            return Err(TsmError::InvalidData(format!("bound {bound} outside [0, 0.5)")));
        }
        Ok(Self {
            logits: arms.clone(),
            base: Arc::new(arms),
            fluctuations: Vec::new(),
            bound,
        })
    }

    /// Probabilities are clamped into `[bound, 1 - bound]` before the logit.
    pub fn from_probs(arms: Vec<Vec<f64>>, bound: f64) -> Result<Self> {
        if arms.iter().flatten().any(|p| p.is_nan()) {
            return Err(TsmError::InvalidData("NaN probability".into()));
        }
        let logits = arms
            .into_iter()
            .map(|c| c.into_iter().map(|p| logit(clamp_prob(p, bound.max(1e-300)))).collect())
            .collect();
        Self::from_logits(logits, bound)
    }

    pub fn arms(&self) -> usize {
        self.base.len()
    }

    pub fn len(&self) -> usize {
        self.base[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn fluctuations(&self) -> &[Fluctuation] {
        &self.fluctuations
    }

    /// Unclamped linear predictor.
    pub fn logit(&self, arm: usize, i: usize) -> f64 {
        self.logits[arm][i]
    }

    pub fn predict(&self, arm: usize, i: usize) -> f64 {
        clamp_prob(expit(self.logits[arm][i]), self.bound)
    }

    pub fn predictions(&self, arm: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.predict(arm, i)).collect()
    }

    /// Appends `logit += eps * covariate`; the covariate is frozen.
    pub fn fluctuate(&self, covariate: Vec<Vec<f64>>, eps: f64) -> Self {
        assert_eq!(covariate.len(), self.arms(), "covariate arms");
        let mut out = self.clone();
        for (col, cov) in out.logits.iter_mut().zip(&covariate) {
            assert_eq!(col.len(), cov.len(), "covariate length");
            for (l, c) in col.iter_mut().zip(cov) {
                *l += eps * c;
            }
        }
        out.fluctuations.push(Fluctuation {
            covariate: Arc::new(covariate),
            eps,
        });
        out
    }
}

/// Positivity and outcome clamping constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub g_min: f64,
    pub q_bound: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            g_min: 0.005,
            q_bound: 1e-6,
        }
    }
}

/// `P = (q_W, gbar, qbar)` evaluated on the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TsmState {
    qw: Arc<EmpiricalMeasure<f64>>,
    gbar: FluctuatedModel,
    qbar: FluctuatedModel,
}

impl TsmState {
    pub fn new(qw: Arc<EmpiricalMeasure<f64>>, gbar: FluctuatedModel, qbar: FluctuatedModel) -> Result<Self> {
        let n = qw.points().len();
        if gbar.arms() != 1 || qbar.arms() != 2 {
            return Err(TsmError::InvalidData("gbar needs one arm and qbar two".into()));
        }
        if gbar.len() != n || qbar.len() != n {
            return Err(TsmError::InvalidData("model length differs from the W sample".into()));
        }
        Ok(Self { qw, gbar, qbar })
    }

    /// State from probabilities `gbar(W_i)`, `qbar(W_i, 0)`, `qbar(W_i, 1)`.
    pub fn from_probs(data: &TsmData, g: Vec<f64>, q0: Vec<f64>, q1: Vec<f64>, bounds: Bounds) -> Result<Self> {
        Self::new(
            data.marginal(),
            FluctuatedModel::from_probs(vec![g], bounds.g_min)?,
            FluctuatedModel::from_probs(vec![q0, q1], bounds.q_bound)?,
        )
    }

    /// State from a treatment fit on `[W]` and an outcome fit on `[W, A]`.
    pub fn from_hal(data: &TsmData, g: &HalFit, q: &HalFit, bounds: Bounds) -> Result<Self> {
        let lg = data.w.iter().map(|&w| g.predict_linear(&[w])).collect();
        let lq0 = data.w.iter().map(|&w| q.predict_linear(&[w, 0.0])).collect();
        let lq1 = data.w.iter().map(|&w| q.predict_linear(&[w, 1.0])).collect();
        Self::new(
            data.marginal(),
            FluctuatedModel::from_logits(vec![lg], bounds.g_min)?,
            FluctuatedModel::from_logits(vec![lq0, lq1], bounds.q_bound)?,
        )
    }

    pub fn qw(&self) -> &Arc<EmpiricalMeasure<f64>> {
        &self.qw
    }

    pub fn gbar(&self) -> &FluctuatedModel {
        &self.gbar
    }

    pub fn qbar(&self) -> &FluctuatedModel {
        &self.qbar
    }

    /// Truncated propensity, used wherever `gbar` divides or weights.
    pub fn g(&self, i: usize) -> f64 {
        self.gbar.predict(0, i)
    }

    /// Untruncated propensity, used in residuals `A - gbar` and likelihoods
    /// so that scores stay the derivatives of the likelihood they belong to.
    pub fn g_fit(&self, i: usize) -> f64 {
        expit(self.gbar.logit(0, i))
    }

    pub fn q(&self, a: f64, i: usize) -> f64 {
        self.qbar.predict(a as usize, i)
    }

    fn with_models(&self, gbar: FluctuatedModel, qbar: FluctuatedModel) -> Self {
        Self {
            qw: self.qw.clone(),
            gbar,
            qbar,
        }
    }

    fn check(&self, other: &TsmState, data: &TsmData) -> Result<()> {
        if self.gbar.len() != data.n() || other.gbar.len() != data.n() {
            return Err(TsmError::InvalidData("state and data sizes differ".into()));
        }
        Ok(())
    }
}

/// Tangent direction: `logit qbar += delta C1(W, A)`, `logit gbar += delta C2(W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TsmDirection {
    pub q: [Vec<f64>; 2],
    pub g: Vec<f64>,
}

impl numeric::Perturb for TsmState {
    type Direction = TsmDirection;

    fn perturb(&self, d: &TsmDirection, delta: f64) -> numeric::Result<Self> {
        Ok(self.with_models(
            self.gbar.fluctuate(vec![d.g.clone()], delta),
            self.qbar.fluctuate(d.q.to_vec(), delta),
        ))
    }
}

/// Plug-in `Psi(P) = sum_i w_i qbar(W_i, 1)`.
pub fn psi(state: &TsmState, data: &TsmData) -> f64 {
    data.mean(|i| state.q(1.0, i))
}

/// `D1_P(O_i) = A_i / gbar(W_i) (Y_i - qbar(W_i, A_i))`.
pub fn d1_eval(state: &TsmState, data: &TsmData) -> Vec<f64> {
    (0..data.n())
        .map(|i| data.a[i] / state.g(i) * (data.y[i] - state.q(data.a[i], i)))
        .collect()
}

fn solve_eps<F: Fn(f64) -> f64>(score: F) -> Result<f64> {
    // Already solved: a flat clamped score may never change sign.
    if score(0.0).abs() < 1e-14 {
        return Ok(0.0);
    }
    match numeric::solve_score_near(&ScoreFunction1D::new(&score, -10.0, 10.0), 0.0, 0.05, 0.0, 4000) {
        Err(NumericError::NoBracket { .. }) => {
            Ok(numeric::solve_score_near(&ScoreFunction1D::new(&score, -100.0, 100.0), 0.0, 0.05, 0.0, 4000)?)
        }
        r => Ok(r?),
    }
}

/// Score in `eps` of the first-order fluctuation `logit qbar + eps A / gbar`.
///
/// Regularized: `sum_i w_i g~/gbar (q~(W_i,1) - qbar_eps(W_i,1))`.
/// Empirical: `sum_i w_i A_i/gbar (Y_i - qbar_eps(W_i,1))`.
pub fn eps1_score(state: &TsmState, hal: &TsmState, mode: Mode, data: &TsmData, eps: f64) -> f64 {
    let b = state.qbar.bound();
    match mode {
        Mode::Regularized => data.mean(|i| {
            let g = state.g(i);
            hal.g_fit(i) / g * (hal.q(1.0, i) - clamp_prob(expit(state.qbar.logit(1, i) + eps / g), b))
        }),
        Mode::Empirical => data.mean(|i| {
            if data.a[i] == 0.0 {
                return 0.0;
            }
            let g = state.g(i);
            (data.y[i] - clamp_prob(expit(state.qbar.logit(1, i) + eps / g), b)) / g
        }),
    }
}

/// Fluctuation parameter of the first-order update under `mode`.
pub fn eps1_solve(state: &TsmState, hal: &TsmState, mode: Mode, data: &TsmData) -> Result<f64> {
    state.check(hal, data)?;
    solve_eps(|e| eps1_score(state, hal, mode, data, e))
}

fn cg_covariate(state: &TsmState) -> Vec<Vec<f64>> {
    let n = state.gbar.len();
    vec![vec![0.0; n], (0..n).map(|i| 1.0 / state.g(i)).collect()]
}

/// First-order TMLE update: `qbar` moves along `A / gbar`, `gbar` is kept.
pub fn first_order_update(state: &TsmState, hal: &TsmState, mode: Mode, data: &TsmData) -> Result<(TsmState, f64)> {
    let eps = eps1_solve(state, hal, mode, data)?;
    let q = state.qbar.fluctuate(cg_covariate(state), eps);
    Ok((state.with_models(state.gbar.clone(), q), eps))
}

/// Quantities of the second-order gradient at `P` given the HAL state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsmGradCtx {
    pub c1: f64,
    pub ctilde: f64,
    pub eps1: f64,
    /// First-order update `qbar^(1)(W_i, 1)` with the regularized `eps1`.
    pub qbar1_update: Vec<f64>,
}

pub fn grad_ctx(state: &TsmState, hal: &TsmState, data: &TsmData) -> Result<TsmGradCtx> {
    let eps1 = eps1_solve(state, hal, Mode::Regularized, data)?;
    let b = state.qbar.bound();
    let q11: Vec<f64> = (0..data.n())
        .map(|i| clamp_prob(expit(state.qbar.logit(1, i) + eps1 / state.g(i)), b))
        .collect();
    let c1 = data.mean(|i| {
        let g = state.g(i);
        hal.g_fit(i) / (g * g) * q11[i] * (1.0 - q11[i])
    });
    let num = data.mean(|i| q11[i] * (1.0 - q11[i]) / state.g(i));
    if !(c1 > 0.0) {
        return Err(TsmError::InvalidData(format!("c1 = {c1} is not positive")));
    }
    Ok(TsmGradCtx {
        c1,
        ctilde: num / c1,
        eps1,
        qbar1_update: q11,
    })
}

/// Clever covariates of the second-order gradient
/// `D2 = C^y(W, A) (Y - qbar) + C^a(W) (A - gbar)` with `C^y = A cy1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CleverCovariates {
    pub cy1: Vec<f64>,
    pub ca: Vec<f64>,
}

impl CleverCovariates {
    pub fn cy(&self, a: f64, i: usize) -> f64 {
        a * self.cy1[i]
    }

    fn q_arms(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.cy1.len()], self.cy1.clone()]
    }
}

/// `(C~^y, C^a)` at one `W` from its ingredients. `ratio` is
/// `q1^(1)(1 - q1^(1)) / (q1 (1 - q1))` and `var11` is `q1^(1)(1 - q1^(1))`.
#[allow(clippy::too_many_arguments)]
fn binary_terms(g: f64, gt: f64, ratio: f64, var11: f64, qt1: f64, q11: f64, eps1: f64, ctilde: f64) -> (f64, f64) {
    let k = 1.0 - ctilde * gt / g;
    let cy1 = ratio * k / g;
    let ca = -eps1 * var11 / (g * g) * k - ctilde * gt / (g * g) * (qt1 - q11);
    (cy1, ca)
}

pub fn clever_covariates(state: &TsmState, hal: &TsmState, ctx: &TsmGradCtx, data: &TsmData) -> Result<CleverCovariates> {
    let n = data.n();
    let mut cy1 = Vec::with_capacity(n);
    let mut ca = Vec::with_capacity(n);
    for i in 0..n {
        let q1 = state.q(1.0, i);
        let den = q1 * (1.0 - q1);
        if !(den > 0.0) {
            return Err(TsmError::DegenerateDenominator { index: i });
        }
        let q11 = ctx.qbar1_update[i];
        let v = q11 * (1.0 - q11);
        let (y, a) = binary_terms(state.g(i), hal.g_fit(i), v / den, v, hal.q(1.0, i), q11, ctx.eps1, ctx.ctilde);
        cy1.push(y);
        ca.push(a);
    }
    Ok(CleverCovariates { cy1, ca })
}

/// Context and covariates in one call.
pub fn covariates(state: &TsmState, hal: &TsmState, data: &TsmData) -> Result<(TsmGradCtx, CleverCovariates)> {
    let ctx = grad_ctx(state, hal, data)?;
    let cov = clever_covariates(state, hal, &ctx, data)?;
    Ok((ctx, cov))
}

/// Per-observation `D2_{n,P}(O_i)`.
pub fn d2_eval(state: &TsmState, hal: &TsmState, data: &TsmData) -> Result<Vec<f64>> {
    let (_, cov) = covariates(state, hal, data)?;
    Ok(d2_values(state, &cov, data))
}

fn d2_values(state: &TsmState, cov: &CleverCovariates, data: &TsmData) -> Vec<f64> {
    (0..data.n())
        .map(|i| {
            let a = data.a[i];
            cov.cy(a, i) * (data.y[i] - state.q(a, i)) + cov.ca[i] * (a - state.g_fit(i))
        })
        .collect()
}

/// `P~ D1_P`, enumerating `A` and `Y` under the HAL state.
pub fn ptilde_d1(state: &TsmState, hal: &TsmState, data: &TsmData) -> f64 {
    data.mean(|i| hal.g_fit(i) / state.g(i) * (hal.q(1.0, i) - state.q(1.0, i)))
}

pub fn pn_d1(state: &TsmState, data: &TsmData) -> f64 {
    data.mean(|i| data.a[i] / state.g(i) * (data.y[i] - state.q(data.a[i], i)))
}

/// `P~ D2` for covariates derived at `state`.
pub fn ptilde_d2(state: &TsmState, hal: &TsmState, cov: &CleverCovariates, data: &TsmData) -> f64 {
    data.mean(|i| hal.g_fit(i) * cov.cy1[i] * (hal.q(1.0, i) - state.q(1.0, i)) + cov.ca[i] * (hal.g_fit(i) - state.g_fit(i)))
}

pub fn pn_d2(state: &TsmState, cov: &CleverCovariates, data: &TsmData) -> f64 {
    data.mean(|i| {
        let a = data.a[i];
        cov.cy(a, i) * (data.y[i] - state.q(a, i)) + cov.ca[i] * (a - state.g_fit(i))
    })
}

fn reference_d2(state: &TsmState, hal: &TsmState, cov: &CleverCovariates, mode: Mode, data: &TsmData) -> f64 {
    let (y, a) = reference_d2_parts(state, hal, cov, mode, data);
    y + a
}

/// The `C^y` and `C^a` components of the reference score of `D2`.
fn reference_d2_parts(state: &TsmState, hal: &TsmState, cov: &CleverCovariates, mode: Mode, data: &TsmData) -> (f64, f64) {
    match mode {
        Mode::Regularized => (
            data.mean(|i| hal.g_fit(i) * cov.cy1[i] * (hal.q(1.0, i) - state.q(1.0, i))),
            data.mean(|i| cov.ca[i] * (hal.g_fit(i) - state.g_fit(i))),
        ),
        Mode::Empirical => (
            data.mean(|i| data.a[i] * cov.cy1[i] * (data.y[i] - state.q(1.0, i))),
            data.mean(|i| cov.ca[i] * (data.a[i] - state.g_fit(i))),
        ),
    }
}

/// Log-likelihood of `(gbar, qbar)` under the reference measure.
pub fn loglik(state: &TsmState, hal: &TsmState, mode: Mode, data: &TsmData) -> f64 {
    use numeric::bernoulli_loglik as ll;
    match mode {
        Mode::Empirical => data.mean(|i| {
            let a = data.a[i];
            ll(a, state.g_fit(i)) + ll(data.y[i], state.q(a, i))
        }),
        Mode::Regularized => data.mean(|i| {
            let gt = hal.g_fit(i);
            ll(gt, state.g_fit(i)) + gt * ll(hal.q(1.0, i), state.q(1.0, i)) + (1.0 - gt) * ll(hal.q(0.0, i), state.q(0.0, i))
        }),
    }
}

/// `loglik` on the unclamped linear predictors, which keeps its gradient
/// along a fluctuation equal to the score wherever a clamp is active.
fn logit_loglik(state: &TsmState, hal: &TsmState, mode: Mode, data: &TsmData) -> f64 {
    let ll = |y: f64, l: f64| y * numeric::log_expit(l) + (1.0 - y) * numeric::log_expit(-l);
    let (g, q) = (&state.gbar, &state.qbar);
    match mode {
        Mode::Empirical => data.mean(|i| {
            let a = data.a[i];
            ll(a, g.logit(0, i)) + ll(data.y[i], q.logit(a as usize, i))
        }),
        Mode::Regularized => data.mean(|i| {
            let gt = hal.g_fit(i);
            ll(gt, g.logit(0, i)) + gt * ll(hal.q(1.0, i), q.logit(1, i)) + (1.0 - gt) * ll(hal.q(0.0, i), q.logit(0, i))
        }),
    }
}

/// Second-order fluctuation flavour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SecondOrderMethod {
    /// `logit qbar + e1 C^y`, `logit gbar + e2 C^a` with both fitted once.
    OneStep,
    /// Small steps along the re-derived covariates, in the direction of the
    /// component score vector, until both component scores are below `tol`.
    Universal { step: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondOrderOutcome {
    pub steps: usize,
    /// Reference score `P D2` at the returned state (covariates derived there).
    pub score: f64,
    /// `(e1, e2)`: fitted for one-step updates, summed steps along the
    /// universal path.
    pub eps: (f64, f64),
    /// The universal path ended because no step raised the log-likelihood.
    pub stalled: bool,
}

/// Second-order TMLE update of `state` targeting `Psi_n^(1)`.
pub fn second_order_update(
    state: &TsmState,
    hal: &TsmState,
    mode: Mode,
    method: SecondOrderMethod,
    data: &TsmData,
    tol: f64,
    max_steps: usize,
) -> Result<(TsmState, SecondOrderOutcome)> {
    state.check(hal, data)?;
    match method {
        SecondOrderMethod::OneStep => {
            let (_, cov) = covariates(state, hal, data)?;
            let (e1, e2) = onestep_eps(state, hal, &cov, mode, data)?;
            let next = state.with_models(
                state.gbar.fluctuate(vec![cov.ca.clone()], e2),
                state.qbar.fluctuate(cov.q_arms(), e1),
            );
            let (_, cov2) = covariates(&next, hal, data)?;
            let score = reference_d2(&next, hal, &cov2, mode, data);
            Ok((next, SecondOrderOutcome { steps: 1, score, eps: (e1, e2), stalled: false }))
        }
        SecondOrderMethod::Universal { step } => universal_path(state, hal, mode, step, data, tol, max_steps),
    }
}

fn onestep_eps(state: &TsmState, hal: &TsmState, cov: &CleverCovariates, mode: Mode, data: &TsmData) -> Result<(f64, f64)> {
    let bq = state.qbar.bound();
    let e1 = match mode {
        Mode::Regularized => solve_eps(|e| {
            data.mean(|i| {
                let c = cov.cy1[i];
                hal.g_fit(i) * c * (hal.q(1.0, i) - clamp_prob(expit(state.qbar.logit(1, i) + e * c), bq))
            })
        })?,
        Mode::Empirical => solve_eps(|e| {
            data.mean(|i| {
                if data.a[i] == 0.0 {
                    return 0.0;
                }
                let c = cov.cy1[i];
                c * (data.y[i] - clamp_prob(expit(state.qbar.logit(1, i) + e * c), bq))
            })
        })?,
    };
    let target = |i: usize| match mode {
        Mode::Regularized => hal.g_fit(i),
        Mode::Empirical => data.a[i],
    };
    let e2 = solve_eps(|e| {
        data.mean(|i| {
            let c = cov.ca[i];
            c * (target(i) - expit(state.gbar.logit(0, i) + e * c))
        })
    })?;
    Ok((e1, e2))
}

fn universal_path(
    state: &TsmState,
    hal: &TsmState,
    mode: Mode,
    step: f64,
    data: &TsmData,
    tol: f64,
    max_steps: usize,
) -> Result<(TsmState, SecondOrderOutcome)> {
    let mut cur = state.clone();
    let (_, mut cov) = covariates(&cur, hal, data)?;
    let mut parts = reference_d2_parts(&cur, hal, &cov, mode, data);
    let mut ll = logit_loglik(&cur, hal, mode, data);
    let mut h = step;
    let min_step = step / f64::powi(2.0, 30);
    let mut steps = 0;
    let mut total = (0.0, 0.0);
    let mut stalled = false;
    // Both component equations are solved, so their sum is as well.
    while parts.0.abs() + parts.1.abs() >= tol {
        if h < min_step {
            // Clamped predictions can flatten the likelihood before the
            // score reaches zero; the path ends at its likelihood maximum.
            stalled = true;
            break;
        }
        if steps >= max_steps {
            return Err(TsmError::PathStalled {
                steps,
                score: parts.0.abs() + parts.1.abs(),
            });
        }
        let norm = parts.0.hypot(parts.1);
        let (ey, ea) = (h * parts.0 / norm, h * parts.1 / norm);
        let cand = cur.with_models(
            cur.gbar.fluctuate(vec![cov.ca.clone()], ea),
            cur.qbar.fluctuate(cov.q_arms(), ey),
        );
        let cand_ll = logit_loglik(&cand, hal, mode, data);
        if cand_ll > ll {
            let (_, c) = covariates(&cand, hal, data)?;
            cur = cand;
            ll = cand_ll;
            parts = reference_d2_parts(&cur, hal, &c, mode, data);
            cov = c;
            total = (total.0 + ey, total.1 + ea);
            steps += 1;
        } else {
            h *= 0.5;
        }
    }
    Ok((
        cur,
        SecondOrderOutcome {
            steps,
            score: parts.0 + parts.1,
            eps: total,
            stalled,
        },
    ))
}

/// Maximizes `sum_i w_i loglik(y_i, expit(offset_i + x_i' eps))` over `eps`.
///
/// Damped Newton with an SVD solve (collinear covariates are handled by the
/// pseudo-inverse); coordinatewise root finding takes over if Newton stalls.
pub fn offset_logistic_mle(x: &[Vec<f64>], y: &[f64], offset: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let k = x.len();
    let n = y.len();
    if x.iter().any(|c| c.len() != n) || offset.len() != n || weights.len() != n {
        return Err(TsmError::InvalidData("offset regression inputs differ in length".into()));
    }
    let eta = |eps: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| offset[i] + (0..k).map(|j| eps[j] * x[j][i]).sum::<f64>())
            .collect()
    };
    let objective = |e: &[f64]| -> f64 {
        eta(e)
            .iter()
            .enumerate()
            .map(|(i, &t)| weights[i] * (y[i] * numeric::log_expit(t) + (1.0 - y[i]) * numeric::log_expit(-t)))
            .sum()
    };
    let gradient = |e: &[f64]| -> (Vec<f64>, DMatrix<f64>) {
        let t = eta(e);
        let mut g = vec![0.0; k];
        let mut h = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = expit(t[i]);
            let r = weights[i] * (y[i] - p);
            let v = weights[i] * p * (1.0 - p);
            for a in 0..k {
                g[a] += r * x[a][i];
                for b in 0..=a {
                    h[(a, b)] += v * x[a][i] * x[b][i];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        (g, h)
    };
    let scale = x.iter().map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).collect::<Vec<_>>();
    let done = |g: &[f64]| g.iter().zip(&scale).all(|(gi, s)| gi.abs() <= 1e-13 * (1.0 + s));
    let mut eps = vec![0.0; k];
    let mut obj = objective(&eps);
    for _ in 0..200 {
        let (g, h) = gradient(&eps);
        if done(&g) {
            return Ok(eps);
        }
        let svd = h.svd(true, true);
        let tol = svd.singular_values.max() * 1e-12;
        let Ok(dir) = svd.solve(&DVector::from_vec(g.clone()), tol) else {
            break;
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = (0..k).map(|j| eps[j] + t * dir[j]).collect();
            let o = objective(&trial);
            if o >= obj {
                moved = o > obj || trial != eps;
                eps = trial;
                obj = o;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    // Coordinatewise fallback: cycle exact one-dimensional score roots.
    for _ in 0..1000 {
        let (g, _) = gradient(&eps);
        if done(&g) {
            break;
        }
        for j in 0..k {
            if scale[j] == 0.0 {
                continue;
            }
            let base = eps.clone();
            eps[j] = solve_eps(|e| {
                let mut trial = base.clone();
                trial[j] = e;
                let t = eta(&trial);
                (0..n).map(|i| weights[i] * x[j][i] * (y[i] - expit(t[i]))).sum()
            })?;
        }
    }
    Ok(eps)
}

/// Fitted parameters of [`target_hal`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetingFit {
    /// Coefficients on `(A / gbar, C^y)`.
    pub eps_q: Vec<f64>,
    /// Coefficients on `(C^a, (q~* - qbar)/gbar, (q~* - qbar) C~^y)`.
    pub eps_g: Vec<f64>,
}

/// Targets the HAL state so that `(P~ - Pn) D1_P` and `(P~ - Pn) D2_{n,P}`
/// vanish at the given `state`.
pub fn target_hal(hal: &TsmState, state: &TsmState, data: &TsmData) -> Result<(TsmState, TargetingFit)> {
    state.check(hal, data)?;
    let n = data.n();
    let (_, cov) = covariates(state, hal, data)?;
    let inv_g: Vec<f64> = (0..n).map(|i| 1.0 / state.g(i)).collect();
    let xq = [&inv_g, &cov.cy1]
        .iter()
        .map(|c| (0..n).map(|i| data.a[i] * c[i]).collect())
        .collect::<Vec<Vec<f64>>>();
    let offq: Vec<f64> = (0..n).map(|i| hal.qbar.logit(data.a[i] as usize, i)).collect();
    let eq = offset_logistic_mle(&xq, &data.y, &offq, &data.weights)?;
    let mut qbar = hal.qbar.clone();
    for (c, &e) in [&inv_g, &cov.cy1].iter().zip(&eq) {
        qbar = qbar.fluctuate(vec![vec![0.0; n], c.to_vec()], e);
    }
    let hal_q = hal.with_models(hal.gbar.clone(), qbar);

    let (_, cov2) = covariates(state, &hal_q, data)?;
    let diff: Vec<f64> = (0..n).map(|i| hal_q.q(1.0, i) - state.q(1.0, i)).collect();
    let xg = vec![
        cov2.ca.clone(),
        (0..n).map(|i| diff[i] * inv_g[i]).collect(),
        (0..n).map(|i| diff[i] * cov2.cy1[i]).collect(),
    ];
    let offg: Vec<f64> = (0..n).map(|i| hal.gbar.logit(0, i)).collect();
    let eg = offset_logistic_mle(&xg, &data.a, &offg, &data.weights)?;
    let mut gbar = hal.gbar.clone();
    for (c, &e) in xg.into_iter().zip(&eg) {
        gbar = gbar.fluctuate(vec![c], e);
    }
    Ok((hal_q.with_models(gbar, hal_q.qbar.clone()), TargetingFit { eps_q: eq, eps_g: eg }))
}

/// The four stopping scores of the iterative second-order TMLE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopScores {
    pub pn_d1: f64,
    pub ptilde_d1: f64,
    pub pn_d2: f64,
    pub ptilde_d2: f64,
}

impl StopScores {
    pub fn max_abs(&self) -> f64 {
        [self.pn_d1, self.ptilde_d1, self.pn_d2, self.ptilde_d2]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `max(|(Pn - P~) D1|, |(Pn - P~) D2|)`, the iteration's stopping score.
    pub fn gap(&self) -> f64 {
        (self.pn_d1 - self.ptilde_d1).abs().max((self.pn_d2 - self.ptilde_d2).abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub mode: Mode,
    pub method: SecondOrderMethod,
    /// Stopping tolerance; `None` means `1/n`.
    pub tol: Option<f64>,
    pub max_rounds: usize,
    pub max_steps: usize,
    pub target_hal: bool,
    pub level: f64,
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Empirical,
            method: SecondOrderMethod::Universal { step: 0.01 },
            tol: None,
            max_rounds: 50,
            max_steps: 100_000,
            target_hal: true,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsmEstimate {
    pub first: ConfidenceInterval,
    pub second: ConfidenceInterval,
    pub rounds: usize,
    pub path_steps: usize,
    pub scores: StopScores,
}

/// Standard first-order TMLE from `initial`.
pub fn first_order_tmle(
    initial: &TsmState,
    hal: &TsmState,
    data: &TsmData,
    cfg: &TsmConfig,
) -> Result<(TsmState, ConfidenceInterval)> {
    let (st, _) = first_order_update(initial, hal, cfg.mode, data)?;
    let ci = numeric::influence_ci(psi(&st, data), &d1_eval(&st, data), cfg.level)?;
    Ok((st, ci))
}

/// Iterative second-order TMLE that re-targets the HAL state each round.
///
/// Each round targets the HAL state at the current initial, applies the
/// second-order update and then the first-order update, and stops when
/// `|(Pn - P~) D1|` and `|(Pn - P~) D2|` are both below `tol`.
pub fn iterative_2tmle(initial: &TsmState, hal: &TsmState, data: &TsmData, cfg: &TsmConfig) -> Result<TsmEstimate> {
    initial.check(hal, data)?;
    let tol = cfg.tol.unwrap_or(1.0 / data.n() as f64);
    let (_, first) = first_order_tmle(initial, hal, data, cfg)?;
    let mut state = initial.clone();
    let mut hal = hal.clone();
    let mut path_steps = 0;
    let mut scores = None;
    for round in 1..=cfg.max_rounds {
        if cfg.target_hal {
            hal = target_hal(&hal, &state, data)?.0;
        }
        let (s2, out) = second_order_update(&state, &hal, cfg.mode, cfg.method, data, tol, cfg.max_steps)?;
        path_steps += out.steps;
        let (s3, _) = first_order_update(&s2, &hal, cfg.mode, data)?;
        let (_, cov) = covariates(&s2, &hal, data)?;
        let sc = StopScores {
            pn_d1: pn_d1(&s3, data),
            ptilde_d1: ptilde_d1(&s3, &hal, data),
            pn_d2: pn_d2(&s2, &cov, data),
            ptilde_d2: ptilde_d2(&s2, &hal, &cov, data),
        };
        scores = Some(sc);
        if sc.gap() < tol {
            let ic: Vec<f64> = (0..data.n())
                .map(|i| {
                    let (a, y) = (data.a[i], data.y[i]);
                    cov.cy(a, i) * (y - s2.q(a, i)) + cov.ca[i] * (a - s2.g_fit(i)) + a / s3.g(i) * (y - s3.q(a, i))
                })
                .collect();
            let second = numeric::influence_ci(psi(&s3, data), &ic, cfg.level)?;
            return Ok(TsmEstimate {
                first,
                second,
                rounds: round,
                path_steps,
                scores: sc,
            });
        }
        state = s3;
    }
    Err(TsmError::MaxIterations {
        rounds: cfg.max_rounds,
        scores: scores.expect("at least one round"),
    })
}

/// `Psi_n^(1)(P)`: the plug-in at the regularized first-order update.
pub fn psi_n1(state: &TsmState, hal: &TsmState, data: &TsmData) -> Result<f64> {
    Ok(psi(&first_order_update(state, hal, Mode::Regularized, data)?.0, data))
}

/// `R1(P, P0) = P0 (qbar_1 - qbar_10)(gbar - gbar_0) / gbar` on the sample's
/// `W` law, with the truth given at each `W_i`.
pub fn r1_exact_tsm(state: &TsmState, q10: &[f64], g0: &[f64], data: &TsmData) -> f64 {
    data.mean(|i| {
        let g = state.g(i);
        (state.q(1.0, i) - q10[i]) * (g - g0[i]) / g
    })
}

/// `R1` for `W ~ U(-1, 1)` by adaptive quadrature.
pub fn r1_exact_uniform(
    q1: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    q10: impl Fn(f64) -> f64,
    g0: impl Fn(f64) -> f64,
    tol: f64,
) -> f64 {
    0.5 * numeric::integrate(|w| (q1(w) - q10(w)) * (g(w) - g0(w)) / g(w), -1.0, 1.0, tol)
}

/// `gbar(W_i)`, `qbar(W_i, 0)`, `qbar(W_i, 1)` for a continuous outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearArms {
    pub g: Vec<f64>,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
}

/// Second-order gradient for a continuous outcome with the linear
/// fluctuation `qbar + eps A / gbar` fitted by least squares under `P~`.
pub fn d2_continuous(state: &LinearArms, hal: &LinearArms, data: &TsmData) -> Result<Vec<f64>> {
    let n = data.n();
    if [&state.g, &state.q0, &state.q1, &hal.g, &hal.q0, &hal.q1].iter().any(|v| v.len() != n) {
        return Err(TsmError::InvalidData("arm lengths differ from data".into()));
    }
    let num = data.mean(|i| hal.g[i] * (hal.q1[i] - state.q1[i]) / state.g[i]);
    let den = data.mean(|i| hal.g[i] / (state.g[i] * state.g[i]));
    let eps1 = num / den;
    Ok((0..n)
        .map(|i| {
            let (a, y, g, gt) = (data.a[i], data.y[i], state.g[i], hal.g[i]);
            let qa = if a == 1.0 { state.q1[i] } else { state.q0[i] };
            let q11 = state.q1[i] + eps1 / g;
            a / g * (g - gt) / g * (y - qa) + eps1 * (gt - g) / (g * g * g) * (a - g) - gt / (g * g) * (hal.q1[i] - q11) * (a - g)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_pathwise_derivative, Perturb};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_data(n: usize, seed: u64) -> TsmData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![];
        let mut a = vec![];
        let mut y = vec![];
        for _ in 0..n {
            let wi: f64 = rng.gen_range(-1.0..1.0);
            let ai = (rng.gen::<f64>() < expit(2.0 * wi - wi * wi)) as u8 as f64;
            let yi = (rng.gen::<f64>() < expit(wi + ai / 2.0)) as u8 as f64;
            w.push(wi);
            a.push(ai);
            y.push(yi);
        }
        TsmData::new(w, a, y).unwrap()
    }

    fn smooth_state(data: &TsmData, shift: f64) -> TsmState {
        let g = data.w().iter().map(|&w| expit(2.0 * w - w * w + shift)).collect();
        let q0 = data.w().iter().map(|&w| expit(w - shift)).collect();
        let q1 = data.w().iter().map(|&w| expit(w + 0.5 + shift * w)).collect();
        TsmState::from_probs(data, g, q0, q1, Bounds::default()).unwrap()
    }

    /// Five-point `W` law with one row per support point.
    fn discrete_bed(seed: u64) -> (TsmData, TsmState, TsmState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = vec![-1.0, -0.5, 0.0, 0.5, 1.0];
        let mut pw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..1.5)).collect();
        let s: f64 = pw.iter().sum();
        pw.iter_mut().for_each(|p| *p /= s);
        let data = TsmData::with_weights(w, vec![1.0; 5], vec![0.0; 5], pw).unwrap();
        let mut draw = |lo: f64, hi: f64| (0..5).map(|_| rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        let state = TsmState::from_probs(&data, draw(0.2, 0.8), draw(0.2, 0.8), draw(0.2, 0.8), Bounds::default()).unwrap();
        let hal = TsmState::from_probs(&data, draw(0.2, 0.8), draw(0.2, 0.8), draw(0.2, 0.8), Bounds::default()).unwrap();
        (data, state, hal)
    }

    #[test]
    fn d1_hand_case() {
        let data = TsmData::new(vec![0.0; 3], vec![1.0; 3], vec![1.0; 3]).unwrap();
        let st = TsmState::from_probs(&data, vec![0.5; 3], vec![0.4; 3], vec![0.4; 3], Bounds::default()).unwrap();
        for v in d1_eval(&st, &data) {
            assert_relative_eq!(v, 1.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn d1_is_conditionally_centered() {
        let data = toy_data(50, 1);
        let st = smooth_state(&data, 0.2);
        let y: Vec<f64> = (0..50).map(|i| st.q(data.a()[i], i)).collect();
        let fitted = TsmData::new(data.w().to_vec(), data.a().to_vec(), y).unwrap();
        assert!(d1_eval(&st, &fitted).iter().all(|&v| v == 0.0));
        let d = d1_eval(&st, &data);
        assert!((0..50).filter(|&i| data.a()[i] == 0.0).all(|i| d[i] == 0.0));
    }

    #[test]
    fn zero_fluctuation_leaves_predictions_unchanged() {
        let data = toy_data(30, 2);
        let st = smooth_state(&data, 0.1);
        let f = st.qbar().fluctuate(vec![vec![3.0; 30], vec![-2.0; 30]], 0.0);
        for i in 0..30 {
            assert_eq!(f.predict(1, i).to_bits(), st.qbar().predict(1, i).to_bits());
            assert_eq!(f.predict(0, i).to_bits(), st.qbar().predict(0, i).to_bits());
        }
    }

    #[test]
    fn eps1_is_zero_at_the_hal_state() {
        let data = toy_data(40, 3);
        let st = smooth_state(&data, 0.3);
        assert_eq!(eps1_solve(&st, &st, Mode::Regularized, &data).unwrap(), 0.0);
    }

    #[test]
    fn first_order_updates_solve_their_scores() {
        let data = toy_data(200, 4);
        let st = smooth_state(&data, 0.4);
        let hal = smooth_state(&data, -0.1);
        let (reg, _) = first_order_update(&st, &hal, Mode::Regularized, &data).unwrap();
        assert!(ptilde_d1(&reg, &hal, &data).abs() < 1e-10);
        let (emp, _) = first_order_update(&st, &hal, Mode::Empirical, &data).unwrap();
        assert!(pn_d1(&emp, &data).abs() < 1e-10);
        assert_eq!(emp.gbar(), st.gbar());
    }

    #[test]
    fn empirical_eps_matches_grid_and_closed_form_on_saturated_toy() {
        // One W value: the MLE moves qbar(1) to the treated mean of Y.
        let y = vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let a = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let data = TsmData::new(vec![0.0; 7], a, y).unwrap();
        let st = TsmState::from_probs(&data, vec![0.6; 7], vec![0.3; 7], vec![0.35; 7], Bounds::default()).unwrap();
        let eps = eps1_solve(&st, &st, Mode::Empirical, &data).unwrap();
        let closed = (logit(3.0 / 5.0) - logit(0.35)) * 0.6;
        assert_relative_eq!(eps, closed, epsilon = 1e-9);
        let (best, _) = (0..=1_000_000)
            .map(|k| -1.0 + 2.0 * k as f64 / 1e6)
            .map(|e| (e, eps1_score(&st, &st, Mode::Empirical, &data, e).abs()))
            .fold((0.0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        assert!((best - eps).abs() < 1e-6);
        let (upd, _) = first_order_update(&st, &st, Mode::Empirical, &data).unwrap();
        assert_relative_eq!(upd.q(1.0, 0), 0.6, epsilon = 1e-10);
        let mle = offset_logistic_mle(
            &[data.a().iter().map(|a| a / 0.6).collect()],
            data.y(),
            &vec![logit(0.35); 7],
            data.weights(),
        )
        .unwrap();
        assert_relative_eq!(mle[0], eps, epsilon = 1e-9);
    }

    #[test]
    fn clever_covariates_vanish_at_the_hal_state() {
        let data = toy_data(60, 5);
        let st = smooth_state(&data, 0.2);
        let (ctx, cov) = covariates(&st, &st, &data).unwrap();
        assert_eq!(ctx.eps1, 0.0);
        assert!(cov.cy1.iter().chain(&cov.ca).all(|v| v.abs() < 1e-10));
        assert!(d2_eval(&st, &st, &data).unwrap().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn ca_vanishes_without_fluctuation_and_hal_gap() {
        let data = toy_data(40, 6);
        let st = smooth_state(&data, 0.2);
        let hal_g = smooth_state(&data, -0.3);
        // Same qbar(., 1) as the state: eps1 = 0 and q~ = qbar^(1).
        let hal = TsmState::new(st.qw().clone(), hal_g.gbar().clone(), st.qbar().clone()).unwrap();
        let (ctx, cov) = covariates(&st, &hal, &data).unwrap();
        assert_eq!(ctx.eps1, 0.0);
        assert!(cov.ca.iter().all(|v| v.abs() < 1e-15));
    }

    fn ptilde_d2_h(state: &TsmState, hal: &TsmState, dir: &TsmDirection, data: &TsmData) -> f64 {
        // P(D2 h) with h = C1 (Y - qbar) + C2 (A - gbar), enumerated under P.
        let (_, cov) = covariates(state, hal, data).unwrap();
        data.mean(|i| {
            let g = state.g(i);
            let q1 = state.q(1.0, i);
            g * cov.cy1[i] * dir.q[1][i] * q1 * (1.0 - q1) + cov.ca[i] * dir.g[i] * g * (1.0 - g)
        })
    }

    #[test]
    fn d2_matches_finite_difference_on_discrete_w() {
        for seed in 0..20 {
            let (data, state, hal) = discrete_bed(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut draw = || (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let dir = TsmDirection {
                q: [draw(), draw()],
                g: draw(),
            };
            let fd: f64 = finite_diff_pathwise_derivative(|s: &TsmState| psi_n1(s, &hal, &data), &state, &dir, 1e-5).unwrap();
            let an = ptilde_d2_h(&state, &hal, &dir, &data);
            assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3), "seed {seed}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn r1_identity_on_discrete_w() {
        for seed in 0..10 {
            let (data, state, truth) = discrete_bed(seed);
            let q10: Vec<f64> = (0..5).map(|i| truth.q(1.0, i)).collect();
            let g0: Vec<f64> = (0..5).map(|i| truth.g(i)).collect();
            let p0d1 = data.mean(|i| g0[i] / state.g(i) * (q10[i] - state.q(1.0, i)));
            let lhs = psi(&state, &data) - psi(&truth, &data) + p0d1;
            assert_relative_eq!(lhs, r1_exact_tsm(&state, &q10, &g0, &data), epsilon = 1e-14);
            assert_eq!(r1_exact_tsm(&state, &q10, &(0..5).map(|i| state.g(i)).collect::<Vec<_>>(), &data), 0.0);
        }
    }

    #[test]
    fn onestep_updates_solve_their_scores() {
        let data = toy_data(300, 7);
        let st = smooth_state(&data, 0.5);
        let hal = smooth_state(&data, 0.0);
        for mode in [Mode::Regularized, Mode::Empirical] {
            let (_, cov) = covariates(&st, &hal, &data).unwrap();
            let (next, out) = second_order_update(&st, &hal, mode, SecondOrderMethod::OneStep, &data, 0.0, 1).unwrap();
            let (e1, e2) = out.eps;
            // Fluctuation scores with the frozen covariates.
            let (sq, sg) = match mode {
                Mode::Regularized => (
                    data.mean(|i| hal.g(i) * cov.cy1[i] * (hal.q(1.0, i) - next.q(1.0, i))),
                    data.mean(|i| cov.ca[i] * (hal.g(i) - next.g(i))),
                ),
                Mode::Empirical => (
                    data.mean(|i| cov.cy(data.a()[i], i) * (data.y()[i] - next.q(data.a()[i], i))),
                    data.mean(|i| cov.ca[i] * (data.a()[i] - next.g(i))),
                ),
            };
            assert!(sq.abs() < 1e-8 && sg.abs() < 1e-8, "{mode:?}: {sq} {sg} (eps {e1} {e2})");
        }
    }

    #[test]
    fn universal_path_reaches_tolerance_and_is_noop_at_hal() {
        let data = toy_data(300, 8);
        let st = smooth_state(&data, 0.5);
        let hal = target_hal(&smooth_state(&data, 0.0), &st, &data).unwrap().0;
        let tol = 1.0 / 300.0;
        for mode in [Mode::Empirical, Mode::Regularized] {
            let (next, out) =
                second_order_update(&st, &hal, mode, SecondOrderMethod::Universal { step: 0.01 }, &data, tol, 100_000).unwrap();
            let (_, cov) = covariates(&next, &hal, &data).unwrap();
            let score = match mode {
                Mode::Empirical => pn_d2(&next, &cov, &data),
                Mode::Regularized => ptilde_d2(&next, &hal, &cov, &data),
            };
            assert!(score.abs() < tol);
            assert_relative_eq!(out.score, score, max_relative = 1e-12);
        }
        let (same, out) =
            second_order_update(&hal, &hal, Mode::Regularized, SecondOrderMethod::Universal { step: 0.01 }, &data, tol, 10)
                .unwrap();
        assert_eq!(out.steps, 0);
        assert_eq!(same, hal);
    }

    #[test]
    fn targeting_solves_the_five_equations_and_the_identity() {
        let (data0, _, _) = (toy_data(400, 9), (), ());
        let st = smooth_state(&data0, 0.6);
        let hal = smooth_state(&data0, 0.1);
        let (hs, fit) = target_hal(&hal, &st, &data0).unwrap();
        assert_eq!(fit.eps_q.len(), 2);
        let d = &data0;
        let n = d.n();
        let (_, cov) = covariates(&st, &hal, d).unwrap();
        let e1 = d.mean(|i| cov.cy(d.a()[i], i) * (d.y()[i] - hs.q(d.a()[i], i)));
        let e2 = d.mean(|i| d.a()[i] / st.g(i) * (d.y()[i] - hs.q(d.a()[i], i)));
        let mid = TsmState::new(st.qw().clone(), hal.gbar().clone(), hs.qbar().clone()).unwrap();
        let (_, cov2) = covariates(&st, &mid, d).unwrap();
        let diff: Vec<f64> = (0..n).map(|i| hs.q(1.0, i) - st.q(1.0, i)).collect();
        let e3 = d.mean(|i| diff[i] * cov2.cy1[i] * (d.a()[i] - hs.g(i)));
        let e4 = d.mean(|i| cov2.ca[i] * (d.a()[i] - hs.g(i)));
        let e5 = d.mean(|i| diff[i] / st.g(i) * (d.a()[i] - hs.g(i)));
        for e in [e1, e2, e3, e4, e5] {
            assert!(e.abs() < 1e-8, "{e1} {e2} {e3} {e4} {e5}");
        }
        // (P~* - Pn) D1_P = 0, with the P~* expectation enumerated.
        assert!((ptilde_d1(&st, &hs, d) - pn_d1(&st, d)).abs() < 1e-8);
        // Repeated targeting settles at a HAL state that already solves
        // the equations, where the fitted coefficients vanish.
        let mut cur = hs;
        let mut last = fit;
        for _ in 0..30 {
            (cur, last) = target_hal(&cur, &st, d).unwrap();
        }
        assert!(last.eps_q.iter().chain(&last.eps_g).all(|e| e.abs() < 1e-6), "{last:?}");
    }

    #[test]
    fn iterative_estimator_meets_stopping_rule_and_is_deterministic() {
        let data = toy_data(500, 10);
        let st = smooth_state(&data, 0.6);
        let hal = smooth_state(&data, 0.05);
        let est = iterative_2tmle(&st, &hal, &data, &TsmConfig::default()).unwrap();
        assert!(est.scores.gap() < 1.0 / 500.0);
        assert!(est.second.lower <= est.second.estimate && est.second.estimate <= est.second.upper);
        let again = iterative_2tmle(&st, &hal, &data, &TsmConfig::default()).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn saturated_toy_recovers_treated_mean() {
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < 0.4) as u8 as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < 0.7) as u8 as f64).collect();
        let data = TsmData::new(vec![0.0; n], a.clone(), y.clone()).unwrap();
        let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1.0).collect();
        let ybar1 = treated.iter().map(|&i| y[i]).sum::<f64>() / treated.len() as f64;
        let abar = treated.len() as f64 / n as f64;
        let hal = TsmState::from_probs(&data, vec![abar; n], vec![0.5; n], vec![ybar1; n], Bounds::default()).unwrap();
        let init = TsmState::from_probs(&data, vec![0.3; n], vec![0.5; n], vec![0.5; n], Bounds::default()).unwrap();
        let est = iterative_2tmle(&init, &hal, &data, &TsmConfig::default()).unwrap();
        assert_relative_eq!(est.second.estimate, ybar1, epsilon = 1e-8);
        assert_relative_eq!(est.first.estimate, ybar1, epsilon = 1e-8);
    }

    #[test]
    fn continuous_gradient_matches_binary_with_unit_factors() {
        let data = toy_data(30, 12);
        let st = smooth_state(&data, 0.3);
        let hal = smooth_state(&data, -0.2);
        let arms = |s: &TsmState| LinearArms {
            g: (0..30).map(|i| s.g(i)).collect(),
            q0: (0..30).map(|i| s.q(0.0, i)).collect(),
            q1: (0..30).map(|i| s.q(1.0, i)).collect(),
        };
        let (ls, lh) = (arms(&st), arms(&hal));
        let cont = d2_continuous(&ls, &lh, &data).unwrap();
        let eps1 = data.mean(|i| lh.g[i] * (lh.q1[i] - ls.q1[i]) / ls.g[i]) / data.mean(|i| lh.g[i] / (ls.g[i] * ls.g[i]));
        for i in 0..30 {
            let q11 = ls.q1[i] + eps1 / ls.g[i];
            let (cy1, ca) = binary_terms(ls.g[i], lh.g[i], 1.0, 1.0, lh.q1[i], q11, eps1, 1.0);
            let (a, y) = (data.a()[i], data.y()[i]);
            let qa = if a == 1.0 { ls.q1[i] } else { ls.q0[i] };
            assert_relative_eq!(a * cy1 * (y - qa) + ca * (a - ls.g[i]), cont[i], epsilon = 1e-12);
        }
        assert!(d2_continuous(&ls, &ls, &data).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn continuous_gradient_is_mean_zero_under_p() {
        // One row per (W_i, a, y) with mass w_i g(a | W_i) / 2 and
        // Y = qbar(W_i, a) +- 1, so the rows enumerate P exactly.
        let (data, state, hal) = discrete_bed(3);
        let (mut w, mut a, mut y, mut wt) = (vec![], vec![], vec![], vec![]);
        let mut ls = LinearArms { g: vec![], q0: vec![], q1: vec![] };
        let mut lh = ls.clone();
        for i in 0..5 {
            for ai in [0.0, 1.0] {
                for s in [-1.0, 1.0] {
                    let (q0, q1) = (2.0 * state.q(0.0, i), 3.0 * state.q(1.0, i) - 1.0);
                    let g = state.g(i);
                    w.push(data.w()[i]);
                    a.push(ai);
                    y.push(if ai == 1.0 { q1 } else { q0 } + s);
                    wt.push(data.weights()[i] * if ai == 1.0 { g } else { 1.0 - g } * 0.5);
                    ls.g.push(g);
                    ls.q0.push(q0);
                    ls.q1.push(q1);
                    lh.g.push(hal.g(i));
                    lh.q0.push(2.0 * hal.q(0.0, i));
                    lh.q1.push(3.0 * hal.q(1.0, i) - 1.0);
                }
            }
        }
        let rows = TsmData::with_weights(w, a, y, wt).unwrap();
        let d2 = d2_continuous(&ls, &lh, &rows).unwrap();
        let mean = rows.mean(|k| d2[k]);
        assert!(mean.abs() < 1e-12, "{mean}");
        assert!(d2.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn perturb_keeps_qw_identical() {
        let (_, state, _) = discrete_bed(1);
        let d = TsmDirection {
            q: [vec![1.0; 5], vec![-1.0; 5]],
            g: vec![0.5; 5],
        };
        let p = state.perturb(&d, 0.1).unwrap();
        assert!(Arc::ptr_eq(p.qw(), state.qw()));
    }
}
