//! Shared numerics: link functions, one-dimensional score solving, pathwise
//! finite differences, influence-function intervals, weighted empirical
//! measures, quadrature and seeded replication streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("score has no sign change on [{lo}, {hi}] (smallest |score| seen: {min_abs:e})")]
    NoBracket { lo: f64, hi: f64, min_abs: f64 },
    #[error("non-finite value encountered at {at}")]
    NonFinite { at: f64 },
    #[error("root search did not reach tolerance {tol:e} (best |score| {best:e})")]
    NoConvergence { tol: f64, best: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("perturbation leaves the model: {0}")]
    InvalidPerturbation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;

/// Logistic function, evaluated without overflow for large |x|.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(expit(x))` computed stably.
pub fn log_expit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood `y log p + (1 - y) log(1 - p)` for a fractional
/// outcome `y`, with the `0 log 0 = 0` convention.
pub fn bernoulli_loglik(y: f64, p: f64) -> f64 {
    let mut out = 0.0;
    if y > 0.0 {
        out += y * p.ln();
    }
    if y < 1.0 {
        out += (1.0 - y) * (1.0 - p).ln();
    }
    out
}

pub fn clamp_prob(p: f64, bound: f64) -> f64 {
    p.clamp(bound, 1.0 - bound)
}

/// A scalar score equation `f(eps) = 0` searched on `[lo, hi]`.
pub struct ScoreFunction1D<F> {
    pub f: F,
    pub lo: f64,
    pub hi: f64,
}

impl<F: Fn(f64) -> f64> ScoreFunction1D<F> {
    pub fn new(f: F, lo: f64, hi: f64) -> Self {
        Self { f, lo, hi }
    }

    fn eval(&self, x: f64) -> Result<f64> {
        let v = (self.f)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericError::NonFinite { at: x })
        }
    }
}

pub const SCAN_POINTS: usize = 201;

/// Finds a root of `score` on its interval.
///
/// The interval is scanned on a 201-point grid; among all sign changes the
/// bracket closest to zero is refined by bisection. Returns once
/// `|f| <= tol` or the bracket collapses to adjacent floats.
pub fn solve_score_1d<F: Fn(f64) -> f64>(
    score: &ScoreFunction1D<F>,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if !(score.lo < score.hi) {
        return Err(NumericError::InvalidArgument(format!(
            "empty interval [{}, {}]",
            score.lo, score.hi
        )));
    }
    let step = (score.hi - score.lo) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS)
        .map(|k| {
            if k == SCAN_POINTS - 1 {
                score.hi
            } else {
                score.lo + step * k as f64
            }
        })
        .collect();
    let values = grid
        .iter()
        .map(|&x| score.eval(x))
        .collect::<Result<Vec<_>>>()?;

    // Candidate brackets (a, b) with f(a) f(b) <= 0, ranked by distance to 0.
    let mut best: Option<(f64, f64, f64, f64)> = None;
    let dist = |a: f64, b: f64| {
        if a <= 0.0 && b >= 0.0 {
            0.0
        } else {
            a.abs().min(b.abs())
        }
    };
    for k in 0..SCAN_POINTS {
        if values[k].abs() <= tol {
            let cand = (grid[k], grid[k], values[k], values[k]);
            if best.map_or(true, |b| grid[k].abs() < dist(b.0, b.1)) {
                best = Some(cand);
            }
        }
        if k + 1 < SCAN_POINTS && values[k] * values[k + 1] < 0.0 {
            let d = dist(grid[k], grid[k + 1]);
            if best.map_or(true, |b| d < dist(b.0, b.1)) {
                best = Some((grid[k], grid[k + 1], values[k], values[k + 1]));
            }
        }
    }
    let Some((a, b, fa, fb)) = best else {
        let min_abs = values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        return Err(NumericError::NoBracket {
            lo: score.lo,
            hi: score.hi,
            min_abs,
        });
    };
    if a == b {
        return Ok(a);
    }
    bisect(&score.f, a, b, fa, fb, tol, max_iter)
}

/// Root search starting from `guess`: the bracket is grown geometrically
/// from `width` until a sign change is found inside `[lo, hi]`.
pub fn solve_score_near<F: Fn(f64) -> f64>(
    score: &ScoreFunction1D<F>,
    guess: f64,
    width: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let guess = guess.clamp(score.lo, score.hi);
    let f0 = score.eval(guess)?;
    if f0.abs() <= tol {
        return Ok(guess);
    }
    let mut w = width.max(1e-12);
    loop {
        let a = (guess - w).max(score.lo);
        let b = (guess + w).min(score.hi);
        let fa = score.eval(a)?;
        let fb = score.eval(b)?;
        if fa * f0 <= 0.0 {
            return bisect(&score.f, a, guess, fa, f0, tol, max_iter);
        }
        if fb * f0 <= 0.0 {
            return bisect(&score.f, guess, b, f0, fb, tol, max_iter);
        }
        if a <= score.lo && b >= score.hi {
            return solve_score_1d(score, tol, max_iter);
        }
        w *= 4.0;
    }
}

fn bisect<F: Fn(f64) -> f64>(
    f: &F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    fb: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    if fa.abs() <= tol {
        return Ok(a);
    }
    if fb.abs() <= tol {
        return Ok(b);
    }
    let (mut best_x, mut best_f) = if fa.abs() < fb.abs() { (a, fa) } else { (b, fb) };
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            // Adjacent floats: the bracket cannot shrink further.
            return Ok(best_x);
        }
        let fm = f(m);
        if !fm.is_finite() {
            return Err(NumericError::NonFinite { at: m });
        }
        if fm.abs() < best_f.abs() {
            best_x = m;
            best_f = fm;
        }
        if fm.abs() <= tol {
            return Ok(m);
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    Err(NumericError::NoConvergence {
        tol,
        best: best_f.abs(),
    })
}

/// Golden-section maximisation of a unimodal function on `[lo, hi]`.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // Compare against the endpoints: the optimum may sit on the boundary.
    [lo, mid, hi]
        .into_iter()
        .map(|x| (x, f(x)))
        .filter(|(_, v)| v.is_finite())
        .fold((mid, f64::NEG_INFINITY), |acc, (x, v)| if v > acc.1 { (x, v) } else { acc })
        .0
}

/// A state that can be moved along a one-dimensional submodel.
pub trait Perturb: Sized {
    type Direction;
    fn perturb(&self, direction: &Self::Direction, delta: f64) -> Result<Self>;
}

/// Central difference `(psi(s + delta h) - psi(s - delta h)) / (2 delta)`.
pub fn finite_diff_pathwise_derivative<S, E, F>(
    psi: F,
    state: &S,
    direction: &S::Direction,
    delta: f64,
) -> std::result::Result<f64, E>
where
    S: Perturb,
    E: From<NumericError>,
    F: Fn(&S) -> std::result::Result<f64, E>,
{
    if !(delta > 0.0) {
        return Err(NumericError::InvalidArgument(format!("delta must be positive, got {delta}")).into());
    }
    let plus = state.perturb(direction, delta)?;
    let minus = state.perturb(direction, -delta)?;
    Ok((psi(&plus)? - psi(&minus)?) / (2.0 * delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Two-sided normal quantile `z_{1 - alpha/2}`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Wald interval `psi ± z sqrt(var(ic)/n)` where `var` divides by `n`.
pub fn influence_ci(psi: f64, ic: &[f64], level: f64) -> Result<ConfidenceInterval> {
    if ic.is_empty() {
        return Err(NumericError::EmptyInput);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(NumericError::InvalidArgument(format!("level {level} not in (0, 1)")));
    }
    let n = ic.len() as f64;
    let mean = ic.iter().sum::<f64>() / n;
    let var = ic.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    let z = normal_quantile(0.5 + level / 2.0);
    Ok(ConfidenceInterval {
        estimate: psi,
        se,
        lower: psi - z * se,
        upper: psi + z * se,
        level,
    })
}

/// A finitely supported measure with non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure<T> {
    points: Vec<T>,
    weights: Vec<f64>,
}

impl<T> EmpiricalMeasure<T> {
    pub fn uniform(points: Vec<T>) -> Result<Self> {
        if points.is_empty() {
            return Err(NumericError::EmptyInput);
        }
        let w = 1.0 / points.len() as f64;
        let weights = vec![w; points.len()];
        Ok(Self { points, weights })
    }

    pub fn weighted(points: Vec<T>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(NumericError::EmptyInput);
        }
        if points.len() != weights.len() {
            return Err(NumericError::InvalidWeights(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(NumericError::InvalidWeights("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(NumericError::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn expect<F: Fn(&T) -> f64>(&self, f: F) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| if *w == 0.0 { 0.0 } else { w * f(x) })
            .sum()
    }
}

/// Independent ChaCha20 stream for replication `index` under `master_seed`.
pub fn replication_rng(master_seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gauss_kronrod_15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = GAUSS_WEIGHTS[3] * fc;
    for j in 0..7 {
        let x = h * GK_NODES[j];
        let s = f(c - x) + f(c + x);
        kronrod += GK_WEIGHTS[j] * s;
        if j % 2 == 1 {
            gauss += GAUSS_WEIGHTS[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) integration of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (val, err) = gauss_kronrod_15(f, a, b);
        if err <= tol || depth == 0 {
            return val;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, tol / 2.0, depth - 1) + rec(f, m, b, tol / 2.0, depth - 1)
    }
    rec(&f, a, b, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn expit_logit_roundtrip_and_tails() {
        for &x in &[-15.0, -2.5, 0.0, 1.0, 15.0] {
            assert_relative_eq!(logit(expit(x)), x, epsilon = 1e-9);
        }
        assert!(expit(-800.0) >= 0.0 && expit(800.0) == 1.0);
        assert_relative_eq!(log_expit(-50.0), -50.0, epsilon = 1e-12);
        assert_relative_eq!(log_expit(2.0), expit(2.0).ln(), epsilon = 1e-15);
    }

    #[test]
    fn solver_finds_cubic_root() {
        let s = ScoreFunction1D::new(|e: f64| e.powi(3) - 0.125, -10.0, 10.0);
        let r = solve_score_1d(&s, 1e-14, 200).unwrap();
        assert_relative_eq!(r, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn solver_prefers_bracket_nearest_zero() {
        // Roots at -3, 0.7 and 4.
        let s = ScoreFunction1D::new(|e: f64| (e + 3.0) * (e - 0.7) * (e - 4.0), -10.0, 10.0);
        let r = solve_score_1d(&s, 1e-12, 200).unwrap();
        assert_relative_eq!(r, 0.7, epsilon = 1e-10);
    }

    #[test]
    fn solver_reports_missing_bracket() {
        let s = ScoreFunction1D::new(|e: f64| e * e + 1.0, -1.0, 1.0);
        match solve_score_1d(&s, 1e-10, 100) {
            Err(NumericError::NoBracket { min_abs, .. }) => assert_relative_eq!(min_abs, 1.0),
            other => panic!("unexpected {other:?}"),
        }
        let s = ScoreFunction1D::new(|e: f64| 1.0 / e, -1.0, 1.0);
        assert!(matches!(solve_score_1d(&s, 1e-10, 100), Err(NumericError::NonFinite { .. })));
    }

    #[test]
    fn solve_near_matches_global_solver() {
        let s = ScoreFunction1D::new(|e: f64| (2.0 * e).tanh() - 0.3, -10.0, 10.0);
        let a = solve_score_1d(&s, 1e-14, 200).unwrap();
        let b = solve_score_near(&s, 3.0, 1e-3, 1e-14, 200).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert_relative_eq!(a, 0.3f64.atanh() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_handles_boundary_optimum() {
        let x = golden_max(|e| -(e - 0.3).powi(2), -1.0, 1.0, 1e-10);
        assert_relative_eq!(x, 0.3, epsilon = 1e-8);
        let x = golden_max(|e| e, -1.0, 1.0, 1e-10);
        assert_eq!(x, 1.0);
    }

    struct Line(f64);
    impl Perturb for Line {
        type Direction = f64;
        fn perturb(&self, d: &f64, delta: f64) -> Result<Self> {
            Ok(Line(self.0 + d * delta))
        }
    }

    #[test]
    fn finite_difference_of_smooth_functional() {
        let d = finite_diff_pathwise_derivative::<_, NumericError, _>(
            |s: &Line| Ok(s.0.sin()),
            &Line(0.4),
            &2.0,
            1e-5,
        )
        .unwrap();
        assert_relative_eq!(d, 2.0 * 0.4f64.cos(), epsilon = 1e-9);
    }

    #[test]
    fn wald_interval_uses_population_variance() {
        let ic = [1.0, -1.0, 1.0, -1.0];
        let ci = influence_ci(0.0, &ic, 0.95).unwrap();
        assert_relative_eq!(ci.se, 0.5, epsilon = 1e-15);
        assert_relative_eq!(ci.upper, 1.959963984540054 * 0.5, epsilon = 1e-12);
        assert!(influence_ci(0.0, &[], 0.95).is_err());
    }

    #[test]
    fn empirical_measure_validates_weights() {
        assert!(EmpiricalMeasure::weighted(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::weighted(vec![1.0, 2.0], vec![1.5, -0.5]).is_err());
        let m = EmpiricalMeasure::weighted(vec![1.0, 3.0], vec![0.25, 0.75]).unwrap();
        assert_relative_eq!(m.expect(|x| *x), 2.5);
        assert!(EmpiricalMeasure::<f64>::uniform(vec![]).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| replication_rng(7, 3).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let mut r1 = replication_rng(7, 3);
        let mut r2 = replication_rng(7, 4);
        assert_ne!(r1.gen::<u64>(), r2.gen::<u64>());
    }

    #[test]
    fn quadrature_matches_closed_forms() {
        let v = integrate(|w| expit(w + 0.5), -1.0, 1.0, 1e-13);
        let exact = (1.0 + 1.5f64.exp()).ln() - (1.0 + (-0.5f64).exp()).ln();
        assert_relative_eq!(v, exact, epsilon = 1e-12);
        let v = integrate(|x| (-x * x / 2.0).exp(), -8.0, 8.0, 1e-12);
        assert_relative_eq!(v, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-10);
    }
}
