//! Data-generating processes, Monte-Carlo replication and report emission
//! for both examples.
//!
//! Every replication draws from its own ChaCha20 stream derived from the
//! master seed, so results do not depend on scheduling or thread count.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::density2::{self, DiscretePmf, IterateConfig, Mode, PmfError, SecondOrderPath, Stage, TmleResult};
use crate::hal::{self, CvConfig, FitData, FitOptions, HalError, HalProblem, Link, PathConfig};
use crate::numeric::{self, expit};
use crate::tsm::{self, Bounds, TsmConfig, TsmData, TsmError, TsmState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Pmf(#[from] PmfError),
    #[error(transparent)]
    Hal(#[from] HalError),
    #[error(transparent)]
    Tsm(#[from] TsmError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Runs `f` over `0..reps`, in parallel when asked, keeping index order.
fn map_reps<T, F>(reps: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..reps).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..reps).map(f).collect()
}

/// `count` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Density example

/// Discretized Gaussian mixture on `I` supports spanning `[-5, 5]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityDgp {
    pub k: usize,
    pub means: Vec<f64>,
    pub sigma: f64,
    pub p0: DiscretePmf,
}

impl DensityDgp {
    /// `K` equal-weight components with means evenly placed on `[-4, 4]` and
    /// common SD `10 / K / 6`. Support `x_i` receives the mixture mass of
    /// `(x_{i-1}, x_i]`; the first and last supports absorb the tails.
    pub fn new(k: usize, supports: usize) -> Result<Self> {
        if k == 0 || supports < 2 {
            return Err(SimError::Config(format!("need K >= 1 and I >= 2, got K={k}, I={supports}")));
        }
        let xs = linspace(-5.0, 5.0, supports);
        let means = if k == 1 { vec![0.0] } else { linspace(-4.0, 4.0, k) };
        let sigma = 10.0 / k as f64 / 6.0;
        let normals: Vec<Normal> = means
            .iter()
            .map(|&m| Normal::new(m, sigma).expect("positive sd"))
            .collect();
        let cdf = |x: f64| normals.iter().map(|d| d.cdf(x)).sum::<f64>() / k as f64;
        let sf = |x: f64| normals.iter().map(|d| d.sf(x)).sum::<f64>() / k as f64;
        let mut probs = Vec::with_capacity(supports);
        probs.push(cdf(xs[0]));
        for i in 1..supports - 1 {
            // Difference on the side of the median that keeps precision.
            let v = if xs[i] <= 0.0 {
                cdf(xs[i]) - cdf(xs[i - 1])
            } else {
                sf(xs[i - 1]) - sf(xs[i])
            };
            probs.push(v.max(0.0));
        }
        probs.push(sf(xs[supports - 2]));
        let p0 = DiscretePmf::normalized(xs, probs)?;
        Ok(Self { k, means, sigma, p0 })
    }

    pub fn psi0(&self) -> f64 {
        density2::psi(&self.p0)
    }

    /// `n` support indices drawn from `p0`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut cum = Vec::with_capacity(self.p0.len());
        let mut acc = 0.0;
        for &p in self.p0.probs() {
            acc += p;
            cum.push(acc);
        }
        let last = cum.len() - 1;
        (0..n)
            .map(|_| {
                let u: f64 = rng.gen::<f64>() * acc;
                cum.partition_point(|&c| c <= u).min(last)
            })
            .collect()
    }
}

/// The pmf behind [`DensityDgp`].
pub fn make_density_p0(k: usize, supports: usize) -> Result<DiscretePmf> {
    Ok(DensityDgp::new(k, supports)?.p0)
}

/// Where the bias mass of an initial density goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BiasMode {
    AllSupports,
    /// Five distinct supports drawn from the replication stream.
    RandomFive,
}

impl FromStr for BiasMode {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-supports" => Ok(Self::AllSupports),
            "random5" | "random-five" => Ok(Self::RandomFive),
            _ => Err(SimError::Config(format!("unknown bias mode '{s}'"))),
        }
    }
}

/// Adds `mass` to the chosen supports of `empirical` and rescales to one.
pub fn bias_initial_density(
    empirical: &DiscretePmf,
    mass: f64,
    mode: BiasMode,
    rng: &mut impl Rng,
) -> Result<DiscretePmf> {
    if !(mass >= 0.0 && mass.is_finite()) {
        return Err(SimError::Config(format!("bias mass must be finite and >= 0, got {mass}")));
    }
    let mut masses = empirical.probs().to_vec();
    match mode {
        BiasMode::AllSupports => masses.iter_mut().for_each(|m| *m += mass),
        BiasMode::RandomFive => {
            let mut idx: Vec<usize> = (0..masses.len()).collect();
            let take = idx.len().min(5);
            let (chosen, _) = idx.partial_shuffle(rng, take);
            for &i in chosen.iter() {
                masses[i] += mass;
            }
        }
    }
    Ok(DiscretePmf::normalized(empirical.supports().to_vec(), masses)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DensityEstimator {
    RegFirst,
    UsRegFirst,
    EmpFirst,
    RegSecond,
    UsRegSecond,
    EmpSecond,
    UsEmpSecond,
}

impl DensityEstimator {
    pub const ALL: [Self; 7] = [
        Self::RegFirst,
        Self::UsRegFirst,
        Self::EmpFirst,
        Self::RegSecond,
        Self::UsRegSecond,
        Self::EmpSecond,
        Self::UsEmpSecond,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::RegFirst => "Reg. 1st order",
            Self::UsRegFirst => "Undersmoothed Reg. 1st order",
            Self::EmpFirst => "Emp. 1st order",
            Self::RegSecond => "Reg. 2nd order",
            Self::UsRegSecond => "Undersmoothed Reg. 2nd order",
            Self::EmpSecond => "Emp. 2nd order",
            Self::UsEmpSecond => "Undersmoothed Emp. 2nd order",
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Self::RegFirst => "reg1",
            Self::UsRegFirst => "us-reg1",
            Self::EmpFirst => "emp1",
            Self::RegSecond => "reg2",
            Self::UsRegSecond => "us-reg2",
            Self::EmpSecond => "emp2",
            Self::UsEmpSecond => "us-emp2",
        }
    }

    fn mode(self) -> Mode {
        match self {
            Self::EmpFirst | Self::EmpSecond | Self::UsEmpSecond => Mode::Empirical,
            _ => Mode::Regularized,
        }
    }

    fn second_order(self) -> bool {
        matches!(self, Self::RegSecond | Self::UsRegSecond | Self::EmpSecond | Self::UsEmpSecond)
    }

    fn undersmoothed(self) -> bool {
        matches!(self, Self::UsRegFirst | Self::UsRegSecond | Self::UsEmpSecond)
    }
}

impl FromStr for DensityEstimator {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.token() == s)
            .ok_or_else(|| SimError::Config(format!("unknown density estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityStudyConfig {
    pub n: usize,
    pub reps: usize,
    pub k: usize,
    pub supports: usize,
    pub bias_mass: f64,
    pub bias_mode: BiasMode,
    pub estimators: Vec<DensityEstimator>,
    /// Number of equidistant undersmoothing candidates `lambda_cv * j / m`.
    pub undersmooth_candidates: usize,
    pub iterate: IterateConfig,
    pub path: PathConfig,
    /// Link of the discrete-hazard lasso.
    pub link: Link,
    pub folds: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for DensityStudyConfig {
    fn default() -> Self {
        Self {
            n: 500,
            reps: 1000,
            k: 4,
            supports: 21,
            bias_mass: 0.06,
            bias_mode: BiasMode::RandomFive,
            estimators: DensityEstimator::ALL.to_vec(),
            undersmooth_candidates: 10,
            iterate: IterateConfig::default(),
            path: PathConfig::default(),
            link: Link::Logit,
            folds: 10,
            seed: 20_200_101,
            parallel: true,
        }
    }
}

/// Result of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityFit {
    pub estimate: f64,
    /// Undersmoothing candidate used (0 = the CV choice).
    pub candidate: Option<usize>,
    pub qualified: bool,
}

/// Everything one density replication needs: the draw, the CV HAL pmf and
/// the biased initial.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReplicate {
    pub sample: Vec<usize>,
    pub empirical: DiscretePmf,
    pub counts: Vec<usize>,
    pub lambda_cv: f64,
    pub hal: DiscretePmf,
    pub initial: DiscretePmf,
}

pub fn density_replicate(dgp: &DensityDgp, cfg: &DensityStudyConfig, rng: &mut ChaCha20Rng) -> Result<DensityReplicate> {
    let supports = dgp.p0.supports().to_vec();
    let sample = dgp.sample(cfg.n, rng);
    let counts = density2::counts(&sample, supports.len())?;
    let empirical = DiscretePmf::empirical(supports.clone(), &sample)?;
    let cv_cfg = CvConfig {
        folds: cfg.folds,
        seed: rng.gen(),
    };
    let opts = FitOptions {
        link: cfg.link,
        ..Default::default()
    };
    let cv = hal::cv_hal_pmf(&sample, &supports, &cfg.path, &cv_cfg, &opts)?;
    let hal = hal::fit_hal_pmf(&counts, &supports, cv.cv.lambda, &opts)?;
    let initial = bias_initial_density(&empirical, cfg.bias_mass, cfg.bias_mode, rng)?;
    Ok(DensityReplicate {
        sample,
        empirical,
        counts,
        lambda_cv: cv.cv.lambda,
        hal,
        initial,
    })
}

fn run_density_estimator(
    est: DensityEstimator,
    rep: &DensityReplicate,
    hal: &DiscretePmf,
    cfg: &DensityStudyConfig,
) -> std::result::Result<TmleResult, PmfError> {
    let reference = density2::reference_for(est.mode(), hal, &rep.empirical);
    let tol = cfg.iterate.tol.unwrap_or(1.0 / cfg.n as f64);
    if est.second_order() {
        density2::iterate_2tmle(&rep.initial, hal, reference, cfg.n, &cfg.iterate)
    } else {
        density2::iterate_1tmle(
            &rep.initial,
            reference,
            tol,
            cfg.iterate.max_abs_eps1,
            cfg.iterate.max_iterations,
            cfg.iterate.solver,
        )
    }
}

/// Counts path-score violations in a density trace: every unclamped step
/// must zero the reference score of its own path to 1e-8.
pub fn density_contract_violations(
    result: &TmleResult,
    hal: &DiscretePmf,
    reference: &DiscretePmf,
    cfg: &IterateConfig,
) -> usize {
    let local2 = match cfg.second {
        SecondOrderPath::Local { max_abs_eps } => Some(max_abs_eps),
        SecondOrderPath::Universal { .. } => None,
    };
    let supports = reference.supports().to_vec();
    let mut bad = 0;
    for w in result.trace.records.windows(2) {
        let (prev, rec) = (&w[0], &w[1]);
        let limit = match rec.stage {
            Stage::First => Some(cfg.max_abs_eps1),
            Stage::Second => local2,
            Stage::Start => None,
        };
        let Some(limit) = limit else { continue };
        if rec.eps.abs() >= limit * (1.0 - 1e-12) {
            continue;
        }
        let Ok(p) = DiscretePmf::new(supports.clone(), prev.probs.clone()) else {
            bad += 1;
            continue;
        };
        let dir = match rec.stage {
            Stage::First => density2::d1(&p),
            _ => match density2::d2_at(&p, hal) {
                Ok((d, _)) => d,
                Err(_) => {
                    bad += 1;
                    continue;
                }
            },
        };
        let score: f64 = (0..p.len())
            .map(|i| reference.probs()[i] * dir[i] / (1.0 + rec.eps * dir[i]))
            .sum();
        if !(score.abs() < 1e-8) {
            bad += 1;
        }
    }
    bad
}

/// One replication: estimate minus truth per requested estimator.
pub fn density_replication(
    dgp: &DensityDgp,
    cfg: &DensityStudyConfig,
    index: usize,
    check: bool,
) -> Result<(Vec<std::result::Result<DensityFit, String>>, usize)> {
    let mut rng = numeric::replication_rng(cfg.seed, index as u64);
    let rep = density_replicate(dgp, cfg, &mut rng)?;
    let psi0 = dgp.psi0();
    let tol = cfg.iterate.tol.unwrap_or(1.0 / cfg.n as f64);
    let opts = FitOptions {
        link: cfg.link,
        ..Default::default()
    };

    let m = cfg.undersmooth_candidates.max(1);
    let need_us = cfg.estimators.iter().any(|e| e.undersmoothed());
    let us_hals: Vec<std::result::Result<DiscretePmf, String>> = if need_us {
        (0..m)
            .map(|j| {
                let lambda = rep.lambda_cv * (m - j) as f64 / m as f64;
                hal::fit_hal_pmf(&rep.counts, rep.empirical.supports(), lambda, &opts).map_err(|e| e.to_string())
            })
            .collect()
    } else {
        vec![]
    };

    let mut violations = 0;
    let mut out = Vec::with_capacity(cfg.estimators.len());
    for &est in &cfg.estimators {
        if !est.undersmoothed() {
            let r = run_density_estimator(est, &rep, &rep.hal, cfg).map_err(|e| e.to_string());
            if let (true, Ok(res)) = (check, &r) {
                let reference = density2::reference_for(est.mode(), &rep.hal, &rep.empirical);
                violations += density_contract_violations(res, &rep.hal, reference, &cfg.iterate);
                violations += final_score_violations(res, reference, est.second_order(), tol);
            }
            out.push(r.map(|res| DensityFit {
                estimate: res.estimate - psi0,
                candidate: None,
                qualified: true,
            }));
            continue;
        }
        let mut runs: Vec<Option<std::result::Result<TmleResult, String>>> = vec![None; m];
        let choice = hal::undersmooth_by_score(m, |j| {
            let res = match &us_hals[j] {
                Ok(h) => run_density_estimator(est, &rep, h, cfg).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            let pass = match (&res, &us_hals[j]) {
                (Ok(r), Ok(h)) => {
                    let d = density2::d1(&r.pmf);
                    let pn = rep.empirical.expect(&d);
                    (pn.abs() < tol) && ((pn - h.expect(&d)).abs() < tol)
                }
                _ => false,
            };
            runs[j] = Some(res);
            pass
        })?;
        let j = choice.index;
        let res = runs[j].take().expect("chosen candidate was evaluated");
        if let (true, Ok(r), Ok(h)) = (check, &res, &us_hals[j]) {
            let reference = density2::reference_for(est.mode(), h, &rep.empirical);
            violations += density_contract_violations(r, h, reference, &cfg.iterate);
            violations += final_score_violations(r, reference, est.second_order(), tol);
        }
        out.push(res.map(|r| DensityFit {
            estimate: r.estimate - psi0,
            candidate: Some(j),
            qualified: choice.qualified,
        }));
    }
    Ok((out, violations))
}

fn final_score_violations(res: &TmleResult, reference: &DiscretePmf, second: bool, tol: f64) -> usize {
    let mut bad = usize::from(!(reference.expect(&density2::d1(&res.pmf)).abs() < tol));
    if second {
        // The stored D2 is the one evaluated before the last first-order step.
        bad += usize::from(!(reference.expect(&res.gradients.d2).abs() < tol));
    }
    bad
}

/// Monte-Carlo summary of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    pub estimator: String,
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    /// Monte-Carlo standard error of `bias`.
    pub mc_se: f64,
    pub ok: usize,
    pub failures: usize,
}

impl SummaryRow {
    /// Population-style moments of `errors * scale`, so that
    /// `mse = bias^2 + sd^2` up to rounding.
    pub fn from_errors(n: usize, estimator: &str, errors: &[f64], failures: usize, scale: f64) -> Self {
        let k = errors.len();
        if k == 0 {
            return Self {
                n,
                estimator: estimator.to_string(),
                bias: f64::NAN,
                sd: f64::NAN,
                mse: f64::NAN,
                mc_se: f64::NAN,
                ok: 0,
                failures,
            };
        }
        let e: Vec<f64> = errors.iter().map(|x| x * scale).collect();
        let kf = k as f64;
        let bias = e.iter().sum::<f64>() / kf;
        let var = e.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / kf;
        let mse = e.iter().map(|x| x * x).sum::<f64>() / kf;
        let sd = var.sqrt();
        Self {
            n,
            estimator: estimator.to_string(),
            bias,
            sd,
            mse,
            mc_se: sd / kf.sqrt(),
            ok: k,
            failures,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub study: String,
    pub seed: u64,
    pub reps: usize,
    /// True when bias and SD are scaled by `sqrt(n)` and MSE by `n`.
    pub scaled: bool,
    pub truth: Vec<(usize, f64)>,
    pub rows: Vec<SummaryRow>,
    /// Replications whose score contracts were re-checked.
    pub contract_checks: usize,
    pub contract_violations: usize,
    /// First few failure messages, in replication order.
    pub failure_messages: Vec<String>,
    pub config: serde_json::Value,
}

impl SimReport {
    pub fn row(&self, n: usize, estimator: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.n == n && r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,estimator,bias,sd,mse,mc_se,ok,failures\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{},{}",
                r.n, r.estimator, r.bias, r.sd, r.mse, r.mc_se, r.ok, r.failures
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

const MAX_MESSAGES: usize = 5;

/// Replications whose index is a multiple of this get contract re-checks.
pub const CHECK_EVERY: usize = 100;

pub fn run_density_study(cfg: &DensityStudyConfig) -> Result<SimReport> {
    if cfg.reps == 0 || cfg.n == 0 || cfg.estimators.is_empty() {
        return Err(SimError::Config("need n > 0, reps > 0 and at least one estimator".into()));
    }
    let dgp = DensityDgp::new(cfg.k, cfg.supports)?;
    let results = map_reps(cfg.reps, cfg.parallel, |r| {
        density_replication(&dgp, cfg, r, r % CHECK_EVERY == 0)
    });
    let m = cfg.estimators.len();
    let mut errors = vec![Vec::with_capacity(cfg.reps); m];
    let mut failures = vec![0usize; m];
    let mut messages = Vec::new();
    let mut violations = 0;
    let mut checks = 0;
    for (r, res) in results.into_iter().enumerate() {
        if r % CHECK_EVERY == 0 {
            checks += 1;
        }
        match res {
            Ok((fits, v)) => {
                violations += v;
                for (j, f) in fits.into_iter().enumerate() {
                    match f {
                        Ok(f) => errors[j].push(f.estimate),
                        Err(e) => {
                            failures[j] += 1;
                            if messages.len() < MAX_MESSAGES {
                                messages.push(format!("rep {r} {}: {e}", cfg.estimators[j].token()));
                            }
                        }
                    }
                }
            }
            Err(e) => {
                failures.iter_mut().for_each(|f| *f += 1);
                if messages.len() < MAX_MESSAGES {
                    messages.push(format!("rep {r}: {e}"));
                }
            }
        }
    }
    let rows = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(j, e)| SummaryRow::from_errors(cfg.n, e.label(), &errors[j], failures[j], 1.0))
        .collect();
    Ok(SimReport {
        study: "density2".into(),
        seed: cfg.seed,
        reps: cfg.reps,
        scaled: false,
        truth: vec![(cfg.n, dgp.psi0())],
        rows,
        contract_checks: checks,
        contract_violations: violations,
        failure_messages: messages,
        config: config_echo(cfg),
    })
}

fn config_echo<T: Serialize>(cfg: &T) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

/// One point of a remainder trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackPoint {
    pub step: usize,
    pub stage: Stage,
    pub total_remainder: f64,
    pub abs_ref_d2: f64,
    pub abs_ref_d1: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    pub n: usize,
    pub k: usize,
    pub bias_mass: f64,
    pub bias_mode: BiasMode,
    pub mode: Mode,
    pub step: f64,
    /// Start from the true pmf instead of a biased initial.
    pub from_truth: bool,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            n: 500,
            k: 4,
            bias_mass: 0.06,
            bias_mode: BiasMode::AllSupports,
            mode: Mode::Regularized,
            step: 0.01,
            from_truth: false,
            seed: 20_200_101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackReport {
    pub psi0: f64,
    pub estimate: f64,
    pub points: Vec<TrackPoint>,
    pub config: TrackConfig,
}

impl TrackReport {
    pub fn initial_remainder(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.total_remainder)
    }

    pub fn final_remainder(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.total_remainder)
    }

    /// Whitespace-separated columns with a `#` header, for gnuplot.
    pub fn to_dat(&self) -> String {
        let mut s = String::from("# step stage total_remainder abs_ref_d2 abs_ref_d1 psi\n");
        for p in &self.points {
            let stage = match p.stage {
                Stage::Start => 0,
                Stage::First => 1,
                Stage::Second => 2,
            };
            let _ = writeln!(
                s,
                "{} {} {:e} {:e} {:e} {:e}",
                p.step, stage, p.total_remainder, p.abs_ref_d2, p.abs_ref_d1, p.psi
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,total_remainder,abs_ref_d2,abs_ref_d1,psi\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{:?},{:e},{:e},{:e},{:e}",
                p.step, p.stage, p.total_remainder, p.abs_ref_d2, p.abs_ref_d1, p.psi
            );
        }
        s
    }
}

/// Second-order TMLE along the universal path on one draw, with the exact
/// total remainder of the first-order map recorded after every step.
pub fn track_total_remainder(cfg: &TrackConfig) -> Result<TrackReport> {
    let dgp = DensityDgp::new(cfg.k, 21)?;
    let study = DensityStudyConfig {
        n: cfg.n,
        reps: 1,
        k: cfg.k,
        bias_mass: cfg.bias_mass,
        bias_mode: cfg.bias_mode,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut rng = numeric::replication_rng(cfg.seed, 0);
    let rep = density_replicate(&dgp, &study, &mut rng)?;
    let initial = if cfg.from_truth { dgp.p0.clone() } else { rep.initial.clone() };
    let reference = density2::reference_for(cfg.mode, &rep.hal, &rep.empirical);
    let it = IterateConfig {
        second: SecondOrderPath::Universal { step: cfg.step },
        ..Default::default()
    };
    let res = density2::iterate_2tmle(&initial, &rep.hal, reference, cfg.n, &it)?;
    let supports = dgp.p0.supports().to_vec();
    let points = res
        .trace
        .records
        .iter()
        .enumerate()
        .map(|(step, r)| {
            let p = DiscretePmf::new(supports.clone(), r.probs.clone())?;
            Ok(TrackPoint {
                step,
                stage: r.stage,
                total_remainder: density2::total_remainder(&p, &rep.hal, &dgp.p0)?,
                abs_ref_d2: r.ref_d2.abs(),
                abs_ref_d1: r.ref_d1.abs(),
                psi: r.psi,
            })
        })
        .collect::<std::result::Result<Vec<_>, PmfError>>()?;
    Ok(TrackReport {
        psi0: dgp.psi0(),
        estimate: res.estimate,
        points,
        config: cfg.clone(),
    })
}

// ---------------------------------------------------------------------------
// Treatment-specific mean example

/// The point-treatment law `W ~ U(-1, 1)`, `A | W ~ Bern(expit(2W - W^2))`,
/// `Y | A, W ~ Bern(expit(W + A/2))`.
pub struct TsmDgp;

impl TsmDgp {
    pub fn gbar0(w: f64) -> f64 {
        expit(2.0 * w - w * w)
    }

    pub fn qbar0(w: f64, a: f64) -> f64 {
        expit(w + a / 2.0)
    }

    /// `E[qbar0(W, 1)]` by adaptive quadrature.
    pub fn psi0() -> f64 {
        numeric::integrate(|w| Self::qbar0(w, 1.0), -1.0, 1.0, 1e-12) / 2.0
    }

    pub fn draw(n: usize, rng: &mut impl Rng) -> Result<TsmData> {
        loop {
            let mut w = Vec::with_capacity(n);
            let mut a = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let wi = 2.0 * rng.gen::<f64>() - 1.0;
                let ai = f64::from(u8::from(rng.gen::<f64>() < Self::gbar0(wi)));
                let yi = f64::from(u8::from(rng.gen::<f64>() < Self::qbar0(wi, ai)));
                w.push(wi);
                a.push(ai);
                y.push(yi);
            }
            // Redraw the (astronomically rare) sample without a treated unit.
            if a.iter().any(|&v| v == 1.0) {
                return Ok(TsmData::new(w, a, y)?);
            }
        }
    }
}

/// Which initial estimators and HAL undersmoothing a TSM study uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TsmVariant {
    /// `n^-1/4`-consistent `gbar`, inconsistent `Qbar`; HAL undersmoothed.
    One,
    /// Both initials carry a fixed `n^-1/4` bias; HAL undersmoothed.
    Two,
    /// As `Two` with the HAL at the CV choice.
    Three,
    /// HAL initials at the CV choice; HAL reference mildly undersmoothed.
    Four,
}

impl TsmVariant {
    pub fn number(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
            Self::Four => 4,
        }
    }

    pub fn from_number(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            4 => Ok(Self::Four),
            _ => Err(SimError::Config(format!("variant must be 1..=4, got {v}"))),
        }
    }

    /// Path positions below the CV lambda for the HAL reference fits.
    pub fn default_offset(self) -> usize {
        match self {
            Self::One | Self::Two => 10,
            Self::Three => 0,
            Self::Four => 5,
        }
    }

    pub fn default_ns(self) -> Vec<usize> {
        match self {
            Self::One => vec![400, 1000, 2500],
            Self::Two | Self::Three => vec![500, 1000, 2500],
            Self::Four => vec![1000, 2500],
        }
    }

    /// Analytic initial `(gbar, Qbar(0, .), Qbar(1, .))` at `w` for
    /// variants 1-3; these may leave `[0, 1]` and are clamped downstream.
    pub fn analytic_initial(self, w: f64, n: usize) -> Option<(f64, f64, f64)> {
        let r = (n as f64).powf(0.25);
        let g = TsmDgp::gbar0(w) + (0.1 + 2.0 * w.abs()) / (2.0 * r);
        let q = |a: f64| match self {
            Self::One => expit(2.0 * w + 2.0 * a + a * w / 2.0) + (0.1 + 2.0 * w.abs() - a).abs() / (3.0 * r),
            _ => expit(w + a / 2.0) + (0.1 + 2.0 * w.abs() + a / 2.0).abs() / (3.0 * r),
        };
        match self {
            Self::Four => None,
            _ => Some((g, q(0.0), q(1.0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsmStudyConfig {
    pub variant: TsmVariant,
    pub ns: Vec<usize>,
    pub reps: usize,
    /// HAL reference offset; `None` uses the variant default.
    pub undersmooth_offset: Option<usize>,
    pub path: PathConfig,
    pub folds: usize,
    pub bounds: Bounds,
    pub tsm: TsmConfig,
    pub seed: u64,
    pub parallel: bool,
}

impl TsmStudyConfig {
    pub fn new(variant: TsmVariant) -> Self {
        Self {
            variant,
            ns: variant.default_ns(),
            reps: if variant == TsmVariant::Four { 500 } else { 1000 },
            undersmooth_offset: None,
            path: PathConfig::default(),
            folds: 10,
            bounds: Bounds::default(),
            tsm: TsmConfig::default(),
            seed: 20_200_101,
            parallel: true,
        }
    }

    pub fn offset(&self) -> usize {
        self.undersmooth_offset.unwrap_or(self.variant.default_offset())
    }
}

/// One dataset with its HAL reference and initial state.
#[derive(Debug, Clone)]
pub struct TsmReplicate {
    pub data: TsmData,
    pub hal: TsmState,
    pub initial: TsmState,
}

/// HAL fits for `gbar` and `Qbar` at the CV lambda and at `offset` path
/// positions below it, as `(cv state, offset state)`.
pub fn tsm_hal_states(
    data: &TsmData,
    path: &PathConfig,
    folds: usize,
    offset: usize,
    bounds: Bounds,
    rng: &mut impl Rng,
) -> Result<(TsmState, TsmState)> {
    let opts = FitOptions::default();
    let gp = data.g_points();
    let gfit = hal::cv_fits(
        &HalProblem {
            points: &gp,
            data: FitData::new(data.a()),
            include_interactions: false,
        },
        path,
        &CvConfig { folds, seed: rng.gen() },
        &opts,
        &[0, offset],
    )?;
    let qp = data.q_points();
    let qfit = hal::cv_fits(
        &HalProblem {
            points: &qp,
            data: FitData::new(data.y()),
            include_interactions: true,
        },
        path,
        &CvConfig { folds, seed: rng.gen() },
        &opts,
        &[0, offset],
    )?;
    Ok((
        TsmState::from_hal(data, &gfit.fits[0], &qfit.fits[0], bounds)?,
        TsmState::from_hal(data, &gfit.fits[1], &qfit.fits[1], bounds)?,
    ))
}

pub fn tsm_replicate(cfg: &TsmStudyConfig, n: usize, rng: &mut ChaCha20Rng) -> Result<TsmReplicate> {
    let data = TsmDgp::draw(n, rng)?;
    let (cv_state, hal) = tsm_hal_states(&data, &cfg.path, cfg.folds, cfg.offset(), cfg.bounds, rng)?;
    let initial = match cfg.variant {
        TsmVariant::Four => cv_state,
        v => {
            let (mut g, mut q0, mut q1) = (vec![], vec![], vec![]);
            for &w in data.w() {
                let (gi, q0i, q1i) = v.analytic_initial(w, n).expect("analytic variant");
                g.push(gi);
                q0.push(q0i);
                q1.push(q1i);
            }
            TsmState::from_probs(&data, g, q0, q1, cfg.bounds)?
        }
    };
    Ok(TsmReplicate { data, hal, initial })
}

/// Per-replication TSM errors `(first - psi0, second - psi0)`.
pub type TsmErrors = (std::result::Result<f64, String>, std::result::Result<f64, String>);

pub fn tsm_replication(cfg: &TsmStudyConfig, ni: usize, index: usize, check: bool) -> Result<(TsmErrors, usize)> {
    let n = cfg.ns[ni];
    let mut rng = numeric::replication_rng(cfg.seed, ((ni as u64) << 32) | index as u64);
    let rep = tsm_replicate(cfg, n, &mut rng)?;
    let psi0 = TsmDgp::psi0();
    let tol = cfg.tsm.tol.unwrap_or(1.0 / n as f64);
    let mut violations = 0;
    let first = tsm::first_order_tmle(&rep.initial, &rep.hal, &rep.data, &cfg.tsm);
    if check {
        if let Ok((st, _)) = &first {
            let s = match cfg.tsm.mode {
                Mode::Empirical => tsm::pn_d1(st, &rep.data),
                Mode::Regularized => tsm::ptilde_d1(st, &rep.hal, &rep.data),
            };
            violations += usize::from(!(s.abs() < 1e-8));
        }
    }
    let second = tsm::iterative_2tmle(&rep.initial, &rep.hal, &rep.data, &cfg.tsm);
    if check {
        if let Ok(est) = &second {
            violations += usize::from(!(est.scores.gap() < tol));
        }
    }
    Ok((
        (
            first.map(|(_, ci)| ci.estimate - psi0).map_err(|e| e.to_string()),
            second.map(|e| e.second.estimate - psi0).map_err(|e| e.to_string()),
        ),
        violations,
    ))
}

pub const TSM_ESTIMATORS: [&str; 2] = ["1st order", "2nd order"];

pub fn run_tsm_study(cfg: &TsmStudyConfig) -> Result<SimReport> {
    if cfg.reps == 0 || cfg.ns.is_empty() || cfg.ns.iter().any(|&n| n < 10) {
        return Err(SimError::Config("need reps > 0 and every n >= 10".into()));
    }
    let psi0 = TsmDgp::psi0();
    let mut rows = Vec::new();
    let mut messages = Vec::new();
    let (mut checks, mut violations) = (0, 0);
    for (ni, &n) in cfg.ns.iter().enumerate() {
        let results = map_reps(cfg.reps, cfg.parallel, |r| {
            tsm_replication(cfg, ni, r, r % CHECK_EVERY == 0)
        });
        let mut errors = [Vec::with_capacity(cfg.reps), Vec::with_capacity(cfg.reps)];
        let mut failures = [0usize; 2];
        for (r, res) in results.into_iter().enumerate() {
            if r % CHECK_EVERY == 0 {
                checks += 1;
            }
            match res {
                Ok(((e1, e2), v)) => {
                    violations += v;
                    for (j, e) in [e1, e2].into_iter().enumerate() {
                        match e {
                            Ok(x) => errors[j].push(x),
                            Err(msg) => {
                                failures[j] += 1;
                                if messages.len() < MAX_MESSAGES {
                                    messages.push(format!("n={n} rep {r} {}: {msg}", TSM_ESTIMATORS[j]));
                                }
                            }
                        }
                    }
                }
                Err(e) => {
                    failures.iter_mut().for_each(|f| *f += 1);
                    if messages.len() < MAX_MESSAGES {
                        messages.push(format!("n={n} rep {r}: {e}"));
                    }
                }
            }
        }
        let scale = (n as f64).sqrt();
        for j in 0..2 {
            rows.push(SummaryRow::from_errors(n, TSM_ESTIMATORS[j], &errors[j], failures[j], scale));
        }
    }
    Ok(SimReport {
        study: format!("tsm-variant-{}", cfg.variant.number()),
        seed: cfg.seed,
        reps: cfg.reps,
        scaled: true,
        truth: cfg.ns.iter().map(|&n| (n, psi0)).collect(),
        rows,
        contract_checks: checks,
        contract_violations: violations,
        failure_messages: messages,
        config: config_echo(cfg),
    })
}

/// Estimate on user data: HAL fits at the CV lambda serve as initials and
/// the reference is undersmoothed by `offset` path positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TsmDataEstimate {
    pub n: usize,
    pub first: numeric::ConfidenceInterval,
    pub second: numeric::ConfidenceInterval,
    pub rounds: usize,
    pub path_steps: usize,
    pub scores: tsm::StopScores,
}

pub fn estimate_tsm(data: &TsmData, offset: usize, seed: u64, tsm_cfg: &TsmConfig) -> Result<TsmDataEstimate> {
    let mut rng = numeric::replication_rng(seed, 0);
    let (initial, hal) = tsm_hal_states(data, &PathConfig::default(), 10, offset, Bounds::default(), &mut rng)?;
    let est = tsm::iterative_2tmle(&initial, &hal, data, tsm_cfg)?;
    Ok(TsmDataEstimate {
        n: data.n(),
        first: est.first,
        second: est.second,
        rounds: est.rounds,
        path_steps: est.path_steps,
        scores: est.scores,
    })
}
