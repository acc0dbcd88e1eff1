//! Highly adaptive lasso with zero-order indicator splines.
//!
//! Basis functions are `x -> 1{x >= u}` (componentwise) for knots `u` at
//! observed sections. The first coordinate is the sort key; every other
//! coordinate that carries a knot must be binary. Under that layout a basis
//! column is a suffix of the key-sorted rows restricted to a binary-pattern
//! group, and the lasso restricted to one group is a weighted fused lasso
//! on the key order, solvable exactly in linear time.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density2::{DiscretePmf, PmfError};
use crate::numeric::{self, expit, log_expit, NumericError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HalError {
    #[error("response has zero weighted variance")]
    DegenerateResponse,
    #[error("coordinate descent did not converge at lambda {lambda:e} after {sweeps} sweeps (last max |delta beta| {max_delta:e})")]
    NonConvergence { lambda: f64, sweeps: usize, max_delta: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported basis: {0}")]
    UnsupportedBasis(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Pmf(#[from] PmfError),
}

pub type Result<T> = std::result::Result<T, HalError>;

/// Link between the linear predictor and the Bernoulli mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Link {
    #[default]
    Logit,
    /// `mu = 1 - exp(-exp(eta))`: the grouped-time analogue of an
    /// exponential hazard model.
    CLogLog,
}

impl Link {
    pub fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::CLogLog => -(-eta.exp()).exp_m1(),
        }
    }

    /// Bernoulli log-likelihood of `y` at linear predictor `eta`.
    pub fn loglik(self, y: f64, eta: f64) -> f64 {
        let (lp, lq) = match self {
            Link::Logit => (log_expit(eta), log_expit(-eta)),
            Link::CLogLog => {
                let e = eta.exp();
                ((-(-e).exp_m1()).ln(), -e)
            }
        };
        let mut out = 0.0;
        if y > 0.0 {
            out += y * lp;
        }
        if y < 1.0 {
            out += (1.0 - y) * lq;
        }
        out
    }

    /// IRLS weight and score contribution per unit case weight.
    fn working(self, y: f64, eta: f64) -> (f64, f64) {
        match self {
            Link::Logit => {
                let mu = expit(eta);
                (mu * (1.0 - mu), y - mu)
            }
            Link::CLogLog => {
                let e = eta.exp();
                let mu = -(-e).exp_m1();
                let dmu = e * (-e).exp();
                let var = (mu * (1.0 - mu)).max(1e-300);
                (dmu * dmu / var, (y - mu) * dmu / var)
            }
        }
    }
}

/// Indicator basis `{1{x >= u_j}}` plus an implicit intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBasis {
    dim: usize,
    knots: Vec<Vec<f64>>,
}

impl IndicatorBasis {
    pub fn from_knots(dim: usize, mut knots: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(HalError::InvalidInput("basis dimension must be positive".into()));
        }
        if let Some(k) = knots.iter().find(|k| k.len() != dim) {
            return Err(HalError::DimensionMismatch(format!(
                "knot of length {} in a {dim}-dimensional basis",
                k.len()
            )));
        }
        if knots.iter().flatten().any(|v| v.is_nan()) {
            return Err(HalError::InvalidInput("NaN knot".into()));
        }
        knots.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        knots.dedup();
        Ok(Self { dim, knots })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of indicator columns (the intercept is not counted).
    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn knots(&self) -> &[Vec<f64>] {
        &self.knots
    }

    pub fn indicator(&self, j: usize, x: &[f64]) -> bool {
        self.knots[j].iter().zip(x).all(|(u, v)| v >= u)
    }

    /// Row of the design matrix at `x`, intercept first.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        std::iter::once(1.0)
            .chain((0..self.len()).map(|j| if self.indicator(j, x) { 1.0 } else { 0.0 }))
            .collect()
    }
}

fn is_binary(values: impl Iterator<Item = f64>) -> bool {
    values.into_iter().all(|v| v == 0.0 || v == 1.0)
}

/// Knots at every observed section of `points`.
///
/// Continuous coordinates contribute knots at their observed values; binary
/// coordinates only at 1 (a knot at 0 duplicates the unconstrained column).
/// Sections are singletons, or all non-empty coordinate subsets when
/// `include_interactions` is set.
pub fn build_basis(points: &[Vec<f64>], include_interactions: bool) -> Result<IndicatorBasis> {
    let Some(first) = points.first() else {
        return Err(HalError::InvalidInput("no points".into()));
    };
    let dim = first.len();
    if dim == 0 || dim > 16 {
        return Err(HalError::InvalidInput(format!("unsupported dimension {dim}")));
    }
    if points.iter().any(|p| p.len() != dim) {
        return Err(HalError::DimensionMismatch("points of unequal length".into()));
    }
    let binary: Vec<bool> = (0..dim).map(|k| is_binary(points.iter().map(|p| p[k]))).collect();
    let subsets: Vec<u32> = if include_interactions {
        (1..(1u32 << dim)).collect()
    } else {
        (0..dim).map(|k| 1u32 << k).collect()
    };
    let mut knots = Vec::new();
    for p in points {
        for &s in &subsets {
            let in_s = |k: usize| s & (1 << k) != 0;
            if (0..dim).any(|k| in_s(k) && binary[k] && p[k] != 1.0) {
                continue;
            }
            knots.push(
                (0..dim)
                    .map(|k| if in_s(k) { p[k] } else { f64::NEG_INFINITY })
                    .collect(),
            );
        }
    }
    IndicatorBasis::from_knots(dim, knots)
}

/// A basis evaluated on a point set in suffix form.
#[derive(Debug, Clone)]
pub struct HalDesign {
    basis: Arc<IndicatorBasis>,
    n: usize,
    /// `order[r]` is the original index of sorted row `r`.
    order: Vec<usize>,
    /// Binary pattern of each sorted row (bit `k-1` for coordinate `k`).
    row_mask: Vec<u64>,
    /// Distinct group masks; index 0 is the all-rows group.
    masks: Vec<u64>,
    /// Per column: (group index, first sorted row in the column).
    cols: Vec<(usize, usize)>,
    groups: Vec<Group>,
}

/// Rows sharing a binary pattern and the step function they carry.
///
/// Within a group the fitted contribution is a step function of the sort
/// key whose jumps sit at column starts; the l1 penalty on the columns is
/// its total variation. Group 0 holds the intercept, so its first level is
/// free; every other group starts from level 0.
#[derive(Debug, Clone)]
struct Group {
    /// Sorted-row indices belonging to the group.
    rows: Vec<usize>,
    /// Block boundaries as positions into `rows`, strictly increasing.
    bounds: Vec<usize>,
    /// Column carrying the jump at each boundary.
    jump_col: Vec<usize>,
    free: bool,
}

impl Group {
    /// Ranges of `rows` forming the blocks of the group's fused-lasso problem.
    fn blocks(&self) -> Vec<(usize, usize)> {
        let mut starts = Vec::with_capacity(self.bounds.len() + 1);
        if self.free {
            starts.push(0);
        }
        starts.extend(&self.bounds);
        let ends = starts.iter().skip(1).copied().chain(std::iter::once(self.rows.len()));
        starts.iter().copied().zip(ends).collect()
    }
}

impl HalDesign {
    pub fn new(basis: Arc<IndicatorBasis>, points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(HalError::InvalidInput("no rows".into()));
        }
        let dim = basis.dim();
        if dim > 64 {
            return Err(HalError::UnsupportedBasis("more than 64 coordinates".into()));
        }
        if points.iter().any(|p| p.len() != dim) {
            return Err(HalError::DimensionMismatch(format!("points must have length {dim}")));
        }
        if points.iter().flatten().any(|v| v.is_nan()) {
            return Err(HalError::InvalidInput("NaN covariate".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
        let keys: Vec<f64> = order.iter().map(|&i| points[i][0]).collect();
        let binary: Vec<bool> = (0..dim).map(|k| is_binary(points.iter().map(|p| p[k]))).collect();
        let row_mask: Vec<u64> = order
            .iter()
            .map(|&i| (1..dim).filter(|&k| points[i][k] == 1.0).fold(0u64, |m, k| m | 1 << (k - 1)))
            .collect();

        let mut masks = vec![0u64];
        let mut mask_pos: HashMap<u64, usize> = HashMap::from([(0, 0)]);
        let mut cols = Vec::with_capacity(basis.len());
        for knot in basis.knots() {
            let mut mask = 0u64;
            let mut empty = false;
            for k in 1..dim {
                let u = knot[k];
                if u == f64::NEG_INFINITY || u <= 0.0 && binary[k] {
                    continue;
                }
                if !binary[k] {
                    return Err(HalError::UnsupportedBasis(format!(
                        "knot on non-binary coordinate {k}; only the first coordinate may be continuous"
                    )));
                }
                if u > 1.0 {
                    empty = true;
                }
                mask |= 1 << (k - 1);
            }
            let start = if empty {
                n
            } else {
                keys.partition_point(|&v| v < knot[0])
            };
            let g = *mask_pos.entry(mask).or_insert_with(|| {
                masks.push(mask);
                masks.len() - 1
            });
            cols.push((g, start));
        }

        let mut groups: Vec<Group> = masks
            .iter()
            .enumerate()
            .map(|(g, &m)| Group {
                rows: (0..n).filter(|&r| row_mask[r] & m == m).collect(),
                bounds: vec![],
                jump_col: vec![],
                free: g == 0,
            })
            .collect();
        let mut by_start: Vec<usize> = (0..cols.len()).collect();
        by_start.sort_by_key(|&j| (cols[j].1, j));
        for j in by_start {
            let (g, s) = cols[j];
            let grp = &mut groups[g];
            let pos = grp.rows.partition_point(|&r| r < s);
            // Columns without rows, duplicates of the intercept and repeated
            // boundaries keep a zero coefficient.
            if pos == grp.rows.len() || grp.free && pos == 0 || grp.bounds.last() == Some(&pos) {
                continue;
            }
            grp.bounds.push(pos);
            grp.jump_col.push(j);
        }
        Ok(Self {
            basis,
            n,
            order,
            row_mask,
            masks,
            cols,
            groups,
        })
    }

    pub fn basis(&self) -> &Arc<IndicatorBasis> {
        &self.basis
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    fn in_mask(&self, r: usize, mask: u64) -> bool {
        self.row_mask[r] & mask == mask
    }

    /// Suffix sums `S(s) = sum_{r >= s, r in mask} v_r` for every group mask.
    fn suffix_sums(&self, v: &[f64]) -> Vec<Vec<f64>> {
        self.masks
            .iter()
            .map(|&m| {
                let mut s = vec![0.0; self.n + 1];
                for r in (0..self.n).rev() {
                    s[r] = s[r + 1] + if self.in_mask(r, m) { v[r] } else { 0.0 };
                }
                s
            })
            .collect()
    }

    /// Adds `sum_j beta_j col_j` to `eta` (sorted row order).
    fn add_columns(&self, beta: &[f64], eta: &mut [f64]) {
        let mut diff = vec![vec![0.0; self.n + 1]; self.masks.len()];
        for (j, &(g, s)) in self.cols.iter().enumerate() {
            if beta[j] != 0.0 && s < self.n {
                diff[g][s] += beta[j];
            }
        }
        for (g, d) in diff.iter().enumerate() {
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let m = self.masks[g];
            let mut acc = 0.0;
            for r in 0..self.n {
                acc += d[r];
                if acc != 0.0 && self.in_mask(r, m) {
                    eta[r] += acc;
                }
            }
        }
    }

    /// Per-group step levels at each group row for the given coefficients.
    fn group_levels(&self, beta0: f64, beta: &[f64]) -> Vec<Vec<f64>> {
        let mut jumps: Vec<Vec<f64>> = self.groups.iter().map(|g| vec![0.0; g.rows.len() + 1]).collect();
        for (j, &(g, s)) in self.cols.iter().enumerate() {
            if beta[j] != 0.0 {
                let pos = self.groups[g].rows.partition_point(|&r| r < s);
                jumps[g][pos] += beta[j];
            }
        }
        jumps[0][0] += beta0;
        jumps
            .into_iter()
            .map(|j| {
                let mut acc = 0.0;
                j[..j.len() - 1]
                    .iter()
                    .map(|d| {
                        acc += d;
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    /// Linear predictor `beta0 + X beta` in original row order.
    pub fn linear_predictor(&self, beta0: f64, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.ncols() {
            return Err(HalError::DimensionMismatch(format!(
                "{} coefficients for {} columns",
                beta.len(),
                self.ncols()
            )));
        }
        let mut eta = vec![beta0; self.n];
        self.add_columns(beta, &mut eta);
        let mut out = vec![0.0; self.n];
        for (r, &i) in self.order.iter().enumerate() {
            out[i] = eta[r];
        }
        Ok(out)
    }

    fn sorted<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| v[i]).collect()
    }
}
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub link: Link,
    /// Convergence threshold on `max |delta beta|` between IRLS iterations.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            link: Link::Logit,
            tol: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// A fitted lasso: intercept, indicator coefficients and the basis.
#[derive(Debug, Clone, Serialize)]
pub struct HalFit {
    #[serde(skip)]
    pub basis: Arc<IndicatorBasis>,
    pub link: Link,
    pub lambda: f64,
    pub intercept: f64,
    pub beta: Vec<f64>,
    /// Penalized objective after each accepted IRLS step, starting value first.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
}

impl HalFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn l1_norm(&self) -> f64 {
        self.beta.iter().map(|b| b.abs()).sum()
    }

    pub fn nonzero(&self) -> usize {
        self.beta.iter().filter(|b| **b != 0.0).count()
    }

    pub fn predict_linear(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .beta
                .iter()
                .enumerate()
                .filter(|(j, b)| **b != 0.0 && self.basis.indicator(*j, x))
                .map(|(_, b)| b)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.link.mean(self.predict_linear(x))
    }

    /// Linear predictor at many points at once.
    pub fn predict_linear_many(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        HalDesign::new(self.basis.clone(), points)?.linear_predictor(self.intercept, &self.beta)
    }
}

/// Data for one penalized fit: responses in `[0, 1]`, optional case
/// weights and offsets, all in the design's original row order.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub y: &'a [f64],
    pub weights: Option<&'a [f64]>,
    pub offset: Option<&'a [f64]>,
}

impl<'a> FitData<'a> {
    pub fn new(y: &'a [f64]) -> Self {
        Self {
            y,
            weights: None,
            offset: None,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.y.len() != n {
            return Err(HalError::DimensionMismatch(format!("{} responses for {n} rows", self.y.len())));
        }
        if self.y.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(HalError::InvalidInput("responses must lie in [0, 1]".into()));
        }
        if let Some(w) = self.weights {
            if w.len() != n || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(HalError::InvalidInput("weights must be n finite non-negative values".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(HalError::InvalidInput("weights sum to zero".into()));
            }
        }
        if let Some(o) = self.offset {
            if o.len() != n || o.iter().any(|v| !v.is_finite()) {
                return Err(HalError::InvalidInput("offset must be n finite values".into()));
            }
        }
        Ok(())
    }
}

/// Sorted, normalized working copies of the fit data.
struct Prepared {
    y: Vec<f64>,
    w: Vec<f64>,
    off: Vec<f64>,
}

impl Prepared {
    fn new(design: &HalDesign, data: &FitData) -> Result<Self> {
        data.validate(design.n)?;
        let y = design.sorted(data.y);
        let mut w = match data.weights {
            Some(w) => design.sorted(w),
            None => vec![1.0; design.n],
        };
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let off = match data.offset {
            Some(o) => design.sorted(o),
            None => vec![0.0; design.n],
        };
        Ok(Self { y, w, off })
    }

    fn neg_loglik(&self, link: Link, eta: &[f64]) -> f64 {
        -self
            .y
            .iter()
            .zip(&self.w)
            .zip(eta)
            .map(|((y, w), e)| if *w == 0.0 { 0.0 } else { w * link.loglik(*y, *e) })
            .sum::<f64>()
    }
}

/// Weighted one-dimensional fused lasso by dynamic programming:
/// minimizes `sum_k w_k/2 (z_k - f_k)^2 + lambda sum_{k>=1} |f_k - f_{k-1}|`,
/// plus `lambda |f_0|` when `anchored`. Weights must be positive.
///
/// The derivative of the running cost is piecewise linear; it is kept as a
/// deque of breakpoints `(x, delta slope, delta intercept)`, truncated to
/// `±lambda` after each block, which makes the pass linear in amortized time.
pub fn fused_lasso_1d(w: &[f64], z: &[f64], lambda: f64, anchored: bool) -> Vec<f64> {
    let k = w.len();
    if k == 0 {
        return vec![];
    }
    let mut knots: VecDeque<(f64, f64, f64)> = VecDeque::new();
    let (mut al, mut bl, mut ar, mut br) = (0.0, 0.0, 0.0, 0.0);
    if anchored {
        knots.push_back((0.0, 0.0, 2.0 * lambda));
        bl = -lambda;
        br = lambda;
    }
    let mut lo = vec![0.0; k];
    let mut hi = vec![0.0; k];
    for i in 0..k {
        al += w[i];
        bl -= w[i] * z[i];
        ar += w[i];
        br -= w[i] * z[i];
        if i + 1 == k {
            break;
        }
        let (mut a, mut b) = (al, bl);
        lo[i] = loop {
            match knots.front() {
                Some(&(x, da, db)) if a * x + b < -lambda => {
                    knots.pop_front();
                    a += da;
                    b += db;
                    // The anchor makes the derivative jump, so the level can sit
                    // on a breakpoint. Every piece has slope >= w[i]; a smaller
                    // one is cancellation error and also pins the breakpoint.
                    if a * x + b >= -lambda || a < 0.5 * w[i] {
                        break x;
                    }
                }
                _ => break (-lambda - b) / a,
            }
        };
        knots.push_front((lo[i], a, b + lambda));
        al = 0.0;
        bl = -lambda;

        let (mut a, mut b) = (ar, br);
        hi[i] = loop {
            match knots.back() {
                Some(&(x, da, db)) if a * x + b > lambda => {
                    knots.pop_back();
                    a -= da;
                    b -= db;
                    if a * x + b <= lambda || a < 0.5 * w[i] {
                        break x;
                    }
                }
                _ => break (lambda - b) / a,
            }
        };
        knots.push_back((hi[i], -a, lambda - b));
        ar = 0.0;
        br = lambda;
    }
    let (mut a, mut b) = (al, bl);
    let mut root = None;
    for &(x, da, db) in &knots {
        if a * x + b >= 0.0 {
            break;
        }
        a += da;
        b += db;
        if a * x + b >= 0.0 || a < 0.5 * w[k - 1] {
            root = Some(x);
            break;
        }
    }
    let mut f = vec![0.0; k];
    f[k - 1] = root.unwrap_or(-b / a);
    for i in (0..k - 1).rev() {
        f[i] = f[i + 1].max(lo[i]).min(hi[i]);
    }
    f
}

/// Minimizes `-(1/W) sum_i w_i loglik_i(beta0 + x_i beta) + lambda ||beta||_1`
/// (intercept unpenalized).
///
/// Each IRLS step minimizes the quadratic model by block coordinate descent
/// over binary-pattern groups, every block solved exactly as a fused lasso,
/// followed by a backtracking line search on the exact objective.
pub fn fit_l1_logistic(
    design: &HalDesign,
    data: &FitData,
    lambda: f64,
    opts: &FitOptions,
    warm: Option<&HalFit>,
) -> Result<HalFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(HalError::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let prep = Prepared::new(design, data)?;
    let n = design.n;
    let p = design.ncols();
    let link = opts.link;
    let (mut beta0, mut beta) = match warm {
        Some(f) if f.beta.len() == p => (f.intercept, f.beta.clone()),
        _ => (intercept_only(&prep, link)?, vec![0.0; p]),
    };
    // Re-express the start through the group step functions so that
    // coefficients on inactive columns are zero.
    let levels = design.group_levels(beta0, &beta);
    (beta0, beta) = coefs_from_levels(design, &levels);
    let mut eta: Vec<f64> = prep.off.clone();
    add_levels(design, &levels, &mut eta);
    let penalty = |b: &[f64]| lambda * b.iter().map(|v| v.abs()).sum::<f64>();
    let mut obj = prep.neg_loglik(link, &eta) + penalty(&beta);
    let mut trace = vec![obj];
    let mut sweeps = 0usize;
    let inner_tol = opts.tol * 0.01;

    let mut v = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut last_step = f64::NAN;
    loop {
        for i in 0..n {
            let (vi, ri) = link.working(prep.y[i], eta[i]);
            let vi = vi.max(1e-12);
            v[i] = prep.w[i] * vi;
            z[i] = eta[i] + ri / vi;
        }
        let mut levels = design.group_levels(beta0, &beta);
        let mut cur = eta.clone();
        loop {
            sweeps += 1;
            if sweeps > opts.max_sweeps {
                return Err(HalError::NonConvergence {
                    lambda,
                    sweeps: opts.max_sweeps,
                    max_delta: last_step,
                });
            }
            let mut max_change = 0.0f64;
            for (g, grp) in design.groups.iter().enumerate() {
                let blocks = grp.blocks();
                if blocks.is_empty() {
                    continue;
                }
                let mut bw = Vec::with_capacity(blocks.len());
                let mut bz = Vec::with_capacity(blocks.len());
                for &(a, b) in &blocks {
                    let (mut sw, mut sz) = (0.0, 0.0);
                    for pos in a..b {
                        let r = grp.rows[pos];
                        sw += v[r];
                        sz += v[r] * (z[r] - cur[r] + levels[g][pos]);
                    }
                    let sw = sw.max(1e-300);
                    bw.push(sw);
                    bz.push(sz / sw);
                }
                let f = fused_lasso_1d(&bw, &bz, lambda, !grp.free);
                if !grp.free {
                    // Rows before the first boundary stay at level 0.
                    for pos in 0..blocks[0].0 {
                        let r = grp.rows[pos];
                        cur[r] -= levels[g][pos];
                        levels[g][pos] = 0.0;
                    }
                }
                for (&(a, b), &fk) in blocks.iter().zip(&f) {
                    for pos in a..b {
                        let r = grp.rows[pos];
                        let delta = fk - levels[g][pos];
                        if delta != 0.0 {
                            cur[r] += delta;
                            levels[g][pos] = fk;
                            max_change = max_change.max(delta.abs());
                        }
                    }
                }
            }
            if max_change < inner_tol || design.groups.len() == 1 {
                break;
            }
        }
        let (nb0, nbeta) = coefs_from_levels(design, &levels);
        let deta: Vec<f64> = cur.iter().zip(&eta).map(|(c, e)| c - e).collect();
        let dir: Vec<f64> = nbeta.iter().zip(&beta).map(|(b, o)| b - o).collect();
        let dir0 = nb0 - beta0;

        // Backtracking on the exact penalized objective along the IRLS step.
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial_eta = vec![0.0; n];
        let mut trial_beta = vec![0.0; p];
        for _ in 0..60 {
            for i in 0..n {
                trial_eta[i] = eta[i] + t * deta[i];
            }
            for j in 0..p {
                trial_beta[j] = beta[j] + t * dir[j];
            }
            let trial = prep.neg_loglik(link, &trial_eta) + penalty(&trial_beta);
            if trial <= obj {
                obj = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let step = if accepted {
            eta.copy_from_slice(&trial_eta);
            beta.copy_from_slice(&trial_beta);
            beta0 += t * dir0;
            trace.push(obj);
            t * dir.iter().fold(dir0.abs(), |m, d| m.max(d.abs()))
        } else {
            0.0
        };
        last_step = step;
        if step < opts.tol {
            break;
        }
    }
    Ok(HalFit {
        basis: design.basis.clone(),
        link,
        lambda,
        intercept: beta0,
        beta,
        objective_trace: trace,
        sweeps,
    })
}

fn coefs_from_levels(design: &HalDesign, levels: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let mut beta = vec![0.0; design.ncols()];
    let mut beta0 = 0.0;
    for (g, grp) in design.groups.iter().enumerate() {
        let lv = &levels[g];
        if grp.rows.is_empty() {
            continue;
        }
        if grp.free {
            beta0 = lv[0];
        }
        for (&pos, &j) in grp.bounds.iter().zip(&grp.jump_col) {
            let prev = if pos == 0 { 0.0 } else { lv[pos - 1] };
            beta[j] = lv[pos] - prev;
        }
    }
    (beta0, beta)
}

fn add_levels(design: &HalDesign, levels: &[Vec<f64>], eta: &mut [f64]) {
    for (grp, lv) in design.groups.iter().zip(levels) {
        for (pos, &r) in grp.rows.iter().enumerate() {
            eta[r] += lv[pos];
        }
    }
}
fn intercept_only(prep: &Prepared, link: Link) -> Result<f64> {
    let ybar: f64 = prep.y.iter().zip(&prep.w).map(|(y, w)| y * w).sum();
    let ybar = ybar.clamp(1e-6, 1.0 - 1e-6);
    let mut b = match link {
        Link::Logit => numeric::logit(ybar),
        Link::CLogLog => (-(1.0 - ybar).ln()).ln(),
    };
    let mean_off: f64 = prep.off.iter().zip(&prep.w).map(|(o, w)| o * w).sum();
    b -= mean_off;
    for _ in 0..200 {
        let (mut g, mut h) = (0.0, 0.0);
        for i in 0..prep.y.len() {
            let (vi, ri) = link.working(prep.y[i], prep.off[i] + b);
            g += prep.w[i] * ri;
            h += prep.w[i] * vi;
        }
        if h <= 0.0 || !g.is_finite() {
            return Err(HalError::DegenerateResponse);
        }
        let step = g / h;
        b += step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    Ok(b)
}

/// Largest violation of the lasso optimality conditions at `fit`.
///
/// Zero coefficients need `|grad_j| <= lambda`; non-zero ones need
/// `grad_j = lambda sign(beta_j)`; the intercept gradient must vanish.
pub fn kkt_violation(design: &HalDesign, data: &FitData, fit: &HalFit) -> Result<f64> {
    let prep = Prepared::new(design, data)?;
    let mut eta: Vec<f64> = prep.off.iter().map(|o| o + fit.intercept).collect();
    design.add_columns(&fit.beta, &mut eta);
    let r: Vec<f64> = (0..design.n)
        .map(|i| prep.w[i] * fit.link.working(prep.y[i], eta[i]).1)
        .collect();
    let g = design.suffix_sums(&r);
    let mut worst = g[0][0].abs();
    for (j, &(gi, s)) in design.cols.iter().enumerate() {
        let grad = g[gi][s];
        let b = fit.beta[j];
        let viol = if b == 0.0 {
            (grad.abs() - fit.lambda).max(0.0)
        } else {
            (grad - fit.lambda * b.signum()).abs()
        };
        worst = worst.max(viol);
    }
    Ok(worst)
}

/// Geometric lambda sequence from the smallest lambda that zeroes every
/// penalized coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub values: Vec<f64>,
}

impl LambdaPath {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub len: usize,
    /// Ratio `lambda_min / lambda_max`. `None` picks 0.01 when the design has
    /// fewer rows than columns and 1e-4 otherwise.
    pub min_ratio: Option<f64>,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            len: 100,
            min_ratio: None,
        }
    }
}

pub fn lambda_path(design: &HalDesign, data: &FitData, cfg: &PathConfig, link: Link) -> Result<LambdaPath> {
    if cfg.len < 2 {
        return Err(HalError::InvalidInput("path needs at least two values".into()));
    }
    let prep = Prepared::new(design, data)?;
    let ybar: f64 = prep.y.iter().zip(&prep.w).map(|(y, w)| y * w).sum();
    let var: f64 = prep.y.iter().zip(&prep.w).map(|(y, w)| w * (y - ybar).powi(2)).sum();
    if var <= 1e-300 {
        return Err(HalError::DegenerateResponse);
    }
    let b0 = intercept_only(&prep, link)?;
    let r: Vec<f64> = (0..design.n)
        .map(|i| prep.w[i] * link.working(prep.y[i], prep.off[i] + b0).1)
        .collect();
    let g = design.suffix_sums(&r);
    let lmax = design
        .cols
        .iter()
        .map(|&(gi, s)| g[gi][s].abs())
        .fold(0.0f64, f64::max);
    if !(lmax > 0.0) {
        return Err(HalError::DegenerateResponse);
    }
    let ratio = cfg
        .min_ratio
        .unwrap_or(if design.nrows() < design.ncols() { 1e-2 } else { 1e-4 });
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HalError::InvalidInput(format!("min ratio {ratio} not in (0, 1)")));
    }
    let k = (cfg.len - 1) as f64;
    let values = (0..cfg.len).map(|i| lmax * ratio.powf(i as f64 / k)).collect();
    Ok(LambdaPath { values })
}

/// Warm-started fits along `path`, largest lambda first.
pub fn fit_path(design: &HalDesign, data: &FitData, path: &LambdaPath, opts: &FitOptions) -> Result<Vec<HalFit>> {
    let mut fits: Vec<HalFit> = Vec::with_capacity(path.len());
    for &lambda in &path.values {
        let fit = fit_l1_logistic(design, data, lambda, opts, fits.last())?;
        fits.push(fit);
    }
    Ok(fits)
}

/// A covariate/response problem for cross-validated HAL.
#[derive(Debug, Clone, Copy)]
pub struct HalProblem<'a> {
    pub points: &'a [Vec<f64>],
    pub data: FitData<'a>,
    pub include_interactions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    /// Held-out mean negative log-likelihood per lambda over the converged
    /// prefix of the path.
    pub loss: Vec<f64>,
    pub index: usize,
    pub lambda: f64,
}

/// Fold labels; binary responses are stratified.
pub fn fold_assignment(y: &[f64], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > y.len() {
        return Err(HalError::InvalidInput(format!("{folds} folds for {} rows", y.len())));
    }
    let mut rng = numeric::replication_rng(seed, u64::MAX);
    let binary = is_binary(y.iter().copied());
    let mut strata: Vec<Vec<usize>> = if binary {
        vec![
            (0..y.len()).filter(|&i| y[i] == 0.0).collect(),
            (0..y.len()).filter(|&i| y[i] == 1.0).collect(),
        ]
    } else {
        vec![(0..y.len()).collect()]
    };
    let mut labels = vec![0; y.len()];
    let mut next = 0;
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
        for &i in s.iter() {
            labels[i] = next % folds;
            next += 1;
        }
    }
    Ok(labels)
}

fn select_rows<T: Clone>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&i| v[i].clone()).collect()
}

/// K-fold cross-validation over `path`. Each fold builds its basis from its
/// own training points, so held-out predictions are left-constant steps.
pub fn cv_select(problem: &HalProblem, path: &LambdaPath, cfg: &CvConfig, opts: &FitOptions) -> Result<CvResult> {
    let n = problem.points.len();
    problem.data.validate(n)?;
    let labels = fold_assignment(problem.data.y, cfg.folds, cfg.seed)?;
    let mut loss = vec![0.0; path.len()];
    // Like glmnet, a lambda whose fit does not converge ends the usable path.
    let mut usable = path.len();
    let mut total_w = 0.0;
    for fold in 0..cfg.folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == fold).collect();
        let train_pts = select_rows(problem.points, &train);
        let basis = Arc::new(build_basis(&train_pts, problem.include_interactions)?);
        let design = HalDesign::new(basis.clone(), &train_pts)?;
        let ty = select_rows(problem.data.y, &train);
        let tw = problem.data.weights.map(|w| select_rows(w, &train));
        let to = problem.data.offset.map(|o| select_rows(o, &train));
        let tdata = FitData {
            y: &ty,
            weights: tw.as_deref(),
            offset: to.as_deref(),
        };
        let test_pts = select_rows(problem.points, &test);
        let test_design = HalDesign::new(basis, &test_pts)?;
        let hy = select_rows(problem.data.y, &test);
        let hw = problem.data.weights.map_or(vec![1.0; test.len()], |w| select_rows(w, &test));
        let ho = problem.data.offset.map_or(vec![0.0; test.len()], |o| select_rows(o, &test));
        total_w += hw.iter().sum::<f64>();
        let mut warm: Option<HalFit> = None;
        for (k, &lambda) in path.values[..usable].iter().enumerate() {
            let fit = match fit_l1_logistic(&design, &tdata, lambda, opts, warm.as_ref()) {
                Ok(f) => f,
                Err(HalError::NonConvergence { .. }) if k > 0 => {
                    usable = k;
                    break;
                }
                Err(e) => return Err(e),
            };
            let eta = test_design.linear_predictor(fit.intercept, &fit.beta)?;
            loss[k] -= (0..test.len())
                .map(|i| hw[i] * opts.link.loglik(hy[i], eta[i] + ho[i]))
                .sum::<f64>();
            warm = Some(fit);
        }
    }
    loss.truncate(usable);
    loss.iter_mut().for_each(|l| *l /= total_w);
    let index = argmin(&loss);
    Ok(CvResult {
        lambda: path.values[index],
        index,
        loss,
    })
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}

/// Lambda `offset` grid steps below the CV choice (clamped to the path end).
pub fn undersmooth_by_offset(path: &LambdaPath, cv_index: usize, offset: usize) -> f64 {
    path.values[(cv_index + offset).min(path.len() - 1)]
}

/// Path, CV choice and full-data fits at `cv index + offset` per offset.
#[derive(Debug, Clone)]
pub struct CvFits {
    pub path: LambdaPath,
    pub cv: CvResult,
    pub fits: Vec<HalFit>,
}

pub fn cv_fits(
    problem: &HalProblem,
    path_cfg: &PathConfig,
    cv_cfg: &CvConfig,
    opts: &FitOptions,
    offsets: &[usize],
) -> Result<CvFits> {
    let basis = Arc::new(build_basis(problem.points, problem.include_interactions)?);
    let design = HalDesign::new(basis, problem.points)?;
    let mut path = lambda_path(&design, &problem.data, path_cfg, opts.link)?;
    let cv = cv_select(problem, &path, cv_cfg, opts)?;
    path.values.truncate(cv.loss.len());
    let last = offsets.iter().map(|o| cv.index + o).max().unwrap_or(0).min(path.len() - 1);
    let mut fits: Vec<HalFit> = Vec::with_capacity(last + 1);
    for &lambda in &path.values[..=last] {
        match fit_l1_logistic(&design, &problem.data, lambda, opts, fits.last()) {
            Ok(fit) => fits.push(fit),
            Err(HalError::NonConvergence { .. }) if fits.len() > cv.index => break,
            Err(e) => return Err(e),
        }
    }
    path.values.truncate(fits.len());
    let fits = offsets
        .iter()
        .map(|o| fits[(cv.index + o).min(fits.len() - 1)].clone())
        .collect();
    Ok(CvFits { path, cv, fits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UndersmoothChoice {
    pub index: usize,
    /// False when no candidate met the criterion and the smallest was taken.
    pub qualified: bool,
}

/// Picks the first (largest-lambda) candidate whose check passes, falling
/// back to the last. `passes` is evaluated lazily in order.
pub fn undersmooth_by_score(count: usize, mut passes: impl FnMut(usize) -> bool) -> Result<UndersmoothChoice> {
    if count == 0 {
        return Err(HalError::InvalidInput("no undersmoothing candidates".into()));
    }
    for k in 0..count {
        if passes(k) {
            return Ok(UndersmoothChoice { index: k, qualified: true });
        }
    }
    Ok(UndersmoothChoice {
        index: count - 1,
        qualified: false,
    })
}

/// Person-period form of a discrete sample: one row per support point but
/// the last, with response `events / at_risk` and weight `at_risk`.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardRows {
    pub points: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn hazard_rows(counts: &[usize], supports: &[f64]) -> Result<HazardRows> {
    if counts.len() != supports.len() || counts.len() < 2 {
        return Err(HalError::DimensionMismatch("counts and supports must match and have length >= 2".into()));
    }
    let mut at_risk: usize = counts.iter().sum();
    if at_risk == 0 {
        return Err(HalError::InvalidInput("empty sample".into()));
    }
    let mut rows = HazardRows {
        points: vec![],
        y: vec![],
        weights: vec![],
    };
    for i in 0..counts.len() - 1 {
        if at_risk > 0 {
            rows.points.push(vec![supports[i]]);
            rows.y.push(counts[i] as f64 / at_risk as f64);
            rows.weights.push(at_risk as f64);
        }
        at_risk -= counts[i];
    }
    Ok(rows)
}

fn hazard_basis(supports: &[f64]) -> Result<Arc<IndicatorBasis>> {
    Ok(Arc::new(IndicatorBasis::from_knots(
        1,
        supports.iter().map(|&s| vec![s]).collect(),
    )?))
}

/// Hazard-to-pmf map `p_i = h_i prod_{j<i} (1 - h_j)`, last point absorbing.
pub fn pmf_from_hazards(hazards: &[f64]) -> Vec<f64> {
    let mut surv = 1.0;
    let mut p = Vec::with_capacity(hazards.len() + 1);
    for &h in hazards {
        p.push(surv * h);
        surv *= 1.0 - h;
    }
    p.push(surv);
    p
}

fn pmf_from_fit(fit: &HalFit, supports: &[f64]) -> Result<DiscretePmf> {
    let hazards: Vec<f64> = supports[..supports.len() - 1]
        .iter()
        .map(|&s| fit.predict(&[s]))
        .collect();
    Ok(DiscretePmf::new(supports.to_vec(), pmf_from_hazards(&hazards))?)
}

/// Penalized discrete-hazard pmf with knots at every support point.
pub fn fit_hal_pmf(counts: &[usize], supports: &[f64], lambda: f64, opts: &FitOptions) -> Result<DiscretePmf> {
    let rows = hazard_rows(counts, supports)?;
    let design = HalDesign::new(hazard_basis(supports)?, &rows.points)?;
    let data = FitData {
        y: &rows.y,
        weights: Some(&rows.weights),
        offset: None,
    };
    let fit = fit_l1_logistic(&design, &data, lambda, opts, None)?;
    pmf_from_fit(&fit, supports)
}

/// Lambda path and cross-validated choice for the hazard pmf fit.
#[derive(Debug, Clone)]
pub struct PmfCv {
    pub path: LambdaPath,
    pub cv: CvResult,
}

pub fn cv_hal_pmf(
    sample: &[usize],
    supports: &[f64],
    path_cfg: &PathConfig,
    cfg: &CvConfig,
    opts: &FitOptions,
) -> Result<PmfCv> {
    let m = supports.len();
    let tally = |idx: &mut dyn Iterator<Item = usize>| -> Result<Vec<usize>> {
        let mut c = vec![0usize; m];
        for i in idx {
            if i >= m {
                return Err(HalError::InvalidInput(format!("sample index {i} outside {m} supports")));
            }
            c[i] += 1;
        }
        Ok(c)
    };
    let counts = tally(&mut sample.iter().copied())?;
    let basis = hazard_basis(supports)?;
    let rows = hazard_rows(&counts, supports)?;
    let design = HalDesign::new(basis.clone(), &rows.points)?;
    let data = FitData {
        y: &rows.y,
        weights: Some(&rows.weights),
        offset: None,
    };
    // The ratio rule counts person-period rows, as an expanded design would.
    let expanded: f64 = rows.weights.iter().sum();
    let path_cfg = PathConfig {
        min_ratio: Some(path_cfg.min_ratio.unwrap_or(if expanded < design.ncols() as f64 {
            1e-2
        } else {
            1e-4
        })),
        ..*path_cfg
    };
    let path = lambda_path(&design, &data, &path_cfg, opts.link)?;

    let pseudo_y: Vec<f64> = vec![0.5; sample.len()];
    let labels = fold_assignment(&pseudo_y, cfg.folds, cfg.seed)?;
    let mut loss = vec![0.0; path.len()];
    for fold in 0..cfg.folds {
        let train = tally(&mut (0..sample.len()).filter(|&i| labels[i] != fold).map(|i| sample[i]))?;
        let test = tally(&mut (0..sample.len()).filter(|&i| labels[i] == fold).map(|i| sample[i]))?;
        let rows = hazard_rows(&train, supports)?;
        let design = HalDesign::new(basis.clone(), &rows.points)?;
        let data = FitData {
            y: &rows.y,
            weights: Some(&rows.weights),
            offset: None,
        };
        let mut warm: Option<HalFit> = None;
        for (k, &lambda) in path.values.iter().enumerate() {
            let fit = fit_l1_logistic(&design, &data, lambda, opts, warm.as_ref())?;
            let pmf = pmf_from_fit(&fit, supports)?;
            loss[k] -= test
                .iter()
                .zip(pmf.probs())
                .filter(|(c, _)| **c > 0)
                .map(|(&c, &p)| c as f64 * p.ln())
                .sum::<f64>();
            warm = Some(fit);
        }
    }
    loss.iter_mut().for_each(|l| *l /= sample.len() as f64);
    let index = argmin(&loss);
    Ok(PmfCv {
        cv: CvResult {
            lambda: path.values[index],
            index,
            loss,
        },
        path,
    })
}
