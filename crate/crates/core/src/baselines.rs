//! Classical forecasters fitted to the observed history only: block-free
//! historical simulation and a two-stage DCC-GARCH(1,1).
//!
//! Both work on first differences of the history and accept nothing but the
//! [`PathMatrix`], so they cannot see the generating spec or the oracle.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, column_correlation, nearest_pd_repair, CholeskyFactor, CorrelationMatrix, PD_FLOOR};
use crate::rng::RngStream;
use crate::simulator::{PathMatrix, SampleSet};

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const MIN_FIT_LENGTH: usize = 50;
/// Upper bound on fitted persistence (`α + β`, `a + b`).
const MAX_PERSISTENCE: f64 = 0.9999;
/// χ²₂ 95% quantile, used to test GARCH dynamics against constant variance.
const LR_CRITICAL_2DF: f64 = 5.991;
const GARCH_STARTS: [(f64, f64); 3] = [(0.05, 0.9), (0.1, 0.8), (0.02, 0.95)];
const DCC_STARTS: [(f64, f64); 3] = [(0.03, 0.95), (0.05, 0.9), (0.01, 0.97)];

fn increments_of(history: &PathMatrix) -> Result<Vec<f64>> {
    if history.n_steps < 2 {
        return Err(Error::DegenerateHistory(history.n_steps));
    }
    Ok(history.increments())
}

/// Bootstraps whole increment rows (joint across dimensions) with
/// replacement and cumulates them from the history's terminal state.
pub fn historical_simulation(history: &PathMatrix, n_paths: usize, horizon: usize, rng: &RngStream) -> Result<SampleSet> {
    let inc = increments_of(history)?;
    let d = history.dims;
    let rows = history.n_steps - 1;
    let start = history.last_row();
    let mut out = SampleSet::zeros(n_paths, horizon, d, history.dt);
    if horizon == 0 || d == 0 {
        return Ok(out);
    }
    out.values
        .par_chunks_mut(horizon * d)
        .enumerate()
        .for_each(|(s, path)| {
            let mut r = rng.derive(s as u64);
            let mut x = start.to_vec();
            for step in path.chunks_exact_mut(d) {
                let k = r.index(rows);
                x.iter_mut().zip(&inc[k * d..(k + 1) * d]).for_each(|(v, dv)| *v += dv);
                step.copy_from_slice(&x);
            }
        });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Garch11Params {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
}

impl Garch11Params {
    pub fn validate(&self) -> Result<()> {
        let ok = self.omega > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta < 1.0
            && [self.omega, self.alpha, self.beta, self.mean].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid GARCH(1,1) parameters {self:?}")))
        }
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    /// One step of the variance recursion, floored.
    #[inline]
    pub fn next_variance(&self, shock: f64, variance: f64) -> f64 {
        (self.omega + self.alpha * shock * shock + self.beta * variance).max(VARIANCE_FLOOR)
    }

    /// Conditional variances `h₁..h_T` of the demeaned shocks, starting from
    /// `h₁ = h0`.
    pub fn filter(&self, shocks: &[f64], h0: f64) -> Vec<f64> {
        let mut h = Vec::with_capacity(shocks.len());
        let mut cur = h0.max(VARIANCE_FLOOR);
        for &e in shocks {
            h.push(cur);
            cur = self.next_variance(e, cur);
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    /// Likelihood optimum accepted.
    Converged,
    /// The dynamic model did not beat its static restriction (constant
    /// variance or constant correlation) and the restriction was kept.
    Restricted,
    /// The fit failed and the static fallback was substituted.
    Fallback,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::Restricted => "restricted",
            FitStatus::Fallback => "fallback",
        }
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps unconstrained coordinates to `(first, second)` with
/// `first + second = MAX_PERSISTENCE·σ(u₀)` and `first` taking a `σ(u₁)` share.
fn split_persistence(u0: f64, u1: f64) -> (f64, f64) {
    let s = MAX_PERSISTENCE * logistic(u0);
    let share = logistic(u1);
    (s * share, s * (1.0 - share))
}

fn join_persistence(first: f64, second: f64) -> (f64, f64) {
    let s = first + second;
    (logit(s / MAX_PERSISTENCE), logit(first / s))
}

fn nelder_mead<C>(cost: C, start: Vec<f64>, step: f64, max_iters: u64) -> Option<(Vec<f64>, f64)>
where
    C: CostFunction<Param = Vec<f64>, Output = f64>,
{
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).ok()?;
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(max_iters))
        .timer(false)
        .run()
        .ok()?;
    let state = res.state();
    let best = state.get_best_param()?.clone();
    let cost = state.get_best_cost();
    cost.is_finite().then_some((best, cost))
}

/// Large finite penalty so the simplex steers away from bad regions.
const PENALTY: f64 = 1e300;

struct GarchNll<'a> {
    shocks: &'a [f64],
    h0: f64,
}

impl GarchNll<'_> {
    fn params(p: &[f64]) -> Garch11Params {
        let (alpha, beta) = split_persistence(p[1], p[2]);
        Garch11Params {
            omega: p[0].exp(),
            alpha,
            beta,
            mean: 0.0,
        }
    }
}

/// `½Σ(ln hₜ + εₜ²/hₜ)`, the Gaussian negative log-likelihood without the
/// constant.
fn gaussian_nll(shocks: &[f64], h: &[f64]) -> f64 {
    0.5 * shocks.iter().zip(h).map(|(e, v)| v.ln() + e * e / v).sum::<f64>()
}

impl CostFunction for GarchNll<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let g = Self::params(p);
        let v = gaussian_nll(self.shocks, &g.filter(self.shocks, self.h0));
        Ok(if v.is_finite() { v } else { PENALTY })
    }
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Gaussian QMLE of GARCH(1,1) on the increments `r` (mean fixed at the
/// sample mean, `h₁` at the sample variance). Dynamics are kept only when a
/// likelihood-ratio test rejects constant variance at the 5% level.
pub fn fit_garch11_increments(r: &[f64]) -> Result<(Garch11Params, FitStatus)> {
    if r.len() < MIN_FIT_LENGTH {
        return Err(Error::FitFailed(format!("{} increments, need at least {MIN_FIT_LENGTH}", r.len())));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailed("non-finite increments".into()));
    }
    let (mean, var) = mean_and_variance(r);
    if !(var > VARIANCE_FLOOR) {
        return Err(Error::FitFailed(format!("sample variance {var:e} is degenerate")));
    }
    let shocks: Vec<f64> = r.iter().map(|v| v - mean).collect();
    let restricted = Garch11Params {
        omega: var,
        alpha: 0.0,
        beta: 0.0,
        mean,
    };
    let restricted_nll = gaussian_nll(&shocks, &vec![var; shocks.len()]);

    let mut best: Option<(Vec<f64>, f64)> = None;
    for (a, b) in GARCH_STARTS {
        let (u0, u1) = join_persistence(a, b);
        let start = vec![(var * (1.0 - a - b)).ln(), u0, u1];
        let cost = GarchNll { shocks: &shocks, h0: var };
        if let Some(found) = nelder_mead(cost, start, 0.5, 3000) {
            if best.as_ref().is_none_or(|b| found.1 < b.1) {
                best = Some(found);
            }
        }
    }
    let Some((p, nll)) = best else {
        return Err(Error::FitFailed("no start converged".into()));
    };
    if 2.0 * (restricted_nll - nll) < LR_CRITICAL_2DF {
        return Ok((restricted, FitStatus::Restricted));
    }
    let fitted = Garch11Params {
        mean,
        ..GarchNll::params(&p)
    };
    fitted.validate().map_err(|e| Error::FitFailed(e.to_string()))?;
    Ok((fitted, FitStatus::Converged))
}

/// [`fit_garch11_increments`] on the first differences of a level series.
pub fn fit_garch11(series: &[f64]) -> Result<(Garch11Params, FitStatus)> {
    let r: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    fit_garch11_increments(&r)
}

/// Constant-variance Gaussian used when a GARCH fit fails.
pub fn garch_fallback(r: &[f64]) -> Garch11Params {
    let (mean, var) = if r.is_empty() { (0.0, 0.0) } else { mean_and_variance(r) };
    Garch11Params {
        omega: if var.is_finite() { var.max(VARIANCE_FLOOR) } else { VARIANCE_FLOOR },
        alpha: 0.0,
        beta: 0.0,
        mean: if mean.is_finite() { mean } else { 0.0 },
    }
}

pub fn fit_garch11_or_fallback(r: &[f64]) -> (Garch11Params, FitStatus) {
    fit_garch11_increments(r).unwrap_or_else(|_| (garch_fallback(r), FitStatus::Fallback))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DccParams {
    pub a: f64,
    pub b: f64,
    pub unconditional_corr: CorrelationMatrix,
    pub per_series: Vec<Garch11Params>,
}

impl DccParams {
    pub fn dims(&self) -> usize {
        self.per_series.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a + self.b < 1.0) {
            return Err(Error::InvalidParameter(format!("DCC needs a, b ≥ 0 and a + b < 1, got {} {}", self.a, self.b)));
        }
        if self.unconditional_corr.dim() != self.dims() {
            return Err(Error::DimensionMismatch("correlation size differs from series count".into()));
        }
        if let Some(v) = self.unconditional_corr.violations().first() {
            return Err(Error::InvalidParameter(v.clone()));
        }
        self.per_series.iter().try_for_each(Garch11Params::validate)
    }
}

/// Fitted DCC parameters with one status flag per series and one for the
/// correlation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DccFit {
    pub params: DccParams,
    pub series_status: Vec<FitStatus>,
    pub correlation_status: FitStatus,
}

impl DccFit {
    pub fn any_fallback(&self) -> bool {
        self.correlation_status == FitStatus::Fallback || self.series_status.contains(&FitStatus::Fallback)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evolving DCC correlation state `Q_t`.
#[derive(Clone, Debug)]
pub struct DccState {
    a: f64,
    b: f64,
    q_bar: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl DccState {
    pub fn new(a: f64, b: f64, q_bar: &CorrelationMatrix) -> Self {
        Self {
            a,
            b,
            q_bar: q_bar.matrix().clone(),
            q: q_bar.matrix().clone(),
        }
    }

    /// `Q ← (1−a−b)·Q̄ + a·zzᵀ + b·Q`.
    pub fn update(&mut self, z: &[f64]) {
        let c = 1.0 - self.a - self.b;
        let d = z.len();
        for i in 0..d {
            for j in 0..d {
                self.q[(i, j)] = c * self.q_bar[(i, j)] + self.a * z[i] * z[j] + self.b * self.q[(i, j)];
            }
        }
    }

    /// `R = diag(Q)^-½ · Q · diag(Q)^-½`.
    pub fn correlation(&self) -> DMatrix<f64> {
        let d = self.q.nrows();
        let s: Vec<f64> = (0..d).map(|i| self.q[(i, i)].sqrt()).collect();
        DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { self.q[(i, j)] / (s[i] * s[j]) })
    }
}

/// Standardized residuals (`rows × d`) and each series' last `(shock, variance)`.
fn standardized(history_inc: &[f64], rows: usize, d: usize, series: &[Garch11Params], h0: &[f64]) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut z = vec![0.0; rows * d];
    let mut last = Vec::with_capacity(d);
    for i in 0..d {
        let shocks: Vec<f64> = (0..rows).map(|t| history_inc[t * d + i] - series[i].mean).collect();
        let h = series[i].filter(&shocks, h0[i]);
        for t in 0..rows {
            z[t * d + i] = shocks[t] / h[t].sqrt();
        }
        last.push((shocks[rows - 1], h[rows - 1]));
    }
    (z, last)
}

struct DccNll<'a> {
    z: &'a [f64],
    rows: usize,
    q_bar: &'a CorrelationMatrix,
}

impl CostFunction for DccNll<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (a, b) = split_persistence(p[0], p[1]);
        let d = self.q_bar.dim();
        let mut state = DccState::new(a, b, self.q_bar);
        let mut total = 0.0;
        let mut buf = vec![0.0; d];
        for t in 0..self.rows {
            let zt = &self.z[t * d..(t + 1) * d];
            if t > 0 {
                state.update(&self.z[(t - 1) * d..t * d]);
            }
            let Ok(l) = cholesky(&state.correlation()) else {
                return Ok(PENALTY);
            };
            buf.copy_from_slice(zt);
            l.solve_lower_in_place(&mut buf);
            let quad: f64 = buf.iter().map(|v| v * v).sum();
            let plain: f64 = zt.iter().map(|v| v * v).sum();
            total += 0.5 * (l.log_det() + quad - plain);
        }
        Ok(if total.is_finite() { total } else { PENALTY })
    }
}

fn fit_correlation_stage(z: &[f64], rows: usize, d: usize) -> Result<(CorrelationMatrix, f64, f64, FitStatus)> {
    let raw = column_correlation(z, rows, d);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitFailed("standardized residual correlation is not finite".into()));
    }
    let q_bar = CorrelationMatrix::new(nearest_pd_repair(&raw, PD_FLOOR))
        .map_err(|e| Error::FitFailed(format!("correlation targeting: {e}")))?;
    if d == 1 {
        return Ok((q_bar, 0.0, 0.0, FitStatus::Restricted));
    }
    let static_nll = DccNll { z, rows, q_bar: &q_bar }.cost(&vec![-50.0, 0.0]).unwrap_or(PENALTY);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (a, b) in DCC_STARTS {
        let (u0, u1) = join_persistence(a, b);
        if let Some(found) = nelder_mead(DccNll { z, rows, q_bar: &q_bar }, vec![u0, u1], 0.5, 2000) {
            if best.as_ref().is_none_or(|b| found.1 < b.1) {
                best = Some(found);
            }
        }
    }
    let Some((p, nll)) = best else {
        return Err(Error::FitFailed("DCC likelihood did not converge".into()));
    };
    if nll >= static_nll {
        return Ok((q_bar, 0.0, 0.0, FitStatus::Restricted));
    }
    let (a, b) = split_persistence(p[0], p[1]);
    Ok((q_bar, a, b, FitStatus::Converged))
}

/// Two-stage DCC-GARCH(1,1): per-series GARCH, then correlation targeting and
/// QMLE of `(a, b)` on the standardized residuals. Failed stages fall back to
/// constant variance or constant correlation and are flagged.
pub fn fit_dcc(history: &PathMatrix) -> Result<DccFit> {
    let inc = increments_of(history)?;
    let d = history.dims;
    let rows = history.n_steps - 1;
    let mut per_series = Vec::with_capacity(d);
    let mut series_status = Vec::with_capacity(d);
    let mut h0 = Vec::with_capacity(d);
    for i in 0..d {
        let col: Vec<f64> = (0..rows).map(|t| inc[t * d + i]).collect();
        let (p, s) = fit_garch11_or_fallback(&col);
        h0.push(mean_and_variance(&col).1.max(VARIANCE_FLOOR));
        per_series.push(p);
        series_status.push(s);
    }
    let (z, _) = standardized(&inc, rows, d, &per_series, &h0);
    let (unconditional_corr, a, b, correlation_status) = match fit_correlation_stage(&z, rows, d) {
        Ok(found) => found,
        Err(_) => (CorrelationMatrix::identity(d), 0.0, 0.0, FitStatus::Fallback),
    };
    Ok(DccFit {
        params: DccParams {
            a,
            b,
            unconditional_corr,
            per_series,
        },
        series_status,
        correlation_status,
    })
}

/// Simulates `n_paths` joint futures: GARCH variance recursions per series,
/// the DCC correlation recursion, and Gaussian innovations through the
/// Cholesky factor of `R_t`, cumulated from the history's terminal state.
pub fn dcc_forecast(params: &DccParams, history: &PathMatrix, n_paths: usize, horizon: usize, rng: &RngStream) -> Result<SampleSet> {
    params.validate()?;
    let inc = increments_of(history)?;
    let d = history.dims;
    if params.dims() != d {
        return Err(Error::DimensionMismatch(format!("params for D={}, history has D={d}", params.dims())));
    }
    let rows = history.n_steps - 1;
    let h0: Vec<f64> = (0..d)
        .map(|i| {
            let col: Vec<f64> = (0..rows).map(|t| inc[t * d + i]).collect();
            mean_and_variance(&col).1.max(VARIANCE_FLOOR)
        })
        .collect();
    let (z, last) = standardized(&inc, rows, d, &params.per_series, &h0);

    // State after the last observation, shared by every path.
    let mut state = DccState::new(params.a, params.b, &params.unconditional_corr);
    for zt in z.chunks_exact(d) {
        state.update(zt);
    }
    let h_next: Vec<f64> = (0..d)
        .map(|i| params.per_series[i].next_variance(last[i].0, last[i].1))
        .collect();
    let fallback_chol = params.unconditional_corr.cholesky()?;

    let start = history.last_row();
    let mut out = SampleSet::zeros(n_paths, horizon, d, history.dt);
    if horizon == 0 || d == 0 {
        return Ok(out);
    }
    out.values
        .par_chunks_mut(horizon * d)
        .enumerate()
        .for_each(|(s, path)| {
            let mut r = rng.derive(s as u64);
            let mut st = state.clone();
            let mut h = h_next.clone();
            let mut x = start.to_vec();
            let mut e = vec![0.0; d];
            let mut zt = vec![0.0; d];
            for step in path.chunks_exact_mut(d) {
                let l: CholeskyFactor = cholesky(&st.correlation()).unwrap_or_else(|_| fallback_chol.clone());
                r.fill_normal(&mut e);
                l.mul_vec(&e, &mut zt);
                for i in 0..d {
                    let g = &params.per_series[i];
                    let shock = h[i].sqrt() * zt[i];
                    x[i] += g.mean + shock;
                    h[i] = g.next_variance(shock, h[i]);
                }
                st.update(&zt);
                step.copy_from_slice(&x);
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_from_increments(inc: &[f64], d: usize, start: &[f64]) -> PathMatrix {
        let n = inc.len() / d + 1;
        let mut values = Vec::with_capacity(n * d);
        values.extend_from_slice(start);
        for t in 0..n - 1 {
            for i in 0..d {
                let prev = values[t * d + i];
                values.push(prev + inc[t * d + i]);
            }
        }
        PathMatrix {
            n_steps: n,
            dims: d,
            values,
            dt: 0.01,
            regime_trace: None,
        }
    }

    fn simulate_garch(g: Garch11Params, n: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut h = g.unconditional_variance();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let e = h.sqrt() * rng.normal();
            out.push(g.mean + e);
            h = g.omega + g.alpha * e * e + g.beta * h;
        }
        out
    }

    fn step_stats(set: &SampleSet, h: usize, i: usize, j: usize) -> (f64, f64, f64) {
        let n = set.n_samples as f64;
        let xs: Vec<f64> = (0..set.n_samples).map(|s| set.get(s, h, i)).collect();
        let ys: Vec<f64> = (0..set.n_samples).map(|s| set.get(s, h, j)).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
        let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
        (mx, vx, cxy / (vx * vy).sqrt())
    }

    #[test]
    fn constant_increments_give_deterministic_paths() {
        let c = [0.5, -1.0];
        let inc: Vec<f64> = (0..20).flat_map(|_| c).collect();
        let hist = path_from_increments(&inc, 2, &[1.0, 2.0]);
        let set = historical_simulation(&hist, 10, 5, &RngStream::new(1)).unwrap();
        let last = hist.last_row().to_vec();
        for s in 0..10 {
            for k in 0..5 {
                for i in 0..2 {
                    let expected = last[i] + (k + 1) as f64 * c[i];
                    assert!((set.get(s, k, i) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bootstrap_variance_grows_linearly() {
        let mut rng = RngStream::new(2);
        let inc: Vec<f64> = (0..5000).map(|_| 0.3 * rng.normal()).collect();
        let hist = path_from_increments(&inc, 1, &[0.0]);
        let (_, var) = mean_and_variance(&inc);
        let set = historical_simulation(&hist, 4000, 20, &RngStream::new(3)).unwrap();
        for k in [1, 5, 20] {
            let (_, v, _) = step_stats(&set, k - 1, 0, 0);
            assert!((v / (k as f64 * var) - 1.0).abs() < 0.1, "k={k}: {v}");
        }
    }

    #[test]
    fn bootstrap_mean_tracks_mean_increment() {
        let mut rng = RngStream::new(4);
        let inc: Vec<f64> = (0..300).map(|_| 0.05 + rng.normal()).collect();
        let hist = path_from_increments(&inc, 1, &[3.0]);
        let mean_inc = inc.iter().sum::<f64>() / inc.len() as f64;
        let root = RngStream::new(5);
        let k = 10;
        let avg = (0..200)
            .map(|rep| {
                let set = historical_simulation(&hist, 50, k, &root.derive(rep)).unwrap();
                step_stats(&set, k - 1, 0, 0).0
            })
            .sum::<f64>()
            / 200.0;
        let expected = hist.last_row()[0] + k as f64 * mean_inc;
        // Standard error of the grand mean: √(k·var/(200·50)) ≈ 0.032.
        assert!((avg - expected).abs() < 0.13, "{avg} vs {expected}");
    }

    #[test]
    fn row_resampling_keeps_cross_correlation() {
        let mut rng = RngStream::new(6);
        let rho: f64 = 0.8;
        let mut inc = Vec::new();
        for _ in 0..504 {
            let a = rng.normal();
            inc.push(a);
            inc.push(rho * a + (1.0 - rho * rho).sqrt() * rng.normal());
        }
        let hist = path_from_increments(&inc, 2, &[0.0, 0.0]);
        let hist_corr = column_correlation(&hist.increments(), 503, 2)[(0, 1)];
        let set = historical_simulation(&hist, 1000, 3, &RngStream::new(7)).unwrap();
        let (_, _, c) = step_stats(&set, 0, 0, 1);
        assert!((c - hist_corr).abs() < 0.05, "{c} vs {hist_corr}");
    }

    #[test]
    fn short_history_is_degenerate() {
        let hist = path_from_increments(&[], 1, &[0.0]);
        assert!(matches!(historical_simulation(&hist, 1, 1, &RngStream::new(0)), Err(Error::DegenerateHistory(1))));
    }

    #[test]
    fn garch_recovers_simulated_parameters() {
        let truth = Garch11Params {
            omega: 0.1,
            alpha: 0.05,
            beta: 0.9,
            mean: 0.0,
        };
        let r = simulate_garch(truth, 20_000, &mut RngStream::new(8));
        let (fit, status) = fit_garch11_increments(&r).unwrap();
        assert_eq!(status, FitStatus::Converged);
        assert!((fit.omega - 0.1).abs() < 0.05, "{fit:?}");
        assert!((fit.alpha - 0.05).abs() < 0.03, "{fit:?}");
        assert!((fit.beta - 0.9).abs() < 0.05, "{fit:?}");
    }

    #[test]
    fn garch_on_iid_noise_has_low_persistence() {
        let sigma: f64 = 0.7;
        let mut rng = RngStream::new(9);
        let inc: Vec<f64> = (0..5000).map(|_| sigma * rng.normal()).collect();
        let series: Vec<f64> = inc
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let (fit, _) = fit_garch11(&series).unwrap();
        assert!(fit.alpha + fit.beta < 0.3, "{fit:?}");
        assert!((fit.unconditional_variance() / (sigma * sigma) - 1.0).abs() < 0.1);
    }

    #[test]
    fn constant_series_falls_back() {
        let r = vec![0.25; 100];
        assert!(matches!(fit_garch11_increments(&r), Err(Error::FitFailed(_))));
        let (p, status) = fit_garch11_or_fallback(&r);
        assert_eq!(status, FitStatus::Fallback);
        assert_eq!((p.omega, p.alpha, p.beta), (VARIANCE_FLOOR, 0.0, 0.0));
        assert!(fit_garch11_increments(&r[..10]).is_err());
    }

    #[test]
    fn variance_recursion_stays_positive() {
        let g = Garch11Params {
            omega: 1e-6,
            alpha: 0.1,
            beta: 0.85,
            mean: 0.0,
        };
        let mut rng = RngStream::new(10);
        let shocks: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        assert!(g.filter(&shocks, 1.0).iter().all(|&h| h > VARIANCE_FLOOR));
    }

    #[test]
    fn dcc_targets_the_residual_correlation() {
        let mut rng = RngStream::new(11);
        let rho: f64 = 0.6;
        let mut inc = Vec::new();
        for _ in 0..5000 {
            let a = rng.normal();
            inc.push(a);
            inc.push(rho * a + (1.0 - rho * rho).sqrt() * rng.normal());
        }
        let fit = fit_dcc(&path_from_increments(&inc, 2, &[0.0, 0.0])).unwrap();
        assert!((fit.params.unconditional_corr.get(0, 1) - 0.6).abs() < 0.05);
        assert!(!fit.any_fallback());
        let json = fit.to_json().unwrap();
        let back: DccFit = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn dcc_recovers_persistence() {
        let d = 3;
        let q_bar = CorrelationMatrix::new(DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0])).unwrap();
        let series = [
            Garch11Params { omega: 0.05, alpha: 0.05, beta: 0.9, mean: 0.0 },
            Garch11Params { omega: 0.1, alpha: 0.08, beta: 0.85, mean: 0.01 },
            Garch11Params { omega: 0.02, alpha: 0.03, beta: 0.95, mean: -0.01 },
        ];
        let mut state = DccState::new(0.03, 0.95, &q_bar);
        let mut h: Vec<f64> = series.iter().map(|g| g.unconditional_variance()).collect();
        let mut rng = RngStream::new(12);
        let mut inc = Vec::with_capacity(20_000 * d);
        let (mut e, mut z) = (vec![0.0; d], vec![0.0; d]);
        for _ in 0..20_000 {
            let l = cholesky(&state.correlation()).unwrap();
            rng.fill_normal(&mut e);
            l.mul_vec(&e, &mut z);
            for i in 0..d {
                let shock = h[i].sqrt() * z[i];
                inc.push(series[i].mean + shock);
                h[i] = series[i].next_variance(shock, h[i]);
            }
            state.update(&z);
        }
        let fit = fit_dcc(&path_from_increments(&inc, d, &[0.0; 3])).unwrap();
        let p = fit.params.a + fit.params.b;
        assert!((0.9..1.0).contains(&p), "{:?}", fit.params);
        assert_eq!(fit.correlation_status, FitStatus::Converged);
    }

    #[test]
    fn static_correlation_is_a_fixed_point() {
        let q_bar = CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, -0.4, -0.4, 1.0])).unwrap();
        let mut st = DccState::new(0.0, 0.0, &q_bar);
        let mut rng = RngStream::new(13);
        for _ in 0..10 {
            st.update(&[rng.normal() * 3.0, rng.normal()]);
            assert_eq!(&st.correlation(), q_bar.matrix());
        }
    }

    fn static_params(d: usize, omega: f64, corr: CorrelationMatrix) -> DccParams {
        DccParams {
            a: 0.0,
            b: 0.0,
            unconditional_corr: corr,
            per_series: vec![Garch11Params { omega, alpha: 0.0, beta: 0.0, mean: 0.0 }; d],
        }
    }

    #[test]
    fn degenerate_recursions_give_linear_variance() {
        let corr = CorrelationMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0])).unwrap();
        let params = static_params(2, 0.4, corr);
        let mut rng = RngStream::new(14);
        let inc: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let hist = path_from_increments(&inc, 2, &[0.0, 0.0]);
        let set = dcc_forecast(&params, &hist, 20_000, 8, &RngStream::new(15)).unwrap();
        for k in [1usize, 4, 8] {
            let (_, v, c) = step_stats(&set, k - 1, 0, 1);
            assert!((v / (k as f64 * 0.4) - 1.0).abs() < 0.04, "k={k}: {v}");
            assert!((c - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn forecast_shape_and_thread_independence() {
        let params = static_params(10, 0.01, CorrelationMatrix::identity(10));
        let mut rng = RngStream::new(16);
        let inc: Vec<f64> = (0..10 * 100).map(|_| rng.normal()).collect();
        let hist = path_from_increments(&inc, 10, &[0.0; 10]);
        let root = RngStream::new(17);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| dcc_forecast(&params, &hist, 1000, 63, &root).unwrap())
        };
        let a = run(1);
        assert_eq!((a.n_samples, a.horizon, a.dims), (1000, 63, 10));
        assert_eq!(a, run(4));
        let hs = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| historical_simulation(&hist, 300, 5, &root).unwrap())
        };
        assert_eq!(hs(1), hs(3));
    }

    #[test]
    fn large_last_shock_raises_next_variance() {
        let g = Garch11Params { omega: 0.01, alpha: 0.04, beta: 0.95, mean: 0.0 };
        let mut rng = RngStream::new(18);
        let mut inc: Vec<f64> = (0..300).map(|_| rng.normal() * 0.3).collect();
        inc.push(5.0);
        let hist = path_from_increments(&inc, 1, &[0.0]);
        let params = DccParams {
            a: 0.0,
            b: 0.0,
            unconditional_corr: CorrelationMatrix::identity(1),
            per_series: vec![g],
        };
        let set = dcc_forecast(&params, &hist, 20_000, 1, &RngStream::new(19)).unwrap();
        let (_, v, _) = step_stats(&set, 0, 0, 0);
        assert!(v > g.unconditional_variance(), "{v}");
    }

    #[test]
    fn single_series_dcc_is_accepted() {
        let mut rng = RngStream::new(20);
        let inc: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let fit = fit_dcc(&path_from_increments(&inc, 1, &[0.0])).unwrap();
        assert_eq!((fit.params.a, fit.params.b), (0.0, 0.0));
        assert_eq!(fit.params.unconditional_corr.dim(), 1);
    }
}
