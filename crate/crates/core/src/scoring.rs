//! Sample-based proper scoring rules: energy distance, marginal energy and
//! CRPS of the aggregated targets.
//!
//! Every double sum is accumulated exactly and rounded once, so results do
//! not depend on evaluation order. That gives exact symmetry, exact zeros on
//! identical sample sets, and lets the sorted O(n log n) 1-D routes agree
//! bit-for-bit with the quadratic definitions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact_sum::ExactSum;
use crate::simulator::SampleSet;

/// Row-major `n × dim` point cloud.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot form non-empty rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn column(&self, d: usize) -> Vec<f64> {
        self.data.iter().skip(d).step_by(self.dim).copied().collect()
    }
}

#[inline]
fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exact `ΣᵢΣⱼ ‖aᵢ − bⱼ‖`.
fn cross_norm_sum(a: Points, b: Points) -> ExactSum {
    let mut acc = ExactSum::new();
    for i in 0..a.len() {
        let ai = a.row(i);
        for j in 0..b.len() {
            acc.add(euclid(ai, b.row(j)));
        }
    }
    acc
}

/// Exact `ΣᵢΣⱼ ‖aᵢ − aⱼ‖` via the strict upper triangle.
fn self_norm_sum(a: Points) -> f64 {
    let mut acc = ExactSum::new();
    for i in 0..a.len() {
        let ai = a.row(i);
        for j in (i + 1)..a.len() {
            acc.add(euclid(ai, a.row(j)));
        }
    }
    2.0 * acc.value()
}

fn combine(cross: f64, self_a: f64, self_b: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    2.0 * cross / (n * m) - (self_a / (n * n) + self_b / (m * m))
}

fn check_dims(a: Points, b: Points) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!(
            "sample dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    Ok(())
}

/// V-statistic energy distance between two sample sets.
pub fn energy_distance(a: Points, b: Points) -> Result<f64> {
    check_dims(a, b)?;
    if a.dim == 1 {
        return Ok(energy_distance_1d(a.data, b.data));
    }
    Ok(combine(
        cross_norm_sum(a, b).value(),
        self_norm_sum(a),
        self_norm_sum(b),
        a.len(),
        b.len(),
    ))
}

/// Mean over dimensions of the 1-D energy distance.
pub fn marginal_energy(a: Points, b: Points) -> Result<f64> {
    check_dims(a, b)?;
    let total: f64 = (0..a.dim)
        .map(|d| energy_distance_1d(&a.column(d), &b.column(d)))
        .sum();
    Ok(total / a.dim as f64)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact `ΣᵢΣⱼ |xᵢ − xⱼ|` from sorted input: `2·Σₖ (2k − n + 1)·x₍ₖ₎`.
fn self_abs_sum_sorted(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mut acc = ExactSum::new();
    for (k, &x) in xs.iter().enumerate() {
        acc.add_product(2.0 * k as f64 - n + 1.0, x);
    }
    2.0 * acc.value()
}

/// Exact `ΣᵢΣⱼ |xᵢ − yⱼ|` from sorted inputs using rank counts:
/// `Σᵢ cᵢ·xᵢ − Σⱼ eⱼ·yⱼ` with `cᵢ = #{y < xᵢ} − #{y > xᵢ}` and
/// `eⱼ = #{x > yⱼ} − #{x < yⱼ}`.
fn cross_abs_sum_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let signed_rank = |sorted: &[f64], v: f64| -> f64 {
        let below = sorted.partition_point(|&s| s < v);
        let not_above = sorted.partition_point(|&s| s <= v);
        below as f64 - (sorted.len() - not_above) as f64
    };
    let mut acc = ExactSum::new();
    for &x in xs {
        acc.add_product(signed_rank(ys, x), x);
    }
    for &y in ys {
        acc.add_product(signed_rank(xs, y), y);
    }
    acc.value()
}

/// 1-D energy distance, O((n + m) log(n + m)).
pub fn energy_distance_1d(x: &[f64], y: &[f64]) -> f64 {
    let (xs, ys) = (sorted(x), sorted(y));
    combine(
        cross_abs_sum_sorted(&xs, &ys),
        self_abs_sum_sorted(&xs),
        self_abs_sum_sorted(&ys),
        xs.len(),
        ys.len(),
    )
}

/// Quadratic definition of [`energy_distance_1d`].
pub fn energy_distance_1d_reference(x: &[f64], y: &[f64]) -> f64 {
    let pair_sum = |a: &[f64], b: &[f64]| {
        let mut acc = ExactSum::new();
        for &u in a {
            for &v in b {
                acc.add_abs_diff(u, v);
            }
        }
        acc.value()
    };
    combine(pair_sum(x, y), pair_sum(x, x), pair_sum(y, y), x.len(), y.len())
}

/// Empirical CRPS of the sample distribution at observation `y`:
/// `(1/n)Σ|xᵢ − y| − (1/2n²)ΣΣ|xᵢ − xⱼ|`.
pub fn crps_empirical(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("crps needs at least one sample".into()));
    }
    let mut spread = ExactSum::new();
    for &x in samples {
        spread.add_abs_diff(x, y);
    }
    let pairs = self_abs_sum_sorted(&sorted(samples));
    Ok(crps_combine(spread.value(), pairs, samples.len()))
}

fn crps_combine(spread: f64, pairs: f64, n: usize) -> f64 {
    let n = n as f64;
    spread / n - pairs / (2.0 * n * n)
}

/// Quadratic definition of [`crps_empirical`].
pub fn crps_empirical_reference(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("crps needs at least one sample".into()));
    }
    let mut spread = ExactSum::new();
    let mut pairs = ExactSum::new();
    for &x in samples {
        spread.add_abs_diff(x, y);
        for &z in samples {
            pairs.add_abs_diff(x, z);
        }
    }
    Ok(crps_combine(spread.value(), pairs.value(), samples.len()))
}

fn row_sums(set: &SampleSet, h: usize, dims: std::ops::Range<usize>) -> Vec<f64> {
    (0..set.n_samples)
        .map(|s| dims.clone().map(|d| set.get(s, h, d)).sum())
        .collect()
}

fn check_sets(forecast: &SampleSet, truth: &SampleSet) -> Result<()> {
    if forecast.dims != truth.dims || forecast.horizon != truth.horizon {
        return Err(Error::DimensionMismatch(format!(
            "forecast is H={} D={}, truth is H={} D={}",
            forecast.horizon, forecast.dims, truth.horizon, truth.dims
        )));
    }
    Ok(())
}

/// Mean over the truth draws of the CRPS of the forecast's aggregated
/// targets at step `h`.
pub fn crps_sum(forecast: &SampleSet, truth: &SampleSet, h: usize) -> Result<f64> {
    check_sets(forecast, truth)?;
    if h >= forecast.horizon {
        return Err(Error::DimensionMismatch(format!(
            "horizon index {h} out of range 0..{}",
            forecast.horizon
        )));
    }
    let f = sorted(&row_sums(forecast, h, 0..forecast.dims));
    let t = sorted(&row_sums(truth, h, 0..truth.dims));
    let (s, g) = (f.len() as f64, t.len() as f64);
    Ok(cross_abs_sum_sorted(&f, &t) / (g * s) - self_abs_sum_sorted(&f) / (2.0 * s * s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAverages {
    pub energy: f64,
    pub marginal_energy: f64,
    pub crps_sum: f64,
}

/// Per-horizon scores of one forecaster on one system.
///
/// `per_horizon_crps_sum` holds the forecast's mean CRPS-sum minus the
/// oracle's own (the forecaster-independent baseline), so a forecast equal to
/// the oracle scores exactly zero on all three metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub forecaster_id: String,
    pub system_id: String,
    pub horizons: usize,
    pub per_horizon_energy: Vec<f64>,
    pub per_horizon_marginal_energy: Vec<f64>,
    pub per_horizon_crps_sum: Vec<f64>,
    pub averages: ScoreAverages,
}

pub const SCORE_CSV_HEADER: &str = "system_id,forecaster_id,horizon,energy,marginal_energy,crps_sum";

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ScoreReport {
    fn from_rows(forecaster_id: &str, system_id: &str, rows: Vec<[f64; 3]>) -> Self {
        let energy: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let marginal: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let crps: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let averages = ScoreAverages {
            energy: mean(&energy),
            marginal_energy: mean(&marginal),
            crps_sum: mean(&crps),
        };
        Self {
            forecaster_id: forecaster_id.to_string(),
            system_id: system_id.to_string(),
            horizons: rows.len(),
            per_horizon_energy: energy,
            per_horizon_marginal_energy: marginal,
            per_horizon_crps_sum: crps,
            averages,
        }
    }

    /// CSV rows (without header): one per horizon, numbered from 1, then `avg`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.horizons)
            .map(|h| {
                format!(
                    "{},{},{},{},{},{}",
                    self.system_id,
                    self.forecaster_id,
                    h + 1,
                    self.per_horizon_energy[h],
                    self.per_horizon_marginal_energy[h],
                    self.per_horizon_crps_sum[h]
                )
            })
            .collect();
        out.push(format!(
            "{},{},avg,{},{},{}",
            self.system_id,
            self.forecaster_id,
            self.averages.energy,
            self.averages.marginal_energy,
            self.averages.crps_sum
        ));
        out
    }

    pub fn is_well_formed(&self) -> bool {
        let all = self
            .per_horizon_energy
            .iter()
            .chain(&self.per_horizon_marginal_energy)
            .chain(&self.per_horizon_crps_sum);
        all.clone().all(|v| v.is_finite() && *v >= -1e-9)
            && self.per_horizon_energy.len() == self.horizons
            && self.per_horizon_marginal_energy.len() == self.horizons
            && self.per_horizon_crps_sum.len() == self.horizons
    }
}

/// Oracle-side terms precomputed once per horizon and reused for every
/// forecaster scored against the same oracle.
struct OracleHorizon {
    targets: Vec<f64>,
    self_norm: f64,
    columns_sorted: Vec<Vec<f64>>,
    columns_self: Vec<f64>,
    sums_sorted: Vec<f64>,
    sums_self: f64,
}

pub struct OracleScorer {
    n_targets: usize,
    dims: usize,
    horizon: usize,
    n_samples: usize,
    horizons: Vec<OracleHorizon>,
}

impl OracleScorer {
    /// Targets are the last `n_targets` dimensions of the oracle.
    pub fn new(oracle: &SampleSet, n_targets: usize) -> Result<Self> {
        if n_targets == 0 || n_targets > oracle.dims {
            return Err(Error::DimensionMismatch(format!(
                "n_targets = {n_targets} with D = {}",
                oracle.dims
            )));
        }
        let range = (oracle.dims - n_targets)..oracle.dims;
        let horizons = (0..oracle.horizon)
            .into_par_iter()
            .map(|h| {
                let targets = oracle.slice_at(h, range.clone());
                let pts = Points::new(&targets, n_targets).expect("non-empty oracle");
                let self_norm = if n_targets == 1 {
                    self_abs_sum_sorted(&sorted(&targets))
                } else {
                    self_norm_sum(pts)
                };
                let columns_sorted: Vec<Vec<f64>> =
                    (0..n_targets).map(|d| sorted(&pts.column(d))).collect();
                let columns_self = columns_sorted.iter().map(|c| self_abs_sum_sorted(c)).collect();
                let sums_sorted = sorted(&row_sums(oracle, h, range.clone()));
                let sums_self = self_abs_sum_sorted(&sums_sorted);
                OracleHorizon {
                    targets,
                    self_norm,
                    columns_sorted,
                    columns_self,
                    sums_sorted,
                    sums_self,
                }
            })
            .collect();
        Ok(Self {
            n_targets,
            dims: oracle.dims,
            horizon: oracle.horizon,
            n_samples: oracle.n_samples,
            horizons,
        })
    }

    pub fn score(&self, forecast: &SampleSet, forecaster_id: &str, system_id: &str) -> Result<ScoreReport> {
        if forecast.dims != self.dims || forecast.horizon != self.horizon {
            return Err(Error::DimensionMismatch(format!(
                "forecast is H={} D={}, oracle is H={} D={}",
                forecast.horizon, forecast.dims, self.horizon, self.dims
            )));
        }
        let n = self.n_targets;
        let range = (self.dims - n)..self.dims;
        let (s, g) = (forecast.n_samples, self.n_samples);
        let rows = (0..self.horizon)
            .into_par_iter()
            .map(|h| {
                let o = &self.horizons[h];
                let f_targets = forecast.slice_at(h, range.clone());
                let fp = Points::new(&f_targets, n).expect("non-empty forecast");
                let op = Points::new(&o.targets, n).expect("non-empty oracle");

                let energy = if n == 1 {
                    let fs = sorted(&f_targets);
                    combine(
                        cross_abs_sum_sorted(&fs, &o.columns_sorted[0]),
                        self_abs_sum_sorted(&fs),
                        o.self_norm,
                        s,
                        g,
                    )
                } else {
                    combine(cross_norm_sum(fp, op).value(), self_norm_sum(fp), o.self_norm, s, g)
                };

                let marginal = (0..n)
                    .map(|d| {
                        let fc = sorted(&fp.column(d));
                        combine(
                            cross_abs_sum_sorted(&fc, &o.columns_sorted[d]),
                            self_abs_sum_sorted(&fc),
                            o.columns_self[d],
                            s,
                            g,
                        )
                    })
                    .sum::<f64>()
                    / n as f64;

                let fsums = sorted(&row_sums(forecast, h, range.clone()));
                let crps = 0.5
                    * combine(
                        cross_abs_sum_sorted(&fsums, &o.sums_sorted),
                        self_abs_sum_sorted(&fsums),
                        o.sums_self,
                        s,
                        g,
                    );
                [energy, marginal, crps]
            })
            .collect();
        Ok(ScoreReport::from_rows(forecaster_id, system_id, rows))
    }
}

/// Scores `forecast` against `oracle` at every horizon on the last
/// `n_targets` dimensions.
pub fn score_forecast(
    forecast: &SampleSet,
    oracle: &SampleSet,
    n_targets: usize,
    forecaster_id: &str,
    system_id: &str,
) -> Result<ScoreReport> {
    check_sets(forecast, oracle)?;
    OracleScorer::new(oracle, n_targets)?.score(forecast, forecaster_id, system_id)
}
