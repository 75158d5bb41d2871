//! The recovery experiment, the training-stream exporter and external
//! scoring.
//!
//! Systems run in parallel on a dedicated pool; every random draw comes from
//! a stream derived from `(root_seed, system, purpose)`, and results are
//! written in system order by a single writer, so output bytes do not depend
//! on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dcc_forecast, fit_dcc, historical_simulation, DccFit};
use crate::error::{Error, Result};
use crate::formats::{load_sample_set, write_training_record};
use crate::rng::{purpose, RngStream};
use crate::scoring::{score_forecast, OracleScorer, ScoreReport, SCORE_CSV_HEADER};
use crate::simulator::{branch_futures, simulate_history_with_burn_in, PathMatrix, SampleSet};
use crate::universe::{sample_system, CurriculumLevel, SdeSystemSpec};

pub use crate::formats::TrainingRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecaster {
    OracleRebranch,
    HistoricalSimulation,
    DccGarch,
}

impl Forecaster {
    pub const ALL: [Forecaster; 3] = [Forecaster::OracleRebranch, Forecaster::HistoricalSimulation, Forecaster::DccGarch];

    pub fn id(self) -> &'static str {
        match self {
            Forecaster::OracleRebranch => "oracle_rebranch",
            Forecaster::HistoricalSimulation => "historical_simulation",
            Forecaster::DccGarch => "dcc_garch",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Forecaster::OracleRebranch
    }

    fn stream_purpose(self) -> u64 {
        match self {
            Forecaster::OracleRebranch => purpose::REBRANCH,
            Forecaster::HistoricalSimulation => purpose::HISTORICAL_SIM,
            Forecaster::DccGarch => purpose::DCC,
        }
    }
}

impl std::str::FromStr for Forecaster {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Forecaster::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown forecaster {s:?}")))
    }
}

fn default_level() -> CurriculumLevel {
    CurriculumLevel::new(7).expect("7 is a valid level")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub root_seed: u64,
    pub n_systems: usize,
    pub level: CurriculumLevel,
    pub n_features: usize,
    pub n_targets: usize,
    #[serde(rename = "T")]
    pub history_steps: usize,
    pub t_in: f64,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub t_out: f64,
    pub n_oracle_paths: usize,
    pub n_forecast_paths: usize,
    pub forecasters: Vec<Forecaster>,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses all available cores.
    pub thread_count: Option<usize>,
    /// Unrecorded steps simulated before the history window.
    pub burn_in: usize,
    /// Exclude systems with fallback fits from the aggregates.
    pub strict: bool,
    /// Largest tolerated fraction of failed systems before the run counts as
    /// a partial failure.
    pub max_failure_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            root_seed: 0,
            n_systems: 200,
            level: default_level(),
            n_features: 0,
            n_targets: 10,
            history_steps: 504,
            t_in: 2.0,
            horizon: 63,
            t_out: 0.25,
            n_oracle_paths: 1000,
            n_forecast_paths: 1000,
            forecasters: Forecaster::ALL.to_vec(),
            output_dir: PathBuf::from("results"),
            thread_count: None,
            burn_in: 0,
            strict: false,
            max_failure_fraction: 0.05,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_systems", self.n_systems),
            ("n_targets", self.n_targets),
            ("T", self.history_steps),
            ("H", self.horizon),
            ("n_oracle_paths", self.n_oracle_paths),
            ("n_forecast_paths", self.n_forecast_paths),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.history_steps < 2 {
            return Err(Error::Config("T must be at least 2".into()));
        }
        if !(self.t_in > 0.0 && self.t_in.is_finite() && self.t_out > 0.0 && self.t_out.is_finite()) {
            return Err(Error::Config("t_in and t_out must be positive".into()));
        }
        if self.forecasters.is_empty() {
            return Err(Error::Config("at least one forecaster is required".into()));
        }
        let mut seen = self.forecasters.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.forecasters.len() {
            return Err(Error::Config("forecasters must be distinct".into()));
        }
        if self.thread_count == Some(0) {
            return Err(Error::Config("thread_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(Error::Config("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Baselines step at the history's `dt`, so the forecast clock must
    /// match it for their H steps to span `t_out`.
    pub fn validate_for_recovery(&self) -> Result<()> {
        self.validate()?;
        let dt_in = self.t_in / self.history_steps as f64;
        let dt_out = self.t_out / self.horizon as f64;
        if (dt_in - dt_out).abs() > 1e-9 * dt_in {
            return Err(Error::Config(format!(
                "history step t_in/T = {dt_in} differs from forecast step t_out/H = {dt_out}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.thread_count {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

pub fn system_id(i: usize) -> String {
    format!("sys{i:04}")
}

/// Spec, history and oracle for system `i`, drawn from its derived streams.
pub struct SystemDraw {
    pub spec: SdeSystemSpec,
    pub history: PathMatrix,
    pub oracle: SampleSet,
}

fn system_stream(config: &ExperimentConfig, i: usize) -> RngStream {
    RngStream::new(config.root_seed).derive(i as u64)
}

pub fn draw_system(config: &ExperimentConfig, i: usize) -> Result<SystemDraw> {
    let sys = system_stream(config, i);
    let spec = sample_system(config.level, config.n_features, config.n_targets, &sys.derive(purpose::SPEC))?;
    draw_with_spec(config, i, spec)
}

/// History and oracle for a given spec, on system `i`'s streams.
pub fn draw_with_spec(config: &ExperimentConfig, i: usize, spec: SdeSystemSpec) -> Result<SystemDraw> {
    let sys = system_stream(config, i);
    let history = simulate_history_with_burn_in(
        &spec,
        config.history_steps,
        config.t_in,
        config.burn_in,
        &sys.derive(purpose::HISTORY),
    )?;
    let oracle = branch_futures(
        &spec,
        history.last_row(),
        history.last_regime(),
        config.t_in,
        config.n_oracle_paths,
        config.horizon,
        config.t_out,
        &sys.derive(purpose::ORACLE),
    )?;
    Ok(SystemDraw { spec, history, oracle })
}

/// Outcome of one system: scores in forecaster order, or the error that
/// stopped it.
#[derive(Clone, Debug)]
pub struct SystemResult {
    pub system_id: String,
    pub outcome: std::result::Result<SystemScores, String>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SystemScores {
    pub reports: Vec<ScoreReport>,
    pub dcc_fit: Option<DccFit>,
}

fn run_system(config: &ExperimentConfig, i: usize) -> Result<SystemScores> {
    score_system(config, i, &draw_system(config, i)?)
}

/// Runs every configured forecaster on system `i` and scores it against the
/// draw's oracle.
pub fn score_system(config: &ExperimentConfig, i: usize, draw: &SystemDraw) -> Result<SystemScores> {
    let id = system_id(i);
    let sys = system_stream(config, i);
    let scorer = OracleScorer::new(&draw.oracle, config.n_targets)?;
    let mut reports = Vec::with_capacity(config.forecasters.len());
    let mut dcc_fit = None;
    for &f in &config.forecasters {
        let rng = sys.derive(f.stream_purpose());
        let s = config.n_forecast_paths;
        let h = config.horizon;
        let forecast = match f {
            Forecaster::OracleRebranch => branch_futures(
                &draw.spec,
                draw.history.last_row(),
                draw.history.last_regime(),
                config.t_in,
                s,
                h,
                config.t_out,
                &rng,
            )?,
            Forecaster::HistoricalSimulation => historical_simulation(&draw.history, s, h, &rng)?,
            Forecaster::DccGarch => {
                let fit = fit_dcc(&draw.history)?;
                let set = dcc_forecast(&fit.params, &draw.history, s, h, &rng)?;
                dcc_fit = Some(fit);
                set
            }
        };
        if !forecast.is_finite() {
            return Err(Error::FitFailed(format!("{} produced non-finite samples", f.id())));
        }
        reports.push(scorer.score(&forecast, f.id(), &id)?);
    }
    Ok(SystemScores { reports, dcc_fit })
}

/// Mean scores of one forecaster at one horizon (or `avg`) across systems.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub forecaster: Forecaster,
    /// 1-based step, or `None` for the average over horizons.
    pub horizon: Option<usize>,
    pub n_systems: usize,
    pub means: [f64; 3],
    /// `100·(best_baseline − value)/best_baseline` per metric: positive means
    /// lower loss than the best baseline.
    pub gap_pct: [Option<f64>; 3],
}

pub const SUMMARY_CSV_HEADER: &str = "forecaster,horizon,n_systems,energy,marginal_energy,crps_sum,energy_gap_pct,marginal_energy_gap_pct,crps_sum_gap_pct";

pub const METRICS: [&str; 3] = ["energy", "marginal_energy", "crps_sum"];

impl SummaryRow {
    pub fn csv(&self) -> String {
        let horizon = self.horizon.map_or_else(|| "avg".to_string(), |h| h.to_string());
        let gap = |g: Option<f64>| g.map_or_else(String::new, |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.forecaster.id(),
            horizon,
            self.n_systems,
            self.means[0],
            self.means[1],
            self.means[2],
            gap(self.gap_pct[0]),
            gap(self.gap_pct[1]),
            gap(self.gap_pct[2])
        )
    }
}

fn metric_at(r: &ScoreReport, metric: usize, horizon: Option<usize>) -> f64 {
    match (metric, horizon) {
        (0, Some(h)) => r.per_horizon_energy[h - 1],
        (1, Some(h)) => r.per_horizon_marginal_energy[h - 1],
        (2, Some(h)) => r.per_horizon_crps_sum[h - 1],
        (0, None) => r.averages.energy,
        (1, None) => r.averages.marginal_energy,
        _ => r.averages.crps_sum,
    }
}

/// Aggregates per-system reports (each inner vector in forecaster order)
/// into forecasters × (H + 1) summary rows.
pub fn summarize(forecasters: &[Forecaster], horizon: usize, systems: &[&[ScoreReport]]) -> Vec<SummaryRow> {
    let horizons: Vec<Option<usize>> = (1..=horizon).map(Some).chain([None]).collect();
    let n = systems.len();
    let mut rows = Vec::with_capacity(forecasters.len() * horizons.len());
    for (fi, &f) in forecasters.iter().enumerate() {
        for &h in &horizons {
            let mut means = [f64::NAN; 3];
            for (m, slot) in means.iter_mut().enumerate() {
                if n > 0 {
                    *slot = systems.iter().map(|s| metric_at(&s[fi], m, h)).sum::<f64>() / n as f64;
                }
            }
            rows.push(SummaryRow {
                forecaster: f,
                horizon: h,
                n_systems: n,
                means,
                gap_pct: [None; 3],
            });
        }
    }
    let per_f = horizons.len();
    for hi in 0..per_f {
        for m in 0..3 {
            let best = forecasters
                .iter()
                .enumerate()
                .filter(|(_, f)| f.is_baseline())
                .map(|(fi, _)| rows[fi * per_f + hi].means[m])
                .fold(f64::INFINITY, f64::min);
            if best.is_finite() && best != 0.0 {
                for fi in 0..forecasters.len() {
                    let row = &mut rows[fi * per_f + hi];
                    row.gap_pct[m] = Some(100.0 * (best - row.means[m]) / best);
                }
            }
        }
    }
    rows
}

pub struct RecoveryOutcome {
    pub results: Vec<SystemResult>,
    pub summary: Vec<SummaryRow>,
    /// Systems that entered the aggregates.
    pub n_aggregated: usize,
    pub n_failed: usize,
}

impl RecoveryOutcome {
    pub fn reports(&self) -> impl Iterator<Item = &ScoreReport> {
        self.results
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .flat_map(|s| s.reports.iter())
    }

    pub fn failure_fraction(&self) -> f64 {
        self.n_failed as f64 / self.results.len().max(1) as f64
    }
}

/// Runs the full recovery benchmark and writes its outputs to
/// `config.output_dir`: `scores.csv`, `summary.csv`, `fit_status.csv`,
/// `failures.csv`, one SVG plot per metric, and a `run_log.txt` with
/// wall-clock times (the only non-deterministic file).
pub fn run_recovery(config: &ExperimentConfig) -> Result<RecoveryOutcome> {
    config.validate_for_recovery()?;
    let pool = config.pool()?;
    let results: Vec<SystemResult> = pool.install(|| {
        (0..config.n_systems)
            .into_par_iter()
            .map(|i| {
                let start = Instant::now();
                let outcome = run_system(config, i).map_err(|e| e.to_string());
                SystemResult {
                    system_id: system_id(i),
                    outcome,
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    });

    let included: Vec<&[ScoreReport]> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .filter(|s| !(config.strict && s.dcc_fit.as_ref().is_some_and(DccFit::any_fallback)))
        .map(|s| s.reports.as_slice())
        .collect();
    let summary = summarize(&config.forecasters, config.horizon, &included);
    let outcome = RecoveryOutcome {
        n_aggregated: included.len(),
        n_failed: results.iter().filter(|r| r.outcome.is_err()).count(),
        summary,
        results,
    };
    write_outputs(config, &outcome)?;
    Ok(outcome)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_outputs(config: &ExperimentConfig, out: &RecoveryOutcome) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;

    let mut scores = String::from(SCORE_CSV_HEADER);
    scores.push('\n');
    for r in out.reports() {
        for row in r.csv_rows() {
            scores.push_str(&row);
            scores.push('\n');
        }
    }
    write_file(&dir.join("scores.csv"), &scores)?;

    let mut summary = String::from(SUMMARY_CSV_HEADER);
    summary.push('\n');
    for row in &out.summary {
        summary.push_str(&row.csv());
        summary.push('\n');
    }
    write_file(&dir.join("summary.csv"), &summary)?;

    let mut status = String::from("system_id,series,status\n");
    for r in &out.results {
        if let Ok(SystemScores { dcc_fit: Some(fit), .. }) = &r.outcome {
            for (i, s) in fit.series_status.iter().enumerate() {
                writeln!(status, "{},{i},{}", r.system_id, s.as_str()).unwrap();
            }
            writeln!(status, "{},correlation,{}", r.system_id, fit.correlation_status.as_str()).unwrap();
        }
    }
    write_file(&dir.join("fit_status.csv"), &status)?;

    let mut failures = String::from("system_id,error\n");
    for r in &out.results {
        if let Err(e) = &r.outcome {
            writeln!(failures, "{},{}", r.system_id, csv_field(e)).unwrap();
        }
    }
    write_file(&dir.join("failures.csv"), &failures)?;

    let mut log = String::new();
    for r in &out.results {
        let state = if r.outcome.is_ok() { "ok" } else { "failed" };
        writeln!(log, "{} {state} {:.3}s", r.system_id, r.seconds).unwrap();
    }
    writeln!(log, "aggregated {} of {} systems, {} failed", out.n_aggregated, out.results.len(), out.n_failed).unwrap();
    write_file(&dir.join("run_log.txt"), &log)?;

    for (m, name) in METRICS.iter().enumerate() {
        if let Err(e) = write_file(&dir.join(format!("{name}.svg")), &line_plot(name, m, &out.summary)) {
            eprintln!("warning: could not write {name}.svg: {e}");
        }
    }
    Ok(())
}

const PALETTE: [&str; 3] = ["#1b9e77", "#d95f02", "#7570b3"];

/// Mean score against horizon, one polyline per forecaster.
fn line_plot(metric: &str, m: usize, summary: &[SummaryRow]) -> String {
    let (w, h, pad) = (720.0, 440.0, 60.0);
    let mut series: Vec<(Forecaster, Vec<(f64, f64)>)> = Vec::new();
    for row in summary {
        let Some(step) = row.horizon else { continue };
        if !row.means[m].is_finite() {
            continue;
        }
        match series.last_mut() {
            Some((f, pts)) if *f == row.forecaster => pts.push((step as f64, row.means[m])),
            _ => series.push((row.forecaster, vec![(step as f64, row.means[m])])),
        }
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = all.map(|p| p.1).fold(0.0, f64::max).max(1e-12);
    let sx = |x: f64| pad + (x - 1.0) / (x_max - 1.0).max(1.0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y.max(0.0) / y_max * (h - 2.0 * pad);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">mean {metric} by horizon</text>"#, w / 2.0).unwrap();
    writeln!(
        svg,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.4}</text>"#,
            pad - 6.0,
            sy(v) + 4.0
        )
        .unwrap();
    }
    for x in [1.0, x_max] {
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{x}</text>"#,
            sx(x),
            h - pad + 16.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">horizon (steps)</text>"#,
        w / 2.0,
        h - 18.0
    )
    .unwrap();
    for (k, (f, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        let ly = pad + 16.0 * k as f64;
        writeln!(
            svg,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12" fill="{colour}">{}</text>"#,
            w - pad - 150.0,
            f.id()
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `n_records` training records (spec, history, oracle branches) to
/// `sink`. Record `k` uses the stream derived from `k`, so no two records
/// share a spec draw.
pub fn export_training_stream(config: &ExperimentConfig, n_records: usize, sink: &Path) -> Result<usize> {
    config.validate()?;
    let mut w = BufWriter::new(fs::File::create(sink)?);
    let pool = config.pool()?;
    // Generate in parallel batches, write sequentially.
    let batch = 64;
    let mut written = 0;
    for start in (0..n_records).step_by(batch) {
        let end = (start + batch).min(n_records);
        let records: Vec<TrainingRecord> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|k| {
                    let d = draw_system(config, k)?;
                    Ok(TrainingRecord {
                        system_spec: d.spec,
                        history: d.history,
                        future_branches: d.oracle,
                    })
                })
                .collect::<Result<_>>()
        })?;
        for r in &records {
            write_training_record(&mut w, r)?;
            written += 1;
        }
    }
    w.flush()?;
    Ok(written)
}

/// Scores a forecast file against an oracle file (both in the binary sample
/// format), with the files' stems as forecaster and system ids.
pub fn score_external(forecast_file: &Path, oracle_file: &Path, n_targets: usize) -> Result<ScoreReport> {
    let forecast = load_sample_set(forecast_file)?;
    let oracle = load_sample_set(oracle_file)?;
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    score_forecast(&forecast, &oracle, n_targets, &stem(forecast_file), &stem(oracle_file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{read_training_records, save_sample_set};
    use crate::universe::Dynamic;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            n_systems: 3,
            n_targets: 2,
            history_steps: 120,
            horizon: 6,
            t_out: 0.1,
            n_oracle_paths: 60,
            n_forecast_paths: 50,
            output_dir: dir.to_path_buf(),
            thread_count: Some(2),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_and_json() {
        let c = ExperimentConfig::default();
        let v: serde_json::Value = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(v["T"], 504);
        assert_eq!(v["H"], 63);
        assert_eq!(v["level"], 7);
        assert_eq!(v["forecasters"][2], "dcc_garch");
        let partial = ExperimentConfig::from_json(r#"{"n_systems": 5, "H": 10}"#).unwrap();
        assert_eq!((partial.n_systems, partial.horizon, partial.history_steps), (5, 10, 504));
        assert!(ExperimentConfig::from_json(r#"{"n_systems": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"level": 9}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"forecasters": ["oracle_rebranch", "oracle_rebranch"]}"#).is_err());
        let mismatched = ExperimentConfig { horizon: 10, ..ExperimentConfig::default() };
        assert!(mismatched.validate().is_ok());
        assert!(matches!(mismatched.validate_for_recovery(), Err(Error::Config(_))));
        assert!(ExperimentConfig::default().validate_for_recovery().is_ok());
    }

    #[test]
    fn recovery_writes_schema_conformant_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(dir.path());
        let out = run_recovery(&c).unwrap();
        assert_eq!(out.n_failed, 0);
        assert_eq!(out.summary.len(), 3 * (c.horizon + 1));
        let scores = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
        assert_eq!(scores.lines().count(), 1 + 3 * 3 * (c.horizon + 1));
        assert_eq!(scores.lines().next().unwrap(), SCORE_CSV_HEADER);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + 3 * (c.horizon + 1));
        for m in METRICS {
            let svg = fs::read_to_string(dir.path().join(format!("{m}.svg"))).unwrap();
            assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 3);
        }
        let status = fs::read_to_string(dir.path().join("fit_status.csv")).unwrap();
        assert_eq!(status.lines().count(), 1 + 3 * 3);
        assert!(out.reports().all(ScoreReport::is_well_formed));
    }

    #[test]
    fn deterministic_trend_scores_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            n_systems: 1,
            level: CurriculumLevel::new(0).unwrap(),
            ..small(dir.path())
        };
        let mut spec = draw_system(&c, 0).unwrap().spec;
        assert!(!spec.active_dynamics().contains(&Dynamic::Diffusion));
        for d in &mut spec.drift {
            d.kind = crate::universe::DriftKind::Constant;
        }
        let draw = draw_with_spec(&c, 0, spec).unwrap();
        let scores = score_system(&c, 0, &draw).unwrap();
        assert_eq!(scores.reports.len(), 3);
        for r in &scores.reports {
            for &v in &r.per_horizon_energy {
                assert!(v < 1e-5, "{}: {v}", r.forecaster_id);
            }
        }
        assert!(scores.reports[0].per_horizon_energy.iter().all(|&v| v == 0.0));

        // Any level-0 system is deterministic, so the re-branch is exact.
        let out = run_recovery(&c).unwrap();
        let rebranch = out.reports().find(|r| r.forecaster_id == "oracle_rebranch").unwrap();
        assert!(rebranch.per_horizon_energy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_bytes_ignore_thread_count() {
        let read = |threads: usize| {
            let dir = tempfile::tempdir().unwrap();
            let c = ExperimentConfig {
                thread_count: Some(threads),
                ..small(dir.path())
            };
            run_recovery(&c).unwrap();
            ["scores.csv", "summary.csv", "fit_status.csv", "failures.csv", "energy.svg"]
                .map(|f| fs::read(dir.path().join(f)).unwrap())
        };
        assert_eq!(read(1), read(3));
    }

    #[test]
    fn summary_gaps_relative_to_best_baseline() {
        let report = |f: &str, e: f64| ScoreReport {
            forecaster_id: f.into(),
            system_id: "s".into(),
            horizons: 1,
            per_horizon_energy: vec![e],
            per_horizon_marginal_energy: vec![e],
            per_horizon_crps_sum: vec![e],
            averages: crate::scoring::ScoreAverages {
                energy: e,
                marginal_energy: e,
                crps_sum: e,
            },
        };
        let sys1 = [report("o", 1.0), report("h", 4.0), report("d", 2.0)];
        let sys2 = [report("o", 3.0), report("h", 6.0), report("d", 4.0)];
        let rows = summarize(&Forecaster::ALL, 1, &[&sys1, &sys2]);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].means[0], 2.0);
        assert_eq!(rows[0].gap_pct[0], Some(100.0 * (3.0 - 2.0) / 3.0));
        assert_eq!(rows[4].gap_pct[0], Some(0.0));
        assert_eq!(rows[0].csv().split(',').count(), 9);
        assert!(rows[1].csv().starts_with("oracle_rebranch,avg,2,"));
    }

    #[test]
    fn training_stream_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            history_steps: 20,
            horizon: 3,
            n_oracle_paths: 4,
            n_targets: 3,
            n_features: 1,
            ..small(dir.path())
        };
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        assert_eq!(export_training_stream(&c, 3, &a).unwrap(), 3);
        export_training_stream(&c, 3, &b).unwrap();
        let bytes = fs::read(&a).unwrap();
        assert_eq!(bytes, fs::read(&b).unwrap());
        let recs = read_training_records(&bytes[..]).unwrap();
        assert_eq!(recs.len(), 3);
        for (k, r) in recs.iter().enumerate() {
            let d = draw_system(&c, k).unwrap();
            assert_eq!(r.system_spec, d.spec);
            assert_eq!(r.history, d.history);
            assert_eq!(r.future_branches, d.oracle);
        }
    }

    #[test]
    fn training_stream_mixes_jumps_at_level_seven() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            history_steps: 100,
            horizon: 1,
            n_oracle_paths: 1,
            n_targets: 2,
            ..small(dir.path())
        };
        let path = dir.path().join("s.bin");
        export_training_stream(&c, 1000, &path).unwrap();
        let recs = read_training_records(fs::File::open(&path).unwrap()).unwrap();
        let jumps = recs.iter().filter(|r| r.system_spec.jumps.enabled).count() as f64 / 1000.0;
        assert!((0.4..=0.6).contains(&jumps), "{jumps}");
        let mut specs: Vec<String> = recs.iter().map(|r| r.system_spec.to_json().unwrap()).collect();
        specs.sort();
        specs.dedup();
        assert_eq!(specs.len(), 1000);
    }

    #[test]
    fn external_scoring_matches_in_process() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(dir.path());
        let draw = draw_system(&c, 0).unwrap();
        let other = draw_system(&c, 1).unwrap();
        let (o, f) = (dir.path().join("oracle.bin"), dir.path().join("forecast.bin"));
        save_sample_set(&o, &draw.oracle).unwrap();
        save_sample_set(&f, &other.oracle).unwrap();
        let ext = score_external(&f, &o, 2).unwrap();
        let inproc = score_forecast(&other.oracle, &draw.oracle, 2, "forecast", "oracle").unwrap();
        assert_eq!(ext, inproc);
        let own = score_external(&o, &o, 2).unwrap();
        assert!(own.per_horizon_energy.iter().all(|&v| v == 0.0));

        let bytes = fs::read(&o).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 5]).unwrap();
        match score_external(&f, &o, 2) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 5),
            other => panic!("{other:?}"),
        }
    }
}
