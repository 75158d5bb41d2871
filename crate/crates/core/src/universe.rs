//! System sampling along the complexity curriculum.
//!
//! Each level adds one family of dynamics on top of the previous ones:
//!
//! | level | adds |
//! |-------|------|
//! | 0 | constant trends and linear mean reversion (deterministic) |
//! | 1 | diffusion, nonlinear drift, sinusoidal forcing |
//! | 2 | block correlations (intra-feature, intra-target) |
//! | 3 | cross-block feature/target correlation |
//! | 4 | unrestricted global correlation |
//! | 5 | compound Poisson jumps |
//! | 6 | telegraph regime switching |
//! | 7 | state-dependent (logistic) regime switching |
//!
//! The newest dynamic of the requested level is always present; older ones
//! are mixed in with probability one half.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, nearest_pd_repair, sample_correlation, CholeskyFactor, CorrelationMatrix, CHOLESKY_TOL,
    PD_FLOOR,
};
use crate::rng::RngStream;

pub const MAX_LEVEL: u8 = 7;

/// Sampling ranges for every parameter the sampler draws.
pub mod ranges {
    pub const MEAN_REVERSION_RATE: (f64, f64) = (0.1, 4.0);
    pub const LONG_RUN_LEVEL: (f64, f64) = (-2.0, 2.0);
    pub const BASE_VOL: (f64, f64) = (0.05, 1.0);
    pub const STATE_SCALE: (f64, f64) = (0.0, 1.0);
    /// Forcing amplitude as a fraction of the dimension's base volatility.
    pub const FORCING_AMPLITUDE_FRACTION: (f64, f64) = (0.0, 0.5);
    pub const FORCING_FREQUENCY: (f64, f64) = (0.5, 8.0);
    pub const JUMP_INTENSITY: (f64, f64) = (0.5, 10.0);
    pub const JUMP_MEAN: (f64, f64) = (-0.5, 0.5);
    pub const JUMP_STD: (f64, f64) = (0.02, 0.3);
    pub const COMMON_JUMP_PROB: (f64, f64) = (0.0, 1.0);
    pub const TELEGRAPH_RATE: (f64, f64) = (0.5, 6.0);
    pub const REGIME_DRIFT_OFFSET: (f64, f64) = (-1.0, 1.0);
    pub const LOGISTIC_MAX_RATE: (f64, f64) = (0.5, 6.0);
    pub const LOGISTIC_SLOPE: (f64, f64) = (-1.0, 1.0);
    pub const LOGISTIC_BIAS: (f64, f64) = (-1.0, 1.0);
    pub const CORRELATION_STRENGTH: (f64, f64) = (0.2, 0.95);
    pub const INIT_STATE: (f64, f64) = (-1.0, 1.0);
}

/// Probability that an older (non-newest) dynamic is mixed into a system.
pub const MIX_PROBABILITY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct CurriculumLevel(u8);

impl CurriculumLevel {
    pub fn new(level: i64) -> Result<Self> {
        if (0..=MAX_LEVEL as i64).contains(&level) {
            Ok(Self(level as u8))
        } else {
            Err(Error::InvalidLevel(level))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for CurriculumLevel {
    type Error = Error;
    fn try_from(v: i64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CurriculumLevel> for i64 {
    fn from(l: CurriculumLevel) -> i64 {
        l.0 as i64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Constant,
    LinearMeanReversion,
    TanhSaturating,
    CubicDamped,
}

impl DriftKind {
    pub fn is_nonlinear(self) -> bool {
        matches!(self, DriftKind::TanhSaturating | DriftKind::CubicDamped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub kind: DriftKind,
    pub level_param: f64,
    pub rate: f64,
    pub forcing_amplitude: f64,
    pub forcing_frequency: f64,
    pub forcing_phase: f64,
}

impl DriftSpec {
    /// Deterministic part of the drift at `(t, x)`: trend or restoring force
    /// plus sinusoidal forcing.
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        let gap = self.level_param - x;
        let base = match self.kind {
            DriftKind::Constant => self.level_param,
            DriftKind::LinearMeanReversion => self.rate * gap,
            DriftKind::TanhSaturating => self.rate * gap.tanh(),
            DriftKind::CubicDamped => self.rate * (gap + gap * gap * gap),
        };
        let forcing = if self.forcing_amplitude != 0.0 {
            self.forcing_amplitude * (TAU * self.forcing_frequency * t + self.forcing_phase).sin()
        } else {
            0.0
        };
        base + forcing
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationStructure {
    Identity,
    Block,
    CrossBlock,
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub base_vol: Vec<f64>,
    pub state_scale: Vec<f64>,
    pub structure: CorrelationStructure,
    pub correlation: CorrelationMatrix,
    pub chol: CholeskyFactor,
}

impl DiffusionSpec {
    /// Instantaneous volatility of dimension `i` at state value `x`.
    pub fn vol(&self, i: usize, x: f64) -> f64 {
        self.base_vol[i] * (1.0 + self.state_scale[i] * x.abs())
    }

    pub fn is_silent(&self) -> bool {
        self.base_vol.iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub enabled: bool,
    pub intensity: Vec<f64>,
    pub jump_mean: Vec<f64>,
    pub jump_std: Vec<f64>,
    pub common_jump_prob: f64,
}

impl JumpSpec {
    pub fn disabled(dims: usize) -> Self {
        Self {
            enabled: false,
            intensity: vec![0.0; dims],
            jump_mean: vec![0.0; dims],
            jump_std: vec![0.0; dims],
            common_jump_prob: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeMechanism {
    Telegraph,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub enabled: bool,
    pub mechanism: RegimeMechanism,
    pub n_regimes: u32,
    /// `n_regimes × D` additive drift, one row per regime.
    pub drift_offset: Vec<Vec<f64>>,
    /// Rate of leaving regime 0 and regime 1 respectively.
    pub telegraph_rates: [f64; 2],
    pub logistic_max_rate: f64,
    pub logistic_slope: Vec<f64>,
    pub logistic_bias: f64,
}

impl RegimeSpec {
    pub fn disabled(dims: usize) -> Self {
        Self {
            enabled: false,
            mechanism: RegimeMechanism::Telegraph,
            n_regimes: 2,
            drift_offset: vec![vec![0.0; dims]; 2],
            telegraph_rates: [1.0, 1.0],
            logistic_max_rate: 1.0,
            logistic_slope: vec![0.0; dims],
            logistic_bias: 0.0,
        }
    }

    /// Hazard of leaving `regime` at state `x`.
    ///
    /// The logistic mechanism uses `max_rate·σ(slope·x + bias)` out of regime
    /// 0 and `max_rate·σ(−(slope·x + bias))` out of regime 1, so a zero slope
    /// reduces to a telegraph process with two constant rates.
    pub fn hazard(&self, regime: usize, x: &[f64]) -> f64 {
        match self.mechanism {
            RegimeMechanism::Telegraph => self.telegraph_rates[regime],
            RegimeMechanism::Logistic => {
                let u = self
                    .logistic_slope
                    .iter()
                    .zip(x)
                    .map(|(s, v)| s * v)
                    .sum::<f64>()
                    + self.logistic_bias;
                let u = if regime == 0 { u } else { -u };
                self.logistic_max_rate * logistic(u)
            }
        }
    }
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSystemSpec {
    pub n_features: usize,
    pub n_targets: usize,
    pub level: CurriculumLevel,
    pub drift: Vec<DriftSpec>,
    pub diffusion: DiffusionSpec,
    pub jumps: JumpSpec,
    pub regimes: RegimeSpec,
    pub init_state: Vec<f64>,
}

/// Families of dynamics a spec can exhibit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dynamic {
    Drift,
    Diffusion,
    NonlinearDrift,
    SinusoidalForcing,
    BlockCorrelation,
    CrossBlockCorrelation,
    GlobalCorrelation,
    Jumps,
    RegimeSwitching,
    StateDependentRegime,
}

impl SdeSystemSpec {
    pub fn dims(&self) -> usize {
        self.n_features + self.n_targets
    }

    /// Index range of the target dimensions (the last `n_targets`).
    pub fn target_range(&self) -> std::ops::Range<usize> {
        self.n_features..self.dims()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn active_dynamics(&self) -> BTreeSet<Dynamic> {
        let mut out = BTreeSet::new();
        out.insert(Dynamic::Drift);
        if !self.diffusion.is_silent() {
            out.insert(Dynamic::Diffusion);
        }
        if self.drift.iter().any(|d| d.kind.is_nonlinear()) {
            out.insert(Dynamic::NonlinearDrift);
        }
        if self.drift.iter().any(|d| d.forcing_amplitude != 0.0) {
            out.insert(Dynamic::SinusoidalForcing);
        }
        match self.diffusion.structure {
            CorrelationStructure::Identity => {}
            CorrelationStructure::Block => {
                out.insert(Dynamic::BlockCorrelation);
            }
            CorrelationStructure::CrossBlock => {
                out.insert(Dynamic::BlockCorrelation);
                if self.n_features > 0 {
                    out.insert(Dynamic::CrossBlockCorrelation);
                }
            }
            CorrelationStructure::Global => {
                out.insert(Dynamic::BlockCorrelation);
                if self.n_features > 0 {
                    out.insert(Dynamic::CrossBlockCorrelation);
                }
                out.insert(Dynamic::GlobalCorrelation);
            }
        }
        if self.jumps.enabled {
            out.insert(Dynamic::Jumps);
        }
        if self.regimes.enabled {
            out.insert(Dynamic::RegimeSwitching);
            if self.regimes.mechanism == RegimeMechanism::Logistic {
                out.insert(Dynamic::StateDependentRegime);
            }
        }
        out
    }
}

fn draw(rng: &mut RngStream, (lo, hi): (f64, f64)) -> f64 {
    rng.uniform(lo, hi).clamp(lo, hi)
}

// Stream labels for the independent parts of a spec.
const S_FLAGS: u64 = 1;
const S_DRIFT: u64 = 2;
const S_VOL: u64 = 3;
const S_CORR_F: u64 = 4;
const S_CORR_Y: u64 = 5;
const S_CORR_CROSS: u64 = 6;
const S_CORR_GLOBAL: u64 = 7;
const S_JUMPS: u64 = 8;
const S_REGIMES: u64 = 9;
const S_INIT: u64 = 10;

/// Samples a complete system at `level` with `n_features` exogenous and
/// `n_targets` target dimensions.
pub fn sample_system(
    level: CurriculumLevel,
    n_features: usize,
    n_targets: usize,
    rng: &RngStream,
) -> Result<SdeSystemSpec> {
    if n_targets == 0 {
        return Err(Error::InvalidParameter("n_targets must be at least 1".into()));
    }
    let lv = level.get();
    let dims = n_features + n_targets;
    let mut flags = rng.derive(S_FLAGS);
    let mut mix = |newest_at: u8| -> bool {
        // Always draw so that flag streams stay aligned across levels.
        let coin = flags.bernoulli(MIX_PROBABILITY);
        if lv < newest_at {
            false
        } else if lv == newest_at {
            true
        } else {
            coin
        }
    };
    let nonlinear = mix(1);
    let forcing = mix(1);
    let block = mix(2);
    let cross = mix(3);
    let global = mix(4);
    let jumps_on = mix(5);
    let telegraph_on = mix(6);
    let diffusion_on = lv >= 1;

    let mut vol_rng = rng.derive(S_VOL);
    let (base_vol, state_scale): (Vec<f64>, Vec<f64>) = (0..dims)
        .map(|_| {
            let v = draw(&mut vol_rng, ranges::BASE_VOL);
            let s = draw(&mut vol_rng, ranges::STATE_SCALE);
            if diffusion_on {
                (v, s)
            } else {
                (0.0, 0.0)
            }
        })
        .unzip();

    let mut drift_rng = rng.derive(S_DRIFT);
    let drift = (0..dims)
        .map(|i| {
            let linear_coin = drift_rng.bernoulli(0.5);
            let tanh_coin = drift_rng.bernoulli(0.5);
            let kind = if nonlinear {
                if tanh_coin {
                    DriftKind::TanhSaturating
                } else {
                    DriftKind::CubicDamped
                }
            } else if linear_coin {
                DriftKind::LinearMeanReversion
            } else {
                DriftKind::Constant
            };
            let level_param = draw(&mut drift_rng, ranges::LONG_RUN_LEVEL);
            let rate = draw(&mut drift_rng, ranges::MEAN_REVERSION_RATE);
            let frac = draw(&mut drift_rng, ranges::FORCING_AMPLITUDE_FRACTION);
            let forcing_frequency = draw(&mut drift_rng, ranges::FORCING_FREQUENCY);
            let forcing_phase = drift_rng.uniform(0.0, TAU).clamp(0.0, TAU - 1e-12);
            let forcing_amplitude = if forcing { frac * base_vol[i] } else { 0.0 };
            DriftSpec {
                kind,
                level_param,
                rate,
                forcing_amplitude,
                forcing_frequency,
                forcing_phase,
            }
        })
        .collect();

    let structure = if global {
        CorrelationStructure::Global
    } else if cross {
        CorrelationStructure::CrossBlock
    } else if block {
        CorrelationStructure::Block
    } else {
        CorrelationStructure::Identity
    };
    let correlation = build_correlation(structure, n_features, n_targets, rng);
    let chol = correlation.cholesky()?;

    let jumps = if jumps_on {
        let mut j = rng.derive(S_JUMPS);
        let mut spec = JumpSpec::disabled(dims);
        spec.enabled = true;
        for i in 0..dims {
            spec.intensity[i] = draw(&mut j, ranges::JUMP_INTENSITY);
            spec.jump_mean[i] = draw(&mut j, ranges::JUMP_MEAN);
            spec.jump_std[i] = draw(&mut j, ranges::JUMP_STD);
        }
        spec.common_jump_prob = draw(&mut j, ranges::COMMON_JUMP_PROB);
        spec
    } else {
        JumpSpec::disabled(dims)
    };

    let regimes = if lv >= 7 || telegraph_on {
        let mut r = rng.derive(S_REGIMES);
        let mut spec = RegimeSpec::disabled(dims);
        spec.enabled = true;
        spec.mechanism = if lv >= 7 {
            RegimeMechanism::Logistic
        } else {
            RegimeMechanism::Telegraph
        };
        for row in spec.drift_offset.iter_mut() {
            for v in row.iter_mut() {
                *v = draw(&mut r, ranges::REGIME_DRIFT_OFFSET);
            }
        }
        spec.telegraph_rates = [
            draw(&mut r, ranges::TELEGRAPH_RATE),
            draw(&mut r, ranges::TELEGRAPH_RATE),
        ];
        spec.logistic_max_rate = draw(&mut r, ranges::LOGISTIC_MAX_RATE);
        for v in spec.logistic_slope.iter_mut() {
            *v = draw(&mut r, ranges::LOGISTIC_SLOPE);
        }
        spec.logistic_bias = draw(&mut r, ranges::LOGISTIC_BIAS);
        spec
    } else {
        RegimeSpec::disabled(dims)
    };

    let mut init_rng = rng.derive(S_INIT);
    let init_state = (0..dims)
        .map(|_| draw(&mut init_rng, ranges::INIT_STATE))
        .collect();

    Ok(SdeSystemSpec {
        n_features,
        n_targets,
        level,
        drift,
        diffusion: DiffusionSpec {
            base_vol,
            state_scale,
            structure,
            correlation,
            chol,
        },
        jumps,
        regimes,
        init_state,
    })
}

fn build_correlation(
    structure: CorrelationStructure,
    m: usize,
    n: usize,
    rng: &RngStream,
) -> CorrelationMatrix {
    let dims = m + n;
    let block = |label: u64, size: usize| -> Option<CorrelationMatrix> {
        if size == 0 {
            return None;
        }
        let mut r = rng.derive(label);
        let strength = draw(&mut r, ranges::CORRELATION_STRENGTH);
        Some(sample_correlation(size, strength, &mut r))
    };
    match structure {
        CorrelationStructure::Identity => CorrelationMatrix::identity(dims),
        CorrelationStructure::Global => {
            let mut r = rng.derive(S_CORR_GLOBAL);
            let strength = draw(&mut r, ranges::CORRELATION_STRENGTH);
            sample_correlation(dims, strength, &mut r)
        }
        CorrelationStructure::Block | CorrelationStructure::CrossBlock => {
            let mut c = DMatrix::<f64>::identity(dims, dims);
            if let Some(f) = block(S_CORR_F, m) {
                c.view_mut((0, 0), (m, m)).copy_from(f.matrix());
            }
            if let Some(y) = block(S_CORR_Y, n) {
                c.view_mut((m, m), (n, n)).copy_from(y.matrix());
            }
            if structure == CorrelationStructure::CrossBlock && m > 0 {
                let mut r = rng.derive(S_CORR_CROSS);
                let strength = draw(&mut r, ranges::CORRELATION_STRENGTH);
                let g = sample_correlation(dims, strength, &mut r);
                for i in 0..m {
                    for j in m..dims {
                        c[(i, j)] = g.get(i, j);
                        c[(j, i)] = g.get(j, i);
                    }
                }
                c = nearest_pd_repair(&c, PD_FLOOR);
            }
            CorrelationMatrix::from_raw(c)
        }
    }
}

/// Lists every invariant the system spec violates; empty means valid.
pub fn validate_spec(spec: &SdeSystemSpec) -> Vec<String> {
    let mut v = Vec::new();
    let lv = spec.level.get();
    let d = spec.dims();
    if spec.n_targets == 0 {
        v.push("n_targets must be at least 1".to_string());
    }
    let mut len_check = |name: &str, len: usize| {
        if len != d {
            v.push(format!("{name} has length {len}, expected D = {d}"));
        }
    };
    len_check("drift", spec.drift.len());
    len_check("diffusion.base_vol", spec.diffusion.base_vol.len());
    len_check("diffusion.state_scale", spec.diffusion.state_scale.len());
    len_check("jumps.intensity", spec.jumps.intensity.len());
    len_check("jumps.jump_mean", spec.jumps.jump_mean.len());
    len_check("jumps.jump_std", spec.jumps.jump_std.len());
    len_check("regimes.logistic_slope", spec.regimes.logistic_slope.len());
    len_check("init_state", spec.init_state.len());
    if !v.is_empty() {
        return v;
    }

    for (i, dr) in spec.drift.iter().enumerate() {
        let finite = [
            dr.level_param,
            dr.rate,
            dr.forcing_amplitude,
            dr.forcing_frequency,
            dr.forcing_phase,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            v.push(format!("drift[{i}] has non-finite parameters"));
            continue;
        }
        if dr.rate < 0.0 {
            v.push(format!("drift[{i}].rate must be >= 0"));
        }
        if dr.forcing_amplitude < 0.0 {
            v.push(format!("drift[{i}].forcing_amplitude must be >= 0"));
        }
        if dr.forcing_frequency <= 0.0 {
            v.push(format!("drift[{i}].forcing_frequency must be > 0"));
        }
        if !(0.0..TAU).contains(&dr.forcing_phase) {
            v.push(format!("drift[{i}].forcing_phase must lie in [0, 2π)"));
        }
        if lv < 1 && dr.kind.is_nonlinear() {
            v.push(format!("drift[{i}]: nonlinear drift requires level ≥ 1"));
        }
        if lv < 1 && dr.forcing_amplitude != 0.0 {
            v.push(format!("drift[{i}]: sinusoidal forcing requires level ≥ 1"));
        }
    }

    let diff = &spec.diffusion;
    for i in 0..d {
        let bv = diff.base_vol[i];
        let ss = diff.state_scale[i];
        if !bv.is_finite() || !ss.is_finite() {
            v.push(format!("diffusion[{i}] has non-finite parameters"));
            continue;
        }
        if ss < 0.0 {
            v.push(format!("diffusion.state_scale[{i}] must be >= 0"));
        }
        if lv >= 1 && bv <= 0.0 {
            v.push(format!("diffusion.base_vol[{i}] must be > 0 at level ≥ 1"));
        }
        if lv == 0 && (bv != 0.0 || ss != 0.0) {
            v.push(format!("diffusion[{i}]: diffusion requires level ≥ 1"));
        }
    }
    if diff.correlation.dim() != d || diff.chol.dim() != d {
        v.push(format!(
            "correlation is {}x{} and chol {}x{}, expected D = {d}",
            diff.correlation.dim(),
            diff.correlation.dim(),
            diff.chol.dim(),
            diff.chol.dim()
        ));
    } else {
        v.extend(diff.correlation.violations());
        if !diff.chol.has_positive_diagonal() {
            v.push("chol diagonal must be strictly positive".into());
        } else {
            let rel = (diff.chol.reconstruct() - diff.correlation.matrix()).norm()
                / diff.correlation.matrix().norm();
            if !(rel <= CHOLESKY_TOL) {
                v.push("chol does not factor the correlation matrix".into());
            }
        }
        let required = match diff.structure {
            CorrelationStructure::Identity => 0,
            CorrelationStructure::Block => 2,
            CorrelationStructure::CrossBlock => 3,
            CorrelationStructure::Global => 4,
        };
        if lv < required {
            v.push(format!(
                "{:?} correlation requires level ≥ {required}",
                diff.structure
            ));
        }
        let m = spec.n_features;
        let c = &diff.correlation;
        match diff.structure {
            CorrelationStructure::Identity if !c.is_identity() => {
                v.push("identity correlation structure with non-identity matrix".into())
            }
            CorrelationStructure::Block => {
                let leaks = (0..m).any(|i| (m..d).any(|j| c.get(i, j) != 0.0));
                if leaks {
                    v.push("block correlation structure with nonzero cross-block entries".into());
                }
            }
            _ => {}
        }
    }

    let j = &spec.jumps;
    if j.enabled && lv < 5 {
        v.push("jumps require level ≥ 5".into());
    }
    if !j.enabled && j.intensity.iter().any(|&x| x != 0.0) {
        v.push("disabled jumps must have zero intensity".into());
    }
    for i in 0..d {
        if !(j.intensity[i] >= 0.0 && j.intensity[i].is_finite()) {
            v.push(format!("jumps.intensity[{i}] must be finite and >= 0"));
        }
        if !j.jump_mean[i].is_finite() {
            v.push(format!("jumps.jump_mean[{i}] must be finite"));
        }
        if !(j.jump_std[i] >= 0.0 && j.jump_std[i].is_finite()) {
            v.push(format!("jumps.jump_std[{i}] must be finite and >= 0"));
        }
    }
    if !(0.0..=1.0).contains(&j.common_jump_prob) {
        v.push("jumps.common_jump_prob must lie in [0, 1]".into());
    }

    let r = &spec.regimes;
    if r.n_regimes != 2 {
        v.push("regimes.n_regimes must be 2".into());
    }
    if r.drift_offset.len() != 2 || r.drift_offset.iter().any(|row| row.len() != d) {
        v.push(format!("regimes.drift_offset must be 2 x {d}"));
    } else if r.drift_offset.iter().flatten().any(|x| !x.is_finite()) {
        v.push("regimes.drift_offset must be finite".into());
    }
    if r.telegraph_rates.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        v.push("regimes.telegraph_rates must be finite and > 0".into());
    }
    if !(r.logistic_max_rate > 0.0 && r.logistic_max_rate.is_finite()) {
        v.push("regimes.logistic_max_rate must be finite and > 0".into());
    }
    if r.logistic_slope.iter().any(|x| !x.is_finite()) || !r.logistic_bias.is_finite() {
        v.push("regimes logistic parameters must be finite".into());
    }
    if r.enabled {
        match r.mechanism {
            RegimeMechanism::Telegraph if lv < 6 => {
                v.push("telegraph regime switching requires level ≥ 6".into())
            }
            RegimeMechanism::Logistic if lv < 7 => {
                v.push("logistic regime switching requires level ≥ 7".into())
            }
            _ => {}
        }
    }
    if spec.init_state.iter().any(|x| !x.is_finite()) {
        v.push("init_state must be finite".into());
    }
    v
}

/// Row-major correlation helper re-exported for spec builders.
pub fn correlation_from_rows(rows: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    Ok(CorrelationMatrix::from_raw(linalg::from_rows(rows)?))
}
