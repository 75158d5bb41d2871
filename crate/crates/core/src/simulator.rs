//! Euler–Maruyama integration of sampled systems: histories and branched
//! futures.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::universe::SdeSystemSpec;

/// States beyond this magnitude are treated as a blow-up.
pub const STATE_LIMIT: f64 = 1e6;

/// A single realized trajectory, `n_steps × dims`, row-major.
///
/// Row `k` holds the state after `k + 1` steps from the initial condition,
/// i.e. at time `(k + 1)·dt` on the history clock.
#[derive(Clone, Debug, PartialEq)]
pub struct PathMatrix {
    pub n_steps: usize,
    pub dims: usize,
    pub values: Vec<f64>,
    pub dt: f64,
    pub regime_trace: Option<Vec<u8>>,
}

impl PathMatrix {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dims..(k + 1) * self.dims]
    }

    pub fn last_row(&self) -> &[f64] {
        self.row(self.n_steps - 1)
    }

    pub fn last_regime(&self) -> u8 {
        self.regime_trace
            .as_ref()
            .and_then(|t| t.last().copied())
            .unwrap_or(0)
    }

    /// Time covered by the recorded rows, `n_steps·dt`.
    pub fn window(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.values[k * self.dims + d]).collect()
    }

    /// `(n_steps − 1) × dims` first differences, row-major.
    pub fn increments(&self) -> Vec<f64> {
        let d = self.dims;
        (1..self.n_steps)
            .flat_map(|k| (0..d).map(move |j| (k, j)))
            .map(|(k, j)| self.values[k * d + j] - self.values[(k - 1) * d + j])
            .collect()
    }
}

/// `n_samples` futures of `horizon` steps over `dims` dimensions,
/// row-major `S × H × D`. Step `h` is the state `h + 1` steps after the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub n_samples: usize,
    pub horizon: usize,
    pub dims: usize,
    pub values: Vec<f64>,
    pub dt: f64,
}

impl SampleSet {
    pub fn zeros(n_samples: usize, horizon: usize, dims: usize, dt: f64) -> Self {
        Self {
            n_samples,
            horizon,
            dims,
            values: vec![0.0; n_samples * horizon * dims],
            dt,
        }
    }

    #[inline]
    pub fn get(&self, s: usize, h: usize, d: usize) -> f64 {
        self.values[(s * self.horizon + h) * self.dims + d]
    }

    pub fn path(&self, s: usize) -> &[f64] {
        let len = self.horizon * self.dims;
        &self.values[s * len..(s + 1) * len]
    }

    /// Cross-section at step `h` restricted to `dims`, as an `S × dims.len()` buffer.
    pub fn slice_at(&self, h: usize, dims: std::ops::Range<usize>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_samples * dims.len());
        for s in 0..self.n_samples {
            let base = (s * self.horizon + h) * self.dims;
            out.extend_from_slice(&self.values[base + dims.start..base + dims.end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Reusable buffers for the integrator.
struct Scratch {
    drift: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            drift: vec![0.0; d],
            z: vec![0.0; d],
            w: vec![0.0; d],
        }
    }
}

fn step_in_place(
    spec: &SdeSystemSpec,
    t: f64,
    x: &mut [f64],
    regime: &mut usize,
    dt: f64,
    rng: &mut RngStream,
    scratch: &mut Scratch,
    step: usize,
) -> Result<()> {
    let d = x.len();
    let regimes = &spec.regimes;
    if regimes.enabled {
        let u = rng.open01();
        let hazard = regimes.hazard(*regime, x);
        if u < -(-hazard * dt).exp_m1() {
            *regime = 1 - *regime;
        }
    }

    for i in 0..d {
        let mut b = spec.drift[i].eval(t, x[i]);
        if regimes.enabled {
            b += regimes.drift_offset[*regime][i];
        }
        scratch.drift[i] = b;
    }

    let diffusion = &spec.diffusion;
    let silent = diffusion.is_silent();
    if !silent {
        rng.fill_normal(&mut scratch.z);
        diffusion.chol.mul_vec(&scratch.z, &mut scratch.w);
    }
    let sqrt_dt = dt.sqrt();
    for i in 0..d {
        let noise = if silent {
            0.0
        } else {
            diffusion.vol(i, x[i]) * sqrt_dt * scratch.w[i]
        };
        x[i] += scratch.drift[i] * dt + noise;
    }

    let jumps = &spec.jumps;
    if jumps.enabled {
        let coupled = rng.open01() < jumps.common_jump_prob;
        let shared = rng.open01();
        for i in 0..d {
            let own = rng.open01();
            let size = rng.normal();
            let p = -(-jumps.intensity[i] * dt).exp_m1();
            let u = if coupled { shared } else { own };
            if u < p {
                x[i] += jumps.jump_mean[i] + jumps.jump_std[i] * size;
            }
        }
    }

    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() || v.abs() > STATE_LIMIT {
            return Err(Error::NonFiniteState { step, dim: i, value: v });
        }
    }
    Ok(())
}

/// One Euler–Maruyama step from `(t, x, regime)`.
///
/// The regime is updated first from its hazard, then the drift (including the
/// regime offset), the correlated diffusion and the Bernoulli-thinned jumps are
/// applied over the full `dt`.
pub fn em_step(
    spec: &SdeSystemSpec,
    t: f64,
    x: &[f64],
    regime: usize,
    dt: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    check_state(spec, x)?;
    let mut out = x.to_vec();
    let mut regime = regime;
    let mut scratch = Scratch::new(x.len());
    step_in_place(spec, t, &mut out, &mut regime, dt, rng, &mut scratch, 0)?;
    Ok((out, regime))
}

fn check_state(spec: &SdeSystemSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.dims() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} dims, spec has {}",
            x.len(),
            spec.dims()
        )));
    }
    if let Some((i, &v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteState { step: 0, dim: i, value: v });
    }
    Ok(())
}

/// Simulates `n_steps` rows over `window` time units from the system spec's initial
/// state (regime 0), with `dt = window / n_steps`.
pub fn simulate_history(
    spec: &SdeSystemSpec,
    n_steps: usize,
    window: f64,
    rng: &RngStream,
) -> Result<PathMatrix> {
    simulate_history_with_burn_in(spec, n_steps, window, 0, rng)
}

/// As [`simulate_history`], but first runs `burn_in` unrecorded steps at the
/// same `dt` over negative times, so the recorded clock still ends at `window`.
pub fn simulate_history_with_burn_in(
    spec: &SdeSystemSpec,
    n_steps: usize,
    window: f64,
    burn_in: usize,
    rng: &RngStream,
) -> Result<PathMatrix> {
    if n_steps < 2 {
        return Err(Error::InvalidParameter(format!(
            "history needs at least 2 steps, got {n_steps}"
        )));
    }
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::InvalidParameter(format!("window must be > 0, got {window}")));
    }
    let d = spec.dims();
    check_state(spec, &spec.init_state)?;
    let dt = window / n_steps as f64;
    let mut rng = rng.clone();
    let mut x = spec.init_state.clone();
    let mut regime = 0usize;
    let mut scratch = Scratch::new(d);
    let mut values = Vec::with_capacity(n_steps * d);
    let mut trace = spec.regimes.enabled.then(|| Vec::with_capacity(n_steps));
    for k in 0..burn_in {
        let t = -((burn_in - k) as f64) * dt;
        step_in_place(spec, t, &mut x, &mut regime, dt, &mut rng, &mut scratch, k)?;
    }
    for k in 0..n_steps {
        let t = k as f64 * dt;
        step_in_place(spec, t, &mut x, &mut regime, dt, &mut rng, &mut scratch, burn_in + k)?;
        values.extend_from_slice(&x);
        if let Some(tr) = trace.as_mut() {
            tr.push(regime as u8);
        }
    }
    Ok(PathMatrix {
        n_steps,
        dims: d,
        values,
        dt,
        regime_trace: trace,
    })
}

/// Branches `n_paths` independent futures of `horizon_steps` steps over
/// `window` time units from one origin. Path `s` draws from
/// `rng.derive(s)`, so the result does not depend on how paths are scheduled.
#[allow(clippy::too_many_arguments)]
pub fn branch_futures(
    spec: &SdeSystemSpec,
    origin_state: &[f64],
    origin_regime: u8,
    origin_time: f64,
    n_paths: usize,
    horizon_steps: usize,
    window: f64,
    rng: &RngStream,
) -> Result<SampleSet> {
    if n_paths == 0 || horizon_steps == 0 {
        return Err(Error::InvalidParameter(
            "branching needs at least one path and one step".into(),
        ));
    }
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::InvalidParameter(format!("window must be > 0, got {window}")));
    }
    check_state(spec, origin_state)?;
    let d = spec.dims();
    let dt = window / horizon_steps as f64;
    let mut out = SampleSet::zeros(n_paths, horizon_steps, d, dt);
    out.values
        .par_chunks_mut(horizon_steps * d)
        .enumerate()
        .try_for_each(|(s, slot)| -> Result<()> {
            let mut rng = rng.derive(s as u64);
            let mut x = origin_state.to_vec();
            let mut regime = origin_regime as usize;
            let mut scratch = Scratch::new(d);
            for h in 0..horizon_steps {
                let t = origin_time + h as f64 * dt;
                step_in_place(spec, t, &mut x, &mut regime, dt, &mut rng, &mut scratch, h)?;
                slot[h * d..(h + 1) * d].copy_from_slice(&x);
            }
            Ok(())
        })?;
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::test_specs::*;
    use super::*;
    use crate::universe::{CurriculumLevel, DriftKind, RegimeMechanism};

    #[test]
    fn silent_spec_does_not_move() {
        let spec = quiet(3, 0);
        let x = [0.5, -1.0, 2.0];
        let (y, r) = em_step(&spec, 0.0, &x, 0, 0.01, &mut RngStream::new(1)).unwrap();
        assert_eq!(y, x);
        assert_eq!(r, 0);
    }

    #[test]
    fn linear_drift_matches_exponential_decay() {
        let mut spec = quiet(1, 0);
        spec.drift[0].kind = DriftKind::LinearMeanReversion;
        spec.drift[0].rate = 1.0;
        spec.init_state[0] = 1.0;
        let path = simulate_history(&spec, 10_000, 1.0, &RngStream::new(2)).unwrap();
        assert!((path.dt - 1e-4).abs() < 1e-18);
        let x1 = path.last_row()[0];
        assert!((x1 - (-1f64).exp()).abs() < 1e-3, "x(1) = {x1}");
    }

    #[test]
    fn jump_counts_have_poisson_mean() {
        let mut spec = quiet(1, 5);
        spec.jumps.enabled = true;
        spec.jumps.intensity[0] = 4.0;
        spec.jumps.jump_mean[0] = 1.0;
        spec.jumps.jump_std[0] = 0.0;
        let n = 10_000;
        let futures = branch_futures(&spec, &[0.0], 0, 0.0, n, 1000, 1.0, &RngStream::new(3)).unwrap();
        let mean = (0..n).map(|s| futures.get(s, 999, 0)).sum::<f64>() / n as f64;
        let tol = 4.0 * (4.0f64 / n as f64).sqrt();
        assert!((mean - 4.0).abs() < tol, "mean jump count {mean}");
    }

    #[test]
    fn history_time_step_follows_window() {
        let spec = ou(2.0, 0.5, 1.0);
        let path = simulate_history(&spec, 504, 2.0, &RngStream::new(4)).unwrap();
        assert!((path.dt - 2.0 / 504.0).abs() < 1e-15);
        assert_eq!(path.values.len(), 504);
        assert!((path.window() - 2.0).abs() < 1e-12);
        assert!(path.regime_trace.is_none());
    }

    #[test]
    fn deterministic_spec_reproduces() {
        let mut spec = quiet(2, 0);
        spec.drift[1].level_param = 0.3;
        let a = simulate_history(&spec, 50, 1.0, &RngStream::new(5)).unwrap();
        let b = simulate_history(&spec, 50, 1.0, &RngStream::new(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ou_stationary_variance() {
        let (kappa, sigma) = (2.0, 0.5);
        let spec = ou(kappa, sigma, 1.0);
        let path = simulate_history(&spec, 400_000, 4_000.0, &RngStream::new(7)).unwrap();
        let tail = &path.values[40_000..];
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        let v = tail.iter().map(|x| (x - m).powi(2)).sum::<f64>() / tail.len() as f64;
        let expected = sigma * sigma / (2.0 * kappa);
        assert!((v / expected - 1.0).abs() < 0.15, "variance {v} vs {expected}");
    }

    #[test]
    fn branch_shape_and_step() {
        let root = RngStream::new(8);
        let spec = crate::universe::sample_system(CurriculumLevel::new(7).unwrap(), 0, 10, &root).unwrap();
        let f = branch_futures(&spec, &spec.init_state, 0, 2.0, 1000, 63, 0.25, &root.derive(1)).unwrap();
        assert_eq!((f.n_samples, f.horizon, f.dims), (1000, 63, 10));
        assert!((f.dt - 0.25 / 63.0).abs() < 1e-16);
        assert!(f.is_finite());
    }

    #[test]
    fn zero_noise_branches_coincide() {
        let mut spec = quiet(2, 0);
        spec.drift[0].kind = DriftKind::LinearMeanReversion;
        spec.drift[0].rate = 1.5;
        let f = branch_futures(&spec, &[1.0, 2.0], 0, 0.0, 20, 10, 1.0, &RngStream::new(9)).unwrap();
        for s in 1..20 {
            assert_eq!(f.path(s), f.path(0));
        }
    }

    #[test]
    fn arithmetic_brownian_terminal_mean() {
        let (mu, sigma, t_out) = (0.1, 0.4, 0.25);
        let mut spec = quiet(1, 1);
        spec.drift[0].level_param = mu;
        spec.diffusion.base_vol[0] = sigma;
        let n = 4000;
        let f = branch_futures(&spec, &[1.0], 0, 0.0, n, 63, t_out, &RngStream::new(10)).unwrap();
        let mean = (0..n).map(|s| f.get(s, 62, 0)).sum::<f64>() / n as f64;
        let tol = 4.0 * sigma * (t_out / n as f64).sqrt();
        assert!((mean - (1.0 + mu * t_out)).abs() < tol, "mean {mean}");
    }

    #[test]
    fn first_step_evolves_from_origin() {
        let root = RngStream::new(11);
        let spec = crate::universe::sample_system(CurriculumLevel::new(6).unwrap(), 1, 2, &root).unwrap();
        let origin = [0.3, -0.2, 0.1];
        let rng = root.derive(2);
        let f = branch_futures(&spec, &origin, 1, 1.0, 8, 5, 0.1, &rng).unwrap();
        for s in 0..8 {
            let (one, _) = em_step(&spec, 1.0, &origin, 1, 0.1 / 5.0, &mut rng.derive(s as u64)).unwrap();
            assert_eq!(&f.path(s)[..3], one.as_slice());
        }
    }

    #[test]
    fn branching_is_independent_of_thread_count() {
        let root = RngStream::new(12);
        let spec = crate::universe::sample_system(CurriculumLevel::new(7).unwrap(), 0, 4, &root).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| branch_futures(&spec, &spec.init_state, 0, 0.0, 300, 20, 0.25, &root.derive(3)).unwrap())
        };
        assert_eq!(run(1).values, run(7).values);
    }

    #[test]
    fn telegraph_occupancy_matches_stationary_law() {
        let mut spec = quiet(1, 6);
        spec.regimes.enabled = true;
        spec.regimes.mechanism = RegimeMechanism::Telegraph;
        spec.regimes.telegraph_rates = [1.5, 3.0];
        let path = simulate_history(&spec, 2_000_000, 20_000.0, &RngStream::new(13)).unwrap();
        let trace = path.regime_trace.unwrap();
        let in_zero = trace.iter().filter(|&&r| r == 0).count() as f64 / trace.len() as f64;
        let expected = 3.0 / (1.5 + 3.0);
        assert!((in_zero - expected).abs() < 0.02 * expected, "occupancy {in_zero}");
    }

    #[test]
    fn blow_up_is_reported() {
        let mut spec = quiet(1, 0);
        spec.drift[0].level_param = 1e9;
        let err = simulate_history(&spec, 10, 1.0, &RngStream::new(14)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 0, dim: 0, .. }));
    }

    #[test]
    fn invalid_inputs() {
        let spec = quiet(1, 0);
        assert!(em_step(&spec, 0.0, &[0.0], 0, 0.0, &mut RngStream::new(0)).is_err());
        assert!(em_step(&spec, 0.0, &[f64::NAN], 0, 0.1, &mut RngStream::new(0)).is_err());
        assert!(simulate_history(&spec, 1, 1.0, &RngStream::new(0)).is_err());
        assert!(branch_futures(&spec, &[0.0], 0, 0.0, 0, 1, 1.0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn standard_error_shrinks_with_paths() {
        let spec = ou(1.0, 0.6, 0.0);
        let root = RngStream::new(15);
        let se = |s: usize| {
            let reps = 40;
            let means: Vec<f64> = (0..reps)
                .map(|r| {
                    let f = branch_futures(&spec, &[0.0], 0, 0.0, s, 10, 0.25, &root.derive((s * 1000 + r) as u64)).unwrap();
                    (0..s).map(|k| f.get(k, 9, 0)).sum::<f64>() / s as f64
                })
                .collect();
            let m = means.iter().sum::<f64>() / reps as f64;
            (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        };
        let (a, b, c) = (se(250), se(1000), se(4000));
        // Expected ratios are 2; allow for the spread of a 40-replicate estimate.
        assert!((a / b / 2.0 - 1.0).abs() < 0.35, "{a} {b}");
        assert!((b / c / 2.0 - 1.0).abs() < 0.35, "{b} {c}");
    }

    #[test]
    fn dt_refinement_changes_mean_by_order_dt() {
        let mut spec = ou(3.0, 0.3, 0.0);
        spec.drift[0].kind = DriftKind::TanhSaturating;
        spec.init_state[0] = 2.0;
        let root = RngStream::new(16);
        let mean_at = |steps: usize| {
            let f = branch_futures(&spec, &[2.0], 0, 0.0, 20_000, steps, 0.5, &root.derive(steps as u64)).unwrap();
            (0..20_000).map(|s| f.get(s, steps - 1, 0)).sum::<f64>() / 20_000.0
        };
        let coarse = mean_at(10);
        let fine = mean_at(20);
        let finer = mean_at(40);
        let d1 = (coarse - fine).abs();
        let d2 = (fine - finer).abs();
        assert!(d1 < 0.05 && d2 < d1 + 0.01, "{coarse} {fine} {finer}");
    }
}
