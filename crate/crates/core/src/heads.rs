//! Mixture forecast heads: multivariate Gaussian mixtures and mixtures of
//! Azzalini–Capitanio skew-t components.
//!
//! Heads describe one horizon's D-dimensional cross-section. Densities use
//! triangular solves against the scale Cholesky factors and log-sum-exp over
//! components.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor};
use crate::rng::{sample_standard, RngStream, StandardLaw};
use crate::simulator::SampleSet;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub n_components: usize,
    pub dims: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub scale_chols: Vec<CholeskyFactor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewTParams {
    pub n_components: usize,
    pub dims: usize,
    pub weights: Vec<f64>,
    pub dof: Vec<f64>,
    pub locations: Vec<Vec<f64>>,
    pub scale_chols: Vec<CholeskyFactor>,
    pub skews: Vec<Vec<f64>>,
}

fn invalid<T>(msg: String) -> Result<T> {
    Err(Error::InvalidParameter(msg))
}

fn check_weights(w: &[f64], k: usize) -> Result<()> {
    if k == 0 || w.len() != k {
        return invalid(format!("need {k} ≥ 1 weights, got {}", w.len()));
    }
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return invalid("weights must be finite and non-negative".into());
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return invalid(format!("weights sum to {total}, not 1"));
    }
    Ok(())
}

fn check_vectors(v: &[Vec<f64>], k: usize, d: usize, what: &str) -> Result<()> {
    if v.len() != k || v.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
        return invalid(format!("{what} must be {k} finite vectors of length {d}"));
    }
    Ok(())
}

fn check_chols(c: &[CholeskyFactor], k: usize, d: usize) -> Result<()> {
    if c.len() != k {
        return invalid(format!("need {k} scale factors, got {}", c.len()));
    }
    for (i, l) in c.iter().enumerate() {
        let m = l.lower();
        if l.dim() != d || m.ncols() != d {
            return invalid(format!("scale factor {i} is not {d}x{d}"));
        }
        if !l.has_positive_diagonal() {
            return invalid(format!("scale factor {i} needs a strictly positive diagonal"));
        }
        let upper_clear = (0..d).all(|r| ((r + 1)..d).all(|col| m[(r, col)] == 0.0));
        if !upper_clear || m.iter().any(|v| !v.is_finite()) {
            return invalid(format!("scale factor {i} must be finite and lower triangular"));
        }
    }
    Ok(())
}

/// Index drawn from `Categorical(weights)`; zero-weight entries are never
/// selected.
fn pick_component(weights: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.open01();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = k;
            cum += w;
            if u < cum {
                return k;
            }
        }
    }
    last_positive
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// `(L⁻¹(x − μ), |L⁻¹(x − μ)|²)`.
fn whiten(l: &CholeskyFactor, x: &[f64], mu: &[f64]) -> (Vec<f64>, f64) {
    let mut r: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    l.solve_lower_in_place(&mut r);
    let q = r.iter().map(|v| v * v).sum();
    (r, q)
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.n_components, self.dims);
        if d == 0 {
            return invalid("dims must be ≥ 1".into());
        }
        check_weights(&self.weights, k)?;
        check_vectors(&self.means, k, d, "means")?;
        check_chols(&self.scale_chols, k, d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// `n × D` row-major draws.
pub fn gmm_sample(p: &GmmParams, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    p.validate()?;
    let d = p.dims;
    let mut out = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    for row in out.chunks_exact_mut(d) {
        let k = pick_component(&p.weights, rng);
        rng.fill_normal(&mut z);
        p.scale_chols[k].mul_vec(&z, row);
        row.iter_mut().zip(&p.means[k]).for_each(|(v, m)| *v += m);
    }
    Ok(out)
}

pub fn gmm_log_density(p: &GmmParams, x: &[f64]) -> Result<f64> {
    p.validate()?;
    if x.len() != p.dims {
        return Err(Error::DimensionMismatch(format!("x has {} entries, head has D={}", x.len(), p.dims)));
    }
    let d = p.dims as f64;
    let terms: Vec<f64> = (0..p.n_components)
        .map(|k| {
            let l = &p.scale_chols[k];
            let (_, q) = whiten(l, x, &p.means[k]);
            p.weights[k].ln() - 0.5 * (d * LN_2PI + l.log_det() + q)
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

impl SkewTParams {
    pub fn validate(&self) -> Result<()> {
        let (k, d) = (self.n_components, self.dims);
        if d == 0 {
            return invalid("dims must be ≥ 1".into());
        }
        check_weights(&self.weights, k)?;
        if self.dof.len() != k || self.dof.iter().any(|&v| !(v > 2.0 && v.is_finite())) {
            return invalid("dof must hold one finite value > 2 per component".into());
        }
        check_vectors(&self.locations, k, d, "locations")?;
        check_vectors(&self.skews, k, d, "skews")?;
        check_chols(&self.scale_chols, k, d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// Marginal scales `ω = √diag(Σ)` of a component.
fn omegas(l: &CholeskyFactor) -> Vec<f64> {
    let m = l.lower();
    (0..l.dim())
        .map(|i| (0..=i).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt())
        .collect()
}

/// Cholesky of the `(D+1) × (D+1)` joint covariance `[[1, δᵀ], [δ, Ω̄]]`
/// used by the conditioning construction.
fn skew_normal_factor(l: &CholeskyFactor, alpha: &[f64]) -> Result<CholeskyFactor> {
    let d = l.dim();
    let w = omegas(l);
    let sigma = l.reconstruct();
    let corr = DMatrix::from_fn(d, d, |i, j| sigma[(i, j)] / (w[i] * w[j]));
    let ca = &corr * nalgebra::DVector::from_column_slice(alpha);
    let quad: f64 = alpha.iter().zip(ca.iter()).map(|(a, b)| a * b).sum();
    let delta: Vec<f64> = ca.iter().map(|v| v / (1.0 + quad).sqrt()).collect();
    let joint = DMatrix::from_fn(d + 1, d + 1, |i, j| match (i, j) {
        (0, 0) => 1.0,
        (0, j) => delta[j - 1],
        (i, 0) => delta[i - 1],
        (i, j) => corr[(i - 1, j - 1)],
    });
    cholesky(&joint)
}

pub fn skewt_sample(p: &SkewTParams, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    p.validate()?;
    let d = p.dims;
    let factors = (0..p.n_components)
        .map(|k| skew_normal_factor(&p.scale_chols[k], &p.skews[k]))
        .collect::<Result<Vec<_>>>()?;
    let scales: Vec<Vec<f64>> = p.scale_chols.iter().map(omegas).collect();
    let mut out = vec![0.0; n * d];
    let mut e = vec![0.0; d + 1];
    let mut w = vec![0.0; d + 1];
    for row in out.chunks_exact_mut(d) {
        let k = pick_component(&p.weights, rng);
        rng.fill_normal(&mut e);
        factors[k].mul_vec(&e, &mut w);
        let sign = if w[0] < 0.0 { -1.0 } else { 1.0 };
        let nu = p.dof[k];
        let v = sample_standard(StandardLaw::ChiSquare { dof: nu }, rng)? / nu;
        let mix = sign / v.sqrt();
        for i in 0..d {
            row[i] = p.locations[k][i] + scales[k][i] * w[i + 1] * mix;
        }
    }
    Ok(out)
}

/// Log-density of a centred multivariate t with scale factor `l`, given the
/// squared Mahalanobis norm `q`.
fn mvt_log_kernel(nu: f64, d: f64, log_det: f64, q: f64) -> f64 {
    ln_gamma(0.5 * (nu + d)) - ln_gamma(0.5 * nu) - 0.5 * d * (nu * std::f64::consts::PI).ln() - 0.5 * log_det
        - 0.5 * (nu + d) * (q / nu).ln_1p()
}

fn ln_t_cdf(x: f64, dof: f64) -> f64 {
    let t = StudentsT::new(0.0, 1.0, dof).expect("dof validated");
    // Lower tail via the survival of −x keeps precision for large negative x.
    if x < 0.0 {
        t.sf(-x).ln()
    } else {
        t.cdf(x).ln()
    }
}

pub fn skewt_log_density(p: &SkewTParams, x: &[f64]) -> Result<f64> {
    p.validate()?;
    if x.len() != p.dims {
        return Err(Error::DimensionMismatch(format!("x has {} entries, head has D={}", x.len(), p.dims)));
    }
    let d = p.dims as f64;
    let terms: Vec<f64> = (0..p.n_components)
        .map(|k| {
            let l = &p.scale_chols[k];
            let nu = p.dof[k];
            let (_, q) = whiten(l, x, &p.locations[k]);
            let w = omegas(l);
            let proj: f64 = (0..p.dims)
                .map(|i| p.skews[k][i] * (x[i] - p.locations[k][i]) / w[i])
                .sum();
            let arg = proj * ((nu + d) / (nu + q)).sqrt();
            p.weights[k].ln()
                + std::f64::consts::LN_2
                + mvt_log_kernel(nu, d, l.log_det(), q)
                + ln_t_cdf(arg, nu + d)
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Either head, tagged in JSON by `head`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum HeadParams {
    Gmm(GmmParams),
    SkewT(SkewTParams),
}

impl HeadParams {
    pub fn dims(&self) -> usize {
        match self {
            HeadParams::Gmm(p) => p.dims,
            HeadParams::SkewT(p) => p.dims,
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            HeadParams::Gmm(p) => gmm_sample(p, n, rng),
            HeadParams::SkewT(p) => skewt_sample(p, n, rng),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            HeadParams::Gmm(p) => gmm_log_density(p, x),
            HeadParams::SkewT(p) => skewt_log_density(p, x),
        }
    }
}

/// Draws `n` samples from each horizon's head independently (horizon `h` uses
/// the stream `rng.derive(h)`) and stacks them into a scoreable sample set.
pub fn heads_to_sample_set(heads: &[HeadParams], n: usize, dt: f64, rng: &RngStream) -> Result<SampleSet> {
    let Some(first) = heads.first() else {
        return invalid("need at least one horizon".into());
    };
    let d = first.dims();
    if heads.iter().any(|h| h.dims() != d) {
        return Err(Error::DimensionMismatch("heads disagree on D".into()));
    }
    let mut set = SampleSet::zeros(n, heads.len(), d, dt);
    for (h, head) in heads.iter().enumerate() {
        let draws = head.sample(n, &mut rng.derive(h as u64))?;
        for s in 0..n {
            let base = (s * heads.len() + h) * d;
            set.values[base..base + d].copy_from_slice(&draws[s * d..(s + 1) * d]);
        }
    }
    Ok(set)
}
