//! Splittable, reproducible random streams.
//!
//! A stream is named by a root seed plus a path of 64-bit labels. The path is
//! hashed into the key of a ChaCha8 block generator, so a child stream depends
//! only on its name and never on how far the parent has been advanced. Work
//! split across systems, paths, or threads therefore draws the same numbers no
//! matter how it is scheduled.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, Poisson, StandardNormal, StudentT, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DOMAIN_TAG: &[u8] = b"sdeverse/rng-stream/v1";

/// Labels reserved for common purposes when deriving child streams.
pub mod purpose {
    pub const SPEC: u64 = 0x5350_4543;
    pub const HISTORY: u64 = 0x4849_5354;
    pub const ORACLE: u64 = 0x4f52_4143;
    pub const REBRANCH: u64 = 0x5245_4252;
    pub const HISTORICAL_SIM: u64 = 0x4853_494d;
    pub const DCC: u64 = 0x4443_4347;
    pub const HEAD: u64 = 0x4845_4144;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    path: Vec<u64>,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(root_seed: u64) -> Self {
        Self::from_path(root_seed, Vec::new())
    }

    fn from_path(root_seed: u64, path: Vec<u64>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN_TAG);
        hasher.update(root_seed.to_le_bytes());
        hasher.update((path.len() as u64).to_le_bytes());
        for label in &path {
            hasher.update(label.to_le_bytes());
        }
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            root_seed,
            path,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Child stream named `parent.path ++ [label]`. The parent is not advanced.
    pub fn derive(&self, label: u64) -> RngStream {
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(label);
        Self::from_path(self.root_seed, path)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn open01(&mut self) -> f64 {
        loop {
            let u = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.open01()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.open01() < p
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform index in `0..n`. Panics when `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let v = (self.open01() * n as f64) as usize;
        v.min(n - 1)
    }
}

/// Free-function form of [`RngStream::derive`].
pub fn derive_stream(parent: &RngStream, label: u64) -> RngStream {
    parent.derive(label)
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Elementary laws used to drive the noise terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StandardLaw {
    Normal,
    StudentT { dof: f64 },
    Poisson { lambda: f64 },
    Exponential { rate: f64 },
    Uniform { low: f64, high: f64 },
    ChiSquare { dof: f64 },
}

pub fn sample_standard(law: StandardLaw, rng: &mut RngStream) -> Result<f64> {
    let bad = |msg: String| Err(Error::InvalidParameter(msg));
    match law {
        StandardLaw::Normal => Ok(rng.normal()),
        StandardLaw::StudentT { dof } => {
            if !(dof > 0.0 && dof.is_finite()) {
                return bad(format!("student_t dof must be > 0, got {dof}"));
            }
            let d = StudentT::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(d.sample(rng))
        }
        StandardLaw::Poisson { lambda } => {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return bad(format!("poisson lambda must be >= 0, got {lambda}"));
            }
            if lambda == 0.0 {
                return Ok(0.0);
            }
            let d = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(d.sample(rng))
        }
        StandardLaw::Exponential { rate } => {
            if !(rate > 0.0 && rate.is_finite()) {
                return bad(format!("exponential rate must be > 0, got {rate}"));
            }
            let d = Exp::new(rate).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(d.sample(rng))
        }
        StandardLaw::Uniform { low, high } => {
            if !(low < high && low.is_finite() && high.is_finite()) {
                return bad(format!("uniform requires low < high, got [{low}, {high}]"));
            }
            let d = Uniform::new(low, high).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(d.sample(rng))
        }
        StandardLaw::ChiSquare { dof } => {
            if !(dof > 0.0 && dof.is_finite()) {
                return bad(format!("chi_square dof must be > 0, got {dof}"));
            }
            let d = ChiSquared::new(dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(d.sample(rng))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(s: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| s.normal()).collect()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn sibling_streams_are_uncorrelated() {
        let root = RngStream::new(2024);
        let a = draws(&mut derive_stream(&root, 0), 1000);
        let b = draws(&mut derive_stream(&root, 1), 1000);
        assert!(correlation(&a, &b).abs() < 0.1);
    }

    #[test]
    fn same_label_reproduces() {
        let root = RngStream::new(99);
        let mut a = root.derive(7);
        let mut b = root.derive(7);
        for _ in 0..256 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derivation_order_matters() {
        let root = RngStream::new(5);
        let mut a = root.derive(1).derive(2);
        let mut b = root.derive(2).derive(1);
        let va: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn derive_ignores_parent_position() {
        let mut root = RngStream::new(3);
        let before = root.derive(11);
        for _ in 0..100 {
            root.next_u64();
        }
        let mut after = root.derive(11);
        let mut before = before;
        assert_eq!(before.next_u64(), after.next_u64());
        assert_eq!(after.path(), &[11]);
    }

    #[test]
    fn poisson_zero_is_degenerate() {
        let mut s = RngStream::new(1);
        for _ in 0..100 {
            assert_eq!(sample_standard(StandardLaw::Poisson { lambda: 0.0 }, &mut s).unwrap(), 0.0);
        }
    }

    #[test]
    fn normal_mean_within_clt_bound() {
        let mut s = RngStream::new(17);
        let n = 1_000_000;
        let mean = (0..n)
            .map(|_| sample_standard(StandardLaw::Normal, &mut s).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 4e-3, "mean {mean}");
    }

    #[test]
    fn student_t_variance() {
        let mut s = RngStream::new(18);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_standard(StandardLaw::StudentT { dof: 5.0 }, &mut s).unwrap())
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((v / (5.0 / 3.0) - 1.0).abs() < 0.05, "variance {v}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut s = RngStream::new(0);
        for law in [
            StandardLaw::StudentT { dof: 0.0 },
            StandardLaw::Poisson { lambda: -1.0 },
            StandardLaw::Exponential { rate: 0.0 },
            StandardLaw::Uniform { low: 1.0, high: 1.0 },
            StandardLaw::ChiSquare { dof: -2.0 },
        ] {
            assert!(matches!(
                sample_standard(law, &mut s),
                Err(Error::InvalidParameter(_))
            ));
        }
    }

    #[test]
    fn other_laws_have_expected_means() {
        let mut s = RngStream::new(23);
        let n = 200_000;
        let mean = |law, s: &mut RngStream| {
            (0..n).map(|_| sample_standard(law, s).unwrap()).sum::<f64>() / n as f64
        };
        assert!((mean(StandardLaw::Poisson { lambda: 3.0 }, &mut s) - 3.0).abs() < 0.02);
        assert!((mean(StandardLaw::Exponential { rate: 2.0 }, &mut s) - 0.5).abs() < 0.01);
        assert!((mean(StandardLaw::Uniform { low: -1.0, high: 3.0 }, &mut s) - 1.0).abs() < 0.02);
        assert!((mean(StandardLaw::ChiSquare { dof: 4.0 }, &mut s) - 4.0).abs() < 0.05);
    }
}
