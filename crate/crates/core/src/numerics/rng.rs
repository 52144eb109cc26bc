use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8, a counter-based generator: [`SeededRng::split`]
/// selects an independent stream for the same seed, so stream `r` can be
/// regenerated without replaying streams `0..r`.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for `index`, a pure function of
    /// `(seed, index)`.
    pub fn split(&self, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// One draw on `[lo, hi)`.
    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> Result<f64> {
        check_range(lo, hi)?;
        Ok(Uniform::new(lo, hi).sample(&mut self.inner))
    }

    /// Matrix of i.i.d. draws on `[lo, hi)`, filled in row-major order.
    pub fn uniform(&mut self, lo: f64, hi: f64, rows: usize, cols: usize) -> Result<DenseMatrix> {
        check_range(lo, hi)?;
        let dist = Uniform::new(lo, hi);
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.inner)).collect();
        DenseMatrix::from_vec(rows, cols, data)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = Uniform::new(f64::MIN_POSITIVE, 1.0).sample(&mut self.inner);
        let u2: f64 = Uniform::new(0.0, 1.0).sample(&mut self.inner);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!(
            "uniform range requires finite lo < hi, got [{lo}, {hi})"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_mean_near_half() {
        let mut rng = SeededRng::new(11);
        let m = rng.uniform(0.0, 1.0, 1000, 1).unwrap();
        let mean = m.as_slice().iter().sum::<f64>() / 1000.0;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn same_seed_same_bits() {
        let a = SeededRng::new(42).uniform(-1.0, 1.0, 5, 5).unwrap();
        let b = SeededRng::new(42).uniform(-1.0, 1.0, 5, 5).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_and_range() {
        let m = SeededRng::new(3).uniform(0.0, 1.0, 2, 3).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert!(m.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn rejects_empty_range() {
        assert!(SeededRng::new(0).uniform(1.0, 1.0, 1, 1).is_err());
        assert!(SeededRng::new(0).uniform(2.0, 1.0, 1, 1).is_err());
    }

    #[test]
    fn split_is_reproducible_in_isolation() {
        let root = SeededRng::new(9);
        let mut advanced = root.clone();
        let _ = advanced.uniform(0.0, 1.0, 10, 10).unwrap();
        let a = root.split(3).uniform(0.0, 1.0, 4, 1).unwrap();
        let b = advanced.split(3).uniform(0.0, 1.0, 4, 1).unwrap();
        assert_eq!(a, b);
        let c = root.split(4).uniform(0.0, 1.0, 4, 1).unwrap();
        assert_ne!(a, c);
    }
}
