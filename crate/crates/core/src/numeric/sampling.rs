use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::sum::pairwise_sum_by;

/// Where a set of parameter samples came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Laplace,
    Refined,
    Hmc,
    Vb,
    Manual,
}

impl Provenance {
    pub fn code(self) -> u16 {
        match self {
            Provenance::Laplace => 0,
            Provenance::Refined => 1,
            Provenance::Hmc => 2,
            Provenance::Vb => 3,
            Provenance::Manual => 4,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            0 => Provenance::Laplace,
            1 => Provenance::Refined,
            2 => Provenance::Hmc,
            3 => Provenance::Vb,
            4 => Provenance::Manual,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Laplace => "laplace",
            Provenance::Refined => "refined",
            Provenance::Hmc => "hmc",
            Provenance::Vb => "vb",
            Provenance::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Provenance::Laplace,
            Provenance::Refined,
            Provenance::Hmc,
            Provenance::Vb,
            Provenance::Manual,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

/// `S × d` parameter samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub samples: Matrix,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(samples: Matrix, provenance: Provenance) -> Self {
        Self {
            samples,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.samples.row(s)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter_rows()
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| pairwise_sum_by(self.iter(), |r| r[j]) / self.len() as f64)
            .collect()
    }

    pub fn covariance(&self) -> Matrix {
        let d = self.dim();
        let n = self.len();
        let mu = self.mean();
        let mut cov = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                let c = pairwise_sum_by(self.iter(), |r| (r[i] - mu[i]) * (r[j] - mu[j]))
                    / (n.max(2) - 1) as f64;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        cov
    }

    /// Keeps every `k`-th sample.
    pub fn thin(&self, k: usize) -> SampleSet {
        let rows: Vec<Vec<f64>> = self.iter().step_by(k.max(1)).map(<[f64]>::to_vec).collect();
        let samples = if rows.is_empty() {
            Matrix::zeros(0, self.dim())
        } else {
            Matrix::from_rows(&rows).expect("rows share width")
        };
        SampleSet::new(samples, self.provenance)
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `n` rows `mean + L·z` with `z ~ N(0, I)`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mean: &[f64],
    chol_factor: &Matrix,
    n: usize,
    rng: &mut R,
    provenance: Provenance,
) -> Result<SampleSet> {
    let d = mean.len();
    check_len("sample_gaussian factor rows", d, chol_factor.rows())?;
    check_len("sample_gaussian factor cols", d, chol_factor.cols())?;
    let mut samples = Matrix::zeros(n, d);
    for s in 0..n {
        let z = standard_normal_vec(rng, d);
        let lz = chol_factor.lower_matvec(&z);
        for ((out, m), v) in samples.row_mut(s).iter_mut().zip(mean).zip(lz) {
            *out = m + v;
        }
    }
    Ok(SampleSet::new(samples, provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::RngStream;

    #[test]
    fn standard_normal_mean_within_clt_bound() {
        let mut rng = RngStream::new(1).generator();
        let n = 100_000;
        let s = sample_gaussian(&[0.0; 3], &Matrix::identity(3), n, &mut rng, Provenance::Manual)
            .unwrap();
        for m in s.mean() {
            assert!(m.abs() < 0.02, "mean {m}");
        }
    }

    #[test]
    fn empty_request() {
        let mut rng = RngStream::new(1).generator();
        let s = sample_gaussian(&[0.0; 2], &Matrix::identity(2), 0, &mut rng, Provenance::Manual)
            .unwrap();
        assert!(s.is_empty());
        assert_eq!(s.dim(), 2);
    }

    #[test]
    fn zero_variance_is_constant() {
        let mut rng = RngStream::new(1).generator();
        let s = sample_gaussian(&[5.0], &Matrix::zeros(1, 1), 50, &mut rng, Provenance::Manual)
            .unwrap();
        assert!(s.iter().all(|r| r[0] == 5.0));
    }

    #[test]
    fn reproducible_bitwise() {
        let l = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]).unwrap();
        let a = sample_gaussian(&[1.0, 2.0], &l, 100, &mut RngStream::new(9).generator(), Provenance::Laplace)
            .unwrap();
        let b = sample_gaussian(&[1.0, 2.0], &l, 100, &mut RngStream::new(9).generator(), Provenance::Laplace)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = RngStream::new(1).generator();
        assert!(sample_gaussian(&[0.0; 3], &Matrix::identity(2), 5, &mut rng, Provenance::Manual)
            .is_err());
    }

    #[test]
    fn covariance_approaches_llt() {
        let l = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.8, 0.6]]).unwrap();
        let mut rng = RngStream::new(3).generator();
        let s = sample_gaussian(&[0.0, 0.0], &l, 200_000, &mut rng, Provenance::Manual).unwrap();
        let cov = s.covariance();
        assert!(cov.max_abs_diff(&l.lower_times_transpose()) < 0.02);
    }
}
