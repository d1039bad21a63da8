use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features plus class labels (or real targets for regression).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub targets: Targets,
    /// Number of classes; 1 for regression.
    pub n_classes: usize,
}

impl Dataset {
    pub fn classification(x: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        check_len("dataset labels", x.rows(), labels.len())?;
        if n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            x,
            targets: Targets::Classes(labels),
            n_classes,
        })
    }

    pub fn regression(x: Matrix, y: Vec<f64>) -> Result<Self> {
        check_len("dataset targets", x.rows(), y.len())?;
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self {
            x,
            targets: Targets::Real(y),
            n_classes: 1,
        })
    }

    /// A dataset with no rows; the log-likelihood of it is zero.
    pub fn empty(n_features: usize, n_classes: usize) -> Self {
        Self {
            x: Matrix::zeros(0, n_features),
            targets: Targets::Classes(Vec::new()),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(v) => Some(v),
            Targets::Real(_) => None,
        }
    }

    pub fn real_targets(&self) -> Option<&[f64]> {
        match &self.targets {
            Targets::Real(v) => Some(v),
            Targets::Classes(_) => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let p = self.n_features();
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        let x = Matrix::from_vec(idx.len(), p, data).expect("consistent width");
        let targets = match &self.targets {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            x,
            targets,
            n_classes: self.n_classes,
        }
    }

    /// Random split; the first part holds `round(frac·N)` rows.
    pub fn split<R: Rng + ?Sized>(&self, frac: f64, rng: &mut R) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let k = ((self.len() as f64) * frac).round() as usize;
        let (a, b) = idx.split_at(k.min(self.len()));
        (self.subset(a), self.subset(b))
    }
}
