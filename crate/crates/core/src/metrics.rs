//! Calibration and accuracy scores for class predictives, a kernel two-sample
//! distance between sample sets, FPR at 95% TPR, and temperature scaling.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::sum::{log_sum_exp, pairwise_sum};
use crate::numeric::{Matrix, SampleSet};

/// Probability floor inside the log of the NLL.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    check_len("labels", probs.rows(), labels.len())?;
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("no examples".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", probs.cols())));
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// `−(1/N) Σ log max(p[i, yᵢ], 1e-12)`.
pub fn nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let terms: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(PROB_FLOOR).ln())
        .collect();
    Ok(pairwise_sum(&terms) / labels.len() as f64)
}

/// Equal-width binning of max-probability confidence; `Σ_b (n_b/N)·|acc_b − conf_b|`.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    check_labels(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("ece needs at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (row, &y) in probs.iter_rows().zip(labels) {
        let k = argmax(row);
        let c = row[k];
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[b] += c;
        hits[b] += f64::from(u8::from(k == y));
        count[b] += 1;
    }
    let n = labels.len() as f64;
    let gaps: Vec<f64> = (0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf_sum[b]).abs() / n)
        .collect();
    Ok(pairwise_sum(&gaps))
}

/// Mean over examples of `Σ_k (p_k − 1[k = y])²`.
pub fn brier(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let terms: Vec<f64> = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(k, p)| {
                    let t = if k == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(pairwise_sum(&terms) / labels.len() as f64)
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = probs.iter_rows().zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased estimate, possibly negative.
    pub raw: f64,
    pub bandwidth: f64,
}

impl MmdEstimate {
    /// The estimate as reported: negative values clamp to zero.
    pub fn value(&self) -> f64 {
        self.raw.max(0.0)
    }
}

fn column_moments(set: &SampleSet) -> (Vec<f64>, Vec<f64>) {
    let d = set.dim();
    let sums: Vec<f64> = (0..d).map(|j| pairwise_sum(&set.samples.column(j))).collect();
    let sq: Vec<f64> = (0..d)
        .map(|j| pairwise_sum(&set.samples.column(j).iter().map(|v| v * v).collect::<Vec<_>>()))
        .collect();
    (sums, sq)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Order on sample sets used to fix the orientation of the cross term.
fn set_order(a: &SampleSet, b: &SampleSet) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.samples
            .data()
            .iter()
            .zip(b.samples.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    })
}

/// Unbiased quadratic-time MMD² with an RBF kernel. Samples are standardized
/// by the pooled per-dimension mean and std, and the bandwidth is the median
/// pairwise distance of the pooled standardized samples.
pub fn mmd(x: &SampleSet, y: &SampleSet) -> Result<MmdEstimate> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument("mmd needs at least 2 samples per set".into()));
    }
    check_len("mmd dimension", x.dim(), y.dim())?;
    let d = x.dim();
    let n_total = (x.len() + y.len()) as f64;
    // pooled moments from commutative pairwise combinations keep mmd(x, y) == mmd(y, x)
    let (sx, qx) = column_moments(x);
    let (sy, qy) = column_moments(y);
    let mu: Vec<f64> = (0..d).map(|j| (sx[j] + sy[j]) / n_total).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let var = ((qx[j] + qy[j]) - n_total * mu[j] * mu[j]) / (n_total - 1.0);
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let standardize = |s: &SampleSet| -> Vec<Vec<f64>> {
        s.iter().map(|r| r.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect()).collect()
    };
    let (a, b) = if set_order(x, y).is_le() { (standardize(x), standardize(y)) } else { (standardize(y), standardize(x)) };

    let mut dists: Vec<f64> = Vec::with_capacity((a.len() + b.len()) * (a.len() + b.len() - 1) / 2);
    let pooled: Vec<&Vec<f64>> = a.iter().chain(&b).collect();
    for i in 0..pooled.len() {
        for j in 0..i {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let mid = dists.len() / 2;
    let (_, median_sq, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let mut bandwidth = median_sq.sqrt();
    if !(bandwidth > 0.0) {
        bandwidth = 1.0;
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |p: &[f64], q: &[f64]| (-gamma * sq_dist(p, q)).exp();

    let within = |s: &[Vec<f64>]| -> f64 {
        let mut terms = Vec::with_capacity(s.len() * (s.len() - 1) / 2);
        for i in 0..s.len() {
            for j in 0..i {
                terms.push(k(&s[i], &s[j]));
            }
        }
        2.0 * pairwise_sum(&terms) / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = Vec::with_capacity(a.len() * b.len());
    for p in &a {
        for q in &b {
            cross.push(k(p, q));
        }
    }
    let kab = pairwise_sum(&cross) / (a.len() * b.len()) as f64;
    let raw = (within(&a) + within(&b)) - 2.0 * kab;
    Ok(MmdEstimate { raw, bandwidth })
}

/// Linear-interpolation percentile of `xs` at `q ∈ [0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Fraction of out-of-distribution scores at or above the 5th percentile of
/// in-distribution scores (higher score means more in-distribution).
pub fn fpr95(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::InvalidArgument("fpr95 needs non-empty score sets".into()));
    }
    let threshold = percentile(scores_in, 0.05);
    Ok(scores_out.iter().filter(|s| **s >= threshold).count() as f64 / scores_out.len() as f64)
}

/// NLL of `softmax(f / T)`.
pub fn tempered_nll(logits: &Matrix, labels: &[usize], t: f64) -> Result<f64> {
    check_labels(logits, labels)?;
    let terms: Vec<f64> = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            let scaled: Vec<f64> = row.iter().map(|f| f / t).collect();
            log_sum_exp(&scaled) - scaled[y]
        })
        .collect();
    Ok(pairwise_sum(&terms) / labels.len() as f64)
}

/// Golden-section search for the NLL-minimizing temperature on `[0.05, 20]`.
pub fn temperature_scale(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.05, 20.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = tempered_nll(logits, labels, c)?;
    let mut fd = tempered_nll(logits, labels, d)?;
    while b - a > 1e-4 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = tempered_nll(logits, labels, c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = tempered_nll(logits, labels, d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// One row of a method comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s: Option<usize>,
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mmd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fpr95: Option<f64>,
}

impl MetricsReport {
    pub fn evaluate(method: &str, seed: u64, s: Option<usize>, probs: &Matrix, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            seed,
            s,
            nll: nll(probs, labels)?,
            ece: ece(probs, labels, DEFAULT_ECE_BINS)?,
            brier: brier(probs, labels)?,
            accuracy: accuracy(probs, labels)?,
            mmd: None,
            fpr95: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::sum::softmax;
    use crate::numeric::{standard_normal_vec, Provenance, RngStream};
    use rand::Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn nll_cases() {
        let onehot = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(nll(&onehot, &[0, 1]).unwrap(), 0.0);
        assert!((nll(&onehot, &[1, 1]).unwrap() - 0.5 * -(1e-12f64).ln()).abs() < 1e-12);
        let uniform = Matrix::from_vec(4, 10, vec![0.1; 40]).unwrap();
        assert!((nll(&uniform, &[0, 3, 9, 5]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let p = m(&[vec![0.7, 0.2, 0.1], vec![0.15, 0.8, 0.05], vec![0.25, 0.7, 0.05]]);
        let v = nll(&p, &[0, 0, 2]).unwrap();
        assert!((v - 1.749_842_400_792_868_2).abs() < 1e-15);
        assert!(nll(&p, &[0, 3, 0]).is_err());
        assert!(nll(&p, &[0, 1]).is_err());
    }

    #[test]
    fn ece_degenerate_cases() {
        let right = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(ece(&right, &[0, 1], 15).unwrap(), 0.0);
        assert!((ece(&right, &[0, 0], 15).unwrap() - 0.5).abs() < 1e-15);
        let p = m(&[vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]]);
        let labels = [0, 0, 0];
        let acc = accuracy(&p, &labels).unwrap();
        let conf = (0.7 + 0.6 + 0.9) / 3.0;
        assert!((ece(&p, &labels, 1).unwrap() - (acc - conf).abs()).abs() < 1e-15);
        assert!(ece(&p, &labels, 0).is_err());
    }

    #[test]
    fn ece_of_calibrated_stream_is_small() {
        let mut g = RngStream::new(6).generator();
        let n = 100_000;
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c: f64 = g.random_range(0.5..1.0);
            rows.push(vec![c, 1.0 - c]);
            labels.push(usize::from(g.random::<f64>() >= c));
        }
        assert!(ece(&m(&rows), &labels, 15).unwrap() < 0.01);
    }

    #[test]
    fn brier_and_accuracy() {
        let right = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(brier(&right, &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&right, &[0, 1]).unwrap(), 1.0);
        let half = m(&[vec![0.5, 0.5]]);
        assert_eq!(brier(&half, &[1]).unwrap(), 0.5);
        // tie resolves to class 0
        assert_eq!(accuracy(&half, &[0]).unwrap(), 1.0);
        let mut g = RngStream::new(2).generator();
        let rows: Vec<Vec<f64>> = (0..50).map(|_| softmax(&standard_normal_vec(&mut g, 4))).collect();
        let labels: Vec<usize> = (0..50).map(|_| g.random_range(0..4)).collect();
        let mut acc = 0.0;
        let mut hits = 0;
        for (r, &y) in rows.iter().zip(&labels) {
            for (k, p) in r.iter().enumerate() {
                acc += if k == y { (1.0 - p).powi(2) } else { p * p };
            }
            let best = (0..4).fold(0, |b, k| if r[k] > r[b] { k } else { b });
            hits += usize::from(best == y);
        }
        let p = m(&rows);
        assert!((brier(&p, &labels).unwrap() - acc / 50.0).abs() < 1e-12);
        assert_eq!(accuracy(&p, &labels).unwrap(), hits as f64 / 50.0);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut g = RngStream::new(8).generator();
        let rows: Vec<Vec<f64>> = (0..40).map(|_| softmax(&standard_normal_vec(&mut g, 3))).collect();
        let labels: Vec<usize> = (0..40).map(|_| g.random_range(0..3)).collect();
        let perm: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        let p1 = m(&rows);
        let p2 = m(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>());
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        assert!((nll(&p1, &labels).unwrap() - nll(&p2, &l2).unwrap()).abs() < 1e-14);
        assert!((ece(&p1, &labels, 15).unwrap() - ece(&p2, &l2, 15).unwrap()).abs() < 1e-14);
        assert!((brier(&p1, &labels).unwrap() - brier(&p2, &l2).unwrap()).abs() < 1e-14);
    }

    fn gauss_set(seed: u64, n: usize, d: usize, shift: f64) -> SampleSet {
        let mut g = RngStream::new(seed).generator();
        let data: Vec<f64> = standard_normal_vec(&mut g, n * d).into_iter().map(|v| v + shift).collect();
        SampleSet::new(Matrix::from_vec(n, d, data).unwrap(), Provenance::Manual)
    }

    #[test]
    fn mmd_self_distance() {
        let x = gauss_set(1, 1000, 2, 0.0);
        let e = mmd(&x, &x).unwrap();
        assert!(e.raw.abs() < 2.0 / 1000f64.sqrt());
        assert_eq!(e.value(), e.raw.max(0.0));
    }

    #[test]
    fn mmd_separates_shifted_gaussians() {
        let base: Vec<f64> = (0..5)
            .map(|s| mmd(&gauss_set(10 + s, 500, 2, 0.0), &gauss_set(20 + s, 500, 2, 0.0)).unwrap().raw.abs())
            .collect();
        let baseline = base.iter().copied().fold(0.0, f64::max);
        let far = mmd(&gauss_set(3, 500, 2, 0.0), &gauss_set(4, 500, 2, 5.0)).unwrap().raw;
        assert!(far > 10.0 * baseline, "{far} vs {baseline}");
    }

    #[test]
    fn mmd_same_distribution_is_unbiased() {
        let vals: Vec<f64> = (0..100)
            .map(|s| mmd(&gauss_set(100 + s, 60, 2, 0.0), &gauss_set(300 + s, 60, 2, 0.0)).unwrap().raw)
            .collect();
        let mean = vals.iter().sum::<f64>() / 100.0;
        let se = (crate::numeric::sum::variance(&vals) / 100.0).sqrt();
        assert!(mean.abs() < 3.0 * se, "{mean} vs {se}");
    }

    #[test]
    fn mmd_is_exactly_symmetric() {
        let x = gauss_set(1, 70, 3, 0.0);
        let y = gauss_set(2, 90, 3, 0.4);
        assert_eq!(mmd(&x, &y).unwrap(), mmd(&y, &x).unwrap());
        assert!(mmd(&gauss_set(1, 1, 3, 0.0), &y).is_err());
        assert!(mmd(&x, &gauss_set(2, 10, 2, 0.0)).is_err());
    }

    #[test]
    fn fpr95_cases() {
        let a: Vec<f64> = (0..100).map(|i| 0.6 + 0.004 * i as f64).collect();
        let b: Vec<f64> = (0..100).map(|i| 0.1 + 0.004 * i as f64).collect();
        assert_eq!(fpr95(&a, &b).unwrap(), 0.0);
        let above: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert_eq!(fpr95(&a, &above).unwrap(), 1.0);
        let mut g = RngStream::new(5).generator();
        let s_in: Vec<f64> = (0..20_000).map(|_| g.random::<f64>()).collect();
        let s_out: Vec<f64> = (0..20_000).map(|_| g.random::<f64>()).collect();
        assert!((fpr95(&s_in, &s_out).unwrap() - 0.95).abs() < 0.01);
        let t = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 2.0).collect::<Vec<f64>>();
        assert_eq!(fpr95(&s_in, &s_out).unwrap(), fpr95(&t(&s_in), &t(&s_out)).unwrap());
        assert!(fpr95(&[], &b).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 0.5), 2.5);
        assert_eq!(percentile(&[5.0], 0.05), 5.0);
    }

    fn calibrated_logits(seed: u64, n: usize) -> (Matrix, Vec<usize>) {
        let mut g = RngStream::new(seed).generator();
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let f: Vec<f64> = standard_normal_vec(&mut g, 3).iter().map(|v| 2.0 * v).collect();
            let p = softmax(&f);
            let u: f64 = g.random();
            let y = if u < p[0] { 0 } else if u < p[0] + p[1] { 1 } else { 2 };
            rows.push(f);
            labels.push(y);
        }
        (m(&rows), labels)
    }

    #[test]
    fn temperature_recovers_known_scaling() {
        let (logits, labels) = calibrated_logits(3, 20_000);
        let t = temperature_scale(&logits, &labels).unwrap();
        assert!((t - 1.0).abs() < 0.05, "{t}");
        let mut doubled = logits.clone();
        doubled.scale(2.0);
        let t2 = temperature_scale(&doubled, &labels).unwrap();
        assert!((t2 - 2.0).abs() < 0.1, "{t2}");
        let rev: Vec<usize> = (0..labels.len()).rev().collect();
        let lr = m(&rev.iter().map(|&i| logits.row(i).to_vec()).collect::<Vec<_>>());
        let yr: Vec<usize> = rev.iter().map(|&i| labels[i]).collect();
        assert!((temperature_scale(&lr, &yr).unwrap() - t).abs() < 1e-4);
    }

    #[test]
    fn report_serialization_skips_missing_fields() {
        let p = m(&[vec![0.8, 0.2], vec![0.3, 0.7]]);
        let r = MetricsReport::evaluate("map", 1, None, &p, &[0, 1]).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("mmd") && !json.contains("fpr95"));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
