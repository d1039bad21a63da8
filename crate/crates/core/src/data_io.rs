//! Synthetic dataset generators, feature-CSV ingestion, and the on-disk
//! formats for posteriors (JSON) and sample sets (binary or CSV).
//!
//! Binary sample files start with a 32-byte little-endian header:
//!
//! ```text
//! magic "LAFS" | version u16 | provenance u16 | d u64 | S u64 | seed u64
//! ```
//!
//! followed by `S·d` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flows::{RadialFlowStack, RadialLayer, RefinedPosterior};
use crate::laplace::GaussianPosterior;
use crate::models::Dataset;
use crate::numeric::{standard_normal_vec, Matrix, Provenance, SampleSet};

pub const FORMAT_VERSION: u32 = 1;
const SAMPLES_MAGIC: &[u8; 4] = b"LAFS";
const HEADER_LEN: usize = 32;

/// 50 points in two classes of 25, drawn from `N(±[1.5, 1.5], 0.8²·I)`.
pub fn gen_toy_logreg<R: Rng + ?Sized>(rng: &mut R) -> Dataset {
    let noise = Normal::new(0.0, 0.8).expect("valid std");
    let mut rows = Vec::with_capacity(50);
    let mut labels = Vec::with_capacity(50);
    for class in 0..2 {
        let sign = if class == 0 { -1.0 } else { 1.0 };
        for _ in 0..25 {
            rows.push(vec![sign * 1.5 + noise.sample(rng), sign * 1.5 + noise.sample(rng)]);
            labels.push(class);
        }
    }
    Dataset::classification(Matrix::from_rows(&rows).expect("fixed width"), labels, 2).expect("valid toy data")
}

/// `x ~ U([−4, −1) ∪ [1, 4))`, `y = sin(2x)·exp(−0.1x²) + 0.3·ε`.
pub fn gen_toy_regression<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Dataset {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..6.0);
        let xi = if u < 3.0 { u - 4.0 } else { u - 2.0 };
        let eps: f64 = standard_normal_vec(rng, 1)[0];
        x.push(xi);
        y.push(toy_regression_mean(xi) + 0.3 * eps);
    }
    Dataset::regression(Matrix::from_vec(n, 1, x).expect("one column"), y).expect("finite toy data")
}

/// Noise-free regression function of [`gen_toy_regression`].
pub fn toy_regression_mean(x: f64) -> f64 {
    (2.0 * x).sin() * (-0.1 * x * x).exp()
}

/// `C` unit-covariance Gaussian modes in `P` dimensions with `N` points and
/// round-robin labels. Modes sit at `separation·e_k` when `C ≤ P`, otherwise
/// at random directions scaled to `separation`.
pub fn gen_mixture_classes<R: Rng + ?Sized>(
    n_classes: usize,
    n_features: usize,
    n: usize,
    separation: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n_classes < 2 || n_features == 0 {
        return Err(Error::InvalidArgument(format!(
            "mixture needs >= 2 classes and >= 1 feature (got C={n_classes}, P={n_features})"
        )));
    }
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|k| {
            if n_classes <= n_features {
                let mut m = vec![0.0; n_features];
                m[k] = separation;
                m
            } else {
                let v = standard_normal_vec(rng, n_features);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter().map(|a| separation * a / norm).collect()
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n * n_features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % n_classes;
        let z = standard_normal_vec(rng, n_features);
        data.extend(z.iter().zip(&means[k]).map(|(a, m)| a + m));
        labels.push(k);
    }
    Dataset::classification(Matrix::from_vec(n, n_features, data)?, labels, n_classes)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Reads a `f0,…,f{P−1},label` CSV. Labels must be below `n_classes` when
/// given; otherwise the class count is one more than the largest label.
pub fn load_features_csv(path: &Path, n_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let p = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..p).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    if header.len() < 2 || header.iter().zip(&expected).any(|(h, e)| h.trim() != e) {
        return Err(parse_err(1, format!("header must be f0,...,f{},label", p.saturating_sub(1))));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |pos| pos.line() as usize);
        if record.len() != p + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", p + 1, record.len())));
        }
        for (j, field) in record.iter().take(p).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: cannot parse {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j}: non-finite value {field:?}")));
            }
            data.push(v);
        }
        let raw = record[p].trim();
        let y: usize = raw.parse().map_err(|_| parse_err(line, format!("label: cannot parse {raw:?}")))?;
        if let Some(c) = n_classes {
            if y >= c {
                return Err(parse_err(line, format!("label {y} out of range for {c} classes")));
            }
        }
        labels.push(y);
    }
    let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::classification(Matrix::from_vec(labels.len(), p, data)?, labels, c)
}

/// Writes a classification dataset in the format read by [`load_features_csv`].
pub fn save_features_csv(path: &Path, data: &Dataset) -> Result<()> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("feature CSV holds classification data only".into()))?;
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..data.n_features()).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    w.write_record(&header)?;
    for (row, y) in data.x.iter_rows().zip(labels) {
        let rec: Vec<String> = row.iter().map(f64::to_string).chain([y.to_string()]).collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    Gaussian,
    Refined,
}

/// JSON document for a Gaussian or flow-refined posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorFile {
    pub format_version: u32,
    pub kind: PosteriorKind,
    pub d: usize,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub covariance: Vec<f64>,
    pub flow: Vec<RadialLayer>,
    pub provenance: Provenance,
    pub lambda: f64,
}

impl PosteriorFile {
    pub fn from_gaussian(post: &GaussianPosterior) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: PosteriorKind::Gaussian,
            d: post.dim(),
            mean: post.mean.clone(),
            covariance: post.cov.data().to_vec(),
            flow: Vec::new(),
            provenance: post.provenance,
            lambda: post.prior_precision,
        }
    }

    pub fn from_refined(post: &RefinedPosterior) -> Self {
        Self {
            kind: PosteriorKind::Refined,
            flow: post.flow.layers.clone(),
            provenance: Provenance::Refined,
            ..Self::from_gaussian(&post.base)
        }
    }

    fn check(&self) -> Result<()> {
        check_len("posterior mean", self.d, self.mean.len())?;
        check_len("posterior covariance", self.d * self.d, self.covariance.len())?;
        if self.kind == PosteriorKind::Gaussian && !self.flow.is_empty() {
            return Err(Error::InvalidArgument("gaussian posterior file carries flow layers".into()));
        }
        Ok(())
    }

    /// The Gaussian part (the base, for a refined posterior).
    pub fn gaussian(&self) -> Result<GaussianPosterior> {
        self.check()?;
        let base_provenance = if self.kind == PosteriorKind::Refined { Provenance::Laplace } else { self.provenance };
        GaussianPosterior::from_covariance(
            self.mean.clone(),
            Matrix::from_vec(self.d, self.d, self.covariance.clone())?,
            self.lambda,
            base_provenance,
        )
    }

    /// The full posterior as a refined one; a Gaussian file gives an empty flow.
    pub fn refined(&self) -> Result<RefinedPosterior> {
        let flow = RadialFlowStack::new(self.d, self.flow.clone())?;
        RefinedPosterior::new(self.gaussian()?, flow)
    }
}

fn check_version(found: u64) -> Result<()> {
    if found > u64::from(FORMAT_VERSION) {
        return Err(Error::UnsupportedVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn save_posterior(path: &Path, file: &PosteriorFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_posterior(path: &Path) -> Result<PosteriorFile> {
    let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| parse_err(1, "missing format_version"))?;
    check_version(version)?;
    let file: PosteriorFile = serde_json::from_value(value)?;
    file.check()?;
    Ok(file)
}

/// A sample set together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplesFile {
    pub samples: SampleSet,
    pub seed: u64,
}

pub fn save_samples_binary(path: &Path, file: &SamplesFile) -> Result<()> {
    let s = &file.samples;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SAMPLES_MAGIC)?;
    w.write_all(&(FORMAT_VERSION as u16).to_le_bytes())?;
    w.write_all(&s.provenance.code().to_le_bytes())?;
    w.write_all(&(s.dim() as u64).to_le_bytes())?;
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(&file.seed.to_le_bytes())?;
    for v in s.samples.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn read_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    u64::from_le_bytes(a)
}

fn decode_binary(bytes: &[u8]) -> Result<SamplesFile> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != SAMPLES_MAGIC {
        return Err(parse_err(0, "not a binary samples file"));
    }
    check_version(u64::from(read_u16(&bytes[4..])))?;
    let provenance = Provenance::from_code(read_u16(&bytes[6..]))
        .ok_or_else(|| parse_err(0, "unknown provenance code"))?;
    let d = read_u64(&bytes[8..]) as usize;
    let n = read_u64(&bytes[16..]) as usize;
    let seed = read_u64(&bytes[24..]);
    let body = &bytes[HEADER_LEN..];
    let expected = n.checked_mul(d).and_then(|k| k.checked_mul(8));
    if expected != Some(body.len()) {
        return Err(parse_err(0, format!("header declares {n} x {d} samples but body holds {} bytes", body.len())));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(SamplesFile { samples: SampleSet::new(Matrix::from_vec(n, d, data)?, provenance), seed })
}

/// CSV layout: a `# format_version=…,d=…,s=…,provenance=…,seed=…` line, then
/// one comma-separated row per sample.
pub fn save_samples_csv(path: &Path, file: &SamplesFile) -> Result<()> {
    let s = &file.samples;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "# format_version={},d={},s={},provenance={},seed={}",
        FORMAT_VERSION,
        s.dim(),
        s.len(),
        s.provenance.name(),
        file.seed
    )?;
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in s.iter() {
        cw.write_record(row.iter().map(f64::to_string))?;
    }
    cw.flush()?;
    Ok(())
}

fn decode_csv(text: &str) -> Result<SamplesFile> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let header = first.strip_prefix('#').ok_or_else(|| parse_err(1, "missing '#' header line"))?;
    let mut fields = std::collections::HashMap::new();
    for kv in header.trim().split(',') {
        let (k, v) = kv.split_once('=').ok_or_else(|| parse_err(1, format!("bad header field {kv:?}")))?;
        fields.insert(k.trim(), v.trim());
    }
    let num = |k: &str| -> Result<u64> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(1, format!("header field {k} missing or invalid")))
    };
    check_version(num("format_version")?)?;
    let d = num("d")? as usize;
    let n = num("s")? as usize;
    let seed = num("seed")?;
    let provenance = fields
        .get("provenance")
        .and_then(|p| Provenance::parse(p))
        .ok_or_else(|| parse_err(1, "header field provenance missing or invalid"))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(rest.as_bytes());
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize) + 1;
        if record.len() != d {
            return Err(parse_err(line, format!("expected {d} values, found {}", record.len())));
        }
        for field in record.iter() {
            data.push(field.trim().parse::<f64>().map_err(|_| parse_err(line, format!("cannot parse {field:?}")))?);
        }
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(0, format!("header declares {n} rows, found {rows}")));
    }
    Ok(SamplesFile { samples: SampleSet::new(Matrix::from_vec(n, d, data)?, provenance), seed })
}

/// Loads either format, recognising the binary one by its magic bytes.
pub fn load_samples(path: &Path) -> Result<SamplesFile> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(SAMPLES_MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| parse_err(0, "samples file is neither binary nor UTF-8"))?;
        decode_csv(text)
    }
}
