//! Datasets: synthetic generation, covariate shift, splitting,
//! standardization and file ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::models::{DirichletParams, EnsembleOutput};
use crate::numerics::ProbabilityVector;

/// Dense row-major matrix of features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(FeatureMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

/// Per-feature affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose training variance was zero; their std is forced to 1.
    pub zero_variance: Vec<bool>,
}

impl Standardization {
    pub fn transform_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: x.cols(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            self.transform_row(out.row_mut(i));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: FeatureMatrix,
    pub labels: Vec<u8>,
    /// Per-row split tag; `None` until [`split`] has run.
    pub splits: Option<Vec<Split>>,
    pub standardization: Option<Standardization>,
}

impl LabeledDataset {
    pub fn new(features: FeatureMatrix, labels: Vec<u8>) -> Result<Self> {
        check_len(features.rows(), labels.len())?;
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("labels must be 0 or 1, found {bad}")));
        }
        Ok(LabeledDataset {
            features,
            labels,
            splits: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        match &self.splits {
            Some(tags) => (0..tags.len()).filter(|&i| tags[i] == split).collect(),
            None => Vec::new(),
        }
    }

    /// Rows of one split as a standalone dataset (no split tags).
    pub fn subset(&self, split: Split) -> LabeledDataset {
        let idx = self.indices_of(split);
        LabeledDataset {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: None,
            standardization: self.standardization.clone(),
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.indices_of(Split::Train).len(),
            self.indices_of(Split::Calibration).len(),
            self.indices_of(Split::Test).len(),
        )
    }
}

/// Two-class isotropic Gaussian mixture. Class means sit at ±`class_sep`/2
/// along a seeded random unit direction; labels are fair coin flips.
pub fn generate_synthetic(n: usize, d: usize, class_sep: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 10 || d < 2 {
        return Err(Error::invalid(format!("need n >= 10 and d >= 2, got n={n}, d={d}")));
    }
    if !class_sep.is_finite() || class_sep < 0.0 {
        return Err(Error::invalid(format!(
            "class_sep must be finite and >= 0, got {class_sep}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut direction: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().for_each(|v| *v /= norm);

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = u8::from(rng.random::<bool>());
        let sign = if label == 1 { 0.5 } else { -0.5 };
        for u in &direction {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(sign * class_sep * u + noise);
        }
        labels.push(label);
    }
    LabeledDataset::new(FeatureMatrix::new(n, d, data)?, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    AffinePacking,
    FeatureScramble,
}

/// A covariate shift applied to test rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub strength: f64,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec::none()
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec {
            kind: ShiftKind::None,
            strength: 0.0,
            seed: 0,
        }
    }

    pub fn affine(strength: f64, seed: u64) -> Self {
        ShiftSpec {
            kind: ShiftKind::AffinePacking,
            strength,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == ShiftKind::None || self.strength == 0.0
    }

    fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::invalid(format!(
                "shift strength must be finite and >= 0, got {}",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Applies a covariate shift to the test rows (all rows when the dataset
/// has no split tags). Labels are never touched.
///
/// `AffinePacking` maps x to A·x + b with A = I + strength·R, where R has
/// N(0, 1/d) entries and b has N(0, strength²) entries. `FeatureScramble`
/// cyclically rotates the values of round(min(strength, 1)·d) randomly
/// chosen features.
pub fn apply_shift(data: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut out = data.clone();
    if spec.is_identity() {
        return Ok(out);
    }
    let rows: Vec<usize> = match &data.splits {
        Some(_) => data.indices_of(Split::Test),
        None => (0..data.len()).collect(),
    };
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        ShiftKind::None => {}
        ShiftKind::AffinePacking => {
            let scale = 1.0 / (d as f64).sqrt();
            let mut a = vec![0.0; d * d];
            for r in 0..d {
                for c in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    a[r * d + c] = spec.strength * scale * z + if r == c { 1.0 } else { 0.0 };
                }
            }
            let b: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.strength * z
                })
                .collect();
            for &i in &rows {
                let x = data.features.row(i);
                let y = out.features.row_mut(i);
                for r in 0..d {
                    y[r] = b[r] + (0..d).map(|c| a[r * d + c] * x[c]).sum::<f64>();
                }
            }
        }
        ShiftKind::FeatureScramble => {
            let k = ((spec.strength.min(1.0) * d as f64).round() as usize).min(d);
            if k >= 2 {
                let mut features: Vec<usize> = (0..d).collect();
                features.shuffle(&mut rng);
                let chosen = &features[..k];
                for &i in &rows {
                    let x = data.features.row(i);
                    let y = out.features.row_mut(i);
                    for (j, &f) in chosen.iter().enumerate() {
                        y[chosen[(j + 1) % k]] = x[f];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Seeded random assignment of rows to train/calibration/test.
///
/// Counts follow the largest-remainder rule, so each is within one of
/// `fraction * n` and they always sum to n.
pub fn split(data: &LabeledDataset, fractions: (f64, f64, f64), seed: u64) -> Result<LabeledDataset> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = data.len();
    let exact: Vec<f64> = f.iter().map(|v| v * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Train; n];
    for (pos, &i) in idx.iter().enumerate() {
        tags[i] = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Calibration
        } else {
            Split::Test
        };
    }
    let mut out = data.clone();
    out.splits = Some(tags);
    Ok(out)
}

/// Fits mean/std on training rows only and applies them to every row.
pub fn standardize(data: &LabeledDataset) -> Result<LabeledDataset> {
    let train = data.indices_of(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("standardization needs a nonempty train split"));
    }
    let d = data.dim();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(data.features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in &train {
        for ((s, v), m) in var.iter_mut().zip(data.features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut zero_variance = vec![false; d];
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                zero_variance[j] = true;
                1.0
            }
        })
        .collect();
    let stats = Standardization {
        mean,
        std,
        zero_variance,
    };
    let mut out = data.clone();
    out.features = stats.transform(&data.features)?;
    out.standardization = Some(stats);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    Csv,
    Jsonl,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    features: Vec<f64>,
    label: u8,
}

/// Loads a feature file. CSV needs a header with a `label` column; JSONL
/// records look like `{"features": [..], "label": 0}`.
pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<LabeledDataset> {
    match format {
        FeatureFormat::Csv => load_csv(path.as_ref()),
        FeatureFormat::Jsonl => load_jsonl(path.as_ref()),
    }
}

fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "empty file".into(),
        });
    }
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing \"label\" column".into(),
        })?;
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(csv_error)?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                labels.push(parse_label(field, line)?);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: cannot parse {field:?} as a number", &headers[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value {field}", &headers[j]),
                });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file has no data rows".into(),
        });
    }
    LabeledDataset::new(FeatureMatrix::new(labels.len(), d, data)?, labels)
}

fn parse_label(field: &str, line: usize) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Parse {
            line,
            message: format!("label must be 0 or 1, got {other:?}"),
        }),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn load_jsonl(path: &Path) -> Result<LabeledDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.label > 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        if let Some(first) = rows.first().map(Vec::len) {
            if first != rec.features.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {first} features, found {}", rec.features.len()),
                });
            }
        }
        rows.push(rec.features);
        labels.push(rec.label);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file has no data rows".into(),
        });
    }
    LabeledDataset::new(FeatureMatrix::from_rows(&rows)?, labels)
}

/// Writes a dataset as CSV: `f0..f{d-1},label`.
pub fn write_features_csv(data: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_error)?;
    for (row, label) in data.features.iter_rows().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const SCORES_SCHEMA: &str = "scores-v1";
const EXTERNAL_SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScoreRecord {
    schema: String,
    #[serde(default)]
    member_probs: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    logits: Option<[f64; 2]>,
    #[serde(default)]
    alphas: Option<[f64; 2]>,
    #[serde(default)]
    label: Option<u8>,
}

/// Prediction source carried by an external score record.
#[derive(Debug, Clone, PartialEq)]
pub enum ExternalPrediction {
    Members(EnsembleOutput),
    Logits([f64; 2]),
}

/// One instance scored by an externally trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScores {
    pub prediction: ExternalPrediction,
    pub dirichlet: Option<DirichletParams>,
    pub label: Option<u8>,
}

impl ExternalScores {
    pub fn probabilities(&self) -> ProbabilityVector {
        match &self.prediction {
            ExternalPrediction::Members(e) => e.mean_probs,
            ExternalPrediction::Logits(z) => ProbabilityVector::from_raw(crate::numerics::softmax2(*z)),
        }
    }
}

/// Reads `scores-v1` JSONL records.
pub fn load_external_scores(path: impl AsRef<Path>) -> Result<Vec<ExternalScores>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { line: line_no, message };
        let raw: RawScoreRecord = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if raw.schema != SCORES_SCHEMA {
            return Err(fail(format!("unsupported schema {:?}", raw.schema)));
        }
        let prediction = match (raw.member_probs, raw.logits) {
            (Some(members), None) => {
                let probs = members
                    .into_iter()
                    .map(|p| ProbabilityVector::with_tolerance(p, EXTERNAL_SIMPLEX_TOLERANCE))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| fail(e.to_string()))?;
                ExternalPrediction::Members(EnsembleOutput::from_members(probs).map_err(|e| fail(e.to_string()))?)
            }
            (None, Some(z)) => {
                if !(z[0].is_finite() && z[1].is_finite()) {
                    return Err(fail("logits must be finite".into()));
                }
                ExternalPrediction::Logits(z)
            }
            (Some(_), Some(_)) => return Err(fail("give either member_probs or logits, not both".into())),
            (None, None) => return Err(fail("record needs member_probs or logits".into())),
        };
        let dirichlet = raw
            .alphas
            .map(DirichletParams::new)
            .transpose()
            .map_err(|e| fail(e.to_string()))?;
        if let Some(l) = raw.label {
            if l > 1 {
                return Err(fail(format!("label must be 0 or 1, got {l}")));
            }
        }
        out.push(ExternalScores {
            prediction,
            dirichlet,
            label: raw.label,
        });
    }
    if out.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no score records".into(),
        });
    }
    Ok(out)
}
