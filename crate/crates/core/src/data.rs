//! Data pipeline: FC estimation from ROI time series, synthetic multi-site
//! dataset generation with a planted class effect, on-disk formats, and split
//! construction (stratified holdout, stratified k-fold, leave-one-site-out).
//!
//! # On-disk formats
//!
//! A dataset is a directory holding one binary FC file per subject plus a
//! JSON-lines manifest (`manifest.jsonl`), one object per line:
//!
//! ```json
//! {"subject_id":"sub-0001","site_id":"site-00","label":1,"fc_path":"sub-0001.fcm"}
//! ```
//!
//! `fc_path` is resolved relative to the manifest's directory. Each FC file
//! is little-endian binary: magic `"FCM1"`, `u32` N, then N*N row-major f64
//! values. Both round-trip bit-exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{format_err, io_err, LeReader};
use crate::error::{Error, Result};
use crate::hypergraph::FCMatrix;
use crate::matrix::DenseMatrix;

pub const FC_MAGIC: &[u8; 4] = b"FCM1";
pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Background correlation shared by all ROI pairs in the synthetic templates.
const BACKGROUND_RHO: f64 = 0.05;

/// One subject: identifiers, diagnosis label (0 = TD, 1 = ASD) and FC matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub site_id: String,
    pub label: u8,
    pub fc: FCMatrix,
}

// ---------------------------------------------------------------------------
// FC estimation
// ---------------------------------------------------------------------------

/// Reject exactly-constant columns, which have zero variance and no defined
/// correlation.
fn check_constant_columns(ts: &DenseMatrix) -> Result<()> {
    for j in 0..ts.cols() {
        let first = ts.get(0, j);
        if (1..ts.rows()).all(|t| ts.get(t, j) == first) {
            return Err(Error::DegenerateSignal { roi: j });
        }
    }
    Ok(())
}

fn require_min_timepoints(ts: &DenseMatrix) -> Result<()> {
    if ts.rows() < 3 {
        return Err(Error::Validation(format!(
            "FC estimation needs at least 3 timepoints, got {}",
            ts.rows()
        )));
    }
    if ts.cols() < 2 {
        return Err(Error::Validation(format!(
            "FC estimation needs at least 2 ROIs, got {}",
            ts.cols()
        )));
    }
    Ok(())
}

/// Pearson correlation of the columns of a T x N time-series matrix.
pub fn pearson_fc(ts: &DenseMatrix) -> Result<FCMatrix> {
    require_min_timepoints(ts)?;
    check_constant_columns(ts)?;
    let (t, n) = (ts.rows(), ts.cols());

    // Center each column, keep its sum of squares.
    let mut centered = DenseMatrix::zeros(t, n);
    let mut ss = vec![0.0; n];
    for j in 0..n {
        let mean = (0..t).map(|r| ts.get(r, j)).sum::<f64>() / t as f64;
        for r in 0..t {
            let c = ts.get(r, j) - mean;
            centered.set(r, j, c);
            ss[j] += c * c;
        }
    }

    let mut out = DenseMatrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = (0..t).map(|r| centered.get(r, i) * centered.get(r, j)).sum();
            let r = (dot / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    FCMatrix::new(out)
}

/// Ledoit-Wolf shrinkage: covariance shrunk toward the scaled identity with
/// the closed-form optimal coefficient, then converted to correlation.
///
/// With `S = X^T X / T` on the centered data, the target is `mu I`
/// (`mu = trace(S)/N`), the dispersion is `d2 = ||S - mu I||_F^2 / N`, the
/// estimation-noise term is `b2 = min(d2, mean_t variance of x_t x_t^T)`, and
/// the shrinkage intensity is `b2 / d2`, clamped to [0, 1].
pub fn ledoit_wolf_fc(ts: &DenseMatrix) -> Result<FCMatrix> {
    require_min_timepoints(ts)?;
    check_constant_columns(ts)?;
    let (t, n) = (ts.rows(), ts.cols());

    let mut centered = DenseMatrix::zeros(t, n);
    for j in 0..n {
        let mean = (0..t).map(|r| ts.get(r, j)).sum::<f64>() / t as f64;
        for r in 0..t {
            centered.set(r, j, ts.get(r, j) - mean);
        }
    }

    let s = centered.transpose().matmul(&centered)?.scale(1.0 / t as f64);
    let mu = (0..n).map(|i| s.get(i, i)).sum::<f64>() / n as f64;
    let mut d2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { mu } else { 0.0 };
            d2 += (s.get(i, j) - target).powi(2);
        }
    }
    d2 /= n as f64;

    // Mean over entries of Var_t(x_ti * x_tj): squared data Gram minus S^2.
    let squared = centered.map(|v| v * v);
    let gram2 = squared.transpose().matmul(&squared)?.scale(1.0 / t as f64);
    let mut b2_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            b2_sum += gram2.get(i, j) - s.get(i, j).powi(2);
        }
    }
    let beta = (b2_sum / (t * n) as f64).min(d2);
    let shrinkage = if d2 == 0.0 { 0.0 } else { (beta / d2).clamp(0.0, 1.0) };

    let mut sigma = s.scale(1.0 - shrinkage);
    for i in 0..n {
        sigma.set(i, i, sigma.get(i, i) + shrinkage * mu);
    }

    let mut out = DenseMatrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let denom = (sigma.get(i, i) * sigma.get(j, j)).sqrt();
            let r = (sigma.get(i, j) / denom).clamp(-1.0, 1.0);
            out.set(i, j, r);
            out.set(j, i, r);
        }
    }
    FCMatrix::new(out)
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Recipe for a planted-structure multi-site dataset: class 1 strengthens the
/// correlations inside one block of ROIs, sites perturb the observed signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_rois: usize,
    pub n_timepoints: usize,
    pub n_sites: usize,
    /// Fraction of subjects with label 1.
    pub class_balance: f64,
    /// ROIs 0..block_size carry the class effect.
    pub block_size: usize,
    /// Correlation added inside the block for class 1.
    pub effect_strength: f64,
    /// Scale of the per-site gain perturbation and additive observation noise.
    pub site_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            n_rois: 40,
            n_timepoints: 150,
            n_sites: 4,
            class_balance: 0.5,
            block_size: 10,
            effect_strength: 0.4,
            site_noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Parameter("n_subjects must be >= 1".into()));
        }
        if self.n_rois < 2 {
            return Err(Error::Parameter("n_rois must be >= 2".into()));
        }
        if self.n_timepoints < 3 {
            return Err(Error::Parameter("n_timepoints must be >= 3".into()));
        }
        if self.n_sites == 0 {
            return Err(Error::Parameter("n_sites must be >= 1".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::Parameter(format!(
                "class_balance must lie in (0, 1), got {}",
                self.class_balance
            )));
        }
        if self.block_size > self.n_rois {
            return Err(Error::Parameter(format!(
                "block_size {} exceeds n_rois {}",
                self.block_size, self.n_rois
            )));
        }
        if !(0.0..1.0).contains(&self.effect_strength) {
            return Err(Error::Parameter(format!(
                "effect_strength must lie in [0, 1), got {}",
                self.effect_strength
            )));
        }
        if self.site_noise < 0.0 {
            return Err(Error::Parameter("site_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One standard-normal draw via Box-Muller.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps ln finite
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn class_covariance(spec: &SynthSpec, with_effect: bool) -> DenseMatrix {
    let n = spec.n_rois;
    let mut cov = DenseMatrix::filled(n, n, BACKGROUND_RHO);
    for i in 0..n {
        cov.set(i, i, 1.0);
    }
    if with_effect {
        for i in 0..spec.block_size {
            for j in 0..spec.block_size {
                if i != j {
                    cov.set(i, j, BACKGROUND_RHO + spec.effect_strength);
                }
            }
        }
    }
    cov
}

/// Generate the dataset described by `spec`, fully deterministic in
/// `spec.seed`. Subjects are drawn from class-conditional Gaussian templates,
/// observed through a per-site gain and additive noise, and summarized by
/// Pearson FC.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let chol_err = |class: u8| {
        Error::Parameter(format!(
            "class {class} covariance template is not positive-definite; \
             reduce effect_strength"
        ))
    };
    let l0 = class_covariance(spec, false).cholesky().map_err(|_| chol_err(0))?;
    let l1 = class_covariance(spec, true).cholesky().map_err(|_| chol_err(1))?;

    // Per-site gains come from their own RNG stream so adding subjects never
    // changes existing ones.
    let mut site_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    site_rng.set_stream(u64::MAX);
    let gains: Vec<f64> = (0..spec.n_sites)
        .map(|_| 1.0 + spec.site_noise * site_rng.random_range(-1.0..1.0))
        .collect();

    let n1 = (spec.n_subjects as f64 * spec.class_balance).round() as usize;
    let (t, n) = (spec.n_timepoints, spec.n_rois);
    let mut records = Vec::with_capacity(spec.n_subjects);
    for idx in 0..spec.n_subjects {
        let label = u8::from(idx < n1);
        let site = idx % spec.n_sites;
        let l = if label == 1 { &l1 } else { &l0 };

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(idx as u64 + 1);
        let mut ts = DenseMatrix::zeros(t, n);
        let mut z = vec![0.0; n];
        for row in 0..t {
            for zj in z.iter_mut() {
                *zj = standard_normal(&mut rng);
            }
            for i in 0..n {
                let signal: f64 = (0..=i).map(|j| l.get(i, j) * z[j]).sum();
                let noise = spec.site_noise * standard_normal(&mut rng);
                ts.set(row, i, gains[site] * signal + noise);
            }
        }
        records.push(SubjectRecord {
            subject_id: format!("sub-{idx:04}"),
            site_id: format!("site-{site:02}"),
            label,
            fc: pearson_fc(&ts)?,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Write one FC matrix in the `FCM1` binary format.
pub fn save_fc_matrix(path: &Path, fc: &FCMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(FC_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&(fc.n_rois() as u32).to_le_bytes()).map_err(|e| io_err(path, e))?;
    for &v in fc.values().data() {
        w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read one `FCM1` file, validating magic, dimensions and FC invariants.
pub fn load_fc_matrix(path: &Path) -> Result<FCMatrix> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = LeReader::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FC_MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected \"FCM1\"")));
    }
    let n = r.read_u32()? as usize;
    if n == 0 || n > 65_535 {
        return Err(format_err(path, format!("implausible matrix size N = {n}")));
    }
    let data = r.read_f64s(n * n)?;
    let mut probe = [0u8; 1];
    if r.read_exact(&mut probe).is_ok() {
        return Err(format_err(path, "trailing bytes after matrix payload"));
    }
    let values = DenseMatrix::from_vec(n, n, data).map_err(|e| format_err(path, e.to_string()))?;
    FCMatrix::new(values).map_err(|e| format_err(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    subject_id: String,
    site_id: String,
    label: u8,
    fc_path: String,
}

fn validate_subject_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Validation(format!(
            "subject_id {id:?} cannot be used as a file name"
        )));
    }
    Ok(())
}

/// Write a dataset directory: one `<subject_id>.fcm` per subject plus the
/// manifest. The manifest is written to a temporary file and renamed into
/// place. Returns the manifest path.
pub fn save_dataset(dir: &Path, records: &[SubjectRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = String::new();
    let mut seen = HashSet::new();
    for rec in records {
        validate_subject_id(&rec.subject_id)?;
        if !seen.insert(rec.subject_id.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate subject_id {:?} in dataset",
                rec.subject_id
            )));
        }
        let fc_name = format!("{}.fcm", rec.subject_id);
        save_fc_matrix(&dir.join(&fc_name), &rec.fc)?;
        let entry = ManifestEntry {
            subject_id: rec.subject_id.clone(),
            site_id: rec.site_id.clone(),
            label: rec.label,
            fc_path: fc_name,
        };
        manifest.push_str(
            &serde_json::to_string(&entry)
                .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?,
        );
        manifest.push('\n');
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    let tmp_path = dir.join(".manifest.jsonl.tmp");
    fs::write(&tmp_path, manifest).map_err(|e| io_err(&tmp_path, e))?;
    fs::rename(&tmp_path, &manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Load a dataset from its manifest; `fc_path` entries resolve relative to
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| format_err(manifest_path, format!("line {}: {e}", lineno + 1)))?;
        if entry.label > 1 {
            return Err(format_err(
                manifest_path,
                format!("subject {}: label must be 0 or 1, got {}", entry.subject_id, entry.label),
            ));
        }
        if !seen.insert(entry.subject_id.clone()) {
            return Err(format_err(
                manifest_path,
                format!("duplicate subject_id {:?}", entry.subject_id),
            ));
        }
        let fc_file = if Path::new(&entry.fc_path).is_absolute() {
            PathBuf::from(&entry.fc_path)
        } else {
            base.join(&entry.fc_path)
        };
        let fc = load_fc_matrix(&fc_file).map_err(|e| {
            format_err(manifest_path, format!("subject {}: {e}", entry.subject_id))
        })?;
        records.push(SubjectRecord {
            subject_id: entry.subject_id,
            site_id: entry.site_id,
            label: entry.label,
            fc,
        });
    }
    Ok(records)
}

/// Read a time-series CSV: header row of ROI names, then T rows x N numeric
/// columns. Returns the names and the T x N matrix.
pub fn read_timeseries_csv(path: &Path) -> Result<(Vec<String>, DenseMatrix)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() {
        return Err(format_err(path, "empty header row"));
    }
    let n = names.len();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e.to_string()))?;
        if record.len() != n {
            return Err(format_err(
                path,
                format!("row {} has {} fields, header has {n}", i + 2, record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| {
                format_err(path, format!("row {}: {field:?} is not a number", i + 2))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((names, DenseMatrix::from_vec(rows, n, data)?))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

fn label_indices(records: &[SubjectRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if r.label == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    (neg, pos)
}

fn gather(records: &[SubjectRecord], idx: &mut Vec<usize>) -> Vec<SubjectRecord> {
    idx.sort_unstable();
    idx.iter().map(|&i| records[i].clone()).collect()
}

/// Stratified holdout split: per-label shuffles, `round(count * fraction)`
/// test subjects from each class. Deterministic per seed.
pub fn split_stratified(
    records: &[SubjectRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Protocol(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let (neg, pos) = label_indices(records);
    if neg.len() < 2 || pos.len() < 2 {
        return Err(Error::Protocol(format!(
            "stratified split needs at least 2 subjects per class, got {} negative / {} positive",
            neg.len(),
            pos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [neg, pos] {
        let mut shuffled = class;
        shuffled.shuffle(&mut rng);
        let n_test = (shuffled.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&shuffled[..n_test]);
        train.extend_from_slice(&shuffled[n_test..]);
    }
    Ok((gather(records, &mut train), gather(records, &mut test)))
}

/// Stratified k-fold partition: per-label shuffle, then deal subjects to
/// folds round-robin. Every subject lands in exactly one test fold.
pub fn stratified_kfold(
    records: &[SubjectRecord],
    n_folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<SubjectRecord>, Vec<SubjectRecord>)>> {
    if n_folds < 2 {
        return Err(Error::Protocol(format!("n_folds must be >= 2, got {n_folds}")));
    }
    if n_folds > records.len() {
        return Err(Error::Protocol(format!(
            "n_folds = {n_folds} exceeds the {} available subjects",
            records.len()
        )));
    }
    let (neg, pos) = label_indices(records);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; records.len()];
    for class in [neg, pos] {
        let mut shuffled = class;
        shuffled.shuffle(&mut rng);
        for (pos_in_class, &rec_idx) in shuffled.iter().enumerate() {
            assignment[rec_idx] = pos_in_class % n_folds;
        }
    }
    let mut folds = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &f) in assignment.iter().enumerate() {
            if f == fold {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        folds.push((gather(records, &mut train), gather(records, &mut test)));
    }
    Ok(folds)
}

/// Leave-one-site-out folds, ordered by site id. Each fold tests all
/// subjects of one site and trains on the rest.
pub fn loso_splits(
    records: &[SubjectRecord],
) -> Result<Vec<(String, Vec<SubjectRecord>, Vec<SubjectRecord>)>> {
    let mut by_site: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_site.entry(r.site_id.as_str()).or_default().push(i);
    }
    if by_site.len() < 2 {
        return Err(Error::Protocol(format!(
            "leave-one-site-out needs at least 2 sites, found {}",
            by_site.len()
        )));
    }
    let mut folds = Vec::with_capacity(by_site.len());
    for (site, test_idx) in &by_site {
        let mut test = test_idx.clone();
        let mut train: Vec<usize> =
            (0..records.len()).filter(|i| !test_idx.contains(i)).collect();
        folds.push((
            site.to_string(),
            gather(records, &mut train),
            gather(records, &mut test),
        ));
    }
    Ok(folds)
}
