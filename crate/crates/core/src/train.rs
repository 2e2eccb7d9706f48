//! Training and evaluation: BCE loss, Adam with decoupled weight decay,
//! classification metrics, the mini-batch training loop, cross-validation
//! harnesses (stratified k-fold and leave-one-site-out) and ablation sweeps.
//!
//! Everything is deterministic for a fixed `(config, dataset)`: shuffling and
//! initialization derive from `TrainConfig::seed`, cross-validation reseeds
//! each fold with `seed + fold_index`, and report structs serialize with a
//! fixed field order so identical runs produce identical bytes.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{loso_splits, split_stratified, stratified_kfold, SubjectRecord};
use crate::error::{Error, Result};
use crate::hypergraph::{build_knn_hyperedges, Hypergraph};
use crate::matrix::DenseMatrix;
use crate::model::{
    build_forward, init_params, param_shapes, HyperParams, ModelParams, ParamKey, ReadoutKind,
};
use crate::autodiff::Graph;

/// Classification threshold: predict 1 iff probability is strictly above.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fraction of each cross-validation training fold carved out (stratified)
/// as a validation set for best-epoch checkpoint selection.
const CV_VAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hyper: HyperParams,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 1e-5,
            seed: 42,
            hyper: HyperParams::default(),
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be > 0".into()));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {beta}")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Parameter("adam_epsilon must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Parameter("weight_decay must be >= 0".into()));
        }
        self.hyper.validate()
    }
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy with the same probability clamp the graph op
/// uses, so reported losses match trained losses.
pub fn bce_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(Error::Contract(format!(
            "bce_loss over {} probabilities and {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let clamp = crate::autodiff::BCE_CLAMP;
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

/// ROC AUC as the Mann-Whitney statistic (ties ½), via midranks in
/// O(n log n). `None` when only one class is present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &t in &idx[i..j] {
            if labels[t] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    Some((rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Confusion counts and derived metrics at a fixed threshold. Metrics whose
/// denominator is empty are `None` (serialized as JSON null), never 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (&p, &y) in scores.iter().zip(labels) {
            let predicted = p > threshold;
            match (predicted, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let total = tp + fp + tn + fn_;
        let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            accuracy: frac(tp + tn, total),
            auc: roc_auc(scores, labels),
            sensitivity: frac(tp, tp + fn_),
            specificity: frac(tn, tn + fp),
            tp,
            fp,
            tn,
            fn_,
            threshold,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// One subject's score in an evaluation, exported for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    pub per_subject: Vec<SubjectScore>,
}

fn model_n_nodes(params: &ModelParams) -> usize {
    params.get(ParamKey::Theta(0)).rows()
}

/// Score every record with its own k-NN hypergraph and summarize at the
/// default threshold.
pub fn evaluate(
    params: &ModelParams,
    hyper: &HyperParams,
    records: &[SubjectRecord],
) -> Result<EvalOutcome> {
    let hgs = records
        .iter()
        .map(|r| build_knn_hyperedges(&r.fc, hyper.k))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with_hypergraphs(params, hyper, records, &hgs)
}

fn evaluate_with_hypergraphs(
    params: &ModelParams,
    hyper: &HyperParams,
    records: &[SubjectRecord],
    hgs: &[Hypergraph],
) -> Result<EvalOutcome> {
    let n = model_n_nodes(params);
    let mut per_subject = Vec::with_capacity(records.len());
    for (rec, hg) in records.iter().zip(hgs) {
        if rec.fc.n_rois() != n {
            return Err(Error::Contract(format!(
                "model expects {n} ROIs but subject {} has {}",
                rec.subject_id,
                rec.fc.n_rois()
            )));
        }
        let out = crate::model::forward_with_hypergraph(params, hyper, hg, &rec.fc)?;
        per_subject.push(SubjectScore {
            subject_id: rec.subject_id.clone(),
            score: out.probability,
            label: rec.label,
        });
    }
    let scores: Vec<f64> = per_subject.iter().map(|s| s.score).collect();
    let labels: Vec<u8> = per_subject.iter().map(|s| s.label).collect();
    Ok(EvalOutcome {
        metrics: MetricsReport::from_scores(&scores, &labels, DEFAULT_THRESHOLD),
        per_subject,
    })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment buffers, aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    moments: Vec<(ParamKey, DenseMatrix, DenseMatrix)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let moments = params
            .entries()
            .iter()
            .map(|(key, m)| {
                (*key, DenseMatrix::zeros(m.rows(), m.cols()), DenseMatrix::zeros(m.rows(), m.cols()))
            })
            .collect();
        Self { step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`p -= lr * wd * p`, applied separately from the gradient step).
/// Parameters listed in `frozen` are left completely untouched.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(ParamKey, DenseMatrix)],
    state: &mut AdamState,
    config: &TrainConfig,
    frozen: &[ParamKey],
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    for ((gkey, grad), (mkey, m, v)) in grads.iter().zip(state.moments.iter_mut()) {
        if gkey != mkey {
            return Err(Error::Contract(format!(
                "gradient order mismatch: {gkey} vs optimizer state {mkey}"
            )));
        }
        if frozen.contains(gkey) {
            continue;
        }
        let p = params.get_mut(*gkey);
        if p.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "gradient for {gkey} has shape {:?}, parameter is {:?}",
                grad.shape(),
                p.shape()
            )));
        }
        let (lr, wd, eps) = (config.learning_rate, config.weight_decay, config.adam_epsilon);
        let pd = p.data_mut();
        let gd = grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            if wd > 0.0 {
                pd[i] -= lr * wd * pd[i];
            }
            md[i] = config.adam_beta1 * md[i] + (1.0 - config.adam_beta1) * gd[i];
            vd[i] = config.adam_beta2 * vd[i] + (1.0 - config.adam_beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn frozen_keys(hyper: &HyperParams) -> Vec<ParamKey> {
    let mut frozen = Vec::new();
    if !hyper.learn_edge_weights {
        frozen.push(ParamKey::EdgeWeights);
    }
    if !hyper.use_gated_attention {
        frozen.extend([
            ParamKey::GateAWeight,
            ParamKey::GateABias,
            ParamKey::GateGWeight,
            ParamKey::GateGBias,
            ParamKey::GateScoreWeight,
            ParamKey::GateScoreBias,
        ]);
    }
    frozen
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, ranked by AUC with accuracy as
    /// the tie-break (final epoch when no validation AUC was ever defined).
    pub params: ModelParams,
    pub hyper: HyperParams,
    pub n_nodes: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

fn zero_grads(hyper: &HyperParams, n_nodes: usize) -> Vec<(ParamKey, DenseMatrix)> {
    param_shapes(hyper, n_nodes)
        .into_iter()
        .map(|(key, r, c)| (key, DenseMatrix::zeros(r, c)))
        .collect()
}

fn subject_loss_and_grads(
    params: &ModelParams,
    hyper: &HyperParams,
    hg: &Hypergraph,
    rec: &SubjectRecord,
) -> Result<(f64, Vec<(ParamKey, DenseMatrix)>)> {
    let mut g = Graph::new();
    let fg = build_forward(&mut g, params, hyper, hg, &rec.fc)?;
    let label = DenseMatrix::from_vec(1, 1, vec![f64::from(rec.label)])?;
    let loss = g.bce(fg.prob, label)?;
    let loss_val = g.value(loss).get(0, 0);
    let adj = g.backward(loss)?;
    Ok((loss_val, fg.parameter_grads(&adj)))
}

/// Mini-batch training. Per epoch: seeded shuffle, batch-averaged gradients,
/// one Adam step per batch, then validation metrics. Deterministic for a
/// fixed config and dataset.
pub fn train(
    config: &TrainConfig,
    train_records: &[SubjectRecord],
    val_records: &[SubjectRecord],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(Error::Protocol("training set is empty".into()));
    }
    let n_pos = train_records.iter().filter(|r| r.label == 1).count();
    if n_pos == 0 || n_pos == train_records.len() {
        return Err(Error::Protocol(
            "training set must contain both classes".into(),
        ));
    }
    let n_nodes = train_records[0].fc.n_rois();
    for rec in train_records.iter().chain(val_records) {
        if rec.fc.n_rois() != n_nodes {
            return Err(Error::Contract(format!(
                "subject {} has {} ROIs, expected {n_nodes}",
                rec.subject_id,
                rec.fc.n_rois()
            )));
        }
    }
    let hyper = &config.hyper;
    let train_hgs = train_records
        .iter()
        .map(|r| build_knn_hyperedges(&r.fc, hyper.k))
        .collect::<Result<Vec<_>>>()?;
    let val_hgs = val_records
        .iter()
        .map(|r| build_knn_hyperedges(&r.fc, hyper.k))
        .collect::<Result<Vec<_>>>()?;

    let mut params = init_params(hyper, n_nodes, config.seed)?;
    let mut adam = AdamState::new(&params);
    let frozen = frozen_keys(hyper);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);

    let mut order: Vec<usize> = (0..train_records.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    // (auc, accuracy, epoch, params); epochs are ranked lexicographically by
    // (auc, accuracy) so a perfect early AUC does not pin the checkpoint to an
    // epoch whose thresholded accuracy is still poor.
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = zero_grads(hyper, n_nodes);
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss_val, subject_grads) =
                    subject_loss_and_grads(&params, hyper, &train_hgs[i], &train_records[i])?;
                batch_loss += loss_val;
                let scale = 1.0 / batch.len() as f64;
                for (acc, (_, g)) in grads.iter_mut().zip(subject_grads) {
                    acc.1.add_assign(&g.scale(scale))?;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: "batch loss is not finite (diverged)".into(),
                });
            }
            epoch_loss += batch_loss;
            adam_step(&mut params, &grads, &mut adam, config, &frozen)?;
        }
        let train_loss = epoch_loss / train_records.len() as f64;

        let (val_accuracy, val_auc) = if val_records.is_empty() {
            (None, None)
        } else {
            let outcome = evaluate_with_hypergraphs(&params, hyper, val_records, &val_hgs)?;
            (outcome.metrics.accuracy, outcome.metrics.auc)
        };
        history.push(EpochStats { epoch, train_loss, val_accuracy, val_auc });

        let val_acc_rank = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        let improved = match (val_auc, &best) {
            (Some(auc), Some((best_auc, best_acc, _, _))) => {
                auc > *best_auc || (auc == *best_auc && val_acc_rank > *best_acc)
            }
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            let auc = val_auc.expect("improved implies Some");
            best = Some((auc, val_acc_rank, epoch, params.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if let (Some(patience), Some(_)) = (config.early_stop_patience, &best) {
                if epochs_since_best >= patience {
                    break;
                }
            }
        }
    }

    let last_epoch = history.last().map(|h| h.epoch).unwrap_or(0);
    let (best_epoch, best_params) = match best {
        Some((_, _, epoch, p)) => (epoch, p),
        None => (last_epoch, params),
    };
    Ok(TrainOutcome {
        params: best_params,
        hyper: hyper.clone(),
        n_nodes,
        best_epoch,
        history,
    })
}

/// CSV body of the per-epoch history: `epoch,train_loss,val_accuracy,val_auc`.
/// Undefined metrics are left as empty fields.
pub fn render_history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,val_auc\n");
    for h in history {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6},{},{}\n",
            h.epoch,
            h.train_loss,
            opt(h.val_accuracy),
            opt(h.val_auc)
        ));
    }
    out
}

/// Write [`render_history_csv`] to `path`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    std::fs::write(path, render_history_csv(history))
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// Fold construction strategy for [`run_cv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n_folds")]
pub enum CvProtocol {
    KFold(usize),
    Loso,
}

impl CvProtocol {
    fn label(&self) -> String {
        match self {
            CvProtocol::KFold(n) => format!("{n}-fold"),
            CvProtocol::Loso => "loso".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: String,
    pub metrics: MetricsReport,
    pub per_subject: Vec<SubjectScore>,
}

/// Per-metric aggregate; `None` when no fold had the metric defined (mean)
/// or fewer than two folds had it (std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean: MetricAggregate,
    pub std: MetricAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRunConfig {
    pub protocol: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub summary: CvSummary,
    pub config: CvRunConfig,
}

fn mean_and_sample_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.len() >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (values.len() - 1) as f64).sqrt()
    });
    (Some(mean), std)
}

fn summarize_folds(folds: &[FoldReport]) -> CvSummary {
    let collect = |pick: fn(&MetricsReport) -> Option<f64>| -> Vec<f64> {
        folds.iter().filter_map(|f| pick(&f.metrics)).collect()
    };
    let (acc_m, acc_s) = mean_and_sample_std(&collect(|m| m.accuracy));
    let (auc_m, auc_s) = mean_and_sample_std(&collect(|m| m.auc));
    let (sen_m, sen_s) = mean_and_sample_std(&collect(|m| m.sensitivity));
    let (spe_m, spe_s) = mean_and_sample_std(&collect(|m| m.specificity));
    CvSummary {
        mean: MetricAggregate {
            accuracy: acc_m,
            auc: auc_m,
            sensitivity: sen_m,
            specificity: spe_m,
        },
        std: MetricAggregate {
            accuracy: acc_s,
            auc: auc_s,
            sensitivity: sen_s,
            specificity: spe_s,
        },
    }
}

/// Train and evaluate one fold: an internal stratified slice of the training
/// records (when available) serves as the validation set for best-epoch
/// selection; the fold's test records are scored exactly once, at the end.
fn run_fold(
    config: &TrainConfig,
    fold_id: &str,
    fold_seed: u64,
    train_records: &[SubjectRecord],
    test_records: &[SubjectRecord],
) -> Result<FoldReport> {
    let fold_config = TrainConfig { seed: fold_seed, ..config.clone() };
    let outcome = match split_stratified(train_records, CV_VAL_FRACTION, fold_seed) {
        Ok((fit, val)) if !val.is_empty() => train(&fold_config, &fit, &val)?,
        _ => train(&fold_config, train_records, &[])?,
    };
    let eval = evaluate(&outcome.params, &outcome.hyper, test_records)?;
    Ok(FoldReport {
        fold_id: fold_id.to_string(),
        metrics: eval.metrics,
        per_subject: eval.per_subject,
    })
}

/// Cross-validation harness. Folds are reseeded `seed + fold_index` and are
/// independent, so `jobs > 1` distributes them across threads without
/// changing any result; reports are assembled in fold order either way.
pub fn run_cv(
    config: &TrainConfig,
    records: &[SubjectRecord],
    protocol: CvProtocol,
    jobs: usize,
) -> Result<CvReport> {
    config.validate()?;
    let folds: Vec<(String, Vec<SubjectRecord>, Vec<SubjectRecord>)> = match protocol {
        CvProtocol::KFold(n) => stratified_kfold(records, n, config.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, (train, test))| (format!("fold-{i}"), train, test))
            .collect(),
        CvProtocol::Loso => loso_splits(records)?,
    };

    let jobs = jobs.max(1).min(folds.len());
    let mut reports: Vec<Option<Result<FoldReport>>> = Vec::new();
    reports.resize_with(folds.len(), || None);

    if jobs == 1 {
        for (i, (fold_id, train_recs, test_recs)) in folds.iter().enumerate() {
            reports[i] = Some(run_fold(
                config,
                fold_id,
                config.seed.wrapping_add(i as u64),
                train_recs,
                test_recs,
            ));
        }
    } else {
        let mut worker_inputs: Vec<Vec<(usize, &mut Option<Result<FoldReport>>)>> =
            (0..jobs).map(|_| Vec::new()).collect();
        for (idx, slot) in reports.iter_mut().enumerate() {
            worker_inputs[idx % jobs].push((idx, slot));
        }
        std::thread::scope(|scope| {
            for assigned in worker_inputs {
                let folds = &folds;
                scope.spawn(move || {
                    for (idx, slot) in assigned {
                        let (fold_id, train_recs, test_recs) = &folds[idx];
                        *slot = Some(run_fold(
                            config,
                            fold_id,
                            config.seed.wrapping_add(idx as u64),
                            train_recs,
                            test_recs,
                        ));
                    }
                });
            }
        });
    }

    let folds_out = reports
        .into_iter()
        .map(|r| r.expect("every fold slot filled"))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize_folds(&folds_out);
    Ok(CvReport {
        folds: folds_out,
        summary,
        config: CvRunConfig { protocol: protocol.label(), train: config.clone() },
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// One sweep axis with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "axis", content = "values")]
pub enum AblationAxis {
    K(Vec<usize>),
    Layers(Vec<usize>),
    Readout(Vec<ReadoutKind>),
    /// Gated attention on/off.
    GatedAttention,
    /// Learned hyperedge weights vs frozen at 1.
    LearnedEdges,
    /// The full 2x2: gated attention x learned hyperedge weights.
    GaHe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub report: CvReport,
}

fn readout_name(kind: ReadoutKind) -> &'static str {
    match kind {
        ReadoutKind::Mlp => "mlp",
        ReadoutKind::Mean => "mean",
        ReadoutKind::Max => "max",
    }
}

/// Expand the axis into labeled configurations.
fn axis_settings(
    axis: &AblationAxis,
    base: &TrainConfig,
    n_rois: usize,
) -> Result<Vec<(String, TrainConfig)>> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::K(values) => {
            if values.is_empty() {
                return Err(Error::Parameter("k sweep needs at least one value".into()));
            }
            for &k in values {
                if k < 2 || k > n_rois {
                    return Err(Error::Parameter(format!(
                        "k sweep value {k} outside 2..={n_rois}"
                    )));
                }
                let mut cfg = base.clone();
                cfg.hyper.k = k;
                out.push((format!("k={k}"), cfg));
            }
        }
        AblationAxis::Layers(values) => {
            if values.is_empty() {
                return Err(Error::Parameter("layers sweep needs at least one value".into()));
            }
            for &layers in values {
                if layers < 1 {
                    return Err(Error::Parameter("layers sweep values must be >= 1".into()));
                }
                let mut cfg = base.clone();
                let width = *cfg.hyper.hidden_dims.last().expect("validated hyper");
                cfg.hyper.n_layers = layers;
                cfg.hyper.hidden_dims = vec![width; layers];
                out.push((format!("layers={layers}"), cfg));
            }
        }
        AblationAxis::Readout(kinds) => {
            if kinds.is_empty() {
                return Err(Error::Parameter("readout sweep needs at least one kind".into()));
            }
            for &kind in kinds {
                let mut cfg = base.clone();
                cfg.hyper.readout_kind = kind;
                out.push((format!("readout={}", readout_name(kind)), cfg));
            }
        }
        AblationAxis::GatedAttention => {
            for ga in [true, false] {
                let mut cfg = base.clone();
                cfg.hyper.use_gated_attention = ga;
                out.push((format!("ga={}", if ga { "on" } else { "off" }), cfg));
            }
        }
        AblationAxis::LearnedEdges => {
            for he in [true, false] {
                let mut cfg = base.clone();
                cfg.hyper.learn_edge_weights = he;
                out.push((format!("he={}", if he { "learned" } else { "frozen" }), cfg));
            }
        }
        AblationAxis::GaHe => {
            for ga in [true, false] {
                for he in [true, false] {
                    let mut cfg = base.clone();
                    cfg.hyper.use_gated_attention = ga;
                    cfg.hyper.learn_edge_weights = he;
                    out.push((
                        format!(
                            "ga={},he={}",
                            if ga { "on" } else { "off" },
                            if he { "learned" } else { "frozen" }
                        ),
                        cfg,
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// One full cross-validation run per axis setting.
pub fn ablation_sweep(
    config: &TrainConfig,
    records: &[SubjectRecord],
    axis: &AblationAxis,
    protocol: CvProtocol,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if records.is_empty() {
        return Err(Error::Protocol("ablation needs a nonempty dataset".into()));
    }
    let n_rois = records[0].fc.n_rois();
    let settings = axis_settings(axis, config, n_rois)?;
    let mut rows = Vec::with_capacity(settings.len());
    for (setting, cfg) in settings {
        let report = run_cv(&cfg, records, protocol, jobs)?;
        rows.push(AblationRow { setting, report });
    }
    Ok(rows)
}

/// Fixed-width text table of an ablation's summary metrics.
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let fmt = |mean: Option<f64>, std: Option<f64>| match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.4} +- {s:.4}"),
        (Some(m), None) => format!("{m:.4}"),
        _ => "n/a".to_string(),
    };
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:width$}  {:>16}  {:>16}\n", "setting", "accuracy", "auc");
    for row in rows {
        let s = &row.report.summary;
        out.push_str(&format!(
            "{:width$}  {:>16}  {:>16}\n",
            row.setting,
            fmt(s.mean.accuracy, s.std.accuracy),
            fmt(s.mean.auc, s.std.auc),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::hypergraph::FCMatrix;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn bce_at_half_is_ln_two() {
        let loss = bce_loss(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn bce_hand_example() {
        let loss = bce_loss(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_relative_eq!(loss, -(0.9f64.ln()), epsilon = 1e-12); // ~0.10536
    }

    #[test]
    fn bce_perfect_predictions_near_zero() {
        let loss = bce_loss(&[1.0, 0.0], &[1, 0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-11, "clamped loss was {loss}");
    }

    #[test]
    fn bce_clamp_keeps_wrong_confident_predictions_finite() {
        let loss = bce_loss(&[0.0, 1.0], &[1, 0]).unwrap();
        assert!(loss.is_finite());
        // Tolerance absorbs the representation error of 1 - 1e-12.
        assert_relative_eq!(loss, -(crate::autodiff::BCE_CLAMP.ln()), max_relative = 1e-5);
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            hyper: HyperParams {
                k: 3,
                hidden_dims: vec![8],
                att_hidden: 4,
                readout_dim: 8,
                ..HyperParams::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_grad_zero_decay_is_identity() {
        let mut config = tiny_config();
        config.weight_decay = 0.0;
        let mut params = init_params(&config.hyper, 6, 1).unwrap();
        let before = params.flatten();
        let grads = zero_grads(&config.hyper, 6);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &config, &[]).unwrap();
        assert_eq!(params.flatten(), before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // Scalar parameter, g = 1: bias correction makes the first update
        // exactly -lr / (1 + eps).
        let mut config = tiny_config();
        config.learning_rate = 0.1;
        config.weight_decay = 0.0;
        let mut params = init_params(&config.hyper, 6, 1).unwrap();
        let before = params.get(ParamKey::ClassifierBias).get(0, 0);
        let mut grads = zero_grads(&config.hyper, 6);
        for (key, g) in grads.iter_mut() {
            if *key == ParamKey::ClassifierBias {
                g.set(0, 0, 1.0);
            }
        }
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, &config, &[]).unwrap();
        let delta = params.get(ParamKey::ClassifierBias).get(0, 0) - before;
        assert_relative_eq!(delta, -0.1, epsilon = 1e-7);
    }

    #[test]
    fn adam_skips_frozen_parameters_entirely() {
        let mut config = tiny_config();
        config.weight_decay = 0.1; // would shrink any touched parameter
        let mut params = init_params(&config.hyper, 6, 2).unwrap();
        let before = params.get(ParamKey::EdgeWeights).clone();
        let mut grads = zero_grads(&config.hyper, 6);
        for (key, g) in grads.iter_mut() {
            if *key == ParamKey::EdgeWeights {
                *g = DenseMatrix::filled(6, 1, 5.0);
            }
        }
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            adam_step(&mut params, &grads, &mut state, &config, &[ParamKey::EdgeWeights]).unwrap();
        }
        assert_eq!(params.get(ParamKey::EdgeWeights), &before);
        for w in params.effective_edge_weights() {
            assert_relative_eq!(w, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn auc_worked_examples() {
        assert_relative_eq!(
            roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(),
            1.0
        );
        assert_relative_eq!(roc_auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_relative_eq!(
            roc_auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap(),
            0.75
        );
        assert_eq!(roc_auc(&[0.1, 0.9], &[1, 1]), None);
    }

    fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force(
            raw in proptest::collection::vec((0u8..=1u8, 0usize..4usize), 2..50)
        ) {
            // Coarse score grid to exercise plenty of ties.
            let labels: Vec<u8> = raw.iter().map(|(l, _)| *l).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, s)| *s as f64 / 4.0).collect();
            let fast = roc_auc(&scores, &labels);
            let slow = auc_brute_force(&scores, &labels);
            match (fast, slow) {
                (None, None) => {}
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                other => prop_assert!(false, "definedness mismatch: {other:?}"),
            }
        }
    }

    #[test]
    fn metrics_counts_sum_and_undefined_marked() {
        let scores = [0.9, 0.3, 0.8, 0.2];
        let labels = [1, 1, 0, 0];
        let m = MetricsReport::from_scores(&scores, &labels, 0.5);
        assert_eq!(m.total(), 4);
        assert_relative_eq!(m.accuracy.unwrap(), 0.5);
        assert_relative_eq!(m.sensitivity.unwrap(), 0.5);
        assert_relative_eq!(m.specificity.unwrap(), 0.5);

        let single = MetricsReport::from_scores(&[0.9, 0.2], &[1, 1], 0.5);
        assert!(single.specificity.is_none());
        assert!(single.auc.is_none());
        let json = serde_json::to_string(&single).unwrap();
        assert!(json.contains("\"specificity\":null"));
    }

    #[test]
    fn ties_at_threshold_predict_negative() {
        let m = MetricsReport::from_scores(&[0.5, 0.5], &[1, 0], 0.5);
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (0, 0, 1, 1));
    }

    fn small_dataset(effect: f64, seed: u64) -> Vec<SubjectRecord> {
        generate_synthetic(&SynthSpec {
            n_subjects: 40,
            n_rois: 12,
            n_timepoints: 60,
            n_sites: 2,
            block_size: 4,
            effect_strength: effect,
            seed,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_classifier_probabilities_give_prevalence_accuracy() {
        let records = small_dataset(0.3, 3);
        let config = tiny_config();
        let mut params = init_params(&config.hyper, 12, 1).unwrap();
        *params.get_mut(ParamKey::ClassifierWeight) =
            DenseMatrix::zeros(config.hyper.readout_dim, 1);
        *params.get_mut(ParamKey::ClassifierBias) = DenseMatrix::zeros(1, 1);
        let out = evaluate(&params, &config.hyper, &records).unwrap();
        assert!(out.per_subject.iter().all(|s| s.score == 0.5));
        let prevalence_zero =
            records.iter().filter(|r| r.label == 0).count() as f64 / records.len() as f64;
        assert_relative_eq!(out.metrics.accuracy.unwrap(), prevalence_zero);
        assert_eq!(out.metrics.tp + out.metrics.fp, 0, "ties at 0.5 must predict 0");
    }

    #[test]
    fn evaluate_metrics_match_recomputation_from_scores() {
        let records = small_dataset(0.3, 4);
        let config = tiny_config();
        let params = init_params(&config.hyper, 12, 9).unwrap();
        let out = evaluate(&params, &config.hyper, &records).unwrap();
        let scores: Vec<f64> = out.per_subject.iter().map(|s| s.score).collect();
        let labels: Vec<u8> = out.per_subject.iter().map(|s| s.label).collect();
        assert_eq!(out.metrics, MetricsReport::from_scores(&scores, &labels, 0.5));
        assert_eq!(out.metrics.total(), records.len());
    }

    #[test]
    fn evaluate_rejects_mismatched_dimensions() {
        let records = small_dataset(0.3, 5);
        let config = tiny_config();
        let params = init_params(&config.hyper, 10, 1).unwrap(); // expects N=10
        assert!(matches!(
            evaluate(&params, &config.hyper, &records),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_loss_starts_near_ln2() {
        let records = small_dataset(0.5, 6);
        let (train_recs, val_recs) = split_stratified(&records, 0.25, 1).unwrap();
        let mut config = tiny_config();
        config.epochs = 8;
        config.learning_rate = 1e-3;
        let a = train(&config, &train_recs, &val_recs).unwrap();
        let b = train(&config, &train_recs, &val_recs).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.best_epoch, b.best_epoch);

        assert!(a.history[0].train_loss < std::f64::consts::LN_2 + 0.05);
        let first: f64 = a.history[..4].iter().map(|h| h.train_loss).sum::<f64>() / 4.0;
        let last: f64 = a.history[4..].iter().map(|h| h.train_loss).sum::<f64>() / 4.0;
        assert!(
            last <= first + 0.02,
            "loss trend should not increase: first-half {first}, second-half {last}"
        );
    }

    #[test]
    fn training_without_both_classes_is_rejected() {
        let records: Vec<SubjectRecord> = small_dataset(0.3, 7)
            .into_iter()
            .filter(|r| r.label == 1)
            .collect();
        let config = tiny_config();
        assert!(matches!(train(&config, &records, &[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn frozen_edges_stay_at_one_through_training() {
        let records = small_dataset(0.5, 8);
        let (train_recs, val_recs) = split_stratified(&records, 0.25, 2).unwrap();
        let mut config = tiny_config();
        config.epochs = 4;
        config.learning_rate = 1e-3;
        config.hyper.learn_edge_weights = false;
        let outcome = train(&config, &train_recs, &val_recs).unwrap();
        let init = init_params(&config.hyper, 12, config.seed).unwrap();
        assert_eq!(
            outcome.params.get(ParamKey::EdgeWeights),
            init.get(ParamKey::EdgeWeights),
            "raw edge weights must be bitwise untouched"
        );
        for w in outcome.params.effective_edge_weights() {
            assert_relative_eq!(w, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn history_csv_has_expected_header_and_rows() {
        let history = vec![
            EpochStats { epoch: 1, train_loss: 0.7, val_accuracy: Some(0.5), val_auc: None },
            EpochStats { epoch: 2, train_loss: 0.6, val_accuracy: Some(0.75), val_auc: Some(0.8) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_accuracy,val_auc");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with("0.500000,"), "undefined AUC leaves an empty field");
    }

    #[test]
    fn loso_cv_partitions_subjects_across_folds() {
        let records = small_dataset(0.5, 9); // 2 sites
        let mut config = tiny_config();
        config.epochs = 2;
        let report = run_cv(&config, &records, CvProtocol::Loso, 1).unwrap();
        assert_eq!(report.folds.len(), 2);
        let mut tested: Vec<String> = report
            .folds
            .iter()
            .flat_map(|f| f.per_subject.iter().map(|s| s.subject_id.clone()))
            .collect();
        tested.sort();
        let mut expected: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        expected.sort();
        assert_eq!(tested, expected);
        assert_eq!(report.config.protocol, "loso");
    }

    #[test]
    fn kfold_cv_is_deterministic_and_parallel_invariant() {
        let records = small_dataset(0.5, 10);
        let mut config = tiny_config();
        config.epochs = 2;
        let a = run_cv(&config, &records, CvProtocol::KFold(3), 1).unwrap();
        let b = run_cv(&config, &records, CvProtocol::KFold(3), 1).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

        let c = run_cv(&config, &records, CvProtocol::KFold(3), 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn ga_he_sweep_emits_four_settings() {
        let records = small_dataset(0.5, 11);
        let mut config = tiny_config();
        config.epochs = 1;
        let rows =
            ablation_sweep(&config, &records, &AblationAxis::GaHe, CvProtocol::KFold(2), 1)
                .unwrap();
        let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(
            settings,
            vec![
                "ga=on,he=learned",
                "ga=on,he=frozen",
                "ga=off,he=learned",
                "ga=off,he=frozen"
            ]
        );
        let table = render_ablation_table(&rows);
        assert!(table.contains("setting"));
        assert_eq!(table.lines().count(), 5);
    }

    #[test]
    fn invalid_ablation_values_are_rejected() {
        let records = small_dataset(0.3, 12);
        let config = tiny_config();
        let err = ablation_sweep(
            &config,
            &records,
            &AblationAxis::K(vec![4, 99]),
            CvProtocol::KFold(2),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        let err = ablation_sweep(
            &config,
            &records,
            &AblationAxis::Layers(vec![0]),
            CvProtocol::KFold(2),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn uniform_attention_when_gating_disabled() {
        let records = small_dataset(0.3, 13);
        let mut config = tiny_config();
        config.hyper.use_gated_attention = false;
        let params = init_params(&config.hyper, 12, 3).unwrap();
        let out = crate::model::forward(&params, &config.hyper, &records[0].fc).unwrap();
        for a in out.alpha {
            assert_relative_eq!(a, 1.0 / 12.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn identity_fc_trains_without_panicking() {
        // Degenerate but valid FC input: identity matrices everywhere.
        let fc = FCMatrix::new(DenseMatrix::identity(8)).unwrap();
        let records: Vec<SubjectRecord> = (0..8)
            .map(|i| SubjectRecord {
                subject_id: format!("s{i}"),
                site_id: format!("site-{}", i % 2),
                label: (i % 2) as u8,
                fc: fc.clone(),
            })
            .collect();
        let mut config = tiny_config();
        config.epochs = 2;
        config.hyper.k = 2;
        config.hyper.hidden_dims = vec![4];
        let outcome = train(&config, &records, &[]).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.history.iter().all(|h| h.train_loss.is_finite()));
    }
}
