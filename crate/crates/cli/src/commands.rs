//! One function per subcommand. Each loads its strict config, applies flag
//! overrides, validates inputs up front, runs the corresponding library
//! operation, and writes report files carrying the reproducibility header.

use std::fs;
use std::path::Path;

use serde::Serialize;

use hyperfc::data::{
    generate_synthetic, ledoit_wolf_fc, load_dataset, pearson_fc, read_timeseries_csv,
    save_dataset, split_stratified, SubjectRecord, SynthSpec,
};
use hyperfc::hypergraph::FCMatrix;
use hyperfc::interpret::{
    hyperedge_pattern, load_roi_names, render_hyperedge_edges_csv, render_roi_rankings_csv,
    roi_importance, InterpretReport,
};
use hyperfc::matrix::DenseMatrix;
use hyperfc::model::{load_checkpoint, model_gradient_check, save_checkpoint, GradCheckSpec};
use hyperfc::train::{
    ablation_sweep, evaluate, render_ablation_table, render_history_csv, run_cv, train, CvReport,
    MetricsReport, SubjectScore,
};
use hyperfc::{build_knn_hyperedges, Error};

use crate::config::{
    self, AblateCommandConfig, CvCommandConfig, Estimator, EvalCommandConfig, ImportConfig,
    InterpretCommandConfig, Overrides, TrainCommandConfig,
};
use crate::report::{self, write_json_report, write_text_report, ReportHeader};
use crate::{CliError, CliResult};

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Core(Error::Io { path: out.to_path_buf(), source: e }))?;
    Ok(())
}

fn opt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string())
}

fn metrics_line(m: &MetricsReport) -> String {
    format!(
        "accuracy {} auc {} sensitivity {} specificity {} (tp {} fp {} tn {} fn {})",
        opt_metric(m.accuracy),
        opt_metric(m.auc),
        opt_metric(m.sensitivity),
        opt_metric(m.specificity),
        m.tp,
        m.fp,
        m.tn,
        m.fn_
    )
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SynthReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a SynthSpec,
    manifest: String,
    n_subjects: usize,
    n_rois: usize,
    n_sites: usize,
    n_positive: usize,
}

pub fn synth(config_path: Option<&Path>, out: &Path, overrides: &Overrides) -> CliResult<()> {
    let mut spec: SynthSpec = config::load_or_default(config_path)?;
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let header = report::header_for("synth", &spec, Some(spec.seed), overrides.echo())?;

    let records = generate_synthetic(&spec)?;
    ensure_out_dir(out)?;
    let manifest = save_dataset(&out.join("dataset"), &records)?;
    let n_positive = records.iter().filter(|r| r.label == 1).count();
    let body = SynthReportFile {
        header: &header,
        config: &spec,
        manifest: manifest.display().to_string(),
        n_subjects: records.len(),
        n_rois: spec.n_rois,
        n_sites: spec.n_sites,
        n_positive,
    };
    let report_path = write_json_report(&out.join("synth_report.json"), &body)?;

    println!(
        "generated {} subjects ({} ROIs, {} sites, {} positive) -> {}",
        records.len(),
        spec.n_rois,
        spec.n_sites,
        n_positive,
        manifest.display()
    );
    announce(&report_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// import-ts
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ImportReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a ImportConfig,
    manifest: String,
    n_subjects: usize,
    n_rois: usize,
}

pub fn import_ts(config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg: ImportConfig = config::load_required(config_path)?;
    if cfg.subjects.is_empty() {
        return Err(CliError::Config("subjects list is empty".into()));
    }
    for subject in &cfg.subjects {
        if subject.label > 1 {
            return Err(CliError::Config(format!(
                "subject {}: label must be 0 or 1, got {}",
                subject.subject_id, subject.label
            )));
        }
        config::require_file(&subject.csv_path)?;
    }
    let header = report::header_for("import-ts", &cfg, None, Vec::new())?;

    let mut records = Vec::with_capacity(cfg.subjects.len());
    for subject in &cfg.subjects {
        let (_names, ts) = read_timeseries_csv(&subject.csv_path)?;
        let fc = match cfg.estimator {
            Estimator::Pearson => pearson_fc(&ts),
            Estimator::LedoitWolf => ledoit_wolf_fc(&ts),
        }
        .map_err(|e| annotate_subject(e, &subject.subject_id))?;
        records.push(SubjectRecord {
            subject_id: subject.subject_id.clone(),
            site_id: subject.site_id.clone(),
            label: subject.label,
            fc,
        });
    }
    let n_rois = records[0].fc.n_rois();
    for rec in &records {
        if rec.fc.n_rois() != n_rois {
            return Err(CliError::Core(Error::Validation(format!(
                "subject {} has {} ROIs but subject {} has {}",
                records[0].subject_id,
                n_rois,
                rec.subject_id,
                rec.fc.n_rois()
            ))));
        }
    }

    ensure_out_dir(out)?;
    let manifest = save_dataset(&out.join("dataset"), &records)?;
    let body = ImportReportFile {
        header: &header,
        config: &cfg,
        manifest: manifest.display().to_string(),
        n_subjects: records.len(),
        n_rois,
    };
    let report_path = write_json_report(&out.join("import_report.json"), &body)?;

    println!("imported {} subjects ({} ROIs) -> {}", records.len(), n_rois, manifest.display());
    announce(&report_path);
    Ok(())
}

fn annotate_subject(err: Error, subject_id: &str) -> CliError {
    CliError::Core(match err {
        Error::Validation(msg) => Error::Validation(format!("subject {subject_id}: {msg}")),
        other => other,
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrainReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a TrainCommandConfig,
    checkpoint: String,
    history: String,
    n_train: usize,
    n_val: usize,
    best_epoch: usize,
    epochs_run: usize,
    final_train_loss: Option<f64>,
    val_metrics: Option<MetricsReport>,
}

pub fn train_cmd(config_path: Option<&Path>, out: &Path, overrides: &Overrides) -> CliResult<()> {
    let mut cfg: TrainCommandConfig = config::load_required(config_path)?;
    overrides.apply_to_train(&mut cfg.train);
    cfg.train.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(CliError::Config(format!(
            "val_fraction must lie in [0, 1), got {}",
            cfg.val_fraction
        )));
    }
    let manifest = config::resolve_manifest(&cfg.dataset)?;
    let header = report::header_for("train", &cfg, Some(cfg.train.seed), overrides.echo())?;

    let records = load_dataset(&manifest)?;
    let (fit, val) = if cfg.val_fraction == 0.0 {
        (records, Vec::new())
    } else {
        split_stratified(&records, cfg.val_fraction, cfg.train.seed)?
    };
    let outcome = train(&cfg.train, &fit, &val)?;

    ensure_out_dir(out)?;
    let checkpoint_path = out.join("checkpoint.hgal");
    save_checkpoint(&checkpoint_path, &outcome.hyper, outcome.n_nodes, &outcome.params)?;
    let history_path =
        write_text_report(&out.join("history.csv"), &header, &render_history_csv(&outcome.history))?;
    let val_metrics = if val.is_empty() {
        None
    } else {
        Some(evaluate(&outcome.params, &outcome.hyper, &val)?.metrics)
    };
    let body = TrainReportFile {
        header: &header,
        config: &cfg,
        checkpoint: checkpoint_path.display().to_string(),
        history: history_path.display().to_string(),
        n_train: fit.len(),
        n_val: val.len(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        final_train_loss: outcome.history.last().map(|h| h.train_loss),
        val_metrics: val_metrics.clone(),
    };
    let report_path = write_json_report(&out.join("train_report.json"), &body)?;

    match &val_metrics {
        Some(m) => println!(
            "best epoch {} of {}: {}",
            outcome.best_epoch,
            outcome.history.len(),
            metrics_line(m)
        ),
        None => println!(
            "trained {} epochs without a validation split; kept the final parameters",
            outcome.history.len()
        ),
    }
    announce(&checkpoint_path);
    announce(&history_path);
    announce(&report_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a EvalCommandConfig,
    metrics: &'a MetricsReport,
    per_subject: &'a [SubjectScore],
}

pub fn eval_cmd(config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg: EvalCommandConfig = config::load_required(config_path)?;
    config::require_file(&cfg.checkpoint)?;
    let manifest = config::resolve_manifest(&cfg.dataset)?;
    let header = report::header_for("eval", &cfg, None, Vec::new())?;

    let (hyper, _n_nodes, params) = load_checkpoint(&cfg.checkpoint)?;
    let records = load_dataset(&manifest)?;
    if records.is_empty() {
        return Err(CliError::Core(Error::Validation(format!(
            "dataset {} has no subjects",
            manifest.display()
        ))));
    }
    let outcome = evaluate(&params, &hyper, &records)?;

    ensure_out_dir(out)?;
    let body = EvalReportFile {
        header: &header,
        config: &cfg,
        metrics: &outcome.metrics,
        per_subject: &outcome.per_subject,
    };
    let report_path = write_json_report(&out.join("eval_report.json"), &body)?;

    println!("{} subjects: {}", records.len(), metrics_line(&outcome.metrics));
    announce(&report_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// cv
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct CvReportFile<'a> {
    header: &'a ReportHeader,
    #[serde(flatten)]
    report: &'a CvReport,
}

pub fn cv_cmd(
    config_path: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
    jobs: usize,
) -> CliResult<()> {
    let mut cfg: CvCommandConfig = config::load_required(config_path)?;
    overrides.apply_to_train(&mut cfg.train);
    cfg.train.validate()?;
    let manifest = config::resolve_manifest(&cfg.dataset)?;
    let header = report::header_for("cv", &cfg, Some(cfg.train.seed), overrides.echo())?;

    let records = load_dataset(&manifest)?;
    let cv_report = run_cv(&cfg.train, &records, cfg.protocol, jobs)?;

    ensure_out_dir(out)?;
    let body = CvReportFile { header: &header, report: &cv_report };
    let report_path = write_json_report(&out.join("cv_report.json"), &body)?;

    println!(
        "{} ({} folds): mean accuracy {} +- {}, mean auc {} +- {}",
        cv_report.config.protocol,
        cv_report.folds.len(),
        opt_metric(cv_report.summary.mean.accuracy),
        opt_metric(cv_report.summary.std.accuracy),
        opt_metric(cv_report.summary.mean.auc),
        opt_metric(cv_report.summary.std.auc),
    );
    announce(&report_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct AblationReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a AblateCommandConfig,
    rows: &'a [hyperfc::train::AblationRow],
}

pub fn ablate_cmd(
    config_path: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
    jobs: usize,
) -> CliResult<()> {
    let mut cfg: AblateCommandConfig = config::load_required(config_path)?;
    overrides.apply_to_train(&mut cfg.train);
    cfg.train.validate()?;
    let manifest = config::resolve_manifest(&cfg.dataset)?;
    let header = report::header_for("ablate", &cfg, Some(cfg.train.seed), overrides.echo())?;

    let records = load_dataset(&manifest)?;
    let rows = ablation_sweep(&cfg.train, &records, &cfg.axis, cfg.protocol, jobs)?;
    let table = render_ablation_table(&rows);

    ensure_out_dir(out)?;
    let body = AblationReportFile { header: &header, config: &cfg, rows: &rows };
    let report_path = write_json_report(&out.join("ablation_report.json"), &body)?;
    let table_path = write_text_report(&out.join("ablation_table.txt"), &header, &table)?;

    print!("{table}");
    announce(&report_path);
    announce(&table_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct InterpretReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a InterpretCommandConfig,
    #[serde(flatten)]
    report: &'a InterpretReport,
}

/// Entrywise mean of all subjects' FC matrices: the group-level connectivity
/// the exported hyperedge patterns are built from.
fn mean_fc(records: &[SubjectRecord]) -> CliResult<FCMatrix> {
    let n = records[0].fc.n_rois();
    let mut sum = DenseMatrix::zeros(n, n);
    for rec in records {
        if rec.fc.n_rois() != n {
            return Err(CliError::Core(Error::Validation(format!(
                "subject {} has {} ROIs, expected {n}",
                rec.subject_id,
                rec.fc.n_rois()
            ))));
        }
        sum.add_assign(rec.fc.values()).map_err(CliError::Core)?;
    }
    let mean = sum.scale(1.0 / records.len() as f64);
    FCMatrix::new(mean).map_err(CliError::Core)
}

pub fn interpret_cmd(config_path: Option<&Path>, out: &Path) -> CliResult<()> {
    let cfg: InterpretCommandConfig = config::load_required(config_path)?;
    if cfg.top_n == 0 {
        return Err(CliError::Config("top_n must be >= 1".into()));
    }
    config::require_file(&cfg.checkpoint)?;
    let manifest = config::resolve_manifest(&cfg.dataset)?;
    if let Some(names_path) = &cfg.roi_names {
        config::require_file(names_path)?;
    }
    let header = report::header_for("interpret", &cfg, None, Vec::new())?;

    let (hyper, n_nodes, params) = load_checkpoint(&cfg.checkpoint)?;
    let records = load_dataset(&manifest)?;
    if records.is_empty() {
        return Err(CliError::Core(Error::Validation(format!(
            "dataset {} has no subjects",
            manifest.display()
        ))));
    }
    let names = match &cfg.roi_names {
        Some(path) => Some(load_roi_names(path, n_nodes)?),
        None => None,
    };
    let (rankings, warnings) =
        roi_importance(&params, &hyper, &records, cfg.group_by, cfg.top_n, names.as_deref())?;

    let group_fc = mean_fc(&records)?;
    let hg = build_knn_hyperedges(&group_fc, hyper.k)?;
    let pattern_rois: Vec<usize> = match &cfg.pattern_rois {
        Some(list) => list.clone(),
        None => {
            // Default: the top-ranked ROI of each emitted group, deduplicated.
            let mut tops = Vec::new();
            for ranking in &rankings {
                if let Some(entry) = ranking.entries.first() {
                    if !tops.contains(&entry.roi_index) {
                        tops.push(entry.roi_index);
                    }
                }
            }
            tops
        }
    };
    let patterns = pattern_rois
        .iter()
        .map(|&roi| hyperedge_pattern(&params, &hg, roi))
        .collect::<Result<Vec<_>, _>>()?;
    let interpret = InterpretReport { rankings, warnings, patterns };

    ensure_out_dir(out)?;
    let body = InterpretReportFile { header: &header, config: &cfg, report: &interpret };
    let report_path = write_json_report(&out.join("report.json"), &body)?;
    let rankings_path = write_text_report(
        &out.join("roi_rankings.csv"),
        &header,
        &render_roi_rankings_csv(&interpret),
    )?;
    let edges_path = write_text_report(
        &out.join("hyperedge_edges.csv"),
        &header,
        &render_hyperedge_edges_csv(&interpret),
    )?;

    for warning in &interpret.warnings {
        eprintln!("warning: {warning}");
    }
    if let Some(ranking) = interpret.rankings.iter().find(|r| r.group == "all") {
        let preview: Vec<&str> =
            ranking.entries.iter().take(5).map(|e| e.roi_name.as_str()).collect();
        println!("top ROIs (all subjects): {}", preview.join(", "));
    }
    announce(&report_path);
    announce(&rankings_path);
    announce(&edges_path);
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GradcheckReportFile<'a> {
    header: &'a ReportHeader,
    config: &'a GradCheckSpec,
    max_rel_error: f64,
    worst_index: usize,
    n_params: usize,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck_cmd(config_path: Option<&Path>, out: &Path, overrides: &Overrides) -> CliResult<()> {
    let mut spec: GradCheckSpec = config::load_or_default(config_path)?;
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    if let Some(k) = overrides.k {
        spec.k = k;
    }
    let header = report::header_for("gradcheck", &spec, Some(spec.seed), overrides.echo())?;

    let check = model_gradient_check(&spec)?;

    ensure_out_dir(out)?;
    let body = GradcheckReportFile {
        header: &header,
        config: &spec,
        max_rel_error: check.max_rel_error,
        worst_index: check.worst_index,
        n_params: check.n_params,
        tolerance: check.tolerance,
        passed: check.passed(),
    };
    let report_path = write_json_report(&out.join("gradcheck_report.json"), &body)?;

    println!(
        "max relative error {:.3e} over {} parameters (tolerance {:.0e}): {}",
        check.max_rel_error,
        check.n_params,
        check.tolerance,
        if check.passed() { "PASS" } else { "FAIL" }
    );
    announce(&report_path);
    if !check.passed() {
        return Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {:.3e} >= tolerance {:.0e}",
            check.max_rel_error, check.tolerance
        )));
    }
    Ok(())
}
