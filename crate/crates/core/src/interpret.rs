//! Interpretability reports: ROI rankings from gated-attention scores and
//! hyperedge connectivity patterns from the learned hyperedge weights.
//!
//! Rankings average each ROI's attention over a subject group (all subjects,
//! or split by predicted/true class), sort descending and keep the top
//! entries, ties broken by lower ROI index. Patterns describe the hyperedge
//! centered on a chosen ROI: its member set and learned effective weight.
//! Exports are deterministic: identical model + records give byte-identical
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;
use crate::model::{forward, HyperParams, ModelParams};

/// How subjects are grouped before averaging attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    /// Model prediction at threshold 0.5 (strict: 1 iff p > 0.5).
    Prediction,
    /// Ground-truth label.
    TrueLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub roi_index: usize,
    pub roi_name: String,
    pub mean_attention: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRanking {
    /// "all", "asd_predicted"/"td_predicted" or "asd_label"/"td_label".
    pub group: String,
    pub n_subjects: usize,
    pub entries: Vec<RoiEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperedgeReport {
    /// Center ROI of the hyperedge.
    pub roi_index: usize,
    pub effective_weight: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    pub rankings: Vec<RoiRanking>,
    /// Groups that had no subjects are omitted from `rankings` and noted here.
    pub warnings: Vec<String>,
    pub patterns: Vec<HyperedgeReport>,
}

/// Default ROI name when no names file is given.
pub fn default_roi_name(index: usize) -> String {
    format!("roi_{index}")
}

/// Load ROI names: one non-empty line per ROI, exactly `n` lines.
pub fn load_roi_names(path: &Path, n: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    if names.len() != n || names.iter().any(String::is_empty) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "names file must hold exactly {n} non-empty lines, found {}",
                names.len()
            ),
        });
    }
    Ok(names)
}

fn ranking_for(
    group: &str,
    alphas: &[Vec<f64>],
    member_of: &[bool],
    names: &[String],
    top_n: usize,
) -> Option<RoiRanking> {
    let count = member_of.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let n_rois = names.len();
    let mut means = vec![0.0; n_rois];
    for (alpha, &included) in alphas.iter().zip(member_of) {
        if included {
            for (m, a) in means.iter_mut().zip(alpha) {
                *m += a;
            }
        }
    }
    for m in &mut means {
        *m /= count as f64;
    }
    let mut order: Vec<usize> = (0..n_rois).collect();
    order.sort_by(|&a, &b| {
        means[b]
            .partial_cmp(&means[a])
            .expect("attention values are finite")
            .then(a.cmp(&b))
    });
    let entries = order
        .into_iter()
        .take(top_n.min(n_rois))
        .map(|roi| RoiEntry {
            roi_index: roi,
            roi_name: names[roi].clone(),
            mean_attention: means[roi],
        })
        .collect();
    Some(RoiRanking { group: group.to_string(), n_subjects: count, entries })
}

/// Rank ROIs by mean attention: one ranking over all subjects plus one per
/// class group. Empty groups are dropped with a warning entry instead of an
/// error, so single-class predictions still produce a usable report.
pub fn roi_importance(
    params: &ModelParams,
    hyper: &HyperParams,
    records: &[SubjectRecord],
    group_by: GroupBy,
    top_n: usize,
    roi_names: Option<&[String]>,
) -> Result<(Vec<RoiRanking>, Vec<String>)> {
    if records.is_empty() {
        return Err(Error::Protocol("roi_importance needs at least one subject".into()));
    }
    let n_rois = records[0].fc.n_rois();
    let names: Vec<String> = match roi_names {
        Some(names) => {
            if names.len() != n_rois {
                return Err(Error::Parameter(format!(
                    "{} ROI names supplied for {n_rois} ROIs",
                    names.len()
                )));
            }
            names.to_vec()
        }
        None => (0..n_rois).map(default_roi_name).collect(),
    };

    let mut alphas = Vec::with_capacity(records.len());
    let mut positives = Vec::with_capacity(records.len());
    for rec in records {
        let out = forward(params, hyper, &rec.fc)?;
        alphas.push(out.alpha);
        positives.push(match group_by {
            GroupBy::Prediction => out.probability > 0.5,
            GroupBy::TrueLabel => rec.label == 1,
        });
    }

    let suffix = match group_by {
        GroupBy::Prediction => "predicted",
        GroupBy::TrueLabel => "label",
    };
    let all = vec![true; records.len()];
    let negatives: Vec<bool> = positives.iter().map(|&p| !p).collect();
    let groups: [(String, &[bool]); 3] = [
        ("all".to_string(), &all),
        (format!("asd_{suffix}"), &positives),
        (format!("td_{suffix}"), &negatives),
    ];

    let mut rankings = Vec::new();
    let mut warnings = Vec::new();
    for (name, members) in groups {
        match ranking_for(&name, &alphas, members, &names, top_n) {
            Some(r) => rankings.push(r),
            None => warnings.push(format!("group {name} has no subjects; ranking omitted")),
        }
    }
    Ok((rankings, warnings))
}

/// Describe the hyperedge centered on `roi_index`: members plus its current
/// effective (softplus) weight.
pub fn hyperedge_pattern(
    params: &ModelParams,
    hg: &Hypergraph,
    roi_index: usize,
) -> Result<HyperedgeReport> {
    if roi_index >= hg.n_hyperedges() {
        return Err(Error::Parameter(format!(
            "roi_index {roi_index} out of range for {} hyperedges",
            hg.n_hyperedges()
        )));
    }
    let weights = params.effective_edge_weights();
    if weights.len() != hg.n_hyperedges() {
        return Err(Error::Contract(format!(
            "model has {} hyperedge weights but the hypergraph has {} hyperedges",
            weights.len(),
            hg.n_hyperedges()
        )));
    }
    Ok(HyperedgeReport {
        roi_index,
        effective_weight: weights[roi_index],
        members: hg.members(roi_index).to_vec(),
    })
}

/// CSV body for the ROI rankings: `roi_index,name,group,mean_attention`.
pub fn render_roi_rankings_csv(report: &InterpretReport) -> String {
    let mut csv = String::from("roi_index,name,group,mean_attention\n");
    for ranking in &report.rankings {
        for entry in &ranking.entries {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                entry.roi_index, entry.roi_name, ranking.group, entry.mean_attention
            ));
        }
    }
    csv
}

/// CSV body for the hyperedge edge list: `source_roi,target_roi,weight`.
/// Each pattern's member set expands into its k*(k-1)/2 undirected pairs,
/// weighted by the hyperedge's effective weight.
pub fn render_hyperedge_edges_csv(report: &InterpretReport) -> String {
    let mut csv = String::from("source_roi,target_roi,weight\n");
    for pattern in &report.patterns {
        for (a_pos, &a) in pattern.members.iter().enumerate() {
            for &b in &pattern.members[a_pos + 1..] {
                csv.push_str(&format!("{a},{b},{}\n", pattern.effective_weight));
            }
        }
    }
    csv
}

/// Write `report.json`, `roi_rankings.csv` and `hyperedge_edges.csv` under
/// `dir`. Returns the written paths.
pub fn export_report(report: &InterpretReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    let write = |path: PathBuf, content: String| -> Result<PathBuf> {
        fs::write(&path, content).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        Ok(path)
    };

    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Validation(format!("report serialization: {e}")))?;
    let json_path = write(dir.join("report.json"), json + "\n")?;
    let rankings_path = write(dir.join("roi_rankings.csv"), render_roi_rankings_csv(report))?;
    let edges_path = write(dir.join("hyperedge_edges.csv"), render_hyperedge_edges_csv(report))?;
    Ok(vec![json_path, rankings_path, edges_path])
}
