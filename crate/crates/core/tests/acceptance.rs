//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single summary line on success:
//!
//! `[acceptance] C<n> <name>: PASS — <measured detail>`
//!
//! Run `cargo test --test acceptance -- --nocapture` to see every line.
//! Criteria 10-12 (file-format rejection via exit codes, byte-identical CLI
//! reports, README reference results) live in the CLI crate's test suite.

use std::fmt::Display;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hyperfc::autodiff::Graph;
use hyperfc::data::{generate_synthetic, pearson_fc, split_stratified, SynthSpec};
use hyperfc::hypergraph::{propagation_matrix, FCMatrix};
use hyperfc::interpret::{roi_importance, GroupBy};
use hyperfc::model::{forward, hypergraph_conv, model_gradient_check, GradCheckSpec};
use hyperfc::train::{
    ablation_sweep, evaluate, roc_auc, run_cv, train, AblationAxis, CvProtocol, TrainConfig,
};
use hyperfc::{build_knn_hyperedges, DenseMatrix, HyperParams};

fn pass(number: usize, name: &str, detail: impl Display) {
    println!("[acceptance] C{number} {name}: PASS — {detail}");
}

/// Random FC matrix via the Pearson estimator over uniform noise; generic
/// values, so neighbor selection is tie-free.
fn random_fc(n: usize, rng: &mut ChaCha8Rng) -> FCMatrix {
    let t = n + 12;
    let ts = DenseMatrix::from_vec(t, n, (0..t * n).map(|_| rng.random::<f64>()).collect())
        .expect("shape is consistent");
    pearson_fc(&ts).expect("uniform noise has no constant column")
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape is consistent")
}

#[test]
fn c1_full_model_gradient_oracle() {
    let spec = GradCheckSpec::default();
    assert_eq!((spec.n_nodes, spec.k), (8, 3));
    assert_eq!((spec.hidden_dim, spec.att_hidden, spec.readout_dim), (4, 4, 4));
    let started = Instant::now();
    let report = model_gradient_check(&spec).expect("gradient check runs");
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} >= 1e-4",
        report.max_rel_error
    );
    assert!(elapsed < 10.0, "gradient check took {elapsed:.1}s (limit 10s)");
    pass(
        1,
        "gradient-oracle",
        format!(
            "max rel error {:.2e} over {} parameters in {:.2}s",
            report.max_rel_error, report.n_params, elapsed
        ),
    );
}

#[test]
fn c2_propagation_is_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2001);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(4..=32);
        let k = rng.random_range(2..=n);
        let fc = random_fc(n, &mut rng);
        let hg = build_knn_hyperedges(&fc, k).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..4.0)).collect();
        let p = propagation_matrix(&hg, &w).unwrap();
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let v = p.get(i, j);
                assert!(v >= 0.0, "negative propagation entry [{i}][{j}] = {v}");
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
            assert!(
                (sum - 1.0).abs() <= 1e-10,
                "row {i} sums to {sum} (n={n}, k={k})"
            );
        }
    }
    pass(
        2,
        "row-stochastic-propagation",
        format!("20 random hypergraphs (N <= 32), worst |row sum - 1| = {worst:.2e}"),
    );
}

/// Evaluate relu(P X Theta) through the graph ops, with P rebuilt from the
/// hypergraph and softplus of the raw weights.
fn conv_output(
    x: &DenseMatrix,
    incidence: &DenseMatrix,
    raw_w: &[f64],
    theta: &DenseMatrix,
    k: usize,
) -> DenseMatrix {
    let mut g = Graph::new();
    let x_id = g.input(x.clone());
    let h = g.input(incidence.clone());
    let h_t = g.input(incidence.transpose());
    let raw = g.input(DenseMatrix::from_vec(raw_w.len(), 1, raw_w.to_vec()).unwrap());
    let w_eff = g.softplus(raw);
    let theta_id = g.input(theta.clone());
    let out = hypergraph_conv(&mut g, x_id, h, h_t, w_eff, theta_id, k).unwrap();
    g.value(out).clone()
}

fn permute_rows(m: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    let (rows, cols) = m.shape();
    let mut out = DenseMatrix::zeros(rows, cols);
    for (new_row, &old_row) in perm.iter().enumerate() {
        for c in 0..cols {
            out.set(new_row, c, m.get(old_row, c));
        }
    }
    out
}

fn permute_both_axes(m: &DenseMatrix, perm: &[usize]) -> DenseMatrix {
    let (n, _) = m.shape();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, m.get(perm[i], perm[j]));
        }
    }
    out
}

#[test]
fn c3_convolution_commutes_with_node_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3001);
    let (n, f_in, f_out, k) = (9, 5, 3, 4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let fc = random_fc(n, &mut rng);
        let x = random_matrix(n, f_in, &mut rng);
        let theta = random_matrix(f_in, f_out, &mut rng);
        let raw_w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hg = build_knn_hyperedges(&fc, k).unwrap();
        let out = conv_output(&x, hg.incidence(), &raw_w, &theta, k);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let fc_p = FCMatrix::new(permute_both_axes(fc.values(), &perm)).unwrap();
        let hg_p = build_knn_hyperedges(&fc_p, k).unwrap();
        // Hyperedge j is centered on node j, so permuting nodes permutes the
        // incidence on both axes.
        assert_eq!(
            hg_p.incidence().data(),
            permute_both_axes(hg.incidence(), &perm).data(),
            "incidence of permuted FC differs from permuted incidence"
        );
        let x_p = permute_rows(&x, &perm);
        let raw_w_p: Vec<f64> = perm.iter().map(|&i| raw_w[i]).collect();
        let out_p = conv_output(&x_p, hg_p.incidence(), &raw_w_p, &theta, k);

        let expected = permute_rows(&out, &perm);
        for (a, b) in out_p.data().iter().zip(expected.data()) {
            let diff = (a - b).abs();
            worst = worst.max(diff);
            assert!(diff <= 1e-12, "equivariance violated: |{a} - {b}| = {diff}");
        }
    }
    pass(
        3,
        "convolution-equivariance",
        format!("10 random permutations (N = {n}), worst |difference| = {worst:.2e}"),
    );
}

#[test]
fn c4_repeated_propagation_contracts_feature_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(4001);
    let mut tightest_start = f64::INFINITY;
    let mut tightest_end = f64::INFINITY;
    for _ in 0..10 {
        let n = rng.random_range(5..=16);
        let k = rng.random_range(2..=n);
        let fc = random_fc(n, &mut rng);
        let hg = build_knn_hyperedges(&fc, k).unwrap();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let p = propagation_matrix(&hg, &w).unwrap();
        let mut x = random_matrix(n, 3, &mut rng);

        let feature_range = |m: &DenseMatrix, col: usize| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in 0..m.shape().0 {
                lo = lo.min(m.get(row, col));
                hi = hi.max(m.get(row, col));
            }
            (lo, hi)
        };

        let mut ranges: Vec<(f64, f64)> = (0..3).map(|c| feature_range(&x, c)).collect();
        tightest_start = tightest_start.min(ranges.iter().map(|(lo, hi)| hi - lo).fold(f64::INFINITY, f64::min));
        for application in 0..10 {
            x = p.matmul(&x).unwrap();
            for (col, prev) in ranges.iter_mut().enumerate() {
                let (lo, hi) = feature_range(&x, col);
                assert!(
                    lo >= prev.0 - 1e-12 && hi <= prev.1 + 1e-12,
                    "application {application}: range [{lo}, {hi}] escapes [{}, {}]",
                    prev.0,
                    prev.1
                );
                assert!(
                    hi - lo <= (prev.1 - prev.0) + 1e-12,
                    "application {application}: range width grew"
                );
                *prev = (lo, hi);
            }
        }
        tightest_end = tightest_end.min(ranges.iter().map(|(lo, hi)| hi - lo).fold(f64::INFINITY, f64::min));
    }
    pass(
        4,
        "range-contraction",
        format!(
            "10 applications x 10 instances; narrowest feature range {tightest_start:.3} -> {tightest_end:.2e}"
        ),
    );
}

fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[test]
fn c5_auc_matches_brute_force_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5001);
    for case in 0..100 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            labels[0] = 1 - labels[0];
        }
        let quantize = case % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s = rng.random::<f64>();
                // Half the instances quantize scores to force ties.
                if quantize { (s * 10.0).round() / 10.0 } else { s }
            })
            .collect();
        let expected = brute_force_auc(&scores, &labels);
        let got = roc_auc(&scores, &labels);
        assert_eq!(got, expected, "case {case}: scores {scores:?} labels {labels:?}");
    }

    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]), Some(1.0));
    assert_eq!(roc_auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]), Some(0.5));
    assert_eq!(roc_auc(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]), Some(0.75));
    assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), None);
    pass(
        5,
        "auc-oracle",
        "100 random instances (n <= 50) equal brute force exactly; worked examples 1.0 / 0.5 / 0.75",
    );
}

#[test]
fn c6_planted_structure_is_learned_and_null_is_not() {
    // Planted effect, default training configuration, held-out test fold.
    let spec = SynthSpec::default();
    assert_eq!(
        (spec.n_subjects, spec.n_rois, spec.n_timepoints, spec.n_sites),
        (200, 40, 150, 4)
    );
    assert_eq!((spec.effect_strength, spec.block_size, spec.site_noise), (0.4, 10, 0.1));
    let config = TrainConfig::default();
    assert_eq!(config.epochs, 100);
    let records = generate_synthetic(&spec).unwrap();
    let (rest, test) = split_stratified(&records, 0.2, config.seed).unwrap();
    let (fit, val) = split_stratified(&rest, 0.125, config.seed).unwrap();
    let started = Instant::now();
    let outcome = train(&config, &fit, &val).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let metrics = evaluate(&outcome.params, &outcome.hyper, &test).unwrap().metrics;
    let accuracy = metrics.accuracy.unwrap();
    let auc = metrics.auc.unwrap();
    assert!(accuracy >= 0.90, "held-out accuracy {accuracy} < 0.90");
    assert!(auc >= 0.95, "held-out auc {auc} < 0.95");
    assert!(elapsed < 300.0, "planted run took {elapsed:.0}s (limit 300s)");

    // Optimization sanity on the same run: the first epoch already improves
    // on chance loss, and the smoothed loss curve never rises.
    let first_loss = outcome.history[0].train_loss;
    assert!(first_loss < std::f64::consts::LN_2 + 0.05, "first epoch loss {first_loss}");
    let losses: Vec<f64> = outcome.history.iter().map(|h| h.train_loss).collect();
    let moving: Vec<f64> =
        losses.windows(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in moving.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-3, "smoothed loss rose: {} -> {}", pair[0], pair[1]);
    }

    // Null control: no planted effect, same protocol, five fixed seeds.
    let mut null_aucs = Vec::new();
    for seed in [101u64, 102, 103, 104, 105] {
        let null_spec = SynthSpec { effect_strength: 0.0, seed, ..SynthSpec::default() };
        let null_records = generate_synthetic(&null_spec).unwrap();
        let null_config = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let (rest, test) = split_stratified(&null_records, 0.2, null_config.seed).unwrap();
        let (fit, val) = split_stratified(&rest, 0.125, null_config.seed).unwrap();
        let outcome = train(&null_config, &fit, &val).unwrap();
        let metrics = evaluate(&outcome.params, &outcome.hyper, &test).unwrap().metrics;
        null_aucs.push(metrics.auc.unwrap());
    }
    let null_mean = null_aucs.iter().sum::<f64>() / null_aucs.len() as f64;
    assert!(
        (0.4..=0.6).contains(&null_mean),
        "null-control mean auc {null_mean} outside [0.4, 0.6] ({null_aucs:?})"
    );

    pass(
        6,
        "planted-structure-learning",
        format!(
            "held-out accuracy {accuracy:.3}, auc {auc:.3} in {elapsed:.0}s; null mean auc {null_mean:.3} over 5 seeds"
        ),
    );
}

fn small_planted_spec() -> SynthSpec {
    SynthSpec {
        n_subjects: 24,
        n_rois: 10,
        n_timepoints: 40,
        n_sites: 2,
        class_balance: 0.5,
        block_size: 3,
        effect_strength: 0.5,
        site_noise: 0.1,
        seed: 11,
    }
}

fn small_hyper() -> HyperParams {
    HyperParams {
        k: 4,
        hidden_dims: vec![8],
        att_hidden: 4,
        readout_dim: 8,
        ..HyperParams::default()
    }
}

#[test]
fn c7_gated_attention_and_edge_weight_ablation_modes() {
    let records = generate_synthetic(&small_planted_spec()).unwrap();
    let config = TrainConfig { epochs: 2, seed: 5, hyper: small_hyper(), ..TrainConfig::default() };

    let rows =
        ablation_sweep(&config, &records, &AblationAxis::GaHe, CvProtocol::KFold(2), 1).unwrap();
    let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    assert_eq!(
        settings,
        ["ga=on,he=learned", "ga=on,he=frozen", "ga=off,he=learned", "ga=off,he=frozen"]
    );

    // Frozen hyperedge weights: effective weights are exactly 1.0 after
    // training; a learned run moves them.
    let mut frozen_cfg =
        TrainConfig { epochs: 4, seed: 5, hyper: small_hyper(), ..TrainConfig::default() };
    frozen_cfg.hyper.learn_edge_weights = false;
    let frozen = train(&frozen_cfg, &records, &[]).unwrap();
    for w in frozen.params.effective_edge_weights() {
        assert_eq!(w, 1.0, "frozen effective weight drifted to {w}");
    }
    let mut learned_cfg = frozen_cfg.clone();
    learned_cfg.hyper.learn_edge_weights = true;
    let learned = train(&learned_cfg, &records, &[]).unwrap();
    assert!(
        learned.params.effective_edge_weights().iter().any(|&w| w != 1.0),
        "learned run left every effective weight at exactly 1.0"
    );

    // Gated attention off: alpha is uniform 1/N even after training.
    let mut no_ga_cfg =
        TrainConfig { epochs: 4, seed: 5, hyper: small_hyper(), ..TrainConfig::default() };
    no_ga_cfg.hyper.use_gated_attention = false;
    let no_ga = train(&no_ga_cfg, &records, &[]).unwrap();
    let n = records[0].fc.n_rois();
    let out = forward(&no_ga.params, &no_ga.hyper, &records[0].fc).unwrap();
    for &a in &out.alpha {
        assert_eq!(a, 1.0 / n as f64, "ga-off alpha {a} != 1/{n}");
    }

    pass(
        7,
        "ga-he-ablation-modes",
        format!(
            "2x2 sweep = 4 settings {settings:?}; frozen weights exactly 1.0 after {} epochs; ga-off alpha uniform 1/{n}",
            frozen_cfg.epochs
        ),
    );
}

#[test]
fn c8_leave_one_site_out_partitions_and_reports() {
    let spec = SynthSpec {
        n_subjects: 48,
        n_rois: 12,
        n_timepoints: 50,
        n_sites: 4,
        class_balance: 0.5,
        block_size: 4,
        effect_strength: 0.5,
        site_noise: 0.1,
        seed: 13,
    };
    let records = generate_synthetic(&spec).unwrap();

    let folds = hyperfc::data::loso_splits(&records).unwrap();
    assert_eq!(folds.len(), 4);
    let mut tested: Vec<&str> = Vec::new();
    for (site, train_part, test_part) in &folds {
        assert_eq!(train_part.len() + test_part.len(), records.len());
        assert!(test_part.iter().all(|r| &r.site_id == site));
        assert!(train_part.iter().all(|r| &r.site_id != site));
        tested.extend(test_part.iter().map(|r| r.subject_id.as_str()));
    }
    tested.sort_unstable();
    let mut all_ids: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    all_ids.sort_unstable();
    assert_eq!(tested, all_ids, "each subject must be tested exactly once");

    let config = TrainConfig { epochs: 5, seed: 5, hyper: small_hyper(), ..TrainConfig::default() };
    let report = run_cv(&config, &records, CvProtocol::Loso, 1).unwrap();
    assert_eq!(report.folds.len(), 4);
    let fold_ids: Vec<&str> = report.folds.iter().map(|f| f.fold_id.as_str()).collect();
    assert_eq!(fold_ids, ["site-00", "site-01", "site-02", "site-03"]);
    let mean_acc = report.summary.mean.accuracy.expect("accuracy defined in every fold");
    let std_acc = report.summary.std.accuracy.expect("std defined for 4 folds");

    pass(
        8,
        "loso-protocol",
        format!(
            "4-site partition covers all {} subjects once; folds {fold_ids:?}; accuracy {mean_acc:.3} +- {std_acc:.3}"
        , records.len()),
    );
}

#[test]
fn c9_interpretability_recovers_planted_block() {
    let mut hit_fractions = Vec::new();
    let mut block_means = Vec::new();
    let mut other_means = Vec::new();
    for seed in [21u64, 22, 23, 24, 25] {
        let spec = SynthSpec { seed, ..SynthSpec::default() };
        let block = spec.block_size;
        let records = generate_synthetic(&spec).unwrap();
        // Shorter, slightly hotter schedule than the defaults: enough for the
        // attention and edge-weight signals to settle on this dataset size.
        let config = TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let (fit, val) = split_stratified(&records, 0.1, config.seed).unwrap();
        let outcome = train(&config, &fit, &val).unwrap();

        let (rankings, _warnings) = roi_importance(
            &outcome.params,
            &outcome.hyper,
            &records,
            GroupBy::Prediction,
            10,
            None,
        )
        .unwrap();
        let all = rankings.iter().find(|r| r.group == "all").expect("'all' group present");
        assert_eq!(all.entries.len(), 10);
        let hits = all.entries.iter().filter(|e| e.roi_index < block).count();
        hit_fractions.push(hits as f64 / 10.0);

        let weights = outcome.params.effective_edge_weights();
        let block_mean = weights[..block].iter().sum::<f64>() / block as f64;
        let other_mean =
            weights[block..].iter().sum::<f64>() / (weights.len() - block) as f64;
        block_means.push(block_mean);
        other_means.push(other_mean);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let hit_mean = mean(&hit_fractions);
    let block_mean = mean(&block_means);
    let other_mean = mean(&other_means);
    assert!(
        hit_mean >= 0.5,
        "top-10 block hit fraction {hit_mean} < 0.5 over 5 seeds ({hit_fractions:?})"
    );
    assert!(
        block_mean > other_mean,
        "block-centered hyperedge weights ({block_mean}) not above others ({other_mean})"
    );
    pass(
        9,
        "interpretability-ground-truth",
        format!(
            "top-10 attention ROIs hit the planted block at {hit_mean:.2} (5-seed mean); edge weights {block_mean:.4} (block) vs {other_mean:.4} (other)"
        ),
    );
}
