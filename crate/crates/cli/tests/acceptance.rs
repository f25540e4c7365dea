//! End-to-end acceptance suite: one test per shipped guarantee, each
//! printing a `criterion NN (...): PASS` line on success.
//!
//! Oracles here are deliberately independent re-derivations: plain loops
//! over scalars with no shared helpers from the production crates. Numeric
//! tolerances are pinned as constants so a change in either direction is a
//! visible diff.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use hcal_core::aggregate::{
    aggregate_level, hierarchy_features, labels_by_level, AggregationMode, LevelFeatures,
};
use hcal_core::autodiff::{Graph, ParamStore, Tensor};
use hcal_core::dataset::{generate, load_dataset, SynthSpec};
use hcal_core::metrics::{
    hvr, metrics_report, read_predictions, HvrNorm, InferenceMode, PredictionRecord,
};
use hcal_core::objective::{adaptive_weights, info_nce_level1, info_nce_levelk, NegativeSet};
use hcal_core::prototypes::{LevelPrototypeNodes, PerturbMode, PrototypeBank};
use hcal_core::seeding::rng_from;
use hcal_core::taxonomy::{load_taxonomy, Taxonomy};
use hcal_core::trainer::{
    fit, gradcheck_total_loss, predict_with_state, TrainConfig, Weighting,
};

const GRADCHECK_MAX_REL_ERROR: f64 = 1e-4;
const GRADCHECK_BUDGET_SECS: f64 = 10.0;
const INFONCE_ORACLE_TOL: f64 = 1e-10;
const INFONCE_ORACLE_CASES: usize = 100;
const CLOSED_FORM_TOL: f64 = 1e-6;
const WEIGHT_SUM_TOL: f64 = 1e-12;
const WEIGHT_PAIR_TOL: f64 = 1e-6;
const WEIGHT_LIMIT_TOL: f64 = 1e-6;
const AGGREGATION_TOL: f64 = 1e-12;
const PERTURB_EPSILON: f64 = 0.05;
const PERTURB_DIM: usize = 256;
const PERTURB_DRAWS: u64 = 10_000;
const PERTURB_NORM_TOL: f64 = 1e-9;
const CONVERGENCE_MIN_ACC: f64 = 0.95;
const CONVERGENCE_MAX_HVR: f64 = 0.02;
const CONVERGENCE_BUDGET_SECS: f64 = 120.0;
const CONVERGENCE_EPOCHS: usize = 300;
const CONVERGENCE_SEEDS: [u64; 3] = [42, 43, 44];
const ABLATION_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

fn hcal() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hcal"));
    cmd.env_remove("HCAL_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) {
    let output = cmd.output().expect("binary should spawn");
    assert!(
        output.status.code() == Some(0),
        "command {:?} exited with {:?}\nstdout: {}\nstderr: {}",
        cmd,
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr),
    );
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let report = gradcheck_total_loss(42, 1.0).expect("gradcheck fixture should build");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(report.coords_checked > 0, "no coordinates were checked");
    assert!(
        report.max_rel_error < GRADCHECK_MAX_REL_ERROR,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst,
    );
    assert!(
        elapsed < GRADCHECK_BUDGET_SECS,
        "gradcheck took {elapsed:.2} s",
    );
    println!("criterion 01 (gradient correctness): PASS");
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reference contrastive loss, nested loops over scalars. Each anchor pays
/// for two positives, its class's base and perturbed prototype, against a
/// shared log-denominator over the negative pool.
fn reference_info_nce(
    anchors: &[Vec<f64>],
    classes: &[usize],
    base: &[Vec<f64>],
    perturbed: &[Vec<f64>],
    tau: f64,
    negatives: NegativeSet,
) -> f64 {
    let mut total = 0.0;
    for (anchor, &class) in anchors.iter().zip(classes) {
        let a = normalize(anchor);
        let mut pool = Vec::new();
        for p in base {
            pool.push(dot(&a, &normalize(p)) / tau);
        }
        match negatives {
            NegativeSet::BaseAndPerturbed => {
                for p in perturbed {
                    pool.push(dot(&a, p) / tau);
                }
            }
            NegativeSet::BaseOnly => pool.push(dot(&a, &perturbed[class]) / tau),
        }
        let max = pool.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_denom = max + pool.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        total += log_denom - dot(&a, &normalize(&base[class])) / tau;
        total += log_denom - dot(&a, &perturbed[class]) / tau;
    }
    total / anchors.len() as f64
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn round_robin_two_level(c1: usize, c2: usize) -> Taxonomy {
    let parents = (0..c1).map(|i| i % c2).collect();
    Taxonomy::from_parts(vec![c1, c2], vec![parents], None).unwrap()
}

#[test]
fn criterion_02_infonce_oracle_equivalence() {
    let mut rng = rng_from(0x1001);
    // Fine-level loss, one anchor per sample.
    for case in 0..INFONCE_ORACLE_CASES {
        let n = rng.random_range(1..=6);
        let c1 = rng.random_range(2..=5);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..2.0);
        let epsilon = rng.random_range(0.0..0.3);
        let negatives = if case % 2 == 0 {
            NegativeSet::BaseAndPerturbed
        } else {
            NegativeSet::BaseOnly
        };
        let taxonomy = round_robin_two_level(c1, 2.min(c1));
        let mut store = ParamStore::new();
        let bank = PrototypeBank::init(
            &taxonomy,
            &[1],
            d,
            epsilon,
            PerturbMode::PerStep,
            rng.random(),
            &mut store,
        )
        .unwrap();
        let noise = bank.noise_for_step(&store, rng.random()).unwrap();
        let features: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c1)).collect();

        let mut graph = Graph::new();
        let f = graph.constant(Tensor::matrix(n, d, features.clone()).unwrap());
        let protos = bank.graph_nodes(&mut graph, &store, &noise).unwrap();
        let loss = info_nce_level1(&mut graph, f, &labels, &protos[0], tau, negatives).unwrap();
        let produced = graph.value(loss).scalar_value().unwrap();

        let anchors: Vec<Vec<f64>> =
            (0..n).map(|i| features[i * d..(i + 1) * d].to_vec()).collect();
        let expected = reference_info_nce(
            &anchors,
            &labels,
            &tensor_rows(graph.value(protos[0].base)),
            &tensor_rows(graph.value(protos[0].perturbed)),
            tau,
            negatives,
        );
        assert!(
            (produced - expected).abs() < INFONCE_ORACLE_TOL,
            "level-1 case {case}: produced {produced}, reference {expected}",
        );
    }

    // Coarse-level loss, one anchor per class present in the batch.
    for case in 0..INFONCE_ORACLE_CASES {
        let c2 = rng.random_range(2..=3);
        let c1 = c2 * rng.random_range(1..=2);
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.05..2.0);
        let epsilon = rng.random_range(0.0..0.3);
        let negatives = if case % 2 == 0 {
            NegativeSet::BaseAndPerturbed
        } else {
            NegativeSet::BaseOnly
        };
        let taxonomy = round_robin_two_level(c1, c2);
        let mut store = ParamStore::new();
        let bank = PrototypeBank::init_all_levels(
            &taxonomy,
            d,
            epsilon,
            PerturbMode::PerStep,
            rng.random(),
            &mut store,
        )
        .unwrap();
        let noise = bank.noise_for_step(&store, rng.random()).unwrap();
        let features: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let chains: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let fine = rng.random_range(0..c1);
                vec![fine, taxonomy.parent_index(1, fine).unwrap()]
            })
            .collect();
        let chain_refs: Vec<&[usize]> = chains.iter().map(|c| c.as_slice()).collect();
        let labels = labels_by_level(&chain_refs, 2).unwrap();

        let mut graph = Graph::new();
        let f = graph.constant(Tensor::matrix(n, d, features).unwrap());
        let protos = bank.graph_nodes(&mut graph, &store, &noise).unwrap();
        let feats = hierarchy_features(
            &mut graph,
            f,
            &labels,
            &taxonomy,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        let loss = info_nce_levelk(&mut graph, &feats[1], &protos[1], tau, negatives).unwrap();
        let produced = graph.value(loss).scalar_value().unwrap();

        let expected = reference_info_nce(
            &tensor_rows(graph.value(feats[1].node)),
            feats[1].classes().unwrap(),
            &tensor_rows(graph.value(protos[1].base)),
            &tensor_rows(graph.value(protos[1].perturbed)),
            tau,
            negatives,
        );
        assert!(
            (produced - expected).abs() < INFONCE_ORACLE_TOL,
            "coarse case {case}: produced {produced}, reference {expected}",
        );
    }

    // Closed form: one anchor equal to its own class prototype, the other
    // prototype orthogonal, no perturbation, tau = 1. Both positives score
    // e over a denominator of 2e + 2.
    let mut graph = Graph::new();
    let anchor = graph.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let base = graph.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let protos = LevelPrototypeNodes {
        level: 1,
        num_classes: 2,
        base,
        perturbed: base,
    };
    let loss = info_nce_level1(
        &mut graph,
        anchor,
        &[0],
        &protos,
        1.0,
        NegativeSet::BaseAndPerturbed,
    )
    .unwrap();
    let produced = graph.value(loss).scalar_value().unwrap();
    let closed_form = 2.0 * ((2.0 * std::f64::consts::E + 2.0).ln() - 1.0);
    assert!(
        (produced - closed_form).abs() < CLOSED_FORM_TOL,
        "closed form: produced {produced}, expected {closed_form}",
    );
    println!("criterion 02 (contrastive-loss oracle equivalence): PASS");
}

#[test]
fn criterion_03_adaptive_weight_properties() {
    let mut rng = rng_from(0x3003);

    // Simplex membership on random inputs.
    for _ in 0..200 {
        let m = rng.random_range(1..=6);
        let losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
        let gamma = rng.random_range(0.05..5.0);
        let weights = adaptive_weights(&losses, gamma).unwrap();
        let sum: f64 = weights.iter().sum();
        assert!(
            (sum - 1.0).abs() < WEIGHT_SUM_TOL,
            "weights sum to {sum} for losses {losses:?}",
        );
        assert!(weights.iter().all(|&w| w > 0.0));
    }

    // Equal losses give the uniform simplex point exactly.
    for m in 1..=8 {
        let losses = vec![1.7; m];
        let weights = adaptive_weights(&losses, 0.5).unwrap();
        for &w in &weights {
            assert_eq!(w, 1.0 / m as f64, "uniform weight at m = {m}");
        }
    }

    // Worked two-task example.
    let pair = adaptive_weights(&[1.0, 0.5], 0.5).unwrap();
    assert!((pair[0] - 0.731059).abs() < WEIGHT_PAIR_TOL, "got {}", pair[0]);
    assert!((pair[1] - 0.268941).abs() < WEIGHT_PAIR_TOL, "got {}", pair[1]);

    // Larger loss, larger weight.
    for _ in 0..100 {
        let m = rng.random_range(2..=6);
        let mut losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..4.0)).collect();
        for (i, l) in losses.iter_mut().enumerate() {
            *l += i as f64 * 0.01;
        }
        let gamma = rng.random_range(0.1..3.0);
        let weights = adaptive_weights(&losses, gamma).unwrap();
        for i in 0..m {
            for j in 0..m {
                if losses[i] > losses[j] {
                    assert!(
                        weights[i] > weights[j],
                        "losses {losses:?} gave weights {weights:?}",
                    );
                }
            }
        }
    }

    // Temperature limits: flat at huge gamma, winner-take-all at tiny.
    for m in 2..=5 {
        let losses: Vec<f64> = (0..m).map(|i| i as f64 / m as f64).collect();
        let flat = adaptive_weights(&losses, 1e6).unwrap();
        for &w in &flat {
            assert!(
                (w - 1.0 / m as f64).abs() < WEIGHT_LIMIT_TOL,
                "gamma=1e6 weight {w} at m = {m}",
            );
        }
        let sharp = adaptive_weights(&losses, 1e-6).unwrap();
        let max = sharp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > 1.0 - WEIGHT_LIMIT_TOL, "gamma=1e-6 max weight {max}");
    }
    println!("criterion 03 (adaptive-weight properties): PASS");
}

fn round_robin_three_level(c1: usize, c2: usize, c3: usize) -> Taxonomy {
    let parents1 = (0..c1).map(|i| i % c2).collect();
    let parents2 = (0..c2).map(|j| j % c3).collect();
    Taxonomy::from_parts(vec![c1, c2, c3], vec![parents1, parents2], None).unwrap()
}

/// Plain per-class arithmetic means of the raw feature rows, grouped by the
/// given per-sample labels, classes ascending.
fn direct_class_means(features: &[Vec<f64>], labels: &[usize]) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let d = features[0].len();
    let mut means = Vec::with_capacity(classes.len());
    for &c in &classes {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(f, _)| f)
            .collect();
        let mut mean = vec![0.0; d];
        for f in &members {
            for (m, v) in mean.iter_mut().zip(f.iter()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= members.len() as f64;
        }
        means.push(mean);
    }
    (classes, means)
}

#[test]
fn criterion_04_aggregation_oracle() {
    let mut rng = rng_from(0x4004);
    for case in 0..120 {
        let c3 = rng.random_range(1..=2);
        let c2 = c3 * rng.random_range(1..=2);
        let c1 = c2 * rng.random_range(1..=3);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(2..=6);
        let taxonomy = round_robin_three_level(c1, c2, c3);

        let feature_rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let chains: Vec<Vec<usize>> = (0..n)
            .map(|_| {
                let fine = rng.random_range(0..c1);
                let mid = taxonomy.parent_index(1, fine).unwrap();
                let top = taxonomy.parent_index(2, mid).unwrap();
                vec![fine, mid, top]
            })
            .collect();
        let chain_refs: Vec<&[usize]> = chains.iter().map(|c| c.as_slice()).collect();
        let labels = labels_by_level(&chain_refs, 3).unwrap();

        let flat: Vec<f64> = feature_rows.iter().flatten().copied().collect();
        let mut graph = Graph::new();
        let f = graph.constant(Tensor::matrix(n, d, flat).unwrap());
        let feats = hierarchy_features(
            &mut graph,
            f,
            &labels,
            &taxonomy,
            AggregationMode::SampleWeighted,
        )
        .unwrap();

        // Every aggregated level equals the plain per-class sample means.
        for level in 2..=3 {
            let produced = &feats[level - 1];
            let (expected_classes, expected_means) =
                direct_class_means(&feature_rows, &labels[level - 1]);
            assert_eq!(
                produced.classes().unwrap(),
                expected_classes.as_slice(),
                "case {case} level {level} class set",
            );
            let matrix = graph.value(produced.node);
            for (row, mean) in expected_means.iter().enumerate() {
                for (col, &want) in mean.iter().enumerate() {
                    let got = matrix.row(row)[col];
                    assert!(
                        (got - want).abs() < AGGREGATION_TOL,
                        "case {case} level {level} row {row} col {col}: {got} vs {want}",
                    );
                }
            }
        }

        // Composition: the one-jump aggregation to the top level matches
        // the stepped walk the hierarchy builder performs.
        let start = LevelFeatures::per_sample(1, f);
        let direct = aggregate_level(
            &mut graph,
            &start,
            &labels,
            &taxonomy,
            3,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        assert_eq!(direct.classes(), feats[2].classes(), "case {case}");
        let direct_matrix = tensor_rows(graph.value(direct.node));
        let stepped_matrix = tensor_rows(graph.value(feats[2].node));
        for (r, (a, b)) in direct_matrix.iter().zip(&stepped_matrix).enumerate() {
            for (c, (x, y)) in a.iter().zip(b).enumerate() {
                assert!(
                    (x - y).abs() < AGGREGATION_TOL,
                    "case {case} row {r} col {c}: {x} vs {y}",
                );
            }
        }
    }
    println!("criterion 04 (aggregation oracle): PASS");
}

fn record(id: &str, pred: Vec<usize>) -> PredictionRecord {
    PredictionRecord {
        id: id.to_string(),
        pred,
        scores: None,
    }
}

/// Count parent mismatches between adjacent levels of each predicted tuple.
fn brute_force_violations(preds: &[PredictionRecord], taxonomy: &Taxonomy) -> u64 {
    let mut count = 0;
    for p in preds {
        for k in 2..=taxonomy.num_levels() {
            let expected = taxonomy.parent_index(k - 1, p.pred[k - 2]).unwrap();
            if expected != p.pred[k - 1] {
                count += 1;
            }
        }
    }
    count
}

#[test]
fn criterion_05_hvr_correctness() {
    let mut rng = rng_from(0x5005);

    // Consistent chains score exactly zero under both normalizations.
    for _ in 0..50 {
        let c2 = rng.random_range(1..=3);
        let c1 = c2 * rng.random_range(1..=3);
        let taxonomy = round_robin_two_level(c1.max(2), c2);
        let n = rng.random_range(1..=10);
        let preds: Vec<PredictionRecord> = (0..n)
            .map(|i| {
                let fine = rng.random_range(0..c1.max(2));
                let parent = taxonomy.parent_index(1, fine).unwrap();
                record(&format!("s{i}"), vec![fine, parent])
            })
            .collect();
        assert_eq!(hvr(&preds, &taxonomy, HvrNorm::EdgeFraction).unwrap(), 0.0);
        assert_eq!(hvr(&preds, &taxonomy, HvrNorm::PaperEq15).unwrap(), 0.0);
    }

    // Four samples, one broken edge: 1/(4*1) and 1/(4*8) exactly.
    let taxonomy =
        Taxonomy::from_parts(vec![8, 2], vec![vec![0, 0, 0, 0, 1, 1, 1, 1]], None).unwrap();
    let preds = vec![
        record("a", vec![0, 0]),
        record("b", vec![5, 1]),
        record("c", vec![2, 1]),
        record("d", vec![7, 1]),
    ];
    assert_eq!(hvr(&preds, &taxonomy, HvrNorm::EdgeFraction).unwrap(), 0.25);
    assert_eq!(hvr(&preds, &taxonomy, HvrNorm::PaperEq15).unwrap(), 0.03125);

    // Random tuples against the brute-force counter, exact equality.
    for case in 0..100 {
        let (taxonomy, m) = if case % 2 == 0 {
            let c2 = rng.random_range(1..=3);
            let c1 = c2 * rng.random_range(1..=3);
            (round_robin_two_level(c1.max(2), c2), 2)
        } else {
            let c3 = rng.random_range(1..=2);
            let c2 = c3 * rng.random_range(1..=2);
            let c1 = c2 * rng.random_range(1..=3);
            (round_robin_three_level(c1.max(2), c2.max(1), c3), 3)
        };
        let n = rng.random_range(1..=12);
        let preds: Vec<PredictionRecord> = (0..n)
            .map(|i| {
                let tuple = (1..=m)
                    .map(|k| rng.random_range(0..taxonomy.classes_at(k).unwrap()))
                    .collect();
                record(&format!("s{i}"), tuple)
            })
            .collect();
        let violations = brute_force_violations(&preds, &taxonomy);
        let r: usize = (1..m).map(|k| taxonomy.classes_at(k).unwrap()).sum();
        let expected_edge = violations as f64 / (n as f64 * (m - 1) as f64);
        let expected_paper = violations as f64 / (n as f64 * r as f64);
        assert_eq!(
            hvr(&preds, &taxonomy, HvrNorm::EdgeFraction).unwrap(),
            expected_edge,
            "case {case} edge normalization",
        );
        assert_eq!(
            hvr(&preds, &taxonomy, HvrNorm::PaperEq15).unwrap(),
            expected_paper,
            "case {case} label-count normalization",
        );
    }
    println!("criterion 05 (violation-rate correctness): PASS");
}

#[test]
fn criterion_06_perturbation_contract() {
    let taxonomy = round_robin_two_level(4, 2);
    let mut store = ParamStore::new();
    let bank = PrototypeBank::init_all_levels(
        &taxonomy,
        PERTURB_DIM,
        PERTURB_EPSILON,
        PerturbMode::PerStep,
        42,
        &mut store,
    )
    .unwrap();

    for step in 0..PERTURB_DRAWS {
        let noise = bank.noise_for_step(&store, step).unwrap();
        for tensor in &noise {
            for &v in tensor.data() {
                assert!(
                    (-PERTURB_EPSILON..=PERTURB_EPSILON).contains(&v),
                    "noise coordinate {v} escapes the band at step {step}",
                );
            }
        }
        let mut graph = Graph::new();
        let nodes = bank.graph_nodes(&mut graph, &store, &noise).unwrap();
        for node in &nodes {
            let perturbed = graph.value(node.perturbed);
            for row in 0..perturbed.rows() {
                let norm: f64 = perturbed.row(row).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(
                    (norm - 1.0).abs() <= PERTURB_NORM_TOL,
                    "perturbed row {row} at level {} has norm {norm} at step {step}",
                    node.level,
                );
            }
        }
    }

    // Zero epsilon flows through the same nodes and lands on the stored
    // parameters bit for bit.
    let mut store0 = ParamStore::new();
    let bank0 = PrototypeBank::init_all_levels(
        &taxonomy,
        PERTURB_DIM,
        0.0,
        PerturbMode::PerStep,
        42,
        &mut store0,
    )
    .unwrap();
    for step in [0, 1, 999] {
        let noise = bank0.noise_for_step(&store0, step).unwrap();
        for tensor in &noise {
            assert!(tensor.data().iter().all(|&v| v == 0.0));
        }
        let mut graph = Graph::new();
        let nodes = bank0.graph_nodes(&mut graph, &store0, &noise).unwrap();
        for node in &nodes {
            let perturbed = graph.value(node.perturbed);
            let base = bank0.base_matrix(&store0, node.level).unwrap();
            assert_eq!(perturbed.rows(), base.rows());
            for (a, b) in perturbed.data().iter().zip(base.data()) {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "zero-noise prototypes deviate from the parameter at level {}",
                    node.level,
                );
            }
        }
    }
    println!("criterion 06 (perturbation contract): PASS");
}

fn desk_spec(sigma: f64, seed: u64) -> SynthSpec {
    SynthSpec {
        classes_per_level: vec![8, 4, 2],
        input_dim: 16,
        separation: 10.0,
        noise_sigma: sigma,
        samples_per_class: 100,
        train_fraction: 0.8,
        seed,
    }
}

#[test]
fn criterion_07_synthetic_convergence() {
    for &seed in &CONVERGENCE_SEEDS {
        let start = Instant::now();
        let synth = generate(&desk_spec(0.5, seed)).unwrap();
        let mut config = TrainConfig::new(CONVERGENCE_EPOCHS);
        config.seed = seed;
        config.output_dim = 64;
        let (_report, state) = fit(&synth.train, &synth.taxonomy, &config).unwrap();
        let preds = predict_with_state(
            &state,
            &synth.test,
            &synth.taxonomy,
            InferenceMode::PerSample,
        )
        .unwrap();
        let metrics = metrics_report(&preds, &synth.test, &synth.taxonomy).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        for (idx, &acc) in metrics.acc.iter().enumerate() {
            assert!(
                acc >= CONVERGENCE_MIN_ACC,
                "seed {seed}: level {} accuracy {acc}",
                idx + 1,
            );
        }
        assert!(
            metrics.hvr_edge_fraction <= CONVERGENCE_MAX_HVR,
            "seed {seed}: violation rate {}",
            metrics.hvr_edge_fraction,
        );
        assert!(
            elapsed < CONVERGENCE_BUDGET_SECS,
            "seed {seed}: run took {elapsed:.1} s",
        );
    }
    println!("criterion 07 (synthetic convergence): PASS");
}

fn median5(values: &[f64]) -> f64 {
    assert_eq!(values.len(), 5);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[2]
}

#[test]
fn criterion_08_ablation_trend() {
    let mut full = Vec::new();
    let mut fixed = Vec::new();
    let mut single = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let synth = generate(&desk_spec(2.0, seed)).unwrap();
        for slot in 0..3 {
            let mut config = TrainConfig::new(CONVERGENCE_EPOCHS);
            config.seed = seed;
            config.output_dim = 64;
            match slot {
                1 => config.weighting = Weighting::Fixed,
                2 => config.ablation.multi_task = false,
                _ => {}
            }
            let (_report, state) = fit(&synth.train, &synth.taxonomy, &config).unwrap();
            let preds = predict_with_state(
                &state,
                &synth.test,
                &synth.taxonomy,
                InferenceMode::PerSample,
            )
            .unwrap();
            let rate = hvr(&preds, &synth.taxonomy, HvrNorm::EdgeFraction).unwrap();
            match slot {
                0 => full.push(rate),
                1 => fixed.push(rate),
                _ => single.push(rate),
            }
        }
    }
    let (full_med, fixed_med, single_med) =
        (median5(&full), median5(&fixed), median5(&single));
    assert!(
        full_med <= fixed_med,
        "full {full_med} vs fixed weights {fixed_med}\nfull: {full:?}\nfixed: {fixed:?}",
    );
    assert!(
        full_med <= single_med,
        "full {full_med} vs single-task {single_med}\nfull: {full:?}\nsingle: {single:?}",
    );
    assert!(
        single_med > full_med && single_med > fixed_med,
        "single-task {single_med} should exceed full {full_med} and fixed {fixed_med}\n\
         full: {full:?}\nfixed: {fixed:?}\nsingle: {single:?}",
    );
    println!("criterion 08 (ablation trend): PASS");
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    run_ok(hcal().args([
        "synth",
        "--levels",
        "4,2",
        "--per-class",
        "30",
        "--seed",
        "7",
        "--out",
    ])
    .arg(&data));

    let train_args = |out: &Path, epochs: &str| {
        let mut cmd = hcal();
        cmd.arg("train")
            .arg("--taxonomy")
            .arg(data.join("taxonomy.json"))
            .arg("--train-data")
            .arg(data.join("train.jsonl"))
            .arg("--epochs")
            .arg(epochs)
            .arg("--seed")
            .arg("7")
            .arg("--out")
            .arg(out);
        cmd
    };

    // Identical configurations, byte-identical reports.
    let first = root.join("first");
    let second = root.join("second");
    run_ok(&mut train_args(&first, "40"));
    run_ok(&mut train_args(&second, "40"));
    let report_a = std::fs::read(first.join("report.csv")).unwrap();
    let report_b = std::fs::read(second.join("report.csv")).unwrap();
    assert_eq!(report_a, report_b, "reruns should match byte for byte");

    // A resumed run replays the steps of an unbroken one.
    let phase1 = root.join("phase1");
    run_ok(&mut train_args(&phase1, "20"));
    let resumed = root.join("resumed");
    let mut resume_cmd = train_args(&resumed, "40");
    resume_cmd.arg("--resume").arg(phase1.join("checkpoint.json"));
    run_ok(&mut resume_cmd);

    let unbroken_csv = String::from_utf8(report_a).unwrap();
    let phase1_csv = std::fs::read_to_string(phase1.join("report.csv")).unwrap();
    let resumed_csv = std::fs::read_to_string(resumed.join("report.csv")).unwrap();
    let resumed_rows = resumed_csv
        .split_once('\n')
        .map(|(_, rest)| rest)
        .unwrap_or_default();
    let spliced = format!("{phase1_csv}{resumed_rows}");
    assert_eq!(
        unbroken_csv, spliced,
        "phase-1 rows plus resumed rows should equal the unbroken report",
    );

    let unbroken_ckpt = std::fs::read(first.join("checkpoint.json")).unwrap();
    let resumed_ckpt = std::fs::read(resumed.join("checkpoint.json")).unwrap();
    assert_eq!(
        unbroken_ckpt, resumed_ckpt,
        "resumed checkpoint should equal the unbroken one",
    );
    println!("criterion 09 (determinism): PASS");
}

#[test]
fn criterion_10_cli_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    run_ok(hcal().args([
        "synth",
        "--levels",
        "4,2",
        "--per-class",
        "25",
        "--seed",
        "11",
        "--out",
    ])
    .arg(&data));

    let trained = root.join("trained");
    run_ok(hcal()
        .arg("train")
        .arg("--taxonomy")
        .arg(data.join("taxonomy.json"))
        .arg("--train-data")
        .arg(data.join("train.jsonl"))
        .arg("--epochs")
        .arg("25")
        .arg("--seed")
        .arg("11")
        .arg("--out")
        .arg(&trained));

    let evaluated = root.join("evaluated");
    run_ok(hcal()
        .arg("eval")
        .arg("--checkpoint")
        .arg(trained.join("checkpoint.json"))
        .arg("--data")
        .arg(data.join("test.jsonl"))
        .arg("--taxonomy")
        .arg(data.join("taxonomy.json"))
        .arg("--out")
        .arg(&evaluated));

    let rescored = root.join("rescored");
    run_ok(hcal()
        .arg("metrics")
        .arg("--pred")
        .arg(evaluated.join("predictions.jsonl"))
        .arg("--truth")
        .arg(data.join("test.jsonl"))
        .arg("--taxonomy")
        .arg(data.join("taxonomy.json"))
        .arg("--out")
        .arg(&rescored));

    // Every artifact parses under its schema.
    let taxonomy = load_taxonomy(&data.join("taxonomy.json")).unwrap();
    let test_set = load_dataset(&data.join("test.jsonl"), &taxonomy).unwrap();
    assert!(!test_set.is_empty());
    let preds = read_predictions(&evaluated.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.len(), test_set.len());

    let report_csv = std::fs::read_to_string(trained.join("report.csv")).unwrap();
    let mut lines = report_csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,L_1,L_2,lambda_1,lambda_2,total",
    );
    assert_eq!(lines.count(), 25, "one report row per epoch");

    let metrics_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evaluated.join("metrics.json")).unwrap())
            .unwrap();

    // The written summary agrees with a recomputation from the prediction
    // file and the ground truth.
    let recomputed = metrics_report(&preds, &test_set, &taxonomy).unwrap();
    assert_eq!(metrics_json["n"].as_u64().unwrap() as usize, recomputed.n);
    assert_eq!(metrics_json["m"].as_u64().unwrap() as usize, recomputed.m);
    assert_eq!(metrics_json["R"].as_u64().unwrap() as usize, recomputed.r);
    let acc: Vec<f64> = metrics_json["acc"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(acc, recomputed.acc);
    assert_eq!(
        metrics_json["hvr_edge_fraction"].as_f64().unwrap(),
        recomputed.hvr_edge_fraction,
    );
    assert_eq!(
        metrics_json["hvr_paper_eq15"].as_f64().unwrap(),
        recomputed.hvr_paper_eq15,
    );

    // The standalone scorer reproduces the evaluation summary exactly.
    let from_eval = std::fs::read(evaluated.join("metrics.json")).unwrap();
    let from_metrics = std::fs::read(rescored.join("metrics.json")).unwrap();
    assert_eq!(from_eval, from_metrics);
    println!("criterion 10 (pipeline round trip): PASS");
}
