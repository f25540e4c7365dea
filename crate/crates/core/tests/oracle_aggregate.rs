//! Hierarchical feature aggregation against brute-force oracles.
//!
//! The sample-weighted oracle computes each level's class vector as a plain
//! mean over the raw sample rows that belong to it; the child-mean oracle
//! walks the tree one level at a time averaging child vectors unweighted.
//! Both are scalar loops with no shared code paths.

use std::collections::BTreeMap;

use rand::Rng;

use hcal_core::aggregate::{aggregate_level, hierarchy_features, AggregationMode, FeatureRows};
use hcal_core::autodiff::{Graph, Tensor};
use hcal_core::seeding::rng_from;
use hcal_core::taxonomy::Taxonomy;

/// Mean of the raw sample rows labeled `class` at `level`, or None when the
/// class is absent from the batch.
fn direct_class_mean(
    features: &[Vec<f64>],
    labels_at_level: &[usize],
    class: usize,
) -> Option<Vec<f64>> {
    let members: Vec<&Vec<f64>> = features
        .iter()
        .zip(labels_at_level)
        .filter(|(_, &l)| l == class)
        .map(|(f, _)| f)
        .collect();
    if members.is_empty() {
        return None;
    }
    let d = members[0].len();
    let mut mean = vec![0.0; d];
    for row in &members {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= members.len() as f64;
    }
    Some(mean)
}

/// Unweighted child-class means, stepped level by level from the per-class
/// sample means at the finest level.
fn child_mean_oracle(
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    taxonomy: &Taxonomy,
) -> Vec<BTreeMap<usize, Vec<f64>>> {
    let d = features[0].len();
    let mut by_level: Vec<BTreeMap<usize, Vec<f64>>> = Vec::new();
    let mut first = BTreeMap::new();
    for class in 0..taxonomy.classes_at(1).unwrap() {
        if let Some(mean) = direct_class_mean(features, &labels[0], class) {
            first.insert(class, mean);
        }
    }
    by_level.push(first);
    for level in 2..=taxonomy.num_levels() {
        let below = by_level.last().unwrap().clone();
        let mut groups: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
        for (&child, vec) in &below {
            let parent = taxonomy.parent_index(level - 1, child).unwrap();
            groups.entry(parent).or_default().push(vec);
        }
        let mut level_means = BTreeMap::new();
        for (parent, children) in groups {
            let mut mean = vec![0.0; d];
            for row in &children {
                for (m, v) in mean.iter_mut().zip(row.iter()) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= children.len() as f64;
            }
            level_means.insert(parent, mean);
        }
        by_level.push(level_means);
    }
    by_level
}

struct Instance {
    taxonomy: Taxonomy,
    features: Vec<Vec<f64>>,
    labels: Vec<Vec<usize>>,
    d: usize,
}

fn random_instance(rng: &mut impl Rng) -> Instance {
    let c3 = rng.random_range(1..=2);
    let c2 = rng.random_range(c3..=4);
    let c1 = rng.random_range(c2..=6);
    let parents1: Vec<usize> = (0..c1).map(|i| i % c2).collect();
    let parents2: Vec<usize> = (0..c2).map(|i| i % c3).collect();
    let taxonomy =
        Taxonomy::from_parts(vec![c1, c2, c3], vec![parents1, parents2], None).unwrap();
    let n = rng.random_range(2..=10);
    let d = rng.random_range(1..=6);
    let features: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mut labels = vec![Vec::with_capacity(n); 3];
    for _ in 0..n {
        let fine = rng.random_range(0..c1);
        let mid = taxonomy.parent_index(1, fine).unwrap();
        let coarse = taxonomy.parent_index(2, mid).unwrap();
        labels[0].push(fine);
        labels[1].push(mid);
        labels[2].push(coarse);
    }
    Instance {
        taxonomy,
        features,
        labels,
        d,
    }
}

fn feature_node(graph: &mut Graph, inst: &Instance) -> hcal_core::autodiff::NodeId {
    let flat: Vec<f64> = inst.features.iter().flatten().copied().collect();
    graph.constant(Tensor::matrix(inst.features.len(), inst.d, flat).unwrap())
}

#[test]
fn sample_weighted_equals_direct_sample_means() {
    let mut rng = rng_from(3003);
    for case in 0..40 {
        let inst = random_instance(&mut rng);
        let mut graph = Graph::new();
        let f = feature_node(&mut graph, &inst);
        let feats = hierarchy_features(
            &mut graph,
            f,
            &inst.labels,
            &inst.taxonomy,
            AggregationMode::SampleWeighted,
        )
        .unwrap();

        for level in 2..=3 {
            let lf = &feats[level - 1];
            let classes = match &lf.rows {
                FeatureRows::PerClass { classes, .. } => classes.clone(),
                FeatureRows::PerSample => panic!("expected aggregated rows"),
            };
            let matrix = graph.value(lf.node);
            for (row, &class) in classes.iter().enumerate() {
                let expected =
                    direct_class_mean(&inst.features, &inst.labels[level - 1], class)
                        .expect("class listed but absent from batch");
                for (a, b) in matrix.row(row).iter().zip(&expected) {
                    assert!(
                        (a - b).abs() < 1e-12,
                        "case {case} level {level} class {class}: {a} vs {b}"
                    );
                }
            }
            // Every class present in the batch is listed.
            let mut present: Vec<usize> = inst.labels[level - 1].clone();
            present.sort_unstable();
            present.dedup();
            assert_eq!(classes, present, "case {case} level {level}");
        }
    }
}

#[test]
fn stepped_aggregation_composes_like_the_direct_jump() {
    let mut rng = rng_from(4004);
    for case in 0..40 {
        let inst = random_instance(&mut rng);
        let mut graph = Graph::new();
        let f = feature_node(&mut graph, &inst);
        let stepped = hierarchy_features(
            &mut graph,
            f,
            &inst.labels,
            &inst.taxonomy,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        let level1 = hcal_core::aggregate::LevelFeatures::per_sample(1, f);
        let direct = aggregate_level(
            &mut graph,
            &level1,
            &inst.labels,
            &inst.taxonomy,
            3,
            AggregationMode::SampleWeighted,
        )
        .unwrap();

        let a = graph.value(stepped[2].node).data().to_vec();
        let b = graph.value(direct.node).data().to_vec();
        assert_eq!(a.len(), b.len(), "case {case}");
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "case {case}: {x} vs {y}");
        }
    }
}

#[test]
fn child_mean_matches_the_stepwise_oracle() {
    let mut rng = rng_from(5005);
    for case in 0..40 {
        let inst = random_instance(&mut rng);
        let mut graph = Graph::new();
        let f = feature_node(&mut graph, &inst);
        let feats = hierarchy_features(
            &mut graph,
            f,
            &inst.labels,
            &inst.taxonomy,
            AggregationMode::ChildMean,
        )
        .unwrap();
        let oracle = child_mean_oracle(&inst.features, &inst.labels, &inst.taxonomy);

        for level in 2..=3 {
            let lf = &feats[level - 1];
            let classes = match &lf.rows {
                FeatureRows::PerClass { classes, .. } => classes.clone(),
                FeatureRows::PerSample => panic!("expected aggregated rows"),
            };
            let matrix = graph.value(lf.node);
            let expected_map = &oracle[level - 1];
            assert_eq!(
                classes,
                expected_map.keys().copied().collect::<Vec<_>>(),
                "case {case} level {level}"
            );
            for (row, class) in classes.iter().enumerate() {
                let expected = &expected_map[class];
                for (a, b) in matrix.row(row).iter().zip(expected) {
                    assert!(
                        (a - b).abs() < 1e-12,
                        "case {case} level {level} class {class}: {a} vs {b}"
                    );
                }
            }
        }
    }
}
