//! Bottom-up feature aggregation over the label hierarchy.
//!
//! Level-1 features are one row per sample. Coarser levels hold one row per
//! class that is present in the batch, formed as means of the rows one level
//! below. Two means are supported: `sample_weighted` weights every child row
//! by how many original samples it covers, which makes the recursive build
//! agree with grouping raw samples directly, and `child_mean` averages the
//! child class rows unweighted so small subclasses count as much as large
//! ones.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// How child rows are averaged into a parent row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Weight each child by its sample count; equals the plain mean over
    /// all covered samples.
    SampleWeighted,
    /// Unweighted mean over the child class rows present in the batch.
    ChildMean,
}

/// What the rows of a feature matrix stand for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureRows {
    /// One row per batch sample, in batch order.
    PerSample,
    /// One row per class present in the batch, ascending by class index.
    PerClass {
        classes: Vec<usize>,
        /// Samples covered by each class row, aligned with `classes`.
        member_counts: Vec<usize>,
    },
}

/// A feature matrix at one taxonomy level, held as a graph node.
#[derive(Clone, Debug)]
pub struct LevelFeatures {
    pub level: usize,
    pub node: NodeId,
    pub rows: FeatureRows,
}

impl LevelFeatures {
    /// Wrap per-sample features as the level-1 entry point.
    pub fn per_sample(level: usize, node: NodeId) -> Self {
        LevelFeatures {
            level,
            node,
            rows: FeatureRows::PerSample,
        }
    }

    /// Class index for each row, or `None` for per-sample rows.
    pub fn classes(&self) -> Option<&[usize]> {
        match &self.rows {
            FeatureRows::PerSample => None,
            FeatureRows::PerClass { classes, .. } => Some(classes),
        }
    }
}

/// Group sample indices by class label, ascending by class. Every label must
/// be below `num_classes`.
pub fn partition_by_class(
    labels: &[usize],
    num_classes: usize,
    level: usize,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (sample, &class) in labels.iter().enumerate() {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange {
                level,
                index: class,
                limit: num_classes,
            });
        }
        groups.entry(class).or_default().push(sample);
    }
    Ok(groups)
}

/// Mean the rows of a per-sample matrix into per-class rows for `level`,
/// using the given labels (one per row of `features`).
pub fn class_means(
    graph: &mut Graph,
    features: NodeId,
    labels: &[usize],
    level: usize,
    num_classes: usize,
) -> Result<LevelFeatures> {
    let n = graph.value(features).rows();
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "class means: feature rows vs labels".into(),
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    if n == 0 {
        return Err(Error::Data("cannot aggregate an empty batch".into()));
    }
    let groups = partition_by_class(labels, num_classes, level)?;
    let mut classes = Vec::with_capacity(groups.len());
    let mut member_counts = Vec::with_capacity(groups.len());
    let mut combos = Vec::with_capacity(groups.len());
    for (class, members) in &groups {
        let w = 1.0 / members.len() as f64;
        combos.push(members.iter().map(|&s| (s, w)).collect());
        classes.push(*class);
        member_counts.push(members.len());
    }
    let node = graph.combine_rows(features, combos)?;
    Ok(LevelFeatures {
        level,
        node,
        rows: FeatureRows::PerClass {
            classes,
            member_counts,
        },
    })
}

/// Aggregate `lower` one step up to `target_level` of `taxonomy`.
///
/// `batch_labels[k - 1]` holds the per-sample labels at level `k`. Starting
/// from per-sample rows, `sample_weighted` may jump several levels at once
/// because grouping by the target labels is already the weighted mean;
/// `child_mean` steps through adjacent levels only, since its value depends
/// on the intermediate class structure.
pub fn aggregate_level(
    graph: &mut Graph,
    lower: &LevelFeatures,
    batch_labels: &[Vec<usize>],
    taxonomy: &Taxonomy,
    target_level: usize,
    mode: AggregationMode,
) -> Result<LevelFeatures> {
    if target_level <= lower.level || target_level > taxonomy.num_levels() {
        return Err(Error::Config(format!(
            "cannot aggregate from level {} to level {target_level} in a {}-level taxonomy",
            lower.level,
            taxonomy.num_levels()
        )));
    }
    let target_labels = batch_labels
        .get(target_level - 1)
        .ok_or_else(|| Error::Config(format!("missing labels for level {target_level}")))?;

    match (&lower.rows, mode) {
        (FeatureRows::PerSample, AggregationMode::SampleWeighted) => class_means(
            graph,
            lower.node,
            target_labels,
            target_level,
            taxonomy.classes_at(target_level)?,
        ),
        (FeatureRows::PerSample, AggregationMode::ChildMean) => {
            if target_level != lower.level + 1 {
                return Err(Error::Config(
                    "child_mean aggregation moves one level at a time".into(),
                ));
            }
            let lower_labels = batch_labels
                .get(lower.level - 1)
                .ok_or_else(|| Error::Config(format!("missing labels for level {}", lower.level)))?;
            let child = class_means(
                graph,
                lower.node,
                lower_labels,
                lower.level,
                taxonomy.classes_at(lower.level)?,
            )?;
            step_up(graph, &child, taxonomy, mode)
        }
        (FeatureRows::PerClass { .. }, _) => {
            if target_level != lower.level + 1 {
                return Err(Error::Config(
                    "per-class aggregation moves one level at a time".into(),
                ));
            }
            step_up(graph, lower, taxonomy, mode)
        }
    }
}

/// One adjacent step from per-class rows at `lower.level` to its parents.
fn step_up(
    graph: &mut Graph,
    lower: &LevelFeatures,
    taxonomy: &Taxonomy,
    mode: AggregationMode,
) -> Result<LevelFeatures> {
    let (classes, member_counts) = match &lower.rows {
        FeatureRows::PerClass {
            classes,
            member_counts,
        } => (classes, member_counts),
        FeatureRows::PerSample => {
            return Err(Error::Config("step_up needs per-class rows".into()));
        }
    };
    let target = lower.level + 1;
    let mut grouped: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (row, (&class, &count)) in classes.iter().zip(member_counts).enumerate() {
        let parent = taxonomy.parent_index(lower.level, class)?;
        grouped.entry(parent).or_default().push((row, count));
    }
    let mut out_classes = Vec::with_capacity(grouped.len());
    let mut out_counts = Vec::with_capacity(grouped.len());
    let mut combos = Vec::with_capacity(grouped.len());
    for (parent, children) in &grouped {
        let total: usize = children.iter().map(|&(_, c)| c).sum();
        let combo = match mode {
            AggregationMode::SampleWeighted => children
                .iter()
                .map(|&(row, count)| (row, count as f64 / total as f64))
                .collect(),
            AggregationMode::ChildMean => {
                let w = 1.0 / children.len() as f64;
                children.iter().map(|&(row, _)| (row, w)).collect()
            }
        };
        combos.push(combo);
        out_classes.push(*parent);
        out_counts.push(total);
    }
    let node = graph.combine_rows(lower.node, combos)?;
    Ok(LevelFeatures {
        level: target,
        node,
        rows: FeatureRows::PerClass {
            classes: out_classes,
            member_counts: out_counts,
        },
    })
}

/// Build features for every level of `taxonomy` from per-sample level-1
/// rows, stepping one level at a time. Returns entries for levels
/// `1..=num_levels`, with the input as the first element.
pub fn hierarchy_features(
    graph: &mut Graph,
    level1: NodeId,
    batch_labels: &[Vec<usize>],
    taxonomy: &Taxonomy,
    mode: AggregationMode,
) -> Result<Vec<LevelFeatures>> {
    let m = taxonomy.num_levels();
    if batch_labels.len() != m {
        return Err(Error::ShapeMismatch {
            context: "hierarchy features: taxonomy levels vs label levels".into(),
            left: vec![m],
            right: vec![batch_labels.len()],
        });
    }
    let n = graph.value(level1).rows();
    for (k, labels) in batch_labels.iter().enumerate() {
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                context: format!("labels at level {}: samples vs labels", k + 1),
                left: vec![n],
                right: vec![labels.len()],
            });
        }
    }

    let mut out = vec![LevelFeatures::per_sample(1, level1)];
    for target in 2..=m {
        let next =
            aggregate_level(graph, &out[target - 2], batch_labels, taxonomy, target, mode)?;
        out.push(next);
    }
    Ok(out)
}

/// Per-sample label rows, one inner vector per level, from parallel slices
/// of label chains (finest first, as stored on disk).
pub fn labels_by_level(chains: &[&[usize]], num_levels: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::with_capacity(chains.len()); num_levels];
    for chain in chains {
        if chain.len() != num_levels {
            return Err(Error::ShapeMismatch {
                context: "label chains: levels vs entries".into(),
                left: vec![num_levels],
                right: vec![chain.len()],
            });
        }
        for (k, &class) in chain.iter().enumerate() {
            out[k].push(class);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn tax_322() -> Taxonomy {
        // Level 1 has three classes; 0 and 1 share a parent.
        Taxonomy::from_parts(vec![3, 2], vec![vec![0, 0, 1]], None).unwrap()
    }

    fn graph_with(features: Vec<f64>, n: usize, d: usize) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let node = g.constant(Tensor::matrix(n, d, features).unwrap());
        (g, node)
    }

    #[test]
    fn partition_groups_by_class_in_order() {
        let groups = partition_by_class(&[2, 0, 2, 1], 3, 1).unwrap();
        let as_vec: Vec<(usize, Vec<usize>)> =
            groups.into_iter().map(|(k, v)| (k, v)).collect();
        assert_eq!(
            as_vec,
            vec![(0, vec![1]), (1, vec![3]), (2, vec![0, 2])]
        );
    }

    #[test]
    fn partition_rejects_out_of_range_labels() {
        let err = partition_by_class(&[0, 3], 3, 2).unwrap_err();
        assert!(err.to_string().contains("level 2"));
    }

    #[test]
    fn sample_weighted_and_child_mean_agree_on_balanced_children() {
        // Two samples in distinct child classes under one parent.
        let (mut g, f) = graph_with(vec![1.0, 0.0, 3.0, 0.0], 2, 2);
        let labels = vec![vec![0, 1], vec![0, 0]];
        let tax = tax_322();
        let lower = LevelFeatures::per_sample(1, f);
        for mode in [AggregationMode::SampleWeighted, AggregationMode::ChildMean] {
            let up = aggregate_level(&mut g, &lower, &labels, &tax, 2, mode).unwrap();
            assert_eq!(g.value(up.node).data(), &[2.0, 0.0]);
            assert_eq!(up.classes(), Some(&[0usize][..]));
        }
    }

    #[test]
    fn modes_differ_on_unbalanced_children() {
        // Class 0 holds [0,0] and [2,0]; class 1 holds [4,0]; same parent.
        let (mut g, f) = graph_with(vec![0.0, 0.0, 2.0, 0.0, 4.0, 0.0], 3, 2);
        let labels = vec![vec![0, 0, 1], vec![0, 0, 0]];
        let tax = tax_322();
        let lower = LevelFeatures::per_sample(1, f);

        let sw = aggregate_level(
            &mut g,
            &lower,
            &labels,
            &tax,
            2,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        assert_eq!(g.value(sw.node).data(), &[2.0, 0.0]);

        let cm = aggregate_level(
            &mut g,
            &lower,
            &labels,
            &tax,
            2,
            AggregationMode::ChildMean,
        )
        .unwrap();
        assert_eq!(g.value(cm.node).data(), &[2.5, 0.0]);
    }

    #[test]
    fn member_counts_track_covered_samples() {
        let tax =
            Taxonomy::from_parts(vec![4, 2, 1], vec![vec![0, 0, 1, 1], vec![0, 0]], None)
                .unwrap();
        let (mut g, f) = graph_with(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 4, 2);
        let labels = vec![vec![0, 1, 3, 3], vec![0, 0, 1, 1], vec![0, 0, 0, 0]];
        let per_level = hierarchy_features(
            &mut g,
            f,
            &labels,
            &tax,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        match &per_level[1].rows {
            FeatureRows::PerClass {
                classes,
                member_counts,
            } => {
                assert_eq!(classes, &[0, 1]);
                assert_eq!(member_counts, &[2, 2]);
            }
            _ => panic!("expected per-class rows"),
        }
        match &per_level[2].rows {
            FeatureRows::PerClass {
                classes,
                member_counts,
            } => {
                assert_eq!(classes, &[0]);
                assert_eq!(member_counts, &[4]);
            }
            _ => panic!("expected per-class rows"),
        }
    }

    #[test]
    fn recursive_sample_weighted_matches_direct_grouping() {
        // Three levels, unbalanced occupancy, known values.
        let tax =
            Taxonomy::from_parts(vec![4, 2, 1], vec![vec![0, 0, 1, 1], vec![0, 0]], None)
                .unwrap();
        let data = vec![
            1.0, 0.0, //
            5.0, 2.0, //
            3.0, 4.0, //
            7.0, 0.0, //
            9.0, 6.0, //
        ];
        let (mut g, f) = graph_with(data, 5, 2);
        let labels = vec![
            vec![0, 0, 1, 2, 3],
            vec![0, 0, 0, 1, 1],
            vec![0, 0, 0, 0, 0],
        ];
        let per_level = hierarchy_features(
            &mut g,
            f,
            &labels,
            &tax,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        let lower = LevelFeatures::per_sample(1, f);
        for target in 2..=3 {
            let direct = aggregate_level(
                &mut g,
                &lower,
                &labels,
                &tax,
                target,
                AggregationMode::SampleWeighted,
            )
            .unwrap();
            let a = g.value(per_level[target - 1].node).clone();
            let b = g.value(direct.node);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // Level 3 is the plain mean of all five samples.
        let top = g.value(per_level[2].node);
        assert!((top.data()[0] - 5.0).abs() < 1e-12);
        assert!((top.data()[1] - 2.4).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_get_no_rows() {
        let (mut g, f) = graph_with(vec![1.0, 1.0, 2.0, 2.0], 2, 2);
        // Both samples in class 2, whose parent is class 1.
        let labels = vec![vec![2, 2], vec![1, 1]];
        let tax = tax_322();
        let lower = LevelFeatures::per_sample(1, f);
        let up = aggregate_level(
            &mut g,
            &lower,
            &labels,
            &tax,
            2,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        assert_eq!(up.classes(), Some(&[1usize][..]));
        assert_eq!(g.value(up.node).rows(), 1);
    }

    #[test]
    fn batch_order_does_not_change_aggregates() {
        let data = vec![0.25, 1.0, -2.0, 0.5, 4.0, 3.0, 1.5, -1.0];
        let perm_data = vec![1.5, -1.0, 0.25, 1.0, 4.0, 3.0, -2.0, 0.5];
        let labels = vec![vec![0, 1, 2, 0], vec![0, 0, 1, 0]];
        let perm_labels = vec![vec![0, 0, 2, 1], vec![0, 0, 1, 0]];
        let tax = tax_322();
        for mode in [AggregationMode::SampleWeighted, AggregationMode::ChildMean] {
            let (mut g1, f1) = graph_with(data.clone(), 4, 2);
            let (mut g2, f2) = graph_with(perm_data.clone(), 4, 2);
            let a = hierarchy_features(&mut g1, f1, &labels, &tax, mode).unwrap();
            let b = hierarchy_features(&mut g2, f2, &perm_labels, &tax, mode).unwrap();
            for (x, y) in a.iter().zip(&b).skip(1) {
                let xv = g1.value(x.node).clone();
                let yv = g2.value(y.node);
                assert_eq!(x.classes(), y.classes());
                for (p, q) in xv.data().iter().zip(yv.data()) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn child_mean_refuses_level_jumps() {
        let (mut g, f) = graph_with(vec![1.0, 2.0], 1, 2);
        let tax =
            Taxonomy::from_parts(vec![2, 2, 1], vec![vec![0, 1], vec![0, 0]], None).unwrap();
        let labels = vec![vec![0], vec![0], vec![0]];
        let lower = LevelFeatures::per_sample(1, f);
        let err = aggregate_level(
            &mut g,
            &lower,
            &labels,
            &tax,
            3,
            AggregationMode::ChildMean,
        )
        .unwrap_err();
        assert!(err.to_string().contains("one level at a time"));
    }

    #[test]
    fn labels_by_level_transposes_chains() {
        let chains: Vec<&[usize]> = vec![&[2, 1], &[0, 0]];
        let rows = labels_by_level(&chains, 2).unwrap();
        assert_eq!(rows, vec![vec![2, 0], vec![1, 0]]);
        let bad: Vec<&[usize]> = vec![&[2]];
        assert!(labels_by_level(&bad, 2).is_err());
    }

    #[test]
    fn gradients_flow_through_aggregation() {
        use crate::autodiff::{ParamGroup, ParamStore};
        let mut store = ParamStore::new();
        let pid = store.add(
            "f",
            ParamGroup::Encoder,
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            true,
        );
        let tax = tax_322();
        let labels = vec![vec![0, 0, 2], vec![0, 0, 1]];
        let mut g = Graph::new();
        let f = g.param(&store, pid);
        let feats = hierarchy_features(
            &mut g,
            f,
            &labels,
            &tax,
            AggregationMode::SampleWeighted,
        )
        .unwrap();
        let total = g.sum(feats[1].node).unwrap();
        g.backward(total, &mut store).unwrap();
        // Rows 0 and 1 average into one class row, row 2 stands alone.
        let grad = store.grad(pid).unwrap();
        assert_eq!(grad, &[0.5, 0.5, 0.5, 0.5, 1.0, 1.0]);
    }
}
