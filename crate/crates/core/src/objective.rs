//! Contrastive objective over prototypes, per-level weighting, and the
//! combined training loss.
//!
//! Each anchor row is pulled toward two positives, the base and perturbed
//! prototype of its own class, and pushed from a temperature-scaled
//! log-sum-exp denominator over prototype similarities. Level losses are
//! mixed by weights computed outside the graph, so the weighting itself
//! contributes no gradient.

use serde::{Deserialize, Serialize};

use crate::aggregate::{FeatureRows, LevelFeatures};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::prototypes::LevelPrototypeNodes;

/// Which similarities enter the contrastive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// All base and all perturbed prototypes, two entries per class.
    BaseAndPerturbed,
    /// All base prototypes plus the anchor's own perturbed positive.
    BaseOnly,
}

/// Contrastive loss for one level given raw anchor rows and their classes.
///
/// Anchors are normalized in-graph, so gradients include the projection to
/// the unit sphere. Both positives always appear in the numerator even when
/// the perturbed view coincides with the base one, which keeps the loss
/// value continuous as the perturbation radius goes to zero.
pub fn info_nce_from_anchors(
    graph: &mut Graph,
    anchors: NodeId,
    anchor_classes: &[usize],
    protos: &LevelPrototypeNodes,
    tau: f64,
    negatives: NegativeSet,
) -> Result<NodeId> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be finite and positive, got {tau}"
        )));
    }
    let rows = graph.value(anchors).rows();
    if rows == 0 {
        return Err(Error::Data("contrastive loss needs at least one anchor".into()));
    }
    if rows != anchor_classes.len() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "contrastive anchors at level {}: rows vs classes",
                protos.level
            ),
            left: vec![rows],
            right: vec![anchor_classes.len()],
        });
    }
    let num_classes = protos.num_classes;
    for &class in anchor_classes {
        if class >= num_classes {
            return Err(Error::ClassOutOfRange {
                level: protos.level,
                index: class,
                limit: num_classes,
            });
        }
    }

    let anchors_n = graph.normalize_rows(anchors)?;
    let base_n = graph.normalize_rows(protos.base)?;
    let sims_base = graph.matmul_nt(anchors_n, base_n)?;
    let sims_pert = graph.matmul_nt(anchors_n, protos.perturbed)?;

    let inv_tau = 1.0 / tau;
    let mut terms = Vec::with_capacity(rows);
    for (a, &class) in anchor_classes.iter().enumerate() {
        let offset = a * num_classes;
        let denom_sources: Vec<(NodeId, usize)> = match negatives {
            NegativeSet::BaseAndPerturbed => (0..num_classes)
                .map(|c| (sims_base, offset + c))
                .chain((0..num_classes).map(|c| (sims_pert, offset + c)))
                .collect(),
            NegativeSet::BaseOnly => (0..num_classes)
                .map(|c| (sims_base, offset + c))
                .chain(std::iter::once((sims_pert, offset + class)))
                .collect(),
        };
        let denom = graph.gather_scaled(&denom_sources, inv_tau)?;
        let lse = graph.log_sum_exp(denom)?;
        let positives = graph.gather_scaled(
            &[(sims_base, offset + class), (sims_pert, offset + class)],
            inv_tau,
        )?;
        let pos_sum = graph.sum(positives)?;
        let doubled = graph.scale(lse, 2.0)?;
        terms.push(graph.sub(doubled, pos_sum)?);
    }
    let stacked = graph.concat(&terms)?;
    let total = graph.sum(stacked)?;
    graph.scale(total, 1.0 / rows as f64)
}

/// Level-1 contrastive loss: one anchor per sample.
pub fn info_nce_level1(
    graph: &mut Graph,
    features: NodeId,
    labels: &[usize],
    protos: &LevelPrototypeNodes,
    tau: f64,
    negatives: NegativeSet,
) -> Result<NodeId> {
    info_nce_from_anchors(graph, features, labels, protos, tau, negatives)
}

/// Coarse-level contrastive loss: one anchor per class present in the
/// batch, taken from aggregated per-class features.
pub fn info_nce_levelk(
    graph: &mut Graph,
    features: &LevelFeatures,
    protos: &LevelPrototypeNodes,
    tau: f64,
    negatives: NegativeSet,
) -> Result<NodeId> {
    if features.level != protos.level {
        return Err(Error::Config(format!(
            "features at level {} cannot score prototypes at level {}",
            features.level, protos.level
        )));
    }
    let classes = match &features.rows {
        FeatureRows::PerClass { classes, .. } => classes.clone(),
        FeatureRows::PerSample => {
            return Err(Error::Config(
                "coarse-level loss needs aggregated per-class features".into(),
            ));
        }
    };
    info_nce_from_anchors(graph, features.node, &classes, protos, tau, negatives)
}

/// Softmax of `losses / gamma`, computed with the max subtracted. Larger
/// losses get larger weights; equal losses give exactly uniform weights.
pub fn adaptive_weights(losses: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Config("adaptive weighting needs at least one loss".into()));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!(
            "weighting temperature must be finite and positive, got {gamma}"
        )));
    }
    for (i, &l) in losses.iter().enumerate() {
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss for level {} entering the weighting", i + 1),
            });
        }
    }
    let scaled: Vec<f64> = losses.iter().map(|l| l / gamma).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Weighted sum of per-level scalar losses. The weights enter as fixed
/// coefficients: they scale the gradients of each level but receive none
/// themselves.
pub fn total_loss(
    graph: &mut Graph,
    level_losses: &[NodeId],
    weights: &[f64],
) -> Result<NodeId> {
    if level_losses.is_empty() {
        return Err(Error::Config("total loss needs at least one level".into()));
    }
    if level_losses.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            context: "total loss: level losses vs weights".into(),
            left: vec![level_losses.len()],
            right: vec![weights.len()],
        });
    }
    let parts: Vec<(NodeId, f64)> = level_losses
        .iter()
        .copied()
        .zip(weights.iter().copied())
        .collect();
    graph.affine_combine(&parts)
}
