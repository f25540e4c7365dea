//! Hierarchical inference and the evaluation metric suite.
//!
//! Inference assigns each sample one class per level by cosine similarity
//! against the base prototypes; the perturbed views play no part here.
//! Metrics cover per-level accuracy and the hierarchical violation rate,
//! the fraction of adjacent-level prediction pairs whose taxonomy edge is
//! broken. Two HVR normalizations are emitted side by side: the default
//! divides by predicted edges, the other by the cumulative class count of
//! the non-root levels.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, ParamStore, Tensor, NORM_EPSILON};
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;
use crate::taxonomy::Taxonomy;

/// How per-level predictions are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Every level classifies the sample's own feature vector.
    PerSample,
    /// Coarser levels classify means over samples that share the previous
    /// level's predicted class, so one sample's outcome can depend on its
    /// batch companions.
    BatchGrouped,
}

/// Normalization of the hierarchical violation rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvrNorm {
    /// Violations over predicted adjacent-level pairs: `V / (n (m-1))`.
    EdgeFraction,
    /// Violations over `n · R` where R sums the class counts of levels
    /// `1..m-1`.
    PaperEq15,
}

/// One sample's predicted class per level, finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub pred: Vec<usize>,
    /// Winning cosine similarity per level, when the producer kept them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Evaluation summary over one prediction set. Serialized field order is
/// fixed by the struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "R")]
    pub r: usize,
    /// Accuracy per level, finest first.
    pub acc: Vec<f64>,
    pub hvr_edge_fraction: f64,
    pub hvr_paper_eq15: f64,
    /// Violation counts keyed by the expected parent, the taxonomy parent
    /// of the predicted child class, as `"level{k}:{class}"`.
    pub violations_by_parent: BTreeMap<String, u64>,
}

fn normalized_rows(matrix: &Tensor, what: impl Fn(usize) -> String) -> Result<Tensor> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let mut data = matrix.data().to_vec();
    for r in 0..rows {
        let slice = &mut data[r * cols..(r + 1) * cols];
        let norm: f64 = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= NORM_EPSILON {
            return Err(Error::DegenerateVector {
                context: what(r),
                norm,
                limit: NORM_EPSILON,
            });
        }
        for v in slice.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::matrix(rows, cols, data)
}

/// Row-wise cosine argmax of `features` against `prototypes`, ties going
/// to the lowest class index. Returns one class per feature row.
pub fn argmax_cosine(
    features: &Tensor,
    prototypes: &Tensor,
    feature_name: impl Fn(usize) -> String,
    level: usize,
) -> Result<Vec<usize>> {
    if features.cols() != prototypes.cols() {
        return Err(Error::ShapeMismatch {
            context: format!("classification at level {level}: feature dim vs prototype dim"),
            left: vec![features.cols()],
            right: vec![prototypes.cols()],
        });
    }
    let f = normalized_rows(features, feature_name)?;
    let p = normalized_rows(prototypes, |r| format!("prototype {r} at level {level}"))?;
    let n = f.rows();
    let c = p.rows();
    let sims = kernels::matmul_nt(f.data(), p.data(), n, features.cols(), c);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &sims[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &s) in row.iter().enumerate().skip(1) {
            if s > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Predict one class per level for every feature row. `features` holds one
/// row per sample aligned with `ids`; the bank must cover every taxonomy
/// level. Base prototypes only.
pub fn predict(
    features: &Tensor,
    ids: &[String],
    bank: &PrototypeBank,
    store: &ParamStore,
    taxonomy: &Taxonomy,
    mode: InferenceMode,
) -> Result<Vec<PredictionRecord>> {
    let m = taxonomy.num_levels();
    let expected: Vec<usize> = (1..=m).collect();
    if bank.levels() != expected {
        return Err(Error::Config(format!(
            "prototype bank covers levels {:?} but the taxonomy has levels 1..={m}",
            bank.levels()
        )));
    }
    let n = features.rows();
    if n != ids.len() {
        return Err(Error::ShapeMismatch {
            context: "prediction: feature rows vs ids".into(),
            left: vec![n],
            right: vec![ids.len()],
        });
    }
    if n == 0 {
        return Err(Error::Data("cannot predict on an empty feature set".into()));
    }

    let mut per_level: Vec<Vec<usize>> = Vec::with_capacity(m);
    match mode {
        InferenceMode::PerSample => {
            for level in 1..=m {
                let protos = bank.base_matrix(store, level)?;
                let preds = argmax_cosine(
                    features,
                    &protos,
                    |r| format!("feature of sample {}", ids[r]),
                    level,
                )?;
                per_level.push(preds);
            }
        }
        InferenceMode::BatchGrouped => {
            let protos1 = bank.base_matrix(store, 1)?;
            let first = argmax_cosine(
                features,
                &protos1,
                |r| format!("feature of sample {}", ids[r]),
                1,
            )?;
            per_level.push(first);
            let d = features.cols();
            let mut current = features.data().to_vec();
            for level in 2..=m {
                let below = &per_level[level - 2];
                let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, &c) in below.iter().enumerate() {
                    groups.entry(c).or_default().push(i);
                }
                let mut next = vec![0.0; n * d];
                let mut group_rows = Vec::with_capacity(groups.len());
                let mut group_classes = Vec::with_capacity(groups.len());
                for (&class, members) in &groups {
                    let mut mean = vec![0.0; d];
                    for &i in members {
                        for (m_v, v) in mean.iter_mut().zip(&current[i * d..(i + 1) * d]) {
                            *m_v += v;
                        }
                    }
                    let inv = 1.0 / members.len() as f64;
                    for v in mean.iter_mut() {
                        *v *= inv;
                    }
                    group_rows.extend_from_slice(&mean);
                    group_classes.push(class);
                    for &i in members {
                        next[i * d..(i + 1) * d].copy_from_slice(&mean);
                    }
                }
                let means = Tensor::matrix(group_classes.len(), d, group_rows)?;
                let protos = bank.base_matrix(store, level)?;
                let group_preds = argmax_cosine(
                    &means,
                    &protos,
                    |r| {
                        format!(
                            "mean feature of predicted class {} at level {}",
                            group_classes[r],
                            level - 1
                        )
                    },
                    level,
                )?;
                let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
                for (gi, &class) in group_classes.iter().enumerate() {
                    by_class.insert(class, group_preds[gi]);
                }
                per_level.push(below.iter().map(|c| by_class[c]).collect());
                current = next;
            }
        }
    }

    Ok(ids
        .iter()
        .enumerate()
        .map(|(i, id)| PredictionRecord {
            id: id.clone(),
            pred: (0..m).map(|k| per_level[k][i]).collect(),
            scores: None,
        })
        .collect())
}

fn truth_index<'a>(truths: &'a [Sample]) -> Result<BTreeMap<&'a str, &'a Sample>> {
    let mut map = BTreeMap::new();
    for t in truths {
        if map.insert(t.id.as_str(), t).is_some() {
            return Err(Error::Data(format!("duplicate truth sample id {}", t.id)));
        }
    }
    Ok(map)
}

fn aligned<'a>(
    preds: &'a [PredictionRecord],
    truths: &'a [Sample],
) -> Result<Vec<(&'a PredictionRecord, &'a Sample)>> {
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions cannot align with {} truth samples",
            preds.len(),
            truths.len()
        )));
    }
    let index = truth_index(truths)?;
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::with_capacity(preds.len());
    for p in preds {
        if seen.insert(p.id.as_str(), ()).is_some() {
            return Err(Error::Data(format!("duplicate prediction id {}", p.id)));
        }
        let truth = index.get(p.id.as_str()).ok_or_else(|| {
            Error::Data(format!("prediction id {} has no matching truth sample", p.id))
        })?;
        pairs.push((p, *truth));
    }
    Ok(pairs)
}

/// Fraction of samples predicted correctly at one level (1-based).
pub fn accuracy_at(preds: &[PredictionRecord], truths: &[Sample], level: usize) -> Result<f64> {
    if level == 0 {
        return Err(Error::Config("levels are 1-based".into()));
    }
    let pairs = aligned(preds, truths)?;
    let mut correct = 0usize;
    for (p, t) in &pairs {
        let predicted = p.pred.get(level - 1).ok_or_else(|| {
            Error::Data(format!(
                "prediction for sample {} has no entry for level {level}",
                p.id
            ))
        })?;
        let actual = t.labels.get(level - 1).ok_or_else(|| {
            Error::Data(format!("sample {} has no label at level {level}", t.id))
        })?;
        if predicted == actual {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

fn validate_tuples(preds: &[PredictionRecord], taxonomy: &Taxonomy) -> Result<()> {
    let m = taxonomy.num_levels();
    for p in preds {
        if p.pred.len() != m {
            return Err(Error::Data(format!(
                "prediction for sample {} has {} levels, taxonomy has {m}",
                p.id,
                p.pred.len()
            )));
        }
        for (k, &class) in p.pred.iter().enumerate() {
            let limit = taxonomy.classes_at(k + 1)?;
            if class >= limit {
                return Err(Error::ClassOutOfRange {
                    level: k + 1,
                    index: class,
                    limit,
                });
            }
        }
    }
    Ok(())
}

/// Count broken parent-child edges in predicted tuples, keyed by the
/// expected parent class.
fn count_violations(
    preds: &[PredictionRecord],
    taxonomy: &Taxonomy,
) -> Result<(u64, BTreeMap<String, u64>)> {
    validate_tuples(preds, taxonomy)?;
    let m = taxonomy.num_levels();
    let mut total = 0u64;
    let mut by_parent: BTreeMap<String, u64> = BTreeMap::new();
    for p in preds {
        for k in 2..=m {
            let expected = taxonomy.parent_index(k - 1, p.pred[k - 2])?;
            if expected != p.pred[k - 1] {
                total += 1;
                *by_parent
                    .entry(format!("level{k}:{expected}"))
                    .or_insert(0) += 1;
            }
        }
    }
    Ok((total, by_parent))
}

/// Hierarchical violation rate of predicted tuples under one normalization.
pub fn hvr(preds: &[PredictionRecord], taxonomy: &Taxonomy, norm: HvrNorm) -> Result<f64> {
    let m = taxonomy.num_levels();
    if m < 2 {
        return Err(Error::Config(
            "the violation rate is undefined for a single-level taxonomy".into(),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let (violations, _) = count_violations(preds, taxonomy)?;
    let n = preds.len() as f64;
    let denom = match norm {
        HvrNorm::EdgeFraction => n * (m - 1) as f64,
        HvrNorm::PaperEq15 => {
            let r: usize = (1..m).map(|k| taxonomy.classes_at(k)).sum::<Result<usize>>()?;
            n * r as f64
        }
    };
    Ok(violations as f64 / denom)
}

/// Build the full metric summary for aligned predictions and truths.
///
/// A single-level taxonomy has no edges to violate; both rates come back
/// as zero with an empty breakdown.
pub fn metrics_report(
    preds: &[PredictionRecord],
    truths: &[Sample],
    taxonomy: &Taxonomy,
) -> Result<MetricsReport> {
    let m = taxonomy.num_levels();
    let pairs = aligned(preds, truths)?;
    validate_tuples(preds, taxonomy)?;
    let mut acc = Vec::with_capacity(m);
    for level in 1..=m {
        acc.push(accuracy_at(preds, truths, level)?);
    }
    let r: usize = (1..m).map(|k| taxonomy.classes_at(k)).sum::<Result<usize>>()?;
    let (hvr_edge, hvr_paper, by_parent) = if m >= 2 {
        let (violations, by_parent) = count_violations(preds, taxonomy)?;
        let n = pairs.len() as f64;
        (
            violations as f64 / (n * (m - 1) as f64),
            violations as f64 / (n * r as f64),
            by_parent,
        )
    } else {
        (0.0, 0.0, BTreeMap::new())
    };
    Ok(MetricsReport {
        n: pairs.len(),
        m,
        r,
        acc,
        hvr_edge_fraction: hvr_edge,
        hvr_paper_eq15: hvr_paper,
        violations_by_parent: by_parent,
    })
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    pred: &'a [usize],
}

/// Write predictions as JSONL, one `{"id", "pred"}` object per line.
/// Similarity scores stay in memory; the file format carries only the
/// tuple.
pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(&PredictionLine {
            id: &p.id,
            pred: &p.pred,
        })
        .map_err(|e| Error::Data(format!("cannot serialize prediction: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a prediction JSONL file written by [`write_predictions`].
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(record);
    }
    Ok(out)
}
