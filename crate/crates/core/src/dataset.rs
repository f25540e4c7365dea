//! Dataset loading, batching, and synthetic data generation.
//!
//! Datasets are JSON Lines: one object per row with an `id`, a dense
//! `features` vector, and a `labels` tuple ordered finest level first. Rows
//! are validated against a taxonomy on load, so downstream code can assume
//! label tuples are consistent chains.
//!
//! The synthetic generator builds a balanced taxonomy from per-level class
//! counts and samples Gaussian clusters around hierarchically nested means:
//! sibling offsets are orthogonal within each parent group and shrink
//! geometrically with depth, which makes separability tunable through a
//! single `separation` knob.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from};
use crate::taxonomy::Taxonomy;

/// One labeled example. `labels[k-1]` is the class index at level k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Read a JSONL dataset and validate every row against `taxonomy`: label
/// chains must be consistent, features finite, ids unique, and the feature
/// dimension constant across rows. An empty file yields an empty vector.
pub fn load_dataset(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut dim: Option<usize> = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        validate_sample(&sample, taxonomy, dim)?;
        if !seen_ids.insert(sample.id.clone()) {
            return Err(Error::Data(format!("duplicate sample id {}", sample.id)));
        }
        dim = Some(sample.features.len());
        samples.push(sample);
    }
    Ok(samples)
}

/// Write samples as JSONL, one object per line.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for sample in samples {
        let line = serde_json::to_string(sample)
            .map_err(|e| Error::Data(format!("sample {} serialization failed: {e}", sample.id)))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn validate_sample(sample: &Sample, taxonomy: &Taxonomy, dim: Option<usize>) -> Result<()> {
    if sample.features.is_empty() {
        return Err(Error::Data(format!("sample {} has no features", sample.id)));
    }
    if let Some(d) = dim {
        if sample.features.len() != d {
            return Err(Error::Data(format!(
                "sample {} has {} features, previous rows have {d}",
                sample.id,
                sample.features.len()
            )));
        }
    }
    for (j, v) in sample.features.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "sample {} feature {j} is not finite",
                sample.id
            )));
        }
    }
    taxonomy
        .validate_chain(&sample.labels)
        .map_err(|e| Error::Data(format!("sample {}: {e}", sample.id)))
}

/// Deterministic shuffled batch plan for one epoch: a seeded permutation of
/// `0..n` chopped into `batch_size` chunks, the final chunk possibly short.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from(derive_seed(seed, "shuffle", epoch));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Recipe for a synthetic hierarchical dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Class counts per level, finest first. Each count must divide the one
    /// before it so classes nest in equal-sized blocks.
    pub classes_per_level: Vec<usize>,
    pub input_dim: usize,
    /// Radius of the top-level mean sphere; sibling offsets at each deeper
    /// level halve relative to this.
    pub separation: f64,
    /// Standard deviation of the isotropic Gaussian noise around each
    /// finest-class mean.
    pub noise_sigma: f64,
    pub samples_per_class: usize,
    /// Fraction of each finest class routed to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

/// Everything the generator produced. The per-level means are part of the
/// output so tests can compare against a nearest-mean oracle.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub taxonomy: Taxonomy,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// `means_by_level[k-1][c]` is the generating mean of class c at
    /// level k.
    pub means_by_level: Vec<Vec<Vec<f64>>>,
}

/// Generate a synthetic dataset. Identical specs produce identical outputs,
/// byte for byte once serialized.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    validate_spec(spec)?;
    let taxonomy = balanced_taxonomy(&spec.classes_per_level)?;
    let means_by_level = nested_means(spec, &taxonomy)?;
    let chains = (0..spec.classes_per_level[0])
        .map(|class| label_chain(&taxonomy, class))
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = draw_samples(spec, &chains, &means_by_level[0]);
    Ok(SynthOutput {
        taxonomy,
        train,
        test,
        means_by_level,
    })
}

/// Full label tuple (finest first) for one finest-level class.
fn label_chain(taxonomy: &Taxonomy, finest_class: usize) -> Result<Vec<usize>> {
    let mut labels = vec![finest_class];
    for level in 1..taxonomy.num_levels() {
        let below = labels[level - 1];
        let parent = taxonomy.parent(crate::taxonomy::LabelId::new(level, below))?;
        labels.push(parent.index);
    }
    Ok(labels)
}

fn validate_spec(spec: &SynthSpec) -> Result<()> {
    if spec.classes_per_level.is_empty() {
        return Err(Error::Config("synthetic spec has no levels".into()));
    }
    for (k, &count) in spec.classes_per_level.iter().enumerate() {
        if count == 0 {
            return Err(Error::Config(format!(
                "synthetic level {} has zero classes",
                k + 1
            )));
        }
    }
    for k in 0..spec.classes_per_level.len() - 1 {
        let (fine, coarse) = (spec.classes_per_level[k], spec.classes_per_level[k + 1]);
        if fine % coarse != 0 {
            return Err(Error::Config(format!(
                "class count {fine} at level {} is not divisible by {coarse} at level {}",
                k + 1,
                k + 2
            )));
        }
    }
    if spec.input_dim == 0 {
        return Err(Error::Config("input_dim must be at least 1".into()));
    }
    if !(spec.separation > 0.0) || !spec.separation.is_finite() {
        return Err(Error::Config("separation must be positive".into()));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::Config("noise_sigma must be non-negative".into()));
    }
    if spec.samples_per_class == 0 {
        return Err(Error::Config("samples_per_class must be at least 1".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(
            "train_fraction must lie strictly between 0 and 1".into(),
        ));
    }
    Ok(())
}

/// Taxonomy where each level's classes nest in contiguous equal blocks.
fn balanced_taxonomy(classes_per_level: &[usize]) -> Result<Taxonomy> {
    let mut parents = Vec::new();
    for k in 0..classes_per_level.len() - 1 {
        let fan = classes_per_level[k] / classes_per_level[k + 1];
        parents.push((0..classes_per_level[k]).map(|c| c / fan).collect());
    }
    Taxonomy::from_parts(classes_per_level.to_vec(), parents, None)
}

/// Per-level class means, coarsest level placed on a sphere of radius
/// `separation` along mutually orthogonal directions, each deeper level
/// offset from its parent by orthogonal sibling directions of length
/// `separation / 2^(depth below the top)`.
fn nested_means(spec: &SynthSpec, taxonomy: &Taxonomy) -> Result<Vec<Vec<Vec<f64>>>> {
    let m = taxonomy.num_levels();
    let d = spec.input_dim;
    let mut rng = rng_from(derive_seed(spec.seed, "synth-means", 0));
    let mut means: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m];

    let top = taxonomy.classes_per_level()[m - 1];
    means[m - 1] = orthogonal_directions(&mut rng, top, d)?
        .into_iter()
        .map(|dir| scaled(&dir, spec.separation))
        .collect();

    for level in (1..m).rev() {
        // Children at `level` hang off parents at `level + 1`.
        let scale = spec.separation / 2f64.powi((m - level) as i32);
        let count = taxonomy.classes_per_level()[level - 1];
        let mut level_means = vec![Vec::new(); count];
        for parent in 0..taxonomy.classes_per_level()[level] {
            let children = taxonomy.children(crate::taxonomy::LabelId::new(level + 1, parent))?;
            let dirs = orthogonal_directions(&mut rng, children.len(), d)?;
            for (child, dir) in children.iter().zip(dirs) {
                let parent_mean = &means[level][parent];
                level_means[child.index] = parent_mean
                    .iter()
                    .zip(scaled(&dir, scale))
                    .map(|(&p, o)| p + o)
                    .collect();
            }
        }
        means[level - 1] = level_means;
    }
    Ok(means)
}

/// Draw `count` unit vectors, orthogonalized against each other while the
/// dimension allows; beyond `dim` vectors the directions are merely
/// normalized.
fn orthogonal_directions(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for _attempt in 0..32 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if dirs.len() < dim {
                for prev in &dirs {
                    let proj: f64 = v.iter().zip(prev).map(|(&a, &b)| a * b).sum();
                    for (vi, &pi) in v.iter_mut().zip(prev) {
                        *vi -= proj * pi;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for vi in &mut v {
                    *vi /= norm;
                }
                accepted = Some(v);
                break;
            }
        }
        dirs.push(accepted.ok_or_else(|| {
            Error::Config(format!(
                "could not draw an independent direction for index {i} in dimension {dim}"
            ))
        })?);
    }
    Ok(dirs)
}

fn scaled(v: &[f64], factor: f64) -> Vec<f64> {
    v.iter().map(|&x| x * factor).collect()
}

fn draw_samples(
    spec: &SynthSpec,
    chains: &[Vec<usize>],
    finest_means: &[Vec<f64>],
) -> (Vec<Sample>, Vec<Sample>) {
    let mut sample_rng = rng_from(derive_seed(spec.seed, "synth-samples", 0));
    let mut split_rng = rng_from(derive_seed(spec.seed, "synth-split", 0));
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut serial = 0usize;

    for (class, mean) in finest_means.iter().enumerate() {
        let labels = &chains[class];
        let mut class_samples = Vec::with_capacity(spec.samples_per_class);
        for _ in 0..spec.samples_per_class {
            serial += 1;
            let features: Vec<f64> = mean
                .iter()
                .map(|&mu| mu + spec.noise_sigma * sample_rng.sample::<f64, _>(StandardNormal))
                .collect();
            class_samples.push(Sample {
                id: format!("s{serial:06}"),
                features,
                labels: labels.clone(),
            });
        }

        let mut order: Vec<usize> = (0..class_samples.len()).collect();
        order.shuffle(&mut split_rng);
        let n_train = ((spec.train_fraction * class_samples.len() as f64).round() as usize)
            .min(class_samples.len());
        let mut train_idx: Vec<usize> = order[..n_train].to_vec();
        let mut test_idx: Vec<usize> = order[n_train..].to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        for idx in train_idx {
            train.push(class_samples[idx].clone());
        }
        for idx in test_idx {
            test.push(class_samples[idx].clone());
        }
    }
    (train, test)
}
