//! The closed training loop: forward, per-level losses, loss-driven
//! weights, backward, SGD with momentum, repeat; plus checkpointing.
//!
//! One multi-task tower shares an encoder and all prototype banks. The
//! single-task ablation instead trains one independent tower per level,
//! with nothing shared. Every random draw derives from the config seed,
//! the purpose tag, and either the tower level or the global step index,
//! so a resumed run replays exactly the steps an unbroken run would have
//! taken.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{class_means, hierarchy_features, labels_by_level, AggregationMode};
use crate::autodiff::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Graph, ParamGroup, ParamStore, Tensor,
};
use crate::dataset::{batch_plan, Sample};
use crate::encoder::{Encoder, EncoderConfig, TrainableScope};
use crate::error::{Error, Result};
use crate::metrics::{self, InferenceMode, PredictionRecord};
use crate::objective::{
    adaptive_weights, info_nce_level1, info_nce_levelk, total_loss, NegativeSet,
};
use crate::prototypes::{PerturbMode, PrototypeBank};
use crate::seeding::{derive_seed, rng_from};
use crate::taxonomy::Taxonomy;

/// How per-level weights are chosen each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Softmax of losses over gamma, recomputed every step.
    Adaptive,
    /// Constant weights from `fixed_weights`, or uniform when unset.
    Fixed,
}

/// Which losses feed the adaptive weighting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// This step's losses.
    Current,
    /// The previous step's losses; the first step falls back to its own.
    Previous,
}

/// Switches that carve out the ablation grid. All default to on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    /// Off trains one independent tower per level.
    pub multi_task: bool,
    /// Off scores every level with raw per-sample features.
    pub feature_aggregation: bool,
    /// Off behaves exactly like a zero perturbation radius.
    pub prototype_perturbation: bool,
    /// Off falls back to fixed weights.
    pub adaptive_weighting: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles {
            multi_task: true,
            feature_aggregation: true,
            prototype_perturbation: true,
            adaptive_weighting: true,
        }
    }
}

/// Full training configuration. `epochs` has no default; everything else
/// carries the stock value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_proto_level1: f64,
    /// Prototype learning rate at level k is `lr_proto_level1` times this
    /// factor raised to `k - 1`.
    pub proto_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub tau: f64,
    /// Embedding dimension shared by encoder outputs and prototypes.
    pub output_dim: usize,
    /// Encoder hidden layer widths; empty gives one linear layer.
    pub hidden_dims: Vec<usize>,
    /// Which encoder layers receive gradient updates.
    pub trainable: TrainableScope,
    pub weighting: Weighting,
    pub fixed_weights: Option<Vec<f64>>,
    pub weight_source: WeightSource,
    /// Exponential smoothing coefficient applied to losses before the
    /// weighting; off when unset.
    pub weight_ema: Option<f64>,
    pub negatives: NegativeSet,
    pub perturb_mode: PerturbMode,
    pub aggregation: AggregationMode,
    pub seed: u64,
    pub ablation: AblationToggles,
}

impl TrainConfig {
    /// Stock configuration for a given epoch budget.
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            batch_size: 32,
            epochs,
            lr_encoder: 0.01,
            lr_proto_level1: 0.05,
            proto_lr_multiplier: 2.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            gamma: 0.5,
            epsilon: 0.05,
            tau: 0.1,
            output_dim: 256,
            hidden_dims: Vec::new(),
            trainable: TrainableScope::All,
            weighting: Weighting::Adaptive,
            fixed_weights: None,
            weight_source: WeightSource::Current,
            weight_ema: None,
            negatives: NegativeSet::BaseAndPerturbed,
            perturb_mode: PerturbMode::PerStep,
            aggregation: AggregationMode::SampleWeighted,
            seed: 42,
            ablation: AblationToggles::default(),
        }
    }

    /// Check every bound, including `fixed_weights` against the number of
    /// taxonomy levels.
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::Config("output_dim must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_proto_level1", self.lr_proto_level1),
            ("proto_lr_multiplier", self.proto_lr_multiplier),
            ("gamma", self.gamma),
            ("tau", self.tau),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(coef) = self.weight_ema {
            if !(0.0..1.0).contains(&coef) || !coef.is_finite() {
                return Err(Error::Config(format!(
                    "weight_ema coefficient must lie in [0, 1), got {coef}"
                )));
            }
        }
        if let Some(w) = &self.fixed_weights {
            if w.len() != num_levels {
                return Err(Error::Config(format!(
                    "fixed_weights has {} entries for {num_levels} levels",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(
                    "fixed_weights entries must be finite and non-negative".into(),
                ));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "fixed_weights must sum to 1, got {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Learning rate for one parameter group.
    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Prototypes { level } => {
                self.lr_proto_level1 * self.proto_lr_multiplier.powi(level as i32 - 1)
            }
        }
    }

    /// Perturbation radius after the ablation toggle.
    pub fn effective_epsilon(&self) -> f64 {
        if self.ablation.prototype_perturbation {
            self.epsilon
        } else {
            0.0
        }
    }

    fn adaptive_in_effect(&self) -> bool {
        self.weighting == Weighting::Adaptive && self.ablation.adaptive_weighting
    }
}

/// Momentum buffers, one per parameter, aligned with store ids.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocities: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// Zero buffers shaped like every parameter in `store`.
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocities: store
                .ids()
                .map(|id| vec![0.0; store.value(id).len()])
                .collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> &[f64] {
        &self.velocities[index]
    }
}

/// One SGD-with-momentum update over every trainable parameter:
/// `g' = g + weight_decay * theta; v = momentum * v + g';
/// theta -= lr * v`. Gradients are cleared afterward.
pub fn sgd_step(
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if opt.velocities.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer tracks {} parameters, store holds {}",
            opt.velocities.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.param(id).trainable {
            continue;
        }
        let lr = config.group_lr(store.param(id).group);
        let grad = store
            .grad(id)
            .ok_or_else(|| {
                Error::Config(format!(
                    "missing gradient for trainable parameter {}",
                    store.param(id).name
                ))
            })?
            .to_vec();
        let velocity = &mut opt.velocities[id.index()];
        let theta = store.value_mut(id).data_mut();
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            let g_reg = g + config.weight_decay * *t;
            *v = config.momentum * *v + g_reg;
            *t -= lr * *v;
        }
    }
    store.clear_grads();
    Ok(())
}

/// Carry-over state for the weighting between steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    /// Smoothed losses when `weight_ema` is on.
    pub smoothed: Option<Vec<f64>>,
    /// Raw losses of the previous step.
    pub previous: Option<Vec<f64>>,
}

impl WeightState {
    /// Weights for one step given that step's raw losses, advancing the
    /// smoothing and history state.
    pub fn lambdas_for(&mut self, losses: &[f64], config: &TrainConfig) -> Result<Vec<f64>> {
        let m = losses.len();
        let lambdas = if config.adaptive_in_effect() {
            let source = match config.weight_source {
                WeightSource::Current => losses.to_vec(),
                WeightSource::Previous => {
                    self.previous.clone().unwrap_or_else(|| losses.to_vec())
                }
            };
            let effective = match config.weight_ema {
                Some(coef) => {
                    let smoothed: Vec<f64> = match &self.smoothed {
                        Some(prev) => prev
                            .iter()
                            .zip(&source)
                            .map(|(p, x)| coef * p + (1.0 - coef) * x)
                            .collect(),
                        None => source.clone(),
                    };
                    self.smoothed = Some(smoothed.clone());
                    smoothed
                }
                None => source,
            };
            adaptive_weights(&effective, config.gamma)?
        } else {
            match &config.fixed_weights {
                Some(w) => w.clone(),
                None => vec![1.0 / m as f64; m],
            }
        };
        self.previous = Some(losses.to_vec());
        Ok(lambdas)
    }
}

/// An encoder, its prototype bank, and their optimizer, sharing one store.
pub struct Tower {
    pub encoder: Encoder,
    pub bank: PrototypeBank,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    /// `None` for the shared multi-task tower; `Some(k)` for a single-task
    /// tower owning level k.
    pub level: Option<usize>,
}

/// Everything that evolves during training.
pub struct TrainState {
    pub towers: Vec<Tower>,
    pub weight_state: WeightState,
    pub steps_done: u64,
    pub epochs_done: usize,
}

fn build_tower(
    level: Option<usize>,
    taxonomy: &Taxonomy,
    input_dim: usize,
    config: &TrainConfig,
) -> Result<Tower> {
    let tag = level.unwrap_or(0) as u64;
    let mut store = ParamStore::new();
    let encoder = Encoder::init(
        EncoderConfig {
            input_dim,
            hidden_dims: config.hidden_dims.clone(),
            output_dim: config.output_dim,
            seed: derive_seed(config.seed, "encoder", tag),
            trainable: config.trainable,
        },
        &mut store,
    )?;
    let proto_seed = derive_seed(config.seed, "prototypes", tag);
    let bank = match level {
        None => PrototypeBank::init_all_levels(
            taxonomy,
            config.output_dim,
            config.effective_epsilon(),
            config.perturb_mode,
            proto_seed,
            &mut store,
        )?,
        Some(k) => PrototypeBank::init(
            taxonomy,
            &[k],
            config.output_dim,
            config.effective_epsilon(),
            config.perturb_mode,
            proto_seed,
            &mut store,
        )?,
    };
    let optimizer = OptimizerState::new(&store);
    Ok(Tower {
        encoder,
        bank,
        store,
        optimizer,
        level,
    })
}

/// Fresh training state for a dataset with `input_dim` raw features.
pub fn init_state(
    taxonomy: &Taxonomy,
    input_dim: usize,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate(taxonomy.num_levels())?;
    let towers = if config.ablation.multi_task {
        vec![build_tower(None, taxonomy, input_dim, config)?]
    } else {
        (1..=taxonomy.num_levels())
            .map(|k| build_tower(Some(k), taxonomy, input_dim, config))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(TrainState {
        towers,
        weight_state: WeightState::default(),
        steps_done: 0,
        epochs_done: 0,
    })
}

/// Losses, weights, and the mixed total for one completed step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub losses: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub total: f64,
}

fn tag_level(err: Error, level: usize) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("level {level}: {context}"),
        },
        Error::DegenerateVector {
            context,
            norm,
            limit,
        } => Error::DegenerateVector {
            context: format!("level {level}: {context}"),
            norm,
            limit,
        },
        other => other,
    }
}

fn finite_loss(value: f64, level: usize, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: format!("training loss at level {level} on step {step}"),
        })
    }
}

fn batch_matrix(
    train: &[Sample],
    indices: &[usize],
    num_levels: usize,
) -> Result<(Tensor, Vec<Vec<usize>>)> {
    if indices.is_empty() {
        return Err(Error::Data("cannot train on an empty batch".into()));
    }
    let d = train[indices[0]].features.len();
    let mut data = Vec::with_capacity(indices.len() * d);
    let mut chains: Vec<&[usize]> = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = train
            .get(i)
            .ok_or_else(|| Error::Data(format!("batch index {i} out of range")))?;
        if s.features.len() != d {
            return Err(Error::Data(format!(
                "sample {} has {} features, expected {d}",
                s.id,
                s.features.len()
            )));
        }
        data.extend_from_slice(&s.features);
        chains.push(&s.labels);
    }
    let x = Tensor::matrix(indices.len(), d, data)?;
    let labels = labels_by_level(&chains, num_levels)?;
    Ok((x, labels))
}

/// Run one optimization step on the batch given by `indices` into `train`.
/// Advances the global step counter once, regardless of tower count.
pub fn train_step(
    state: &mut TrainState,
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    train: &[Sample],
    indices: &[usize],
) -> Result<StepOutcome> {
    let m = taxonomy.num_levels();
    let (x, labels) = batch_matrix(train, indices, m)?;
    let step_seed = derive_seed(config.seed, "perturbation", state.steps_done);
    let step = state.steps_done;

    let TrainState {
        towers,
        weight_state,
        steps_done,
        ..
    } = state;

    let outcome = if config.ablation.multi_task {
        let tower = &mut towers[0];
        let noise = tower.bank.noise_for_step(&tower.store, step_seed)?;
        let mut graph = Graph::new();
        let x_node = graph.constant(x);
        let f1 = tower.encoder.encode(&mut graph, &tower.store, x_node)?;
        let protos = tower.bank.graph_nodes(&mut graph, &tower.store, &noise)?;

        let mut loss_nodes = Vec::with_capacity(m);
        if config.ablation.feature_aggregation {
            let feats =
                hierarchy_features(&mut graph, f1, &labels, taxonomy, config.aggregation)?;
            for k in 1..=m {
                let node = if k == 1 {
                    info_nce_level1(
                        &mut graph,
                        f1,
                        &labels[0],
                        &protos[0],
                        config.tau,
                        config.negatives,
                    )
                } else {
                    info_nce_levelk(
                        &mut graph,
                        &feats[k - 1],
                        &protos[k - 1],
                        config.tau,
                        config.negatives,
                    )
                }
                .map_err(|e| tag_level(e, k))?;
                loss_nodes.push(node);
            }
        } else {
            for k in 1..=m {
                let node = info_nce_level1(
                    &mut graph,
                    f1,
                    &labels[k - 1],
                    &protos[k - 1],
                    config.tau,
                    config.negatives,
                )
                .map_err(|e| tag_level(e, k))?;
                loss_nodes.push(node);
            }
        }

        let mut losses = Vec::with_capacity(m);
        for (k, &node) in loss_nodes.iter().enumerate() {
            losses.push(finite_loss(
                graph.value(node).scalar_value()?,
                k + 1,
                step,
            )?);
        }
        let lambdas = weight_state.lambdas_for(&losses, config)?;
        let total = total_loss(&mut graph, &loss_nodes, &lambdas)?;
        let total_value = finite_loss(graph.value(total).scalar_value()?, 0, step)?;
        graph.backward(total, &mut tower.store)?;
        sgd_step(&mut tower.store, &mut tower.optimizer, config)?;
        StepOutcome {
            losses,
            lambdas,
            total: total_value,
        }
    } else {
        let mut losses = Vec::with_capacity(m);
        for tower in towers.iter_mut() {
            let level = tower
                .level
                .ok_or_else(|| Error::Config("single-task tower lacks a level".into()))?;
            let noise = tower.bank.noise_for_step(&tower.store, step_seed)?;
            let mut graph = Graph::new();
            let x_node = graph.constant(x.clone());
            let f1 = tower.encoder.encode(&mut graph, &tower.store, x_node)?;
            let protos = tower.bank.graph_nodes(&mut graph, &tower.store, &noise)?;
            // A lone tower sees only its own level's labels, so coarse
            // aggregation is a single jump to per-class means.
            let node = if level > 1 && config.ablation.feature_aggregation {
                let anchors = class_means(
                    &mut graph,
                    f1,
                    &labels[level - 1],
                    level,
                    taxonomy.classes_at(level)?,
                )?;
                info_nce_levelk(&mut graph, &anchors, &protos[0], config.tau, config.negatives)
            } else {
                info_nce_level1(
                    &mut graph,
                    f1,
                    &labels[level - 1],
                    &protos[0],
                    config.tau,
                    config.negatives,
                )
            }
            .map_err(|e| tag_level(e, level))?;
            let value = finite_loss(graph.value(node).scalar_value()?, level, step)?;
            graph.backward(node, &mut tower.store)?;
            sgd_step(&mut tower.store, &mut tower.optimizer, config)?;
            losses.push(value);
        }
        // Independent objectives have no mixture; the report echoes a
        // uniform simplex and the matching average.
        let lambdas = vec![1.0 / m as f64; m];
        let total = losses
            .iter()
            .zip(&lambdas)
            .map(|(l, w)| l * w)
            .sum::<f64>();
        weight_state.previous = Some(losses.clone());
        StepOutcome {
            losses,
            lambdas,
            total,
        }
    };

    *steps_done += 1;
    Ok(outcome)
}

/// Mean per-level losses, weights, and total over one epoch's steps.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub total: f64,
    /// Wall time of the epoch; kept out of serialized reports so equal
    /// runs produce equal files.
    pub seconds: f64,
}

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    /// Render as CSV with columns
    /// `epoch,L_1..L_m,lambda_1..lambda_m,total`.
    pub fn to_csv(&self, num_levels: usize) -> String {
        let mut out = String::from("epoch");
        for k in 1..=num_levels {
            out.push_str(&format!(",L_{k}"));
        }
        for k in 1..=num_levels {
            out.push_str(&format!(",lambda_{k}"));
        }
        out.push_str(",total\n");
        for r in &self.records {
            out.push_str(&r.epoch.to_string());
            for v in r.losses.iter().chain(&r.lambdas) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(&r.total.to_string());
            out.push('\n');
        }
        out
    }
}

/// Continue training `state` up to `config.epochs` total epochs, returning
/// records for the epochs run here.
pub fn fit_from(
    train: &[Sample],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<TrainReport> {
    config.validate(taxonomy.num_levels())?;
    if train.is_empty() {
        return Err(Error::Data("cannot fit on an empty dataset".into()));
    }
    if config.epochs < state.epochs_done {
        return Err(Error::Config(format!(
            "{} epochs already trained, cannot target {}",
            state.epochs_done, config.epochs
        )));
    }
    let m = taxonomy.num_levels();
    let mut report = TrainReport::default();
    for epoch in (state.epochs_done + 1)..=config.epochs {
        let start = Instant::now();
        let plan = batch_plan(train.len(), config.batch_size, config.seed, epoch as u64)?;
        let steps = plan.len() as f64;
        let mut sum_losses = vec![0.0; m];
        let mut sum_lambdas = vec![0.0; m];
        let mut sum_total = 0.0;
        for batch in &plan {
            let outcome = train_step(state, taxonomy, config, train, batch)?;
            for (acc, v) in sum_losses.iter_mut().zip(&outcome.losses) {
                *acc += v;
            }
            for (acc, v) in sum_lambdas.iter_mut().zip(&outcome.lambdas) {
                *acc += v;
            }
            sum_total += outcome.total;
        }
        state.epochs_done = epoch;
        report.records.push(EpochRecord {
            epoch,
            losses: sum_losses.iter().map(|v| v / steps).collect(),
            lambdas: sum_lambdas.iter().map(|v| v / steps).collect(),
            total: sum_total / steps,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Train from scratch: build state from the data's dimensionality, then
/// run every configured epoch.
pub fn fit(
    train: &[Sample],
    taxonomy: &Taxonomy,
    config: &TrainConfig,
) -> Result<(TrainReport, TrainState)> {
    if train.is_empty() {
        return Err(Error::Data("cannot fit on an empty dataset".into()));
    }
    let input_dim = train[0].features.len();
    let mut state = init_state(taxonomy, input_dim, config)?;
    let report = fit_from(train, taxonomy, config, &mut state)?;
    Ok((report, state))
}

/// Encode every sample with a tower's encoder, in input order.
pub fn encode_samples(tower: &Tower, samples: &[Sample]) -> Result<(Tensor, Vec<String>)> {
    if samples.is_empty() {
        return Err(Error::Data("cannot encode an empty sample set".into()));
    }
    let d = samples[0].features.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    let mut ids = Vec::with_capacity(samples.len());
    for s in samples {
        if s.features.len() != d {
            return Err(Error::Data(format!(
                "sample {} has {} features, expected {d}",
                s.id,
                s.features.len()
            )));
        }
        data.extend_from_slice(&s.features);
        ids.push(s.id.clone());
    }
    let x = Tensor::matrix(samples.len(), d, data)?;
    let features = tower.encoder.encode_tensor(&tower.store, &x)?;
    Ok((features, ids))
}

/// Predict tuples for `samples` using a trained state.
///
/// The multi-task tower supports both inference modes. Single-task towers
/// each classify their own level from their own embedding space, so only
/// per-sample inference is defined for them.
pub fn predict_with_state(
    state: &TrainState,
    samples: &[Sample],
    taxonomy: &Taxonomy,
    mode: InferenceMode,
) -> Result<Vec<PredictionRecord>> {
    if state.towers.len() == 1 && state.towers[0].level.is_none() {
        let tower = &state.towers[0];
        let (features, ids) = encode_samples(tower, samples)?;
        metrics::predict(&features, &ids, &tower.bank, &tower.store, taxonomy, mode)
    } else {
        if mode != InferenceMode::PerSample {
            return Err(Error::Config(
                "grouped inference needs the shared multi-task model".into(),
            ));
        }
        let m = taxonomy.num_levels();
        let mut per_level: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut ids: Vec<String> = Vec::new();
        for tower in &state.towers {
            let level = tower
                .level
                .ok_or_else(|| Error::Config("single-task tower lacks a level".into()))?;
            let (features, tower_ids) = encode_samples(tower, samples)?;
            let protos = tower.bank.base_matrix(&tower.store, level)?;
            let preds = metrics::argmax_cosine(
                &features,
                &protos,
                |r| format!("feature of sample {}", tower_ids[r]),
                level,
            )?;
            per_level.insert(level, preds);
            ids = tower_ids;
        }
        for k in 1..=m {
            if !per_level.contains_key(&k) {
                return Err(Error::Config(format!(
                    "no single-task tower covers level {k}"
                )));
            }
        }
        Ok(ids
            .iter()
            .enumerate()
            .map(|(i, id)| PredictionRecord {
                id: id.clone(),
                pred: (1..=m).map(|k| per_level[&k][i]).collect(),
                scores: None,
            })
            .collect())
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    group: ParamGroup,
    value: Tensor,
    trainable: bool,
    velocity: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTower {
    level: Option<usize>,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: TrainConfig,
    input_dim: usize,
    classes_per_level: Vec<usize>,
    steps_done: u64,
    epochs_done: usize,
    weight_state: WeightState,
    towers: Vec<CheckpointTower>,
}

/// Write the full training state, config echo included, as JSON.
pub fn save_checkpoint(
    state: &TrainState,
    config: &TrainConfig,
    taxonomy: &Taxonomy,
    path: &Path,
) -> Result<()> {
    let towers = state
        .towers
        .iter()
        .map(|t| CheckpointTower {
            level: t.level,
            params: t
                .store
                .ids()
                .map(|id| {
                    let p = t.store.param(id);
                    CheckpointParam {
                        name: p.name.clone(),
                        group: p.group,
                        value: p.value.clone(),
                        trainable: p.trainable,
                        velocity: t.optimizer.velocity(id.index()).to_vec(),
                    }
                })
                .collect(),
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        input_dim: state.towers[0].encoder.config().input_dim,
        classes_per_level: taxonomy.classes_per_level().to_vec(),
        steps_done: state.steps_done,
        epochs_done: state.epochs_done,
        weight_state: state.weight_state.clone(),
        towers,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize checkpoint: {e}")))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restore a checkpoint against the same taxonomy it was trained on.
/// Parameters and momentum buffers come back bit-identical.
pub fn load_checkpoint(path: &Path, taxonomy: &Taxonomy) -> Result<(TrainState, TrainConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("cannot parse checkpoint: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}, expected {CHECKPOINT_VERSION}",
            file.version
        )));
    }
    if file.classes_per_level != taxonomy.classes_per_level() {
        return Err(Error::Checkpoint(format!(
            "checkpoint taxonomy {:?} does not match {:?}",
            file.classes_per_level,
            taxonomy.classes_per_level()
        )));
    }
    let mut state = init_state(taxonomy, file.input_dim, &file.config)?;
    if state.towers.len() != file.towers.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} towers, config builds {}",
            file.towers.len(),
            state.towers.len()
        )));
    }
    for (tower, saved) in state.towers.iter_mut().zip(&file.towers) {
        if tower.level != saved.level {
            return Err(Error::Checkpoint(format!(
                "tower level mismatch: checkpoint {:?}, rebuilt {:?}",
                saved.level, tower.level
            )));
        }
        let by_name: BTreeMap<&str, &CheckpointParam> =
            saved.params.iter().map(|p| (p.name.as_str(), p)).collect();
        if by_name.len() != saved.params.len() {
            return Err(Error::Checkpoint(
                "checkpoint repeats a parameter name".into(),
            ));
        }
        if saved.params.len() != tower.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tower holds {} parameters, expected {}",
                saved.params.len(),
                tower.store.len()
            )));
        }
        let ids: Vec<_> = tower.store.ids().collect();
        for id in ids {
            let expected = tower.store.param(id);
            let saved_param = by_name.get(expected.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint lacks parameter {}", expected.name))
            })?;
            if saved_param.value.shape() != expected.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in the checkpoint, expected {:?}",
                    expected.name,
                    saved_param.value.shape(),
                    expected.value.shape()
                )));
            }
            if saved_param.velocity.len() != expected.value.len() {
                return Err(Error::Checkpoint(format!(
                    "velocity for {} has {} entries, expected {}",
                    expected.name,
                    saved_param.velocity.len(),
                    expected.value.len()
                )));
            }
            saved_param.value.ensure_finite(&expected.name)?;
            *tower.store.value_mut(id) = saved_param.value.clone();
            tower.optimizer.velocities[id.index()] = saved_param.velocity.clone();
        }
    }
    state.steps_done = file.steps_done;
    state.epochs_done = file.epochs_done;
    state.weight_state = file.weight_state;
    Ok((state, file.config))
}

/// Finite-difference audit of the full objective at a fixed tiny scale:
/// four samples in eight dimensions under a 3-then-2-class taxonomy, with
/// frozen weights. `grad_scale` other than 1 deliberately corrupts the
/// analytic gradient to prove the check can fail.
pub fn gradcheck_total_loss(seed: u64, grad_scale: f64) -> Result<GradCheckReport> {
    let taxonomy = Taxonomy::from_parts(vec![3, 2], vec![vec![0, 0, 1]], None)?;
    let n = 4;
    let input_dim = 8;
    let mut config = TrainConfig::new(1);
    config.seed = seed;
    config.output_dim = 8;
    config.validate(taxonomy.num_levels())?;

    let mut rng = rng_from(derive_seed(seed, "gradcheck-data", 0));
    let mut data = Vec::with_capacity(n * input_dim);
    for _ in 0..n * input_dim {
        data.push(rng.random_range(-1.0..1.0));
    }
    let features = Tensor::matrix(n, input_dim, data)?;
    // Cycle through the finest classes so every prototype at both levels is
    // some anchor's positive. A class that only ever appears as a distant
    // negative gets an exponentially small softmax weight at tau = 0.1, and
    // its near-zero gradient coordinates sit below what central differences
    // can resolve.
    let finest: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let chains: Vec<Vec<usize>> = finest
        .iter()
        .map(|&c| vec![c, taxonomy.parent_index(1, c).unwrap()])
        .collect();
    let chain_refs: Vec<&[usize]> = chains.iter().map(|c| c.as_slice()).collect();
    let labels = labels_by_level(&chain_refs, taxonomy.num_levels())?;

    let mut towers = init_state(&taxonomy, input_dim, &config)?.towers;
    let Tower {
        encoder,
        bank,
        mut store,
        ..
    } = towers.remove(0);
    let noise = bank.noise_for_step(&store, derive_seed(seed, "perturbation", 0))?;

    let build_losses = |graph: &mut Graph, store: &ParamStore| -> Result<Vec<crate::autodiff::NodeId>> {
        let x = graph.constant(features.clone());
        let f1 = encoder.encode(graph, store, x)?;
        let protos = bank.graph_nodes(graph, store, &noise)?;
        let feats = hierarchy_features(graph, f1, &labels, &taxonomy, config.aggregation)?;
        let mut nodes = Vec::new();
        for k in 1..=taxonomy.num_levels() {
            let node = if k == 1 {
                info_nce_level1(graph, f1, &labels[0], &protos[0], config.tau, config.negatives)?
            } else {
                info_nce_levelk(graph, &feats[k - 1], &protos[k - 1], config.tau, config.negatives)?
            };
            nodes.push(node);
        }
        Ok(nodes)
    };

    let weights = {
        let mut graph = Graph::new();
        let nodes = build_losses(&mut graph, &store)?;
        let losses = nodes
            .iter()
            .map(|&n| graph.value(n).scalar_value())
            .collect::<Result<Vec<f64>>>()?;
        adaptive_weights(&losses, config.gamma)?
    };

    finite_diff_check(
        &mut store,
        |graph, store| {
            let nodes = build_losses(graph, store)?;
            total_loss(graph, &nodes, &weights)
        },
        &GradCheckOptions {
            step: 1e-5,
            grad_scale,
        },
    )
}
