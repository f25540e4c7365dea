//! Flat `key = value` run configuration: parsing, merging, and the echo
//! written into every output directory.
//!
//! A run resolves its configuration in three passes with fixed
//! precedence: the config file is read first, command-line flags
//! override it, and the `HCAL_SEED` environment variable overrides the
//! seed from either. Unknown keys are rejected rather than ignored so a
//! typo cannot silently fall back to a default, and a duplicate key in
//! one file is treated the same way.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hcal_core::aggregate::AggregationMode;
use hcal_core::encoder::TrainableScope;
use hcal_core::metrics::{HvrNorm, InferenceMode};
use hcal_core::objective::NegativeSet;
use hcal_core::prototypes::PerturbMode;
use hcal_core::trainer::{AblationToggles, TrainConfig, WeightSource, Weighting};
use hcal_core::{Error, Result};

/// Name of the environment variable that overrides the seed of any
/// command. An empty value counts as unset.
pub const SEED_ENV_VAR: &str = "HCAL_SEED";

/// File name of the resolved-configuration echo every command writes
/// into its output directory.
pub const ECHO_FILE: &str = "resolved_config.txt";

/// A training run's full configuration: every [`TrainConfig`] key plus
/// the file paths the run touches. Starts as a draft with stock values
/// and an unset epoch budget; [`RunConfig::finish`] enforces the
/// required keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub taxonomy: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    epochs_set: bool,
}

impl RunConfig {
    /// Draft with every default in place and `epochs` still unset.
    pub fn draft() -> Self {
        RunConfig {
            taxonomy: None,
            train_data: None,
            test_data: None,
            out: None,
            train: TrainConfig::new(0),
            epochs_set: false,
        }
    }

    /// Record an epoch budget from any source.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.train.epochs = epochs;
        self.epochs_set = true;
    }

    /// Apply one key from a config document. `at` locates the key for
    /// error messages, e.g. `run.config line 3`.
    pub fn apply(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        match key {
            "taxonomy" => self.taxonomy = Some(PathBuf::from(value)),
            "train" => self.train_data = Some(PathBuf::from(value)),
            "test" => self.test_data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "epochs" => {
                let epochs = parse_usize(key, value)?;
                self.set_epochs(epochs);
            }
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "seed" => self.train.seed = parse_u64(key, value)?,
            "lr_encoder" => self.train.lr_encoder = parse_f64(key, value)?,
            "lr_proto_level1" => self.train.lr_proto_level1 = parse_f64(key, value)?,
            "proto_lr_multiplier" => self.train.proto_lr_multiplier = parse_f64(key, value)?,
            "momentum" => self.train.momentum = parse_f64(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
            "gamma" => self.train.gamma = parse_f64(key, value)?,
            "epsilon" => self.train.epsilon = parse_f64(key, value)?,
            "tau" => self.train.tau = parse_f64(key, value)?,
            "output_dim" => self.train.output_dim = parse_usize(key, value)?,
            "hidden_dims" => self.train.hidden_dims = parse_usize_list(key, value)?,
            "trainable" => self.train.trainable = parse_trainable(value)?,
            "weighting" => self.train.weighting = parse_weighting(value)?,
            "fixed_weights" => self.train.fixed_weights = parse_optional_f64_list(key, value)?,
            "weight_source" => self.train.weight_source = parse_weight_source(value)?,
            "weight_ema" => self.train.weight_ema = parse_optional_f64(key, value)?,
            "negatives" => self.train.negatives = parse_negatives(value)?,
            "perturb_mode" => self.train.perturb_mode = parse_perturb_mode(value)?,
            "aggregation" => self.train.aggregation = parse_aggregation(value)?,
            "ablate" => self.train.ablation = parse_ablate(value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key `{key}` at {at}"
                )));
            }
        }
        Ok(())
    }

    /// Read a flat `key = value` file and apply every entry.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut seen = BTreeSet::new();
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{} line {}", path.display(), number + 1);
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "expected `key = value` at {at}, got `{line}`"
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("empty key at {at}")));
            }
            if value.is_empty() {
                return Err(Error::Config(format!(
                    "empty value for key `{key}` at {at}; spell an empty list as `none`"
                )));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key `{key}` at {at}")));
            }
            self.apply(key, value, &at)?;
        }
        Ok(())
    }

    /// Apply the `HCAL_SEED` override if the variable is set and
    /// non-empty.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = seed_from_env()? {
            self.train.seed = seed;
        }
        Ok(())
    }

    /// Check the required keys and hand out the resolved configuration.
    /// `taxonomy`, `train`, `out`, and `epochs` have no defaults.
    pub fn finish(self) -> Result<ResolvedRun> {
        let taxonomy = self
            .taxonomy
            .clone()
            .ok_or_else(|| missing("taxonomy", "--taxonomy"))?;
        let train_data = self
            .train_data
            .clone()
            .ok_or_else(|| missing("train", "--train-data"))?;
        let out = self.out.clone().ok_or_else(|| missing("out", "--out"))?;
        if !self.epochs_set {
            return Err(missing("epochs", "--epochs"));
        }
        Ok(ResolvedRun {
            taxonomy,
            train_data,
            test_data: self.test_data.clone(),
            out,
            config: self.train,
        })
    }

    /// Render the fully resolved document, reloadable via
    /// [`RunConfig::apply_file`]. Optional paths appear only when set.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut put = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        if let Some(p) = &self.taxonomy {
            put("taxonomy", p.display().to_string());
        }
        if let Some(p) = &self.train_data {
            put("train", p.display().to_string());
        }
        if let Some(p) = &self.test_data {
            put("test", p.display().to_string());
        }
        if let Some(p) = &self.out {
            put("out", p.display().to_string());
        }
        let t = &self.train;
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("seed", t.seed.to_string());
        put("lr_encoder", t.lr_encoder.to_string());
        put("lr_proto_level1", t.lr_proto_level1.to_string());
        put("proto_lr_multiplier", t.proto_lr_multiplier.to_string());
        put("momentum", t.momentum.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("gamma", t.gamma.to_string());
        put("epsilon", t.epsilon.to_string());
        put("tau", t.tau.to_string());
        put("output_dim", t.output_dim.to_string());
        put("hidden_dims", render_usize_list(&t.hidden_dims));
        put("trainable", render_trainable(t.trainable).to_string());
        put("weighting", render_weighting(t.weighting).to_string());
        put(
            "fixed_weights",
            match &t.fixed_weights {
                Some(w) => render_f64_list(w),
                None => "none".to_string(),
            },
        );
        put("weight_source", render_weight_source(t.weight_source).to_string());
        put(
            "weight_ema",
            match t.weight_ema {
                Some(c) => c.to_string(),
                None => "none".to_string(),
            },
        );
        put("negatives", render_negatives(t.negatives).to_string());
        put("perturb_mode", render_perturb_mode(t.perturb_mode).to_string());
        put("aggregation", render_aggregation(t.aggregation).to_string());
        put("ablate", render_ablate(t.ablation));
        out
    }
}

/// A run configuration with every required key present.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub taxonomy: PathBuf,
    pub train_data: PathBuf,
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
    pub config: TrainConfig,
}

impl ResolvedRun {
    /// Reconstruct the echo document for this resolved run.
    pub fn echo(&self) -> String {
        let draft = RunConfig {
            taxonomy: Some(self.taxonomy.clone()),
            train_data: Some(self.train_data.clone()),
            test_data: self.test_data.clone(),
            out: Some(self.out.clone()),
            train: self.config.clone(),
            epochs_set: true,
        };
        draft.echo()
    }
}

/// Read the seed override from the environment. `None` when the
/// variable is unset or empty; an unparseable value is a configuration
/// error.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) if text.is_empty() => Ok(None),
        Ok(text) => {
            let seed = text.parse::<u64>().map_err(|_| {
                Error::Config(format!(
                    "{SEED_ENV_VAR} must be an unsigned 64-bit integer, got `{text}`"
                ))
            })?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(Error::Config(format!(
            "{SEED_ENV_VAR} holds non-unicode data"
        ))),
    }
}

fn missing(key: &str, flag: &str) -> Error {
    Error::Config(format!(
        "required key `{key}` is missing; set it in the config file or pass {flag}"
    ))
}

pub fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse::<usize>().map_err(|_| {
        Error::Config(format!("{key} must be a non-negative integer, got `{value}`"))
    })
}

pub fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse::<u64>().map_err(|_| {
        Error::Config(format!(
            "{key} must be an unsigned 64-bit integer, got `{value}`"
        ))
    })
}

pub fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{key} must be a number, got `{value}`")))
}

/// Comma-separated list of counts; `none` means empty.
pub fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| parse_usize(key, part.trim()))
        .collect()
}

/// Comma-separated list of numbers; `none` means unset.
pub fn parse_optional_f64_list(key: &str, value: &str) -> Result<Option<Vec<f64>>> {
    if value == "none" {
        return Ok(None);
    }
    value
        .split(',')
        .map(|part| parse_f64(key, part.trim()))
        .collect::<Result<Vec<f64>>>()
        .map(Some)
}

/// A single number, or `none` for unset.
pub fn parse_optional_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        return Ok(None);
    }
    parse_f64(key, value).map(Some)
}

fn bad_token(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("{key} must be one of {expected}, got `{value}`"))
}

pub fn parse_weighting(value: &str) -> Result<Weighting> {
    match value {
        "adaptive" => Ok(Weighting::Adaptive),
        "fixed" => Ok(Weighting::Fixed),
        _ => Err(bad_token("weighting", value, "`adaptive`, `fixed`")),
    }
}

pub fn parse_weight_source(value: &str) -> Result<WeightSource> {
    match value {
        "current" => Ok(WeightSource::Current),
        "previous" => Ok(WeightSource::Previous),
        _ => Err(bad_token("weight_source", value, "`current`, `previous`")),
    }
}

pub fn parse_negatives(value: &str) -> Result<NegativeSet> {
    match value {
        "base_and_perturbed" => Ok(NegativeSet::BaseAndPerturbed),
        "base_only" => Ok(NegativeSet::BaseOnly),
        _ => Err(bad_token(
            "negatives",
            value,
            "`base_and_perturbed`, `base_only`",
        )),
    }
}

pub fn parse_perturb_mode(value: &str) -> Result<PerturbMode> {
    match value {
        "per_step" => Ok(PerturbMode::PerStep),
        "static" => Ok(PerturbMode::Static),
        "off" => Ok(PerturbMode::Off),
        _ => Err(bad_token(
            "perturb_mode",
            value,
            "`per_step`, `static`, `off`",
        )),
    }
}

pub fn parse_aggregation(value: &str) -> Result<AggregationMode> {
    match value {
        "sample_weighted" => Ok(AggregationMode::SampleWeighted),
        "child_mean" => Ok(AggregationMode::ChildMean),
        _ => Err(bad_token(
            "aggregation",
            value,
            "`sample_weighted`, `child_mean`",
        )),
    }
}

pub fn parse_trainable(value: &str) -> Result<TrainableScope> {
    match value {
        "all" => Ok(TrainableScope::All),
        "last_layer" => Ok(TrainableScope::LastLayer),
        _ => Err(bad_token("trainable", value, "`all`, `last_layer`")),
    }
}

pub fn parse_hvr_norm(value: &str) -> Result<HvrNorm> {
    match value {
        "edge_fraction" => Ok(HvrNorm::EdgeFraction),
        "paper_eq15" => Ok(HvrNorm::PaperEq15),
        _ => Err(bad_token(
            "hvr-norm",
            value,
            "`edge_fraction`, `paper_eq15`",
        )),
    }
}

pub fn parse_inference_mode(value: &str) -> Result<InferenceMode> {
    match value {
        "per_sample" => Ok(InferenceMode::PerSample),
        "batch_grouped" => Ok(InferenceMode::BatchGrouped),
        _ => Err(bad_token("mode", value, "`per_sample`, `batch_grouped`")),
    }
}

/// Comma-separated names of the mechanisms to disable; `none` keeps
/// everything on. One name may also be spread over repeated flags.
pub fn parse_ablate(value: &str) -> Result<AblationToggles> {
    let mut toggles = AblationToggles::default();
    if value == "none" {
        return Ok(toggles);
    }
    for name in value.split(',') {
        apply_ablate_name(&mut toggles, name.trim())?;
    }
    Ok(toggles)
}

/// Disable one named mechanism in place.
pub fn apply_ablate_name(toggles: &mut AblationToggles, name: &str) -> Result<()> {
    match name {
        "multi_task" => toggles.multi_task = false,
        "aggregation" => toggles.feature_aggregation = false,
        "perturbation" => toggles.prototype_perturbation = false,
        "adaptive" => toggles.adaptive_weighting = false,
        _ => {
            return Err(bad_token(
                "ablate",
                name,
                "`multi_task`, `aggregation`, `perturbation`, `adaptive`, `none`",
            ));
        }
    }
    Ok(())
}

pub fn render_usize_list(list: &[usize]) -> String {
    if list.is_empty() {
        return "none".to_string();
    }
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn render_f64_list(list: &[f64]) -> String {
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn render_weighting(value: Weighting) -> &'static str {
    match value {
        Weighting::Adaptive => "adaptive",
        Weighting::Fixed => "fixed",
    }
}

pub fn render_weight_source(value: WeightSource) -> &'static str {
    match value {
        WeightSource::Current => "current",
        WeightSource::Previous => "previous",
    }
}

pub fn render_negatives(value: NegativeSet) -> &'static str {
    match value {
        NegativeSet::BaseAndPerturbed => "base_and_perturbed",
        NegativeSet::BaseOnly => "base_only",
    }
}

pub fn render_perturb_mode(value: PerturbMode) -> &'static str {
    match value {
        PerturbMode::PerStep => "per_step",
        PerturbMode::Static => "static",
        PerturbMode::Off => "off",
    }
}

pub fn render_aggregation(value: AggregationMode) -> &'static str {
    match value {
        AggregationMode::SampleWeighted => "sample_weighted",
        AggregationMode::ChildMean => "child_mean",
    }
}

pub fn render_trainable(value: TrainableScope) -> &'static str {
    match value {
        TrainableScope::All => "all",
        TrainableScope::LastLayer => "last_layer",
    }
}

pub fn render_hvr_norm(value: HvrNorm) -> &'static str {
    match value {
        HvrNorm::EdgeFraction => "edge_fraction",
        HvrNorm::PaperEq15 => "paper_eq15",
    }
}

pub fn render_inference_mode(value: InferenceMode) -> &'static str {
    match value {
        InferenceMode::PerSample => "per_sample",
        InferenceMode::BatchGrouped => "batch_grouped",
    }
}

/// List of disabled mechanisms in canonical order, or `none`.
pub fn render_ablate(toggles: AblationToggles) -> String {
    let mut off = Vec::new();
    if !toggles.multi_task {
        off.push("multi_task");
    }
    if !toggles.feature_aggregation {
        off.push("aggregation");
    }
    if !toggles.prototype_perturbation {
        off.push("perturbation");
    }
    if !toggles.adaptive_weighting {
        off.push("adaptive");
    }
    if off.is_empty() {
        "none".to_string()
    } else {
        off.join(",")
    }
}

/// Class counts in nesting order, finest level first. Accepts either
/// orientation: the counts must divide along one direction of the list,
/// and that direction decides which end is the finest level.
pub fn normalize_levels(counts: &[usize]) -> Result<Vec<usize>> {
    if counts.is_empty() {
        return Err(Error::Config("levels list is empty".into()));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Config("every level needs at least one class".into()));
    }
    let finest_first = |list: &[usize]| list.windows(2).all(|w| w[0] % w[1] == 0);
    if finest_first(counts) {
        return Ok(counts.to_vec());
    }
    let reversed: Vec<usize> = counts.iter().rev().copied().collect();
    if finest_first(&reversed) {
        return Ok(reversed);
    }
    Err(Error::Config(format!(
        "level counts {counts:?} do not nest; adjacent counts must divide in one direction, e.g. 8,4,2 or 2,4,8"
    )))
}
