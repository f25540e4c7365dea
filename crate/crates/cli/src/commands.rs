//! The five pipeline commands and the files they leave behind.
//!
//! Every command that owns an output directory writes the fully
//! resolved settings it ran with next to its artifacts, so a run can be
//! reproduced from the directory alone. Reports are CSV, metrics are
//! JSON, and checkpoints are the only structured state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use hcal_core::dataset::{generate, load_dataset, write_dataset, Sample, SynthSpec};
use hcal_core::metrics::{
    metrics_report, read_predictions, write_predictions, HvrNorm, MetricsReport,
};
use hcal_core::taxonomy::load_taxonomy;
use hcal_core::trainer::{
    encode_samples, fit, fit_from, gradcheck_total_loss, load_checkpoint, save_checkpoint,
    predict_with_state, TrainState,
};
use hcal_core::{Error, Result};

use crate::args::{EvalArgs, GradcheckArgs, MetricsArgs, SynthArgs, TrainArgs};
use crate::config::{self, ResolvedRun, RunConfig, ECHO_FILE};

/// Pass threshold for the gradient audit's maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// The metrics JSON schema shared by `eval` and `metrics`: the full
/// report under both normalizations plus markers naming the default
/// and the selected one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "R")]
    pub r: usize,
    /// Accuracy per level, finest first.
    pub acc: Vec<f64>,
    pub hvr_edge_fraction: f64,
    pub hvr_paper_eq15: f64,
    pub violations_by_parent: BTreeMap<String, u64>,
    /// Normalization the `hvr` field uses when no flag is given.
    pub hvr_norm_default: String,
    /// Normalization the `hvr` field uses in this document.
    pub hvr_norm_selected: String,
    /// Headline violation rate under the selected normalization.
    pub hvr: f64,
}

impl MetricsDocument {
    pub fn new(report: &MetricsReport, selected: HvrNorm) -> Self {
        let hvr = match selected {
            HvrNorm::EdgeFraction => report.hvr_edge_fraction,
            HvrNorm::PaperEq15 => report.hvr_paper_eq15,
        };
        MetricsDocument {
            n: report.n,
            m: report.m,
            r: report.r,
            acc: report.acc.clone(),
            hvr_edge_fraction: report.hvr_edge_fraction,
            hvr_paper_eq15: report.hvr_paper_eq15,
            violations_by_parent: report.violations_by_parent.clone(),
            hvr_norm_default: config::render_hvr_norm(HvrNorm::EdgeFraction).to_string(),
            hvr_norm_selected: config::render_hvr_norm(selected).to_string(),
            hvr,
        }
    }

    /// Pretty JSON with a trailing newline, stable across runs.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
        text.push('\n');
        Ok(text)
    }
}

fn create_out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Generate a synthetic dataset and its taxonomy.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let counts = config::parse_usize_list("levels", &args.levels)?;
    let classes_per_level = config::normalize_levels(&counts)?;
    let mut seed = args.seed;
    if let Some(env_seed) = config::seed_from_env()? {
        seed = env_seed;
    }
    let spec = SynthSpec {
        classes_per_level,
        input_dim: args.input_dim,
        separation: args.separation,
        noise_sigma: args.sigma,
        samples_per_class: args.per_class,
        train_fraction: args.train_fraction,
        seed,
    };
    let output = generate(&spec)?;
    create_out_dir(&args.out)?;
    output.taxonomy.save(&args.out.join("taxonomy.json"))?;
    write_dataset(&args.out.join("train.jsonl"), &output.train)?;
    write_dataset(&args.out.join("test.jsonl"), &output.test)?;
    write_text(&args.out.join(ECHO_FILE), &synth_echo(&spec, &args.out))?;
    println!(
        "synth: {} train and {} test samples over {} levels -> {}",
        output.train.len(),
        output.test.len(),
        spec.classes_per_level.len(),
        args.out.display()
    );
    Ok(())
}

fn synth_echo(spec: &SynthSpec, out: &Path) -> String {
    let mut text = String::new();
    let mut put = |key: &str, value: String| {
        text.push_str(key);
        text.push_str(" = ");
        text.push_str(&value);
        text.push('\n');
    };
    put("levels", config::render_usize_list(&spec.classes_per_level));
    put("per_class", spec.samples_per_class.to_string());
    put("input_dim", spec.input_dim.to_string());
    put("separation", spec.separation.to_string());
    put("sigma", spec.noise_sigma.to_string());
    put("train_fraction", spec.train_fraction.to_string());
    put("seed", spec.seed.to_string());
    put("out", out.display().to_string());
    text
}

/// Resolve the training configuration from file, flags, and
/// environment, in that precedence order.
fn resolve_train_config(args: &TrainArgs) -> Result<ResolvedRun> {
    let mut draft = RunConfig::draft();
    if let Some(path) = &args.config {
        draft.apply_file(path)?;
    }
    apply_train_overrides(args, &mut draft)?;
    draft.apply_env()?;
    draft.finish()
}

fn apply_train_overrides(args: &TrainArgs, draft: &mut RunConfig) -> Result<()> {
    if let Some(p) = &args.taxonomy {
        draft.taxonomy = Some(p.clone());
    }
    if let Some(p) = &args.train_data {
        draft.train_data = Some(p.clone());
    }
    if let Some(p) = &args.test_data {
        draft.test_data = Some(p.clone());
    }
    if let Some(p) = &args.out {
        draft.out = Some(p.clone());
    }
    if let Some(n) = args.epochs {
        draft.set_epochs(n);
    }
    if let Some(n) = args.batch_size {
        draft.train.batch_size = n;
    }
    if let Some(s) = args.seed {
        draft.train.seed = s;
    }
    if let Some(v) = args.lr_encoder {
        draft.train.lr_encoder = v;
    }
    if let Some(v) = args.lr_proto_level1 {
        draft.train.lr_proto_level1 = v;
    }
    if let Some(v) = args.proto_lr_multiplier {
        draft.train.proto_lr_multiplier = v;
    }
    if let Some(v) = args.momentum {
        draft.train.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        draft.train.weight_decay = v;
    }
    if let Some(v) = args.gamma {
        draft.train.gamma = v;
    }
    if let Some(v) = args.epsilon {
        draft.train.epsilon = v;
    }
    if let Some(v) = args.tau {
        draft.train.tau = v;
    }
    if let Some(v) = args.output_dim {
        draft.train.output_dim = v;
    }
    if let Some(v) = &args.hidden_dims {
        draft.train.hidden_dims = config::parse_usize_list("hidden-dims", v)?;
    }
    if let Some(v) = &args.trainable {
        draft.train.trainable = config::parse_trainable(v)?;
    }
    if let Some(v) = &args.weighting {
        draft.train.weighting = config::parse_weighting(v)?;
    }
    if let Some(v) = &args.fixed_weights {
        draft.train.fixed_weights = config::parse_optional_f64_list("fixed-weights", v)?;
    }
    if let Some(v) = &args.weight_source {
        draft.train.weight_source = config::parse_weight_source(v)?;
    }
    if let Some(v) = &args.weight_ema {
        draft.train.weight_ema = config::parse_optional_f64("weight-ema", v)?;
    }
    if let Some(v) = &args.negatives {
        draft.train.negatives = config::parse_negatives(v)?;
    }
    if let Some(v) = &args.perturb_mode {
        draft.train.perturb_mode = config::parse_perturb_mode(v)?;
    }
    if let Some(v) = &args.aggregation {
        draft.train.aggregation = config::parse_aggregation(v)?;
    }
    if !args.ablate.is_empty() {
        draft.train.ablation = config::parse_ablate(&args.ablate.join(","))?;
    }
    Ok(())
}

/// Train a model, from scratch or resumed, and leave report.csv,
/// checkpoint.json, and the resolved configuration in the output
/// directory.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let run = resolve_train_config(args)?;
    let taxonomy = load_taxonomy(&run.taxonomy)?;
    run.config.validate(taxonomy.num_levels())?;
    let train_set = load_dataset(&run.train_data, &taxonomy)?;

    let (report, state) = match &args.resume {
        Some(ckpt_path) => {
            let (mut state, ckpt_config) = load_checkpoint(ckpt_path, &taxonomy)?;
            let mut comparable = run.config.clone();
            comparable.epochs = ckpt_config.epochs;
            if comparable != ckpt_config {
                return Err(Error::Config(
                    "resume configuration differs from the checkpoint in more than `epochs`"
                        .into(),
                ));
            }
            let report = fit_from(&train_set, &taxonomy, &run.config, &mut state)?;
            (report, state)
        }
        None => fit(&train_set, &taxonomy, &run.config)?,
    };

    create_out_dir(&run.out)?;
    write_text(
        &run.out.join("report.csv"),
        &report.to_csv(taxonomy.num_levels()),
    )?;
    save_checkpoint(&state, &run.config, &taxonomy, &run.out.join("checkpoint.json"))?;
    write_text(&run.out.join(ECHO_FILE), &run.echo())?;
    if args.dump_embeddings {
        dump_embeddings(&state, &train_set, &run.out)?;
    }
    match report.records.last() {
        Some(last) => println!(
            "train: {} epochs done, final mean loss {:.6} -> {}",
            state.epochs_done,
            last.total,
            run.out.display()
        ),
        None => println!(
            "train: checkpoint already at {} epochs, nothing to do -> {}",
            state.epochs_done,
            run.out.display()
        ),
    }
    Ok(())
}

/// Evaluate a checkpoint and leave predictions.jsonl and metrics.json
/// in the output directory.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mode = config::parse_inference_mode(&args.mode)?;
    let norm = config::parse_hvr_norm(&args.hvr_norm)?;
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let (state, _) = load_checkpoint(&args.checkpoint, &taxonomy)?;
    let samples = load_dataset(&args.data, &taxonomy)?;
    let preds = predict_with_state(&state, &samples, &taxonomy, mode)?;
    let report = metrics_report(&preds, &samples, &taxonomy)?;
    let doc = MetricsDocument::new(&report, norm);

    create_out_dir(&args.out)?;
    write_predictions(&args.out.join("predictions.jsonl"), &preds)?;
    write_text(&args.out.join("metrics.json"), &doc.to_json()?)?;
    write_text(&args.out.join(ECHO_FILE), &eval_echo(args))?;
    if args.dump_embeddings {
        dump_embeddings(&state, &samples, &args.out)?;
    }
    let acc = doc
        .acc
        .iter()
        .enumerate()
        .map(|(i, a)| format!("ACC^{} {:.4}", i + 1, a))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "eval: n={}, {}, HVR({}) {:.6} -> {}",
        doc.n,
        acc,
        doc.hvr_norm_selected,
        doc.hvr,
        args.out.display()
    );
    Ok(())
}

fn eval_echo(args: &EvalArgs) -> String {
    let mut text = String::new();
    let mut put = |key: &str, value: String| {
        text.push_str(key);
        text.push_str(" = ");
        text.push_str(&value);
        text.push('\n');
    };
    put("checkpoint", args.checkpoint.display().to_string());
    put("data", args.data.display().to_string());
    put("taxonomy", args.taxonomy.display().to_string());
    put("out", args.out.display().to_string());
    put("mode", args.mode.clone());
    put("hvr_norm", args.hvr_norm.clone());
    put("dump_embeddings", args.dump_embeddings.to_string());
    text
}

/// Recompute metrics from prediction and truth files. The document goes
/// to stdout, and into metrics.json when an output directory is given.
pub fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let norm = config::parse_hvr_norm(&args.hvr_norm)?;
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let preds = read_predictions(&args.pred)?;
    let truths = load_dataset(&args.truth, &taxonomy)?;
    let report = metrics_report(&preds, &truths, &taxonomy)?;
    let doc = MetricsDocument::new(&report, norm);
    let json = doc.to_json()?;
    if let Some(out) = &args.out {
        create_out_dir(out)?;
        write_text(&out.join("metrics.json"), &json)?;
        write_text(&out.join(ECHO_FILE), &metrics_echo(args))?;
    }
    print!("{json}");
    Ok(())
}

fn metrics_echo(args: &MetricsArgs) -> String {
    let mut text = String::new();
    let mut put = |key: &str, value: String| {
        text.push_str(key);
        text.push_str(" = ");
        text.push_str(&value);
        text.push('\n');
    };
    put("pred", args.pred.display().to_string());
    put("truth", args.truth.display().to_string());
    put("taxonomy", args.taxonomy.display().to_string());
    if let Some(out) = &args.out {
        put("out", out.display().to_string());
    }
    put("hvr_norm", args.hvr_norm.clone());
    text
}

#[derive(Serialize)]
struct GradcheckDocument<'a> {
    seed: u64,
    grad_scale: f64,
    tolerance: f64,
    coords_checked: usize,
    max_rel_error: f64,
    pass: bool,
    per_param: &'a [(String, f64)],
}

/// Audit the analytic gradient of the frozen-weight total loss against
/// central finite differences on the fixed tiny fixture. Returns the
/// process exit code: 0 on pass, 3 on a failed comparison.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let mut seed = args.seed;
    if let Some(env_seed) = config::seed_from_env()? {
        seed = env_seed;
    }
    let grad_scale = if args.corrupt { 2.0 } else { args.grad_scale };
    let report = gradcheck_total_loss(seed, grad_scale)?;
    let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
    for (name, err) in &report.per_param {
        println!("gradcheck: {name} max rel error {err:.3e}");
    }
    if let Some(worst) = &report.worst {
        println!(
            "gradcheck: worst coordinate {}[{}]: analytic {:.6e}, numeric {:.6e}",
            worst.param, worst.coord, worst.analytic, worst.numeric
        );
    }
    println!(
        "gradcheck: {} coordinates, max rel error {:.3e}, tolerance {:.0e}: {}",
        report.coords_checked,
        report.max_rel_error,
        GRADCHECK_TOLERANCE,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = &args.out {
        let doc = GradcheckDocument {
            seed,
            grad_scale,
            tolerance: GRADCHECK_TOLERANCE,
            coords_checked: report.coords_checked,
            max_rel_error: report.max_rel_error,
            pass,
            per_param: &report.per_param,
        };
        let mut json = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Data(format!("gradcheck serialization: {e}")))?;
        json.push('\n');
        create_out_dir(out)?;
        write_text(&out.join("gradcheck.json"), &json)?;
        write_text(&out.join(ECHO_FILE), &gradcheck_echo(args, seed, grad_scale))?;
    }
    Ok(if pass { 0 } else { 3 })
}

fn gradcheck_echo(args: &GradcheckArgs, seed: u64, grad_scale: f64) -> String {
    let mut text = String::new();
    let mut put = |key: &str, value: String| {
        text.push_str(key);
        text.push_str(" = ");
        text.push_str(&value);
        text.push('\n');
    };
    put("seed", seed.to_string());
    put("grad_scale", grad_scale.to_string());
    if let Some(out) = &args.out {
        put("out", out.display().to_string());
    }
    text
}

/// Write level-1 embeddings for `samples` and every base prototype row
/// as CSV. Single-task states repeat the sample block once per tower,
/// tagged by the tower column.
fn dump_embeddings(state: &TrainState, samples: &[Sample], out: &Path) -> Result<()> {
    let mut emb = String::new();
    let mut proto = String::new();
    for tower in &state.towers {
        let label = match tower.level {
            None => "shared".to_string(),
            Some(k) => format!("level{k}"),
        };
        let (features, ids) = encode_samples(tower, samples)?;
        let d = features.cols();
        if emb.is_empty() {
            emb.push_str("tower,id");
            for j in 1..=d {
                emb.push_str(&format!(",f_{j}"));
            }
            emb.push('\n');
        }
        let data = features.data();
        for (r, id) in ids.iter().enumerate() {
            emb.push_str(&label);
            emb.push(',');
            emb.push_str(id);
            for value in &data[r * d..(r + 1) * d] {
                emb.push(',');
                emb.push_str(&value.to_string());
            }
            emb.push('\n');
        }
        for level in tower.bank.levels() {
            let matrix = tower.bank.base_matrix(&tower.store, level)?;
            let cols = matrix.cols();
            if proto.is_empty() {
                proto.push_str("tower,level,class");
                for j in 1..=cols {
                    proto.push_str(&format!(",p_{j}"));
                }
                proto.push('\n');
            }
            let rows = matrix.data();
            for class in 0..matrix.rows() {
                proto.push_str(&format!("{label},{level},{class}"));
                for value in &rows[class * cols..(class + 1) * cols] {
                    proto.push(',');
                    proto.push_str(&value.to_string());
                }
                proto.push('\n');
            }
        }
    }
    write_text(&out.join("embeddings.csv"), &emb)?;
    write_text(&out.join("prototypes.csv"), &proto)
}
