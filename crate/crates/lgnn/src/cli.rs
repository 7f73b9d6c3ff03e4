//! Command-line interface: train, ablate, gradcheck, ingest, params.
//!
//! A single config file fully determines a run; flags are overrides layered
//! on top. All failures exit nonzero with a one-line machine-parsable error
//! on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gradcheck;
use crate::graph::{
    ingest_content_cites, load_bundle, synthetic_graph, GraphBundle, LoadOptions, SplitMode,
    SplitSpec, SyntheticKind, SyntheticSpec,
};
use crate::layers::{GcnNorm, GraphTopo, Localization};
use crate::model::{
    loss_total, param_count, param_ledger, Model, ModelConfig, ModelKind, ParamCounts,
    ParamRegistry,
};
use crate::tensor::{Matrix, Tape};
use crate::train::{ablation_suite, multi_run, Precision, RunResult, TrainConfig};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("graph: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("train: {0}")]
    Train(#[from] crate::train::TrainError),
    #[error("tensor: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("gradcheck: {0}")]
    GradCheck(#[from] gradcheck::GradCheckError),
    #[error("gradcheck failed: max relative error {max:.3e} exceeds tolerance {tol:.1e}")]
    GradCheckExceeded { max: f64, tol: f64 },
    #[error("output exists: {0} (pass --overwrite to replace)")]
    OutputExists(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Complete serialized experiment description; round-trips through TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Row-normalize features to sum one on load.
    pub row_normalize: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            out: None,
            row_normalize: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of everything that determines the numbers (the output
    /// directory is excluded).
    pub fn fingerprint(&self) -> String {
        let mut scrubbed = self.clone();
        scrubbed.out = None;
        let json = serde_json::to_string(&scrubbed).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Named model presets: base architecture plus its localization defaults.
pub fn apply_preset(config: &mut ModelConfig, name: &str) -> Result<()> {
    let (kind, localization) = match name {
        "gcn" => (ModelKind::Gcn, Localization::None),
        "gat" => (ModelKind::Gat, Localization::None),
        "gin" => (ModelKind::Gin, Localization::None),
        "lgcn" => (ModelKind::Gcn, Localization::Both),
        "lgat" => (ModelKind::Gat, Localization::Both),
        "lgin" => (ModelKind::Gin, Localization::Both),
        "gcn-film" => (ModelKind::Gcn, Localization::Film),
        "gat-film" => (ModelKind::Gat, Localization::Film),
        "gin-film" => (ModelKind::Gin, Localization::Film),
        other => {
            return Err(CliError::Config(format!(
                "unknown model preset '{other}' (expected gcn|gat|gin|lgcn|lgat|lgin|gcn-film|gat-film|gin-film)"
            )))
        }
    };
    config.kind = kind;
    config.localization = localization;
    // Plain GCN uses symmetric degree normalization; the localized variant
    // aggregates over the mean of the closed neighborhood.
    config.gcn_norm = match localization {
        Localization::None | Localization::Film => GcnNorm::Sym,
        _ => GcnNorm::ContextMean,
    };
    match localization {
        Localization::None => {
            config.lambda_l = 0.0;
            config.lambda = 0.0;
        }
        Localization::Film => {
            config.lambda_l = 1.0;
            config.lambda = 0.0;
        }
        _ => {
            config.lambda_l = 1.0;
            config.lambda = if kind == ModelKind::Gat { 0.1 } else { 1.0 };
        }
    }
    Ok(())
}

pub fn parse_localization(s: &str) -> Result<Localization> {
    match s {
        "none" => Ok(Localization::None),
        "node" => Ok(Localization::Node),
        "edge" => Ok(Localization::Edge),
        "both" => Ok(Localization::Both),
        "film" => Ok(Localization::Film),
        other => Err(CliError::Config(format!(
            "unknown localization '{other}' (expected none|node|edge|both|film)"
        ))),
    }
}

pub fn localization_name(l: Localization) -> &'static str {
    match l {
        Localization::None => "none",
        Localization::Node => "node",
        Localization::Edge => "edge",
        Localization::Both => "both",
        Localization::Film => "film",
    }
}

/// `"10"` means seeds 0..10; `"3,7,9"` is an explicit list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Config(format!("cannot parse seeds '{s}' (int or comma list)"));
    if s.contains(',') {
        s.split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
            .collect()
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        Ok((0..n).collect())
    }
}

/// `"fixed"` or `"random:<seed>"`.
pub fn parse_split(s: &str, spec: &mut SplitSpec) -> Result<()> {
    if s == "fixed" {
        spec.mode = SplitMode::FixedFile;
        return Ok(());
    }
    if let Some(seed) = s.strip_prefix("random:") {
        spec.mode = SplitMode::SeededRandom;
        spec.seed = seed
            .parse()
            .map_err(|_| CliError::Config(format!("bad split seed in '{s}'")))?;
        return Ok(());
    }
    Err(CliError::Config(format!(
        "unknown split '{s}' (expected fixed or random:<seed>)"
    )))
}

/// `"er:<n>:<p>"` or `"sbm:<n>:<p_in>:<p_out>"`.
pub fn parse_synthetic(s: &str, feature_dim: usize, num_classes: usize, seed: u64) -> Result<SyntheticSpec> {
    let bad = || CliError::Config(format!("cannot parse synthetic spec '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    let kind = match parts.as_slice() {
        ["er", n, p] => {
            return Ok(SyntheticSpec {
                kind: SyntheticKind::Er {
                    p: p.parse().map_err(|_| bad())?,
                },
                n: n.parse().map_err(|_| bad())?,
                feature_dim,
                num_classes,
                seed,
            })
        }
        ["sbm", n, p_in, p_out] => SyntheticSpec {
            kind: SyntheticKind::Sbm {
                p_in: p_in.parse().map_err(|_| bad())?,
                p_out: p_out.parse().map_err(|_| bad())?,
            },
            n: n.parse().map_err(|_| bad())?,
            feature_dim,
            num_classes,
            seed,
        },
        _ => return Err(bad()),
    };
    Ok(kind)
}

#[derive(Parser, Debug)]
#[command(name = "lgnn", version, about = "Localized GNN training toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a bundle and write result.json + curves.tsv.
    Train(RunArgs),
    /// Run the four-variant localization ablation.
    Ablate(RunArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Convert raw .content/.cites citation files into a bundle directory.
    Ingest(IngestArgs),
    /// Print the per-tensor parameter ledger and group totals.
    Params(ParamsArgs),
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// TOML experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Model preset.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Localization mode override: none|node|edge|both|film.
    #[arg(long)]
    pub localization: Option<String>,
    #[arg(long = "lambda-g")]
    pub lambda_g: Option<f64>,
    #[arg(long = "lambda-l")]
    pub lambda_l: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Seed count (0..n) or explicit comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long = "val-size")]
    pub val_size: Option<usize>,
    /// fixed | random:<seed>
    #[arg(long)]
    pub split: Option<String>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    #[arg(long = "max-epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Output directory (default ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Synthetic graph: er:<n>:<p> or sbm:<n>:<p_in>:<p_out>.
    #[arg(long, default_value = "er:30:0.2")]
    pub synthetic: String,
    #[arg(long, default_value = "lgcn")]
    pub model: String,
    #[arg(long)]
    pub localization: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 10)]
    pub features: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Raw .content file (id, features, label per line).
    pub content: PathBuf,
    /// Raw .cites file (cited, citing per line).
    pub cites: PathBuf,
    /// Output bundle directory.
    pub out: PathBuf,
    #[arg(long, default_value = "dataset")]
    pub name: String,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[arg(long, default_value = "lgcn")]
    pub model: String,
    #[arg(long)]
    pub localization: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Bundle directory to read dimensions from; defaults to 1433 features /
    /// 7 classes when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 1433)]
    pub features: usize,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(model) = &args.model {
        apply_preset(&mut config.model, model)?;
    }
    if let Some(l) = &args.localization {
        config.model.localization = parse_localization(l)?;
    }
    if let Some(h) = args.hidden {
        config.model.hidden_dim = h;
    }
    if let Some(h) = args.heads {
        config.model.heads = h;
    }
    if let Some(v) = args.lambda_g {
        config.model.lambda_g = v;
    }
    if let Some(v) = args.lambda_l {
        config.model.lambda_l = v;
    }
    if let Some(v) = args.lambda {
        config.model.lambda = v;
    }
    if let Some(v) = args.dropout {
        config.model.dropout = v;
    }
    if let Some(s) = &args.seeds {
        config.train.seeds = parse_seeds(s)?;
    }
    if let Some(v) = args.val_size {
        config.split.val_size = v;
    }
    if let Some(s) = &args.split {
        parse_split(s, &mut config.split)?;
    }
    if let Some(p) = &args.precision {
        config.train.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(CliError::Config(format!(
                    "unknown precision '{other}' (expected f32 or f64)"
                )))
            }
        };
    }
    if let Some(v) = args.max_epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = args.patience {
        config.train.patience = v;
    }
    if let Some(v) = args.lr {
        config.train.lr = v;
    }
    if let Some(d) = &args.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(o) = &args.out {
        config.out = Some(o.clone());
    }
    config.train.validate()?;
    Ok(config)
}

fn load_dataset(config: &ExperimentConfig) -> Result<GraphBundle> {
    let dir = config
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::Config("no dataset given (--dataset or config file)".into()))?;
    let mut bundle = load_bundle(
        dir,
        LoadOptions {
            row_normalize: config.row_normalize,
        },
    )?;
    bundle.make_splits(&config.split)?;
    Ok(bundle)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn guard_output(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(CliError::OutputExists(path.display().to_string()));
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Serialize)]
struct DatasetSummary {
    name: String,
    num_nodes: usize,
    num_classes: usize,
    feature_dim: usize,
    undirected_edges: usize,
}

impl DatasetSummary {
    fn of(bundle: &GraphBundle) -> Self {
        DatasetSummary {
            name: bundle.name.clone(),
            num_nodes: bundle.num_nodes,
            num_classes: bundle.num_classes,
            feature_dim: bundle.feature_dim,
            undirected_edges: bundle.undirected_edges.len(),
        }
    }
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    test_accuracy: f64,
    micro_f: f64,
    macro_f: f64,
    best_epoch: usize,
    epochs_run: usize,
    wall_ms: u64,
}

#[derive(Serialize)]
struct ResultFile<'a> {
    schema_version: u32,
    config_fingerprint: String,
    dataset: DatasetSummary,
    param_counts: ParamCounts,
    per_seed: Vec<SeedSummary>,
    aggregate: &'a crate::train::Aggregate,
    failures: &'a [crate::train::SeedFailure],
}

fn result_json(
    config: &ExperimentConfig,
    bundle: &GraphBundle,
    counts: ParamCounts,
    result: &RunResult,
) -> String {
    let per_seed = result
        .per_seed
        .iter()
        .map(|r| SeedSummary {
            seed: r.seed,
            test_accuracy: r.test.accuracy,
            micro_f: r.test.micro_f,
            macro_f: r.test.macro_f,
            best_epoch: r.best_epoch,
            epochs_run: r.epochs_run,
            wall_ms: r.wall_ms,
        })
        .collect();
    let file = ResultFile {
        schema_version: RESULT_SCHEMA_VERSION,
        config_fingerprint: config.fingerprint(),
        dataset: DatasetSummary::of(bundle),
        param_counts: counts,
        per_seed,
        aggregate: &result.aggregate,
        failures: &result.failures,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("result serializes");
    s.push('\n');
    s
}

fn curves_tsv(result: &RunResult) -> String {
    let mut out = String::from("seed\tepoch\ttrain_loss\tval_loss\tval_accuracy\n");
    for run in &result.per_seed {
        for p in &run.curve {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                run.seed, p.epoch, p.train_loss, p.val_loss, p.val_accuracy
            ));
        }
    }
    out
}

fn run_with_precision(
    config: &ExperimentConfig,
    bundle: &GraphBundle,
    model: &ModelConfig,
) -> Result<RunResult> {
    Ok(match config.train.precision {
        Precision::F32 => multi_run::<f32>(bundle, model, &config.train)?,
        Precision::F64 => multi_run::<f64>(bundle, model, &config.train)?,
    })
}

fn print_summary(label: &str, counts: ParamCounts, result: &RunResult) {
    let a = &result.aggregate;
    println!(
        "{label}: {} seeds, test accuracy {:.4} +/- {:.4}, micro-F {:.4} +/- {:.4}, macro-F {:.4} +/- {:.4}, params {} (global {}, localization {})",
        result.per_seed.len(),
        a.mean_accuracy,
        a.std_accuracy,
        a.mean_micro_f,
        a.std_micro_f,
        a.mean_macro_f,
        a.std_macro_f,
        counts.total,
        counts.global,
        counts.localization,
    );
    for f in &result.failures {
        println!("  seed {} failed: {}", f.seed, f.error);
    }
}

pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let bundle = load_dataset(&config)?;
    let dir = out_dir(&config);
    let result_path = dir.join("result.json");
    guard_output(&result_path, args.overwrite)?;

    let counts = param_count(&config.model, bundle.feature_dim, bundle.num_classes);
    let result = run_with_precision(&config, &bundle, &config.model)?;

    write_file(&result_path, &result_json(&config, &bundle, counts, &result))?;
    write_file(&dir.join("curves.tsv"), &curves_tsv(&result))?;
    write_file(&dir.join("resolved_config.toml"), &config.to_toml())?;
    print_summary(&bundle.name, counts, &result);
    println!("wrote {}", result_path.display());
    Ok(())
}

pub fn cmd_ablate(args: &RunArgs) -> Result<()> {
    let config = resolve_config(args)?;
    let bundle = load_dataset(&config)?;
    let dir = out_dir(&config);
    let table_path = dir.join("ablation.tsv");
    guard_output(&table_path, args.overwrite)?;

    let results = match config.train.precision {
        Precision::F32 => ablation_suite::<f32>(&bundle, &config.model, &config.train)?,
        Precision::F64 => ablation_suite::<f64>(&bundle, &config.model, &config.train)?,
    };

    let mut table = String::from("variant\tmean_accuracy\tstd_accuracy\n");
    for (localization, result) in &results {
        let name = localization_name(*localization);
        let mut variant_config = config.clone();
        variant_config.model.localization = *localization;
        let counts = param_count(
            &variant_config.model,
            bundle.feature_dim,
            bundle.num_classes,
        );
        write_file(
            &dir.join(format!("result-{name}.json")),
            &result_json(&variant_config, &bundle, counts, result),
        )?;
        table.push_str(&format!(
            "{name}\t{}\t{}\n",
            result.aggregate.mean_accuracy, result.aggregate.std_accuracy
        ));
        print_summary(&format!("{} [{name}]", bundle.name), counts, result);
    }
    write_file(&table_path, &table)?;
    write_file(&dir.join("resolved_config.toml"), &config.to_toml())?;
    println!("wrote {}", table_path.display());
    Ok(())
}

/// Build a small model on a synthetic graph and compare every analytic
/// gradient against central finite differences. Always runs in f64.
pub fn gradcheck_report(args: &GradcheckArgs) -> Result<gradcheck::GradCheckReport> {
    let spec = parse_synthetic(&args.synthetic, args.features, args.classes, args.seed)?;
    let bundle = synthetic_graph(&spec)?;
    let mut model_config = ModelConfig {
        hidden_dim: args.hidden,
        heads: args.heads,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    apply_preset(&mut model_config, &args.model)?;
    model_config.dropout = 0.0;
    if let Some(l) = &args.localization {
        model_config.localization = parse_localization(l)?;
    }

    let mut registry = ParamRegistry::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = Model::build(
        &model_config,
        bundle.feature_dim,
        bundle.num_classes,
        &mut registry,
        &mut rng,
    );
    // move gates off their zero initialization so their backward paths carry
    // nontrivial signal
    let ids: Vec<_> = registry.ids().collect();
    for id in ids {
        for x in registry.value_mut(id).data_mut() {
            *x += 0.1 * (rng.gen_range(0.0..1.0) - 0.5);
        }
    }

    let topo = GraphTopo::from_bundle(&bundle);
    let train_mask: Vec<usize> = (0..bundle.num_nodes).collect();
    let features: Matrix<f64> = bundle.features.cast();

    let eval = |reg: &ParamRegistry<f64>,
                want_grads: bool|
     -> crate::tensor::Result<(f64, Vec<Matrix<f64>>)> {
        let mut tape = Tape::new();
        let leaves = reg.push_leaves(&mut tape)?;
        let x = tape.constant(features.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (probs, gates) = model.forward(&mut tape, &leaves, &topo, x, false, &mut rng)?;
        let (loss, _) = loss_total(
            &mut tape,
            probs,
            &bundle.labels,
            &train_mask,
            reg,
            &leaves,
            &gates,
            model_config.lambda_g,
            model_config.lambda_l,
            model_config.lambda,
        )?;
        let value = tape.value(loss).get(0, 0);
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = leaves
            .iter()
            .map(|&t| match tape.grad(t) {
                Some(g) => g.clone(),
                None => {
                    let s = tape.shape(t);
                    Matrix::zeros(s.rows, s.cols)
                }
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(&registry, true)?;
    let names: Vec<String> = registry
        .ids()
        .map(|id| registry.name(id).to_string())
        .collect();
    let mut params = registry.snapshot();
    let mut probe = registry.clone();
    let report = gradcheck::check(
        &names,
        &mut params,
        &analytic,
        |p| {
            probe.restore(p);
            eval(&probe, false).map(|(l, _)| l)
        },
        args.eps,
    )?;
    Ok(report)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = gradcheck_report(args)?;
    println!("parameter\telements\tmax_rel_err");
    for e in &report.entries {
        println!("{}\t{}\t{:.3e}", e.name, e.elements, e.max_rel_err);
    }
    let max = report.max_rel_err();
    println!(
        "max relative error {:.3e} (eps {:.1e}, tolerance {:.1e})",
        max, report.eps, args.tol
    );
    if max > args.tol {
        return Err(CliError::GradCheckExceeded { max, tol: args.tol });
    }
    println!("gradcheck passed");
    Ok(())
}

pub fn cmd_ingest(args: &IngestArgs) -> Result<()> {
    guard_output(&args.out.join("meta.json"), args.overwrite)?;
    let report = ingest_content_cites(&args.content, &args.cites, &args.out, &args.name)?;
    println!(
        "ingested {}: {} nodes, {} classes, {} features, {} undirected edges",
        args.name, report.num_nodes, report.num_classes, report.feature_dim,
        report.undirected_edges
    );
    println!(
        "cites lines {} (dropped: {} unknown id, {} self loop, {} duplicate)",
        report.raw_cite_lines, report.dropped_unknown, report.dropped_self,
        report.dropped_duplicate
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let (feature_dim, num_classes, label) = match &args.dataset {
        Some(dir) => {
            let bundle = load_bundle(dir, LoadOptions::default())?;
            (bundle.feature_dim, bundle.num_classes, bundle.name)
        }
        None => (args.features, args.classes, "default".to_string()),
    };
    let mut config = ModelConfig::default();
    apply_preset(&mut config, &args.model)?;
    if let Some(l) = &args.localization {
        config.localization = parse_localization(l)?;
    }
    if let Some(h) = args.hidden {
        config.hidden_dim = h;
    }
    if let Some(h) = args.heads {
        config.heads = h;
    }
    println!(
        "{} on {label} ({feature_dim} features, {num_classes} classes)",
        args.model
    );
    println!("tensor\tgroup\telements");
    for (name, group, elements) in param_ledger(&config, feature_dim, num_classes) {
        let g = match group {
            crate::model::ParamGroup::Global => "global",
            crate::model::ParamGroup::Localization => "localization",
        };
        println!("{name}\t{g}\t{elements}");
    }
    let counts = param_count(&config, feature_dim, num_classes);
    println!(
        "total {} (global {}, localization {})",
        counts.total, counts.global, counts.localization
    );
    Ok(())
}

/// Parse argv and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Params(args) => cmd_params(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
