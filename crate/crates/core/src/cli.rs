//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for configuration or runtime errors, 2 for
//! usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{build_reference_cache, generate_synthetic, EmbeddingCache, PairedDataset, SyntheticSpec};
use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::experiments::{
    data_efficiency_sweep, fit_scaling_law, loss_variance, plot_data_csv, read_scaling_points, recall_at_1,
    scaling_sweep, write_scaling_plot_data, ScalingSpec,
};
use crate::trainer::{train, Method, TauMode, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "drrho", version, about = "Reference-shifted robust contrastive training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Embed a dataset with a reference model (loaded or trained here).
    RefEmbed(RefEmbedArgs),
    /// Train a target model.
    Train(TrainArgs),
    /// Retrieval accuracy of a saved model.
    Eval(EvalArgs),
    /// Per-anchor loss variance with and without a reference.
    Variance(VarianceArgs),
    /// Data-efficiency or scaling sweep over many training runs.
    Sweep(SweepArgs),
    /// Fit E = α·C^β to a CSV of `compute,error` points.
    ScalingFit(ScalingFitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Openclip,
    Fastclip,
    DrrhoClip,
    Jest,
    JestTopk,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Openclip => Method::OpenClip,
            MethodArg::Fastclip => Method::FastClip,
            MethodArg::DrrhoClip => Method::DrrhoClip,
            MethodArg::Jest => Method::Jest,
            MethodArg::JestTopk => Method::JestTopk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TauModeArg {
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    DataEfficiency,
    Scaling,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    d_x: usize,
    #[arg(long, default_value_t = 32)]
    d_y: usize,
    #[arg(long, default_value_t = 8)]
    d_latent: usize,
    #[arg(long, default_value_t = 0.6)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// File name inside the output directory.
    #[arg(long, default_value = "data.dpd")]
    name: String,
}

/// Training options shared by `train`, `ref-embed` and `sweep`. Unset options
/// keep the value from `--config` or the method default.
#[derive(Debug, Args, Default)]
struct TrainOptions {
    /// JSON file with a full or partial training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer steps (JEST multiplies this by its iteration multiplier).
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, value_enum)]
    tau_mode: Option<TauModeArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau_init: Option<f64>,
    #[arg(long)]
    tau_min: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    distill: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_ref: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    n_chunks: Option<usize>,
    #[arg(long)]
    sample_temp: Option<f64>,
}

impl TrainOptions {
    fn resolve(&self, method: Option<Method>, fallback: Method) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str::<TrainConfig>(&text)
                    .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::for_method(method.unwrap_or(fallback)),
        };
        if let Some(m) = method {
            c.method = m;
        }
        macro_rules! set {
            ($($opt:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$opt { c.$field = v; })*
            };
        }
        set!(
            seed => seed,
            batch_size => batch_size,
            iterations => iterations,
            lr => lr,
            warmup_steps => warmup_steps,
            weight_decay => weight_decay,
            embed_dim => embed_dim,
            tau => tau_fixed,
            tau_init => tau_init,
            tau_min => tau_min,
            gamma => gamma,
            epsilon => epsilon,
            fraction => fraction,
            lambda => lambda,
            tau_ref => tau_ref,
            ratio => jest_ratio,
            n_chunks => jest_chunks,
            sample_temp => jest_sample_temp,
        );
        if let Some(m) = self.tau_mode {
            c.tau_mode = Some(match m {
                TauModeArg::Fixed => TauMode::Fixed,
                TauModeArg::Learnable => TauMode::Learnable,
            });
        }
        if self.rho.is_some() {
            c.rho = self.rho;
        }
        if self.eval_every.is_some() {
            c.eval_every = self.eval_every;
        }
        if self.distill {
            c.distill = true;
        }
        c.validate()?;
        Ok(c.resolved())
    }
}

#[derive(Debug, Args)]
struct RefEmbedArgs {
    #[arg(long)]
    data: PathBuf,
    /// Use this saved model as the reference instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Method used to train the reference when no model is given.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[command(flatten)]
    train: TrainOptions,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "cache.emb")]
    name: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    data: PathBuf,
    /// Reference embedding cache.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOptions,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Use at most this many pairs of the split.
    #[arg(long, default_value_t = 512)]
    max_pairs: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "data-efficiency")]
    kind: SweepKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["fastclip", "drrho-clip"])]
    methods: Vec<MethodArg>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.75, 0.5])]
    fractions: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Embedding dimensions (scaling sweeps).
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16])]
    dims: Vec<usize>,
    /// Step budgets (scaling sweeps).
    #[arg(long, value_delimiter = ',', default_values_t = [100u64, 200, 400])]
    steps: Vec<u64>,
    #[command(flatten)]
    train: TrainOptions,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct ScalingFitArgs {
    /// CSV with a header and `compute,error` rows.
    points: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parse `argv` (including the program name), run the command and return the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DRRHO_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::config("DRRHO_THREADS", format!("expected a positive integer, got {value:?}")))?;
    // A pool may already exist when `run` is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::RefEmbed(a) => ref_embed(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Variance(a) => variance(a),
        Command::Sweep(a) => sweep(a),
        Command::ScalingFit(a) => scaling_fit(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn split_indices(dataset: &PairedDataset, split: SplitArg) -> Vec<usize> {
    match split {
        SplitArg::Train => dataset.train_indices(),
        SplitArg::Test => dataset.test_indices(),
        SplitArg::All => (0..dataset.len()).collect(),
    }
}

fn load_cache(path: Option<&PathBuf>) -> Result<Option<EmbeddingCache>> {
    path.map(|p| EmbeddingCache::load(p)).transpose()
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: a.n,
        d_x: a.d_x,
        d_y: a.d_y,
        d_latent: a.d_latent,
        noise_sigma: a.noise_sigma,
        test_fraction: a.test_fraction,
        seed: a.seed,
    };
    let dataset = generate_synthetic(&spec)?;
    create_dir(&a.output)?;
    let path = a.output.join(&a.name);
    dataset.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn ref_embed(a: RefEmbedArgs) -> Result<()> {
    let dataset = PairedDataset::load(&a.data)?;
    create_dir(&a.output)?;
    let model = match &a.model {
        Some(path) => TwoTowerModel::load(path)?,
        None => {
            let config = a.train.resolve(a.method.map(Method::from), Method::FastClip)?;
            if config.method.needs_reference() || config.distill {
                return Err(Error::config(
                    "method",
                    format!("a reference cannot be trained with {}, which itself needs one", config.method),
                ));
            }
            let out = train(&config, &dataset, None)?;
            out.report.write(&a.output, "reference_report")?;
            out.state.model.save(&a.output.join("reference.bin"))?;
            out.state.model
        }
    };
    let cache = build_reference_cache(&dataset, &model)?;
    let path = a.output.join(&a.name);
    cache.save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = a.train.resolve(a.method.map(Method::from), Method::DrrhoClip)?;
    let dataset = PairedDataset::load(&a.data)?;
    let cache = load_cache(a.reference.as_ref())?;
    let out = train(&config, &dataset, cache.as_ref())?;
    create_dir(&a.output)?;
    out.report.write(&a.output, "report")?;
    out.state.model.save(&a.output.join("model.bin"))?;
    out.state.save(&a.output.join("checkpoint.bin"))?;
    for (k, v) in &out.report.summary {
        println!("{k} = {v}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    model_id: String,
    dataset_hash: String,
    split: String,
    n: usize,
    recall_at_1: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = PairedDataset::load(&a.data)?;
    let model = TwoTowerModel::load(&a.model)?;
    let indices = split_indices(&dataset, a.split);
    if indices.is_empty() {
        return Err(Error::config("split", "the selected split is empty"));
    }
    let (xs, ys) = dataset.batch(&indices);
    let recall = recall_at_1(&model.forward(xs.view(), ys.view())?.sim)?;
    let summary = EvalSummary {
        model_id: model.id_hash(),
        dataset_hash: dataset.content_hash(),
        split: format!("{:?}", a.split).to_lowercase(),
        n: indices.len(),
        recall_at_1: recall,
    };
    create_dir(&a.output)?;
    write_json(&a.output.join("eval.json"), &summary)?;
    println!("recall_at_1 = {recall}");
    Ok(())
}

fn variance(a: VarianceArgs) -> Result<()> {
    let dataset = PairedDataset::load(&a.data)?;
    let model = TwoTowerModel::load(&a.model)?;
    let cache = EmbeddingCache::load(&a.reference)?;
    cache.check_matches(&dataset)?;
    let mut indices = split_indices(&dataset, a.split);
    indices.truncate(a.max_pairs);
    let (xs, ys) = dataset.batch(&indices);
    let s = model.forward(xs.view(), ys.view())?.sim;
    let r = cache.similarity(&indices);
    let plain = loss_variance(&s, None)?;
    let rho = loss_variance(&s, Some(&r))?;
    create_dir(&a.output)?;
    write_json(
        &a.output.join("variance.json"),
        &serde_json::json!({
            "model_id": model.id_hash(),
            "reference_id": cache.source_id,
            "n": indices.len(),
            "plain": { "image": plain.image, "text": plain.text },
            "rho": { "image": rho.image, "text": rho.text },
        }),
    )?;
    println!(
        "image: plain {:.6e} ± {:.3e}, rho {:.6e} ± {:.3e}",
        plain.image.mean, plain.image.std, rho.image.mean, rho.image.std
    );
    println!(
        "text:  plain {:.6e} ± {:.3e}, rho {:.6e} ± {:.3e}",
        plain.text.mean, plain.text.std, rho.text.mean, rho.text.std
    );
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let dataset = PairedDataset::load(&a.data)?;
    let cache = load_cache(a.reference.as_ref())?;
    let configs = a
        .methods
        .iter()
        .map(|&m| a.train.resolve(Some(m.into()), Method::DrrhoClip))
        .collect::<Result<Vec<_>>>()?;
    create_dir(&a.output)?;
    match a.kind {
        SweepKind::DataEfficiency => {
            let out = data_efficiency_sweep(&configs, &a.fractions, &a.seeds, &dataset, cache.as_ref())?;
            out.report.write(&a.output, "sweep")?;
            write_text(&a.output.join("table.csv"), &out.table_csv()?)?;
            for c in &configs {
                let xy: Vec<(f64, f64)> = out
                    .rows
                    .iter()
                    .filter(|r| r.method == c.method && r.distill == c.distill)
                    .map(|r| (r.fraction, r.mean_recall_at_1))
                    .collect();
                write_text(
                    &a.output.join(format!("plot_recall_vs_fraction_{}.csv", c.method)),
                    &plot_data_csv("fraction", "recall_at_1", &xy)?,
                )?;
            }
            print!("{}", out.table_csv()?);
        }
        SweepKind::Scaling => {
            let spec = ScalingSpec {
                configs,
                embed_dims: a.dims.clone(),
                steps: a.steps.clone(),
                fractions: a.fractions.clone(),
                seeds: a.seeds.clone(),
            };
            let curves = scaling_sweep(&spec, &dataset, cache.as_ref())?;
            write_json(&a.output.join("scaling.json"), &curves)?;
            write_scaling_plot_data(&a.output, &curves)?;
            for c in &curves {
                let xy: Vec<(f64, f64)> = c.points.iter().map(|p| (p.compute, p.error)).collect();
                write_text(
                    &a.output.join(format!("points_{}.csv", c.method)),
                    &plot_data_csv("compute", "error", &xy)?,
                )?;
                println!(
                    "{}: alpha = {}, beta = {}, residual = {}",
                    c.method, c.fit.alpha, c.fit.beta, c.fit.residual
                );
            }
        }
    }
    Ok(())
}

fn scaling_fit(a: ScalingFitArgs) -> Result<()> {
    let points = read_scaling_points(&a.points)?;
    let fit = fit_scaling_law(&points)?;
    println!("alpha = {}", fit.alpha);
    println!("beta = {}", fit.beta);
    println!("residual = {}", fit.residual);
    if let Some(dir) = a.output {
        create_dir(&dir)?;
        write_json(&dir.join("fit.json"), &fit)?;
    }
    Ok(())
}
