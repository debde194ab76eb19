use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_atlas::importance::{rank_variables, select_top};
use latent_atlas::inversion::{
    comparison_strip, invert_batch, invert_recoder, range_probe, GradientConfig, InitRule,
    InversionResult, ProbeMethod,
};
use latent_atlas::manifold::{invert_intensity, make_dataset, Dataset, SIDE};
use latent_atlas::mapping::{
    evaluate_mapping, instance_name, latent_mse, FitMethod, FitOptions, MapFit, MinibatchOptions,
};
use latent_atlas::models::{
    image_strip, latent_traversal, sample_ancestral, AnyModel, LatentModel, ModelKind,
};
use latent_atlas::numerics::{RngState, Tensor};
use latent_atlas::storage::{
    load_dataset, load_map, load_model, load_support_set, read_tensor, save_dataset, save_map,
    save_model, save_support_set, write_image_pgm, write_tensor,
};
use latent_atlas::support::{
    build_support_set, diversity_score, random_subset, sector_census, PickRule, SectorRule,
    SectorSpec,
};
use serde_json::{json, Value};

use crate::config::{Hyperparams, Instance, RunConfig};
use crate::pipeline::{progress, recoder_mse, run_study, train_instance};
use crate::{at, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "latent-atlas",
    version,
    about = "Linear maps between the latent spaces of small generative models"
)]
pub struct Cli {
    /// Worker threads for evaluation (falls back to LATENT_ATLAS_THREADS).
    #[arg(long, global = true, value_name = "N", value_parser = positive)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic blob dataset.
    GenData(GenDataArgs),
    /// Train models from a config, or one model from flags.
    Train(TrainArgs),
    /// Encode dataset images into latent codes.
    Encode(EncodeArgs),
    /// Rank latent variables by reconstruction gain.
    Gain(GainArgs),
    /// Build the sector support set from a model's codes.
    SupportSet(SupportSetArgs),
    /// Fit a linear map between two models' latent spaces.
    FitMap(FitMapArgs),
    /// Score a map on held-out images.
    EvalMap(EvalMapArgs),
    /// Run the full study from a config and write the type matrix.
    Matrix(MatrixArgs),
    /// Decode a sweep of one latent variable into an image strip.
    Traverse(TraverseArgs),
    /// Draw ancestral samples.
    Sample(SampleArgs),
    /// Recover latent codes for dataset images.
    Invert(InvertArgs),
    /// Compare inversion error on generated and intensity-inverted images.
    Probe(ProbeArgs),
    /// Run the bundled demo study.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Config whose dataset section supplies the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of images.
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Vae,
    Svae,
    Gan,
    StyleProxy,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Vae => ModelKind::Vae,
            KindArg::Svae => ModelKind::Svae,
            KindArg::Gan => ModelKind::Gan,
            KindArg::StyleProxy => ModelKind::StyleProxy,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config; all of its model instances are trained unless filtered.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to rendering the config's dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model kind (required without --config; filters with it).
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Training seed (filters with --config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Latent size when training from flags.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fraction of rows held out of training.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Output directory for model files and logs.
    #[arg(long, default_value = "models")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    pub data: Option<PathBuf>,
    /// Tensor file of images instead of a dataset.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output tensor file.
    #[arg(long, default_value = "codes.lsat")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GainArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Variables to select.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Intended support-set size, for the sector-count warning.
    #[arg(long, default_value_t = 32)]
    pub target_size: usize,
    /// Output directory.
    #[arg(long, default_value = "gain")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SupportSetArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Selected variables, taken from the gain ranking.
    #[arg(long, default_value_t = 5)]
    pub n_features: usize,
    /// Minimum magnitude of every selected coordinate.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Support-set size.
    #[arg(long, default_value_t = 32)]
    pub target_size: usize,
    /// Pick a random member of each sector instead of the most extreme.
    #[arg(long)]
    pub random: bool,
    /// Seed for --random.
    #[arg(long, default_value_t = 0)]
    pub pick_seed: u64,
    /// Threshold the norm of the selected sub-vector instead of each coordinate.
    #[arg(long)]
    pub euclidean: bool,
    /// Fraction of rows, from the end, excluded from selection.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Output directory.
    #[arg(long, default_value = "support")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    ClosedForm,
    Minibatch,
}

#[derive(Debug, Args)]
pub struct FitMapArgs {
    /// Source model file.
    #[arg(long)]
    pub src: PathBuf,
    /// Destination model file.
    #[arg(long)]
    pub dst: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Support-set JSON; without it every training row is used.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Penalty on the squared map entries.
    #[arg(long, default_value_t = 1e-4)]
    pub ridge: f64,
    /// Fit an offset too.
    #[arg(long)]
    pub bias: bool,
    /// Fitting method.
    #[arg(long, value_enum, default_value = "closed-form")]
    pub method: MethodArg,
    /// Minibatch steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Minibatch size.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Minibatch learning rate.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Minibatch seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of rows, from the end, treated as held out.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Output map file.
    #[arg(long, default_value = "map.lsm")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalMapArgs {
    /// Source model file.
    #[arg(long)]
    pub src: PathBuf,
    /// Destination model file.
    #[arg(long)]
    pub dst: PathBuf,
    /// Map file.
    #[arg(long)]
    pub map: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out images to score on.
    #[arg(long, default_value_t = 500)]
    pub n_images: usize,
    /// Fraction of rows, from the end, treated as held out.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    /// Output report.
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Directory of previously trained model files to reuse.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Latent variable to sweep.
    #[arg(long)]
    pub var: usize,
    /// Points in the sweep.
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    /// Lower end of the sweep.
    #[arg(long, default_value_t = -2.25, allow_hyphen_values = true)]
    pub lo: f64,
    /// Upper end of the sweep.
    #[arg(long, default_value_t = 2.25, allow_hyphen_values = true)]
    pub hi: f64,
    /// Dataset to take the base code from; the zero code otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Row of --data whose encoding is the base code.
    #[arg(long, default_value_t = 0, requires = "data")]
    pub index: usize,
    /// Output PGM strip.
    #[arg(long, default_value = "traversal.pgm")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, default_value = "samples")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum InvertMethodArg {
    Recoder,
    Gradient,
    RecoderGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum InitArg {
    Zeros,
    Prior,
}

#[derive(Debug, Args)]
pub struct InversionFlags {
    /// Inversion method.
    #[arg(long, value_enum, default_value = "recoder-gradient")]
    pub method: InvertMethodArg,
    /// Gradient steps.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Initial gradient step size.
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Weight of the squared-norm penalty.
    #[arg(long, default_value_t = 0.0)]
    pub prior: f64,
    /// Start for plain gradient inversion.
    #[arg(long, value_enum, default_value = "zeros")]
    pub init: InitArg,
    /// Seed for --init prior.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

impl InversionFlags {
    fn method(&self) -> ProbeMethod {
        let config = GradientConfig {
            steps: self.steps,
            lr: self.lr,
            prior: self.prior,
        };
        match self.method {
            InvertMethodArg::Recoder => ProbeMethod::Recoder,
            InvertMethodArg::RecoderGradient => ProbeMethod::Gradient {
                init: InitRule::Recoder,
                config,
            },
            InvertMethodArg::Gradient => ProbeMethod::Gradient {
                init: match self.init {
                    InitArg::Zeros => InitRule::Zeros,
                    InitArg::Prior => InitRule::Prior {
                        seed: self.init_seed,
                    },
                },
                config,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// First dataset row to invert.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Rows to invert.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[command(flatten)]
    pub inversion: InversionFlags,
    /// Output directory.
    #[arg(long, default_value = "inversion")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Images in each of the two probe sets.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Seed for the generated in-range images.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of rows, from the end, treated as held out.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
    #[command(flatten)]
    pub inversion: InversionFlags,
    /// Output report.
    #[arg(long, default_value = "probe.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Output directory.
    #[arg(long, default_value = "demo")]
    pub out: PathBuf,
    /// Print the bundled config and exit.
    #[arg(long)]
    pub print_config: bool,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

pub fn dispatch(cmd: Command) -> Result<Value, CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Gain(a) => gain(a),
        Command::SupportSet(a) => support_set(a),
        Command::FitMap(a) => fit_map(a),
        Command::EvalMap(a) => eval_map(a),
        Command::Matrix(a) => matrix(a),
        Command::Traverse(a) => traverse(a),
        Command::Sample(a) => sample(a),
        Command::Invert(a) => invert(a),
        Command::Probe(a) => probe(a),
        Command::Demo(a) => demo(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Inputs named on the command line must exist; a missing one is a usage error.
fn input(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!(
            "{flag} {}: no such file or directory",
            path.display()
        )))
    }
}

fn model_at(path: &Path, flag: &str) -> Result<AnyModel, CliError> {
    input(path, flag)?;
    at(load_model(path), path)
}

fn dataset_at(path: &Path, flag: &str) -> Result<Dataset, CliError> {
    input(path, flag)?;
    at(load_dataset(path), path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    at(std::fs::create_dir_all(dir).map_err(Into::into), dir)
}

fn ensure_parent(file: &Path) -> Result<(), CliError> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, body: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    at(std::fs::write(path, body).map_err(Into::into), path)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn check_fraction(v: f64, flag: &str) -> Result<(), CliError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(usage(format!("{flag} must lie in [0, 1), got {v}")))
    }
}

/// Row count kept for training under a holdout fraction.
fn train_rows(n: usize, holdout: f64) -> usize {
    n - ((n as f64 * holdout).floor() as usize).min(n.saturating_sub(1))
}

fn strip(images: &Tensor) -> Result<Tensor, CliError> {
    Ok(image_strip(&images.as_matrix(), SIDE)?)
}

fn gen_data(a: GenDataArgs) -> Result<Value, CliError> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let seed = a
        .seed
        .or(cfg.as_ref().map(|c| c.dataset.seed))
        .ok_or_else(|| usage("--seed is required without --config"))?;
    let n =
        a.n.or(cfg.as_ref().map(|c| c.dataset.n))
            .ok_or_else(|| usage("--n is required without --config"))?;
    if n == 0 {
        return Err(usage("--n must be positive"));
    }
    let ds = make_dataset(seed, n)?;
    at(save_dataset(&a.out, &ds), &a.out)?;
    Ok(json!({
        "command": "gen-data",
        "out": a.out,
        "seed": seed,
        "n": n,
        "checksum": ds.checksum(),
    }))
}

fn train(a: TrainArgs) -> Result<Value, CliError> {
    check_fraction(a.holdout, "--holdout")?;
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let (mut instances, holdout) = match &cfg {
        Some(c) => {
            let all: Vec<Instance> = c
                .instances()
                .into_iter()
                .filter(|i| {
                    a.kind.map_or(true, |k| i.kind == k.into())
                        && a.seed.map_or(true, |s| i.seed == s)
                })
                .collect();
            if all.is_empty() {
                return Err(usage("--kind/--seed match no model in the config"));
            }
            (all, c.dataset.holdout)
        }
        None => {
            let kind: ModelKind = a
                .kind
                .ok_or_else(|| usage("--kind is required without --config"))?
                .into();
            let latent_dim = a.latent_dim.unwrap_or(match kind {
                ModelKind::Vae | ModelKind::Gan => 16,
                ModelKind::Svae => 24,
                ModelKind::StyleProxy => 32,
            });
            if latent_dim == 0 {
                return Err(usage("--latent-dim must be positive"));
            }
            let inst = Instance {
                kind,
                latent_dim,
                seed: a.seed.unwrap_or(0),
                hyperparams: Hyperparams::default(),
            };
            (vec![inst], a.holdout)
        }
    };
    if let Some(e) = a.epochs {
        instances
            .iter_mut()
            .for_each(|i| i.hyperparams.epochs = Some(e));
    }
    let dataset = match (&a.data, &cfg) {
        (Some(d), _) => dataset_at(d, "--data")?,
        (None, Some(c)) => make_dataset(c.dataset.seed, c.dataset.n)?,
        (None, None) => return Err(usage("--data is required without --config")),
    };
    ensure_dir(&a.out)?;
    let mut trained = Vec::new();
    for inst in &instances {
        let (model, logs) = train_instance(inst, &dataset, holdout)?;
        let path = a.out.join(format!("{}.lsm", inst.stem()));
        at(save_model(&path, &model), &path)?;
        for (phase, log) in &logs {
            write_text(
                &a.out.join(format!("{}-{phase}.csv", inst.stem())),
                &log.to_csv(),
            )?;
        }
        trained.push(json!({
            "name": instance_name(&model),
            "file": path,
            "latent_dim": model.latent_dim(),
            "holdout_mse": logs.iter().find_map(|(_, l)| l.holdout_mse),
            "recoder_latent_mse": recoder_mse(&model, inst.seed)?,
        }));
    }
    Ok(json!({ "command": "train", "out": a.out, "models": trained }))
}

fn encode(a: EncodeArgs) -> Result<Value, CliError> {
    let model = model_at(&a.model, "--model")?;
    let images = match (&a.data, &a.images) {
        (Some(d), _) => dataset_at(d, "--data")?.flat_images(),
        (None, Some(p)) => {
            input(p, "--images")?;
            at(read_tensor(p), p)?.as_matrix()
        }
        (None, None) => return Err(usage("one of --data or --images is required")),
    };
    let codes = model.encode(&images)?;
    ensure_parent(&a.out)?;
    at(write_tensor(&a.out, &codes), &a.out)?;
    Ok(json!({
        "command": "encode",
        "model": instance_name(&model),
        "out": a.out,
        "rows": codes.rows(),
        "latent_dim": codes.row_len(),
    }))
}

fn gain(a: GainArgs) -> Result<Value, CliError> {
    let model = model_at(&a.model, "--model")?;
    let ds = dataset_at(&a.data, "--data")?;
    let report = rank_variables(&model, &ds.flat_images())?;
    let sel =
        select_top(&report, a.top, a.target_size).map_err(|e| usage(format!("--top: {e}")))?;
    if let Some(w) = &sel.warning {
        progress(&format!("warning: {w}"));
    }
    ensure_dir(&a.out)?;
    write_text(&a.out.join("gains.csv"), &report.to_csv())?;
    write_text(&a.out.join("gains.json"), &to_json(&report))?;
    Ok(json!({
        "command": "gain",
        "model": instance_name(&model),
        "out": a.out,
        "selected": sel.indices,
        "warning": sel.warning,
        "gains": report.gains,
    }))
}

fn support_set(a: SupportSetArgs) -> Result<Value, CliError> {
    check_fraction(a.holdout, "--holdout")?;
    if !(a.threshold > 0.0) {
        return Err(usage(format!(
            "--threshold must be positive, got {}",
            a.threshold
        )));
    }
    let model = model_at(&a.model, "--model")?;
    let ds = dataset_at(&a.data, "--data")?;
    let flat = ds.flat_images();
    let images = flat.slice_rows(0, train_rows(flat.rows(), a.holdout));
    if a.target_size < 2 || a.target_size > images.rows() {
        return Err(usage(format!(
            "--target-size must lie in 2..={}",
            images.rows()
        )));
    }
    let report = rank_variables(&model, &images)?;
    let sel = select_top(&report, a.n_features, a.target_size)
        .map_err(|e| usage(format!("--n-features: {e}")))?;
    if let Some(w) = &sel.warning {
        progress(&format!("warning: {w}"));
    }
    let rule = if a.euclidean {
        SectorRule::Euclidean
    } else {
        SectorRule::PerCoordinate
    };
    let spec = SectorSpec::new(sel.indices.clone(), a.threshold)?.with_rule(rule);
    let pick = if a.random {
        PickRule::Random { seed: a.pick_seed }
    } else {
        PickRule::Extreme
    };
    let codes = model.encode(&images)?;
    let census = sector_census(&codes, &spec)?;
    let set = build_support_set(&codes, &spec, a.target_size, pick)?;
    let idx = set.indices();
    let random = random_subset(
        images.rows(),
        idx.len(),
        &mut RngState::new(ds.seed).child(5),
    )?;
    let div = diversity_score(&images, &idx)?;
    let div_random = diversity_score(&images, &random)?;
    ensure_dir(&a.out)?;
    let path = a.out.join("support.json");
    at(save_support_set(&path, &set), &path)?;
    write_text(&a.out.join("gains.csv"), &report.to_csv())?;
    let pgm = a.out.join("support.pgm");
    at(
        write_image_pgm(&pgm, &strip(&images.select_rows(&idx))?),
        &pgm,
    )?;
    Ok(json!({
        "command": "support-set",
        "model": instance_name(&model),
        "out": a.out,
        "selected_vars": sel.indices,
        "warning": sel.warning,
        "size": idx.len(),
        "top_ups": set.num_topups(),
        "sector_counts": census.counts,
        "outside_sectors": census.none,
        "diversity": div,
        "diversity_random": div_random,
        "diversity_ratio": div / div_random,
    }))
}

fn fit_map(a: FitMapArgs) -> Result<Value, CliError> {
    check_fraction(a.holdout, "--holdout")?;
    if !(a.ridge >= 0.0) {
        return Err(usage(format!(
            "--ridge must be non-negative, got {}",
            a.ridge
        )));
    }
    let src = model_at(&a.src, "--src")?;
    let dst = model_at(&a.dst, "--dst")?;
    let ds = dataset_at(&a.data, "--data")?;
    let flat = ds.flat_images();
    let train = flat.slice_rows(0, train_rows(flat.rows(), a.holdout));
    let (images, source) = match &a.support {
        Some(p) => {
            input(p, "--support")?;
            let set = at(load_support_set(p), p)?;
            let idx = set.indices();
            if let Some(&bad) = idx.iter().find(|&&i| i >= train.rows()) {
                return Err(CliError::Runtime(format!(
                    "{}: index {bad} is outside the training rows",
                    p.display()
                )));
            }
            (train.select_rows(&idx), "support-set")
        }
        None => (train, "full-data"),
    };
    let z1 = src.encode(&images)?;
    let z2 = dst.encode(&images)?;
    let fit = match a.method {
        MethodArg::ClosedForm => MapFit::ClosedForm(FitOptions {
            bias: a.bias,
            ridge: a.ridge,
        }),
        MethodArg::Minibatch => MapFit::Minibatch(MinibatchOptions {
            steps: a.steps,
            batch: a.batch,
            lr: a.lr,
            bias: a.bias,
            seed: a.seed,
        }),
    };
    let mut map = fit
        .fit(&z1, &z2)?
        .with_ids(&instance_name(&src), &instance_name(&dst));
    map.meta.source = source.to_string();
    if matches!(a.method, MethodArg::Minibatch) {
        map.meta.ridge = 0.0;
    }
    let (per, raw) = latent_mse(&map, &z1, &z2)?;
    ensure_parent(&a.out)?;
    at(save_map(&a.out, &map), &a.out)?;
    Ok(json!({
        "command": "fit-map",
        "out": a.out,
        "from": map.src_id,
        "to": map.dst_id,
        "method": if map.meta.method == FitMethod::ClosedForm { "closed-form" } else { "minibatch" },
        "source": source,
        "pairs": z1.rows(),
        "fit_l_mse": per,
        "fit_l_mse_raw": raw,
    }))
}

fn eval_map(a: EvalMapArgs) -> Result<Value, CliError> {
    check_fraction(a.holdout, "--holdout")?;
    let src = model_at(&a.src, "--src")?;
    let dst = model_at(&a.dst, "--dst")?;
    input(&a.map, "--map")?;
    let map = at(load_map(&a.map), &a.map)?;
    let ds = dataset_at(&a.data, "--data")?;
    let flat = ds.flat_images();
    let start = train_rows(flat.rows(), a.holdout);
    let held = flat.rows() - start;
    if a.n_images == 0 || a.n_images > held {
        return Err(usage(format!("--n-images must lie in 1..={held}")));
    }
    let report = evaluate_mapping(
        &src,
        &dst,
        &map,
        &flat.slice_rows(start, start + a.n_images),
    )?;
    write_text(&a.out, &to_json(&report))?;
    Ok(json!({
        "command": "eval-map",
        "out": a.out,
        "from": instance_name(&src),
        "to": instance_name(&dst),
        "report": report,
    }))
}

fn study_summary(command: &str, out: &Path, outcome: &crate::pipeline::StudyOutcome) -> Value {
    json!({
        "command": command,
        "out": out,
        "models": outcome.report.models.iter().map(|m| &m.name).collect::<Vec<_>>(),
        "summary_rows": outcome.report.matrix.summary.len(),
        "support_size": outcome.report.support.size,
        "artifacts": outcome.artifacts,
    })
}

fn matrix(a: MatrixArgs) -> Result<Value, CliError> {
    let cfg = RunConfig::load(&a.config)?;
    if let Some(m) = &a.models {
        input(m, "--models")?;
    }
    let outcome = run_study(&cfg, &a.out, a.models.as_deref())?;
    Ok(study_summary("matrix", &a.out, &outcome))
}

fn demo(a: DemoArgs) -> Result<Value, CliError> {
    let cfg = RunConfig::demo();
    if a.print_config {
        return Ok(serde_json::to_value(&cfg).expect("config serializes"));
    }
    let outcome = run_study(&cfg, &a.out, None)?;
    Ok(study_summary("demo", &a.out, &outcome))
}

fn traverse(a: TraverseArgs) -> Result<Value, CliError> {
    let model = model_at(&a.model, "--model")?;
    let d = model.latent_dim();
    if a.var >= d {
        return Err(usage(format!(
            "--var {} is out of range for latent size {d}",
            a.var
        )));
    }
    if a.steps == 0 {
        return Err(usage("--steps must be positive"));
    }
    let base = match &a.data {
        Some(p) => {
            let ds = dataset_at(p, "--data")?;
            if a.index >= ds.len() {
                return Err(usage(format!(
                    "--index {} is out of range for {} images",
                    a.index,
                    ds.len()
                )));
            }
            model
                .encode(&ds.flat_images().slice_rows(a.index, a.index + 1))?
                .into_data()
        }
        None => vec![0.0; d],
    };
    let images = latent_traversal(&model, &base, a.var, a.lo, a.hi, a.steps)?;
    ensure_parent(&a.out)?;
    at(write_image_pgm(&a.out, &strip(&images)?), &a.out)?;
    Ok(json!({
        "command": "traverse",
        "model": instance_name(&model),
        "out": a.out,
        "var": a.var,
        "steps": a.steps,
        "lo": a.lo,
        "hi": a.hi,
    }))
}

fn sample(a: SampleArgs) -> Result<Value, CliError> {
    let model = model_at(&a.model, "--model")?;
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let images = sample_ancestral(&model, &mut RngState::new(a.seed), a.n)?;
    ensure_dir(&a.out)?;
    let t = a.out.join("samples.lsat");
    at(write_tensor(&t, &images), &t)?;
    let p = a.out.join("samples.pgm");
    at(write_image_pgm(&p, &strip(&images)?), &p)?;
    Ok(json!({
        "command": "sample",
        "model": instance_name(&model),
        "out": a.out,
        "n": a.n,
        "seed": a.seed,
    }))
}

fn run_inversion(
    model: &AnyModel,
    images: &Tensor,
    method: &ProbeMethod,
) -> Result<Vec<InversionResult>, CliError> {
    Ok(match method {
        ProbeMethod::Recoder => invert_recoder(model, images)?,
        ProbeMethod::Gradient { init, config } => invert_batch(model, images, *init, config)?,
    })
}

fn invert(a: InvertArgs) -> Result<Value, CliError> {
    let model = model_at(&a.model, "--model")?;
    let ds = dataset_at(&a.data, "--data")?;
    if a.count == 0 || a.start + a.count > ds.len() {
        return Err(usage(format!(
            "--start/--count select rows beyond the {} images",
            ds.len()
        )));
    }
    let images = ds.flat_images().slice_rows(a.start, a.start + a.count);
    let results = run_inversion(&model, &images, &a.inversion.method())?;
    let codes = Tensor::matrix(
        results.len(),
        model.latent_dim(),
        results
            .iter()
            .flat_map(|r| r.code.iter().copied())
            .collect(),
    )?;
    ensure_dir(&a.out)?;
    let t = a.out.join("codes.lsat");
    at(write_tensor(&t, &codes), &t)?;
    write_text(&a.out.join("results.json"), &to_json(&results))?;
    let p = a.out.join("comparison.pgm");
    at(
        write_image_pgm(&p, &comparison_strip(&model, &images, &results, SIDE)?),
        &p,
    )?;
    let errs: Vec<f64> = results.iter().map(|r| r.final_image_mse).collect();
    Ok(json!({
        "command": "invert",
        "model": instance_name(&model),
        "out": a.out,
        "count": a.count,
        "median_image_mse": latent_atlas::inversion::median(&errs),
    }))
}

fn probe(a: ProbeArgs) -> Result<Value, CliError> {
    check_fraction(a.holdout, "--holdout")?;
    let model = model_at(&a.model, "--model")?;
    let ds = dataset_at(&a.data, "--data")?;
    let flat = ds.flat_images();
    let start = train_rows(flat.rows(), a.holdout);
    if a.count == 0 || start + a.count > flat.rows() {
        return Err(usage(format!(
            "--count must lie in 1..={}",
            flat.rows() - start
        )));
    }
    let in_range = sample_ancestral(&model, &mut RngState::new(a.seed), a.count)?;
    let out_range = invert_intensity(&flat.slice_rows(start, start + a.count));
    let report = range_probe(&model, &in_range, &out_range, &a.inversion.method())?;
    write_text(&a.out, &to_json(&report))?;
    Ok(json!({
        "command": "probe",
        "model": instance_name(&model),
        "out": a.out,
        "report": report,
    }))
}
