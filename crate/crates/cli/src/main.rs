//! `mscan`: synthetic data, training, evaluation, gradient checks and part
//! visualization for the multi-scale context-aware re-identification model.
//!
//! Exit codes: 0 success, 2 configuration/data/io, 3 divergence, 4 protocol,
//! 5 gradient check failure.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mscan_core::config::RunConfig;
use mscan_core::data::{
    generate_synthetic, load_checkpoint, save_checkpoint, CheckpointMeta, DatasetManifest, RgbImage, Split,
};
use mscan_core::gradcheck::suite::{run_suite, worst_failure, Component, SuiteOptions};
use mscan_core::model::{FusionNetwork, ModelMode};
use mscan_core::pipeline::{evaluate_manifest, train_on_manifest, EXTRACT_BATCH};
use mscan_core::trainer::LogRow;
use mscan_core::viz::draw_part_boxes;
use mscan_core::{Error, Tensor};

/// Environment variable capping the worker threads (0 or unset = one per core).
const THREADS_VAR: &str = "MSCAN_THREADS";

#[derive(Parser)]
#[command(name = "mscan", version, about = "Multi-scale context-aware person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic identity dataset: PPM images plus manifest.json.
    Synth(SynthArgs),
    /// Train a body, parts or fusion model on a dataset manifest.
    Train(TrainArgs),
    /// Rank the gallery for every query and write CMC and mAP reports.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Draw the learned part boxes on every query image.
    VisualizeParts(VisualizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ModelMode>,
    /// Final checkpoint path; intermediate checkpoints and the loss log go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Body checkpoint to initialize a fusion model from.
    #[arg(long, requires = "init_parts")]
    init_body: Option<PathBuf>,
    /// Parts checkpoint to initialize a fusion model from.
    #[arg(long, requires = "init_body")]
    init_parts: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate η.
    #[arg(long)]
    lr: Option<f64>,
    /// λ, weight of the localization loss.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Average the features of each query identity/camera group first.
    #[arg(long)]
    multi_query: bool,
    /// Directory receiving cmc.csv and summary.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict the suite to one component.
    #[arg(long)]
    component: Option<Component>,
    /// Break the backward pass of the named check (exercises the failure path).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    GradCheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => e.fmt(f),
            Failure::GradCheck(msg) => f.write_str(msg),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => e.exit_code() as u8,
            Failure::GradCheck(_) => 5,
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::VisualizeParts(a) => visualize(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_VAR}={value:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::Config(format!("{name} is required (flag or config paths)")).into())
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.synthetic.validate()?;
    let manifest = generate_synthetic(&cfg.synthetic, &a.out, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let count = |s| manifest.split(s).count();
    println!(
        "wrote {} identities to {}: {} train, {} query, {} gallery images",
        manifest.num_classes(),
        a.out.display(),
        count(Split::Train),
        count(Split::Query),
        count(Split::Gallery)
    );
    Ok(())
}

/// `dir/stem.iterN.ckpt` for the intermediate checkpoint after `iter` iterations.
fn intermediate_path(out: &Path, iter: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.iter{iter}.ckpt"))
}

fn loss_log_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.loss.csv"))
}

fn load_submodel(path: &Path, mode: ModelMode, manifest: &DatasetManifest) -> CliResult<FusionNetwork<f32>> {
    let (net, meta) = load_checkpoint(path)?;
    if meta.config.mode != mode {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model, expected {mode}",
            path.display(),
            meta.config.mode
        ))
        .into());
    }
    if meta.label_ids != manifest.label_ids {
        return Err(Error::Checkpoint(format!("{} was trained on different identities", path.display())).into());
    }
    Ok(net)
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.train.max_iters = n;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.train.base_lr = lr;
    }
    if let Some(l) = a.lambda {
        cfg.loss.lambda = l;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    cfg.validate()?;
    let data = required(a.data, &cfg.paths.data, "--data")?;
    let out = required(a.out, &cfg.paths.checkpoint, "--out")?;
    let manifest = DatasetManifest::load(&data)?;
    let mode = cfg.mode;
    let mut net = match (&a.init_body, &a.init_parts) {
        (Some(b), Some(p)) => {
            if mode != ModelMode::Fusion {
                return Err(Error::Config(format!("--init-body/--init-parts need --mode fusion, not {mode}")).into());
            }
            let body = load_submodel(b, ModelMode::Body, &manifest)?;
            let parts = load_submodel(p, ModelMode::Parts, &manifest)?;
            FusionNetwork::fuse(body, parts, cfg.seed)?
        }
        _ => FusionNetwork::new(&cfg.model_config(mode, manifest.num_classes()), cfg.seed)?,
    };
    let train_cfg = cfg.train_config();
    let final_iter = train_cfg.max_iters;
    let (meta, report) = train_on_manifest(&mut net, &manifest, &train_cfg, &cfg.loss, |net, meta| {
        if meta.iteration < final_iter {
            save_checkpoint(&intermediate_path(&out, meta.iteration), net, meta)?;
        }
        Ok(())
    })?;
    let crc = save_checkpoint(&out, &net, &meta)?;

    let with_parts = mode.has_parts();
    let mut csv = String::from(LogRow::csv_header(with_parts));
    csv.push('\n');
    for row in &report.log {
        csv.push_str(&row.csv_line(with_parts));
        csv.push('\n');
    }
    let log_path = loss_log_path(&out);
    fs::write(&log_path, csv).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;

    println!(
        "trained {mode} model for {} iterations on {} images ({} held out for validation)",
        final_iter, report.train_size, report.val_size
    );
    println!("loss log: {}", log_path.display());
    println!("checkpoint: {} (crc32 {crc:08x})", out.display());
    println!("final validation accuracy: {:.4}", report.final_val_acc);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let data = required(a.data, &cfg.paths.data, "--data")?;
    let report_dir = required(a.report, &cfg.paths.report, "--report")?;
    let (mut net, meta) = load_checkpoint(&a.ckpt)?;
    let manifest = DatasetManifest::load(&data)?;
    let report = evaluate_manifest(&mut net, &manifest, &meta.means, a.multi_query, cfg.eval)?;
    report.write(&report_dir)?;
    let s = report.summary();
    println!(
        "{} queries vs {} gallery: rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}  rank-20 {:.4}  mAP {:.4}",
        s.num_query, s.num_gallery, s.rank1, s.rank5, s.rank10, s.rank20, s.map
    );
    println!("report written to {}", report_dir.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let components: Vec<Component> = match a.component {
        Some(c) => vec![c],
        None => Component::ALL.to_vec(),
    };
    let checks = run_suite(&components, &SuiteOptions { corrupt: a.corrupt })?;
    for c in &checks {
        println!(
            "{:<7} {:<24} max rel error {:.3e}  ({} checked, {} skipped)  {}",
            c.component.to_string(),
            c.name,
            c.report.max_rel_error,
            c.report.checked,
            c.report.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    for comp in &components {
        let worst = checks
            .iter()
            .filter(|c| c.component == *comp)
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max);
        println!("component {comp}: max relative error {worst:.3e}");
    }
    match worst_failure(&checks) {
        None => Ok(()),
        Some(bad) => Err(Failure::GradCheck(format!(
            "gradient check failed: {}/{} has relative error {:.3e} (tolerance {:.0e}) at {}",
            bad.component, bad.name, bad.report.max_rel_error, bad.tolerance, bad.worst
        ))),
    }
}

fn visualize(a: VisualizeArgs) -> CliResult {
    let (mut net, meta): (FusionNetwork<f32>, CheckpointMeta) = load_checkpoint(&a.ckpt)?;
    if !meta.config.mode.has_parts() {
        return Err(Error::Config(format!(
            "{} is a {} checkpoint: no localization network",
            a.ckpt.display(),
            meta.config.mode
        ))
        .into());
    }
    let manifest = DatasetManifest::load(&a.data)?;
    let samples: Vec<_> = manifest.split(Split::Query).collect();
    let raw = manifest.raw_images(Split::Query)?;
    let pre = manifest.images(Split::Query, &meta.means)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written = 0;
    for (chunk_idx, chunk) in pre.chunks(EXTRACT_BATCH).enumerate() {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let thetas = net.localize(&Tensor::from_vec(&shape, data)?)?;
        for (k, th) in thetas.iter().enumerate() {
            let i = chunk_idx * EXTRACT_BATCH + k;
            let mut img = RgbImage::from_tensor(&raw[i])?;
            draw_part_boxes(&mut img, th);
            let stem = Path::new(&samples[i].record.path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            img.write(&a.out.join(format!("{i:04}_{stem}.ppm")))?;
            written += 1;
        }
    }
    println!("wrote {written} part overlays to {}", a.out.display());
    Ok(())
}
