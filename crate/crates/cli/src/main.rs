//! `cmscount` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmscount::data::{self, DatasetIndex, GrayImage, SceneSpec, Split};
use cmscount::density::{make_density, DensityMap};
use cmscount::gradcheck::{self, Fault};
use cmscount::metrics::{self, CountReport};
use cmscount::net::ModelParams;
use cmscount::train::{self, EpochRecord, TrainConfig};
use cmscount::Error;

#[derive(Parser)]
#[command(name = "cmscount", version, about = "Density-map object counting with multi-stage CNNs")]
struct Cli {
    /// Seed for every random choice; overrides any seed in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a 70/15/15 split.
    Gen(GenArgs),
    /// Convert dot annotations to density maps.
    Density(DensityArgs),
    /// Pretrain, duplicate and fine-tune a multi-stage model.
    Train(TrainArgs),
    /// Count and GAME metrics for a split.
    Eval(EvalArgs),
    /// Density map for one image.
    Predict(PredictArgs),
    /// Train a grid-size x lambda matrix and tabulate test metrics.
    Sweep(SweepArgs),
    /// Finite-difference check of every backward pass.
    CheckGrad(CheckGradArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenes: usize,
    /// Scene generator settings (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Gaussian sigma of the emitted density maps.
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
}

#[derive(Args)]
struct DensityArgs {
    /// Annotation CSV of a single image (needs --image and --out).
    #[arg(long, requires_all = ["image", "out"], conflicts_with_all = ["index", "out_dir"])]
    annotation: Option<PathBuf>,
    /// Image whose size the map takes.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Convert every record of a dataset index (needs --out-dir).
    #[arg(long, requires = "out_dir", required_unless_present = "annotation")]
    index: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    index: PathBuf,
    /// Training settings (TOML); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Base model checkpoint (one stage) to skip pretraining.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Epoch history CSV; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Also write the standalone base model as a one-stage checkpoint.
    #[arg(long)]
    save_base: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    ckpt: Option<PathBuf>,
    /// Directory of stored `<image>.dmap` predictions instead of a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Highest GAME level.
    #[arg(long, default_value_t = 3)]
    game: u32,
    /// Restrict counting to each record's region of interest.
    #[arg(long)]
    roi: bool,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Cells per side of the bound-check grid.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 4.0)]
    sigma: f64,
    /// Training-time density scale of the model.
    #[arg(long, default_value_t = 100.0)]
    magnification: f64,
    /// Directory for report.csv, summary.json and bounds.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Density map to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit PGM visualisation.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    magnification: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.5,0.1,0.01")]
    lambda: Vec<f64>,
    /// Shared base model for every cell.
    #[arg(long)]
    pretrain: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    game: u32,
    /// Results table (CSV).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Failure classes mapped to exit codes.
enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::User(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::User(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Ok(Err(Failure::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
        Err(_) => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => gen(a, seed),
        Command::Density(a) => density(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Sweep(a) => sweep(a, seed),
        Command::CheckGrad(a) => check_grad(a, seed),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn gen(a: GenArgs, seed: Option<u64>) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => SceneSpec::from_toml(&read_text(p)?)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let index = data::write_corpus(&a.out, &spec, a.scenes, a.sigma)?;
    println!("wrote {} scenes to {}", index.records.len(), a.out.display());
    Ok(())
}

fn density(a: DensityArgs) -> Outcome {
    if let Some(ann) = &a.annotation {
        let (image, out) = (a.image.as_ref().expect("clap"), a.out.as_ref().expect("clap"));
        let img = GrayImage::load(image)?;
        let dots = data::load_annotation(ann, img.width(), img.height())?;
        let d = make_density(&dots, a.sigma)?;
        d.save(out)?;
        println!("{}\t{}\t{}", out.display(), dots.len(), d.count());
        return Ok(());
    }
    let (index, dir) = (a.index.as_ref().expect("clap"), a.out_dir.as_ref().expect("clap"));
    let ds = DatasetIndex::load(index)?.load_dataset(a.sigma)?;
    fs::create_dir_all(dir).map_err(|e| Failure::User(format!("{}: {e}", dir.display())))?;
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        s.density.save(&dir.join(format!("{}.dmap", s.name)))?;
        println!("{}\t{}\t{}", s.name, s.annotation.len(), s.density.count());
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_base(path: &Path) -> Result<cmscount::net::StageParams<f32>, Failure> {
    let m = ModelParams::<f32>::load(path)?;
    if m.stages.len() != 1 {
        return Err(Failure::User(format!(
            "{}: a base model has one stage, found {}",
            path.display(),
            m.stages.len()
        )));
    }
    Ok(m.stages.into_iter().next().expect("one stage"))
}

fn progress(quiet: bool) -> impl FnMut(&str, &EpochRecord) {
    move |phase, r| {
        if !quiet {
            eprintln!(
                "{phase} epoch {} train_loss {:.6} val_loss {:.6} val_mae {:.4} lr {:e}",
                r.epoch, r.train_loss, r.val_loss, r.val_mae, r.lr
            );
        }
    }
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Outcome {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    if let Some(k) = a.stages {
        cfg.stages = k;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(e) = a.pretrain_epochs {
        cfg.pretrain_epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr_initial = lr;
    }
    let ds = DatasetIndex::load(&a.index)?.load_dataset(cfg.sigma)?;
    let base = a.pretrain.as_deref().map(load_base).transpose()?;
    let out = train::train_pipeline(&ds, &cfg, base.as_ref(), &mut progress(a.quiet))?;
    out.model.save(&a.out)?;
    let history = a.history.unwrap_or_else(|| a.out.with_extension("history.csv"));
    write(&history, out.history.to_csv())?;
    if let Some(p) = &a.save_base {
        let base = out
            .base
            .ok_or_else(|| Failure::User("--save-base needs a multi-stage run".into()))?;
        ModelParams { stages: vec![base], conversion_channels: cfg.conversion_channels }.save(p)?;
    }
    println!("wrote {} ({} stages)", a.out.display(), out.model.stages.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let ds = DatasetIndex::load(&a.index)?.load_dataset(a.sigma)?;
    let samples = ds.split(a.split);
    let items = match (&a.ckpt, &a.predictions) {
        (Some(c), _) => train::predict_items(&ModelParams::load(c)?, samples, a.magnification)?,
        (None, Some(dir)) => data::load_predictions(dir, samples)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let report: CountReport = train::report_items(&items, samples, a.game, a.roi)?;
    let checks = metrics::bound_checks(&items, a.grid)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::User(format!("{}: {e}", a.out.display())))?;
    write(&a.out.join("report.csv"), report.to_csv())?;
    write(&a.out.join("summary.json"), report.summary_json() + "\n")?;
    write(&a.out.join("bounds.csv"), metrics::bounds_csv(&checks))?;
    if checks.iter().any(|(_, b)| !b.holds) {
        return Err(Failure::Internal("global error exceeded the sum of local errors".into()));
    }
    println!("{}", report.summary_json());
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let m = ModelParams::<f32>::load(&a.ckpt)?;
    let img = GrayImage::load(&a.image)?;
    let d: DensityMap = train::predict_density(&m, &img.to_tensor(), a.magnification)?;
    d.save(&a.out)?;
    if let Some(h) = &a.heatmap {
        data::heatmap(&d).save(h)?;
    }
    println!("{}", metrics::count(&d, None)?);
    Ok(())
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Outcome {
    let cfg = load_config(a.config.as_deref(), seed)?;
    let ds = DatasetIndex::load(&a.index)?.load_dataset(cfg.sigma)?;
    let base = a.pretrain.as_deref().map(load_base).transpose()?;
    let quiet = a.quiet;
    let rows = train::sweep(&ds, &cfg, &a.grid, &a.lambda, base.as_ref(), a.game, &mut |g, l, phase, r| {
        progress(quiet)(&format!("g={g} lambda={l} {phase}"), r)
    })?;
    let table = train::sweep_csv(&rows);
    write(&a.out, &table)?;
    print!("{table}");
    Ok(())
}

fn check_grad(a: CheckGradArgs, seed: Option<u64>) -> Outcome {
    let fault = if a.inject_fault { Fault::CorruptKernel } else { Fault::None };
    let report = gradcheck::run_suite(seed.unwrap_or(0), fault)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Internal(format!(
            "max relative error {:.3e} exceeds {:e}",
            report.max_rel(),
            gradcheck::REL_TOL
        )))
    }
}
