//! `rgcseg` command-line harness.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors and
//! missing checkpoints. Failures print one `error: ...` line to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rgcseg::config::{self, RunConfig};
use rgcseg::gradcheck;
use rgcseg::render;
use rgcseg::synth::{self, Dataset, SynthSpec};
use rgcseg::train::{self, TrainOptions};
use rgcseg::Error;

#[derive(Parser)]
#[command(name = "rgcseg", version, about = "BEV map segmentation with residual graph convolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenData),
    /// Train a model and write a checkpoint.
    Train(Train),
    /// Evaluate a checkpoint and write an IoU report.
    Eval(Eval),
    /// Run the finite-difference gradient suite.
    Gradcheck(Gradcheck),
    /// Write mask images for predictions and ground truth.
    Render(Render),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    num: u64,
    #[arg(long)]
    seed: u64,
    /// Scene height and width.
    #[arg(long, value_parser = clap::value_parser!(u64).range(16..))]
    size: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(4..))]
    cin: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Loss log CSV; defaults to `<out>.loss.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_rgc: bool,
    #[arg(long)]
    no_aug: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// Add the end-to-end RGC and model cases.
    #[arg(long)]
    full: bool,
    /// Include a deliberately broken backward rule.
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Args)]
struct Render {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    num: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let threads = match train::threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(1)
        }
    }
}

fn gen_data(a: GenData) -> CmdResult {
    let spec = SynthSpec {
        height: a.size as usize,
        width: a.size as usize,
        in_channels: a.cin as usize,
        noise_sigma: a.noise,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let samples = synth::generate_dataset(&spec, a.seed, a.num as usize)?;
    let ds = Dataset {
        spec,
        base_seed: a.seed,
        samples,
    };
    synth::write_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.samples.len(), a.out.display());
    Ok(())
}

/// Defaults, then the config file, then flags. Input geometry not pinned by
/// the file is taken from the dataset.
fn resolve_train_config(a: &Train, ds: &Dataset) -> Result<RunConfig, Failure> {
    let (mut run, seen) = match &a.config {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Usage(format!("config file {} not found", p.display())));
            }
            RunConfig::from_file(p).map_err(|e| match e {
                Error::Config(_) => Failure::Usage(e.to_string()),
                other => other.into(),
            })?
        }
        None => (RunConfig::default(), Default::default()),
    };
    if !seen.contains("model.in_channels") {
        run.model.in_channels = ds.spec.in_channels;
    }
    if !seen.contains("model.height") {
        run.model.height = ds.spec.height;
    }
    if !seen.contains("model.width") {
        run.model.width = ds.spec.width;
    }
    if a.no_rgc {
        run.model.use_rgc = false;
    }
    if a.no_aug {
        run.model.use_aug = false;
    }
    if let Some(s) = a.steps {
        run.steps = s;
    }
    if let Some(s) = a.seed {
        run.seed = s;
    }
    run.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(run)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: Train, threads: usize) -> CmdResult {
    let ds = synth::read_dataset(&a.data)?;
    let run = resolve_train_config(&a, &ds)?;
    let mut state = train::init_state(&run)?;
    let opts = TrainOptions {
        threads,
        checkpoint: Some(a.out.clone()),
        loss_log: Some(a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"))),
    };
    let every = (run.steps / 10).max(1);
    let losses = train::train(&mut state, &run, &ds.samples, &opts, |step, loss| {
        if step % every == 0 {
            println!("step {step} loss {loss:.6}");
        }
    })?;
    println!(
        "variant {} trained {} steps, final loss {}, checkpoint {}",
        run.model.variant(),
        losses.len(),
        losses.last().map(|l| format!("{l:.6}")).unwrap_or_else(|| "n/a".into()),
        a.out.display()
    );
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<(rgcseg::optim::TrainState, RunConfig), Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(train::load_checkpoint(path)?)
}

fn eval(a: Eval, threads: usize) -> CmdResult {
    let (state, run) = load_ckpt(&a.ckpt)?;
    let ds = synth::read_dataset(&a.data)?;
    let metrics = train::evaluate(&state.cfg, &state.params, &ds.samples, threads)?;
    let report = format!("{}{}", config::comment_block(&run), metrics.to_csv_default());
    fs::write(&a.report, report).map_err(|e| Error::Io {
        path: a.report.clone(),
        source: e,
    })?;
    println!("mIoU {:.6} over {} samples", metrics.miou, ds.samples.len());
    Ok(())
}

fn cmd_gradcheck(a: Gradcheck) -> CmdResult {
    let mut cases = gradcheck::suite_cases(a.full);
    if a.sabotage {
        cases.push(gradcheck::sabotaged_relu_case());
    }
    let rows = gradcheck::run_cases(&cases)?;
    println!("{:<24} {:>14}  status", "op", "max_rel_error");
    for r in &rows {
        println!(
            "{:<24} {:>14.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            gradcheck::TOLERANCE
        )))
    }
}

fn cmd_render(a: Render) -> CmdResult {
    let (state, _) = load_ckpt(&a.ckpt)?;
    let ds = synth::read_dataset(&a.data)?;
    train::check_compat(&state.cfg, &ds.samples)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let n = a.num.min(ds.samples.len());
    for (i, s) in ds.samples.iter().take(n).enumerate() {
        let (c, h, w) = (s.features.shape()[0], s.features.shape()[1], s.features.shape()[2]);
        let x = s.features.reshape([1, c, h, w])?;
        let logits = rgcseg::model::predict(&state.cfg, &state.params, &x)?;
        let pred = render::threshold_logits(&logits.reshape(s.masks.shape().to_vec())?);
        render::render_sample(&a.out, i, &pred, &s.masks)?;
    }
    let legend = a.out.join("legend.csv");
    fs::write(&legend, render::legend_text()).map_err(|e| Error::Io {
        path: legend,
        source: e,
    })?;
    println!("rendered {n} samples to {}", a.out.display());
    Ok(())
}
