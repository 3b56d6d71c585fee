use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use infantcry::pipeline::{
    cmd_distill, cmd_eval, cmd_featurize, cmd_infer, cmd_plot, cmd_poolsweep, cmd_quantize,
    cmd_report, cmd_synth, cmd_train, sweep_csv, PipelineError, ReportInputs, RunConfig,
};

#[derive(Parser)]
#[command(name = "infantcry", version, about = "Infant cry detection and classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Cache log-mel features for both splits.
    Featurize(Common),
    /// Train a model with cross-entropy.
    Train(Common),
    /// Evaluate a model on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Train one model per pooling head.
    Poolsweep(Common),
    /// Distill a teacher (`--teacher` or `teacher = ...`) into a student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Quantize a model's weights to int8 and evaluate it.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compression CSV over teacher, student, KD and their int8 versions.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        kd: PathBuf,
    },
    /// Classify one WAV file and print JSON.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        wav: PathBuf,
    },
    /// Dump waveform CSV and spectrogram PGM for one WAV file.
    Plot {
        #[command(flatten)]
        common: Common,
        wav: PathBuf,
    },
}

fn resolve(common: &Common, out_is_data: bool) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        if out_is_data {
            cfg.data_dir = out.clone();
        } else {
            cfg.out_dir = out.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = resolve(&c, true)?;
            let m = cmd_synth(&cfg)?;
            eprintln!("wrote {} clips to {}", m.entries.len(), cfg.data_dir.display());
        }
        Command::Featurize(c) => {
            let cfg = resolve(&c, false)?;
            for p in cmd_featurize(&cfg)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Train(c) => {
            let cfg = resolve(&c, false)?;
            let out = cmd_train(&cfg)?;
            println!("{}", out.metrics.to_json().trim_end());
        }
        Command::Eval { common, model } => {
            let cfg = resolve(&common, false)?;
            println!("{}", cmd_eval(&cfg, &model)?.to_json().trim_end());
        }
        Command::Poolsweep(c) => {
            let cfg = resolve(&c, false)?;
            print!("{}", sweep_csv(&cmd_poolsweep(&cfg)?));
        }
        Command::Distill { common, teacher } => {
            let mut cfg = resolve(&common, false)?;
            if teacher.is_some() {
                cfg.teacher = teacher;
            }
            println!("{}", cmd_distill(&cfg)?.metrics.to_json().trim_end());
        }
        Command::Quantize { common, model } => {
            let cfg = resolve(&common, false)?;
            println!("{}", cmd_quantize(&cfg, &model)?.1.to_json().trim_end());
        }
        Command::Report { common, teacher, student, kd } => {
            let cfg = resolve(&common, false)?;
            print!("{}", cmd_report(&cfg, &ReportInputs { teacher, student, kd })?);
        }
        Command::Infer { common, model, wav } => {
            let cfg = resolve(&common, false)?;
            println!("{}", cmd_infer(&model, &wav, cfg.clip_seconds)?.to_json());
        }
        Command::Plot { common, wav } => {
            let cfg = resolve(&common, false)?;
            let stem = wav.file_stem().map(PathBuf::from).unwrap_or_else(|| "clip".into());
            let (a, b) = cmd_plot(&wav, &cfg.out_dir.join(stem), cfg.n_mels)?;
            eprintln!("wrote {} and {}", a.display(), b.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are config errors (1), not clap's default 2
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
