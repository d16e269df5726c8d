use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tinyembed::datagen::{
    generate_clr, read_dataset, write_dataset, CommandTranslator, DatasetHeader, LanguageDistribution, MockTranslator,
    TaskKind, TranslatorClient, TABLE7_PERCENT,
};
use tinyembed::maskschedule::{build_soft_mask, rank_trajectory, ScheduleKind, ScheduleState};
use tinyembed::pipeline::selfcheck::gradient_suite;
use tinyembed::pipeline::{evaluate_examples, load_model, run_manifest, write_toy_workspace, RunManifest, RunOptions, ToySpec};
use tinyembed::Error;

/// Overrides the output directory of `train`.
const OUT_DIR_ENV: &str = "TINYEMBED_OUT_DIR";

#[derive(Parser)]
#[command(name = "tinyembed", version, about = "Train and evaluate small contrastive text-embedding models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Write a mid-stage checkpoint every N steps.
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Translate the queries of a pair dataset into sampled target languages.
    GenClr {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Language proportions (`[[language]] code/proportion`); defaults to the built-in table.
        #[arg(long)]
        distribution: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Backend::Mock)]
        translator: Backend,
        /// Program for `--translator command`; it gets the target code as its last argument.
        #[arg(long, value_name = "PROGRAM")]
        command: Option<String>,
        #[arg(long = "command-arg", value_name = "ARG")]
        command_args: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Truncate embeddings to this MRL width.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Print a soft mask's rank trajectory and matrices.
    MaskDemo {
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Schedule length l; defaults to n.
        #[arg(long)]
        l: Option<usize>,
        #[arg(long, value_enum, default_value_t = Schedule::Linear)]
        schedule: Schedule,
        #[arg(long, default_value_t = 8)]
        samples: u64,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
        /// Also print every mask row.
        #[arg(long)]
        matrix: bool,
    },
    /// Finite-difference checks of the losses and a full encoder step.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        cases: u64,
    },
    /// Write a synthetic workspace with data for all four stages and a manifest.
    InitToy {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// The first language holds passages; the others get translated queries.
        #[arg(long, value_delimiter = ',', default_value = "en")]
        languages: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Linear,
    Accelerating,
    Decelerating,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Linear => ScheduleKind::Linear,
            Schedule::Accelerating => ScheduleKind::Accelerating,
            Schedule::Decelerating => ScheduleKind::Decelerating,
        }
    }
}

/// Exit status per failure category. Usage errors exit with clap's 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) | Error::InvalidArgument(_) => 3,
        Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => 4,
        Error::Data(_) => 5,
        Error::NonFinite(_) | Error::Domain { .. } | Error::ShapeMismatch { .. } => 6,
        Error::ConfigMismatch { .. } | Error::Checkpoint(_) => 7,
        _ => 1,
    }
}

fn emit(line: impl std::fmt::Display) {
    let mut out = io::stdout().lock();
    // A closed pipe is not worth a panic.
    let _ = writeln!(out, "{line}");
}

fn train(
    manifest: &Path,
    seed: Option<u64>,
    resume: bool,
    checkpoint_every: Option<u64>,
    output_dir: Option<PathBuf>,
) -> tinyembed::Result<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::Io { path: manifest.display().to_string(), source: e })?;
    let m = RunManifest::from_toml(&text)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let output_dir = output_dir.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from));
    let opts = RunOptions { resume, checkpoint_every, output_dir, seed, ..RunOptions::default() };
    let summary = run_manifest(&m, base, &opts)?;
    for (i, s) in summary.stages.iter().enumerate() {
        let last = s.last_loss.map_or("-".into(), |l| format!("{l:.4}"));
        let eval = s.eval_loss.map_or(String::new(), |l| format!(", held-out loss {l:.4}"));
        eprintln!("stage {} {}: {} steps, last loss {last}{eval}", i + 1, s.kind, s.steps);
    }
    eprintln!("outputs in {}", summary.output_dir.display());
    emit(serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn gen_clr(
    input: &Path,
    output: &Path,
    distribution: Option<&Path>,
    backend: Backend,
    command: Option<String>,
    command_args: Vec<String>,
    seed: u64,
) -> tinyembed::Result<()> {
    let dist = match distribution {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
            LanguageDistribution::from_toml(&text)?
        }
        None => LanguageDistribution::table7(),
    };
    let (header, pairs) = read_dataset(input)?;
    let translator: Box<dyn TranslatorClient> = match backend {
        Backend::Mock => {
            let mut codes: Vec<String> = TABLE7_PERCENT.iter().map(|(c, _)| c.to_string()).collect();
            codes.extend(dist.entries().iter().map(|(c, _)| c.clone()));
            codes.extend(header.languages.iter().cloned());
            Box::new(MockTranslator::new(codes))
        }
        Backend::Command => {
            let program = command.ok_or_else(|| Error::InvalidArgument("--translator command needs --command".into()))?;
            Box::new(CommandTranslator { program, args: command_args })
        }
    };
    let out = generate_clr(&pairs, translator.as_ref(), &dist, seed);
    write_dataset(output, &DatasetHeader::for_examples(TaskKind::Clr, &out.examples), &out.examples)?;
    for (i, reason) in &out.failures {
        emit(json!({ "record": "failure", "index": i, "reason": reason }));
    }
    emit(json!({ "record": "summary", "written": out.examples.len(), "failed": out.failures.len() }));
    eprintln!("wrote {} CLR pairs to {} ({} failed)", out.examples.len(), output.display(), out.failures.len());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, dim: Option<usize>, split: &str) -> tinyembed::Result<()> {
    let model = load_model(checkpoint)?;
    let (_, examples) = read_dataset(data)?;
    let records = evaluate_examples(&model.encoder, &model.tokenizer, &examples, split, dim)?;
    for r in &records {
        emit(r.to_line());
    }
    for r in &records {
        let v = r.value.map_or("undefined".into(), |v| format!("{v:.4}"));
        let name = match r.metric.as_str() {
            "recall@1" => "Recall@1".to_string(),
            m => m.to_string(),
        };
        eprintln!("{name}: {v}");
    }
    Ok(())
}

fn mask_demo(n: usize, l: Option<usize>, kind: ScheduleKind, samples: u64, eps: f64, matrix: bool) -> tinyembed::Result<()> {
    let l = l.unwrap_or(n);
    let traj = rank_trajectory(kind, n, l, samples, samples, eps)?;
    for s in &traj {
        emit(json!({ "record": "rank", "schedule": kind.to_string(), "n": n, "t": s.t, "tau": samples, "alpha": s.alpha, "rank": s.rank }));
        if matrix {
            let mask = build_soft_mask(&ScheduleState::new(kind, s.t, samples)?, n, l)?;
            for (row, values) in mask.entries().chunks(n).enumerate() {
                emit(json!({ "record": "mask_row", "t": s.t, "row": row, "values": values }));
            }
        }
    }
    let ranks: Vec<String> = traj.iter().map(|s| s.rank.to_string()).collect();
    eprintln!("{kind} schedule, N={n}: ranks {}", ranks.join(" "));
    Ok(())
}

fn grad_check(seed: u64, cases: u64) -> tinyembed::Result<bool> {
    let records = gradient_suite(seed, cases)?;
    for r in &records {
        emit(serde_json::to_string(r).expect("record serializes"));
    }
    let failed = records.iter().filter(|r| !r.passed).count();
    let worst = records.iter().map(|r| r.error).fold(0.0, f64::max);
    eprintln!("{} checks, {failed} failed, worst relative error {worst:.2e}", records.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> tinyembed::Result<ExitCode> {
    match cli.command {
        Command::Train { manifest, seed, resume, checkpoint_every, output_dir } => {
            train(&manifest, seed, resume, checkpoint_every, output_dir)?
        }
        Command::GenClr { input, output, distribution, translator, command, command_args, seed } => {
            gen_clr(&input, &output, distribution.as_deref(), translator, command, command_args, seed)?
        }
        Command::Eval { checkpoint, data, dim, split } => eval(&checkpoint, &data, dim, &split)?,
        Command::MaskDemo { n, l, schedule, samples, eps, matrix } => mask_demo(n, l, schedule.into(), samples, eps, matrix)?,
        Command::GradCheck { seed, cases } => {
            if !grad_check(seed, cases)? {
                return Ok(ExitCode::from(6));
            }
        }
        Command::InitToy { dir, seed, languages } => {
            let m = write_toy_workspace(&dir, &ToySpec { seed, languages, ..ToySpec::default() })?;
            eprintln!("wrote {} stages to {}", m.stages.len(), dir.join("manifest.toml").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
