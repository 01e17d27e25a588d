use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use subnet_cil::checkpoint::Checkpoint;
use subnet_cil::scenario::{load_stream, save_stream};
use subnet_cil::train::{run_ablation, PreparedStream, Trainer};
use subnet_cil::{build_stream, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "subcil", version, about = "Subnetwork class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a stream and write the report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many tasks are committed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run the four-step ablation ladder on one shared stream.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a task stream file.
    GenStream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a stream file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stream: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            resume,
            stop_after,
        } => run(&config, seed, &out, resume.as_deref(), stop_after),
        Command::Ablate { config, out } => ablate(&config, &out),
        Command::GenStream { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let stream = build_stream(&cfg.stream)?;
            save_stream(&stream, &out)?;
            log::info!("wrote {} tasks to {} ({})", stream.experiences.len(), out.display(), stream.digest());
            Ok(())
        }
        Command::Eval { checkpoint, stream } => eval(&checkpoint, &stream),
    }
}

fn run(config: &Path, seed: Option<u64>, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.stream.seed = s;
    }
    fs::create_dir_all(out)?;
    let data = PreparedStream::build(&cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load_for(path, &cfg)?;
            log::info!("resuming at task {}", ck.state.next_task);
            Trainer::resume(cfg.clone(), data, ck.state, ck.report)?
        }
        None => Trainer::new(cfg.clone(), data)?,
    };
    let limit = stop_after.unwrap_or(usize::MAX);
    let start = std::time::Instant::now();
    let mut result = Ok(());
    while !trainer.is_finished() && trainer.state.next_task < limit {
        if let Err(e) = trainer.step_task() {
            result = Err(e);
            break;
        }
        let t = trainer.state.next_task - 1;
        log::info!(
            "task {t} done: accuracy row {:?}",
            trainer.report.accuracy.rows.last().unwrap()
        );
        Checkpoint::at_boundary(&trainer).save(&out.join("checkpoint.bin"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    let report = &trainer.report;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("metrics.csv"), report.metrics_csv())?;
    fs::write(out.join("timing.txt"), format!("wall_clock_secs={secs:.3}\n"))?;
    print!("{}", report.metrics_jsonl());
    if let Some(acc) = report.headline(cfg.metric) {
        log::info!("average accuracy {acc:.4} in {secs:.1}s");
    }
    result
}

fn ablate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    fs::create_dir_all(out)?;
    let ablation = run_ablation(&cfg)?;
    fs::write(out.join("ablation.json"), ablation.to_json())?;
    fs::write(out.join("ablation.md"), ablation.table())?;
    for (i, rep) in ablation.reports.iter().enumerate() {
        let dir = out.join(format!("run{}", i + 1));
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("report.json"), rep.to_json())?;
        fs::write(dir.join("metrics.csv"), rep.metrics_csv())?;
    }
    print!("{}", ablation.table());
    Ok(())
}

fn eval(checkpoint: &Path, stream: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let stream = load_stream(stream)?;
    if stream.spec != ck.config.stream {
        return Err(Error::format(0, "stream spec differs from the checkpoint's configuration"));
    }
    let committed = ck.state.next_task;
    if committed == 0 {
        return Err(Error::Usage("checkpoint has no committed tasks".into()));
    }
    let data = Arc::new(PreparedStream::from_stream(stream));
    let trainer = Trainer::resume(ck.config.clone(), data, ck.state, ck.report)?;
    let row = trainer.evaluate_through(committed - 1)?;
    for (k, (acc, n)) in row.accuracies.iter().zip(&row.counts).enumerate() {
        println!(
            "{{\"task_trained\":{},\"task_evaluated\":{k},\"accuracy\":{acc},\"n\":{n}}}",
            committed - 1
        );
    }
    let avg = row.accuracies.iter().sum::<f64>() / committed as f64;
    println!("{{\"average_accuracy\":{avg}}}");
    Ok(())
}
