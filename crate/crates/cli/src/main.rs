use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand};
use icrl_core::config::{load_config, snapshot};
use icrl_core::data::{estimate_capacity, DatasetSplit, LabelSpace, TokenBudget};
use icrl_core::log::{EventSink, JsonlSink, Tee};
use icrl_core::report::{compare, read_summary, write_report, Summary, SUMMARY_FILE};
use icrl_core::runner::{ReplayCache, Runner};
use icrl_core::{Error, RunConfig, RunLog};

const CONFIG_FILE: &str = "config.toml";
const LOG_FILE: &str = "runlog.jsonl";
const SPLIT_FILE: &str = "split.jsonl";
const REPLAY_DIR: &str = "replay";

/// In-context reinforcement learning runs over classification tasks.
#[derive(Parser)]
#[command(name = "icrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts to --out.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Artifact directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print how many episodes always fit in a context window.
    Capacity {
        #[command(flatten)]
        config: ConfigArgs,
        /// Window sizes in tokens; defaults to the configured window.
        #[arg(long = "window")]
        windows: Vec<usize>,
    },
    /// Recompute metrics from a run directory's log.
    Report {
        run_dir: PathBuf,
        /// Where to write CSVs and the summary; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate two or more runs side by side.
    Compare {
        run_dirs: Vec<PathBuf>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a run from its snapshot, reusing logged predictions.
    ///
    /// A completed run must regenerate its log byte for byte. An aborted run
    /// is resumed: logged predictions are reused and the rest are requested.
    Replay {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/replay`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `data.test_n=100`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> icrl_core::Result<RunConfig> {
        load_config(self.config.as_deref(), &self.overrides, self.seed)
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out),
        Command::Capacity { config, windows } => cmd_capacity(&config, &windows),
        Command::Report { run_dir, out } => cmd_report(&run_dir, out.as_deref()),
        Command::Compare { run_dirs, out } => cmd_compare(&run_dirs, out.as_deref()),
        Command::Replay { run_dir, out } => cmd_replay(&run_dir, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already embed their source in the message
            if e.downcast_ref::<Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Contract(_) | Error::Dataset(_) | Error::Parse { .. }) => 2,
        Some(Error::Transport(_)) => 3,
        Some(Error::Integrity { .. } | Error::Json(_)) => 4,
        Some(Error::Io { .. }) | None => 1,
    }
}

/// Loads the data and checks the config against its label space.
fn prepare(cfg: &RunConfig) -> icrl_core::Result<(DatasetSplit, LabelSpace)> {
    let (split, labels) = cfg.data.load(cfg.seed)?;
    let errs = cfg.validate(Some(&labels));
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok((split, labels))
}

fn cmd_run(args: &ConfigArgs, out: &Path) -> anyhow::Result<()> {
    let cfg = args.load()?;
    let (split, labels) = prepare(&cfg)?;
    execute(&cfg, &split, &labels, out, ReplayCache::default())
}

/// Runs `cfg` into `out`, writing the snapshot, split, log and report.
/// Artifacts are written even when the run aborts.
fn execute(
    cfg: &RunConfig,
    split: &DatasetSplit,
    labels: &LabelSpace,
    out: &Path,
    replay: ReplayCache,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, snapshot(cfg)?).map_err(|e| Error::io(&config_path, e))?;
    split.write_manifest(&out.join(SPLIT_FILE))?;

    let policy = cfg.backend.build_default();
    let mut file = JsonlSink::create(&out.join(LOG_FILE))?;
    let mut log = RunLog::default();
    let outcome = Runner::new(cfg, split, labels, policy.as_ref())
        .with_replay(replay)
        .run(&mut Tee {
            first: &mut file as &mut dyn EventSink,
            second: &mut log,
        });
    let summary = if log.header().is_some() {
        Some(write_report(&log, out, cfg.train_window)?)
    } else {
        None
    };
    outcome?;
    if let Some(s) = summary {
        print_summary(&s, out);
    }
    Ok(())
}

fn print_summary(s: &Summary, dir: &Path) {
    let acc = s.final_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
    println!(
        "{}: {} steps, regret {}, test accuracy {}, {} tokens processed ({})",
        s.algorithm,
        s.steps,
        s.final_regret,
        acc,
        s.tokens_processed,
        dir.display()
    );
}

fn cmd_capacity(args: &ConfigArgs, windows: &[usize]) -> anyhow::Result<()> {
    let cfg = args.load()?;
    let (split, labels) = prepare(&cfg)?;
    let tokenizer = cfg.tokenizer.build();
    let windows = if windows.is_empty() {
        vec![cfg.window_tokens]
    } else {
        windows.to_vec()
    };
    println!("window_tokens\tepisodes");
    for w in windows {
        let budget = TokenBudget::for_examples(
            w,
            tokenizer.as_ref(),
            &cfg.template,
            cfg.prompt_mode(),
            split.train.iter().chain(split.test.iter()),
        );
        let n = estimate_capacity(&split, &labels, tokenizer.as_ref(), &cfg.template, budget);
        println!("{w}\t{n}");
    }
    Ok(())
}

fn load_run_config(run_dir: &Path) -> icrl_core::Result<RunConfig> {
    load_config(Some(&run_dir.join(CONFIG_FILE)), &[], None)
}

fn cmd_report(run_dir: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_run_config(run_dir)?;
    let log = RunLog::read(&run_dir.join(LOG_FILE))?;
    let out = out.unwrap_or(run_dir);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let summary = write_report(&log, out, cfg.train_window)?;
    if summary.truncated {
        eprintln!(
            "warning: log is truncated after {} steps; metrics are partial",
            summary.steps
        );
    }
    print_summary(&summary, out);
    Ok(())
}

fn cmd_compare(run_dirs: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    if run_dirs.len() < 2 {
        return Err(Error::config("compare needs at least two run directories").into());
    }
    let runs = run_dirs
        .iter()
        .map(|d| {
            let name = d
                .file_name()
                .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, read_summary(&d.join(SUMMARY_FILE))?))
        })
        .collect::<icrl_core::Result<Vec<_>>>()?;
    let table = compare(&runs)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", table.to_table());
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&table).map_err(Error::from)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_replay(run_dir: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_run_config(run_dir)?;
    let original_path = run_dir.join(LOG_FILE);
    let original = RunLog::read(&original_path)?;
    let (examples, labels) = cfg.data.load_examples()?;
    let split = DatasetSplit::from_manifest(&examples, &run_dir.join(SPLIT_FILE), cfg.seed)?;
    let out = out.map_or_else(|| run_dir.join(REPLAY_DIR), Path::to_path_buf);
    if out == run_dir {
        return Err(anyhow!("replay output must differ from the run directory"));
    }
    let completed = original.end().is_some_and(|e| e.error.is_none());
    execute(&cfg, &split, &labels, &out, ReplayCache::from_log(&original))?;

    if !completed {
        println!("resumed {} into {}", run_dir.display(), out.display());
        return Ok(());
    }
    let before = std::fs::read_to_string(&original_path).map_err(|e| Error::io(&original_path, e))?;
    let after_path = out.join(LOG_FILE);
    let after = std::fs::read_to_string(&after_path).map_err(|e| Error::io(&after_path, e))?;
    if let Some(line) = first_difference(&before, &after) {
        return Err(Error::integrity(
            format!("event {} (line {})", line, line + 1),
            "replayed log differs from the original",
        )
        .into());
    }
    println!("replay identical: {}", after_path.display());
    Ok(())
}

fn first_difference(a: &str, b: &str) -> Option<usize> {
    let (mut la, mut lb) = (a.lines(), b.lines());
    let mut i = 0;
    loop {
        match (la.next(), lb.next()) {
            (None, None) => return None,
            (x, y) if x != y => return Some(i),
            _ => i += 1,
        }
    }
}
