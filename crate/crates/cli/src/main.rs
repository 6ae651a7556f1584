//! `dsv`: prepare, train, extract, convert, evaluate and report from one
//! run config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use dsv_core::config::DataSource;
use dsv_core::eval::EvalReport;
use dsv_core::pipeline::{read_pairs, render_report, Level, PairSpec, Run};
use dsv_core::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "dsv", version, about = "Disentangled sequence representations: training, evaluation and voice conversion")]
struct Cli {
    /// Run config (TOML). Defaults apply to every missing key.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set training.max_epochs=5`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Segmental,
    Sequential,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus manifest and feature files.
    Prepare {
        /// Generate the synthetic corpus regardless of `data.source`.
        #[arg(long, conflicts_with = "audio_dir")]
        synthetic: bool,
        /// Read `<dir>/<speaker>/<utterance>.wav`.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
    },
    /// Train (or resume) the model; writes checkpoints and the training log.
    Train {
        /// Stop after this many epochs in total.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write segmental or sequential features for every sequence.
    Extract {
        #[arg(long, value_enum)]
        level: LevelArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Convert sequences between speakers; without --pairs or --grid the
    /// pairs listed in `conversion.pairs` are used.
    #[command(group(ArgGroup::new("which").multiple(false).args(["pairs", "grid"])))]
    Convert {
        /// File with one `source_id target_id` pair per line.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Every test speaker to every other.
        #[arg(long)]
        grid: bool,
        /// Also synthesize waveforms with Griffin-Lim.
        #[arg(long)]
        wav: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the disentanglement benchmark and write the report JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write ROC and loss-curve SVGs.
        #[arg(long)]
        plots: bool,
    },
    /// Print a stored report as tables.
    Report { report: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Report { report } = &cli.command {
        print!("{}", render_report(&EvalReport::read(report)?));
        return Ok(());
    }
    let mut overrides = cli.overrides.clone();
    if let Command::Prepare { synthetic, audio_dir } = &cli.command {
        if *synthetic {
            overrides.push("data.source=\"synthetic\"".into());
        }
        if let Some(d) = audio_dir {
            overrides.push("data.source=\"audio\"".into());
            let s = d.to_str().ok_or_else(|| Error::Config(format!("audio dir {} is not valid UTF-8", d.display())))?;
            overrides.push(format!("data.audio_dir={}", toml_string(s)));
        }
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let run = Run::new(config)?;
    match cli.command {
        Command::Prepare { .. } => {
            let m = run.prepare()?;
            let source = match run.config.data.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Audio => "audio",
            };
            println!("prepared {} {source} sequences, corpus {}", m.entries.len(), m.corpus_hash);
            println!("{}", run.manifest_path().display());
        }
        Command::Train { epochs } => {
            let s = run.train(epochs)?;
            let best = s.best_dev.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            println!("epochs {}  best epoch {}  best loss {best}  stopped early {}", s.epochs, s.best_epoch, s.stopped_early);
            println!("{}", run.train_dir().display());
        }
        Command::Extract { level, checkpoint } => {
            let level = match level {
                LevelArg::Segmental => Level::Segmental,
                LevelArg::Sequential => Level::Sequential,
            };
            println!("{}", run.extract(checkpoint.as_deref(), level)?.display());
        }
        Command::Convert { pairs, grid, wav, checkpoint } => {
            let spec = match (pairs, grid) {
                (Some(p), _) => PairSpec::List(read_pairs(&p)?),
                (None, true) => PairSpec::Grid,
                (None, false) => PairSpec::List(run.config.conversion.pairs.clone()),
            };
            for p in run.convert(checkpoint.as_deref(), &spec, wav)? {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { checkpoint, plots } => {
            let report = run.evaluate(checkpoint.as_deref(), plots)?;
            print!("{}", render_report(&report));
            println!("{}", run.report_path().display());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
