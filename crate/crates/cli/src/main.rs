use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cafl::config::{parse_config, ExperimentConfig, Mode};
use cafl::fedsim::{read_metrics, Federation, MetricsWriter};
use cafl::model::save_checkpoint;
use cafl::report::{compare, summarize, write_plot_csv, write_summary};
use cafl::Error;

#[derive(Parser)]
#[command(name = "cafl", version, about = "Constraint-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Metrics CSV path (same as --set out=PATH).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["cafl", "fedavg"])]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> cafl::Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", out.display()));
        }
        if let Some(mode) = &self.mode {
            overrides.push(format!("mode={mode}"));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, writing the metrics CSV and a JSON summary.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Save the final global model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rounds averaged in the summary.
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Suppress per-round progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare the final rounds of two metrics CSVs; changes are B relative to A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Also write a long-format `round,series,value` CSV for plotting.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value = "A")]
        label_a: String,
        #[arg(long, default_value = "B")]
        label_b: String,
    },
    /// Print the fully resolved configuration.
    PrintConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl Failure {
    fn by_kind(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn summary_path(out: &Path) -> PathBuf {
    out.with_extension("summary.json")
}

fn run(cfg: ExperimentConfig, checkpoint: Option<&Path>, window: usize, quiet: bool) -> Result<(), Failure> {
    // Setup failures (unreadable corpus, too few tokens) happen before the
    // CSV exists, so a bad invocation leaves no output behind.
    let mut fed = Federation::new(cfg.clone()).map_err(|e| match e {
        Error::Io { .. } => Failure::Config(e),
        e => Failure::by_kind(e),
    })?;
    let mut writer = MetricsWriter::create(&cfg.out).map_err(Failure::Runtime)?;
    let mut trace = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let m = fed.run_round().map_err(Failure::Runtime)?;
        writer.write_round(&m).map_err(Failure::Runtime)?;
        if !quiet {
            println!(
                "round {:>3}  loss {:.4}  acc {:.3}  k={} s={} b={} q={} ga={}  r=[{:.2} {:.2} {:.2} {:.2}]  bytes {}",
                m.round,
                m.val_loss,
                m.val_acc,
                m.knobs.k,
                m.knobs.s,
                m.knobs.b,
                m.knobs.q.level(),
                m.knobs.grad_accum,
                m.ratios[0],
                m.ratios[1],
                m.ratios[2],
                m.ratios[3],
                m.wire_bytes,
            );
        }
        trace.push(m);
    }
    let summary = summarize(&cfg, &trace, window);
    write_summary(summary_path(&cfg.out), &summary).map_err(Failure::Runtime)?;
    if let Some(path) = checkpoint {
        save_checkpoint(fed.global(), path).map_err(Failure::Runtime)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            cfg,
            checkpoint,
            window,
            quiet,
        } => {
            let cfg = cfg.resolve().map_err(Failure::Config)?;
            if cfg.mode == Mode::FedAvg {
                log::info!("baseline mode: knobs fixed at their base values");
            }
            run(cfg, checkpoint.as_deref(), window, quiet)
        }
        Command::Compare {
            a,
            b,
            window,
            plot,
            label_a,
            label_b,
        } => {
            let ta = read_metrics(&a).map_err(Failure::Config)?;
            let tb = read_metrics(&b).map_err(Failure::Config)?;
            let report = compare(&ta, &tb, window).map_err(Failure::Config)?;
            print!("{}", report.render(&label_a, &label_b));
            if let Some(path) = plot {
                write_plot_csv(path, &[(&label_a, &ta), (&label_b, &tb)])
                    .map_err(Failure::Runtime)?;
            }
            Ok(())
        }
        Command::PrintConfig { cfg } => {
            print!("{}", cfg.resolve().map_err(Failure::Config)?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
