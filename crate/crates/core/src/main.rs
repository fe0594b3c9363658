use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfmimo::harness::config::{PrecoderMode, SePath, SystemConfig};
use cfmimo::harness::{report, sweep, Axis};
use cfmimo::receive::Combiner;
use cfmimo::snapshot::Snapshot;

#[derive(Parser)]
#[command(version, about = "Cell-free massive MIMO uplink simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured drops at a single operating point.
    Run(Common),
    /// Run the drops over a grid of antenna counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Write the drop and pilot statistics of one seed as JSON.
    Snapshot {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "snapshot.json")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file with SystemConfig fields; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// First drop seed; with --drops D the seeds are S..S+D.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    drops: Option<u64>,
    #[arg(long, value_enum)]
    combiner: Option<Combiner>,
    #[arg(long, value_enum)]
    precoder: Option<PrecoderMode>,
    #[arg(long, value_enum)]
    se_path: Option<SePath>,
    /// Monte-Carlo realizations per statistics refresh.
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
}

fn load(path: &Option<PathBuf>) -> cfmimo::Result<SystemConfig> {
    match path {
        Some(p) => SystemConfig::from_file(p),
        None => Ok(SystemConfig::default()),
    }
}

impl Common {
    fn config(&self) -> cfmimo::Result<(SystemConfig, Vec<u64>)> {
        let mut cfg = load(&self.config)?;
        if let Some(c) = self.combiner {
            cfg.combiner = c;
        }
        if let Some(p) = self.precoder {
            cfg.precoder_mode = p;
        }
        if let Some(s) = self.se_path {
            cfg.se_path = s;
        }
        if let Some(n) = self.mc_samples {
            cfg.n_r = n;
        }
        if self.seed.is_some() || self.drops.is_some() {
            let first = self.seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(1));
            cfg.seeds = (first..first + self.drops.unwrap_or(1)).collect();
        }
        cfg.validate()?;
        let seeds = cfg.seeds.clone();
        Ok((cfg, seeds))
    }

    fn workers(&self) -> usize {
        self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn execute(cli: Cli) -> cfmimo::Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, seeds) = common.config()?;
            let out = sweep(&cfg, Axis::L, &[cfg.l], &seeds, common.workers())?;
            report::write_all(&common.out, &cfg, &seeds, None, &out)
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, seeds) = common.config()?;
            let out = sweep(&cfg, axis, &values, &seeds, common.workers())?;
            let name = match axis {
                Axis::L => "l",
                Axis::N => "n",
            };
            report::write_all(&common.out, &cfg, &seeds, Some(name), &out)
        }
        Command::Snapshot { config, seed, out } => {
            let cfg = load(&config)?;
            std::fs::write(out, Snapshot::capture(&cfg, seed)?.to_json()? + "\n")?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
