use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdb_core::engine::{evaluate, run_cell, train, BridgePair, RunConfig};
use sdb_core::harness::{
    aggregate, load_config, render_csv, render_markdown, rows_from_csv, rows_to_csv, run_sweep,
    table_grid, Method, SweepKind, SweepSpec,
};
use sdb_core::metrics::ClassifierConfig;
use sdb_core::Error;

#[derive(Parser)]
#[command(name = "sdb", version, about = "Structured diffusion bridge experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    rho: Option<f64>,
    /// Sets every run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, extra: &[(String, String)]) -> Result<RunConfig, Error> {
        let mut pairs = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {s}`: expected KEY=VALUE")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(r) = self.rho {
            pairs.push(("rho".into(), r.to_string()));
        }
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        pairs.extend_from_slice(extra);
        load_config(self.config.as_deref(), &pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a training dataset as CSV.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "data.csv")]
        out: PathBuf,
    },
    /// Train one configured run and save checkpoints and the loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Evaluate saved checkpoints, or train and evaluate when none are given.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: Option<String>,
        /// Directory written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a sweep grid and write raw result rows.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        kind: String,
        /// Comma-separated cell values; defaults to the kind's grid.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated method tags; defaults to the kind's methods.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Include the K_c = 1000 cell in the modes grid.
        #[arg(long)]
        include_large: bool,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Aggregate raw rows into mean ± std tables.
    Report {
        #[arg(long, default_value = "results.csv")]
        input: PathBuf,
        /// Output format: md or csv.
        #[arg(long, default_value = "md")]
        format: String,
        /// Keep every rho cell instead of the table grid {0, 0.5, 1}.
        #[arg(long)]
        all_cells: bool,
    },
}

fn method(tag: Option<&str>, base: RunConfig) -> Result<RunConfig, Error> {
    match tag {
        Some(t) => Ok(t.parse::<Method>()?.configure(&base)),
        None => Ok(base),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { cfg, n, out } => {
            let extra: Vec<(String, String)> = n.map(|n| ("n_train".into(), n.to_string())).into_iter().collect();
            let config = cfg.load(&extra)?;
            let spec = config.generator_spec()?;
            let data = config.training_data(&spec)?;
            data.write_csv(&out)?;
            println!("wrote {} samples ({} paired) to {}", data.len(), data.paired_count(), out.display());
        }
        Command::Train { cfg, method: m, out_dir } => {
            let config = method(m.as_deref(), cfg.load(&[])?)?;
            let (pair, log) = train(&config)?;
            pair.save(&out_dir)?;
            log.write_csv(&out_dir.join("metrics.csv"))?;
            std::fs::write(out_dir.join("config.txt"), sdb_core::harness::render_config(&config))?;
            println!("trained {} iterations; checkpoints in {}", log.rows.len(), out_dir.display());
        }
        Command::Eval { cfg, method: m, checkpoint } => {
            let config = method(m.as_deref(), cfg.load(&[])?)?;
            let classifier = ClassifierConfig::default();
            let report = match checkpoint {
                Some(dir) => {
                    let pair = BridgePair::load(&dir)?;
                    let spec = config.generator_spec()?;
                    let test = config.test_data(&spec)?;
                    let clf = config.classifier(&spec, &classifier)?;
                    evaluate(&pair, &test, &clf, config.eval_seed, config.inference_steps)?
                }
                None => run_cell(&config, &classifier)?.report,
            };
            println!("swd,mmd2,content_acc,cycle_mse");
            println!("{:?},{:?},{:?},{:?}", report.swd, report.mmd2, report.content_acc, report.cycle_mse);
        }
        Command::Sweep {
            cfg,
            kind,
            values,
            methods,
            seeds,
            workers,
            include_large,
            out,
        } => {
            let base = cfg.load(&[])?;
            let kind: SweepKind = kind.parse()?;
            let mut spec = SweepSpec::new(kind, base);
            spec.seeds = seeds;
            spec.values = match values {
                Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
                None => kind.default_values(include_large),
            };
            if let Some(m) = methods {
                spec.methods = Some(m.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>()?);
            }
            let rows = run_sweep(&spec, &ClassifierConfig::default(), workers)?;
            std::fs::write(&out, rows_to_csv(&rows))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Report { input, format, all_cells } => {
            let rows = rows_from_csv(&std::fs::read_to_string(&input)?)?;
            let mut summary = aggregate(&rows);
            if !all_cells {
                summary = table_grid(summary);
            }
            match format.as_str() {
                "md" => print!("{}", render_markdown(&summary)),
                "csv" => print!("{}", render_csv(&summary)),
                other => return Err(Error::Config(format!("unknown report format `{other}`"))),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Divergence { .. } | Error::Training { .. } | Error::Numeric { .. } => 4,
        _ => 1,
    }
}
