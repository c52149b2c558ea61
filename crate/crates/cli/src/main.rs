use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cfr_bench::config::CONFIG_FILE;
use cfr_bench::experiment::{cmd_baseline, cmd_eval, cmd_figure, cmd_gen, cmd_gradcheck, cmd_sweep, cmd_train, DATA_FILE};
use cfr_bench::{exit_code, RunConfig};
use cfr_core::CfrError;
use clap::{Args, Parser, Subcommand};

/// Counterfactual regression experiments.
///
/// Run options are `--key value` pairs over the keys of the run config
/// (see `config.txt` in any run directory); they override `--config`.
#[derive(Parser)]
#[command(name = "cfr-bench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset CSV (`--output FILE`; default <out_dir>/<run_id>/data.csv).
    Gen(RunArgs),
    /// Train one model and write model, history and report.
    Train(RunArgs),
    /// Train one model per grid point and write a summary.
    Sweep(RunArgs),
    /// Re-evaluate a saved run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Score this dataset instead of the run's own data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fit OLS-S, OLS-T and k-NN baselines.
    Baseline(RunArgs),
    /// Check objective gradients against finite differences.
    Gradcheck(RunArgs),
    /// Write CSV data for the α curve or the policy-risk curve.
    Figure(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// `--config FILE` for a base config, then overrides as `--key value`
    /// or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OPTIONS")]
    options: Vec<String>,
}

impl RunArgs {
    /// Removes `--name value` / `--name=value` from the options.
    fn take(&mut self, name: &str) -> Result<Option<String>, CfrError> {
        let flag = format!("--{name}");
        let prefix = format!("--{name}=");
        let mut found = None;
        let mut rest = Vec::with_capacity(self.options.len());
        let mut it = std::mem::take(&mut self.options).into_iter();
        while let Some(arg) = it.next() {
            if arg == flag {
                found = Some(it.next().ok_or_else(|| CfrError::Config(format!("{flag} needs a value")))?);
            } else if let Some(v) = arg.strip_prefix(&prefix) {
                found = Some(v.to_string());
            } else {
                rest.push(arg);
            }
        }
        self.options = rest;
        Ok(found)
    }

    fn resolve(mut self) -> Result<(RunConfig, Option<PathBuf>), CfrError> {
        let output = self.take("output")?.map(PathBuf::from);
        let mut cfg = match self.take("config")? {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_flags(&self.options)?;
        Ok((cfg, output))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Gen(args) => {
            let (cfg, output) = args.resolve()?;
            let path = output.unwrap_or_else(|| cfg.run_dir().join(DATA_FILE));
            let ds = cmd_gen(&cfg, &path).with_context(|| format!("generating {}", path.display()))?;
            println!("wrote {} rows to {}", ds.n(), path.display());
        }
        Cmd::Train(args) => {
            let (cfg, _) = args.resolve()?;
            let (dir, report) = cmd_train(&cfg).context("training")?;
            println!("{}", report.to_json());
            println!("run directory: {}", dir.display());
        }
        Cmd::Sweep(args) => {
            let (cfg, _) = args.resolve()?;
            let (dir, rows) = cmd_sweep(&cfg).context("sweep")?;
            let best = rows.iter().find(|r| r.selected).map_or("none", |r| r.run_id.as_str());
            println!("{} runs in {}; selected {best}", rows.len(), dir.display());
        }
        Cmd::Eval { run, data } => {
            if !run.join(CONFIG_FILE).exists() {
                return Err(CfrError::Config(format!("{} has no {CONFIG_FILE}", run.display())).into());
            }
            let report = cmd_eval(&run, data.as_deref()).context("evaluation")?;
            println!("{}", report.to_json());
        }
        Cmd::Baseline(args) => {
            let (cfg, _) = args.resolve()?;
            for r in cmd_baseline(&cfg).context("baselines")? {
                println!("{}", r.to_json());
            }
        }
        Cmd::Gradcheck(args) => {
            let (cfg, _) = args.resolve()?;
            let rows = cmd_gradcheck(&cfg).context("gradient check")?;
            let worst = rows.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
            println!("{} checks passed; max relative error {worst:.3e}", rows.len());
        }
        Cmd::Figure(args) => {
            let (cfg, _) = args.resolve()?;
            for p in cmd_figure(&cfg).context("figure data")? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.chain().find_map(|e| e.downcast_ref::<CfrError>()).map_or(1, exit_code);
            ExitCode::from(code as u8)
        }
    }
}
