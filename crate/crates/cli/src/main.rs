use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ratplus_cli::commands::{cmd_adapt, cmd_bench, cmd_cost, cmd_decode_demo, cmd_equiv, cmd_eval, cmd_train};
use ratplus_cli::equiv::Fault;
use ratplus_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "ratplus", version, about = "Gated recurrence + dilated attention: oracles, training and cost reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and $RATPLUS_OUT).
    #[arg(long, env = "RATPLUS_OUT")]
    out: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--pattern.dilation=4` or `-s train.steps=50`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(hide = true, allow_hyphen_values = true, trailing_var_arg = true)]
    extra: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.set.clone();
        for e in &self.extra {
            if !e.starts_with("--") || !e.contains('=') {
                return Err(CliError::Validation(format!("unexpected argument '{e}'")));
            }
            overrides.push(e.clone());
        }
        let mut cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }

    fn checkpoint(&self, explicit: &Option<PathBuf>) -> Result<(RunConfig, PathBuf), CliError> {
        let cfg = self.load()?;
        let ckpt = explicit.clone().unwrap_or_else(|| cfg.output_dir().join("checkpoint.rmx"));
        if !ckpt.exists() {
            return Err(CliError::Validation(format!("checkpoint {} does not exist", ckpt.display())));
        }
        Ok((cfg, ckpt))
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.strip_prefix("T=").unwrap_or(p).parse::<usize>().map_err(|e| format!("bad size '{p}': {e}"))
        })
        .filter(|r| r.as_ref().map_or(true, |&n| n > 0))
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Run every oracle check; exit 2 if any fails.
    Equiv {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated sequence lengths, e.g. `1,2,31,257` or `T=1`.
        #[arg(long, default_value = "1,2,31,257", value_parser = parse_sizes)]
        sizes: std::vec::Vec<usize>,
        #[arg(long, value_enum)]
        inject_fault: Option<Fault>,
    },
    /// Train a model and write a checkpoint and loss trace.
    Train(ConfigArgs),
    /// Fine-tune a checkpoint to the configured `pattern`.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out perplexity under each of `eval_specs`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Time prefill and decode steps for each eval spec and length.
    Bench(ConfigArgs),
    /// Analytic FLOPs and cache entries for each eval spec and length.
    Cost(ConfigArgs),
    /// Stream generated tokens through the dilated cache, logging its size.
    DecodeDemo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 32)]
        prompt_len: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Equiv { seed, sizes, inject_fault } => cmd_equiv(seed, &sizes, inject_fault, &mut out).map(drop),
        Command::Train(a) => cmd_train(&a.load()?, &mut out).map(drop),
        Command::Adapt { cfg, checkpoint } => {
            let (c, p) = cfg.checkpoint(&checkpoint)?;
            cmd_adapt(&c, &p, &mut out).map(drop)
        }
        Command::Eval { cfg, checkpoint } => {
            let (c, p) = cfg.checkpoint(&checkpoint)?;
            cmd_eval(&c, &p, &mut out).map(drop)
        }
        Command::Bench(a) => cmd_bench(&a.load()?, &mut out).map(drop),
        Command::Cost(a) => cmd_cost(&a.load()?, &mut out).map(drop),
        Command::DecodeDemo { cfg, checkpoint, tokens, prompt_len, temperature } => {
            let (c, p) = cfg.checkpoint(&checkpoint)?;
            cmd_decode_demo(&c, &p, prompt_len, tokens, temperature, &mut out).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
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
