use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use s2moe::diagnostics::flops::{flops_per_token, reduction};
use s2moe::harness::config::{Preset, RunConfig};
use s2moe::harness::eval::evaluate_checkpoint;
use s2moe::harness::probe::probe_checkpoint;
use s2moe::harness::train::{train, TrainOptions};
use s2moe::harness::HarnessError;
use s2moe::{Mode, Variant};

#[derive(Parser)]
#[command(name = "s2moe", version, about = "Stochastic sparse mixture-of-experts language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    PaperBase,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::PaperBase => Preset::PaperBase,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Smoe,
    S2moe,
    SmoeDropout,
    Xmoe,
    Stablemoe,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Smoe => Variant::Smoe,
            VariantArg::S2moe => Variant::S2moe,
            VariantArg::SmoeDropout => Variant::SmoeDropout,
            VariantArg::Xmoe => Variant::Xmoe,
            VariantArg::Stablemoe => Variant::StableMoe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps, writing a checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a split at a given inference k.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Jacobian and collapse reports for one MoE layer.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
    },
    /// Per-token multiply-accumulate counts.
    Flops {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long, value_enum, default_value = "eval")]
        mode: ModeArg,
    },
}

fn load_config(path: Option<&PathBuf>, preset: Option<PresetArg>) -> Result<RunConfig, HarnessError> {
    let base = preset.map_or(Preset::Desk, Preset::from);
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            let mut cfg = RunConfig::from_text(&text, base)?;
            if let Some(pr) = preset {
                cfg.preset = pr.into();
            }
            Ok(cfg)
        }
        None => Ok(RunConfig::preset(base)),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train {
            config,
            preset,
            variant,
            seed,
            steps,
            out,
            resume,
            stop_after,
            quiet,
        } => {
            let mut cfg = load_config(config.as_ref(), preset)?;
            if let Some(v) = variant {
                cfg.model.variant = v.into();
            }
            if let Some(s) = seed {
                cfg.model.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate().map_err(HarnessError::from)?;
            let opts = TrainOptions {
                resume,
                stop_after,
                verbose: !quiet,
            };
            let s = train(&cfg, &opts).context("training failed")?;
            println!("steps = {}", s.steps_done);
            if let Some(b) = s.initial_bpc {
                println!("initial_train_bpc = {b:.6}");
            }
            if let Some(b) = s.final_train_bpc {
                println!("final_train_bpc = {b:.6}");
            }
            if let Some(b) = s.val_bpc {
                println!("val_bpc = {b:.6}");
            }
            println!("metrics = {}", s.metrics_path.display());
            println!("checkpoint = {}", s.checkpoint.display());
            println!("wall_secs = {:.1}", s.wall_secs);
        }
        Cmd::Eval { ckpt, k, split } => {
            let split = match split {
                SplitArg::Val => "val",
                SplitArg::Test => "test",
            };
            let r = evaluate_checkpoint(&ckpt, k, split)?;
            println!("[eval]");
            println!("step = {}", r.step);
            println!("split = {}", r.split);
            println!("k = {}", r.k);
            println!("tokens = {}", r.score.tokens);
            println!("task_nats = {:.6}", r.score.nats);
            println!("bpc = {:.6}", r.score.bpc);
            println!("ppl = {:.6}", r.score.ppl);
            print!("{}", r.collapse);
        }
        Cmd::Probe { ckpt, layer } => {
            let r = probe_checkpoint(&ckpt, layer)?;
            println!("[probe]");
            println!("layer = {}", r.layer);
            println!("token_row = {}", r.row);
            print!("{}", r.clean);
            if let Some(two) = &r.two_path {
                print!("{two}");
            }
            print!("{}", r.collapse);
        }
        Cmd::Flops {
            config,
            preset,
            k,
            variant,
            mode,
        } => {
            let mut cfg = load_config(config.as_ref(), preset)?;
            if let Some(v) = variant {
                cfg.model.variant = v.into();
            }
            let mode = match mode {
                ModeArg::Train => Mode::Train,
                ModeArg::Eval => Mode::Eval,
            };
            let m = &cfg.model;
            if k > m.n_experts {
                return Err(HarnessError::KOutOfRange { k, n: m.n_experts }.into());
            }
            let r = flops_per_token(m, k, m.seq_len, mode).map_err(HarnessError::from)?;
            print!("{r}");
            let base = flops_per_token(m, m.k_train, m.seq_len, mode).map_err(HarnessError::from)?;
            println!(
                "saving_vs_k{} = {:.2}%",
                m.k_train,
                100.0 * reduction(&base, &r)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.downcast_ref::<HarnessError>().is_some_and(HarnessError::is_usage));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
