use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mogrpo::analysis::{self, FlowPolicy};
use mogrpo::checkpoint;
use mogrpo::config::{self, RunConfig};
use mogrpo::nn::MlpParams;
use mogrpo::shaping::{self, ShapingConfig};
use mogrpo::tdw::TdwTable;
use mogrpo::trainer::{self, RolloutSpec, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const ALPHA_SWEEP: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

#[derive(Parser)]
#[command(name = "mogrpo", version, about = "Multi-objective GRPO lab on a synthetic subject-placement task")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file, or `default` for the built-in configuration.
    #[arg(long, default_value = "default")]
    config: String,
    /// Seed for every stochastic stage (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides MOGRPO_OUT and the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the base velocity field by flow matching.
    Pretrain(Common),
    /// Policy-gradient fine-tuning.
    Train {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint; pretrains first when absent.
        #[arg(long)]
        init: Option<PathBuf>,
        /// customized or naive (overrides the config).
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Supervised fine-tuning on curated oracle renders.
    Sft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Deterministic-sampler evaluation on the held-out conditions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cross-section of the shaped advantage against the linear one.
    EmitSarsSurface {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        a_prompt: f64,
        #[arg(long, default_value_t = 41)]
        points: usize,
    },
    /// Per-step weight schedule.
    EmitTdw(Common),
    /// Frequency-band energy over the sampler steps.
    AnalyzeFft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sign-pattern statistics of rollout advantages.
    ConflictStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        groups: usize,
    },
    /// Customized training for each synergy coefficient in 0, 0.2, 0.5, 0.8, 1.0.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init: Option<PathBuf>,
    },
}

/// Invalid configuration, reported without a backtrace-style chain.
#[derive(Debug)]
struct ConfigFailure(String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&common.config).map_err(|e| ConfigFailure(e.to_string()))?;
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
        let env_out = std::env::var("MOGRPO_OUT").ok();
        let out = cfg.resolve_out(common.out.as_deref(), env_out.as_deref());
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(&self, command: &str, outputs: &[&str]) -> Result<()> {
        config::write_run_files(&self.out, command, &self.cfg, outputs.iter().map(|s| s.to_string()).collect())?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_params(ctx: &Ctx, path: &Path) -> Result<MlpParams> {
    let (_, params) = checkpoint::load(path)?;
    if params.arch() != &ctx.cfg.arch() {
        bail!(
            "checkpoint {} has architecture {:?}, config expects {:?}",
            path.display(),
            params.arch(),
            ctx.cfg.arch()
        );
    }
    Ok(params)
}

fn run_pretrain(ctx: &Ctx) -> Result<MlpParams> {
    let (params, losses) = trainer::pretrain(&ctx.cfg.pretrain, &ctx.cfg.env, ctx.cfg.arch())?;
    let mut w = create(&ctx.path("pretrain_loss.csv"))?;
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    w.flush()?;
    checkpoint::save(&ctx.path("pretrained.ckpt"), &params, losses.len() as u64, ctx.cfg.pretrain.seed)?;
    Ok(params)
}

fn init_params(ctx: &Ctx, init: Option<&Path>) -> Result<MlpParams> {
    match init {
        Some(p) => load_params(ctx, p),
        None => {
            let mut p = run_pretrain(ctx)?;
            // Same values a reload of pretrained.ckpt would give.
            checkpoint::narrow_to_f32(&mut p);
            Ok(p)
        }
    }
}

fn eval_to(ctx: &Ctx, params: &MlpParams) -> Result<analysis::EvalSummary> {
    let conds = analysis::holdout_conditions(&ctx.cfg.env, ctx.cfg.eval.conditions, ctx.cfg.eval.holdout_seed);
    let summary = analysis::eval_params(params, &ctx.cfg.sampler, &conds, &ctx.cfg.env, ctx.cfg.trainer.seed)?;
    summary.write_points_csv(create(&ctx.path("eval_points.csv"))?)?;
    std::fs::write(ctx.path("eval.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "r_id {:.4} ± {:.4}  r_prompt {:.4} ± {:.4}  (n = {})",
        summary.mean_r_id, summary.std_r_id, summary.mean_r_prompt, summary.std_r_prompt, summary.n
    );
    Ok(summary)
}

fn train_into(init: &MlpParams, dir: &Path, cfg: &RunConfig) -> Result<()> {
    let outcome = trainer::train_to_dir(&cfg.trainer, &cfg.env, init, dir)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "{}: iter {} rollout r_id {:.4} r_prompt {:.4}",
            dir.display(),
            last.iter,
            last.mean_r_id,
            last.mean_r_prompt
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let ctx = Ctx::new(&common)?;
            let params = run_pretrain(&ctx)?;
            eval_to(&ctx, &params)?;
            ctx.finish("pretrain", &["pretrained.ckpt", "pretrain_loss.csv", "eval.json", "eval_points.csv"])
        }
        Command::Train { common, init, mode } => {
            let mut ctx = Ctx::new(&common)?;
            if let Some(m) = mode {
                ctx.cfg.trainer.mode = m;
            }
            if ctx.cfg.trainer.mode == TrainMode::Sft {
                return Err(ConfigFailure("config error: use the `sft` subcommand for supervised fine-tuning".into()).into());
            }
            ctx.cfg.validate().map_err(|e| ConfigFailure(e.to_string()))?;
            let params = init_params(&ctx, init.as_deref())?;
            train_into(&params, &ctx.out, &ctx.cfg)?;
            let (_, trained) = checkpoint::load(&ctx.path("final.ckpt"))?;
            eval_to(&ctx, &trained)?;
            ctx.finish("train", &["metrics.csv", "final.ckpt", "eval.json", "eval_points.csv"])
        }
        Command::Sft { common, init } => {
            let ctx = Ctx::new(&common)?;
            let params = init_params(&ctx, init.as_deref())?;
            let (tuned, losses) = trainer::sft_finetune(&ctx.cfg.sft, &ctx.cfg.env, &params)?;
            let mut w = create(&ctx.path("sft_loss.csv"))?;
            writeln!(w, "step,loss")?;
            for (i, l) in losses.iter().enumerate() {
                writeln!(w, "{i},{l}")?;
            }
            w.flush()?;
            checkpoint::save(&ctx.path("final.ckpt"), &tuned, losses.len() as u64, ctx.cfg.sft.fit.seed)?;
            eval_to(&ctx, &tuned)?;
            ctx.finish("sft", &["final.ckpt", "sft_loss.csv", "eval.json", "eval_points.csv"])
        }
        Command::Eval { common, checkpoint } => {
            let ctx = Ctx::new(&common)?;
            let params = load_params(&ctx, &checkpoint)?;
            eval_to(&ctx, &params)?;
            ctx.finish("eval", &["eval.json", "eval_points.csv"])
        }
        Command::EmitSarsSurface { common, a_prompt, points } => {
            let ctx = Ctx::new(&common)?;
            if points < 2 {
                return Err(ConfigFailure("config error: --points must be at least 2".into()).into());
            }
            let shaping = ShapingConfig {
                w_id: 0.5,
                w_prompt: 0.5,
                ..ctx.cfg.shaping
            };
            let grid = shaping::linspace(-3.0, 3.0, points);
            let curve = shaping::sars_cross_section(a_prompt, &grid, &shaping)?;
            shaping::write_cross_section_csv(&curve, create(&ctx.path("sars_cross_section.csv"))?)?;
            ctx.finish("emit-sars-surface", &["sars_cross_section.csv"])
        }
        Command::EmitTdw(common) => {
            let ctx = Ctx::new(&common)?;
            let table = TdwTable::new(ctx.cfg.tdw)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            std::fs::write(ctx.path("tdw.csv"), &buf)?;
            std::io::stdout().write_all(&buf)?;
            ctx.finish("emit-tdw", &["tdw.csv"])
        }
        Command::AnalyzeFft { common, checkpoint } => {
            let ctx = Ctx::new(&common)?;
            let params = load_params(&ctx, &checkpoint)?;
            let env = &ctx.cfg.env;
            let sampler = if ctx.cfg.eval.fft_stochastic {
                ctx.cfg.sampler
            } else {
                ctx.cfg.sampler.deterministic()
            };
            let conds = analysis::holdout_conditions(env, ctx.cfg.eval.fft_trajectories, ctx.cfg.eval.holdout_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.trainer.seed);
            let trajs = FlowPolicy { params: &params, sampler }.trajectories(&conds, env, &mut rng)?;
            let curve = analysis::analyze_fft(&trajs, env.height, env.width, ctx.cfg.eval.fft_cutoff)?;
            curve.write_csv(create(&ctx.path("fft_bands.csv"))?)?;
            println!(
                "90% of final energy: low band at step {}, high band at step {}",
                curve.low_convergence_step(0.9),
                curve.high_convergence_step(0.9)
            );
            ctx.finish("analyze-fft", &["fft_bands.csv"])
        }
        Command::ConflictStats { common, checkpoint, groups } => {
            let ctx = Ctx::new(&common)?;
            if groups == 0 {
                return Err(ConfigFailure("config error: --groups must be positive".into()).into());
            }
            let params = load_params(&ctx, &checkpoint)?;
            let env = &ctx.cfg.env;
            let spec = RolloutSpec::from_config(&ctx.cfg.trainer);
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.trainer.seed);
            let rollouts = (0..groups as u64)
                .map(|id| {
                    let cond = mogrpo::env::sample_condition(env, &mut rng);
                    trainer::rollout_group(&params, &cond, env, &spec, id, &mut rng)
                })
                .collect::<mogrpo::Result<Vec<_>>>()?;
            let stats = trainer::groups_conflict_stats(&rollouts)?;
            stats.write_csv(create(&ctx.path("conflict.csv"))?)?;
            println!("conflict fraction {:.4} over {} samples", stats.conflict_fraction(), stats.total);
            ctx.finish("conflict-stats", &["conflict.csv"])
        }
        Command::SweepAlpha { common, init } => {
            let ctx = Ctx::new(&common)?;
            let params = init_params(&ctx, init.as_deref())?;
            let mut outputs = Vec::new();
            for alpha in ALPHA_SWEEP {
                let mut cfg = ctx.cfg.clone();
                cfg.trainer.mode = TrainMode::Customized;
                cfg.set_alpha(alpha);
                let name = format!("alpha_{alpha:.1}");
                let dir = ctx.path(&name);
                train_into(&params, &dir, &cfg)?;
                config::write_run_files(&dir, "train", &cfg, vec!["metrics.csv".into(), "final.ckpt".into()])?;
                outputs.push(format!("{name}/metrics.csv"));
            }
            let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
            ctx.finish("sweep-alpha", &refs)
        }
    }
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
            if e.downcast_ref::<ConfigFailure>().is_some() {
                eprintln!("{e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
