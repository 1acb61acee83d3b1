use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use softflow::cli::{
    apply_seed_env, load_checkpoint, load_oracle, resolve_config, save_checkpoint, write_heatmap, write_metrics, Overrides, RunManifest,
    SEED_ENV,
};
use softflow::envs::{enumerate_grid_target, Dfa, EnvKind};
use softflow::policy::{grid_terminal_distribution, PriorPolicy};
use softflow::trainer::{
    build_prior, corpus_rng, eval_rng, evaluate, generate_corpus, grid_mass, pretrain_prior, MetricsRecord, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "softflow", version, about = "Soft-constrained GFlowNet training with contrastive replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and fit the sequence prior; writes prior.sflw.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a posterior; writes metrics.csv and checkpoint.sflw.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Start from the prior stored in this checkpoint instead of pretraining.
        #[arg(long, conflicts_with = "resume")]
        prior: Option<PathBuf>,
        /// Continue a run from this checkpoint (its config, with flag overrides).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write checkpoint_<step>.sflw every this many steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Swap the feasibility oracle, reclassify the buffers, and run replay-only updates.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// DFA document for the new oracle.
        #[arg(long, required_unless_present = "max_depth")]
        oracle: Option<PathBuf>,
        /// Use the built-in balanced-parentheses oracle with this nesting bound.
        #[arg(long, conflicts_with = "oracle")]
        max_depth: Option<usize>,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        /// Evaluation samples before and after.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print metrics of a checkpoint's posterior as one JSON object.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Judge feasibility with this DFA instead of the stored one.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Evaluate the prior instead of the posterior.
        #[arg(long)]
        prior: bool,
    },
    /// Grid heatmaps: exact target, positives-only run, and run with the contrastive loss.
    GridDemo {
        #[command(flatten)]
        run: RunArgs,
        /// Also train at alpha in {0.1, 0.01, 0.001}.
        #[arg(long)]
        sweep: bool,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON config; absent keys take the environment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvKind>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    /// Capacity of both replay buffers.
    #[arg(long)]
    capacity: Option<usize>,
    /// DFA document replacing the sequence oracle.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    rs_baseline: bool,
    #[arg(long)]
    mutation_negatives: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_env(s: &str) -> std::result::Result<EnvKind, String> {
    match s {
        "grid" => Ok(EnvKind::Grid),
        "seq" => Ok(EnvKind::Seq),
        _ => Err(format!("unknown env {s:?}, expected grid or seq")),
    }
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            env: self.env,
            alpha: self.alpha,
            beta: self.beta,
            batch_size: self.batch_size,
            steps: self.steps,
            capacity: self.capacity,
            oracle: self.oracle.clone(),
            rs_baseline: self.rs_baseline,
            mutation_negatives: self.mutation_negatives,
            seed: self.seed,
        }
    }

    /// Config from file and flags, then the seed variable.
    fn config(&self) -> Result<(TrainConfig, bool)> {
        let mut cfg = resolve_config(self.config.as_deref(), &self.overrides()).with_context(|| match &self.config {
            Some(p) => format!("loading config {}", p.display()),
            None => "building config".into(),
        })?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let from_env = apply_seed_env(&mut cfg, env_seed.as_deref())?.is_some();
        Ok((cfg, from_env))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let Some(out) = &self.out else { bail!("--out is required") };
        create_dir(out)?;
        Ok(out.clone())
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::write(path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain { run } => pretrain(&run),
        Command::Train {
            run,
            prior,
            resume,
            checkpoint_every,
        } => train(&run, prior.as_deref(), resume.as_deref(), checkpoint_every),
        Command::Adapt {
            checkpoint,
            oracle,
            max_depth,
            steps,
            n,
            out,
        } => adapt(&checkpoint, oracle.as_deref(), max_depth, steps, n, &out),
        Command::Eval {
            checkpoint,
            n,
            oracle,
            prior,
        } => eval(&checkpoint, n, oracle.as_deref(), prior),
        Command::GridDemo { run, sweep } => grid_demo(&run, sweep),
    }
}

fn pretrain(run: &RunArgs) -> Result<()> {
    let (cfg, from_env) = run.config()?;
    let out = run.out_dir()?;
    let env = cfg.build_env()?;
    let prior_path = out.join("prior.sflw");
    RunManifest::new("pretrain", &cfg, from_env, vec![prior_path.clone(), out.join("corpus.txt")]).write(&out.join("manifest.json"))?;
    write_config(&out.join("config.json"), &cfg)?;
    let prior = match env.seq() {
        Some(spec) => {
            let mut rng = corpus_rng(cfg.seed);
            let corpus = generate_corpus(spec, &cfg.pretrain, cfg.seq.max_depth, cfg.pretrain.corpus_size, &mut rng)?;
            std::fs::write(out.join("corpus.txt"), corpus.join("\n") + "\n")?;
            pretrain_prior(&env, &corpus, &cfg)?
        }
        None => PriorPolicy::Uniform,
    };
    let trainer = Trainer::new(cfg.clone(), prior)?;
    let (m, _) = evaluate(&trainer.prior, &trainer.env, cfg.eval_samples, cfg.beta, &mut eval_rng(cfg.seed, 0))?;
    save_checkpoint(&prior_path, &trainer)?;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn train(run: &RunArgs, prior: Option<&Path>, resume: Option<&Path>, checkpoint_every: Option<u64>) -> Result<()> {
    let out = run.out_dir()?;
    let (mut trainer, from_env) = match resume {
        Some(path) => {
            let mut t = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if run.config.is_some() || run.env.is_some() {
                bail!("--resume takes its config from the checkpoint; only flag overrides apply");
            }
            run.overrides().apply(&mut t.cfg)?;
            let env_seed = std::env::var(SEED_ENV).ok();
            let from_env = apply_seed_env(&mut t.cfg, env_seed.as_deref())?.is_some();
            t.cfg.validate()?;
            (t, from_env)
        }
        None => {
            let (cfg, from_env) = run.config()?;
            let p = match prior {
                Some(path) => load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.prior,
                None => build_prior(&cfg)?,
            };
            (Trainer::new(cfg, p)?, from_env)
        }
    };
    let metrics_path = out.join("metrics.csv");
    let ckpt_path = out.join("checkpoint.sflw");
    RunManifest::new("train", &trainer.cfg, from_env, vec![metrics_path.clone(), ckpt_path.clone()]).write(&out.join("manifest.json"))?;
    write_config(&out.join("config.json"), &trainer.cfg)?;

    let mut records: Vec<MetricsRecord> = Vec::new();
    let total = trainer.cfg.steps;
    loop {
        let until = match checkpoint_every {
            Some(k) if k > 0 => ((trainer.step / k + 1) * k).min(total),
            _ => total,
        };
        if trainer.step >= total {
            break;
        }
        let recs = trainer.run_until(until, &mut |m| {
            eprintln!(
                "step {} positive_ratio {:.4} mean_reward {:.4}",
                m.step, m.positive_ratio, m.mean_reward
            );
        })?;
        records.extend(recs);
        if checkpoint_every.is_some() && trainer.step < total {
            save_checkpoint(&out.join(format!("checkpoint_{}.sflw", trainer.step)), &trainer)?;
        }
    }
    write_metrics(&metrics_path, &records)?;
    save_checkpoint(&ckpt_path, &trainer)?;
    Ok(())
}

fn adapt(checkpoint: &Path, oracle: Option<&Path>, max_depth: Option<usize>, steps: u64, n: usize, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut t = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dfa = match (oracle, max_depth) {
        (Some(p), _) => load_oracle(p)?,
        (None, Some(d)) => {
            let spec = t.env.seq().context("adaptation needs the seq environment")?;
            let letters: Vec<char> = spec.vocab.iter().copied().filter(|c| !"()".contains(*c)).collect();
            Dfa::balanced_parens(d, &letters, 1, Some(spec.max_len))
        }
        (None, None) => bail!("--oracle or --max-depth is required"),
    };
    let new_env = t.env.with_oracle(dfa)?;
    let (mut zero_shot, _) = evaluate(&t.policy, &new_env, n, t.cfg.beta, &mut eval_rng(t.cfg.seed, t.step))?;
    zero_shot.step = t.step;
    let moved = t.adapt(new_env, steps)?;
    let (after, _) = t.evaluate(n)?;
    let report = serde_json::json!({
        "zero_shot": zero_shot,
        "adapted": after,
        "steps": steps,
        "moved_to_neg": moved.moved_to_neg,
        "moved_to_pos": moved.moved_to_pos,
        "dropped": moved.dropped,
    });
    std::fs::write(out.join("adapt.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    save_checkpoint(&out.join("checkpoint.sflw"), &t)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn eval(checkpoint: &Path, n: usize, oracle: Option<&Path>, prior: bool) -> Result<()> {
    let t = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let env = match oracle {
        Some(p) => t.env.with_oracle(load_oracle(p)?)?,
        None => t.env.clone(),
    };
    let mut rng = eval_rng(t.cfg.seed, t.step);
    let (mut m, _) = if prior {
        evaluate(&t.prior, &env, n, t.cfg.beta, &mut rng)?
    } else {
        evaluate(&t.policy, &env, n, t.cfg.beta, &mut rng)?
    };
    m.step = t.step;
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

fn grid_demo(run: &RunArgs, sweep: bool) -> Result<()> {
    let mut run = run.clone();
    if run.config.is_none() && run.env.is_none() {
        run.env = Some(EnvKind::Grid);
    }
    if run.steps.is_none() && run.config.is_none() {
        run.steps = Some(5000);
    }
    let (cfg, from_env) = run.config()?;
    let out = run.out_dir()?;
    let env = cfg.build_env()?;
    let g = env.grid().context("grid-demo needs the grid environment")?.clone();
    RunManifest::new("grid-demo", &cfg, from_env, vec![out.clone()]).write(&out.join("manifest.json"))?;
    write_config(&out.join("config.json"), &cfg)?;

    let target = enumerate_grid_target(&g, cfg.beta, true)?;
    write_heatmap(&out.join("target.csv"), g.side, &target, "exact constrained target")?;

    let mut runs: Vec<(String, f64)> = vec![("positives_only".into(), 0.0), ("aux".into(), cfg.alpha)];
    if sweep {
        for a in [0.1, 0.01, 0.001] {
            runs.push((format!("alpha_{a}"), a));
        }
    }
    let mut summary = Vec::new();
    for (name, alpha) in runs {
        let mut c = cfg.clone();
        c.alpha = alpha;
        let mut t = Trainer::new(c, PriorPolicy::Uniform)?;
        let records = t.run(|m| eprintln!("{name}: step {} positive_ratio {:.4}", m.step, m.positive_ratio))?;
        let probs = grid_terminal_distribution(&t.policy, &t.env)?;
        write_heatmap(
            &out.join(format!("{name}.csv")),
            g.side,
            &probs,
            &format!("learned terminal distribution, alpha = {alpha}"),
        )?;
        write_metrics(&out.join(format!("{name}_metrics.csv")), &records)?;
        let mass = grid_mass(&g, &probs)?;
        summary.push(serde_json::json!({ "run": name, "alpha": alpha, "infeasible_mass": mass.infeasible, "mode_mass": mass.modes }));
    }
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(out.join("summary.json"), text.clone() + "\n")?;
    println!("{text}");
    Ok(())
}
