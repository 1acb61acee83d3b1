//! The training loop: on-policy sampling, positive-only balance updates,
//! contrastive replay updates, and replay-only adaptation to a new oracle.

mod config;
mod corpus;
mod metrics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Objective, PretrainConfig, SeqConfig, TrainConfig};
pub use corpus::{generate_corpus, pretrain_prior};
pub use metrics::{evaluate, grid_histogram, grid_mass, summarize, GridMass, MetricsRecord, DIVERSITY_SUBSET, TOP_K};

use crate::autodiff::{adam_step, AdamHyper, AdamState, Tape};
use crate::envs::{Env, TerminalObject, Trajectory};
use crate::error::{Error, Result};
use crate::losses::{aux_loss_on, balance_loss_on, shaped_reward, tempered_log_reward};
use crate::policy::{sample_trajectories, trajectory_log_pb, EpsilonMix, Policy, PriorPolicy};
use crate::replay::{reclassify, BufferEntry, NegativeBuffer, PositiveBuffer, Reclassified};

/// Independent random streams derived from `(seed, step)`, so a run can be
/// resumed from a checkpoint without saving generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stream {
    Sample = 0,
    ReplayPos = 1,
    ReplayNeg = 2,
    Mutate = 3,
    Eval = 4,
    Pretrain = 5,
    Corpus = 6,
}

pub(crate) fn stream_rng(seed: u64, step: u64, stream: Stream, sub: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 8) | ((stream as u64) << 4) | (sub & 0xf));
    rng
}

/// Seeded random generator for evaluation at `step`.
pub fn eval_rng(seed: u64, step: u64) -> ChaCha8Rng {
    stream_rng(seed, step, Stream::Eval, 0)
}

/// Seeded random generator for corpus generation.
pub fn corpus_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 0, Stream::Corpus, 0)
}

/// Losses and counts from one training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub n_positive: usize,
    pub n_negative: usize,
    /// On-policy balance loss over the positives; `None` when skipped.
    pub loss_onpolicy: Option<f64>,
    /// Balance part of the last replay update.
    pub loss_replay: Option<f64>,
    /// Unweighted contrastive loss of the last replay update (buffer and
    /// mutant terms summed).
    pub loss_aux: Option<f64>,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub env: Env,
    pub policy: Policy,
    pub prior: PriorPolicy,
    pub adam: AdamState,
    pub positives: PositiveBuffer,
    pub negatives: NegativeBuffer,
    /// Completed training steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh run: the posterior starts as a copy of the prior and `log Z`
    /// at 0.
    pub fn new(cfg: TrainConfig, prior: PriorPolicy) -> Result<Trainer> {
        cfg.validate()?;
        let env = cfg.build_env()?;
        if let PriorPolicy::Network(net) = &prior {
            if net.kind != env.kind() || net.mlp.output_dim() != env.n_actions() {
                return Err(Error::Config("prior was trained for a different environment".into()));
            }
        }
        let policy = Policy::warm_start(&prior, &env, &cfg.hidden, cfg.activation, cfg.window, cfg.seed)?;
        Ok(Trainer {
            positives: PositiveBuffer::new(cfg.capacity_pos)?,
            negatives: NegativeBuffer::new(cfg.capacity_neg)?,
            env,
            policy,
            prior,
            adam: AdamState::new(),
            step: 0,
            cfg,
        })
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper::default()
    }

    /// Per-trajectory `β·log R + log_ref`, with `R` replaced by the shaped
    /// reward when `shaped`.
    fn targets(&self, trajs: &[&Trajectory], shaped: bool) -> Result<Vec<f64>> {
        let refs = match self.cfg.resolved_objective() {
            Objective::Tb => trajs.iter().map(|t| trajectory_log_pb(&self.env, t)).collect(),
            _ => self.prior.trajectory_log_probs(&self.env, trajs)?,
        };
        trajs
            .iter()
            .zip(refs)
            .map(|(t, r)| {
                let reward = if shaped {
                    shaped_reward(t.reward_raw, t.feasible, self.cfg.reward_floor)
                } else {
                    t.reward_raw
                };
                Ok(tempered_log_reward(reward, self.cfg.beta)? + r)
            })
            .collect()
    }

    /// One Adam step on `mean balance(trajs[..n_bal]) + α·Σ aux` where each
    /// aux group contrasts `trajs[..n_bal]` against the index range given.
    fn update(
        &mut self,
        trajs: &[&Trajectory],
        n_bal: usize,
        targets: &[f64],
        aux_groups: &[std::ops::Range<usize>],
    ) -> Result<(f64, Option<f64>)> {
        let mut tape = Tape::new();
        let lp = self.policy.net.trajectory_log_probs_on(&self.env, trajs, &mut tape, true)?;
        let z = self.policy.log_z_on(&mut tape)?;
        let head = if n_bal == trajs.len() {
            lp
        } else {
            tape.gather(lp, (0..n_bal).collect(), n_bal, 1)?
        };
        let bal = balance_loss_on(&mut tape, z, head, targets)?;
        let bal_value = tape.value(bal).values()[0];
        let mut total = bal;
        let mut aux_value = None;
        let pos: Vec<usize> = (0..n_bal).collect();
        for g in aux_groups.iter().filter(|g| !g.is_empty()) {
            let neg: Vec<usize> = g.clone().collect();
            let aux = aux_loss_on(&mut tape, lp, &pos, &neg)?;
            *aux_value.get_or_insert(0.0) += tape.value(aux).values()[0];
            let weighted = tape.scale(aux, self.cfg.alpha);
            total = tape.add(total, weighted)?;
        }
        let grads = tape.backprop_scalar(total)?;
        let hyper = self.hyper();
        let mut slots = self.policy.param_slots(self.cfg.lr, self.cfg.lr_log_z);
        adam_step(&mut slots, &grads, &mut self.adam, &hyper)?;
        Ok((bal_value, aux_value))
    }

    /// Phase C: one replay update from the buffers. `None` when the
    /// positive buffer is empty. `explore` allows mutation negatives, which
    /// query the oracle on new objects.
    fn replay_update(&mut self, step: u64, sub: u64, explore: bool) -> Result<Option<(f64, Option<f64>)>> {
        if self.positives.is_empty() {
            return Ok(None);
        }
        let b = self.cfg.batch_size;
        let seed = self.cfg.seed;
        let mut pos_rng = stream_rng(seed, step, Stream::ReplayPos, sub);
        let pos: Vec<Trajectory> = self
            .positives
            .sample(b, self.cfg.prioritization, self.cfg.beta, &mut pos_rng)?
            .into_iter()
            .map(|e| e.trajectory.clone())
            .collect();
        let want_neg = self.cfg.rs_baseline || self.cfg.alpha > 0.0;
        let neg: Vec<Trajectory> = if want_neg && !self.negatives.is_empty() {
            let mut neg_rng = stream_rng(seed, step, Stream::ReplayNeg, sub);
            self.negatives
                .sample(b, &mut neg_rng)?
                .into_iter()
                .map(|e| e.trajectory.clone())
                .collect()
        } else {
            Vec::new()
        };
        let mutants = if explore && self.cfg.mutation_negatives && !self.cfg.rs_baseline {
            self.mutants(&pos, step, sub)?
        } else {
            Vec::new()
        };

        if self.cfg.rs_baseline {
            let all: Vec<&Trajectory> = pos.iter().chain(&neg).collect();
            let targets = self.targets(&all, true)?;
            let n = all.len();
            let (bal, _) = self.update(&all, n, &targets, &[])?;
            return Ok(Some((bal, None)));
        }

        let all: Vec<&Trajectory> = pos.iter().chain(&neg).chain(&mutants).collect();
        let targets = self.targets(&all[..pos.len()], false)?;
        let p = pos.len();
        let groups = if self.cfg.alpha > 0.0 {
            vec![p..p + neg.len(), p + neg.len()..all.len()]
        } else {
            Vec::new()
        };
        Ok(Some(self.update(&all, p, &targets, &groups)?))
    }

    /// One single-token edit per drawn positive; infeasible edits are kept
    /// (and queued in the negative buffer), feasible ones discarded.
    fn mutants(&mut self, pos: &[Trajectory], step: u64, sub: u64) -> Result<Vec<Trajectory>> {
        let Env::Seq(spec) = &self.env else {
            return Ok(Vec::new());
        };
        let mut rng = stream_rng(self.cfg.seed, step, Stream::Mutate, sub);
        let mut out = Vec::new();
        for t in pos {
            let TerminalObject::Seq(s) = &t.terminal else { continue };
            let m = spec.mutate(s, &mut rng)?;
            let traj = self.env.seq_trajectory(&m)?;
            if !traj.feasible {
                out.push(traj);
            }
        }
        for t in &out {
            self.negatives.push(BufferEntry::new(t.clone(), step))?;
        }
        Ok(out)
    }

    /// One iteration: sample, classify and store, positive-only on-policy
    /// update, then replay update(s).
    pub fn train_step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let mut rng = stream_rng(self.cfg.seed, step, Stream::Sample, 0);
        let sampler = EpsilonMix {
            inner: &self.policy,
            epsilon: self.cfg.epsilon,
        };
        let batch = sample_trajectories(&sampler, &self.env, self.cfg.batch_size, &mut rng)?;
        let mut report = StepReport::default();
        for t in &batch {
            if t.feasible {
                report.n_positive += 1;
                self.positives.push(BufferEntry::new(t.clone(), step))?;
            } else {
                report.n_negative += 1;
                self.negatives.push(BufferEntry::new(t.clone(), step))?;
            }
        }

        let onpolicy: Vec<&Trajectory> = if self.cfg.rs_baseline {
            batch.iter().collect()
        } else {
            batch.iter().filter(|t| t.feasible).collect()
        };
        if !onpolicy.is_empty() {
            debug_assert!(self.cfg.rs_baseline || onpolicy.iter().all(|t| t.feasible));
            let targets = self.targets(&onpolicy, self.cfg.rs_baseline)?;
            let n = onpolicy.len();
            let (loss, _) = self.update(&onpolicy, n, &targets, &[])?;
            report.loss_onpolicy = Some(loss);
        }

        for sub in 0..self.cfg.replay_ratio as u64 {
            if let Some((bal, aux)) = self.replay_update(step, sub, true)? {
                report.loss_replay = Some(bal);
                report.loss_aux = aux;
            }
        }
        self.step += 1;
        Ok(report)
    }

    /// Evaluates the current posterior with the evaluation stream of the
    /// current step.
    pub fn evaluate(&self, n: usize) -> Result<(MetricsRecord, Vec<Trajectory>)> {
        let mut rng = eval_rng(self.cfg.seed, self.step);
        let (mut m, trajs) = evaluate(&self.policy, &self.env, n, self.cfg.beta, &mut rng)?;
        m.step = self.step;
        Ok((m, trajs))
    }

    /// Trains until `cfg.steps`, evaluating every `eval_every` steps and at
    /// the end. `on_record` sees each record as it is produced.
    pub fn run(&mut self, mut on_record: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        self.run_until(self.cfg.steps, &mut on_record)
    }

    /// Like [`Trainer::run`] but stops after step `until`.
    pub fn run_until(&mut self, until: u64, on_record: &mut dyn FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let mut records = Vec::new();
        while self.step < until.min(self.cfg.steps) {
            let report = self.train_step()?;
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == self.cfg.steps {
                let (mut m, _) = self.evaluate(self.cfg.eval_samples)?;
                m.loss_rtb = report.loss_onpolicy;
                m.loss_aux = report.loss_aux;
                on_record(&m);
                records.push(m);
            }
        }
        Ok(records)
    }

    /// Switches to `env` (the same task under a new oracle), reclassifies
    /// both buffers, and runs `steps` replay-only updates. No new samples
    /// are drawn from the environment.
    pub fn adapt(&mut self, env: Env, steps: u64) -> Result<Reclassified> {
        if env.kind() != self.env.kind() || env.n_actions() != self.env.n_actions() {
            return Err(Error::InvalidArgument("adaptation must keep the task's action space".into()));
        }
        let r = reclassify(&mut self.positives, &mut self.negatives, &env)?;
        if self.positives.is_empty() {
            return Err(Error::Empty("positive buffer after reclassification"));
        }
        self.env = env;
        if let (Env::Seq(spec), Some(cfg_oracle)) = (&self.env, Some(&mut self.cfg.seq.oracle)) {
            *cfg_oracle = Some(spec.oracle.to_document());
        }
        for _ in 0..steps {
            self.replay_update(self.step, 0, false)?;
            self.step += 1;
        }
        Ok(r)
    }
}

/// Full training run from a config: the grid uses the uniform prior, the
/// sequence task generates a corpus and pretrains one.
pub fn run_training(cfg: &TrainConfig, on_record: impl FnMut(&MetricsRecord)) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let prior = build_prior(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), prior)?;
    let records = trainer.run(on_record)?;
    Ok((trainer, records))
}

/// The prior a config calls for: uniform on the grid, corpus-pretrained on
/// sequences.
pub fn build_prior(cfg: &TrainConfig) -> Result<PriorPolicy> {
    let env = cfg.build_env()?;
    match &env {
        Env::Grid(_) => Ok(PriorPolicy::Uniform),
        Env::Seq(spec) => {
            let mut rng = corpus_rng(cfg.seed);
            let corpus = generate_corpus(spec, &cfg.pretrain, cfg.seq.max_depth, cfg.pretrain.corpus_size, &mut rng)?;
            pretrain_prior(&env, &corpus, cfg)
        }
    }
}
