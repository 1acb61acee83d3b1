use rand::seq::SliceRandom;
use rand::Rng;

use super::config::{PretrainConfig, TrainConfig};
use super::{stream_rng, Stream};
use crate::autodiff::{adam_step, AdamHyper, AdamState, ParamId, ParamSlot, Tape};
use crate::envs::{Env, SeqSpec, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{PolicyNet, PriorPolicy};

/// Samples `n` strings accepted by the task's oracle from a stochastic
/// grammar over letters and balanced parentheses.
///
/// Per string: draw a target length `L` uniformly from
/// `[min_len, max_len]`, then emit tokens left to right while fewer than
/// `L` are present. When the open depth equals the remaining room a `)` is
/// forced. Otherwise one uniform draw decides whether the whole motif is
/// emitted (probability `motif_rate`, only if it fits before the required
/// closers); if not, a second draw picks `(` with probability `open_rate`
/// (when depth < `max_depth` and two more tokens fit), `)` with
/// probability `close_rate` (when depth > 0), and otherwise a letter
/// chosen uniformly. Strings the oracle rejects are redrawn.
pub fn generate_corpus<R: Rng + ?Sized>(
    spec: &SeqSpec,
    cfg: &PretrainConfig,
    max_depth: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let max_len = if cfg.max_len == 0 {
        spec.max_len
    } else {
        cfg.max_len.min(spec.max_len)
    };
    let min_len = cfg.min_len.max(1);
    if min_len > max_len {
        return Err(Error::Config(format!("pretrain min_len {min_len} exceeds max_len {max_len}")));
    }
    let has_parens = spec.vocab.contains(&'(') && spec.vocab.contains(&')');
    let letters: Vec<char> = spec.vocab.iter().copied().filter(|c| *c != '(' && *c != ')').collect();
    if letters.is_empty() {
        return Err(Error::Config("vocabulary has no letters".into()));
    }
    let motif: Vec<char> = spec.motif.chars().collect();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * n.max(1) {
            return Err(Error::Config("corpus generator cannot satisfy the oracle".into()));
        }
        let target = rng.gen_range(min_len..=max_len);
        let mut s: Vec<char> = Vec::with_capacity(target);
        let mut depth = 0usize;
        while s.len() < target {
            let room = target - s.len();
            if depth >= room {
                s.push(')');
                depth -= 1;
                continue;
            }
            if rng.gen::<f64>() < cfg.motif_rate && motif.len() + depth <= room {
                s.extend_from_slice(&motif);
                continue;
            }
            let u = rng.gen::<f64>();
            if has_parens && depth < max_depth && room >= depth + 2 && u < cfg.open_rate {
                s.push('(');
                depth += 1;
            } else if has_parens && depth > 0 && u < cfg.open_rate + cfg.close_rate {
                s.push(')');
                depth -= 1;
            } else {
                s.push(letters[rng.gen_range(0..letters.len())]);
            }
        }
        let s: String = s.into_iter().collect();
        if spec.feasible(&s)? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Fits the sequence prior by teacher-forced next-token cross-entropy over
/// the corpus (each string followed by end-of-sequence). On the grid the
/// analytic uniform prior is returned.
pub fn pretrain_prior(env: &Env, corpus: &[String], cfg: &TrainConfig) -> Result<PriorPolicy> {
    let Env::Seq(spec) = env else {
        return Ok(PriorPolicy::Uniform);
    };
    if corpus.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut trajs = Vec::with_capacity(corpus.len());
    for s in corpus {
        for c in s.chars() {
            spec.token_index(c)?;
        }
        let t = env.seq_trajectory(s)?;
        if !t.feasible {
            return Err(Error::Infeasibility(format!("corpus string {s:?} is infeasible")));
        }
        trajs.push(t);
    }
    let mut net = PolicyNet::new(env, &cfg.hidden, cfg.activation, cfg.window, cfg.seed)?;
    let p = &cfg.pretrain;
    let mut adam = AdamState::new();
    let hyper = AdamHyper::default();
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    for epoch in 0..p.epochs {
        let mut rng = stream_rng(cfg.seed, epoch as u64, Stream::Pretrain, 0);
        order.shuffle(&mut rng);
        for chunk in order.chunks(p.batch_size) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &trajs[i]).collect();
            cross_entropy_step(env, &mut net, &batch, p.lr, &mut adam, &hyper)?;
        }
    }
    Ok(PriorPolicy::Network(net))
}

/// One Adam step on the mean per-token negative log-likelihood; returns the
/// loss before the step.
fn cross_entropy_step(
    env: &Env,
    net: &mut PolicyNet,
    batch: &[&Trajectory],
    lr: f64,
    adam: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<f64> {
    let tokens: usize = batch.iter().map(|t| t.len()).sum();
    let mut tape = Tape::new();
    let lp = net.trajectory_log_probs_on(env, batch, &mut tape, true)?;
    let total = tape.sum(lp);
    let loss = tape.scale(total, -1.0 / tokens as f64);
    let value = tape.value(loss).values()[0];
    let grads = tape.backprop_scalar(loss)?;
    let mut slots: Vec<ParamSlot<'_>> = net
        .mlp
        .tensors_mut()
        .iter_mut()
        .enumerate()
        .map(|(i, tensor)| ParamSlot {
            id: ParamId(i),
            tensor,
            lr,
        })
        .collect();
    adam_step(&mut slots, &grads, adam, hyper)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, State};
    use crate::policy::{sample_trajectories, ActionModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_cfg() -> TrainConfig {
        let mut c = TrainConfig::defaults(EnvKind::Seq);
        c.hidden = vec![32];
        c.window = 4;
        c
    }

    #[test]
    fn corpus_strings_are_feasible() {
        let spec = SeqSpec::default_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus = generate_corpus(&spec, &PretrainConfig::default(), 4, 500, &mut rng).unwrap();
        assert_eq!(corpus.len(), 500);
        for s in &corpus {
            assert!(spec.feasible(s).unwrap(), "{s}");
        }
        assert!(corpus.iter().any(|s| s.contains('(')));
    }

    #[test]
    fn zero_motif_rate_gives_floor_reward() {
        let spec = SeqSpec::default_spec();
        let cfg = PretrainConfig {
            motif_rate: 0.0,
            ..PretrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus = generate_corpus(&spec, &cfg, 4, 500, &mut rng).unwrap();
        let mean: f64 = corpus.iter().map(|s| spec.reward(s)).sum::<f64>() / 500.0;
        // letters are uniform, so the motif still appears by chance
        let least = corpus.iter().map(|s| spec.reward(s)).fold(f64::INFINITY, f64::min);
        assert_eq!(least, 0.1);
        assert!(mean < 1.0, "{mean}");
        let cfg_hi = PretrainConfig {
            motif_rate: 0.3,
            ..PretrainConfig::default()
        };
        let hi = generate_corpus(&spec, &cfg_hi, 4, 500, &mut rng).unwrap();
        let mean_hi: f64 = hi.iter().map(|s| spec.reward(s)).sum::<f64>() / 500.0;
        assert!(mean_hi > mean);
    }

    #[test]
    fn seeded_corpus_is_pinned() {
        let spec = SeqSpec::default_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let corpus = generate_corpus(&spec, &PretrainConfig::default(), 4, 3, &mut rng).unwrap();
        assert_eq!(corpus, PINNED_CORPUS);
    }

    const PINNED_CORPUS: [&str; 3] = ["baab()a", "abb()", "aabab(bb())bb"];

    #[test]
    fn one_string_corpus_is_learned() {
        let env = Env::Seq(SeqSpec::default_spec());
        let mut cfg = seq_cfg();
        cfg.pretrain.epochs = 60;
        cfg.pretrain.batch_size = 4;
        let corpus = vec!["a".to_string(); 64];
        let prior = pretrain_prior(&env, &corpus, &cfg).unwrap();
        let lp = prior.log_probs(&env, &[&env.initial_state()]).unwrap();
        assert!(lp[0][0].exp() > 0.95, "{}", lp[0][0].exp());
    }

    #[test]
    fn pretraining_rejects_bad_corpora() {
        let env = Env::Seq(SeqSpec::default_spec());
        let cfg = seq_cfg();
        assert!(pretrain_prior(&env, &[], &cfg).is_err());
        assert!(matches!(pretrain_prior(&env, &["ax".into()], &cfg), Err(Error::OutOfAlphabet('x'))));
        assert!(matches!(pretrain_prior(&env, &["(a".into()], &cfg), Err(Error::Infeasibility(_))));
    }

    #[test]
    fn grid_prior_is_uniform() {
        let env = Env::Grid(Default::default());
        let prior = pretrain_prior(&env, &[], &TrainConfig::defaults(EnvKind::Grid)).unwrap();
        assert_eq!(prior, PriorPolicy::Uniform);
        let s = State::Grid {
            cell: crate::envs::GridState::new(3, 4),
            terminal: false,
        };
        let lp = prior.log_probs(&env, &[&s]).unwrap();
        assert!((lp[0][1] + 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn prior_learns_feasibility() {
        let cfg = TrainConfig::defaults(EnvKind::Seq);
        let env = cfg.build_env().unwrap();
        let prior = super::super::build_prior(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = sample_trajectories(&prior, &env, 1000, &mut rng).unwrap();
        let ratio = samples.iter().filter(|t| t.feasible).count() as f64 / 1000.0;
        assert!(ratio >= 0.5, "prior feasibility {ratio}");
    }
}
