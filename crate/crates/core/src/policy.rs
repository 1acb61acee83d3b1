//! Forward policies, the frozen prior, state encoders and trajectory
//! likelihoods.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{build_mlp, masked_log_softmax, Activation, MlpParams, ParamId, ParamSlot, Tape, Tensor, Var};
use crate::envs::{Env, EnvKind, GridSpec, GridState, SeqSpec, SeqState, State, Trajectory};
use crate::error::{Error, Result};

/// One-hot of each coordinate, concatenated: length `2H`.
pub fn encode_grid_state(spec: &GridSpec, s: GridState) -> Vec<f64> {
    let h = spec.side;
    let mut v = vec![0.0; 2 * h];
    v[s.x()] = 1.0;
    v[h + s.y()] = 1.0;
    v
}

pub fn seq_feature_dim(spec: &SeqSpec, window: usize) -> usize {
    window * (spec.n_actions() + 1) + 1
}

/// One-hot window over the last `window` tokens (left-padded with PAD),
/// followed by `len / max_len`.
///
/// Each slot has `|vocab| + 2` entries: the tokens, end-of-sequence (never
/// set for a live prefix) and PAD. Prefixes that agree on their last
/// `window` tokens and length share an encoding.
pub fn encode_seq_state(spec: &SeqSpec, s: &SeqState, window: usize) -> Vec<f64> {
    let slot = spec.n_actions() + 1;
    let pad = slot - 1;
    let mut v = vec![0.0; seq_feature_dim(spec, window)];
    let chars: Vec<char> = s.prefix.chars().collect();
    let n = chars.len();
    for k in 0..window {
        // slot k holds the token at position n - window + k
        let idx = match (n + k).checked_sub(window) {
            Some(p) => spec.vocab.iter().position(|&c| c == chars[p]).unwrap_or(pad),
            None => pad,
        };
        v[k * slot + idx] = 1.0;
    }
    v[window * slot] = n as f64 / spec.max_len as f64;
    v
}

/// An MLP mapping encoded states to action logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mlp: MlpParams,
    pub kind: EnvKind,
    /// Token window for sequence encoders; unused on the grid.
    pub window: usize,
}

impl PolicyNet {
    pub fn new(env: &Env, hidden: &[usize], activation: Activation, window: usize, seed: u64) -> Result<Self> {
        let input = match env {
            Env::Grid(g) => 2 * g.side,
            Env::Seq(s) => {
                if window == 0 {
                    return Err(Error::InvalidArgument("window must be positive".into()));
                }
                seq_feature_dim(s, window)
            }
        };
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(env.n_actions());
        Ok(PolicyNet {
            mlp: build_mlp(&sizes, activation, seed)?,
            kind: env.kind(),
            window,
        })
    }

    fn check_env(&self, env: &Env) -> Result<()> {
        let input = match env {
            Env::Grid(g) => 2 * g.side,
            Env::Seq(s) => seq_feature_dim(s, self.window),
        };
        if env.kind() != self.kind || input != self.mlp.input_dim() || env.n_actions() != self.mlp.output_dim() {
            return Err(Error::Shape(format!("network built for a different {} environment", env.kind())));
        }
        Ok(())
    }

    pub fn encode(&self, env: &Env, s: &State) -> Result<Vec<f64>> {
        match (env, s) {
            (Env::Grid(g), State::Grid { cell, .. }) => Ok(encode_grid_state(g, *cell)),
            (Env::Seq(spec), State::Seq(st)) => Ok(encode_seq_state(spec, st, self.window)),
            _ => Err(Error::InvalidArgument("state does not belong to this environment".into())),
        }
    }

    fn input_matrix(&self, env: &Env, states: &[&State]) -> Result<(Tensor, Vec<bool>)> {
        self.check_env(env)?;
        let d = self.mlp.input_dim();
        let a = env.n_actions();
        let mut x = Vec::with_capacity(states.len() * d);
        let mut mask = Vec::with_capacity(states.len() * a);
        for s in states {
            x.extend(self.encode(env, s)?);
            mask.extend(env.action_mask(s)?);
        }
        Ok((Tensor::matrix(states.len(), d, x)?, mask))
    }

    /// Masked log-probabilities for each state, one row per state.
    pub fn log_probs(&self, env: &Env, states: &[&State]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let (x, mask) = self.input_matrix(env, states)?;
        let logits = self.mlp.predict(&x)?;
        let a = env.n_actions();
        let mut out = Vec::with_capacity(states.len());
        for (i, row) in logits.values().chunks(a).enumerate() {
            let mut lp = vec![0.0; a];
            masked_log_softmax(row, Some(&mask[i * a..(i + 1) * a]), &mut lp)?;
            out.push(lp);
        }
        Ok(out)
    }

    /// Per-trajectory `log P_F(τ)` without recording gradients.
    pub fn trajectory_log_probs(&self, env: &Env, trajs: &[&Trajectory]) -> Result<Vec<f64>> {
        let layout = StepLayout::new(trajs)?;
        let lp = self.log_probs(env, &layout.states)?;
        let mut out = vec![0.0; trajs.len()];
        for &(row, action, traj) in &layout.picks {
            let v = lp[row][action];
            if v == f64::NEG_INFINITY {
                return Err(invalid_step(layout.states[row], action));
            }
            out[traj] += v;
        }
        Ok(out)
    }

    /// Records per-trajectory `log P_F(τ)` on `tape` as a `T×1` column.
    pub fn trajectory_log_probs_on(&self, env: &Env, trajs: &[&Trajectory], tape: &mut Tape, trainable: bool) -> Result<Var> {
        let layout = StepLayout::new(trajs)?;
        let (x, mask) = self.input_matrix(env, &layout.states)?;
        let a = env.n_actions();
        let xv = tape.constant(x)?;
        let logits = self.mlp.forward_on(tape, xv, 0, trainable)?;
        let mask: Arc<[bool]> = mask.into();
        let ls = tape.log_softmax(logits, Some(mask.clone()))?;
        let mut flat = Vec::with_capacity(layout.picks.len());
        let mut groups = Vec::with_capacity(layout.picks.len());
        for &(row, action, traj) in &layout.picks {
            if !mask[row * a + action] {
                return Err(invalid_step(layout.states[row], action));
            }
            flat.push(row * a + action);
            groups.push(traj);
        }
        let k = flat.len();
        let picked = tape.gather(ls, flat, k, 1)?;
        tape.segment_sum(picked, groups, trajs.len())
    }
}

fn invalid_step(s: &State, action: usize) -> Error {
    Error::InvalidAction {
        state: format!("{s:?}"),
        action: action.to_string(),
    }
}

/// Distinct non-terminal states of a batch, in first-seen order, and the
/// `(state row, action, trajectory)` triple of every step.
struct StepLayout<'a> {
    states: Vec<&'a State>,
    picks: Vec<(usize, usize, usize)>,
}

impl<'a> StepLayout<'a> {
    fn new(trajs: &[&'a Trajectory]) -> Result<Self> {
        let mut index: HashMap<&State, usize> = HashMap::new();
        let mut states = Vec::new();
        let mut picks = Vec::new();
        for (t, traj) in trajs.iter().enumerate() {
            if traj.states.len() != traj.actions.len() + 1 {
                return Err(Error::InvalidArgument("trajectory needs |states| = |actions| + 1".into()));
            }
            for (s, &a) in traj.states.iter().zip(&traj.actions) {
                let row = *index.entry(s).or_insert_with(|| {
                    states.push(s);
                    states.len() - 1
                });
                picks.push((row, a, t));
            }
        }
        Ok(StepLayout { states, picks })
    }
}

/// Anything that yields masked action log-probabilities for a batch of
/// states.
pub trait ActionModel {
    fn log_probs(&self, env: &Env, states: &[&State]) -> Result<Vec<Vec<f64>>>;
}

/// Trainable forward policy `P_F(·; θ)` with the scalar `log Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: PolicyNet,
    log_z: Tensor,
}

impl Policy {
    pub fn new(net: PolicyNet) -> Self {
        Policy {
            net,
            log_z: Tensor::scalar(0.0),
        }
    }

    /// Warm start: the posterior copies the prior. For the analytic uniform
    /// prior, a fresh network with a zeroed output layer is used, which is
    /// uniform over valid actions. `log Z` starts at 0.
    pub fn warm_start(prior: &PriorPolicy, env: &Env, hidden: &[usize], activation: Activation, window: usize, seed: u64) -> Result<Self> {
        let net = match prior {
            PriorPolicy::Network(net) => net.clone(),
            PriorPolicy::Uniform => {
                let mut net = PolicyNet::new(env, hidden, activation, window, seed)?;
                net.mlp.zero_output_layer();
                net
            }
        };
        Ok(Policy::new(net))
    }

    pub fn log_z(&self) -> f64 {
        self.log_z.values()[0]
    }

    pub fn set_log_z(&mut self, v: f64) {
        self.log_z = Tensor::scalar(v);
    }

    pub fn log_z_id(&self) -> ParamId {
        ParamId(self.net.mlp.tensors().len())
    }

    /// Records `log Z` as a 1×1 parameter leaf.
    pub fn log_z_on(&self, tape: &mut Tape) -> Result<Var> {
        tape.param(self.log_z_id(), &self.log_z)
    }

    /// Adam slots: network tensors at `lr`, `log Z` at `lr_log_z`.
    pub fn param_slots(&mut self, lr: f64, lr_log_z: f64) -> Vec<ParamSlot<'_>> {
        let z_id = self.log_z_id();
        let mut slots: Vec<ParamSlot<'_>> = self
            .net
            .mlp
            .tensors_mut()
            .iter_mut()
            .enumerate()
            .map(|(i, t)| ParamSlot {
                id: ParamId(i),
                tensor: t,
                lr,
            })
            .collect();
        slots.push(ParamSlot {
            id: z_id,
            tensor: &mut self.log_z,
            lr: lr_log_z,
        });
        slots
    }

    pub fn action_log_probs(&self, env: &Env, s: &State) -> Result<Vec<f64>> {
        Ok(self.net.log_probs(env, &[s])?.remove(0))
    }

    pub fn trajectory_log_pf(&self, env: &Env, traj: &Trajectory) -> Result<f64> {
        Ok(self.net.trajectory_log_probs(env, &[traj])?[0])
    }
}

impl ActionModel for Policy {
    fn log_probs(&self, env: &Env, states: &[&State]) -> Result<Vec<Vec<f64>>> {
        self.net.log_probs(env, states)
    }
}

/// The frozen prior `P_F^prior`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PriorPolicy {
    /// Uniform over valid actions.
    Uniform,
    Network(PolicyNet),
}

impl PriorPolicy {
    pub fn trajectory_log_probs(&self, env: &Env, trajs: &[&Trajectory]) -> Result<Vec<f64>> {
        match self {
            PriorPolicy::Network(net) => net.trajectory_log_probs(env, trajs),
            PriorPolicy::Uniform => trajs
                .iter()
                .map(|t| {
                    let mut lp = 0.0;
                    for (s, &a) in t.states.iter().zip(&t.actions) {
                        let mask = env.action_mask(s)?;
                        if !mask.get(a).copied().unwrap_or(false) {
                            return Err(invalid_step(s, a));
                        }
                        let n = mask.iter().filter(|&&m| m).count();
                        lp += -(n as f64).ln();
                    }
                    Ok(lp)
                })
                .collect(),
        }
    }

    pub fn trajectory_log_pf(&self, env: &Env, traj: &Trajectory) -> Result<f64> {
        Ok(self.trajectory_log_probs(env, &[traj])?[0])
    }
}

impl ActionModel for PriorPolicy {
    fn log_probs(&self, env: &Env, states: &[&State]) -> Result<Vec<Vec<f64>>> {
        match self {
            PriorPolicy::Network(net) => net.log_probs(env, states),
            PriorPolicy::Uniform => states
                .iter()
                .map(|s| {
                    let mask = env.action_mask(s)?;
                    let n = mask.iter().filter(|&&m| m).count() as f64;
                    Ok(mask.iter().map(|&m| if m { -n.ln() } else { f64::NEG_INFINITY }).collect())
                })
                .collect(),
        }
    }
}

/// Mixes a model with the uniform distribution over valid actions:
/// `(1 − ε)·p + ε/|valid|`. Used as an exploratory sampler.
pub struct EpsilonMix<'a, M: ?Sized> {
    pub inner: &'a M,
    pub epsilon: f64,
}

impl<M: ActionModel + ?Sized> ActionModel for EpsilonMix<'_, M> {
    fn log_probs(&self, env: &Env, states: &[&State]) -> Result<Vec<Vec<f64>>> {
        let mut lp = self.inner.log_probs(env, states)?;
        if self.epsilon == 0.0 {
            return Ok(lp);
        }
        for row in &mut lp {
            let n = row.iter().filter(|v| **v > f64::NEG_INFINITY).count() as f64;
            for v in row.iter_mut().filter(|v| **v > f64::NEG_INFINITY) {
                *v = ((1.0 - self.epsilon) * v.exp() + self.epsilon / n).ln();
            }
        }
        Ok(lp)
    }
}

/// Fixed backward policy: deterministic for sequences (log P_B = 0); on the
/// grid, undoing stop is deterministic and every other step picks a parent
/// uniformly.
pub fn trajectory_log_pb(env: &Env, traj: &Trajectory) -> f64 {
    match env {
        Env::Seq(_) => 0.0,
        Env::Grid(g) => traj
            .states
            .iter()
            .skip(1)
            .filter_map(|s| match s {
                State::Grid { cell, terminal: false } => Some(g.parents(*cell).len()),
                _ => None,
            })
            .map(|n| -(n as f64).ln())
            .sum(),
    }
}

/// Samples `n` trajectories. At every step the still-running trajectories,
/// in index order, each consume one uniform draw which selects an action by
/// inverse CDF over the masked probabilities.
pub fn sample_trajectories<M: ActionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    env: &Env,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let mut states: Vec<Vec<State>> = vec![vec![env.initial_state()]; n];
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).collect();
    while !active.is_empty() {
        // dedup identical current states
        let mut index: HashMap<&State, usize> = HashMap::new();
        let mut uniq: Vec<&State> = Vec::new();
        let rows: Vec<usize> = active
            .iter()
            .map(|&i| {
                let s = states[i].last().expect("non-empty");
                *index.entry(s).or_insert_with(|| {
                    uniq.push(s);
                    uniq.len() - 1
                })
            })
            .collect();
        let lp = model.log_probs(env, &uniq)?;
        let mut next = Vec::with_capacity(active.len());
        for (&i, &row) in active.iter().zip(&rows) {
            let a = draw_action(&lp[row], rng.gen::<f64>());
            next.push((i, a));
        }
        let mut still = Vec::with_capacity(active.len());
        for (i, a) in next {
            let s = env.step(states[i].last().expect("non-empty"), a)?;
            let done = s.is_terminal();
            states[i].push(s);
            actions[i].push(a);
            if !done {
                still.push(i);
            }
        }
        active = still;
    }
    states
        .into_iter()
        .zip(actions)
        .map(|(st, ac)| {
            let terminal = env
                .terminal_object(st.last().expect("non-empty"))
                .expect("sampling runs to termination");
            env.finish(st, ac, terminal)
        })
        .collect()
}

pub fn sample_trajectory<M: ActionModel + ?Sized, R: Rng + ?Sized>(model: &M, env: &Env, rng: &mut R) -> Result<Trajectory> {
    Ok(sample_trajectories(model, env, 1, rng)?.remove(0))
}

fn draw_action(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        acc += lp.exp();
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

/// Exact terminal distribution of a grid model, by forward propagation of
/// state probabilities over the grid DAG. Indexed by
/// [`GridSpec::cell_index`].
pub fn grid_terminal_distribution<M: ActionModel + ?Sized>(model: &M, env: &Env) -> Result<Vec<f64>> {
    let g = env
        .grid()
        .ok_or_else(|| Error::InvalidArgument("grid_terminal_distribution needs a grid".into()))?;
    let states: Vec<State> = g.cells().map(|cell| State::Grid { cell, terminal: false }).collect();
    let refs: Vec<&State> = states.iter().collect();
    let lp = model.log_probs(env, &refs)?;
    let h = g.side;
    let mut reach = vec![0.0; h * h];
    let mut out = vec![0.0; h * h];
    reach[0] = 1.0;
    // cells in order of x + y so parents come first
    for d in 0..(2 * h - 1) {
        for x in 0..h {
            let Some(y) = d.checked_sub(x).filter(|&y| y < h) else { continue };
            let i = g.cell_index(GridState::new(x, y));
            let p = reach[i];
            if p == 0.0 {
                continue;
            }
            out[i] += p * lp[i][2].exp();
            if x + 1 < h {
                reach[i + 1] += p * lp[i][0].exp();
            }
            if y + 1 < h {
                reach[i + h] += p * lp[i][1].exp();
            }
        }
    }
    Ok(out)
}
