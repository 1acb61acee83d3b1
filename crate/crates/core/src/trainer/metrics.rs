use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{enumerate_grid_target, Env, GridSpec, TerminalObject, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{sample_trajectories, ActionModel};

/// Number of best unique positives averaged for `pos_top100`.
pub const TOP_K: usize = 100;
/// Sequence diversity uses the first this-many samples.
pub const DIVERSITY_SUBSET: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub positive_ratio: f64,
    /// Mean raw reward over all samples.
    pub mean_reward: f64,
    /// Mean raw reward of the top unique feasible samples; `None` when no
    /// sample is feasible.
    pub pos_top100: Option<f64>,
    pub diversity: f64,
    pub n_unique: usize,
    /// L1 distance between the empirical cell distribution and the exact
    /// constrained target (grid only).
    pub grid_l1: Option<f64>,
    pub loss_rtb: Option<f64>,
    pub loss_aux: Option<f64>,
}

/// Samples `n` trajectories from `model` and summarizes them.
pub fn evaluate<M: ActionModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    env: &Env,
    n: usize,
    beta: f64,
    rng: &mut R,
) -> Result<(MetricsRecord, Vec<Trajectory>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one sample".into()));
    }
    let trajs = sample_trajectories(model, env, n, rng)?;
    let record = summarize(env, &trajs, beta)?;
    Ok((record, trajs))
}

/// Metrics of a sample set. Feasibility is taken from the trajectories, so
/// the caller controls which oracle labelled them.
pub fn summarize(env: &Env, trajs: &[Trajectory], beta: f64) -> Result<MetricsRecord> {
    let n = trajs.len();
    if n == 0 {
        return Err(Error::Empty("evaluation sample"));
    }
    let positive_ratio = trajs.iter().filter(|t| t.feasible).count() as f64 / n as f64;
    let mean_reward = trajs.iter().map(|t| t.reward_raw).sum::<f64>() / n as f64;

    let mut unique: BTreeMap<&TerminalObject, &Trajectory> = BTreeMap::new();
    for t in trajs {
        unique.entry(&t.terminal).or_insert(t);
    }
    let mut pos_rewards: Vec<f64> = unique.values().filter(|t| t.feasible).map(|t| t.reward_raw).collect();
    pos_rewards.sort_by(|a, b| b.total_cmp(a));
    pos_rewards.truncate(TOP_K);
    let pos_top100 = (!pos_rewards.is_empty()).then(|| pos_rewards.iter().sum::<f64>() / pos_rewards.len() as f64);

    let (diversity, grid_l1) = match env {
        Env::Seq(_) => (sequence_diversity(trajs), None),
        Env::Grid(g) => {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for t in trajs {
                if let TerminalObject::Cell(c) = &t.terminal {
                    *counts.entry(g.cell_index(*c)).or_default() += 1;
                }
            }
            let target = enumerate_grid_target(g, beta, true)?;
            let l1 = target
                .iter()
                .enumerate()
                .map(|(i, p)| (counts.get(&i).copied().unwrap_or(0) as f64 / n as f64 - p).abs())
                .sum();
            (collision_diversity(counts.values().copied(), n), Some(l1))
        }
    };
    Ok(MetricsRecord {
        step: 0,
        positive_ratio,
        mean_reward,
        pos_top100,
        diversity,
        n_unique: unique.len(),
        grid_l1,
        loss_rtb: None,
        loss_aux: None,
    })
}

/// Probability mass of a cell distribution (indexed like
/// [`crate::envs::GridSpec::cell_index`]) split by region.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMass {
    pub infeasible: f64,
    /// Corner mode regions in the order low-low, high-low, low-high,
    /// high-high (x side first).
    pub modes: [f64; 4],
}

pub fn grid_mass(g: &GridSpec, probs: &[f64]) -> Result<GridMass> {
    if probs.len() != g.n_cells() {
        return Err(Error::Shape(format!("expected {} cell masses, got {}", g.n_cells(), probs.len())));
    }
    let mut m = GridMass::default();
    for c in g.cells() {
        let p = probs[g.cell_index(c)];
        if !g.feasible(c) {
            m.infeasible += p;
        }
        if let Some((hx, hy)) = g.mode_region(c) {
            m.modes[hx as usize + 2 * hy as usize] += p;
        }
    }
    Ok(m)
}

/// Empirical cell frequencies of grid trajectories.
pub fn grid_histogram(g: &GridSpec, trajs: &[Trajectory]) -> Vec<f64> {
    let mut h = vec![0.0; g.n_cells()];
    for t in trajs {
        if let TerminalObject::Cell(c) = &t.terminal {
            h[g.cell_index(*c)] += 1.0;
        }
    }
    let n = trajs.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Mean pairwise normalized edit distance over the first
/// [`DIVERSITY_SUBSET`] samples; 0 for a single sample.
fn sequence_diversity(trajs: &[Trajectory]) -> f64 {
    let items: Vec<&str> = trajs
        .iter()
        .take(DIVERSITY_SUBSET)
        .filter_map(|t| match &t.terminal {
            TerminalObject::Seq(s) => Some(s.as_str()),
            TerminalObject::Cell(_) => None,
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            total += 1.0 - strsim::normalized_levenshtein(items[i], items[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// One minus the fraction of sample pairs landing on the same cell.
fn collision_diversity(counts: impl Iterator<Item = usize>, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let same: usize = counts.map(|c| c * (c - 1) / 2).sum();
    1.0 - same as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{InfeasibleRegion, SeqSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_infeasible_has_no_top_k() {
        let env = Env::Seq(SeqSpec::default_spec());
        let trajs: Vec<Trajectory> = ["(", "((", ")"].iter().map(|s| env.seq_trajectory(s).unwrap()).collect();
        let m = summarize(&env, &trajs, 1.0).unwrap();
        assert_eq!(m.positive_ratio, 0.0);
        assert_eq!(m.pos_top100, None);
        assert_eq!(m.n_unique, 3);
        assert_eq!(m.grid_l1, None);
    }

    #[test]
    fn single_sample_has_zero_diversity() {
        let env = Env::Seq(SeqSpec::default_spec());
        let m = summarize(&env, &[env.seq_trajectory("ab").unwrap()], 1.0).unwrap();
        assert_eq!(m.diversity, 0.0);
        let g = Env::Grid(GridSpec::default());
        let m = summarize(&g, &[g.trajectory_from_actions(&[2]).unwrap()], 1.0).unwrap();
        assert_eq!(m.diversity, 0.0);
    }

    #[test]
    fn seq_metrics_by_hand() {
        let env = Env::Seq(SeqSpec::default_spec());
        let trajs: Vec<Trajectory> = ["aba", "aba", "(b", "bb"].iter().map(|s| env.seq_trajectory(s).unwrap()).collect();
        let m = summarize(&env, &trajs, 1.0).unwrap();
        assert_eq!(m.positive_ratio, 0.75);
        assert!((m.mean_reward - (1.1 + 1.1 + 0.1 + 0.1) / 4.0).abs() < 1e-12);
        // unique feasible: aba (1.1), bb (0.1)
        assert!((m.pos_top100.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(m.n_unique, 3);
        // pairs: (aba,aba)=0, (aba,(b)=2/3 twice, (aba,bb)=2/3 twice, ((b,bb)=1/2
        let expect = (0.0 + 4.0 * 2.0 / 3.0 + 0.5) / 6.0;
        assert!((m.diversity - expect).abs() < 1e-12);
    }

    #[test]
    fn grid_diversity_and_l1() {
        let env = Env::Grid(GridSpec {
            side: 4,
            infeasible: InfeasibleRegion::None,
            ..GridSpec::default()
        });
        let a = env.trajectory_from_actions(&[2]).unwrap();
        let b = env.trajectory_from_actions(&[0, 2]).unwrap();
        let m = summarize(&env, &[a.clone(), a, b], 1.0).unwrap();
        assert!((m.diversity - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert!(m.grid_l1.unwrap() > 0.0 && m.grid_l1.unwrap() <= 2.0);
    }

    #[test]
    fn region_masses_of_target() {
        let g = GridSpec::default();
        let p = enumerate_grid_target(&g, 1.0, true).unwrap();
        let m = grid_mass(&g, &p).unwrap();
        assert_eq!(m.infeasible, 0.0);
        assert_eq!(m.modes[2], 0.0);
        for i in [0, 1, 3] {
            assert!((m.modes[i] - m.modes[0]).abs() < 1e-12);
        }
        let u = enumerate_grid_target(&g, 1.0, false).unwrap();
        let m = grid_mass(&g, &u).unwrap();
        assert!((m.modes[2] - m.modes[0]).abs() < 1e-12);
        assert!(m.infeasible > m.modes[2]);
    }

    /// Sampling from the exact target itself, the L1 error shrinks like
    /// `1/sqrt(n)`.
    #[test]
    fn l1_of_exact_sampler_shrinks() {
        let g = GridSpec::default();
        let env = Env::Grid(g.clone());
        let target = enumerate_grid_target(&g, 1.0, true).unwrap();
        let dist = rand::distributions::WeightedIndex::new(&target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l1_at = |n: usize, rng: &mut ChaCha8Rng| {
            let trajs: Vec<Trajectory> = (0..n)
                .map(|_| {
                    use rand::distributions::Distribution;
                    let c = g.cell_at(dist.sample(rng));
                    let mut acts = vec![0; c.x()];
                    acts.extend(vec![1; c.y()]);
                    acts.push(2);
                    env.trajectory_from_actions(&acts).unwrap()
                })
                .collect();
            summarize(&env, &trajs, 1.0).unwrap().grid_l1.unwrap()
        };
        let small = l1_at(1_000, &mut rng);
        let large = l1_at(16_000, &mut rng);
        // a 16x increase in n should cut the error roughly 4x
        assert!(large < small / 2.5, "{small} -> {large}");
    }
}
