//! Replay buffers: a reward-prioritized buffer of feasible trajectories and
//! a FIFO buffer of infeasible ones.

use std::collections::{HashSet, VecDeque};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Env, TerminalObject, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub trajectory: Trajectory,
    pub reward_raw: f64,
    pub insertion_step: u64,
}

impl BufferEntry {
    pub fn new(trajectory: Trajectory, insertion_step: u64) -> Self {
        BufferEntry {
            reward_raw: trajectory.reward_raw,
            trajectory,
            insertion_step,
        }
    }
}

/// How the positive buffer weights entries when sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prioritization {
    /// Weight equal to the reward rank: the lowest reward gets 1, the
    /// highest gets `n`.
    #[default]
    Rank,
    /// Weight `R^β`.
    Proportional,
}

/// Feasible trajectories, deduplicated by terminal object, evicting the
/// lowest reward when full.
#[derive(Clone, Debug)]
pub struct PositiveBuffer {
    capacity: usize,
    /// Ascending by `(reward, arrival)`.
    entries: Vec<(BufferEntry, u64)>,
    keys: HashSet<TerminalObject>,
    arrivals: u64,
}

impl PositiveBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(PositiveBuffer {
            capacity,
            entries: Vec::new(),
            keys: HashSet::new(),
            arrivals: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, x: &TerminalObject) -> bool {
        self.keys.contains(x)
    }

    /// Entries in ascending reward order.
    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter().map(|(e, _)| e)
    }

    /// Entries in insertion order. Re-pushing them in this order into an
    /// empty buffer of the same capacity reproduces the buffer exactly.
    pub fn iter_by_arrival(&self) -> impl Iterator<Item = &BufferEntry> {
        let mut order: Vec<&(BufferEntry, u64)> = self.entries.iter().collect();
        order.sort_by_key(|(_, a)| *a);
        order.into_iter().map(|(e, _)| e)
    }

    pub fn min_reward(&self) -> Option<f64> {
        self.entries.first().map(|(e, _)| e.reward_raw)
    }

    pub fn max_reward(&self) -> Option<f64> {
        self.entries.last().map(|(e, _)| e.reward_raw)
    }

    /// Inserts a feasible entry. Duplicates are rejected; when full, the
    /// entry replaces the lowest-reward one only if its reward is higher.
    pub fn push(&mut self, entry: BufferEntry) -> Result<bool> {
        if !entry.trajectory.feasible {
            return Err(Error::Infeasibility(format!(
                "positive buffer rejects infeasible {}",
                entry.trajectory.terminal
            )));
        }
        if !(entry.reward_raw >= 0.0) || !entry.reward_raw.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reward {} must be finite and >= 0",
                entry.reward_raw
            )));
        }
        if self.keys.contains(&entry.trajectory.terminal) {
            return Ok(false);
        }
        if self.entries.len() >= self.capacity {
            if entry.reward_raw <= self.entries[0].0.reward_raw {
                return Ok(false);
            }
            let (evicted, _) = self.entries.remove(0);
            self.keys.remove(&evicted.trajectory.terminal);
        }
        let arrival = self.arrivals;
        self.arrivals += 1;
        let at = self
            .entries
            .partition_point(|(e, a)| (e.reward_raw, *a) < (entry.reward_raw, arrival));
        self.keys.insert(entry.trajectory.terminal.clone());
        self.entries.insert(at, (entry, arrival));
        Ok(true)
    }

    /// Draws `n` entries with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, scheme: Prioritization, beta: f64, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("positive buffer"));
        }
        match scheme {
            Prioritization::Rank => {
                let m = self.entries.len() as u64;
                let total = m * (m + 1) / 2;
                Ok((0..n)
                    .map(|_| {
                        let u = rng.gen_range(0..total);
                        &self.entries[rank_from_draw(u)].0
                    })
                    .collect())
            }
            Prioritization::Proportional => {
                let weights: Vec<f64> = self.entries.iter().map(|(e, _)| e.reward_raw.powf(beta)).collect();
                let dist =
                    WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("proportional sampling weights: {e}")))?;
                Ok((0..n).map(|_| &self.entries[dist.sample(rng)].0).collect())
            }
        }
    }

    /// Removes and returns every entry for which `drop` is true.
    fn extract(&mut self, mut drop: impl FnMut(&BufferEntry) -> bool) -> Vec<BufferEntry> {
        let mut out = Vec::new();
        let mut keep = Vec::with_capacity(self.entries.len());
        for (e, a) in self.entries.drain(..) {
            if drop(&e) {
                self.keys.remove(&e.trajectory.terminal);
                out.push(e);
            } else {
                keep.push((e, a));
            }
        }
        self.entries = keep;
        out
    }

    /// Structural invariants; used by tests.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(format!("positive buffer: {m}")));
        if self.entries.len() > self.capacity {
            return fail("over capacity");
        }
        if self.keys.len() != self.entries.len() {
            return fail("key set out of sync");
        }
        for w in self.entries.windows(2) {
            if (w[0].0.reward_raw, w[0].1) >= (w[1].0.reward_raw, w[1].1) {
                return fail("not sorted");
            }
        }
        for (e, _) in &self.entries {
            if !e.trajectory.feasible {
                return fail("infeasible entry");
            }
            if !self.keys.contains(&e.trajectory.terminal) {
                return fail("missing key");
            }
        }
        Ok(())
    }
}

/// Index `k` with `k(k+1)/2 <= u < (k+1)(k+2)/2`: the entry at ascending
/// position `k` owns `k + 1` of the draws.
fn rank_from_draw(u: u64) -> usize {
    let mut k = (((8.0 * u as f64 + 1.0).sqrt() - 1.0) / 2.0) as u64;
    while k * (k + 1) / 2 > u {
        k -= 1;
    }
    while (k + 1) * (k + 2) / 2 <= u {
        k += 1;
    }
    k as usize
}

/// Infeasible trajectories in arrival order; the oldest is dropped when
/// full. Duplicates are kept.
#[derive(Clone, Debug)]
pub struct NegativeBuffer {
    capacity: usize,
    entries: VecDeque<BufferEntry>,
}

impl NegativeBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("buffer capacity must be positive".into()));
        }
        Ok(NegativeBuffer {
            capacity,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    /// Appends; returns the evicted entry when the buffer was full.
    pub fn push(&mut self, entry: BufferEntry) -> Result<Option<BufferEntry>> {
        if entry.trajectory.feasible {
            return Err(Error::Infeasibility(format!(
                "negative buffer rejects feasible {}",
                entry.trajectory.terminal
            )));
        }
        let evicted = if self.entries.len() >= self.capacity {
            self.entries.pop_front()
        } else {
            None
        };
        self.entries.push_back(entry);
        Ok(evicted)
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::Empty("negative buffer"));
        }
        Ok((0..n).map(|_| &self.entries[rng.gen_range(0..self.entries.len())]).collect())
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::InvalidArgument("negative buffer over capacity".into()));
        }
        if self.entries.iter().any(|e| e.trajectory.feasible) {
            return Err(Error::InvalidArgument("negative buffer holds a feasible entry".into()));
        }
        Ok(())
    }
}

/// Outcome of [`reclassify`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Reclassified {
    /// Positives that became infeasible and were queued as negatives.
    pub moved_to_neg: usize,
    /// Negatives that became feasible and were accepted as positives.
    pub moved_to_pos: usize,
    /// Entries no longer held by either buffer.
    pub dropped: usize,
}

/// Re-evaluates every stored entry under `env` (typically the same task
/// with a new feasibility oracle) and moves entries whose feasibility
/// flipped to the other buffer under that buffer's normal insertion rule.
pub fn reclassify(pos: &mut PositiveBuffer, neg: &mut NegativeBuffer, env: &Env) -> Result<Reclassified> {
    let mut out = Reclassified::default();
    let mut failed = Vec::new();
    let mut first_err = None;
    let demoted = pos.extract(|e| match env.feasible(&e.trajectory.terminal) {
        Ok(f) => !f,
        Err(err) => {
            first_err.get_or_insert(err);
            false
        }
    });
    if let Some(err) = first_err {
        return Err(err);
    }
    let mut kept = VecDeque::with_capacity(neg.entries.len());
    for e in neg.entries.drain(..) {
        if env.feasible(&e.trajectory.terminal)? {
            failed.push(e);
        } else {
            kept.push_back(e);
        }
    }
    neg.entries = kept;

    for mut e in demoted {
        e.trajectory.feasible = false;
        if neg.push(e)?.is_some() {
            out.dropped += 1;
        }
        out.moved_to_neg += 1;
    }
    for mut e in failed {
        e.trajectory.feasible = true;
        e.trajectory.reward_raw = env.reward(&e.trajectory.terminal)?;
        e.reward_raw = e.trajectory.reward_raw;
        let before = pos.len();
        if pos.push(e)? {
            out.moved_to_pos += 1;
            if pos.len() == before {
                // an existing positive was evicted to make room
                out.dropped += 1;
            }
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}
