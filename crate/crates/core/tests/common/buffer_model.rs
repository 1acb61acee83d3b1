//! Replay buffers driven side by side with a straightforward reference model.

use std::collections::VecDeque;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softflow::envs::{Dfa, Env, SeqSpec, TerminalObject};
use softflow::replay::{reclassify, BufferEntry, NegativeBuffer, PositiveBuffer, Prioritization};

#[derive(Clone, Debug)]
pub enum Op {
    Pos(String, f64),
    Neg(String),
    Sample(usize),
    Swap,
}

pub fn op() -> impl Strategy<Value = Op> {
    let s = "[ab()]{1,6}";
    prop_oneof![
        6 => (s, prop::sample::select(vec![0.1, 0.5, 1.0, 2.0, 3.0])).prop_map(|(s, r)| Op::Pos(s, r)),
        4 => s.prop_map(Op::Neg),
        1 => (1usize..20).prop_map(Op::Sample),
        1 => Just(Op::Swap),
    ]
}

fn envs() -> [Env; 2] {
    let base = SeqSpec::default_spec();
    let shallow = Env::Seq(base.clone())
        .with_oracle(Dfa::balanced_parens(1, &['a', 'b'], 1, Some(base.max_len)))
        .unwrap();
    [Env::Seq(base), shallow]
}

fn key(s: &str) -> TerminalObject {
    TerminalObject::Seq(s.to_string())
}

fn text(e: &BufferEntry) -> String {
    match &e.trajectory.terminal {
        TerminalObject::Seq(s) => s.clone(),
        other => panic!("unexpected terminal {other:?}"),
    }
}

/// Reference positive buffer: `(reward, arrival, string)` kept sorted.
#[derive(Default)]
struct Model {
    pos: Vec<(f64, u64, String)>,
    neg: VecDeque<String>,
    arrivals: u64,
}

impl Model {
    fn push_pos(&mut self, s: &str, r: f64, cap: usize) -> bool {
        if self.pos.iter().any(|(_, _, k)| k == s) {
            return false;
        }
        if self.pos.len() >= cap {
            if r <= self.pos[0].0 {
                return false;
            }
            self.pos.remove(0);
        }
        self.pos.push((r, self.arrivals, s.to_string()));
        self.arrivals += 1;
        self.pos.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
        true
    }

    fn push_neg(&mut self, s: &str, cap: usize) {
        if self.neg.len() >= cap {
            self.neg.pop_front();
        }
        self.neg.push_back(s.to_string());
    }
}

pub fn run(ops: &[Op], cap_pos: usize, cap_neg: usize) -> Result<(), TestCaseError> {
    let envs = envs();
    let mut which = 0;
    let mut pos = PositiveBuffer::new(cap_pos).unwrap();
    let mut neg = NegativeBuffer::new(cap_neg).unwrap();
    let mut model = Model::default();
    let mut rng = ChaCha8Rng::seed_from_u64(ops.len() as u64);
    let mut last_min: Option<f64> = None;
    for (step, op) in ops.iter().enumerate() {
        let env = &envs[which];
        match op {
            Op::Pos(s, r) => {
                let mut t = env.seq_trajectory(s).unwrap();
                t.reward_raw = *r;
                let feasible = t.feasible;
                let got = pos.push(BufferEntry::new(t, step as u64));
                if feasible {
                    prop_assert_eq!(got.unwrap(), model.push_pos(s, *r, cap_pos));
                } else {
                    prop_assert!(got.is_err(), "infeasible {} accepted as positive", s);
                }
            }
            Op::Neg(s) => {
                let t = env.seq_trajectory(s).unwrap();
                let feasible = t.feasible;
                let got = neg.push(BufferEntry::new(t, step as u64));
                if feasible {
                    prop_assert!(got.is_err(), "feasible {} accepted as negative", s);
                } else {
                    let was_full = model.neg.len() >= cap_neg;
                    let front = model.neg.front().cloned();
                    model.push_neg(s, cap_neg);
                    let evicted = got.unwrap();
                    prop_assert_eq!(evicted.is_some(), was_full);
                    if let Some(e) = evicted {
                        prop_assert_eq!(Some(text(&e)), front);
                    }
                }
            }
            Op::Sample(n) => {
                if !pos.is_empty() {
                    let drawn = pos.sample(*n, Prioritization::Rank, 1.0, &mut rng).unwrap();
                    prop_assert_eq!(drawn.len(), *n);
                    for e in drawn {
                        prop_assert!(pos.contains(&e.trajectory.terminal));
                    }
                }
                if !neg.is_empty() {
                    prop_assert_eq!(neg.sample(*n, &mut rng).unwrap().len(), *n);
                }
            }
            Op::Swap => {
                which = 1 - which;
                let env = &envs[which];
                let total_before = pos.len() + neg.len();
                let moved = reclassify(&mut pos, &mut neg, env).unwrap();
                // mirror the documented rule in the model
                let (demoted, kept): (Vec<_>, Vec<_>) = model.pos.drain(..).partition(|(_, _, s)| !env.feasible(&key(s)).unwrap());
                model.pos = kept;
                let (failed, stay): (Vec<_>, Vec<_>) = model.neg.drain(..).partition(|s| env.feasible(&key(s)).unwrap());
                model.neg = stay.into();
                for (_, _, s) in &demoted {
                    model.push_neg(s, cap_neg);
                }
                for s in &failed {
                    let r = env.reward(&key(s)).unwrap();
                    model.push_pos(s, r, cap_pos);
                }
                prop_assert_eq!(moved.moved_to_neg, demoted.len());
                prop_assert!(moved.moved_to_pos <= failed.len());
                prop_assert_eq!(pos.len() + neg.len() + moved.dropped, total_before);
                for e in pos.iter() {
                    prop_assert!(env.feasible(&e.trajectory.terminal).unwrap() && e.trajectory.feasible);
                }
                for e in neg.iter() {
                    prop_assert!(!env.feasible(&e.trajectory.terminal).unwrap() && !e.trajectory.feasible);
                }
                last_min = None;
            }
        }
        pos.check_invariants().unwrap();
        neg.check_invariants().unwrap();
        let got: Vec<(f64, String)> = pos.iter().map(|e| (e.reward_raw, text(e))).collect();
        let want: Vec<(f64, String)> = model.pos.iter().map(|(r, _, s)| (*r, s.clone())).collect();
        prop_assert_eq!(got, want);
        let got: Vec<String> = neg.iter().map(text).collect();
        prop_assert_eq!(got, Vec::from(model.neg.clone()));
        if pos.len() == cap_pos {
            let m = pos.min_reward().unwrap();
            if let Some(prev) = last_min {
                prop_assert!(m >= prev, "minimum reward fell from {} to {}", prev, m);
            }
            last_min = Some(m);
        }
    }
    Ok(())
}
