//! Environments: the constrained grid and the sequence task.

mod dfa;
mod grid;
mod seq;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use dfa::{Dfa, DfaDocument};
pub use grid::{enumerate_grid_target, GridAction, GridSpec, GridState, GridStep, InfeasibleRegion};
pub use seq::{count_overlapping, Mutation, MutationKind, SeqSpec, SeqState};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Grid,
    Seq,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Grid => "grid",
            EnvKind::Seq => "seq",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum State {
    Grid { cell: GridState, terminal: bool },
    Seq(SeqState),
}

impl State {
    pub fn is_terminal(&self) -> bool {
        match self {
            State::Grid { terminal, .. } => *terminal,
            State::Seq(s) => s.terminated,
        }
    }
}

/// The object a complete trajectory produces.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TerminalObject {
    Cell(GridState),
    Seq(String),
}

impl fmt::Display for TerminalObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerminalObject::Cell(c) => write!(f, "({}, {})", c.x(), c.y()),
            TerminalObject::Seq(s) => write!(f, "{s:?}"),
        }
    }
}

/// A complete trajectory `s0 → … → sn` ending in a terminal state.
///
/// `states` includes the initial state and the terminal state, so
/// `actions.len() == states.len() - 1` and the last action is always stop /
/// end-of-sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<usize>,
    pub terminal: TerminalObject,
    pub reward_raw: f64,
    pub feasible: bool,
}

impl Trajectory {
    /// Number of decisions, including the final stop.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Grid(GridSpec),
    Seq(SeqSpec),
}

impl Env {
    pub fn kind(&self) -> EnvKind {
        match self {
            Env::Grid(_) => EnvKind::Grid,
            Env::Seq(_) => EnvKind::Seq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Env::Grid(g) => g.validate(),
            Env::Seq(s) => s.validate(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Env::Grid(_) => GridAction::COUNT,
            Env::Seq(s) => s.n_actions(),
        }
    }

    pub fn initial_state(&self) -> State {
        match self {
            Env::Grid(_) => State::Grid {
                cell: GridState::new(0, 0),
                terminal: false,
            },
            Env::Seq(_) => State::Seq(SeqState::default()),
        }
    }

    pub fn action_mask(&self, s: &State) -> Result<Vec<bool>> {
        match (self, s) {
            (Env::Grid(g), State::Grid { cell, terminal: false }) => Ok(g.action_mask(*cell).to_vec()),
            (Env::Grid(_), State::Grid { terminal: true, .. }) => Err(Error::Terminated),
            (Env::Seq(spec), State::Seq(st)) => spec.action_mask(st),
            _ => Err(Error::InvalidArgument("state does not belong to this environment".into())),
        }
    }

    pub fn step(&self, s: &State, action: usize) -> Result<State> {
        match (self, s) {
            (Env::Grid(_), State::Grid { terminal: true, .. }) => Err(Error::Terminated),
            (Env::Grid(g), State::Grid { cell, .. }) => {
                let a = GridAction::from_index(action).ok_or_else(|| Error::InvalidAction {
                    state: format!("{:?}", cell.coords),
                    action: action.to_string(),
                })?;
                Ok(match g.step(*cell, a)? {
                    GridStep::Moved(c) => State::Grid { cell: c, terminal: false },
                    GridStep::Stopped(c) => State::Grid { cell: c, terminal: true },
                })
            }
            (Env::Seq(spec), State::Seq(st)) => Ok(State::Seq(spec.step(st, action)?)),
            _ => Err(Error::InvalidArgument("state does not belong to this environment".into())),
        }
    }

    pub fn terminal_object(&self, s: &State) -> Option<TerminalObject> {
        match s {
            State::Grid { cell, terminal: true } => Some(TerminalObject::Cell(*cell)),
            State::Seq(st) if st.terminated => Some(TerminalObject::Seq(st.prefix.clone())),
            _ => None,
        }
    }

    pub fn reward(&self, x: &TerminalObject) -> Result<f64> {
        match (self, x) {
            (Env::Grid(g), TerminalObject::Cell(c)) => Ok(g.reward(*c)),
            (Env::Seq(s), TerminalObject::Seq(t)) => Ok(s.reward(t)),
            _ => Err(Error::InvalidArgument("object does not belong to this environment".into())),
        }
    }

    pub fn feasible(&self, x: &TerminalObject) -> Result<bool> {
        match (self, x) {
            (Env::Grid(g), TerminalObject::Cell(c)) => Ok(g.feasible(*c)),
            (Env::Seq(s), TerminalObject::Seq(t)) => s.feasible(t),
            _ => Err(Error::InvalidArgument("object does not belong to this environment".into())),
        }
    }

    /// Replays `actions` from the initial state and evaluates the terminal
    /// object.
    pub fn trajectory_from_actions(&self, actions: &[usize]) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(self.initial_state());
        for &a in actions {
            let cur = states.last().expect("non-empty");
            let mask = self.action_mask(cur)?;
            if !mask.get(a).copied().unwrap_or(false) {
                return Err(Error::InvalidAction {
                    state: format!("{cur:?}"),
                    action: a.to_string(),
                });
            }
            let next = self.step(cur, a)?;
            states.push(next);
        }
        let last = states.last().expect("non-empty");
        let terminal = self
            .terminal_object(last)
            .ok_or_else(|| Error::InvalidArgument("trajectory does not terminate".into()))?;
        self.finish(states, actions.to_vec(), terminal)
    }

    pub(crate) fn finish(&self, states: Vec<State>, actions: Vec<usize>, terminal: TerminalObject) -> Result<Trajectory> {
        let reward_raw = self.reward(&terminal)?;
        let feasible = self.feasible(&terminal)?;
        Ok(Trajectory {
            states,
            actions,
            terminal,
            reward_raw,
            feasible,
        })
    }

    /// The unique trajectory producing sequence `s` (append each token, then
    /// end-of-sequence).
    pub fn seq_trajectory(&self, s: &str) -> Result<Trajectory> {
        let Env::Seq(spec) = self else {
            return Err(Error::InvalidArgument("seq_trajectory on a grid environment".into()));
        };
        let mut actions = Vec::with_capacity(s.len() + 1);
        for c in s.chars() {
            actions.push(spec.token_index(c)?);
        }
        actions.push(spec.eos());
        self.trajectory_from_actions(&actions)
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        match self {
            Env::Grid(g) => Some(g),
            Env::Seq(_) => None,
        }
    }

    pub fn seq(&self) -> Option<&SeqSpec> {
        match self {
            Env::Seq(s) => Some(s),
            Env::Grid(_) => None,
        }
    }

    /// Same environment with a different sequence feasibility oracle.
    pub fn with_oracle(&self, oracle: Dfa) -> Result<Env> {
        match self {
            Env::Seq(s) => {
                let spec = SeqSpec { oracle, ..s.clone() };
                spec.validate()?;
                Ok(Env::Seq(spec))
            }
            Env::Grid(_) => Err(Error::InvalidArgument("the grid has no swappable oracle".into())),
        }
    }
}
