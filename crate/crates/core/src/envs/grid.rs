//! Deceptive 2-D grid with an infeasible quadrant.
//!
//! Axis 0 is horizontal (x), axis 1 is vertical (y, plotted upward). Every
//! trajectory starts at (0, 0); actions increment one coordinate or stop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasibleRegion {
    /// `x < H/2` and `y >= H/2`.
    UpperLeft,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub side: usize,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub infeasible: InfeasibleRegion,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            side: 32,
            r0: 0.001,
            r1: 0.5,
            r2: 2.0,
            infeasible: InfeasibleRegion::UpperLeft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridState {
    pub coords: [usize; 2],
}

impl GridState {
    pub fn new(x: usize, y: usize) -> Self {
        GridState { coords: [x, y] }
    }

    pub fn x(&self) -> usize {
        self.coords[0]
    }

    pub fn y(&self) -> usize {
        self.coords[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GridAction {
    /// Increment the coordinate on the given axis (0 or 1).
    Inc(usize),
    Stop,
}

impl GridAction {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            GridAction::Inc(axis) => axis,
            GridAction::Stop => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 | 1 => Some(GridAction::Inc(i)),
            2 => Some(GridAction::Stop),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridStep {
    Moved(GridState),
    Stopped(GridState),
}

impl GridSpec {
    pub fn new(side: usize) -> Result<Self> {
        let spec = GridSpec {
            side,
            ..GridSpec::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 4 {
            return Err(Error::InvalidArgument(format!("grid side must be >= 4, got {}", self.side)));
        }
        if !(self.r0 > 0.0) || self.r1 < 0.0 || self.r2 < 0.0 {
            return Err(Error::InvalidArgument("grid rewards need r0 > 0 and r1, r2 >= 0".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.side * self.side
    }

    fn check(&self, s: GridState) -> Result<()> {
        if s.x() >= self.side || s.y() >= self.side {
            return Err(Error::InvalidArgument(format!("cell {:?} outside a {}-grid", s.coords, self.side)));
        }
        Ok(())
    }

    /// Row-major cell index `y * H + x`.
    pub fn cell_index(&self, s: GridState) -> usize {
        s.y() * self.side + s.x()
    }

    pub fn cell_at(&self, index: usize) -> GridState {
        GridState::new(index % self.side, index / self.side)
    }

    pub fn cells(&self) -> impl Iterator<Item = GridState> + '_ {
        (0..self.n_cells()).map(|i| self.cell_at(i))
    }

    pub fn valid_actions(&self, s: GridState) -> Result<Vec<GridAction>> {
        self.check(s)?;
        let mut out = Vec::with_capacity(3);
        for axis in 0..2 {
            if s.coords[axis] + 1 < self.side {
                out.push(GridAction::Inc(axis));
            }
        }
        out.push(GridAction::Stop);
        Ok(out)
    }

    pub fn action_mask(&self, s: GridState) -> [bool; 3] {
        [s.x() + 1 < self.side, s.y() + 1 < self.side, true]
    }

    pub fn step(&self, s: GridState, action: GridAction) -> Result<GridStep> {
        self.check(s)?;
        match action {
            GridAction::Stop => Ok(GridStep::Stopped(s)),
            GridAction::Inc(axis) if axis < 2 && s.coords[axis] + 1 < self.side => {
                let mut next = s;
                next.coords[axis] += 1;
                Ok(GridStep::Moved(next))
            }
            GridAction::Inc(_) => Err(Error::InvalidAction {
                state: format!("{:?}", s.coords),
                action: format!("{action:?}"),
            }),
        }
    }

    /// `R0 + R1·∏ I[0.25 < t_i ≤ 0.5] + R2·∏ I[0.3 < t_i < 0.4]` with
    /// `t_i = |c_i/(H-1) - 0.5|`.
    pub fn reward(&self, s: GridState) -> f64 {
        let t = |c: usize| (c as f64 / (self.side - 1) as f64 - 0.5).abs();
        let (tx, ty) = (t(s.x()), t(s.y()));
        let outer = |t: f64| 0.25 < t && t <= 0.5;
        let ring = |t: f64| 0.3 < t && t < 0.4;
        let mut r = self.r0;
        if outer(tx) && outer(ty) {
            r += self.r1;
        }
        if ring(tx) && ring(ty) {
            r += self.r2;
        }
        r
    }

    pub fn feasible(&self, s: GridState) -> bool {
        match self.infeasible {
            InfeasibleRegion::None => true,
            InfeasibleRegion::UpperLeft => !(2 * s.x() < self.side && 2 * s.y() >= self.side),
        }
    }

    pub fn parents(&self, s: GridState) -> Vec<GridState> {
        let mut out = Vec::with_capacity(2);
        for axis in 0..2 {
            if s.coords[axis] > 0 {
                let mut p = s;
                p.coords[axis] -= 1;
                out.push(p);
            }
        }
        out
    }

    /// Which corner mode region, if any, a cell belongs to: `Some((hx, hy))`
    /// where `hx`/`hy` say whether the cell is on the high side of each axis.
    pub fn mode_region(&self, s: GridState) -> Option<(bool, bool)> {
        let t = |c: usize| c as f64 / (self.side - 1) as f64 - 0.5;
        let (tx, ty) = (t(s.x()), t(s.y()));
        if tx.abs() > 0.25 && ty.abs() > 0.25 {
            Some((tx > 0.0, ty > 0.0))
        } else {
            None
        }
    }
}

/// Exact terminal distribution over cells for the target
/// `p(x) ∝ R(x)^β · I[feasible(x) or !constrained]`, indexed by
/// [`GridSpec::cell_index`].
pub fn enumerate_grid_target(spec: &GridSpec, beta: f64, constrained: bool) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.side > 64 {
        return Err(Error::InvalidArgument("grid too large to enumerate".into()));
    }
    let logs: Vec<f64> = spec
        .cells()
        .map(|c| {
            if constrained && !spec.feasible(c) {
                f64::NEG_INFINITY
            } else {
                beta * spec.reward(c).ln()
            }
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / z).collect())
}
