//! Finite-difference check of every training loss composed with random MLPs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softflow::autodiff::{build_mlp, Activation, GradientMap, MlpParams, ParamId, Tape, Tensor};
use softflow::losses::{aux_loss_on, balance_loss_on};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor so near-zero gradients are compared absolutely.
const FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Tb,
    Rtb,
    OnPolicy,
    Aux,
    Replay,
}

/// A batch of multi-step trajectories over random features.
struct Problem {
    loss: Loss,
    inputs: Tensor,
    mask: Arc<[bool]>,
    picked: Vec<usize>,
    groups: Vec<usize>,
    n_traj: usize,
    targets: Vec<f64>,
    pos: Vec<usize>,
    neg: Vec<usize>,
    mutants: Vec<usize>,
    alpha: f64,
}

fn problem(rng: &mut ChaCha8Rng, loss: Loss, d_in: usize, n_actions: usize) -> Problem {
    let n_traj = rng.gen_range(3..7);
    let mut rows = 0;
    let mut groups = Vec::new();
    for t in 0..n_traj {
        let len = rng.gen_range(1..4);
        groups.extend(std::iter::repeat_n(t, len));
        rows += len;
    }
    let inputs = Tensor::new(vec![rows, d_in], (0..rows * d_in).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
    let mut mask = vec![false; rows * n_actions];
    let mut picked = Vec::with_capacity(rows);
    for r in 0..rows {
        let a = rng.gen_range(0..n_actions);
        for c in 0..n_actions {
            mask[r * n_actions + c] = c == a || rng.gen_bool(0.7);
        }
        picked.push(r * n_actions + a);
    }
    let targets = (0..n_traj).map(|_| rng.gen_range(-4.0..2.0)).collect();
    let split = rng.gen_range(1..n_traj - 1);
    let pos: Vec<usize> = (0..split).collect();
    let rest: Vec<usize> = (split..n_traj).collect();
    let cut = rng.gen_range(1..=rest.len());
    Problem {
        loss,
        inputs,
        mask: mask.into(),
        picked,
        groups,
        n_traj,
        targets,
        pos,
        neg: rest[..cut].to_vec(),
        mutants: rest[cut..].to_vec(),
        alpha: rng.gen_range(0.01..1.0),
    }
}

fn evaluate(p: &Problem, mlp: &MlpParams, log_z: f64) -> (f64, GradientMap) {
    let mut tape = Tape::new();
    let z_id = ParamId(mlp.tensors().len());
    let x = tape.constant(p.inputs.clone()).unwrap();
    let logits = mlp.forward_on(&mut tape, x, 0, true).unwrap();
    let ls = tape.log_softmax(logits, Some(p.mask.clone())).unwrap();
    let steps = tape.gather(ls, p.picked.clone(), p.picked.len(), 1).unwrap();
    let scores = tape.segment_sum(steps, p.groups.clone(), p.n_traj).unwrap();
    let z = tape.param(z_id, &Tensor::scalar(log_z)).unwrap();
    let rows = |tape: &mut Tape, idx: &[usize]| tape.gather(scores, idx.to_vec(), idx.len(), 1).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| p.targets[i]).collect::<Vec<_>>();
    let loss = match p.loss {
        Loss::Tb => {
            let one = rows(&mut tape, &[0]);
            balance_loss_on(&mut tape, z, one, &p.targets[..1]).unwrap()
        }
        Loss::Rtb => balance_loss_on(&mut tape, z, scores, &p.targets).unwrap(),
        Loss::OnPolicy => {
            let sub = rows(&mut tape, &p.pos);
            balance_loss_on(&mut tape, z, sub, &pick(&p.pos)).unwrap()
        }
        Loss::Aux => aux_loss_on(&mut tape, scores, &p.pos, &p.neg).unwrap(),
        Loss::Replay => {
            let sub = rows(&mut tape, &p.pos);
            let mut total = balance_loss_on(&mut tape, z, sub, &pick(&p.pos)).unwrap();
            for group in [&p.neg, &p.mutants] {
                if group.is_empty() {
                    continue;
                }
                let aux = aux_loss_on(&mut tape, scores, &p.pos, group).unwrap();
                let w = tape.scale(aux, p.alpha);
                total = tape.add(total, w).unwrap();
            }
            total
        }
    };
    let value = tape.value(loss).item().unwrap();
    (value, tape.backprop_scalar(loss).unwrap())
}

fn with_entry(mlp: &MlpParams, tensor: usize, k: usize, delta: f64) -> MlpParams {
    let mut m = mlp.clone();
    let t = &mut m.tensors_mut()[tensor];
    let mut v = t.values().to_vec();
    v[k] += delta;
    *t = Tensor::new(t.shape().to_vec(), v).unwrap();
    m
}

/// Largest relative error over all parameters of one composition.
pub fn max_rel_error(seed: u64) -> (f64, Loss) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = [Loss::Tb, Loss::Rtb, Loss::OnPolicy, Loss::Aux, Loss::Replay][(seed % 5) as usize];
    let d_in = rng.gen_range(2..6);
    let n_actions = rng.gen_range(2..5);
    let mut sizes = vec![d_in];
    for _ in 0..rng.gen_range(1..3) {
        sizes.push(rng.gen_range(2..7));
    }
    sizes.push(n_actions);
    let act = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Relu };
    let mut mlp = build_mlp(&sizes, act, seed).unwrap();
    // nonzero biases so every path is exercised
    for t in mlp.tensors_mut().iter_mut() {
        let v = t.values().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
        *t = Tensor::new(t.shape().to_vec(), v).unwrap();
    }
    let log_z = rng.gen_range(-2.0..2.0);
    let p = problem(&mut rng, loss, d_in, n_actions);
    let (_, grads) = evaluate(&p, &mlp, log_z);

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    let mut worst: f64 = 0.0;
    for (i, t) in mlp.tensors().iter().enumerate() {
        let g = grads
            .get(&ParamId(i))
            .map(|g| g.values().to_vec())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        for k in 0..t.len() {
            let up = evaluate(&p, &with_entry(&mlp, i, k, EPS), log_z).0;
            let down = evaluate(&p, &with_entry(&mlp, i, k, -EPS), log_z).0;
            worst = worst.max(rel(g[k], (up - down) / (2.0 * EPS)));
        }
    }
    let gz = grads.get(&ParamId(mlp.tensors().len())).map(|g| g.values()[0]).unwrap_or(0.0);
    let nz = (evaluate(&p, &mlp, log_z + EPS).0 - evaluate(&p, &mlp, log_z - EPS).0) / (2.0 * EPS);
    (worst.max(rel(gz, nz)), loss)
}

/// Worst relative error over `n` seeded compositions, with its seed and loss.
pub fn worst_of(n: u64) -> (f64, u64, Loss) {
    let mut worst = (0.0, 0, Loss::Tb);
    for seed in 0..n {
        let (e, loss) = max_rel_error(seed);
        if e >= worst.0 {
            worst = (e, seed, loss);
        }
    }
    worst
}
