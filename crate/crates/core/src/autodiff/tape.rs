//! Reverse-mode tape over 2-D tensors.
//!
//! Every node records the primitive that produced it together with the
//! forward value, so [`Tape::backprop`] can run a single reverse sweep. The
//! tape is append-only; a node's operands always precede it.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Gradients keyed by parameter.
pub type GradientMap = BTreeMap<ParamId, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// Right operand is the same shape, a 1×c row, or a 1×1 scalar.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    /// Row-wise log-softmax; masked-out entries hold `-inf`.
    LogSoftmax(Var),
    /// Flat-index gather from the operand into a new shape.
    Gather(Var, Arc<[usize]>),
    /// Sums rows into groups: `out[g] = Σ_{i: group[i] = g} in[i]`.
    SegmentSum(Var, Arc<[usize]>),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        let t = Tensor::from_raw(r, c, t.into_values());
        Ok(self.push(Op::Constant, t))
    }

    /// Records a trainable parameter leaf.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        let t = Tensor::from_raw(r, c, t.values().to_vec());
        Ok(self.push(Op::Param(id), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (kb, n) = self.dims(b)?;
        if k != kb {
            return Err(Error::Shape(format!("matmul {m}x{k} by {kb}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.vals(a), (m, k), false, self.vals(b), (kb, n), false, &mut out, false);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_raw(m, n, out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let bd = self.dims(b)?;
        let av = self.vals(a);
        let bv = self.vals(b);
        let out: Vec<f64> = if bd == (r, c) {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        } else if bd == (1, c) {
            av.iter().enumerate().map(|(i, x)| x + bv[i % c]).collect()
        } else if bd == (1, 1) {
            av.iter().map(|x| x + bv[0]).collect()
        } else {
            return Err(Error::Shape(format!("add {r}x{c} with {}x{}", bd.0, bd.1)));
        };
        Ok(self.push(Op::Add(a, b), Tensor::from_raw(r, c, out)))
    }

    /// `a - b` with the same broadcasting rules as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product of same-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if self.dims(b)? != (r, c) {
            return Err(Error::Shape("mul operands differ in shape".into()));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), Tensor::from_raw(r, c, out)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims2().expect("tape values are 2-D");
        let out = t.values().iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), Tensor::from_raw(r, c, out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = t.dims2().expect("tape values are 2-D");
        let out = t.values().iter().map(|&x| f(x)).collect();
        self.push(op, Tensor::from_raw(r, c, out))
    }

    /// Row-wise log-softmax. `mask[i]` false excludes entry `i` (row-major)
    /// from normalization and sets its output to `-inf`.
    pub fn log_softmax(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::Shape(format!("mask of length {} for {r}x{c} logits", m.len())));
            }
        }
        let x = self.vals(a);
        let mut out = vec![f64::NEG_INFINITY; r * c];
        for i in 0..r {
            let row_mask = mask.as_ref().map(|m| &m[i * c..(i + 1) * c]);
            masked_log_softmax(&x[i * c..(i + 1) * c], row_mask, &mut out[i * c..(i + 1) * c])?;
        }
        Ok(self.push(Op::LogSoftmax(a), Tensor::from_raw(r, c, out)))
    }

    /// Builds an `rows`×`cols` tensor whose entries are `a.flat[indices[k]]`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if indices.len() != rows * cols {
            return Err(Error::Shape(format!("gather of {} indices into {rows}x{cols}", indices.len())));
        }
        let x = self.vals(a);
        let mut out = Vec::with_capacity(indices.len());
        for &k in &indices {
            let v = *x
                .get(k)
                .ok_or_else(|| Error::Shape(format!("gather index {k} out of range {}", x.len())))?;
            out.push(v);
        }
        Ok(self.push(Op::Gather(a, indices.into()), Tensor::from_raw(rows, cols, out)))
    }

    /// Sums rows of `a` into `n_groups` groups.
    pub fn segment_sum(&mut self, a: Var, groups: Vec<usize>, n_groups: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if groups.len() != r {
            return Err(Error::Shape(format!("segment_sum with {} group ids for {r} rows", groups.len())));
        }
        if let Some(&g) = groups.iter().find(|&&g| g >= n_groups) {
            return Err(Error::Shape(format!("group id {g} >= {n_groups}")));
        }
        let x = self.vals(a);
        let mut out = vec![0.0; n_groups * c];
        for (i, &g) in groups.iter().enumerate() {
            for j in 0..c {
                out[g * c + j] += x[i * c + j];
            }
        }
        Ok(self.push(Op::SegmentSum(a, groups.into()), Tensor::from_raw(n_groups, c, out)))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.vals(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output). Returns `d(output · seed) / d(param)` for every parameter leaf
    /// recorded on the tape. The tape is left intact and can be swept again.
    pub fn backprop(&self, output: Var, seed: &Tensor) -> Result<GradientMap> {
        let out_dims = self.dims(output)?;
        if seed.dims2()? != out_dims {
            return Err(Error::Shape(format!("seed gradient {:?} for output {:?}", seed.shape(), out_dims)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.values().to_vec());
        let mut result = GradientMap::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let (r, c) = node.value.dims2()?;
                    match result.get_mut(id) {
                        Some(t) => {
                            for (acc, v) in t.values_mut().iter_mut().zip(&g) {
                                *acc += v;
                            }
                        }
                        None => {
                            result.insert(*id, Tensor::from_raw(r, c, g));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ad = self.dims(*a)?;
                    let bd = self.dims(*b)?;
                    let od = node.value.dims2()?;
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let ga = slot(&mut grads, *a, ad.0 * ad.1);
                    gemm(&g, od, false, self.vals(*b), bd, true, ga, true);
                    let gb = slot(&mut grads, *b, bd.0 * bd.1);
                    gemm(self.vals(*a), ad, true, &g, od, false, gb, true);
                }
                Op::Add(a, b) => {
                    let (r, c) = node.value.dims2()?;
                    let bd = self.dims(*b)?;
                    accumulate(slot(&mut grads, *a, r * c), &g);
                    let gb = slot(&mut grads, *b, bd.0 * bd.1);
                    if bd == (r, c) {
                        accumulate(gb, &g);
                    } else if bd == (1, c) {
                        for (i, v) in g.iter().enumerate() {
                            gb[i % c] += v;
                        }
                    } else {
                        gb[0] += g.iter().sum::<f64>();
                    }
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let av = self.vals(*a);
                    let bv = self.vals(*b);
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gi, y)| gi * y).collect();
                    let db: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    accumulate(slot(&mut grads, *a, n), &da);
                    accumulate(slot(&mut grads, *b, n), &db);
                }
                Op::Scale(a, k) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (acc, v) in ga.iter_mut().zip(&g) {
                        *acc += k * v;
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.values();
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
                Op::Relu(a) => {
                    let x = self.vals(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
                Op::Square(a) => {
                    let x = self.vals(*a);
                    let ga = slot(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += 2.0 * x[i] * g[i];
                    }
                }
                Op::LogSoftmax(a) => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.values();
                    let ga = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let gsum: f64 = row.clone().filter(|&k| y[k].is_finite()).map(|k| g[k]).sum();
                        for k in row {
                            if y[k].is_finite() {
                                ga[k] += g[k] - y[k].exp() * gsum;
                            }
                        }
                    }
                }
                Op::Gather(a, indices) => {
                    let n = self.vals(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    for (k, &src) in indices.iter().enumerate() {
                        ga[src] += g[k];
                    }
                }
                Op::SegmentSum(a, groups) => {
                    let (_, c) = node.value.dims2()?;
                    let ga = slot(&mut grads, *a, groups.len() * c);
                    for (i, &grp) in groups.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[grp * c + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.vals(*a).len();
                    let ga = slot(&mut grads, *a, n);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }
        Ok(result)
    }

    /// Gradient of a 1×1 output.
    pub fn backprop_scalar(&self, output: Var) -> Result<GradientMap> {
        self.backprop(output, &Tensor::scalar(1.0))
    }
}

/// Log-softmax of one row over the entries where `mask` is true; masked
/// entries are set to `-inf`.
pub(crate) fn masked_log_softmax(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<()> {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mx = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Err(Error::InvalidArgument("log_softmax row has no unmasked entries".into()));
    }
    let lse = mx + (0..row.len()).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln();
    for j in 0..row.len() {
        out[j] = if keep(j) { row[j] - lse } else { f64::NEG_INFINITY };
    }
    Ok(())
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x);
        assert_eq!(tape.value(y).item().unwrap(), 9.0);
        let g = tape.backprop_scalar(y).unwrap();
        assert_eq!(g[&ParamId(0)].item().unwrap(), 6.0);
    }

    #[test]
    fn log_softmax_pick_uniform_logits() {
        let n = 5;
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::matrix(1, n, vec![0.7; n]).unwrap()).unwrap();
        let ls = tape.log_softmax(x, None).unwrap();
        let pick = tape.gather(ls, vec![2], 1, 1).unwrap();
        let g = tape.backprop_scalar(pick).unwrap();
        for (j, v) in g[&ParamId(0)].values().iter().enumerate() {
            let expected = if j == 2 { 1.0 } else { 0.0 } - 1.0 / n as f64;
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        let mask: Arc<[bool]> = vec![true, false, true].into();
        let ls = tape.log_softmax(x, Some(mask)).unwrap();
        assert_eq!(tape.value(ls).values()[1], f64::NEG_INFINITY);
        let p0 = tape.value(ls).values()[0].exp() + tape.value(ls).values()[2].exp();
        assert_abs_diff_eq!(p0, 1.0, epsilon = 1e-15);
        let pick = tape.gather(ls, vec![0], 1, 1).unwrap();
        let g = tape.backprop_scalar(pick).unwrap();
        assert_eq!(g[&ParamId(0)].values()[1], 0.0);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let mask: Arc<[bool]> = vec![false, false].into();
        assert!(tape.log_softmax(x, Some(mask)).is_err());
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::zeros(vec![2, 2])).unwrap();
        let y = tape.tanh(x);
        assert!(tape.backprop(y, &Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn broadcast_add_and_segment_sum() {
        let mut tape = Tape::new();
        let a = tape.param(ParamId(0), &Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let b = tape.param(ParamId(1), &Tensor::scalar(10.0)).unwrap();
        let s = tape.add(a, b).unwrap();
        let seg = tape.segment_sum(s, vec![0, 1, 0], 2).unwrap();
        assert_eq!(tape.value(seg).values(), &[24.0, 12.0]);
        let g = tape.backprop(seg, &Tensor::matrix(2, 1, vec![1.0, 5.0]).unwrap()).unwrap();
        assert_eq!(g[&ParamId(0)].values(), &[1.0, 5.0, 1.0]);
        assert_eq!(g[&ParamId(1)].item().unwrap(), 7.0);
    }

    #[test]
    fn backprop_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &Tensor::scalar(0.5)).unwrap();
        let y = tape.tanh(x);
        let g1 = tape.backprop_scalar(y).unwrap();
        let g2 = tape.backprop_scalar(y).unwrap();
        assert_eq!(g1, g2);
    }
}
