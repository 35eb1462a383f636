//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records each operation of one forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products. Only the operations the event networks need
//! are provided.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};
use crate::event::Point3;

/// Negative-side slope of the leaky rectifier used throughout.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    LeakyRelu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Gather { src: Var, index: Vec<usize> },
    Concat(Var, Var),
    SliceCols { src: Var, start: usize },
    GroupAttention { values: Var, scores: Var, offsets: Vec<usize>, weights: Vec<f64> },
    WeightedGather { src: Var, index: Vec<usize>, weights: Vec<f64>, k: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    Mse { pred: Var, target: Tensor },
    BceWithLogits { logits: Var, target: Vec<f64> },
    Chamfer { pred: Var, target: Vec<Point3>, fwd: Vec<usize>, bwd: Vec<usize> },
    Combine { a: Var, b: Var, wa: f64, wb: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::invalid(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An input that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked (used for gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id), true)
    }

    /// `x · w + b` with `x: n×d`, `w: d×m`, `b: 1×m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(x).shape();
        let (d2, m) = self.value(w).shape();
        if d != d2 {
            return Err(shape_err("linear", (n, d), (d2, m)));
        }
        let mut out = Tensor::zeros(n, m);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, m) {
                return Err(shape_err("linear bias", (1, m), bv.shape()));
            }
            for i in 0..n {
                out.row_mut(i).copy_from_slice(&bv.data);
            }
        }
        matmul_acc(&self.value(x).data, &self.value(w).data, &mut out.data, n, d, m);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Affine layer from named parameters.
    pub fn dense(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let b = b.map(|b| self.param(b));
        self.linear(x, w, b)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = leaky(*v));
        let needs = self.needs(x);
        self.push(out, Op::LeakyRelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(x).shape();
        if self.value(row).shape() != (1, m) {
            return Err(shape_err("add_row", (n, m), self.value(row).shape()));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data.clone();
        for i in 0..n {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r) {
                *o += v;
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow { x, row }, needs))
    }

    /// Rows of `src` at `index` (repeats allowed).
    pub fn gather(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        let s = self.value(src);
        if let Some(&i) = index.iter().find(|&&i| i >= s.rows) {
            return Err(Error::invalid(format!("gather index {i} out of {} rows", s.rows)));
        }
        let cols = s.cols;
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(i));
        }
        let needs = self.needs(src);
        Ok(self.push(out, Op::Gather { src, index }, needs))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.value(a).shape();
        let (nb, cb) = self.value(b).shape();
        if na != nb {
            return Err(shape_err("concat", (na, ca), (nb, cb)));
        }
        let mut out = Tensor::zeros(na, ca + cb);
        for i in 0..na {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    /// Columns `start..start + len` of `src`.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(src).shape();
        if start + len > c {
            return Err(Error::invalid(format!("column slice {start}+{len} of {c}")));
        }
        let mut out = Tensor::zeros(n, len);
        for i in 0..n {
            out.row_mut(i)
                .copy_from_slice(&self.nodes[src.0].value.row(i)[start..start + len]);
        }
        let needs = self.needs(src);
        Ok(self.push(out, Op::SliceCols { src, start }, needs))
    }

    /// Softmax-weighted pooling of `values` rows within groups.
    ///
    /// Group `g` covers rows `offsets[g]..offsets[g + 1]`; `scores` holds one
    /// logit per row. Produces one row per group.
    pub fn group_attention(&mut self, values: Var, scores: Var, offsets: Vec<usize>) -> Result<Var> {
        let (r, d) = self.value(values).shape();
        if self.value(scores).shape() != (r, 1) {
            return Err(shape_err("group_attention scores", (r, 1), self.value(scores).shape()));
        }
        if offsets.first() != Some(&0) || offsets.last() != Some(&r) {
            return Err(Error::invalid("group offsets must span all rows"));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("attention over an empty group"));
        }
        let groups = offsets.len() - 1;
        let s = &self.value(scores).data;
        let mut weights = vec![0.0; r];
        for g in 0..groups {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            let max = s[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in lo..hi {
                weights[k] = (s[k] - max).exp();
                z += weights[k];
            }
            weights[lo..hi].iter_mut().for_each(|w| *w /= z);
        }
        let vals = self.value(values);
        let mut out = Tensor::zeros(groups, d);
        for g in 0..groups {
            let orow = &mut out.data[g * d..(g + 1) * d];
            for k in offsets[g]..offsets[g + 1] {
                let w = weights[k];
                for (o, v) in orow.iter_mut().zip(vals.row(k)) {
                    *o += w * v;
                }
            }
        }
        let needs = self.needs(values) || self.needs(scores);
        Ok(self.push(
            out,
            Op::GroupAttention {
                values,
                scores,
                offsets,
                weights,
            },
            needs,
        ))
    }

    /// `out[i] = Σ_j weights[i*k + j] · src[index[i*k + j]]` with constant
    /// weights.
    pub fn weighted_gather(&mut self, src: Var, index: Vec<usize>, weights: Vec<f64>, k: usize) -> Result<Var> {
        let s = self.value(src);
        if k == 0 || index.len() != weights.len() || index.len() % k != 0 {
            return Err(Error::invalid("weighted_gather: index/weight layout mismatch"));
        }
        if let Some(&i) = index.iter().find(|&&i| i >= s.rows) {
            return Err(Error::invalid(format!("gather index {i} out of {} rows", s.rows)));
        }
        let n = index.len() / k;
        let d = s.cols;
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let orow = &mut out.data[i * d..(i + 1) * d];
            for j in i * k..(i + 1) * k {
                let w = weights[j];
                for (o, v) in orow.iter_mut().zip(s.row(index[j])) {
                    *o += w * v;
                }
            }
        }
        let needs = self.needs(src);
        Ok(self.push(
            out,
            Op::WeightedGather {
                src,
                index,
                weights,
                k,
            },
            needs,
        ))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, needs)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(shape_err("mse", self.value(pred).shape(), target.shape()));
        }
        let p = self.value(pred);
        let loss = p
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / p.len().max(1) as f64;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::from_vec(1, 1, vec![loss])?, Op::Mse { pred, target }, needs))
    }

    /// Mean binary cross-entropy of logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let l = self.value(logits);
        if l.len() != target.len() {
            return Err(Error::invalid("bce: logits and targets differ in length"));
        }
        let loss = l
            .data
            .iter()
            .zip(&target)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            / l.len().max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(Tensor::from_vec(1, 1, vec![loss])?, Op::BceWithLogits { logits, target }, needs))
    }

    /// Chamfer distance between the `n×3` rows of `pred` and a constant set.
    pub fn chamfer(&mut self, pred: Var, target: Vec<Point3>) -> Result<Var> {
        let p = self.value(pred);
        if p.cols != 3 || p.rows == 0 || target.is_empty() {
            return Err(Error::invalid("chamfer: needs non-empty n×3 sets"));
        }
        let pts: Vec<Point3> = (0..p.rows).map(|i| [p.row(i)[0], p.row(i)[1], p.row(i)[2]]).collect();
        let nearest = |set: &[Point3], q: &Point3| -> (usize, f64) {
            let mut best = (0, f64::INFINITY);
            for (i, s) in set.iter().enumerate() {
                let d = (s[0] - q[0]).powi(2) + (s[1] - q[1]).powi(2) + (s[2] - q[2]).powi(2);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best
        };
        let mut fwd = Vec::with_capacity(pts.len());
        let mut sf = 0.0;
        for q in &pts {
            let (j, d) = nearest(&target, q);
            fwd.push(j);
            sf += d;
        }
        let mut bwd = Vec::with_capacity(target.len());
        let mut sb = 0.0;
        for q in &target {
            let (j, d) = nearest(&pts, q);
            bwd.push(j);
            sb += d;
        }
        let loss = sf / pts.len() as f64 + sb / target.len() as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![loss])?,
            Op::Chamfer {
                pred,
                target,
                fwd,
                bwd,
            },
            needs,
        ))
    }

    /// `wa·a + wb·b` for two scalars.
    pub fn combine(&mut self, a: Var, b: Var, wa: f64, wb: f64) -> Result<Var> {
        if self.value(a).shape() != (1, 1) || self.value(b).shape() != (1, 1) {
            return Err(Error::invalid("combine expects scalars"));
        }
        let v = wa * self.value(a).data[0] + wb * self.value(b).data[0];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(1, 1, vec![v])?, Op::Combine { a, b, wa, wb }, needs))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let lv = self.value(loss);
        let mut seed = Tensor::zeros(lv.rows, lv.cols);
        seed.data.iter_mut().for_each(|v| *v = 1.0);
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { nodes: grads }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| {
                let (r, c) = nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            });
            f(slot);
        };
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (n, d) = xv.shape();
                let m = wv.cols;
                acc(*x, &mut |gx| matmul_bt_acc(&g.data, &wv.data, &mut gx.data, n, m, d));
                acc(*w, &mut |gw| matmul_at_acc(&xv.data, &g.data, &mut gw.data, n, d, m));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for i in 0..n {
                            for (o, v) in gb.data.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::LeakyRelu(x) => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((o, &gi), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *o += if xi > 0.0 { gi } else { LEAKY_SLOPE * gi };
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((o, &gi), &s) in gx.data.iter_mut().zip(&g.data).zip(&out.data) {
                    *o += gi * s * (1.0 - s);
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_assign(g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((o, &gi), &bi) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gi), &ai) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRow { x, row } => {
                acc(*x, &mut |gx| gx.add_assign(g));
                acc(*row, &mut |gr| {
                    for i in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Gather { src, index } => acc(*src, &mut |gs| {
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }),
            Op::Concat(a, b) => {
                let ca = nodes[a.0].value.cols;
                acc(*a, &mut |ga| {
                    for i in 0..g.rows {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *o += v;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.rows {
                        for (o, v) in gb.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceCols { src, start } => acc(*src, &mut |gs| {
                let len = g.cols;
                for i in 0..g.rows {
                    for (o, v) in gs.row_mut(i)[*start..*start + len].iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }),
            Op::GroupAttention {
                values,
                scores,
                offsets,
                weights,
            } => {
                let vv = &nodes[values.0].value;
                acc(*values, &mut |gv| {
                    for gi in 0..offsets.len() - 1 {
                        for k in offsets[gi]..offsets[gi + 1] {
                            let w = weights[k];
                            for (o, v) in gv.row_mut(k).iter_mut().zip(g.row(gi)) {
                                *o += w * v;
                            }
                        }
                    }
                });
                acc(*scores, &mut |gs| {
                    for gi in 0..offsets.len() - 1 {
                        let grow = g.row(gi);
                        let (lo, hi) = (offsets[gi], offsets[gi + 1]);
                        // d out / d a_k = v_k; softmax Jacobian on top.
                        let da: Vec<f64> = (lo..hi)
                            .map(|k| vv.row(k).iter().zip(grow).map(|(a, b)| a * b).sum())
                            .collect();
                        let mean: f64 = (lo..hi).zip(&da).map(|(k, d)| weights[k] * d).sum();
                        for (k, d) in (lo..hi).zip(&da) {
                            gs.data[k] += weights[k] * (d - mean);
                        }
                    }
                });
            }
            Op::WeightedGather {
                src,
                index,
                weights,
                k,
            } => acc(*src, &mut |gs| {
                for i in 0..g.rows {
                    for j in i * k..(i + 1) * k {
                        let w = weights[j];
                        for (o, v) in gs.row_mut(index[j]).iter_mut().zip(g.row(i)) {
                            *o += w * v;
                        }
                    }
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((o, &gi), &xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pv = &nodes[pred.0].value;
                let scale = 2.0 * g.data[0] / pv.len().max(1) as f64;
                acc(*pred, &mut |gp| {
                    for ((o, &p), &t) in gp.data.iter_mut().zip(&pv.data).zip(&target.data) {
                        *o += scale * (p - t);
                    }
                });
            }
            Op::BceWithLogits { logits, target } => {
                let lv = &nodes[logits.0].value;
                let scale = g.data[0] / lv.len().max(1) as f64;
                acc(*logits, &mut |gl| {
                    for ((o, &z), &y) in gl.data.iter_mut().zip(&lv.data).zip(target) {
                        *o += scale * (sigmoid(z) - y);
                    }
                });
            }
            Op::Chamfer {
                pred,
                target,
                fwd,
                bwd,
            } => {
                let pv = &nodes[pred.0].value;
                let nx = pv.rows as f64;
                let ne = target.len() as f64;
                let s = g.data[0];
                acc(*pred, &mut |gp| {
                    for (i, &j) in fwd.iter().enumerate() {
                        for a in 0..3 {
                            gp.data[i * 3 + a] += s * 2.0 * (pv.data[i * 3 + a] - target[j][a]) / nx;
                        }
                    }
                    for (q, &i) in target.iter().zip(bwd) {
                        for a in 0..3 {
                            gp.data[i * 3 + a] += s * 2.0 * (pv.data[i * 3 + a] - q[a]) / ne;
                        }
                    }
                });
            }
            Op::Combine { a, b, wa, wb } => {
                acc(*a, &mut |ga| ga.data[0] += wa * g.data[0]);
                acc(*b, &mut |gb| gb.data[0] += wb * g.data[0]);
            }
        }
    }
}

/// Gradients for every node of a tape, as produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a recorded value, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Sums parameter-node gradients into a [`Grads`] aligned with the store.
    pub fn param_grads(&self, tape: &Tape<'_>) -> Grads {
        let mut out = tape.params.zeros_like();
        for (node, g) in tape.nodes.iter().zip(&self.nodes) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                out.get_mut(*id).add_assign(g);
            }
        }
        out
    }
}
