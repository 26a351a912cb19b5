//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape once in reverse and returns the gradient of a scalar node with
//! respect to every node that requires one. Parameters enter the tape through
//! [`Graph::param`], which snapshots the current value from a [`ParamStore`].

use std::hash::{DefaultHasher, Hash, Hasher};

use super::gemm::{gemm, Layout};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{ensure, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    SegmentMax {
        input: Var,
        segments: usize,
        argmax: Vec<usize>,
    },
    QueryLatentLinear {
        queries: Var,
        latents: Var,
        weight: Var,
        bias: Var,
        per_segment: usize,
    },
    MeanAbsDiff {
        input: Var,
        target: Vec<f64>,
    },
    RowDistance {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        normalizer: f64,
        probs: Vec<f64>,
    },
    Mean(Var),
    SumSquares(Var),
    DotConst {
        input: Var,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to the nodes of a graph.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient reaching the leaf `var`, if any flowed there.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves, in tape order. A parameter bound twice
    /// appears twice; consumers sum the entries.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.nodes[node].as_ref().map(|g| (id, g)))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Data that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient (used for input sensitivities).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; its gradient is reported by id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// `input [B×F_in] · weight [F_in×F_out] + bias [F_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        ensure!(
            x.shape.len() == 2 && w.shape.len() == 2,
            "linear expects matrices, got {:?} and {:?}",
            x.shape,
            w.shape
        );
        let (rows, fin, fout) = (x.shape[0], x.shape[1], w.shape[1]);
        ensure!(
            w.shape[0] == fin,
            "linear: input has {fin} features but weight is {:?}",
            w.shape
        );
        ensure!(
            b.len() == fout,
            "linear: bias has {} entries, expected {fout}",
            b.len()
        );
        let mut out = Vec::with_capacity(rows * fout);
        for _ in 0..rows {
            out.extend_from_slice(&b.data);
        }
        gemm(
            rows,
            fin,
            fout,
            &x.data,
            Layout::Normal,
            &w.data,
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.req(input) || self.req(weight) || self.req(bias);
        Ok(self.push(
            Tensor::from_parts(vec![rows, fout], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let y = Tensor::from_parts(
            x.shape.clone(),
            x.data.iter().map(|&v| v.max(0.0)).collect(),
        );
        let rg = self.req(input);
        self.push(y, Op::Relu(input), rg)
    }

    /// Column-wise max over each of `segments` equal, contiguous row blocks of
    /// an `[R×F]` input, giving `[segments×F]`. Ties go to the lowest row.
    pub fn segment_max(&mut self, input: Var, segments: usize) -> Result<Var> {
        let x = self.value(input);
        ensure!(x.shape.len() == 2, "segment_max expects a matrix");
        let (rows, f) = (x.shape[0], x.shape[1]);
        ensure!(
            segments > 0 && rows % segments == 0,
            "segment_max: {rows} rows do not split into {segments} segments"
        );
        let per = rows / segments;
        let mut out = vec![0.0; segments * f];
        let mut argmax = vec![0; segments * f];
        for s in 0..segments {
            let base = s * per;
            let o = &mut out[s * f..(s + 1) * f];
            let a = &mut argmax[s * f..(s + 1) * f];
            o.copy_from_slice(&x.data[base * f..(base + 1) * f]);
            a.iter_mut().for_each(|i| *i = base);
            for r in base + 1..base + per {
                let row = &x.data[r * f..(r + 1) * f];
                for j in 0..f {
                    if row[j] > o[j] {
                        o[j] = row[j];
                        a[j] = r;
                    }
                }
            }
        }
        let rg = self.req(input);
        Ok(self.push(
            Tensor::from_parts(vec![segments, f], out),
            Op::SegmentMax {
                input,
                segments,
                argmax,
            },
            rg,
        ))
    }

    /// Affine map of the row-wise concatenation `[query | latent]`, where each
    /// latent row `s` is shared by query rows `s·per_segment .. (s+1)·per_segment`.
    ///
    /// `queries [S·K×D]`, `latents [S×F]`, `weight [(D+F)×H]`, `bias [H]` → `[S·K×H]`.
    /// Equivalent to materializing the concatenation, but the latent half of the
    /// product is computed once per segment.
    pub fn query_latent_linear(
        &mut self,
        queries: Var,
        latents: Var,
        weight: Var,
        bias: Var,
        per_segment: usize,
    ) -> Result<Var> {
        let (q, c, w, b) = (
            self.value(queries),
            self.value(latents),
            self.value(weight),
            self.value(bias),
        );
        ensure!(
            q.shape.len() == 2 && c.shape.len() == 2 && w.shape.len() == 2,
            "query_latent_linear expects matrices"
        );
        let (segs, f) = (c.shape[0], c.shape[1]);
        let d = q.shape[1];
        let h = w.shape[1];
        ensure!(
            per_segment > 0 && q.shape[0] == segs * per_segment,
            "query_latent_linear: {} query rows for {segs} latents × {per_segment}",
            q.shape[0]
        );
        ensure!(
            w.shape[0] == d + f,
            "query_latent_linear: weight has {} rows, expected {} (query {d} + latent {f})",
            w.shape[0],
            d + f
        );
        ensure!(
            b.len() == h,
            "query_latent_linear: bias length {} != {h}",
            b.len()
        );

        let (wq, wc) = w.data.split_at(d * h);
        let mut latent_part = vec![0.0; segs * h];
        for s in 0..segs {
            latent_part[s * h..(s + 1) * h].copy_from_slice(&b.data);
        }
        gemm(
            segs,
            f,
            h,
            &c.data,
            Layout::Normal,
            wc,
            Layout::Normal,
            1.0,
            &mut latent_part,
        );
        let rows = segs * per_segment;
        let mut out = Vec::with_capacity(rows * h);
        for s in 0..segs {
            for _ in 0..per_segment {
                out.extend_from_slice(&latent_part[s * h..(s + 1) * h]);
            }
        }
        gemm(
            rows,
            d,
            h,
            &q.data,
            Layout::Normal,
            wq,
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.req(queries) || self.req(latents) || self.req(weight) || self.req(bias);
        Ok(self.push(
            Tensor::from_parts(vec![rows, h], out),
            Op::QueryLatentLinear {
                queries,
                latents,
                weight,
                bias,
                per_segment,
            },
            rg,
        ))
    }

    /// `mean(|input − target|)` over all entries.
    pub fn mean_abs_diff(&mut self, input: Var, target: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        ensure!(
            x.len() == target.len(),
            "mean_abs_diff: {} predictions vs {} targets",
            x.len(),
            target.len()
        );
        let sum: f64 = x.data.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        let v = sum / target.len() as f64;
        let rg = self.req(input);
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff { input, target }, rg))
    }

    /// Euclidean distance between matching rows of two `[S×F]` tensors → `[S]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        ensure!(
            x.shape == y.shape,
            "row_distance: shapes {:?} and {:?} differ",
            x.shape,
            y.shape
        );
        let rows = x.rows();
        let out: Vec<f64> = (0..rows)
            .map(|r| {
                x.row(r)
                    .iter()
                    .zip(y.row(r))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(
            Tensor::from_parts(vec![rows], out),
            Op::RowDistance { a, b },
            rg,
        ))
    }

    /// `(1/normalizer) · Σ_i −log softmax(logits_i)[target_i]` over rows whose
    /// target is `Some`; rows with `None` contribute nothing.
    pub fn class_cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        normalizer: f64,
    ) -> Result<Var> {
        let l = self.value(logits);
        ensure!(l.shape.len() == 2, "cross entropy expects [B×J] logits");
        let (rows, j) = (l.shape[0], l.shape[1]);
        ensure!(
            targets.len() == rows,
            "cross entropy: {} targets for {rows} rows",
            targets.len()
        );
        ensure!(
            normalizer > 0.0,
            "cross entropy normalizer must be positive"
        );
        let mut probs = vec![0.0; rows * j];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = l.row(r);
            let p = &mut probs[r * j..(r + 1) * j];
            let (m, log_z) = log_softmax_into(row, p);
            if let Some(c) = *t {
                ensure!(
                    c < j,
                    "cross entropy: class {c} out of range for {j} logits"
                );
                total += (m - row[c]) + log_z;
            }
        }
        let rg = self.req(logits);
        Ok(self.push(
            Tensor::scalar(total / normalizer),
            Op::CrossEntropy {
                logits,
                targets,
                normalizer,
                probs,
            },
            rg,
        ))
    }

    /// Mean batch cross-entropy against a one-hot `[B×J]` target tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let l = self.value(logits);
        ensure!(
            targets.shape == l.shape,
            "targets {:?} do not match logits {:?}",
            targets.shape,
            l.shape
        );
        let classes = one_hot_classes(targets)?;
        let n = classes.len() as f64;
        self.class_cross_entropy(logits, classes.into_iter().map(Some).collect(), n)
    }

    /// Mean of all entries → scalar.
    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let v = x.data.iter().sum::<f64>() / x.len() as f64;
        let rg = self.req(input);
        self.push(Tensor::scalar(v), Op::Mean(input), rg)
    }

    /// `Σ x²` over all entries → scalar.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let v = self.value(input).data.iter().map(|x| x * x).sum();
        let rg = self.req(input);
        self.push(Tensor::scalar(v), Op::SumSquares(input), rg)
    }

    /// `Σ input ⊙ weights` → scalar; projects a tensor onto a fixed direction.
    pub fn dot_const(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(input);
        ensure!(x.len() == weights.len(), "dot_const: length mismatch");
        let v = x.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.req(input);
        Ok(self.push(Tensor::scalar(v), Op::DotConst { input, weights }, rg))
    }

    /// `Σ w_i · s_i` over scalar nodes. Zero-weight terms are dropped.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut kept = Vec::with_capacity(terms.len());
        let mut v = 0.0;
        for &(t, w) in terms {
            ensure!(self.value(t).len() == 1, "weighted_sum takes scalar terms");
            if w != 0.0 {
                v += w * self.scalar(t);
                kept.push((t, w));
            }
        }
        let rg = kept.iter().any(|&(t, _)| self.req(t));
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(kept), rg))
    }

    /// Hash of every branch taken on the tape: ReLU signs, segment-max winners,
    /// signs inside `mean_abs_diff` and zero rows of `row_distance`. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => {
                    i.hash(&mut h);
                    for v in &node.value.data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::MeanAbsDiff { input, target } => {
                    i.hash(&mut h);
                    for (x, t) in self.value(*input).data.iter().zip(target) {
                        x.partial_cmp(t).hash(&mut h);
                    }
                }
                Op::RowDistance { .. } => {
                    i.hash(&mut h);
                    for v in &node.value.data {
                        (*v == 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradient of the scalar `loss` with respect to every node upstream of it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(up);
            } else if node.requires_grad {
                // Interior gradients are dropped once consumed.
                self.propagate(&node.op, &node.value, &up, &mut grads);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, op: &Op, out: &Tensor, up: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (rows, fin, fout) = (x.shape[0], x.shape[1], w.shape[1]);
                if self.req(*input) {
                    let mut dx = vec![0.0; rows * fin];
                    gemm(
                        rows,
                        fout,
                        fin,
                        &up.data,
                        Layout::Normal,
                        &w.data,
                        Layout::Transposed,
                        0.0,
                        &mut dx,
                    );
                    accumulate(grads, *input, &x.shape, dx);
                }
                if self.req(*weight) {
                    let mut dw = vec![0.0; fin * fout];
                    gemm(
                        fin,
                        rows,
                        fout,
                        &x.data,
                        Layout::Transposed,
                        &up.data,
                        Layout::Normal,
                        0.0,
                        &mut dw,
                    );
                    accumulate(grads, *weight, &w.shape, dw);
                }
                if self.req(*bias) {
                    let db = column_sums(&up.data, rows, fout);
                    accumulate(grads, *bias, &self.value(*bias).shape, db);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = x
                    .data
                    .iter()
                    .zip(&up.data)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *input, &x.shape, dx);
            }
            Op::SegmentMax {
                input,
                segments,
                argmax,
            } => {
                let x = self.value(*input);
                let f = x.shape[1];
                let mut dx = vec![0.0; x.len()];
                for s in 0..*segments {
                    for j in 0..f {
                        let r = argmax[s * f + j];
                        dx[r * f + j] += up.data[s * f + j];
                    }
                }
                accumulate(grads, *input, &x.shape, dx);
            }
            Op::QueryLatentLinear {
                queries,
                latents,
                weight,
                bias,
                per_segment,
            } => {
                let q = self.value(*queries);
                let c = self.value(*latents);
                let w = self.value(*weight);
                let (segs, f) = (c.shape[0], c.shape[1]);
                let d = q.shape[1];
                let h = w.shape[1];
                let rows = segs * per_segment;
                let (wq, wc) = w.data.split_at(d * h);
                // Upstream summed over each segment's queries flows to the latent half.
                let mut dlatent_part = vec![0.0; segs * h];
                for s in 0..segs {
                    let acc = &mut dlatent_part[s * h..(s + 1) * h];
                    for r in s * per_segment..(s + 1) * per_segment {
                        for (a, g) in acc.iter_mut().zip(&up.data[r * h..(r + 1) * h]) {
                            *a += g;
                        }
                    }
                }
                if self.req(*queries) {
                    let mut dq = vec![0.0; rows * d];
                    gemm(
                        rows,
                        h,
                        d,
                        &up.data,
                        Layout::Normal,
                        wq,
                        Layout::Transposed,
                        0.0,
                        &mut dq,
                    );
                    accumulate(grads, *queries, &q.shape, dq);
                }
                if self.req(*latents) {
                    let mut dc = vec![0.0; segs * f];
                    gemm(
                        segs,
                        h,
                        f,
                        &dlatent_part,
                        Layout::Normal,
                        wc,
                        Layout::Transposed,
                        0.0,
                        &mut dc,
                    );
                    accumulate(grads, *latents, &c.shape, dc);
                }
                if self.req(*weight) {
                    let mut dw = vec![0.0; (d + f) * h];
                    let (dwq, dwc) = dw.split_at_mut(d * h);
                    gemm(
                        d,
                        rows,
                        h,
                        &q.data,
                        Layout::Transposed,
                        &up.data,
                        Layout::Normal,
                        0.0,
                        dwq,
                    );
                    gemm(
                        f,
                        segs,
                        h,
                        &c.data,
                        Layout::Transposed,
                        &dlatent_part,
                        Layout::Normal,
                        0.0,
                        dwc,
                    );
                    accumulate(grads, *weight, &w.shape, dw);
                }
                if self.req(*bias) {
                    let db = column_sums(&dlatent_part, segs, h);
                    accumulate(grads, *bias, &self.value(*bias).shape, db);
                }
            }
            Op::MeanAbsDiff { input, target } => {
                let x = self.value(*input);
                let scale = up.data[0] / target.len() as f64;
                let dx = x
                    .data
                    .iter()
                    .zip(target)
                    .map(|(a, b)| scale * sign(a - b))
                    .collect();
                accumulate(grads, *input, &x.shape, dx);
            }
            Op::RowDistance { a, b } => {
                let x = self.value(*a);
                let y = self.value(*b);
                let cols = x.cols();
                let mut dx = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let dist = out.data[r];
                    if dist == 0.0 {
                        continue;
                    }
                    let s = up.data[r] / dist;
                    for j in 0..cols {
                        dx[r * cols + j] = s * (x.data[r * cols + j] - y.data[r * cols + j]);
                    }
                }
                if self.req(*b) {
                    let dy = dx.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &y.shape, dy);
                }
                if self.req(*a) {
                    accumulate(grads, *a, &x.shape, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                normalizer,
                probs,
            } => {
                let l = self.value(*logits);
                let j = l.shape[1];
                let scale = up.data[0] / normalizer;
                let mut dl = vec![0.0; l.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(c) = *t {
                        for k in 0..j {
                            let onehot = if k == c { 1.0 } else { 0.0 };
                            dl[r * j + k] = scale * (probs[r * j + k] - onehot);
                        }
                    }
                }
                accumulate(grads, *logits, &l.shape, dl);
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let g = up.data[0] / x.len() as f64;
                accumulate(grads, *input, &x.shape, vec![g; x.len()]);
            }
            Op::SumSquares(input) => {
                let x = self.value(*input);
                let g = up.data[0];
                accumulate(
                    grads,
                    *input,
                    &x.shape,
                    x.data.iter().map(|v| 2.0 * g * v).collect(),
                );
            }
            Op::DotConst { input, weights } => {
                let x = self.value(*input);
                let g = up.data[0];
                accumulate(
                    grads,
                    *input,
                    &x.shape,
                    weights.iter().map(|w| g * w).collect(),
                );
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    if self.req(t) {
                        accumulate(grads, t, &[1], vec![w * up.data[0]]);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], target: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[target.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta)),
    }
}

fn column_sums(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for (a, b) in s.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
            *a += b;
        }
    }
    s
}

// Subgradient 0 at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Writes `softmax(row)` into `probs` and returns `(max, ln Σ exp(row − max))`.
pub(crate) fn log_softmax_into(row: &[f64], probs: &mut [f64]) -> (f64, f64) {
    let mut top = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[top] {
            top = i;
        }
    }
    let m = row[top];
    // The max term is exactly 1; summing the rest separately keeps ln(1 + rest)
    // accurate for confident rows.
    let mut rest = 0.0;
    for (i, (p, &x)) in probs.iter_mut().zip(row).enumerate() {
        *p = (x - m).exp();
        if i != top {
            rest += *p;
        }
    }
    let z = 1.0 + rest;
    for p in probs.iter_mut() {
        *p /= z;
    }
    (m, rest.ln_1p())
}

/// Softmax of one logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; row.len()];
    log_softmax_into(row, &mut p);
    p
}

fn one_hot_classes(targets: &Tensor) -> Result<Vec<usize>> {
    ensure!(targets.shape.len() == 2, "one-hot targets must be [B×J]");
    (0..targets.rows())
        .map(|r| {
            let row = targets.row(r);
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            ensure!(
                ones.len() == 1 && zeros == row.len() - 1,
                "target row {r} is not one-hot: {row:?}"
            );
            Ok(ones[0])
        })
        .collect()
}
