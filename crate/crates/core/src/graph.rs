//! Reverse-mode autodiff over a tensor-level tape.
//!
//! Each node is a whole-tensor operation with a hand-written backward rule,
//! so matmuls and attention run at vectorized speed instead of per-scalar
//! tape overhead. The op set is exactly what the velocity model and the
//! FM / DPO / GRPO losses need.

use crate::error::Result;
use crate::positional::{PositionId, RopeTable};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

const NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf { slot: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, #[allow(dead_code)] f64),
    Matmul(NodeId, NodeId),
    /// x [n,d] + bias [d] broadcast over rows.
    AddRow(NodeId, NodeId),
    /// x * (1 + scale) + shift, scale/shift [d] broadcast over rows.
    RowAffine { x: NodeId, scale: NodeId, shift: NodeId },
    /// x * gate, gate [d] broadcast over rows.
    RowScale { x: NodeId, gate: NodeId },
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, rows: usize },
    /// Contiguous slice of a rank-1 tensor.
    Slice { x: NodeId, start: usize, len: usize },
    Gather { table: NodeId, indices: Vec<usize> },
    LayerNorm(NodeId),
    /// RMS-normalize each contiguous group of `group` channels per row.
    RmsNormGroups { x: NodeId, group: usize },
    Silu(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    SumSq(NodeId),
    Rope { x: NodeId, ids: Vec<PositionId>, table: RopeTable, heads: usize },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { slot: None })
    }

    pub fn param(&mut self, t: Tensor, slot: usize) -> NodeId {
        self.push(t, Op::Leaf { slot: Some(slot) })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("sub shapes");
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y).expect("mul shapes");
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.cols();
        assert_eq!(bv.len(), d, "bias length");
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for c in 0..d {
                out.data[r * d + c] += bv.data[c];
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    pub fn row_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = self.value(x);
        let sv = self.value(scale);
        let hv = self.value(shift);
        let d = xv.cols();
        assert_eq!(sv.len(), d);
        assert_eq!(hv.len(), d);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for c in 0..d {
                out.data[r * d + c] = xv.data[r * d + c] * (1.0 + sv.data[c]) + hv.data[c];
            }
        }
        self.push(out, Op::RowAffine { x, scale, shift })
    }

    pub fn row_scale(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let xv = self.value(x);
        let gv = self.value(gate);
        let d = xv.cols();
        assert_eq!(gv.len(), d);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            for c in 0..d {
                out.data[r * d + c] *= gv.data[c];
            }
        }
        self.push(out, Op::RowScale { x, gate })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let d = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), d, "concat_rows col mismatch");
            rows += pv.rows();
            data.extend_from_slice(&pv.data);
        }
        self.push(Tensor::new(vec![rows, d], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let data = xv.data[start * d..(start + rows) * d].to_vec();
        self.push(Tensor::new(vec![rows, d], data), Op::SliceRows { x, start, rows })
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let data = self.value(x).data[start..start + len].to_vec();
        self.push(Tensor::from_vec(data), Op::Slice { x, start, len })
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv.data[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![indices.len(), d], data),
            Op::Gather { table, indices: indices.to_vec() },
        )
    }

    pub fn layer_norm(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for c in 0..d {
                out.data[r * d + c] = (row[c] - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm(x))
    }

    pub fn rms_norm_groups(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len() % group, 0);
        let mut out = xv.clone();
        for g in 0..xv.len() / group {
            let seg = &xv.data[g * group..(g + 1) * group];
            let ms = seg.iter().map(|v| v * v).sum::<f64>() / group as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            for c in 0..group {
                out.data[g * group + c] = seg[c] * inv;
            }
        }
        self.push(out, Op::RmsNormGroups { x, group })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|z| z * crate::flow::sigmoid(z));
        self.push(v, Op::Silu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|z| {
            if z > 30.0 {
                z
            } else {
                z.exp().ln_1p()
            }
        });
        self.push(v, Op::Softplus(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x).map(|z| z.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), f64::min).expect("minimum shapes");
        self.push(v, Op::Minimum(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data.iter().sum());
        self.push(v, Op::Sum(x))
    }

    pub fn sum_sq(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum_sq());
        self.push(v, Op::SumSq(x))
    }

    /// Mean of (a - b)^2 over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b);
        let ss = self.sum_sq(d);
        self.scale(ss, 1.0 / n)
    }

    /// Rotate every head slice of x [n, heads*head_dim] by the token's id.
    pub fn rope(&mut self, x: NodeId, ids: &[PositionId], table: &RopeTable, heads: usize) -> NodeId {
        let xv = self.value(x);
        let n = xv.rows();
        assert_eq!(n, ids.len(), "rope ids per token");
        let width = xv.cols();
        let head_dim = width / heads;
        let mut out = xv.clone();
        for r in 0..n {
            for h in 0..heads {
                let s = r * width + h * head_dim;
                table.rotate(&mut out.data[s..s + head_dim], &ids[r], 1.0);
            }
        }
        self.push(
            out,
            Op::Rope { x, ids: ids.to_vec(), table: table.clone(), heads },
        )
    }

    /// Joint multi-head softmax attention over all rows (no mask).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let n = qv.rows();
        let width = qv.cols();
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor::zeros(vec![n, width]);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * hd;
            let mut p = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                let qi = &qv.data[i * width + off..i * width + off + hd];
                let mut row_max = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &kv.data[j * width + off..j * width + off + hd];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    p.data[i * n + j] = s;
                    row_max = row_max.max(s);
                }
                let mut z = 0.0;
                for j in 0..n {
                    let e = (p.data[i * n + j] - row_max).exp();
                    p.data[i * n + j] = e;
                    z += e;
                }
                for j in 0..n {
                    p.data[i * n + j] /= z;
                }
                for j in 0..n {
                    let pij = p.data[i * n + j];
                    if pij == 0.0 {
                        continue;
                    }
                    let vj = &vv.data[j * width + off..j * width + off + hd];
                    let orow = &mut out.data[i * width + off..i * width + off + hd];
                    for (o, &vx) in orow.iter_mut().zip(vj) {
                        *o += pij * vx;
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Gradients of the scalar at `loss` w.r.t. every param slot.
    /// Returns `slots` entries; slots the graph never touched stay `None`.
    pub fn backward(&self, loss: NodeId, slots: usize) -> Result<Vec<Option<Tensor>>> {
        assert!(self.value(loss).len() == 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape.clone(), vec![1.0]));
        let mut out: Vec<Option<Tensor>> = (0..slots).map(|_| None).collect();

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf { slot } => {
                    if let Some(s) = slot {
                        acc_opt(&mut out[*s], &g);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[b.0].value, |x, y| x * y)?;
                    let db = g.zip(&self.nodes[a.0].value, |x, y| x * y)?;
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g.scale(*c)),
                Op::AddConst(a, _) => acc(&mut grads, *a, &g),
                Op::Matmul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    acc(&mut grads, *a, &matmul_nt(&g, bv));
                    acc(&mut grads, *b, &matmul_tn(av, &g));
                }
                Op::AddRow(x, bias) => {
                    acc(&mut grads, *x, &g);
                    acc(&mut grads, *bias, &col_sum(&g));
                }
                Op::RowAffine { x, scale, shift } => {
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[scale.0].value;
                    let d = xv.cols();
                    let rows = xv.rows();
                    let mut dx = g.clone();
                    let mut ds = Tensor::zeros(vec![d]);
                    let mut dh = Tensor::zeros(vec![d]);
                    for r in 0..rows {
                        for c in 0..d {
                            let gv = g.data[r * d + c];
                            dx.data[r * d + c] = gv * (1.0 + sv.data[c]);
                            ds.data[c] += gv * xv.data[r * d + c];
                            dh.data[c] += gv;
                        }
                    }
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *scale, &ds);
                    acc(&mut grads, *shift, &dh);
                }
                Op::RowScale { x, gate } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gate.0].value;
                    let d = xv.cols();
                    let mut dx = g.clone();
                    let mut dg = Tensor::zeros(vec![d]);
                    for r in 0..xv.rows() {
                        for c in 0..d {
                            let gg = g.data[r * d + c];
                            dx.data[r * d + c] = gg * gv.data[c];
                            dg.data[c] += gg * xv.data[r * d + c];
                        }
                    }
                    acc(&mut grads, *x, &dx);
                    acc(&mut grads, *gate, &dg);
                }
                Op::ConcatRows(parts) => {
                    let d = node.value.cols();
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let dp = Tensor::new(
                            vec![rows, d],
                            g.data[start * d..(start + rows) * d].to_vec(),
                        );
                        acc(&mut grads, p, &dp);
                        start += rows;
                    }
                }
                Op::SliceRows { x, start, rows } => {
                    let xv = &self.nodes[x.0].value;
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape.clone());
                    dx.data[start * d..(start + rows) * d].copy_from_slice(&g.data);
                    acc(&mut grads, *x, &dx);
                }
                Op::Slice { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(xv.shape.clone());
                    dx.data[*start..start + len].copy_from_slice(&g.data);
                    acc(&mut grads, *x, &dx);
                }
                Op::Gather { table, indices } => {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape.clone());
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            dt.data[i * d + c] += g.data[r * d + c];
                        }
                    }
                    acc(&mut grads, *table, &dt);
                }
                Op::LayerNorm(x) => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &node.value;
                    let d = xv.cols();
                    let mut dx = Tensor::zeros(xv.shape.clone());
                    for r in 0..xv.rows() {
                        let row = &xv.data[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + NORM_EPS).sqrt();
                        let grow = &g.data[r * d..(r + 1) * d];
                        let yrow = &yv.data[r * d..(r + 1) * d];
                        let gmean = grow.iter().sum::<f64>() / d as f64;
                        let gymean = grow
                            .iter()
                            .zip(yrow)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx.data[r * d + c] = inv * (grow[c] - gmean - yrow[c] * gymean);
                        }
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::RmsNormGroups { x, group } => {
                    let xv = &self.nodes[x.0].value;
                    let n = *group;
                    let mut dx = Tensor::zeros(xv.shape.clone());
                    for gi in 0..xv.len() / n {
                        let seg = &xv.data[gi * n..(gi + 1) * n];
                        let gseg = &g.data[gi * n..(gi + 1) * n];
                        let ms = seg.iter().map(|v| v * v).sum::<f64>() / n as f64;
                        let r = (ms + NORM_EPS).sqrt();
                        let s: f64 = gseg.iter().zip(seg).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx.data[gi * n + c] =
                                gseg[c] / r - seg[c] * s / (n as f64 * r * r * r);
                        }
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.zip(xv, |gv, z| {
                        let s = crate::flow::sigmoid(z);
                        gv * s * (1.0 + z * (1.0 - s))
                    })?;
                    acc(&mut grads, *x, &dx);
                }
                Op::Exp(x) => {
                    let dx = g.zip(&node.value, |gv, y| gv * y)?;
                    acc(&mut grads, *x, &dx);
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.zip(xv, |gv, z| gv * crate::flow::sigmoid(z))?;
                    acc(&mut grads, *x, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.zip(xv, |gv, z| if z > *lo && z < *hi { gv } else { 0.0 })?;
                    acc(&mut grads, *x, &dx);
                }
                Op::Minimum(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = Tensor::zeros(av.shape.clone());
                    let mut db = Tensor::zeros(bv.shape.clone());
                    for i in 0..g.len() {
                        if av.data[i] <= bv.data[i] {
                            da.data[i] = g.data[i];
                        } else {
                            db.data[i] = g.data[i];
                        }
                    }
                    acc(&mut grads, *a, &da);
                    acc(&mut grads, *b, &db);
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = Tensor::new(xv.shape.clone(), vec![g.item(); xv.len()]);
                    acc(&mut grads, *x, &dx);
                }
                Op::SumSq(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = xv.scale(2.0 * g.item());
                    acc(&mut grads, *x, &dx);
                }
                Op::Rope { x, ids, table, heads } => {
                    let width = node.value.cols();
                    let head_dim = width / heads;
                    let mut dx = g.clone();
                    for r in 0..node.value.rows() {
                        for h in 0..*heads {
                            let s = r * width + h * head_dim;
                            table.rotate(&mut dx.data[s..s + head_dim], &ids[r], -1.0);
                        }
                    }
                    acc(&mut grads, *x, &dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    let n = qv.rows();
                    let width = qv.cols();
                    let hd = width / heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.shape.clone());
                    let mut dk = Tensor::zeros(kv.shape.clone());
                    let mut dv = Tensor::zeros(vv.shape.clone());
                    for h in 0..*heads {
                        let off = h * hd;
                        let p = &probs[h];
                        // dV = P^T dO
                        for j in 0..n {
                            for i in 0..n {
                                let pij = p.data[i * n + j];
                                if pij == 0.0 {
                                    continue;
                                }
                                for c in 0..hd {
                                    dv.data[j * width + off + c] +=
                                        pij * g.data[i * width + off + c];
                                }
                            }
                        }
                        // dS = P o (dP - rowsum(dP o P)), dP = dO V^T
                        for i in 0..n {
                            let gi = &g.data[i * width + off..i * width + off + hd];
                            let mut dp = vec![0.0; n];
                            for (j, dpj) in dp.iter_mut().enumerate() {
                                let vj = &vv.data[j * width + off..j * width + off + hd];
                                *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            }
                            let dot: f64 = dp
                                .iter()
                                .enumerate()
                                .map(|(j, d)| d * p.data[i * n + j])
                                .sum();
                            for j in 0..n {
                                let ds = p.data[i * n + j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..hd {
                                    dq.data[i * width + off + c] += ds * kv.data[j * width + off + c];
                                    dk.data[j * width + off + c] += ds * qv.data[i * width + off + c];
                                }
                            }
                        }
                    }
                    acc(&mut grads, *q, &dq);
                    acc(&mut grads, *k, &dk);
                    acc(&mut grads, *v, &dv);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    acc_opt(&mut grads[id.0], g);
}

fn acc_opt(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g.clone()),
    }
}

/// A @ B^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[0];
    assert_eq!(b.shape[1], k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// A^T @ B
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    assert_eq!(b.shape[0], k);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let ar = &a.data[p * m..(p + 1) * m];
        let br = &b.data[p * n..(p + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Sum of rows -> [d]
fn col_sum(g: &Tensor) -> Tensor {
    let d = g.cols();
    let mut out = Tensor::zeros(vec![d]);
    for r in 0..g.rows() {
        for c in 0..d {
            out.data[c] += g.data[r * d + c];
        }
    }
    out
}
