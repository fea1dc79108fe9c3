//! Reverse-mode differentiation over a per-batch tape.
//!
//! Each forward pass records operations on a fresh [`Tape`]; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for every node,
//! including the parameter leaves.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Cross-entropy of a single next-token prediction: -log softmax(logits)[target],
/// computed via log-sum-exp.
pub fn word_loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "target {} out of range for {} logits",
            target,
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("word_loss input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Gradient of `word_loss` with respect to the logits: softmax(X) - onehot(y).
pub fn word_loss_grad(logits: &[f64], target: usize) -> Result<Vec<f64>> {
    let mut g = softmax(logits)?;
    if target >= g.len() {
        return Err(Error::InvalidInput("target out of range".into()));
    }
    g[target] -= 1.0;
    Ok(g)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulMask(Var, Tensor),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    RowSoftmax { x: Var, causal: bool },
    Embed { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    SliceRows { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
    BceWithLogit { logit: Var, target: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        debug_assert!(t.all_finite(), "non-finite leaf tensor");
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(t, Op::Add(a, b))
    }

    /// Broadcast-add a row vector `b` of width c to every row of `a` [r, c].
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.nodes[a.0].value.dims2();
        assert_eq!(self.nodes[b.0].value.len(), c, "add_row width mismatch");
        let mut data = self.nodes[a.0].value.data.clone();
        let bv = &self.nodes[b.0].value.data;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        let t = Tensor { shape: self.nodes[a.0].value.shape.clone(), data };
        self.push(t, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        self.push(t, Op::Scale(a, k))
    }

    /// Elementwise multiply by a constant mask (used for dropout).
    pub fn mul_mask(&mut self, a: Var, mask: Tensor) -> Var {
        let ta = &self.nodes[a.0].value;
        assert_eq!(ta.shape, mask.shape, "mask shape mismatch");
        let data = ta.data.iter().zip(&mask.data).map(|(x, m)| x * m).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(t, Op::MulMask(a, mask))
    }

    /// [m,k] @ [k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.nodes[a.0].value.dims2();
        let (k2, n) = self.nodes[b.0].value.dims2();
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut data = vec![0.0; m * n];
        matmul_acc(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, &mut data, m, k, n);
        let shape = if self.nodes[a.0].value.shape.len() == 1 { vec![n] } else { vec![m, n] };
        self.push(Tensor { shape, data }, Op::MatMul(a, b))
    }

    /// [m,k] @ [n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.nodes[a.0].value.dims2();
        let (n, k2) = self.nodes[b.0].value.dims2();
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut data = vec![0.0; m * n];
        matmul_nt_acc(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, &mut data, m, k, n);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMulNT(a, b))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        self.push(t, Op::Gelu(a))
    }

    /// Layer norm over the last dimension of `x` [r, c] with learned gain/bias [c].
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.nodes[x.0].value.dims2();
        assert_eq!(self.nodes[gain.0].value.len(), c);
        assert_eq!(self.nodes[bias.0].value.len(), c);
        let xv = &self.nodes[x.0].value.data;
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor { shape: self.nodes[x.0].value.shape.clone(), data };
        self.push(t, Op::LayerNorm { x, gain, bias })
    }

    /// Row-wise softmax of [r, c]. With `causal`, row i only distributes mass
    /// over columns 0..=i (rows index query positions of an attention score
    /// matrix); masked entries are exactly zero.
    pub fn row_softmax(&mut self, x: Var, causal: bool) -> Var {
        let (r, c) = self.nodes[x.0].value.dims2();
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let hi = if causal { (i + 1).min(c) } else { c };
            let row = &xv[i * c..i * c + hi];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..hi {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum += e;
            }
            for j in 0..hi {
                data[i * c + j] /= sum;
            }
        }
        let t = Tensor { shape: self.nodes[x.0].value.shape.clone(), data };
        self.push(t, Op::RowSoftmax { x, causal })
    }

    /// Gather rows of `table` [v, d] at `ids` -> [ids.len(), d].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.nodes[table.0].value.dims2();
        let tv = &self.nodes[table.0].value.data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {} out of range {}", id, v);
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor { shape: vec![ids.len(), d], data };
        self.push(t, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.nodes[x.0].value.dims2();
        assert!(start + len <= c);
        let xv = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols { x, start, len })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.nodes[x.0].value.dims2();
        assert!(start + len <= r);
        let xv = &self.nodes[x.0].value.data;
        let data = xv[start * c..(start + len) * c].to_vec();
        self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.dims2().0;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.dims2().1).collect::<Vec<_>>().iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let (rp, cp) = self.nodes[p.0].value.dims2();
                assert_eq!(rp, r, "concat_cols row mismatch");
                let pv = &self.nodes[p.0].value.data;
                data.extend_from_slice(&pv[i * cp..(i + 1) * cp]);
            }
        }
        self.push(Tensor { shape: vec![r, total], data }, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over rows: [r, c] -> [c].
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.nodes[x.0].value.dims2();
        let xv = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xv[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        self.push(Tensor { shape: vec![c], data }, Op::MeanRows(x))
    }

    /// Mean over every element -> scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(!xv.is_empty(), "mean_all of empty tensor");
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    /// Per-row cross-entropy of `logits` [t, v] against `targets` [t] -> [t].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (t, v) = self.nodes[logits.0].value.dims2();
        assert_eq!(t, targets.len(), "cross_entropy target count mismatch");
        let lv = &self.nodes[logits.0].value.data;
        let mut data = Vec::with_capacity(t);
        for (i, &y) in targets.iter().enumerate() {
            assert!(y < v, "cross_entropy target out of range");
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.push(lse - row[y]);
        }
        self.push(
            Tensor { shape: vec![t], data },
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    /// Binary cross-entropy of a single logit against target in {0, 1},
    /// computed in a numerically stable form.
    pub fn bce_with_logit(&mut self, logit: Var, target: f64) -> Var {
        let z = self.nodes[logit.0].value.item();
        let loss = z.max(0.0) - target * z + (-z.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceWithLogit { logit, target })
    }

    /// Backpropagate from a scalar root; returns per-node gradients.
    pub fn backward(&mut self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        let slot = &mut grads[v.0];
        match slot {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape.clone();
                *slot = Some(Tensor { shape, data: delta.to_vec() });
            }
        }
    }

    fn acc_zeroed<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        if grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros(&self.nodes[v.0].value.shape));
        }
        grads[v.0].as_mut().unwrap()
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        // Split borrows: read values immutably via raw indexing into self.nodes.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(grads, a, &g.data);
                self.acc(grads, b, &g.data);
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(grads, a, &g.data);
                let (r, c) = self.nodes[a.0].value.dims2();
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (j, gbj) in gb.iter_mut().enumerate() {
                        *gbj += g.data[i * c + j];
                    }
                }
                self.acc(grads, b, &gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga: Vec<f64> = g.data.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data.iter().zip(&self.nodes[a.0].value.data).map(|(x, y)| x * y).collect();
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let ga: Vec<f64> = g.data.iter().map(|x| x * k).collect();
                self.acc(grads, a, &ga);
            }
            Op::MulMask(a, mask) => {
                let a = *a;
                let ga: Vec<f64> = g.data.iter().zip(&mask.data.clone()).map(|(x, m)| x * m).collect();
                self.acc(grads, a, &ga);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.dims2().1;
                // dA = dC @ B^T ; dB = A^T @ dC
                let mut ga = vec![0.0; m * k];
                matmul_nt_acc(&g.data, &self.nodes[b.0].value.data, &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_acc(&self.nodes[a.0].value.data, &g.data, &mut gb, m, k, n);
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.dims2().0;
                // C = A @ B^T : dA = dC @ B ; dB = dC^T @ A
                let mut ga = vec![0.0; m * k];
                matmul_acc(&g.data, &self.nodes[b.0].value.data, &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                matmul_tn_acc(&g.data, &self.nodes[a.0].value.data, &mut gb, m, n, k);
                self.acc(grads, a, &ga);
                self.acc(grads, b, &gb);
            }
            Op::Gelu(a) => {
                let a = *a;
                let ga: Vec<f64> = self.nodes[a.0]
                    .value
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&x, &gy)| {
                        let inner = GELU_C * (x + GELU_A * x * x * x);
                        let t = inner.tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * d
                    })
                    .collect();
                self.acc(grads, a, &ga);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (r, c) = self.nodes[x.0].value.dims2();
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gain.0].value.data;
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let gy = &g.data[i * c..(i + 1) * c];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    for j in 0..c {
                        let dxhat = gy[j] * gv[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[j];
                        gg[j] += gy[j] * xhat[j];
                        gb[j] += gy[j];
                    }
                    mean_dxhat /= c as f64;
                    mean_dxhat_xhat /= c as f64;
                    for j in 0..c {
                        let dxhat = gy[j] * gv[j];
                        gx[i * c + j] = inv * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.acc(grads, x, &gx);
                self.acc(grads, gain, &gg);
                self.acc(grads, bias, &gb);
            }
            Op::RowSoftmax { x, causal } => {
                let (x, causal) = (*x, *causal);
                let (r, c) = self.nodes[idx].value.dims2();
                let yv = &self.nodes[idx].value.data;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let hi = if causal { (i + 1).min(c) } else { c };
                    let y = &yv[i * c..i * c + hi];
                    let gy = &g.data[i * c..i * c + hi];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..hi {
                        gx[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                self.acc(grads, x, &gx);
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table.0].value.dims2().1;
                let gt = self.acc_zeroed(grads, table);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt.data[id * d + j] += g.data[i * d + j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = self.nodes[x.0].value.dims2();
                let gx = self.acc_zeroed(grads, x);
                for i in 0..r {
                    for j in 0..len {
                        gx.data[i * c + start + j] += g.data[i * len + j];
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let c = self.nodes[x.0].value.dims2().1;
                let gx = self.acc_zeroed(grads, x);
                for i in 0..len {
                    for j in 0..c {
                        gx.data[(start + i) * c + j] += g.data[i * c + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.nodes[idx].value.dims2().0;
                let total = self.nodes[idx].value.dims2().1;
                let mut off = 0;
                for p in parts {
                    let cp = self.nodes[p.0].value.dims2().1;
                    let mut gp = vec![0.0; r * cp];
                    for i in 0..r {
                        gp[i * cp..(i + 1) * cp]
                            .copy_from_slice(&g.data[i * total + off..i * total + off + cp]);
                    }
                    self.acc(grads, p, &gp);
                    off += cp;
                }
            }
            Op::MeanRows(x) => {
                let x = *x;
                let (r, c) = self.nodes[x.0].value.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g.data[j] / r as f64;
                    }
                }
                self.acc(grads, x, &gx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len();
                let gx = vec![g.data[0] / n as f64; n];
                self.acc(grads, x, &gx);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let (t, v) = self.nodes[logits.0].value.dims2();
                let lv = self.nodes[logits.0].value.data.clone();
                let gx = self.acc_zeroed(grads, logits);
                for (i, &y) in targets.iter().enumerate() {
                    let row = &lv[i * v..(i + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    let gi = g.data[i];
                    for (j, &rj) in row.iter().enumerate() {
                        let p = (rj - max).exp() / sum;
                        gx.data[i * v + j] += gi * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                let _ = t;
            }
            Op::BceWithLogit { logit, target } => {
                let (logit, target) = (*logit, *target);
                let z = self.nodes[logit.0].value.item();
                let sig = 1.0 / (1.0 + (-z).exp());
                self.acc(grads, logit, &[g.data[0] * (sig - target)]);
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_shift() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[5.0, 5.0, 5.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let b = softmax(&[101.0, 102.0, 103.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_reference_values() {
        // e^x / sum(e^x) at high precision for [1,2,3]
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!((p[0] - 0.09003057).abs() < 1e-7);
        assert!((p[1] - 0.24472847).abs() < 1e-7);
        assert!((p[2] - 0.66524096).abs() < 1e-7);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn word_loss_values() {
        let l = word_loss(&[0.0; 4], 2).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        let l = word_loss(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((l - 0.4076059).abs() < 1e-6);
        let l = word_loss(&[10.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((l - (1.0 + 3.0 * (-10.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 1.3619e-4).abs() < 1e-8);
        assert!(word_loss(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn word_loss_shift_invariance() {
        for c in [-3.0, 0.1, 42.0] {
            let a = word_loss(&[0.3, -1.2, 2.0], 1).unwrap();
            let b = word_loss(&[0.3 + c, -1.2 + c, 2.0 + c], 1).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn word_loss_grad_matches_closed_form() {
        let logits = [0.5, -0.3, 1.7, 0.0];
        let g = word_loss_grad(&logits, 2).unwrap();
        let p = softmax(&logits).unwrap();
        for j in 0..4 {
            let expect = p[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g[j] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_through_matmul_chain() {
        // f = mean(A @ B); check dA numerically on one coordinate
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.7]).unwrap());
        let c = tape.matmul(a, b);
        let loss = tape.mean_all(c);
        let grads = tape.backward(loss);
        let ga = grads.get(a).unwrap().clone();

        let eps = 1e-6;
        for coord in [0usize, 4] {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let mut av = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
                av[coord] += delta;
                let a = t.leaf(Tensor::from_vec(&[2, 3], av).unwrap());
                let b = t.leaf(Tensor::from_vec(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.3, 0.7]).unwrap());
                let c = t.matmul(a, b);
                let l = t.mean_all(c);
                t.value(l).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((ga.data[coord] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn causal_softmax_rows_are_prefix_distributions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 3], vec![0.5, 9.0, 9.0, 0.1, 0.2, 9.0, 1.0, 2.0, 3.0]).unwrap());
        let y = tape.row_softmax(x, true);
        let v = tape.value(y);
        assert_eq!(v.data[0], 1.0);
        assert_eq!(v.data[1], 0.0);
        assert_eq!(v.data[2], 0.0);
        assert_eq!(v.data[5], 0.0);
        let s: f64 = v.data[3..5].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let s: f64 = v.data[6..9].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_naive() {
        for (z, y) in [(0.7, 1.0), (-2.0, 0.0), (3.5, 0.0), (-0.1, 1.0)] {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::scalar(z));
            let loss = tape.bce_with_logit(l, y);
            let p = sigmoid(z);
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((tape.value(loss).item() - naive).abs() < 1e-12);
        }
    }
}
