//! A small reverse-mode autodiff tape over 2-D tensors.
//!
//! Each forward op appends a node holding its output and whatever it needs
//! for the backward pass. Parameters live outside the tape in a
//! [`ParamStore`]; their gradients accumulate into a parallel buffer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{gemm_raw, log_sum_exp, matmul, matmul_acc, softmax_in_place, Tensor, View};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embed { table: usize, ids: Vec<Option<usize>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    ConcatCols(Var, Var),
    HybridNll { scores: Var, probs: Vec<f64>, targets: Vec<Vec<usize>>, scale: f64 },
}

struct Node {
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Evaluation graph: dropout disabled.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()], dropout_rng: None }
    }

    /// Training graph: dropout draws from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Graph { dropout_rng: Some(rng), ..Self::new(params) }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params.values[*i],
            (None, _) => unreachable!("only parameter nodes lack a stored value"),
        }
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        match self.nodes[v.0].value.take() {
            Some(t) => t,
            None => self.value(v).clone(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id.0) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, ta, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "bias must be a single row");
        let mut out = self.value(a).clone();
        for chunk in out.data.chunks_mut(r.cols) {
            for (x, b) in chunk.iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `x · W + b` with `W` stored as `in x out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, false, w, false);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data.iter_mut() {
            let u = GELU_C * (*x + 0.044715 * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xt = self.value(x);
        let (rows, cols) = xt.shape();
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xt.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Rows of an embedding table.
    pub fn embed(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.embed_partial(table, &ids)
    }

    /// Rows of an embedding table, with zero rows where `ids` is `None`.
    pub fn embed_partial(&mut self, table: ParamId, ids: &[Option<usize>]) -> Var {
        let t = self.params.get(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                out.row_mut(r).copy_from_slice(t.row(id));
            }
        }
        self.push(out, Op::Embed { table: table.0, ids: ids.to_vec() })
    }

    /// Multi-head scaled dot-product attention over pre-projected inputs.
    /// `q` is `n x d`, `k` and `v` are `m x d`. `causal` requires `n == m`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qt.shape();
        let m = kt.rows;
        assert_eq!(d % heads, 0, "hidden size must divide into heads");
        assert!(!causal || n == m, "causal attention needs square scores");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Tensor::zeros(n, d);
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm_raw(
                scale,
                &qt.data[off..],
                View::strided(n, dh, d, false),
                &kt.data[off..],
                View::strided(m, dh, d, true),
                0.0,
                p,
                View::strided(n, m, m, false),
            );
            for i in 0..n {
                let row = &mut p[i * m..(i + 1) * m];
                if causal {
                    row[i + 1..].iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
                }
                softmax_in_place(row);
            }
            gemm_raw(
                1.0,
                p,
                View::strided(n, m, m, false),
                &vt.data[off..],
                View::strided(m, dh, d, false),
                0.0,
                &mut out.data[off..],
                View::strided(n, dh, d, false),
            );
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if p <= 0.0 || self.dropout_rng.is_none() {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(p) { 0.0 } else { keep }).collect();
        let mut out = self.value(a).clone();
        for (x, m) in out.data.iter_mut().zip(&mask) {
            *x *= m;
        }
        self.push(out, Op::Dropout { a, mask })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.rows, bt.rows, "concat needs equal row counts");
        let cols = at.cols + bt.cols;
        let mut out = Tensor::zeros(at.rows, cols);
        for r in 0..at.rows {
            out.data[r * cols..r * cols + at.cols].copy_from_slice(at.row(r));
            out.data[r * cols + at.cols..(r + 1) * cols].copy_from_slice(bt.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// `scale * sum_t -log sum_{j in targets[t]} softmax(scores[t])_j`.
    pub fn hybrid_nll(&mut self, scores: Var, targets: Vec<Vec<usize>>, scale: f64) -> Var {
        let st = self.value(scores);
        assert_eq!(st.rows, targets.len(), "one target set per score row");
        let mut probs = st.data.clone();
        let mut loss = 0.0;
        for (t, set) in targets.iter().enumerate() {
            assert!(!set.is_empty(), "row {t} has no supervision");
            let row = st.row(t);
            let all = log_sum_exp(row.iter().copied());
            let gold = log_sum_exp(set.iter().map(|&j| row[j]));
            loss += all - gold;
            softmax_in_place(&mut probs[t * st.cols..(t + 1) * st.cols]);
        }
        self.push(Tensor::from_vec(1, 1, vec![loss * scale]), Op::HybridNll { scores, probs, targets, scale })
    }

    /// Accumulates d(output)/d(param) into `param_grads`, seeding with `seed`.
    pub fn backward(&self, output: Var, seed: f64, param_grads: &mut [Tensor]) {
        assert_eq!(self.value(output).len(), 1, "backward starts from a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::from_vec(1, 1, vec![seed]));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, param_grads);
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let (r, c) = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>], param_grads: &mut [Tensor]) {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(i) => param_grads[*i].add_assign(g),
            Op::MatMul { a, ta, b, tb } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da = self.acc(grads, *a);
                if *ta {
                    matmul_acc(da, bt, *tb, g, true);
                } else {
                    matmul_acc(da, g, false, bt, !*tb);
                }
                let db = self.acc(grads, *b);
                if *tb {
                    matmul_acc(db, g, true, at, *ta);
                } else {
                    matmul_acc(db, at, !*ta, g, false);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a).add_assign(g);
                self.acc(grads, *b).add_assign(g);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a).add_assign(g);
                let dr = self.acc(grads, *row);
                for chunk in g.data.chunks(g.cols) {
                    for (x, v) in dr.data.iter_mut().zip(chunk) {
                        *x += v;
                    }
                }
            }
            Op::Scale(a, s) => {
                let da = self.acc(grads, *a);
                for (x, v) in da.data.iter_mut().zip(&g.data) {
                    *x += s * v;
                }
            }
            Op::Gelu(a) => {
                let x = &self.value(*a).data;
                let da = self.acc(grads, *a);
                for ((d, &xv), gv) in da.data.iter_mut().zip(x).zip(&g.data) {
                    let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let cols = g.cols;
                let gv = self.value(*gain).data.clone();
                {
                    let dg = self.acc(grads, *gain);
                    for r in 0..g.rows {
                        for c in 0..cols {
                            dg.data[c] += g.data[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                {
                    let db = self.acc(grads, *bias);
                    for chunk in g.data.chunks(cols) {
                        for (x, v) in db.data.iter_mut().zip(chunk) {
                            *x += v;
                        }
                    }
                }
                let dx = self.acc(grads, *x);
                let mut dxhat = vec![0.0; cols];
                for r in 0..g.rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        dxhat[c] = g.data[r * cols + c] * gv[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * cols + c];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        dx.data[r * cols + c] +=
                            inv_std[r] * (dxhat[c] - mean_d - xhat[r * cols + c] * mean_dx);
                    }
                }
            }
            Op::Embed { table, ids } => {
                let dt = &mut param_grads[*table];
                for (r, id) in ids.iter().enumerate() {
                    let Some(id) = *id else { continue };
                    for (x, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += v;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qt.shape();
                let m = kt.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(m, d);
                let mut dv = Tensor::zeros(m, d);
                let mut dp = vec![0.0; n * m];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * m..(h + 1) * n * m];
                    gemm_raw(
                        1.0,
                        &g.data[off..],
                        View::strided(n, dh, d, false),
                        &vt.data[off..],
                        View::strided(m, dh, d, true),
                        0.0,
                        &mut dp,
                        View::strided(n, m, m, false),
                    );
                    gemm_raw(
                        1.0,
                        p,
                        View::strided(n, m, m, true),
                        &g.data[off..],
                        View::strided(n, dh, d, false),
                        1.0,
                        &mut dv.data[off..],
                        View::strided(m, dh, d, false),
                    );
                    for i in 0..n {
                        let pr = &p[i * m..(i + 1) * m];
                        let dr = &mut dp[i * m..(i + 1) * m];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot) * scale;
                        }
                    }
                    gemm_raw(
                        1.0,
                        &dp,
                        View::strided(n, m, m, false),
                        &kt.data[off..],
                        View::strided(m, dh, d, false),
                        1.0,
                        &mut dq.data[off..],
                        View::strided(n, dh, d, false),
                    );
                    gemm_raw(
                        1.0,
                        &dp,
                        View::strided(n, m, m, true),
                        &qt.data[off..],
                        View::strided(n, dh, d, false),
                        1.0,
                        &mut dk.data[off..],
                        View::strided(m, dh, d, false),
                    );
                }
                self.acc(grads, *q).add_assign(&dq);
                self.acc(grads, *k).add_assign(&dk);
                self.acc(grads, *v).add_assign(&dv);
            }
            Op::Dropout { a, mask } => {
                let da = self.acc(grads, *a);
                for ((x, v), m) in da.data.iter_mut().zip(&g.data).zip(mask) {
                    *x += v * m;
                }
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                let cols = g.cols;
                {
                    let da = self.acc(grads, *a);
                    for r in 0..g.rows {
                        for (x, v) in da.row_mut(r).iter_mut().zip(&g.data[r * cols..r * cols + ac]) {
                            *x += v;
                        }
                    }
                }
                let db = self.acc(grads, *b);
                for r in 0..g.rows {
                    for (x, v) in db.row_mut(r).iter_mut().zip(&g.data[r * cols + ac..(r + 1) * cols]) {
                        *x += v;
                    }
                }
            }
            Op::HybridNll { scores, probs, targets, scale } => {
                let st = self.value(*scores);
                let cols = st.cols;
                let upstream = g.data[0] * scale;
                let ds = self.acc(grads, *scores);
                for (t, set) in targets.iter().enumerate() {
                    let row = st.row(t);
                    let gold = log_sum_exp(set.iter().map(|&j| row[j]));
                    let base = t * cols;
                    for c in 0..cols {
                        ds.data[base + c] += upstream * probs[base + c];
                    }
                    for &j in set {
                        ds.data[base + j] -= upstream * (row[j] - gold).exp();
                    }
                }
            }
        }
    }
}
