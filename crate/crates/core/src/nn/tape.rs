//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records one forward pass. Parameters are referenced from a
//! borrowed [`ParamStore`] rather than copied; their gradients land in a
//! [`Gradients`] buffer aligned with the store.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        table: ParamId,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    Cols {
        x: Var,
        start: usize,
    },
    Rows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaskedXent {
        logits: Var,
        support: Vec<usize>,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id).view(),
            _ => node
                .value
                .as_ref()
                .expect("non-param node has a value")
                .view(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows `ids` of a parameter table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).mapv(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax where row `i` sees columns `0..=i + offset`.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let end = (i + offset + 1).min(row.len());
            let max = row
                .slice(s![..end])
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for j in 0..end {
                let e = (row[j] - max).exp();
                out[[i, j]] = e;
                z += e;
            }
            for j in 0..end {
                out[[i, j]] /= z;
            }
        }
        self.push(out, Op::CausalSoftmax(x))
    }

    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Cols { x, start })
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::Rows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        self.push(out, Op::MeanRows(x))
    }

    /// `-ln softmax(logits)[label]` with the softmax taken over `support` only.
    pub fn masked_cross_entropy(&mut self, logits: Var, support: &[usize], label: usize) -> Var {
        let lv = self.value(logits);
        let row = lv.row(0);
        let max = support
            .iter()
            .map(|&l| row[l])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = support.iter().map(|&l| (row[l] - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let pos = support
            .iter()
            .position(|&l| l == label)
            .expect("label in support");
        let loss = -(probs[pos].max(f64::MIN_POSITIVE)).ln();
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::MaskedXent {
                logits,
                support: support.to_vec(),
                label,
                probs,
            },
        )
    }

    /// Backpropagates `seed * d(root)` into `grads`.
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) {
        let mut g: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        let rv = self.value(root);
        g[root.0] = Some(Array2::from_elem(rv.raw_dim(), seed));

        fn acc(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
            match slot {
                Some(s) => *s += &delta,
                None => *slot = Some(delta),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, &dy),
                Op::Gather { table, ids } => {
                    let gt = grads.get_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &dy.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    acc(&mut g[a.0], da);
                    acc(&mut g[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut g[a.0], da);
                    acc(&mut g[b.0], db);
                }
                Op::Add(a, b) => {
                    acc(&mut g[b.0], dy.clone());
                    acc(&mut g[a.0], dy);
                }
                Op::AddRow(a, row) => {
                    let dr = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g[row.0], dr);
                    acc(&mut g[a.0], dy);
                }
                Op::Scale(a, c) => acc(&mut g[a.0], dy.mapv(|v| v * c)),
                Op::Gelu(a) => {
                    let mut dx = self.value(*a).mapv(gelu_grad);
                    dx *= &dy;
                    acc(&mut g[a.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * &gv;
                    let mut dx = Array2::zeros(dy.raw_dim());
                    for r in 0..dy.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        for c in 0..dy.ncols() {
                            dx[[r, c]] = inv_std[r] / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut g[gamma.0], dgamma);
                    acc(&mut g[beta.0], dbeta);
                    acc(&mut g[x.0], dx);
                }
                Op::CausalSoftmax(x) => {
                    let y = self.nodes[i].value.as_ref().expect("value");
                    let mut dx = Array2::zeros(dy.raw_dim());
                    for r in 0..dy.nrows() {
                        let dot = dy.row(r).dot(&y.row(r));
                        for c in 0..dy.ncols() {
                            dx[[r, c]] = y[[r, c]] * (dy[[r, c]] - dot);
                        }
                    }
                    acc(&mut g[x.0], dx);
                }
                Op::Cols { x, start } => {
                    let shape = self.value(*x).raw_dim();
                    let mut dx = Array2::zeros(shape);
                    dx.slice_mut(s![.., *start..*start + dy.ncols()])
                        .assign(&dy);
                    acc(&mut g[x.0], dx);
                }
                Op::Rows { x, start } => {
                    let shape = self.value(*x).raw_dim();
                    let mut dx = Array2::zeros(shape);
                    dx.slice_mut(s![*start..*start + dy.nrows(), ..])
                        .assign(&dy);
                    acc(&mut g[x.0], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut g[p.0], dy.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).nrows();
                    let each = dy.mapv(|v| v / rows as f64);
                    let dx = each.broadcast((rows, dy.ncols())).expect("row").to_owned();
                    acc(&mut g[x.0], dx);
                }
                Op::MaskedXent {
                    logits,
                    support,
                    label,
                    probs,
                } => {
                    let upstream = dy[[0, 0]];
                    let cols = self.value(*logits).ncols();
                    let mut dx = Array2::zeros((1, cols));
                    for (&l, &p) in support.iter().zip(probs) {
                        dx[[0, l]] = upstream * (p - if l == *label { 1.0 } else { 0.0 });
                    }
                    acc(&mut g[logits.0], dx);
                }
            }
        }
    }
}
