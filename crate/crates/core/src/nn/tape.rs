//! Reverse-mode tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse,
//! accumulating vector-Jacobian products into node gradients and into the
//! gradient slots of the [`ParamStore`] tensors referenced by layer ops.
//!
//! Shape errors in the primitive ops are programming errors and panic; the
//! layer-level entry points in `layers.rs` validate shapes and return
//! `Result`.

use crate::error::{Error, Result};

use super::kernels::{self, matmul_acc, matmul_wt_acc, matmul_xt_acc, sigmoid, Strided};
use super::{ParamId, ParamStore, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous column range of a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub var: Var,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

struct LstmParams {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

enum Op<T> {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Slice(View),
    ConcatCols(Vec<View>),
    StackRows(Vec<View>),
    Rows(Var, usize),
    CumsumBlocks(Var, usize),
    Dense {
        x: View,
        w: ParamId,
        b: ParamId,
        act: Activation,
    },
    LstmCell {
        inputs: Vec<View>,
        prev: Option<Var>,
        params: LstmParams,
        /// Per row: activated gates `[i f g o]` then `tanh(c)`.
        cache: Vec<T>,
    },
    NormalizeRows(Var),
    QuatBoxminus {
        est: Var,
        truth: Vec<T>,
    },
    QuatRotate {
        q: Var,
        v: Vec<T>,
    },
    CovFromParams(Var),
    GaussianNll {
        delta: Var,
        cov: Var,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and gradient so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        assert!(!self.consumed, "tape already differentiated; call reset()");
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient flows out of the tape through it).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant: data length");
        self.push(rows, cols, data, Op::Input)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar: node is not 1x1");
        n.value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn view(&self, v: Var) -> View {
        View {
            var: v,
            start: 0,
            len: self.nodes[v.0].cols,
        }
    }

    pub fn cols(&self, v: Var, start: usize, len: usize) -> View {
        assert!(start + len <= self.nodes[v.0].cols, "cols: range out of bounds");
        View { var: v, start, len }
    }

    /// Copies a view's values into a dense `rows × len` buffer.
    pub fn view_values(&self, view: View) -> Vec<T> {
        let n = &self.nodes[view.var.0];
        let s = self.strided(view);
        (0..n.rows).flat_map(|r| s.row(r).iter().copied()).collect()
    }

    fn strided(&self, view: View) -> Strided<'_, T> {
        let n = &self.nodes[view.var.0];
        Strided {
            data: &n.value,
            stride: n.cols,
            offset: view.start,
            len: view.len,
        }
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    fn same_shape(&self, a: Var, b: Var) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "elementwise op on mismatched shapes");
        sa
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.same_shape(a, b);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, value, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of empty node");
        let s: T = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s / T::lit(n as f64)], Op::Mean(a))
    }

    /// Row-wise sum: `rows × cols -> rows × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let value = self
            .value(a)
            .chunks_exact(c)
            .map(|row| row.iter().copied().sum())
            .collect();
        self.push(r, 1, value, Op::SumCols(a))
    }

    pub fn slice(&mut self, view: View) -> Var {
        let rows = self.rows(view.var);
        let value = self.view_values(view);
        self.push(rows, view.len, value, Op::Slice(view))
    }

    pub fn concat_cols(&mut self, views: &[View]) -> Var {
        assert!(!views.is_empty(), "concat_cols: no inputs");
        let rows = self.rows(views[0].var);
        assert!(
            views.iter().all(|v| self.rows(v.var) == rows),
            "concat_cols: row mismatch"
        );
        let cols: usize = views.iter().map(|v| v.len).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in views {
                value.extend_from_slice(self.strided(*v).row(r));
            }
        }
        self.push(rows, cols, value, Op::ConcatCols(views.to_vec()))
    }

    /// Stacks equally wide views on top of each other (first view = top rows).
    pub fn stack_rows(&mut self, views: &[View]) -> Var {
        assert!(!views.is_empty(), "stack_rows: no inputs");
        let cols = views[0].len;
        assert!(views.iter().all(|v| v.len == cols), "stack_rows: width mismatch");
        let mut value = Vec::new();
        let mut rows = 0;
        for v in views {
            rows += self.rows(v.var);
            value.extend(self.view_values(*v));
        }
        self.push(rows, cols, value, Op::StackRows(views.to_vec()))
    }

    /// Rows `start..start + len` of `a`.
    pub fn rows_range(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r, "rows_range: range out of bounds");
        let value = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(len, c, value, Op::Rows(a, start))
    }

    /// Running sum over consecutive blocks of `block` rows: for row layout
    /// `(step, lane)` with `block` lanes, `out[t, b] = Σ_{s ≤ t} in[s, b]`.
    pub fn cumsum_blocks(&mut self, a: Var, block: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(
            block > 0 && r % block == 0,
            "cumsum_blocks: rows not a multiple of block"
        );
        let width = block * c;
        let mut value = self.value(a).to_vec();
        for t in 1..r / block {
            let (head, tail) = value.split_at_mut(t * width);
            let prev = &head[(t - 1) * width..];
            for (x, &p) in tail[..width].iter_mut().zip(prev) {
                *x += p;
            }
        }
        self.push(r, c, value, Op::CumsumBlocks(a, block))
    }

    /// `act(x · W + b)` with `W: in × out`, `b: out`.
    pub fn dense(&mut self, store: &ParamStore<T>, x: View, w: ParamId, b: ParamId, act: Activation) -> Var {
        let wt = store.get(w);
        let bt = store.get(b);
        let out = bt.len();
        assert_eq!(wt.shape(), &[x.len, out], "dense: weight shape");
        let rows = self.rows(x.var);
        let mut value: Vec<T> = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            value.extend_from_slice(bt.data());
        }
        matmul_acc(&mut value, out, self.strided(x), wt.data());
        if act == Activation::Tanh {
            value.iter_mut().for_each(|v| *v = v.tanh());
        }
        self.push(rows, out, value, Op::Dense { x, w, b, act })
    }

    /// One LSTM cell step. `inputs` are concatenated column-wise to form the
    /// cell input; `prev` is the previous `[h | c]` node (zeros when `None`).
    /// Returns the new `[h | c]` node (`rows × 2·hidden`).
    #[allow(clippy::too_many_arguments)]
    pub fn lstm_cell(
        &mut self,
        store: &ParamStore<T>,
        inputs: &[View],
        prev: Option<Var>,
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
        hidden: usize,
    ) -> Var {
        let h = hidden;
        let g4 = 4 * h;
        let rows = self.rows(inputs[0].var);
        let in_total: usize = inputs.iter().map(|v| v.len).sum();
        let (wxt, wht, bt) = (store.get(wx), store.get(wh), store.get(b));
        assert_eq!(wxt.shape(), &[in_total, g4], "lstm: input weight shape");
        assert_eq!(wht.shape(), &[h, g4], "lstm: recurrent weight shape");
        assert_eq!(bt.len(), g4, "lstm: bias length");
        if let Some(p) = prev {
            assert_eq!(self.shape(p), (rows, 2 * h), "lstm: previous state shape");
        }

        let mut z: Vec<T> = Vec::with_capacity(rows * g4);
        for _ in 0..rows {
            z.extend_from_slice(bt.data());
        }
        let mut off = 0;
        for v in inputs {
            assert_eq!(self.rows(v.var), rows, "lstm: input rows");
            matmul_acc(&mut z, g4, self.strided(*v), &wxt.data()[off * g4..(off + v.len) * g4]);
            off += v.len;
        }
        if let Some(p) = prev {
            let hv = self.strided(View {
                var: p,
                start: 0,
                len: h,
            });
            matmul_acc(&mut z, g4, hv, wht.data());
        }

        let mut cache = vec![T::zero(); rows * 5 * h];
        let mut out = vec![T::zero(); rows * 2 * h];
        for r in 0..rows {
            let zr = &z[r * g4..(r + 1) * g4];
            let cr = &mut cache[r * 5 * h..(r + 1) * 5 * h];
            let or = &mut out[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let i = sigmoid(zr[j]);
                let f = sigmoid(zr[h + j]);
                let g = zr[2 * h + j].tanh();
                let o = sigmoid(zr[3 * h + j]);
                let cp = match prev {
                    Some(p) => self.nodes[p.0].value[r * 2 * h + h + j],
                    None => T::zero(),
                };
                let c = f * cp + i * g;
                let tc = c.tanh();
                cr[j] = i;
                cr[h + j] = f;
                cr[2 * h + j] = g;
                cr[3 * h + j] = o;
                cr[4 * h + j] = tc;
                or[j] = o * tc;
                or[h + j] = c;
            }
        }
        self.push(
            rows,
            2 * h,
            out,
            Op::LstmCell {
                inputs: inputs.to_vec(),
                prev,
                params: LstmParams { wx, wh, b, hidden },
                cache,
            },
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let tiny = T::lit(1e-12);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_exact_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(tiny);
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.push(r, c, value, Op::NormalizeRows(a))
    }

    /// Row-wise manifold difference `truth ⊟ est = 2·log(est⁻¹ ⊗ truth)`.
    /// `est` holds unit quaternions `(w, x, y, z)` per row; `truth` is constant.
    pub fn quat_boxminus(&mut self, est: Var, truth: Vec<T>) -> Var {
        let (r, c) = self.shape(est);
        assert_eq!(c, 4, "quat_boxminus: est must have 4 columns");
        assert_eq!(truth.len(), r * 4, "quat_boxminus: truth length");
        let ev = self.value(est);
        let mut value = Vec::with_capacity(r * 3);
        for (e, t) in ev.chunks_exact(4).zip(truth.chunks_exact(4)) {
            let (d, _) = relative_quat(e, t);
            let (k, _, _) = log_coeffs(d[0], norm3(&d[1..]));
            value.extend(d[1..].iter().map(|&x| T::lit(2.0) * k * x));
        }
        self.push(r, 3, value, Op::QuatBoxminus { est, truth })
    }

    /// Row-wise rotation `R(q)·v` of constant vectors `v` (`rows × 3`) by the
    /// quaternions `q` (`rows × 4`, unit), evaluated as
    /// `v + 2w(u×v) + 2u×(u×v)` with `q = (w, u)`.
    pub fn quat_rotate(&mut self, q: Var, v: Vec<T>) -> Var {
        let (r, c) = self.shape(q);
        assert_eq!(c, 4, "quat_rotate: q must have 4 columns");
        assert_eq!(v.len(), r * 3, "quat_rotate: v length");
        let value = self
            .value(q)
            .chunks_exact(4)
            .zip(v.chunks_exact(3))
            .flat_map(|(q, v)| {
                let u = [q[1], q[2], q[3]];
                let uv = cross(&u, v);
                let uuv = cross(&u, &uv);
                let two = T::lit(2.0);
                std::array::from_fn::<T, 3, _>(|k| v[k] + two * (q[0] * uv[k] + uuv[k]))
            })
            .collect();
        self.push(r, 3, value, Op::QuatRotate { q, v })
    }

    /// Maps 6 raw parameters per row to the unique covariance entries
    /// `[s11, s22, s33, s12, s13, s23]`.
    ///
    /// The first three parameters are log standard deviations. The last three
    /// pass through `0.99·tanh` and give the 1-2 and 1-3 correlations and the
    /// 2-3 partial correlation given axis 1, so every output is positive definite.
    pub fn cov_from_params(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(c, 6, "cov_from_params: expected 6 columns");
        let value = self.value(a).chunks_exact(6).flat_map(|p| cov_entries(p)).collect();
        self.push(r, 6, value, Op::CovFromParams(a))
    }

    /// Row-wise Gaussian negative log likelihood
    /// `½ δᵀ Σ⁻¹ δ + ½ ln|Σ|` with `Σ` given as unique entries.
    pub fn gaussian_nll(&mut self, delta: Var, cov: Var) -> Var {
        let (r, c) = self.shape(delta);
        assert_eq!(c, 3, "gaussian_nll: delta must have 3 columns");
        assert_eq!(self.shape(cov), (r, 6), "gaussian_nll: cov shape");
        let half = T::lit(0.5);
        let value = self
            .value(delta)
            .chunks_exact(3)
            .zip(self.value(cov).chunks_exact(6))
            .map(|(d, s)| {
                let (inv, logdet) = spd_inverse(s);
                half * quad_form(&inv, d) + half * logdet
            })
            .collect();
        self.push(r, 1, value, Op::GaussianNll { delta, cov })
    }

    /// Reverse pass from a `1 × 1` loss. May be called once per recording.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, store);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore<T>) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        let one = T::one();
        match &node.op {
            Op::Input => {}
            Op::Add(a, b) => {
                add_into(acc(grads, nodes, *a), g);
                add_into(acc(grads, nodes, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, nodes, *a), g);
                for (d, &x) in acc(grads, nodes, *b).iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(vb) {
                    *d += x * y;
                }
                for ((d, &x), &y) in acc(grads, nodes, *b).iter_mut().zip(g).zip(va) {
                    *d += x * y;
                }
            }
            Op::Scale(a, k) => {
                for (d, &x) in acc(grads, nodes, *a).iter_mut().zip(g) {
                    *d += x * *k;
                }
            }
            Op::Tanh(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(&node.value) {
                    *d += x * (one - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(&node.value) {
                    *d += x * y * (one - y);
                }
            }
            Op::Exp(a) => {
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(&node.value) {
                    *d += x * y;
                }
            }
            Op::Square(a) => {
                let va = &nodes[a.0].value;
                for ((d, &x), &y) in acc(grads, nodes, *a).iter_mut().zip(g).zip(va) {
                    *d += T::lit(2.0) * x * y;
                }
            }
            Op::Sum(a) => {
                acc(grads, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let k = g[0] / T::lit(nodes[a.0].value.len() as f64);
                acc(grads, nodes, *a).iter_mut().for_each(|d| *d += k);
            }
            Op::SumCols(a) => {
                let c = nodes[a.0].cols;
                for (row, &x) in acc(grads, nodes, *a).chunks_exact_mut(c).zip(g) {
                    row.iter_mut().for_each(|d| *d += x);
                }
            }
            Op::Slice(v) => scatter_view(acc(grads, nodes, v.var), nodes[v.var.0].cols, *v, g, 0, v.len),
            Op::ConcatCols(views) => {
                let mut off = 0;
                for v in views {
                    let cols = nodes[v.var.0].cols;
                    scatter_view(acc(grads, nodes, v.var), cols, *v, g, off, node.cols);
                    off += v.len;
                }
            }
            Op::StackRows(views) => {
                let mut row0 = 0;
                for v in views {
                    let src = &nodes[v.var.0];
                    let part = &g[row0 * node.cols..(row0 + src.rows) * node.cols];
                    scatter_view(acc(grads, nodes, v.var), src.cols, *v, part, 0, v.len);
                    row0 += src.rows;
                }
            }
            Op::Rows(a, start) => {
                let c = node.cols;
                let da = acc(grads, nodes, *a);
                add_into(&mut da[start * c..(start + node.rows) * c], g);
            }
            Op::CumsumBlocks(a, block) => {
                let width = block * node.cols;
                let steps = node.rows / block;
                let mut running = vec![T::zero(); width];
                let da = acc(grads, nodes, *a);
                for t in (0..steps).rev() {
                    let gs = &g[t * width..(t + 1) * width];
                    for ((r, d), &x) in running.iter_mut().zip(&mut da[t * width..(t + 1) * width]).zip(gs) {
                        *r += x;
                        *d += *r;
                    }
                }
            }
            Op::Dense { x, w, b, act } => {
                let out = node.cols;
                let mut dz = g.to_vec();
                if *act == Activation::Tanh {
                    for (d, &y) in dz.iter_mut().zip(&node.value) {
                        *d *= one - y * y;
                    }
                }
                {
                    let (_, db) = store.get_mut(*b).data_and_grad();
                    for row in dz.chunks_exact(out) {
                        add_into(db, row);
                    }
                }
                let xs = self.strided(*x);
                {
                    let (_, dw) = store.get_mut(*w).data_and_grad();
                    matmul_xt_acc(dw, xs, &dz, out);
                }
                let src_cols = nodes[x.var.0].cols;
                let wdata = store.get(*w).data();
                matmul_wt_acc(acc(grads, nodes, x.var), src_cols, x.start, x.len, &dz, out, wdata);
            }
            Op::LstmCell {
                inputs,
                prev,
                params,
                cache,
            } => self.backprop_lstm(node, g, inputs, *prev, params, cache, grads, store),
            Op::NormalizeRows(a) => {
                let c = node.cols;
                let va = &nodes[a.0].value;
                let da = acc(grads, nodes, *a);
                for ((d, y), (gr, x)) in da
                    .chunks_exact_mut(c)
                    .zip(node.value.chunks_exact(c))
                    .zip(g.chunks_exact(c).zip(va.chunks_exact(c)))
                {
                    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::lit(1e-12));
                    let proj = kernels::dot(y, gr);
                    for k in 0..c {
                        d[k] += (gr[k] - y[k] * proj) / n;
                    }
                }
            }
            Op::QuatBoxminus { est, truth } => {
                let ve = &nodes[est.0].value;
                let de = acc(grads, nodes, *est);
                for r in 0..node.rows {
                    let e = &ve[r * 4..r * 4 + 4];
                    let t = &truth[r * 4..r * 4 + 4];
                    let gr = &g[r * 3..r * 3 + 3];
                    let ge = quat_boxminus_vjp(e, t, gr);
                    for k in 0..4 {
                        de[r * 4 + k] += ge[k];
                    }
                }
            }
            Op::QuatRotate { q, v } => {
                let vq = &nodes[q.0].value;
                let dq = acc(grads, nodes, *q);
                let two = T::lit(2.0);
                for r in 0..node.rows {
                    let qr = &vq[r * 4..r * 4 + 4];
                    let vr = &v[r * 3..r * 3 + 3];
                    let gr = &g[r * 3..r * 3 + 3];
                    let u = [qr[1], qr[2], qr[3]];
                    let uv = cross(&u, vr);
                    let vg = cross(vr, gr);
                    let uvg = cross(&uv, gr);
                    let vgu = cross(vr, &cross(gr, &u));
                    dq[r * 4] += two * (uv[0] * gr[0] + uv[1] * gr[1] + uv[2] * gr[2]);
                    for k in 0..3 {
                        dq[r * 4 + 1 + k] += two * (qr[0] * vg[k] + uvg[k] + vgu[k]);
                    }
                }
            }
            Op::CovFromParams(a) => {
                let va = &nodes[a.0].value;
                let da = acc(grads, nodes, *a);
                for ((d, p), gr) in da.chunks_exact_mut(6).zip(va.chunks_exact(6)).zip(g.chunks_exact(6)) {
                    let gp = cov_entries_vjp(p, gr);
                    for k in 0..6 {
                        d[k] += gp[k];
                    }
                }
            }
            Op::GaussianNll { delta, cov } => {
                let half = T::lit(0.5);
                let two = T::lit(2.0);
                let (vd, vc) = (&nodes[delta.0].value, &nodes[cov.0].value);
                let mut gd = vec![T::zero(); vd.len()];
                let mut gc = vec![T::zero(); vc.len()];
                for r in 0..node.rows {
                    let d = &vd[r * 3..r * 3 + 3];
                    let (inv, _) = spd_inverse(&vc[r * 6..r * 6 + 6]);
                    let m = sym(&inv);
                    let u = [
                        m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
                        m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
                        m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
                    ];
                    let gr = g[r];
                    for k in 0..3 {
                        gd[r * 3 + k] = gr * u[k];
                    }
                    let gm = |i: usize, j: usize| half * gr * (m[i][j] - u[i] * u[j]);
                    let out = &mut gc[r * 6..r * 6 + 6];
                    out[0] = gm(0, 0);
                    out[1] = gm(1, 1);
                    out[2] = gm(2, 2);
                    out[3] = two * gm(0, 1);
                    out[4] = two * gm(0, 2);
                    out[5] = two * gm(1, 2);
                }
                add_into(acc(grads, nodes, *delta), &gd);
                add_into(acc(grads, nodes, *cov), &gc);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_lstm(
        &self,
        node: &Node<T>,
        g: &[T],
        inputs: &[View],
        prev: Option<Var>,
        params: &LstmParams,
        cache: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let nodes = &self.nodes;
        let h = params.hidden;
        let g4 = 4 * h;
        let rows = node.rows;
        let one = T::one();
        let mut dz = vec![T::zero(); rows * g4];
        let mut dprev = prev.map(|_| vec![T::zero(); rows * 2 * h]);
        for r in 0..rows {
            let cr = &cache[r * 5 * h..(r + 1) * 5 * h];
            let gr = &g[r * 2 * h..(r + 1) * 2 * h];
            let dzr = &mut dz[r * g4..(r + 1) * g4];
            for j in 0..h {
                let (i, f, gg, o, tc) = (cr[j], cr[h + j], cr[2 * h + j], cr[3 * h + j], cr[4 * h + j]);
                let cp = match prev {
                    Some(p) => nodes[p.0].value[r * 2 * h + h + j],
                    None => T::zero(),
                };
                let dh = gr[j];
                let dc = gr[h + j] + dh * o * (one - tc * tc);
                dzr[j] = dc * gg * i * (one - i);
                dzr[h + j] = dc * cp * f * (one - f);
                dzr[2 * h + j] = dc * i * (one - gg * gg);
                dzr[3 * h + j] = dh * tc * o * (one - o);
                if let Some(dp) = dprev.as_mut() {
                    dp[r * 2 * h + h + j] = dc * f;
                }
            }
        }
        {
            let (_, db) = store.get_mut(params.b).data_and_grad();
            for row in dz.chunks_exact(g4) {
                add_into(db, row);
            }
        }
        {
            let (_, dwx) = store.get_mut(params.wx).data_and_grad();
            let mut off = 0;
            for v in inputs {
                matmul_xt_acc(&mut dwx[off * g4..(off + v.len) * g4], self.strided(*v), &dz, g4);
                off += v.len;
            }
        }
        if let Some(p) = prev {
            let (_, dwh) = store.get_mut(params.wh).data_and_grad();
            matmul_xt_acc(
                dwh,
                self.strided(View {
                    var: p,
                    start: 0,
                    len: h,
                }),
                &dz,
                g4,
            );
        }
        let wx = store.get(params.wx).data();
        let mut off = 0;
        for v in inputs {
            let cols = nodes[v.var.0].cols;
            let dst = acc(grads, nodes, v.var);
            matmul_wt_acc(dst, cols, v.start, v.len, &dz, g4, &wx[off * g4..(off + v.len) * g4]);
            off += v.len;
        }
        if let (Some(p), Some(mut dp)) = (prev, dprev) {
            let wh = store.get(params.wh).data();
            matmul_wt_acc(&mut dp, 2 * h, 0, h, &dz, g4, wh);
            add_into(acc(grads, nodes, p), &dp);
        }
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adds rows of `g` (columns `g_off..g_off+view.len` of a `g_cols`-wide
/// buffer) into the view's columns of a `dst_cols`-wide gradient buffer.
fn scatter_view<T: Real>(dst: &mut [T], dst_cols: usize, view: View, g: &[T], g_off: usize, g_cols: usize) {
    for (r, grow) in g.chunks_exact(g_cols).enumerate() {
        let d = &mut dst[r * dst_cols + view.start..r * dst_cols + view.start + view.len];
        add_into(d, &grow[g_off..g_off + view.len]);
    }
}

fn cross<T: Real>(a: &[T], b: &[T]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3<T: Real>(v: &[T]) -> T {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `d = e⁻¹ ⊗ t` moved to the `w ≥ 0` hemisphere; also returns the sign applied.
fn relative_quat<T: Real>(e: &[T], t: &[T]) -> ([T; 4], T) {
    let (ew, ex, ey, ez) = (e[0], e[1], e[2], e[3]);
    let (tw, tx, ty, tz) = (t[0], t[1], t[2], t[3]);
    let w = ew * tw + ex * tx + ey * ty + ez * tz;
    // ew·tv − tw·ev − ev × tv
    let x = ew * tx - tw * ex - (ey * tz - ez * ty);
    let y = ew * ty - tw * ey - (ez * tx - ex * tz);
    let z = ew * tz - tw * ez - (ex * ty - ey * tx);
    if w < T::zero() {
        ([-w, -x, -y, -z], -T::one())
    } else {
        ([w, x, y, z], T::one())
    }
}

/// For `log([w; v]) = k·v` with `s = ‖v‖`, `k = atan(s/w)/s`, returns
/// `(k, (dk/ds)/s, s² + w²)`. Series expansions are used for `s < 0.1·w`.
fn log_coeffs<T: Real>(w: T, s: T) -> (T, T, T) {
    let r2 = s * s + w * w;
    if s < T::lit(0.1) * w {
        let u2 = (s / w) * (s / w);
        let c = |x: f64| T::lit(x);
        let k = (T::one() + u2 * (c(-1.0 / 3.0) + u2 * (c(0.2) + u2 * (c(-1.0 / 7.0) + u2 * c(1.0 / 9.0))))) / w;
        let kappa = (c(-2.0 / 3.0) + u2 * (c(0.8) + u2 * (c(-6.0 / 7.0) + u2 * (c(8.0 / 9.0) + u2 * c(-10.0 / 11.0)))))
            / (w * w * w);
        (k, kappa, r2)
    } else {
        let theta = s.atan2(w);
        let k = theta / s;
        let kappa = (w * s / r2 - theta) / (s * s * s);
        (k, kappa, r2)
    }
}

fn quat_boxminus_vjp<T: Real>(e: &[T], t: &[T], g: &[T]) -> [T; 4] {
    let (d, sign) = relative_quat(e, t);
    let v = [d[1], d[2], d[3]];
    let (k, kappa, r2) = log_coeffs(d[0], norm3(&v));
    let two = T::lit(2.0);
    let gv_dot = g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
    // Gradient w.r.t. the canonical d, then undo the hemisphere flip.
    let gdw = -two * gv_dot / r2 * sign;
    let gdv = [
        (two * k * g[0] + two * gv_dot * kappa * v[0]) * sign,
        (two * k * g[1] + two * gv_dot * kappa * v[1]) * sign,
        (two * k * g[2] + two * gv_dot * kappa * v[2]) * sign,
    ];
    let (tw, tv) = (t[0], [t[1], t[2], t[3]]);
    // d_w = ew·tw + ev·tv ; d_v = ew·tv − tw·ev − ev × tv
    let gew = gdw * tw + gdv[0] * tv[0] + gdv[1] * tv[1] + gdv[2] * tv[2];
    let cross = [
        tv[1] * gdv[2] - tv[2] * gdv[1],
        tv[2] * gdv[0] - tv[0] * gdv[2],
        tv[0] * gdv[1] - tv[1] * gdv[0],
    ];
    [
        gew,
        gdw * tv[0] - tw * gdv[0] - cross[0],
        gdw * tv[1] - tw * gdv[1] - cross[1],
        gdw * tv[2] - tw * gdv[2] - cross[2],
    ]
}

const RHO_SCALE: f64 = 0.99;

/// Covariance parameterization shared by the tape op and inference code.
pub(crate) fn cov_entries<T: Real>(p: &[T]) -> [T; 6] {
    let s = [p[0].exp(), p[1].exp(), p[2].exp()];
    let k = T::lit(RHO_SCALE);
    let z = [k * p[3].tanh(), k * p[4].tanh(), k * p[5].tanh()];
    let one = T::one();
    let m = ((one - z[0] * z[0]) * (one - z[1] * z[1])).sqrt();
    let rho23 = z[2] * m + z[0] * z[1];
    [
        s[0] * s[0],
        s[1] * s[1],
        s[2] * s[2],
        z[0] * s[0] * s[1],
        z[1] * s[0] * s[2],
        rho23 * s[1] * s[2],
    ]
}

fn cov_entries_vjp<T: Real>(p: &[T], g: &[T]) -> [T; 6] {
    let one = T::one();
    let two = T::lit(2.0);
    let s = [p[0].exp(), p[1].exp(), p[2].exp()];
    let k = T::lit(RHO_SCALE);
    let th = [p[3].tanh(), p[4].tanh(), p[5].tanh()];
    let z = [k * th[0], k * th[1], k * th[2]];
    let m = ((one - z[0] * z[0]) * (one - z[1] * z[1])).sqrt();
    let rho = [z[0], z[1], z[2] * m + z[0] * z[1]];

    let ds = [
        g[0] * two * s[0] + g[3] * rho[0] * s[1] + g[4] * rho[1] * s[2],
        g[1] * two * s[1] + g[3] * rho[0] * s[0] + g[5] * rho[2] * s[2],
        g[2] * two * s[2] + g[4] * rho[1] * s[0] + g[5] * rho[2] * s[1],
    ];
    let drho = [g[3] * s[0] * s[1], g[4] * s[0] * s[2], g[5] * s[1] * s[2]];
    let d23_dz0 = -z[2] * z[0] * (one - z[1] * z[1]) / m + z[1];
    let d23_dz1 = -z[2] * z[1] * (one - z[0] * z[0]) / m + z[0];
    let dz = [drho[0] + drho[2] * d23_dz0, drho[1] + drho[2] * d23_dz1, drho[2] * m];
    [
        ds[0] * s[0],
        ds[1] * s[1],
        ds[2] * s[2],
        dz[0] * k * (one - th[0] * th[0]),
        dz[1] * k * (one - th[1] * th[1]),
        dz[2] * k * (one - th[2] * th[2]),
    ]
}

fn sym<T: Real>(e: &[T; 6]) -> [[T; 3]; 3] {
    [[e[0], e[3], e[4]], [e[3], e[1], e[5]], [e[4], e[5], e[2]]]
}

fn quad_form<T: Real>(inv: &[T; 6], d: &[T]) -> T {
    let m = sym(inv);
    let mut q = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            q += d[i] * m[i][j] * d[j];
        }
    }
    q
}

/// Inverse (as unique entries) and log-determinant of a symmetric 3×3 matrix.
/// Matrices failing the leading-minor test get `ε·I` jitter, growing from 1e-9.
pub(crate) fn spd_inverse<T: Real>(s: &[T]) -> ([T; 6], T) {
    let mut jitter = T::zero();
    let mut eps = T::lit(1e-9);
    for _ in 0..16 {
        let (a, b, c) = (s[0] + jitter, s[1] + jitter, s[2] + jitter);
        let (d, e, f) = (s[3], s[4], s[5]);
        let c11 = b * c - f * f;
        let c22 = a * c - e * e;
        let c33 = a * b - d * d;
        let c12 = e * f - c * d;
        let c13 = d * f - b * e;
        let c23 = d * e - a * f;
        let det = a * c11 + d * c12 + e * c13;
        if a > T::zero() && c33 > T::zero() && det > T::zero() && det.is_finite() {
            if jitter > T::zero() {
                log::warn!("covariance not positive definite; added {jitter} jitter");
            }
            return (
                [c11 / det, c22 / det, c33 / det, c12 / det, c13 / det, c23 / det],
                det.ln(),
            );
        }
        jitter = eps;
        eps *= T::lit(10.0);
    }
    panic!("covariance could not be repaired to positive definite: {s:?}");
}
