use crate::error::{Error, Result};

use super::init::{kaiming_uniform, orthogonal, Initializer};
use super::{ParamId, ParamStore, Real, Tape, Tensor, Var, View};

pub use super::tape::Activation;

/// Standard LSTM layer (sigmoid gates, tanh candidate and output squashing).
///
/// `wx: input × 4·hidden`, `wh: hidden × 4·hidden`, `b: 4·hidden`, gate
/// blocks ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl LstmLayer {
    /// Registers the layer's tensors as `{prefix}.wx`, `{prefix}.wh`, `{prefix}.b`.
    ///
    /// Input weights are Kaiming-uniform, each recurrent gate block is
    /// orthogonal, biases are zero except the forget gate (1.0).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Initializer,
    ) -> Self {
        let g4 = 4 * hidden;
        let wx = kaiming_uniform(init, input, input * g4);
        let mut wh = vec![T::zero(); hidden * g4];
        for gate in 0..4 {
            let q: Vec<T> = orthogonal(init, hidden);
            for i in 0..hidden {
                for j in 0..hidden {
                    wh[i * g4 + gate * hidden + j] = q[i * hidden + j];
                }
            }
        }
        let mut b = vec![T::zero(); g4];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = T::one());
        LstmLayer {
            input,
            hidden,
            wx: store.add(format!("{prefix}.wx"), Tensor::new(vec![input, g4], wx).unwrap()),
            wh: store.add(format!("{prefix}.wh"), Tensor::new(vec![hidden, g4], wh).unwrap()),
            b: store.add(format!("{prefix}.b"), Tensor::new(vec![g4], b).unwrap()),
        }
    }

    /// Looks up an existing layer's tensors by name, checking shapes.
    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let g4 = 4 * hidden;
        Ok(LstmLayer {
            input,
            hidden,
            wx: lookup(store, &format!("{prefix}.wx"), &[input, g4])?,
            wh: lookup(store, &format!("{prefix}.wh"), &[hidden, g4])?,
            b: lookup(store, &format!("{prefix}.b"), &[g4])?,
        })
    }
}

/// Forward and reverse LSTMs over the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmLayer {
    pub fwd: LstmLayer,
    pub bwd: LstmLayer,
}

impl BiLstmLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Initializer,
    ) -> Self {
        BiLstmLayer {
            fwd: LstmLayer::new(store, &format!("{prefix}.fwd"), input, hidden, init),
            bwd: LstmLayer::new(store, &format!("{prefix}.bwd"), input, hidden, init),
        }
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(BiLstmLayer {
            fwd: LstmLayer::bind(store, &format!("{prefix}.fwd"), input, hidden)?,
            bwd: LstmLayer::bind(store, &format!("{prefix}.bwd"), input, hidden)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub input: usize,
    pub output: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
}

impl DenseLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        act: Activation,
        init: &mut Initializer,
    ) -> Self {
        let w = kaiming_uniform(init, input, input * output);
        DenseLayer {
            input,
            output,
            w: store.add(format!("{prefix}.w"), Tensor::new(vec![input, output], w).unwrap()),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![output])),
            act,
        }
    }

    pub fn bind<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        input: usize,
        output: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(DenseLayer {
            input,
            output,
            w: lookup(store, &format!("{prefix}.w"), &[input, output])?,
            b: lookup(store, &format!("{prefix}.b"), &[output])?,
            act,
        })
    }

    /// Affine map plus optional tanh, recorded on the tape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: View) -> Result<Var> {
        if x.len != self.input {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.input, x.len
            )));
        }
        Ok(tape.dense(store, x, self.w, self.b, self.act))
    }
}

fn lookup<T: Real>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::WeightFile(format!("missing tensor `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::WeightFile(format!(
            "tensor `{name}` has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

/// `(h, c)` of one layer for `rows` batch lanes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub rows: usize,
    pub h: Vec<T>,
    pub c: Vec<T>,
}

/// Per-layer recurrent state carried between windows (values only; never
/// connected to a previous tape).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(layers: usize, rows: usize, hidden: usize) -> Self {
        HiddenState {
            layers: (0..layers)
                .map(|_| LayerState {
                    rows,
                    h: vec![T::zero(); rows * hidden],
                    c: vec![T::zero(); rows * hidden],
                })
                .collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Keeps only the listed lanes, in the given order.
    pub fn select_rows(&self, lanes: &[usize]) -> Self {
        HiddenState {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let h = l.h.len() / l.rows.max(1);
                    let pick = |v: &Vec<T>| {
                        lanes
                            .iter()
                            .flat_map(|&r| v[r * h..(r + 1) * h].iter().copied())
                            .collect()
                    };
                    LayerState {
                        rows: lanes.len(),
                        h: pick(&l.h),
                        c: pick(&l.c),
                    }
                })
                .collect(),
        }
    }
}

impl<T: Real> LayerState<T> {
    fn to_tape(&self, tape: &mut Tape<T>, hidden: usize) -> Var {
        let mut v = Vec::with_capacity(self.rows * 2 * hidden);
        for r in 0..self.rows {
            v.extend_from_slice(&self.h[r * hidden..(r + 1) * hidden]);
            v.extend_from_slice(&self.c[r * hidden..(r + 1) * hidden]);
        }
        tape.constant(self.rows, 2 * hidden, v)
    }

    fn from_tape(tape: &Tape<T>, hc: Var, hidden: usize) -> Self {
        let (rows, _) = tape.shape(hc);
        let v = tape.value(hc);
        let mut h = Vec::with_capacity(rows * hidden);
        let mut c = Vec::with_capacity(rows * hidden);
        for row in v.chunks_exact(2 * hidden) {
            h.extend_from_slice(&row[..hidden]);
            c.extend_from_slice(&row[hidden..]);
        }
        LayerState { rows, h, c }
    }
}

/// One cell step. `x` views are concatenated to form the input; `prev` is the
/// previous `[h | c]` node. Returns the new `[h | c]` node.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &LstmLayer,
    x: &[View],
    prev: Option<Var>,
) -> Result<Var> {
    let width: usize = x.iter().map(|v| v.len).sum();
    if width != layer.input {
        return Err(Error::Shape(format!(
            "lstm layer expects {} inputs, got {width}",
            layer.input
        )));
    }
    if let Some(p) = prev {
        let (_, cols) = tape.shape(p);
        if cols != 2 * layer.hidden {
            return Err(Error::Shape(format!(
                "lstm state has {cols} columns, expected {}",
                2 * layer.hidden
            )));
        }
    }
    Ok(tape.lstm_cell(store, x, prev, layer.wx, layer.wh, layer.b, layer.hidden))
}

/// Runs a stack of unidirectional layers over `steps` (each `rows × input`).
///
/// Returns the top layer's `[h | c]` node per step and the final state of
/// every layer (detached values).
pub fn lstm_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[LstmLayer],
    steps: &[Var],
    init: Option<&HiddenState<T>>,
) -> Result<(Vec<Var>, HiddenState<T>)> {
    if steps.is_empty() {
        return Err(Error::Domain("empty input sequence".into()));
    }
    if let Some(s) = init {
        if s.depth() != layers.len() {
            return Err(Error::Shape(format!(
                "hidden state has {} layers, network has {}",
                s.depth(),
                layers.len()
            )));
        }
    }
    let mut prev: Vec<Option<Var>> = layers
        .iter()
        .enumerate()
        .map(|(l, layer)| init.map(|s| s.layers[l].to_tape(tape, layer.hidden)))
        .collect();
    let mut top = Vec::with_capacity(steps.len());
    for &x in steps {
        let mut input = vec![tape.view(x)];
        for (l, layer) in layers.iter().enumerate() {
            let hc = lstm_step(tape, store, layer, &input, prev[l])?;
            prev[l] = Some(hc);
            input = vec![tape.cols(hc, 0, layer.hidden)];
        }
        top.push(prev[layers.len() - 1].unwrap());
    }
    let state = HiddenState {
        layers: layers
            .iter()
            .zip(&prev)
            .map(|(layer, hc)| LayerState::from_tape(tape, hc.unwrap(), layer.hidden))
            .collect(),
    };
    Ok((top, state))
}

/// Runs stacked bidirectional layers over `steps` (each `rows × input`),
/// starting from zero state in both directions.
///
/// Returns a `(T·rows) × 2·hidden` node, step-major, holding the forward and
/// reverse hidden outputs of the top layer side by side.
pub fn bilstm_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[BiLstmLayer],
    steps: &[Var],
) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::Domain("empty input sequence".into()));
    }
    let n = steps.len();
    let mut inputs: Vec<Vec<View>> = steps.iter().map(|&x| vec![tape.view(x)]).collect();
    let mut outputs: (Vec<View>, Vec<View>) = (Vec::new(), Vec::new());
    for layer in layers {
        let h = layer.fwd.hidden;
        let mut fwd = Vec::with_capacity(n);
        let mut prev = None;
        for input in &inputs {
            let hc = lstm_step(tape, store, &layer.fwd, input, prev)?;
            fwd.push(tape.cols(hc, 0, h));
            prev = Some(hc);
        }
        let mut bwd = vec![fwd[0]; n];
        let mut prev = None;
        for t in (0..n).rev() {
            let hc = lstm_step(tape, store, &layer.bwd, &inputs[t], prev)?;
            bwd[t] = tape.cols(hc, 0, layer.bwd.hidden);
            prev = Some(hc);
        }
        inputs = (0..n).map(|t| vec![fwd[t], bwd[t]]).collect();
        outputs = (fwd, bwd);
    }
    let f = tape.stack_rows(&outputs.0);
    let b = tape.stack_rows(&outputs.1);
    let (fv, bv) = (tape.view(f), tape.view(b));
    Ok(tape.concat_cols(&[fv, bv]))
}
