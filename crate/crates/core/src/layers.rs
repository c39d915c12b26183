//! Layer-level forward/backward kernels and the plain SGD step.
//!
//! Gradients are hand-derived per kernel; every backward path is checked
//! against [`crate::numeric::fd_gradient`] in the test suites.

use crate::error::{Error, Result};
use crate::numeric::{
    axpy, log_softmax, relu, relu_deriv, sigmoid, sigmoid_deriv, softmax, tanh, tanh_deriv,
    RngStream, Tensor,
};
use serde::{Deserialize, Serialize};

/// Elementwise nonlinearity applied after a linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => v.to_vec(),
            Activation::Relu => relu(v),
            Activation::Tanh => tanh(v),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative evaluated at the pre-activation.
    pub fn deriv(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => vec![1.0; v.len()],
            Activation::Relu => relu_deriv(v),
            Activation::Tanh => tanh_deriv(v),
            Activation::Sigmoid => sigmoid_deriv(v),
        }
    }
}

/// Plain SGD: `p <- p - eta * g`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        SgdConfig { learning_rate }
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], cfg: &SgdConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: format!("{} params", params.len()),
            rhs: format!("{} grads", grads.len()),
        });
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= cfg.learning_rate * g;
    }
    Ok(())
}

/// Uniform Glorot init for a dense `rows x cols` weight matrix.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

/// Weights `(in x out)` plus a bias vector.
#[derive(Debug, Clone)]
pub struct DenseLayerParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl DenseLayerParams {
    /// Glorot-uniform weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut RngStream) -> Self {
        DenseLayerParams {
            weights: glorot_uniform(input, output, rng),
            bias: vec![0.0; output],
        }
    }

    pub fn flat_len(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.weights.data().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let nw = self.weights.data().len();
        assert_eq!(flat.len(), nw + self.bias.len());
        self.weights.data_mut().copy_from_slice(&flat[..nw]);
        self.bias.copy_from_slice(&flat[nw..]);
    }
}

/// Gradients mirroring [`DenseLayerParams`].
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.weights.data().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }
}

/// What the dense backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor,
    pre_activation: Tensor,
    activation: Activation,
}

/// `y = act(x W + b)` over a batch of row vectors.
pub fn dense_forward(
    p: &DenseLayerParams,
    x: &Tensor,
    activation: Activation,
) -> Result<(Tensor, DenseCache)> {
    let mut z = x.matmul(&p.weights)?;
    for r in 0..z.rows() {
        axpy(z.row_mut(r), 1.0, &p.bias);
    }
    let mut y = Tensor::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let a = activation.apply(z.row(r));
        y.row_mut(r).copy_from_slice(&a);
    }
    Ok((
        y,
        DenseCache {
            input: x.clone(),
            pre_activation: z,
            activation,
        },
    ))
}

/// Exact analytic gradients of the cached forward.
pub fn dense_backward(
    p: &DenseLayerParams,
    cache: &DenseCache,
    upstream: &Tensor,
) -> Result<(DenseGrads, Tensor)> {
    if upstream.shape() != cache.pre_activation.shape() {
        return Err(Error::Shape {
            op: "dense_backward",
            lhs: format!("{:?}", cache.pre_activation.shape()),
            rhs: format!("{:?}", upstream.shape()),
        });
    }
    // dz = upstream * act'(z)
    let mut dz = Tensor::zeros(upstream.rows(), upstream.cols());
    for r in 0..upstream.rows() {
        let d = cache.activation.deriv(cache.pre_activation.row(r));
        for (c, (&u, &dd)) in upstream.row(r).iter().zip(&d).enumerate() {
            dz.set(r, c, u * dd);
        }
    }
    let d_weights = cache.input.transpose().matmul(&dz)?;
    let mut d_bias = vec![0.0; dz.cols()];
    for r in 0..dz.rows() {
        axpy(&mut d_bias, 1.0, dz.row(r));
    }
    let d_input = dz.matmul(&p.weights.transpose())?;
    Ok((
        DenseGrads {
            weights: d_weights,
            bias: d_bias,
        },
        d_input,
    ))
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CELL: usize = 2;
pub const GATE_OUTPUT: usize = 3;

/// One gate's parameters: input weights `(in x h)`, recurrent weights
/// `(h x h)`, bias `(h)`.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub wx: Tensor,
    pub wh: Tensor,
    pub bias: Vec<f64>,
}

/// Standard LSTM cell (no peepholes), gates ordered input/forget/cell/output.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub gates: [GateParams; 4],
    input_size: usize,
    hidden_size: usize,
}

impl LstmCellParams {
    /// All weights uniform in +-0.08; forget-gate bias starts at 1.0 so the
    /// cell state survives early training, other biases at 0.
    pub fn init(input_size: usize, hidden_size: usize, rng: &mut RngStream) -> Self {
        let mut gate = |forget: bool| GateParams {
            wx: Tensor::from_vec(
                input_size,
                hidden_size,
                (0..input_size * hidden_size)
                    .map(|_| rng.uniform(-0.08, 0.08))
                    .collect(),
            ),
            wh: Tensor::from_vec(
                hidden_size,
                hidden_size,
                (0..hidden_size * hidden_size)
                    .map(|_| rng.uniform(-0.08, 0.08))
                    .collect(),
            ),
            bias: vec![if forget { 1.0 } else { 0.0 }; hidden_size],
        };
        LstmCellParams {
            gates: [gate(false), gate(true), gate(false), gate(false)],
            input_size,
            hidden_size,
        }
    }

    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let gate = || GateParams {
            wx: Tensor::zeros(input_size, hidden_size),
            wh: Tensor::zeros(hidden_size, hidden_size),
            bias: vec![0.0; hidden_size],
        };
        LstmCellParams {
            gates: [gate(), gate(), gate(), gate()],
            input_size,
            hidden_size,
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn flat_len(&self) -> usize {
        self.gates
            .iter()
            .map(|g| g.wx.data().len() + g.wh.data().len() + g.bias.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for g in &self.gates {
            out.extend_from_slice(g.wx.data());
            out.extend_from_slice(g.wh.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut at = 0;
        for g in &mut self.gates {
            let nw = g.wx.data().len();
            g.wx.data_mut().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nh = g.wh.data().len();
            g.wh.data_mut().copy_from_slice(&flat[at..at + nh]);
            at += nh;
            let nb = g.bias.len();
            g.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }
}

/// Gradients mirroring [`LstmCellParams`], accumulated across steps.
#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub gates: [GateParams; 4],
}

impl LstmGrads {
    pub fn zeros(p: &LstmCellParams) -> Self {
        let gate = || GateParams {
            wx: Tensor::zeros(p.input_size, p.hidden_size),
            wh: Tensor::zeros(p.hidden_size, p.hidden_size),
            bias: vec![0.0; p.hidden_size],
        };
        LstmGrads {
            gates: [gate(), gate(), gate(), gate()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.gates {
            out.extend_from_slice(g.wx.data());
            out.extend_from_slice(g.wh.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &LstmGrads) {
        for (a, b) in self.gates.iter_mut().zip(&other.gates) {
            axpy(a.wx.data_mut(), 1.0, b.wx.data());
            axpy(a.wh.data_mut(), 1.0, b.wh.data());
            axpy(&mut a.bias, 1.0, &b.bias);
        }
    }
}

/// Forward intermediates for one LSTM step.
#[derive(Debug, Clone)]
pub struct LstmCache {
    pub(crate) x: Vec<f64>,
    pub(crate) h_prev: Vec<f64>,
    pub(crate) c_prev: Vec<f64>,
    pub(crate) i: Vec<f64>,
    pub(crate) f: Vec<f64>,
    pub(crate) g: Vec<f64>,
    pub(crate) o: Vec<f64>,
    pub(crate) tanh_c: Vec<f64>,
}

fn gate_preact(g: &GateParams, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
    let h = g.bias.len();
    let mut z = g.bias.clone();
    for (k, &xv) in x.iter().enumerate() {
        if xv != 0.0 {
            axpy(&mut z[..], xv, &g.wx.data()[k * h..(k + 1) * h]);
        }
    }
    for (k, &hv) in h_prev.iter().enumerate() {
        if hv != 0.0 {
            axpy(&mut z[..], hv, &g.wh.data()[k * h..(k + 1) * h]);
        }
    }
    z
}

/// One step of the standard LSTM gate equations.
pub fn lstm_step(
    p: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    if x.len() != p.input_size || h_prev.len() != p.hidden_size || c_prev.len() != p.hidden_size {
        return Err(Error::Shape {
            op: "lstm_step",
            lhs: format!("in={} hidden={}", p.input_size, p.hidden_size),
            rhs: format!(
                "x={} h_prev={} c_prev={}",
                x.len(),
                h_prev.len(),
                c_prev.len()
            ),
        });
    }
    let i = sigmoid(&gate_preact(&p.gates[GATE_INPUT], x, h_prev));
    let f = sigmoid(&gate_preact(&p.gates[GATE_FORGET], x, h_prev));
    let g = tanh(&gate_preact(&p.gates[GATE_CELL], x, h_prev));
    let o = sigmoid(&gate_preact(&p.gates[GATE_OUTPUT], x, h_prev));
    let c: Vec<f64> = (0..p.hidden_size)
        .map(|j| f[j] * c_prev[j] + i[j] * g[j])
        .collect();
    let tanh_c = tanh(&c);
    let h: Vec<f64> = (0..p.hidden_size).map(|j| o[j] * tanh_c[j]).collect();
    Ok((
        h,
        c,
        LstmCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            tanh_c,
        },
    ))
}

/// Exact analytic backward for one cached step.
///
/// `grad_h`/`grad_c` are the loss gradients flowing into this step's outputs;
/// returns parameter gradients plus the gradients to pass further back.
pub fn lstm_backward(
    p: &LstmCellParams,
    cache: &LstmCache,
    grad_h: &[f64],
    grad_c: &[f64],
) -> Result<(LstmGrads, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let h = p.hidden_size;
    if grad_h.len() != h || grad_c.len() != h {
        return Err(Error::Shape {
            op: "lstm_backward",
            lhs: format!("hidden={h}"),
            rhs: format!("grad_h={} grad_c={}", grad_h.len(), grad_c.len()),
        });
    }
    let mut dz = [vec![0.0; h], vec![0.0; h], vec![0.0; h], vec![0.0; h]];
    let mut d_c_prev = vec![0.0; h];
    for j in 0..h {
        let (i, f, g, o) = (cache.i[j], cache.f[j], cache.g[j], cache.o[j]);
        let tc = cache.tanh_c[j];
        let d_o = grad_h[j] * tc;
        let d_c = grad_h[j] * o * (1.0 - tc * tc) + grad_c[j];
        let d_f = d_c * cache.c_prev[j];
        let d_i = d_c * g;
        let d_g = d_c * i;
        d_c_prev[j] = d_c * f;
        dz[GATE_INPUT][j] = d_i * i * (1.0 - i);
        dz[GATE_FORGET][j] = d_f * f * (1.0 - f);
        dz[GATE_CELL][j] = d_g * (1.0 - g * g);
        dz[GATE_OUTPUT][j] = d_o * o * (1.0 - o);
    }
    let mut grads = LstmGrads::zeros(p);
    let mut d_x = vec![0.0; p.input_size];
    let mut d_h_prev = vec![0.0; h];
    for gi in 0..4 {
        let gg = &mut grads.gates[gi];
        for (k, &xv) in cache.x.iter().enumerate() {
            axpy(&mut gg.wx.data_mut()[k * h..(k + 1) * h], xv, &dz[gi]);
        }
        for (k, &hv) in cache.h_prev.iter().enumerate() {
            axpy(&mut gg.wh.data_mut()[k * h..(k + 1) * h], hv, &dz[gi]);
        }
        axpy(&mut gg.bias, 1.0, &dz[gi]);
        let wx = p.gates[gi].wx.data();
        for k in 0..p.input_size {
            d_x[k] += crate::numeric::dot(&dz[gi], &wx[k * h..(k + 1) * h]);
        }
        let wh = p.gates[gi].wh.data();
        for k in 0..h {
            d_h_prev[k] += crate::numeric::dot(&dz[gi], &wh[k * h..(k + 1) * h]);
        }
    }
    Ok((grads, d_x, d_h_prev, d_c_prev))
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy head
// ---------------------------------------------------------------------------

/// Mean `-log softmax(logits)[label]` over the batch, and its gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "softmax_xent",
            lhs: format!("{} logit rows", logits.rows()),
            rhs: format!("{} labels", labels.len()),
        });
    }
    if logits.rows() == 0 {
        return Err(Error::InvalidArgument("softmax_xent on empty batch".into()));
    }
    let batch = logits.rows() as f64;
    let classes = logits.cols();
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.rows(), classes);
    for r in 0..logits.rows() {
        let label = labels[r];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let ls = log_softmax(logits.row(r))?;
        loss -= ls[label];
        let p = softmax(logits.row(r))?;
        let grow = grad.row_mut(r);
        for (c, &pc) in p.iter().enumerate() {
            grow[c] = (pc - if c == label { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}
