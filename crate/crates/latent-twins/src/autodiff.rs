//! Minimal reverse-mode neural network stack: dense layers, activations,
//! exact batch backward passes, the Adam optimizer, and learning-rate
//! schedules.
//!
//! Everything is 64-bit. Batches are row-major matrices (one sample per
//! row), and a forward pass records the per-layer outputs it needs for an
//! exact reverse pass. Gradients follow the mean-over-batch convention, so
//! learning rates transfer across batch sizes.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::io;
use crate::numkit::{Matrix, RngStream};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in {0} (divergence)")]
    NonFinite(&'static str),
    #[error("tape does not match this network (layer {layer}: tape {tape_dims:?}, net {net_dims:?})")]
    StaleTape { layer: usize, tape_dims: (usize, usize), net_dims: (usize, usize) },
    #[error("unknown activation id {0}")]
    BadActivationId(u32),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// Softmax over the layer's whole output vector.
    Softmax,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Softmax => 3,
        }
    }

    pub fn from_id(id: u32) -> Result<Self, AutodiffError> {
        Ok(match id {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Softmax,
            other => return Err(AutodiffError::BadActivationId(other)),
        })
    }

    /// Apply in place, row by row.
    fn apply(self, z: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
            }
            Activation::Softmax => {
                let cols = z.cols();
                for i in 0..z.rows() {
                    let row = z.row_mut(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    debug_assert!(cols == 0 || sum > 0.0);
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
    }

    /// Given upstream dA and this layer's outputs A, produce dZ in place of dA.
    fn backprop(self, d_out: &mut Matrix, out: &Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (d, &a) in d_out.data_mut().iter_mut().zip(out.data()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (d, &a) in d_out.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - a * a;
                }
            }
            Activation::Softmax => {
                // dz_i = a_i (da_i - sum_j da_j a_j), per row.
                for i in 0..d_out.rows() {
                    let a = out.row(i);
                    let d = d_out.row_mut(i);
                    let inner: f64 = d.iter().zip(a).map(|(dj, aj)| dj * aj).sum();
                    for (dj, &aj) in d.iter_mut().zip(a) {
                        *dj = aj * (*dj - inner);
                    }
                }
            }
        }
    }
}

/// Fully connected layer `y = act(W x + b)` with `W: out×in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(in_dim: usize, out_dim: usize, activation: Activation, stream: &mut RngStream) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| stream.uniform(-limit, limit));
        DenseLayer { weight, bias: vec![0.0; out_dim], activation }
    }
}

/// A chain of dense layers; consecutive dimensions must agree.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        for w in layers.windows(2) {
            assert_eq!(
                w[0].out_dim(),
                w[1].in_dim(),
                "consecutive layer dimensions must chain"
            );
        }
        Mlp { layers }
    }

    /// Build from a width chain `dims[0] → dims[1] → …` with the given
    /// hidden activation and a final activation of `last`.
    pub fn from_dims(
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        stream: &mut RngStream,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { last } else { hidden };
                DenseLayer::xavier(dims[k], dims[k + 1], act, stream)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Batch forward pass; `x` is one sample per row.
    pub fn forward_batch(&self, x: &Matrix) -> Result<(Matrix, Tape), AutodiffError> {
        if x.cols() != self.in_dim() {
            return Err(AutodiffError::DimMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = current.matmul(&layer.weight.transpose());
            for i in 0..z.rows() {
                for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            layer.activation.apply(&mut z);
            if !z.data().iter().all(|v| v.is_finite()) {
                return Err(AutodiffError::NonFinite("forward activations"));
            }
            outputs.push(z.clone());
            current = z;
        }
        Ok((current, Tape { input: x.clone(), outputs }))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), AutodiffError> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        let (y, tape) = self.forward_batch(&xm)?;
        Ok((y.row(0).to_vec(), tape))
    }

    /// Exact reverse pass. `d_out` is ∂loss/∂output with the caller's
    /// scaling (use mean-over-batch for batch gradients). Returns parameter
    /// gradients and ∂loss/∂input.
    pub fn backward_batch(&self, tape: &Tape, d_out: &Matrix) -> Result<(Gradients, Matrix), AutodiffError> {
        if tape.outputs.len() != self.layers.len() {
            return Err(AutodiffError::StaleTape {
                layer: 0,
                tape_dims: (tape.outputs.len(), 0),
                net_dims: (self.layers.len(), 0),
            });
        }
        for (k, (layer, out)) in self.layers.iter().zip(&tape.outputs).enumerate() {
            if out.cols() != layer.out_dim() {
                return Err(AutodiffError::StaleTape {
                    layer: k,
                    tape_dims: (out.rows(), out.cols()),
                    net_dims: (layer.out_dim(), layer.in_dim()),
                });
            }
        }
        if d_out.rows() != tape.input.rows() || d_out.cols() != self.out_dim() {
            return Err(AutodiffError::DimMismatch(format!(
                "d_out is {}x{}, expected {}x{}",
                d_out.rows(),
                d_out.cols(),
                tape.input.rows(),
                self.out_dim()
            )));
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&mut delta, &tape.outputs[k]);
            let below = if k == 0 { &tape.input } else { &tape.outputs[k - 1] };
            let d_weight = delta.transpose().matmul(below);
            let mut d_bias = vec![0.0; layer.out_dim()];
            for i in 0..delta.rows() {
                for (db, &d) in d_bias.iter_mut().zip(delta.row(i)) {
                    *db += d;
                }
            }
            let d_below = delta.matmul(&layer.weight);
            grads.push(LayerGradients { d_weight, d_bias });
            delta = d_below;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Single-sample reverse pass.
    pub fn backward(&self, tape: &Tape, dy: &[f64]) -> Result<(Gradients, Vec<f64>), AutodiffError> {
        let dm = Matrix::from_vec(1, dy.len(), dy.to_vec());
        let (grads, dx) = self.backward_batch(tape, &dm)?;
        Ok((grads, dx.row(0).to_vec()))
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), AutodiffError> {
        io::write_magic(w, b"LTNN")?;
        io::write_u32(w, 1)?;
        io::write_u32(w, self.layers.len() as u32)?;
        for layer in &self.layers {
            io::write_u32(w, layer.in_dim() as u32)?;
            io::write_u32(w, layer.out_dim() as u32)?;
            io::write_u32(w, layer.activation.id())?;
            io::write_f64_slice(w, layer.weight.data())?;
            io::write_f64_slice(w, &layer.bias)?;
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Mlp, AutodiffError> {
        io::expect_magic(r, b"LTNN", "network checkpoint")?;
        io::expect_version(r, 1, "network checkpoint")?;
        let count = io::read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let in_dim = io::read_u32(r)? as usize;
            let out_dim = io::read_u32(r)? as usize;
            let activation = Activation::from_id(io::read_u32(r)?)?;
            let weight = Matrix::from_vec(out_dim, in_dim, io::read_f64_vec(r, out_dim * in_dim)?);
            let bias = io::read_f64_vec(r, out_dim)?;
            layers.push(DenseLayer { weight, bias, activation });
        }
        Ok(Mlp::new(layers))
    }

    pub fn save_path(&self, path: &Path) -> Result<(), AutodiffError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load_path(path: &Path) -> Result<Mlp, AutodiffError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Mlp::load(&mut f)
    }
}

/// Activation record from a forward pass; sufficient for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Matrix,
    outputs: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    d_weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    d_bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.axpy(1.0, &b.d_weight);
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.d_weight = g.d_weight.scale(s);
            for b in &mut g.d_bias {
                *b *= s;
            }
        }
    }
}

/// Mean-squared-error over every entry of the batch, with its gradient.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    assert_eq!(
        (pred.rows(), pred.cols()),
        (target.rows(), target.cols()),
        "mse: shape mismatch"
    );
    let n = (pred.rows() * pred.cols()).max(1) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        loss += d * d;
        grad.data_mut()[i] = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Adam state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, param_count: usize) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(params.len(), grads.len(), "adam: gradient shape mismatch");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Adam over every parameter of an [`Mlp`], layer by layer.
#[derive(Debug, Clone)]
pub struct MlpOptimizer {
    states: Vec<AdamState>,
}

impl MlpOptimizer {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let states = net
            .layers
            .iter()
            .map(|l| AdamState::new(lr, l.weight.rows() * l.weight.cols() + l.bias.len()))
            .collect();
        MlpOptimizer { states }
    }

    pub fn set_lr(&mut self, lr: f64) {
        for s in &mut self.states {
            s.lr = lr;
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        assert_eq!(net.layers.len(), grads.layers.len());
        for ((layer, grad), state) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.states) {
            let (wr, wc) = (layer.weight.rows(), layer.weight.cols());
            let mut flat = Vec::with_capacity(wr * wc + layer.bias.len());
            flat.extend_from_slice(layer.weight.data());
            flat.extend_from_slice(&layer.bias);
            let mut gflat = Vec::with_capacity(flat.len());
            gflat.extend_from_slice(grad.d_weight.data());
            gflat.extend_from_slice(&grad.d_bias);
            state.step(&mut flat, &gflat);
            layer.weight = Matrix::from_vec(wr, wc, flat[..wr * wc].to_vec());
            layer.bias = flat[wr * wc..].to_vec();
        }
    }
}

/// Learning-rate schedule. `constant` never changes; `step-halving(p)`
/// halves the initial rate every `p` epochs; `reduce-on-plateau(f, p)`
/// multiplies by `f` after `p` epochs without validation improvement.
#[derive(Debug, Clone)]
pub enum LrSchedule {
    Constant { lr0: f64 },
    StepHalving { lr0: f64, period: usize },
    ReduceOnPlateau { factor: f64, patience: usize, lr: f64, best: f64, stale: usize },
}

impl LrSchedule {
    pub fn constant(lr0: f64) -> Self {
        LrSchedule::Constant { lr0 }
    }

    pub fn step_halving(lr0: f64, period: usize) -> Self {
        assert!(period >= 1);
        LrSchedule::StepHalving { lr0, period }
    }

    pub fn reduce_on_plateau(lr0: f64, factor: f64, patience: usize) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "plateau factor must be in (0,1)");
        assert!(patience >= 1);
        LrSchedule::ReduceOnPlateau { factor, patience, lr: lr0, best: f64::INFINITY, stale: 0 }
    }

    /// Learning rate to use for `epoch` (0-based), given the most recent
    /// validation loss.
    pub fn update(&mut self, epoch: usize, validation_loss: f64) -> f64 {
        match self {
            LrSchedule::Constant { lr0 } => *lr0,
            LrSchedule::StepHalving { lr0, period } => {
                *lr0 * 0.5_f64.powi((epoch / *period) as i32)
            }
            LrSchedule::ReduceOnPlateau { factor, patience, lr, best, stale } => {
                if validation_loss < *best {
                    *best = validation_loss;
                    *stale = 0;
                } else {
                    *stale += 1;
                    if *stale >= *patience {
                        *lr *= *factor;
                        *stale = 0;
                    }
                }
                *lr
            }
        }
    }
}
