//! The latent twin model: encoder e, latent map m(z,t₁,t₂), decoder d,
//! trained jointly on random time pairs and evaluated in a single shot
//! between arbitrary time stamps (either direction).
//!
//! Two autoencoder modes exist. Low-dimensional systems use the
//! identity-AE mode (n_z = n_x, e and d exact identities) so every bit of
//! approximation error lives in the latent map; field problems use an MLP
//! autoencoder. The latent map is either an MLP conditioned on the
//! normalized time pair or a structured exponential-flow map.
//!
//! Training minimizes the two-term empirical risk: reconstruction
//! `L(d(e(x₁)), x₁)` plus prediction `L(d(m(e(x₁),t₁,t₂)), x₂)`, both mean
//! squared errors over the batch, evaluated on normalized data.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{
    mse_loss, Activation, AutodiffError, LrSchedule, Mlp, MlpOptimizer,
};
use crate::datasets::{NormStats, PairDataset};
use crate::io;
use crate::numkit::{vec_norm, vec_sub, Matrix, RngStream};
use crate::odelab::Trajectory;
use crate::structured::{structured_evaluate, StructuredError, StructuredMap};

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("training loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("rollout diverged at step {step} (non-finite state)")]
    Diverged { step: usize },
    #[error("dataset must be normalized before training")]
    NotNormalized,
    #[error("empty test split")]
    EmptyTestSplit,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Structured(#[from] StructuredError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Encoder/decoder pair. `Identity` keeps e and d as exact identity
/// functions (not normalization round trips), so reconstruction error is
/// exactly zero.
#[derive(Debug, Clone)]
pub enum Autoencoder {
    Identity { n_x: usize },
    Network { encoder: Mlp, decoder: Mlp },
}

impl Autoencoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Autoencoder::Identity { n_x } => *n_x,
            Autoencoder::Network { encoder, .. } => encoder.out_dim(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Autoencoder::Identity { n_x } => *n_x,
            Autoencoder::Network { encoder, .. } => encoder.in_dim(),
        }
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>, TwinError> {
        match self {
            Autoencoder::Identity { .. } => Ok(x.to_vec()),
            Autoencoder::Network { encoder, .. } => Ok(encoder.forward(x)?.0),
        }
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>, TwinError> {
        match self {
            Autoencoder::Identity { .. } => Ok(z.to_vec()),
            Autoencoder::Network { decoder, .. } => Ok(decoder.forward(z)?.0),
        }
    }
}

/// Latent evolution map.
#[derive(Debug, Clone)]
pub enum LatentMap {
    /// MLP on [z, t̂₁, t̂₂] (normalized times).
    Network(Mlp),
    /// Exponential-flow map; receives physical times.
    Structured(StructuredMap),
}

/// A trained (or initialized) latent twin.
#[derive(Debug, Clone)]
pub struct TwinModel {
    pub autoencoder: Autoencoder,
    pub map: LatentMap,
    pub norm: NormStats,
    pub n_x: usize,
    pub n_z: usize,
    /// Physical time span seen during training; evaluation outside it is
    /// extrapolation (see [`TwinModel::time_in_trained_range`]).
    pub trained_span: (f64, f64),
}

impl TwinModel {
    pub fn time_in_trained_range(&self, t: f64) -> bool {
        t >= self.trained_span.0 && t <= self.trained_span.1
    }

    pub fn param_count(&self) -> usize {
        let ae = match &self.autoencoder {
            Autoencoder::Identity { .. } => 0,
            Autoencoder::Network { encoder, decoder } => {
                encoder.param_count() + decoder.param_count()
            }
        };
        let map = match &self.map {
            LatentMap::Network(net) => net.param_count(),
            LatentMap::Structured(s) => match &s.generator {
                crate::structured::Generator::Fixed(w) => w.rows() * w.cols(),
                crate::structured::Generator::Hypernet { net, .. } => net.param_count(),
            },
        };
        ae + map
    }
}

/// Single-shot surrogate evaluation: d(m(e(x̂₁), t̂₁, t̂₂)) denormalized.
/// Works for t₂ < t₁ as well; there is no ordering assumption.
pub fn twin_evaluate(
    model: &TwinModel,
    x1: &[f64],
    t1: f64,
    t2: f64,
) -> Result<Vec<f64>, TwinError> {
    if x1.len() != model.n_x {
        return Err(TwinError::DimMismatch(format!(
            "state has {} entries, model expects {}",
            x1.len(),
            model.n_x
        )));
    }
    let xh = model.norm.normalize_state(x1);
    let z1 = model.autoencoder.encode(&xh)?;
    let z2 = match &model.map {
        LatentMap::Network(net) => {
            let mut input = Vec::with_capacity(z1.len() + 2);
            input.extend_from_slice(&z1);
            input.push(model.norm.normalize_time(t1));
            input.push(model.norm.normalize_time(t2));
            net.forward(&input)?.0
        }
        LatentMap::Structured(map) => structured_evaluate(map, &z1, t1, t2)?,
    };
    let y = model.autoencoder.decode(&z2)?;
    Ok(model.norm.denormalize_state(&y))
}

/// Autoencoder round trip d(e(x)) in physical units (exact identity in
/// identity-AE mode).
pub fn twin_reconstruct(model: &TwinModel, x: &[f64]) -> Result<Vec<f64>, TwinError> {
    match &model.autoencoder {
        Autoencoder::Identity { .. } => Ok(x.to_vec()),
        Autoencoder::Network { .. } => {
            let xh = model.norm.normalize_state(x);
            let z = model.autoencoder.encode(&xh)?;
            let y = model.autoencoder.decode(&z)?;
            Ok(model.norm.denormalize_state(&y))
        }
    }
}

/// Recursive rollout x_{k+1} = twin(x_k, t_k, t_k + h); returns all
/// iterates including x₀. Steps may be negative.
pub fn twin_rollout(
    model: &TwinModel,
    x0: &[f64],
    t0: f64,
    h: f64,
    steps: usize,
) -> Result<Trajectory, TwinError> {
    if h == 0.0 {
        return Err(TwinError::BadConfig("rollout step h must be nonzero".into()));
    }
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut t = t0;
    let mut x = x0.to_vec();
    times.push(t);
    states.push(x.clone());
    for step in 0..steps {
        x = twin_evaluate(model, &x, t, t + h)?;
        t += h;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(TwinError::Diverged { step });
        }
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory::new(times, states))
}

/// Autoencoder architecture choice.
#[derive(Debug, Clone)]
pub enum AeArch {
    Identity,
    /// Encoder hidden widths then latent dim; decoder mirrors. Hidden
    /// layers carry `activation`, the latent and output layers are linear.
    Mlp { hidden: Vec<usize>, latent: usize, activation: Activation },
}

/// Latent-map architecture choice.
#[derive(Debug, Clone)]
pub enum MapArch {
    /// Hidden widths with `activation`, then a linear layer to n_z.
    Mlp { hidden: Vec<usize>, activation: Activation },
    /// Single affine layer (n_z + 2 → n_z).
    Affine,
}

/// Complete twin architecture.
#[derive(Debug, Clone)]
pub struct TwinArch {
    pub autoencoder: AeArch,
    pub map: MapArch,
}

impl TwinArch {
    /// The uniform low-dimensional setup: identity autoencoder and a
    /// softmax MLP map (n_x+2 → 16 → 8 → 4 → n_x, linear output).
    pub fn ode_default() -> Self {
        TwinArch {
            autoencoder: AeArch::Identity,
            map: MapArch::Mlp { hidden: vec![16, 8, 4], activation: Activation::Softmax },
        }
    }

    /// The field setup at full scale: relu encoder 1024→256→latent 128,
    /// mirrored decoder, affine latent map.
    pub fn field_default() -> Self {
        TwinArch {
            autoencoder: AeArch::Mlp {
                hidden: vec![1024, 256],
                latent: 128,
                activation: Activation::Relu,
            },
            map: MapArch::Affine,
        }
    }

    /// Desk-scale field setup for 32×32 grids.
    pub fn field_small() -> Self {
        TwinArch {
            autoencoder: AeArch::Mlp {
                hidden: vec![256, 128],
                latent: 64,
                activation: Activation::Relu,
            },
            map: MapArch::Affine,
        }
    }
}

/// Training configuration for the empirical-risk objective.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub w_rec: f64,
    pub w_pred: f64,
    pub seed: u64,
    /// Forces single-threaded math in addition to the always-seeded RNG
    /// streams. Row-parallel matmul is deterministic either way.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Adam 1e-3, 1000 epochs, batch 256, constant rate — the uniform ODE
    /// setup.
    pub fn ode_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
            schedule: LrSchedule::constant(1e-3),
            w_rec: 1.0,
            w_pred: 1.0,
            seed,
            deterministic: true,
        }
    }

    /// Adam 1e-3 halved every 250 epochs, batch 64 — the field setup.
    pub fn field_default(seed: u64) -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 64,
            lr: 1e-3,
            schedule: LrSchedule::step_halving(1e-3, 250),
            w_rec: 1.0,
            w_pred: 1.0,
            seed,
            deterministic: true,
        }
    }

    fn validate(&self) -> Result<(), TwinError> {
        if self.w_rec < 0.0 || self.w_pred < 0.0 || (self.w_rec == 0.0 && self.w_pred == 0.0) {
            return Err(TwinError::BadConfig(format!(
                "loss weights must be non-negative and not both zero (w_rec={}, w_pred={})",
                self.w_rec, self.w_pred
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TwinError::BadConfig("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(TwinError::BadConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch metrics row (normalized-space MSEs, matching the objective).
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_rec_mse: f64,
    pub test_pred_mse: f64,
    pub lr: f64,
}

/// Loss history and resource audit from one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    pub batches_touched: u64,
}

impl TrainHistory {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), TwinError> {
        writeln!(w, "epoch,train-loss,test-rec-mse,test-pred-mse,lr")?;
        for m in &self.epochs {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?}",
                m.epoch, m.train_loss, m.test_rec_mse, m.test_pred_mse, m.lr
            )?;
        }
        Ok(())
    }
}

/// Cap on how many test samples feed the per-epoch metrics; full-test
/// evaluation on field problems would double the epoch cost.
const METRICS_SUBSET_CAP: usize = 2048;

/// Jointly train autoencoder and latent map on a normalized pair dataset.
pub fn train_twin(
    ds: &PairDataset,
    arch: &TwinArch,
    cfg: &TrainConfig,
) -> Result<(TwinModel, TrainHistory), TwinError> {
    cfg.validate()?;
    if !ds.normalized {
        return Err(TwinError::NotNormalized);
    }
    if ds.train_idx.is_empty() {
        return Err(TwinError::BadConfig("empty training split".into()));
    }
    let was_parallel = crate::numkit::parallel_enabled();
    if cfg.deterministic {
        crate::numkit::set_parallel_enabled(false);
    }
    let result = train_twin_inner(ds, arch, cfg);
    crate::numkit::set_parallel_enabled(was_parallel);
    result
}

fn train_twin_inner(
    ds: &PairDataset,
    arch: &TwinArch,
    cfg: &TrainConfig,
) -> Result<(TwinModel, TrainHistory), TwinError> {
    let n_x = ds.n_x;
    let mut init_stream = RngStream::new(cfg.seed);

    let mut autoencoder = match &arch.autoencoder {
        AeArch::Identity => Autoencoder::Identity { n_x },
        AeArch::Mlp { hidden, latent, activation } => {
            let mut enc_dims = vec![n_x];
            enc_dims.extend_from_slice(hidden);
            enc_dims.push(*latent);
            let mut dec_dims = vec![*latent];
            dec_dims.extend(hidden.iter().rev());
            dec_dims.push(n_x);
            let encoder = Mlp::from_dims(
                &enc_dims,
                *activation,
                Activation::Identity,
                &mut init_stream.fork(1),
            );
            let decoder = Mlp::from_dims(
                &dec_dims,
                *activation,
                Activation::Identity,
                &mut init_stream.fork(2),
            );
            Autoencoder::Network { encoder, decoder }
        }
    };
    let n_z = autoencoder.latent_dim();

    let mut map = match &arch.map {
        MapArch::Mlp { hidden, activation } => {
            let mut dims = vec![n_z + 2];
            dims.extend_from_slice(hidden);
            dims.push(n_z);
            Mlp::from_dims(&dims, *activation, Activation::Identity, &mut init_stream.fork(3))
        }
        MapArch::Affine => Mlp::from_dims(
            &[n_z + 2, n_z],
            Activation::Identity,
            Activation::Identity,
            &mut init_stream.fork(3),
        ),
    };

    let identity_ae = matches!(autoencoder, Autoencoder::Identity { .. });
    let mut map_opt = MlpOptimizer::new(&map, cfg.lr);
    let mut ae_opt = match &autoencoder {
        Autoencoder::Identity { .. } => None,
        Autoencoder::Network { encoder, decoder } => {
            Some((MlpOptimizer::new(encoder, cfg.lr), MlpOptimizer::new(decoder, cfg.lr)))
        }
    };

    // Fixed, seeded subset for per-epoch test metrics.
    let metrics_idx: Vec<usize> = {
        let mut idx = ds.test_idx.clone();
        let mut stream = RngStream::new(cfg.seed).fork(0xE7A1);
        stream.shuffle(&mut idx);
        idx.truncate(METRICS_SUBSET_CAP);
        idx
    };

    let mut schedule = cfg.schedule.clone();
    let mut shuffle_stream = RngStream::new(cfg.seed).fork(0x8A77);
    let mut order = ds.train_idx.clone();
    let mut history = TrainHistory::default();
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        shuffle_stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (x1, t1, t2, x2) = assemble_batch(ds, batch);
            let loss = train_step(
                &mut autoencoder,
                &mut map,
                &mut ae_opt,
                &mut map_opt,
                identity_ae,
                cfg,
                &x1,
                &t1,
                &t2,
                &x2,
            )?;
            if !loss.is_finite() {
                return Err(TwinError::NanLoss { epoch, batch: batch_count });
            }
            epoch_loss += loss;
            batch_count += 1;
            history.batches_touched += 1;
        }

        let (rec_mse, pred_mse) =
            test_metrics(&autoencoder, &map, identity_ae, ds, &metrics_idx)?;
        let val_loss = cfg.w_rec * rec_mse + cfg.w_pred * pred_mse;
        lr = schedule.update(epoch, val_loss);
        map_opt.set_lr(lr);
        if let Some((eo, d_o)) = ae_opt.as_mut() {
            eo.set_lr(lr);
            d_o.set_lr(lr);
        }
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batch_count.max(1) as f64,
            test_rec_mse: rec_mse,
            test_pred_mse: pred_mse,
            lr,
        });
    }

    let times: Vec<f64> = ds
        .samples
        .iter()
        .flat_map(|s| [ds.norm.denormalize_time(s.t1), ds.norm.denormalize_time(s.t2)])
        .collect();
    let span = (
        times.iter().cloned().fold(f64::INFINITY, f64::min),
        times.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let model = TwinModel {
        autoencoder,
        map: LatentMap::Network(map),
        norm: ds.norm.clone(),
        n_x,
        n_z,
        trained_span: span,
    };
    Ok((model, history))
}

fn assemble_batch(ds: &PairDataset, batch: &[usize]) -> (Matrix, Vec<f64>, Vec<f64>, Matrix) {
    let n = ds.n_x;
    let b = batch.len();
    let mut x1 = Matrix::zeros(b, n);
    let mut x2 = Matrix::zeros(b, n);
    let mut t1 = Vec::with_capacity(b);
    let mut t2 = Vec::with_capacity(b);
    for (row, &i) in batch.iter().enumerate() {
        let s = &ds.samples[i];
        x1.row_mut(row).copy_from_slice(&s.x1);
        x2.row_mut(row).copy_from_slice(&s.x2);
        t1.push(s.t1);
        t2.push(s.t2);
    }
    (x1, t1, t2, x2)
}

fn concat_times(z: &Matrix, t1: &[f64], t2: &[f64]) -> Matrix {
    let b = z.rows();
    let n = z.cols();
    let mut out = Matrix::zeros(b, n + 2);
    for i in 0..b {
        out.row_mut(i)[..n].copy_from_slice(z.row(i));
        out.row_mut(i)[n] = t1[i];
        out.row_mut(i)[n + 1] = t2[i];
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    autoencoder: &mut Autoencoder,
    map: &mut Mlp,
    ae_opt: &mut Option<(MlpOptimizer, MlpOptimizer)>,
    map_opt: &mut MlpOptimizer,
    identity_ae: bool,
    cfg: &TrainConfig,
    x1: &Matrix,
    t1: &[f64],
    t2: &[f64],
    x2: &Matrix,
) -> Result<f64, TwinError> {
    if identity_ae {
        // Reconstruction term is exactly zero; only the map trains.
        let input = concat_times(x1, t1, t2);
        let (pred, tape) = map.forward_batch(&input)?;
        let (pred_loss, dpred) = mse_loss(&pred, x2);
        let (grads, _) = map.backward_batch(&tape, &dpred.scale(cfg.w_pred))?;
        map_opt.step(map, &grads);
        return Ok(cfg.w_pred * pred_loss);
    }

    let Autoencoder::Network { encoder, decoder } = autoencoder else { unreachable!() };
    let (z1, enc_tape) = encoder.forward_batch(x1)?;
    // Reconstruction branch.
    let (x_rec, dec_tape_rec) = decoder.forward_batch(&z1)?;
    let (rec_loss, drec) = mse_loss(&x_rec, x1);
    // Prediction branch.
    let map_in = concat_times(&z1, t1, t2);
    let (z2, map_tape) = map.forward_batch(&map_in)?;
    let (x_pred, dec_tape_pred) = decoder.forward_batch(&z2)?;
    let (pred_loss, dpred) = mse_loss(&x_pred, x2);

    // Reverse through both branches; decoder gradients accumulate.
    let (dec_grads_pred, dz2) = decoder.backward_batch(&dec_tape_pred, &dpred.scale(cfg.w_pred))?;
    let (map_grads, dmap_in) = map.backward_batch(&map_tape, &dz2)?;
    let (mut dec_grads, dz1_rec) = decoder.backward_batch(&dec_tape_rec, &drec.scale(cfg.w_rec))?;
    dec_grads.accumulate(&dec_grads_pred);
    let n_z = z1.cols();
    let mut dz1 = Matrix::zeros(dz1_rec.rows(), n_z);
    for i in 0..dz1.rows() {
        for j in 0..n_z {
            dz1.set(i, j, dz1_rec.get(i, j) + dmap_in.get(i, j));
        }
    }
    let (enc_grads, _) = encoder.backward_batch(&enc_tape, &dz1)?;

    let (enc_opt, dec_opt) = ae_opt.as_mut().expect("network autoencoder optimizer");
    enc_opt.step(encoder, &enc_grads);
    dec_opt.step(decoder, &dec_grads);
    map_opt.step(map, &map_grads);
    Ok(cfg.w_rec * rec_loss + cfg.w_pred * pred_loss)
}

/// Normalized-space reconstruction and prediction MSE over given indices.
fn test_metrics(
    autoencoder: &Autoencoder,
    map: &Mlp,
    identity_ae: bool,
    ds: &PairDataset,
    idx: &[usize],
) -> Result<(f64, f64), TwinError> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (x1, t1, t2, x2) = assemble_batch(ds, idx);
    if identity_ae {
        let input = concat_times(&x1, &t1, &t2);
        let (pred, _) = map.forward_batch(&input)?;
        let (pred_mse, _) = mse_loss(&pred, &x2);
        return Ok((0.0, pred_mse));
    }
    let Autoencoder::Network { encoder, decoder } = autoencoder else { unreachable!() };
    let (z1, _) = encoder.forward_batch(&x1)?;
    let (x_rec, _) = decoder.forward_batch(&z1)?;
    let (rec_mse, _) = mse_loss(&x_rec, &x1);
    let map_in = concat_times(&z1, &t1, &t2);
    let (z2, _) = map.forward_batch(&map_in)?;
    let (x_pred, _) = decoder.forward_batch(&z2)?;
    let (pred_mse, _) = mse_loss(&x_pred, &x2);
    Ok((rec_mse, pred_mse))
}

/// Empirical error-budget report. All quantities are measured: ε_AE and
/// the end-to-end error in physical units, ε_map in latent units, and the
/// decoder Lipschitz estimate over realized plus random latent pairs. The
/// bound is (1 + e^{L_G·T}) ε_AE + L_d ε_map.
#[derive(Debug, Clone)]
pub struct ErrorBudget {
    pub eps_ae: f64,
    pub eps_map: f64,
    pub decoder_lipschitz: f64,
    pub flow_lipschitz: f64,
    pub horizon: f64,
    pub bound: f64,
    pub max_end_to_end_error: f64,
    pub samples_checked: usize,
    pub all_within_bound: bool,
}

/// Measure the twin's error budget on the dataset's test split.
/// `flow_lipschitz` comes from trajectory sensitivity sampling (see
/// `odelab::estimate_flow_lipschitz`) and `horizon` is the trained span.
pub fn diagnose_error_budget(
    model: &TwinModel,
    ds: &PairDataset,
    flow_lipschitz: f64,
    horizon: f64,
) -> Result<ErrorBudget, TwinError> {
    if ds.test_idx.is_empty() {
        return Err(TwinError::EmptyTestSplit);
    }
    let mut eps_ae = 0.0_f64;
    let mut eps_map = 0.0_f64;
    let mut max_err = 0.0_f64;
    let mut lipschitz = 0.0_f64;
    let mut latent_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();

    for s in ds.test_samples() {
        // Physical-space sample.
        let x1 = ds.norm.denormalize_state(&s.x1);
        let x2 = ds.norm.denormalize_state(&s.x2);
        let t1 = ds.norm.denormalize_time(s.t1);
        let t2 = ds.norm.denormalize_time(s.t2);

        for x in [&x1, &x2] {
            let rec = twin_reconstruct(model, x)?;
            eps_ae = eps_ae.max(vec_norm(&vec_sub(&rec, x)));
        }

        let z1 = model.autoencoder.encode(&model.norm.normalize_state(&x1))?;
        let z2_true = model.autoencoder.encode(&model.norm.normalize_state(&x2))?;
        let z2_pred = match &model.map {
            LatentMap::Network(net) => {
                let mut input = z1.clone();
                input.push(model.norm.normalize_time(t1));
                input.push(model.norm.normalize_time(t2));
                net.forward(&input)?.0
            }
            LatentMap::Structured(map) => structured_evaluate(map, &z1, t1, t2)?,
        };
        eps_map = eps_map.max(vec_norm(&vec_sub(&z2_pred, &z2_true)));

        let pred = twin_evaluate(model, &x1, t1, t2)?;
        max_err = max_err.max(vec_norm(&vec_sub(&pred, &x2)));

        latent_pairs.push((z2_pred, z2_true));
    }

    // Decoder Lipschitz estimate: realized pairs, axis-aligned probes, and
    // random pairs around the realized codes.
    let decode_phys = |z: &[f64]| -> Result<Vec<f64>, TwinError> {
        let y = model.autoencoder.decode(z)?;
        Ok(model.norm.denormalize_state(&y))
    };
    let mut stream = RngStream::new(0xD1A6);
    for (za, zb) in &latent_pairs {
        let num = vec_norm(&vec_sub(&decode_phys(za)?, &decode_phys(zb)?));
        let den = vec_norm(&vec_sub(za, zb));
        if den > 1e-14 {
            lipschitz = lipschitz.max(num / den);
        }
        // Axis probes capture the per-coordinate scaling exactly for
        // linear decoders.
        for j in 0..za.len() {
            let mut zp = za.clone();
            zp[j] += 1e-4;
            let num = vec_norm(&vec_sub(&decode_phys(&zp)?, &decode_phys(za)?));
            lipschitz = lipschitz.max(num / 1e-4);
        }
    }
    for _ in 0..64 {
        let (za, _) = &latent_pairs[stream.below(latent_pairs.len())];
        let mut zb = za.clone();
        for v in &mut zb {
            *v += stream.gaussian(0.0, 0.1);
        }
        let num = vec_norm(&vec_sub(&decode_phys(za)?, &decode_phys(&zb)?));
        let den = vec_norm(&vec_sub(za, &zb));
        if den > 1e-14 {
            lipschitz = lipschitz.max(num / den);
        }
    }

    let bound = (1.0 + (flow_lipschitz * horizon).exp()) * eps_ae + lipschitz * eps_map;
    Ok(ErrorBudget {
        eps_ae,
        eps_map,
        decoder_lipschitz: lipschitz,
        flow_lipschitz,
        horizon,
        bound,
        max_end_to_end_error: max_err,
        samples_checked: ds.test_idx.len(),
        all_within_bound: max_err <= bound,
    })
}

/// Direct-vs-rollout error curves against a reference trajectory, anchored
/// at t₁. Grid points carry the direct single-shot error and the recursive
/// rollout error (stepping outward from the anchor in both directions).
#[derive(Debug, Clone)]
pub struct HorizonProfile {
    pub t2: Vec<f64>,
    pub gap: Vec<f64>,
    pub direct_error: Vec<f64>,
    pub rollout_error: Vec<f64>,
}

impl HorizonProfile {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), TwinError> {
        writeln!(w, "t2,gap,direct-error,rollout-error")?;
        for i in 0..self.t2.len() {
            writeln!(
                w,
                "{:?},{:?},{:?},{:?}",
                self.t2[i], self.gap[i], self.direct_error[i], self.rollout_error[i]
            )?;
        }
        Ok(())
    }
}

pub fn horizon_error_profile(
    model: &TwinModel,
    reference: &Trajectory,
    t1_anchor: f64,
    grid_points: usize,
) -> Result<HorizonProfile, TwinError> {
    let (t_lo, t_hi) = (reference.start_time(), reference.end_time());
    let n = grid_points.max(2);
    let grid: Vec<f64> = (0..n).map(|k| t_lo + (t_hi - t_lo) * k as f64 / (n - 1) as f64).collect();
    let x1 = reference.eval(t1_anchor);

    let mut direct = Vec::with_capacity(n);
    for &t2 in &grid {
        let pred = twin_evaluate(model, &x1, t1_anchor, t2)?;
        direct.push(vec_norm(&vec_sub(&pred, &reference.eval(t2))));
    }

    // Rollout outward from the anchor along the same grid spacing.
    let h = (t_hi - t_lo) / (n - 1) as f64;
    let mut rollout = vec![f64::NAN; n];
    let anchor_idx =
        grid.iter().enumerate().min_by(|(_, a), (_, b)| {
            (*a - t1_anchor).abs().partial_cmp(&(*b - t1_anchor).abs()).unwrap()
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut x = x1.clone();
    let mut t = t1_anchor;
    for k in anchor_idx..n {
        if k > anchor_idx {
            x = twin_evaluate(model, &x, t, grid[k])?;
            t = grid[k];
        } else {
            // First grid point: one (possibly short) step from the anchor.
            if (grid[k] - t1_anchor).abs() > 1e-12 {
                x = twin_evaluate(model, &x, t1_anchor, grid[k])?;
            }
            t = grid[k];
        }
        rollout[k] = vec_norm(&vec_sub(&x, &reference.eval(grid[k])));
    }
    let mut x = x1.clone();
    let mut t = t1_anchor;
    for k in (0..anchor_idx).rev() {
        x = twin_evaluate(model, &x, t, grid[k])?;
        t = grid[k];
        rollout[k] = vec_norm(&vec_sub(&x, &reference.eval(grid[k])));
    }

    let gap = grid.iter().map(|&t2| (t2 - t1_anchor).abs()).collect();
    let _ = h;
    Ok(HorizonProfile { t2: grid, gap, direct_error: direct, rollout_error: rollout })
}

const MODE_AE_IDENTITY: u32 = 0;
const MODE_AE_NETWORK: u32 = 1;
const MODE_MAP_NETWORK: u32 = 0;
const MODE_MAP_STRUCTURED: u32 = 1;

/// Save a twin checkpoint: `LTWT` header (modes, dims, normalization
/// stats, trained span) followed by `LTNN` sections for each network and
/// an `LTSM` section for structured maps.
pub fn save_twin(model: &TwinModel, w: &mut impl Write) -> Result<(), TwinError> {
    io::write_magic(w, b"LTWT")?;
    io::write_u32(w, 1)?;
    let ae_mode = match &model.autoencoder {
        Autoencoder::Identity { .. } => MODE_AE_IDENTITY,
        Autoencoder::Network { .. } => MODE_AE_NETWORK,
    };
    let map_mode = match &model.map {
        LatentMap::Network(_) => MODE_MAP_NETWORK,
        LatentMap::Structured(_) => MODE_MAP_STRUCTURED,
    };
    io::write_u32(w, ae_mode)?;
    io::write_u32(w, map_mode)?;
    io::write_u32(w, model.n_x as u32)?;
    io::write_u32(w, model.n_z as u32)?;
    io::write_f64_slice(w, &model.norm.state_mean)?;
    io::write_f64_slice(w, &model.norm.state_std)?;
    io::write_f64(w, model.norm.time_mean)?;
    io::write_f64(w, model.norm.time_std)?;
    io::write_f64(w, model.trained_span.0)?;
    io::write_f64(w, model.trained_span.1)?;
    if let Autoencoder::Network { encoder, decoder } = &model.autoencoder {
        encoder.save(w)?;
        decoder.save(w)?;
    }
    match &model.map {
        LatentMap::Network(net) => net.save(w)?,
        LatentMap::Structured(map) => crate::structured::save_structured(map, w)?,
    }
    Ok(())
}

pub fn load_twin(r: &mut impl Read) -> Result<TwinModel, TwinError> {
    io::expect_magic(r, b"LTWT", "twin checkpoint")?;
    io::expect_version(r, 1, "twin checkpoint")?;
    let ae_mode = io::read_u32(r)?;
    let map_mode = io::read_u32(r)?;
    let n_x = io::read_u32(r)? as usize;
    let n_z = io::read_u32(r)? as usize;
    let norm = NormStats {
        state_mean: io::read_f64_vec(r, n_x)?,
        state_std: io::read_f64_vec(r, n_x)?,
        time_mean: io::read_f64(r)?,
        time_std: io::read_f64(r)?,
    };
    let trained_span = (io::read_f64(r)?, io::read_f64(r)?);
    let autoencoder = match ae_mode {
        MODE_AE_IDENTITY => Autoencoder::Identity { n_x },
        MODE_AE_NETWORK => {
            let encoder = Mlp::load(r)?;
            let decoder = Mlp::load(r)?;
            Autoencoder::Network { encoder, decoder }
        }
        other => {
            return Err(TwinError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unknown autoencoder mode {other}"),
            )))
        }
    };
    let map = match map_mode {
        MODE_MAP_NETWORK => LatentMap::Network(Mlp::load(r)?),
        MODE_MAP_STRUCTURED => LatentMap::Structured(crate::structured::load_structured(r)?),
        other => {
            return Err(TwinError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unknown map mode {other}"),
            )))
        }
    };
    Ok(TwinModel { autoencoder, map, norm, n_x, n_z, trained_span })
}

pub fn save_twin_path(model: &TwinModel, path: &Path) -> Result<(), TwinError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_twin(model, &mut f)
}

pub fn load_twin_path(path: &Path) -> Result<TwinModel, TwinError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_twin(&mut f)
}

/// Wrap a structured map as a twin with identity autoencoder and identity
/// normalization (structured maps train on denormalized data).
pub fn twin_from_structured(map: StructuredMap, trained_span: (f64, f64)) -> TwinModel {
    let n_x = map.state_dim();
    TwinModel {
        n_z: map.latent_dim(),
        autoencoder: Autoencoder::Identity { n_x },
        map: LatentMap::Structured(map),
        norm: NormStats::identity(n_x),
        n_x,
        trained_span,
    }
}

/// Mean squared error between twin predictions and a reference trajectory
/// over a uniform evaluation grid from one anchor (t₁, x₁): the
/// "combined-state" trajectory MSE.
pub fn trajectory_mse_direct(
    model: &TwinModel,
    reference: &Trajectory,
    t1: f64,
    grid_points: usize,
) -> Result<f64, TwinError> {
    let x1 = reference.eval(t1);
    let (t_lo, t_hi) = (reference.start_time(), reference.end_time());
    let n = grid_points.max(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for k in 0..n {
        let t2 = t_lo + (t_hi - t_lo) * k as f64 / (n - 1) as f64;
        let pred = twin_evaluate(model, &x1, t1, t2)?;
        let truth = reference.eval(t2);
        for (p, x) in pred.iter().zip(&truth) {
            total += (p - x) * (p - x);
            count += 1.0;
        }
    }
    Ok(total / count)
}

/// Same grid, but stepping recursively with h = grid spacing from the
/// trajectory start.
pub fn trajectory_mse_recursive(
    model: &TwinModel,
    reference: &Trajectory,
    grid_points: usize,
) -> Result<f64, TwinError> {
    let (t_lo, t_hi) = (reference.start_time(), reference.end_time());
    let n = grid_points.max(2);
    let h = (t_hi - t_lo) / (n - 1) as f64;
    let rollout = twin_rollout(model, &reference.eval(t_lo), t_lo, h, n - 1)?;
    let mut total = 0.0;
    let mut count = 0.0;
    for (t, state) in rollout.times.iter().zip(&rollout.states) {
        let truth = reference.eval(*t);
        for (p, x) in state.iter().zip(&truth) {
            total += (p - x) * (p - x);
            count += 1.0;
        }
    }
    Ok(total / count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{self, sample_pairs_ode};
    use crate::odelab::{self, OdeSystem};
    use crate::structured::{Generator, StructuredMap};

    fn small_trained_harmonic(epochs: usize) -> (TwinModel, TrainHistory, PairDataset) {
        let ds = datasets::normalize(sample_pairs_ode(OdeSystem::Harmonic, 2048, None, 42).unwrap())
            .unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 256,
            lr: 1e-3,
            schedule: LrSchedule::constant(1e-3),
            w_rec: 1.0,
            w_pred: 1.0,
            seed: 42,
            deterministic: true,
        };
        let (model, history) = train_twin(&ds, &TwinArch::ode_default(), &cfg).unwrap();
        (model, history, ds)
    }

    #[test]
    fn structured_wrapped_twin_is_identity_at_equal_times() {
        let map = StructuredMap::new(
            Matrix::identity(2),
            Generator::Fixed(Matrix::zeros(2, 2)),
        )
        .unwrap();
        let model = twin_from_structured(map, (0.0, 10.0));
        let x = vec![0.3, -1.8];
        let y = twin_evaluate(&model, &x, 1.0, 1.0).unwrap();
        assert!(vec_norm(&vec_sub(&y, &x)) < 1e-12);
    }

    #[test]
    fn identity_ae_reconstruction_is_exactly_zero() {
        let (model, _, ds) = small_trained_harmonic(2);
        for s in ds.test_samples().take(20) {
            let x = ds.norm.denormalize_state(&s.x1);
            let rec = twin_reconstruct(&model, &x).unwrap();
            assert_eq!(rec, x);
        }
    }

    #[test]
    fn training_touches_expected_batch_count() {
        let (_, history, ds) = small_trained_harmonic(3);
        let per_epoch = ds.train_idx.len().div_ceil(256);
        assert_eq!(history.batches_touched, (3 * per_epoch) as u64);
    }

    #[test]
    fn training_loss_decreases_on_harmonic() {
        let (_, history, _) = small_trained_harmonic(40);
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
        assert!(history.epochs.iter().all(|m| m.test_rec_mse == 0.0));
    }

    #[test]
    fn autoencoder_only_training_reduces_reconstruction_error() {
        // w_pred = 0 degenerates to a plain autoencoder.
        let ds =
            datasets::normalize(sample_pairs_ode(OdeSystem::Harmonic, 1024, None, 7).unwrap())
                .unwrap();
        let arch = TwinArch {
            autoencoder: AeArch::Mlp { hidden: vec![8], latent: 2, activation: Activation::Tanh },
            map: MapArch::Affine,
        };
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 3e-3,
            schedule: LrSchedule::constant(3e-3),
            w_rec: 1.0,
            w_pred: 0.0,
            seed: 7,
            deterministic: true,
        };
        let (_, history) = train_twin(&ds, &arch, &cfg).unwrap();
        let first = history.epochs.first().unwrap().test_rec_mse;
        let last = history.epochs.last().unwrap().test_rec_mse;
        assert!(last < first, "reconstruction error {first} -> {last}");
    }

    #[test]
    fn both_zero_weights_rejected() {
        let ds = datasets::normalize(sample_pairs_ode(OdeSystem::Harmonic, 64, None, 1).unwrap())
            .unwrap();
        let mut cfg = TrainConfig::ode_default(1);
        cfg.w_rec = 0.0;
        cfg.w_pred = 0.0;
        assert!(matches!(
            train_twin(&ds, &TwinArch::ode_default(), &cfg),
            Err(TwinError::BadConfig(_))
        ));
    }

    #[test]
    fn unnormalized_dataset_rejected() {
        let ds = sample_pairs_ode(OdeSystem::Harmonic, 64, None, 1).unwrap();
        let cfg = TrainConfig::ode_default(1);
        assert!(matches!(
            train_twin(&ds, &TwinArch::ode_default(), &cfg),
            Err(TwinError::NotNormalized)
        ));
    }

    #[test]
    fn rollout_zero_steps_returns_start() {
        let (model, _, _) = small_trained_harmonic(1);
        let traj = twin_rollout(&model, &[1.0, 0.0], 0.0, 0.5, 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.states[0], vec![1.0, 0.0]);
    }

    #[test]
    fn backward_time_evaluation_is_accepted() {
        let (model, _, _) = small_trained_harmonic(1);
        let y = twin_evaluate(&model, &[1.0, 0.0], 5.0, 2.0).unwrap();
        assert_eq!(y.len(), 2);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation_bitwise() {
        let (model, _, _) = small_trained_harmonic(3);
        let mut buf = Vec::new();
        save_twin(&model, &mut buf).unwrap();
        let loaded = load_twin(&mut buf.as_slice()).unwrap();
        let x = [0.4, -0.9];
        let a = twin_evaluate(&model, &x, 1.2, 7.9).unwrap();
        let b = twin_evaluate(&loaded, &x, 1.2, 7.9).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        assert_eq!(model.param_count(), loaded.param_count());
    }

    #[test]
    fn structured_checkpoint_round_trip() {
        let map = StructuredMap::new(
            Matrix::identity(2),
            Generator::Fixed(Matrix::from_rows(&[vec![0.0, 1.0], vec![-4.0, 0.0]])),
        )
        .unwrap();
        let model = twin_from_structured(map, (0.0, 10.0));
        let mut buf = Vec::new();
        save_twin(&model, &mut buf).unwrap();
        let loaded = load_twin(&mut buf.as_slice()).unwrap();
        let a = twin_evaluate(&model, &[1.0, 0.0], 0.0, 2.3).unwrap();
        let b = twin_evaluate(&loaded, &[1.0, 0.0], 0.0, 2.3).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn error_budget_report_is_well_formed_for_untrained_model() {
        let (model, _, ds) = small_trained_harmonic(1);
        let budget = diagnose_error_budget(&model, &ds, 2.0, 10.0).unwrap();
        assert_eq!(budget.eps_ae, 0.0); // identity AE
        assert!(budget.eps_map > 0.0);
        assert!(budget.bound.is_finite());
        assert!(budget.samples_checked > 0);
    }

    #[test]
    fn error_budget_bound_holds_on_trained_harmonic() {
        let (model, _, ds) = small_trained_harmonic(60);
        let l_g = odelab::estimate_flow_lipschitz(OdeSystem::Harmonic, 30, 3).unwrap();
        let budget = diagnose_error_budget(&model, &ds, l_g, 10.0).unwrap();
        assert!(
            budget.all_within_bound,
            "max error {} exceeds bound {}",
            budget.max_end_to_end_error, budget.bound
        );
    }

    #[test]
    fn horizon_profile_anchor_point_has_autoencoder_error() {
        let (model, _, _) = small_trained_harmonic(5);
        let reference = odelab::integrate(
            OdeSystem::Harmonic,
            &[1.0, 0.0],
            0.0,
            10.0,
            odelab::DEFAULT_ATOL,
            odelab::DEFAULT_RTOL,
        )
        .unwrap();
        let profile = horizon_error_profile(&model, &reference, 0.0, 51).unwrap();
        // Identity AE: at t2 == t1 the direct error is the map's self-map
        // error, which is finite; the curve exists everywhere.
        assert_eq!(profile.t2.len(), 51);
        assert!(profile.direct_error.iter().all(|e| e.is_finite()));
        assert!(profile.rollout_error.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let (_, history, _) = small_trained_harmonic(3);
        let mut buf = Vec::new();
        history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train-loss,test-rec-mse,test-pred-mse,lr"));
        assert_eq!(text.lines().count(), 4);
    }
}
