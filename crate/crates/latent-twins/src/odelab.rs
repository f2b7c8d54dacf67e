//! Benchmark ODE systems and a high-accuracy adaptive integrator.
//!
//! The four systems span periodic (harmonic oscillator), dissipative (SIR),
//! oscillatory-nonlinear (Lotka-Volterra) and chaotic (Lorenz-63) regimes.
//! Reference trajectories come from an embedded Dormand-Prince 5(4) pair
//! with PI step-size control and a quartic dense-output interpolant, so
//! states at arbitrary query times are available without re-integrating.

use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::numkit::{vec_norm, vec_sub, Matrix, RngStream};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("dimension mismatch: state has {got} entries, system {system} expects {expect}")]
    DimMismatch { system: &'static str, got: usize, expect: usize },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("step size underflow at t = {t} (|h| = {h:e}); the problem looks stiff at this tolerance")]
    StepUnderflow { t: f64, h: f64 },
    #[error("unknown system '{0}' (expected harmonic|sir|lotka-volterra|lorenz63)")]
    UnknownSystem(String),
    #[error("trajectory i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One of the four benchmark systems, with the standard parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeSystem {
    /// x' = v, v' = -ω₀²x with ω₀ = 2.
    Harmonic,
    /// S' = -βSI, I' = βSI - γI, R' = γI with β = 0.3, γ = 0.1.
    Sir,
    /// u' = αu - βuv, v' = δuv - γv with α = 1, β = 0.1, δ = 0.075, γ = 1.5.
    LotkaVolterra,
    /// σ = 10, ρ = 28, β = 8/3.
    Lorenz63,
}

impl OdeSystem {
    pub const ALL: [OdeSystem; 4] =
        [OdeSystem::Harmonic, OdeSystem::Sir, OdeSystem::LotkaVolterra, OdeSystem::Lorenz63];

    pub fn name(self) -> &'static str {
        match self {
            OdeSystem::Harmonic => "harmonic",
            OdeSystem::Sir => "sir",
            OdeSystem::LotkaVolterra => "lotka-volterra",
            OdeSystem::Lorenz63 => "lorenz63",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, OdeError> {
        Ok(match name {
            "harmonic" => OdeSystem::Harmonic,
            "sir" => OdeSystem::Sir,
            "lotka-volterra" | "lv" => OdeSystem::LotkaVolterra,
            "lorenz63" | "lorenz" => OdeSystem::Lorenz63,
            other => return Err(OdeError::UnknownSystem(other.to_string())),
        })
    }

    pub fn dim(self) -> usize {
        match self {
            OdeSystem::Harmonic | OdeSystem::LotkaVolterra => 2,
            OdeSystem::Sir | OdeSystem::Lorenz63 => 3,
        }
    }

    pub fn default_initial(self) -> Vec<f64> {
        match self {
            OdeSystem::Harmonic => vec![1.0, 0.0],
            OdeSystem::Sir => vec![0.99, 0.01, 0.0],
            OdeSystem::LotkaVolterra => vec![10.0, 5.0],
            OdeSystem::Lorenz63 => vec![1.0, 1.0, 1.0],
        }
    }

    /// Simulation interval [0, T].
    pub fn interval(self) -> (f64, f64) {
        match self {
            OdeSystem::Harmonic => (0.0, 10.0),
            OdeSystem::Sir => (0.0, 60.0),
            OdeSystem::LotkaVolterra => (0.0, 30.0),
            OdeSystem::Lorenz63 => (0.0, 40.0),
        }
    }

    /// The vector field G(x, t).
    pub fn rhs(self, x: &[f64], _t: f64) -> Result<Vec<f64>, OdeError> {
        if x.len() != self.dim() {
            return Err(OdeError::DimMismatch { system: self.name(), got: x.len(), expect: self.dim() });
        }
        Ok(match self {
            OdeSystem::Harmonic => {
                let omega0 = 2.0;
                vec![x[1], -omega0 * omega0 * x[0]]
            }
            OdeSystem::Sir => {
                let (beta, gamma) = (0.3, 0.1);
                let (s, i) = (x[0], x[1]);
                vec![-beta * s * i, beta * s * i - gamma * i, gamma * i]
            }
            OdeSystem::LotkaVolterra => {
                let (alpha, beta, delta, gamma) = (1.0, 0.1, 0.075, 1.5);
                let (u, v) = (x[0], x[1]);
                vec![alpha * u - beta * u * v, delta * u * v - gamma * v]
            }
            OdeSystem::Lorenz63 => {
                let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
                vec![
                    sigma * (x[1] - x[0]),
                    x[0] * (rho - x[2]) - x[1],
                    x[0] * x[1] - beta * x[2],
                ]
            }
        })
    }
}

impl fmt::Display for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dormand-Prince 5(4) tableau.
mod dopri5 {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    pub const A: [[f64; 6]; 7] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    /// 5th-order weights (identical to the last A row; FSAL).
    pub const B5: [f64; 7] =
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    /// Embedded 4th-order weights.
    pub const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
    /// Dense-output coefficients: y(t₀+θh) = y₀ + h Σᵢ kᵢ Σⱼ P[i][j] θ^{j+1}.
    /// The quartic matches value and slope at both step endpoints.
    pub const P: [[f64; 4]; 7] = [
        [
            1.0,
            -8048581381.0 / 2820520608.0,
            8663915743.0 / 2820520608.0,
            -12715105075.0 / 11282082432.0,
        ],
        [0.0, 0.0, 0.0, 0.0],
        [
            0.0,
            131558114200.0 / 32700410799.0,
            -68118460800.0 / 10900136933.0,
            87487479700.0 / 32700410799.0,
        ],
        [
            0.0,
            -1754552775.0 / 470086768.0,
            14199869525.0 / 1410260304.0,
            -10690763975.0 / 1880347072.0,
        ],
        [
            0.0,
            127303824393.0 / 49829197408.0,
            -318862633887.0 / 49829197408.0,
            701980252875.0 / 199316789632.0,
        ],
        [
            0.0,
            -282668133.0 / 205662961.0,
            2019193451.0 / 616988883.0,
            -1453857185.0 / 822651844.0,
        ],
        [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
    ];
}

/// One accepted step with the stage values needed for dense evaluation.
#[derive(Debug, Clone)]
struct DenseSegment {
    t0: f64,
    h: f64,
    y0: Vec<f64>,
    stages: [Vec<f64>; 7],
}

impl DenseSegment {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / self.h;
        for (d, &y) in out.iter_mut().zip(&self.y0) {
            *d = y;
        }
        for (i, k) in self.stages.iter().enumerate() {
            // Horner evaluation of Σⱼ P[i][j] θ^{j+1}.
            let p = &dopri5::P[i];
            let poly = theta * (p[0] + theta * (p[1] + theta * (p[2] + theta * p[3])));
            let w = self.h * poly;
            for (d, &kv) in out.iter_mut().zip(k) {
                *d += w * kv;
            }
        }
    }
}

/// Solution trajectory: strictly monotone times with one state per time.
/// When produced by [`integrate`] it also carries the dense interpolant.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    dense: Option<Vec<DenseSegment>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Self {
        assert_eq!(times.len(), states.len());
        Trajectory { times, states, dense: None }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn start_time(&self) -> f64 {
        *self.times.first().expect("empty trajectory")
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("empty trajectory")
    }

    /// State at an arbitrary time inside the integration span. Uses the
    /// dense interpolant when available, otherwise linear interpolation;
    /// clamps outside the span.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        assert!(n > 0, "empty trajectory");
        if let Some(segments) = &self.dense {
            let forward = self.times[n - 1] >= self.times[0];
            let idx = segment_index(segments, t, forward);
            let mut out = vec![0.0; self.dim()];
            segments[idx].eval(t, &mut out);
            return out;
        }
        // Fallback: linear interpolation on stored samples.
        if n == 1 || t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let mut hi = self.times.partition_point(|&ti| ti < t);
        if hi == 0 {
            hi = 1;
        }
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        self.states[lo]
            .iter()
            .zip(&self.states[hi])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Resample onto an explicit time grid.
    pub fn sample(&self, times: &[f64]) -> Trajectory {
        let states = times.iter().map(|&t| self.eval(t)).collect();
        Trajectory { times: times.to_vec(), states, dense: None }
    }

    /// CSV export with columns `t, x1..xn`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), OdeError> {
        write!(w, "t")?;
        for j in 0..self.dim() {
            write!(w, ",x{}", j + 1)?;
        }
        writeln!(w)?;
        for (t, state) in self.times.iter().zip(&self.states) {
            write!(w, "{t:?}")?;
            for v in state {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<(), OdeError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)
    }
}

fn segment_index(segments: &[DenseSegment], t: f64, forward: bool) -> usize {
    let n = segments.len();
    let pos = if forward {
        segments.partition_point(|s| s.t0 + s.h < t)
    } else {
        segments.partition_point(|s| s.t0 + s.h > t)
    };
    pos.min(n - 1)
}

/// Default tolerances: the high-precision reference mode.
pub const DEFAULT_ATOL: f64 = 1e-12;
pub const DEFAULT_RTOL: f64 = 1e-10;

/// Integrate one of the benchmark systems from `x0` at `t0` to `t1`
/// (backward when `t1 < t0`).
pub fn integrate(
    sys: OdeSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    atol: f64,
    rtol: f64,
) -> Result<Trajectory, OdeError> {
    integrate_rhs(|x, t| sys.rhs(x, t), x0, t0, t1, atol, rtol)
}

/// Integrate an arbitrary vector field with the same embedded pair.
pub fn integrate_rhs<F>(
    f: F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    atol: f64,
    rtol: f64,
) -> Result<Trajectory, OdeError>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>, OdeError>,
{
    let dim = x0.len();
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(OdeError::NonFinite { t: t0 });
    }
    let mut times = vec![t0];
    let mut states = vec![x0.to_vec()];
    let mut segments: Vec<DenseSegment> = Vec::new();
    if t1 == t0 {
        return Ok(Trajectory { times, states, dense: Some(segments) });
    }

    let direction = if t1 > t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = x0.to_vec();
    let mut k1 = f(&y, t)?;
    let mut h = direction * initial_step(&f, &y, &k1, t, direction, atol, rtol)?.min(span);

    // PI controller constants (order 5): safety 0.9, beta 0.04.
    let beta = 0.04;
    let alpha = 0.2 - beta * 0.75;
    let safety = 0.9;
    let (fac_min, fac_max) = (0.2, 10.0);
    let mut err_prev: f64 = 1e-4;
    let max_steps = 10_000_000usize;

    let mut stages: [Vec<f64>; 7] = Default::default();
    for _ in 0..max_steps {
        if (t - t1) * direction >= 0.0 {
            return Ok(Trajectory { times, states, dense: Some(segments) });
        }
        if (t + h - t1) * direction > 0.0 {
            h = t1 - t;
        }
        if h.abs() < 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t, h });
        }

        stages[0] = k1.clone();
        let mut work = vec![0.0; dim];
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, stage) in stages.iter().enumerate().take(s) {
                    let a = dopri5::A[s][j];
                    if a != 0.0 {
                        acc += a * stage[i];
                    }
                }
                work[i] = y[i] + h * acc;
            }
            stages[s] = f(&work, t + dopri5::C[s] * h)?;
        }
        // 5th-order solution (B5 row equals A[6], so stage 7 already holds
        // f at the candidate y1 by the FSAL property).
        let y1 = &work;
        let k7 = &stages[6];

        // Scaled RMS error of the embedded difference.
        let mut err_sq = 0.0;
        for i in 0..dim {
            let mut e = 0.0;
            for (j, stage) in stages.iter().enumerate() {
                let db = dopri5::B5[j] - dopri5::B4[j];
                if db != 0.0 {
                    e += db * stage[i];
                }
            }
            e *= h;
            let scale = atol + rtol * y[i].abs().max(y1[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / dim as f64).sqrt().max(1e-16);

        if err <= 1.0 {
            if !y1.iter().all(|v| v.is_finite()) {
                return Err(OdeError::NonFinite { t: t + h });
            }
            segments.push(DenseSegment {
                t0: t,
                h,
                y0: y.clone(),
                stages: stages.clone(),
            });
            t += h;
            y = y1.clone();
            k1 = k7.clone();
            times.push(t);
            states.push(y.clone());
            let factor =
                (safety * err.powf(-alpha) * err_prev.powf(beta)).clamp(fac_min, fac_max);
            h *= factor;
            err_prev = err;
        } else {
            let factor = (safety * err.powf(-0.2)).clamp(fac_min, 1.0);
            h *= factor;
        }
    }
    Err(OdeError::StepUnderflow { t, h })
}

/// Hairer-style automatic initial step selection.
fn initial_step<F>(
    f: &F,
    y0: &[f64],
    f0: &[f64],
    t0: f64,
    direction: f64,
    atol: f64,
    rtol: f64,
) -> Result<f64, OdeError>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>, OdeError>,
{
    let scale: Vec<f64> = y0.iter().map(|&v| atol + rtol * v.abs()).collect();
    let d0 = rms(y0, &scale);
    let d1 = rms(f0, &scale);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, k)| y + direction * h0 * k).collect();
    let f1 = f(&y1, t0 + direction * h0)?;
    let d2 = rms(&vec_sub(&f1, f0), &scale) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}

fn rms(v: &[f64], scale: &[f64]) -> f64 {
    let s: f64 = v.iter().zip(scale).map(|(a, b)| (a / b) * (a / b)).sum();
    (s / v.len() as f64).sqrt()
}

/// Empirical Lipschitz estimate L_G of the flow: integrate perturbed initial
/// states and take the largest observed log-amplification rate
/// log(‖Φ(t₂,t₁,x+δ) − Φ(t₂,t₁,x)‖/‖δ‖) / |t₂−t₁| over sampled pairs.
pub fn estimate_flow_lipschitz(
    sys: OdeSystem,
    n_samples: usize,
    seed: u64,
) -> Result<f64, OdeError> {
    let (t_lo, t_hi) = sys.interval();
    let reference = integrate(sys, &sys.default_initial(), t_lo, t_hi, DEFAULT_ATOL, DEFAULT_RTOL)?;
    let mut stream = RngStream::new(seed);
    let delta = 1e-6;
    let mut l_max: f64 = 0.0;
    for _ in 0..n_samples {
        let t1 = stream.uniform(t_lo, t_hi);
        let mut t2 = stream.uniform(t_lo, t_hi);
        if (t2 - t1).abs() < 1e-3 {
            t2 = if t1 + 0.5 < t_hi { t1 + 0.5 } else { t1 - 0.5 };
        }
        let x1 = reference.eval(t1);
        let mut x1p = x1.clone();
        for v in &mut x1p {
            *v += delta * stream.gaussian(0.0, 1.0);
        }
        let d0 = vec_norm(&vec_sub(&x1p, &x1));
        if d0 == 0.0 {
            continue;
        }
        let a = integrate(sys, &x1, t1, t2, 1e-10, 1e-8)?;
        let b = integrate(sys, &x1p, t1, t2, 1e-10, 1e-8)?;
        let d1 = vec_norm(&vec_sub(
            b.states.last().expect("nonempty"),
            a.states.last().expect("nonempty"),
        ));
        if d1 > 0.0 {
            let rate = (d1 / d0).ln() / (t2 - t1).abs();
            l_max = l_max.max(rate);
        }
    }
    Ok(l_max)
}

/// Matrix wrapper: the linear system x' = Mx as an integrable vector field.
pub fn linear_rhs(m: &Matrix) -> impl Fn(&[f64], f64) -> Result<Vec<f64>, OdeError> + '_ {
    move |x, _t| {
        if x.len() != m.cols() {
            return Err(OdeError::DimMismatch { system: "linear", got: x.len(), expect: m.cols() });
        }
        Ok(m.matvec(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rhs_harmonic_at_initial_state() {
        let g = OdeSystem::Harmonic.rhs(&[1.0, 0.0], 0.0).unwrap();
        assert_eq!(g, vec![0.0, -4.0]);
    }

    #[test]
    fn rhs_sir_direct_substitution() {
        let g = OdeSystem::Sir.rhs(&[0.99, 0.01, 0.0], 0.0).unwrap();
        assert!((g[0] + 0.00297).abs() < 1e-15);
        assert!((g[1] - 0.00197).abs() < 1e-15);
        assert!((g[2] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn rhs_lorenz_origin_is_fixed_point() {
        let g = OdeSystem::Lorenz63.rhs(&[0.0, 0.0, 0.0], 0.0).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn rhs_lotka_volterra_substitution() {
        let g = OdeSystem::LotkaVolterra.rhs(&[10.0, 5.0], 0.0).unwrap();
        // u' = 10 - 0.1*50 = 5, v' = 0.075*50 - 7.5 = -3.75
        assert!((g[0] - 5.0).abs() < 1e-12);
        assert!((g[1] + 3.75).abs() < 1e-12);
    }

    #[test]
    fn rhs_rejects_wrong_dimension() {
        assert!(matches!(
            OdeSystem::Harmonic.rhs(&[1.0, 2.0, 3.0], 0.0),
            Err(OdeError::DimMismatch { .. })
        ));
    }

    #[test]
    fn dense_coefficients_satisfy_collocation_identities() {
        // At θ=1 the interpolant must reproduce the 5th-order step, and its
        // slope must equal k7 (= f at the step end, FSAL).
        for i in 0..7 {
            let sum: f64 = dopri5::P[i].iter().sum();
            assert!((sum - dopri5::B5[i]).abs() < 1e-14, "row {i} endpoint value");
            let dsum: f64 =
                dopri5::P[i].iter().enumerate().map(|(j, p)| (j + 1) as f64 * p).sum();
            let expect = if i == 6 { 1.0 } else { 0.0 };
            assert!((dsum - expect).abs() < 1e-12, "row {i} endpoint slope");
        }
    }

    #[test]
    fn harmonic_integrates_to_analytic_solution() {
        // x(t) = (cos 2t, -2 sin 2t).
        let t_end = std::f64::consts::FRAC_PI_2;
        let traj =
            integrate(OdeSystem::Harmonic, &[1.0, 0.0], 0.0, t_end, DEFAULT_ATOL, DEFAULT_RTOL)
                .unwrap();
        let x = traj.states.last().unwrap();
        assert!((x[0] + 1.0).abs() < 1e-8, "x = {x:?}");
        assert!(x[1].abs() < 1e-8, "x = {x:?}");
    }

    #[test]
    fn dense_output_matches_analytic_between_steps() {
        let traj =
            integrate(OdeSystem::Harmonic, &[1.0, 0.0], 0.0, 10.0, DEFAULT_ATOL, DEFAULT_RTOL)
                .unwrap();
        let mut stream = RngStream::new(4);
        for _ in 0..200 {
            let t = stream.uniform(0.0, 10.0);
            let x = traj.eval(t);
            assert!((x[0] - (2.0 * t).cos()).abs() < 1e-8, "t={t}");
            assert!((x[1] + 2.0 * (2.0 * t).sin()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn zero_span_returns_initial_state() {
        let traj = integrate(OdeSystem::Sir, &[0.9, 0.1, 0.0], 3.0, 3.0, 1e-12, 1e-10).unwrap();
        assert_eq!(traj.times, vec![3.0]);
        assert_eq!(traj.states[0], vec![0.9, 0.1, 0.0]);
    }

    #[test]
    fn lorenz_forward_backward_round_trip() {
        // The T=1 round trip amplifies local error by roughly 3e5 (chaotic
        // conditioning), so hitting 1e-6 requires rtol ~ 1e-12. The error
        // scales linearly with the tolerance, which is the actual check.
        let x0 = vec![1.0, 1.0, 1.0];
        let round_trip = |atol: f64, rtol: f64| {
            let fwd = integrate(OdeSystem::Lorenz63, &x0, 0.0, 1.0, atol, rtol).unwrap();
            let x1 = fwd.states.last().unwrap().clone();
            let bwd = integrate(OdeSystem::Lorenz63, &x1, 1.0, 0.0, atol, rtol).unwrap();
            vec_norm(&vec_sub(bwd.states.last().unwrap(), &x0))
        };
        let tight = round_trip(1e-13, 1e-12);
        assert!(tight < 1e-6, "round-trip error {tight}");
        let loose = round_trip(DEFAULT_ATOL, DEFAULT_RTOL);
        assert!(loose < 1e-3, "round-trip error {loose}");
        assert!(tight < loose);
    }

    #[test]
    fn harmonic_energy_conserved() {
        let traj =
            integrate(OdeSystem::Harmonic, &[1.0, 0.0], 0.0, 10.0, DEFAULT_ATOL, DEFAULT_RTOL)
                .unwrap();
        let energy = |x: &[f64]| 4.0 * x[0] * x[0] + x[1] * x[1];
        let e0 = energy(&traj.states[0]);
        for s in &traj.states {
            assert!((energy(s) - e0).abs() / e0 < 1e-8);
        }
    }

    #[test]
    fn sir_population_conserved() {
        let traj = integrate(
            OdeSystem::Sir,
            &[0.99, 0.01, 0.0],
            0.0,
            60.0,
            DEFAULT_ATOL,
            DEFAULT_RTOL,
        )
        .unwrap();
        for s in &traj.states {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn tighter_tolerance_reduces_error() {
        let t_end = 3.0_f64;
        let exact = [(2.0 * t_end).cos(), -2.0 * (2.0 * t_end).sin()];
        let err_at = |atol: f64, rtol: f64| {
            let traj = integrate(OdeSystem::Harmonic, &[1.0, 0.0], 0.0, t_end, atol, rtol).unwrap();
            let x = traj.states.last().unwrap();
            vec_norm(&vec_sub(x, &exact))
        };
        let coarse = err_at(1e-6, 1e-4);
        let fine = err_at(1e-9, 1e-7);
        assert!(fine < coarse, "coarse {coarse}, fine {fine}");
        assert!(fine < 1e-6);
    }

    #[test]
    fn linear_rhs_matches_expm_flow() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![-4.0, 0.0]]);
        let x0 = vec![0.3, -0.7];
        let traj = integrate_rhs(linear_rhs(&m), &x0, 0.0, 1.3, 1e-12, 1e-10).unwrap();
        let flow = crate::numkit::expm(&m.scale(1.3)).unwrap();
        let expected = flow.matvec(&x0);
        let err = vec_norm(&vec_sub(traj.states.last().unwrap(), &expected));
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn csv_export_has_expected_shape() {
        let traj = integrate(OdeSystem::Harmonic, &[1.0, 0.0], 0.0, 1.0, 1e-9, 1e-7).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2");
        assert_eq!(lines.count(), traj.len());
    }

    #[test]
    fn flow_lipschitz_estimate_is_positive_and_finite() {
        let l = estimate_flow_lipschitz(OdeSystem::Harmonic, 20, 9).unwrap();
        assert!(l.is_finite() && l > 0.0);
        // Oscillator amplification is bounded by ω₀ = 2 up to sampling slack.
        assert!(l < 4.0, "estimate {l}");
    }
}
