//! Random time-pair datasets: generation from ODE or field trajectories,
//! normalization, deterministic splits, and binary persistence.
//!
//! A sample is one pair ((t₁,x₁),(t₂,x₂)) read from a single trajectory —
//! no ordering or spacing is assumed between t₁ and t₂. The on-disk format
//! is little-endian f64 behind the `LTW1` magic, with normalization stats
//! and split indices in a plain-text sidecar next to the data file.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::io;
use crate::numkit::RngStream;
use crate::odelab::{self, OdeSystem};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("gap cap must be positive, got {0}")]
    InvalidGapCap(f64),
    #[error("need at least one sample")]
    Empty,
    #[error("no source trajectories supplied")]
    NoTrajectories,
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset is not normalized")]
    NotNormalized,
    #[error("integration failed: {0}")]
    Ode(#[from] odelab::OdeError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar file {path}: {problem}")]
    Sidecar { path: PathBuf, problem: String },
}

/// One training record: two time-stamped states from the same trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub t1: f64,
    pub x1: Vec<f64>,
    pub t2: f64,
    pub x2: Vec<f64>,
}

/// Per-dimension state statistics plus shared time statistics. Dimensions
/// with zero variance keep std = 1 so normalization is always invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub time_mean: f64,
    pub time_std: f64,
}

impl NormStats {
    /// No-op statistics (mean 0, std 1).
    pub fn identity(n_x: usize) -> Self {
        NormStats {
            state_mean: vec![0.0; n_x],
            state_std: vec![1.0; n_x],
            time_mean: 0.0,
            time_std: 1.0,
        }
    }

    /// Fit to the given states (pooled) and times (pooled), clamping zero
    /// standard deviations to 1.
    pub fn fit<'a>(
        states: impl Iterator<Item = &'a [f64]>,
        times: impl Iterator<Item = f64>,
        n_x: usize,
    ) -> Self {
        let mut mean = vec![0.0; n_x];
        let mut m2 = vec![0.0; n_x];
        let mut count = 0.0;
        for x in states {
            count += 1.0;
            for (j, &v) in x.iter().enumerate() {
                let d = v - mean[j];
                mean[j] += d / count;
                m2[j] += d * (v - mean[j]);
            }
        }
        let std: Vec<f64> = m2
            .iter()
            .map(|&s| {
                let sd = if count > 0.0 { (s / count).sqrt() } else { 0.0 };
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let ts: Vec<f64> = times.collect();
        let tm = crate::numkit::mean(&ts);
        let tsd = crate::numkit::std_dev(&ts);
        NormStats {
            state_mean: mean,
            state_std: std,
            time_mean: tm,
            time_std: if tsd > 0.0 { tsd } else { 1.0 },
        }
    }

    pub fn normalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_state(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.time_mean) / self.time_std
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        t * self.time_std + self.time_mean
    }
}

/// A pair dataset with its normalization statistics and a deterministic
/// train/test split (disjoint and exhaustive).
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub n_x: usize,
    pub samples: Vec<PairSample>,
    pub norm: NormStats,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub normalized: bool,
}

/// Default train fraction for splits.
pub const TRAIN_FRACTION: f64 = 0.8;

impl PairDataset {
    fn with_split(n_x: usize, samples: Vec<PairSample>, seed: u64) -> Self {
        let (train_idx, test_idx) = split_indices(samples.len(), TRAIN_FRACTION, seed);
        PairDataset {
            n_x,
            samples,
            norm: NormStats::identity(n_x),
            train_idx,
            test_idx,
            seed,
            normalized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &PairSample> {
        self.train_idx.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &PairSample> {
        self.test_idx.iter().map(|&i| &self.samples[i])
    }
}

fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut stream = RngStream::new(seed).fork(0x5B17);
    stream.shuffle(&mut idx);
    let n_train = (n as f64 * train_fraction).round() as usize;
    let test = idx.split_off(n_train.min(n));
    (idx, test)
}

/// Draw J random time pairs from the system's reference trajectory
/// (the single stated initial condition, integrated in high-precision
/// mode). With a gap cap τ, (t₁,t₂) is rejection-resampled until
/// |t₂−t₁| ≤ τ.
pub fn sample_pairs_ode(
    sys: OdeSystem,
    j: usize,
    gap_cap: Option<f64>,
    seed: u64,
) -> Result<PairDataset, DataError> {
    if let Some(tau) = gap_cap {
        if tau <= 0.0 {
            return Err(DataError::InvalidGapCap(tau));
        }
    }
    if j == 0 {
        return Err(DataError::Empty);
    }
    let (t_lo, t_hi) = sys.interval();
    let reference = odelab::integrate(
        sys,
        &sys.default_initial(),
        t_lo,
        t_hi,
        odelab::DEFAULT_ATOL,
        odelab::DEFAULT_RTOL,
    )?;
    let mut stream = RngStream::new(seed);
    let mut samples = Vec::with_capacity(j);
    for _ in 0..j {
        let (t1, t2) = loop {
            let t1 = stream.uniform(t_lo, t_hi);
            let t2 = stream.uniform(t_lo, t_hi);
            match gap_cap {
                Some(tau) if (t2 - t1).abs() > tau => continue,
                _ => break (t1, t2),
            }
        };
        samples.push(PairSample { t1, x1: reference.eval(t1), t2, x2: reference.eval(t2) });
    }
    Ok(PairDataset::with_split(sys.dim(), samples, seed))
}

/// A flattened source trajectory: snapshot times with one state vector per
/// time. Field sources flatten channel-major before reaching this point.
#[derive(Debug, Clone)]
pub struct SourceTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

/// Draw J pairs uniformly over (trajectory, snapshot t₁, snapshot t₂).
pub fn sample_pairs_field(
    trajectories: &[SourceTrajectory],
    j: usize,
    seed: u64,
) -> Result<PairDataset, DataError> {
    if trajectories.is_empty() || trajectories.iter().any(|t| t.states.is_empty()) {
        return Err(DataError::NoTrajectories);
    }
    if j == 0 {
        return Err(DataError::Empty);
    }
    let n_x = trajectories[0].states[0].len();
    let mut stream = RngStream::new(seed);
    let mut samples = Vec::with_capacity(j);
    for _ in 0..j {
        let traj = &trajectories[stream.below(trajectories.len())];
        let i1 = stream.below(traj.times.len());
        let i2 = stream.below(traj.times.len());
        samples.push(PairSample {
            t1: traj.times[i1],
            x1: traj.states[i1].clone(),
            t2: traj.times[i2],
            x2: traj.states[i2].clone(),
        });
    }
    Ok(PairDataset::with_split(n_x, samples, seed))
}

/// Normalize states and times in place using statistics computed on the
/// training split only.
pub fn normalize(mut ds: PairDataset) -> Result<PairDataset, DataError> {
    if ds.normalized {
        return Err(DataError::AlreadyNormalized);
    }
    let stats = NormStats::fit(
        ds.train_idx
            .iter()
            .flat_map(|&i| [ds.samples[i].x1.as_slice(), ds.samples[i].x2.as_slice()]),
        ds.train_idx.iter().flat_map(|&i| [ds.samples[i].t1, ds.samples[i].t2]),
        ds.n_x,
    );
    for s in &mut ds.samples {
        s.x1 = stats.normalize_state(&s.x1);
        s.x2 = stats.normalize_state(&s.x2);
        s.t1 = stats.normalize_time(s.t1);
        s.t2 = stats.normalize_time(s.t2);
    }
    ds.norm = stats;
    ds.normalized = true;
    Ok(ds)
}

/// Undo [`normalize`], restoring original units.
pub fn denormalize(mut ds: PairDataset) -> Result<PairDataset, DataError> {
    if !ds.normalized {
        return Err(DataError::NotNormalized);
    }
    for s in &mut ds.samples {
        s.x1 = ds.norm.denormalize_state(&s.x1);
        s.x2 = ds.norm.denormalize_state(&s.x2);
        s.t1 = ds.norm.denormalize_time(s.t1);
        s.t2 = ds.norm.denormalize_time(s.t2);
    }
    ds.norm = NormStats::identity(ds.n_x);
    ds.normalized = false;
    Ok(ds)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn write_f64_line(w: &mut impl Write, key: &str, vals: &[f64]) -> std::io::Result<()> {
    write!(w, "{key} =")?;
    for v in vals {
        write!(w, " {v:?}")?;
    }
    writeln!(w)
}

/// Save the dataset: binary pairs at `path` (`LTW1`), stats and split in a
/// `<path>.meta` sidecar. Round trips are bit-exact.
pub fn save(ds: &PairDataset, path: &Path) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    io::write_magic(&mut f, b"LTW1")?;
    io::write_u32(&mut f, 1)?;
    io::write_u32(&mut f, ds.n_x as u32)?;
    io::write_u64(&mut f, ds.samples.len() as u64)?;
    for s in &ds.samples {
        io::write_f64(&mut f, s.t1)?;
        io::write_f64_slice(&mut f, &s.x1)?;
        io::write_f64(&mut f, s.t2)?;
        io::write_f64_slice(&mut f, &s.x2)?;
    }
    f.flush()?;

    let mut m = std::io::BufWriter::new(std::fs::File::create(sidecar_path(path))?);
    writeln!(m, "# pair dataset sidecar: normalization stats and split")?;
    writeln!(m, "seed = {}", ds.seed)?;
    writeln!(m, "normalized = {}", ds.normalized)?;
    write_f64_line(&mut m, "state_mean", &ds.norm.state_mean)?;
    write_f64_line(&mut m, "state_std", &ds.norm.state_std)?;
    write_f64_line(&mut m, "time_mean", &[ds.norm.time_mean])?;
    write_f64_line(&mut m, "time_std", &[ds.norm.time_std])?;
    writeln!(
        m,
        "train_idx = {}",
        ds.train_idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    writeln!(
        m,
        "test_idx = {}",
        ds.test_idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    m.flush()?;
    Ok(())
}

/// Load a dataset saved by [`save`].
pub fn load(path: &Path) -> Result<PairDataset, DataError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    io::expect_magic(&mut f, b"LTW1", "pair dataset")?;
    io::expect_version(&mut f, 1, "pair dataset")?;
    let n_x = io::read_u32(&mut f)? as usize;
    let j = io::read_u64(&mut f)? as usize;
    let mut samples = Vec::with_capacity(j);
    for _ in 0..j {
        let t1 = io::read_f64(&mut f)?;
        let x1 = io::read_f64_vec(&mut f, n_x)?;
        let t2 = io::read_f64(&mut f)?;
        let x2 = io::read_f64_vec(&mut f, n_x)?;
        samples.push(PairSample { t1, x1, t2, x2 });
    }

    let side = sidecar_path(path);
    let meta = std::fs::File::open(&side)
        .map_err(|e| DataError::Sidecar { path: side.clone(), problem: e.to_string() })?;
    let mut fields: HashMap<String, String> = HashMap::new();
    for line in std::io::BufReader::new(meta).lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
    }
    let get = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| DataError::Sidecar {
            path: side.clone(),
            problem: format!("missing key '{k}'"),
        })
    };
    let parse_f64s = |k: &str| -> Result<Vec<f64>, DataError> {
        get(k)?
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| DataError::Sidecar {
                    path: side.clone(),
                    problem: format!("bad float in '{k}': {e}"),
                })
            })
            .collect()
    };
    let parse_usizes = |k: &str| -> Result<Vec<usize>, DataError> {
        let raw = get(k)?;
        raw.split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|e| DataError::Sidecar {
                    path: side.clone(),
                    problem: format!("bad index in '{k}': {e}"),
                })
            })
            .collect()
    };

    let norm = NormStats {
        state_mean: parse_f64s("state_mean")?,
        state_std: parse_f64s("state_std")?,
        time_mean: parse_f64s("time_mean")?[0],
        time_std: parse_f64s("time_std")?[0],
    };
    let seed = get("seed")?.parse::<u64>().map_err(|e| DataError::Sidecar {
        path: side.clone(),
        problem: format!("bad seed: {e}"),
    })?;
    let normalized = get("normalized")? == "true";
    Ok(PairDataset {
        n_x,
        samples,
        norm,
        train_idx: parse_usizes("train_idx")?,
        test_idx: parse_usizes("test_idx")?,
        seed,
        normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{vec_norm, vec_sub};

    #[test]
    fn ode_pairs_have_expected_count_and_range() {
        let ds = sample_pairs_ode(OdeSystem::Harmonic, 512, None, 1).unwrap();
        assert_eq!(ds.len(), 512);
        assert_eq!(ds.n_x, 2);
        for s in &ds.samples {
            assert!((0.0..=10.0).contains(&s.t1));
            assert!((0.0..=10.0).contains(&s.t2));
        }
        // Roughly uniform times: mean near T/2.
        let mean_t1 = crate::numkit::mean(&ds.samples.iter().map(|s| s.t1).collect::<Vec<_>>());
        assert!((mean_t1 - 5.0).abs() < 0.5, "mean t1 {mean_t1}");
    }

    #[test]
    fn gap_cap_is_respected_exactly() {
        let ds = sample_pairs_ode(OdeSystem::Lorenz63, 1000, Some(0.4), 2).unwrap();
        let max_gap = ds
            .samples
            .iter()
            .map(|s| (s.t2 - s.t1).abs())
            .fold(0.0, f64::max);
        assert!(max_gap <= 0.4, "max gap {max_gap}");
    }

    #[test]
    fn invalid_gap_cap_rejected() {
        assert!(matches!(
            sample_pairs_ode(OdeSystem::Harmonic, 10, Some(0.0), 3),
            Err(DataError::InvalidGapCap(_))
        ));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let a = sample_pairs_ode(OdeSystem::Sir, 100, None, 42).unwrap();
        let b = sample_pairs_ode(OdeSystem::Sir, 100, None, 42).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.test_idx, b.test_idx);
        assert_eq!(a.train_idx.len(), 80);
        assert_eq!(a.test_idx.len(), 20);
        let mut all: Vec<usize> = a.train_idx.iter().chain(&a.test_idx).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn pair_consistency_against_reintegration() {
        // Re-integrating (t1, x1) -> t2 must reproduce x2. Chaotic Lorenz
        // uses the gap-capped dataset; long gaps amplify any tolerance-level
        // difference beyond every fixed bound.
        let cases = [
            (OdeSystem::Harmonic, None),
            (OdeSystem::Sir, None),
            (OdeSystem::LotkaVolterra, None),
            (OdeSystem::Lorenz63, Some(0.4)),
        ];
        for (sys, cap) in cases {
            let ds = sample_pairs_ode(sys, 100, cap, 7).unwrap();
            for s in &ds.samples {
                let traj = odelab::integrate(sys, &s.x1, s.t1, s.t2, 1e-12, 1e-10).unwrap();
                let err = vec_norm(&vec_sub(traj.states.last().unwrap(), &s.x2));
                assert!(err < 1e-6, "{sys}: err {err} over gap {}", (s.t2 - s.t1).abs());
            }
        }
    }

    #[test]
    fn forced_equal_times_give_equal_states() {
        let ds = sample_pairs_ode(OdeSystem::Harmonic, 64, None, 5).unwrap();
        // Same-time evaluation through the dense trajectory is exact.
        let reference = odelab::integrate(
            OdeSystem::Harmonic,
            &[1.0, 0.0],
            0.0,
            10.0,
            odelab::DEFAULT_ATOL,
            odelab::DEFAULT_RTOL,
        )
        .unwrap();
        let t = ds.samples[0].t1;
        assert_eq!(reference.eval(t), reference.eval(t));
    }

    #[test]
    fn normalize_centers_training_split() {
        let ds = sample_pairs_ode(OdeSystem::LotkaVolterra, 2048, None, 11).unwrap();
        let ds = normalize(ds).unwrap();
        let n = ds.n_x;
        let mut mean = vec![0.0; n];
        let mut count = 0.0;
        for s in ds.train_samples() {
            for (j, (&a, &b)) in s.x1.iter().zip(&s.x2).enumerate() {
                mean[j] += a + b;
            }
            count += 2.0;
        }
        for m in &mut mean {
            *m /= count;
            assert!(m.abs() < 1e-10, "train mean {m}");
        }
    }

    #[test]
    fn normalize_round_trip_is_tight() {
        let ds = sample_pairs_ode(OdeSystem::Sir, 256, None, 13).unwrap();
        let original = ds.clone();
        let back = denormalize(normalize(ds).unwrap()).unwrap();
        for (a, b) in original.samples.iter().zip(&back.samples) {
            assert!(vec_norm(&vec_sub(&a.x1, &b.x1)) < 1e-12);
            assert!(vec_norm(&vec_sub(&a.x2, &b.x2)) < 1e-12);
            assert!((a.t1 - b.t1).abs() < 1e-12);
            assert!((a.t2 - b.t2).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_dimension_keeps_unit_std() {
        let trajs = vec![SourceTrajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 4.0]],
        }];
        let ds = sample_pairs_field(&trajs, 50, 3).unwrap();
        let ds = normalize(ds).unwrap();
        assert_eq!(ds.norm.state_std[0], 1.0);
        for s in &ds.samples {
            assert_eq!(s.x1[0], 0.0); // (3 - 3) / 1
        }
    }

    #[test]
    fn field_pairs_from_single_snapshot_are_degenerate() {
        let trajs = vec![SourceTrajectory {
            times: vec![2.5],
            states: vec![vec![1.0, 2.0, 3.0]],
        }];
        let ds = sample_pairs_field(&trajs, 10, 9).unwrap();
        for s in &ds.samples {
            assert_eq!(s.x1, s.x2);
            assert_eq!(s.t1, s.t2);
        }
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.ltw");
        let ds = normalize(sample_pairs_ode(OdeSystem::Harmonic, 128, None, 21).unwrap()).unwrap();
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(ds.n_x, loaded.n_x);
        assert_eq!(ds.seed, loaded.seed);
        assert_eq!(ds.normalized, loaded.normalized);
        assert_eq!(ds.train_idx, loaded.train_idx);
        assert_eq!(ds.test_idx, loaded.test_idx);
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.t1.to_bits(), b.t1.to_bits());
            assert_eq!(a.t2.to_bits(), b.t2.to_bits());
            for (x, y) in a.x1.iter().zip(&b.x1) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.x2.iter().zip(&b.x2) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (a, b) in ds.norm.state_mean.iter().zip(&loaded.norm.state_mean) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.ltw");
        let ds = sample_pairs_ode(OdeSystem::Harmonic, 16, None, 2).unwrap();
        save(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.ltw");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn empty_dataset_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.ltw");
        let ds = PairDataset {
            n_x: 3,
            samples: vec![],
            norm: NormStats::identity(3),
            train_idx: vec![],
            test_idx: vec![],
            seed: 0,
            normalized: false,
        };
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!(loaded.n_x, 3);
    }
}
