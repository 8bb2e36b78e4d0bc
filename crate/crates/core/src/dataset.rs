//! Trajectory datasets: synthetic generation, persistence, and recovery of
//! the nominal residual disturbances `w_hat = x - Z A_hat x - Z B_hat u`.
//!
//! Noise is drawn from a ChaCha8 keystream keyed by the dataset seed, with
//! one stream per trajectory index (`set_stream(i)`). Gaussian variates come
//! from the ziggurat sampler of `rand_distr::StandardNormal`. Growing `N`
//! therefore never reshuffles earlier trajectories.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::{stack, unstack, BatchSystem, Layout, LtiSystem};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const DATASET_SCHEMA: &str = "drsls-dataset-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    GaussianIid,
    UniformIid,
}

/// I.i.d. additive noise: `scale` is the per-coordinate standard deviation
/// (Gaussian) or half-width (uniform).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn gaussian(std: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::GaussianIid, scale: std, seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise scale must be >= 0, got {}", self.scale)));
        }
        Ok(())
    }

    /// Independent sampler for sample path `index`.
    pub fn sampler(&self, index: u64) -> NoiseSampler {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        NoiseSampler { spec: *self, rng }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSampler {
    spec: NoiseSpec,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn sample(&mut self, dim: usize) -> DVector<f64> {
        let scale = self.spec.scale;
        match self.spec.kind {
            NoiseKind::GaussianIid => DVector::from_fn(dim, |_, _| {
                let z: f64 = self.rng.sample(StandardNormal);
                scale * z
            }),
            NoiseKind::UniformIid => DVector::from_fn(dim, |_, _| scale * self.rng.gen_range(-1.0..=1.0)),
        }
    }
}

/// One recorded trajectory: stacked states `x_{0:T}` and inputs `u_{0:T-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

impl Trajectory {
    pub fn x0(&self, n: usize) -> DVector<f64> {
        self.x.rows(0, n).into_owned()
    }

    /// Stacked `y = [x; u]`.
    pub fn y(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.x.len() + self.u.len());
        y.rows_mut(0, self.x.len()).copy_from(&self.x);
        y.rows_mut(self.x.len(), self.u.len()).copy_from(&self.u);
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub seed: Option<u64>,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryDataset {
    pub fn new(n: usize, m: usize, horizon: usize, seed: Option<u64>, trajectories: Vec<Trajectory>) -> Result<Self> {
        let data = Self { n, m, horizon, seed, trajectories };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n, self.m, self.horizon)
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.horizon == 0 {
            return Err(Error::Dataset("n, m and T must be positive".into()));
        }
        if self.trajectories.is_empty() {
            return Err(Error::Dataset("dataset must contain at least one trajectory (N >= 1)".into()));
        }
        let layout = self.layout();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.x.len() != layout.state_dim() || t.u.len() != layout.input_dim() {
                return Err(Error::Dataset(format!("trajectory {i} has inconsistent lengths")));
            }
            if t.x.iter().chain(t.u.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("trajectory {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_dims(&self, n: usize, m: usize, horizon: usize) -> Result<()> {
        if (self.n, self.m, self.horizon) != (n, m, horizon) {
            return Err(Error::Dimension(format!(
                "dataset is (n={}, m={}, T={}), model is (n={n}, m={m}, T={horizon})",
                self.n, self.m, self.horizon
            )));
        }
        Ok(())
    }
}

/// Simulates `N` trajectories on `true_sys` under static feedback `u_k = K0 x_k`.
pub fn generate_dataset(
    true_sys: &LtiSystem,
    horizon: usize,
    count: usize,
    x0: &DVector<f64>,
    k0: &DMatrix<f64>,
    noise: &NoiseSpec,
) -> Result<TrajectoryDataset> {
    let (n, m) = (true_sys.n(), true_sys.m());
    if k0.shape() != (m, n) {
        return Err(Error::Dimension(format!("feedback must be {m}x{n}, got {:?}", k0.shape())));
    }
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    noise.validate()?;
    let trajectories = (0..count)
        .map(|i| {
            let mut sampler = noise.sampler(i as u64);
            let mut xs = vec![x0.clone()];
            let mut us = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let x = xs.last().unwrap();
                let u = k0 * x;
                let w = sampler.sample(n);
                xs.push(true_sys.step(x, &u, &w));
                us.push(u);
            }
            Trajectory { x: stack(&xs), u: stack(&us) }
        })
        .collect();
    TrajectoryDataset::new(n, m, horizon, Some(noise.seed), trajectories)
}

/// Residual disturbances `w_hat^i` and, for a new initial condition, the
/// shifts `x_tilde^i = [x0_new - x0^i; 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: Vec<DVector<f64>>,
    pub init_shifts: Vec<DVector<f64>>,
}

impl ResidualSet {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    /// `w_hat^i + x_tilde^i`, the input fed to the responses for sample `i`.
    pub fn effective(&self, i: usize) -> DVector<f64> {
        &self.residuals[i] + &self.init_shifts[i]
    }

    pub fn effective_all(&self) -> Vec<DVector<f64>> {
        (0..self.len()).map(|i| self.effective(i)).collect()
    }

    /// Re-targets the set to a new initial condition (arbitrary-initial-condition mode).
    pub fn with_initial_condition(mut self, data: &TrajectoryDataset, x0_new: &DVector<f64>) -> Self {
        self.init_shifts = init_shifts(data, x0_new);
        self
    }
}

/// Recovers `w_hat^i = x^i - Z A_hat x^i - Z B_hat u^i` for every trajectory.
pub fn recover_residuals(data: &TrajectoryDataset, nominal: &BatchSystem) -> Result<ResidualSet> {
    let layout = nominal.layout();
    data.check_dims(layout.n, layout.m, layout.horizon)?;
    let za = nominal.shifted_a();
    let zb = nominal.shifted_b();
    let residuals: Vec<_> = data.trajectories.iter().map(|t| &t.x - &za * &t.x - &zb * &t.u).collect();
    let init_shifts = vec![DVector::zeros(layout.state_dim()); residuals.len()];
    Ok(ResidualSet { residuals, init_shifts })
}

/// `x_tilde^i = [x0_new - x0^i; 0_{nT}]` for each trajectory.
pub fn init_shifts(data: &TrajectoryDataset, x0_new: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = data.n;
    data.trajectories
        .iter()
        .map(|t| {
            let mut s = DVector::zeros(data.layout().state_dim());
            s.rows_mut(0, n).copy_from(&(x0_new - t.x0(n)));
            s
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    schema: String,
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: usize,
    seed: Option<u64>,
    trajectories: Vec<TrajectoryFile>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
}

fn blocks_to_rows(v: &DVector<f64>, block: usize) -> Vec<Vec<f64>> {
    unstack(v, block).iter().map(|b| b.iter().copied().collect()).collect()
}

fn rows_to_stacked(rows: &[Vec<f64>], block: usize, count: usize, what: &str, i: usize) -> Result<DVector<f64>> {
    if rows.len() != count || rows.iter().any(|r| r.len() != block) {
        return Err(Error::Dataset(format!("trajectory {i}: `{what}` must be {count} rows of {block} values")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!("trajectory {i}: non-finite value in `{what}`")));
    }
    Ok(DVector::from_vec(flat))
}

pub fn dataset_to_json(data: &TrajectoryDataset) -> Result<String> {
    let file = DatasetFile {
        schema: DATASET_SCHEMA.into(),
        n: data.n,
        m: data.m,
        horizon: data.horizon,
        seed: data.seed,
        trajectories: data
            .trajectories
            .iter()
            .map(|t| TrajectoryFile { x: blocks_to_rows(&t.x, data.n), u: blocks_to_rows(&t.u, data.m) })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn dataset_from_json(text: &str) -> Result<TrajectoryDataset> {
    let file: DatasetFile = serde_json::from_str(text)?;
    if file.schema != DATASET_SCHEMA {
        return Err(Error::Schema { expected: DATASET_SCHEMA.into(), found: file.schema });
    }
    if file.trajectories.is_empty() {
        return Err(Error::Dataset("dataset must contain at least one trajectory (N >= 1)".into()));
    }
    let trajectories = file
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(Trajectory {
                x: rows_to_stacked(&t.x, file.n, file.horizon + 1, "x", i)?,
                u: rows_to_stacked(&t.u, file.m, file.horizon, "u", i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryDataset::new(file.n, file.m, file.horizon, file.seed, trajectories)
}

pub fn save_dataset(data: &TrajectoryDataset, path: &Path) -> Result<()> {
    write_atomic(path, dataset_to_json(data)?.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    dataset_from_json(&fs::read_to_string(path)?)
}
