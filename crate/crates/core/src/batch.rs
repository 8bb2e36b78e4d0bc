//! Finite-horizon batch representation of an LTI system.
//!
//! Trajectories are stacked in time order, `x = [x_0; ...; x_T]` and
//! `u = [u_0; ...; u_{T-1}]`, and the joint vector `y = [x; u]` always puts
//! the state block first. The batch dynamics read `x = Z A x + Z B u + w`
//! with `w = [x_0; w_0; ...; w_{T-1}]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete-time LTI system `x_{k+1} = A x_k + B u_k + w_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRows", into = "SystemRows")]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct SystemRows {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
}

impl TryFrom<SystemRows> for LtiSystem {
    type Error = Error;

    fn try_from(rows: SystemRows) -> Result<Self> {
        LtiSystem::new(matrix_from_rows(&rows.a)?, matrix_from_rows(&rows.b)?)
    }
}

impl From<LtiSystem> for SystemRows {
    fn from(sys: LtiSystem) -> Self {
        SystemRows { a: matrix_to_rows(&sys.a), b: matrix_to_rows(&sys.b) }
    }
}

/// Builds a dense matrix from a list of equally long rows.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::Dimension("matrix must be non-empty".into()));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("matrix entries must be finite".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {}xm with m >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(a)?, matrix_from_rows(b)?)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }
}

/// Bounds on the model error, `||A_hat - A|| <= e_a` and `||B_hat - B|| <= e_b`
/// in the l1-induced norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorBounds {
    #[serde(rename = "e_A")]
    pub e_a: f64,
    #[serde(rename = "e_B")]
    pub e_b: f64,
}

impl ModelErrorBounds {
    pub fn new(e_a: f64, e_b: f64) -> Result<Self> {
        let bounds = Self { e_a, e_b };
        bounds.validate()?;
        Ok(bounds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_a >= 0.0 && self.e_b >= 0.0) || !self.e_a.is_finite() || !self.e_b.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "error bounds must be finite and nonnegative, got e_A={}, e_B={}",
                self.e_a, self.e_b
            )));
        }
        Ok(())
    }

    /// `max{e_A, e_B}`, the gain bound of the stacked mismatch operator.
    pub fn max(&self) -> f64 {
        self.e_a.max(self.e_b)
    }
}

/// Index bookkeeping for stacked vectors over a horizon `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

impl Layout {
    pub fn new(n: usize, m: usize, horizon: usize) -> Self {
        Self { n, m, horizon }
    }

    /// Length of `x_{0:T}` (and of `w`).
    pub fn state_dim(&self) -> usize {
        (self.horizon + 1) * self.n
    }

    /// Length of `u_{0:T-1}`.
    pub fn input_dim(&self) -> usize {
        self.horizon * self.m
    }

    /// Length of `y = [x; u]`.
    pub fn y_dim(&self) -> usize {
        self.state_dim() + self.input_dim()
    }

    pub fn x_index(&self, k: usize, i: usize) -> usize {
        k * self.n + i
    }

    pub fn u_index(&self, k: usize, j: usize) -> usize {
        self.state_dim() + k * self.m + j
    }

    /// Time step a coordinate of `y` belongs to.
    pub fn y_time(&self, r: usize) -> usize {
        let sd = self.state_dim();
        if r < sd {
            r / self.n
        } else {
            (r - sd) / self.m
        }
    }

    /// Time step a coordinate of `w` (a column of a response) belongs to.
    pub fn w_time(&self, c: usize) -> usize {
        c / self.n
    }

    /// Whether entry `(r, c)` of a response `Phi` may be nonzero under causality.
    pub fn is_causal(&self, r: usize, c: usize) -> bool {
        self.w_time(c) <= self.y_time(r)
    }
}

/// Stacked dynamics `(calA, calB, Z)` over the horizon.
///
/// `cal_a` and `cal_b` hold `T+1` diagonal copies of `A` and `B`. Inputs are
/// stacked over `T` steps only, so products with `u` use the first `T*m`
/// columns of `cal_b` (the last input block never reaches the state).
#[derive(Debug, Clone)]
pub struct BatchSystem {
    base: LtiSystem,
    horizon: usize,
    cal_a: DMatrix<f64>,
    cal_b: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl BatchSystem {
    pub fn build(sys: &LtiSystem, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon T must be at least 1".into()));
        }
        let (n, m) = (sys.n(), sys.m());
        let blocks = horizon + 1;
        let mut cal_a = DMatrix::zeros(blocks * n, blocks * n);
        let mut cal_b = DMatrix::zeros(blocks * n, blocks * m);
        for k in 0..blocks {
            cal_a.view_mut((k * n, k * n), (n, n)).copy_from(sys.a());
            cal_b.view_mut((k * n, k * m), (n, m)).copy_from(sys.b());
        }
        Ok(Self { base: sys.clone(), horizon, cal_a, cal_b, z: shift_operator(n, horizon) })
    }

    pub fn base(&self) -> &LtiSystem {
        &self.base
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.base.n(), self.base.m(), self.horizon)
    }

    pub fn cal_a(&self) -> &DMatrix<f64> {
        &self.cal_a
    }

    pub fn cal_b(&self) -> &DMatrix<f64> {
        &self.cal_b
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// `Z calA`.
    pub fn shifted_a(&self) -> DMatrix<f64> {
        &self.z * &self.cal_a
    }

    /// `Z calB` restricted to the `T*m` input coordinates.
    pub fn shifted_b(&self) -> DMatrix<f64> {
        let cols = self.layout().input_dim();
        &self.z * self.cal_b.columns(0, cols)
    }

    /// `w = x - Z calA x - Z calB u` for stacked `x` and `u`.
    pub fn residual(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        x - self.shifted_a() * x - self.shifted_b() * u
    }
}

/// Block-downshift operator with `(T+1) x (T+1)` blocks of size `n`.
pub fn shift_operator(n: usize, horizon: usize) -> DMatrix<f64> {
    let dim = (horizon + 1) * n;
    let mut z = DMatrix::zeros(dim, dim);
    for i in n..dim {
        z[(i, i - n)] = 1.0;
    }
    z
}

/// l1-induced matrix norm: the maximum absolute column sum.
pub fn l1_induced_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Rolls `x_{k+1} = A x_k + B u_k + w_k` forward and returns `x_0, ..., x_T`.
pub fn simulate(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    disturbances: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if inputs.len() != disturbances.len() {
        return Err(Error::Dimension(format!("{} inputs but {} disturbances", inputs.len(), disturbances.len())));
    }
    if x0.len() != sys.n() {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), sys.n())));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (u, w) in inputs.iter().zip(disturbances) {
        if u.len() != sys.m() || w.len() != sys.n() {
            return Err(Error::Dimension("input or disturbance has wrong length".into()));
        }
        let next = sys.step(states.last().unwrap(), u, w);
        states.push(next);
    }
    Ok(states)
}

/// Concatenates per-step vectors into one stacked vector.
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let len = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(len);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// Splits a stacked vector into consecutive blocks of size `block`.
pub fn unstack(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    (0..v.len() / block).map(|k| v.rows(k * block, block).into_owned()).collect()
}

/// Model error `dA = A_hat - A`, `dB = B_hat - B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMismatch {
    pub delta_a: DMatrix<f64>,
    pub delta_b: DMatrix<f64>,
}

impl ModelMismatch {
    pub fn zero(n: usize, m: usize) -> Self {
        Self { delta_a: DMatrix::zeros(n, n), delta_b: DMatrix::zeros(n, m) }
    }

    /// Mismatch between a nominal and a true system.
    pub fn between(nominal: &LtiSystem, truth: &LtiSystem) -> Result<Self> {
        if nominal.n() != truth.n() || nominal.m() != truth.m() {
            return Err(Error::Dimension("nominal and true systems differ in size".into()));
        }
        Ok(Self { delta_a: nominal.a() - truth.a(), delta_b: nominal.b() - truth.b() })
    }

    /// The true system `A = A_hat - dA`, `B = B_hat - dB`.
    pub fn true_system(&self, nominal: &LtiSystem) -> Result<LtiSystem> {
        LtiSystem::new(nominal.a() - &self.delta_a, nominal.b() - &self.delta_b)
    }

    pub fn norms(&self) -> (f64, f64) {
        (l1_induced_norm(&self.delta_a), l1_induced_norm(&self.delta_b))
    }

    pub fn within(&self, bounds: &ModelErrorBounds) -> bool {
        let (na, nb) = self.norms();
        na <= bounds.e_a && nb <= bounds.e_b
    }

    /// Stacked `dM = [blkdiag(dA) blkdiag(dB)]` acting on `y = [x; u]`.
    pub fn stacked(&self, layout: &Layout) -> DMatrix<f64> {
        let Layout { n, m, horizon } = *layout;
        let mut out = DMatrix::zeros(layout.state_dim(), layout.y_dim());
        for k in 0..=horizon {
            out.view_mut((k * n, k * n), (n, n)).copy_from(&self.delta_a);
        }
        for k in 0..horizon {
            out.view_mut((k * n, layout.state_dim() + k * m), (n, m)).copy_from(&self.delta_b);
        }
        out
    }
}
