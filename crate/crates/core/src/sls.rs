//! Causal closed-loop system responses `Phi = [Phi_x; Phi_u]` mapping the
//! stacked disturbance `w` to `y = [x; u]`, plus the feedback they induce.
//!
//! Every solve here exploits causality: the operators involved are block
//! lower-triangular in time, so systems are solved by forward (or backward)
//! substitution over time steps and no dense inverse is ever formed.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batch::{BatchSystem, Layout, LtiSystem};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Nominal closed-loop responses over a finite horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResponses {
    layout: Layout,
    phi_x: DMatrix<f64>,
    phi_u: DMatrix<f64>,
}

impl SystemResponses {
    /// Wraps response matrices, rejecting wrong shapes or non-causal entries.
    pub fn new(layout: Layout, phi_x: DMatrix<f64>, phi_u: DMatrix<f64>) -> Result<Self> {
        let sd = layout.state_dim();
        if phi_x.shape() != (sd, sd) || phi_u.shape() != (layout.input_dim(), sd) {
            return Err(Error::Dimension(format!(
                "responses must be {sd}x{sd} and {}x{sd}, got {:?} and {:?}",
                layout.input_dim(),
                phi_x.shape(),
                phi_u.shape()
            )));
        }
        let out = Self { layout, phi_x, phi_u };
        let stacked = out.stacked();
        for r in 0..layout.y_dim() {
            for c in 0..sd {
                if !layout.is_causal(r, c) && stacked[(r, c)] != 0.0 {
                    return Err(Error::InvalidArgument(format!("response entry ({r}, {c}) violates causality")));
                }
            }
        }
        Ok(out)
    }

    /// Splits a stacked `[Phi_x; Phi_u]`.
    pub fn from_stacked(layout: Layout, phi: &DMatrix<f64>) -> Result<Self> {
        let sd = layout.state_dim();
        if phi.shape() != (layout.y_dim(), sd) {
            return Err(Error::Dimension(format!("stacked response has shape {:?}", phi.shape())));
        }
        Self::new(layout, phi.rows(0, sd).into_owned(), phi.rows(sd, layout.input_dim()).into_owned())
    }

    /// The unique `Phi_x` completing a causal `Phi_u` under the nominal
    /// constraint, i.e. `Phi_x = (I - Z A_hat)^{-1} (I + Z B_hat Phi_u)`.
    pub fn from_input_response(nominal: &BatchSystem, phi_u: DMatrix<f64>) -> Result<Self> {
        let layout = nominal.layout();
        let (n, m) = (layout.n, layout.m);
        let sd = layout.state_dim();
        if phi_u.shape() != (layout.input_dim(), sd) {
            return Err(Error::Dimension(format!("Phi_u has shape {:?}", phi_u.shape())));
        }
        let a = nominal.base().a();
        let b = nominal.base().b();
        let mut phi_x = DMatrix::zeros(sd, sd);
        phi_x.view_mut((0, 0), (n, n)).fill_with_identity();
        for s in 1..=layout.horizon {
            let prev_x = phi_x.rows((s - 1) * n, n).into_owned();
            let prev_u = phi_u.rows((s - 1) * m, m);
            let mut row = a * prev_x + b * prev_u;
            for i in 0..n {
                row[(i, s * n + i)] += 1.0;
            }
            phi_x.rows_mut(s * n, n).copy_from(&row);
        }
        Self::new(layout, phi_x, phi_u)
    }

    /// Closed-loop responses of a causal feedback on the nominal model.
    pub fn from_feedback(nominal: &BatchSystem, k: &Feedback) -> Result<Self> {
        let layout = nominal.layout();
        if k.layout != layout {
            return Err(Error::Dimension("feedback and model layouts differ".into()));
        }
        let (n, m) = (layout.n, layout.m);
        let sd = layout.state_dim();
        let a = nominal.base().a();
        let b = nominal.base().b();
        let mut phi_x = DMatrix::zeros(sd, sd);
        let mut phi_u = DMatrix::zeros(layout.input_dim(), sd);
        phi_x.view_mut((0, 0), (n, n)).fill_with_identity();
        for s in 0..=layout.horizon {
            if s > 0 {
                let prev_x = phi_x.rows((s - 1) * n, n).into_owned();
                let prev_u = phi_u.rows((s - 1) * m, m).into_owned();
                let mut row = a * prev_x + b * prev_u;
                for i in 0..n {
                    row[(i, s * n + i)] += 1.0;
                }
                phi_x.rows_mut(s * n, n).copy_from(&row);
            }
            if s < layout.horizon {
                let gains = k.gain.rows(s * m, m).columns(0, (s + 1) * n).into_owned();
                let states = phi_x.rows(0, (s + 1) * n).into_owned();
                phi_u.rows_mut(s * m, m).copy_from(&(gains * states));
            }
        }
        Self::new(layout, phi_x, phi_u)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn phi_x(&self) -> &DMatrix<f64> {
        &self.phi_x
    }

    pub fn phi_u(&self) -> &DMatrix<f64> {
        &self.phi_u
    }

    /// `Phi = [Phi_x; Phi_u]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let sd = self.layout.state_dim();
        let mut phi = DMatrix::zeros(self.layout.y_dim(), sd);
        phi.rows_mut(0, sd).copy_from(&self.phi_x);
        phi.rows_mut(sd, self.layout.input_dim()).copy_from(&self.phi_u);
        phi
    }

    /// `Phi Z`: the responses to the disturbances after the initial state.
    pub fn phi_z(&self) -> DMatrix<f64> {
        let n = self.layout.n;
        let sd = self.layout.state_dim();
        let phi = self.stacked();
        let mut out = DMatrix::zeros(self.layout.y_dim(), sd);
        out.columns_mut(0, sd - n).copy_from(&phi.columns(n, sd - n));
        out
    }
}

/// Causal state feedback `u = K x` with `K` of size `(T m) x ((T+1) n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    layout: Layout,
    gain: DMatrix<f64>,
}

impl Feedback {
    pub fn new(layout: Layout, gain: DMatrix<f64>) -> Result<Self> {
        if gain.shape() != (layout.input_dim(), layout.state_dim()) {
            return Err(Error::Dimension(format!("feedback has shape {:?}", gain.shape())));
        }
        Ok(Self { layout, gain })
    }

    /// Time-invariant gain `u_k = K0 x_k` written as a block-diagonal `K`.
    pub fn static_gain(layout: Layout, k0: &DMatrix<f64>) -> Result<Self> {
        if k0.shape() != (layout.m, layout.n) {
            return Err(Error::Dimension(format!("static gain has shape {:?}", k0.shape())));
        }
        let mut gain = DMatrix::zeros(layout.input_dim(), layout.state_dim());
        for k in 0..layout.horizon {
            gain.view_mut((k * layout.m, k * layout.n), (layout.m, layout.n)).copy_from(k0);
        }
        Ok(Self { layout, gain })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Whether every block `K_{k,t}` with `t > k` is exactly zero.
    pub fn is_causal(&self) -> bool {
        let l = self.layout;
        (0..l.input_dim())
            .all(|r| (0..l.state_dim()).all(|c| l.w_time(c) <= l.y_time(r + l.state_dim()) || self.gain[(r, c)] == 0.0))
    }
}

/// `[I - Z A_hat, -Z B_hat] Phi - I`; zero iff the nominal constraint holds.
pub fn nominal_sls_residual(phi: &SystemResponses, nominal: &BatchSystem) -> DMatrix<f64> {
    let sd = phi.layout.state_dim();
    let lhs = (DMatrix::identity(sd, sd) - nominal.shifted_a()) * &phi.phi_x - nominal.shifted_b() * &phi.phi_u;
    lhs - DMatrix::identity(sd, sd)
}

/// `K = Phi_u Phi_x^{-1}` by backward substitution over the column blocks of
/// `K Phi_x = Phi_u`.
pub fn extract_feedback(phi: &SystemResponses) -> Result<Feedback> {
    let layout = phi.layout;
    let (n, h) = (layout.n, layout.horizon);
    let rows = layout.input_dim();
    let mut gain = DMatrix::<f64>::zeros(rows, layout.state_dim());
    for t in (0..=h).rev() {
        let mut rhs = phi.phi_u.columns(t * n, n).into_owned();
        for s in t + 1..=h {
            rhs -= gain.columns(s * n, n) * phi.phi_x.view((s * n, t * n), (n, n));
        }
        let diag = phi.phi_x.view((t * n, t * n), (n, n)).into_owned();
        let scale = diag.amax().max(1.0);
        let lu = diag.transpose().lu();
        if lu.determinant().abs() <= 1e-12 * scale.powi(n as i32) {
            return Err(Error::SingularResponse { block: t });
        }
        // K_t D = rhs  <=>  D^T K_t^T = rhs^T
        let kt = lu.solve(&rhs.transpose()).ok_or(Error::SingularResponse { block: t })?.transpose();
        gain.columns_mut(t * n, n).copy_from(&kt);
    }
    Feedback::new(layout, gain)
}

/// Predicted `y = Phi w`, state part first.
pub fn predict(phi: &SystemResponses, w: &DVector<f64>) -> DVector<f64> {
    phi.stacked() * w
}

/// Solves `(I + M) Y = B` where `M` maps `y`-coordinates of time `s` only to
/// coordinates of strictly later times.
pub fn solve_time_lower(layout: &Layout, m: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = layout.y_dim();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by_key(|&r| layout.y_time(r));
    let mut y = b.clone();
    for (pos, &r) in order.iter().enumerate() {
        let t = layout.y_time(r);
        let mut row = b.row(r).into_owned();
        for &c in &order[..pos] {
            if layout.y_time(c) >= t {
                break;
            }
            let coef = m[(r, c)];
            if coef != 0.0 {
                row -= coef * y.row(c);
            }
        }
        y.row_mut(r).copy_from(&row);
    }
    y
}

/// `Phi Z dM`, the loop gain created by the model error.
pub fn mismatch_loop(phi: &SystemResponses, delta_m: &DMatrix<f64>) -> DMatrix<f64> {
    phi.phi_z() * delta_m
}

/// `R_Phi Phi = (I + Phi Z dM)^{-1} Phi`, the true closed-loop map.
pub fn true_response_operator(phi: &SystemResponses, delta_m: &DMatrix<f64>) -> DMatrix<f64> {
    solve_time_lower(&phi.layout, &mismatch_loop(phi, delta_m), &phi.stacked())
}

/// `R_Phi X` for any matrix `X` with `y_dim` rows.
pub fn apply_true_resolvent(phi: &SystemResponses, delta_m: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    solve_time_lower(&phi.layout, &mismatch_loop(phi, delta_m), x)
}

/// `y_cl = (I + Phi Z dM)^{-1} Phi w`, the trajectory the nominal-designed
/// feedback produces on the true system (`dA = A_hat - A`).
pub fn true_closed_loop(phi: &SystemResponses, delta_m: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let pw = phi.stacked() * w;
    let rhs = DMatrix::from_column_slice(pw.len(), 1, pw.as_slice());
    let sol = solve_time_lower(&phi.layout, &mismatch_loop(phi, delta_m), &rhs);
    sol.column(0).into_owned()
}

/// Step-by-step rollout of `u_k = sum_t K_{k,t} x_t` on `sys` driven by the
/// stacked `w = [x_0; w_0; ...]`. Returns `y = [x; u]`.
pub fn simulate_closed_loop(sys: &LtiSystem, k: &Feedback, w: &DVector<f64>) -> DVector<f64> {
    let layout = k.layout;
    let (n, m, h) = (layout.n, layout.m, layout.horizon);
    let mut y = DVector::zeros(layout.y_dim());
    y.rows_mut(0, n).copy_from(&w.rows(0, n));
    for step in 0..h {
        let gains = k.gain.view((step * m, 0), (m, (step + 1) * n));
        let u = gains * y.rows(0, (step + 1) * n);
        let x = y.rows(step * n, n).into_owned();
        let next = sys.a() * x + sys.b() * &u + w.rows((step + 1) * n, n);
        y.rows_mut(layout.u_index(step, 0), m).copy_from(&u);
        y.rows_mut((step + 1) * n, n).copy_from(&next);
    }
    y
}

pub const CONTROLLER_SCHEMA: &str = "drsls-controller-v1";

/// On-disk controller: responses, extracted gain, and the synthesis certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerFile {
    pub schema: String,
    pub method: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    pub phi_x: Vec<f64>,
    pub phi_u: Vec<f64>,
    #[serde(rename = "K")]
    pub k: Vec<f64>,
    pub gamma: Option<f64>,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(data: &[f64], rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!("`{what}` has {} entries, expected {}", data.len(), rows * cols)));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("`{what}` contains non-finite values")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl ControllerFile {
    pub fn new(
        method: &str,
        phi: &SystemResponses,
        k: &Feedback,
        gamma: Option<f64>,
        objective: f64,
        epsilon: Option<f64>,
    ) -> Self {
        let l = phi.layout;
        Self {
            schema: CONTROLLER_SCHEMA.into(),
            method: method.into(),
            horizon: l.horizon,
            n: l.n,
            m: l.m,
            phi_x: row_major(&phi.phi_x),
            phi_u: row_major(&phi.phi_u),
            k: row_major(&k.gain),
            gamma,
            objective,
            epsilon,
            run_id: None,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.n, self.m, self.horizon)
    }

    pub fn responses(&self) -> Result<SystemResponses> {
        let l = self.layout();
        let sd = l.state_dim();
        SystemResponses::new(
            l,
            from_row_major(&self.phi_x, sd, sd, "phi_x")?,
            from_row_major(&self.phi_u, l.input_dim(), sd, "phi_u")?,
        )
    }

    pub fn feedback(&self) -> Result<Feedback> {
        let l = self.layout();
        Feedback::new(l, from_row_major(&self.k, l.input_dim(), l.state_dim(), "K")?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.schema != CONTROLLER_SCHEMA {
            return Err(Error::Schema { expected: CONTROLLER_SCHEMA.into(), found: file.schema });
        }
        Ok(file)
    }
}
