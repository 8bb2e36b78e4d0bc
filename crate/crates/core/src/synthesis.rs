//! Controller synthesis as linear programs over causal system responses.
//!
//! The sample-average (SAA) problem minimizes the empirical cost of the
//! predictions `y_hat^i = Phi (w_hat^i + x_tilde^i)` under empirical CVaR
//! constraints. The doubly robust (RR) problem adds the ambiguity radius
//! `eps`, penalized by the cost's dual-norm bound in the objective and by each
//! constraint's dual-norm bound inside its CVaR block, together with the
//! small-gain constraint `e ||Phi Z|| <= gamma`. `gamma` is fixed per LP and
//! chosen by grid search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batch::{BatchSystem, Layout, ModelErrorBounds};
use crate::dataset::{ResidualSet, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::lp::{LinExpr, LpModel, LpSolution, LpStatus, Sense, Var};
use crate::sls::{extract_feedback, Feedback, SystemResponses};

/// One affine piece `a . y + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRow {
    pub a: Vec<f64>,
    pub b: f64,
}

/// `max_j (a_j . y + b_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PwaRows", into = "PwaRows")]
pub struct PwaFunction {
    rows: Vec<AffineRow>,
    dual_norm_bound: f64,
}

#[derive(Serialize, Deserialize)]
struct PwaRows {
    rows: Vec<AffineRow>,
}

impl TryFrom<PwaRows> for PwaFunction {
    type Error = Error;
    fn try_from(r: PwaRows) -> Result<Self> {
        Self::new(r.rows)
    }
}

impl From<PwaFunction> for PwaRows {
    fn from(f: PwaFunction) -> Self {
        PwaRows { rows: f.rows }
    }
}

impl PwaFunction {
    pub fn new(rows: Vec<AffineRow>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::InvalidArgument("piecewise-affine function needs at least one row".into()));
        };
        let dim = first.a.len();
        for r in &rows {
            if r.a.len() != dim {
                return Err(Error::Dimension("piecewise-affine rows have different lengths".into()));
            }
            if !r.b.is_finite() || r.a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("piecewise-affine row has non-finite entries".into()));
            }
        }
        let dual_norm_bound = rows.iter().flat_map(|r| r.a.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { rows, dual_norm_bound })
    }

    /// Single-row function `a . y + b`.
    pub fn affine(a: Vec<f64>, b: f64) -> Result<Self> {
        Self::new(vec![AffineRow { a, b }])
    }

    pub fn rows(&self) -> &[AffineRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows[0].a.len()
    }

    /// `max_j ||a_j||_inf`.
    pub fn dual_norm_bound(&self) -> f64 {
        self.dual_norm_bound
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.rows
            .iter()
            .map(|r| r.a.iter().zip(y.iter()).map(|(a, v)| a * v).sum::<f64>() + r.b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `sum_r w_r |y_r|`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedL1Cost {
    weights: DVector<f64>,
}

impl WeightedL1Cost {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dual_norm_bound(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(*w))
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.weights.iter().zip(y.iter()).map(|(w, v)| w * v.abs()).sum()
    }

    /// The equivalent `max` over all sign patterns of the weighted
    /// coordinates. Refused above 16 weighted coordinates.
    pub fn sign_rows(&self) -> Result<PwaFunction> {
        let active: Vec<usize> = (0..self.weights.len()).filter(|&r| self.weights[r] > 0.0).collect();
        if active.len() > 16 {
            return Err(Error::InvalidArgument(format!(
                "{} weighted coordinates is too many to enumerate",
                active.len()
            )));
        }
        let rows = (0..1usize << active.len())
            .map(|mask| {
                let mut a = vec![0.0; self.weights.len()];
                for (bit, &r) in active.iter().enumerate() {
                    a[r] = if mask >> bit & 1 == 1 { -self.weights[r] } else { self.weights[r] };
                }
                AffineRow { a, b: 0.0 }
            })
            .collect();
        PwaFunction::new(rows)
    }
}

/// Stage cost over the stacked trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Cost {
    WeightedL1(WeightedL1Cost),
    Pwa(PwaFunction),
}

impl Cost {
    pub fn value(&self, y: &DVector<f64>) -> f64 {
        match self {
            Cost::WeightedL1(c) => c.value(y),
            Cost::Pwa(f) => f.value(y),
        }
    }

    pub fn dual_norm_bound(&self) -> f64 {
        match self {
            Cost::WeightedL1(c) => c.dual_norm_bound(),
            Cost::Pwa(f) => f.dual_norm_bound(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Cost::WeightedL1(c) => c.weights.len(),
            Cost::Pwa(f) => f.dim(),
        }
    }
}

/// Weighted l1 cost handled by per-coordinate epigraphs.
pub fn pwa_from_weighted_l1(weights: &[f64]) -> Result<Cost> {
    Ok(Cost::WeightedL1(WeightedL1Cost::new(DVector::from_column_slice(weights))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Saa,
    Rr,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Saa => "saa",
            Method::Rr => "rr",
        }
    }
}

/// How several constraint functions enter the CVaR requirement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvarMode {
    /// One CVaR block per constraint function.
    #[default]
    PerConstraint,
    /// A single CVaR block on the pointwise maximum of all constraints.
    JointMax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub method: Method,
    pub beta: f64,
    pub kappa: f64,
    pub gamma_grid: Vec<f64>,
    pub bounds: ModelErrorBounds,
    pub cvar_mode: CvarMode,
    pub x0_new: Option<DVector<f64>>,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidArgument(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidArgument(format!("kappa must be finite and nonnegative, got {}", self.kappa)));
        }
        self.bounds.validate()?;
        if self.method == Method::Rr && self.gamma_grid.is_empty() {
            return Err(Error::InvalidArgument("gamma grid is empty".into()));
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(Error::InvalidArgument(format!("gamma grid value {g} is outside [0, 1)")));
        }
        Ok(())
    }
}

/// Everything the LPs are assembled from.
#[derive(Debug, Clone, Copy)]
pub struct ProblemData<'a> {
    pub data: &'a TrajectoryDataset,
    pub residuals: &'a ResidualSet,
    pub nominal: &'a BatchSystem,
    pub cost: &'a Cost,
    pub constraints: &'a [PwaFunction],
}

impl ProblemData<'_> {
    fn validate(&self, config: &SynthesisConfig) -> Result<()> {
        let l = self.nominal.layout();
        self.data.check_dims(l.n, l.m, l.horizon)?;
        if self.residuals.len() != self.data.len() {
            return Err(Error::Dimension("residual set does not match the dataset".into()));
        }
        if self.cost.dim() != l.y_dim() {
            return Err(Error::Dimension(format!(
                "cost acts on {} coordinates, trajectories have {}",
                self.cost.dim(),
                l.y_dim()
            )));
        }
        if let Some(g) = self.constraints.iter().find(|g| g.dim() != l.y_dim()) {
            return Err(Error::Dimension(format!(
                "constraint acts on {} coordinates, trajectories have {}",
                g.dim(),
                l.y_dim()
            )));
        }
        if let Some(x0) = &config.x0_new {
            if x0.len() != l.n {
                return Err(Error::Dimension(format!("x0_new has length {}, expected {}", x0.len(), l.n)));
            }
        }
        Ok(())
    }

    /// `w_hat^i + x_tilde^i` with shifts taken from the config when set.
    fn inputs(&self, config: &SynthesisConfig) -> Vec<DVector<f64>> {
        match &config.x0_new {
            Some(x0) => self.residuals.clone().with_initial_condition(self.data, x0).effective_all(),
            None => self.residuals.effective_all(),
        }
    }
}

/// An assembled LP with the handles needed to read its solution.
#[derive(Debug, Clone)]
pub struct SynthesisLp {
    pub model: LpModel,
    nominal: BatchSystem,
    phi_u: Vec<Option<Var>>,
    eps: Option<Var>,
}

impl SynthesisLp {
    /// Responses at the solution. `Phi_x` is completed from `Phi_u` through
    /// the nominal constraint, which every feasible point satisfies.
    pub fn responses(&self, sol: &LpSolution) -> Result<SystemResponses> {
        let l = self.nominal.layout();
        let sd = l.state_dim();
        let phi_u = DMatrix::from_fn(l.input_dim(), sd, |r, c| self.phi_u[r * sd + c].map_or(0.0, |v| sol.value(v)));
        SystemResponses::from_input_response(&self.nominal, phi_u)
    }

    pub fn epsilon(&self, sol: &LpSolution) -> Option<f64> {
        self.eps.map(|v| sol.value(v))
    }
}

/// LP under construction. Predictions are written through the nominal
/// recursion `x_{k+1} = A_hat x_k + B_hat u_k + v_{k+1}` with `u = Phi_u v`,
/// which equals `Phi v` under the nominal constraint and keeps rows sparse.
struct Builder {
    model: LpModel,
    layout: Layout,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    phi_u: Vec<Option<Var>>,
    yhat: Vec<Vec<LinExpr>>,
}

impl Builder {
    fn new(problem: &ProblemData<'_>, inputs: &[DVector<f64>]) -> Result<Self> {
        let layout = problem.nominal.layout();
        let (n, m) = (layout.n, layout.m);
        let sd = layout.state_dim();
        let a = problem.nominal.base().a().clone();
        let b = problem.nominal.base().b().clone();
        let mut model = LpModel::new();
        let phi_u: Vec<Option<Var>> = (0..layout.input_dim() * sd)
            .map(|k| layout.is_causal(sd + k / sd, k % sd).then(|| model.add_free_var()))
            .collect();

        let mut yhat = Vec::with_capacity(inputs.len());
        for v in inputs {
            let mut y = vec![LinExpr::new(); layout.y_dim()];
            for r in 0..layout.input_dim() {
                let u = model.add_free_var();
                let mut e = LinExpr::var(u);
                for c in 0..sd {
                    if let Some(p) = phi_u[r * sd + c] {
                        e.add_term(p, -v[c]);
                    }
                }
                model.add_constraint(&e, Sense::Eq)?;
                y[sd + r] = LinExpr::var(u);
            }
            for i in 0..n {
                y[i] = LinExpr::constant(v[i]);
            }
            for k in 1..=layout.horizon {
                for i in 0..n {
                    let x = model.add_free_var();
                    let mut e = LinExpr::var(x);
                    for j in 0..n {
                        e.add_scaled(&y[(k - 1) * n + j], -a[(i, j)]);
                    }
                    for j in 0..m {
                        e.add_scaled(&y[sd + (k - 1) * m + j], -b[(i, j)]);
                    }
                    e.add_constant(-v[k * n + i]);
                    model.add_constraint(&e, Sense::Eq)?;
                    y[k * n + i] = LinExpr::var(x);
                }
            }
            yhat.push(y);
        }
        Ok(Self { model, layout, a, b, phi_u, yhat })
    }

    /// `|e|` as a constant or an epigraph variable.
    fn abs_of(&mut self, e: &LinExpr) -> Result<LinExpr> {
        if e.is_constant() {
            Ok(LinExpr::constant(e.constant.abs()))
        } else {
            Ok(LinExpr::var(self.model.add_abs_epigraph(e)?))
        }
    }

    fn affine(&self, i: usize, row: &AffineRow) -> LinExpr {
        let mut e = LinExpr::constant(row.b);
        for (r, &a) in row.a.iter().enumerate() {
            e.add_scaled(&self.yhat[i][r], a);
        }
        e
    }

    /// `(1/N) sum_i s_i` with `s_i` the cost epigraph at sample `i`.
    fn empirical_cost(&mut self, cost: &Cost) -> Result<LinExpr> {
        let big_n = self.yhat.len() as f64;
        let mut total = LinExpr::new();
        for i in 0..self.yhat.len() {
            match cost {
                Cost::WeightedL1(c) => {
                    for r in 0..self.layout.y_dim() {
                        let w = c.weights[r];
                        if w > 0.0 {
                            let y = self.yhat[i][r].clone();
                            let t = self.abs_of(&y)?;
                            total.add_scaled(&t, w / big_n);
                        }
                    }
                }
                Cost::Pwa(f) => {
                    let s = self.model.add_free_var();
                    for row in f.rows() {
                        let mut e = self.affine(i, row);
                        e.add_term(s, -1.0);
                        self.model.add_constraint(&e, Sense::Le)?;
                    }
                    total.add_term(s, 1.0 / big_n);
                }
            }
        }
        Ok(total)
    }

    /// `theta eps + (1/N) sum_i q_i <= t beta` with `q_i >= (c_l y_hat^i + d_l + t)_+`.
    fn cvar_block(&mut self, rows: &[&AffineRow], beta: f64, eps: Option<(Var, f64)>) -> Result<()> {
        let big_n = self.yhat.len() as f64;
        let t = self.model.add_free_var();
        let mut block = LinExpr::new();
        block.add_term(t, -beta);
        if let Some((e, theta)) = eps {
            block.add_term(e, theta);
        }
        for i in 0..self.yhat.len() {
            let q = self.model.add_nonneg_var();
            for row in rows {
                let mut e = self.affine(i, row);
                e.add_term(t, 1.0).add_term(q, -1.0);
                self.model.add_constraint(&e, Sense::Le)?;
            }
            block.add_term(q, 1.0 / big_n);
        }
        self.model.add_constraint(&block, Sense::Le)
    }

    fn constraints(&mut self, constraints: &[PwaFunction], config: &SynthesisConfig, eps: Option<Var>) -> Result<()> {
        if constraints.is_empty() {
            return Ok(());
        }
        match config.cvar_mode {
            CvarMode::PerConstraint => {
                for g in constraints {
                    let rows: Vec<&AffineRow> = g.rows().iter().collect();
                    self.cvar_block(&rows, config.beta, eps.map(|e| (e, g.dual_norm_bound())))?;
                }
            }
            CvarMode::JointMax => {
                let rows: Vec<&AffineRow> = constraints.iter().flat_map(|g| g.rows()).collect();
                let theta = constraints.iter().map(|g| g.dual_norm_bound()).fold(0.0, f64::max);
                self.cvar_block(&rows, config.beta, eps.map(|e| (e, theta)))?;
            }
        }
        Ok(())
    }

    /// Columns of `Phi Z` as expressions. The strictly lower blocks of
    /// `Phi_x` become variables tied to `Phi_u` by the nominal constraint; the
    /// diagonal blocks are the identity it forces.
    fn phi_z_columns(&mut self) -> Result<Vec<Vec<LinExpr>>> {
        let l = self.layout;
        let (n, m) = (l.n, l.m);
        let sd = l.state_dim();
        let mut cols = Vec::with_capacity(sd - n);
        for c in n..sd {
            let tc = l.w_time(c);
            let mut px: Vec<LinExpr> = Vec::with_capacity(sd);
            for r in 0..sd {
                let tr = l.y_time(r);
                let entry = if tr < tc {
                    LinExpr::new()
                } else if tr == tc {
                    LinExpr::constant(if r == c { 1.0 } else { 0.0 })
                } else {
                    let i = r % n;
                    let v = self.model.add_free_var();
                    let mut e = LinExpr::var(v);
                    for j in 0..n {
                        e.add_scaled(&px[(tr - 1) * n + j], -self.a[(i, j)]);
                    }
                    for j in 0..m {
                        if let Some(p) = self.phi_u[((tr - 1) * m + j) * sd + c] {
                            e.add_term(p, -self.b[(i, j)]);
                        }
                    }
                    self.model.add_constraint(&e, Sense::Eq)?;
                    LinExpr::var(v)
                };
                px.push(entry);
            }
            let mut col: Vec<LinExpr> = px.into_iter().filter(|e| !(e.is_constant() && e.constant == 0.0)).collect();
            for r in 0..l.input_dim() {
                if let Some(p) = self.phi_u[r * sd + c] {
                    col.push(LinExpr::var(p));
                }
            }
            cols.push(col);
        }
        Ok(cols)
    }

    fn finish(self, nominal: &BatchSystem, eps: Option<Var>) -> SynthesisLp {
        SynthesisLp { model: self.model, nominal: nominal.clone(), phi_u: self.phi_u, eps }
    }
}

/// Sample-average problem: empirical cost and empirical CVaR constraints.
pub fn build_saa(problem: &ProblemData<'_>, config: &SynthesisConfig) -> Result<SynthesisLp> {
    config.validate()?;
    problem.validate(config)?;
    let mut b = Builder::new(problem, &problem.inputs(config))?;
    let objective = b.empirical_cost(problem.cost)?;
    b.constraints(problem.constraints, config, None)?;
    b.model.set_objective(objective);
    Ok(b.finish(problem.nominal, None))
}

/// Doubly robust problem at a fixed `gamma`.
pub fn build_rr(problem: &ProblemData<'_>, config: &SynthesisConfig, gamma: f64) -> Result<SynthesisLp> {
    config.validate()?;
    problem.validate(config)?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let inputs = problem.inputs(config);
    let mut b = Builder::new(problem, &inputs)?;
    let big_n = inputs.len() as f64;
    let e = config.bounds.max();

    // eps = gamma/(1-gamma) (1/N) sum_i ||y_hat^i - y^i||_1 + kappa/(1-gamma) ||Phi Z||
    let eps = b.model.add_nonneg_var();
    let mut eps_expr = LinExpr::new();
    eps_expr.add_term(eps, -1.0);
    if gamma > 0.0 {
        let coef = gamma / (1.0 - gamma) / big_n;
        for (i, traj) in problem.data.trajectories.iter().enumerate() {
            let y = traj.y();
            for r in 0..b.layout.y_dim() {
                let mut d = b.yhat[i][r].clone();
                d.add_constant(-y[r]);
                let t = b.abs_of(&d)?;
                eps_expr.add_scaled(&t, coef);
            }
        }
    }
    if config.kappa > 0.0 || e > 0.0 {
        let cols = b.phi_z_columns()?;
        let nu = b.model.add_l1_induced_epigraph(&cols)?;
        eps_expr.add_term(nu, config.kappa / (1.0 - gamma));
        if e > 0.0 {
            let mut sg = LinExpr::constant(-gamma);
            sg.add_term(nu, e);
            b.model.add_constraint(&sg, Sense::Le)?;
        }
    }
    b.model.add_constraint(&eps_expr, Sense::Eq)?;

    let mut objective = b.empirical_cost(problem.cost)?;
    objective.add_term(eps, problem.cost.dual_norm_bound());
    b.constraints(problem.constraints, config, Some(eps))?;
    b.model.set_objective(objective);
    Ok(b.finish(problem.nominal, Some(eps)))
}

/// Outcome of one grid point. `Error` marks a solver breakdown at that point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaStatus {
    Optimal,
    Infeasible,
    Unbounded,
    Error,
}

impl From<LpStatus> for GammaStatus {
    fn from(s: LpStatus) -> Self {
        match s {
            LpStatus::Optimal => GammaStatus::Optimal,
            LpStatus::Infeasible => GammaStatus::Infeasible,
            LpStatus::Unbounded => GammaStatus::Unbounded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub status: GammaStatus,
    pub objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub num_vars: usize,
    pub num_constraints: usize,
    pub max_violation: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub method: Method,
    pub phi: SystemResponses,
    pub feedback: Feedback,
    pub objective: f64,
    pub gamma_star: Option<f64>,
    pub epsilon: Option<f64>,
    pub per_gamma: Vec<GammaRow>,
    pub diagnostics: SolveDiagnostics,
}

/// Solved LP plus its extracted controller, or the non-optimal status.
fn finish_solve(
    method: Method,
    lp: &SynthesisLp,
    gamma: Option<f64>,
) -> Result<std::result::Result<SynthesisResult, LpStatus>> {
    let sol = lp.model.solve()?;
    if !sol.is_optimal() {
        return Ok(Err(sol.status));
    }
    if sol.max_violation > 1e-6 {
        return Err(Error::Numeric(format!("LP solution violates constraints by {:.3e}", sol.max_violation)));
    }
    let phi = lp.responses(&sol)?;
    let feedback = extract_feedback(&phi)?;
    Ok(Ok(SynthesisResult {
        method,
        phi,
        feedback,
        objective: sol.objective_value,
        gamma_star: gamma,
        epsilon: lp.epsilon(&sol),
        per_gamma: Vec::new(),
        diagnostics: SolveDiagnostics {
            num_vars: lp.model.num_vars(),
            num_constraints: lp.model.num_constraints(),
            max_violation: sol.max_violation,
        },
    }))
}

/// Solves the sample-average problem; an infeasible LP is an error.
pub fn solve_saa(problem: &ProblemData<'_>, config: &SynthesisConfig) -> Result<SynthesisResult> {
    let lp = build_saa(problem, config)?;
    finish_solve(Method::Saa, &lp, None)?.map_err(|s| Error::NotOptimal(format!("{s:?}").to_lowercase()))
}

/// Solves the doubly robust problem at one `gamma`; `Ok(Err(status))` when
/// that LP is not optimal.
pub fn solve_rr_at(
    problem: &ProblemData<'_>,
    config: &SynthesisConfig,
    gamma: f64,
) -> Result<std::result::Result<SynthesisResult, LpStatus>> {
    let lp = build_rr(problem, config, gamma)?;
    finish_solve(Method::Rr, &lp, Some(gamma))
}

/// Full grid table and the best feasible point, if any.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub per_gamma: Vec<GammaRow>,
    pub best: Option<SynthesisResult>,
}

impl GridOutcome {
    /// The best point; without one, a numeric error if any point broke down
    /// and [`Error::NoFeasibleGamma`] otherwise.
    pub fn into_best(self) -> Result<SynthesisResult> {
        if let Some(best) = self.best {
            return Ok(best);
        }
        match self.per_gamma.iter().find(|r| r.status == GammaStatus::Error) {
            Some(r) => Err(Error::Numeric(format!(
                "no feasible gamma; solve failed at gamma={}: {}",
                r.gamma,
                r.message.as_deref().unwrap_or("")
            ))),
            None => Err(Error::NoFeasibleGamma { tried: self.per_gamma.len() }),
        }
    }
}

/// Solves the doubly robust problem at every grid point, in ascending order.
/// The minimum objective wins, ties going to the lowest `gamma`.
pub fn grid_search_table(problem: &ProblemData<'_>, config: &SynthesisConfig) -> Result<GridOutcome> {
    config.validate()?;
    if config.gamma_grid.is_empty() {
        return Err(Error::InvalidArgument("gamma grid is empty".into()));
    }
    let mut grid = config.gamma_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut per_gamma = Vec::with_capacity(grid.len());
    let mut best: Option<SynthesisResult> = None;
    for gamma in grid {
        match solve_rr_at(problem, config, gamma) {
            Ok(Ok(res)) => {
                per_gamma.push(GammaRow {
                    gamma,
                    status: GammaStatus::Optimal,
                    objective: res.objective,
                    message: None,
                });
                if best.as_ref().is_none_or(|b| res.objective < b.objective) {
                    best = Some(res);
                }
            }
            Ok(Err(status)) => {
                per_gamma.push(GammaRow { gamma, status: status.into(), objective: f64::NAN, message: None })
            }
            Err(e @ (Error::Numeric(_) | Error::SingularResponse { .. })) => per_gamma.push(GammaRow {
                gamma,
                status: GammaStatus::Error,
                objective: f64::NAN,
                message: Some(e.to_string()),
            }),
            Err(e) => return Err(e),
        }
    }
    if let Some(b) = best.as_mut() {
        b.per_gamma = per_gamma.clone();
    }
    Ok(GridOutcome { per_gamma, best })
}

/// Like [`grid_search_table`] but a grid without a solved point is an error.
pub fn grid_search(problem: &ProblemData<'_>, config: &SynthesisConfig) -> Result<SynthesisResult> {
    grid_search_table(problem, config)?.into_best()
}

/// Dispatches on `config.method`.
pub fn synthesize(problem: &ProblemData<'_>, config: &SynthesisConfig) -> Result<SynthesisResult> {
    match config.method {
        Method::Saa => solve_saa(problem, config),
        Method::Rr => grid_search(problem, config),
    }
}

/// Per-timestep state bounds `e_i^T x_k - limit <= 0` for `k = 1..T`.
pub fn state_upper_bounds(layout: &Layout, coordinate: usize, limit: f64) -> Result<Vec<PwaFunction>> {
    if coordinate >= layout.n {
        return Err(Error::InvalidArgument(format!("state coordinate {coordinate} out of range")));
    }
    (1..=layout.horizon)
        .map(|k| {
            let mut a = vec![0.0; layout.y_dim()];
            a[layout.x_index(k, coordinate)] = 1.0;
            PwaFunction::affine(a, -limit)
        })
        .collect()
}

/// Weights `diag(Q, ..., Q, R, ..., R)` over `y = [x; u]`.
pub fn block_weights(layout: &Layout, q: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if q.len() != layout.n || r.len() != layout.m {
        return Err(Error::Dimension(format!("weights need {} state and {} input entries", layout.n, layout.m)));
    }
    let mut w = Vec::with_capacity(layout.y_dim());
    for _ in 0..=layout.horizon {
        w.extend_from_slice(q);
    }
    for _ in 0..layout.horizon {
        w.extend_from_slice(r);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::LtiSystem;
    use crate::dataset::{generate_dataset, recover_residuals, NoiseSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_l1_examples() {
        let zero = WeightedL1Cost::new(DVector::zeros(3)).unwrap();
        assert_eq!(zero.dual_norm_bound(), 0.0);
        assert_eq!(zero.value(&DVector::from_vec(vec![1.0, -2.0, 3.0])), 0.0);
        let c = WeightedL1Cost::new(DVector::from_vec(vec![0.01, 1.0])).unwrap();
        assert!((c.value(&DVector::from_vec(vec![2.0, -3.0])) - 3.02).abs() < 1e-15);
        assert!(pwa_from_weighted_l1(&[0.1, -0.1]).is_err());
    }

    #[test]
    fn reference_cost_dual_bound_is_one() {
        let l = Layout::new(2, 1, 10);
        let w = block_weights(&l, &[0.01, 1.0], &[0.01]).unwrap();
        assert_eq!(w.len(), 32);
        assert_eq!(pwa_from_weighted_l1(&w).unwrap().dual_norm_bound(), 1.0);
    }

    #[test]
    fn sign_enumeration_matches_weighted_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for dim in 1..=10 {
            let w = DVector::from_fn(dim, |_, _| rng.gen_range(0.0..2.0));
            let c = WeightedL1Cost::new(w).unwrap();
            let rows = c.sign_rows().unwrap();
            assert_eq!(rows.dual_norm_bound(), c.dual_norm_bound());
            for _ in 0..5 {
                let y = DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0));
                assert!((rows.value(&y) - c.value(&y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pwa_validation() {
        assert!(PwaFunction::new(vec![]).is_err());
        assert!(PwaFunction::new(vec![AffineRow { a: vec![1.0], b: 0.0 }, AffineRow { a: vec![1.0, 2.0], b: 0.0 }])
            .is_err());
        let f =
            PwaFunction::new(vec![AffineRow { a: vec![1.0, -4.0], b: 0.0 }, AffineRow { a: vec![-2.0, 0.0], b: 1.0 }])
                .unwrap();
        assert_eq!(f.dual_norm_bound(), 4.0);
        assert_eq!(f.value(&DVector::from_vec(vec![1.0, 1.0])), -1.0);
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<PwaFunction>(&text).unwrap(), f);
    }

    fn scalar_instance(noise: f64, x0: f64) -> (BatchSystem, TrajectoryDataset, ResidualSet) {
        let sys = LtiSystem::from_rows(&[vec![0.9]], &[vec![1.0]]).unwrap();
        let batch = BatchSystem::build(&sys, 1).unwrap();
        let data = generate_dataset(
            &sys,
            1,
            1,
            &DVector::from_vec(vec![x0]),
            &DMatrix::from_element(1, 1, -0.3),
            &NoiseSpec::gaussian(noise, 7),
        )
        .unwrap();
        let res = recover_residuals(&data, &batch).unwrap();
        (batch, data, res)
    }

    fn config(method: Method) -> SynthesisConfig {
        SynthesisConfig {
            method,
            beta: 0.3,
            kappa: 0.0,
            gamma_grid: vec![0.1, 0.5],
            bounds: ModelErrorBounds::new(0.0, 0.0).unwrap(),
            cvar_mode: CvarMode::PerConstraint,
            x0_new: None,
        }
    }

    #[test]
    fn zero_noise_zero_state_costs_nothing() {
        let (batch, data, res) = scalar_instance(0.0, 0.0);
        let cost = pwa_from_weighted_l1(&[1.0, 1.0, 0.0]).unwrap();
        let p = ProblemData { data: &data, residuals: &res, nominal: &batch, cost: &cost, constraints: &[] };
        let r = solve_saa(&p, &config(Method::Saa)).unwrap();
        assert!(r.objective.abs() < 1e-12);
    }

    #[test]
    fn hand_sized_saa_matches_grid_oracle() {
        // n = m = T = N = 1: free entries are Phi_u[0,0] = g0 and Phi_u[0,1] is non-causal.
        // y_hat = (x0, a x0 + b g0 x0 + w0, g0 x0); cost |x1| + 0.5|u0|
        let (batch, data, res) = scalar_instance(0.3, 1.0);
        let cost = pwa_from_weighted_l1(&[0.0, 1.0, 0.5]).unwrap();
        let p = ProblemData { data: &data, residuals: &res, nominal: &batch, cost: &cost, constraints: &[] };
        let r = solve_saa(&p, &config(Method::Saa)).unwrap();
        let w = &res.residuals[0];
        let (x0, w0) = (w[0], w[1]);
        let mut best = f64::INFINITY;
        let mut g = -5.0;
        while g <= 5.0 {
            let x1 = 0.9 * x0 + g * x0 + w0;
            best = best.min(x1.abs() + 0.5 * (g * x0).abs());
            g += 1e-3;
        }
        assert!(r.objective <= best + 1e-12);
        assert!(best - r.objective < 1e-3);
    }

    #[test]
    fn saa_rejects_mismatched_cost_dims() {
        let (batch, data, res) = scalar_instance(0.1, 1.0);
        let cost = pwa_from_weighted_l1(&[1.0]).unwrap();
        let p = ProblemData { data: &data, residuals: &res, nominal: &batch, cost: &cost, constraints: &[] };
        assert!(matches!(build_saa(&p, &config(Method::Saa)), Err(Error::Dimension(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = config(Method::Rr);
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = config(Method::Rr);
        c.gamma_grid = vec![];
        assert!(c.validate().is_err());
        let mut c = config(Method::Rr);
        c.gamma_grid = vec![1.0];
        assert!(c.validate().is_err());
        assert!(config(Method::Saa).validate().is_ok());
    }

    #[test]
    fn empty_grid_outcome_reports_breakdowns() {
        let row = |gamma, status| GammaRow { gamma, status, objective: f64::NAN, message: None };
        let infeasible = GridOutcome {
            per_gamma: vec![row(0.2, GammaStatus::Infeasible), row(0.5, GammaStatus::Infeasible)],
            best: None,
        };
        assert!(matches!(infeasible.into_best(), Err(Error::NoFeasibleGamma { tried: 2 })));
        let mut broken = row(0.5, GammaStatus::Error);
        broken.message = Some("stalled".into());
        let mixed = GridOutcome { per_gamma: vec![row(0.2, GammaStatus::Infeasible), broken], best: None };
        match mixed.into_best() {
            Err(Error::Numeric(msg)) => assert!(msg.contains("gamma=0.5") && msg.contains("stalled")),
            other => panic!("{other:?}"),
        }
        assert_eq!(serde_json::to_value(GammaStatus::Error).unwrap(), "error");
    }

    #[test]
    fn state_bounds_pick_the_right_coordinate() {
        let l = Layout::new(2, 1, 3);
        let g = state_upper_bounds(&l, 0, 0.8).unwrap();
        assert_eq!(g.len(), 3);
        let mut y = DVector::zeros(l.y_dim());
        y[l.x_index(2, 0)] = 1.0;
        assert!((g[1].value(&y) - 0.2).abs() < 1e-15);
        assert!((g[0].value(&y) + 0.8).abs() < 1e-15);
        assert!(state_upper_bounds(&l, 2, 0.8).is_err());
    }
}
