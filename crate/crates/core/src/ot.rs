//! Exact 1-Wasserstein distances between finite empirical distributions with
//! l1 ground cost, and empirical CVaR.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::lp::{LinExpr, LpModel, LpStatus, Sense};

/// Finitely supported distribution `sum_i p_i delta_{x_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("distribution needs at least one atom".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::Dimension(format!("{} atoms but {} weights", atoms.len(), weights.len())));
        }
        let dim = atoms[0].len();
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::Dimension("atoms have different dimensions".into()));
        }
        if atoms.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("atoms must be finite".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights must be nonnegative and sum to 1, got sum {total}")));
        }
        Ok(Self { atoms, weights })
    }

    /// Uniform weights `1/N`.
    pub fn uniform(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let w = 1.0 / atoms.len().max(1) as f64;
        let weights = vec![w; atoms.len()];
        Self::new(atoms, weights)
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|&p| (p - w).abs() <= 1e-15)
    }
}

fn l1(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials). Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `W_1(P, Q)` with cost `||x - y||_1`. Equal-size uniform distributions are
/// solved as an assignment problem, anything else as a transportation LP.
pub fn wasserstein(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension(format!("distributions live in dimensions {} and {}", p.dim(), q.dim())));
    }
    let cost: Vec<Vec<f64>> = p.atoms.iter().map(|a| q.atoms.iter().map(|b| l1(a, b)).collect()).collect();
    if p.len() == q.len() && p.is_uniform() && q.is_uniform() {
        let assignment = min_cost_assignment(&cost);
        let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        return Ok(total / p.len() as f64);
    }
    transport_lp(p, q, &cost)
}

fn transport_lp(p: &EmpiricalDistribution, q: &EmpiricalDistribution, cost: &[Vec<f64>]) -> Result<f64> {
    let mut model = LpModel::new();
    let plan: Vec<Vec<_>> = (0..p.len()).map(|_| (0..q.len()).map(|_| model.add_nonneg_var()).collect()).collect();
    for (i, row) in plan.iter().enumerate() {
        let mut e = LinExpr::constant(-p.weights[i]);
        for &v in row {
            e.add_term(v, 1.0);
        }
        model.add_constraint(&e, Sense::Eq)?;
    }
    for j in 0..q.len() {
        let mut e = LinExpr::constant(-q.weights[j]);
        for row in &plan {
            e.add_term(row[j], 1.0);
        }
        model.add_constraint(&e, Sense::Eq)?;
    }
    let mut obj = LinExpr::new();
    for (i, row) in plan.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            obj.add_term(v, cost[i][j]);
        }
    }
    model.set_objective(obj);
    let sol = model.solve()?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Numeric(format!("transportation problem ended {:?}", sol.status)));
    }
    Ok(sol.objective_value.max(0.0))
}

/// `inf_t [ (1/(beta N)) sum_i (v_i + t)_+ - t ]`, the mean of the worst
/// `beta` fraction of the samples (fractional atom included).
pub fn cvar_empirical(values: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("CVaR of an empty sample".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1], got {beta}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("CVaR of NaN samples".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut k = beta * sorted.len() as f64;
    if (k - k.round()).abs() < 1e-9 {
        k = k.round();
    }
    let whole = k.floor() as usize;
    let frac = k - whole as f64;
    let mut tail: f64 = sorted[..whole].iter().sum();
    if frac > 0.0 {
        tail += frac * sorted[whole];
    }
    Ok(tail / k)
}
