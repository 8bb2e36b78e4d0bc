//! Linear programs in minimization form with epigraph gadgets, solved by the
//! HiGHS dual simplex.
//!
//! Text export format (one item per line):
//!
//! ```text
//! minimize
//!   <coef> x<i> ... + <constant>
//! subject to
//!   c<k>: <coef> x<i> ... <= | >= | = <rhs>
//! bounds
//!   <lo> <= x<i> <= <hi>
//! end
//! ```

use std::fmt::Write as _;

use highs::{HighsModelStatus, RowProblem, Sense as HighsSense};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a model variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Affine expression `sum coef * var + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(v: Var) -> Self {
        Self { terms: vec![(v, 1.0)], constant: 0.0 }
    }

    pub fn add_term(&mut self, v: Var, coef: f64) -> &mut Self {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
        self
    }

    pub fn add_constant(&mut self, c: f64) -> &mut Self {
        self.constant += c;
        self
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) -> &mut Self {
        if scale != 0.0 {
            for &(v, c) in &other.terms {
                self.terms.push((v, c * scale));
            }
            self.constant += other.constant * scale;
        }
        self
    }

    pub fn scaled(&self, scale: f64) -> Self {
        let mut out = Self::new();
        out.add_scaled(self, scale);
        out
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, c)| c == 0.0)
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(v, c)| c * values[v.0]).sum::<f64>()
    }

    /// Merges repeated variables and drops zero coefficients, ordered by index.
    pub fn normalized(&self) -> Self {
        let mut terms = self.terms.clone();
        terms.sort_by_key(|&(v, _)| v);
        let mut merged: Vec<(Var, f64)> = Vec::with_capacity(terms.len());
        for (v, c) in terms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += c,
                _ => merged.push((v, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        Self { terms: merged, constant: self.constant }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

/// `terms sense rhs` with merged, sorted terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub terms: Vec<(Var, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

impl Constraint {
    fn violation(&self, values: &[f64]) -> f64 {
        let lhs: f64 = self.terms.iter().map(|&(v, c)| c * values[v.0]).sum();
        let raw = match self.sense {
            Sense::Le => lhs - self.rhs,
            Sense::Ge => self.rhs - lhs,
            Sense::Eq => (lhs - self.rhs).abs(),
        };
        let scale = self.terms.iter().map(|&(_, c)| c.abs()).fold(1.0, f64::max);
        raw.max(0.0) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub max_violation: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }

    pub fn value(&self, v: Var) -> f64 {
        self.values[v.0]
    }

    pub fn eval(&self, e: &LinExpr) -> f64 {
        e.eval(&self.values)
    }
}

/// Minimization LP.
#[derive(Debug, Clone, Default)]
pub struct LpModel {
    lower: Vec<f64>,
    upper: Vec<f64>,
    objective: LinExpr,
    constraints: Vec<Constraint>,
}

impl LpModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    /// New variable with bounds `lo <= x <= hi`; use infinities for free sides.
    pub fn add_var(&mut self, lo: f64, hi: f64) -> Var {
        debug_assert!(lo <= hi && !lo.is_nan() && !hi.is_nan());
        self.lower.push(lo);
        self.upper.push(hi);
        Var(self.lower.len() - 1)
    }

    pub fn add_free_var(&mut self) -> Var {
        self.add_var(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_nonneg_var(&mut self) -> Var {
        self.add_var(0.0, f64::INFINITY)
    }

    pub fn bounds(&self, v: Var) -> (f64, f64) {
        (self.lower[v.0], self.upper[v.0])
    }

    pub fn set_objective(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    /// Adds `expr sense 0`; the constant of `expr` moves to the right side.
    pub fn add_constraint(&mut self, expr: &LinExpr, sense: Sense) -> Result<()> {
        let e = expr.normalized();
        if !e.constant.is_finite() || e.terms.iter().any(|&(_, c)| !c.is_finite()) {
            return Err(Error::Numeric("non-finite constraint coefficient".into()));
        }
        if let Some(&(v, _)) = e.terms.iter().find(|&&(v, _)| v.0 >= self.num_vars()) {
            return Err(Error::InvalidArgument(format!("constraint references undeclared variable {}", v.0)));
        }
        self.constraints.push(Constraint { terms: e.terms, sense, rhs: -e.constant });
        Ok(())
    }

    pub fn add_le(&mut self, lhs: &LinExpr, rhs: &LinExpr) -> Result<()> {
        let mut e = lhs.clone();
        e.add_scaled(rhs, -1.0);
        self.add_constraint(&e, Sense::Le)
    }

    pub fn add_eq(&mut self, lhs: &LinExpr, rhs: &LinExpr) -> Result<()> {
        let mut e = lhs.clone();
        e.add_scaled(rhs, -1.0);
        self.add_constraint(&e, Sense::Eq)
    }

    /// `t >= |expr|`.
    pub fn add_abs_epigraph(&mut self, expr: &LinExpr) -> Result<Var> {
        let t = self.add_nonneg_var();
        let mut up = expr.clone();
        up.add_term(t, -1.0);
        self.add_constraint(&up, Sense::Le)?;
        let mut down = expr.scaled(-1.0);
        down.add_term(t, -1.0);
        self.add_constraint(&down, Sense::Le)?;
        Ok(t)
    }

    /// `q >= max(expr, 0)`.
    pub fn add_pos_part_epigraph(&mut self, expr: &LinExpr) -> Result<Var> {
        let q = self.add_nonneg_var();
        let mut e = expr.clone();
        e.add_term(q, -1.0);
        self.add_constraint(&e, Sense::Le)?;
        Ok(q)
    }

    /// `s >= max_j sum_i |M_ij|` for `M` given column by column. Constant
    /// entries enter the column sums directly.
    pub fn add_l1_induced_epigraph(&mut self, columns: &[Vec<LinExpr>]) -> Result<Var> {
        let s = self.add_nonneg_var();
        for col in columns {
            let mut sum = LinExpr::new();
            for entry in col {
                if entry.is_constant() {
                    sum.add_constant(entry.constant.abs());
                } else {
                    let t = self.add_abs_epigraph(entry)?;
                    sum.add_term(t, 1.0);
                }
            }
            sum.add_term(s, -1.0);
            self.add_constraint(&sum, Sense::Le)?;
        }
        Ok(s)
    }

    /// Largest scaled violation of constraints and bounds at `values`.
    pub fn max_violation(&self, values: &[f64]) -> f64 {
        let cons = self.constraints.iter().map(|c| c.violation(values)).fold(0.0, f64::max);
        let bnds = values
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&lo, &hi))| (lo - x).max(x - hi).max(0.0) / lo.abs().max(hi.abs()).clamp(1.0, 1e300))
            .fold(0.0, f64::max);
        cons.max(bnds)
    }

    /// Solves the model with a single-threaded dual simplex (HiGHS).
    /// Infeasible and unbounded outcomes are reported in the status; only a
    /// breakdown of the solver itself is an error. A breakdown is retried
    /// without presolve and then with the interior point method.
    pub fn solve(&self) -> Result<LpSolution> {
        let mut last = String::new();
        for (presolve, solver) in [(true, "simplex"), (false, "simplex"), (true, "ipm")] {
            match self.run_highs(presolve, solver)? {
                Ok(sol) => return Ok(sol),
                Err(msg) => last = msg,
            }
        }
        Err(Error::Numeric(format!("LP solver failed: {last}")))
    }

    fn run_highs(&self, presolve: bool, solver: &str) -> Result<std::result::Result<LpSolution, String>> {
        let obj = self.objective.normalized();
        if obj.terms.iter().any(|&(v, _)| v.0 >= self.num_vars()) {
            return Err(Error::InvalidArgument("objective references undeclared variable".into()));
        }
        let mut obj_coefs = vec![0.0; self.num_vars()];
        for &(v, c) in &obj.terms {
            obj_coefs[v.0] = c;
        }
        let mut pb = RowProblem::default();
        let cols: Vec<_> =
            (0..self.num_vars()).map(|i| pb.add_column(obj_coefs[i], self.lower[i]..=self.upper[i])).collect();
        for c in &self.constraints {
            if c.terms.is_empty() {
                let ok = match c.sense {
                    Sense::Le => 0.0 <= c.rhs + 1e-12,
                    Sense::Ge => 0.0 >= c.rhs - 1e-12,
                    Sense::Eq => c.rhs.abs() <= 1e-12,
                };
                if !ok {
                    return Ok(Ok(self.non_optimal(LpStatus::Infeasible)));
                }
                continue;
            }
            // power-of-two row scaling keeps coefficients near unit magnitude
            // without rounding error
            let row_max = c.terms.iter().map(|&(_, a)| a.abs()).fold(0.0, f64::max);
            let scale = 2f64.powi(-(row_max.log2().round() as i32));
            let row: Vec<_> = c.terms.iter().map(|&(v, a)| (cols[v.0], a * scale)).collect();
            let rhs = c.rhs * scale;
            match c.sense {
                Sense::Le => pb.add_row(..=rhs, &row),
                Sense::Ge => pb.add_row(rhs.., &row),
                Sense::Eq => pb.add_row(rhs..=rhs, &row),
            }
        }
        let mut model = pb.optimise(HighsSense::Minimise);
        model.make_quiet();
        model.set_option("threads", 1);
        model.set_option("solver", solver);
        if !presolve {
            model.set_option("presolve", "off");
        }
        let solved = match model.try_solve() {
            Ok(s) => s,
            Err(e) => return Ok(Err(format!("{e:?}"))),
        };
        Ok(match solved.status() {
            HighsModelStatus::Optimal => {
                let values = solved.get_solution().columns().to_vec();
                Ok(LpSolution {
                    status: LpStatus::Optimal,
                    objective_value: obj.eval(&values),
                    max_violation: self.max_violation(&values),
                    values,
                })
            }
            HighsModelStatus::ModelEmpty => {
                let values: Vec<f64> = (0..self.num_vars())
                    .map(|i| if obj_coefs[i] >= 0.0 { self.lower[i] } else { self.upper[i] })
                    .map(|v| if v.is_finite() { v } else { 0.0 })
                    .collect();
                Ok(LpSolution {
                    status: LpStatus::Optimal,
                    objective_value: obj.eval(&values),
                    max_violation: self.max_violation(&values),
                    values,
                })
            }
            HighsModelStatus::Infeasible => Ok(self.non_optimal(LpStatus::Infeasible)),
            HighsModelStatus::Unbounded => Ok(self.non_optimal(LpStatus::Unbounded)),
            // presolve cannot always tell infeasible from unbounded
            other => Err(format!("status {other:?}")),
        })
    }

    fn non_optimal(&self, status: LpStatus) -> LpSolution {
        let objective_value = match status {
            LpStatus::Unbounded => f64::NEG_INFINITY,
            _ => f64::INFINITY,
        };
        LpSolution { status, values: vec![f64::NAN; self.num_vars()], objective_value, max_violation: f64::INFINITY }
    }

    /// Plain-text dump in the format described in the module docs.
    pub fn to_lp_string(&self) -> String {
        fn terms(out: &mut String, terms: &[(Var, f64)]) {
            if terms.is_empty() {
                out.push_str(" 0");
            }
            for &(v, c) in terms {
                let _ = write!(out, " {c:+e} x{}", v.0);
            }
        }
        let mut out = String::from("minimize\n ");
        let obj = self.objective.normalized();
        terms(&mut out, &obj.terms);
        let _ = writeln!(out, " {:+e}", obj.constant);
        out.push_str("subject to\n");
        for (k, c) in self.constraints.iter().enumerate() {
            let _ = write!(out, " c{k}:");
            terms(&mut out, &c.terms);
            let op = match c.sense {
                Sense::Le => "<=",
                Sense::Ge => ">=",
                Sense::Eq => "=",
            };
            let _ = writeln!(out, " {op} {:e}", c.rhs);
        }
        out.push_str("bounds\n");
        for i in 0..self.num_vars() {
            let _ = writeln!(out, " {:e} <= x{i} <= {:e}", self.lower[i], self.upper[i]);
        }
        out.push_str("end\n");
        out
    }
}
