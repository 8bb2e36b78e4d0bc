//! Monte Carlo evaluation of synthesized controllers on the true system, the
//! random model-mismatch sweep, and shift-bound tightness tables.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{
    l1_induced_norm, matrix_to_rows, stack, BatchSystem, Layout, LtiSystem, ModelErrorBounds, ModelMismatch,
};
use crate::bounds::{epsilon_small_gain, shift_bound_total, small_gain_holds, ShiftBoundReport};
use crate::dataset::{generate_dataset, recover_residuals, NoiseSpec, ResidualSet, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::ot::{cvar_empirical, wasserstein, EmpiricalDistribution};
use crate::sls::{simulate_closed_loop, true_closed_loop, Feedback, SystemResponses};
use crate::synthesis::{
    grid_search_table, solve_saa, Cost, CvarMode, GridOutcome, Method, ProblemData, PwaFunction, SynthesisConfig,
    SynthesisResult,
};

/// Rollouts must match the closed-form true response to this tolerance.
pub const ROLLOUT_TOLERANCE: f64 = 1e-7;

/// Everything a validation run needs besides the controller.
#[derive(Debug, Clone, Copy)]
pub struct ValidationSetup<'a> {
    pub nominal: &'a LtiSystem,
    pub true_sys: &'a LtiSystem,
    /// Rollout `r` uses `noise.sampler(r)`.
    pub noise: &'a NoiseSpec,
    pub n_rollouts: usize,
    pub cost: &'a Cost,
    pub constraints: &'a [PwaFunction],
    pub beta: f64,
    pub cvar_mode: CvarMode,
    pub x0: &'a DVector<f64>,
    pub keep_trajectories: bool,
}

/// Training data for the shift-bound part of the report.
#[derive(Debug, Clone, Copy)]
pub struct ShiftInputs<'a> {
    pub data: &'a TrajectoryDataset,
    pub residuals: &'a ResidualSet,
    pub kappa: f64,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    #[serde(rename = "J_objective")]
    pub j_objective: f64,
    pub cost_bound_satisfied: bool,
    pub cvar_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_rollouts: usize,
    pub empirical_cost_mean: f64,
    /// One entry per constraint function.
    pub empirical_cvar: Vec<f64>,
    /// CVaR of the pointwise maximum over all constraints.
    pub empirical_cvar_joint: Option<f64>,
    pub violation_rate: f64,
    pub max_rollout_deviation: f64,
    pub certificate: Certificate,
    pub shift_report: Option<ShiftBoundReport>,
    /// Stacked `y = [x; u]` per rollout.
    #[serde(skip)]
    pub trajectories: Option<Vec<DVector<f64>>>,
}

impl ValidationReport {
    /// Worst CVaR under the given mode; `-inf` when there are no constraints.
    pub fn worst_cvar(&self, mode: CvarMode) -> f64 {
        match (mode, self.empirical_cvar_joint) {
            (CvarMode::JointMax, Some(j)) => j,
            _ => self.empirical_cvar.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Disturbance vector `[x0; w_0; ...; w_{T-1}]` of rollout `index`.
pub fn rollout_disturbance(noise: &NoiseSpec, index: u64, x0: &DVector<f64>, horizon: usize) -> DVector<f64> {
    let mut sampler = noise.sampler(index);
    let mut parts = Vec::with_capacity(horizon + 1);
    parts.push(x0.clone());
    for _ in 0..horizon {
        parts.push(sampler.sample(x0.len()));
    }
    stack(&parts)
}

/// Simulates `n_rollouts` fresh closed-loop trajectories under `feedback` on
/// the true system and scores them against the certificate `objective`.
pub fn validate(
    phi: &SystemResponses,
    feedback: &Feedback,
    objective: f64,
    setup: &ValidationSetup<'_>,
    shift: Option<&ShiftInputs<'_>>,
) -> Result<ValidationReport> {
    let l = phi.layout();
    if feedback.layout() != l {
        return Err(Error::Dimension("controller gain and responses have different shapes".into()));
    }
    for sys in [setup.nominal, setup.true_sys] {
        if sys.n() != l.n || sys.m() != l.m {
            return Err(Error::Dimension(format!(
                "system is {}x{}, controller expects n={} m={}",
                sys.n(),
                sys.m(),
                l.n,
                l.m
            )));
        }
    }
    if setup.x0.len() != l.n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", setup.x0.len(), l.n)));
    }
    if setup.cost.dim() != l.y_dim() || setup.constraints.iter().any(|g| g.dim() != l.y_dim()) {
        return Err(Error::Dimension("cost or constraints do not act on the trajectory dimension".into()));
    }
    if setup.n_rollouts == 0 {
        return Err(Error::InvalidArgument("need at least one rollout".into()));
    }
    setup.noise.validate()?;
    let dm = ModelMismatch::between(setup.nominal, setup.true_sys)?.stacked(&l);

    let mut costs = Vec::with_capacity(setup.n_rollouts);
    let mut g_values = vec![Vec::with_capacity(setup.n_rollouts); setup.constraints.len()];
    let mut joint = Vec::with_capacity(setup.n_rollouts);
    let mut violations = 0usize;
    let mut max_dev = 0.0f64;
    let mut kept = setup.keep_trajectories.then(Vec::new);
    for r in 0..setup.n_rollouts {
        let w = rollout_disturbance(setup.noise, r as u64, setup.x0, l.horizon);
        let y = simulate_closed_loop(setup.true_sys, feedback, &w);
        let closed_form = true_closed_loop(phi, &dm, &w);
        let dev = (&y - &closed_form).amax() / (1.0 + y.amax());
        max_dev = max_dev.max(dev);
        if !(dev <= ROLLOUT_TOLERANCE) {
            return Err(Error::Numeric(format!("rollout {r} differs from the closed-form response by {dev:.3e}")));
        }
        costs.push(setup.cost.value(&y));
        let mut worst = f64::NEG_INFINITY;
        for (vals, g) in g_values.iter_mut().zip(setup.constraints) {
            let v = g.value(&y);
            worst = worst.max(v);
            vals.push(v);
        }
        if worst > 0.0 {
            violations += 1;
        }
        joint.push(worst);
        if let Some(k) = kept.as_mut() {
            k.push(y);
        }
    }

    let n = setup.n_rollouts as f64;
    let empirical_cost_mean = costs.iter().sum::<f64>() / n;
    let empirical_cvar = g_values.iter().map(|v| cvar_empirical(v, setup.beta)).collect::<Result<Vec<_>>>()?;
    let empirical_cvar_joint =
        if setup.constraints.is_empty() { None } else { Some(cvar_empirical(&joint, setup.beta)?) };
    let cvar_satisfied = match setup.cvar_mode {
        CvarMode::PerConstraint => empirical_cvar.iter().all(|&c| c <= 0.0),
        CvarMode::JointMax => empirical_cvar_joint.is_none_or(|c| c <= 0.0),
    };
    let shift_report = shift.map(|s| shift_report(phi, &dm, s)).transpose()?;
    Ok(ValidationReport {
        n_rollouts: setup.n_rollouts,
        empirical_cost_mean,
        empirical_cvar,
        empirical_cvar_joint,
        violation_rate: violations as f64 / n,
        max_rollout_deviation: max_dev,
        certificate: Certificate {
            j_objective: objective,
            cost_bound_satisfied: empirical_cost_mean <= objective,
            cvar_satisfied,
        },
        shift_report,
        trajectories: kept,
    })
}

fn shift_report(phi: &SystemResponses, dm: &DMatrix<f64>, s: &ShiftInputs<'_>) -> Result<ShiftBoundReport> {
    let mut report = shift_bound_total(phi, dm, s.residuals, s.data, s.kappa)?;
    if let Some(gamma) = s.gamma {
        report.gamma = Some(gamma);
        report.epsilon_surrogate = Some(epsilon_small_gain(phi, gamma, s.kappa, s.residuals, s.data)?);
    }
    Ok(report)
}

/// `traj.csv`: one row per rollout and time step, inputs empty at `k = T`.
pub fn write_trajectories_csv(path: &Path, layout: &Layout, trajectories: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["rollout_id".to_string(), "k".to_string()];
    header.extend((1..=layout.n).map(|i| format!("x{i}")));
    header.extend((1..=layout.m).map(|j| format!("u{j}")));
    w.write_record(&header)?;
    for (r, y) in trajectories.iter().enumerate() {
        for k in 0..=layout.horizon {
            let mut rec = vec![r.to_string(), k.to_string()];
            rec.extend((0..layout.n).map(|i| y[layout.x_index(k, i)].to_string()));
            rec.extend((0..layout.m).map(|j| {
                if k < layout.horizon {
                    y[layout.u_index(k, j)].to_string()
                } else {
                    String::new()
                }
            }));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Everything needed to rerun data collection, synthesis and validation
/// for freshly sampled mismatches.
#[derive(Debug, Clone)]
pub struct SweepInput<'a> {
    pub nominal: &'a LtiSystem,
    pub horizon: usize,
    pub x0: &'a DVector<f64>,
    pub k0: &'a DMatrix<f64>,
    pub samples: usize,
    /// Noise law; seeds are derived per draw.
    pub noise: NoiseSpec,
    pub cost: &'a Cost,
    pub constraints: &'a [PwaFunction],
    pub synthesis: SynthesisConfig,
    pub n_rollouts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub draws: usize,
    pub norm_range: (f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub draw_id: usize,
    #[serde(rename = "delta_A")]
    pub delta_a: Vec<Vec<f64>>,
    #[serde(rename = "delta_B")]
    pub delta_b: Vec<Vec<f64>>,
    #[serde(rename = "dA_norm")]
    pub da_norm: f64,
    #[serde(rename = "dB_norm")]
    pub db_norm: f64,
    pub method: Method,
    /// `optimal`, `infeasible` or `error`.
    pub status: String,
    pub opt_cost: Option<f64>,
    pub gamma: Option<f64>,
    pub val_cost_mean: Option<f64>,
    /// Worst validation CVaR under the configured mode.
    pub val_cvar: Option<f64>,
    pub violation_rate: Option<f64>,
    pub cvar_satisfied: Option<bool>,
    pub cost_bound_satisfied: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub draws: usize,
    pub solved: usize,
    /// Fractions over all draws; unsolved draws count as failures.
    pub cvar_satisfied_fraction: f64,
    pub cvar_violated_fraction: f64,
    pub cost_bound_fraction: f64,
    pub opt_cost: Option<Quantiles>,
    pub val_cost_mean: Option<Quantiles>,
    pub val_cvar: Option<Quantiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub settings: SweepSettings,
    pub draws: Vec<SweepRow>,
    pub summary: Vec<MethodSummary>,
}

impl SweepReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

fn quantiles(values: &[f64]) -> Option<Quantiles> {
    Some(Quantiles {
        min: quantile(values, 0.0)?,
        q25: quantile(values, 0.25)?,
        median: quantile(values, 0.5)?,
        q75: quantile(values, 0.75)?,
        max: quantile(values, 1.0)?,
    })
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `purpose` of draw `draw` under master seed `seed`.
pub fn derive_seed(seed: u64, draw: u64, purpose: u64) -> u64 {
    mix64(mix64(seed ^ mix64(draw)).wrapping_add(purpose))
}

/// Random direction with entries `U[-1, 1]`, rescaled so its l1-induced
/// norm equals `target` (never exceeding it).
pub fn sample_scaled(rng: &mut ChaCha8Rng, rows: usize, cols: usize, target: f64) -> DMatrix<f64> {
    if target == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    loop {
        let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0));
        let norm = l1_induced_norm(&m);
        if norm < 1e-12 {
            continue;
        }
        m *= target / norm;
        while l1_induced_norm(&m) > target {
            m *= 1.0 - f64::EPSILON;
        }
        return m;
    }
}

/// Samples the mismatch of one draw: norms uniform on `range`, independent
/// for `dA` and `dB`.
pub fn sample_mismatch(n: usize, m: usize, range: (f64, f64), seed: u64, draw: u64) -> ModelMismatch {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, draw, 0));
    let norm = |rng: &mut ChaCha8Rng| if range.1 > range.0 { rng.gen_range(range.0..=range.1) } else { range.0 };
    let na = norm(&mut rng);
    let nb = norm(&mut rng);
    let delta_a = sample_scaled(&mut rng, n, n, na);
    let delta_b = sample_scaled(&mut rng, n, m, nb);
    ModelMismatch { delta_a, delta_b }
}

fn failed_row(base: &SweepRow, method: Method, status: &str, message: String) -> SweepRow {
    SweepRow { method, status: status.into(), message: Some(message), ..base.clone() }
}

fn scored_row(base: &SweepRow, res: &SynthesisResult, report: &ValidationReport, mode: CvarMode) -> SweepRow {
    SweepRow {
        method: res.method,
        status: "optimal".into(),
        opt_cost: Some(res.objective),
        gamma: res.gamma_star,
        val_cost_mean: Some(report.empirical_cost_mean),
        val_cvar: Some(report.worst_cvar(mode)),
        violation_rate: Some(report.violation_rate),
        cvar_satisfied: Some(report.certificate.cvar_satisfied),
        cost_bound_satisfied: Some(report.certificate.cost_bound_satisfied),
        message: None,
        ..base.clone()
    }
}

/// For each draw: samples a mismatch with norms in `norm_range`, builds the
/// true system `A = A_hat - dA`, `B = B_hat - dB`, collects a fresh dataset,
/// synthesizes SAA and RR controllers and validates both. Per-draw solver
/// failures are recorded, not returned.
pub fn mismatch_sweep(input: &SweepInput<'_>, settings: &SweepSettings) -> Result<SweepReport> {
    let (lo, hi) = settings.norm_range;
    let bounds: ModelErrorBounds = input.synthesis.bounds;
    if !(lo >= 0.0 && lo <= hi && hi <= bounds.e_a.min(bounds.e_b)) {
        return Err(Error::InvalidArgument(format!(
            "norm range [{lo}, {hi}] must lie inside [0, {}]",
            bounds.e_a.min(bounds.e_b)
        )));
    }
    input.synthesis.validate()?;
    let nominal = BatchSystem::build(input.nominal, input.horizon)?;
    let (n, m) = (input.nominal.n(), input.nominal.m());
    let mut draws = Vec::with_capacity(2 * settings.draws);
    for d in 0..settings.draws {
        let dm = sample_mismatch(n, m, settings.norm_range, settings.seed, d as u64);
        debug_assert!(dm.within(&bounds));
        let (da_norm, db_norm) = dm.norms();
        let base = SweepRow {
            draw_id: d,
            delta_a: matrix_to_rows(&dm.delta_a),
            delta_b: matrix_to_rows(&dm.delta_b),
            da_norm,
            db_norm,
            method: Method::Saa,
            status: String::new(),
            opt_cost: None,
            gamma: None,
            val_cost_mean: None,
            val_cvar: None,
            violation_rate: None,
            cvar_satisfied: None,
            cost_bound_satisfied: None,
            message: None,
        };
        let truth = dm.true_system(input.nominal)?;
        let data_noise = input.noise.with_seed(derive_seed(settings.seed, d as u64, 1));
        let val_noise = input.noise.with_seed(derive_seed(settings.seed, d as u64, 2));
        let data = generate_dataset(&truth, input.horizon, input.samples, input.x0, input.k0, &data_noise)?;
        let residuals = recover_residuals(&data, &nominal)?;
        let problem = ProblemData {
            data: &data,
            residuals: &residuals,
            nominal: &nominal,
            cost: input.cost,
            constraints: input.constraints,
        };
        let setup = ValidationSetup {
            nominal: input.nominal,
            true_sys: &truth,
            noise: &val_noise,
            n_rollouts: input.n_rollouts,
            cost: input.cost,
            constraints: input.constraints,
            beta: input.synthesis.beta,
            cvar_mode: input.synthesis.cvar_mode,
            x0: input.x0,
            keep_trajectories: false,
        };
        let mode = input.synthesis.cvar_mode;
        let saa_cfg = SynthesisConfig { method: Method::Saa, ..input.synthesis.clone() };
        let saa = solve_saa(&problem, &saa_cfg);
        draws.push(score(&base, Method::Saa, saa, &setup, mode));
        let rr_cfg = SynthesisConfig { method: Method::Rr, ..input.synthesis.clone() };
        let rr = grid_search_table(&problem, &rr_cfg).and_then(GridOutcome::into_best);
        draws.push(score(&base, Method::Rr, rr, &setup, mode));
    }
    let summary = [Method::Saa, Method::Rr].into_iter().map(|meth| summarize(&draws, meth, settings.draws)).collect();
    Ok(SweepReport { settings: *settings, draws, summary })
}

fn score(
    base: &SweepRow,
    method: Method,
    res: Result<SynthesisResult>,
    setup: &ValidationSetup<'_>,
    mode: CvarMode,
) -> SweepRow {
    match res {
        Ok(res) => match validate(&res.phi, &res.feedback, res.objective, setup, None) {
            Ok(report) => scored_row(base, &res, &report, mode),
            Err(e) => failed_row(base, method, "error", e.to_string()),
        },
        Err(e @ (Error::NoFeasibleGamma { .. } | Error::NotOptimal(_))) => {
            failed_row(base, method, "infeasible", e.to_string())
        }
        Err(e) => failed_row(base, method, "error", e.to_string()),
    }
}

fn summarize(rows: &[SweepRow], method: Method, draws: usize) -> MethodSummary {
    let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.method == method).collect();
    let solved: Vec<&SweepRow> = mine.iter().copied().filter(|r| r.status == "optimal").collect();
    let frac = |count: usize| if draws == 0 { 0.0 } else { count as f64 / draws as f64 };
    let collect = |f: fn(&SweepRow) -> Option<f64>| solved.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
    MethodSummary {
        method,
        draws,
        solved: solved.len(),
        cvar_satisfied_fraction: frac(solved.iter().filter(|r| r.cvar_satisfied == Some(true)).count()),
        cvar_violated_fraction: frac(solved.iter().filter(|r| r.cvar_satisfied == Some(false)).count()),
        cost_bound_fraction: frac(solved.iter().filter(|r| r.cost_bound_satisfied == Some(true)).count()),
        opt_cost: quantiles(&collect(|r| r.opt_cost)),
        val_cost_mean: quantiles(&collect(|r| r.val_cost_mean)),
        val_cvar: quantiles(&collect(|r| r.val_cvar)),
    }
}

/// `sweep.csv` with one row per draw and method.
pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "draw_id",
        "dA_norm",
        "dB_norm",
        "method",
        "status",
        "opt_cost",
        "val_cost_mean",
        "val_cvar",
        "violation_rate",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.draws {
        w.write_record([
            r.draw_id.to_string(),
            r.da_norm.to_string(),
            r.db_norm.to_string(),
            r.method.name().to_string(),
            r.status.clone(),
            opt(r.opt_cost),
            opt(r.val_cost_mean),
            opt(r.val_cvar),
            opt(r.violation_rate),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// One fresh-sample comparison of realized shift against the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub set_id: usize,
    /// `W(predictive, fresh realized closed loop)`.
    pub ot_distance: f64,
    /// `W(predictive, realized closed loop on the training disturbances)`.
    pub ot_mismatch_pair: f64,
    /// `W(training disturbances, fresh disturbances)`.
    pub disturbance_distance: f64,
    pub mismatch_term: f64,
    pub disturbance_coeff: f64,
    /// `mismatch_term + disturbance_coeff * disturbance_distance`.
    pub empirical_bound: f64,
    pub shift_bound_total: f64,
    pub epsilon_small_gain: Option<f64>,
    pub small_gain_holds: Option<bool>,
    pub ratio_total: f64,
    pub ratio_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TightnessInput<'a> {
    pub nominal: &'a LtiSystem,
    pub true_sys: &'a LtiSystem,
    pub data: &'a TrajectoryDataset,
    pub residuals: &'a ResidualSet,
    pub kappa: f64,
    pub gamma: Option<f64>,
    pub bounds: Option<ModelErrorBounds>,
    /// Law of the fresh disturbance sets; set `s` uses seed stream `s`.
    pub noise: &'a NoiseSpec,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Compares the exact transport distance between the predictive empirical
/// distribution and realized closed-loop samples with the shift bounds.
/// Fresh sets share the training initial states; only the noise is redrawn.
pub fn bound_tightness(
    phi: &SystemResponses,
    input: &TightnessInput<'_>,
    n_fresh_sets: usize,
) -> Result<Vec<TightnessRow>> {
    let l = phi.layout();
    let dm = ModelMismatch::between(input.nominal, input.true_sys)?.stacked(&l);
    let report = shift_bound_total(phi, &dm, input.residuals, input.data, input.kappa)?;
    let eps = input.gamma.map(|g| epsilon_small_gain(phi, g, input.kappa, input.residuals, input.data)).transpose()?;
    let holds = match (input.gamma, input.bounds) {
        (Some(g), Some(b)) => Some(small_gain_holds(phi, &b, g)),
        _ => None,
    };
    let stacked = phi.stacked();
    let predictive =
        EmpiricalDistribution::uniform(input.residuals.effective_all().iter().map(|w| &stacked * w).collect())?;
    let training_w = recover_residuals(input.data, &BatchSystem::build(input.true_sys, l.horizon)?)?.residuals;
    let realized_training =
        EmpiricalDistribution::uniform(training_w.iter().map(|w| true_closed_loop(phi, &dm, w)).collect())?;
    let ot_mismatch_pair = wasserstein(&predictive, &realized_training)?;
    let training_dist = EmpiricalDistribution::uniform(training_w.clone())?;

    let mut rows = Vec::with_capacity(n_fresh_sets);
    for s in 0..n_fresh_sets {
        let noise = input.noise.with_seed(derive_seed(input.noise.seed, s as u64, 3));
        let fresh: Vec<DVector<f64>> = input
            .data
            .trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| rollout_disturbance(&noise, i as u64, &t.x0(l.n), l.horizon))
            .collect();
        let realized = EmpiricalDistribution::uniform(fresh.iter().map(|w| true_closed_loop(phi, &dm, w)).collect())?;
        let ot = wasserstein(&predictive, &realized)?;
        let dist_w = wasserstein(&training_dist, &EmpiricalDistribution::uniform(fresh)?)?;
        rows.push(TightnessRow {
            set_id: s,
            ot_distance: ot,
            ot_mismatch_pair,
            disturbance_distance: dist_w,
            mismatch_term: report.mismatch_term,
            disturbance_coeff: report.disturbance_coeff,
            empirical_bound: report.mismatch_term + report.disturbance_coeff * dist_w,
            shift_bound_total: report.total,
            epsilon_small_gain: eps,
            small_gain_holds: holds,
            ratio_total: ratio(ot, report.total),
            ratio_epsilon: eps.map(|e| ratio(ot, e)),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sls::extract_feedback;
    use crate::synthesis::{block_weights, pwa_from_weighted_l1, state_upper_bounds};

    fn nominal() -> LtiSystem {
        LtiSystem::from_rows(&[vec![0.95, 0.01], vec![0.0, 0.2]], &[vec![0.5], vec![0.02]]).unwrap()
    }

    fn truth() -> LtiSystem {
        LtiSystem::from_rows(&[vec![0.95, -0.02], vec![0.0, 0.2]], &[vec![0.5], vec![-0.01]]).unwrap()
    }

    fn static_controller(sys: &LtiSystem, horizon: usize, k0: &[f64]) -> (SystemResponses, Feedback) {
        let batch = BatchSystem::build(sys, horizon).unwrap();
        let k = Feedback::static_gain(batch.layout(), &DMatrix::from_row_slice(1, 2, k0)).unwrap();
        let phi = SystemResponses::from_feedback(&batch, &k).unwrap();
        (phi, k)
    }

    #[test]
    fn zero_noise_zero_state_is_silent() {
        let sys = nominal();
        let (phi, k) = static_controller(&sys, 4, &[0.0, 0.0]);
        let l = phi.layout();
        let cost = pwa_from_weighted_l1(&block_weights(&l, &[0.01, 1.0], &[0.01]).unwrap()).unwrap();
        let cons = state_upper_bounds(&l, 0, 0.8).unwrap();
        let noise = NoiseSpec::gaussian(0.0, 1);
        let x0 = DVector::zeros(2);
        let setup = ValidationSetup {
            nominal: &sys,
            true_sys: &sys,
            noise: &noise,
            n_rollouts: 5,
            cost: &cost,
            constraints: &cons,
            beta: 0.3,
            cvar_mode: CvarMode::PerConstraint,
            x0: &x0,
            keep_trajectories: true,
        };
        let rep = validate(&phi, &k, 0.0, &setup, None).unwrap();
        assert_eq!(rep.empirical_cost_mean, 0.0);
        assert!(rep.empirical_cvar.iter().all(|&c| (c + 0.8).abs() < 1e-15));
        assert_eq!(rep.violation_rate, 0.0);
        assert!(rep.certificate.cost_bound_satisfied && rep.certificate.cvar_satisfied);
        assert_eq!(rep.trajectories.unwrap().len(), 5);
    }

    #[test]
    fn rollouts_match_closed_form_under_mismatch() {
        let (nom, tr) = (nominal(), truth());
        let (phi, _) = static_controller(&nom, 10, &[-0.2, -0.1]);
        let k = extract_feedback(&phi).unwrap();
        let l = phi.layout();
        let cost = pwa_from_weighted_l1(&block_weights(&l, &[0.01, 1.0], &[0.01]).unwrap()).unwrap();
        let cons = state_upper_bounds(&l, 0, 0.8).unwrap();
        let noise = NoiseSpec::gaussian(0.05f64.sqrt(), 9);
        let x0 = DVector::from_vec(vec![-0.5, -0.5]);
        let setup = ValidationSetup {
            nominal: &nom,
            true_sys: &tr,
            noise: &noise,
            n_rollouts: 100,
            cost: &cost,
            constraints: &cons,
            beta: 0.3,
            cvar_mode: CvarMode::JointMax,
            x0: &x0,
            keep_trajectories: false,
        };
        let rep = validate(&phi, &k, 1.0, &setup, None).unwrap();
        assert!(rep.max_rollout_deviation <= ROLLOUT_TOLERANCE);
        assert!((0.0..=1.0).contains(&rep.violation_rate));
        assert_eq!(rep.empirical_cvar.len(), 10);
        let worst = rep.empirical_cvar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(rep.empirical_cvar_joint.unwrap() >= worst - 1e-12);
        let again = validate(&phi, &k, 1.0, &setup, None).unwrap();
        assert_eq!(rep, again);
    }

    #[test]
    fn dimension_errors() {
        let sys = nominal();
        let (phi, k) = static_controller(&sys, 3, &[0.0, 0.0]);
        let l = phi.layout();
        let cost = pwa_from_weighted_l1(&vec![1.0; l.y_dim() + 1]).unwrap();
        let noise = NoiseSpec::gaussian(0.1, 1);
        let x0 = DVector::zeros(2);
        let setup = ValidationSetup {
            nominal: &sys,
            true_sys: &sys,
            noise: &noise,
            n_rollouts: 3,
            cost: &cost,
            constraints: &[],
            beta: 0.3,
            cvar_mode: CvarMode::PerConstraint,
            x0: &x0,
            keep_trajectories: false,
        };
        assert!(validate(&phi, &k, 0.0, &setup, None).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), Some(2.0));
        assert_eq!(quantile(&[1.0, 2.0], 0.25), Some(1.25));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn sampled_norms_hit_targets() {
        for d in 0..200 {
            let dm = sample_mismatch(2, 1, (0.0, 0.03), 5, d);
            let (na, nb) = dm.norms();
            assert!(na <= 0.03 && nb <= 0.03);
            assert!(dm.within(&ModelErrorBounds::new(0.03, 0.03).unwrap()));
        }
        let zero = sample_mismatch(2, 1, (0.0, 0.0), 5, 0);
        assert_eq!(zero.norms(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_scaled(&mut rng, 3, 2, 0.017);
        assert!((l1_induced_norm(&m) - 0.017).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn sampled_norms_within_range(seed in 0u64..1000, draw in 0u64..1000, lo in 0.0f64..0.05, width in 0.0f64..0.05, n in 1usize..4, m in 1usize..3) {
            let hi = lo + width;
            let dm = sample_mismatch(n, m, (lo, hi), seed, draw);
            let (na, nb) = dm.norms();
            proptest::prop_assert!(na <= hi && nb <= hi);
            proptest::prop_assert!(na >= lo * (1.0 - 1e-12) && nb >= lo * (1.0 - 1e-12));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(2, 0, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }

    #[test]
    fn tightness_zero_mismatch_training_set() {
        let sys = nominal();
        let batch = BatchSystem::build(&sys, 3).unwrap();
        let k0 = DMatrix::from_row_slice(1, 2, &[-0.2, -0.1]);
        let x0 = DVector::from_vec(vec![0.3, -0.1]);
        let noise = NoiseSpec::gaussian(0.1, 4);
        let data = generate_dataset(&sys, 3, 5, &x0, &k0, &noise).unwrap();
        let res = recover_residuals(&data, &batch).unwrap();
        let (phi, _) = static_controller(&sys, 3, &[0.1, 0.3]);
        let input = TightnessInput {
            nominal: &sys,
            true_sys: &sys,
            data: &data,
            residuals: &res,
            kappa: 0.01,
            gamma: Some(0.5),
            bounds: Some(ModelErrorBounds::new(0.0, 0.0).unwrap()),
            noise: &noise,
        };
        let rows = bound_tightness(&phi, &input, 3).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.ot_mismatch_pair < 1e-12);
            assert_eq!(r.mismatch_term, 0.0);
            assert!(r.ot_distance <= r.empirical_bound + 1e-9);
        }
    }

    #[test]
    fn sweep_single_zero_draw() {
        let sys = nominal();
        let l = Layout::new(2, 1, 4);
        let cost = pwa_from_weighted_l1(&block_weights(&l, &[0.01, 1.0], &[0.01]).unwrap()).unwrap();
        let cons = state_upper_bounds(&l, 0, 0.8).unwrap();
        let x0 = DVector::from_vec(vec![-0.5, -0.5]);
        let k0 = DMatrix::from_row_slice(1, 2, &[-0.2, -0.1]);
        let input = SweepInput {
            nominal: &sys,
            horizon: 4,
            x0: &x0,
            k0: &k0,
            samples: 6,
            noise: NoiseSpec::gaussian(0.1, 0),
            cost: &cost,
            constraints: &cons,
            synthesis: SynthesisConfig {
                method: Method::Rr,
                beta: 0.3,
                kappa: 0.001,
                gamma_grid: vec![0.1, 0.5],
                bounds: ModelErrorBounds::new(0.03, 0.03).unwrap(),
                cvar_mode: CvarMode::PerConstraint,
                x0_new: None,
            },
            n_rollouts: 20,
        };
        let settings = SweepSettings { draws: 1, norm_range: (0.0, 0.0), seed: 3 };
        let rep = mismatch_sweep(&input, &settings).unwrap();
        assert_eq!(rep.draws.len(), 2);
        assert!(rep.draws.iter().all(|r| r.da_norm == 0.0 && r.db_norm == 0.0));
        assert!(rep.draws.iter().all(|r| r.status == "optimal"), "{:?}", rep.draws);
        let saa = rep.draws.iter().find(|r| r.method == Method::Saa).unwrap();
        let rr = rep.draws.iter().find(|r| r.method == Method::Rr).unwrap();
        assert!(rr.opt_cost.unwrap() >= saa.opt_cost.unwrap() - 1e-9);
        assert_eq!(rep, mismatch_sweep(&input, &settings).unwrap());
        let bad = SweepSettings { norm_range: (0.0, 0.5), ..settings };
        assert!(mismatch_sweep(&input, &bad).is_err());
    }
}
