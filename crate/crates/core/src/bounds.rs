//! Distribution-shift bounds between the nominal predictive distribution and
//! the true closed-loop distribution, and the convex small-gain surrogate used
//! as the ambiguity radius during synthesis.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::batch::{l1_induced_norm, ModelErrorBounds};
use crate::dataset::{ResidualSet, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::sls::{mismatch_loop, solve_time_lower, SystemResponses};

/// Concentration constants of a light-tailed disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationParams {
    pub c1: f64,
    pub c2: f64,
    pub a: f64,
    pub eta: f64,
}

impl ConcentrationParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.c1 > 0.0 && self.c2 > 0.0 && self.a > 1.0 && self.eta > 0.0 && self.eta < 1.0;
        if !ok || ![self.c1, self.c2, self.a].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "concentration parameters need c1, c2 > 0, a > 1, 0 < eta < 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Radius `kappa(eta, N)` of the Wasserstein ball around the empirical
/// disturbance distribution holding with confidence `1 - eta`.
///
/// With `q = ln(c1 / eta) / (c2 N)` this is `q^(1/nT)` for `q <= 1` and
/// `q^(1/a)` otherwise. `q <= 0` (`c1 <= eta`) gives radius zero.
pub fn kappa(params: &ConcentrationParams, samples: usize, nt: usize) -> Result<f64> {
    params.validate()?;
    if nt <= 2 {
        return Err(Error::InvalidArgument(format!("kappa needs nT > 2, got {nt}")));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument("kappa needs at least one sample".into()));
    }
    let q = (params.c1 / params.eta).ln() / (params.c2 * samples as f64);
    if q <= 0.0 {
        return Ok(0.0);
    }
    Ok(if q <= 1.0 { q.powf(1.0 / nt as f64) } else { q.powf(1.0 / params.a) })
}

/// Distribution-shift decomposition for a fixed design and a known mismatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftBoundReport {
    pub mismatch_term: f64,
    pub disturbance_coeff: f64,
    pub kappa: f64,
    pub total: f64,
    pub gamma: Option<f64>,
    pub epsilon_surrogate: Option<f64>,
}

fn check_inputs(phi: &SystemResponses, residuals: &ResidualSet, data: &TrajectoryDataset) -> Result<()> {
    let l = phi.layout();
    data.check_dims(l.n, l.m, l.horizon)?;
    if residuals.len() != data.len() || residuals.residuals.iter().any(|w| w.len() != l.state_dim()) {
        return Err(Error::Dimension("residual set does not match the dataset".into()));
    }
    Ok(())
}

/// Columns `Phi (w_hat^i + x_tilde^i) - y^i`, one per sample.
fn prediction_errors(phi: &SystemResponses, residuals: &ResidualSet, data: &TrajectoryDataset) -> DMatrix<f64> {
    let stacked = phi.stacked();
    let cols: Vec<_> = (0..data.len()).map(|i| &stacked * residuals.effective(i) - data.trajectories[i].y()).collect();
    DMatrix::from_columns(&cols)
}

/// `(1/N) sum_i ||Phi (w_hat^i + x_tilde^i) - y^i||_1`.
pub fn mean_prediction_gap(phi: &SystemResponses, residuals: &ResidualSet, data: &TrajectoryDataset) -> Result<f64> {
    check_inputs(phi, residuals, data)?;
    let err = prediction_errors(phi, residuals, data);
    Ok(err.column_iter().map(|c| c.lp_norm(1)).sum::<f64>() / data.len() as f64)
}

/// `(1/N) sum_i ||R_Phi Phi Z dM (Phi w_hat^i - y^i)||_1`, the model-mismatch
/// part of the shift. Needs the true `dM`.
pub fn mismatch_bound(
    phi: &SystemResponses,
    delta_m: &DMatrix<f64>,
    residuals: &ResidualSet,
    data: &TrajectoryDataset,
) -> Result<f64> {
    check_inputs(phi, residuals, data)?;
    let loop_gain = mismatch_loop(phi, delta_m);
    let rhs = &loop_gain * prediction_errors(phi, residuals, data);
    let out = solve_time_lower(&phi.layout(), &loop_gain, &rhs);
    Ok(out.column_iter().map(|c| c.lp_norm(1)).sum::<f64>() / data.len() as f64)
}

/// `||R_Phi Phi Z||`, the gain from disturbance-distribution error to shift.
pub fn disturbance_coeff(phi: &SystemResponses, delta_m: &DMatrix<f64>) -> f64 {
    let out = solve_time_lower(&phi.layout(), &mismatch_loop(phi, delta_m), &phi.phi_z());
    l1_induced_norm(&out)
}

/// `mismatch_bound + disturbance_coeff * kappa`.
pub fn shift_bound_total(
    phi: &SystemResponses,
    delta_m: &DMatrix<f64>,
    residuals: &ResidualSet,
    data: &TrajectoryDataset,
    kappa: f64,
) -> Result<ShiftBoundReport> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument(format!("kappa must be finite and nonnegative, got {kappa}")));
    }
    let mismatch_term = mismatch_bound(phi, delta_m, residuals, data)?;
    let coeff = disturbance_coeff(phi, delta_m);
    Ok(ShiftBoundReport {
        mismatch_term,
        disturbance_coeff: coeff,
        kappa,
        total: mismatch_term + coeff * kappa,
        gamma: None,
        epsilon_surrogate: None,
    })
}

/// `gamma/(1-gamma) * mean_prediction_gap + kappa/(1-gamma) * ||Phi Z||`.
/// The residual set's initial-condition shifts are included when present.
pub fn epsilon_small_gain(
    phi: &SystemResponses,
    gamma: f64,
    kappa: f64,
    residuals: &ResidualSet,
    data: &TrajectoryDataset,
) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument(format!("kappa must be finite and nonnegative, got {kappa}")));
    }
    let gap = if gamma == 0.0 { 0.0 } else { mean_prediction_gap(phi, residuals, data)? };
    Ok((gamma * gap + kappa * l1_induced_norm(&phi.phi_z())) / (1.0 - gamma))
}

/// `max(e_A, e_B) ||Phi Z|| < gamma`.
pub fn small_gain_holds(phi: &SystemResponses, bounds: &ModelErrorBounds, gamma: f64) -> bool {
    bounds.max() * l1_induced_norm(&phi.phi_z()) < gamma
}

/// `||(I + Phi Z dM)^{-1}||`.
pub fn resolvent_norm(phi: &SystemResponses, delta_m: &DMatrix<f64>) -> f64 {
    let dim = phi.layout().y_dim();
    l1_induced_norm(&solve_time_lower(&phi.layout(), &mismatch_loop(phi, delta_m), &DMatrix::identity(dim, dim)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{BatchSystem, Layout, LtiSystem, ModelMismatch};
    use crate::dataset::{generate_dataset, recover_residuals, NoiseSpec};
    use crate::sls::Feedback;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nominal() -> LtiSystem {
        LtiSystem::from_rows(&[vec![0.95, 0.01], vec![0.0, 0.2]], &[vec![0.5], vec![0.02]]).unwrap()
    }

    fn truth() -> LtiSystem {
        LtiSystem::from_rows(&[vec![0.95, -0.02], vec![0.0, 0.2]], &[vec![0.5], vec![-0.01]]).unwrap()
    }

    fn k0() -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[-0.2, -0.1])
    }

    fn setup(horizon: usize, noise_std: f64, sys: &LtiSystem) -> (BatchSystem, TrajectoryDataset, ResidualSet) {
        let batch = BatchSystem::build(&nominal(), horizon).unwrap();
        let x0 = DVector::from_vec(vec![-0.5, -0.5]);
        let data = generate_dataset(sys, horizon, 6, &x0, &k0(), &NoiseSpec::gaussian(noise_std, 3)).unwrap();
        let res = recover_residuals(&data, &batch).unwrap();
        (batch, data, res)
    }

    fn random_phi(batch: &BatchSystem, seed: u64, scale: f64) -> SystemResponses {
        let l = batch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi_u = DMatrix::from_fn(l.input_dim(), l.state_dim(), |r, c| {
            if l.is_causal(r + l.state_dim(), c) {
                rng.gen_range(-scale..scale)
            } else {
                0.0
            }
        });
        SystemResponses::from_input_response(batch, phi_u).unwrap()
    }

    #[test]
    fn kappa_examples() {
        let eta = 0.1;
        let p = ConcentrationParams { c1: std::f64::consts::E * eta, c2: 1.0, a: 2.0, eta };
        assert!((kappa(&p, 1, 4).unwrap() - 1.0).abs() < 1e-15);
        // q = 1/16 with nT = 4
        let p = ConcentrationParams { c1: eta * (1.0f64 / 16.0).exp(), c2: 1.0, a: 2.0, eta };
        assert!((kappa(&p, 1, 4).unwrap() - 0.5).abs() < 1e-12);
        assert!(kappa(&p, 1, 2).is_err());
        let below = ConcentrationParams { c1: 0.05, c2: 1.0, a: 2.0, eta };
        assert_eq!(kappa(&below, 10, 4).unwrap(), 0.0);
        assert!(kappa(&ConcentrationParams { a: 1.0, ..p }, 1, 4).is_err());
    }

    #[test]
    fn kappa_branches_meet_at_one() {
        let eta = 0.05;
        let nt = 20;
        for a in [1.5, 3.0, 10.0] {
            let at = ConcentrationParams { c1: eta * 1.0f64.exp(), c2: 1.0, a, eta };
            let lo = ConcentrationParams { c1: eta * (1.0f64 - 1e-9).exp(), ..at };
            let hi = ConcentrationParams { c1: eta * (1.0f64 + 1e-9).exp(), ..at };
            let k = kappa(&at, 1, nt).unwrap();
            assert!((kappa(&lo, 1, nt).unwrap() - k).abs() < 1e-9);
            assert!((kappa(&hi, 1, nt).unwrap() - k).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_nonincreasing_in_samples() {
        let p = ConcentrationParams { c1: 50.0, c2: 0.3, a: 2.5, eta: 0.05 };
        let mut prev = f64::INFINITY;
        for n in 1..=10_000 {
            let k = kappa(&p, n, 20).unwrap();
            assert!(k <= prev);
            prev = k;
        }
    }

    #[test]
    fn zero_mismatch_gives_zero_mismatch_term() {
        let (batch, data, res) = setup(4, 0.2, &truth());
        let phi = random_phi(&batch, 1, 1.0);
        let dm = ModelMismatch::zero(2, 1).stacked(&batch.layout());
        assert_eq!(mismatch_bound(&phi, &dm, &res, &data).unwrap(), 0.0);
        let r = shift_bound_total(&phi, &dm, &res, &data, 0.0).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(disturbance_coeff(&phi, &dm), l1_induced_norm(&phi.phi_z()));
    }

    #[test]
    fn collection_controller_gives_zero_shift_terms() {
        // data from the nominal model itself without noise, responses of K0
        let (batch, data, res) = setup(5, 0.0, &nominal());
        let k = Feedback::static_gain(batch.layout(), &k0()).unwrap();
        let phi = SystemResponses::from_feedback(&batch, &k).unwrap();
        assert!(mean_prediction_gap(&phi, &res, &data).unwrap() < 1e-12);
        let dm = ModelMismatch::between(&nominal(), &truth()).unwrap().stacked(&batch.layout());
        assert!(mismatch_bound(&phi, &dm, &res, &data).unwrap() < 1e-12);
        assert!(epsilon_small_gain(&phi, 0.5, 0.0, &res, &data).unwrap() < 1e-12);
    }

    #[test]
    fn collection_controller_on_true_system_matches_data() {
        // residuals absorb the mismatch, so Phi^old w_hat reproduces the data
        let (batch, data, res) = setup(5, 0.2, &truth());
        let k = Feedback::static_gain(batch.layout(), &k0()).unwrap();
        let phi = SystemResponses::from_feedback(&batch, &k).unwrap();
        assert!(mean_prediction_gap(&phi, &res, &data).unwrap() < 1e-12);
    }

    #[test]
    fn epsilon_at_zero_gamma_is_kappa_term() {
        let (batch, data, res) = setup(4, 0.2, &truth());
        let phi = random_phi(&batch, 2, 1.0);
        let eps = epsilon_small_gain(&phi, 0.0, 0.3, &res, &data).unwrap();
        assert!((eps - 0.3 * l1_induced_norm(&phi.phi_z())).abs() < 1e-12);
        assert!(epsilon_small_gain(&phi, 1.0, 0.3, &res, &data).is_err());
        assert!(epsilon_small_gain(&phi, -0.1, 0.3, &res, &data).is_err());
    }

    #[test]
    fn epsilon_nondecreasing_in_gamma() {
        let (batch, data, res) = setup(4, 0.2, &truth());
        let phi = random_phi(&batch, 3, 1.0);
        let vals: Vec<f64> =
            (0..20).map(|i| epsilon_small_gain(&phi, i as f64 * 0.05, 0.01, &res, &data).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn small_gain_examples() {
        let batch = BatchSystem::build(&nominal(), 3).unwrap();
        let l = batch.layout();
        let open = SystemResponses::from_input_response(&batch, DMatrix::zeros(l.input_dim(), l.state_dim())).unwrap();
        assert!(small_gain_holds(&open, &ModelErrorBounds::new(0.0, 0.0).unwrap(), 1e-9));
        // ||Phi Z|| = 10 via a scalar chain
        let l1 = Layout::new(1, 1, 1);
        let phi = SystemResponses::new(
            l1,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 10.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(l1_induced_norm(&phi.phi_z()), 1.0);
        let phi = SystemResponses::new(
            Layout::new(1, 1, 2),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 9.0, 1.0]),
            DMatrix::zeros(2, 3),
        )
        .unwrap();
        assert_eq!(l1_induced_norm(&phi.phi_z()), 10.0);
        assert!(!small_gain_holds(&phi, &ModelErrorBounds::new(0.03, 0.03).unwrap(), 0.2));
    }

    #[test]
    fn report_keys() {
        let r = ShiftBoundReport {
            mismatch_term: 1.0,
            disturbance_coeff: 2.0,
            kappa: 0.5,
            total: 2.0,
            gamma: Some(0.3),
            epsilon_surrogate: Some(3.0),
        };
        let v = serde_json::to_value(r).unwrap();
        for key in ["mismatch_term", "disturbance_coeff", "kappa", "total", "gamma", "epsilon_surrogate"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn admissible_mismatch(rng: &mut ChaCha8Rng, e: f64) -> ModelMismatch {
        let mut da = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let mut db = DMatrix::from_fn(2, 1, |_, _| rng.gen_range(-1.0..1.0));
        let sa = rng.gen_range(0.0..e) / l1_induced_norm(&da);
        let sb = rng.gen_range(0.0..e) / l1_induced_norm(&db);
        da *= sa;
        db *= sb;
        ModelMismatch { delta_a: da, delta_b: db }
    }

    proptest::proptest! {
        #[test]
        fn surrogate_dominates_total_under_small_gain(seed in 0u64..200) {
            let (batch, data, res) = setup(4, 0.2, &truth());
            let phi = random_phi(&batch, seed, 0.5);
            let norm = l1_induced_norm(&phi.phi_z());
            let e = 0.03;
            let gamma = (e * norm * 1.05).min(0.95);
            proptest::prop_assume!(e * norm < gamma);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let eps = epsilon_small_gain(&phi, gamma, 0.01, &res, &data).unwrap();
            for _ in 0..5 {
                let dm = admissible_mismatch(&mut rng, e).stacked(&batch.layout());
                let total = shift_bound_total(&phi, &dm, &res, &data, 0.01).unwrap().total;
                proptest::prop_assert!(total <= eps * (1.0 + 1e-9) + 1e-12);
                proptest::prop_assert!(resolvent_norm(&phi, &dm) <= 1.0 / (1.0 - gamma) + 1e-9);
            }
        }

        #[test]
        fn epsilon_monotone_in_gamma(seed in 0u64..100, kap in 0.0f64..1.0, g1 in 0.0f64..0.99, g2 in 0.0f64..0.99) {
            let (batch, data, res) = setup(4, 0.2, &truth());
            let phi = random_phi(&batch, seed, 1.0);
            let lo = epsilon_small_gain(&phi, g1.min(g2), kap, &res, &data).unwrap();
            let hi = epsilon_small_gain(&phi, g1.max(g2), kap, &res, &data).unwrap();
            proptest::prop_assert!(lo <= hi);
        }

        #[test]
        fn kappa_monotone_in_samples(
            c1 in 1.0f64..100.0,
            c2 in 0.01f64..2.0,
            a in 1.0f64..5.0,
            eta in 0.001f64..0.5,
            n in 1usize..10_000,
            nt in 3usize..40,
        ) {
            let p = ConcentrationParams { c1, c2, a, eta };
            proptest::prop_assert!(kappa(&p, n + 1, nt).unwrap() <= kappa(&p, n, nt).unwrap());
        }
    }
}
