//! The `drsls-config-v1` problem file. One file drives every command;
//! `data_collection`, `validation` and `sweep` are only read by the commands
//! that need them.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::batch::{matrix_from_rows, BatchSystem, Layout, LtiSystem, ModelErrorBounds};
use crate::dataset::{NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::synthesis::{
    block_weights, state_upper_bounds, AffineRow, Cost, CvarMode, Method, PwaFunction, SynthesisConfig, WeightedL1Cost,
};

pub const CONFIG_SCHEMA: &str = "drsls-config-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CostSpec {
    WeightedL1 { weights: Vec<f64> },
    Pwa { rows: Vec<AffineRow> },
}

impl CostSpec {
    pub fn build(&self) -> Result<Cost> {
        match self {
            CostSpec::WeightedL1 { weights } => {
                Ok(Cost::WeightedL1(WeightedL1Cost::new(DVector::from_column_slice(weights))?))
            }
            CostSpec::Pwa { rows } => Ok(Cost::Pwa(PwaFunction::new(rows.clone())?)),
        }
    }
}

/// How the training trajectories are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCollection {
    pub true_system: LtiSystem,
    #[serde(rename = "K0")]
    pub k0: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub samples: usize,
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSection {
    pub rollouts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub draws: usize,
    pub norm_range: [f64; 2],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub schema: String,
    pub nominal: LtiSystem,
    pub error_bounds: ModelErrorBounds,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub x0: Vec<f64>,
    pub cost: CostSpec,
    pub constraints: Vec<PwaFunction>,
    pub beta: f64,
    pub kappa: f64,
    pub gamma_grid: Vec<f64>,
    #[serde(default)]
    pub cvar_mode: CvarMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_new: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_collection: Option<DataCollection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.nominal.n(), self.nominal.m(), self.horizon)
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn check(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Schema { expected: CONFIG_SCHEMA.into(), found: self.schema.clone() });
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("`T` must be at least 1".into()));
        }
        let l = self.layout();
        if self.x0.len() != l.n {
            return Err(Error::Dimension(format!("`x0` has length {}, expected {}", self.x0.len(), l.n)));
        }
        if let Some(x) = &self.x0_new {
            if x.len() != l.n {
                return Err(Error::Dimension(format!("`x0_new` has length {}, expected {}", x.len(), l.n)));
            }
        }
        if self.cost()?.dim() != l.y_dim() {
            return Err(Error::Dimension(format!("`cost` must act on {} coordinates", l.y_dim())));
        }
        if let Some((i, g)) = self.constraints.iter().enumerate().find(|(_, g)| g.dim() != l.y_dim()) {
            return Err(Error::Dimension(format!(
                "`constraints[{i}]` acts on {} coordinates, expected {}",
                g.dim(),
                l.y_dim()
            )));
        }
        SynthesisConfig { method: Method::Saa, ..self.synthesis_base() }.validate()?;
        if let Some(g) = self.gamma_grid.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(Error::InvalidArgument(format!("`gamma_grid` value {g} is outside [0, 1)")));
        }
        if let Some(dc) = &self.data_collection {
            if dc.true_system.n() != l.n || dc.true_system.m() != l.m {
                return Err(Error::Dimension("`data_collection.true_system` does not match the nominal shapes".into()));
            }
            let k0 = matrix_from_rows(&dc.k0)?;
            if k0.shape() != (l.m, l.n) {
                return Err(Error::Dimension(format!("`data_collection.K0` must be {}x{}", l.m, l.n)));
            }
            if dc.samples == 0 {
                return Err(Error::InvalidArgument("`data_collection.N` must be at least 1".into()));
            }
            dc.noise.validate()?;
        }
        if let Some(s) = &self.sweep {
            let [lo, hi] = s.norm_range;
            if !(lo >= 0.0 && lo <= hi && hi <= self.error_bounds.e_a.min(self.error_bounds.e_b)) {
                return Err(Error::InvalidArgument("`sweep.norm_range` must lie inside [0, min(e_A, e_B)]".into()));
            }
        }
        Ok(())
    }

    pub fn cost(&self) -> Result<Cost> {
        self.cost.build()
    }

    pub fn x0_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x0)
    }

    pub fn batch(&self) -> Result<BatchSystem> {
        BatchSystem::build(&self.nominal, self.horizon)
    }

    fn synthesis_base(&self) -> SynthesisConfig {
        SynthesisConfig {
            method: Method::Rr,
            beta: self.beta,
            kappa: self.kappa,
            gamma_grid: self.gamma_grid.clone(),
            bounds: self.error_bounds,
            cvar_mode: self.cvar_mode,
            x0_new: self.x0_new.as_ref().map(|x| DVector::from_column_slice(x)),
        }
    }

    pub fn synthesis(&self, method: Method) -> SynthesisConfig {
        SynthesisConfig { method, ..self.synthesis_base() }
    }

    pub fn data_collection(&self) -> Result<&DataCollection> {
        self.data_collection
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("config has no `data_collection` section".into()))
    }

    pub fn k0(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.data_collection()?.k0)
    }

    /// Reference replication instance: a two-state plant whose nominal model
    /// flips the signs of `A_12` and `B_2`.
    pub fn reference() -> Self {
        let nominal =
            LtiSystem::from_rows(&[vec![0.95, 0.01], vec![0.0, 0.2]], &[vec![0.5], vec![0.02]]).expect("valid");
        let true_system =
            LtiSystem::from_rows(&[vec![0.95, -0.02], vec![0.0, 0.2]], &[vec![0.5], vec![-0.01]]).expect("valid");
        let horizon = 10;
        let l = Layout::new(2, 1, horizon);
        let weights = block_weights(&l, &[0.01, 1.0], &[0.01]).expect("valid");
        let constraints = state_upper_bounds(&l, 0, 0.8).expect("valid");
        Self {
            schema: CONFIG_SCHEMA.into(),
            nominal,
            error_bounds: ModelErrorBounds::new(0.03, 0.03).expect("valid"),
            horizon,
            x0: vec![-0.5, -0.5],
            cost: CostSpec::WeightedL1 { weights },
            constraints,
            beta: 0.3,
            kappa: 0.005,
            gamma_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            cvar_mode: CvarMode::PerConstraint,
            x0_new: None,
            data_collection: Some(DataCollection {
                true_system,
                k0: vec![vec![-0.2, -0.1]],
                samples: 20,
                noise: NoiseSpec { kind: NoiseKind::GaussianIid, scale: 0.05f64.sqrt(), seed: 1 },
            }),
            validation: Some(ValidationSection { rollouts: 100, seed: 1001 }),
            sweep: Some(SweepSection { draws: 50, norm_range: [0.0, 0.03], seed: 2024 }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = include_str!("../../../fixtures/reference.json");

    #[test]
    fn shipped_fixture_is_the_reference_instance() {
        let cfg = ProblemConfig::from_json(FIXTURE).unwrap();
        assert_eq!(cfg, ProblemConfig::reference());
        let dc = cfg.data_collection().unwrap();
        assert_eq!(dc.samples, 20);
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.layout().y_dim(), 32);
        assert_eq!(cfg.cost().unwrap().dual_norm_bound(), 1.0);
        assert_eq!(cfg.constraints.len(), 10);
        assert!((dc.noise.scale.powi(2) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn reference_serializes_to_fixture() {
        let text = ProblemConfig::reference().to_json().unwrap();
        assert_eq!(ProblemConfig::from_json(&text).unwrap(), ProblemConfig::reference());
    }

    fn without(key: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(FIXTURE).unwrap();
        v.as_object_mut().unwrap().remove(key);
        v.to_string()
    }

    #[test]
    fn missing_horizon_names_the_field() {
        let err = ProblemConfig::from_json(&without("T")).unwrap_err();
        assert!(err.to_string().contains("`T`"), "{err}");
    }

    #[test]
    fn optional_sections_may_be_absent() {
        let cfg = ProblemConfig::from_json(&without("data_collection")).unwrap();
        assert!(cfg.data_collection().is_err());
        let cfg = ProblemConfig::from_json(&without("cvar_mode")).unwrap();
        assert_eq!(cfg.cvar_mode, CvarMode::PerConstraint);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ProblemConfig::reference();
        cfg.schema = "other".into();
        assert!(matches!(ProblemConfig::from_json(&cfg.to_json().unwrap()), Err(Error::Schema { .. })));
        let mut cfg = ProblemConfig::reference();
        cfg.x0 = vec![1.0];
        assert!(ProblemConfig::from_json(&cfg.to_json().unwrap()).is_err());
        let mut cfg = ProblemConfig::reference();
        cfg.gamma_grid = vec![1.2];
        assert!(ProblemConfig::from_json(&cfg.to_json().unwrap()).is_err());
        let mut cfg = ProblemConfig::reference();
        cfg.sweep.as_mut().unwrap().norm_range = [0.0, 0.5];
        assert!(ProblemConfig::from_json(&cfg.to_json().unwrap()).is_err());
        let mut cfg = ProblemConfig::reference();
        cfg.cost = CostSpec::WeightedL1 { weights: vec![1.0; 3] };
        assert!(ProblemConfig::from_json(&cfg.to_json().unwrap()).is_err());
        assert!(ProblemConfig::from_json("{ not json").is_err());
    }

    #[test]
    fn pwa_cost_variant_parses() {
        let mut v: serde_json::Value = serde_json::from_str(FIXTURE).unwrap();
        let mut a = vec![0.0; 32];
        a[2] = 1.0;
        v["cost"] = serde_json::json!({"type": "pwa", "rows": [{"a": a, "b": 0.0}]});
        let cfg = ProblemConfig::from_json(&v.to_string()).unwrap();
        assert!(matches!(cfg.cost().unwrap(), Cost::Pwa(_)));
    }
}
