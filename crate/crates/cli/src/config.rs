//! Experiment configuration files.

use std::path::{Path, PathBuf};

use moffo::problems::{ProblemHierarchy, ProblemSpec};
use moffo::SolverConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub baselines: Vec<Baseline>,
    #[serde(default)]
    pub runs: RunsConfig,
}

/// Reference methods run next to the multilevel solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    /// Plain gradient steps `x ← x − lr·g`.
    Sgd { lr: f64 },
    /// Stand-alone AdaGrad loop `x ← x − g/√(ς + Σg²)`.
    AdagradOracle,
    /// The configured solver restricted to the finest level.
    SingleLevelVariant,
}

impl Baseline {
    pub fn label(&self) -> String {
        match self {
            Baseline::Sgd { lr } => format!("sgd_lr{lr}"),
            Baseline::AdagradOracle => "adagrad_oracle".to_string(),
            Baseline::SingleLevelVariant => "single_level".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceGranularity {
    All,
    Top,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunsConfig {
    pub repetitions: usize,
    /// One seed per repetition; defaults to `0..repetitions`.
    pub seeds: Option<Vec<u64>>,
    pub out_dir: PathBuf,
    pub trace: TraceGranularity,
    /// Stop once the exact top-level gradient norm falls below this fraction
    /// of its initial value. Evaluated outside the solver and not charged.
    pub exact_stop_relative: Option<f64>,
    /// `ϑ` for the divergent-weight thresholds.
    pub vartheta: Option<f64>,
}

impl Default for RunsConfig {
    fn default() -> Self {
        Self {
            repetitions: 1,
            seeds: None,
            out_dir: PathBuf::from("moffo-out"),
            trace: TraceGranularity::All,
            exact_stop_relative: None,
            vartheta: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.runs.seeds {
            Some(s) => s.clone(),
            None => (0..self.runs.repetitions as u64).collect(),
        }
    }

    /// Replaces the seed list by `base, base+1, …`.
    pub fn override_seed(&mut self, base: u64) {
        self.runs.seeds = Some((0..self.runs.repetitions as u64).map(|k| base + k).collect());
    }

    /// Checks everything that can be checked without running and returns the
    /// problem built with the first seed.
    pub fn validate(&mut self) -> Result<ProblemHierarchy, CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.runs.repetitions == 0 {
            return bad("runs.repetitions: must be positive".to_string());
        }
        if let Some(seeds) = &self.runs.seeds {
            if seeds.len() != self.runs.repetitions {
                return bad(format!(
                    "runs.seeds: {} seeds for {} repetitions",
                    seeds.len(),
                    self.runs.repetitions
                ));
            }
        }
        if let Some(t) = self.runs.exact_stop_relative {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("runs.exact_stop_relative: must lie in (0,1), got {t}"));
            }
        }
        for b in &self.baselines {
            if let Baseline::Sgd { lr } = b {
                if !(*lr > 0.0 && lr.is_finite()) {
                    return bad(format!("baselines.sgd.lr: must be positive, got {lr}"));
                }
            }
        }
        let problem = self.problem.build(self.seeds()[0]).map_err(|e| match e {
            moffo::MoffoError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Config(format!("problem: {other}")),
        })?;
        self.solver = self.solver.clone().with_depth(problem.depth());
        self.solver
            .validate(problem.depth())
            .map_err(|e| CliError::Config(format!("solver: {e}")))?;
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"problem": {"name": "quadratic_2d"}}"#).unwrap();
        assert_eq!(c.runs.repetitions, 1);
        assert_eq!(c.solver, SolverConfig::default());
        assert!(c.baselines.is_empty());
        assert_eq!(c.seeds(), vec![0]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = ExperimentConfig::from_json(r#"{"problem": {"name": "x", "size": 3}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("problem") && err.contains("size"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"problem": {"name": "x"}, "extra": 1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn baselines_parse_by_kind() {
        let c = ExperimentConfig::from_json(
            r#"{"problem": {"name": "quadratic_2d"},
                "baselines": [{"kind": "sgd", "lr": 0.1}, {"kind": "adagrad_oracle"},
                              {"kind": "single_level_variant"}]}"#,
        )
        .unwrap();
        assert_eq!(
            c.baselines,
            vec![Baseline::Sgd { lr: 0.1 }, Baseline::AdagradOracle, Baseline::SingleLevelVariant]
        );
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = ExperimentConfig::from_json(r#"{"problem": {"name": "nope"}}"#).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("problem.name"));
        let mut c = ExperimentConfig::from_json(
            r#"{"problem": {"name": "quadratic_2d"}, "runs": {"repetitions": 2, "seeds": [1]}}"#,
        )
        .unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("runs.seeds"));
        let mut c = ExperimentConfig::from_json(
            r#"{"problem": {"name": "quadratic_2d"}, "solver": {"kappa_r": 2.0}}"#,
        )
        .unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("solver"));
    }

    #[test]
    fn seed_override_is_consecutive() {
        let mut c = ExperimentConfig::from_json(
            r#"{"problem": {"name": "quadratic_2d"}, "runs": {"repetitions": 3}}"#,
        )
        .unwrap();
        c.override_seed(7);
        assert_eq!(c.seeds(), vec![7, 8, 9]);
    }
}
