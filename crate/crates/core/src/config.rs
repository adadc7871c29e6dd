//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{CostKind, CostSpec};
use crate::env::{CartPoleParams, DoublePendulumParams, EnvConstraint, EnvKind, Environment};
use crate::error::{Error, Result};
use crate::gp::TrainOptions;
use crate::planner::SolveOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full propagation with chance constraints.
    GpMpcVar,
    /// Full propagation with constraints on the mean only.
    GpMpcMean,
    /// Covariances discarded during propagation, mean constraints.
    ZeroVariance,
    /// Uniform random controls, no planning.
    Random,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::GpMpcVar => "gp_mpc_var",
            RunMode::GpMpcMean => "gp_mpc_mean",
            RunMode::ZeroVariance => "zero_variance",
            RunMode::Random => "random",
        }
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp_mpc_var" => Ok(RunMode::GpMpcVar),
            "gp_mpc_mean" => Ok(RunMode::GpMpcMean),
            "zero_variance" => Ok(RunMode::ZeroVariance),
            "random" => Ok(RunMode::Random),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvKind::CartPole),
            "double_pendulum" => Ok(EnvKind::DoublePendulum),
            other => Err(Error::Config(format!(
                "env: unknown environment '{other}' (expected cartpole or double_pendulum)"
            ))),
        }
    }
}

/// Which dynamics the planner sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Learned GP transition model.
    #[default]
    Gp,
    /// The simulator itself; an oracle ablation.
    TrueDynamics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub kind: CostKind,
    /// Tip-distance scale σ_c in metres; the weight is `I/σ_c²`.
    /// Unset uses the environment default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    /// Diagonal of the control penalty.
    pub control_penalty: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            kind: CostKind::Saturating,
            width: None,
            control_penalty: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

fn default_episode() -> f64 {
    3.0
}

fn default_success_steps() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    #[serde(default)]
    pub constrained: bool,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    /// Learning trials after the shared random trial.
    pub trials: usize,
    /// Planning horizon in steps; unset uses the environment default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Overrides the environment's step length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_episode")]
    pub episode_seconds: f64,
    /// Consecutive in-radius steps that count as success.
    #[serde(default = "default_success_steps")]
    pub success_steps: usize,
    #[serde(default)]
    pub model: ModelKind,
    /// Overrides the environment's default constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<EnvConstraint>,
    /// Chance-constraint confidence for `gp_mpc_var`.
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Worker threads for seeds; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub training: TrainOptions,
    #[serde(default)]
    pub cartpole: CartPoleParams,
    #[serde(default)]
    pub double_pendulum: DoublePendulumParams,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_confidence() -> f64 {
    0.95
}

impl ExperimentConfig {
    /// Defaults for one benchmark.
    pub fn new(env: EnvKind, mode: RunMode) -> Self {
        ExperimentConfig {
            env,
            constrained: false,
            mode,
            seeds: (0..10).collect(),
            trials: match env {
                EnvKind::CartPole => 5,
                EnvKind::DoublePendulum => 10,
            },
            horizon: None,
            dt: None,
            episode_seconds: default_episode(),
            success_steps: default_success_steps(),
            model: ModelKind::Gp,
            constraint: None,
            confidence: default_confidence(),
            workers: 0,
            cost: CostConfig::default(),
            solver: SolveOptions::default(),
            training: TrainOptions::default(),
            cartpole: CartPoleParams::default(),
            double_pendulum: DoublePendulumParams::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("{name}: {msg}")));
        if self.seeds.is_empty() {
            return field("seeds", "at least one seed is required");
        }
        if self.trials == 0 {
            return field("trials", "must be at least 1");
        }
        if self.horizon == Some(0) {
            return field("horizon", "must be at least 1");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return field("dt", "must be positive");
            }
        }
        if !(self.episode_seconds > 0.0) || !self.episode_seconds.is_finite() {
            return field("episode_seconds", "must be positive");
        }
        if self.success_steps == 0 {
            return field("success_steps", "must be at least 1");
        }
        if !(0.5..1.0).contains(&self.confidence) {
            return field("confidence", "must lie in [0.5, 1)");
        }
        if self.cost.width.is_some_and(|w| !(w > 0.0) || !w.is_finite()) {
            return field("cost.width", "must be positive");
        }
        if !(self.cost.control_penalty >= 0.0) || !self.cost.control_penalty.is_finite() {
            return field("cost.control_penalty", "must be non-negative");
        }
        if self.solver.max_iterations == 0 {
            return field("solver.max_iterations", "must be at least 1");
        }
        if let Some(c) = &self.constraint {
            c.validate().map_err(|e| Error::Config(format!("constraint: {e}")))?;
        }
        self.environment()
            .validate()
            .map_err(|e| Error::Config(format!("{}: {e}", self.env_section())))?;
        Ok(())
    }

    fn env_section(&self) -> &'static str {
        match self.env {
            EnvKind::CartPole => "cartpole",
            EnvKind::DoublePendulum => "double_pendulum",
        }
    }

    pub fn environment(&self) -> Environment {
        let mut env = match self.env {
            EnvKind::CartPole => Environment::CartPole(self.cartpole.clone()),
            EnvKind::DoublePendulum => Environment::DoublePendulum(self.double_pendulum.clone()),
        };
        if let Some(dt) = self.dt {
            env.set_dt(dt);
        }
        env
    }

    /// Active state constraint, if the run is constrained.
    pub fn state_constraint(&self) -> Option<EnvConstraint> {
        self.constrained
            .then(|| self.constraint.unwrap_or_else(|| self.environment().default_constraint()))
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(match self.env {
            EnvKind::CartPole => 10,
            EnvKind::DoublePendulum => 25,
        })
    }

    pub fn cost_width(&self) -> f64 {
        self.cost.width.unwrap_or(match self.env {
            EnvKind::CartPole => 0.5,
            EnvKind::DoublePendulum => 1.0,
        })
    }

    pub fn episode_steps(&self) -> usize {
        (self.episode_seconds / self.environment().dt()).round().max(1.0) as usize
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        let env = self.environment();
        let u = env.control_dim();
        let r = DMatrix::identity(u, u) * self.cost.control_penalty;
        let target: DVector<f64> = env.target_tip();
        match self.cost.kind {
            CostKind::Saturating => CostSpec::saturating(env.tip_feature(), target, self.cost_width(), r),
            CostKind::Quadratic => {
                let w = DMatrix::identity(2, 2) / self.cost_width().powi(2);
                CostSpec::quadratic(env.tip_feature(), target, w, r)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
env = "cartpole"
mode = "gp_mpc_var"
seeds = [1, 2]
trials = 3
constrained = true

[cost]
kind = "quadratic"
width = 0.5

[solver]
max_iterations = 40

[cartpole]
friction = 0.2
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.solver.max_iterations, 40);
        assert_eq!(cfg.cartpole.friction, 0.2);
        assert_eq!(cfg.cartpole.pendulum_length, 0.5);
        assert_eq!(cfg.episode_steps(), 30);
        assert_eq!(cfg.state_constraint(), Some(EnvConstraint::cart_wall()));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn defaults_round_trip() {
        for env in [EnvKind::CartPole, EnvKind::DoublePendulum] {
            let mut cfg = ExperimentConfig::new(env, RunMode::ZeroVariance);
            cfg.constraint = Some(EnvConstraint::arm_range());
            cfg.dt = Some(0.02);
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::from_toml(&format!("{EXAMPLE}\nbogus = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml(&EXAMPLE.replace("trials = 3", "trials = 0")).unwrap_err();
        assert!(err.to_string().contains("trials"), "{err}");
        let err = ExperimentConfig::from_toml(&EXAMPLE.replace("friction = 0.2", "friction = -1.0")).unwrap_err();
        assert!(err.to_string().contains("cartpole"), "{err}");
        assert!(ExperimentConfig::from_toml(&EXAMPLE.replace("gp_mpc_var", "pilco")).is_err());
        assert!("pilco".parse::<RunMode>().is_err());
    }

    #[test]
    fn cost_spec_targets_upright_tip() {
        let cfg = ExperimentConfig::new(EnvKind::DoublePendulum, RunMode::GpMpcVar);
        let c = cfg.cost_spec().unwrap();
        assert_eq!(c.target.as_slice(), &[0.0, 2.0]);
        assert_eq!(cfg.episode_steps(), 60);
        assert_eq!((cfg.horizon(), cfg.cost_width()), (25, 1.0));
        let mut cp = ExperimentConfig::new(EnvKind::CartPole, RunMode::GpMpcVar);
        assert_eq!((cp.horizon(), cp.cost_width()), (10, 0.5));
        cp.horizon = Some(7);
        cp.cost.width = Some(0.3);
        assert_eq!((cp.horizon(), cp.cost_width()), (7, 0.3));
    }
}
