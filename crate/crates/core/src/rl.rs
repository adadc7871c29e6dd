//! Episodic learning: a shared random trial, then receding-horizon control
//! on a GP model that absorbs every observed transition.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelKind, RunMode};
use crate::cost::CostSpec;
use crate::dynamics::MomentDynamics;
use crate::env::{EnvConstraint, Environment, SimulatorDynamics};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::gp::{train_hyperparameters, GpDataset, GpModel, KernelHyper, TrainOptions};
use crate::io::write_atomic;
use crate::moments::{GaussState, PropagationMode, TransitionModel};
use crate::planner::{solve, ChanceConstraint, ConstraintMode, Direction, PlanProblem, SolveOptions};

/// Planner configuration implied by a run mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannerSetup {
    pub plan: bool,
    pub propagation: PropagationMode,
    pub constraint_mode: ConstraintMode,
    pub confidence: f64,
}

pub fn mode_select(mode: RunMode) -> PlannerSetup {
    let (plan, propagation, constraint_mode) = match mode {
        RunMode::GpMpcVar => (true, PropagationMode::Full, ConstraintMode::Chance),
        RunMode::GpMpcMean => (true, PropagationMode::Full, ConstraintMode::MeanOnly),
        RunMode::ZeroVariance => (true, PropagationMode::ZeroVariance, ConstraintMode::MeanOnly),
        RunMode::Random => (false, PropagationMode::Full, ConstraintMode::MeanOnly),
    };
    PlannerSetup {
        plan,
        propagation,
        constraint_mode,
        confidence: 0.95,
    }
}

/// A dynamics model the controller plans with and feeds observations to.
pub trait Learner {
    fn dynamics(&self) -> &dyn MomentDynamics;
    fn observe(&mut self, x: &[f64], u: &[f64], x_next: &[f64]) -> Result<()>;
}

impl Learner for TransitionModel {
    fn dynamics(&self) -> &dyn MomentDynamics {
        self
    }

    fn observe(&mut self, x: &[f64], u: &[f64], x_next: &[f64]) -> Result<()> {
        *self = self.add_transition(x, u, x_next)?;
        Ok(())
    }
}

impl Learner for SimulatorDynamics {
    fn dynamics(&self) -> &dyn MomentDynamics {
        self
    }

    fn observe(&mut self, _: &[f64], _: &[f64], _: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Everything a single trial needs.
#[derive(Clone, Debug)]
pub struct TrialSettings {
    pub env: Environment,
    pub constraint: Option<EnvConstraint>,
    pub horizon: usize,
    pub steps: usize,
    pub success_steps: usize,
    pub cost: CostSpec,
    pub solver: SolveOptions,
    pub setup: PlannerSetup,
}

impl TrialSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut setup = mode_select(cfg.mode);
        setup.confidence = cfg.confidence;
        Ok(TrialSettings {
            env: cfg.environment(),
            constraint: cfg.state_constraint(),
            horizon: cfg.horizon(),
            steps: cfg.episode_steps(),
            success_steps: cfg.success_steps,
            cost: cfg.cost_spec()?,
            solver: cfg.solver.clone(),
            setup,
        })
    }

    /// Per-step planner constraints equivalent to the environment constraint.
    pub fn planner_constraints(&self) -> Vec<ChanceConstraint> {
        let make = |state_index, bound, direction| ChanceConstraint {
            state_index,
            bound,
            direction,
            confidence: self.setup.confidence,
            mode: self.setup.constraint_mode,
        };
        match self.constraint {
            None => vec![],
            Some(EnvConstraint::CartWall { wall_position }) => vec![make(0, wall_position, Direction::Lower)],
            // the simulated angle is continuous, so the range is a pair of bounds
            Some(EnvConstraint::AngleRange { lower, upper }) => {
                vec![make(0, lower, Direction::Lower), make(0, upper, Direction::Upper)]
            }
        }
    }
}

/// One episode on the true system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub trial_index: usize,
    /// Controls drawn uniformly instead of planned.
    pub random: bool,
    /// `x_0, …, x_T`; one more row than `controls`.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub success: bool,
    /// Step at which the required run of in-radius states was completed.
    pub first_success_step: Option<usize>,
    pub violated: bool,
    /// Index into `states` of the violating state, which is the last one.
    pub violation_step: Option<usize>,
    pub cumulative_cost: f64,
    pub min_tip_distance: f64,
    pub solver_failures: usize,
    /// Excluded from serialized output so logs are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

fn shift(plan: &DMatrix<f64>) -> DMatrix<f64> {
    let h = plan.nrows();
    DMatrix::from_fn(h, plan.ncols(), |t, k| plan[((t + 1).min(h - 1), k)])
}

fn uniform_control<R: Rng + ?Sized>(env: &Environment, rng: &mut R) -> Vec<f64> {
    env.control_bounds()
        .into_iter()
        .map(|(lo, hi)| rng.random_range(lo..hi))
        .collect()
}

/// Runs one trial, feeding every transition to `learner`.
pub fn run_trial<R: Rng + ?Sized>(
    settings: &TrialSettings,
    learner: &mut dyn Learner,
    random: bool,
    seed: u64,
    trial_index: usize,
    rng: &mut R,
) -> Result<TrialRecord> {
    let start = Instant::now();
    let env = &settings.env;
    let nu = env.control_dim();
    let constraints = settings.planner_constraints();
    let mut x = env.sample_initial(rng);
    let mut rec = TrialRecord {
        seed,
        trial_index,
        random,
        states: vec![x.clone()],
        controls: vec![],
        success: false,
        first_success_step: None,
        violated: false,
        violation_step: None,
        cumulative_cost: 0.0,
        min_tip_distance: env.tip_distance(&x)?,
        solver_failures: 0,
        wall_time: 0.0,
    };
    let mut plan: Option<DMatrix<f64>> = None;
    let mut run = 0;
    for t in 0..settings.steps {
        let u = if random || !settings.setup.plan {
            uniform_control(env, rng)
        } else {
            let problem = PlanProblem {
                initial: GaussState::point(DVector::from_column_slice(&x)),
                horizon: settings.horizon,
                control_bounds: env.control_bounds(),
                state_constraints: constraints.clone(),
                cost: settings.cost.clone(),
                model: learner.dynamics(),
                warm_start: plan.as_ref().map(shift),
            };
            match solve(&problem, &settings.solver) {
                Ok(sol) => {
                    log::debug!(
                        "seed {seed} trial {trial_index} step {t}: {:?} after {} iterations, J = {:.4}",
                        sol.status,
                        sol.iterations,
                        sol.cost
                    );
                    let u = sol.controls.row(0).iter().copied().collect();
                    plan = Some(sol.controls);
                    u
                }
                Err(e) => {
                    warn!("seed {seed} trial {trial_index} step {t}: planner failed ({e}), reusing previous plan");
                    rec.solver_failures += 1;
                    let next = plan.as_ref().map(shift).unwrap_or_else(|| DMatrix::zeros(settings.horizon, nu));
                    let u = next.row(0).iter().copied().collect();
                    plan = Some(next);
                    u
                }
            }
        };
        let u = env.clip(&u);
        let x_next = env.step(&x, &u, rng)?;
        rec.cumulative_cost += settings.cost.pointwise(&x, &u)?;
        learner.observe(&x, &u, &x_next)?;
        rec.states.push(x_next.clone());
        rec.controls.push(u);
        let d = env.tip_distance(&x_next)?;
        rec.min_tip_distance = rec.min_tip_distance.min(d);
        if let Some(c) = &settings.constraint {
            if !c.check(&x_next) {
                rec.violated = true;
                rec.violation_step = Some(t + 1);
                break;
            }
        }
        if d < env.success_radius() {
            run += 1;
            if run >= settings.success_steps && !rec.success {
                rec.success = true;
                rec.first_success_step = Some(t + 1);
            }
        } else {
            run = 0;
        }
        x = x_next;
    }
    rec.wall_time = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Independent random stream `k` of a seed.
pub fn seed_stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

const TRAIN_STREAM: u64 = 1;
const TRIAL_STREAM: u64 = 1000;

fn feature_map(env: &Environment) -> FeatureMap {
    FeatureMap::with_angles(env.state_dim(), &env.angle_indices())
}

/// Fits hyperparameters on `dataset`, starting from `init` or the data
/// heuristic.
fn fit(dataset: GpDataset, init: Option<&[KernelHyper]>, opts: &TrainOptions, rng: &mut ChaCha8Rng) -> Result<GpModel> {
    let init: Vec<KernelHyper> = match init {
        Some(h) => h.to_vec(),
        None => (0..dataset.output_dim()).map(|d| KernelHyper::heuristic(&dataset, d)).collect(),
    };
    let trained = train_hyperparameters(&dataset, &init, opts, rng)?;
    if trained.diverged {
        warn!("hyperparameter training diverged on some output; using the best finite iterate");
    }
    GpModel::new(dataset, trained.hypers)
}

/// Initial model from the transitions of a trial.
pub fn model_from_trial(env: &Environment, rec: &TrialRecord, propagation: PropagationMode, opts: &TrainOptions, rng: &mut ChaCha8Rng) -> Result<TransitionModel> {
    let features = feature_map(env);
    let nu = env.control_dim();
    let mut ds = GpDataset::empty(features.dim() + nu, env.state_dim());
    for (t, u) in rec.controls.iter().enumerate() {
        let (x, xn) = (&rec.states[t], &rec.states[t + 1]);
        let mut input = features.apply(x);
        input.extend_from_slice(u);
        let target: Vec<f64> = xn.iter().zip(x).map(|(a, b)| a - b).collect();
        ds.push(&input, &target)?;
    }
    if ds.is_empty() {
        return Err(Error::InvalidData("random trial produced no transitions".into()));
    }
    let gp = fit(ds, None, opts, rng)?;
    Ok(TransitionModel::new(gp, features, nu)?.with_mode(propagation))
}

/// All trials of one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub trials: Vec<TrialRecord>,
    pub error: Option<String>,
}

impl SeedResult {
    /// Learning trials (index ≥ 1).
    pub fn learning_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|r| r.trial_index >= 1)
    }

    /// Whether some learning trial up to `k` succeeded.
    pub fn solved_by(&self, k: usize) -> bool {
        self.learning_trials().any(|r| r.trial_index <= k && r.success)
    }

    /// First learning trial that succeeded.
    pub fn first_success_trial(&self) -> Option<usize> {
        self.learning_trials().find(|r| r.success).map(|r| r.trial_index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub trial_index: usize,
    /// Fraction of seeds that succeeded in some trial `≤ trial_index`.
    pub success_rate: f64,
    pub mean_cost: f64,
    /// Seeds whose trial `trial_index` violated the constraint.
    pub violations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mode: RunMode,
    pub seeds: Vec<SeedResult>,
    pub curve: Vec<CurvePoint>,
    /// Violated learning trials.
    pub violated_trials: usize,
    /// Learning trials run.
    pub total_trials: usize,
}

enum SeedModel {
    Gp(TransitionModel),
    Oracle(SimulatorDynamics),
}

impl Learner for SeedModel {
    fn dynamics(&self) -> &dyn MomentDynamics {
        match self {
            SeedModel::Gp(m) => m,
            SeedModel::Oracle(m) => m,
        }
    }

    fn observe(&mut self, x: &[f64], u: &[f64], x_next: &[f64]) -> Result<()> {
        match self {
            SeedModel::Gp(m) => m.observe(x, u, x_next),
            SeedModel::Oracle(m) => m.observe(x, u, x_next),
        }
    }
}

fn run_seed_inner(cfg: &ExperimentConfig, settings: &TrialSettings, seed: u64, out: &mut Vec<TrialRecord>) -> Result<()> {
    let env = &settings.env;
    let oracle = || SimulatorDynamics { env: env.clone() };
    if cfg.mode == RunMode::Random {
        for k in 1..=cfg.trials {
            let mut rng = seed_stream(seed, TRIAL_STREAM + k as u64);
            out.push(run_trial(settings, &mut oracle(), true, seed, k, &mut rng)?);
        }
        return Ok(());
    }
    // the first trial depends on the seed only, so every mode shares it
    let mut model = match cfg.model {
        ModelKind::TrueDynamics => SeedModel::Oracle(oracle()),
        ModelKind::Gp => {
            let mut rng = seed_stream(seed, TRIAL_STREAM);
            let rec = run_trial(settings, &mut oracle(), true, seed, 0, &mut rng)?;
            let mut train_rng = seed_stream(seed, TRAIN_STREAM);
            let m = model_from_trial(env, &rec, settings.setup.propagation, &cfg.training, &mut train_rng)?;
            out.push(rec);
            SeedModel::Gp(m)
        }
    };
    for k in 1..=cfg.trials {
        let mut rng = seed_stream(seed, TRIAL_STREAM + k as u64);
        let rec = run_trial(settings, &mut model, false, seed, k, &mut rng)?;
        info!(
            "seed {seed} trial {k}: success={} violated={} min distance {:.3} ({:.1}s)",
            rec.success, rec.violated, rec.min_tip_distance, rec.wall_time
        );
        out.push(rec);
        if k < cfg.trials {
            if let SeedModel::Gp(m) = &model {
                let mut rng = seed_stream(seed, TRAIN_STREAM + k as u64);
                let gp = fit(m.gp().dataset().clone(), Some(m.gp().hypers()), &cfg.training, &mut rng)?;
                model = SeedModel::Gp(m.with_gp(gp)?);
            }
        }
    }
    Ok(())
}

pub fn run_seed(cfg: &ExperimentConfig, settings: &TrialSettings, seed: u64) -> SeedResult {
    let mut trials = Vec::new();
    let error = run_seed_inner(cfg, settings, seed, &mut trials).err().map(|e| {
        warn!("seed {seed} failed: {e}");
        e.to_string()
    });
    SeedResult { seed, trials, error }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let settings = TrialSettings::from_config(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    let seeds: Vec<SeedResult> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, &settings, s)).collect());
    Ok(summarize(cfg.mode, cfg.trials, seeds))
}

pub fn summarize(mode: RunMode, trials: usize, seeds: Vec<SeedResult>) -> ExperimentResult {
    let n = seeds.len().max(1) as f64;
    let curve = (1..=trials)
        .map(|k| {
            let at_k: Vec<&TrialRecord> = seeds
                .iter()
                .filter_map(|s| s.trials.iter().find(|r| r.trial_index == k))
                .collect();
            let mean_cost = if at_k.is_empty() {
                f64::NAN
            } else {
                at_k.iter().map(|r| r.cumulative_cost).sum::<f64>() / at_k.len() as f64
            };
            CurvePoint {
                trial_index: k,
                success_rate: seeds.iter().filter(|s| s.solved_by(k)).count() as f64 / n,
                mean_cost,
                violations: at_k.iter().filter(|r| r.violated).count(),
            }
        })
        .collect();
    let learning: Vec<&TrialRecord> = seeds.iter().flat_map(|s| s.learning_trials()).collect();
    ExperimentResult {
        mode,
        violated_trials: learning.iter().filter(|r| r.violated).count(),
        total_trials: learning.len(),
        seeds,
        curve,
    }
}

impl ExperimentResult {
    /// One JSON object per trial, in seed order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for seed in &self.seeds {
            for r in &seed.trials {
                s.push_str(&serde_json::to_string(r)?);
                s.push('\n');
            }
        }
        Ok(s)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        for p in &self.curve {
            w.serialize(p).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    /// Violated learning trials per hundred, e.g. `"3/100"`.
    pub fn violations_per_hundred(&self) -> String {
        if self.total_trials == 100 {
            format!("{}/100", self.violated_trials)
        } else {
            let rate = 100.0 * self.violated_trials as f64 / self.total_trials.max(1) as f64;
            format!("{}/{} ({rate:.1}/100)", self.violated_trials, self.total_trials)
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        let _ = writeln!(s, "seeds: {}", self.seeds.len());
        let _ = writeln!(s, "{:>6}  {:>12}  {:>10}  {:>10}", "trial", "success_rate", "mean_cost", "violations");
        for p in &self.curve {
            let _ = writeln!(
                s,
                "{:>6}  {:>12.2}  {:>10.3}  {:>10}",
                p.trial_index, p.success_rate, p.mean_cost, p.violations
            );
        }
        let _ = writeln!(s, "state constraint violations: {}", self.violations_per_hundred());
        for seed in &self.seeds {
            if let Some(e) = &seed.error {
                let _ = writeln!(s, "seed {} failed: {e}", seed.seed);
            }
        }
        s
    }

    /// Writes `trials.jsonl`, `curve.csv` and `summary.txt` atomically.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        let jsonl = self.to_jsonl()?;
        let csv = self.to_csv()?;
        let summary = self.summary();
        write_atomic(&dir.join("trials.jsonl"), jsonl.as_bytes())?;
        write_atomic(&dir.join("curve.csv"), csv.as_bytes())?;
        write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
