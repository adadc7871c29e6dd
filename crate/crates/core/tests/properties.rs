use gp_mpc::config::{ExperimentConfig, RunMode};
use gp_mpc::cost::{CostFeature, CostSpec};
use gp_mpc::dynamics::LinearGaussianDynamics;
use gp_mpc::env::{wrap_angle, EnvKind, Environment};
use gp_mpc::features::FeatureMap;
use gp_mpc::gp::{GpDataset, GpModel, KernelHyper};
use gp_mpc::moments::{GaussState, TransitionModel};
use gp_mpc::planner::{solve, ChanceConstraint, ConstraintMode, Direction, PlanProblem, SolveOptions};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use std::f64::consts::PI;

fn gauss_state(d: usize) -> impl Strategy<Value = GaussState> {
    (
        prop::collection::vec(-1.0..1.0f64, d),
        prop::collection::vec(-0.5..0.5f64, d * d),
        1e-4..0.05f64,
    )
        .prop_map(move |(m, l, jitter)| {
            let l = DMatrix::from_vec(d, d, l);
            let cov = &l * l.transpose() + DMatrix::identity(d, d) * jitter;
            GaussState::new(DVector::from_vec(m), cov).unwrap()
        })
}

/// GP over identity features of a `d`-state, `u`-control system.
fn transition_model(d: usize, u: usize) -> impl Strategy<Value = TransitionModel> {
    let e = d + u;
    (3usize..12)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec(-1.0..1.0f64, n * e),
                prop::collection::vec(-0.3..0.3f64, n * d),
                prop::collection::vec((0.05..1.0f64, prop::collection::vec(0.3..3.0f64, e), 1e-4..0.05f64), d),
            )
                .prop_map(move |(x, y, hs)| {
                    let ds = GpDataset::new(DMatrix::from_row_slice(n, e, &x), DMatrix::from_row_slice(n, d, &y)).unwrap();
                    let hypers = hs.into_iter().map(|(s, l, w)| KernelHyper::new(s, l, w).unwrap()).collect();
                    let gp = GpModel::new(ds, hypers).unwrap();
                    TransitionModel::new(gp, FeatureMap::identity(d), u).unwrap()
                })
        })
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagated_covariance_is_psd(
        model in transition_model(2, 1),
        z in gauss_state(2),
        u in -1.0..1.0f64,
    ) {
        let next = model.propagate(&z, &DVector::from_element(1, u)).unwrap();
        let c = &next.cov;
        prop_assert!((c - c.transpose()).amax() <= 1e-12 * (1.0 + c.amax()));
        prop_assert!(min_eigenvalue(c) >= -1e-10, "{c}");
        prop_assert!(next.mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predictive_variance_is_bounded(
        model in transition_model(2, 1),
        x in prop::collection::vec(-2.0..2.0f64, 3),
    ) {
        let gp = model.gp();
        let (_, var) = gp.predict(&x).unwrap();
        for (d, h) in gp.hypers().iter().enumerate() {
            prop_assert!(var[d] > 0.0);
            prop_assert!(var[d] <= h.signal_variance + h.noise_variance + 1e-9);
        }
    }

    #[test]
    fn saturating_cost_lies_in_unit_interval(z in gauss_state(4), width in 0.1..2.0f64) {
        let spec = CostSpec::saturating(
            CostFeature::CartPoleTip { length: 0.5 },
            DVector::from_vec(vec![0.0, 0.5]),
            width,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let c = spec.terminal(&z).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&c), "{c}");
    }

    #[test]
    fn quadratic_cost_dominates_cost_at_mean(z in gauss_state(3), w in 0.1..5.0f64) {
        let spec = CostSpec::quadratic(
            CostFeature::RawState,
            DVector::from_vec(vec![0.2, -0.1, 0.0]),
            DMatrix::identity(3, 3) * w,
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let expected = spec.terminal(&z).unwrap().value;
        let at_mean = spec.pointwise(z.mean.as_slice(), &[0.0]).unwrap();
        prop_assert!(expected >= at_mean - 1e-12);
    }

    #[test]
    fn chance_slack_is_tighter_than_mean_slack(
        z in gauss_state(2),
        bound in -1.0..1.0f64,
        confidence in 0.5..0.99f64,
        upper in any::<bool>(),
    ) {
        let direction = if upper { Direction::Upper } else { Direction::Lower };
        let chance = ChanceConstraint { state_index: 1, bound, direction, confidence, mode: ConstraintMode::Chance };
        let mean = ChanceConstraint { mode: ConstraintMode::MeanOnly, ..chance };
        let (sc, _) = chance.slack(&z).unwrap();
        let (sm, _) = mean.slack(&z).unwrap();
        prop_assert!(sc <= sm + 1e-15);
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!((-PI..PI).contains(&w));
        prop_assert!((w.sin() - a.sin()).abs() < 1e-9 && (w.cos() - a.cos()).abs() < 1e-9);
    }

    #[test]
    fn clipping_respects_actuation_limits(u in prop::collection::vec(-50.0..50.0f64, 2), dp in any::<bool>()) {
        let env = if dp {
            Environment::DoublePendulum(Default::default())
        } else {
            Environment::CartPole(Default::default())
        };
        let u = &u[..env.control_dim()];
        let c = env.clip(u);
        for (v, (lo, hi)) in c.iter().zip(env.control_bounds()) {
            prop_assert!(lo <= *v && *v <= hi);
        }
        prop_assert_eq!(env.clip(&c), c);
    }

    #[test]
    fn config_round_trips(
        seeds in prop::collection::vec(0u64..1000, 1..5),
        trials in 1usize..20,
        horizon in prop::option::of(1usize..40),
        width in prop::option::of(0.05..2.0f64),
        mode in prop::sample::select(vec![RunMode::GpMpcVar, RunMode::GpMpcMean, RunMode::ZeroVariance, RunMode::Random]),
        dp in any::<bool>(),
        constrained in any::<bool>(),
    ) {
        let env = if dp { EnvKind::DoublePendulum } else { EnvKind::CartPole };
        let mut cfg = ExperimentConfig::new(env, mode);
        cfg.seeds = seeds;
        cfg.trials = trials;
        cfg.horizon = horizon;
        cfg.cost.width = width;
        cfg.constrained = constrained;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back.to_toml().unwrap(), text);
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn solutions_respect_control_bounds(target in -20.0..20.0f64, bound in 0.1..3.0f64, h in 1usize..6) {
        let dynamics = LinearGaussianDynamics::integrator(1);
        let problem = PlanProblem {
            initial: GaussState::point(DVector::from_vec(vec![0.0])),
            horizon: h,
            control_bounds: vec![(-bound, bound)],
            state_constraints: vec![],
            cost: CostSpec::quadratic(
                CostFeature::RawState,
                DVector::from_vec(vec![target]),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1) * 0.1,
            )
            .unwrap(),
            model: &dynamics,
            warm_start: None,
        };
        let sol = solve(&problem, &SolveOptions::default()).unwrap();
        prop_assert!(sol.controls.iter().all(|u| u.abs() <= bound));
        prop_assert_eq!(sol.trajectory.len(), h + 1);
    }
}
