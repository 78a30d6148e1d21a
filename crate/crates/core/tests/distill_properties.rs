use proptest::prelude::*;
use trajdistill::denoiser::fixtures::Wobbly;
use trajdistill::distill::{ge3d_gradient, ism_gradient, uniform_weights, ResidualScaling};
use trajdistill::toy::{GaussianOracle, OracleDenoiser, ToyDataset};
use trajdistill::{
    invert_ddim, run_distillation, Condition, CountingDenoiser, DBCSchedule, DistillConfig,
    GuidanceConfig, Latent, Method, NoiseSchedule, TimestepTrajectory, TrajectoryPair,
};

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn oracle() -> OracleDenoiser {
    OracleDenoiser::new(
        GaussianOracle::from_dataset(&ToyDataset::two_mode_benchmark()).unwrap(),
        sched(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_unit_scaling_turns_one_step_into_ism(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        t in 1usize..=1000,
        lambda in 0.0f64..20.0,
        phase in 0.0f64..6.3,
    ) {
        let s = sched();
        let den = Wobbly { dim: 2, phase };
        let g = GuidanceConfig::new(lambda).unwrap();
        let traj = TimestepTrajectory::new(vec![0, t]).unwrap();
        let rep = ge3d_gradient(&x, &traj, &den, Condition::Class(1), g, &[1.0], ResidualScaling::NoiseUnits, &s).unwrap();
        let ism = ism_gradient(&x, 0, t, &den, Condition::Class(1), g, &s).unwrap();
        for (a, b) in rep.total.iter().zip(&ism) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn gradient_is_weighted_residual_sum(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        n in 1usize..8,
        gap in 10usize..100,
        k in 0usize..3000,
    ) {
        let s = sched();
        let traj = TimestepTrajectory::uniform(n, gap).unwrap();
        let w = DBCSchedule::with_default_sigma(3000, n).unwrap().weights(k).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let rep = ge3d_gradient(&x, &traj, &oracle(), Condition::Class(0), GuidanceConfig::new(7.5).unwrap(), &w, ResidualScaling::None, &s).unwrap();
        prop_assert_eq!(rep.calls, 3 * n as u64);
        for d in 0..2 {
            let manual: f64 = rep.residuals.iter().zip(&w).map(|(r, wi)| wi * r[d]).sum();
            prop_assert!((manual - rep.total[d]).abs() <= 1e-12 * (1.0 + manual.abs()));
        }
    }

    #[test]
    fn anchor_is_shared_bit_exactly(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        n in 1usize..10,
        gap in 1usize..100,
        lambda in 0.0f64..50.0,
    ) {
        let s = sched();
        let traj = TimestepTrajectory::uniform(n, gap).unwrap();
        let den = CountingDenoiser::new(oracle());
        let pair = TrajectoryPair::build(&Latent::clean(x.clone()).unwrap(), &traj, &den, Condition::Class(0), GuidanceConfig::new(lambda).unwrap(), &s).unwrap();
        prop_assert_eq!(den.calls(), 3 * n as u64);
        prop_assert_eq!(pair.noising.last().unwrap(), pair.denoising.last().unwrap());
        prop_assert_eq!(pair.noising.len(), n + 1);
        let inverted = invert_ddim(&Latent::clean(x).unwrap(), &traj, &oracle(), &s).unwrap();
        prop_assert_eq!(&inverted, &pair.noising);
    }
}

#[test]
fn every_method_spends_exactly_the_budget() {
    let s = sched();
    let den = oracle();
    for method in Method::ALL {
        let cfg = DistillConfig {
            method,
            particles: 4,
            call_budget: Some(360),
            ..Default::default()
        };
        let h = run_distillation(&cfg, &den, &s, None).unwrap();
        assert_eq!(h.total_calls, 360, "{method}");
        assert_eq!(h.records.len(), cfg.planned_iterations(), "{method}");
    }
}

#[test]
fn uniform_weights_match_their_name() {
    let w = uniform_weights(4);
    assert_eq!(w, vec![0.25; 4]);
}
