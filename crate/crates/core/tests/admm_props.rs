use fei_core::admm::{self, audit_trace};
use fei_core::{oracle, synthetic, AdmmOptions, Mode, Problem, ScenarioConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exit_point_is_feasible_and_audited(seed in 0u64..100_000, mode in prop_oneof![Just(Mode::Joint), Just(Mode::LbOnly), Just(Mode::UbOnly)]) {
        let mut cfg: ScenarioConfig = synthetic::random_instance(seed);
        cfg.mode = mode;
        // single-band modes may be unable to carry the floors
        let Ok(out) = admm::run(&cfg, &AdmmOptions::default()) else { return Ok(()) };
        let p = Problem::from_config(&cfg).unwrap();
        let x = out.allocation.interleaved();
        prop_assert!(p.energy(&x) <= cfg.energy_budget * (1.0 + 1e-6));
        prop_assert!(p.violations(&x, 0.0).is_empty());
        prop_assert!(x.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        prop_assert!(audit_trace(&out.trace).passed());
        match mode {
            Mode::LbOnly => prop_assert!(out.allocation.ub_bits.iter().all(|v| *v == 0.0)),
            Mode::UbOnly => prop_assert!(out.allocation.lb_bits.iter().all(|v| *v == 0.0)),
            Mode::Joint => {}
        }
    }

    #[test]
    fn distributed_and_centralized_optima_agree(seed in 0u64..100_000) {
        let cfg: ScenarioConfig = synthetic::random_instance(seed);
        let out = admm::run(&cfg, &AdmmOptions::default()).unwrap();
        let o = oracle::solve_centralized(&cfg).unwrap();
        prop_assert!(out.converged());
        let gap = (out.summary.objective - o.objective).abs() / o.objective.abs().max(1e-12);
        prop_assert!(gap <= 1e-3, "gap {}", gap);
        // the oracle's continuous optimum is a lower bound for any whole-bit point
        prop_assert!(o.objective <= out.summary.objective + 1e-9);
    }
}
