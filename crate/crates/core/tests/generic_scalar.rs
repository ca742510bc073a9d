use fei_core::admm::{self, AdmmOptions};
use fei_core::energy::{energy_lb, energy_ub};
use fei_core::fedsim::{run_rounds, FedConfig, ServerLoad};
use fei_core::loadmodel::{fit_coefficients, load, measurement_table};
use fei_core::scenario::ScenarioConfig;
use fei_core::{load_config, synthetic};

#[test]
fn energy_in_single_precision() {
    let cfg: ScenarioConfig<f32> =
        load_config(include_str!("../../../configs/minimal.json")).unwrap();
    let d = &cfg.servers[0].devices[0];
    // exponents 1 and 2
    let ub = energy_ub(d, 500.0f32, cfg.tau, cfg.bw_ub).unwrap();
    let lb = energy_lb(d, 1000.0f32, cfg.tau, cfg.bw_lb).unwrap();
    assert!((ub - 0.01).abs() <= 1e-7);
    assert!((lb - 0.03).abs() <= 1e-7);
}

#[test]
fn load_fit_in_single_precision() {
    let fit = fit_coefficients(&measurement_table::<f32>()).unwrap();
    let t = load(10, 20, 100.0f32, &fit.coefficients);
    assert!((t - 0.4772).abs() / 0.4772 <= 0.1, "{t}");
}

#[test]
fn admm_in_single_precision() {
    let cfg32: ScenarioConfig<f32> = synthetic::instance_with_shape(3, &[2, 3], 1.0);
    let cfg64: ScenarioConfig<f64> = synthetic::instance_with_shape(3, &[2, 3], 1.0);
    let opts = AdmmOptions {
        eps_abs: 1e-4f32,
        eps_rel: 1e-3,
        ..AdmmOptions::default()
    };
    let a = admm::run(&cfg32, &opts).unwrap();
    let b = admm::run(&cfg64, &AdmmOptions::default()).unwrap();
    assert!(a.converged());
    assert!(a.summary.energy <= cfg32.energy_budget * (1.0 + 1e-5));
    let gap = (a.summary.objective as f64 - b.summary.objective).abs() / b.summary.objective.abs();
    assert!(gap <= 1e-3, "{gap}");
}

#[test]
fn fedsim_in_single_precision() {
    let cfg = FedConfig::<f32> {
        servers: vec![
            ServerLoad {
                samples: 200,
                batch: 20,
                passes: 2
            };
            2
        ],
        participation: 1.0,
        rounds: 5,
        learning_rate: 0.05,
        seed: 1,
        test_samples: 300,
    };
    let curve = run_rounds(&cfg).unwrap().curve;
    assert_eq!(curve.len(), 5);
    assert!(curve[4].loss < curve[0].loss);
    assert!(curve[4].accuracy > 0.8);
}
