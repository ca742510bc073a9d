use fei_core::fedsim::{self, local_train, run_rounds, Dataset, ServerLoad};
use fei_core::FedConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(servers: Vec<ServerLoad>, rounds: usize, lr: f64, seed: u64) -> FedConfig {
    FedConfig {
        servers,
        participation: 1.0,
        rounds,
        learning_rate: lr,
        seed,
        test_samples: 500,
    }
}

fn load(samples: usize, batch: usize, passes: usize) -> ServerLoad {
    ServerLoad {
        samples,
        batch,
        passes,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn step_count_is_passes_times_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1usize, 7, 10, 95, 100, 128] {
        let data: Dataset<f64> = fedsim::generate_partitions(n as u64, &[n]).remove(0);
        for b in [1usize, 3, 10, 32, n] {
            if b > n {
                continue;
            }
            for e in 1..=4 {
                let (_, steps) = local_train(&[0.0; 3], &data, b, e, 0.01, &mut rng).unwrap();
                assert_eq!(steps, e * n.div_ceil(b), "n {n} b {b} e {e}");
            }
        }
    }
}

#[test]
fn rounds_record_the_exact_step_counts() {
    let servers = vec![load(95, 10, 2), load(100, 10, 5), load(40, 40, 3)];
    let out = run_rounds(&FedConfig {
        participation: 0.5,
        ..config(servers.clone(), 6, 0.05, 9)
    })
    .unwrap();
    assert!(!out.steps.is_empty());
    for &(_, k, steps) in &out.steps {
        let s = &servers[k];
        assert_eq!(steps, s.passes * s.samples.div_ceil(s.batch));
    }
    let per_round: usize = out.curve.iter().map(|r| r.participants).sum();
    assert_eq!(per_round, out.steps.len());
}

#[test]
fn more_local_passes_do_not_raise_the_loss() {
    let diffs: Vec<f64> = (0..10)
        .map(|seed| {
            let at = |passes: usize| {
                let servers = vec![load(200, 20, passes); 3];
                run_rounds(&config(servers, 10, 0.01, seed)).unwrap().curve[9].loss
            };
            at(4) - at(2)
        })
        .collect();
    assert!(median(diffs.clone()) <= 0.0, "{diffs:?}");
}

#[test]
fn training_loss_is_non_increasing_at_a_tuned_rate() {
    for seed in [1u64, 2, 3] {
        let servers = vec![load(400, 50, 1), load(300, 50, 1), load(500, 50, 1)];
        let curve = run_rounds(&config(servers, 20, 0.05, seed)).unwrap().curve;
        for pair in curve.windows(2) {
            assert!(
                pair[1].loss <= pair[0].loss,
                "seed {seed} round {}: {} > {}",
                pair[1].round,
                pair[1].loss,
                pair[0].loss
            );
        }
    }
}

#[test]
fn large_partitions_are_balanced() {
    for seed in 0..5 {
        for d in fedsim::generate_partitions::<f64>(seed, &[1000, 2500]) {
            let share = d.positives() as f64 / d.len() as f64;
            assert!((share - 0.5).abs() <= 0.05, "seed {seed}: {share}");
        }
    }
}

#[test]
fn single_pool_when_one_server() {
    let parts = fedsim::generate_partitions::<f64>(4, &[123]);
    assert_eq!(parts.len(), 1);
    assert_eq!(parts[0].len(), 123);
    assert_eq!(parts, fedsim::generate_partitions::<f64>(4, &[123]));
}

#[test]
fn federated_and_centralized_paths_agree_bit_for_bit() {
    for seed in [0u64, 42, 99] {
        let cfg = config(vec![load(250, 16, 3)], 15, 0.1, seed);
        let fed = run_rounds(&cfg).unwrap().curve;
        let central = fedsim::centralized_sgd(&cfg).unwrap();
        assert_eq!(fed.len(), central.len());
        for (a, b) in fed.iter().zip(&central) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        }
    }
}
