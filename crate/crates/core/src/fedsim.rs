//! Toy federated averaging on a convex task: logistic regression on two
//! Gaussian blobs in the plane.
//!
//! Randomness is split into independent streams so results do not depend on
//! scheduling: data generation uses the run seed, participation sampling a
//! per-round stream, and each participant's shuffles a per-(round, server)
//! stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Features per sample (the bias is an extra parameter).
pub const FEATURES: usize = 2;
/// Distance of each class mean from the origin along the diagonal.
pub const CLASS_OFFSET: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerLoad {
    pub samples: usize,
    pub batch: usize,
    pub passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig<T> {
    pub servers: Vec<ServerLoad>,
    /// Probability that a server takes part in a round.
    pub participation: T,
    pub rounds: usize,
    pub learning_rate: T,
    pub seed: u64,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_test_samples() -> usize {
    2000
}

impl<T: Scalar> FedConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.servers.is_empty() {
            return Err(Error::validation("fedsim", "no servers"));
        }
        if !(self.participation > T::zero() && self.participation <= T::one()) {
            return Err(Error::validation(
                "fedsim",
                "participation must lie in (0, 1]",
            ));
        }
        if self.participation * T::from_usize_lossy(self.servers.len()) < T::one() {
            return Err(Error::validation(
                "fedsim",
                "participation times servers must be >= 1",
            ));
        }
        if !(self.learning_rate >= T::zero()) {
            return Err(Error::validation("fedsim", "learning rate must be >= 0"));
        }
        for (k, s) in self.servers.iter().enumerate() {
            if s.samples == 0 || s.batch == 0 || s.batch > s.samples {
                return Err(Error::validation(
                    format!("fedsim server {k}"),
                    "need 1 <= batch <= samples",
                ));
            }
            if s.passes == 0 {
                return Err(Error::validation(
                    format!("fedsim server {k}"),
                    "passes must be >= 1",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// Row-major `len × FEATURES`.
    pub features: Vec<T>,
    /// Labels in `{0, 1}`.
    pub labels: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > T::lit(0.5)).count()
    }

    fn concat(parts: &[Dataset<T>]) -> Self {
        Self {
            features: parts
                .iter()
                .flat_map(|d| d.features.iter().copied())
                .collect(),
            labels: parts
                .iter()
                .flat_map(|d| d.labels.iter().copied())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<T> {
    /// Feature weights followed by the bias.
    pub params: Vec<T>,
    pub round: usize,
}

impl<T: Scalar> ModelState<T> {
    pub fn zeros() -> Self {
        Self {
            params: vec![T::zero(); FEATURES + 1],
            round: 0,
        }
    }
}

fn sample<R: Rng>(rng: &mut R, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut features = Vec::with_capacity(n * FEATURES);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let positive: bool = rng.random_bool(0.5);
        let centre = if positive {
            CLASS_OFFSET
        } else {
            -CLASS_OFFSET
        };
        for _ in 0..FEATURES {
            let z: f64 = StandardNormal.sample(rng);
            features.push(centre + z);
        }
        labels.push(if positive { 1.0 } else { 0.0 });
    }
    (features, labels)
}

fn convert<T: Scalar>((f, l): (Vec<f64>, Vec<f64>)) -> Dataset<T> {
    Dataset {
        features: f.into_iter().map(T::lit).collect(),
        labels: l.into_iter().map(T::lit).collect(),
    }
}

/// IID blob datasets, one per server, drawn from one stream in server order.
pub fn generate_partitions<T: Scalar>(seed: u64, sizes: &[usize]) -> Vec<Dataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| convert(sample(&mut rng, n)))
        .collect()
}

/// Held-out data from a stream disjoint from the training partitions.
pub fn generate_test_set<T: Scalar>(seed: u64, n: usize) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    convert(sample(&mut rng, n))
}

fn stream(seed: u64, round: usize, server: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + ((round as u64) << 20) + server as u64);
    rng
}

#[inline]
fn logit<T: Scalar>(params: &[T], x: &[T]) -> T {
    x.iter().zip(params).map(|(&a, &w)| a * w).sum::<T>() + params[FEATURES]
}

/// `log(1 + e^z) − y·z`, evaluated without overflow.
#[inline]
fn sample_loss<T: Scalar>(z: T, y: T) -> T {
    let softplus = if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Mean logistic loss.
pub fn loss<T: Scalar>(params: &[T], data: &Dataset<T>) -> T {
    if data.is_empty() {
        return T::zero();
    }
    let total: T = (0..data.len())
        .map(|i| sample_loss(logit(params, data.row(i)), data.labels[i]))
        .sum();
    total / T::from_usize_lossy(data.len())
}

pub fn accuracy<T: Scalar>(params: &[T], data: &Dataset<T>) -> T {
    if data.is_empty() {
        return T::zero();
    }
    let correct = (0..data.len())
        .filter(|&i| (logit(params, data.row(i)) > T::zero()) == (data.labels[i] > T::lit(0.5)))
        .count();
    T::from_usize_lossy(correct) / T::from_usize_lossy(data.len())
}

/// One minibatch step on the rows `batch` of `data`.
fn sgd_step<T: Scalar>(params: &mut [T], data: &Dataset<T>, batch: &[usize], lr: T) {
    let mut grad = [T::zero(); FEATURES + 1];
    for &i in batch {
        let x = data.row(i);
        let r = sigmoid(logit(params, x)) - data.labels[i];
        for (g, &xj) in grad.iter_mut().zip(x) {
            *g += r * xj;
        }
        grad[FEATURES] += r;
    }
    let scale = lr / T::from_usize_lossy(batch.len());
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= scale * g;
    }
}

/// `e` shuffled passes of minibatch SGD with the last partial batch kept.
/// Returns the updated parameters and the number of steps taken.
pub fn local_train<T: Scalar, R: Rng>(
    params: &[T],
    data: &Dataset<T>,
    batch: usize,
    passes: usize,
    lr: T,
    rng: &mut R,
) -> Result<(Vec<T>, usize)> {
    if batch == 0 || batch > data.len() {
        return Err(Error::validation(
            "local_train",
            "need 1 <= batch <= samples",
        ));
    }
    let mut p = params.to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    for _ in 0..passes {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            sgd_step(&mut p, data, chunk, lr);
            steps += 1;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                round: 0,
                step: steps,
            });
        }
    }
    let l = loss(&p, data);
    if !l.is_finite() {
        return Err(Error::Divergence {
            round: 0,
            step: steps,
        });
    }
    Ok((p, steps))
}

/// Weighted average of parameter vectors by sample count.
pub fn aggregate<T: Scalar>(updates: &[(Vec<T>, usize)]) -> Vec<T> {
    assert!(!updates.is_empty(), "aggregate needs at least one update");
    let total: usize = updates.iter().map(|u| u.1).sum();
    let total = T::from_usize_lossy(total);
    let dim = updates[0].0.len();
    let mut out = vec![T::zero(); dim];
    for (params, n) in updates {
        let w = T::from_usize_lossy(*n) / total;
        for (o, &p) in out.iter_mut().zip(params) {
            *o += w * p;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord<T> {
    pub round: usize,
    pub participants: usize,
    pub loss: T,
    pub accuracy: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedOutcome<T> {
    pub curve: Vec<RoundRecord<T>>,
    pub model: ModelState<T>,
    /// Steps per round per participant, `(round, server, steps)`.
    pub steps: Vec<(usize, usize, usize)>,
}

fn participants<T: Scalar>(cfg: &FedConfig<T>, round: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((round as u64) << 20) | 0xF_FFFF);
    let c = cfg.participation.as_f64();
    loop {
        let chosen: Vec<usize> = (0..cfg.servers.len())
            .filter(|_| rng.random_bool(c))
            .collect();
        if !chosen.is_empty() {
            return chosen;
        }
    }
}

/// Runs synchronized FedAvg rounds and records the global training loss and
/// held-out accuracy after each round.
pub fn run_rounds<T: Scalar>(cfg: &FedConfig<T>) -> Result<FedOutcome<T>> {
    cfg.validate()?;
    let sizes: Vec<usize> = cfg.servers.iter().map(|s| s.samples).collect();
    let parts = generate_partitions::<T>(cfg.seed, &sizes);
    let all = Dataset::concat(&parts);
    let test = generate_test_set::<T>(cfg.seed, cfg.test_samples);
    let mut model = ModelState::zeros();
    let mut curve = Vec::with_capacity(cfg.rounds);
    let mut steps = Vec::new();
    for round in 1..=cfg.rounds {
        let chosen = participants(cfg, round);
        let results: Vec<Result<(Vec<T>, usize)>> = chosen
            .par_iter()
            .map(|&k| {
                let s = &cfg.servers[k];
                let mut rng = stream(cfg.seed, round, k);
                local_train(
                    &model.params,
                    &parts[k],
                    s.batch,
                    s.passes,
                    cfg.learning_rate,
                    &mut rng,
                )
            })
            .collect();
        let mut updates = Vec::with_capacity(chosen.len());
        for (&k, r) in chosen.iter().zip(results) {
            let (params, n_steps) = r.map_err(|e| match e {
                Error::Divergence { step, .. } => Error::Divergence { round, step },
                other => other,
            })?;
            steps.push((round, k, n_steps));
            updates.push((params, cfg.servers[k].samples));
        }
        model.params = aggregate(&updates);
        model.round = round;
        curve.push(RoundRecord {
            round,
            participants: chosen.len(),
            loss: loss(&model.params, &all),
            accuracy: accuracy(&model.params, &test),
        });
    }
    Ok(FedOutcome {
        curve,
        model,
        steps,
    })
}

/// Plain minibatch SGD on one pool with the same data, shuffles and
/// evaluation as a single always-participating server.
pub fn centralized_sgd<T: Scalar>(cfg: &FedConfig<T>) -> Result<Vec<RoundRecord<T>>> {
    cfg.validate()?;
    let s = &cfg.servers[0];
    let data = generate_partitions::<T>(cfg.seed, &[s.samples]).remove(0);
    let test = generate_test_set::<T>(cfg.seed, cfg.test_samples);
    let mut params = vec![T::zero(); FEATURES + 1];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::new();
    for round in 1..=cfg.rounds {
        let mut rng = stream(cfg.seed, round, 0);
        order.sort_unstable();
        for _ in 0..s.passes {
            order.shuffle(&mut rng);
            for chunk in order.chunks(s.batch) {
                sgd_step(&mut params, &data, chunk, cfg.learning_rate);
            }
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { round, step: 0 });
        }
        curve.push(RoundRecord {
            round,
            participants: 1,
            loss: loss(&params, &data),
            accuracy: accuracy(&params, &test),
        });
    }
    Ok(curve)
}

/// Writes the curve as CSV with header `round,participants,loss,accuracy`.
pub fn write_curve<T: Scalar, W: std::io::Write>(curve: &[RoundRecord<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "participants", "loss", "accuracy"])?;
    for r in curve {
        w.write_record([
            r.round.to_string(),
            r.participants.to_string(),
            r.loss.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
