//! Per-feature noise distribution training against a frozen classifier.
//!
//! Each input coordinate gets a trainable location `mu` and an unconstrained
//! parameter `rho`; the noise scale is the reparameterization
//! `sigma = (1 + tanh(rho)) / 2 * M`, which keeps `sigma` strictly inside
//! `(0, M)` while `rho` roams freely. Training minimizes
//!
//! ```text
//! loss = -log(mean(sigma^2) + floor^2) + lambda * CE(f(x + r), y)
//! ```
//!
//! with `r = sigma . e + mu`, one fresh standard-normal draw `e` per
//! minibatch (more via `mc_samples`). The first term pushes every scale up;
//! the cross-entropy term pushes back only where the frozen classifier
//! actually needs the feature. Coordinates the classifier can tolerate end up
//! near `M`, the rest near zero.

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{FrozenModel, TrainConfig};
use crate::optim::Optimizer;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Scale floor applied (squared) inside the log term only. At the standard
/// initialization rho = -10 every sigma is ~3e-9, so the unguarded term
/// would be -log of an underflowing mean. The floor enters additively,
/// which keeps the gradient through sigma alive below the floor; a hard
/// elementwise clamp would zero it exactly where training has to start.
pub const SIGMA_FLOOR: f32 = 1e-6;

/// Initial value of every rho entry.
pub const RHO_INIT: f32 = -10.0;

/// Trainable noise distribution parameters plus the scale cap and the
/// privacy-utility weight.
#[derive(Debug, Clone)]
pub struct NoiseMap {
    pub mu: Tensor,
    pub rho: Tensor,
    /// Maximum noise scale M.
    pub cap: f32,
    /// Utility weight lambda in the loss.
    pub lambda: f32,
}

impl NoiseMap {
    /// Fresh map over the given input shape: mu = 0, rho = -10.
    pub fn new(input_shape: &[usize], cap: f32, lambda: f32) -> Result<Self> {
        if cap <= 0.0 {
            return Err(Error::InvalidArg {
                op: "NoiseMap::new",
                msg: format!("cap M must be positive, got {cap}"),
            });
        }
        if lambda < 0.0 {
            return Err(Error::InvalidArg {
                op: "NoiseMap::new",
                msg: format!("lambda must be non-negative, got {lambda}"),
            });
        }
        Ok(NoiseMap {
            mu: Tensor::zeros(input_shape),
            rho: Tensor::filled(input_shape, RHO_INIT),
            cap,
            lambda,
        })
    }

    /// Derived noise scales.
    pub fn sigma(&self) -> Tensor {
        reparameterize_sigma(&self.rho, self.cap).expect("cap validated at construction")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("mu", self.mu.clone());
        ck.push("rho", self.rho.clone());
        ck.push_scalar("M", self.cap);
        ck.push_scalar("lambda", self.lambda);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<NoiseMap> {
        let mu = ck.require("mu")?.clone();
        let rho = ck.require("rho")?.clone();
        if mu.shape() != rho.shape() {
            return Err(Error::ShapeMismatch {
                op: "NoiseMap checkpoint",
                lhs: mu.shape().to_vec(),
                rhs: rho.shape().to_vec(),
            });
        }
        Ok(NoiseMap {
            mu,
            rho,
            cap: ck.require_scalar("M")?,
            lambda: ck.require_scalar("lambda")?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<NoiseMap> {
        NoiseMap::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// sigma = (1 + tanh(rho)) / 2 * M, elementwise, computed in f64.
///
/// The mathematical range is the open interval (0, M); after rounding to f32
/// the extremes can collapse onto 0 or M, so the result is nudged back inside
/// by one representable step. That keeps the open-interval guarantee exact in
/// storage as well.
pub fn reparameterize_sigma(rho: &Tensor, cap: f32) -> Result<Tensor> {
    if cap <= 0.0 {
        return Err(Error::InvalidArg {
            op: "reparameterize_sigma",
            msg: format!("cap M must be positive, got {cap}"),
        });
    }
    let below_cap = f32::from_bits(cap.to_bits() - 1);
    let data = rho
        .data()
        .iter()
        .map(|&r| {
            let s = ((1.0 + (r as f64).tanh()) / 2.0 * cap as f64) as f32;
            s.clamp(f32::MIN_POSITIVE, below_cap)
        })
        .collect();
    Ok(Tensor::from_raw(rho.shape().to_vec(), data))
}

/// One standard-normal tensor from a seeded stream.
pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}

/// r = sigma . e + mu with e ~ N(0, 1) drawn i.i.d. from the seed.
pub fn sample_noise(mu: &Tensor, sigma: &Tensor, seed: u64) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_noise",
            lhs: mu.shape().to_vec(),
            rhs: sigma.shape().to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = standard_normal(mu.shape(), &mut rng);
    sigma.mul(&e)?.add(mu)
}

/// Loss terms of one evaluation, recorded separately.
#[derive(Debug, Clone, Copy)]
pub struct SieveLossValue {
    pub total: f32,
    /// -log(mean sigma^2 + floor^2)
    pub privacy_term: f32,
    /// unweighted expected cross-entropy
    pub utility_ce: f32,
    pub mean_sigma: f32,
}

/// Evaluate the sieve loss on one batch and return gradients with respect to
/// mu and rho. The classifier is frozen: its parameters enter the tape as
/// constants and provably receive no update. `mc_samples` fresh noise draws
/// are averaged (1 = the single-sample minibatch estimator).
pub fn sieve_loss(
    model: &FrozenModel<'_>,
    batch: &Tensor,
    labels: &[u32],
    map: &NoiseMap,
    noise_seed: u64,
    mc_samples: usize,
) -> Result<(SieveLossValue, Tensor, Tensor)> {
    if mc_samples == 0 {
        return Err(Error::InvalidArg {
            op: "sieve_loss",
            msg: "mc_samples must be >= 1".into(),
        });
    }
    if batch.shape().len() < 2 || batch.shape()[1..] != *map.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "sieve_loss",
            lhs: batch.shape().to_vec(),
            rhs: map.mu.shape().to_vec(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut tape = Tape::new();
    let mu = tape.leaf(map.mu.clone());
    let rho = tape.leaf(map.rho.clone());

    let sigma = tape.sigma_reparam(rho, map.cap)?;

    // privacy term: -log(mean(sigma^2) + floor^2)
    let sq = tape.mul(sigma, sigma)?;
    let mean_sq = tape.mean_all(sq);
    let guarded = tape.add_scalar(mean_sq, SIGMA_FLOOR * SIGMA_FLOOR);
    let log_term = tape.ln(guarded)?;
    let privacy = tape.neg(log_term);

    // expected cross-entropy over mc noise draws; one draw per pass, shared
    // across the minibatch
    let x = tape.constant(batch.clone());
    let mut ce_terms = Vec::with_capacity(mc_samples);
    for _ in 0..mc_samples {
        let e = tape.constant(standard_normal(map.mu.shape(), &mut rng));
        let scaled = tape.mul(sigma, e)?;
        let r = tape.add(scaled, mu)?;
        let noisy = tape.add_rowwise(x, r)?;
        let logits = model.logits_on_tape(&mut tape, noisy)?;
        ce_terms.push(tape.cross_entropy(logits, labels)?);
    }
    let mut ce = ce_terms[0];
    for &term in &ce_terms[1..] {
        ce = tape.add(ce, term)?;
    }
    if mc_samples > 1 {
        ce = tape.mul_scalar(ce, 1.0 / mc_samples as f32);
    }

    let weighted = tape.mul_scalar(ce, map.lambda);
    let total = tape.add(privacy, weighted)?;
    tape.backward(total)?;

    let value = SieveLossValue {
        total: tape.value(total).scalar_value()?,
        privacy_term: tape.value(privacy).scalar_value()?,
        utility_ce: tape.value(ce).scalar_value()?,
        mean_sigma: tape.value(sigma).mean_all(),
    };
    Ok((value, tape.grad(mu), tape.grad(rho)))
}

/// Training configuration for the noise map: the usual loop knobs plus the
/// Monte-Carlo sample count per update.
#[derive(Debug, Clone, Copy)]
pub struct NoiseTrainConfig {
    pub base: TrainConfig,
    pub mc_samples: usize,
}

impl Default for NoiseTrainConfig {
    fn default() -> Self {
        NoiseTrainConfig {
            base: TrainConfig::default(),
            mc_samples: 1,
        }
    }
}

/// Per-epoch history with the loss terms recorded separately.
#[derive(Debug, Clone, Copy)]
pub struct NoiseEpochStats {
    pub total: f32,
    pub privacy_term: f32,
    pub utility_ce: f32,
    pub mean_sigma: f32,
}

/// Minibatch Adam/SGD steps on (mu, rho) only, against a frozen classifier.
pub fn train_noise_map(
    model: &FrozenModel<'_>,
    dataset: &LabeledDataset,
    map: &mut NoiseMap,
    cfg: &NoiseTrainConfig,
) -> Result<Vec<NoiseEpochStats>> {
    cfg.base.validate()?;
    if cfg.mc_samples == 0 {
        return Err(Error::InvalidArg {
            op: "train_noise_map",
            msg: "mc_samples must be >= 1".into(),
        });
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArg {
            op: "train_noise_map",
            msg: "dataset is empty".into(),
        });
    }
    if dataset.item_shape() != map.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "train_noise_map",
            lhs: dataset.item_shape().to_vec(),
            rhs: map.mu.shape().to_vec(),
        });
    }
    let sizes = [map.mu.len(), map.rho.len()];
    let mut opt = Optimizer::new(cfg.base.optimizer, cfg.base.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base.seed);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.base.epochs);
    for _epoch in 0..cfg.base.epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.base.batch_size) {
            let batch = dataset.batch_features(chunk);
            let labels = dataset.batch_labels(chunk);
            let noise_seed: u64 = rng.gen();
            let (value, d_mu, d_rho) =
                sieve_loss(model, &batch, &labels, map, noise_seed, cfg.mc_samples)?;
            opt.step(&mut [&mut map.mu, &mut map.rho], &[&d_mu, &d_rho]);
            sums.0 += value.total as f64;
            sums.1 += value.privacy_term as f64;
            sums.2 += value.utility_ce as f64;
            sums.3 += value.mean_sigma as f64;
            batches += 1;
        }
        let b = batches as f64;
        history.push(NoiseEpochStats {
            total: (sums.0 / b) as f32,
            privacy_term: (sums.1 / b) as f32,
            utility_ce: (sums.2 / b) as f32,
            mean_sigma: (sums.3 / b) as f32,
        });
    }
    Ok(history)
}

/// One stage of a multi-phase training schedule: the utility weight used for
/// the stage plus the loop configuration.
#[derive(Debug, Clone, Copy)]
pub struct NoisePhase {
    pub lambda: f32,
    pub cfg: NoiseTrainConfig,
}

/// Run several training phases in order, switching the map's lambda per
/// phase. Experiments typically warm up with a small (or zero) utility
/// weight so every scale lifts off together, then let the target lambda
/// carve the conducive features back out at a lower learning rate.
pub fn train_noise_map_phased(
    model: &FrozenModel<'_>,
    dataset: &LabeledDataset,
    map: &mut NoiseMap,
    phases: &[NoisePhase],
) -> Result<Vec<NoiseEpochStats>> {
    let mut history = Vec::new();
    for phase in phases {
        map.lambda = phase.lambda;
        history.extend(train_noise_map(model, dataset, map, &phase.cfg)?);
    }
    Ok(history)
}
