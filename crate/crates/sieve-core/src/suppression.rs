//! Thresholding a trained noise map into a keep/suppress mask, training the
//! constant replacement values, and producing sifted representations online.
//!
//! The mask keeps a coordinate (mask = 1) when its learned noise scale stays
//! below the cutoff `T`: a feature the classifier could not tolerate noise on
//! is conducive and survives. Everything else is suppressed and, depending on
//! the scheme, replaced by zeros or by trained constants `mu_s`.
//!
//! Online sifting per item:
//!
//! * `noisy`   - x + r with r ~ N(0, sigma^2), no mask at all
//! * `zeros`   - (x + r) . mask
//! * `trained` - (x + r) . mask + mu_s . (1 - mask)
//!
//! Suppressed coordinates of a `zeros`/`trained` representation are constant
//! across all inputs, which makes the no-leak property checkable exactly.

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{FrozenModel, TrainConfig};
use crate::noisemap::standard_normal;
use crate::optim::Optimizer;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Noisy,
    Zeros,
    Trained,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::Noisy => "noisy",
            Scheme::Zeros => "zeros",
            Scheme::Trained => "trained",
        }
    }

    fn code(&self) -> f32 {
        match self {
            Scheme::Noisy => 0.0,
            Scheme::Zeros => 1.0,
            Scheme::Trained => 2.0,
        }
    }

    fn from_code(code: f32) -> Result<Scheme> {
        match code as i64 {
            0 => Ok(Scheme::Noisy),
            1 => Ok(Scheme::Zeros),
            2 => Ok(Scheme::Trained),
            other => Err(Error::InvalidArg {
                op: "Scheme::from_code",
                msg: format!("unknown scheme code {other}"),
            }),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scheme> {
        match s {
            "noisy" => Ok(Scheme::Noisy),
            "zeros" => Ok(Scheme::Zeros),
            "trained" => Ok(Scheme::Trained),
            other => Err(Error::InvalidArg {
                op: "sift",
                msg: format!("unknown scheme '{other}'"),
            }),
        }
    }
}

/// Everything needed for online sifting.
#[derive(Debug, Clone)]
pub struct SiftPlan {
    /// 1 = keep, 0 = suppress.
    pub mask: Tensor,
    /// Constant replacement values; zero on kept coordinates.
    pub mu_s: Tensor,
    /// Noise scales applied to kept coordinates.
    pub sigma: Tensor,
    pub scheme: Scheme,
    pub threshold: f32,
}

impl SiftPlan {
    pub fn suppression_ratio(&self) -> f32 {
        1.0 - self.mask.mean_all()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("mask", self.mask.clone());
        ck.push("mu_s", self.mu_s.clone());
        ck.push("sigma", self.sigma.clone());
        ck.push_scalar("T", self.threshold);
        ck.push_scalar("scheme", self.scheme.code());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<SiftPlan> {
        let mask = ck.require("mask")?.clone();
        let mu_s = ck.require("mu_s")?.clone();
        let sigma = ck.require("sigma")?.clone();
        for (name, t) in [("mu_s", &mu_s), ("sigma", &sigma)] {
            if t.shape() != mask.shape() {
                return Err(Error::ShapeMismatch {
                    op: "SiftPlan checkpoint",
                    lhs: mask.shape().to_vec(),
                    rhs: {
                        let _ = name;
                        t.shape().to_vec()
                    },
                });
            }
        }
        Ok(SiftPlan {
            mask,
            mu_s,
            sigma,
            scheme: Scheme::from_code(ck.require_scalar("scheme")?)?,
            threshold: ck.require_scalar("T")?,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<SiftPlan> {
        SiftPlan::from_checkpoint(&Checkpoint::read(path)?)
    }
}

/// Binary keep/suppress mask from noise scales: keep (1) iff sigma < T.
/// Returns the mask and the suppression ratio (fraction of zeros).
pub fn threshold_mask(sigma: &Tensor, threshold: f32, cap: f32) -> Result<(Tensor, f32)> {
    if !(0.0..=cap).contains(&threshold) {
        return Err(Error::InvalidArg {
            op: "threshold_mask",
            msg: format!("threshold {threshold} outside [0, {cap}]"),
        });
    }
    let mask_data: Vec<f32> = sigma
        .data()
        .iter()
        .map(|&s| if s < threshold { 1.0 } else { 0.0 })
        .collect();
    let mask = Tensor::from_raw(sigma.shape().to_vec(), mask_data);
    let ratio = 1.0 - mask.mean_all();
    Ok((mask, ratio))
}

/// Pick the threshold whose mask suppresses (as close as possible to) the
/// requested fraction of coordinates. Handy for matching suppression ratios
/// across differently-scaled noise maps.
pub fn threshold_for_ratio(sigma: &Tensor, target_ratio: f32, cap: f32) -> f32 {
    let mut sorted: Vec<f32> = sigma.data().to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let keep = (((1.0 - target_ratio) as f64) * n as f64).round() as usize;
    if keep == 0 {
        0.0
    } else if keep >= n {
        cap
    } else {
        // keep coordinates strictly below the threshold
        ((sorted[keep - 1] + sorted[keep]) / 2.0).min(cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuppressionStatus {
    Trained,
    /// Mask kept everything; there was nothing to train.
    NothingSuppressed,
}

/// Learn the constant replacement values for suppressed coordinates by
/// gradient descent on the frozen classifier's cross-entropy, with
/// `x_s = (x + r) . mask + mu_s . (1 - mask)` and `r ~ N(0, sigma^2 . mask)`.
/// `mu_init` seeds the values (the noise map's mu); kept coordinates are
/// forced to zero in the result.
pub fn train_suppression_values(
    model: &FrozenModel<'_>,
    dataset: &LabeledDataset,
    sigma: &Tensor,
    mask: &Tensor,
    mu_init: &Tensor,
    cfg: &TrainConfig,
) -> Result<(Tensor, SuppressionStatus)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg {
            op: "train_suppression_values",
            msg: "dataset is empty".into(),
        });
    }
    for (name, t) in [("sigma", sigma), ("mu_init", mu_init)] {
        if t.shape() != mask.shape() {
            return Err(Error::InvalidArg {
                op: "train_suppression_values",
                msg: format!("{name} shape {:?} != mask {:?}", t.shape(), mask.shape()),
            });
        }
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidArg {
            op: "train_suppression_values",
            msg: "mask entries must be 0 or 1".into(),
        });
    }
    let inv_mask = mask.neg().add_scalar(1.0);
    if mask.data().iter().all(|&m| m == 1.0) {
        return Ok((Tensor::zeros(mask.shape()), SuppressionStatus::NothingSuppressed));
    }

    let masked_sigma = sigma.mul(mask)?;
    let mut mu_s = mu_init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &[mu_s.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = dataset.batch_features(chunk);
            let labels = dataset.batch_labels(chunk);
            let e = standard_normal(mask.shape(), &mut rng);
            let r = masked_sigma.mul(&e)?;

            let mut tape = Tape::new();
            let mu_node = tape.leaf(mu_s.clone());
            let x = tape.constant(batch);
            let r_node = tape.constant(r);
            let mask_node = tape.constant(mask.clone());
            let inv_node = tape.constant(inv_mask.clone());
            let noisy = tape.add_rowwise(x, r_node)?;
            let kept = tape.mul_rowwise(noisy, mask_node)?;
            let fill = tape.mul(mu_node, inv_node)?;
            let sifted = tape.add_rowwise(kept, fill)?;
            let logits = model.logits_on_tape(&mut tape, sifted)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            let grad = tape.grad(mu_node);
            opt.step(&mut [&mut mu_s], &[&grad]);
        }
    }
    // kept coordinates never influenced the loss; zero them explicitly
    let mu_s = mu_s.mul(&inv_mask)?;
    Ok((mu_s, SuppressionStatus::Trained))
}

/// Apply a sift plan to a batch `[n, ...]`, drawing fresh noise per item.
/// Deterministic for a fixed seed.
pub fn sift(x: &Tensor, plan: &SiftPlan, seed: u64) -> Result<Tensor> {
    if x.shape().len() < 2 || x.shape()[1..] != *plan.mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "sift",
            lhs: x.shape().to_vec(),
            rhs: plan.mask.shape().to_vec(),
        });
    }
    let n = x.shape()[0];
    let item = plan.mask.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.len());
    let (mask, mu_s, sigma) = (plan.mask.data(), plan.mu_s.data(), plan.sigma.data());
    for i in 0..n {
        let row = &x.data()[i * item..(i + 1) * item];
        let e = standard_normal(plan.mask.shape(), &mut rng);
        match plan.scheme {
            Scheme::Noisy => {
                out.extend(
                    row.iter()
                        .zip(e.data())
                        .zip(sigma)
                        .map(|((&xv, &ev), &sv)| xv + sv * ev),
                );
            }
            Scheme::Zeros => {
                out.extend(
                    row.iter()
                        .zip(e.data())
                        .zip(sigma)
                        .zip(mask)
                        .map(|(((&xv, &ev), &sv), &mv)| (xv + sv * ev) * mv),
                );
            }
            Scheme::Trained => {
                out.extend(
                    row.iter()
                        .zip(e.data())
                        .zip(sigma)
                        .zip(mask)
                        .zip(mu_s)
                        .map(|((((&xv, &ev), &sv), &mv), &uv)| {
                            (xv + sv * ev) * mv + uv * (1.0 - mv)
                        }),
                );
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::nn::Model;
    use crate::nn::train_classifier;
    use crate::optim::OptimizerKind;

    #[test]
    fn threshold_rule() {
        let sigma = Tensor::from_vec(vec![0.01, 1.4]);
        let (mask, sr) = threshold_mask(&sigma, 0.7, 1.5).unwrap();
        assert_eq!(mask.data(), &[1.0, 0.0]);
        assert_eq!(sr, 0.5);
    }

    #[test]
    fn threshold_extremes() {
        let sigma = Tensor::from_vec(vec![0.1, 0.5, 1.2]);
        let (mask, sr) = threshold_mask(&sigma, 1.5, 1.5).unwrap();
        assert!(mask.data().iter().all(|&m| m == 1.0), "sigma < M always");
        assert_eq!(sr, 0.0);
        let (mask, sr) = threshold_mask(&sigma, 0.0, 1.5).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0), "sigma > 0 always");
        assert_eq!(sr, 1.0);
        assert!(threshold_mask(&sigma, 2.0, 1.5).is_err());
        assert!(threshold_mask(&sigma, -0.1, 1.5).is_err());
    }

    #[test]
    fn suppression_ratio_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = Tensor::from_raw(
            vec![64],
            (0..64).map(|_| rng.gen_range(0.0..1.5f32)).collect(),
        );
        let mut prev = f32::INFINITY;
        for i in 0..=15 {
            let t = 1.5 * i as f32 / 15.0;
            let (_, sr) = threshold_mask(&sigma, t, 1.5).unwrap();
            assert!(sr <= prev, "SR must not increase with T");
            prev = sr;
        }
    }

    #[test]
    fn threshold_for_ratio_hits_target() {
        let sigma = Tensor::from_vec((0..100).map(|i| i as f32 / 100.0).collect());
        let t = threshold_for_ratio(&sigma, 0.3, 1.5);
        let (_, sr) = threshold_mask(&sigma, t, 1.5).unwrap();
        assert!((sr - 0.3).abs() < 0.02, "sr {sr}");
    }

    fn identity_plan(shape: &[usize], scheme: Scheme) -> SiftPlan {
        SiftPlan {
            mask: Tensor::filled(shape, 1.0),
            mu_s: Tensor::zeros(shape),
            sigma: Tensor::zeros(shape),
            scheme,
            threshold: 0.75,
        }
    }

    #[test]
    fn sift_identity_when_nothing_suppressed_and_sigma_zero() {
        let x = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let plan = identity_plan(&[4], Scheme::Trained);
        let out = sift(&x, &plan, 5).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn sift_full_suppression() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        let mut plan = identity_plan(&[4], Scheme::Zeros);
        plan.mask = Tensor::zeros(&[4]);
        let out = sift(&x, &plan, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        plan.scheme = Scheme::Trained;
        plan.mu_s = Tensor::from_vec(vec![0.9, 0.8, 0.7, 0.6]);
        let out = sift(&x, &plan, 1).unwrap();
        for row in out.data().chunks_exact(4) {
            assert_eq!(row, plan.mu_s.data(), "input-independent output");
        }
    }

    #[test]
    fn suppressed_coordinates_identical_across_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_raw(vec![100, 8], (0..800).map(|_| rng.gen_range(0.0..1.0f32)).collect());
        let plan = SiftPlan {
            mask: Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]),
            mu_s: Tensor::from_vec(vec![0.0, 0.3, 0.0, 0.5, 0.25, 0.0, 0.0, 0.1]),
            sigma: Tensor::filled(&[8], 0.7),
            scheme: Scheme::Trained,
            threshold: 0.75,
        };
        let out = sift(&x, &plan, 42).unwrap();
        for row in out.data().chunks_exact(8) {
            assert_eq!(row[1].to_bits(), 0.3f32.to_bits());
            assert_eq!(row[3].to_bits(), 0.5f32.to_bits());
            assert_eq!(row[4].to_bits(), 0.25f32.to_bits());
            assert_eq!(row[7].to_bits(), 0.1f32.to_bits());
        }
        // zeros scheme: suppressed coordinates exactly zero
        let plan = SiftPlan {
            scheme: Scheme::Zeros,
            ..plan
        };
        let out = sift(&x, &plan, 42).unwrap();
        for row in out.data().chunks_exact(8) {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
        }
    }

    #[test]
    fn sift_deterministic_per_seed() {
        let x = Tensor::filled(&[4, 6], 0.5);
        let plan = SiftPlan {
            mask: Tensor::filled(&[6], 1.0),
            mu_s: Tensor::zeros(&[6]),
            sigma: Tensor::filled(&[6], 0.4),
            scheme: Scheme::Noisy,
            threshold: 0.75,
        };
        let a = sift(&x, &plan, 9).unwrap();
        let b = sift(&x, &plan, 9).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sift(&x, &plan, 10).unwrap();
        assert_ne!(a.data(), c.data());
        // per item fresh draws: rows differ
        assert_ne!(&a.data()[0..6], &a.data()[6..12]);
    }

    #[test]
    fn mask_all_ones_returns_warning() {
        let ds = data::generate_two_attribute(32, 1, 0.1).unwrap();
        let model = Model::linear(&[1, 16, 16], 2, 1).unwrap();
        let shape = [1usize, 16, 16];
        let (mu_s, status) = train_suppression_values(
            &model.freeze(),
            &ds,
            &Tensor::filled(&shape, 0.1),
            &Tensor::filled(&shape, 1.0),
            &Tensor::zeros(&shape),
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(status, SuppressionStatus::NothingSuppressed);
        assert!(mu_s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_suppression_reaches_majority_rate() {
        // imbalanced 2-class task: with everything suppressed the trained
        // constants drive the classifier to the majority class
        let base = data::generate_two_attribute(300, 7, 0.1).unwrap();
        let idx: Vec<usize> = (0..base.len())
            .filter(|&i| base.labels[i] == 1 || i % 3 == 0)
            .collect();
        let ds = base.subset(&idx);
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        let majority = (ones as f64 / ds.len() as f64).max(1.0 - ones as f64 / ds.len() as f64);

        let mut model = Model::mlp_with_hidden(&[1, 16, 16], 16, 2, 7).unwrap();
        let cls = TrainConfig {
            epochs: 10,
            lr: 3e-3,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            seed: 7,
        };
        train_classifier(&mut model, &ds, &cls).unwrap();

        let shape = [1usize, 16, 16];
        let (mu_s, status) = train_suppression_values(
            &model.freeze(),
            &ds,
            &Tensor::filled(&shape, 0.1),
            &Tensor::zeros(&shape),
            &Tensor::zeros(&shape),
            &TrainConfig {
                epochs: 40,
                lr: 0.02,
                batch_size: 64,
                optimizer: OptimizerKind::Adam,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(status, SuppressionStatus::Trained);

        let plan = SiftPlan {
            mask: Tensor::zeros(&shape),
            mu_s,
            sigma: Tensor::filled(&shape, 0.1),
            scheme: Scheme::Trained,
            threshold: 0.75,
        };
        let sifted = sift(&ds.features, &plan, 99).unwrap();
        let preds = model.predict(&sifted).unwrap().argmax_rows().unwrap();
        let correct = preds
            .iter()
            .zip(ds.labels.iter())
            .filter(|(&p, &l)| p as u32 == l)
            .count() as f64
            / ds.len() as f64;
        assert!(
            correct >= majority - 1e-9,
            "constant-input accuracy {correct} below majority rate {majority}"
        );
    }

    #[test]
    fn plan_checkpoint_round_trip() {
        let plan = SiftPlan {
            mask: Tensor::from_vec(vec![1.0, 0.0, 1.0]),
            mu_s: Tensor::from_vec(vec![0.0, 0.42, 0.0]),
            sigma: Tensor::from_vec(vec![0.1, 1.2, 0.05]),
            scheme: Scheme::Trained,
            threshold: 0.6,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.siv");
        plan.save(&path).unwrap();
        let back = SiftPlan::load(&path).unwrap();
        assert_eq!(back.mask.data(), plan.mask.data());
        assert_eq!(back.mu_s.data(), plan.mu_s.data());
        assert_eq!(back.sigma.data(), plan.sigma.data());
        assert_eq!(back.scheme, plan.scheme);
        assert_eq!(back.threshold, plan.threshold);
        assert!((back.suppression_ratio() - 1.0 / 3.0).abs() < 1e-6);
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
}
