//! Experimental protocols: stochastic accuracy measurement, privacy versus
//! accuracy sweeps, adversary inference, fairness metrics, and the black-box
//! substitute workflow. Every protocol is deterministic given its seed, and
//! reports serialize to CSV ('.' decimal, no locale).

use crate::data::{split_disjoint, LabeledDataset};
use crate::error::{Error, Result};
use crate::infotheory::mi_loss_percent;
use crate::nn::{accuracy, build_model, train_classifier, Arch, Model, TrainConfig};
use crate::noisemap::{train_noise_map_phased, NoiseMap, NoisePhase};
use crate::suppression::{
    sift, threshold_for_ratio, threshold_mask, train_suppression_values, Scheme, SiftPlan,
};
use crate::tensor::Tensor;

/// Accuracy of one (model, plan) pairing under the repeated stochastic
/// protocol.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub task: String,
    pub scheme: Option<Scheme>,
    pub suppression_ratio: f32,
    pub mean_accuracy: f64,
    pub accuracy_std: f64,
    pub mi_loss_percent: Option<f64>,
    pub repetitions: usize,
    pub seed: u64,
}

fn predict_accuracy(model: &Model, features: &Tensor, labels: &[u32]) -> Result<f64> {
    // chunked forward pass; conv activations for a full test set at once
    // would be needlessly large
    let n = features.shape()[0];
    let item: usize = features.shape()[1..].iter().product();
    let mut shape = features.shape().to_vec();
    let mut correct = 0usize;
    let chunk_rows = 512usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk_rows).min(n);
        shape[0] = end - start;
        let chunk = Tensor::from_raw(
            shape.clone(),
            features.data()[start * item..end * item].to_vec(),
        );
        let preds = model.logits(&chunk)?.argmax_rows()?;
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(&p, &l)| p as u32 == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Repeat `reps` times: sift every test item with fresh per-item noise,
/// classify, and score; report mean and standard deviation. Without a plan
/// this degenerates to one clean pass.
pub fn evaluate_accuracy_stochastic(
    model: &Model,
    dataset: &LabeledDataset,
    plan: Option<&SiftPlan>,
    repetitions: usize,
    seed: u64,
    task: &str,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArg {
            op: "evaluate_accuracy_stochastic",
            msg: "dataset is empty".into(),
        });
    }
    if repetitions == 0 {
        return Err(Error::InvalidArg {
            op: "evaluate_accuracy_stochastic",
            msg: "repetitions must be >= 1".into(),
        });
    }
    let (reps, accs) = match plan {
        None => (
            1,
            vec![predict_accuracy(model, &dataset.features, &dataset.labels)?],
        ),
        Some(plan) => {
            let mut accs = Vec::with_capacity(repetitions);
            for rep in 0..repetitions {
                let rep_seed = seed.wrapping_add(rep as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let sifted = sift(&dataset.features, plan, rep_seed)?;
                accs.push(predict_accuracy(model, &sifted, &dataset.labels)?);
            }
            (repetitions, accs)
        }
    };
    let mean = accs.iter().sum::<f64>() / reps as f64;
    let std = if reps > 1 {
        (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (reps - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        task: task.to_string(),
        scheme: plan.map(|p| p.scheme),
        suppression_ratio: plan.map(|p| p.suppression_ratio()).unwrap_or(0.0),
        mean_accuracy: mean,
        accuracy_std: std,
        mi_loss_percent: None,
        repetitions: reps,
        seed,
    })
}

/// Configuration shared by the sweep and black-box protocols.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    /// Noise-map training schedule; each phase's lambda is multiplied into
    /// the grid value (so `[0, 1]` means a free warmup then the grid lambda).
    pub phase_lambda_scale: Vec<f32>,
    pub phase_cfgs: Vec<crate::noisemap::NoiseTrainConfig>,
    /// Noise scale cap M.
    pub cap: f32,
    /// Cutoff threshold; default M/2.
    pub threshold: Option<f32>,
    /// Suppression-value training.
    pub suppression: TrainConfig,
    /// Stochastic accuracy repetitions.
    pub repetitions: usize,
    /// At most this many items feed the MI estimators.
    pub mi_max_samples: usize,
    pub seed: u64,
}

fn subsample(ds: &LabeledDataset, max: usize) -> LabeledDataset {
    if ds.len() <= max {
        ds.clone()
    } else {
        let idx: Vec<usize> = (0..max).collect();
        ds.subset(&idx)
    }
}

/// Train a noise map with the configured phases and turn it into a
/// trained-values sift plan against the given (frozen) model.
pub fn build_plan(
    model: &Model,
    train_ds: &LabeledDataset,
    lambda: f32,
    cfg: &ProtocolConfig,
) -> Result<(NoiseMap, SiftPlan)> {
    if cfg.phase_lambda_scale.len() != cfg.phase_cfgs.len() {
        return Err(Error::InvalidArg {
            op: "build_plan",
            msg: "phase_lambda_scale and phase_cfgs must have equal length".into(),
        });
    }
    let mut map = NoiseMap::new(train_ds.item_shape(), cfg.cap, lambda)?;
    let phases: Vec<NoisePhase> = cfg
        .phase_lambda_scale
        .iter()
        .zip(cfg.phase_cfgs.iter())
        .map(|(&scale, &pc)| NoisePhase {
            lambda: lambda * scale,
            cfg: pc,
        })
        .collect();
    train_noise_map_phased(&model.freeze(), train_ds, &mut map, &phases)?;
    map.lambda = lambda;

    let sigma = map.sigma();
    let threshold = cfg.threshold.unwrap_or(cfg.cap / 2.0);
    let (mask, _) = threshold_mask(&sigma, threshold, cfg.cap)?;
    let (mu_s, _) = train_suppression_values(
        &model.freeze(),
        train_ds,
        &sigma,
        &mask,
        &map.mu,
        &cfg.suppression,
    )?;
    let plan = SiftPlan {
        mask,
        mu_s,
        sigma,
        scheme: Scheme::Trained,
        threshold,
    };
    Ok((map, plan))
}

/// One grid point of the privacy-accuracy sweep. The uniform-Gaussian
/// baseline applies the sieve's mean noise scale to every coordinate.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f32,
    pub mean_sigma: f32,
    pub suppression_ratio: f32,
    pub sieve_mi_loss: f64,
    pub sieve_accuracy: f64,
    pub sieve_accuracy_std: f64,
    pub baseline_mi_loss: f64,
    pub baseline_accuracy: f64,
    pub failed: Option<String>,
}

fn failed_point(lambda: f32, msg: String) -> SweepPoint {
    SweepPoint {
        lambda,
        mean_sigma: f32::NAN,
        suppression_ratio: f32::NAN,
        sieve_mi_loss: f64::NAN,
        sieve_accuracy: f64::NAN,
        sieve_accuracy_std: f64::NAN,
        baseline_mi_loss: f64::NAN,
        baseline_accuracy: f64::NAN,
        failed: Some(msg),
    }
}

/// Trains one noise map per lambda, builds a trained-values plan, measures
/// MI loss and stochastic accuracy, and measures the uniform-Gaussian
/// baseline at the matched mean noise scale. Failures are recorded per grid
/// point; the sweep continues.
pub fn privacy_accuracy_sweep(
    model: &Model,
    train_ds: &LabeledDataset,
    eval_ds: &LabeledDataset,
    lambda_grid: &[f32],
    cfg: &ProtocolConfig,
) -> Result<Vec<SweepPoint>> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidArg {
            op: "privacy_accuracy_sweep",
            msg: "lambda grid is empty".into(),
        });
    }
    let channels = if eval_ds.item_shape().len() == 3 {
        eval_ds.item_shape()[0]
    } else {
        1
    };
    let mi_ds = subsample(eval_ds, cfg.mi_max_samples);
    let mut points = Vec::with_capacity(lambda_grid.len());
    for (gi, &lambda) in lambda_grid.iter().enumerate() {
        let point = (|| -> Result<SweepPoint> {
            let (map, plan) = build_plan(model, train_ds, lambda, cfg)?;
            let sigma = map.sigma();
            let mean_sigma = sigma.mean_all();

            let sieve_report = evaluate_accuracy_stochastic(
                model,
                eval_ds,
                Some(&plan),
                cfg.repetitions,
                cfg.seed.wrapping_add(gi as u64),
                "sweep-sieve",
            )?;
            let sifted = sift(&mi_ds.features, &plan, cfg.seed.wrapping_add(1000 + gi as u64))?;
            let sieve_mi_loss = mi_loss_percent(&mi_ds.features, &sifted, channels)?;

            let baseline_plan = SiftPlan {
                mask: Tensor::filled(plan.mask.shape(), 1.0),
                mu_s: Tensor::zeros(plan.mask.shape()),
                sigma: Tensor::filled(plan.mask.shape(), mean_sigma),
                scheme: Scheme::Noisy,
                threshold: plan.threshold,
            };
            let base_report = evaluate_accuracy_stochastic(
                model,
                eval_ds,
                Some(&baseline_plan),
                cfg.repetitions,
                cfg.seed.wrapping_add(gi as u64),
                "sweep-baseline",
            )?;
            let base_sifted = sift(
                &mi_ds.features,
                &baseline_plan,
                cfg.seed.wrapping_add(2000 + gi as u64),
            )?;
            let baseline_mi_loss = mi_loss_percent(&mi_ds.features, &base_sifted, channels)?;

            Ok(SweepPoint {
                lambda,
                mean_sigma,
                suppression_ratio: plan.suppression_ratio(),
                sieve_mi_loss,
                sieve_accuracy: sieve_report.mean_accuracy,
                sieve_accuracy_std: sieve_report.accuracy_std,
                baseline_mi_loss,
                baseline_accuracy: base_report.mean_accuracy,
                failed: None,
            })
        })();
        points.push(point.unwrap_or_else(|e| failed_point(lambda, e.to_string())));
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversaryMode {
    /// Adversary trains on raw data and is then shown sifted representations.
    NoRetrain,
    /// Adversary trains on sifted representations (fresh noise draws).
    Retrain,
}

impl AdversaryMode {
    pub fn tag(&self) -> &'static str {
        match self {
            AdversaryMode::NoRetrain => "no_retrain",
            AdversaryMode::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdversaryOutcome {
    pub mode: AdversaryMode,
    pub suppression_ratio: f32,
    /// Adversary accuracy on sifted representations.
    pub adversary_accuracy: f64,
    /// Adversary accuracy on raw data (its ceiling).
    pub adversary_clean_accuracy: f64,
    /// Target-task accuracy under the same plan.
    pub target_accuracy: f64,
}

/// Train an adversary on the private task and measure what it can still
/// infer from sifted representations. `adversary_template` supplies the
/// architecture (untrained; cloned per mode).
#[allow(clippy::too_many_arguments)]
pub fn adversary_eval(
    target: &Model,
    plan: &SiftPlan,
    train_ds: &LabeledDataset,
    eval_ds: &LabeledDataset,
    adversary_template: &Model,
    adv_cfg: &TrainConfig,
    mode: AdversaryMode,
    repetitions: usize,
    seed: u64,
) -> Result<AdversaryOutcome> {
    let train_private = train_ds.with_private_as_labels()?;
    let eval_private = eval_ds.with_private_as_labels()?;

    // ceiling: adversary trained and evaluated on raw data
    let mut clean_adversary = adversary_template.clone();
    train_classifier(&mut clean_adversary, &train_private, adv_cfg)?;
    let adversary_clean_accuracy = accuracy(
        &clean_adversary,
        &eval_private.features,
        &eval_private.labels,
    )?;

    let adversary = match mode {
        AdversaryMode::NoRetrain => clean_adversary,
        AdversaryMode::Retrain => {
            // static augmentation: several sifted copies of the training set,
            // each with its own draws, stand in for querying the pipeline
            let copies = 4usize;
            let mut feats = Vec::new();
            let mut labels = Vec::new();
            for c in 0..copies {
                let sifted = sift(
                    &train_private.features,
                    plan,
                    seed.wrapping_add(31 + c as u64),
                )?;
                feats.extend_from_slice(sifted.data());
                labels.extend_from_slice(&train_private.labels);
            }
            let mut shape = train_private.features.shape().to_vec();
            shape[0] *= copies;
            let aug = LabeledDataset::new(Tensor::from_raw(shape, feats), labels)?;
            let mut adv = adversary_template.clone();
            train_classifier(&mut adv, &aug, adv_cfg)?;
            adv
        }
    };

    // adversary accuracy on sifted eval data, repeated for fresh draws
    let mut acc_sum = 0.0;
    for rep in 0..repetitions.max(1) {
        let sifted = sift(
            &eval_private.features,
            plan,
            seed.wrapping_add(101 + rep as u64),
        )?;
        acc_sum += predict_accuracy(&adversary, &sifted, &eval_private.labels)?;
    }
    let adversary_accuracy = acc_sum / repetitions.max(1) as f64;

    let target_report = evaluate_accuracy_stochastic(
        target,
        eval_ds,
        Some(plan),
        repetitions.max(1),
        seed.wrapping_add(1009),
        "adversary-target",
    )?;

    Ok(AdversaryOutcome {
        mode,
        suppression_ratio: plan.suppression_ratio(),
        adversary_accuracy,
        adversary_clean_accuracy,
        target_accuracy: target_report.mean_accuracy,
    })
}

#[derive(Debug, Clone)]
pub struct FairnessReport {
    /// |P(pred=1 | S=0) - P(pred=1 | S=1)|, in [0, 1].
    pub delta_demp: f64,
    /// sum over y of |P(pred=y | S=0, Y=y) - P(pred=y | S=1, Y=y)|, in [0, 2].
    pub delta_eo: f64,
    pub group_sizes: [usize; 2],
}

/// Demographic-parity and equalized-odds gaps for a binary task with a
/// binary sensitive attribute.
pub fn fairness_metrics(
    predictions: &[u32],
    labels: &[u32],
    sensitive: &[u32],
) -> Result<FairnessReport> {
    let n = predictions.len();
    if labels.len() != n || sensitive.len() != n || n == 0 {
        return Err(Error::InvalidArg {
            op: "fairness_metrics",
            msg: format!(
                "length mismatch: {n} predictions, {} labels, {} sensitive",
                labels.len(),
                sensitive.len()
            ),
        });
    }
    for (name, vals) in [
        ("prediction", predictions),
        ("label", labels),
        ("sensitive attribute", sensitive),
    ] {
        if let Some(&bad) = vals.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArg {
                op: "fairness_metrics",
                msg: format!("{name} {bad} is not binary"),
            });
        }
    }

    let group = |s: u32| -> Vec<usize> {
        (0..n).filter(|&i| sensitive[i] == s).collect()
    };
    let groups = [group(0), group(1)];
    for (s, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::EmptyCell {
                cell: format!("S={s}"),
            });
        }
    }

    let positive_rate = |g: &[usize]| -> f64 {
        g.iter().filter(|&&i| predictions[i] == 1).count() as f64 / g.len() as f64
    };
    let delta_demp = (positive_rate(&groups[0]) - positive_rate(&groups[1])).abs();

    let mut delta_eo = 0.0;
    for y in 0..2u32 {
        let mut rates = [0.0f64; 2];
        for (s, g) in groups.iter().enumerate() {
            let cell: Vec<usize> = g.iter().copied().filter(|&i| labels[i] == y).collect();
            if cell.is_empty() {
                return Err(Error::EmptyCell {
                    cell: format!("S={s},Y={y}"),
                });
            }
            rates[s] =
                cell.iter().filter(|&&i| predictions[i] == y).count() as f64 / cell.len() as f64;
        }
        delta_eo += (rates[0] - rates[1]).abs();
    }

    Ok(FairnessReport {
        delta_demp,
        delta_eo,
        group_sizes: [groups[0].len(), groups[1].len()],
    })
}

#[derive(Debug, Clone)]
pub struct BlackboxOutcome {
    pub target_clean_accuracy: f64,
    pub substitute_clean_accuracy: f64,
    /// Suppression ratio both plans were matched at.
    pub matched_suppression_ratio: f32,
    /// Plan trained against the target itself, evaluated on the target.
    pub white_box: EvalReport,
    /// Plan trained against the substitute only, evaluated on the target.
    pub black_box: EvalReport,
}

/// Full black-box protocol: disjoint splits, a target and a substitute
/// classifier, noise maps trained against each, suppression ratios matched
/// by threshold choice, both plans evaluated against the target.
pub fn blackbox_workflow(
    raw_train: &LabeledDataset,
    eval_ds: &LabeledDataset,
    target_arch: Arch,
    substitute_arch: Arch,
    classifier_cfg: &TrainConfig,
    lambda: f32,
    cfg: &ProtocolConfig,
) -> Result<BlackboxOutcome> {
    if raw_train.len() < 2 {
        return Err(Error::InvalidArg {
            op: "blackbox_workflow",
            msg: "dataset too small to split".into(),
        });
    }
    let splits = split_disjoint(raw_train, &[0.5, 0.5], cfg.seed)?;
    let num_classes = (raw_train.labels.iter().copied().max().unwrap_or(0) + 1) as usize;

    let mut target = build_model(target_arch, raw_train.item_shape(), num_classes, cfg.seed)?;
    train_classifier(&mut target, &splits[0], classifier_cfg)?;
    let mut substitute = build_model(
        substitute_arch,
        raw_train.item_shape(),
        num_classes,
        cfg.seed.wrapping_add(1),
    )?;
    train_classifier(&mut substitute, &splits[1], classifier_cfg)?;

    let target_clean = accuracy(&target, &eval_ds.features, &eval_ds.labels)?;
    let substitute_clean = accuracy(&substitute, &eval_ds.features, &eval_ds.labels)?;

    // white box: noise map + suppression values against the target, trained
    // on the target's own split
    let (_, white_plan) = build_plan(&target, &splits[0], lambda, cfg)?;
    let matched_sr = white_plan.suppression_ratio();

    // black box: everything against the substitute on the other split, with
    // the threshold picked to match the white-box suppression ratio
    let mut black_cfg = cfg.clone();
    black_cfg.seed = cfg.seed.wrapping_add(2);
    let (black_map, _) = build_plan(&substitute, &splits[1], lambda, &black_cfg)?;
    let black_sigma = black_map.sigma();
    let black_t = threshold_for_ratio(&black_sigma, matched_sr, cfg.cap);
    let (black_mask, _) = threshold_mask(&black_sigma, black_t, cfg.cap)?;
    let (black_mu_s, _) = train_suppression_values(
        &substitute.freeze(),
        &splits[1],
        &black_sigma,
        &black_mask,
        &black_map.mu,
        &cfg.suppression,
    )?;
    let black_plan = SiftPlan {
        mask: black_mask,
        mu_s: black_mu_s,
        sigma: black_sigma,
        scheme: Scheme::Trained,
        threshold: black_t,
    };

    let white_box = evaluate_accuracy_stochastic(
        &target,
        eval_ds,
        Some(&white_plan),
        cfg.repetitions,
        cfg.seed.wrapping_add(7),
        "blackbox-white",
    )?;
    let black_box = evaluate_accuracy_stochastic(
        &target,
        eval_ds,
        Some(&black_plan),
        cfg.repetitions,
        cfg.seed.wrapping_add(8),
        "blackbox-black",
    )?;

    Ok(BlackboxOutcome {
        target_clean_accuracy: target_clean,
        substitute_clean_accuracy: substitute_clean,
        matched_suppression_ratio: matched_sr,
        white_box,
        black_box,
    })
}

/// CSV serialization for every report type: header row, comma separators,
/// '.' decimal point. Rewriting a report with the same inputs reproduces the
/// file byte for byte.
pub mod csv {
    use super::*;
    use std::io::Write;
    use std::path::Path;

    fn write_lines(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for line in lines {
            writeln!(file, "{line}")?;
        }
        Ok(())
    }

    pub fn eval_reports(path: impl AsRef<Path>, reports: &[EvalReport]) -> Result<()> {
        let mut lines = vec![
            "task,scheme,suppression_ratio,mean_accuracy,accuracy_std,mi_loss_percent,repetitions,seed"
                .to_string(),
        ];
        for r in reports {
            lines.push(format!(
                "{},{},{},{},{},{},{},{}",
                r.task,
                r.scheme.map(|s| s.tag()).unwrap_or("none"),
                r.suppression_ratio,
                r.mean_accuracy,
                r.accuracy_std,
                r.mi_loss_percent.map(|v| v.to_string()).unwrap_or_default(),
                r.repetitions,
                r.seed
            ));
        }
        write_lines(path, &lines)
    }

    pub fn sweep(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
        let mut lines = vec![
            "lambda,mean_sigma,suppression_ratio,sieve_mi_loss,sieve_accuracy,sieve_accuracy_std,baseline_mi_loss,baseline_accuracy,failed"
                .to_string(),
        ];
        for p in points {
            lines.push(format!(
                "{},{},{},{},{},{},{},{},{}",
                p.lambda,
                p.mean_sigma,
                p.suppression_ratio,
                p.sieve_mi_loss,
                p.sieve_accuracy,
                p.sieve_accuracy_std,
                p.baseline_mi_loss,
                p.baseline_accuracy,
                p.failed.as_deref().unwrap_or("")
            ));
        }
        write_lines(path, &lines)
    }

    pub fn adversary(path: impl AsRef<Path>, outcomes: &[AdversaryOutcome]) -> Result<()> {
        let mut lines = vec![
            "mode,suppression_ratio,adversary_accuracy,adversary_clean_accuracy,target_accuracy"
                .to_string(),
        ];
        for o in outcomes {
            lines.push(format!(
                "{},{},{},{},{}",
                o.mode.tag(),
                o.suppression_ratio,
                o.adversary_accuracy,
                o.adversary_clean_accuracy,
                o.target_accuracy
            ));
        }
        write_lines(path, &lines)
    }

    pub fn fairness(
        path: impl AsRef<Path>,
        rows: &[(f32, FairnessReport)],
    ) -> Result<()> {
        let mut lines =
            vec!["suppression_ratio,delta_demp,delta_eo,group0,group1".to_string()];
        for (sr, r) in rows {
            lines.push(format!(
                "{},{},{},{},{}",
                sr, r.delta_demp, r.delta_eo, r.group_sizes[0], r.group_sizes[1]
            ));
        }
        write_lines(path, &lines)
    }
}
