//! Temporary calibration harness (removed before release).

use sieve_core::data;
use sieve_core::evaluation::{evaluate_accuracy_stochastic, ProtocolConfig, build_plan, blackbox_workflow};
use sieve_core::nn::{accuracy, build_model, train_classifier, Arch, TrainConfig};
use sieve_core::noisemap::NoiseTrainConfig;
use sieve_core::optim::OptimizerKind;
use sieve_core::suppression::{threshold_for_ratio, threshold_mask, train_suppression_values, Scheme, SiftPlan};
use std::time::Instant;

#[test]
#[ignore]
fn calibrate_digit_corpus() {
    let t0 = Instant::now();
    let train = data::pad_centered(&data::generate_digits(10_000, 1).unwrap(), 32).unwrap();
    let train = data::derive_binary_labels(&train, data::LabelRule::Gt5);
    let test = data::pad_centered(&data::generate_digits(2_000, 2).unwrap(), 32).unwrap();
    let test = data::derive_binary_labels(&test, data::LabelRule::Gt5);
    let noise_subset = train.subset(&(0..2000).collect::<Vec<_>>());

    let mut model = build_model(Arch::LenetLite, &[1, 32, 32], 2, 3).unwrap();
    let cls_cfg = TrainConfig { epochs: 4, lr: 1e-3, batch_size: 128, optimizer: OptimizerKind::Adam, seed: 3 };
    train_classifier(&mut model, &train, &cls_cfg).unwrap();
    let clean = accuracy(&model, &test.features, &test.labels).unwrap();
    println!("lenet test acc {clean:.4} ({:?})", t0.elapsed());

    for &lambda in &[1.5f32, 3.0] {
        let t2 = Instant::now();
        let cfg = ProtocolConfig {
            phase_lambda_scale: vec![1.0, 1.0],
            phase_cfgs: vec![
                NoiseTrainConfig { base: TrainConfig { epochs: 80, lr: 0.05, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 6 }, mc_samples: 2 },
                NoiseTrainConfig { base: TrainConfig { epochs: 20, lr: 0.01, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 7 }, mc_samples: 2 },
            ],
            cap: 1.5,
            threshold: None,
            suppression: TrainConfig { epochs: 4, lr: 0.02, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 8 },
            repetitions: 10,
            mi_max_samples: 600,
            seed: 9,
        };
        let (map, plan) = build_plan(&model, &noise_subset, lambda, &cfg).unwrap();
        let sigma = map.sigma();
        let tails = sigma.data().iter().filter(|&&s| s <= 0.15 || s >= 1.35).count() as f64 / sigma.len() as f64;
        println!("lambda={lambda}: natural sr={:.3} tails={tails:.3} ms={:.3} ({:?})", plan.suppression_ratio(), sigma.mean_all(), t2.elapsed());
        for (label, mask, tq) in [
            ("natural", plan.mask.clone(), plan.threshold),
            ("sr0.9", {
                let tq = threshold_for_ratio(&sigma, 0.9, 1.5);
                threshold_mask(&sigma, tq, 1.5).unwrap().0
            }, threshold_for_ratio(&sigma, 0.9, 1.5)),
        ] {
            let (mu_s, _) = train_suppression_values(
                &model.freeze(), &noise_subset, &sigma, &mask, &map.mu,
                &TrainConfig { epochs: 4, lr: 0.02, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 15 },
            ).unwrap();
            let sr = 1.0 - mask.mean_all();
            let mut line = format!("  {label} (sr {sr:.3}):");
            for scheme in [Scheme::Trained, Scheme::Noisy, Scheme::Zeros] {
                let p = SiftPlan { mask: mask.clone(), mu_s: mu_s.clone(), sigma: sigma.clone(), scheme, threshold: tq };
                let r = evaluate_accuracy_stochastic(&model, &test, Some(&p), 10, 66, "s").unwrap();
                line += &format!(" {}={:.4}", scheme.tag(), r.mean_accuracy);
            }
            println!("{line}");
        }
    }

    // blackbox with properly trained substitute
    let t4 = Instant::now();
    let cfg = ProtocolConfig {
        phase_lambda_scale: vec![1.0, 1.0],
        phase_cfgs: vec![
            NoiseTrainConfig { base: TrainConfig { epochs: 30, lr: 0.05, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 6 }, mc_samples: 2 },
            NoiseTrainConfig { base: TrainConfig { epochs: 10, lr: 0.01, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 7 }, mc_samples: 2 },
        ],
        cap: 1.5,
        threshold: None,
        suppression: TrainConfig { epochs: 4, lr: 0.02, batch_size: 64, optimizer: OptimizerKind::Adam, seed: 8 },
        repetitions: 10,
        mi_max_samples: 600,
        seed: 9,
    };
    let cls_cfg = TrainConfig { epochs: 40, lr: 3e-3, batch_size: 128, optimizer: OptimizerKind::Adam, seed: 81 };
    for &lambda in &[10.0f32, 100.0] {
        let bb = blackbox_workflow(&train, &test, Arch::LenetLite, Arch::Mlp, &cls_cfg, lambda, &cfg).unwrap();
        println!(
            "blackbox lambda={lambda}: target {:.4} sub {:.4} white {:.4} black {:.4} sr {:.3} ({:?})",
            bb.target_clean_accuracy, bb.substitute_clean_accuracy,
            bb.white_box.mean_accuracy, bb.black_box.mean_accuracy,
            bb.matched_suppression_ratio, t4.elapsed()
        );
    }
    println!("total {:?}", t0.elapsed());
}
