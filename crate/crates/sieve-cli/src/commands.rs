//! Subcommand implementations. Each reads datasets/checkpoints per its
//! config, runs the corresponding library operation, writes SIV1 checkpoints
//! and/or CSV reports into the output directory next to a `run.meta` record,
//! and returns a one-line summary.

use crate::config::{Config, ConfigError};
use sieve_core::checkpoint::Checkpoint;
use sieve_core::data::{
    self, derive_binary_labels, load_idx, split_disjoint, LabeledDataset, LabelRule,
};
use sieve_core::evaluation::{
    self, adversary_eval, blackbox_workflow, evaluate_accuracy_stochastic, fairness_metrics,
    privacy_accuracy_sweep, AdversaryMode, ProtocolConfig,
};
use sieve_core::infotheory::{
    correlated_gaussian_pairs, estimate_entropy_kl, estimate_mi_ksg, mi_loss_percent,
    mi_upper_bound, Samples,
};
use sieve_core::nn::{build_model, train_classifier, Arch, Model, TrainConfig};
use sieve_core::noisemap::{
    train_noise_map_phased, NoiseMap, NoisePhase, NoiseTrainConfig,
};
use sieve_core::optim::OptimizerKind;
use sieve_core::suppression::{sift, threshold_mask, train_suppression_values, Scheme, SiftPlan};
use sieve_core::Error as CoreError;
use std::fmt::Write as _;
use std::path::PathBuf;

pub enum AppError {
    Usage(String),
    Config(ConfigError),
    Core(CoreError),
    MissingFile(PathBuf),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e)
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        AppError::Core(e)
    }
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::MissingFile(_) => 2,
            AppError::Core(CoreError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 2,
            AppError::Config(_) => 3,
            AppError::Core(
                CoreError::LogDomain { .. }
                | CoreError::NotPositiveDefinite { .. }
                | CoreError::Numeric { .. },
            ) => 4,
            AppError::Core(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            AppError::Usage(m) => m.clone(),
            AppError::Config(e) => e.to_string(),
            AppError::Core(e) => e.to_string(),
            AppError::MissingFile(p) => format!("missing input file: {}", p.display()),
        }
    }
}

pub struct Context {
    pub config: Config,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require_file(&self, key: &str, command: &str) -> Result<PathBuf, AppError> {
        let path = PathBuf::from(self.config.require(key, command)?);
        if !path.exists() {
            return Err(AppError::MissingFile(path));
        }
        Ok(path)
    }

    /// Write the config snapshot + seed + version record.
    fn write_run_meta(&self, command: &str) -> Result<(), AppError> {
        let mut snapshot = self.config.clone();
        snapshot.set("run.command", command);
        snapshot.set("run.seed", &self.seed.to_string());
        snapshot.set("run.version", env!("CARGO_PKG_VERSION"));
        std::fs::write(self.out("run.meta"), snapshot.serialize())
            .map_err(|e| AppError::Core(CoreError::Io(e)))?;
        Ok(())
    }

    fn train_config(&self, section: &str, seed_offset: u64) -> Result<TrainConfig, AppError> {
        let opt_tag = self
            .config
            .get(&format!("{section}.optimizer"))
            .unwrap_or("adam");
        let optimizer: OptimizerKind = opt_tag.parse().map_err(|_| {
            AppError::Config(ConfigError::TypeMismatch {
                key: format!("{section}.optimizer"),
                value: opt_tag.to_string(),
                expected: "adam | sgd",
            })
        })?;
        Ok(TrainConfig {
            epochs: self.config.get_or(&format!("{section}.epochs"), 5, "integer")?,
            lr: self.config.get_or(&format!("{section}.lr"), 1e-3, "number")?,
            batch_size: self
                .config
                .get_or(&format!("{section}.batch_size"), 64, "integer")?,
            optimizer,
            seed: self.seed.wrapping_add(seed_offset),
        })
    }

    /// Dataset from a config section (`data` or `eval`).
    fn load_dataset(&self, section: &str, command: &str) -> Result<LabeledDataset, AppError> {
        let source = self.config.require(&format!("{section}.source"), command)?;
        let seed: u64 = self
            .config
            .get_or(&format!("{section}.seed"), self.seed, "integer")?;
        let n: usize = self.config.get_or(&format!("{section}.n"), 1000, "integer")?;
        let ds = match source {
            "idx" => {
                let images = self.require_file(&format!("{section}.images"), command)?;
                let labels = self.require_file(&format!("{section}.labels"), command)?;
                load_idx(images, labels)?
            }
            "digits" => {
                let ds = data::generate_digits(n, seed)?;
                data::pad_centered(&ds, 32)?
            }
            "two_attribute" => {
                let noise: f32 = self
                    .config
                    .get_or(&format!("{section}.noise_level"), 0.05, "number")?;
                data::generate_two_attribute(n, seed, noise)?
            }
            "biased" => {
                let bias: f32 = self
                    .config
                    .get_or(&format!("{section}.bias_rate"), 0.8, "number")?;
                let flip: f32 = self
                    .config
                    .get_or(&format!("{section}.label_flip"), 0.1, "number")?;
                data::generate_biased(n, seed, bias, flip)?
            }
            other => {
                return Err(AppError::Config(ConfigError::TypeMismatch {
                    key: format!("{section}.source"),
                    value: other.to_string(),
                    expected: "idx | digits | two_attribute | biased",
                }))
            }
        };
        let ds = match self.config.get(&format!("{section}.rule")) {
            None => ds,
            Some(rule) => {
                let rule: LabelRule = rule.parse().map_err(|_| {
                    AppError::Config(ConfigError::TypeMismatch {
                        key: format!("{section}.rule"),
                        value: rule.to_string(),
                        expected: "gt5 | identity",
                    })
                })?;
                derive_binary_labels(&ds, rule)
            }
        };
        Ok(ds)
    }

    /// Train/eval pair: explicit `[eval]` section if present, otherwise a
    /// seeded disjoint split of `[data]` by `data.eval_fraction`.
    fn load_train_eval(
        &self,
        command: &str,
    ) -> Result<(LabeledDataset, LabeledDataset), AppError> {
        let train = self.load_dataset("data", command)?;
        if self.config.keys().any(|k| k.starts_with("eval.") && k != "eval.repetitions" && k != "eval.mi_samples" && k != "eval.task") {
            let eval = self.load_dataset("eval", command)?;
            return Ok((train, eval));
        }
        let frac: f64 = self
            .config
            .get_or("data.eval_fraction", 0.25, "number")?;
        if !(0.0..1.0).contains(&frac) || frac == 0.0 {
            return Err(AppError::Config(ConfigError::TypeMismatch {
                key: "data.eval_fraction".into(),
                value: frac.to_string(),
                expected: "fraction in (0, 1)",
            }));
        }
        let splits = split_disjoint(&train, &[1.0 - frac, frac], self.seed.wrapping_add(0x5e))?;
        let mut it = splits.into_iter();
        let train = it.next().expect("two splits");
        let eval = it.next().expect("two splits");
        Ok((train, eval))
    }

    fn noise_phases(
        &self,
        lambda: f32,
        command: &str,
    ) -> Result<(f32, Vec<NoisePhase>), AppError> {
        let _ = command;
        let cap: f32 = self.config.get_or("noise.cap", 1.5, "number")?;
        let mc: usize = self.config.get_or("noise.mc_samples", 1, "integer")?;
        let base = self.train_config("train", 0x17)?;
        let warmup_epochs: usize =
            self.config.get_or("noise.warmup_epochs", 0, "integer")?;
        let mut phases = Vec::new();
        if warmup_epochs > 0 {
            let warmup_lr: f32 = self
                .config
                .get_or("noise.warmup_lr", 0.1, "number")?;
            phases.push(NoisePhase {
                lambda: 0.0,
                cfg: NoiseTrainConfig {
                    base: TrainConfig {
                        epochs: warmup_epochs,
                        lr: warmup_lr,
                        ..base
                    },
                    mc_samples: 1,
                },
            });
        }
        phases.push(NoisePhase {
            lambda,
            cfg: NoiseTrainConfig {
                base,
                mc_samples: mc,
            },
        });
        let settle_epochs: usize = self.config.get_or("noise.settle_epochs", 0, "integer")?;
        if settle_epochs > 0 {
            let settle_lr: f32 = self.config.get_or("noise.settle_lr", 0.01, "number")?;
            phases.push(NoisePhase {
                lambda,
                cfg: NoiseTrainConfig {
                    base: TrainConfig {
                        epochs: settle_epochs,
                        lr: settle_lr,
                        ..base
                    },
                    mc_samples: mc,
                },
            });
        }
        Ok((cap, phases))
    }

    fn protocol_config(&self, command: &str) -> Result<ProtocolConfig, AppError> {
        let lambda_placeholder = 1.0;
        let (cap, phases) = self.noise_phases(lambda_placeholder, command)?;
        let phase_lambda_scale = phases
            .iter()
            .map(|p| p.lambda / lambda_placeholder)
            .collect();
        let phase_cfgs = phases.iter().map(|p| p.cfg).collect();
        Ok(ProtocolConfig {
            phase_lambda_scale,
            phase_cfgs,
            cap,
            threshold: self.config.get_parsed("suppression.threshold", "number")?,
            suppression: self.train_config("suppression", 0x23)?,
            repetitions: self.config.get_or("eval.repetitions", 10, "integer")?,
            mi_max_samples: self.config.get_or("eval.mi_samples", 1000, "integer")?,
            seed: self.seed,
        })
    }
}

const DATA_KEYS: &[&str] = &[
    "data.source",
    "data.images",
    "data.labels",
    "data.n",
    "data.seed",
    "data.noise_level",
    "data.bias_rate",
    "data.label_flip",
    "data.rule",
    "data.eval_fraction",
];
const EVAL_DATA_KEYS: &[&str] = &[
    "eval.source",
    "eval.images",
    "eval.labels",
    "eval.n",
    "eval.seed",
    "eval.noise_level",
    "eval.bias_rate",
    "eval.label_flip",
    "eval.rule",
];
const TRAIN_KEYS: &[&str] = &[
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.optimizer",
];
const NOISE_KEYS: &[&str] = &[
    "noise.lambda",
    "noise.gamma",
    "noise.cap",
    "noise.mc_samples",
    "noise.warmup_epochs",
    "noise.warmup_lr",
    "noise.settle_epochs",
    "noise.settle_lr",
];
const SUPPRESSION_KEYS: &[&str] = &[
    "suppression.threshold",
    "suppression.scheme",
    "suppression.epochs",
    "suppression.lr",
    "suppression.batch_size",
    "suppression.optimizer",
];
const EVAL_KEYS: &[&str] = &["eval.repetitions", "eval.mi_samples", "eval.task"];

fn concat<'a>(parts: &[&[&'a str]]) -> Vec<&'a str> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn train_classifier_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "train-classifier";
    let known = concat(&[DATA_KEYS, TRAIN_KEYS, &["model.arch", "model.classes"]]);
    ctx.config.check_known(&known, command)?;
    let ds = ctx.load_dataset("data", command)?;
    let arch: Arch = ctx.config.require("model.arch", command)?.parse()?;
    let classes: usize = match ctx.config.get_parsed("model.classes", "integer")? {
        Some(k) => k,
        None => (ds.labels.iter().copied().max().unwrap_or(0) + 1) as usize,
    };
    let cfg = ctx.train_config("train", 0)?;
    let mut model = build_model(arch, ds.item_shape(), classes, ctx.seed)?;
    let history = train_classifier(&mut model, &ds, &cfg)?;
    model.save(ctx.out("model.siv"))?;
    let mut lines = vec!["epoch,loss,accuracy".to_string()];
    for (i, h) in history.iter().enumerate() {
        lines.push(format!("{},{},{}", i + 1, h.loss, h.accuracy));
    }
    std::fs::write(ctx.out("history.csv"), lines.join("\n") + "\n")
        .map_err(|e| AppError::Core(CoreError::Io(e)))?;
    ctx.write_run_meta(command)?;
    let last = history.last().expect("at least one epoch");
    Ok(format!(
        "trained {} on {} items for {} epochs: loss {:.4}, accuracy {:.4} -> {}",
        arch.tag(),
        ds.len(),
        cfg.epochs,
        last.loss,
        last.accuracy,
        ctx.out("model.siv").display()
    ))
}

pub fn train_noise_map_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "train-noise-map";
    let known = concat(&[DATA_KEYS, TRAIN_KEYS, NOISE_KEYS, &["model.path"]]);
    ctx.config.check_known(&known, command)?;
    let model = Model::load(ctx.require_file("model.path", command)?)?;
    let ds = ctx.load_dataset("data", command)?;
    let lambda = ctx
        .config
        .lambda("noise")?
        .ok_or(ConfigError::MissingKey {
            key: "noise.lambda (or noise.gamma)".into(),
            command: command.into(),
        })?;
    let (cap, phases) = ctx.noise_phases(lambda, command)?;
    let mut map = NoiseMap::new(ds.item_shape(), cap, lambda)?;
    let history = train_noise_map_phased(&model.freeze(), &ds, &mut map, &phases)?;
    map.lambda = lambda;
    map.save(ctx.out("noisemap.siv"))?;
    let mut lines = vec!["epoch,total,privacy_term,utility_ce,mean_sigma".to_string()];
    for (i, h) in history.iter().enumerate() {
        lines.push(format!(
            "{},{},{},{},{}",
            i + 1,
            h.total,
            h.privacy_term,
            h.utility_ce,
            h.mean_sigma
        ));
    }
    std::fs::write(ctx.out("noise_history.csv"), lines.join("\n") + "\n")
        .map_err(|e| AppError::Core(CoreError::Io(e)))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "trained noise map (lambda {}, M {}): mean sigma {:.4} -> {}",
        lambda,
        cap,
        map.sigma().mean_all(),
        ctx.out("noisemap.siv").display()
    ))
}

pub fn train_suppression_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "train-suppression";
    let known = concat(&[
        DATA_KEYS,
        SUPPRESSION_KEYS,
        &["model.path", "noisemap.path"],
    ]);
    ctx.config.check_known(&known, command)?;
    let model = Model::load(ctx.require_file("model.path", command)?)?;
    let map = NoiseMap::load(ctx.require_file("noisemap.path", command)?)?;
    let ds = ctx.load_dataset("data", command)?;
    let sigma = map.sigma();
    let threshold: f32 = ctx
        .config
        .get_or("suppression.threshold", map.cap / 2.0, "number")?;
    let scheme: Scheme = ctx
        .config
        .get("suppression.scheme")
        .unwrap_or("trained")
        .parse()?;
    let (mask, ratio) = threshold_mask(&sigma, threshold, map.cap)?;
    let cfg = ctx.train_config("suppression", 0x23)?;
    let (mu_s, status) =
        train_suppression_values(&model.freeze(), &ds, &sigma, &mask, &map.mu, &cfg)?;
    let plan = SiftPlan {
        mask,
        mu_s,
        sigma,
        scheme,
        threshold,
    };
    plan.save(ctx.out("plan.siv"))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "built {} plan at T {}: suppression ratio {:.4} ({:?}) -> {}",
        scheme.tag(),
        threshold,
        ratio,
        status,
        ctx.out("plan.siv").display()
    ))
}

pub fn sift_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "sift";
    ctx.config
        .check_known(&["plan.path", "input.path"], command)?;
    let plan = SiftPlan::load(ctx.require_file("plan.path", command)?)?;
    let input_ck = Checkpoint::read(ctx.require_file("input.path", command)?)?;
    let input = input_ck.require("data")?;
    let sifted = sift(input, &plan, ctx.seed)?;
    let mut out_ck = Checkpoint::new();
    out_ck.push("data", sifted);
    out_ck.write(ctx.out("sifted.siv"))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "sifted {} items ({} scheme, SR {:.4}) -> {}",
        input.shape()[0],
        plan.scheme.tag(),
        plan.suppression_ratio(),
        ctx.out("sifted.siv").display()
    ))
}

pub fn evaluate_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "evaluate";
    let known = concat(&[DATA_KEYS, EVAL_KEYS, &["model.path", "plan.path"]]);
    ctx.config.check_known(&known, command)?;
    let model = Model::load(ctx.require_file("model.path", command)?)?;
    let ds = ctx.load_dataset("data", command)?;
    let plan = match ctx.config.get("plan.path") {
        Some(_) => Some(SiftPlan::load(ctx.require_file("plan.path", command)?)?),
        None => None,
    };
    let reps: usize = ctx.config.get_or("eval.repetitions", 10, "integer")?;
    let task = ctx.config.get("eval.task").unwrap_or("evaluate").to_string();
    let mut report =
        evaluate_accuracy_stochastic(&model, &ds, plan.as_ref(), reps, ctx.seed, &task)?;
    if let (Some(plan), Some(mi_samples)) = (
        plan.as_ref(),
        ctx.config.get_parsed::<usize>("eval.mi_samples", "integer")?,
    ) {
        let idx: Vec<usize> = (0..ds.len().min(mi_samples)).collect();
        let raw = ds.batch_features(&idx);
        let sifted = sift(&raw, plan, ctx.seed.wrapping_add(0x77))?;
        let channels = if ds.item_shape().len() == 3 {
            ds.item_shape()[0]
        } else {
            1
        };
        report.mi_loss_percent = Some(mi_loss_percent(&raw, &sifted, channels)?);
    }
    evaluation::csv::eval_reports(ctx.out("report.csv"), std::slice::from_ref(&report))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "accuracy {:.4} (std {:.4}) over {} repetitions{} -> {}",
        report.mean_accuracy,
        report.accuracy_std,
        report.repetitions,
        report
            .mi_loss_percent
            .map(|v| format!(", MI loss {v:.2}%"))
            .unwrap_or_default(),
        ctx.out("report.csv").display()
    ))
}

pub fn sweep_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "sweep";
    let known = concat(&[
        DATA_KEYS,
        EVAL_DATA_KEYS,
        TRAIN_KEYS,
        NOISE_KEYS,
        SUPPRESSION_KEYS,
        EVAL_KEYS,
        &["model.path", "sweep.lambdas"],
    ]);
    ctx.config.check_known(&known, command)?;
    let model = Model::load(ctx.require_file("model.path", command)?)?;
    let (train, eval) = ctx.load_train_eval(command)?;
    let lambdas: Vec<f32> = ctx
        .config
        .require("sweep.lambdas", command)?
        .split(',')
        .map(|s| {
            s.trim().parse::<f32>().map_err(|_| {
                AppError::Config(ConfigError::TypeMismatch {
                    key: "sweep.lambdas".into(),
                    value: s.to_string(),
                    expected: "comma-separated numbers",
                })
            })
        })
        .collect::<Result<_, _>>()?;
    let cfg = ctx.protocol_config(command)?;
    let points = privacy_accuracy_sweep(&model, &train, &eval, &lambdas, &cfg)?;
    evaluation::csv::sweep(ctx.out("sweep.csv"), &points)?;
    ctx.write_run_meta(command)?;
    let ok = points.iter().filter(|p| p.failed.is_none()).count();
    Ok(format!(
        "swept {} lambda values ({} succeeded) -> {}",
        points.len(),
        ok,
        ctx.out("sweep.csv").display()
    ))
}

pub fn adversary_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "adversary";
    let known = concat(&[
        DATA_KEYS,
        EVAL_DATA_KEYS,
        &[
            "model.path",
            "plan.path",
            "adversary.hidden",
            "adversary.epochs",
            "adversary.lr",
            "adversary.batch_size",
            "adversary.optimizer",
            "adversary.mode",
            "eval.repetitions",
        ],
    ]);
    ctx.config.check_known(&known, command)?;
    let target = Model::load(ctx.require_file("model.path", command)?)?;
    let plan = SiftPlan::load(ctx.require_file("plan.path", command)?)?;
    let (train, eval) = ctx.load_train_eval(command)?;
    let hidden: usize = ctx.config.get_or("adversary.hidden", 32, "integer")?;
    let template = Model::mlp_with_hidden(train.item_shape(), hidden, 2, ctx.seed ^ 0xadf)?;
    let adv_cfg = ctx.train_config("adversary", 0xadf)?;
    let reps: usize = ctx.config.get_or("eval.repetitions", 10, "integer")?;
    let modes: Vec<AdversaryMode> = match ctx.config.get("adversary.mode").unwrap_or("both") {
        "no_retrain" => vec![AdversaryMode::NoRetrain],
        "retrain" => vec![AdversaryMode::Retrain],
        "both" => vec![AdversaryMode::NoRetrain, AdversaryMode::Retrain],
        other => {
            return Err(AppError::Config(ConfigError::TypeMismatch {
                key: "adversary.mode".into(),
                value: other.to_string(),
                expected: "no_retrain | retrain | both",
            }))
        }
    };
    let mut outcomes = Vec::new();
    for mode in modes {
        outcomes.push(adversary_eval(
            &target, &plan, &train, &eval, &template, &adv_cfg, mode, reps, ctx.seed,
        )?);
    }
    evaluation::csv::adversary(ctx.out("adversary.csv"), &outcomes)?;
    ctx.write_run_meta(command)?;
    let mut summary = String::new();
    for o in &outcomes {
        let _ = write!(
            summary,
            "[{} adversary {:.4} target {:.4}] ",
            o.mode.tag(),
            o.adversary_accuracy,
            o.target_accuracy
        );
    }
    Ok(format!(
        "{}-> {}",
        summary,
        ctx.out("adversary.csv").display()
    ))
}

pub fn fairness_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "fairness";
    let known = concat(&[
        DATA_KEYS,
        EVAL_DATA_KEYS,
        &["model.path", "plan.path", "eval.repetitions"],
    ]);
    ctx.config.check_known(&known, command)?;
    let model = Model::load(ctx.require_file("model.path", command)?)?;
    let plan = SiftPlan::load(ctx.require_file("plan.path", command)?)?;
    let (_, eval) = ctx.load_train_eval(command)?;
    let sensitive = eval.sensitive.clone().ok_or_else(|| {
        AppError::Core(CoreError::InvalidArg {
            op: "fairness",
            msg: "dataset has no sensitive attribute".into(),
        })
    })?;

    let clean_preds: Vec<u32> = model
        .predict(&eval.features)?
        .argmax_rows()?
        .iter()
        .map(|&p| p as u32)
        .collect();
    let clean = fairness_metrics(&clean_preds, &eval.labels, &sensitive)?;

    let sifted = sift(&eval.features, &plan, ctx.seed)?;
    let sifted_preds: Vec<u32> = model
        .predict(&sifted)?
        .argmax_rows()?
        .iter()
        .map(|&p| p as u32)
        .collect();
    let protected = fairness_metrics(&sifted_preds, &eval.labels, &sensitive)?;

    evaluation::csv::fairness(
        ctx.out("fairness.csv"),
        &[(0.0, clean.clone()), (plan.suppression_ratio(), protected.clone())],
    )?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "demographic parity gap {:.4} -> {:.4}, equalized odds gap {:.4} -> {:.4} at SR {:.3} -> {}",
        clean.delta_demp,
        protected.delta_demp,
        clean.delta_eo,
        protected.delta_eo,
        plan.suppression_ratio(),
        ctx.out("fairness.csv").display()
    ))
}

pub fn blackbox_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "blackbox";
    let known = concat(&[
        DATA_KEYS,
        EVAL_DATA_KEYS,
        TRAIN_KEYS,
        NOISE_KEYS,
        SUPPRESSION_KEYS,
        EVAL_KEYS,
        &[
            "model.target_arch",
            "model.substitute_arch",
            "classifier.epochs",
            "classifier.lr",
            "classifier.batch_size",
            "classifier.optimizer",
        ],
    ]);
    ctx.config.check_known(&known, command)?;
    let (train, eval) = ctx.load_train_eval(command)?;
    let target_arch: Arch = ctx.config.require("model.target_arch", command)?.parse()?;
    let substitute_arch: Arch = ctx
        .config
        .require("model.substitute_arch", command)?
        .parse()?;
    let classifier_cfg = ctx.train_config("classifier", 0x31)?;
    let lambda = ctx.config.lambda("noise")?.ok_or(ConfigError::MissingKey {
        key: "noise.lambda (or noise.gamma)".into(),
        command: command.into(),
    })?;
    let cfg = ctx.protocol_config(command)?;
    let outcome = blackbox_workflow(
        &train,
        &eval,
        target_arch,
        substitute_arch,
        &classifier_cfg,
        lambda,
        &cfg,
    )?;
    evaluation::csv::eval_reports(
        ctx.out("blackbox.csv"),
        &[outcome.white_box.clone(), outcome.black_box.clone()],
    )?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "target clean {:.4}, substitute clean {:.4}; white-box {:.4} vs black-box {:.4} at SR {:.3} -> {}",
        outcome.target_clean_accuracy,
        outcome.substitute_clean_accuracy,
        outcome.white_box.mean_accuracy,
        outcome.black_box.mean_accuracy,
        outcome.matched_suppression_ratio,
        ctx.out("blackbox.csv").display()
    ))
}

pub fn estimate_mi_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "estimate-mi";
    let known = concat(&[
        &[
            "data.source",
            "data.n",
            "data.corr",
            "data.seed",
            "x.path",
            "y.path",
            "mi.k",
        ][..],
    ]);
    ctx.config.check_known(&known, command)?;
    let k: usize = ctx.config.get_or("mi.k", 3, "integer")?;
    let (x, y, label) = match ctx.config.get("data.source") {
        Some("gaussian_fixture") => {
            let n: usize = ctx.config.get_or("data.n", 5000, "integer")?;
            let corr: f64 = ctx.config.get_or("data.corr", 0.9, "number")?;
            let seed: u64 = ctx.config.get_or("data.seed", ctx.seed, "integer")?;
            let (x, y) = correlated_gaussian_pairs(n, corr, seed);
            (x, y, format!("gaussian fixture (corr {corr}, n {n})"))
        }
        Some(other) => {
            return Err(AppError::Config(ConfigError::TypeMismatch {
                key: "data.source".into(),
                value: other.to_string(),
                expected: "gaussian_fixture (or x.path/y.path tensors)",
            }))
        }
        None => {
            let xt = Checkpoint::read(ctx.require_file("x.path", command)?)?;
            let yt = Checkpoint::read(ctx.require_file("y.path", command)?)?;
            let x = Samples::from_batch(xt.require("data")?)?;
            let y = Samples::from_batch(yt.require("data")?)?;
            (x, y, "tensor pair".to_string())
        }
    };
    let est = estimate_mi_ksg(&x, &y, k)?;
    let h = estimate_entropy_kl(&x)?;
    let lines = vec![
        "value_nats,value_bits,k,n_samples,method,degenerate,entropy_x_nats".to_string(),
        format!(
            "{},{},{},{},{},{},{}",
            est.value,
            est.value / std::f64::consts::LN_2,
            est.k,
            est.n_samples,
            est.method,
            est.degenerate,
            h
        ),
    ];
    std::fs::write(ctx.out("mi.csv"), lines.join("\n") + "\n")
        .map_err(|e| AppError::Core(CoreError::Io(e)))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "MI({label}) = {:.3} nats ({:.3} bits), k = {}, N = {}{} -> {}",
        est.value,
        est.value / std::f64::consts::LN_2,
        est.k,
        est.n_samples,
        if est.degenerate { " [degenerate]" } else { "" },
        ctx.out("mi.csv").display()
    ))
}

pub fn bound_cmd(ctx: &Context) -> Result<String, AppError> {
    let command = "bound";
    let known = concat(&[
        &[
            "data.source",
            "data.n",
            "data.corr",
            "data.seed",
            "x.path",
            "bound.sigma",
            "noisemap.path",
        ][..],
    ]);
    ctx.config.check_known(&known, command)?;
    let x = match ctx.config.get("data.source") {
        Some("gaussian_fixture") => {
            let n: usize = ctx.config.get_or("data.n", 5000, "integer")?;
            let corr: f64 = ctx.config.get_or("data.corr", 0.0, "number")?;
            let seed: u64 = ctx.config.get_or("data.seed", ctx.seed, "integer")?;
            correlated_gaussian_pairs(n, corr, seed).0
        }
        Some(other) => {
            return Err(AppError::Config(ConfigError::TypeMismatch {
                key: "data.source".into(),
                value: other.to_string(),
                expected: "gaussian_fixture (or x.path tensor)",
            }))
        }
        None => {
            let xt = Checkpoint::read(ctx.require_file("x.path", command)?)?;
            Samples::from_batch(xt.require("data")?)?
        }
    };
    let sigma: Vec<f64> = match ctx.config.get("noisemap.path") {
        Some(_) => {
            let map = NoiseMap::load(ctx.require_file("noisemap.path", command)?)?;
            map.sigma().data().iter().map(|&v| v as f64).collect()
        }
        None => {
            let s: f64 = ctx.config.get_or("bound.sigma", 1.0, "number")?;
            vec![s; x.d]
        }
    };
    if sigma.len() != x.d {
        return Err(AppError::Core(CoreError::InvalidArg {
            op: "bound",
            msg: format!("{} noise scales for data dimension {}", sigma.len(), x.d),
        }));
    }
    let bound = mi_upper_bound(&x, &sigma)?;
    let lines = vec![
        "log_det_nats,product_form_nats".to_string(),
        format!("{},{}", bound.log_det_nats, bound.product_form_nats),
    ];
    std::fs::write(ctx.out("bound.csv"), lines.join("\n") + "\n")
        .map_err(|e| AppError::Core(CoreError::Io(e)))?;
    ctx.write_run_meta(command)?;
    Ok(format!(
        "upper bound {:.3} nats (log-det form), {:.3} nats (product form, approximate) -> {}",
        bound.log_det_nats,
        bound.product_form_nats,
        ctx.out("bound.csv").display()
    ))
}
