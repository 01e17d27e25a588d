//! Run configuration and its flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is optional and
//! falls back to its default, but unknown or repeated keys are rejected.
//! [`RunConfig::canonical_text`] writes every key in sorted order.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceMode;
use crate::losses::PseudoLabelConfig;
use crate::nn::MlpArchitecture;
use crate::scenario::{parse_value, StreamSpec};
use crate::wsn::SupplementationRule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccuracyMetric {
    /// Mean over tasks of per-task accuracy.
    TaskMean,
    /// Accuracy over all final-row test samples pooled together.
    SamplePooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stream: StreamSpec,
    pub hidden: Vec<usize>,
    pub sparsity: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub pseudo_threshold: f64,
    pub eps_stab: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub score_lr: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub epochs_first: usize,
    pub epochs_mid: usize,
    pub epochs_late: usize,
    pub epoch_scale: f64,
    pub eval_batch: usize,
    pub probe_size: usize,
    pub use_contrastive: bool,
    pub use_pseudo: bool,
    pub use_ensemble: bool,
    pub metric: AccuracyMetric,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stream: StreamSpec::default(),
            hidden: vec![128, 64],
            sparsity: 0.5,
            gamma: 2.0,
            alpha: 0.01,
            beta: 1.0,
            pseudo_threshold: 0.6,
            eps_stab: 1e-8,
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 1e-4,
            score_lr: 10.0,
            labeled_batch: 32,
            unlabeled_batch: 64,
            epochs_first: 200,
            epochs_mid: 100,
            epochs_late: 50,
            epoch_scale: 0.1,
            eval_batch: 256,
            probe_size: 64,
            use_contrastive: true,
            use_pseudo: true,
            use_ensemble: true,
            metric: AccuracyMetric::TaskMean,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("invalid boolean {other:?} for key {key}"))),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.stream.set_key(key, value)? {
            return Ok(());
        }
        match key {
            "hidden" => {
                self.hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse_value(key, w))
                        .collect::<Result<_>>()?
                }
            }
            "sparsity" => self.sparsity = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "pseudo_threshold" => self.pseudo_threshold = parse_value(key, value)?,
            "eps_stab" => self.eps_stab = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "score_lr" => self.score_lr = parse_value(key, value)?,
            "labeled_batch" => self.labeled_batch = parse_value(key, value)?,
            "unlabeled_batch" => self.unlabeled_batch = parse_value(key, value)?,
            "epochs_first" => self.epochs_first = parse_value(key, value)?,
            "epochs_mid" => self.epochs_mid = parse_value(key, value)?,
            "epochs_late" => self.epochs_late = parse_value(key, value)?,
            "epoch_scale" => self.epoch_scale = parse_value(key, value)?,
            "eval_batch" => self.eval_batch = parse_value(key, value)?,
            "probe_size" => self.probe_size = parse_value(key, value)?,
            "use_contrastive" => self.use_contrastive = parse_bool(key, value)?,
            "use_pseudo" => self.use_pseudo = parse_bool(key, value)?,
            "use_ensemble" => self.use_ensemble = parse_bool(key, value)?,
            "metric" => {
                self.metric = match value.trim() {
                    "task_mean" => AccuracyMetric::TaskMean,
                    "sample_pooled" => AccuracyMetric::SamplePooled,
                    other => return Err(Error::Config(format!("unknown metric {other:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its value, sorted by key.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let metric = match self.metric {
            AccuracyMetric::TaskMean => "task_mean",
            AccuracyMetric::SamplePooled => "sample_pooled",
        };
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let mut kv: Vec<(String, String)> = vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("epoch_scale", self.epoch_scale.to_string()),
            ("epochs_first", self.epochs_first.to_string()),
            ("epochs_late", self.epochs_late.to_string()),
            ("epochs_mid", self.epochs_mid.to_string()),
            ("eps_stab", self.eps_stab.to_string()),
            ("eval_batch", self.eval_batch.to_string()),
            ("gamma", self.gamma.to_string()),
            ("hidden", hidden.join(",")),
            ("labeled_batch", self.labeled_batch.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("metric", metric.to_string()),
            ("probe_size", self.probe_size.to_string()),
            ("pseudo_threshold", self.pseudo_threshold.to_string()),
            ("score_lr", self.score_lr.to_string()),
            ("sparsity", self.sparsity.to_string()),
            ("unlabeled_batch", self.unlabeled_batch.to_string()),
            ("use_contrastive", self.use_contrastive.to_string()),
            ("use_ensemble", self.use_ensemble.to_string()),
            ("use_pseudo", self.use_pseudo.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        kv.extend(self.stream.to_kv().into_iter().map(|(k, v)| (k.to_string(), v)));
        kv.sort();
        kv
    }

    pub fn canonical_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.stream
            .validate()
            .map_err(|e| Error::Config(strip(e)))?;
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.eval_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.epoch_scale > 0.0 && self.epoch_scale.is_finite()) {
            return fail(format!("epoch_scale must be positive, got {}", self.epoch_scale));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return fail(format!("sparsity must lie in (0, 1], got {}", self.sparsity));
        }
        SupplementationRule::new(self.gamma)?;
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold <= 1.0) {
            return fail(format!("pseudo_threshold must lie in (0, 1], got {}", self.pseudo_threshold));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eps_stab", self.eps_stab),
            ("lr", self.lr),
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
            ("score_lr", self.score_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.lr_min > self.lr {
            return fail("lr_min exceeds lr".into());
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive".into());
        }
        Ok(())
    }

    /// Input width = image pixels, output width = class universe.
    pub fn architecture(&self) -> Result<MlpArchitecture> {
        let mut widths = vec![self.stream.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.stream.class_universe);
        MlpArchitecture::new(widths)
    }

    /// Unscaled epochs of task `t` (0-based): first task, tasks 2 to 5, rest.
    pub fn base_epochs(&self, task: usize) -> usize {
        match task {
            0 => self.epochs_first,
            1..=4 => self.epochs_mid,
            _ => self.epochs_late,
        }
    }

    pub fn planned_epochs(&self, task: usize) -> usize {
        ((self.base_epochs(task) as f64 * self.epoch_scale).round() as usize).max(1)
    }

    pub fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            threshold: self.pseudo_threshold,
            eps_stab: self.eps_stab,
        }
    }

    pub fn inference_mode(&self) -> InferenceMode {
        if self.use_ensemble {
            InferenceMode::Ensemble
        } else {
            InferenceMode::LastSubnetwork
        }
    }

    /// A loss with zero weight is switched off rather than computed and
    /// discarded.
    pub fn contrastive_active(&self) -> bool {
        self.use_contrastive && self.alpha != 0.0
    }

    pub fn pseudo_active(&self) -> bool {
        self.use_pseudo && self.beta != 0.0
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.contrastive_active() || self.pseudo_active()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Spec(m) => m,
        other => other.to_string(),
    }
}
