//! Experiment configuration, read from TOML.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::TaskType;
use crate::losses::LossWeights;
use crate::synth::{standard_domain, DomainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lfpt5")]
    Lfpt5,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "pt")]
    Pt,
    #[serde(rename = "ewc-pt")]
    EwcPt,
    #[serde(rename = "ewc-ft")]
    EwcFt,
    #[serde(rename = "mas-pt")]
    MasPt,
    #[serde(rename = "mas-ft")]
    MasFt,
    #[serde(rename = "pt-r")]
    PtR,
    #[serde(rename = "mt-pt")]
    MtPt,
    #[serde(rename = "mt-ft")]
    MtFt,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Lfpt5,
        Method::Ft,
        Method::Pt,
        Method::EwcPt,
        Method::EwcFt,
        Method::MasPt,
        Method::MasFt,
        Method::PtR,
        Method::MtPt,
        Method::MtFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lfpt5 => "lfpt5",
            Method::Ft => "ft",
            Method::Pt => "pt",
            Method::EwcPt => "ewc-pt",
            Method::EwcFt => "ewc-ft",
            Method::MasPt => "mas-pt",
            Method::MasFt => "mas-ft",
            Method::PtR => "pt-r",
            Method::MtPt => "mt-pt",
            Method::MtFt => "mt-ft",
        }
    }

    /// Trains the whole backbone instead of a prompt.
    pub fn is_full_model(self) -> bool {
        matches!(self, Method::Ft | Method::EwcFt | Method::MasFt | Method::MtFt)
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, Method::MtPt | Method::MtFt)
    }

    pub fn regularizer(self) -> Option<Regularizer> {
        match self {
            Method::EwcPt | Method::EwcFt => Some(Regularizer::Ewc),
            Method::MasPt | Method::MasFt => Some(Regularizer::Mas),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularizer {
    Ewc,
    Mas,
}

impl Regularizer {
    pub fn default_strength(self) -> f64 {
        match self {
            Regularizer::Ewc => 100.0,
            Regularizer::Mas => 1.0,
        }
    }
}

/// Variants that change one setting of a configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoKl,
    NoLm,
    NoReplay,
    Fkt,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoKl, Ablation::NoLm, Ablation::NoReplay, Ablation::Fkt];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoKl => "no_kl",
            Ablation::NoLm => "no_lm",
            Ablation::NoReplay => "no_replay",
            Ablation::Fkt => "fkt",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected no_kl, no_lm, no_replay or fkt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub task_type: TaskType,
    pub domain: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub temperature: f64,
    pub top_k: usize,
    /// Decoding attempts allowed per requested sample.
    pub attempts_per_target: usize,
    pub max_len: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 20, attempts_per_target: 20, max_len: 64 }
    }
}

/// Per-task-type loss weights; missing entries use
/// [`LossWeights::for_task`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub ner: Option<LossWeights>,
    pub classification: Option<LossWeights>,
    pub summarization: Option<LossWeights>,
}

impl WeightTable {
    pub fn get(&self, t: TaskType) -> LossWeights {
        let w = match t {
            TaskType::Ner => self.ner,
            TaskType::Classification => self.classification,
            TaskType::Summarization => self.summarization,
        };
        w.unwrap_or_else(|| LossWeights::for_task(t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub method: Method,
    pub stages: Vec<StageSpec>,
    /// Domains beyond the built-in catalogue, referenced by `stages`.
    pub domains: Vec<DomainSpec>,
    /// Few-shot examples per class (classification) or label (NER).
    pub shots: usize,
    /// Few-shot examples per summarization domain.
    pub summary_shots: usize,
    pub pseudo_per_class: usize,
    pub pseudo_per_domain: usize,
    pub weights: WeightTable,
    pub fkt: bool,
    /// Replay for LFPT5 and PT-R; `false` keeps everything else.
    pub replay: bool,
    pub seeds: Vec<u64>,
    pub steps_per_stage: usize,
    pub batch_size: usize,
    /// Validation-loss checks per stage for checkpoint selection.
    pub validations_per_stage: usize,
    pub prompt_len: usize,
    pub lr: f64,
    /// Learning rate of full-model fine-tuning.
    pub ft_lr: f64,
    pub clip_norm: f64,
    /// Regularizer strength; defaults to 100 (EWC) or 1 (MAS).
    pub reg_strength: Option<f64>,
    pub pseudo: PseudoConfig,
    /// Greedy-decoding length cap during evaluation.
    pub eval_max_len: usize,
    /// Caps the number of test samples per domain (0 keeps all).
    pub eval_limit: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            method: Method::Lfpt5,
            stages: Vec::new(),
            domains: Vec::new(),
            shots: 16,
            summary_shots: 64,
            pseudo_per_class: 2,
            pseudo_per_domain: 4,
            weights: WeightTable::default(),
            fkt: false,
            replay: true,
            seeds: vec![0, 1, 2],
            steps_per_stage: 240,
            batch_size: 8,
            validations_per_stage: 15,
            prompt_len: 20,
            lr: 0.5,
            ft_lr: 1e-3,
            clip_norm: 1.0,
            reg_strength: None,
            pseudo: PseudoConfig::default(),
            eval_max_len: 48,
            eval_limit: 0,
        }
    }
}

impl StreamConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.stages.is_empty() {
            return bad("stages must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.shots == 0 || self.summary_shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.batch_size == 0 || self.prompt_len == 0 {
            return bad("batch_size and prompt_len must be at least 1");
        }
        if !(self.lr > 0.0 && self.ft_lr > 0.0 && self.clip_norm > 0.0) {
            return bad("learning rates and clip_norm must be positive");
        }
        if let Some(s) = self.reg_strength {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("reg_strength must be finite and nonnegative");
            }
        }
        for t in [TaskType::Ner, TaskType::Classification, TaskType::Summarization] {
            self.weights.get(t).validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut last_type: Option<TaskType> = None;
        let mut closed = std::collections::BTreeSet::new();
        for s in &self.stages {
            let spec = self.domain(&s.domain)?;
            if spec.task_type() != s.task_type {
                return Err(Error::Config(format!("domain {} is {}, stage says {}", s.domain, spec.task_type(), s.task_type)));
            }
            if !seen.insert(s.domain.clone()) {
                return Err(Error::DuplicateDomain(s.domain.clone()));
            }
            if last_type != Some(s.task_type) {
                if closed.contains(&s.task_type) {
                    return Err(Error::Config(format!("task type {} reappears after another task type", s.task_type)));
                }
                if let Some(t) = last_type {
                    closed.insert(t);
                }
                last_type = Some(s.task_type);
            }
        }
        Ok(())
    }

    /// Looks a domain up among `domains`, then the built-in catalogue.
    pub fn domain(&self, id: &str) -> Result<DomainSpec> {
        match self.domains.iter().find(|d| d.domain_id == id) {
            Some(d) => Ok(d.clone()),
            None => standard_domain(id),
        }
    }

    pub fn reg_strength(&self) -> f64 {
        match (self.reg_strength, self.method.regularizer()) {
            (Some(s), _) => s,
            (None, Some(r)) => r.default_strength(),
            (None, None) => 0.0,
        }
    }

    /// The same configuration with one setting toggled.
    pub fn ablated(&self, a: Ablation) -> Self {
        let mut c = self.clone();
        match a {
            Ablation::NoKl | Ablation::NoLm => {
                for t in [TaskType::Ner, TaskType::Classification, TaskType::Summarization] {
                    let mut w = c.weights.get(t);
                    if a == Ablation::NoKl {
                        w.lambda_kl = 0.0;
                    } else {
                        w.lambda_lm = 0.0;
                    }
                    match t {
                        TaskType::Ner => c.weights.ner = Some(w),
                        TaskType::Classification => c.weights.classification = Some(w),
                        TaskType::Summarization => c.weights.summarization = Some(w),
                    }
                }
            }
            Ablation::NoReplay => c.replay = false,
            Ablation::Fkt => c.fkt = true,
        }
        c
    }
}
