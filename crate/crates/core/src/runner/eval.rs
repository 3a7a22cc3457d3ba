//! Test-set scoring and run reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Strategy};
use crate::error::Result;
use crate::format::{format_task, parse_ner_output, DomainSchema, LabelSpace, Sample, TaskType};
use crate::losses::LossBreakdown;
use crate::metrics::{average_rouge, EntityCounts, ForgettingRecord};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::Method;
use super::replay::PseudoStats;

/// Score of one domain's test set: accuracy, entity F1 or mean ROUGE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain_id: String,
    pub task_type: TaskType,
    pub metric: f64,
    pub support: usize,
    /// Entity counts behind an NER score, for pooling across domains.
    pub entities: Option<EntityCounts>,
}

/// Greedy-decodes every test input under `prefix` and scores the outputs.
pub fn evaluate_domain<T: Scalar>(
    model: &Backbone<T>,
    prefix: &Matrix<T>,
    schema: &DomainSchema,
    test: &[Sample],
    max_len: usize,
) -> Result<DomainScore> {
    let vocab = model.vocab();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut hits = 0.0;
    let mut counts = EntityCounts::default();
    for s in test {
        let (x, y) = format_task(s, schema)?;
        let out = model.decode(prefix, &vocab.encode(&x), max_len, Strategy::Greedy, &mut rng)?;
        let text = vocab.detokenize(&out);
        match &schema.labels {
            LabelSpace::Classes(v) => {
                if v.deverbalize(&text).map(|c| c.to_string()) == Some(s.y.clone()) {
                    hits += 1.0;
                }
            }
            LabelSpace::Entities(labels) => {
                let (pred, _) = parse_ner_output(&text, labels);
                let (gold, _) = parse_ner_output(&y, labels);
                counts.add(&pred, &gold);
            }
            LabelSpace::Free => hits += average_rouge(&text, &y),
        }
    }
    let n = test.len();
    let (metric, entities) = match schema.labels {
        LabelSpace::Entities(_) => (counts.prf().f1, Some(counts)),
        _ => (if n == 0 { 0.0 } else { hits / n as f64 }, None),
    };
    Ok(DomainScore { domain_id: schema.domain_id.clone(), task_type: schema.task_type, metric, support: n, entities })
}

/// Score on the union of the given test sets (all of one task type):
/// pooled micro F1 for NER, support-weighted mean otherwise.
pub fn combined_score<'a>(scores: impl IntoIterator<Item = &'a DomainScore>) -> f64 {
    let mut pooled = EntityCounts::default();
    let (mut weighted, mut n, mut any_ner) = (0.0, 0usize, false);
    for s in scores {
        if let Some(c) = s.entities {
            any_ner = true;
            pooled.true_positive += c.true_positive;
            pooled.predicted += c.predicted;
            pooled.gold += c.gold;
        } else {
            weighted += s.metric * s.support as f64;
            n += s.support;
        }
    }
    if any_ner {
        pooled.prf().f1
    } else if n == 0 {
        0.0
    } else {
        weighted / n as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Regularizer penalty included in `total`.
    pub reg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub method: Method,
    pub stage: usize,
    /// Domains trained in this stage.
    pub trained: Vec<String>,
    /// One entry per domain learned so far.
    pub scores: Vec<DomainScore>,
    /// Union-of-test-sets score per task type learned so far.
    pub combined: BTreeMap<TaskType, f64>,
    pub replay_size: usize,
    pub pseudo: Vec<PseudoStats>,
    pub best_step: usize,
    pub best_valid_loss: f64,
    pub losses: Vec<StepRecord>,
    pub prompt_digests: BTreeMap<TaskType, String>,
    pub backbone_digest: String,
    pub warnings: Vec<String>,
}

impl StageRecord {
    pub fn score(&self, domain_id: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.domain_id == domain_id).map(|s| s.metric)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub method: Method,
    pub stages: Vec<StageRecord>,
    pub forgetting: Vec<ForgettingRecord>,
    /// Mean over task types of the last stage's combined scores.
    pub final_score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub config_digest: String,
    pub runs: Vec<SeedRun>,
    pub final_score: MeanStd,
    /// Last-stage score per domain across seeds.
    pub final_by_domain: BTreeMap<String, MeanStd>,
    pub forgetting_by_domain: BTreeMap<String, MeanStd>,
}

impl EvalReport {
    pub fn aggregate(method: Method, config_digest: String, runs: Vec<SeedRun>) -> Self {
        let finals: Vec<f64> = runs.iter().map(|r| r.final_score).collect();
        let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut forgetting: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            if let Some(last) = r.stages.last() {
                for s in &last.scores {
                    by_domain.entry(s.domain_id.clone()).or_default().push(s.metric);
                }
            }
            for f in &r.forgetting {
                forgetting.entry(f.domain_id.clone()).or_default().push(f.delta);
            }
        }
        Self {
            method,
            config_digest,
            final_score: MeanStd::of(&finals),
            final_by_domain: by_domain.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect(),
            forgetting_by_domain: forgetting.into_iter().map(|(k, v)| (k, MeanStd::of(&v))).collect(),
            runs,
        }
    }

    /// Tab-separated summary: one row per domain plus the combined row,
    /// scores in percent as `mean±std`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tdomain\tfinal\tforgetting\n");
        let fmt = |m: &MeanStd| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std);
        for (d, m) in &self.final_by_domain {
            let f = self.forgetting_by_domain.get(d).map(fmt).unwrap_or_else(|| "-".into());
            out.push_str(&format!("{}\t{d}\t{}\t{f}\n", self.method, fmt(m)));
        }
        out.push_str(&format!("{}\tcombined\t{}\t-\n", self.method, fmt(&self.final_score)));
        out
    }

    /// `(stage, domain, metric)` triples averaged over seeds.
    pub fn plot_points(&self) -> Vec<(usize, String, f64)> {
        let mut acc: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
        for r in &self.runs {
            for st in &r.stages {
                for s in &st.scores {
                    acc.entry((st.stage, s.domain_id.clone())).or_default().push(s.metric);
                }
            }
        }
        acc.into_iter().map(|((st, d), v)| (st, d, MeanStd::of(&v).mean)).collect()
    }
}
