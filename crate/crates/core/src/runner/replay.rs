//! Replay buffers: generated pseudo samples or stored real samples of
//! earlier domains.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Strategy};
use crate::error::Result;
use crate::format::{lead3, parse_pseudo, DomainSchema, LabelSpace, Sample, TaskType};
use crate::prompt::{PromptSnapshot, PromptView};
use crate::scalar::Scalar;

use super::config::PseudoConfig;

/// Replay samples grouped by domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub domains: BTreeMap<String, Vec<Sample>>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.domains.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.domains.values().flatten()
    }
}

/// Replay quotas per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCounts {
    pub per_class: usize,
    pub per_domain: usize,
}

impl ReplayCounts {
    /// Samples wanted for `schema`: per class (classification) or label
    /// (NER), or per domain (summarization).
    pub fn target(&self, schema: &DomainSchema) -> usize {
        match &schema.labels {
            LabelSpace::Classes(v) => self.per_class * v.len(),
            LabelSpace::Entities(l) => self.per_class * l.len(),
            LabelSpace::Free => self.per_domain,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub domain_id: String,
    pub target: usize,
    pub attempts: usize,
    /// Decodes that passed the format check.
    pub parsed: usize,
    /// Parsed samples kept within the quotas.
    pub kept: usize,
    pub rejects: BTreeMap<String, usize>,
}

impl PseudoStats {
    /// Share of decodes that passed the format check.
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.parsed as f64 / self.attempts as f64
        }
    }
}

fn mix_seed(seed: u64, domain_id: &str) -> u64 {
    domain_id.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Samples pseudo data for each learned domain from the snapshot's
/// generation token, keeping decodes that parse until the quota is met or
/// the attempt budget runs out. Classification quotas are per class.
pub fn generate_pseudo<T: Scalar>(
    backbone: &Backbone<T>,
    snapshot: &PromptSnapshot<T>,
    learned: &[DomainSchema],
    counts: ReplayCounts,
    cfg: &PseudoConfig,
    seed: u64,
) -> Result<(ReplayBuffer, Vec<PseudoStats>)> {
    let vocab = backbone.vocab();
    let input = vocab.encode("");
    let strategy = Strategy::Sample { temperature: cfg.temperature, top_k: cfg.top_k };
    let mut buffer = ReplayBuffer::default();
    let mut all_stats = Vec::new();
    for schema in learned {
        let prefix = snapshot.gen_prefix(&schema.domain_id)?;
        let target = counts.target(schema);
        let mut stats = PseudoStats { domain_id: schema.domain_id.clone(), target, ..Default::default() };
        let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
        let mut kept = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &schema.domain_id));
        let budget = cfg.attempts_per_target * target;
        while kept.len() < target && stats.attempts < budget {
            stats.attempts += 1;
            let ids = backbone.decode(&prefix, &input, cfg.max_len, strategy, &mut rng)?;
            let text = vocab.detokenize(&ids);
            match parse_pseudo(&text, schema) {
                Ok(mut s) => {
                    stats.parsed += 1;
                    if schema.task_type == TaskType::Classification {
                        let n = per_class.entry(s.y.clone()).or_default();
                        if *n >= counts.per_class {
                            continue;
                        }
                        *n += 1;
                    }
                    if schema.task_type == TaskType::Summarization {
                        s.y = lead3(&s.x);
                    }
                    kept.push(s);
                }
                Err(r) => *stats.rejects.entry(r.name().to_string()).or_default() += 1,
            }
        }
        stats.kept = kept.len();
        if kept.is_empty() && target > 0 {
            log::warn!(
                "no pseudo sample accepted for {} after {} attempts; continuing without replay for it",
                schema.domain_id,
                stats.attempts
            );
        }
        buffer.domains.insert(schema.domain_id.clone(), kept);
        all_stats.push(stats);
    }
    Ok((buffer, all_stats))
}

/// Draws stored training samples of each learned domain with the same
/// quotas as [`generate_pseudo`]; takes everything when a domain has fewer.
pub fn select_real_replay(stored: &[(DomainSchema, Vec<Sample>)], counts: ReplayCounts, seed: u64) -> ReplayBuffer {
    let mut buffer = ReplayBuffer::default();
    for (schema, samples) in stored {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &schema.domain_id));
        let picked: Vec<Sample> = match &schema.labels {
            LabelSpace::Classes(v) => {
                let mut out = Vec::new();
                for c in 0..v.len() {
                    let class: Vec<&Sample> = samples.iter().filter(|s| s.y == c.to_string()).collect();
                    out.extend(class.choose_multiple(&mut rng, counts.per_class).map(|s| (*s).clone()));
                }
                out
            }
            _ => samples.choose_multiple(&mut rng, counts.target(schema)).cloned().collect(),
        };
        buffer.domains.insert(schema.domain_id.clone(), picked);
    }
    buffer
}
