//! Entity F1, accuracy, ROUGE and forgetting statistics. All values are
//! fractions in `[0, 1]`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::format::{EntitySet, Verbalizer};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaging counts for entity-level scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityCounts {
    /// Adds one sample: exact `(segment, label)` matches after dedup.
    pub fn add(&mut self, predicted: &EntitySet, gold: &EntitySet) {
        let p: BTreeSet<_> = predicted.pairs.iter().collect();
        let g: BTreeSet<_> = gold.pairs.iter().collect();
        self.true_positive += p.intersection(&g).count();
        self.predicted += p.len();
        self.gold += g.len();
    }

    pub fn prf(&self) -> Prf {
        if self.predicted == 0 && self.gold == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let precision = ratio(self.true_positive, self.predicted);
        let recall = ratio(self.true_positive, self.gold);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn entity_f1(predicted: &EntitySet, gold: &EntitySet) -> Prf {
    let mut c = EntityCounts::default();
    c.add(predicted, gold);
    c.prf()
}

/// Micro-averaged entity scores over a test set of `(predicted, gold)`.
pub fn micro_entity_f1<'a>(pairs: impl IntoIterator<Item = (&'a EntitySet, &'a EntitySet)>) -> Prf {
    let mut c = EntityCounts::default();
    for (p, g) in pairs {
        c.add(p, g);
    }
    c.prf()
}

/// Fraction of predictions whose deverbalized class equals the gold id.
/// Predictions outside the verbalizer's range count as wrong.
pub fn accuracy<S: AsRef<str>>(predicted: &[S], gold: &[usize], verbalizer: &Verbalizer) -> f64 {
    assert_eq!(predicted.len(), gold.len(), "prediction/gold length mismatch");
    if gold.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(gold).filter(|(p, &g)| verbalizer.deverbalize(p.as_ref()) == Some(g)).count();
    hits as f64 / gold.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn f_measure(overlap: usize, cand: usize, refr: usize) -> f64 {
    if overlap == 0 || cand == 0 || refr == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / refr as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts(w: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if w.len() >= n {
        for g in w.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F-measure on lowercased whitespace tokens, no stemming.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    match variant {
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            let overlap = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
            f_measure(overlap, c.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1))
        }
        RougeVariant::L => f_measure(lcs_len(&c, &r), c.len(), r.len()),
    }
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn average_rouge(candidate: &str, reference: &str) -> f64 {
    (rouge(candidate, reference, RougeVariant::One)
        + rouge(candidate, reference, RougeVariant::Two)
        + rouge(candidate, reference, RougeVariant::L))
        / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub domain_id: String,
    pub own_stage: f64,
    pub final_stage: f64,
    pub delta: f64,
}

/// Per-domain metric after each stage: `series[s]` maps each domain learned
/// by stage `s` to its metric. `order` lists domains in learning order.
pub fn forgetting(order: &[String], series: &[HashMap<String, f64>]) -> Vec<ForgettingRecord> {
    let Some(last) = series.last() else { return Vec::new() };
    let final_idx = series.len() - 1;
    let mut out = Vec::new();
    for d in order {
        let Some(own) = series.iter().position(|m| m.contains_key(d)) else { continue };
        if own == final_idx {
            continue;
        }
        if let Some(&fin) = last.get(d) {
            let own_v = series[own][d];
            out.push(ForgettingRecord { domain_id: d.clone(), own_stage: own_v, final_stage: fin, delta: fin - own_v });
        }
    }
    out
}
