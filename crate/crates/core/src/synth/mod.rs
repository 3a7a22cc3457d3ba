//! Deterministic generators for toy NER, classification and summarization
//! domains, few-shot sampling, and the pretraining mixture.

mod corpus;
mod plan;
mod world;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{DomainSchema, EntitySet, LabelSpace, Origin, Sample, TaskType, Verbalizer};

pub use corpus::{pretraining_corpus, MixConfig};
pub use plan::{pretrain_backbone, PretrainPhase, PretrainPlan};
pub use world::{EntityPool, SummaryRule, Topic, World, GEN_MARKERS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub topic: String,
    pub word: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainKind {
    Ner { labels: Vec<String> },
    /// `overlap` is the probability that a content word is borrowed from
    /// another class of the same domain.
    Classification { classes: Vec<ClassSpec>, overlap: f64 },
    Summarization { rule: SummaryRule },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    #[serde(flatten)]
    pub kind: DomainKind,
    pub train_pool: usize,
    pub test: usize,
}

impl DomainSpec {
    pub fn task_type(&self) -> TaskType {
        match self.kind {
            DomainKind::Ner { .. } => TaskType::Ner,
            DomainKind::Classification { .. } => TaskType::Classification,
            DomainKind::Summarization { .. } => TaskType::Summarization,
        }
    }

    pub fn schema(&self) -> Result<DomainSchema> {
        let labels = match &self.kind {
            DomainKind::Ner { labels } => LabelSpace::Entities(labels.iter().cloned().collect()),
            DomainKind::Classification { classes, .. } => {
                LabelSpace::Classes(Verbalizer::new(classes.iter().map(|c| c.word.clone()))?)
            }
            DomainKind::Summarization { .. } => LabelSpace::Free,
        };
        Ok(DomainSchema { task_type: self.task_type(), domain_id: self.domain_id.clone(), labels })
    }
}

const DEFAULT_POOL: usize = 400;
const DEFAULT_TEST: usize = 200;
const DEFAULT_OVERLAP: f64 = 0.15;

fn cls(domain_id: &str, pairs: &[(&str, &str)]) -> DomainSpec {
    DomainSpec {
        domain_id: domain_id.into(),
        kind: DomainKind::Classification {
            classes: pairs.iter().map(|(t, w)| ClassSpec { topic: t.to_string(), word: w.to_string() }).collect(),
            overlap: DEFAULT_OVERLAP,
        },
        train_pool: DEFAULT_POOL,
        test: DEFAULT_TEST,
    }
}

fn ner(domain_id: &str, labels: &[&str]) -> DomainSpec {
    DomainSpec {
        domain_id: domain_id.into(),
        kind: DomainKind::Ner { labels: labels.iter().map(|l| l.to_string()).collect() },
        train_pool: DEFAULT_POOL,
        test: DEFAULT_TEST,
    }
}

fn summ(domain_id: &str, rule: SummaryRule) -> DomainSpec {
    DomainSpec { domain_id: domain_id.into(), kind: DomainKind::Summarization { rule }, train_pool: DEFAULT_POOL, test: DEFAULT_TEST }
}

/// The built-in domains. Classification domains have pairwise disjoint
/// label words; NER domains share some labels.
pub fn standard_domains() -> Vec<DomainSpec> {
    vec![
        ner("conll", &["PER", "LOC", "ORG", "MISC"]),
        ner("onto", &["PER", "LOC", "DATE", "PROD"]),
        ner("social", &["ORG", "EVENT", "LANG", "DATE"]),
        cls("news", &[("politics", "world"), ("sport", "sports"), ("economy", "business"), ("computing", "tech")]),
        cls("wiki", &[("animals", "animal"), ("art", "artist"), ("history", "heritage"), ("nature", "place")]),
        cls("yahoo", &[("health", "wellness"), ("family", "relatives"), ("school", "education"), ("science", "research")]),
        cls("shop", &[("food", "cooking"), ("fashion", "clothing"), ("cars", "vehicles"), ("games", "hobbies")]),
        summ("brief", SummaryRule::Lead1),
        summ("recap", SummaryRule::Lead2),
        summ("ending", SummaryRule::Last),
    ]
}

pub fn standard_domain(domain_id: &str) -> Result<DomainSpec> {
    standard_domains()
        .into_iter()
        .find(|d| d.domain_id == domain_id)
        .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
}

/// A generated domain: a pool to draw few-shot sets from and a disjoint
/// test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpus {
    pub spec: DomainSpec,
    pub schema: DomainSchema,
    pub pool: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn domain_rng(domain_id: &str, seed: u64) -> ChaCha8Rng {
    // FNV-1a keeps domains generated under one seed independent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn choose<'a, R: Rng + ?Sized>(v: &'a [String], rng: &mut R) -> &'a str {
    v.choose(rng).expect("nonempty pool")
}

fn push_fillers<R: Rng + ?Sized>(world: &World, out: &mut Vec<String>, lo: usize, hi: usize, rng: &mut R) {
    for _ in 0..rng.gen_range(lo..=hi) {
        out.push(choose(&world.fillers, rng).to_string());
    }
}

/// Sentence of 3 to 5 content words drawn mostly from `topics[own]`.
pub(crate) fn class_sentence<R: Rng + ?Sized>(
    world: &World,
    topics: &[&Topic],
    own: usize,
    overlap: f64,
    rng: &mut R,
) -> String {
    let mut words = Vec::new();
    for i in 0..rng.gen_range(3..=5) {
        push_fillers(world, &mut words, usize::from(i == 0), 2, rng);
        let t = if topics.len() > 1 && rng.gen::<f64>() < overlap {
            let other = rng.gen_range(0..topics.len() - 1);
            if other >= own {
                other + 1
            } else {
                other
            }
        } else {
            own
        };
        words.push(choose(&topics[t].members, rng).to_string());
    }
    words.join(" ")
}

fn entity_phrase<R: Rng + ?Sized>(pool: &EntityPool, rng: &mut R) -> String {
    let head = choose(&pool.heads, rng);
    if !pool.tails.is_empty() && rng.gen_bool(0.3) {
        format!("{head} {}", choose(&pool.tails, rng))
    } else {
        head.to_string()
    }
}

/// Sentence mentioning one entity per entry of `labels`, in order; the
/// second return value lists the `(segment, label)` pairs of entries
/// whose flag is `true`.
pub(crate) fn ner_sentence<R: Rng + ?Sized>(
    world: &World,
    labels: &[(&str, bool)],
    rng: &mut R,
) -> Result<(String, EntitySet)> {
    let mut words = Vec::new();
    let mut pairs = Vec::new();
    let mut used = HashSet::new();
    for &(label, gold) in labels {
        let pool = world.entities.get(label).ok_or_else(|| Error::Config(format!("no lexicon for entity label {label}")))?;
        push_fillers(world, &mut words, 1, 3, rng);
        let mut phrase = entity_phrase(pool, rng);
        while !used.insert(phrase.clone()) {
            phrase = entity_phrase(pool, rng);
        }
        words.push(phrase.clone());
        if gold {
            pairs.push((phrase, label.to_string()));
        }
    }
    push_fillers(world, &mut words, 0, 2, rng);
    Ok((words.join(" "), EntitySet::new(pairs)))
}

/// Summarization document as a list of `"the a verb the b ."` sentences.
pub(crate) fn document<R: Rng + ?Sized>(world: &World, rng: &mut R) -> Vec<String> {
    let topic = world.topics.choose(rng).expect("topics");
    (0..rng.gen_range(4..=8))
        .map(|_| {
            format!(
                "the {} {} the {} .",
                choose(&topic.members, rng),
                choose(&world.verbs, rng),
                choose(&topic.members, rng)
            )
        })
        .collect()
}

fn sample(spec: &DomainSpec, x: String, y: String) -> Sample {
    Sample { task_type: spec.task_type(), domain_id: spec.domain_id.clone(), x, y, origin: Origin::Real }
}

/// Draws `pool + test` samples with distinct inputs; `make(i)` is retried
/// until the `i`-th input is new.
fn distinct(spec: &DomainSpec, mut make: impl FnMut(usize) -> Result<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let total = spec.train_pool + spec.test;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(total);
    let mut attempts = 0;
    while out.len() < total {
        attempts += 1;
        if attempts > total * 50 {
            return Err(Error::Insufficient(format!("{}: cannot draw {total} distinct inputs", spec.domain_id)));
        }
        let s = make(out.len())?;
        if seen.insert(s.x.clone()) {
            out.push(s);
        }
    }
    let test = out.split_off(spec.train_pool);
    Ok((out, test))
}

pub fn make_ner_domain(world: &World, spec: &DomainSpec, seed: u64) -> Result<DomainCorpus> {
    let DomainKind::Ner { labels } = &spec.kind else {
        return Err(Error::Config(format!("{} is not an NER domain", spec.domain_id)));
    };
    if labels.is_empty() {
        return Err(Error::Config(format!("{}: empty label set", spec.domain_id)));
    }
    let mut rng = domain_rng(&spec.domain_id, seed);
    let (pool, test) = distinct(spec, |_| {
        let n = rng.gen_range(1..=3);
        let picked: Vec<(&str, bool)> = (0..n).map(|_| (choose(labels, &mut rng), true)).collect();
        let (x, ents) = ner_sentence(world, &picked, &mut rng)?;
        Ok(sample(spec, x, ents.render()))
    })?;
    Ok(DomainCorpus { spec: spec.clone(), schema: spec.schema()?, pool, test })
}

pub fn make_classification_domain(world: &World, spec: &DomainSpec, seed: u64) -> Result<DomainCorpus> {
    let DomainKind::Classification { classes, overlap } = &spec.kind else {
        return Err(Error::Config(format!("{} is not a classification domain", spec.domain_id)));
    };
    if classes.len() < 2 {
        return Err(Error::Config(format!("{}: need at least two classes", spec.domain_id)));
    }
    let topics = classes
        .iter()
        .map(|c| world.topic(&c.topic).ok_or_else(|| Error::Config(format!("unknown topic {}", c.topic))))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = domain_rng(&spec.domain_id, seed);
    let k = classes.len();
    let pool_len = spec.train_pool;
    // Classes cycle within each split so priors are uniform within one sample.
    let (mut pool, mut test) = distinct(spec, |i| {
        let class = if i < pool_len { i % k } else { (i - pool_len) % k };
        Ok(sample(spec, class_sentence(world, &topics, class, *overlap, &mut rng), class.to_string()))
    })?;
    pool.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(DomainCorpus { spec: spec.clone(), schema: spec.schema()?, pool, test })
}

pub fn make_summarization_domain(world: &World, spec: &DomainSpec, seed: u64) -> Result<DomainCorpus> {
    let DomainKind::Summarization { rule } = spec.kind else {
        return Err(Error::Config(format!("{} is not a summarization domain", spec.domain_id)));
    };
    let mut rng = domain_rng(&spec.domain_id, seed);
    let (pool, test) = distinct(spec, |_| {
        let doc = document(world, &mut rng);
        Ok(sample(spec, doc.join(" "), rule.apply(&doc)))
    })?;
    Ok(DomainCorpus { spec: spec.clone(), schema: spec.schema()?, pool, test })
}

pub fn make_domain(world: &World, spec: &DomainSpec, seed: u64) -> Result<DomainCorpus> {
    match spec.kind {
        DomainKind::Ner { .. } => make_ner_domain(world, spec, seed),
        DomainKind::Classification { .. } => make_classification_domain(world, spec, seed),
        DomainKind::Summarization { .. } => make_summarization_domain(world, spec, seed),
    }
}

/// Few-shot train and validation sets of equal size. NER and
/// classification take `shots` samples per label/class for each set;
/// summarization takes `shots` samples flat.
pub fn sample_few_shot(corpus: &DomainCorpus, shots: usize, seed: u64) -> Result<FewShotSplit> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut rng = domain_rng(&corpus.spec.domain_id, seed.wrapping_add(0x5eed));
    let pool = &corpus.pool;
    let short = |what: &str| Error::Insufficient(format!("{}: not enough samples for {what}", corpus.spec.domain_id));
    let (train, valid) = match &corpus.schema.labels {
        LabelSpace::Classes(v) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, s) in pool.iter().enumerate() {
                by_class.entry(s.y.parse().map_err(|_| Error::Format(s.y.clone()))?).or_default().push(i);
            }
            let (mut train, mut valid) = (Vec::new(), Vec::new());
            for c in 0..v.len() {
                let mut idx = by_class.remove(&c).unwrap_or_default();
                if idx.len() < 2 * shots {
                    return Err(short(&format!("class {c}")));
                }
                idx.shuffle(&mut rng);
                train.extend_from_slice(&idx[..shots]);
                valid.extend_from_slice(&idx[shots..2 * shots]);
            }
            (train, valid)
        }
        LabelSpace::Entities(labels) => {
            let mut used = BTreeSet::new();
            let mut pick = |label: &str, rng: &mut ChaCha8Rng| -> Result<Vec<usize>> {
                let mut idx: Vec<usize> = (0..pool.len())
                    .filter(|i| !used.contains(i))
                    .filter(|&i| pool[i].y.split(" ; ").any(|p| p.ends_with(&format!(" ! {label}"))))
                    .collect();
                if idx.len() < shots {
                    return Err(short(&format!("label {label}")));
                }
                idx.shuffle(rng);
                idx.truncate(shots);
                used.extend(idx.iter().copied());
                Ok(idx)
            };
            let (mut train, mut valid) = (Vec::new(), Vec::new());
            for l in labels {
                train.extend(pick(l, &mut rng)?);
            }
            for l in labels {
                valid.extend(pick(l, &mut rng)?);
            }
            (train, valid)
        }
        LabelSpace::Free => {
            if pool.len() < 2 * shots {
                return Err(short("train and valid"));
            }
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut rng);
            (idx[..shots].to_vec(), idx[shots..2 * shots].to_vec())
        }
    };
    let take = |idx: Vec<usize>| idx.into_iter().map(|i| pool[i].clone()).collect::<Vec<_>>();
    Ok(FewShotSplit { train: take(train), valid: take(valid), test: corpus.test.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_specs_build() {
        let w = World::standard();
        for spec in standard_domains() {
            let mut small = spec.clone();
            small.train_pool = 80;
            small.test = 20;
            let c = make_domain(&w, &small, 1).unwrap();
            assert_eq!(c.test.len(), 20);
            assert_eq!(c.pool.len(), 80);
        }
    }

    #[test]
    fn summary_rules() {
        let s: Vec<String> = ["a .", "b .", "c ."].iter().map(|s| s.to_string()).collect();
        assert_eq!(SummaryRule::Lead1.apply(&s), "a .");
        assert_eq!(SummaryRule::Lead2.apply(&s), "a . b .");
        assert_eq!(SummaryRule::Last.apply(&s), "c .");
    }
}
