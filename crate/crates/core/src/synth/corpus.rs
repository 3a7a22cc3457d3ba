//! Pretraining mixture. Every example is read under a prefix of summed
//! embedding slots that describes the task: a slot `word + topic` asks for
//! `word` on sentences about `topic` (the topic read as the normalized sum
//! of its member words), a slot holding an entity label asks
//! for that label to be extracted, a rule word selects a summary rule.
//! Remaining rows hold random single words. Generation examples add one
//! leading slot naming the task marker and the subset of classes, labels or
//! rule to generate from, and target `"X __split__ Y"`.

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PretrainExample, Slot};
use crate::error::{Error, Result};
use crate::format::TaskType;
use crate::vocab::{TokenId, Vocabulary, SPLIT};

use super::{class_sentence, document, ner_sentence, SummaryRule, Topic, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixConfig {
    pub size: usize,
    /// Prefix rows of TASK examples; GEN examples get one more.
    pub prompt_rows: usize,
    pub max_classes: usize,
    pub max_entity_labels: usize,
    pub overlap: f64,
    /// Relative weights of classification task/gen, NER task/gen and
    /// summarization task/gen examples.
    pub shares: [f64; 6],
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            size: 40_000,
            prompt_rows: 20,
            max_classes: 12,
            max_entity_labels: 5,
            overlap: 0.15,
            shares: [0.35, 0.20, 0.20, 0.10, 0.10, 0.05],
            seed: 0,
        }
    }
}

struct Ids<'a> {
    vocab: &'a Vocabulary,
    fillers: Vec<TokenId>,
}

impl Ids<'_> {
    fn id(&self, w: &str) -> Result<TokenId> {
        self.vocab.id(w).ok_or_else(|| Error::Config(format!("word {w:?} missing from vocabulary")))
    }

    /// Pads `slots` with random single words to `rows`, then shuffles.
    fn fill(&self, mut slots: Vec<Slot>, rows: usize, rng: &mut ChaCha8Rng) -> Vec<Slot> {
        while slots.len() < rows {
            slots.push(Slot::token(*self.fillers.choose(rng).expect("vocabulary words")));
        }
        slots.shuffle(rng);
        slots
    }
}

fn mean_slot(marker: TokenId, members: &[TokenId]) -> Slot {
    let w = 1.0 / members.len() as f64;
    let mut terms = vec![(marker, 1.0)];
    terms.extend(members.iter().map(|&m| (m, w)));
    Slot { terms }
}

fn gen_slot(marker: TokenId, terms: Vec<(TokenId, f64)>) -> Slot {
    let mut all = vec![(marker, 1.0)];
    all.extend(terms);
    Slot { terms: all }
}

/// A topic as the normalized sum of its member embeddings, scaled by `w`.
fn topic_terms(ids: &Ids, t: &Topic, w: f64) -> Result<Vec<(TokenId, f64)>> {
    let s = w / (t.members.len() as f64).sqrt();
    t.members.iter().map(|m| Ok((ids.id(m)?, s))).collect()
}

fn class_slot(ids: &Ids, t: &Topic, word: &str) -> Result<Slot> {
    let mut terms = vec![(ids.id(word)?, 1.0)];
    terms.extend(topic_terms(ids, t, 1.0)?);
    Ok(Slot { terms })
}

fn gen_marker(vocab: &Vocabulary, t: TaskType) -> TokenId {
    let k = match t {
        TaskType::Classification => 0,
        TaskType::Ner => 1,
        TaskType::Summarization => 2,
    };
    vocab.special().gen(k).expect("vocabulary reserves one marker per task type")
}

pub fn pretraining_corpus(world: &World, vocab: &Vocabulary, cfg: &MixConfig) -> Result<Vec<PretrainExample>> {
    if cfg.prompt_rows < cfg.max_classes.max(cfg.max_entity_labels).max(1) {
        return Err(Error::Config("prompt_rows must hold every described class".into()));
    }
    if cfg.max_classes < 2 || cfg.max_classes > world.topics.len().min(world.label_words.len()) {
        return Err(Error::Config("max_classes out of range".into()));
    }
    let labels = world.entity_labels();
    if cfg.max_entity_labels < 1 || cfg.max_entity_labels > labels.len() {
        return Err(Error::Config("max_entity_labels out of range".into()));
    }
    let special = vocab.special();
    let fillers: Vec<TokenId> = (special.gen_first + special.gen_count..vocab.len() as TokenId)
        .filter(|&id| !vocab.token(id).starts_with("<extra_"))
        .collect();
    let ids = Ids { vocab, fillers };
    let total: f64 = cfg.shares.iter().sum();
    if !(total > 0.0) || cfg.shares.iter().any(|s| *s < 0.0) {
        return Err(Error::Config("mixture shares must be nonnegative with positive sum".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut kind = 5;
        for (i, s) in cfg.shares.iter().enumerate() {
            acc += s;
            if u < acc {
                kind = i;
                break;
            }
        }
        let ex = match kind {
            0 | 1 => classification_example(world, &ids, cfg, kind == 1, &mut rng)?,
            2 | 3 => ner_example(world, &ids, cfg, &labels, kind == 3, &mut rng)?,
            _ => summarization_example(world, &ids, cfg, kind == 5, &mut rng)?,
        };
        out.push(ex);
    }
    Ok(out)
}

fn classification_example(
    world: &World,
    ids: &Ids,
    cfg: &MixConfig,
    gen: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample> {
    let k = rng.gen_range(2..=cfg.max_classes);
    let topics: Vec<_> = world.topics.iter().choose_multiple(rng, k);
    let mut words: Vec<&String> = world.label_words.iter().choose_multiple(rng, k);
    words.shuffle(rng);
    let mut slots = Vec::with_capacity(cfg.prompt_rows);
    for (t, w) in topics.iter().zip(&words) {
        slots.push(class_slot(ids, t, w)?);
    }
    let slots = ids.fill(slots, cfg.prompt_rows, rng);
    if gen {
        let s = rng.gen_range(1..=k.min(6));
        let subset: Vec<usize> = (0..k).choose_multiple(rng, s);
        let sub_topics: Vec<_> = subset.iter().map(|&i| topics[i]).collect();
        let own = rng.gen_range(0..s);
        let x = class_sentence(world, &sub_topics, own, cfg.overlap, rng);
        let mut terms = Vec::new();
        for t in &sub_topics {
            terms.extend(topic_terms(ids, t, 1.0 / s as f64)?);
        }
        let mut prefix = vec![gen_slot(gen_marker(ids.vocab, TaskType::Classification), terms)];
        prefix.extend(slots);
        let target = format!("{x} {SPLIT} {}", words[subset[own]]);
        Ok(PretrainExample { prefix, input_ids: ids.vocab.encode(""), output_ids: ids.vocab.encode(&target) })
    } else {
        let own = rng.gen_range(0..k);
        let x = class_sentence(world, &topics, own, cfg.overlap, rng);
        let input = format!("{} {x}", TaskType::Classification.tag());
        Ok(PretrainExample { prefix: slots, input_ids: ids.vocab.encode(&input), output_ids: ids.vocab.encode(words[own]) })
    }
}

fn ner_example(
    world: &World,
    ids: &Ids,
    cfg: &MixConfig,
    labels: &[String],
    gen: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample> {
    let k = rng.gen_range(1..=cfg.max_entity_labels);
    let set: Vec<&String> = labels.iter().choose_multiple(rng, k);
    let slots = set.iter().map(|l| Ok(Slot::token(ids.id(l)?))).collect::<Result<Vec<_>>>()?;
    let slots = ids.fill(slots, cfg.prompt_rows, rng);
    let n = rng.gen_range(1..=3);
    if gen {
        let s = rng.gen_range(1..=k);
        let subset: Vec<&String> = set.iter().copied().choose_multiple(rng, s);
        let picked: Vec<(&str, bool)> = (0..n).map(|_| (subset.choose(rng).expect("subset").as_str(), true)).collect();
        let (x, ents) = ner_sentence(world, &picked, rng)?;
        let members = subset.iter().map(|l| ids.id(l)).collect::<Result<Vec<_>>>()?;
        let mut prefix = vec![mean_slot(gen_marker(ids.vocab, TaskType::Ner), &members)];
        prefix.extend(slots);
        let target = format!("{x} {SPLIT} {}", ents.render());
        Ok(PretrainExample { prefix, input_ids: ids.vocab.encode(""), output_ids: ids.vocab.encode(&target) })
    } else {
        let mut picked: Vec<(&str, bool)> = (0..n).map(|_| (set.choose(rng).expect("set").as_str(), true)).collect();
        // An entity of an undescribed label must be left out of the output.
        if k < labels.len() && rng.gen_bool(0.3) {
            let other = labels.iter().filter(|l| !set.contains(l)).choose(rng).expect("undescribed label");
            let at = rng.gen_range(0..=picked.len());
            picked.insert(at, (other.as_str(), false));
        }
        let (x, ents) = ner_sentence(world, &picked, rng)?;
        let input = format!("{} {x}", TaskType::Ner.tag());
        Ok(PretrainExample { prefix: slots, input_ids: ids.vocab.encode(&input), output_ids: ids.vocab.encode(&ents.render()) })
    }
}

fn summarization_example(
    world: &World,
    ids: &Ids,
    cfg: &MixConfig,
    gen: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainExample> {
    let rule = *SummaryRule::ALL.choose(rng).expect("rules");
    let rule_id = ids.id(rule.word())?;
    let slots = ids.fill(vec![Slot::token(rule_id)], cfg.prompt_rows, rng);
    let doc = document(world, rng);
    let summary = rule.apply(&doc);
    let x = doc.join(" ");
    if gen {
        let mut prefix = vec![mean_slot(gen_marker(ids.vocab, TaskType::Summarization), &[rule_id])];
        prefix.extend(slots);
        let target = format!("{x} {SPLIT} {summary}");
        Ok(PretrainExample { prefix, input_ids: ids.vocab.encode(""), output_ids: ids.vocab.encode(&target) })
    } else {
        let input = format!("{} {x}", TaskType::Summarization.tag());
        Ok(PretrainExample { prefix: slots, input_ids: ids.vocab.encode(&input), output_ids: ids.vocab.encode(&summary) })
    }
}
