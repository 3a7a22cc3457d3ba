//! The closed lexicon every synthetic domain draws from.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::format::TaskType;
use crate::vocab::{Vocabulary, LABEL_SEP, PAIR_SEP, SPLIT};

/// Number of `<gen_k>` markers reserved in the vocabulary: one per task type.
pub const GEN_MARKERS: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub members: Vec<String>,
}

/// Entity phrases are a head word optionally followed by a tail word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPool {
    pub heads: Vec<String>,
    pub tails: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryRule {
    /// First sentence.
    Lead1,
    /// First two sentences.
    Lead2,
    /// Last sentence.
    Last,
}

impl SummaryRule {
    pub const ALL: [SummaryRule; 3] = [SummaryRule::Lead1, SummaryRule::Lead2, SummaryRule::Last];

    /// The word naming the rule in pretraining descriptions.
    pub fn word(self) -> &'static str {
        match self {
            SummaryRule::Lead1 => "opening",
            SummaryRule::Lead2 => "leading",
            SummaryRule::Last => "closing",
        }
    }

    pub fn apply(self, sentences: &[String]) -> String {
        let picked: &[String] = match self {
            SummaryRule::Lead1 => &sentences[..1.min(sentences.len())],
            SummaryRule::Lead2 => &sentences[..2.min(sentences.len())],
            SummaryRule::Last => &sentences[sentences.len().saturating_sub(1)..],
        };
        picked.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub topics: Vec<Topic>,
    /// Candidate verbalizer words.
    pub label_words: Vec<String>,
    pub entities: BTreeMap<String, EntityPool>,
    /// Function words placed between content words and entities.
    pub fillers: Vec<String>,
    /// Verbs of summarization sentences.
    pub verbs: Vec<String>,
}

fn owned(words: &str) -> Vec<String> {
    words.split_whitespace().map(str::to_string).collect()
}

const TOPICS: &[(&str, &str)] = &[
    ("politics", "vote senate minister election party parliament policy campaign"),
    ("sport", "match team coach goal league player stadium tournament"),
    ("economy", "market trade profit bank stock inflation budget export"),
    ("computing", "software chip server code network laptop algorithm database"),
    ("health", "doctor clinic vaccine nurse therapy patient diet fever"),
    ("family", "parent child cousin wedding sibling grandma uncle baby"),
    ("travel", "flight hotel passport luggage airport tourist cruise ticket"),
    ("food", "recipe bread soup kitchen flour oven spice dessert"),
    ("music", "guitar melody concert singer drum album piano chorus"),
    ("cinema", "film actor director screen premiere studio scene trailer"),
    ("nature", "river mountain forest valley desert meadow lake canyon"),
    ("animals", "tiger wolf eagle dolphin rabbit elephant fox owl"),
    ("weather", "rain storm cloud thunder snow breeze forecast humidity"),
    ("school", "teacher classroom homework exam pupil lesson textbook semester"),
    ("science", "experiment laboratory molecule theory physics chemist microscope hypothesis"),
    ("art", "painter canvas sculpture gallery portrait brush museum sketch"),
    ("cars", "engine wheel driver garage tire brake highway fuel"),
    ("fashion", "dress jacket designer runway fabric boutique shoe scarf"),
    ("history", "empire castle ancient king medieval dynasty ruins war"),
    ("garden", "flower seed soil tulip hedge shovel lawn greenhouse"),
    ("space", "planet rocket orbit astronaut galaxy telescope comet satellite"),
    ("law", "court judge lawyer verdict trial contract police jury"),
    ("ocean", "wave coral reef tide sailor harbor whale shore"),
    ("games", "chess puzzle dice console card arcade board quest"),
];

const LABEL_WORDS: &str = "world sports business tech animal artist heritage place wellness relatives \
    education research cooking clothing vehicles hobbies wonderful terrible good bad positive negative \
    great awful fine poor yes no true false urgent calm leisure culture entertainment society";

const ENTITIES: &[(&str, &str, &str)] = &[
    ("PER", "john maria ahmed li olga pedro yuki emma omar sara ivan nina", "smith garcia khan chen novak silva"),
    ("LOC", "paris berlin cairo tokyo lima oslo delhi rome boston nairobi sydney madrid", ""),
    ("ORG", "acme globex initech umbrella stark wayne hooli cyberdyne soylent vandelay tyrell oscorp", "corp group inc labs"),
    ("MISC", "french german kenyan brazilian japanese indian italian canadian mexican swedish egyptian korean", ""),
    ("DATE", "monday tuesday wednesday thursday friday saturday sunday january march june october december", ""),
    ("PROD", "iphone kindle walkman prius xbox pixel vespa lego barbie segway roomba tesla", "pro mini"),
    ("EVENT", "olympics worldcup expo oscars grammys carnival summit marathon festival eurovision wimbledon superbowl", ""),
    ("LANG", "english spanish mandarin arabic hindi swahili russian portuguese bengali urdu turkish dutch", ""),
];

const FILLERS: &str = "the a of and in on with about near from said was is today new this that some very also \
    after before during at to by for then while again met visited joined called praised reached thanked";

const VERBS: &str = "saw found helped liked moved built chose fixed brought followed";

impl World {
    pub fn standard() -> Self {
        Self {
            topics: TOPICS.iter().map(|(n, m)| Topic { name: n.to_string(), members: owned(m) }).collect(),
            label_words: owned(LABEL_WORDS),
            entities: ENTITIES
                .iter()
                .map(|(l, h, t)| (l.to_string(), EntityPool { heads: owned(h), tails: owned(t) }))
                .collect(),
            fillers: owned(FILLERS),
            verbs: owned(VERBS),
        }
    }

    pub fn topic(&self, name: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.name == name)
    }

    pub fn entity_labels(&self) -> Vec<String> {
        self.entities.keys().cloned().collect()
    }

    /// Every word any generator can emit, plus task tags, topic names and
    /// rule words.
    pub fn words(&self) -> BTreeSet<String> {
        let mut w = BTreeSet::new();
        for t in &self.topics {
            w.insert(t.name.clone());
            w.extend(t.members.iter().cloned());
        }
        w.extend(self.label_words.iter().cloned());
        for (label, pool) in &self.entities {
            w.insert(label.clone());
            w.extend(pool.heads.iter().cloned());
            w.extend(pool.tails.iter().cloned());
        }
        w.extend(self.fillers.iter().cloned());
        w.extend(self.verbs.iter().cloned());
        for r in SummaryRule::ALL {
            w.insert(r.word().to_string());
        }
        for t in [TaskType::Ner, TaskType::Classification, TaskType::Summarization] {
            w.insert(t.tag().to_string());
        }
        w.insert(".".to_string());
        w.remove(SPLIT);
        w.remove(PAIR_SEP);
        w.remove(LABEL_SEP);
        w
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.words(), GEN_MARKERS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_are_disjoint_and_delimiter_free() {
        let w = World::standard();
        let mut seen = BTreeSet::new();
        let mut all: Vec<&String> = Vec::new();
        for t in &w.topics {
            all.push(&t.name);
            all.extend(&t.members);
        }
        all.extend(&w.label_words);
        for (l, p) in &w.entities {
            all.push(l);
            all.extend(&p.heads);
            all.extend(&p.tails);
        }
        all.extend(&w.fillers);
        all.extend(&w.verbs);
        for word in all {
            assert!(seen.insert(word.as_str()), "{word} appears twice");
            assert!(![SPLIT, PAIR_SEP, LABEL_SEP].contains(&word.as_str()));
        }
        assert!(w.topics.iter().all(|t| t.members.len() == 8));
    }

    #[test]
    fn vocabulary_covers_world() {
        let w = World::standard();
        let v = w.vocabulary();
        for word in w.words() {
            assert!(v.contains(&word), "{word}");
        }
        assert_eq!(v.special().gen_count, GEN_MARKERS);
        assert!(v.len() <= 512, "{}", v.len());
    }
}
