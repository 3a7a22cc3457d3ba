//! Text-to-text TASK and GEN formats, their parsers and the pseudo-sample
//! filter.
//!
//! TASK input is `"<tag> X"`; outputs follow the task grammar:
//!
//! * NER: `seg ! LABEL ; seg ! LABEL`
//! * classification: the verbalized class word
//! * summarization: the summary text
//!
//! GEN targets are `"X __split__ Y"` where `Y` is the TASK output.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{canonical, LABEL_SEP, PAIR_SEP, SPLIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    Ner,
    Classification,
    Summarization,
}

impl TaskType {
    /// Fixed word prepended to X in TASK inputs.
    pub fn tag(self) -> &'static str {
        match self {
            TaskType::Ner => "ner",
            TaskType::Classification => "classify",
            TaskType::Summarization => "summarize",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::Ner => "ner",
            TaskType::Classification => "classification",
            TaskType::Summarization => "summarization",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Real,
    Pseudo,
}

/// A labeled example. `y` is canonical per task type: the NER output string,
/// the decimal class id, or the summary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub task_type: TaskType,
    pub domain_id: String,
    pub x: String,
    pub y: String,
    #[serde(default)]
    pub origin: Origin,
}

/// Ordered `(segment, label)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub pairs: Vec<(String, String)>,
}

impl EntitySet {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        Self { pairs }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// `seg ! LABEL ; seg ! LABEL`
    pub fn render(&self) -> String {
        self.pairs
            .iter()
            .map(|(s, l)| format!("{s} {LABEL_SEP} {l}"))
            .collect::<Vec<_>>()
            .join(&format!(" {PAIR_SEP} "))
    }

    pub fn dedup(&self) -> Self {
        let mut seen = BTreeSet::new();
        Self { pairs: self.pairs.iter().filter(|p| seen.insert((*p).clone())).cloned().collect() }
    }
}

/// Bijection class id ↔ word(s).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Verbalizer {
    words: Vec<String>,
}

impl TryFrom<Vec<String>> for Verbalizer {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Verbalizer::new(words)
    }
}

impl From<Verbalizer> for Vec<String> {
    fn from(v: Verbalizer) -> Self {
        v.words
    }
}

impl Verbalizer {
    pub fn new<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(|w| canonical(&w.into())).collect();
        let distinct: BTreeSet<&String> = words.iter().collect();
        if distinct.len() != words.len() {
            return Err(Error::Format("verbalizer words must be distinct".into()));
        }
        if words.iter().any(|w| w.is_empty() || has_delimiter(w)) {
            return Err(Error::Format("verbalizer words must be nonempty and delimiter-free".into()));
        }
        Ok(Self { words })
    }

    pub fn verbalize(&self, class: usize) -> Result<&str> {
        self.words.get(class).map(String::as_str).ok_or(Error::UnknownClass(class))
    }

    pub fn deverbalize(&self, text: &str) -> Option<usize> {
        let t = canonical(text);
        self.words.iter().position(|w| *w == t)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSpace {
    Entities(BTreeSet<String>),
    Classes(Verbalizer),
    Free,
}

/// What the formatters need to know about a domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub task_type: TaskType,
    pub domain_id: String,
    pub labels: LabelSpace,
}

impl DomainSchema {
    /// Number of classes (classification) or entity labels (NER).
    pub fn class_count(&self) -> usize {
        match &self.labels {
            LabelSpace::Entities(l) => l.len(),
            LabelSpace::Classes(v) => v.len(),
            LabelSpace::Free => 0,
        }
    }

    pub fn entity_labels(&self) -> BTreeSet<String> {
        match &self.labels {
            LabelSpace::Entities(l) => l.clone(),
            _ => BTreeSet::new(),
        }
    }

    pub fn verbalizer(&self) -> Option<&Verbalizer> {
        match &self.labels {
            LabelSpace::Classes(v) => Some(v),
            _ => None,
        }
    }
}

fn has_delimiter(s: &str) -> bool {
    s.split_whitespace().any(|w| w == PAIR_SEP || w == LABEL_SEP || w == SPLIT)
}

/// TASK-format output text for `sample`.
pub fn task_output(sample: &Sample, schema: &DomainSchema) -> Result<String> {
    match sample.task_type {
        TaskType::Ner | TaskType::Summarization => Ok(canonical(&sample.y)),
        TaskType::Classification => {
            let class: usize = sample.y.trim().parse().map_err(|_| Error::Format(format!("class id {:?}", sample.y)))?;
            let v = schema.verbalizer().ok_or_else(|| Error::Format("classification schema without verbalizer".into()))?;
            Ok(v.verbalize(class)?.to_string())
        }
    }
}

/// `(input_text, output_text)` of the TASK format.
pub fn format_task(sample: &Sample, schema: &DomainSchema) -> Result<(String, String)> {
    let input = format!("{} {}", sample.task_type.tag(), canonical(&sample.x));
    Ok((input, task_output(sample, schema)?))
}

/// GEN-format target `"X __split__ Y"`.
pub fn format_gen_target(sample: &Sample, schema: &DomainSchema) -> Result<String> {
    Ok(format!("{} {SPLIT} {}", canonical(&sample.x), task_output(sample, schema)?))
}

/// Counts of pairs discarded while parsing NER output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub malformed: usize,
    pub foreign: usize,
    pub duplicates: usize,
}

impl ParseReport {
    pub fn dropped(&self) -> usize {
        self.malformed + self.foreign + self.duplicates
    }
}

enum PairParse {
    Ok(String, String),
    Malformed,
}

fn parse_pair(chunk: &str) -> PairParse {
    let parts: Vec<&str> = chunk.split(LABEL_SEP).collect();
    if parts.len() != 2 {
        return PairParse::Malformed;
    }
    let seg = canonical(parts[0]);
    let label = canonical(parts[1]);
    if seg.is_empty() || label.is_empty() || label.contains(' ') {
        return PairParse::Malformed;
    }
    PairParse::Ok(seg, label)
}

/// Lenient NER parser: malformed or foreign-label pairs are dropped and
/// counted, duplicates keep their first occurrence.
pub fn parse_ner_output(text: &str, label_set: &BTreeSet<String>) -> (EntitySet, ParseReport) {
    let mut report = ParseReport::default();
    let mut pairs: Vec<(String, String)> = Vec::new();
    if canonical(text).is_empty() {
        return (EntitySet::default(), report);
    }
    for chunk in text.split(PAIR_SEP) {
        match parse_pair(chunk) {
            PairParse::Malformed => report.malformed += 1,
            PairParse::Ok(seg, label) => {
                if !label_set.contains(&label) {
                    report.foreign += 1;
                } else if pairs.iter().any(|p| p.0 == seg && p.1 == label) {
                    report.duplicates += 1;
                } else {
                    pairs.push((seg, label));
                }
            }
        }
    }
    (EntitySet::new(pairs), report)
}

/// Why a generated string was not accepted as a pseudo sample. Variants are
/// listed in check priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reject {
    MultiSplit,
    NoSplit,
    EmptySide,
    BadGrammar,
    ForeignLabel,
}

impl Reject {
    pub const ALL: [Reject; 5] = [Reject::MultiSplit, Reject::NoSplit, Reject::EmptySide, Reject::BadGrammar, Reject::ForeignLabel];

    pub fn name(self) -> &'static str {
        match self {
            Reject::MultiSplit => "multi_split",
            Reject::NoSplit => "no_split",
            Reject::EmptySide => "empty_side",
            Reject::BadGrammar => "bad_grammar",
            Reject::ForeignLabel => "foreign_label",
        }
    }
}

/// Strict parse of a generated `"X __split__ Y"` string into a pseudo
/// sample of `schema`'s domain.
pub fn parse_pseudo(generated: &str, schema: &DomainSchema) -> std::result::Result<Sample, Reject> {
    let words: Vec<&str> = generated.split_whitespace().collect();
    let splits: Vec<usize> = words.iter().enumerate().filter(|(_, w)| **w == SPLIT).map(|(i, _)| i).collect();
    let at = match splits.len() {
        0 => return Err(Reject::NoSplit),
        1 => splits[0],
        _ => return Err(Reject::MultiSplit),
    };
    let x = words[..at].join(" ");
    let y = words[at + 1..].join(" ");
    if x.is_empty() || y.is_empty() {
        return Err(Reject::EmptySide);
    }
    let canonical_y = match (&schema.labels, schema.task_type) {
        (LabelSpace::Entities(labels), TaskType::Ner) => {
            let mut pairs = Vec::new();
            for chunk in y.split(PAIR_SEP) {
                match parse_pair(chunk) {
                    PairParse::Malformed => return Err(Reject::BadGrammar),
                    PairParse::Ok(seg, label) => pairs.push((seg, label)),
                }
            }
            if pairs.iter().any(|(_, l)| !labels.contains(l)) {
                return Err(Reject::ForeignLabel);
            }
            EntitySet::new(pairs).dedup().render()
        }
        (LabelSpace::Classes(v), TaskType::Classification) => match v.deverbalize(&y) {
            Some(class) => class.to_string(),
            None if has_delimiter(&y) => return Err(Reject::BadGrammar),
            None => return Err(Reject::ForeignLabel),
        },
        (_, TaskType::Summarization) => y,
        _ => return Err(Reject::BadGrammar),
    };
    Ok(Sample {
        task_type: schema.task_type,
        domain_id: schema.domain_id.clone(),
        x,
        y: canonical_y,
        origin: Origin::Pseudo,
    })
}

/// First three sentences (spans ending in `.`, `!` or `?`); documents with
/// fewer than three sentences are returned whole.
pub fn lead3(document: &str) -> String {
    let mut sentences = Vec::new();
    let mut start = 0;
    for (i, c) in document.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let s = document[start..end].trim();
            if !s.is_empty() {
                sentences.push(s);
            }
            start = end;
        }
    }
    if sentences.len() < 3 {
        return document.trim().to_string();
    }
    sentences[..3].join(" ")
}

/// Writes samples as JSON Lines; fields appear in the order
/// `task_type, domain_id, x, y, origin`.
pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> BTreeSet<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn ner_schema() -> DomainSchema {
        DomainSchema { task_type: TaskType::Ner, domain_id: "d".into(), labels: LabelSpace::Entities(labels(&["PER", "LOC"])) }
    }

    fn sentiment() -> DomainSchema {
        let v = Verbalizer::new(["terrible", "bad", "okay", "good", "wonderful"]).unwrap();
        DomainSchema { task_type: TaskType::Classification, domain_id: "rev".into(), labels: LabelSpace::Classes(v) }
    }

    fn sample(t: TaskType, x: &str, y: &str) -> Sample {
        Sample { task_type: t, domain_id: "d".into(), x: x.into(), y: y.into(), origin: Origin::Real }
    }

    #[test]
    fn ner_single_pair_has_no_pair_separator() {
        let es = EntitySet::new(vec![("acme corp".into(), "ORG".into())]);
        let s = sample(TaskType::Ner, "we met acme corp", &es.render());
        let (_, out) = format_task(&s, &ner_schema()).unwrap();
        assert_eq!(out, "acme corp ! ORG");
    }

    #[test]
    fn classification_uses_verbalizer() {
        let s = sample(TaskType::Classification, "loved it", "4");
        let (inp, out) = format_task(&s, &sentiment()).unwrap();
        assert_eq!(out, "wonderful");
        assert_eq!(inp, "classify loved it");
        let bad = sample(TaskType::Classification, "x", "9");
        assert!(matches!(format_task(&bad, &sentiment()), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn summarization_output_is_identity() {
        let schema = DomainSchema { task_type: TaskType::Summarization, domain_id: "s".into(), labels: LabelSpace::Free };
        let s = sample(TaskType::Summarization, "a b . c d .", "a b .");
        assert_eq!(format_task(&s, &schema).unwrap().1, "a b .");
    }

    #[test]
    fn ner_parser_examples() {
        let ls = labels(&["PER", "LOC"]);
        let (es, rep) = parse_ner_output("a ! PER ; b c ! LOC", &ls);
        assert_eq!(es.pairs, vec![("a".into(), "PER".into()), ("b c".into(), "LOC".into())]);
        assert_eq!(rep.dropped(), 0);
        assert!(parse_ner_output("", &ls).0.is_empty());
        let (es, rep) = parse_ner_output("a ! BADLABEL", &ls);
        assert!(es.is_empty());
        assert_eq!(rep.dropped(), 1);
        let (es, rep) = parse_ner_output("a ! PER ; a ! PER ; junk ; x ! y ! z", &ls);
        assert_eq!(es.len(), 1);
        assert_eq!(rep, ParseReport { malformed: 2, foreign: 0, duplicates: 1 });
    }

    #[test]
    fn pseudo_acceptance_and_rejections() {
        let s = parse_pseudo("some text __split__ a ! PER", &ner_schema()).unwrap();
        assert_eq!((s.x.as_str(), s.y.as_str(), s.origin), ("some text", "a ! PER", Origin::Pseudo));
        assert_eq!(parse_pseudo("some text a ! PER", &ner_schema()), Err(Reject::NoSplit));
        assert_eq!(parse_pseudo("x __split__ a ! ORG", &ner_schema()), Err(Reject::ForeignLabel));
        assert_eq!(parse_pseudo("x __split__ y __split__ a ! PER", &ner_schema()), Err(Reject::MultiSplit));
        assert_eq!(parse_pseudo("__split__ a ! PER", &ner_schema()), Err(Reject::EmptySide));
        assert_eq!(parse_pseudo("x __split__ a PER", &ner_schema()), Err(Reject::BadGrammar));
        assert_eq!(parse_pseudo("x __split__ great", &sentiment()), Err(Reject::ForeignLabel));
        assert_eq!(parse_pseudo("x __split__ good", &sentiment()).unwrap().y, "3");
    }

    #[test]
    fn gen_target_round_trips() {
        let es = EntitySet::new(vec![("a".into(), "PER".into()), ("b".into(), "LOC".into())]);
        let s = sample(TaskType::Ner, "a met b", &es.render());
        let t = format_gen_target(&s, &ner_schema()).unwrap();
        let back = parse_pseudo(&t, &ner_schema()).unwrap();
        assert_eq!((back.x, back.y), (s.x.clone(), s.y.clone()));
        let c = Sample { domain_id: "rev".into(), ..sample(TaskType::Classification, "loved it", "4") };
        assert_eq!(format_gen_target(&c, &sentiment()).unwrap(), "loved it __split__ wonderful");
    }

    #[test]
    fn lead3_cases() {
        assert_eq!(lead3("a b . c . d ! e ? f ."), "a b . c . d !");
        assert_eq!(lead3("one . two ."), "one . two .");
        assert_eq!(lead3(""), "");
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let v = vec![sample(TaskType::Ner, "a", "a ! PER"), sample(TaskType::Classification, "b", "1")];
        write_dataset(&p, &v).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"task_type\":\"ner\",\"domain_id\":\"d\",\"x\":\"a\",\"y\":\"a ! PER\""));
        assert_eq!(read_dataset(&p).unwrap(), v);
    }
}
