//! Trainable soft prompts: one prompt matrix per task type plus one
//! generation-token embedding per registered domain.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::format::TaskType;
use crate::optim::{clip_global_norm, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vocab::TokenId;

/// Read access shared by live prompts and snapshots.
pub trait PromptView<T: Scalar> {
    fn task_type(&self) -> TaskType;
    fn embeds(&self) -> &Matrix<T>;
    fn gen_embed(&self, domain_id: &str) -> Result<&[T]>;

    /// Prefix rows for the TASK format: `P`.
    fn task_prefix(&self) -> Matrix<T> {
        self.embeds().clone()
    }

    /// Prefix rows for the GEN format: `[G_domain, P]`.
    fn gen_prefix(&self, domain_id: &str) -> Result<Matrix<T>> {
        let g = self.gen_embed(domain_id)?;
        let mut m = Matrix::from_vec(1, g.len(), g.to_vec());
        for r in 0..self.embeds().rows() {
            m.push_row(self.embeds().row(r));
        }
        Ok(m)
    }
}

/// Generation tokens in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenTokens<T> {
    entries: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> GenTokens<T> {
    pub fn get(&self, domain_id: &str) -> Option<&[T]> {
        self.entries.iter().find(|(d, _)| d == domain_id).map(|(_, v)| v.as_slice())
    }

    fn get_mut(&mut self, domain_id: &str) -> Option<&mut Vec<T>> {
        self.entries.iter_mut().find(|(d, _)| d == domain_id).map(|(_, v)| v)
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(d, v)| (d.as_str(), v.as_slice()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompt<T> {
    task_type: TaskType,
    embeds: Matrix<T>,
    gen: GenTokens<T>,
    frozen: bool,
    version: u64,
}

/// Immutable deep copy of a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSnapshot<T> {
    task_type: TaskType,
    embeds: Matrix<T>,
    gen: GenTokens<T>,
    version: u64,
}

/// Gradients shaped like a prompt's trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptGrads<T> {
    pub embeds: Matrix<T>,
    /// Same order as the prompt's generation tokens.
    pub gen: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> PromptGrads<T> {
    pub fn zeros_like(prompt: &TaskPrompt<T>) -> Self {
        Self {
            embeds: Matrix::zeros(prompt.embeds.rows(), prompt.embeds.cols()),
            gen: prompt.gen.iter().map(|(d, v)| (d.to_string(), vec![T::zero(); v.len()])).collect(),
        }
    }

    pub fn gen_mut(&mut self, domain_id: &str) -> Result<&mut [T]> {
        self.gen
            .iter_mut()
            .find(|(d, _)| d == domain_id)
            .map(|(_, v)| v.as_mut_slice())
            .ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
    }

    /// Adds `∂/∂prefix` of a TASK-format pass.
    pub fn add_task_prefix(&mut self, d_prefix: &Matrix<T>) {
        self.embeds.add_assign(d_prefix);
    }

    /// Adds `∂/∂prefix` of a GEN-format pass: row 0 is the domain's
    /// generation token, the rest the prompt.
    pub fn add_gen_prefix(&mut self, domain_id: &str, d_prefix: &Matrix<T>) -> Result<()> {
        let g = self.gen_mut(domain_id)?;
        for (a, &b) in g.iter_mut().zip(d_prefix.row(0)) {
            *a += b;
        }
        for r in 1..d_prefix.rows() {
            for (a, &b) in self.embeds.row_mut(r - 1).iter_mut().zip(d_prefix.row(r)) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &PromptGrads<T>, w: T) -> Result<()> {
        if other.embeds.shape() != self.embeds.shape() {
            return Err(Error::Shape("prompt gradient shapes differ".into()));
        }
        for (a, &b) in self.embeds.data_mut().iter_mut().zip(other.embeds.data()) {
            *a += w * b;
        }
        for (d, g) in &other.gen {
            for (a, &b) in self.gen_mut(d)?.iter_mut().zip(g) {
                *a += w * b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, w: T) {
        self.embeds.scale(w);
        for (_, g) in &mut self.gen {
            g.iter_mut().for_each(|x| *x *= w);
        }
    }

    pub fn norm(&self) -> f64 {
        let mut s = self.embeds.sum_sq().as_f64();
        for (_, g) in &self.gen {
            s += g.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        s.sqrt()
    }

    /// All coordinates, prompt rows first.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.embeds.data().to_vec();
        for (_, g) in &self.gen {
            v.extend_from_slice(g);
        }
        v
    }
}

fn ordinary_word_ids<T: Scalar>(backbone: &Backbone<T>) -> std::ops::Range<TokenId> {
    let s = backbone.vocab().special();
    s.gen_first + s.gen_count..backbone.vocab().len() as TokenId
}

fn sample_rows<T: Scalar>(backbone: &Backbone<T>, n: usize, rng: &mut ChaCha8Rng) -> Result<Matrix<T>> {
    let ids = ordinary_word_ids(backbone);
    if ids.is_empty() {
        return Err(Error::Config("vocabulary has no ordinary words to initialize from".into()));
    }
    let picked: Vec<TokenId> = (0..n).map(|_| rng.gen_range(ids.clone())).collect();
    Ok(backbone.embed_rows(&picked))
}

impl<T: Scalar> TaskPrompt<T> {
    /// Rows copied from uniformly drawn (with replacement) embeddings of
    /// ordinary vocabulary words.
    pub fn init(task_type: TaskType, n_p: usize, backbone: &Backbone<T>, seed: u64) -> Result<Self> {
        if n_p == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { task_type, embeds: sample_rows(backbone, n_p, &mut rng)?, gen: GenTokens::default(), frozen: false, version: 0 })
    }

    /// Starts a new prompt for `task_type` from `prev`'s trained rows.
    pub fn init_fkt(prev: &TaskPrompt<T>, task_type: TaskType) -> Self {
        Self { task_type, embeds: prev.embeds.clone(), gen: GenTokens::default(), frozen: false, version: 0 }
    }

    pub fn from_parts(task_type: TaskType, embeds: Matrix<T>) -> Self {
        Self { task_type, embeds, gen: GenTokens::default(), frozen: false, version: 0 }
    }

    pub fn n_p(&self) -> usize {
        self.embeds.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embeds.cols()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn gen_tokens(&self) -> &GenTokens<T> {
        &self.gen
    }

    pub fn has_domain(&self, domain_id: &str) -> bool {
        self.gen.get(domain_id).is_some()
    }

    fn check_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::PromptFrozen(self.task_type.name().to_string()))
        } else {
            Ok(())
        }
    }

    /// Registers a vocabulary-initialized generation token for `domain_id`.
    pub fn add_generation_token(&mut self, domain_id: &str, backbone: &Backbone<T>, seed: u64) -> Result<()> {
        self.check_mutable()?;
        if self.has_domain(domain_id) {
            return Err(Error::DuplicateDomain(domain_id.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = sample_rows(backbone, 1, &mut rng)?;
        self.gen.entries.push((domain_id.to_string(), row.into_vec()));
        self.version += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> PromptSnapshot<T> {
        PromptSnapshot { task_type: self.task_type, embeds: self.embeds.clone(), gen: self.gen.clone(), version: self.version }
    }

    /// Restores trainable values from a snapshot of this prompt (used for
    /// best-checkpoint selection). Tokens registered after the snapshot are
    /// kept.
    pub fn restore(&mut self, snap: &PromptSnapshot<T>) -> Result<()> {
        self.check_mutable()?;
        if snap.embeds.shape() != self.embeds.shape() {
            return Err(Error::Shape("snapshot prompt shape differs".into()));
        }
        self.embeds = snap.embeds.clone();
        for (d, v) in snap.gen.iter() {
            if let Some(g) = self.gen.get_mut(d) {
                g.copy_from_slice(v);
            }
        }
        self.version += 1;
        Ok(())
    }

    /// One clipped optimizer update of the prompt rows and every
    /// generation token.
    pub fn step(&mut self, grads: &PromptGrads<T>, opt: &mut OptimizerState<T>, clip_norm: f64) -> Result<()> {
        self.check_mutable()?;
        if grads.embeds.shape() != self.embeds.shape()
            || grads.gen.len() != self.gen.len()
            || grads.gen.iter().zip(&self.gen.entries).any(|((a, g), (b, v))| a != b || g.len() != v.len())
        {
            return Err(Error::Shape("gradient does not match prompt layout".into()));
        }
        let mut g: Vec<Vec<T>> = std::iter::once(grads.embeds.data().to_vec()).chain(grads.gen.iter().map(|(_, v)| v.clone())).collect();
        {
            let mut views: Vec<&mut [T]> = g.iter_mut().map(|v| v.as_mut_slice()).collect();
            clip_global_norm(&mut views, clip_norm);
        }
        let gv: Vec<&[T]> = g.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [T]> = std::iter::once(self.embeds.data_mut())
            .chain(self.gen.entries.iter_mut().map(|(_, v)| v.as_mut_slice()))
            .collect();
        opt.update(&mut params, &gv, 1.0);
        self.version += 1;
        Ok(())
    }

    /// Trainable values flattened, prompt rows first, then generation
    /// tokens in registration order.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.embeds.data().to_vec();
        for (_, g) in self.gen.iter() {
            v.extend_from_slice(g);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.embeds.data().len() + self.gen.iter().map(|(_, g)| g.len()).sum::<usize>()
    }

    /// Overwrites the trainable values from a [`flat`](Self::flat) layout.
    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        self.check_mutable()?;
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} prompt values, got {}", self.num_params(), values.len())));
        }
        let n = self.embeds.data().len();
        self.embeds.data_mut().copy_from_slice(&values[..n]);
        let mut at = n;
        for (_, g) in &mut self.gen.entries {
            let n = g.len();
            g.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn digest(&self) -> String {
        digest(self.task_type, &self.embeds, &self.gen)
    }
}

fn digest<T: Scalar>(task_type: TaskType, embeds: &Matrix<T>, gen: &GenTokens<T>) -> String {
    let mut h = Sha256::new();
    h.update(task_type.name().as_bytes());
    h.update((embeds.rows() as u64).to_le_bytes());
    h.update((embeds.cols() as u64).to_le_bytes());
    for &x in embeds.data() {
        h.update(x.as_f64().to_le_bytes());
    }
    for (d, v) in gen.iter() {
        h.update(d.as_bytes());
        h.update([0u8]);
        for &x in v {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl<T: Scalar> PromptView<T> for TaskPrompt<T> {
    fn task_type(&self) -> TaskType {
        self.task_type
    }

    fn embeds(&self) -> &Matrix<T> {
        &self.embeds
    }

    fn gen_embed(&self, domain_id: &str) -> Result<&[T]> {
        self.gen.get(domain_id).ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
    }
}

impl<T: Scalar> PromptSnapshot<T> {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn gen_tokens(&self) -> &GenTokens<T> {
        &self.gen
    }

    pub fn digest(&self) -> String {
        digest(self.task_type, &self.embeds, &self.gen)
    }
}

impl<T: Scalar> PromptView<T> for PromptSnapshot<T> {
    fn task_type(&self) -> TaskType {
        self.task_type
    }

    fn embeds(&self) -> &Matrix<T> {
        &self.embeds
    }

    fn gen_embed(&self, domain_id: &str) -> Result<&[T]> {
        self.gen.get(domain_id).ok_or_else(|| Error::UnknownDomain(domain_id.to_string()))
    }
}

/// All prompts of a run, one per task type, in learning order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptBank<T> {
    prompts: Vec<TaskPrompt<T>>,
}

#[derive(Serialize, Deserialize)]
struct PromptRecord<T> {
    task_type: TaskType,
    n_p: usize,
    d_model: usize,
    frozen: bool,
    version: u64,
    digest: String,
    embeds: Matrix<T>,
    gen: GenTokens<T>,
}

#[derive(Serialize, Deserialize)]
struct BankFile<T> {
    format: String,
    prompts: Vec<PromptRecord<T>>,
}

const BANK_FORMAT: &str = "lplab-prompts/1";

impl<T: Scalar + Serialize + for<'de> Deserialize<'de>> PromptBank<T> {
    pub fn new() -> Self {
        Self { prompts: Vec::new() }
    }

    pub fn get(&self, task_type: TaskType) -> Option<&TaskPrompt<T>> {
        self.prompts.iter().find(|p| p.task_type == task_type)
    }

    pub fn get_mut(&mut self, task_type: TaskType) -> Option<&mut TaskPrompt<T>> {
        self.prompts.iter_mut().find(|p| p.task_type == task_type)
    }

    /// The most recently added prompt.
    pub fn last(&self) -> Option<&TaskPrompt<T>> {
        self.prompts.last()
    }

    /// Adds a prompt for a new task type; every earlier prompt is frozen so
    /// at most one prompt stays trainable.
    pub fn push(&mut self, prompt: TaskPrompt<T>) -> Result<()> {
        if self.get(prompt.task_type).is_some() {
            return Err(Error::Config(format!("bank already holds a {} prompt", prompt.task_type)));
        }
        for p in &mut self.prompts {
            p.freeze();
        }
        self.prompts.push(prompt);
        Ok(())
    }

    pub fn prompts(&self) -> &[TaskPrompt<T>] {
        &self.prompts
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BankFile {
            format: BANK_FORMAT.to_string(),
            prompts: self
                .prompts
                .iter()
                .map(|p| PromptRecord {
                    task_type: p.task_type,
                    n_p: p.n_p(),
                    d_model: p.d_model(),
                    frozen: p.frozen,
                    version: p.version,
                    digest: p.digest(),
                    embeds: p.embeds.clone(),
                    gen: p.gen.clone(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    /// Loads a bank, verifying each prompt's digest.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: BankFile<T> = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != BANK_FORMAT {
            return Err(Error::Format(format!("unknown prompt bank format {:?}", file.format)));
        }
        let mut prompts = Vec::new();
        for r in file.prompts {
            if r.embeds.shape() != (r.n_p, r.d_model) {
                return Err(Error::Shape(format!("{} prompt is not {}x{}", r.task_type, r.n_p, r.d_model)));
            }
            let actual = digest(r.task_type, &r.embeds, &r.gen);
            if actual != r.digest {
                return Err(Error::Checksum { expected: r.digest, actual });
            }
            prompts.push(TaskPrompt { task_type: r.task_type, embeds: r.embeds, gen: r.gen, frozen: r.frozen, version: r.version });
        }
        Ok(Self { prompts })
    }
}
