//! Lifelong streams: stage-by-stage training of one method, replay,
//! evaluation after every stage, and aggregation over seeds.

mod config;
mod eval;
mod regularize;
mod replay;
mod stage;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::format::{DomainSchema, Origin, Sample, TaskType};
use crate::losses::{Encoded, LossWeights};
use crate::metrics::forgetting;
use crate::prompt::{PromptBank, PromptView, TaskPrompt};
use crate::scalar::Scalar;
use crate::synth::{make_domain, sample_few_shot, DomainSpec, FewShotSplit, World};

pub use config::{Ablation, Method, PseudoConfig, Regularizer, StageSpec, StreamConfig, WeightTable};
pub use eval::{combined_score, evaluate_domain, DomainScore, EvalReport, MeanStd, SeedRun, StageRecord, StepRecord};
pub use regularize::{
    ewc_importance_full, ewc_importance_prompt, flat_params, mas_importance_full, mas_importance_prompt, regularizer_grad,
    regularizer_penalty, ImportanceMap,
};
pub use replay::{generate_pseudo, select_real_replay, PseudoStats, ReplayBuffer, ReplayCounts};

use stage::{full_prefix, text_prefix, train_full, train_prompt, PromptStage, Schedule, TrainItem};

/// Data of one stage under one seed.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageData {
    pub spec: DomainSpec,
    pub schema: DomainSchema,
    pub split: FewShotSplit,
}

/// Generates every stage's domain and few-shot split for `seed`.
pub fn prepare_stream(cfg: &StreamConfig, world: &World, seed: u64) -> Result<Vec<StageData>> {
    cfg.validate()?;
    cfg.stages
        .iter()
        .map(|s| {
            let spec = cfg.domain(&s.domain)?;
            let corpus = make_domain(world, &spec, seed)?;
            let shots = if s.task_type == TaskType::Summarization { cfg.summary_shots } else { cfg.shots };
            let mut split = sample_few_shot(&corpus, shots, seed)?;
            if cfg.eval_limit > 0 {
                split.test.truncate(cfg.eval_limit);
            }
            Ok(StageData { schema: corpus.schema, spec, split })
        })
        .collect()
}

/// What a run leaves behind: the prompts, or the fine-tuned model.
#[derive(Clone, Debug)]
pub enum FinalState<T> {
    Prompts(PromptBank<T>),
    Model(Backbone<T>),
}

impl<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>> FinalState<T> {
    /// Re-scores a domain with the stored state.
    pub fn evaluate(&self, backbone: &Backbone<T>, data: &StageData, max_len: usize) -> Result<DomainScore> {
        let t = data.schema.task_type;
        match self {
            FinalState::Prompts(bank) => {
                let p = bank.get(t).ok_or_else(|| Error::UnknownDomain(data.schema.domain_id.clone()))?;
                evaluate_domain(backbone, &p.task_prefix(), &data.schema, &data.split.test, max_len)
            }
            FinalState::Model(m) => evaluate_domain(m, &full_prefix(m, t)?, &data.schema, &data.split.test, max_len),
        }
    }
}

pub struct SeedOutcome<T> {
    pub run: SeedRun,
    pub state: FinalState<T>,
    pub data: Vec<StageData>,
}

fn encode_all(samples: &[Sample], schema: &DomainSchema, backbone_vocab: &crate::vocab::Vocabulary) -> Result<Vec<Encoded>> {
    samples.iter().map(|s| Encoded::task(s, schema, backbone_vocab)).collect()
}

struct Ctx<'a, T> {
    backbone: &'a Backbone<T>,
    cfg: &'a StreamConfig,
    seed: u64,
    on_stage: StageObserver<'a>,
}

impl<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>> Ctx<'_, T> {
    fn counts(&self) -> ReplayCounts {
        ReplayCounts { per_class: self.cfg.pseudo_per_class, per_domain: self.cfg.pseudo_per_domain }
    }

    fn sched(&self, stage: usize, steps: usize, lr: f64) -> Schedule {
        Schedule {
            steps,
            batch_size: self.cfg.batch_size,
            validations: self.cfg.validations_per_stage,
            lr,
            clip_norm: self.cfg.clip_norm,
            seed: self.seed.wrapping_mul(7919).wrapping_add(stage as u64),
        }
    }

    fn items(&self, samples: &[&Sample], schemas: &HashMap<String, DomainSchema>, with_gen: bool) -> Result<Vec<TrainItem>> {
        let vocab = self.backbone.vocab();
        samples
            .iter()
            .map(|s| {
                let schema = schemas.get(&s.domain_id).ok_or_else(|| Error::UnknownDomain(s.domain_id.clone()))?;
                Ok(TrainItem {
                    task_type: s.task_type,
                    task: Encoded::task(s, schema, vocab)?,
                    gen: if with_gen { Some(Encoded::gen(s, schema, vocab)?) } else { None },
                    pseudo: s.origin == Origin::Pseudo,
                })
            })
            .collect()
    }

    fn evaluate(&self, state: &FinalState<T>, learned: &[&StageData]) -> Result<Vec<DomainScore>> {
        learned.iter().map(|d| state.evaluate(self.backbone, d, self.cfg.eval_max_len)).collect()
    }

    fn digests(&self, state: &FinalState<T>) -> (BTreeMap<TaskType, String>, String) {
        match state {
            FinalState::Prompts(bank) => {
                (bank.prompts().iter().map(|p| (p.task_type(), p.digest())).collect(), self.backbone.digest())
            }
            FinalState::Model(m) => (BTreeMap::new(), m.digest()),
        }
    }

    fn new_prompt(&self, bank: &PromptBank<T>, t: TaskType, stage: usize) -> Result<TaskPrompt<T>> {
        match (self.cfg.fkt, bank.last()) {
            (true, Some(prev)) => Ok(TaskPrompt::init_fkt(prev, t)),
            _ => TaskPrompt::init(t, self.cfg.prompt_len, self.backbone, self.seed.wrapping_mul(1_000_003).wrapping_add(stage as u64)),
        }
    }
}

fn combined(scores: &[DomainScore]) -> BTreeMap<TaskType, f64> {
    let mut by: BTreeMap<TaskType, Vec<&DomainScore>> = BTreeMap::new();
    for s in scores {
        by.entry(s.task_type).or_default().push(s);
    }
    by.into_iter().map(|(t, v)| (t, combined_score(v))).collect()
}

/// Called with each stage record as soon as it exists.
pub type StageObserver<'a> = &'a (dyn Fn(&StageRecord) + Sync);

/// Runs every stage of `cfg` for one seed.
pub fn run_seed<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    backbone: &Backbone<T>,
    cfg: &StreamConfig,
    world: &World,
    seed: u64,
) -> Result<SeedOutcome<T>> {
    run_seed_observed(backbone, cfg, world, seed, &|_| {})
}

/// [`run_seed`], reporting stages as they finish so that a failure
/// later in the stream does not lose earlier results.
pub fn run_seed_observed<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    backbone: &Backbone<T>,
    cfg: &StreamConfig,
    world: &World,
    seed: u64,
    on_stage: StageObserver<'_>,
) -> Result<SeedOutcome<T>> {
    if !backbone.is_frozen() {
        return Err(Error::Config("streams need a frozen (pretrained) backbone".into()));
    }
    let data = prepare_stream(cfg, world, seed)?;
    let ctx = Ctx { backbone, cfg, seed, on_stage };
    let (state, stages) =
        if cfg.method.is_multitask() { run_multitask(&ctx, &data)? } else { run_sequential(&ctx, &data)? };
    let order: Vec<String> = data.iter().map(|d| d.schema.domain_id.clone()).collect();
    let series: Vec<HashMap<String, f64>> =
        stages.iter().map(|st| st.scores.iter().map(|s| (s.domain_id.clone(), s.metric)).collect()).collect();
    let final_score = stages
        .last()
        .map(|st| st.combined.values().sum::<f64>() / st.combined.len().max(1) as f64)
        .unwrap_or(0.0);
    let run = SeedRun { seed, method: cfg.method, forgetting: forgetting(&order, &series), final_score, stages };
    Ok(SeedOutcome { run, state, data })
}

fn stage_record<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    ctx: &Ctx<'_, T>,
    stage: usize,
    trained: Vec<String>,
    state: &FinalState<T>,
    learned: &[&StageData],
    outcome: Option<stage::StageOutcome>,
    replay_size: usize,
    pseudo: Vec<PseudoStats>,
) -> Result<StageRecord> {
    let scores = ctx.evaluate(state, learned)?;
    let (prompt_digests, backbone_digest) = ctx.digests(state);
    let warnings = pseudo
        .iter()
        .filter(|p| p.kept < p.target)
        .map(|p| {
            format!(
                "{}: kept {} of {} pseudo samples after {} attempts (acceptance {:.1}%)",
                p.domain_id,
                p.kept,
                p.target,
                p.attempts,
                100.0 * p.acceptance_rate()
            )
        })
        .collect();
    let (losses, best_step, best_valid_loss) = match outcome {
        Some(o) => (o.losses, o.best_step, o.best_valid_loss),
        None => (Vec::new(), 0, f64::NAN),
    };
    let rec = StageRecord {
        seed: ctx.seed,
        method: ctx.cfg.method,
        stage,
        trained,
        combined: combined(&scores),
        scores,
        replay_size,
        pseudo,
        best_step,
        best_valid_loss,
        losses,
        prompt_digests,
        backbone_digest,
        warnings,
    };
    (ctx.on_stage)(&rec);
    Ok(rec)
}

fn run_sequential<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    ctx: &Ctx<'_, T>,
    data: &[StageData],
) -> Result<(FinalState<T>, Vec<StageRecord>)> {
    let cfg = ctx.cfg;
    let method = cfg.method;
    let vocab = ctx.backbone.vocab();
    let mut state =
        if method.is_full_model() { FinalState::Model(ctx.backbone.thawed_copy()) } else { FinalState::Prompts(PromptBank::new()) };
    let mut importance: BTreeMap<TaskType, ImportanceMap> = BTreeMap::new();
    let mut full_importance: Option<ImportanceMap> = None;
    let mut records = Vec::new();
    for (k, st) in data.iter().enumerate() {
        let t = st.schema.task_type;
        let earlier: Vec<&StageData> = data[..k].iter().filter(|d| d.schema.task_type == t).collect();
        let schemas: HashMap<String, DomainSchema> =
            data[..=k].iter().map(|d| (d.schema.domain_id.clone(), d.schema.clone())).collect();
        let real: Vec<&Sample> = st.split.train.iter().collect();
        let valid = encode_all(&st.split.valid, &st.schema, vocab)?;
        let sched = ctx.sched(k, cfg.steps_per_stage, if method.is_full_model() { cfg.ft_lr } else { cfg.lr });
        let mut pseudo_stats = Vec::new();
        let mut replay = ReplayBuffer::default();
        let outcome = match &mut state {
            FinalState::Prompts(bank) => {
                if bank.get(t).is_none() {
                    let p = ctx.new_prompt(bank, t, k)?;
                    bank.push(p)?;
                }
                let prompt = bank.get_mut(t).expect("prompt just ensured");
                let snapshot = prompt.snapshot();
                let replay_on = cfg.replay && !earlier.is_empty();
                if method == Method::Lfpt5 && replay_on {
                    let learned: Vec<DomainSchema> = earlier.iter().map(|d| d.schema.clone()).collect();
                    let (buf, stats) = generate_pseudo(ctx.backbone, &snapshot, &learned, ctx.counts(), &cfg.pseudo, ctx.seed ^ (k as u64) << 32)?;
                    replay = buf;
                    pseudo_stats = stats;
                } else if method == Method::PtR && replay_on {
                    let stored: Vec<(DomainSchema, Vec<Sample>)> =
                        earlier.iter().map(|d| (d.schema.clone(), d.split.train.clone())).collect();
                    replay = select_real_replay(&stored, ctx.counts(), ctx.seed ^ (k as u64) << 32);
                }
                let lfpt5 = method == Method::Lfpt5;
                if lfpt5 {
                    prompt.add_generation_token(&st.schema.domain_id, ctx.backbone, ctx.seed.wrapping_mul(31).wrapping_add(k as u64 + 17))?;
                }
                let mut all: Vec<&Sample> = real.clone();
                all.extend(replay.samples());
                let items = ctx.items(&all, &schemas, lfpt5)?;
                let weights = if lfpt5 { cfg.weights.get(t) } else { LossWeights { lambda_lm: 0.0, lambda_kl: 0.0 } };
                let reg = importance.get(&t).map(|m| (m, cfg.reg_strength()));
                let stage = PromptStage { backbone: ctx.backbone, items: &items, valid: &valid, snapshot: Some(&snapshot), weights, reg };
                let outcome = train_prompt(&stage, prompt, &sched)?;
                if let Some(r) = method.regularizer() {
                    let data = encode_all(&st.split.train, &st.schema, vocab)?;
                    let map = match r {
                        Regularizer::Ewc => ewc_importance_prompt(ctx.backbone, prompt, &data)?,
                        Regularizer::Mas => mas_importance_prompt(ctx.backbone, prompt, &data)?,
                    };
                    match importance.get_mut(&t) {
                        Some(m) => m.merge(map)?,
                        None => {
                            importance.insert(t, map);
                        }
                    }
                }
                outcome
            }
            FinalState::Model(model) => {
                let items = ctx.items(&real, &schemas, false)?;
                let valid: Vec<(TaskType, Encoded)> = valid.into_iter().map(|e| (t, e)).collect();
                let reg = full_importance.as_ref().map(|m| (m, cfg.reg_strength()));
                let outcome = train_full(model, &items, &valid, reg, &sched)?;
                if let Some(r) = method.regularizer() {
                    let data = encode_all(&st.split.train, &st.schema, vocab)?;
                    let slots = text_prefix(model, t)?;
                    let map = match r {
                        Regularizer::Ewc => ewc_importance_full(model, &slots, &data)?,
                        Regularizer::Mas => mas_importance_full(model, &slots, &data)?,
                    };
                    match &mut full_importance {
                        Some(m) => m.merge(map)?,
                        None => full_importance = Some(map),
                    }
                }
                outcome
            }
        };
        let learned: Vec<&StageData> = data[..=k].iter().collect();
        records.push(stage_record(
            ctx,
            k,
            vec![st.schema.domain_id.clone()],
            &state,
            &learned,
            Some(outcome),
            replay.len(),
            pseudo_stats,
        )?);
    }
    Ok((state, records))
}

/// Trains once on the union of every stage's data (per task type for
/// prompts), with as many steps as the whole stream.
fn run_multitask<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    ctx: &Ctx<'_, T>,
    data: &[StageData],
) -> Result<(FinalState<T>, Vec<StageRecord>)> {
    let cfg = ctx.cfg;
    let vocab = ctx.backbone.vocab();
    let schemas: HashMap<String, DomainSchema> = data.iter().map(|d| (d.schema.domain_id.clone(), d.schema.clone())).collect();
    let mut types: Vec<TaskType> = Vec::new();
    for d in data {
        if !types.contains(&d.schema.task_type) {
            types.push(d.schema.task_type);
        }
    }
    let valid_of = |ds: &[&StageData]| -> Result<Vec<(TaskType, Encoded)>> {
        let mut v = Vec::new();
        for d in ds {
            for e in encode_all(&d.split.valid, &d.schema, vocab)? {
                v.push((d.schema.task_type, e));
            }
        }
        Ok(v)
    };
    let mut losses = Vec::new();
    let (mut best_step, mut best_valid_loss) = (0, 0.0);
    let state = if cfg.method.is_full_model() {
        let mut model = ctx.backbone.thawed_copy();
        let all: Vec<&StageData> = data.iter().collect();
        let real: Vec<&Sample> = data.iter().flat_map(|d| d.split.train.iter()).collect();
        let items = ctx.items(&real, &schemas, false)?;
        let o = train_full(&mut model, &items, &valid_of(&all)?, None, &ctx.sched(0, cfg.steps_per_stage * data.len(), cfg.ft_lr))?;
        losses = o.losses;
        best_step = o.best_step;
        best_valid_loss = o.best_valid_loss;
        FinalState::Model(model)
    } else {
        let mut bank = PromptBank::new();
        for (i, &t) in types.iter().enumerate() {
            let group: Vec<&StageData> = data.iter().filter(|d| d.schema.task_type == t).collect();
            let mut prompt = ctx.new_prompt(&bank, t, i)?;
            let real: Vec<&Sample> = group.iter().flat_map(|d| d.split.train.iter()).collect();
            let items = ctx.items(&real, &schemas, false)?;
            let valid: Vec<Encoded> = valid_of(&group)?.into_iter().map(|(_, e)| e).collect();
            let stage = PromptStage {
                backbone: ctx.backbone,
                items: &items,
                valid: &valid,
                snapshot: None,
                weights: LossWeights { lambda_lm: 0.0, lambda_kl: 0.0 },
                reg: None,
            };
            let o = train_prompt(&stage, &mut prompt, &ctx.sched(i, cfg.steps_per_stage * group.len(), cfg.lr))?;
            losses.extend(o.losses);
            best_step = o.best_step;
            best_valid_loss = o.best_valid_loss;
            bank.push(prompt)?;
        }
        FinalState::Prompts(bank)
    };
    let all: Vec<&StageData> = data.iter().collect();
    let outcome = stage::StageOutcome { losses, best_step, best_valid_loss };
    let trained = data.iter().map(|d| d.schema.domain_id.clone()).collect();
    let rec = stage_record(ctx, 0, trained, &state, &all, Some(outcome), 0, Vec::new())?;
    Ok((state, vec![rec]))
}

/// Runs every seed (up to `workers` at a time) and aggregates.
pub fn run_stream<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    backbone: &Backbone<T>,
    cfg: &StreamConfig,
    world: &World,
    workers: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let runs = run_seeds(backbone, cfg, world, workers, &|_| {})?;
    Ok(EvalReport::aggregate(cfg.method, cfg.digest(), runs.into_iter().map(|o| o.run).collect()))
}

/// Per-seed outcomes in seed order.
pub fn run_seeds<T: Scalar + serde::Serialize + for<'de> serde::Deserialize<'de>>(
    backbone: &Backbone<T>,
    cfg: &StreamConfig,
    world: &World,
    workers: usize,
    on_stage: StageObserver<'_>,
) -> Result<Vec<SeedOutcome<T>>> {
    let n = cfg.seeds.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedOutcome<T>>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = run_seed_observed(backbone, cfg, world, cfg.seeds[i], on_stage);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("result lock").into_iter().map(|r| r.expect("every seed ran")).collect()
}
