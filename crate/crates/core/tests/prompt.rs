use lplab_core::backbone::{Backbone, BackboneDims};
use lplab_core::format::TaskType;
use lplab_core::losses::{kl_loss, task_loss, task_loss_grad, Encoded};
use lplab_core::optim::{OptimizerKind, OptimizerState};
use lplab_core::prompt::{PromptBank, PromptGrads, PromptView, TaskPrompt};
use lplab_core::vocab::Vocabulary;
use lplab_core::Error;

fn backbone() -> Backbone<f64> {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let dims = BackboneDims { d_model: 16, n_heads: 2, d_ff: 32, n_enc_layers: 1, n_dec_layers: 1 };
    let mut bb = Backbone::new(dims, Vocabulary::build(&words, 2), 5).unwrap();
    bb.freeze();
    bb
}

fn enc(bb: &Backbone<f64>, x: &str, y: &str) -> Encoded {
    Encoded { domain_id: "d".into(), input_ids: bb.vocab().encode(x), output_ids: bb.vocab().encode(y) }
}

#[test]
fn init_is_seeded_and_copies_vocabulary_rows() {
    let bb = backbone();
    let a = TaskPrompt::init(TaskType::Ner, 20, &bb, 7).unwrap();
    let b = TaskPrompt::init(TaskType::Ner, 20, &bb, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.embeds().shape(), (20, 16));
    let table: Vec<&[f64]> = (0..bb.vocab().len() as u32).map(|i| bb.embed_row(i)).collect();
    for r in 0..20 {
        assert!(table.iter().any(|row| *row == a.embeds().row(r)), "row {r}");
    }
    assert_ne!(a, TaskPrompt::init(TaskType::Ner, 20, &bb, 8).unwrap());
    assert!(TaskPrompt::init(TaskType::Ner, 0, &bb, 7).is_err());
}

#[test]
fn fkt_copies_rows_and_isolates() {
    let bb = backbone();
    let mut prev = TaskPrompt::init(TaskType::Ner, 5, &bb, 1).unwrap();
    prev.add_generation_token("d", &bb, 2).unwrap();
    prev.freeze();
    let mut next = TaskPrompt::init_fkt(&prev, TaskType::Classification);
    assert_eq!(next.embeds(), prev.embeds());
    assert!(next.gen_tokens().is_empty());
    assert!(!next.is_frozen() && prev.is_frozen());
    let before = prev.digest();
    let g = PromptGrads { embeds: lplab_core::tensor::Matrix::from_vec(5, 16, vec![1.0; 80]), gen: vec![] };
    next.step(&g, &mut OptimizerState::new(OptimizerKind::default(), 0.5), 1.0).unwrap();
    assert_ne!(next.embeds(), prev.embeds());
    assert_eq!(prev.digest(), before);
}

#[test]
fn generation_tokens_register_once() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Ner, 3, &bb, 1).unwrap();
    p.add_generation_token("a", &bb, 10).unwrap();
    p.add_generation_token("b", &bb, 11).unwrap();
    assert_ne!(p.gen_embed("a").unwrap(), p.gen_embed("b").unwrap());
    assert!(matches!(p.add_generation_token("a", &bb, 12), Err(Error::DuplicateDomain(_))));
    assert!(matches!(p.gen_prefix("c"), Err(Error::UnknownDomain(_))));
    let prefix = p.gen_prefix("b").unwrap();
    assert_eq!(prefix.rows(), 4);
    assert_eq!(prefix.row(0), p.gen_embed("b").unwrap());
    assert_eq!(prefix.row(1), p.embeds().row(0));
}

#[test]
fn snapshot_is_immutable_under_training() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Ner, 4, &bb, 3).unwrap();
    let batch = vec![enc(&bb, "w1 w2", "w3"), enc(&bb, "w4 w5", "w6")];
    let snap = p.snapshot();
    assert!(kl_loss(&bb, &snap, &p, &batch).unwrap().abs() < 1e-12);
    let frozen_digest = snap.digest();
    let mut opt = OptimizerState::new(OptimizerKind::default(), 0.5);
    let checksum = bb.digest();
    for _ in 0..100 {
        let (_, g) = task_loss_grad(&bb, &p, &batch).unwrap();
        p.step(&g, &mut opt, 1.0).unwrap();
    }
    assert_eq!(snap.digest(), frozen_digest);
    assert_ne!(p.digest(), frozen_digest);
    assert_eq!(bb.digest(), checksum);
    assert_eq!(opt.tracked(), p.num_params());
    assert_eq!(p.version(), 100);
}

#[test]
fn zero_gradient_leaves_prompt_unchanged() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Ner, 4, &bb, 3).unwrap();
    p.add_generation_token("a", &bb, 4).unwrap();
    let before = p.flat();
    let g = PromptGrads::zeros_like(&p);
    p.step(&g, &mut OptimizerState::new(OptimizerKind::default(), 0.5), 1.0).unwrap();
    assert_eq!(p.flat(), before);
}

#[test]
fn frozen_prompt_rejects_mutation_but_serves_reads() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Ner, 4, &bb, 3).unwrap();
    p.freeze();
    p.freeze();
    let g = PromptGrads::zeros_like(&p);
    assert!(matches!(p.step(&g, &mut OptimizerState::new(OptimizerKind::default(), 0.5), 1.0), Err(Error::PromptFrozen(_))));
    assert!(p.add_generation_token("a", &bb, 1).is_err());
    assert!(p.set_flat(&p.flat()).is_err());
    assert!(task_loss(&bb, &p, &[enc(&bb, "w1", "w2")]).unwrap().is_finite());
}

#[test]
fn mismatched_gradient_is_rejected() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Ner, 4, &bb, 3).unwrap();
    let q = TaskPrompt::init(TaskType::Ner, 5, &bb, 3).unwrap();
    let g = PromptGrads::zeros_like(&q);
    assert!(matches!(p.step(&g, &mut OptimizerState::new(OptimizerKind::default(), 0.5), 1.0), Err(Error::Shape(_))));
}

#[test]
fn separable_task_loss_decreases() {
    let bb = backbone();
    let mut p = TaskPrompt::init(TaskType::Classification, 6, &bb, 9).unwrap();
    let batch = vec![enc(&bb, "w1 w2 w3", "w30"), enc(&bb, "w4 w5 w6", "w31"), enc(&bb, "w1 w3", "w30"), enc(&bb, "w5 w6", "w31")];
    let mut opt = OptimizerState::new(OptimizerKind::default(), 0.5);
    let start = task_loss(&bb, &p, &batch).unwrap();
    for _ in 0..50 {
        let (_, g) = task_loss_grad(&bb, &p, &batch).unwrap();
        p.step(&g, &mut opt, 1.0).unwrap();
    }
    let end = task_loss(&bb, &p, &batch).unwrap();
    assert!(end < 0.9 * start, "{start} -> {end}");
}

#[test]
fn bank_freezes_older_prompts_and_round_trips() {
    let bb = backbone();
    let mut bank = PromptBank::new();
    let mut ner = TaskPrompt::init(TaskType::Ner, 3, &bb, 1).unwrap();
    ner.add_generation_token("conll", &bb, 2).unwrap();
    bank.push(ner).unwrap();
    bank.push(TaskPrompt::init(TaskType::Classification, 3, &bb, 3).unwrap()).unwrap();
    assert!(bank.get(TaskType::Ner).unwrap().is_frozen());
    assert!(!bank.get(TaskType::Classification).unwrap().is_frozen());
    assert!(bank.push(TaskPrompt::init(TaskType::Ner, 3, &bb, 4).unwrap()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bank.json");
    bank.save(&path).unwrap();
    let back: PromptBank<f64> = PromptBank::load(&path).unwrap();
    assert_eq!(back, bank);

    let text = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let mut v2 = v.clone();
    let x = v2["prompts"][0]["embeds"]["data"][0].as_f64().unwrap();
    v2["prompts"][0]["embeds"]["data"][0] = serde_json::json!(x + 1.0);
    std::fs::write(&path, serde_json::to_vec(&v2).unwrap()).unwrap();
    assert!(matches!(PromptBank::<f64>::load(&path), Err(Error::Checksum { .. })));
}
