use lplab_core::backbone::*;
use lplab_core::vocab::{TokenId, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn copy_corpus(vocab: &Vocabulary, n: usize, seed: u64) -> Vec<PretrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<&str> = (0..16).map(|i| vocab.token(vocab.id(&format!("w{i}")).unwrap())).collect();
    let slot = Slot::token(vocab.id("w0").unwrap());
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..=5);
            let text: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
            let ids = vocab.encode(&text.join(" "));
            PretrainExample { prefix: vec![slot.clone()], input_ids: ids.clone(), output_ids: ids }
        })
        .collect()
}

fn small() -> Backbone<f64> {
    let words: Vec<String> = (0..60).map(|i| format!("w{i}")).collect();
    let dims = BackboneDims { d_model: 32, n_heads: 4, d_ff: 64, n_enc_layers: 1, n_dec_layers: 1 };
    Backbone::new(dims, Vocabulary::build(&words, 1), 11).unwrap()
}

#[test]
fn copy_task_is_learned_and_frozen() {
    let bb = small();
    let train = copy_corpus(bb.vocab(), 3000, 1);
    let held = copy_corpus(bb.vocab(), 200, 2);
    let cfg = PretrainConfig { epochs: 6, lr: 3e-3, batch_size: 16, warmup_steps: 100, ..PretrainConfig::default() };
    let (bb, log) = bb.pretrain(&train, &cfg, |_, _| {}).unwrap();
    assert!(log.epoch_loss.windows(2).all(|w| w[1] < w[0]), "{:?}", log.epoch_loss);
    assert!(bb.is_frozen());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let exact = held
        .iter()
        .filter(|e| {
            let out = bb.decode(&bb.prefix_rows(&e.prefix), &e.input_ids, 8, Strategy::Greedy, &mut rng).unwrap();
            out == e.output_ids
        })
        .count();
    assert!(exact as f64 >= 0.9 * held.len() as f64, "{exact}/{} copied exactly", held.len());
    assert!(bb.clone().pretrain(&train, &cfg, |_, _| {}).is_err());
}

#[test]
fn checksum_survives_a_file_round_trip() {
    let mut bb = small();
    bb.freeze();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    bb.save(&path).unwrap();
    let back: Backbone<f64> = Backbone::load(&path).unwrap();
    assert_eq!(back.digest(), bb.digest());
    assert_eq!(back.recorded_checksum(), Some(bb.digest().as_str()));
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered = text.replacen("0.", "1.", 1);
    std::fs::write(&path, tampered).unwrap();
    assert!(matches!(Backbone::<f64>::load(&path), Err(lplab_core::Error::Checksum { .. })));
}

#[test]
fn cold_sampling_matches_greedy_and_length_caps_hold() {
    let mut bb = small();
    bb.freeze();
    let prefix = bb.embed_rows(&[5, 9, 12]);
    let input: Vec<TokenId> = bb.vocab().encode("w3 w4 w5");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let greedy = bb.decode(&prefix, &input, 10, Strategy::Greedy, &mut rng).unwrap();
    let cold = bb.decode(&prefix, &input, 10, Strategy::Sample { temperature: 1e-4, top_k: 0 }, &mut rng).unwrap();
    assert_eq!(greedy, cold);
    assert_eq!(bb.decode(&prefix, &input, 1, Strategy::Greedy, &mut rng).unwrap().len(), 1);
    let a = bb.decode(&prefix, &input, 10, Strategy::Sample { temperature: 1.0, top_k: 5 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = bb.decode(&prefix, &input, 10, Strategy::Sample { temperature: 1.0, top_k: 5 }, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
}
