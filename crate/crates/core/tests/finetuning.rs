//! Finetuning contracts: freezing, learning-rate ladder, planted signals and
//! difficulty resampling.

use rand::seq::SliceRandom as _;
use rand::Rng as _;

use lifeseq::encoder::EncoderConfig;
use lifeseq::finetune::{
    finetune_mortality, finetune_optimizer, finetune_personality, mortality_scores, personality_predictions, update_difficulty,
    DifficultyState, FinetuneConfig, ResamplingConfig, Task,
};
use lifeseq::losses::LossConfig;
use lifeseq::metrics::{aul, cqk};
use lifeseq::model::{Model, ModelConfig};
use lifeseq::rng;
use lifeseq::synthgen::{assign_outcomes, generate_population, EventCount, GeneratorConfig};
use lifeseq::tokenizer::{corpus_tokens, encode_person, Document, EncodedSequence, EventSentence, TemporalStamp, Vocabulary};

const VOCAB: usize = 60;
const MARKER: u32 = 50;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { d: 16, n_layers: 2, n_heads: 2, n_local_heads: 1, local_window: 8, n_random_features: 8, pff_hidden: 32 },
        mlm_scale: 10.0,
    }
}

/// Cohort where carrying the marker token makes a positive label likely.
fn planted_cohort(n: usize, seed: u64) -> (Vec<EncodedSequence>, Vec<bool>) {
    let mut r = rng::rng(seed);
    let mut seqs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let carrier = r.gen_bool(0.3);
        let marker_at = r.gen_range(0..6);
        let events = (0..6)
            .map(|k| EventSentence {
                tokens: if carrier && k == marker_at { vec![MARKER, 9 + r.gen_range(0..40)] } else { vec![9 + r.gen_range(0..40), 9 + r.gen_range(0..40)] },
                stamp: TemporalStamp { abs_position: 30 * k as i32 + 1, age: 40, segment: ((k + 1) % 3) as u8 },
            })
            .collect();
        let doc = Document { person_id: i as u64, background: vec![5, 6, 7, 8], events };
        seqs.push(doc.layout(32).unwrap());
        labels.push(r.gen_bool(if carrier { 0.8 } else { 0.1 }));
    }
    (seqs, labels)
}

fn quick_config() -> FinetuneConfig {
    FinetuneConfig { max_epochs: 4, patience: 2, batch_size: 16, epoch_size: 320, ..Default::default() }
}

#[test]
fn mortality_finetuning_freezes_concepts_and_learns_the_marker() {
    let (train, train_y) = planted_cohort(500, 1);
    let (val, val_y) = planted_cohort(300, 2);
    let pretrained = Model::new(&small_config(), VOCAB, 3).unwrap();
    let mut model = pretrained.clone();
    let out = finetune_mortality(&mut model, (&train, &train_y), (&val, &val_y), &quick_config(), &LossConfig::default(), 4).unwrap();
    assert!(out.history.len() <= out.best_epoch + 2);

    let before = pretrained.store.get(pretrained.embedder.concept);
    let after = model.store.get(model.embedder.concept);
    for r in 0..VOCAB {
        if ![0, 1, 3].contains(&r) {
            assert_eq!(before.row(r), after.row(r), "row {r} moved");
        }
    }
    // parameters of the other heads are untouched
    for (id, name, value) in pretrained.store.iter() {
        if name.starts_with("head.sop") || name.starts_with("head.ordinal") || name.starts_with("head.mlm") {
            assert_eq!(value, model.store.get(id), "{name}");
        }
    }

    let scores = mortality_scores(&model, &val).unwrap();
    let observed = aul(&scores, &val_y).unwrap();
    let mut shuffled = val_y.clone();
    let mut r = rng::rng(5);
    let null: Vec<f64> = (0..200)
        .map(|_| {
            shuffled.shuffle(&mut r);
            aul(&scores, &shuffled).unwrap()
        })
        .collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    assert!(observed > mean + 3.0 * sd, "AUL {observed} null {mean} ± {sd}");
}

#[test]
fn mortality_needs_positives() {
    let (train, _) = planted_cohort(20, 6);
    let none = vec![false; 20];
    let mut model = Model::new(&small_config(), VOCAB, 3).unwrap();
    assert!(finetune_mortality(&mut model, (&train, &none), (&train, &none), &quick_config(), &LossConfig::default(), 4).is_err());
}

#[test]
fn layer_learning_rates_fall_by_five_percent_per_layer() {
    let model = Model::new(&small_config(), VOCAB, 7).unwrap();
    let opt = finetune_optimizer(&model, Task::Mortality, &FinetuneConfig::default());
    for (id, name, _) in model.store.iter() {
        let expect = if name.starts_with("head.pooled") {
            0.01
        } else if let Some(rest) = name.strip_prefix("encoder.") {
            let layer: i32 = rest.split('.').next().unwrap().parse().unwrap();
            0.01 * 0.95f64.powi(2 - layer)
        } else if name.starts_with("embedding.") {
            0.01 * 0.95f64.powi(3)
        } else {
            0.0
        };
        assert!((opt.applied_lr(id, 0.01) - expect).abs() < 1e-15, "{name}");
    }
}

#[test]
fn difficulty_starts_uniform_and_matches_hand_computation() {
    let cfg = ResamplingConfig::default();
    let mut state = DifficultyState::new(5, &cfg);
    assert!(state.weights().iter().all(|&w| w == 1.0));

    let raw = [[0.5, 2.0, 1.0, 0.2], [1.0, 0.1, 0.1, 0.1], [3.0, 0.0, 0.0, 0.0], [0.4, 0.3, 4.0, 0.0], [1e6, 0.0, 0.0, 0.0]];
    update_difficulty(&mut state, &[0, 1, 2, 3, 4], &raw);
    // item maxima 2, 1, 3, 4 and 1e6 capped at 100; sorted 1 2 3 4 100,
    // linear-interpolated quartiles 2 and 4, so the range is 2
    let expect = [0.5 * 2.0 / 2.0 + 0.5, 0.5 * 1.0 / 2.0 + 0.5, 0.5 * 3.0 / 2.0 + 0.5, 0.5 * 4.0 / 2.0 + 0.5, 0.5 * 100.0 / 2.0 + 0.5];
    for (got, want) in state.weights().iter().zip(expect) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let w = state.weights();
    let hardest = w.iter().cloned().fold(0.0, f64::max);
    assert_eq!(hardest, w[4]);

    // constant difficulties take the unit-denominator path and converge to the constant
    let mut state = DifficultyState::new(3, &cfg);
    for _ in 0..60 {
        update_difficulty(&mut state, &[0, 1, 2], &[[7.0; 4]; 3]);
    }
    assert!(state.weights().iter().all(|&d| (d - 7.0).abs() < 1e-12));
}

#[test]
fn planted_item_is_recovered() {
    let gen = GeneratorConfig {
        population_size: 1200,
        deterministic_item: true,
        events_per_person: EventCount { mean: 3.0, dispersion: 0.0 },
        seed: 8,
        ..Default::default()
    };
    let people = generate_population(&gen).unwrap();
    let outcomes = assign_outcomes(&people, &gen).unwrap();
    let vocab = Vocabulary::build(&people.iter().map(corpus_tokens).collect::<Vec<_>>(), 1).unwrap();
    let seqs: Vec<EncodedSequence> = people.iter().map(|p| encode_person(p, &vocab, 24, gen.start_date).unwrap()).collect();
    let targets: Vec<[u8; 4]> = outcomes.iter().map(|o| o.item_responses).collect();
    let (train, val) = (0..1000, 1000..1200);
    let mut model = Model::new(&small_config(), vocab.len(), 9).unwrap();
    let cfg = FinetuneConfig { max_epochs: 12, patience: 3, batch_size: 16, decoder_lr: 0.02, ..Default::default() };
    let out = finetune_personality(
        &mut model,
        (&seqs[train.clone()], &targets[train]),
        (&seqs[val.clone()], &targets[val.clone()]),
        &cfg,
        &LossConfig::default(),
        10,
    )
    .unwrap();
    assert!(out.history.len() <= out.best_epoch + cfg.patience);
    let predicted = personality_predictions(&model, &seqs[val.clone()]).unwrap();
    let truth: Vec<u8> = targets[val].iter().map(|t| t[0]).collect();
    let item0: Vec<u8> = predicted.iter().map(|p| p[0]).collect();
    let k = cqk(&truth, &item0, 5);
    assert!(k > 0.8, "item CQK {k}");
}
