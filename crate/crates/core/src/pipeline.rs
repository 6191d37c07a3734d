//! End-to-end stages over a run directory. Every stage reads its inputs from
//! the data directory, writes its artifacts atomically into the output
//! directory and records a manifest there.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::{final_year_start, life_table_features, recent_counts, train_ffnn, train_life_table, train_logreg};
use crate::error::{Error, Result};
use crate::finetune::{
    finetune_mortality, finetune_personality, mortality_scores, personality_predictions, select_asymmetric_c, write_finetune_csv, Task,
};
use crate::interpret::{attention_scores, saliency, tcav, TcavResult};
use crate::metrics::{binary_report, hidden_positive_fraction, ordinal_report, EvalReport, PredictionSet};
use crate::model::Model;
use crate::persistence::{atomic_write, load_checkpoint, save_checkpoint, Manifest, RunConfig};
use crate::pretrain::{pretrain, write_history_csv};
use crate::rng;
use crate::space::{compare_spaces, SpaceReport};
use crate::synthgen::{
    assign_outcomes, attribute_token, generate_population, read_jsonl, split_dataset, write_jsonl, Attribute, OutcomeRecord,
    PersonRecord, Sex, Split,
};
use crate::tokenizer::{corpus_tokens, encode_person, is_special, read_dataset, write_dataset, EncodedSequence, Vocabulary};

pub const PERSONS_FILE: &str = "persons.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SEQUENCES_FILE: &str = "sequences.bin";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const EVAL_FILE: &str = "eval_report.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

pub fn finetuned_file(task: Task) -> String {
    format!("finetuned_{}.ckpt", task_name(task))
}

pub fn task_name(task: Task) -> &'static str {
    match task {
        Task::Mortality => "mortality",
        Task::Personality => "personality",
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    atomic_write(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish(command: &str, cfg: &RunConfig, out: &Path, artifacts: &[&str]) -> Result<Manifest> {
    let mut manifest = Manifest::new(command, cfg);
    manifest.record(out, artifacts)?;
    manifest.write(&out.join(format!("manifest_{command}.json")))?;
    Ok(manifest)
}

/// Generates the cohort, splits it, builds the vocabulary on the training
/// part and encodes every person.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(out)?;
    let mut generator = cfg.generator.clone();
    generator.seed = rng::derive(cfg.seed, "generator");
    let persons = generate_population(&generator)?;
    let outcomes = assign_outcomes(&persons, &generator)?;
    let ids: Vec<u64> = persons.iter().map(|p| p.person_id).collect();
    let s = &cfg.split;
    let split = split_dataset(&ids, (s.train, s.validation, s.test), rng::derive(cfg.seed, "split"))?;
    if split.train.is_empty() || split.validation.is_empty() || split.test.is_empty() {
        return Err(Error::config("generator.population_size", "too small for a non-empty train/validation/test split"));
    }
    let corpus: Vec<Vec<String>> = split.train.iter().map(|&id| corpus_tokens(&persons[id as usize])).collect();
    let vocab = Vocabulary::build(&corpus, cfg.tokenizer.min_frequency)?;
    let seqs = persons
        .iter()
        .map(|p| encode_person(p, &vocab, cfg.tokenizer.max_len, generator.start_date))
        .collect::<Result<Vec<_>>>()?;

    write_jsonl(&out.join(PERSONS_FILE), &persons)?;
    write_jsonl(&out.join(OUTCOMES_FILE), &outcomes)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    write_dataset(&out.join(SEQUENCES_FILE), &vocab, cfg.tokenizer.max_len, &seqs)?;
    finish("gen-data", cfg, out, &[PERSONS_FILE, OUTCOMES_FILE, SPLIT_FILE, VOCAB_FILE, SEQUENCES_FILE])
}

/// Everything written by [`gen_data`], indexed by person id.
pub struct Dataset {
    pub persons: Vec<PersonRecord>,
    pub outcomes: Vec<OutcomeRecord>,
    pub split: Split,
    pub vocab: Vocabulary,
    pub sequences: Vec<EncodedSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let persons: Vec<PersonRecord> = read_jsonl(&dir.join(PERSONS_FILE))?;
        let outcomes: Vec<OutcomeRecord> = read_jsonl(&dir.join(OUTCOMES_FILE))?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let (header, sequences) = read_dataset(&dir.join(SEQUENCES_FILE))?;
        let found = vocab.hash();
        if header.vocab_hash != found {
            return Err(Error::HashMismatch { kind: "vocabulary", expected: header.vocab_hash, found });
        }
        let consistent = persons.len() == outcomes.len()
            && persons.len() == sequences.len()
            && persons.iter().enumerate().all(|(i, p)| p.person_id == i as u64)
            && outcomes.iter().zip(&sequences).enumerate().all(|(i, (o, s))| o.person_id == i as u64 && s.person_id == i as u64);
        if !consistent {
            return Err(Error::corrupt(dir, "persons, outcomes and sequences disagree on person ids"));
        }
        if split.train.iter().chain(&split.validation).chain(&split.test).any(|&id| id as usize >= persons.len()) {
            return Err(Error::corrupt(dir.join(SPLIT_FILE), "split refers to unknown person ids"));
        }
        Ok(Self { persons, outcomes, split, vocab, sequences })
    }

    pub fn ids(&self, part: Part) -> &[u64] {
        match part {
            Part::Train => &self.split.train,
            Part::Validation => &self.split.validation,
            Part::Test => &self.split.test,
        }
    }

    pub fn sequences(&self, part: Part) -> Vec<EncodedSequence> {
        self.ids(part).iter().map(|&id| self.sequences[id as usize].clone()).collect()
    }

    pub fn persons(&self, part: Part) -> Vec<PersonRecord> {
        self.ids(part).iter().map(|&id| self.persons[id as usize].clone()).collect()
    }

    pub fn positive(&self, part: Part) -> Vec<bool> {
        self.ids(part).iter().map(|&id| self.outcomes[id as usize].is_positive()).collect()
    }

    pub fn responses(&self, part: Part) -> Vec<[u8; 4]> {
        self.ids(part).iter().map(|&id| self.outcomes[id as usize].item_responses).collect()
    }
}

/// Pretrains a fresh model on the training part.
pub fn run_pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    create_dir(out)?;
    let mut model = Model::new(&cfg.model, ds.vocab.len(), rng::derive(cfg.seed, "model-init"))?;
    let outcome = pretrain(
        &mut model,
        &ds.sequences(Part::Train),
        &ds.sequences(Part::Validation),
        &cfg.pretrain,
        &cfg.loss,
        rng::derive(cfg.seed, "pretrain"),
    )?;
    save_checkpoint(&out.join(PRETRAINED_FILE), &model, &ds.vocab, outcome.steps as u64)?;
    write_history_csv(&out.join("pretrain_history.csv"), &outcome.history)?;
    finish("pretrain", cfg, out, &[PRETRAINED_FILE, "pretrain_history.csv"])
}

/// Finetunes a checkpoint for `task` with early stopping on validation.
pub fn run_finetune(cfg: &RunConfig, task: Task, data: &Path, checkpoint: &Path, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let (mut model, header) = load_checkpoint(checkpoint, &ds.vocab)?;
    create_dir(out)?;
    let (train, val) = (ds.sequences(Part::Train), ds.sequences(Part::Validation));
    let seed = rng::derive(cfg.seed, &format!("finetune-{}", task_name(task)));
    let mut artifacts = Vec::new();
    let outcome = match task {
        Task::Mortality if cfg.finetune.asymmetry_grid.is_empty() => finetune_mortality(
            &mut model,
            (&train, &ds.positive(Part::Train)),
            (&val, &ds.positive(Part::Validation)),
            &cfg.finetune,
            &cfg.loss,
            seed,
        )?,
        Task::Mortality => {
            let (c, best, outcome) = select_asymmetric_c(
                &model,
                (&train, &ds.positive(Part::Train)),
                (&val, &ds.positive(Part::Validation)),
                &cfg.finetune,
                &cfg.loss,
                &cfg.finetune.asymmetry_grid,
                seed,
            )?;
            model = best;
            let name = "finetune_mortality_asymmetry.json";
            let text = serde_json::to_string_pretty(&serde_json::json!({ "asymmetric_c": c })).expect("json value serialises");
            atomic_write(&out.join(name), text.as_bytes())?;
            artifacts.push(name);
            outcome
        }
        Task::Personality => finetune_personality(
            &mut model,
            (&train, &ds.responses(Part::Train)),
            (&val, &ds.responses(Part::Validation)),
            &cfg.finetune,
            &cfg.loss,
            seed,
        )?,
    };
    let ckpt = finetuned_file(task);
    let history = format!("finetune_{}_history.csv", task_name(task));
    save_checkpoint(&out.join(&ckpt), &model, &ds.vocab, header.step + outcome.steps as u64)?;
    write_finetune_csv(&out.join(&history), &outcome.history)?;
    artifacts.extend([ckpt.as_str(), history.as_str()]);
    finish("finetune", cfg, out, &artifacts)
}

fn age_band(age: i32) -> &'static str {
    match age {
        ..=39 => "<40",
        40..=59 => "40-59",
        _ => "60+",
    }
}

/// Subgroup keys (sex and age band at the end of the study window).
pub fn subgroup_keys(persons: &[PersonRecord], at: chrono::NaiveDate) -> BTreeMap<String, Vec<String>> {
    let sex = persons
        .iter()
        .map(|p| match p.sex {
            Sex::Male => "male".to_string(),
            Sex::Female => "female".to_string(),
        })
        .collect();
    let age = persons.iter().map(|p| age_band(p.age_at(at)).to_string()).collect();
    BTreeMap::from([("sex".to_string(), sex), ("age".to_string(), age)])
}

/// Scores the test part with a finetuned checkpoint and, for mortality,
/// with the three baselines trained on the same split.
pub fn run_evaluate(cfg: &RunConfig, task: Task, data: &Path, checkpoint: &Path, out: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let (model, _) = load_checkpoint(checkpoint, &ds.vocab)?;
    create_dir(out)?;
    let test = ds.sequences(Part::Test);
    let seed = rng::derive(cfg.seed, "evaluate");
    let reports = match task {
        Task::Mortality => {
            let mut settings = cfg.metrics.clone();
            if cfg.evaluation.estimate_alpha {
                let train = ds.positive(Part::Train);
                let share = train.iter().filter(|&&p| p).count() as f64 / train.len() as f64;
                settings.alpha = hidden_positive_fraction(share, cfg.generator.censoring_rate);
            }
            let keys = subgroup_keys(&ds.persons(Part::Test), cfg.generator.end_date);
            let positive = ds.positive(Part::Test);
            let set = |scores: Vec<f64>| PredictionSet { scores, positive: positive.clone(), keys: keys.clone() };
            let mut reports = vec![binary_report("transformer", &set(mortality_scores(&model, &test)?), &settings, seed)?];
            if cfg.evaluation.baselines {
                for (name, scores) in baseline_scores(cfg, &ds)? {
                    reports.push(binary_report(name, &set(scores), &settings, seed)?);
                }
            }
            reports
        }
        Task::Personality => {
            let predicted = personality_predictions(&model, &test)?;
            vec![ordinal_report("transformer", &ds.responses(Part::Test), &predicted, &cfg.metrics, seed)?]
        }
    };
    write_json(&out.join(EVAL_FILE), &reports)?;
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let text = r.to_csv();
        csv.push_str(if i == 0 { &text } else { text.split_once('\n').map_or("", |(_, rows)| rows) });
    }
    atomic_write(&out.join("eval_report.csv"), csv.as_bytes())?;
    finish("evaluate", cfg, out, &[EVAL_FILE, "eval_report.csv"])?;
    Ok(reports)
}

/// Test-part mortality scores of the life-table, logistic-regression and
/// feed-forward baselines.
pub fn baseline_scores(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<(&'static str, Vec<f64>)>> {
    let c = cfg.loss.asymmetric_c;
    let bc = &cfg.baselines;
    let seed = rng::derive(cfg.seed, "baselines");
    let (ptr, pva) = (ds.positive(Part::Train), ds.positive(Part::Validation));
    let end = cfg.generator.end_date;
    let lt = |part| life_table_features(&ds.persons(part), end);
    let (m, _) = train_life_table((&lt(Part::Train), &ptr), (&lt(Part::Validation), &pva), bc, c, seed)?;
    let life = m.predict(&lt(Part::Test));
    let since = final_year_start(cfg.generator.start_date, end);
    let counts = |part| recent_counts(&ds.sequences(part), ds.vocab.len(), since);
    let (xtr, xva, xte) = (counts(Part::Train), counts(Part::Validation), counts(Part::Test));
    let (m, _) = train_logreg((&xtr, &ptr), (&xva, &pva), bc, c, seed)?;
    let logreg = m.predict(&xte);
    let (m, _) = train_ffnn((&xtr, &ptr), (&xva, &pva), bc, c, seed)?;
    let ffnn = m.predict(&xte);
    Ok(vec![("life_table", life), ("logreg", logreg), ("ffnn", ffnn)])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTest {
    pub concept: String,
    pub result: TcavResult,
}

/// Token scores for the first test persons plus concept tests for the
/// marker diagnosis and for the sex token.
pub fn run_interpret(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<Vec<ConceptTest>> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    let (model, _) = load_checkpoint(checkpoint, &ds.vocab)?;
    create_dir(out)?;
    let test = ds.sequences(Part::Test);
    let seed = rng::derive(cfg.seed, "interpret");
    let s = &cfg.interpret;
    let mut csv = String::from("person_id,position,token,saliency,attention\n");
    for (k, seq) in test.iter().take(s.n_persons).enumerate() {
        let sal = saliency(&model, seq, s.saliency_samples, s.saliency_sigma, rng::derive_indexed(seed, "saliency", k as u64))?;
        let att = attention_scores(&model, seq)?;
        for i in (0..seq.len()).filter(|&i| !seq.padding_mask[i]) {
            let token = ds.vocab.token(seq.token_ids[i]);
            csv.push_str(&format!("{},{i},{token},{},{}\n", seq.person_id, sal[i], att[i]));
        }
    }
    atomic_write(&out.join("token_scores.csv"), csv.as_bytes())?;

    let marker = attribute_token(Attribute::Diagnosis, cfg.generator.marker_category());
    let concepts = [marker, "SEX_MALE".to_string()];
    let pool = ds.sequences(Part::Train);
    let mut results = Vec::new();
    for name in concepts {
        let Some(id) = ds.vocab.get(&name) else { continue };
        let has = |s: &EncodedSequence| s.token_ids.contains(&id);
        if !pool.iter().any(has) || pool.iter().all(has) {
            continue;
        }
        let result = tcav(&model, has, &pool, &test, &cfg.tcav, rng::derive(seed, &name))?;
        results.push(ConceptTest { concept: name, result });
    }
    write_json(&out.join("tcav.json"), &results)?;
    finish("interpret", cfg, out, &["token_scores.csv", "tcav.json"])?;
    Ok(results)
}

/// Concept embedding rows of the non-special tokens.
pub fn concept_embeddings(model: &Model) -> Array2<f64> {
    let e = model.store.get(model.store.id("embedding.concept").expect("model has a concept table"));
    let rows: Vec<usize> = (0..e.nrows()).filter(|&i| !is_special(i as u32)).collect();
    e.select(Axis(0), &rows)
}

/// Compares the concept spaces of several checkpoints sharing a vocabulary.
pub fn run_analyze_space(cfg: &RunConfig, data: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<SpaceReport> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::invalid("analyze-space needs at least one checkpoint"));
    }
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    create_dir(out)?;
    let mut named = Vec::new();
    for (k, path) in checkpoints.iter().enumerate() {
        let (model, _) = load_checkpoint(path, &vocab)?;
        let stem = path.file_stem().map_or_else(|| format!("model{k}"), |s| s.to_string_lossy().into_owned());
        named.push((format!("{k}:{stem}"), concept_embeddings(&model)));
    }
    let report = compare_spaces(&named, &cfg.space, rng::derive(cfg.seed, "space"))?;
    write_json(&out.join("space_report.json"), &report)?;
    finish("analyze-space", cfg, out, &["space_report.json"])?;
    Ok(report)
}

/// Writes the concept embedding table: one row per vocabulary entry with the
/// token followed by its `d` coordinates.
pub fn export_embeddings(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<Manifest> {
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let (model, _) = load_checkpoint(checkpoint, &vocab)?;
    create_dir(out)?;
    let e = model.store.get(model.store.id("embedding.concept").expect("model has a concept table"));
    let mut csv = String::from("token");
    for j in 0..e.ncols() {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for (token, row) in vocab.tokens().iter().zip(e.rows()) {
        csv.push_str(token);
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    atomic_write(&out.join(EMBEDDINGS_FILE), csv.as_bytes())?;
    finish("export-embeddings", cfg, out, &[EMBEDDINGS_FILE])
}
