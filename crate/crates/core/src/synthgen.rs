//! Synthetic registry with planted structure.
//!
//! Each person gets a labour stream whose income level performs a slow
//! random walk (adjacent levels co-occur inside a timeline), a health stream
//! clustered around a dominant diagnosis chapter, and outcomes drawn from a
//! logistic hazard and an ordered-logit response model. Every person is
//! generated from its own derived seed, so the output is a pure function of
//! the configuration.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SCHEMA_VERSION: u32 = 1;

/// Hazard feature names accepted in [`GeneratorConfig::hazard_coefficients`].
/// `sex_x_income` is the income score with its sign flipped for women, an
/// interaction no additive model over the two tokens can represent.
pub const HAZARD_FEATURES: [&str; 7] = ["intercept", "age", "income", "chapter_f", "sex", "marker", "sex_x_income"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventCount {
    pub mean: f64,
    /// Gamma-Poisson overdispersion; 0 gives a plain Poisson count.
    pub dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub population_size: usize,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub n_income_levels: usize,
    pub n_diagnosis_categories: usize,
    pub n_diagnosis_chapters: usize,
    pub n_job_types: usize,
    pub n_job_groups: usize,
    pub n_municipalities: usize,
    pub events_per_person: EventCount,
    /// Log-odds weights over [`HAZARD_FEATURES`]; missing keys are zero.
    pub hazard_coefficients: BTreeMap<String, f64>,
    pub censoring_rate: f64,
    /// Makes item 0 of the response model a deterministic function of the
    /// birth-month token.
    pub deterministic_item: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let hazard = [("intercept", -1.5), ("age", 1.0), ("income", -0.6), ("chapter_f", 1.5), ("sex", 0.4)];
        Self {
            population_size: 2000,
            start_date: NaiveDate::from_ymd_opt(2008, 1, 1).unwrap(),
            end_date: NaiveDate::from_ymd_opt(2015, 12, 31).unwrap(),
            n_income_levels: 100,
            n_diagnosis_categories: 64,
            n_diagnosis_chapters: 8,
            n_job_types: 40,
            n_job_groups: 4,
            n_municipalities: 12,
            events_per_person: EventCount { mean: 60.0, dispersion: 0.2 },
            hazard_coefficients: hazard.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            censoring_rate: 0.1,
            deterministic_item: false,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("population_size", self.population_size),
            ("n_income_levels", self.n_income_levels),
            ("n_diagnosis_categories", self.n_diagnosis_categories),
            ("n_diagnosis_chapters", self.n_diagnosis_chapters),
            ("n_job_types", self.n_job_types),
            ("n_job_groups", self.n_job_groups),
            ("n_municipalities", self.n_municipalities),
        ];
        for (name, v) in counts {
            if v < 2 {
                return Err(Error::config(name, format!("must be at least 2, got {v}")));
            }
        }
        if self.n_diagnosis_chapters > 26 {
            return Err(Error::config("n_diagnosis_chapters", "must be at most 26"));
        }
        if self.n_diagnosis_categories < self.n_diagnosis_chapters {
            return Err(Error::config("n_diagnosis_categories", "must be at least n_diagnosis_chapters"));
        }
        if self.categories_per_chapter() > 100 {
            return Err(Error::config("n_diagnosis_categories", "allows at most 100 categories per chapter"));
        }
        if self.n_job_types < self.n_job_groups {
            return Err(Error::config("n_job_types", "must be at least n_job_groups"));
        }
        if !(0.0..=0.5).contains(&self.censoring_rate) {
            return Err(Error::config("censoring_rate", format!("must lie in [0, 0.5], got {}", self.censoring_rate)));
        }
        if self.end_date <= self.start_date {
            return Err(Error::config("end_date", "must be after start_date"));
        }
        let ec = self.events_per_person;
        if !(ec.mean >= 0.0 && ec.mean.is_finite()) {
            return Err(Error::config("events_per_person.mean", "must be finite and non-negative"));
        }
        if !(ec.dispersion >= 0.0 && ec.dispersion.is_finite()) {
            return Err(Error::config("events_per_person.dispersion", "must be finite and non-negative"));
        }
        for (k, v) in &self.hazard_coefficients {
            if !HAZARD_FEATURES.contains(&k.as_str()) {
                return Err(Error::config(format!("hazard_coefficients.{k}"), "is not a known hazard feature"));
            }
            if !v.is_finite() {
                return Err(Error::config(format!("hazard_coefficients.{k}"), "must be finite"));
            }
        }
        Ok(())
    }

    pub fn categories_per_chapter(&self) -> usize {
        self.n_diagnosis_categories / self.n_diagnosis_chapters
    }

    /// Chapter index treated as "chapter F" by the hazard.
    pub fn chapter_f(&self) -> usize {
        5.min(self.n_diagnosis_chapters - 1)
    }

    /// Diagnosis category used as the planted marker (first of chapter F).
    pub fn marker_category(&self) -> u32 {
        diagnosis_id(self.chapter_f(), 0)
    }

    pub fn coefficient(&self, name: &str) -> f64 {
        self.hazard_coefficients.get(name).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Domestic,
    Foreign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Labor,
    Health,
}

/// Event attributes in their canonical rendering order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Income,
    JobType,
    LaborStatus,
    Industry,
    Municipality,
    Sector,
    WorkHours,
    Diagnosis,
    PatientType,
    Urgency,
}

impl Attribute {
    pub fn prefix(self) -> &'static str {
        match self {
            Attribute::Income => "INC",
            Attribute::JobType => "JOB",
            Attribute::LaborStatus => "LFS",
            Attribute::Industry => "IND",
            Attribute::Municipality => "MUN",
            Attribute::Sector => "SEC",
            Attribute::WorkHours => "HRS",
            Attribute::Diagnosis => "DIAG",
            Attribute::PatientType => "PAT",
            Attribute::Urgency => "URG",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub date: NaiveDate,
    pub kind: EventKind,
    pub attributes: BTreeMap<Attribute, u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: u64,
    pub sex: Sex,
    pub birth_year: i32,
    pub birth_month: u32,
    pub origin: Origin,
    pub events: Vec<EventRecord>,
}

impl PersonRecord {
    pub fn birth_date(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.birth_year, self.birth_month, 1).expect("valid birth month")
    }

    /// Completed years of age at `date`.
    pub fn age_at(&self, date: NaiveDate) -> i32 {
        let b = self.birth_date();
        let mut age = date.year() - b.year();
        if (date.month(), date.day()) < (b.month(), b.day()) {
            age -= 1;
        }
        age
    }

    pub fn has_diagnosis(&self, category: u32) -> bool {
        self.events.iter().any(|e| e.attributes.get(&Attribute::Diagnosis) == Some(&category))
    }

    pub fn health_event_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Health).count()
    }

    pub fn income_levels(&self) -> impl Iterator<Item = u32> + '_ {
        self.events.iter().filter_map(|e| e.attributes.get(&Attribute::Income).copied())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MortalityLabel {
    Positive,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueOutcome {
    Died,
    Survived,
    Censored,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub person_id: u64,
    pub mortality_label: MortalityLabel,
    /// Generator-internal ground truth; never shown to models.
    pub true_outcome: TrueOutcome,
    /// Whether the latent death event occurred (also for censored persons).
    pub latent_died: bool,
    pub item_responses: [u8; 4],
}

impl OutcomeRecord {
    pub fn is_positive(&self) -> bool {
        self.mortality_label == MortalityLabel::Positive
    }
}

/// Number of ordinal response levels.
pub const N_LEVELS: usize = 5;
/// Number of response items.
pub const N_ITEMS: usize = 4;

/// Diagnosis category ids encode the chapter as `chapter * 100 + index`.
pub fn diagnosis_id(chapter: usize, index: usize) -> u32 {
    (chapter * 100 + index) as u32
}

pub fn diagnosis_chapter(id: u32) -> usize {
    (id / 100) as usize
}

/// Concept token for one attribute value.
pub fn attribute_token(attr: Attribute, value: u32) -> String {
    match attr {
        Attribute::Diagnosis => {
            let letter = (b'A' + diagnosis_chapter(value) as u8) as char;
            format!("DIAG_{}{}", letter, value % 100)
        }
        other => format!("{}_{}", other.prefix(), value),
    }
}

fn sample_event_count(rng: &mut Rng, ec: EventCount) -> usize {
    if ec.mean <= 0.0 {
        return 0;
    }
    let lambda = if ec.dispersion > 0.0 {
        let shape = 1.0 / ec.dispersion;
        Gamma::new(shape, ec.mean / shape).expect("valid gamma").sample(rng)
    } else {
        ec.mean
    };
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("valid poisson").sample(rng) as usize
}

fn generate_person(config: &GeneratorConfig, person_id: u64) -> PersonRecord {
    let mut rng = rng::child_indexed(config.seed, "person", person_id);
    let sex = if rng.gen_bool(0.5) { Sex::Female } else { Sex::Male };
    let origin = if rng.gen_bool(0.85) { Origin::Domestic } else { Origin::Foreign };
    let start_year = config.start_date.year();
    let birth_year = rng.gen_range(start_year - 75..=start_year - 20);
    let birth_month = rng.gen_range(1..=12);

    let n_inc = config.n_income_levels as i64;
    let mut income = rng.gen_range(0..n_inc);
    let groups = config.n_job_groups;
    let jobs_per_group = config.n_job_types / groups;
    let income_group = ((income as usize * groups) / config.n_income_levels).min(groups - 1);
    let group = if rng.gen_bool(0.7) { income_group } else { rng.gen_range(0..groups) };
    let primary_job = (group * jobs_per_group + rng.gen_range(0..jobs_per_group)) as u32;
    let mut municipality = rng.gen_range(0..config.n_municipalities) as u32;
    let sector = u32::from(rng.gen_bool(0.3));
    let hours = rng.gen_range(0..4u32);
    let chapters = config.n_diagnosis_chapters;
    let per_chapter = config.categories_per_chapter();
    let dominant_chapter = rng.gen_range(0..chapters);

    let n_events = sample_event_count(&mut rng, config.events_per_person);
    let span = (config.end_date - config.start_date).num_days();
    let mut days: Vec<i64> = (0..n_events).map(|_| rng.gen_range(0..=span)).collect();
    days.sort_unstable();

    let optional_labor = [Attribute::Industry, Attribute::Municipality, Attribute::Sector, Attribute::WorkHours];
    let mut events = Vec::with_capacity(n_events);
    let mut last_diagnosis = None;
    for day in days {
        let date = config.start_date + Duration::days(day);
        let mut attributes = BTreeMap::new();
        let kind = if rng.gen_bool(0.6) { EventKind::Labor } else { EventKind::Health };
        match kind {
            EventKind::Labor => {
                if rng.gen_bool(0.5) {
                    let step = if rng.gen_bool(0.5) { 1 } else { -1 };
                    income = (income + step).clamp(0, n_inc - 1);
                }
                if rng.gen_bool(0.02) {
                    municipality = rng.gen_range(0..config.n_municipalities) as u32;
                }
                let job = if rng.gen_bool(0.8) {
                    primary_job
                } else {
                    (group * jobs_per_group + rng.gen_range(0..jobs_per_group)) as u32
                };
                let status = if rng.gen_bool(0.85) { 0 } else { rng.gen_range(1..3u32) };
                attributes.insert(Attribute::Income, income as u32);
                attributes.insert(Attribute::JobType, job);
                attributes.insert(Attribute::LaborStatus, status);
                let k = rng.gen_range(0..=optional_labor.len());
                let mut chosen: Vec<Attribute> = optional_labor.choose_multiple(&mut rng, k).copied().collect();
                chosen.sort();
                for attr in chosen {
                    let value = match attr {
                        Attribute::Industry => (group * 2) as u32 + u32::from(rng.gen_bool(0.3)),
                        Attribute::Municipality => municipality,
                        Attribute::Sector => sector,
                        _ => hours,
                    };
                    attributes.insert(attr, value);
                }
            }
            EventKind::Health => {
                let category = match last_diagnosis {
                    Some(c) if rng.gen_bool(0.5) => c,
                    _ => {
                        let chapter = if rng.gen_bool(0.7) { dominant_chapter } else { rng.gen_range(0..chapters) };
                        diagnosis_id(chapter, rng.gen_range(0..per_chapter))
                    }
                };
                last_diagnosis = Some(category);
                let patient = if rng.gen_bool(0.8) { (diagnosis_chapter(category) % 3) as u32 } else { rng.gen_range(0..3u32) };
                attributes.insert(Attribute::Diagnosis, category);
                attributes.insert(Attribute::PatientType, patient);
                if rng.gen_bool(0.5) {
                    let urgent = if rng.gen_bool(0.9) { u32::from(patient == 0) } else { rng.gen_range(0..2u32) };
                    attributes.insert(Attribute::Urgency, urgent);
                }
            }
        }
        events.push(EventRecord { date, kind, attributes });
    }

    PersonRecord { person_id, sex, birth_year, birth_month, origin, events }
}

/// Generates `population_size` persons ordered by id.
pub fn generate_population(config: &GeneratorConfig) -> Result<Vec<PersonRecord>> {
    config.validate()?;
    Ok((0..config.population_size as u64).map(|id| generate_person(config, id)).collect())
}

/// Latent hazard features of a person, keyed like [`HAZARD_FEATURES`].
pub fn hazard_features(person: &PersonRecord, config: &GeneratorConfig) -> [f64; 7] {
    let age = person.age_at(config.end_date) as f64;
    let levels: Vec<u32> = person.income_levels().collect();
    let income = if levels.is_empty() {
        0.0
    } else {
        let mean = levels.iter().map(|&l| l as f64).sum::<f64>() / levels.len() as f64;
        2.0 * mean / (config.n_income_levels - 1) as f64 - 1.0
    };
    let f = config.chapter_f();
    let chapter_f = person
        .events
        .iter()
        .filter_map(|e| e.attributes.get(&Attribute::Diagnosis))
        .any(|&c| diagnosis_chapter(c) == f);
    let sex = f64::from(u8::from(person.sex == Sex::Male));
    let marker = f64::from(u8::from(person.has_diagnosis(config.marker_category())));
    let interaction = if person.sex == Sex::Male { income } else { -income };
    [1.0, (age - 50.0) / 15.0, income, f64::from(u8::from(chapter_f)), sex, marker, interaction]
}

/// Log-odds of death for a person.
pub fn hazard_logit(person: &PersonRecord, config: &GeneratorConfig) -> f64 {
    hazard_features(person, config)
        .iter()
        .zip(HAZARD_FEATURES)
        .map(|(x, name)| x * config.coefficient(name))
        .sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const ITEM_THRESHOLDS: [f64; 4] = [-2.0, -0.7, 0.7, 2.0];
const ITEM_LOADINGS: [[f64; 4]; 4] = [
    // income, sex, chapter_f, age
    [1.5, 0.8, -1.0, 0.3],
    [1.2, -0.6, -0.8, 0.5],
    [-0.9, 0.7, 1.1, -0.4],
    [0.6, 1.0, -0.5, -0.9],
];

fn item_responses(person: &PersonRecord, config: &GeneratorConfig, rng: &mut Rng) -> [u8; 4] {
    let f = hazard_features(person, config);
    let traits = [f[2], f[4] * 2.0 - 1.0, f[3] * 2.0 - 1.0, f[1]];
    let mut out = [0u8; 4];
    for (item, loadings) in ITEM_LOADINGS.iter().enumerate() {
        let eta: f64 = loadings.iter().zip(traits).map(|(w, x)| w * x).sum();
        let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
        let noise = (u / (1.0 - u)).ln();
        out[item] = ITEM_THRESHOLDS.iter().filter(|&&t| t < eta + noise).count() as u8;
    }
    if config.deterministic_item {
        out[0] = ((person.birth_month - 1) % N_LEVELS as u32) as u8;
    }
    out
}

/// Draws mortality outcomes and ordinal item responses.
pub fn assign_outcomes(population: &[PersonRecord], config: &GeneratorConfig) -> Result<Vec<OutcomeRecord>> {
    config.validate()?;
    if population.is_empty() {
        return Err(Error::invalid("population is empty"));
    }
    Ok(population
        .iter()
        .map(|p| {
            let mut rng = rng::child_indexed(config.seed, "outcome", p.person_id);
            let died = rng.gen::<f64>() < sigmoid(hazard_logit(p, config));
            let censored = rng.gen::<f64>() < config.censoring_rate;
            let true_outcome = match (censored, died) {
                (true, _) => TrueOutcome::Censored,
                (false, true) => TrueOutcome::Died,
                (false, false) => TrueOutcome::Survived,
            };
            let mortality_label =
                if true_outcome == TrueOutcome::Died { MortalityLabel::Positive } else { MortalityLabel::Unlabeled };
            OutcomeRecord {
                person_id: p.person_id,
                mortality_label,
                true_outcome,
                latent_died: died,
                item_responses: item_responses(p, config, &mut rng),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// Random split of `ids` by `ratios` (train, validation, test); each part is
/// returned sorted.
pub fn split_dataset(ids: &[u64], ratios: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::config("ratios", format!("must be in [0,1] and sum to 1, got ({a}, {b}, {c})")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::child(seed, "split"));
    let n = ids.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train);
    let part = |range: std::ops::Range<usize>| {
        let mut v = shuffled[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: part(0..n_train),
        validation: part(n_train..n_train + n_val),
        test: part(n_train + n_val..n),
    })
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

/// Writes records as JSON lines, each tagged with `schema_version`.
pub fn write_jsonl<T: Serialize + Clone>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&Versioned { schema_version: SCHEMA_VERSION, record: r.clone() })
            .map_err(|e| Error::Json { path: path.into(), source: e })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Versioned<T> = serde_json::from_str(&line).map_err(|e| Error::Json { path: path.into(), source: e })?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(Error::corrupt(path, format!("line {}: unsupported schema_version {}", i + 1, v.schema_version)));
        }
        out.push(v.record);
    }
    Ok(out)
}
