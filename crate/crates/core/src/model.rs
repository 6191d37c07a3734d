//! The full network: embeddings, encoder and all task heads in one store.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedder::Embedder;
use crate::encoder::{AttentionTrace, Encoder, EncoderConfig, FeatureBank};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::heads::{row, MlmHead, OrdinalHead, Pooled, PooledHead, SopHead};
use crate::losses::Normalizer;
use crate::params::ParamStore;
use crate::rng;
use crate::synthgen::{N_ITEMS, N_LEVELS};
use crate::tokenizer::EncodedSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Sharpening factor of the masked-token decoder.
    pub mlm_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), mlm_scale: 10.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.mlm_scale > 0.0 && self.mlm_scale.is_finite()) {
            return Err(Error::config("model.mlm_scale", "must be positive"));
        }
        Ok(())
    }
}

/// Probability normaliser of the mortality head.
pub const MORTALITY_NORMALIZER: Normalizer = Normalizer::SigSoftmax;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub encoder: Encoder,
    pub mlm: MlmHead,
    pub sop: SopHead,
    pub mortality: PooledHead,
    pub personality: OrdinalHead,
    /// Seed of the evaluation-time random features and training redraws.
    pub feature_seed: u64,
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.d;
        let mut store = ParamStore::new();
        let mut r = rng::child(seed, "init");
        let embedder = Embedder::new(&mut store, vocab_size, d, &mut r);
        let encoder = Encoder::new(&mut store, &cfg.encoder, &mut r)?;
        let mlm = MlmHead::new(&mut store, d, cfg.mlm_scale, &mut r);
        let sop = SopHead::new(&mut store, d, &mut r);
        let mortality = PooledHead::new(&mut store, d, 2, &mut r);
        let personality = OrdinalHead::new(&mut store, d, &mut r);
        Ok(Self {
            cfg: cfg.clone(),
            vocab_size,
            store,
            embedder,
            encoder,
            mlm,
            sop,
            mortality,
            personality,
            feature_seed: rng::derive(seed, "features"),
        })
    }

    pub fn d(&self) -> usize {
        self.cfg.encoder.d
    }

    /// Random features used outside training.
    pub fn eval_bank(&self) -> FeatureBank {
        FeatureBank::draw(&self.cfg.encoder, self.feature_seed)
    }

    /// Random features for training step `step`.
    pub fn train_bank(&self, step: u64) -> FeatureBank {
        FeatureBank::for_step(&self.cfg.encoder, self.feature_seed, step)
    }

    pub fn embed(&self, tape: &mut Tape, seq: &EncodedSequence) -> Result<Var> {
        self.embedder.forward(tape, &self.store, seq)
    }

    /// Encoder output for given input embeddings.
    pub fn encode(&self, tape: &mut Tape, x: Var, padding: &[bool], bank: &FeatureBank) -> Result<Var> {
        self.encoder.forward(tape, &self.store, x, padding, bank)
    }

    /// Embeddings followed by the encoder.
    pub fn contextual(&self, tape: &mut Tape, seq: &EncodedSequence, bank: &FeatureBank) -> Result<Var> {
        let x = self.embed(tape, seq)?;
        self.encode(tape, x, &seq.padding_mask, bank)
    }

    pub fn contextual_traced(&self, tape: &mut Tape, seq: &EncodedSequence, bank: &FeatureBank) -> Result<(Var, AttentionTrace)> {
        let x = self.embed(tape, seq)?;
        self.encoder.forward_traced(tape, &self.store, x, &seq.padding_mask, bank)
    }

    pub fn mortality_forward(&self, tape: &mut Tape, seq: &EncodedSequence, bank: &FeatureBank) -> Result<Pooled> {
        let h = self.contextual(tape, seq, bank)?;
        self.mortality.forward(tape, &self.store, h, &seq.padding_mask)
    }

    /// Personality logits (items × levels) from the `[CLS]` row.
    pub fn personality_forward(&self, tape: &mut Tape, seq: &EncodedSequence, bank: &FeatureBank) -> Result<Var> {
        let h = self.contextual(tape, seq, bank)?;
        let cls = row(tape, h, 0);
        Ok(self.personality.forward(tape, &self.store, cls))
    }

    /// Probability of the positive (death) class.
    pub fn mortality_probability(&self, seq: &EncodedSequence, bank: &FeatureBank) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.mortality_forward(&mut tape, seq, bank)?;
        let logits: Vec<f64> = tape.value(out.logits).iter().copied().collect();
        Ok(MORTALITY_NORMALIZER.values(&logits)[1])
    }

    /// Pooled person summary of the mortality head.
    pub fn person_summary(&self, seq: &EncodedSequence, bank: &FeatureBank) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.mortality_forward(&mut tape, seq, bank)?;
        Ok(tape.value(out.summary).iter().copied().collect())
    }

    /// Level probabilities per personality item.
    pub fn personality_probabilities(&self, seq: &EncodedSequence, bank: &FeatureBank) -> Result<[[f64; N_LEVELS]; N_ITEMS]> {
        let mut tape = Tape::new();
        let logits = self.personality_forward(&mut tape, seq, bank)?;
        let v = tape.value(logits);
        let mut out = [[0.0; N_LEVELS]; N_ITEMS];
        for (i, o) in out.iter_mut().enumerate() {
            let p = Normalizer::SigSoftmax.values(&v.row(i).to_vec());
            o.copy_from_slice(&p);
        }
        Ok(out)
    }

    /// Contextual rows as a plain matrix.
    pub fn contextual_values(&self, seq: &EncodedSequence, bank: &FeatureBank) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let h = self.contextual(&mut tape, seq, bank)?;
        Ok(tape.value(h).clone())
    }
}
