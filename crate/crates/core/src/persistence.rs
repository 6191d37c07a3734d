//! On-disk artifacts: model checkpoints, run configuration and manifests.
//!
//! Checkpoint layout (little-endian):
//! magic `LSQCKPT\0`, format version u32, config hash (64 hex bytes),
//! vocabulary hash (64 hex bytes), step u64, feature seed u64, config JSON
//! (u32 length + bytes), tensor count u32, then per tensor the name
//! (u32 length + bytes), rows u32, cols u32 and f32 values, and finally a
//! SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::interpret::TcavConfig;
use crate::losses::LossConfig;
use crate::metrics::MetricSettings;
use crate::model::{Model, ModelConfig};
use crate::pretrain::PretrainConfig;
use crate::space::SpaceConfig;
use crate::synthgen::GeneratorConfig;
use crate::tokenizer::{hex, Cursor, Vocabulary};

const CHECKPOINT_MAGIC: &[u8; 8] = b"LSQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes via a temporary sibling and a rename, so readers never observe a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Hash of the canonical JSON form of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serialises").as_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
    pub vocab_hash: String,
    pub step: u64,
    pub feature_seed: u64,
    pub config: ModelConfig,
}

pub fn encode_checkpoint(model: &Model, vocab_hash: &str, step: u64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(config_hash(&model.cfg).as_bytes());
    buf.extend_from_slice(vocab_hash.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&model.feature_seed.to_le_bytes());
    let cfg = serde_json::to_string(&model.cfg).expect("config serialises");
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, value) in model.store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for &v in value.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary, step: u64) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model, &vocab.hash(), step))
}

fn text(cur: &mut Cursor, n: usize, what: &str) -> Result<String> {
    let path = cur.path;
    String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| Error::corrupt(path, format!("{what} is not UTF-8")))
}

/// Parses a checkpoint without checking it against a vocabulary.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Array2<f64>)>)> {
    if bytes.len() < 32 + CHECKPOINT_MAGIC.len() {
        return Err(Error::corrupt(path, "truncated checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if bytes[..8] != CHECKPOINT_MAGIC[..] {
        return Err(Error::corrupt(path, "not a checkpoint (bad magic)"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::corrupt(path, "checksum mismatch (truncated or modified)"));
    }
    let mut cur = Cursor { bytes: body, pos: 8, path };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported checkpoint version {version}")));
    }
    let config_hash_stored = text(&mut cur, 64, "config hash")?;
    let vocab_hash = text(&mut cur, 64, "vocabulary hash")?;
    let step = cur.u64()?;
    let feature_seed = cur.u64()?;
    let n = cur.u32()? as usize;
    let cfg_text = text(&mut cur, n, "config")?;
    let config: ModelConfig =
        serde_json::from_str(&cfg_text).map_err(|e| Error::corrupt(path, format!("embedded config: {e}")))?;
    let actual = config_hash(&config);
    if actual != config_hash_stored {
        return Err(Error::HashMismatch { kind: "config", expected: config_hash_stored, found: actual });
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = cur.u32()? as usize;
        let name = text(&mut cur, len, "tensor name")?;
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 4)?;
        let values: Vec<f64> = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        tensors.push((name, Array2::from_shape_vec((rows, cols), values).expect("shape matches length")));
    }
    if cur.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes after tensors"));
    }
    let header = CheckpointHeader { version, config_hash: config_hash_stored, vocab_hash, step, feature_seed, config };
    Ok((header, tensors))
}

/// Loads a checkpoint and verifies it belongs to `vocab`.
pub fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, tensors) = decode_checkpoint(path, &bytes)?;
    let found = vocab.hash();
    if header.vocab_hash != found {
        return Err(Error::HashMismatch { kind: "vocabulary", expected: header.vocab_hash, found });
    }
    let mut model = Model::new(&header.config, vocab.len(), 0)?;
    if tensors.len() != model.store.len() {
        return Err(Error::corrupt(path, format!("expected {} tensors, found {}", model.store.len(), tensors.len())));
    }
    for (name, value) in tensors {
        let id = model.store.id(&name).ok_or_else(|| Error::corrupt(path, format!("unknown tensor {name}")))?;
        if model.store.get(id).dim() != value.dim() {
            return Err(Error::corrupt(path, format!("tensor {name} has shape {:?}", value.dim())));
        }
        model.store.set(id, value);
    }
    model.feature_seed = header.feature_seed;
    Ok((model, header))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub max_len: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self { max_len: 64, min_frequency: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    /// Derive the hidden-positive fraction of the corrected MCC from the
    /// training positive share and the censoring rate instead of
    /// `metrics.alpha`.
    pub estimate_alpha: bool,
    /// Also train and score the baselines on mortality.
    pub baselines: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { estimate_alpha: true, baselines: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpretSettings {
    /// Test persons whose token scores are written.
    pub n_persons: usize,
    pub saliency_samples: usize,
    /// Noise scale of the smoothed gradients.
    pub saliency_sigma: f64,
}

impl Default for InterpretSettings {
    fn default() -> Self {
        Self { n_persons: 20, saliency_samples: 20, saliency_sigma: 0.1 }
    }
}

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Every setting of a run. Missing sections take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub interpret: InterpretSettings,
    #[serde(default)]
    pub tcav: TcavConfig,
    #[serde(default)]
    pub space: SpaceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: RUN_CONFIG_VERSION,
            seed: 0,
            generator: GeneratorConfig::default(),
            tokenizer: TokenizerSettings::default(),
            split: SplitSettings::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            loss: LossConfig::default(),
            baselines: BaselineConfig::default(),
            metrics: MetricSettings::default(),
            evaluation: EvaluationSettings::default(),
            interpret: InterpretSettings::default(),
            tcav: TcavConfig::default(),
            space: SpaceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Toml { path: path.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(path, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_VERSION {
            return Err(Error::config("schema_version", format!("must be {RUN_CONFIG_VERSION}, got {}", self.schema_version)));
        }
        self.generator.validate()?;
        if self.tokenizer.max_len < 8 {
            return Err(Error::config("tokenizer.max_len", "must be at least 8"));
        }
        let s = &self.split;
        if [s.train, s.validation, s.test].iter().any(|&v| !(v > 0.0)) || ((s.train + s.validation + s.test) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "fractions must be positive and sum to 1"));
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.loss.validate()?;
        self.baselines.validate()?;
        self.tcav.validate()?;
        if self.interpret.saliency_samples == 0 || !(self.interpret.saliency_sigma >= 0.0) {
            return Err(Error::config("interpret.saliency_samples", "needs at least one sample and a non-negative sigma"));
        }
        Ok(())
    }
}

/// Record of one command: resolved configuration, seed and artifact hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub crate_version: String,
    pub config: RunConfig,
    /// File name → SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            schema_version: 1,
            command: command.to_string(),
            seed: config.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes the named files inside `dir`.
    pub fn record(&mut self, dir: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.into(), source: e })?;
        atomic_write(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_requires_schema_version() {
        let p = Path::new("run.toml");
        assert!(RunConfig::from_toml(p, "seed = 3\n").is_err());
        let cfg = RunConfig::from_toml(p, "schema_version = 1\nseed = 3\n").unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let p = Path::new("run.toml");
        let err = RunConfig::from_toml(p, "schema_version = 1\n[model]\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(Path::new("x"), &cfg.to_toml()).unwrap(), cfg);
    }
}
