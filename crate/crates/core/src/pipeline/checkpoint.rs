use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::Trainer;
use super::{Model, ModelConfig, PipelineError, Result, TrainConfig};
use crate::data::CorpusConfig;
use crate::decoder::Variant;
use crate::tensor::{AdamW, AdamWConfig, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
}

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key as lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal because it exceeds 64 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || PipelineError::Incompatible(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// JSON header describing everything needed to rebuild the model and resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub variant: Variant,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub params: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

/// Parameters (and optionally optimizer moments) with their manifest.
///
/// Binary layout: magic, `u32` version, `u64` manifest length, manifest JSON,
/// then little-endian `f32` parameters followed by first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: Vec<Tensor<f32>>,
    pub first_moments: Vec<Tensor<f32>>,
    pub second_moments: Vec<Tensor<f32>>,
}

fn entries(store: &ParamStore<f32>) -> Vec<ArrayEntry> {
    store
        .ids()
        .map(|id| ArrayEntry {
            name: store.name(id).to_string(),
            shape: store.get(id).shape().to_vec(),
            trainable: store.is_trainable(id),
        })
        .collect()
}

impl Checkpoint {
    /// Weights only; cannot resume training.
    pub fn from_model(model: &Model, train: &TrainConfig, step: u64) -> Self {
        let store = &model.store;
        Self {
            manifest: Manifest {
                variant: model.variant,
                model: model.config.clone(),
                corpus: model.corpus.clone(),
                train: train.clone(),
                step,
                rng: None,
                params: entries(store),
                optimizer: None,
            },
            params: store.ids().map(|id| store.get(id).clone()).collect(),
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        let step = t.steps_done();
        let mut ck = Self::from_model(&t.model, &t.config, step);
        ck.manifest.rng = Some(RngState::capture(&t.rng));
        ck.manifest.optimizer = Some(OptimizerEntry { config: t.optimizer.config, step });
        ck.first_moments = t.optimizer.first_moments().to_vec();
        ck.second_moments = t.optimizer.second_moments().to_vec();
        ck
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let scalars: usize = self.params.iter().chain(&self.first_moments).chain(&self.second_moments).map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * scalars);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.params.iter().chain(&self.first_moments).chain(&self.second_moments) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = || PipelineError::Incompatible("checkpoint truncated".into());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(PipelineError::Incompatible("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::Incompatible(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(16)).filter(|&e| e <= bytes.len()).ok_or_else(short)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| PipelineError::Incompatible(format!("unreadable manifest: {e}")))?;

        let mut cursor = &bytes[end..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if cursor.len() < 4 * n {
                return Err(short());
            }
            let (head, rest) = cursor.split_at(4 * n);
            cursor = rest;
            let data = head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Ok(Tensor::new(shape, data)?)
        };
        let params = manifest.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
        let (first_moments, second_moments) = if manifest.optimizer.is_some() {
            let m = manifest.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            let v = manifest.params.iter().map(|e| take(&e.shape)).collect::<Result<Vec<_>>>()?;
            (m, v)
        } else {
            (Vec::new(), Vec::new())
        };
        if !cursor.is_empty() {
            return Err(PipelineError::Incompatible(format!("{} trailing bytes after payload", cursor.len())));
        }
        Ok(Self { manifest, params, first_moments, second_moments })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model; parameter names and shapes must match the current architecture.
    pub fn to_model(&self) -> Result<Model> {
        let m = &self.manifest;
        let mut model = Model::new(m.variant, &m.model, &m.corpus, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != m.params.len() {
            return Err(PipelineError::Incompatible(format!(
                "checkpoint holds {} parameters, the architecture has {}",
                m.params.len(),
                ids.len()
            )));
        }
        for ((id, entry), value) in ids.into_iter().zip(&m.params).zip(&self.params) {
            if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
                return Err(PipelineError::Incompatible(format!(
                    "parameter {} {:?} does not match checkpoint entry {} {:?}",
                    model.store.name(id),
                    model.store.get(id).shape(),
                    entry.name,
                    entry.shape
                )));
            }
            model.store.assign(id, value.clone())?;
            model.store.set_trainable(id, entry.trainable);
        }
        Ok(model)
    }

    /// Restores model, optimizer moments and batch sampler exactly.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let m = &self.manifest;
        let (Some(opt), Some(rng)) = (&m.optimizer, &m.rng) else {
            return Err(PipelineError::Incompatible("checkpoint carries no optimizer state".into()));
        };
        let model = self.to_model()?;
        let optimizer = AdamW::from_state(opt.config, self.first_moments.clone(), self.second_moments.clone(), opt.step)?;
        Ok(Trainer { model, optimizer, config: m.train.clone(), rng: rng.restore()? })
    }
}
