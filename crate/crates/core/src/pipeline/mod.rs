//! Joint training, checkpoints, sampling and ablation experiments.

mod checkpoint;
mod experiment;
mod sample;
mod train;

pub use checkpoint::{ArrayEntry, Checkpoint, Manifest, OptimizerEntry, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use experiment::{
    ablation_checks, evaluate, heldout_decoder_loss, pretrain, run_ablation, run_experiment, sampler_rng, AblationEvent,
    AblationReport, Check, EvalOutput, ExperimentConfig, ExperimentPlan, ExperimentResult,
};
pub use sample::{generate, top_k_sample, Generation, SamplerConfig};
pub use train::{train_step, StepLosses, Trainer};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{alignment_loss, Aligner, AlignerConfig};
use crate::data::{CorpusConfig, DataError, LipEmbeds, TokenGrid, Utterance};
use crate::decoder::{Decoder, DecoderConfig, PromptSequence, Variant};
use crate::eval::MetricError;
use crate::tensor::{AdamWConfig, Graph, ParamStore, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible artifact: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            other => PipelineError::Tensor(other),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Training stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Everything randomly initialized and trained jointly.
    Scratch,
    /// Decoder-only text-to-speech training with raw phonemes and EOS-terminated targets.
    Pretrain,
    /// Joint training starting from a pretrained decoder.
    Adapt,
    /// Pretrained decoder kept fixed; only the aligner learns.
    Frozen,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Scratch, Stage::Pretrain, Stage::Adapt, Stage::Frozen];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Scratch => "scratch",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Frozen => "frozen",
        }
    }

    /// Whether the stage starts from a pretrained decoder.
    pub fn needs_init(self) -> bool {
        matches!(self, Stage::Adapt | Stage::Frozen)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (expected scratch, pretrain, adapt or frozen)"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub aligner: AlignerConfig,
    pub decoder: DecoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub align_weight: f64,
    pub decoder_weight: f64,
    pub variant: Variant,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            steps: 3000,
            seed: 0,
            align_weight: 1.0,
            decoder_weight: 1.0,
            variant: Variant::Full,
            stage: Stage::Scratch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", o.beta1, o.beta2));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("eps must be positive and weight decay non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.align_weight >= 0.0 && self.decoder_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }
}

/// Aligner (full variant only) plus decoder sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    pub corpus: CorpusConfig,
    pub store: ParamStore<f32>,
    pub aligner: Option<Aligner>,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(variant: Variant, config: &ModelConfig, corpus: &CorpusConfig, seed: u64) -> Result<Self> {
        corpus.validate()?;
        let (a, d) = (&config.aligner, &config.decoder);
        for (name, dim, heads) in [("aligner", a.dim_h, a.heads), ("decoder", d.dim_m, d.heads)] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return Err(PipelineError::Config(format!("{name} width {dim} not divisible by {heads} heads")));
            }
        }
        if d.n_g == 0 || d.n_l == 0 {
            return Err(PipelineError::Config("decoder needs at least one global and one local layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let aligner = variant
            .uses_aligner()
            .then(|| Aligner::new(&mut store, &mut rng, "aligner", a, corpus.vocab_p, corpus.lip_dim));
        let lip_dim = variant.uses_lip_prefix().then_some(corpus.lip_dim);
        let decoder =
            Decoder::new(&mut store, &mut rng, "decoder", d, corpus.n_q, corpus.codebook_size, corpus.vocab_p, lip_dim);
        Ok(Self { variant, config: config.clone(), corpus: corpus.clone(), store, aligner, decoder })
    }

    /// Copies every parameter of `source` whose name and shape match; returns how many.
    pub fn init_from(&mut self, source: &ParamStore<f32>) -> Result<usize> {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            if let Some(src) = source.find(&name) {
                let value = source.get(src);
                if value.shape() != self.store.get(id).shape() {
                    return Err(PipelineError::Incompatible(format!(
                        "parameter {name} has shape {:?}, checkpoint has {:?}",
                        self.store.get(id).shape(),
                        value.shape()
                    )));
                }
                self.store.assign(id, value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn freeze_decoder(&mut self) {
        self.store.set_trainable_prefix("decoder.", false);
    }

    fn eos(&self) -> u32 {
        self.decoder.eos()
    }

    /// Teacher-forced decoder sequence for `stage`.
    ///
    /// Pretraining always uses the raw-phoneme, EOS-terminated layout; otherwise
    /// the full variant reads the ground-truth expansion.
    pub fn training_prompt(&self, u: &Utterance, stage: Stage) -> Result<PromptSequence> {
        let seq = match (stage, self.variant) {
            (Stage::Pretrain, _) | (_, Variant::NoVisual) => {
                PromptSequence::new(u.phonemes.ids(), None, &u.reference, Some(&u.target), Some(self.eos()))?
            }
            (_, Variant::Full) => PromptSequence::new(&u.gt_expansion.ids, None, &u.reference, Some(&u.target), None)?,
            (_, Variant::VisualPrefix) => {
                PromptSequence::new(u.phonemes.ids(), Some(&u.lips), &u.reference, Some(&u.target), Some(self.eos()))?
            }
        };
        Ok(seq)
    }

    /// Inference prompt ending at BOS. `p_exp` is required for the full variant.
    pub fn inference_prompt(
        &self,
        phonemes: &[usize],
        lips: &LipEmbeds,
        reference: &TokenGrid,
        p_exp: Option<&[usize]>,
    ) -> Result<PromptSequence> {
        let seq = match self.variant {
            Variant::Full => {
                let p = p_exp.ok_or_else(|| PipelineError::Config("full variant needs an expansion".into()))?;
                PromptSequence::new(p, None, reference, None, None)?
            }
            Variant::NoVisual => PromptSequence::new(phonemes, None, reference, None, None)?,
            Variant::VisualPrefix => PromptSequence::new(phonemes, Some(lips), reference, None, None)?,
        };
        Ok(seq)
    }

    /// Alignment loss (when the model has an aligner and the stage trains it) and decoder loss.
    pub fn losses(&self, g: &mut Graph<'_, f32>, u: &Utterance, stage: Stage) -> Result<(Option<Var>, Var)> {
        let align = match (&self.aligner, stage) {
            (Some(al), s) if s != Stage::Pretrain => {
                let scores = al.forward(g, &u.phonemes, &u.lips)?;
                Some(alignment_loss(g, scores, &u.gt_expansion.positions)?)
            }
            _ => None,
        };
        let seq = self.training_prompt(u, stage)?;
        let dec = self.decoder.decoder_loss(g, &seq)?;
        Ok((align, dec))
    }
}

#[cfg(test)]
mod tests;
