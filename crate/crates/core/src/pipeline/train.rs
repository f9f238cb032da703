use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, PipelineError, Result, Stage, TrainConfig};
use crate::data::Utterance;
use crate::decoder::Variant;
use crate::tensor::{AdamW, Gradients, Graph};

/// Batch-mean losses of one optimizer step. `align` is zero when no aligner trains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub align: f64,
    pub decoder: f64,
}

impl StepLosses {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.align_weight * self.align + cfg.decoder_weight * self.decoder
    }
}

/// One AdamW update on the mean of `weights`-combined per-utterance losses.
///
/// Gradients are accumulated one utterance at a time and scaled by `1/B`. A
/// non-finite loss or gradient leaves every parameter untouched.
pub fn train_step(model: &mut Model, opt: &mut AdamW<f32>, batch: &[&Utterance], cfg: &TrainConfig) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(PipelineError::Config("empty batch".into()));
    }
    let mut acc = Gradients::empty(model.store.len());
    let mut sums = StepLosses::default();
    for u in batch {
        let mut g = Graph::new(&model.store);
        let (align, dec) = model.losses(&mut g, u, cfg.stage)?;
        let dec_value = g.value(dec).item() as f64;
        let mut total = g.scale(dec, cfg.decoder_weight)?;
        if let Some(a) = align {
            sums.align += g.value(a).item() as f64;
            let a = g.scale(a, cfg.align_weight)?;
            total = g.add(total, a)?;
        }
        sums.decoder += dec_value;
        let value = g.value(total).item() as f64;
        if !value.is_finite() {
            return Err(PipelineError::Numeric(format!("loss of {} is {value}", u.id)));
        }
        acc.accumulate(&g.backward(total)?);
    }
    let n = batch.len() as f64;
    acc.scale(1.0 / n as f32);
    opt.step(&mut model.store, &acc)?;
    Ok(StepLosses { align: sums.align / n, decoder: sums.decoder / n })
}

/// Owns a model, its optimizer and the batch sampler for one training stage.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub(crate) rng: ChaCha8Rng,
}

/// Stream of the batch-index generator, kept apart from initialization draws.
pub(crate) const BATCH_STREAM: u64 = 1;

impl Trainer {
    /// Prepares `model` for `config.stage`: the frozen stage fixes decoder weights.
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.variant != model.variant {
            return Err(PipelineError::Config(format!(
                "train config names variant {} but the model is {}",
                config.variant, model.variant
            )));
        }
        if config.stage == Stage::Pretrain && model.variant != Variant::NoVisual {
            return Err(PipelineError::Config("pretraining builds a text-to-speech decoder; use variant no_visual".into()));
        }
        if config.stage == Stage::Frozen {
            if model.aligner.is_none() {
                return Err(PipelineError::Config("frozen stage needs a model with an aligner".into()));
            }
            model.freeze_decoder();
        }
        let optimizer = AdamW::new(config.optimizer, &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self { model, optimizer, config, rng })
    }

    pub fn steps_done(&self) -> u64 {
        self.optimizer.step_count()
    }

    /// Batch of indices drawn uniformly with replacement.
    pub fn next_batch(&mut self, n_data: usize) -> Vec<usize> {
        (0..self.config.batch_size).map(|_| self.rng.gen_range(0..n_data)).collect()
    }

    pub fn step(&mut self, data: &[Utterance]) -> Result<StepLosses> {
        if data.is_empty() {
            return Err(PipelineError::Config("no training data".into()));
        }
        let idx = self.next_batch(data.len());
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
        train_step(&mut self.model, &mut self.optimizer, &batch, &self.config)
    }

    /// Steps until `config.steps` updates have been made, reporting each one.
    pub fn train(&mut self, data: &[Utterance], mut on_step: impl FnMut(u64, &StepLosses)) -> Result<()> {
        while self.steps_done() < self.config.steps {
            let losses = self.step(data)?;
            on_step(self.steps_done(), &losses);
        }
        Ok(())
    }
}
