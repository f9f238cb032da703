use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, PipelineError, Result};
use crate::aligner::ExpandedPhonemes;
use crate::data::{LipEmbeds, PhonemeSeq, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { k: 30, temperature: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(PipelineError::Config("top-k needs k >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PipelineError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Draws an index from the `k` largest logits after temperature scaling.
///
/// Ties rank the lower index first. With `k = 1` the result is the argmax and
/// `rng` is left untouched.
pub fn top_k_sample<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(PipelineError::Config("no logits to sample from".into()));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(PipelineError::Numeric("logits contain NaN or +inf".into()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let k = cfg.k.min(logits.len());
    if k == 1 {
        return Ok(order[0]);
    }
    let top = &order[..k];
    let max = logits[top[0]] / cfg.temperature;
    let weights: Vec<f64> = top.iter().map(|&i| (logits[i] / cfg.temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, w) in top.iter().zip(&weights) {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(top[weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)])
}

/// Generated speech plus, for the full variant, the predicted expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub grid: TokenGrid,
    pub expansion: Option<ExpandedPhonemes>,
    /// Whether an EOS token ended generation before the frame cap.
    pub stopped_by_eos: bool,
}

/// Autoregressive generation.
///
/// The full variant emits exactly one frame per video frame with EOS masked.
/// The other variants stop at an EOS drawn on level 0 or after twice the
/// video length. EOS stays masked on the first frame and on levels above 0.
pub fn generate<R: Rng + ?Sized>(
    model: &Model,
    phonemes: &PhonemeSeq,
    lips: &LipEmbeds,
    reference: &TokenGrid,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Generation> {
    sampler.validate()?;
    let vocab = model.corpus.codebook_size;
    let n_q = model.corpus.n_q;
    if lips.frames == 0 {
        return Err(PipelineError::Config("lip sequence has no frames".into()));
    }
    let expansion = match &model.aligner {
        Some(al) => Some(al.align(&model.store, phonemes, lips)?.1),
        None => None,
    };
    let p_exp = expansion.as_ref().map(|e| e.ids.as_slice());
    let prompt = model.inference_prompt(phonemes.ids(), lips, reference, p_exp)?;
    let (cap, eos) = match &expansion {
        Some(_) => (lips.frames, None),
        None => (2 * lips.frames, Some(model.decoder.eos())),
    };

    let mut state = model.decoder.start(&model.store, &prompt)?;
    let mut tokens = Vec::with_capacity(cap * n_q);
    let mut stopped_by_eos = false;
    'frames: for t in 0..cap {
        let mut frame = Vec::with_capacity(n_q);
        for level in 0..n_q {
            let logits = state.level_logits(&frame)?;
            let allow_eos = eos.is_some() && level == 0 && t > 0;
            let width = if allow_eos { vocab + 1 } else { vocab };
            let logits: Vec<f64> = logits[..width].iter().map(|&v| v as f64).collect();
            let token = top_k_sample(&logits, sampler, rng)? as u32;
            if allow_eos && Some(token) == eos {
                stopped_by_eos = true;
                break 'frames;
            }
            frame.push(token);
        }
        tokens.extend_from_slice(&frame);
        if t + 1 < cap {
            state.push_frame(&frame)?;
        }
    }
    let grid = TokenGrid::new(n_q, vocab, tokens)?;
    Ok(Generation { grid, expansion, stopped_by_eos })
}
