//! Global/local token decoder.
//!
//! The global transformer reads the prompt (phoneme steps, an optional lip
//! prefix, reference speech, BOS) followed by target frames and produces one
//! context vector per target frame from strictly earlier steps. The local
//! transformer turns each context vector into the frame's `n_q` tokens, level by
//! level, each level seeing only the lower levels of the same frame.

mod prompt;

pub use prompt::{assemble_prompt, PromptSequence, Region, Step};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LipEmbeds;
use crate::tensor::nn::{sinusoidal_rows, Block, KvCache, LayerNorm, Linear};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

pub const BOS: usize = 0;
pub const SEP: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub dim_m: usize,
    pub n_g: usize,
    pub n_l: usize,
    pub heads: usize,
    pub max_context: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim_m: 128, n_g: 4, n_l: 2, heads: 4, max_context: 512 }
    }
}

/// How visual information reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Aligner-expanded phonemes; output length fixed to the video length.
    Full,
    /// Raw phonemes only; length decided by an end-of-speech frame.
    NoVisual,
    /// Raw phonemes followed by projected lip frames; length decided by EOS.
    VisualPrefix,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoVisual, Variant::VisualPrefix];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVisual => "no_visual",
            Variant::VisualPrefix => "visual_prefix",
        }
    }

    pub fn uses_aligner(self) -> bool {
        self == Variant::Full
    }

    pub fn uses_eos(self) -> bool {
        self != Variant::Full
    }

    pub fn uses_lip_prefix(self) -> bool {
        self == Variant::VisualPrefix
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected full, no_visual or visual_prefix)"))
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub n_q: usize,
    /// Codebook size without the end-of-speech symbol.
    pub vocab: usize,
    pub vocab_p: usize,
    /// One `(vocab + 1) x dim_m` table per level; row `vocab` is EOS.
    pub level_tables: Vec<ParamId>,
    pub phoneme_table: ParamId,
    pub special_table: ParamId,
    pub region_table: ParamId,
    pub lip_proj: Option<Linear>,
    pub global: Vec<Block>,
    pub global_norm: LayerNorm,
    pub context_proj: Linear,
    pub level_positions: ParamId,
    pub local: Vec<Block>,
    pub local_norm: LayerNorm,
    pub heads: Vec<Linear>,
}

const TABLE_STD: f64 = 0.25;

impl Decoder {
    /// Registers decoder parameters under `prefix`; `lip_dim` adds the lip-prefix projection.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &DecoderConfig,
        n_q: usize,
        vocab: usize,
        vocab_p: usize,
        lip_dim: Option<usize>,
    ) -> Self {
        let d = cfg.dim_m;
        let level_tables =
            (0..n_q).map(|l| store.normal(format!("{prefix}.level{l}_table"), &[vocab + 1, d], TABLE_STD, rng)).collect();
        let phoneme_table = store.normal(format!("{prefix}.phoneme_table"), &[vocab_p, d], TABLE_STD, rng);
        let special_table = store.normal(format!("{prefix}.special_table"), &[2, d], TABLE_STD, rng);
        let region_table = store.normal(format!("{prefix}.region_table"), &[4, d], TABLE_STD, rng);
        let lip_proj = lip_dim.map(|ld| Linear::new(store, rng, &format!("{prefix}.lip_proj"), ld, d, true));
        let global = (0..cfg.n_g).map(|i| Block::new(store, rng, &format!("{prefix}.global{i}"), d, cfg.heads)).collect();
        let global_norm = LayerNorm::new(store, &format!("{prefix}.global_norm"), d);
        let context_proj = Linear::new(store, rng, &format!("{prefix}.context_proj"), d, d, true);
        let level_positions = store.normal(format!("{prefix}.level_positions"), &[n_q, d], TABLE_STD, rng);
        let local = (0..cfg.n_l).map(|i| Block::new(store, rng, &format!("{prefix}.local{i}"), d, cfg.heads)).collect();
        let local_norm = LayerNorm::new(store, &format!("{prefix}.local_norm"), d);
        let heads = (0..n_q).map(|l| Linear::new(store, rng, &format!("{prefix}.head{l}"), d, vocab + 1, true)).collect();
        Self {
            cfg: cfg.clone(),
            n_q,
            vocab,
            vocab_p,
            level_tables,
            phoneme_table,
            special_table,
            region_table,
            lip_proj,
            global,
            global_norm,
            context_proj,
            level_positions,
            local,
            local_norm,
            heads,
        }
    }

    /// End-of-speech token id (shared by all levels).
    pub fn eos(&self) -> u32 {
        self.vocab as u32
    }

    fn frames_embed<T: Real>(&self, g: &mut Graph<'_, T>, frames: &[Vec<u32>]) -> Result<Var> {
        let mut sum = None;
        for (level, &table) in self.level_tables.iter().enumerate() {
            let ids: Vec<usize> = frames.iter().map(|f| f[level] as usize).collect();
            let t = g.param(table);
            let e = g.embedding(t, &ids)?;
            sum = Some(match sum {
                None => e,
                Some(s) => g.add(s, e)?,
            });
        }
        Ok(sum.expect("n_q >= 1"))
    }

    fn phonemes_embed<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.phoneme_table);
        let e = g.embedding(t, ids)?;
        // every phoneme fills all n_q slots of its step
        g.scale(e, self.n_q as f64)
    }

    fn lips_embed<T: Real>(&self, g: &mut Graph<'_, T>, lips: &LipEmbeds) -> Result<Var> {
        let proj = self
            .lip_proj
            .as_ref()
            .ok_or_else(|| TensorError::invalid("step_embed", "decoder has no lip projection"))?;
        let raw = Tensor::new(&[lips.frames, lips.dim], lips.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        let x = g.constant(raw)?;
        proj.forward(g, x)
    }

    fn special<T: Real>(&self, g: &mut Graph<'_, T>, which: usize) -> Result<Var> {
        let t = g.param(self.special_table);
        g.embedding(t, &[which])
    }

    /// Content embedding of every step, `len x dim_m`, before positions are added.
    pub fn step_embed<T: Real>(&self, g: &mut Graph<'_, T>, seq: &PromptSequence) -> Result<Var> {
        self.check_shape(seq)?;
        let mut parts = Vec::new();
        if !seq.phonemes().is_empty() {
            parts.push(self.phonemes_embed(g, seq.phonemes())?);
        }
        if let Some(lips) = seq.lips() {
            parts.push(self.lips_embed(g, lips)?);
        }
        parts.push(self.special(g, SEP)?);
        if !seq.reference().is_empty() {
            parts.push(self.frames_embed(g, seq.reference())?);
        }
        parts.push(self.special(g, BOS)?);
        if !seq.target().is_empty() {
            parts.push(self.frames_embed(g, seq.target())?);
        }
        g.concat_rows(&parts)
    }

    fn check_shape(&self, seq: &PromptSequence) -> Result<()> {
        if seq.len() > self.cfg.max_context {
            return Err(TensorError::invalid(
                "decoder",
                format!("sequence of {} steps exceeds the context limit {}", seq.len(), self.cfg.max_context),
            ));
        }
        let bad_frame = seq.reference().iter().chain(seq.target()).find(|f| f.len() != self.n_q);
        if let Some(f) = bad_frame {
            return Err(TensorError::invalid("decoder", format!("frame with {} tokens, expected {}", f.len(), self.n_q)));
        }
        Ok(())
    }

    fn add_positions<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, regions: &[Region], positions: &[usize]) -> Result<Var> {
        let table = g.param(self.region_table);
        let ids: Vec<usize> = regions.iter().map(|r| *r as usize).collect();
        let r = g.embedding(table, &ids)?;
        let x = g.add(x, r)?;
        let pe = g.constant(sinusoidal_rows(positions, self.cfg.dim_m))?;
        g.add(x, pe)
    }

    /// Causal global stack over the whole sequence; row `s` summarizes steps `0..=s`.
    pub fn global_forward<T: Real>(&self, g: &mut Graph<'_, T>, seq: &PromptSequence) -> Result<Var> {
        let x = self.step_embed(g, seq)?;
        let mut x = self.add_positions(g, x, &seq.regions(), &seq.positions())?;
        for block in &self.global {
            x = block.forward(g, x, Some(AttnMask::Causal))?;
        }
        self.global_norm.forward(g, x)
    }

    /// Context vector of every target frame: the global output one step earlier.
    pub fn context_vectors<T: Real>(&self, g: &mut Graph<'_, T>, seq: &PromptSequence, global: Var) -> Result<Var> {
        if seq.target().is_empty() {
            return Err(TensorError::invalid("decoder", "sequence has no target region"));
        }
        g.slice_rows(global, seq.bos_index(), seq.target().len())
    }

    /// Per-level logits `[F x (vocab + 1)]` for `F` frames given their context vectors.
    ///
    /// Level `i` of frame `f` sees the context vector and levels `< i` of `frames[f]`.
    pub fn local_logits<T: Real>(&self, g: &mut Graph<'_, T>, context: Var, frames: &[Vec<u32>]) -> Result<Vec<Var>> {
        let f = frames.len();
        if g.value(context).rows() != f {
            return Err(TensorError::invalid("local_logits", "one context vector per frame required"));
        }
        let mut parts = vec![self.context_proj.forward(g, context)?];
        for level in 0..self.n_q - 1 {
            let ids: Vec<usize> = frames.iter().map(|fr| fr[level] as usize).collect();
            let t = g.param(self.level_tables[level]);
            parts.push(g.embedding(t, &ids)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { g.interleave_rows(&parts)? };
        let lp = g.param(self.level_positions);
        let level_ids: Vec<usize> = (0..f * self.n_q).map(|r| r % self.n_q).collect();
        let lp = g.embedding(lp, &level_ids)?;
        let mut x = g.add(x, lp)?;
        for block in &self.local {
            x = block.forward(g, x, Some(AttnMask::BlockCausal(self.n_q)))?;
        }
        let x = self.local_norm.forward(g, x)?;
        let mut out = Vec::with_capacity(self.n_q);
        for (level, head) in self.heads.iter().enumerate() {
            let rows = if self.n_q == 1 { x } else { g.strided_rows(x, level, self.n_q)? };
            out.push(head.forward(g, rows)?);
        }
        Ok(out)
    }

    /// Logits `[1 x (vocab + 1)]` for level `prev.len()` of one frame.
    pub fn local_forward<T: Real>(&self, g: &mut Graph<'_, T>, context: Var, prev: &[u32]) -> Result<Var> {
        let level = prev.len();
        if level >= self.n_q {
            return Err(TensorError::Index { op: "local_forward", index: level, bound: self.n_q });
        }
        let mut rows = vec![self.context_proj.forward(g, context)?];
        for (l, &tok) in prev.iter().enumerate() {
            let t = g.param(self.level_tables[l]);
            rows.push(g.embedding(t, &[tok as usize])?);
        }
        let x = g.concat_rows(&rows)?;
        let lp = g.param(self.level_positions);
        let lp = g.embedding(lp, &(0..=level).collect::<Vec<_>>())?;
        let mut x = g.add(x, lp)?;
        for block in &self.local {
            x = block.forward(g, x, Some(AttnMask::Causal))?;
        }
        let x = self.local_norm.forward(g, x)?;
        let last = g.slice_rows(x, level, 1)?;
        self.heads[level].forward(g, last)
    }

    /// Summed cross-entropy over every level of every target frame.
    ///
    /// Without EOS in the sequence the EOS column is excluded, so a uniform model
    /// scores exactly `frames * n_q * ln(vocab)`.
    pub fn decoder_loss<T: Real>(&self, g: &mut Graph<'_, T>, seq: &PromptSequence) -> Result<Var> {
        let h = self.global_forward(g, seq)?;
        let ctx = self.context_vectors(g, seq, h)?;
        let logits = self.local_logits(g, ctx, seq.target())?;
        let mut total = None;
        for (level, l) in logits.into_iter().enumerate() {
            let targets: Vec<usize> = seq.target().iter().map(|f| f[level] as usize).collect();
            let l = if seq.has_eos() { l } else { g.slice_cols(l, 0, self.vocab)? };
            let ce = g.cross_entropy(l, &targets)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
        }
        Ok(total.expect("n_q >= 1"))
    }

    /// Starts incremental decoding from a prompt that ends at BOS.
    pub fn start<'s, T: Real>(&self, store: &'s ParamStore<T>, prompt: &PromptSequence) -> Result<DecodeState<'_, 's, T>> {
        if !prompt.target().is_empty() {
            return Err(TensorError::invalid("decoder", "inference prompt must end at BOS"));
        }
        let mut state = DecodeState {
            decoder: self,
            store,
            caches: vec![KvCache::default(); self.cfg.n_g],
            context: Tensor::zeros(&[1, self.cfg.dim_m]),
            frames: 0,
            steps: prompt.len(),
        };
        let mut g = Graph::new(store);
        let x = self.step_embed(&mut g, prompt)?;
        let x = self.add_positions(&mut g, x, &prompt.regions(), &prompt.positions())?;
        state.context = state.run_global(&mut g, x)?;
        Ok(state)
    }
}

/// Incremental generation state with cached global keys/values.
#[derive(Debug)]
pub struct DecodeState<'d, 's, T: Real> {
    decoder: &'d Decoder,
    store: &'s ParamStore<T>,
    caches: Vec<KvCache<T>>,
    context: Tensor<T>,
    frames: usize,
    steps: usize,
}

impl<T: Real> DecodeState<'_, '_, T> {
    fn run_global(&mut self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Tensor<T>> {
        for (block, cache) in self.decoder.global.iter().zip(&mut self.caches) {
            x = block.forward_cached(g, x, cache)?;
        }
        let x = self.decoder.global_norm.forward(g, x)?;
        let rows = g.value(x).rows();
        let last = g.slice_rows(x, rows - 1, 1)?;
        Ok(g.value(last).clone())
    }

    /// Context vector for the next frame.
    pub fn context(&self) -> &Tensor<T> {
        &self.context
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Logits `[vocab + 1]` for level `prev.len()` of the next frame.
    pub fn level_logits(&self, prev: &[u32]) -> Result<Vec<T>> {
        let mut g = Graph::new(self.store);
        let h = g.constant(self.context.clone())?;
        let l = self.decoder.local_forward(&mut g, h, prev)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Appends a completed frame and advances the context vector.
    pub fn push_frame(&mut self, frame: &[u32]) -> Result<()> {
        let d = self.decoder;
        if frame.len() != d.n_q || frame.iter().any(|&t| t > d.eos()) {
            return Err(TensorError::invalid("push_frame", format!("invalid frame {frame:?}")));
        }
        if self.steps + 1 > d.cfg.max_context {
            return Err(TensorError::invalid(
                "decoder",
                format!("generation exceeds the context limit {}", d.cfg.max_context),
            ));
        }
        let mut g = Graph::new(self.store);
        let x = d.frames_embed(&mut g, &[frame.to_vec()])?;
        let x = d.add_positions(&mut g, x, &[Region::Target], &[self.frames + 1])?;
        self.context = self.run_global(&mut g, x)?;
        self.frames += 1;
        self.steps += 1;
        Ok(())
    }
}
