//! Text-video aligner.
//!
//! Phonemes and lip frames are encoded into a shared space, compared by a scaled
//! dot product, and each lip frame is assigned the phoneme with the highest
//! probability. The probabilities are normalized over the phoneme axis so that
//! every lip-frame column is a classification distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LipEmbeds, PhonemeSeq};
use crate::tensor::nn::{sinusoidal_positions, Block, LayerNorm, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignerConfig {
    pub dim_h: usize,
    pub heads: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self { dim_h: 64, heads: 4 }
    }
}

/// Phoneme id per lip frame predicted by the aligner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedPhonemes {
    pub ids: Vec<usize>,
    /// Row of the similarity matrix chosen for each frame.
    pub positions: Vec<usize>,
}

impl ExpandedPhonemes {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Aligner {
    pub phoneme_table: ParamId,
    pub phoneme_block: Block,
    pub phoneme_norm: LayerNorm,
    pub lip_proj: Linear,
    pub lip_block: Block,
    pub lip_norm: LayerNorm,
    pub dim_h: usize,
    pub vocab_p: usize,
    pub lip_dim: usize,
}

impl Aligner {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &AlignerConfig,
        vocab_p: usize,
        lip_dim: usize,
    ) -> Self {
        let d = cfg.dim_h;
        Self {
            phoneme_table: store.normal(format!("{prefix}.phoneme_table"), &[vocab_p, d], 1.0, rng),
            phoneme_block: Block::new(store, rng, &format!("{prefix}.phoneme_block"), d, cfg.heads),
            phoneme_norm: LayerNorm::new(store, &format!("{prefix}.phoneme_norm"), d),
            lip_proj: Linear::new(store, rng, &format!("{prefix}.lip_proj"), lip_dim, d, true),
            lip_block: Block::new(store, rng, &format!("{prefix}.lip_block"), d, cfg.heads),
            lip_norm: LayerNorm::new(store, &format!("{prefix}.lip_norm"), d),
            dim_h: d,
            vocab_p,
            lip_dim,
        }
    }

    /// Phoneme features, `T_p x dim_h`, with full bidirectional attention.
    pub fn encode_phonemes<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(TensorError::invalid("encode_phonemes", "empty phoneme sequence"));
        }
        let table = g.param(self.phoneme_table);
        let x = g.embedding(table, ids)?;
        let pe = g.constant(sinusoidal_positions(ids.len(), self.dim_h))?;
        let x = g.add(x, pe)?;
        let x = self.phoneme_block.forward(g, x, None)?;
        self.phoneme_norm.forward(g, x)
    }

    /// Lip inputs to the encoder block: projection plus positions.
    pub fn lip_inputs<T: Real>(&self, g: &mut Graph<'_, T>, lips: &LipEmbeds) -> Result<Var> {
        if lips.dim != self.lip_dim {
            return Err(TensorError::Shape {
                op: "encode_lips",
                lhs: vec![lips.frames, lips.dim],
                rhs: vec![lips.frames, self.lip_dim],
            });
        }
        if lips.frames == 0 {
            return Err(TensorError::invalid("encode_lips", "no lip frames"));
        }
        let raw = Tensor::new(&[lips.frames, lips.dim], lips.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        let x = g.constant(raw)?;
        let x = self.lip_proj.forward(g, x)?;
        let pe = g.constant(sinusoidal_positions(lips.frames, self.dim_h))?;
        g.add(x, pe)
    }

    /// Lip features, `T_v x dim_h`.
    pub fn encode_lips<T: Real>(&self, g: &mut Graph<'_, T>, lips: &LipEmbeds) -> Result<Var> {
        let x = self.lip_inputs(g, lips)?;
        let x = self.lip_block.forward(g, x, None)?;
        self.lip_norm.forward(g, x)
    }

    /// Scaled scores `p_enc * l_enc^T / sqrt(dim_h)`, shape `T_p x T_v`.
    pub fn scores<T: Real>(&self, g: &mut Graph<'_, T>, p_enc: Var, l_enc: Var) -> Result<Var> {
        let s = g.matmul_nt(p_enc, l_enc)?;
        g.scale(s, 1.0 / (self.dim_h as f64).sqrt())
    }

    /// Encodes both modalities and returns the score matrix.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, phonemes: &PhonemeSeq, lips: &LipEmbeds) -> Result<Var> {
        let p = self.encode_phonemes(g, phonemes.ids())?;
        let l = self.encode_lips(g, lips)?;
        self.scores(g, p, l)
    }

    /// Similarity matrix and expansion without recording gradients of interest.
    pub fn align<T: Real>(
        &self,
        store: &ParamStore<T>,
        phonemes: &PhonemeSeq,
        lips: &LipEmbeds,
    ) -> Result<(Tensor<T>, ExpandedPhonemes)> {
        let mut g = Graph::new(store);
        let s = self.forward(&mut g, phonemes, lips)?;
        let a = g.softmax(s, 0)?;
        let a = g.value(a).clone();
        let exp = expand(phonemes, &a)?;
        Ok((a, exp))
    }
}

/// Column-stochastic similarity matrix from scores (softmax over the phoneme axis).
pub fn similarity<T: Real>(g: &mut Graph<'_, T>, scores: Var) -> Result<Var> {
    g.softmax(scores, 0)
}

/// `-sum_i log A[g_i, i]` where `A = softmax(scores)` per column and `g_i` is the
/// phoneme row each frame belongs to.
pub fn alignment_loss<T: Real>(g: &mut Graph<'_, T>, scores: Var, rows: &[usize]) -> Result<Var> {
    let (t_p, t_v) = g.value(scores).dims2();
    if rows.len() != t_v {
        return Err(TensorError::Shape { op: "alignment_loss", lhs: vec![t_p, t_v], rhs: vec![rows.len()] });
    }
    let by_frame = g.transpose(scores)?;
    g.cross_entropy(by_frame, rows)
}

/// The same loss evaluated directly on a probability matrix.
pub fn alignment_nll<T: Real>(a: &Tensor<T>, rows: &[usize]) -> Result<f64> {
    let (t_p, t_v) = a.dims2();
    if rows.len() != t_v {
        return Err(TensorError::Shape { op: "alignment_nll", lhs: vec![t_p, t_v], rhs: vec![rows.len()] });
    }
    let mut total = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        if r >= t_p {
            return Err(TensorError::Index { op: "alignment_nll", index: r, bound: t_p });
        }
        total -= a.at(r, i).as_f64().ln();
    }
    Ok(total)
}

/// Picks, for every frame column, the phoneme at the row of maximal probability
/// (lowest row on ties).
pub fn expand<T: Real>(phonemes: &PhonemeSeq, a: &Tensor<T>) -> Result<ExpandedPhonemes> {
    let (t_p, t_v) = a.dims2();
    if a.is_empty() {
        return Err(TensorError::invalid("expand", "empty similarity matrix"));
    }
    if t_p != phonemes.len() {
        return Err(TensorError::Shape { op: "expand", lhs: vec![t_p, t_v], rhs: vec![phonemes.len()] });
    }
    let positions: Vec<usize> = (0..t_v)
        .map(|j| {
            let mut best = 0;
            for r in 1..t_p {
                if a.at(r, j) > a.at(best, j) {
                    best = r;
                }
            }
            best
        })
        .collect();
    let ids = positions.iter().map(|&r| phonemes.ids()[r]).collect();
    Ok(ExpandedPhonemes { ids, positions })
}
