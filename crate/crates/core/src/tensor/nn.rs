//! Transformer building blocks expressed as parameter handles plus graph code.

use rand::Rng;

use super::array::{Result, Tensor};
use super::graph::{AttnMask, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::real::Real;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.normal(format!("{name}.weight"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[d_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self { gain: store.ones(format!("{name}.gain"), &[dim]), bias: store.zeros(format!("{name}.bias"), &[dim]) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head self-attention with an optional visibility mask.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim, false),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim, false),
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<AttnMask>) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        self.attend(g, q, k, v, mask)
    }

    /// Causal attention of new rows `x` over the cached keys/values plus themselves.
    /// The cache is extended with the new rows.
    pub fn forward_cached<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, cache: &mut KvCache<T>) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let mut k = self.key.forward(g, x)?;
        let mut v = self.value.forward(g, x)?;
        let past = cache.len();
        if let (Some(pk), Some(pv)) = (cache.keys.take(), cache.values.take()) {
            let (pk, pv) = (g.constant(pk)?, g.constant(pv)?);
            k = g.concat_rows(&[pk, k])?;
            v = g.concat_rows(&[pv, v])?;
        }
        cache.keys = Some(g.value(k).clone());
        cache.values = Some(g.value(v).clone());
        self.attend(g, q, k, v, Some(AttnMask::CausalOffset(past)))
    }

    fn attend<T: Real>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, mask: Option<AttnMask>) -> Result<Var> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
            };
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale)?;
            if let Some(mask) = mask {
                scores = g.mask_fill(scores, mask)?;
            }
            let probs = g.softmax(scores, 1)?;
            outs.push(g.matmul(probs, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.out.forward(g, merged)
    }
}

/// Keys and values of already processed rows for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T = f32> {
    keys: Option<Tensor<T>>,
    values: Option<Tensor<T>>,
}

impl<T: Real> Default for KvCache<T> {
    fn default() -> Self {
        Self { keys: None, values: None }
    }
}

impl<T: Real> KvCache<T> {
    pub fn len(&self) -> usize {
        self.keys.as_ref().map_or(0, |k| k.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, 4 * dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mask: Option<AttnMask>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln_ff.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }

    /// [`Block::forward`] with causal attention over cached rows.
    pub fn forward_cached<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, cache: &mut KvCache<T>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward_cached(g, h, cache)?;
        let x = g.add(x, h)?;
        let h = self.ln_ff.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

/// Standard sine/cosine position table, `len x dim`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    sinusoidal_rows(&(0..len).collect::<Vec<_>>(), dim)
}

/// Sinusoidal rows for an explicit list of positions.
pub fn sinusoidal_rows<T: Real>(positions: &[usize], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for c in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[positions.len(), dim], data).expect("consistent shape")
}
