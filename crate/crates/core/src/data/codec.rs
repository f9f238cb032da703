use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CorpusConfig, DataError, Result, TokenGrid};
use crate::tensor::Tensor;

/// Deterministic stand-in for a residual speech codec.
///
/// Level 0 carries phoneme and speaker, `(p * K0 + s) mod V` with `K0 = n_speakers`;
/// level `i >= 1` carries the phoneme only, `(p * K_i + i) mod V` with `K_i` coprime to `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    n_q: usize,
    vocab: usize,
    vocab_p: usize,
    n_speakers: usize,
    multipliers: Vec<usize>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Codec {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut multipliers = vec![cfg.n_speakers];
        let mut cand = 3;
        while multipliers.len() < cfg.n_q {
            let is_prime = (2..cand).take_while(|d| d * d <= cand).all(|d| cand % d != 0);
            if is_prime && gcd(cand, cfg.codebook_size) == 1 {
                multipliers.push(cand);
            }
            cand += 2;
        }
        Self { n_q: cfg.n_q, vocab: cfg.codebook_size, vocab_p: cfg.vocab_p, n_speakers: cfg.n_speakers, multipliers }
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn multipliers(&self) -> &[usize] {
        &self.multipliers
    }

    pub fn encode(&self, phoneme: usize, speaker: usize, level: usize) -> Result<u32> {
        if level >= self.n_q {
            return Err(DataError::Argument(format!("codebook level {level} >= n_q {}", self.n_q)));
        }
        let v = if level == 0 {
            phoneme * self.multipliers[0] + speaker
        } else {
            phoneme * self.multipliers[level] + level
        };
        Ok((v % self.vocab) as u32)
    }

    pub fn encode_frame(&self, phoneme: usize, speaker: usize) -> Vec<u32> {
        (0..self.n_q).map(|l| self.encode(phoneme, speaker, l).expect("level in range")).collect()
    }

    /// Token grid for a frame-level phoneme sequence spoken by `speaker`.
    pub fn encode_expansion(&self, ids: &[usize], speaker: usize) -> TokenGrid {
        let tokens = ids.iter().flat_map(|&p| self.encode_frame(p, speaker)).collect();
        TokenGrid::new(self.n_q, self.vocab, tokens).expect("codec tokens are in range")
    }

    /// True when level 0 is injective over `(phoneme, speaker)`.
    pub fn level0_injective(&self) -> bool {
        self.vocab >= self.vocab_p * self.n_speakers
    }

    /// Every `(phoneme, speaker)` mapping to `token` at level 0.
    pub fn invert_level0(&self, token: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in 0..self.vocab_p {
            for s in 0..self.n_speakers {
                if self.encode(p, s, 0).expect("level 0") == token {
                    out.push((p, s));
                }
            }
        }
        out
    }
}

/// Maps token grids to real-valued frame features by summing per-level table rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDecoder {
    n_q: usize,
    vocab: usize,
    dim: usize,
    /// `[level][token][dim]`, flattened.
    table: Vec<f64>,
}

impl FeatureDecoder {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        rng.set_stream(2);
        let n = cfg.n_q * cfg.codebook_size * cfg.feature_dim;
        let table = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { n_q: cfg.n_q, vocab: cfg.codebook_size, dim: cfg.feature_dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, level: usize, token: u32) -> &[f64] {
        let start = (level * self.vocab + token as usize) * self.dim;
        &self.table[start..start + self.dim]
    }

    /// `frames x dim` features; frame `t` is the sum over levels of `row(level, grid[t][level])`.
    pub fn decode(&self, grid: &TokenGrid) -> Result<Tensor<f64>> {
        if grid.n_q() != self.n_q || grid.vocab() > self.vocab {
            return Err(DataError::Argument(format!(
                "grid with {} levels / vocab {} does not match decoder ({} / {})",
                grid.n_q(),
                grid.vocab(),
                self.n_q,
                self.vocab
            )));
        }
        let mut data = vec![0.0; grid.frames() * self.dim];
        for t in 0..grid.frames() {
            let out = &mut data[t * self.dim..(t + 1) * self.dim];
            for (level, &tok) in grid.frame(t).iter().enumerate() {
                for (o, v) in out.iter_mut().zip(self.row(level, tok)) {
                    *o += v;
                }
            }
        }
        Tensor::new(&[grid.frames(), self.dim], data).map_err(|e| DataError::Argument(e.to_string()))
    }
}
