//! Modality representations and the deterministic synthetic corpus.
//!
//! Lip frames are a fixed unit-norm prototype per phoneme plus Gaussian noise,
//! speech is a grid of codec tokens produced by [`Codec`], and ground-truth
//! durations are sampled, so the frame-level expansion `G` is exact.

mod codec;
mod corpus;
mod io;

pub use codec::{Codec, FeatureDecoder};
pub use corpus::{align_rates, gen_utterance, generate_corpus, split_corpus, utterance_seed, Synthesizer};
pub use io::{read_corpus, write_corpus, CorpusHeader, CORPUS_FORMAT, CORPUS_VERSION};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// Knobs of the synthetic corpus. Defaults are the toy scale used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_p: usize,
    pub n_speakers: usize,
    pub n_q: usize,
    pub codebook_size: usize,
    pub lip_dim: usize,
    pub feature_dim: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub ref_frames: usize,
    pub fps: f64,
    /// Seeds the phoneme prototypes and feature tables shared by every utterance.
    pub world_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_p: 24,
            n_speakers: 4,
            n_q: 4,
            codebook_size: 64,
            lip_dim: 32,
            feature_dim: 16,
            min_phonemes: 3,
            max_phonemes: 12,
            min_duration: 1,
            max_duration: 6,
            noise_sigma: 0.1,
            ref_frames: 12,
            fps: 25.0,
            world_seed: 0x5eed_1234,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.vocab_p < 2 {
            return fail(format!("vocab_p must be >= 2, got {}", self.vocab_p));
        }
        if self.n_speakers < 1 {
            return fail("n_speakers must be >= 1".into());
        }
        if self.n_q < 1 {
            return fail("n_q must be >= 1".into());
        }
        if self.codebook_size < 2 {
            return fail(format!("codebook_size must be >= 2, got {}", self.codebook_size));
        }
        if self.vocab_p > self.codebook_size {
            return fail(format!(
                "vocab_p ({}) must not exceed codebook_size ({}) so upper levels stay injective",
                self.vocab_p, self.codebook_size
            ));
        }
        if self.min_duration < 1 || self.min_duration > self.max_duration {
            return fail(format!("duration range [{}, {}] invalid", self.min_duration, self.max_duration));
        }
        if self.min_phonemes < 1 || self.min_phonemes > self.max_phonemes {
            return fail(format!("phoneme count range [{}, {}] invalid", self.min_phonemes, self.max_phonemes));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.lip_dim == 0 || self.feature_dim == 0 || self.ref_frames == 0 {
            return fail("lip_dim, feature_dim and ref_frames must be positive".into());
        }
        if !(self.fps > 0.0) {
            return fail("fps must be positive".into());
        }
        Ok(())
    }

    pub fn max_frames(&self) -> usize {
        self.max_phonemes * self.max_duration
    }
}

/// Phoneme ids of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhonemeSeq(pub Vec<usize>);

impl PhonemeSeq {
    pub fn new(ids: Vec<usize>, vocab_p: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(DataError::Argument("phoneme sequence must be non-empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&p| p >= vocab_p) {
            return Err(DataError::Argument(format!("phoneme id {bad} >= vocab size {vocab_p}")));
        }
        Ok(Self(ids))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

/// Per-frame lip features, `frames x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LipEmbeds {
    pub frames: usize,
    pub dim: usize,
    pub fps: f64,
    pub data: Vec<f32>,
}

impl LipEmbeds {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Hierarchical codec tokens, `frames x n_q`, each entry below `vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    frames: usize,
    n_q: usize,
    vocab: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(n_q: usize, vocab: usize, tokens: Vec<u32>) -> Result<Self> {
        if n_q == 0 || tokens.len() % n_q != 0 {
            return Err(DataError::Argument(format!("{} tokens do not form frames of {n_q}", tokens.len())));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(DataError::Argument(format!("token {bad} >= codebook size {vocab}")));
        }
        Ok(Self { frames: tokens.len() / n_q, n_q, vocab, tokens })
    }

    pub fn from_frames(n_q: usize, vocab: usize, frames: &[Vec<u32>]) -> Result<Self> {
        if let Some(bad) = frames.iter().find(|f| f.len() != n_q) {
            return Err(DataError::Argument(format!("frame of {} tokens, expected {n_q}", bad.len())));
        }
        Self::new(n_q, vocab, frames.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.tokens[t * self.n_q..(t + 1) * self.n_q]
    }

    pub fn get(&self, t: usize, level: usize) -> u32 {
        self.tokens[t * self.n_q + level]
    }

    /// Tokens of one codebook level across all frames.
    pub fn level(&self, level: usize) -> Vec<u32> {
        (0..self.frames).map(|t| self.get(t, level)).collect()
    }

    pub fn to_frames(&self) -> Vec<Vec<u32>> {
        (0..self.frames).map(|t| self.frame(t).to_vec()).collect()
    }
}

/// Phoneme id per video frame built by repeating each phoneme for its duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthExpansion {
    /// Phoneme id per frame.
    pub ids: Vec<usize>,
    /// Index into the phoneme sequence per frame (non-decreasing).
    pub positions: Vec<usize>,
}

impl GroundTruthExpansion {
    pub fn from_durations(phonemes: &PhonemeSeq, durations: &[usize]) -> Result<Self> {
        if durations.len() != phonemes.len() {
            return Err(DataError::Argument(format!(
                "{} durations for {} phonemes",
                durations.len(),
                phonemes.len()
            )));
        }
        if durations.contains(&0) {
            return Err(DataError::Argument("every phoneme needs at least one frame".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (pos, (&p, &d)) in phonemes.ids().iter().zip(durations).enumerate() {
            ids.extend(std::iter::repeat(p).take(d));
            positions.extend(std::iter::repeat(pos).take(d));
        }
        Ok(Self { ids, positions })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks length, monotonicity and coverage against `phonemes`.
    pub fn is_monotone_expansion_of(&self, phonemes: &PhonemeSeq) -> bool {
        let covers_all = (0..phonemes.len()).all(|i| self.positions.contains(&i));
        let monotone = self.positions.windows(2).all(|w| w[0] <= w[1] && w[1] - w[0] <= 1);
        let starts = self.positions.first() == Some(&0);
        let consistent =
            self.ids.len() == self.positions.len() && self.ids.iter().zip(&self.positions).all(|(&id, &p)| phonemes.0.get(p) == Some(&id));
        covers_all && monotone && starts && consistent
    }
}

/// One training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub phonemes: PhonemeSeq,
    pub durations: Vec<usize>,
    pub lips: LipEmbeds,
    pub target: TokenGrid,
    /// Prompt speech from a different sentence of the same speaker.
    pub reference: TokenGrid,
    pub gt_expansion: GroundTruthExpansion,
}

impl Utterance {
    pub fn video_frames(&self) -> usize {
        self.lips.frames
    }
}

#[cfg(test)]
mod tests;
