use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    Codec, CorpusConfig, DataError, GroundTruthExpansion, LipEmbeds, PhonemeSeq, Result, Utterance,
};

/// Index map presenting two streams of different rates at a common length.
///
/// The result has `max(speech_len, video_len)` entries indexing into the shorter
/// stream by nearest-neighbour repetition (`round(i * short / long)`, halves rounded down).
pub fn align_rates(speech_len: usize, video_len: usize) -> Result<Vec<usize>> {
    if speech_len == 0 || video_len == 0 {
        return Err(DataError::Argument(format!(
            "cannot align empty streams (speech {speech_len}, video {video_len})"
        )));
    }
    let long = speech_len.max(video_len) as u64;
    let short = speech_len.min(video_len) as u64;
    Ok((0..long)
        .map(|i| {
            // ceil(i*short/long - 1/2) in integers
            let twice = 2 * i * short;
            let idx = if twice <= long { 0 } else { (twice - long).div_ceil(2 * long) };
            idx.min(short - 1) as usize
        })
        .collect())
}

/// Seed of utterance `index` in a corpus generated from `corpus_seed`.
pub fn utterance_seed(corpus_seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// Shared world state: phoneme lip prototypes and the codec.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: CorpusConfig,
    codec: Codec,
    prototypes: Vec<f32>,
}

impl Synthesizer {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        rng.set_stream(1);
        let mut prototypes = Vec::with_capacity(cfg.vocab_p * cfg.lip_dim);
        for _ in 0..cfg.vocab_p {
            let v: Vec<f64> = (0..cfg.lip_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prototypes.extend(v.iter().map(|x| (x / norm) as f32));
        }
        Ok(Self { cfg: cfg.clone(), codec: Codec::new(cfg), prototypes })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.cfg
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    /// Unit-norm lip prototype of phoneme `p`.
    pub fn prototype(&self, p: usize) -> &[f32] {
        let d = self.cfg.lip_dim;
        &self.prototypes[p * d..(p + 1) * d]
    }

    /// Phoneme whose prototype is closest (Euclidean) to `frame`.
    pub fn nearest_prototype(&self, frame: &[f32]) -> usize {
        let dist = |p: usize| -> f64 {
            self.prototype(p).iter().zip(frame).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
        };
        (0..self.cfg.vocab_p).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).expect("vocab_p >= 2")
    }

    fn sentence(&self, rng: &mut ChaCha8Rng) -> (PhonemeSeq, Vec<usize>) {
        let c = &self.cfg;
        let len = rng.gen_range(c.min_phonemes..=c.max_phonemes);
        let ids = (0..len).map(|_| rng.gen_range(0..c.vocab_p)).collect();
        let durations = (0..len).map(|_| rng.gen_range(c.min_duration..=c.max_duration)).collect();
        (PhonemeSeq(ids), durations)
    }

    /// Lip frames for an expansion: prototype plus isotropic Gaussian noise.
    pub fn lips_for(&self, expansion: &[usize], rng: &mut impl Rng) -> LipEmbeds {
        let sigma = self.cfg.noise_sigma;
        let mut data = Vec::with_capacity(expansion.len() * self.cfg.lip_dim);
        for &p in expansion {
            for &x in self.prototype(p) {
                let noise: f64 = if sigma > 0.0 { sigma * Distribution::<f64>::sample(&StandardNormal, rng) } else { 0.0 };
                data.push((x as f64 + noise) as f32);
            }
        }
        LipEmbeds { frames: expansion.len(), dim: self.cfg.lip_dim, fps: self.cfg.fps, data }
    }

    /// One utterance, fully determined by `seed`.
    pub fn utterance(&self, seed: u64, id: impl Into<String>) -> Utterance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let speaker = rng.gen_range(0..self.cfg.n_speakers);
        let (phonemes, durations) = self.sentence(&mut rng);
        let gt = GroundTruthExpansion::from_durations(&phonemes, &durations).expect("sampled durations are valid");
        let lips = self.lips_for(&gt.ids, &mut rng);
        let target = self.codec.encode_expansion(&gt.ids, speaker);

        // Prompt speech: further sentences by the same speaker until enough frames exist.
        let mut ref_ids = Vec::new();
        while ref_ids.len() < self.cfg.ref_frames {
            let (p, d) = self.sentence(&mut rng);
            ref_ids.extend(GroundTruthExpansion::from_durations(&p, &d).expect("valid").ids);
        }
        ref_ids.truncate(self.cfg.ref_frames);
        let reference = self.codec.encode_expansion(&ref_ids, speaker);

        Utterance { id: id.into(), speaker, phonemes, durations, lips, target, reference, gt_expansion: gt }
    }

    pub fn corpus(&self, seed: u64, count: usize) -> Vec<Utterance> {
        (0..count as u64).map(|i| self.utterance(utterance_seed(seed, i), format!("utt{i:05}"))).collect()
    }
}

/// Single utterance from a seed and config.
pub fn gen_utterance(seed: u64, cfg: &CorpusConfig) -> Result<Utterance> {
    Ok(Synthesizer::new(cfg)?.utterance(seed, format!("seed{seed}")))
}

pub fn generate_corpus(seed: u64, count: usize, cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    Ok(Synthesizer::new(cfg)?.corpus(seed, count))
}

/// Splits off the last `held_out` utterances.
pub fn split_corpus(mut corpus: Vec<Utterance>, held_out: usize) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    if held_out > corpus.len() {
        return Err(DataError::Argument(format!("cannot hold out {held_out} of {} utterances", corpus.len())));
    }
    let tail = corpus.split_off(corpus.len() - held_out);
    Ok((corpus, tail))
}

/// Checks the cross-field invariants of an utterance against `cfg`.
pub(crate) fn check_utterance(u: &Utterance, cfg: &CorpusConfig) -> Result<()> {
    let bad = |m: String| Err(DataError::Format(format!("utterance {}: {m}", u.id)));
    let t_v = u.durations.iter().sum::<usize>();
    if u.speaker >= cfg.n_speakers {
        return bad(format!("speaker {} >= {}", u.speaker, cfg.n_speakers));
    }
    if u.phonemes.is_empty() || u.phonemes.ids().iter().any(|&p| p >= cfg.vocab_p) {
        return bad("phoneme ids out of range or empty".into());
    }
    if u.lips.frames != t_v || u.target.frames() != t_v || u.gt_expansion.len() != t_v {
        return bad(format!(
            "lengths disagree: durations {t_v}, lips {}, target {}",
            u.lips.frames,
            u.target.frames()
        ));
    }
    if u.lips.dim != cfg.lip_dim || u.lips.data.len() != u.lips.frames * u.lips.dim {
        return bad("lip matrix shape mismatch".into());
    }
    if u.lips.data.iter().any(|x| !x.is_finite()) {
        return bad("non-finite lip feature".into());
    }
    for grid in [&u.target, &u.reference] {
        if grid.n_q() != cfg.n_q || grid.vocab() != cfg.codebook_size {
            return bad("token grid does not match codec shape".into());
        }
    }
    if !u.gt_expansion.is_monotone_expansion_of(&u.phonemes) {
        return bad("ground-truth expansion is not monotone".into());
    }
    Ok(())
}
