//! JSON-lines dataset files: one header line, then one utterance per line.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::corpus::check_utterance;
use super::{CorpusConfig, DataError, GroundTruthExpansion, LipEmbeds, PhonemeSeq, Result, TokenGrid, Utterance};

pub const CORPUS_FORMAT: &str = "vslm-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub config: CorpusConfig,
    pub seed: u64,
    pub count: usize,
}

impl CorpusHeader {
    pub fn new(config: CorpusConfig, seed: u64, count: usize) -> Self {
        Self { format: CORPUS_FORMAT.into(), version: CORPUS_VERSION, config, seed, count }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    speaker: usize,
    phonemes: Vec<usize>,
    durations: Vec<usize>,
    lip_frames: usize,
    lip_dim: usize,
    fps: f64,
    /// Little-endian f32, base64.
    lips: String,
    target: Vec<Vec<u32>>,
    reference: Vec<Vec<u32>>,
}

fn encode_f32(data: &[f32]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = B64.decode(text).map_err(|e| DataError::Format(format!("bad base64 lip data: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Format(format!("lip data of {} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl Record {
    fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            speaker: u.speaker,
            phonemes: u.phonemes.0.clone(),
            durations: u.durations.clone(),
            lip_frames: u.lips.frames,
            lip_dim: u.lips.dim,
            fps: u.lips.fps,
            lips: encode_f32(&u.lips.data),
            target: u.target.to_frames(),
            reference: u.reference.to_frames(),
        }
    }

    fn into_utterance(self, cfg: &CorpusConfig) -> Result<Utterance> {
        let phonemes = PhonemeSeq::new(self.phonemes, cfg.vocab_p)?;
        let gt_expansion = GroundTruthExpansion::from_durations(&phonemes, &self.durations)?;
        let data = decode_f32(&self.lips)?;
        if data.len() != self.lip_frames * self.lip_dim {
            return Err(DataError::Format(format!(
                "utterance {}: {} lip values for {}x{}",
                self.id,
                data.len(),
                self.lip_frames,
                self.lip_dim
            )));
        }
        let lips = LipEmbeds { frames: self.lip_frames, dim: self.lip_dim, fps: self.fps, data };
        let target = TokenGrid::from_frames(cfg.n_q, cfg.codebook_size, &self.target)?;
        let reference = TokenGrid::from_frames(cfg.n_q, cfg.codebook_size, &self.reference)?;
        let u = Utterance {
            id: self.id,
            speaker: self.speaker,
            phonemes,
            durations: self.durations,
            lips,
            target,
            reference,
            gt_expansion,
        };
        check_utterance(&u, cfg)?;
        Ok(u)
    }
}

pub fn write_corpus<W: Write>(mut out: W, header: &CorpusHeader, utterances: &[Utterance]) -> Result<()> {
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for u in utterances {
        serde_json::to_writer(&mut out, &Record::from_utterance(u))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<(CorpusHeader, Vec<Utterance>)> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| DataError::Format("empty dataset file".into()))??;
    let header: CorpusHeader =
        serde_json::from_str(&first).map_err(|e| DataError::Format(format!("bad header line: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(DataError::Format(format!(
            "unsupported dataset {} v{} (expected {CORPUS_FORMAT} v{CORPUS_VERSION})",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let mut utterances = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record =
            serde_json::from_str(&line).map_err(|e| DataError::Format(format!("line {}: {e}", n + 2)))?;
        utterances.push(record.into_utterance(&header.config)?);
    }
    if utterances.len() != header.count {
        return Err(DataError::Format(format!(
            "header announces {} utterances, file has {}",
            header.count,
            utterances.len()
        )));
    }
    Ok((header, utterances))
}
