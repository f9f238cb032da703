//! Objective metrics over token grids and their decoded feature sequences.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Codec, FeatureDecoder, TokenGrid};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch in {op}: {left} vs {right}")]
    Length { op: &'static str, left: usize, right: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("feature decoding failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// Fraction of frames whose predicted phoneme equals the ground truth.
pub fn frame_alignment_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length { op: "frame_alignment_accuracy", left: pred.len(), right: gt.len() });
    }
    if gt.is_empty() {
        return Err(MetricError::Empty("frame_alignment_accuracy"));
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    pub cost: f64,
    /// Matched `(i, j)` pairs from `(0, 0)` to `(T1 - 1, T2 - 1)`.
    pub path: Vec<(usize, usize)>,
}

/// Dynamic time warping with steps (1,0), (0,1), (1,1), anchored at both ends.
///
/// Backtracking prefers the diagonal, then advancing `x`, then advancing `y`.
pub fn dtw<F>(x: &[&[f64]], y: &[&[f64]], cost: F) -> Result<DtwResult>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let (n, m) = (x.len(), y.len());
    if n == 0 || m == 0 {
        return Err(MetricError::Empty("dtw"));
    }
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let c = cost(x[i], y[j]);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = c + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let (d, u, l) = (acc[at(i - 1, j - 1)], acc[at(i - 1, j)], acc[at(i, j - 1)]);
            if d <= u && d <= l {
                (i - 1, j - 1)
            } else if u <= l {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwResult { cost: acc[at(n - 1, m - 1)], path })
}

/// Mel-cepstral-distortion style frame distance, `(10 / ln 10) * sqrt(2 * sum (x - y)^2)`.
pub fn mcd_frame_cost(x: &[f64], y: &[f64]) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 / std::f64::consts::LN_10 * (2.0 * sq).sqrt()
}

fn rows(t: &Tensor<f64>) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row(r)).collect()
}

/// Mean MCD frame cost along the optimal warping path of two feature sequences.
pub fn mcd_dtw_features(gen: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    if gen.cols() != gt.cols() {
        return Err(MetricError::Shape { op: "mcd_dtw", left: gen.shape().to_vec(), right: gt.shape().to_vec() });
    }
    let res = dtw(&rows(gen), &rows(gt), mcd_frame_cost)?;
    Ok(res.cost / res.path.len() as f64)
}

fn decode(dec: &FeatureDecoder, grid: &TokenGrid) -> Result<Tensor<f64>> {
    dec.decode(grid).map_err(|e| MetricError::Decode(e.to_string()))
}

pub fn mcd_dtw(dec: &FeatureDecoder, gen: &TokenGrid, gt: &TokenGrid) -> Result<f64> {
    mcd_dtw_features(&decode(dec, gen)?, &decode(dec, gt)?)
}

/// Length-ratio penalty `max(T_gen, T_gt) / min(T_gen, T_gt)`.
pub fn length_ratio(gen_len: usize, gt_len: usize) -> Result<f64> {
    if gen_len == 0 || gt_len == 0 {
        return Err(MetricError::Empty("length_ratio"));
    }
    Ok(gen_len.max(gt_len) as f64 / gen_len.min(gt_len) as f64)
}

/// MCD-DTW scaled by the speech-length ratio.
pub fn mcd_dtw_sl(dec: &FeatureDecoder, gen: &TokenGrid, gt: &TokenGrid) -> Result<f64> {
    Ok(mcd_dtw(dec, gen, gt)? * length_ratio(gen.frames(), gt.frames())?)
}

/// Fraction of equal entries between two grids of identical shape.
pub fn token_accuracy(gen: &TokenGrid, oracle: &TokenGrid) -> Result<f64> {
    if gen.frames() != oracle.frames() || gen.n_q() != oracle.n_q() {
        return Err(MetricError::Shape {
            op: "token_accuracy",
            left: vec![gen.frames(), gen.n_q()],
            right: vec![oracle.frames(), oracle.n_q()],
        });
    }
    padded_token_accuracy(gen, oracle)
}

/// Token accuracy for grids of possibly different length: matches over the
/// common prefix, divided by the longer grid's token count.
pub fn padded_token_accuracy(gen: &TokenGrid, oracle: &TokenGrid) -> Result<f64> {
    if gen.n_q() != oracle.n_q() {
        return Err(MetricError::Shape {
            op: "token_accuracy",
            left: vec![gen.frames(), gen.n_q()],
            right: vec![oracle.frames(), oracle.n_q()],
        });
    }
    let total = gen.frames().max(oracle.frames()) * gen.n_q();
    if total == 0 {
        return Err(MetricError::Empty("token_accuracy"));
    }
    let common = gen.frames().min(oracle.frames()) * gen.n_q();
    let hits = gen.tokens()[..common].iter().zip(&oracle.tokens()[..common]).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / total as f64)
}

/// Fraction of frames whose level-0 token is what the codec emits for the
/// frame's ground-truth phoneme spoken by `speaker`; frames beyond either
/// length count as misses.
pub fn speaker_token_accuracy(codec: &Codec, gen: &TokenGrid, gt_phonemes: &[usize], speaker: usize) -> Result<f64> {
    let total = gen.frames().max(gt_phonemes.len());
    if total == 0 {
        return Err(MetricError::Empty("speaker_token_accuracy"));
    }
    let hits = gt_phonemes
        .iter()
        .zip(gen.level(0))
        .filter(|(&p, tok)| codec.encode(p, speaker, 0).map(|t| t == *tok).unwrap_or(false))
        .count();
    Ok(hits as f64 / total as f64)
}

/// `|T_gen - T_gt| / T_gt`.
pub fn duration_error(gen_len: usize, gt_len: usize) -> Result<f64> {
    if gt_len == 0 {
        return Err(MetricError::Empty("duration_error"));
    }
    Ok(gen_len.abs_diff(gt_len) as f64 / gt_len as f64)
}

/// Metrics of one generated utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    /// Absent for variants without an aligner.
    pub alignment_frame_accuracy: Option<f64>,
    pub token_accuracy: f64,
    pub speaker_token_accuracy: f64,
    pub mcd_dtw: f64,
    pub mcd_dtw_sl: f64,
    pub duration_error: f64,
    pub frames_generated: usize,
    pub frames_target: usize,
}

/// Everything needed to score one generation.
pub struct Scored<'a> {
    pub id: &'a str,
    pub generated: &'a TokenGrid,
    pub target: &'a TokenGrid,
    pub gt_phonemes: &'a [usize],
    pub speaker: usize,
    pub predicted_expansion: Option<&'a [usize]>,
}

pub fn score_utterance(codec: &Codec, dec: &FeatureDecoder, s: &Scored<'_>) -> Result<UtteranceMetrics> {
    let alignment_frame_accuracy =
        s.predicted_expansion.map(|p| frame_alignment_accuracy(p, s.gt_phonemes)).transpose()?;
    Ok(UtteranceMetrics {
        id: s.id.to_string(),
        alignment_frame_accuracy,
        token_accuracy: padded_token_accuracy(s.generated, s.target)?,
        speaker_token_accuracy: speaker_token_accuracy(codec, s.generated, s.gt_phonemes, s.speaker)?,
        mcd_dtw: mcd_dtw(dec, s.generated, s.target)?,
        mcd_dtw_sl: mcd_dtw_sl(dec, s.generated, s.target)?,
        duration_error: duration_error(s.generated.frames(), s.target.frames())?,
        frames_generated: s.generated.frames(),
        frames_target: s.target.frames(),
    })
}

/// Means over a set of utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub alignment_frame_accuracy: Option<f64>,
    pub token_accuracy: f64,
    pub speaker_token_accuracy: f64,
    pub mcd_dtw: f64,
    pub mcd_dtw_sl: f64,
    pub duration_error: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn aggregate(items: &[UtteranceMetrics]) -> Result<Self> {
        if items.is_empty() {
            return Err(MetricError::Empty("metric report"));
        }
        let n = items.len() as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let align: Option<Vec<f64>> = items.iter().map(|m| m.alignment_frame_accuracy).collect();
        Ok(Self {
            alignment_frame_accuracy: align.map(|v| v.iter().sum::<f64>() / n),
            token_accuracy: mean(|m| m.token_accuracy),
            speaker_token_accuracy: mean(|m| m.speaker_token_accuracy),
            mcd_dtw: mean(|m| m.mcd_dtw),
            mcd_dtw_sl: mean(|m| m.mcd_dtw_sl),
            duration_error: mean(|m| m.duration_error),
            count: items.len(),
        })
    }
}

pub const CSV_HEADER: &str = "id,alignment_frame_accuracy,token_accuracy,speaker_token_accuracy,mcd_dtw,mcd_dtw_sl,duration_error,frames_generated,frames_target";

pub fn write_csv<W: Write>(mut out: W, items: &[UtteranceMetrics]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for m in items {
        let align = m.alignment_frame_accuracy.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.id,
            align,
            m.token_accuracy,
            m.speaker_token_accuracy,
            m.mcd_dtw,
            m.mcd_dtw_sl,
            m.duration_error,
            m.frames_generated,
            m.frames_target
        )?;
    }
    out.flush()?;
    Ok(())
}
