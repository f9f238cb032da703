use crate::data::{LipEmbeds, TokenGrid};
use crate::tensor::{Result, TensorError};

/// Segment a step belongs to; selects a learned region embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Phoneme = 0,
    Lip = 1,
    Reference = 2,
    Target = 3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// A phoneme id replicated across all codebook slots.
    Phoneme(usize),
    /// Lip frame index into the prompt's lip matrix.
    Lip(usize),
    Separator,
    Bos,
    /// One token per codebook level.
    Frame(Vec<u32>),
}

/// Decoder input: `phonemes ++ lips? ++ SEP ++ reference ++ BOS ++ target`.
///
/// Positions restart in every segment. Phoneme step `j` and the target step
/// that predicts frame `j` share position `j`, which ties expanded phonemes
/// to the frames they describe.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    phonemes: Vec<usize>,
    lips: Option<LipEmbeds>,
    reference: Vec<Vec<u32>>,
    target: Vec<Vec<u32>>,
    eos: bool,
}

impl PromptSequence {
    /// `target` frames are appended for teacher forcing; with `eos` an
    /// all-EOS frame (`eos_token` at every level) closes the target.
    pub fn new(
        phonemes: &[usize],
        lips: Option<&LipEmbeds>,
        reference: &TokenGrid,
        target: Option<&TokenGrid>,
        eos: Option<u32>,
    ) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(TensorError::invalid("assemble_prompt", "no phoneme steps"));
        }
        if let Some(t) = target {
            if t.n_q() != reference.n_q() {
                return Err(TensorError::invalid("assemble_prompt", "target and reference level counts differ"));
            }
        }
        let mut target_frames = target.map(TokenGrid::to_frames).unwrap_or_default();
        if let (Some(tok), Some(_)) = (eos, target) {
            target_frames.push(vec![tok; reference.n_q()]);
        }
        Ok(Self {
            phonemes: phonemes.to_vec(),
            lips: lips.cloned(),
            reference: reference.to_frames(),
            target: target_frames,
            eos: eos.is_some(),
        })
    }

    pub fn phonemes(&self) -> &[usize] {
        &self.phonemes
    }

    pub fn lips(&self) -> Option<&LipEmbeds> {
        self.lips.as_ref()
    }

    pub fn reference(&self) -> &[Vec<u32>] {
        &self.reference
    }

    /// Target frames, including the closing EOS frame when present.
    pub fn target(&self) -> &[Vec<u32>] {
        &self.target
    }

    /// Whether the model predicts end of speech (EOS column is part of the output space).
    pub fn has_eos(&self) -> bool {
        self.eos
    }

    fn lip_len(&self) -> usize {
        self.lips.as_ref().map_or(0, |l| l.frames)
    }

    pub fn bos_index(&self) -> usize {
        self.phonemes.len() + self.lip_len() + 1 + self.reference.len()
    }

    pub fn len(&self) -> usize {
        self.bos_index() + 1 + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> Vec<Step> {
        let mut s: Vec<Step> = self.phonemes.iter().map(|&p| Step::Phoneme(p)).collect();
        s.extend((0..self.lip_len()).map(Step::Lip));
        s.push(Step::Separator);
        s.extend(self.reference.iter().cloned().map(Step::Frame));
        s.push(Step::Bos);
        s.extend(self.target.iter().cloned().map(Step::Frame));
        s
    }

    pub fn regions(&self) -> Vec<Region> {
        let mut r = vec![Region::Phoneme; self.phonemes.len()];
        r.extend(std::iter::repeat(Region::Lip).take(self.lip_len()));
        r.extend(std::iter::repeat(Region::Reference).take(1 + self.reference.len()));
        r.extend(std::iter::repeat(Region::Target).take(1 + self.target.len()));
        r
    }

    pub fn positions(&self) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.phonemes.len()).collect();
        p.extend(0..self.lip_len());
        p.extend(0..=self.reference.len());
        p.extend(0..=self.target.len());
        p
    }

    /// True on steps whose tokens are predicted and scored.
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.bos_index() + 1];
        m.extend(std::iter::repeat(true).take(self.target.len()));
        m
    }
}

/// Full-variant layout: expanded phonemes, reference prompt, and optional target.
pub fn assemble_prompt(p_exp: &[usize], reference: &TokenGrid, target: Option<&TokenGrid>) -> Result<PromptSequence> {
    PromptSequence::new(p_exp, None, reference, target, None)
}
