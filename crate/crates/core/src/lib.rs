//! Toy-scale visual text-to-speech: a text-video aligner that expands phonemes to
//! lip-frame rate, and a global/local transformer that generates hierarchical
//! codec tokens from the expanded phonemes plus a reference voice prompt.

pub mod aligner;
pub mod data;
pub mod decoder;
pub mod eval;
pub mod pipeline;
pub mod tensor;
#[cfg(test)]
mod testutil;
