//! Toy-scale text and vision feature extractors.
//!
//! Stand-ins for the pretrained encoders a production system would use:
//! a corpus-built tokenizer feeding a BERT-shaped text encoder, and a
//! patch-based vision encoder. Same shapes, random init, trained end to
//! end with the rest of the pipeline.

pub mod image;
pub mod text;
pub mod vision;
pub mod vocab;

pub use image::{load_image, ImageTensor};
pub use text::encode_text;
pub use vision::encode_image;
pub use vocab::{build_vocab, tokenize, TokenSeq, Vocab};

use crate::error::{Error, Result};

/// Architectural hyperparameters shared by the text and vision encoders.
///
/// Desk-scale defaults keep gradient checks and overfit runs fast on CPU;
/// the widths also accept the production value 768.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Text encoder width (columns of H_t).
    pub d_t: usize,
    /// Vision encoder width (columns of H_v).
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Images are `3 x image_size x image_size`.
    pub image_size: usize,
    pub patch_size: usize,
    pub ffn_multiplier: usize,
    /// Embedding dropout applied after the token/patch + position sums.
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_t: 64,
            d_v: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            image_size: 64,
            patch_size: 16,
            ffn_multiplier: 4,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0 || self.d_v == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_t {} not divisible by heads {}",
                self.d_t, self.heads
            )));
        }
        if !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_v {} not divisible by heads {}",
                self.d_v, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// N = (H/p) * (W/p) for square images.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }
}
