//! Miniature open-vocabulary detector with explicit image/text fusion layers.
//!
//! Pipeline: frozen patch projection and image encoder produce grid tokens
//! and a unit global embedding; the class sentence is embedded and encoded
//! (optionally behind a learned prompt); `fusion_layers` rounds of self- and
//! cross-attention mix the two streams, with optional low-rank updates on the
//! cross-attention projections; a query decoder emits boxes and per-class
//! logits by matching queries against span-pooled text embeddings.

mod loss;
mod matching;
mod model;
mod sentence;

pub use loss::{
    detection_loss, focal_term, giou_loss_terms, l1_loss_terms, matched_detection_loss, LossBreakdown,
    LossWeights,
};
pub use matching::{hungarian_match, match_cost_matrix, Assignment};
pub use model::{
    lora_param_name, projection_slots, DecoderOutput, Detector, MemoryVars, TextFeatures, Weights,
    PROMPT_PARAM,
};
pub use sentence::{build_class_sentence, ClassSentence, Vocab, SEPARATOR};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BBox;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("input error: {0}")]
    Input(String),
    #[error("unknown token `{0}`")]
    Vocab(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub fusion_layers: usize,
    pub n_queries: usize,
    /// Patch grid (rows, cols).
    pub image_grid: (usize, usize),
    /// Pixels per patch side; the expected image is `grid * patch_size` square pixels.
    pub patch_size: usize,
    pub prompt_length: usize,
    pub lora_rank: usize,
    /// Number of leading fusion layers carrying interaction memory.
    pub lora_layers: usize,
    pub tie_qk: bool,
    pub image_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub text_ffn_dim: usize,
    pub decoder_ffn_dim: usize,
    pub use_pos_enc: bool,
    pub vocab: Vec<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            fusion_layers: 3,
            n_queries: 12,
            image_grid: (12, 12),
            patch_size: 4,
            prompt_length: 10,
            lora_rank: 8,
            lora_layers: 3,
            tie_qk: true,
            image_layers: 1,
            text_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            text_ffn_dim: 128,
            decoder_ffn_dim: 6144,
            use_pos_enc: true,
            vocab: Vec::new(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DetectorError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.lora_layers > self.fusion_layers {
            return bad(format!(
                "lora_layers {} exceeds fusion_layers {}",
                self.lora_layers, self.fusion_layers
            ));
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1".into());
        }
        if self.lora_rank > self.d_model {
            return bad(format!(
                "lora_rank {} exceeds d_model {}",
                self.lora_rank, self.d_model
            ));
        }
        if self.n_queries == 0 || self.image_grid.0 == 0 || self.image_grid.1 == 0 {
            return bad("n_queries and image grid must be positive".into());
        }
        if self.n_queries > self.num_tokens() {
            return bad(format!(
                "n_queries {} exceeds the {} image tokens",
                self.n_queries,
                self.num_tokens()
            ));
        }
        if self.patch_size == 0 || self.ffn_dim == 0 || self.text_ffn_dim == 0 || self.decoder_ffn_dim == 0 {
            return bad("patch size and feed-forward widths must be positive".into());
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (
            self.image_grid.0 * self.patch_size,
            self.image_grid.1 * self.patch_size,
        )
    }

    pub fn num_tokens(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// An RGB image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    /// Row-major `(y, x, channel)` values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<String>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(DetectorError::Input(format!(
                "pixel buffer of {} values does not match {height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            boxes: Vec::new(),
            labels: Vec::new(),
        })
    }

    pub fn with_annotations(mut self, boxes: Vec<BBox>, labels: Vec<String>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(DetectorError::Input("boxes and labels differ in length".into()));
        }
        if let Some(b) = boxes.iter().find(|b| !b.is_normalized()) {
            return Err(DetectorError::Input(format!("box {b:?} leaves the unit square")));
        }
        self.boxes = boxes;
        self.labels = labels;
        Ok(self)
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }
}

/// Grid tokens and the unit-norm global embedding of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub tokens: crate::tensor::Tensor,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_name: String,
    pub score: f64,
}
