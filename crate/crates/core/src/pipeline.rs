//! Whole-pipeline assembly: ablation variants, the combined model
//! configuration, parameter initialization per variant, and example
//! preparation (context extraction, vocabulary, tokenization, images).
//!
//! The source text for a frame-transcript dataset is the video topic;
//! the transcript sentence plays the reply role.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::ContextService;
use crate::dataset::{ExampleRecord, StanceLabel};
use crate::encoders::image::{load_image, ImageTensor};
use crate::encoders::text::init_text_params;
use crate::encoders::vision::init_vision_params;
use crate::encoders::vocab::{build_vocab, tokenize, TokenSeq, Vocab};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::jtmo::{init_jtmo_params, JtmoConfig, Pooling};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// One pipeline wiring: the full model or one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    WoJtmo,
    WoSummarization,
    WoCaptioning,
    WoFusion,
}

pub const ALL_VARIANTS: [AblationVariant; 5] = [
    AblationVariant::Full,
    AblationVariant::WoJtmo,
    AblationVariant::WoSummarization,
    AblationVariant::WoCaptioning,
    AblationVariant::WoFusion,
];

impl AblationVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::WoJtmo => "wo_jtmo",
            AblationVariant::WoSummarization => "wo_summarization",
            AblationVariant::WoCaptioning => "wo_captioning",
            AblationVariant::WoFusion => "wo_fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ALL_VARIANTS.iter().copied().find(|v| v.as_str() == s)
    }

    pub fn uses_jtmo(self) -> bool {
        self != AblationVariant::WoJtmo
    }

    pub fn uses_projection(self) -> bool {
        self != AblationVariant::WoFusion
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub jtmo: JtmoConfig,
    /// Shared projection width d.
    pub fusion_d: usize,
    /// Dropout between fusion and the classifier head.
    pub fusion_dropout_p: f64,
    /// Optional second dropout on each projected vector before fusion.
    pub pre_fusion_dropout: bool,
    /// How H_t and H_v are pooled before projection.
    pub pooling: Pooling,
    /// Leave text/vision encoder weights out of optimizer updates.
    pub freeze_encoders: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            jtmo: JtmoConfig::default(),
            fusion_d: 64,
            fusion_dropout_p: 0.1,
            pre_fusion_dropout: false,
            pooling: Pooling::Mean,
            freeze_encoders: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.jtmo.validate()?;
        if self.fusion_d == 0 {
            return Err(Error::Config("fusion_d must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fusion_dropout_p) {
            return Err(Error::Config("fusion_dropout_p must be in [0, 1)".into()));
        }
        if self.jtmo.share_embeddings && self.jtmo.width != self.encoder.d_t {
            return Err(Error::Config(format!(
                "share_embeddings needs jtmo width {} == d_t {}",
                self.jtmo.width, self.encoder.d_t
            )));
        }
        Ok(())
    }

    /// Width of the classifier input under a variant: 3d for the full
    /// model, 2d without JTMo, raw D_t + D_v + D_j without projection.
    pub fn classifier_input_width(&self, variant: AblationVariant) -> usize {
        match variant {
            AblationVariant::WoJtmo => 2 * self.fusion_d,
            AblationVariant::WoFusion => self.encoder.d_t + self.encoder.d_v + self.jtmo.width,
            _ => 3 * self.fusion_d,
        }
    }
}

/// Create exactly the parameters a variant's graph uses.
pub fn init_params<S: Scalar>(
    cfg: &PipelineConfig,
    variant: AblationVariant,
    vocab_size: usize,
    seed: u64,
) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    init_text_params(&mut store, vocab_size, &cfg.encoder)?;
    init_vision_params(&mut store, &cfg.encoder)?;
    if variant.uses_jtmo() {
        init_jtmo_params(&mut store, vocab_size, &cfg.jtmo)?;
    }
    if variant.uses_projection() {
        let d = cfg.fusion_d;
        store.init_normal("fusion.proj.text.w", vec![cfg.encoder.d_t, d], 0.02)?;
        store.init_zeros("fusion.proj.text.b", vec![d])?;
        store.init_normal("fusion.proj.vision.w", vec![cfg.encoder.d_v, d], 0.02)?;
        store.init_zeros("fusion.proj.vision.b", vec![d])?;
        if variant.uses_jtmo() {
            store.init_normal("fusion.proj.joint.w", vec![cfg.jtmo.width, d], 0.02)?;
            store.init_zeros("fusion.proj.joint.b", vec![d])?;
        }
    }
    let width = cfg.classifier_input_width(variant);
    store.init_normal("fusion.cls.w", vec![width, 3], 0.02)?;
    store.init_zeros("fusion.cls.b", vec![3])?;
    Ok(store)
}

/// Context outputs for one record, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextOutputs {
    pub summary: String,
    pub caption: String,
}

/// Stage one over a record list. Without summarization the raw source
/// text passes through untouched and the summarizer is never invoked;
/// without captioning the caption is empty and the captioner idle.
pub fn extract_context(
    records: &[ExampleRecord],
    service: &ContextService,
    variant: AblationVariant,
    image_root: &Path,
) -> Result<Vec<ContextOutputs>> {
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let summary = if variant == AblationVariant::WoSummarization {
            r.topic.clone()
        } else {
            service.summarize(&r.topic, &r.topic)?.output
        };
        let caption = if variant == AblationVariant::WoCaptioning {
            String::new()
        } else {
            service.caption(&image_root.join(&r.image), &r.topic)?.output
        };
        out.push(ContextOutputs { summary, caption });
    }
    Ok(out)
}

/// Vocabulary over everything the encoders will see for these records.
pub fn build_pipeline_vocab(
    records: &[ExampleRecord],
    context: &[ContextOutputs],
    min_freq: usize,
) -> Result<Vocab> {
    let corpus = records
        .iter()
        .zip(context)
        .flat_map(|(r, c)| [r.transcript.clone(), c.summary.clone(), c.caption.clone()]);
    build_vocab(corpus, min_freq)
}

/// Everything the forward pass needs for one example.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub label: StanceLabel,
    pub summary: TokenSeq,
    pub reply: TokenSeq,
    pub caption: TokenSeq,
    pub image: ImageTensor<f64>,
}

pub fn prepare_examples(
    records: &[ExampleRecord],
    context: &[ContextOutputs],
    vocab: &Vocab,
    cfg: &PipelineConfig,
    image_root: &Path,
) -> Result<Vec<PreparedExample>> {
    if records.len() != context.len() {
        return Err(Error::contract("records/context length mismatch"));
    }
    let max_len = cfg.encoder.max_len;
    let mut out = Vec::with_capacity(records.len());
    for (r, c) in records.iter().zip(context) {
        let summary = tokenize(&c.summary, vocab, max_len);
        if summary.is_empty() {
            return Err(Error::data(format!(
                "record {}: summary tokenized to nothing",
                r.id
            )));
        }
        let reply = tokenize(&r.transcript, vocab, max_len);
        if reply.is_empty() {
            return Err(Error::data(format!(
                "record {}: transcript tokenized to nothing",
                r.id
            )));
        }
        let caption = tokenize(&c.caption, vocab, max_len);
        let image = load_image(&image_root.join(&r.image), &cfg.encoder)?;
        out.push(PreparedExample {
            id: r.id.clone(),
            label: r.label,
            summary,
            reply,
            caption,
            image,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in ALL_VARIANTS {
            assert_eq!(AblationVariant::parse(v.as_str()), Some(v));
        }
        assert_eq!(AblationVariant::parse("nope"), None);
    }

    #[test]
    fn classifier_widths_per_variant() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.classifier_input_width(AblationVariant::Full), 192);
        assert_eq!(cfg.classifier_input_width(AblationVariant::WoJtmo), 128);
        assert_eq!(cfg.classifier_input_width(AblationVariant::WoFusion), 192);
        assert_eq!(
            cfg.classifier_input_width(AblationVariant::WoSummarization),
            192
        );

        let production = PipelineConfig {
            fusion_d: 512,
            ..PipelineConfig::default()
        };
        assert_eq!(production.classifier_input_width(AblationVariant::Full), 1536);
    }

    #[test]
    fn census_full_has_projections_wo_fusion_does_not() {
        let cfg = PipelineConfig::default();
        let full: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 40, 1).unwrap();
        assert!(full.contains("fusion.proj.text.w"));
        assert!(full.contains("fusion.proj.vision.w"));
        assert!(full.contains("fusion.proj.joint.w"));
        assert!(full.contains("jtmo.embed.tok"));

        let wo_fusion: ParamStore<f64> =
            init_params(&cfg, AblationVariant::WoFusion, 40, 1).unwrap();
        assert!(!wo_fusion.names().any(|n| n.starts_with("fusion.proj.")));
        assert_eq!(
            wo_fusion.get("fusion.cls.w").unwrap().shape(),
            &[192, 3],
            "classifier over raw concatenation"
        );

        let wo_jtmo: ParamStore<f64> = init_params(&cfg, AblationVariant::WoJtmo, 40, 1).unwrap();
        assert!(!wo_jtmo.names().any(|n| n.starts_with("jtmo.")));
        assert!(!wo_jtmo.contains("fusion.proj.joint.w"));
        assert_eq!(wo_jtmo.get("fusion.cls.w").unwrap().shape(), &[128, 3]);
    }

    #[test]
    fn share_embeddings_width_check() {
        let cfg = PipelineConfig {
            jtmo: JtmoConfig {
                width: 32,
                share_embeddings: true,
                ..JtmoConfig::default()
            },
            ..PipelineConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
