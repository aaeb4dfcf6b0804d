//! Run configuration: defaults, a flat JSON config file, environment
//! overrides (`STANCEFUSE_<KEY>`) and command-line flags, in ascending
//! precedence. Unknown keys are rejected wherever they come from.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use stancefuse_core::context::{BackendKind, ContextConfig};
use stancefuse_core::dataset::Split;
use stancefuse_core::encoders::EncoderConfig;
use stancefuse_core::error::{Error, Result};
use stancefuse_core::experiment::ExperimentConfig;
use stancefuse_core::fusion::train::TrainConfig;
use stancefuse_core::jtmo::{JtmoConfig, Pooling};
use stancefuse_core::pipeline::{AblationVariant, PipelineConfig};

pub const ENV_PREFIX: &str = "STANCEFUSE_";

/// The flat configuration surface. Field names are the config file keys
/// and (uppercased) the environment variable suffixes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    // paths
    pub manifest: Option<String>,
    pub image_root: Option<String>,
    pub checkpoint: Option<String>,
    pub cache: Option<String>,

    // encoders
    pub d_t: usize,
    pub d_v: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub ffn_multiplier: usize,
    pub encoder_dropout: f64,

    // joint text modelling
    pub jtmo_width: usize,
    pub jtmo_layers: usize,
    pub jtmo_heads: usize,
    pub jtmo_dropout: f64,
    pub jtmo_pooling: Pooling,
    pub share_embeddings: bool,

    // fusion + classifier
    pub fusion_d: usize,
    pub fusion_dropout: f64,
    pub pre_fusion_dropout: bool,
    pub pooling: Pooling,
    pub freeze_encoders: bool,

    // optimization
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,

    // context extraction
    pub backend: BackendKind,
    pub external_url: Option<String>,
    pub timeout_secs: u64,
    pub fallback_to_stub: bool,
    pub summary_sentences: usize,
    pub summarize_prompt: String,
    pub caption_prompt: String,

    // run shape
    pub variant: AblationVariant,
    pub min_freq: usize,
    pub eval_split: String,
    pub emit_roc: bool,
}

impl Default for CliConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let jtmo = JtmoConfig::default();
        let pipe = PipelineConfig::default();
        let train = TrainConfig::default();
        let ctx = ContextConfig::default();
        CliConfig {
            manifest: None,
            image_root: None,
            checkpoint: None,
            cache: None,
            d_t: enc.d_t,
            d_v: enc.d_v,
            encoder_layers: enc.layers,
            heads: enc.heads,
            max_len: enc.max_len,
            image_size: enc.image_size,
            patch_size: enc.patch_size,
            ffn_multiplier: enc.ffn_multiplier,
            encoder_dropout: enc.dropout_p,
            jtmo_width: jtmo.width,
            jtmo_layers: jtmo.layers,
            jtmo_heads: jtmo.heads,
            jtmo_dropout: jtmo.dropout_p,
            jtmo_pooling: jtmo.pooling,
            share_embeddings: jtmo.share_embeddings,
            fusion_d: pipe.fusion_d,
            fusion_dropout: pipe.fusion_dropout_p,
            pre_fusion_dropout: pipe.pre_fusion_dropout,
            pooling: pipe.pooling,
            freeze_encoders: pipe.freeze_encoders,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            seed: train.seed,
            backend: ctx.backend,
            external_url: ctx.external_url,
            timeout_secs: ctx.timeout_secs,
            fallback_to_stub: ctx.fallback_to_stub,
            summary_sentences: ctx.summary_sentences,
            summarize_prompt: ctx.summarize_prompt,
            caption_prompt: ctx.caption_prompt,
            variant: AblationVariant::Full,
            min_freq: 1,
            eval_split: "test".to_string(),
            emit_roc: false,
        }
    }
}

impl CliConfig {
    pub fn to_experiment(&self) -> Result<ExperimentConfig> {
        let xc = ExperimentConfig {
            pipeline: PipelineConfig {
                encoder: EncoderConfig {
                    d_t: self.d_t,
                    d_v: self.d_v,
                    layers: self.encoder_layers,
                    heads: self.heads,
                    max_len: self.max_len,
                    image_size: self.image_size,
                    patch_size: self.patch_size,
                    ffn_multiplier: self.ffn_multiplier,
                    dropout_p: self.encoder_dropout,
                },
                jtmo: JtmoConfig {
                    width: self.jtmo_width,
                    layers: self.jtmo_layers,
                    heads: self.jtmo_heads,
                    max_len: self.max_len,
                    ffn_multiplier: self.ffn_multiplier,
                    dropout_p: self.jtmo_dropout,
                    pooling: self.jtmo_pooling,
                    share_embeddings: self.share_embeddings,
                },
                fusion_d: self.fusion_d,
                fusion_dropout_p: self.fusion_dropout,
                pre_fusion_dropout: self.pre_fusion_dropout,
                pooling: self.pooling,
                freeze_encoders: self.freeze_encoders,
            },
            train: TrainConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                epochs: self.epochs,
                seed: self.seed,
                ..TrainConfig::default()
            },
            variant: self.variant,
            context: ContextConfig {
                backend: self.backend,
                external_url: self.external_url.clone(),
                timeout_secs: self.timeout_secs,
                fallback_to_stub: self.fallback_to_stub,
                summary_sentences: self.summary_sentences,
                summarize_prompt: self.summarize_prompt.clone(),
                caption_prompt: self.caption_prompt.clone(),
            },
            min_freq: self.min_freq,
        };
        xc.pipeline.validate()?;
        xc.train.validate()?;
        Ok(xc)
    }

    pub fn eval_split(&self) -> Result<Split> {
        Split::parse(&self.eval_split).ok_or_else(|| {
            Error::Config(format!(
                "eval_split must be train|dev|test, got '{}'",
                self.eval_split
            ))
        })
    }

    pub fn manifest_path(&self) -> Result<PathBuf> {
        self.manifest
            .as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("no manifest configured (--manifest or config)".into()))
    }

    /// Image paths resolve against image_root, defaulting to the
    /// manifest's directory.
    pub fn image_root_path(&self) -> Result<PathBuf> {
        if let Some(root) = &self.image_root {
            return Ok(PathBuf::from(root));
        }
        let manifest = self.manifest_path()?;
        Ok(manifest
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(".")))
    }

    pub fn cache_path(&self) -> Option<PathBuf> {
        self.cache.as_ref().map(PathBuf::from)
    }
}

fn merge_object(base: &mut Value, overlay: Value) {
    if let (Value::Object(base_map), Value::Object(overlay_map)) = (base, overlay) {
        for (k, v) in overlay_map {
            base_map.insert(k, v);
        }
    }
}

/// Parse an env/flag string into the loosest JSON value it matches, so
/// numbers and booleans type-check against the config fields.
fn loose_value(raw: &str) -> Value {
    match serde_json::from_str::<Value>(raw) {
        Ok(v @ (Value::Number(_) | Value::Bool(_) | Value::Null)) => v,
        _ => Value::String(raw.to_string()),
    }
}

/// Assemble the configuration: defaults < file < environment < flags.
pub fn resolve_config(
    file: Option<&std::path::Path>,
    flag_overrides: &[(String, Value)],
    env: impl Iterator<Item = (String, String)>,
) -> Result<CliConfig> {
    let mut merged = serde_json::to_value(CliConfig::default()).expect("defaults serialize");
    let known: Vec<String> = merged
        .as_object()
        .expect("config is an object")
        .keys()
        .cloned()
        .collect();

    if let Some(path) = file {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("{}: not valid JSON: {e}", path.display())))?;
        if !parsed.is_object() {
            return Err(Error::Config(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        }
        merge_object(&mut merged, parsed);
    }

    for (key, value) in env {
        let Some(suffix) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let field = suffix.to_ascii_lowercase();
        if !known.contains(&field) {
            return Err(Error::Config(format!(
                "unknown configuration key from environment: {key}"
            )));
        }
        merge_object(
            &mut merged,
            serde_json::json!({ field: loose_value(&value) }),
        );
    }

    for (key, value) in flag_overrides {
        merge_object(&mut merged, serde_json::json!({ key: value }));
    }

    serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}
