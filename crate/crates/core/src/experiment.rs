//! End-to-end runs: training, evaluation, the five-variant ablation
//! study and single-example inference. The CLI is a thin shell over
//! these functions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::{ContextConfig, ContextService, ContextStats};
use crate::dataset::{ExampleRecord, Split};
use crate::encoders::vocab::Vocab;
use crate::error::{Error, Result};
use crate::fusion::train::{evaluate, train, EpochRecord, TrainConfig};
use crate::fusion::{forward, StancePrediction};
use crate::jtmo::build_joint_input;
use crate::metrics::{build_report, MetricsReport};
use crate::pipeline::{
    extract_context, build_pipeline_vocab, init_params, prepare_examples, AblationVariant,
    PipelineConfig, PreparedExample, ALL_VARIANTS,
};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub variant: AblationVariant,
    pub context: ContextConfig,
    /// Vocabulary frequency threshold.
    pub min_freq: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            variant: AblationVariant::Full,
            context: ContextConfig::default(),
            min_freq: 1,
        }
    }
}

/// Wiring facts recorded during a run, for ablation verification.
#[derive(Debug, Clone, Serialize)]
pub struct WiringStats {
    pub summarize_calls: u64,
    pub caption_calls: u64,
    /// Largest caption segment over all joint inputs actually built.
    pub max_caption_segment_tokens: usize,
    pub classifier_input_width: usize,
    pub param_tensors: usize,
    pub param_values: usize,
    pub has_projection_params: bool,
}

pub struct TrainedModel {
    pub store: ParamStore<f64>,
    pub vocab: Vocab,
    pub log: Vec<EpochRecord>,
    pub wiring: WiringStats,
}

fn split_records(records: &[ExampleRecord], split: Split) -> Vec<&ExampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

fn owned(records: &[&ExampleRecord]) -> Vec<ExampleRecord> {
    records.iter().map(|&r| r.clone()).collect()
}

fn wiring_stats(
    store: &ParamStore<f64>,
    prepared: &[PreparedExample],
    cfg: &PipelineConfig,
    variant: AblationVariant,
    context: &ContextStats,
) -> Result<WiringStats> {
    let mut max_caption = 0usize;
    if variant.uses_jtmo() {
        for ex in prepared {
            let joint = build_joint_input(&ex.reply, &ex.caption, cfg.jtmo.max_len)?;
            max_caption = max_caption.max(joint.caption_token_count());
        }
    }
    Ok(WiringStats {
        summarize_calls: context.summarize_calls,
        caption_calls: context.caption_calls,
        max_caption_segment_tokens: max_caption,
        classifier_input_width: store.get("fusion.cls.w")?.shape()[0],
        param_tensors: store.len(),
        param_values: store.num_values(),
        has_projection_params: store.names().any(|n| n.starts_with("fusion.proj.")),
    })
}

/// Stage one + vocabulary + tokenization + training on the train split,
/// with per-epoch dev evaluation when a dev split exists.
pub fn train_pipeline(
    records: &[ExampleRecord],
    image_root: &Path,
    xc: &ExperimentConfig,
    cache_path: Option<PathBuf>,
) -> Result<TrainedModel> {
    xc.pipeline.validate()?;
    let service = ContextService::new(xc.context.clone(), cache_path)?;

    let train_records = owned(&split_records(records, Split::Train));
    if train_records.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let dev_records = owned(&split_records(records, Split::Dev));

    let train_ctx = extract_context(&train_records, &service, xc.variant, image_root)?;
    let dev_ctx = extract_context(&dev_records, &service, xc.variant, image_root)?;

    let vocab = build_pipeline_vocab(&train_records, &train_ctx, xc.min_freq)?;
    let train_set = prepare_examples(&train_records, &train_ctx, &vocab, &xc.pipeline, image_root)?;
    let dev_set = prepare_examples(&dev_records, &dev_ctx, &vocab, &xc.pipeline, image_root)?;

    let mut store = init_params(&xc.pipeline, xc.variant, vocab.len(), xc.train.seed)?;
    let log = train(
        &mut store,
        &train_set,
        &dev_set,
        &xc.pipeline,
        xc.variant,
        &xc.train,
    )?;

    let wiring = wiring_stats(&store, &train_set, &xc.pipeline, xc.variant, &service.stats())?;
    Ok(TrainedModel {
        store,
        vocab,
        log,
        wiring,
    })
}

/// A checkpoint must match the parameter census its config implies.
pub fn check_checkpoint_compat(
    store: &ParamStore<f64>,
    cfg: &PipelineConfig,
    variant: AblationVariant,
    vocab_size: usize,
) -> Result<()> {
    let expected: ParamStore<f64> = init_params(cfg, variant, vocab_size, 0)?;
    let got: Vec<(&str, &[usize])> = store.iter().map(|(n, t)| (n, t.shape())).collect();
    let want: Vec<(&str, &[usize])> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
    if got != want {
        for (name, shape) in &want {
            match store.get(name) {
                Ok(t) if t.shape() == *shape => {}
                Ok(t) => {
                    return Err(Error::contract(format!(
                        "checkpoint/config shape mismatch for '{name}': checkpoint {:?}, config wants {shape:?}",
                        t.shape()
                    )))
                }
                Err(_) => {
                    return Err(Error::contract(format!(
                        "checkpoint is missing parameter '{name}' required by the config"
                    )))
                }
            }
        }
        return Err(Error::contract(
            "checkpoint carries parameters the config does not declare",
        ));
    }
    Ok(())
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub preds: Vec<usize>,
    pub truth: Vec<usize>,
    pub probs: Vec<[f64; 3]>,
    pub ids: Vec<String>,
}

/// Deterministic evaluation of a trained model on one split.
pub fn evaluate_pipeline(
    store: &ParamStore<f64>,
    vocab: &Vocab,
    records: &[ExampleRecord],
    split: Split,
    image_root: &Path,
    xc: &ExperimentConfig,
    cache_path: Option<PathBuf>,
) -> Result<EvalOutcome> {
    check_checkpoint_compat(store, &xc.pipeline, xc.variant, vocab.len())?;
    let service = ContextService::new(xc.context.clone(), cache_path)?;
    let eval_records = owned(&split_records(records, split));
    if eval_records.is_empty() {
        return Err(Error::data(format!("split '{split}' is empty")));
    }
    let ctx = extract_context(&eval_records, &service, xc.variant, image_root)?;
    let prepared = prepare_examples(&eval_records, &ctx, vocab, &xc.pipeline, image_root)?;
    let pass = evaluate(store, &prepared, &xc.pipeline, xc.variant)?;
    let truth: Vec<usize> = prepared.iter().map(|e| e.label.index()).collect();
    let report = build_report(&pass.preds, &truth, Some(&pass.probs))?;
    Ok(EvalOutcome {
        report,
        preds: pass.preds,
        truth,
        probs: pass.probs,
        ids: prepared.into_iter().map(|e| e.id).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub classifier_input_width: Option<usize>,
    pub summarize_calls: Option<u64>,
    pub max_caption_segment_tokens: Option<usize>,
    pub has_projection_params: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationStudy {
    pub rows: Vec<AblationRow>,
    pub eval_split: String,
}

impl AblationStudy {
    /// Tab-separated table, one row per variant.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\taccuracy\tprecision\trecall\tf1\tstatus\n");
        for row in &self.rows {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                row.variant,
                fmt(row.accuracy),
                fmt(row.precision),
                fmt(row.recall),
                fmt(row.f1),
                row.error.as_deref().unwrap_or("ok"),
            ));
        }
        out
    }
}

/// Train and evaluate all five variants with identical seeds and data,
/// so score differences are attributable to wiring alone. Per-variant
/// failures are recorded in the table instead of aborting the study.
pub fn ablation_study(
    records: &[ExampleRecord],
    image_root: &Path,
    base: &ExperimentConfig,
    eval_split: Split,
    cache_path: Option<PathBuf>,
) -> Result<(AblationStudy, Vec<Option<TrainedModel>>)> {
    let mut rows = Vec::with_capacity(ALL_VARIANTS.len());
    let mut models = Vec::with_capacity(ALL_VARIANTS.len());
    for variant in ALL_VARIANTS {
        let xc = ExperimentConfig {
            variant,
            ..base.clone()
        };
        let outcome = train_pipeline(records, image_root, &xc, cache_path.clone()).and_then(
            |model| {
                let eval = evaluate_pipeline(
                    &model.store,
                    &model.vocab,
                    records,
                    eval_split,
                    image_root,
                    &xc,
                    cache_path.clone(),
                )?;
                Ok((model, eval))
            },
        );
        match outcome {
            Ok((model, eval)) => {
                rows.push(AblationRow {
                    variant,
                    accuracy: Some(eval.report.accuracy),
                    precision: Some(eval.report.precision_weighted),
                    recall: Some(eval.report.recall_weighted),
                    f1: Some(eval.report.f1_weighted),
                    classifier_input_width: Some(model.wiring.classifier_input_width),
                    summarize_calls: Some(model.wiring.summarize_calls),
                    max_caption_segment_tokens: Some(model.wiring.max_caption_segment_tokens),
                    has_projection_params: Some(model.wiring.has_projection_params),
                    error: None,
                });
                models.push(Some(model));
            }
            Err(e) => {
                rows.push(AblationRow {
                    variant,
                    accuracy: None,
                    precision: None,
                    recall: None,
                    f1: None,
                    classifier_input_width: None,
                    summarize_calls: None,
                    max_caption_segment_tokens: None,
                    has_projection_params: None,
                    error: Some(e.to_string()),
                });
                models.push(None);
            }
        }
    }
    Ok((
        AblationStudy {
            rows,
            eval_split: eval_split.as_str().to_string(),
        },
        models,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct InferOutcome {
    pub label: String,
    pub probabilities: [f64; 3],
    pub summary: String,
    pub caption: String,
}

/// Context extraction + full forward for one ad-hoc example.
pub fn infer_one(
    store: &ParamStore<f64>,
    vocab: &Vocab,
    topic: &str,
    transcript: &str,
    image_path: &Path,
    xc: &ExperimentConfig,
    cache_path: Option<PathBuf>,
) -> Result<InferOutcome> {
    check_checkpoint_compat(store, &xc.pipeline, xc.variant, vocab.len())?;
    let record = ExampleRecord {
        id: "adhoc".into(),
        split: Split::Test,
        topic: topic.to_string(),
        transcript: transcript.to_string(),
        image: image_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("image")
            .to_string(),
        label: crate::dataset::StanceLabel::Neutral, // placeholder, unused
        video_id: "adhoc".into(),
    };
    let root = image_path.parent().unwrap_or_else(|| Path::new("."));
    let service = ContextService::new(xc.context.clone(), cache_path)?;
    let ctx = extract_context(std::slice::from_ref(&record), &service, xc.variant, root)?;
    let prepared = prepare_examples(
        std::slice::from_ref(&record),
        &ctx,
        vocab,
        &xc.pipeline,
        root,
    )?;
    let prediction: StancePrediction = forward(store, &prepared[0], &xc.pipeline, xc.variant)?;
    Ok(InferOutcome {
        label: prediction.label.as_str().to_string(),
        probabilities: prediction.probabilities,
        summary: ctx[0].summary.clone(),
        caption: ctx[0].caption.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::fixture::{generate, FixtureKind, FixtureSpec};

    fn tiny_xc() -> ExperimentConfig {
        ExperimentConfig {
            pipeline: PipelineConfig {
                encoder: crate::encoders::EncoderConfig {
                    d_t: 8,
                    d_v: 8,
                    layers: 1,
                    heads: 2,
                    max_len: 24,
                    image_size: 64,
                    patch_size: 16,
                    ffn_multiplier: 2,
                    dropout_p: 0.0,
                },
                jtmo: crate::jtmo::JtmoConfig {
                    width: 8,
                    layers: 1,
                    heads: 2,
                    max_len: 24,
                    ffn_multiplier: 2,
                    dropout_p: 0.0,
                    ..crate::jtmo::JtmoConfig::default()
                },
                fusion_d: 8,
                fusion_dropout_p: 0.0,
                ..PipelineConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn train_eval_roundtrip_on_overfit_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate(
            dir.path(),
            &FixtureSpec {
                kind: FixtureKind::Overfit,
                seed: 5,
                with_images: true,
            },
        )
        .unwrap();
        let xc = tiny_xc();
        let model = train_pipeline(&report.records, dir.path(), &xc, None).unwrap();
        assert_eq!(model.log.len(), 2);
        assert!(model.wiring.summarize_calls > 0);

        let eval = evaluate_pipeline(
            &model.store,
            &model.vocab,
            &report.records,
            Split::Test,
            dir.path(),
            &xc,
            None,
        )
        .unwrap();
        assert_eq!(eval.report.n_examples, 9);
    }

    #[test]
    fn checkpoint_compat_catches_mismatches() {
        let xc = tiny_xc();
        let store: ParamStore<f64> =
            init_params(&xc.pipeline, AblationVariant::Full, 30, 1).unwrap();
        assert!(check_checkpoint_compat(&store, &xc.pipeline, AblationVariant::Full, 30).is_ok());
        // wrong vocabulary size shifts the embedding shape
        let err =
            check_checkpoint_compat(&store, &xc.pipeline, AblationVariant::Full, 31).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // wrong variant changes the parameter census
        let err = check_checkpoint_compat(&store, &xc.pipeline, AblationVariant::WoJtmo, 30)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
