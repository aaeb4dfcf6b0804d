//! Shared-space projection fusion and the stance classifier.
//!
//! H_t and H_v are mean-pooled over their sequence/patch axes, all three
//! representations are linearly projected into one d-dimensional space,
//! concatenated in fixed [text | visual | joint] order and classified
//! into SUPPORT / OPPOSE / NEUTRAL. Ablation variants rewire this stage:
//! without JTMo the joint slot disappears (classifier over 2d), without
//! fusion the raw pooled representations are concatenated unprojected.

pub mod train;

use crate::dataset::StanceLabel;
use crate::encoders::text::encode_text;
use crate::encoders::vision::encode_image;
use crate::error::{Error, Result};
use crate::jtmo::{build_joint_input, jtmo_encode, Pooling};
use crate::pipeline::{AblationVariant, PipelineConfig, PreparedExample};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Mode, Var};
use crate::tensor::{ParamStore, Tensor};

/// Pool a sequence representation to `[1 x D]`.
fn pool<S: Scalar>(
    graph: &mut Graph<S>,
    h: Var,
    mask: &[bool],
    pooling: Pooling,
) -> Result<Var> {
    match pooling {
        Pooling::Cls => graph.row(h, 0),
        Pooling::Mean => graph.mean_rows_masked(h, mask),
    }
}

/// Project a pooled `[1 x D]` vector into the shared d-space.
fn project<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    pooled: Var,
    modality: &str,
) -> Result<Var> {
    let w = graph.param(store, &format!("fusion.proj.{modality}.w"))?;
    let b = graph.param(store, &format!("fusion.proj.{modality}.b"))?;
    let d_in = graph.value(pooled).cols();
    if graph.value(w).rows() != d_in {
        return Err(Error::contract(format!(
            "projection width mismatch for {modality}: input {d_in}, weight {:?}",
            graph.value(w).shape()
        )));
    }
    graph.linear(pooled, w, Some(b))
}

/// Pool H_t / H_v and project all three representations into the shared
/// d-space; H_j arrives already pooled.
pub fn pool_and_project<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    h_t: Var,
    t_mask: &[bool],
    h_v: Var,
    h_j: Var,
    pooling: Pooling,
) -> Result<(Var, Var, Var)> {
    let pooled_t = pool(graph, h_t, t_mask, pooling)?;
    let v_mask = vec![true; graph.value(h_v).rows()];
    let pooled_v = pool(graph, h_v, &v_mask, pooling)?;
    let proj_t = project(graph, store, pooled_t, "text")?;
    let proj_v = project(graph, store, pooled_v, "vision")?;
    let proj_j = project(graph, store, h_j, "joint")?;
    Ok((proj_t, proj_v, proj_j))
}

/// Concatenate projected representations in fixed order.
pub fn fuse<S: Scalar>(graph: &mut Graph<S>, parts: &[Var]) -> Result<Var> {
    for &p in parts {
        if graph.value(p).rows() != 1 {
            return Err(Error::contract(format!(
                "fuse expects row vectors, got {:?}",
                graph.value(p).shape()
            )));
        }
    }
    graph.concat_cols(parts)
}

/// Dropout then the linear head; returns the `[1 x 3]` logits node.
pub fn classify_logits<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    fused: Var,
    dropout_p: f64,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<Var> {
    let dropped = graph.dropout(fused, dropout_p, mode, rng)?;
    let w = graph.param(store, "fusion.cls.w")?;
    let b = graph.param(store, "fusion.cls.b")?;
    if graph.value(w).rows() != graph.value(fused).cols() {
        return Err(Error::contract(format!(
            "classifier expects width {}, fused vector has {}",
            graph.value(w).rows(),
            graph.value(fused).cols()
        )));
    }
    graph.linear(dropped, w, Some(b))
}

/// Logits, softmax probabilities and the argmax label (ties resolve to
/// the lowest class index).
#[derive(Debug, Clone, PartialEq)]
pub struct StancePrediction {
    pub logits: [f64; 3],
    pub probabilities: [f64; 3],
    pub label: StanceLabel,
}

pub fn prediction_from_logits<S: Scalar>(logits: &Tensor<S>) -> Result<StancePrediction> {
    if logits.numel() != 3 {
        return Err(Error::contract(format!(
            "expected 3 logits, got shape {:?}",
            logits.shape()
        )));
    }
    let raw = [
        logits.data()[0].as_f64(),
        logits.data()[1].as_f64(),
        logits.data()[2].as_f64(),
    ];
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = raw.map(|v| (v - max).exp());
    let sum: f64 = exps.iter().sum();
    let probabilities = exps.map(|e| e / sum);

    let mut best = 0usize;
    for i in 1..3 {
        if raw[i] > raw[best] {
            best = i;
        }
    }
    Ok(StancePrediction {
        logits: raw,
        probabilities,
        label: StanceLabel::from_index(best).expect("three classes"),
    })
}

/// Full forward wiring for one prepared example under a variant; returns
/// the logits node so training can stack batches into one loss.
pub fn forward_logits<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    example: &PreparedExample,
    cfg: &PipelineConfig,
    variant: AblationVariant,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<Var> {
    // text path: the (possibly raw, for wo_summarization) summary text
    let h_t = encode_text(graph, store, &example.summary, &cfg.encoder, mode, rng)?;

    // vision path
    let image = convert_image::<S>(&example.image);
    let h_v = encode_image(graph, store, &image, &cfg.encoder, mode, rng)?;

    // joint path
    let h_j = if variant.uses_jtmo() {
        let joint = build_joint_input(&example.reply, &example.caption, cfg.jtmo.max_len)?;
        Some(jtmo_encode(graph, store, &joint, &cfg.jtmo, mode, rng)?.h_j)
    } else {
        None
    };

    let pooled_t = pool(graph, h_t, &example.summary.mask, cfg.pooling)?;
    let v_mask = vec![true; graph.value(h_v).rows()];
    let pooled_v = pool(graph, h_v, &v_mask, cfg.pooling)?;

    let fused = if variant.uses_projection() {
        let mut parts = vec![
            project(graph, store, pooled_t, "text")?,
            project(graph, store, pooled_v, "vision")?,
        ];
        if let Some(h_j) = h_j {
            parts.push(project(graph, store, h_j, "joint")?);
        }
        if cfg.pre_fusion_dropout {
            for part in &mut parts {
                *part = graph.dropout(*part, cfg.fusion_dropout_p, mode, rng)?;
            }
        }
        fuse(graph, &parts)?
    } else {
        // wo_fusion: direct concatenation of the raw pooled representations
        let h_j = h_j.ok_or_else(|| Error::contract("wo_fusion still uses the joint path"))?;
        fuse(graph, &[pooled_t, pooled_v, h_j])?
    };

    classify_logits(graph, store, fused, cfg.fusion_dropout_p, mode, rng)
}

/// Eval-mode convenience: one example in, one prediction out.
pub fn forward<S: Scalar>(
    store: &ParamStore<S>,
    example: &PreparedExample,
    cfg: &PipelineConfig,
    variant: AblationVariant,
) -> Result<StancePrediction> {
    let mut graph = Graph::new();
    let mut rng = StreamRng::new(store.rng_seed(), "forward.eval");
    let logits = forward_logits(
        &mut graph,
        store,
        example,
        cfg,
        variant,
        Mode::Eval,
        &mut rng,
    )?;
    prediction_from_logits(graph.value(logits))
}

/// PreparedExample carries f64 pixels; re-type them for the scalar in use.
fn convert_image<S: Scalar>(img: &crate::encoders::image::ImageTensor<f64>) -> crate::encoders::image::ImageTensor<S> {
    crate::encoders::image::ImageTensor {
        pixels: Tensor::from_vec(
            img.pixels.shape().to_vec(),
            img.pixels.data().iter().map(|&v| S::from_f64(v)).collect(),
        )
        .expect("same shape"),
        source_id: img.source_id.clone(),
    }
}
