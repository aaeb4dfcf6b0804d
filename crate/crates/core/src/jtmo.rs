//! Joint Text Modelling: a transformer encoder over the combined
//! reply-text + image-caption sequence.
//!
//! The joint input is framed BERT-style as
//! `[CLS] reply... [SEP] caption... [SEP]` with segment ids 0/1. A stack
//! of post-norm layers (multi-head self-attention, then a position-wise
//! feed-forward, each behind a residual + LayerNorm) produces the full
//! sequence embedding H', pooled to the global vector H_j.
//!
//! The same layer machinery backs the text and vision encoders.

use serde::{Deserialize, Serialize};

use crate::encoders::vocab::{TokenSeq, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Mode, Var};
use crate::tensor::{ParamStore, Tensor};

/// LayerNorm epsilon used by every block in the pipeline.
pub const LN_EPS: f64 = 1e-5;

/// Additive attention bias for masked key positions. Large and finite:
/// exp(x - max) underflows to exactly 0 for any realistic row, so masked
/// columns carry zero weight without ever materializing an infinity.
pub const MASK_BIAS: f64 = -1e30;

/// How H' is reduced to the global vector H_j.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Take row 0 (the `[CLS]` position for joint inputs).
    Cls,
    /// Mask-aware mean over real positions.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JtmoConfig {
    /// Model width D_j.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_multiplier: usize,
    pub dropout_p: f64,
    pub pooling: Pooling,
    /// Reuse the text encoder's token table (requires equal widths).
    pub share_embeddings: bool,
}

impl Default for JtmoConfig {
    fn default() -> Self {
        JtmoConfig {
            width: 64,
            layers: 2,
            heads: 4,
            max_len: 64,
            ffn_multiplier: 4,
            dropout_p: 0.1,
            pooling: Pooling::Cls,
            share_embeddings: false,
        }
    }
}

impl JtmoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("jtmo dimensions must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "jtmo width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(
                "jtmo max_len must fit [CLS] t [SEP] [SEP] (>= 3)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("jtmo dropout_p must be in [0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Joint input
// ---------------------------------------------------------------------

/// `[CLS] reply... [SEP] caption... [SEP]` with segment and attention
/// masks. Segment 0 covers `[CLS]`, the reply and the first `[SEP]`;
/// segment 1 covers the caption and the final `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointInput {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl JointInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of caption tokens (segment 1 minus its `[SEP]`).
    pub fn caption_token_count(&self) -> usize {
        self.segment_ids.iter().filter(|&&s| s == 1).count() - 1
    }

    /// Extend with `[PAD]` (mask false, segment 1) up to `len`.
    pub fn pad_to(&self, len: usize) -> JointInput {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(crate::encoders::vocab::PAD_ID);
            out.segment_ids.push(1);
            out.mask.push(false);
        }
        out
    }
}

/// Build the joint sequence. If `1 + |reply| + 1 + |caption| + 1` exceeds
/// `max_len`, the longer segment is truncated one token at a time
/// (caption on ties) until it fits.
pub fn build_joint_input(
    reply: &TokenSeq,
    caption: &TokenSeq,
    max_len: usize,
) -> Result<JointInput> {
    if max_len < 3 {
        return Err(Error::Param(format!(
            "joint input needs max_len >= 3, got {max_len}"
        )));
    }
    let mut r = reply.ids.len();
    let mut c = caption.ids.len();
    while 3 + r + c > max_len {
        if r > c {
            r -= 1;
        } else {
            c -= 1;
        }
    }

    let mut ids = Vec::with_capacity(3 + r + c);
    let mut segment_ids = Vec::with_capacity(3 + r + c);
    ids.push(CLS_ID);
    segment_ids.push(0);
    ids.extend_from_slice(&reply.ids[..r]);
    segment_ids.extend(std::iter::repeat_n(0, r));
    ids.push(SEP_ID);
    segment_ids.push(0);
    ids.extend_from_slice(&caption.ids[..c]);
    segment_ids.extend(std::iter::repeat_n(1, c));
    ids.push(SEP_ID);
    segment_ids.push(1);

    let mask = vec![true; ids.len()];
    Ok(JointInput {
        ids,
        segment_ids,
        mask,
    })
}

// ---------------------------------------------------------------------
// Transformer layers (shared with the text/vision encoders)
// ---------------------------------------------------------------------

/// Shape of one encoder stack, independent of which modality feeds it.
#[derive(Debug, Clone, Copy)]
pub struct LayerDims {
    pub width: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
}

impl LayerDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Scaled dot-product attention for one head:
/// `softmax((H Wq)(H Wk)^T / sqrt(d_head) + mask_bias) (H Wv)`.
pub fn attention_head<S: Scalar>(
    graph: &mut Graph<S>,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: &[bool],
) -> Result<Var> {
    let l = graph.value(h).rows();
    if mask.len() != l {
        return Err(Error::contract(format!(
            "attention mask length {} vs {} rows",
            mask.len(),
            l
        )));
    }
    let q = graph.matmul(h, wq)?;
    let k = graph.matmul(h, wk)?;
    let v = graph.matmul(h, wv)?;
    let d_head = graph.value(q).cols();

    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scaled = graph.scale(scores, S::from_f64(1.0 / (d_head as f64).sqrt()))?;

    // Masked key columns get a large negative bias before softmax.
    let biased = if mask.iter().all(|&m| m) {
        scaled
    } else {
        let mut bias = vec![S::zero(); l * l];
        for col in 0..l {
            if !mask[col] {
                for row in 0..l {
                    bias[row * l + col] = S::from_f64(MASK_BIAS);
                }
            }
        }
        let bias = graph.constant(Tensor::from_vec(vec![l, l], bias)?);
        graph.add(scaled, bias)?
    };

    let weights = graph.softmax_rows(biased)?;
    graph.matmul(weights, v)
}

/// Heads computed independently, concatenated, projected by W_O.
pub fn multi_head<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    h: Var,
    dims: LayerDims,
    mask: &[bool],
) -> Result<Var> {
    if !dims.width.is_multiple_of(dims.heads) {
        return Err(Error::contract(format!(
            "heads {} do not divide width {}",
            dims.heads, dims.width
        )));
    }
    let mut heads = Vec::with_capacity(dims.heads);
    for i in 0..dims.heads {
        let wq = graph.param(store, &format!("{prefix}.attn.h{i}.wq"))?;
        let wk = graph.param(store, &format!("{prefix}.attn.h{i}.wk"))?;
        let wv = graph.param(store, &format!("{prefix}.attn.h{i}.wv"))?;
        heads.push(attention_head(graph, h, wq, wk, wv, mask)?);
    }
    let concat = graph.concat_cols(&heads)?;
    let wo = graph.param(store, &format!("{prefix}.attn.wo"))?;
    graph.matmul(concat, wo)
}

/// One post-norm encoder layer:
/// `H~ = LayerNorm(H + MultiHead(H)); out = LayerNorm(H~ + FFN(H~))`
/// with FFN = Linear -> GELU -> Linear.
pub fn encoder_layer<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    h_prev: Var,
    dims: LayerDims,
    mask: &[bool],
) -> Result<Var> {
    let attn = multi_head(graph, store, prefix, h_prev, dims, mask)?;
    let res1 = graph.add(h_prev, attn)?;
    let ln1_g = graph.param(store, &format!("{prefix}.ln1.gamma"))?;
    let ln1_b = graph.param(store, &format!("{prefix}.ln1.beta"))?;
    let h_tilde = graph.layer_norm(res1, ln1_g, ln1_b, S::from_f64(LN_EPS))?;

    let w1 = graph.param(store, &format!("{prefix}.ffn.w1"))?;
    let b1 = graph.param(store, &format!("{prefix}.ffn.b1"))?;
    let w2 = graph.param(store, &format!("{prefix}.ffn.w2"))?;
    let b2 = graph.param(store, &format!("{prefix}.ffn.b2"))?;
    let mid = graph.linear(h_tilde, w1, Some(b1))?;
    let act = graph.gelu(mid)?;
    let ffn = graph.linear(act, w2, Some(b2))?;

    let res2 = graph.add(h_tilde, ffn)?;
    let ln2_g = graph.param(store, &format!("{prefix}.ln2.gamma"))?;
    let ln2_b = graph.param(store, &format!("{prefix}.ln2.beta"))?;
    graph.layer_norm(res2, ln2_g, ln2_b, S::from_f64(LN_EPS))
}

/// Run `layers` encoder layers under one parameter prefix.
pub fn encoder_stack<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    mut h: Var,
    layers: usize,
    dims: LayerDims,
    mask: &[bool],
) -> Result<Var> {
    for j in 0..layers {
        h = encoder_layer(graph, store, &format!("{prefix}.layer{j}"), h, dims, mask)?;
    }
    Ok(h)
}

/// Register one encoder layer's parameters: per-head Q/K/V, the output
/// projection, the FFN pair and two LayerNorm affine pairs. Projection
/// weights are N(0, 0.02^2), biases zero, gamma one, beta zero.
pub fn init_layer_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    dims: LayerDims,
) -> Result<()> {
    let d = dims.width;
    let dh = dims.head_dim();
    let m = dims.ffn_multiplier * d;
    for i in 0..dims.heads {
        store.init_normal(&format!("{prefix}.attn.h{i}.wq"), vec![d, dh], 0.02)?;
        store.init_normal(&format!("{prefix}.attn.h{i}.wk"), vec![d, dh], 0.02)?;
        store.init_normal(&format!("{prefix}.attn.h{i}.wv"), vec![d, dh], 0.02)?;
    }
    store.init_normal(&format!("{prefix}.attn.wo"), vec![d, d], 0.02)?;
    store.init_normal(&format!("{prefix}.ffn.w1"), vec![d, m], 0.02)?;
    store.init_zeros(&format!("{prefix}.ffn.b1"), vec![m])?;
    store.init_normal(&format!("{prefix}.ffn.w2"), vec![m, d], 0.02)?;
    store.init_zeros(&format!("{prefix}.ffn.b2"), vec![d])?;
    store.init_ones(&format!("{prefix}.ln1.gamma"), vec![d])?;
    store.init_zeros(&format!("{prefix}.ln1.beta"), vec![d])?;
    store.init_ones(&format!("{prefix}.ln2.gamma"), vec![d])?;
    store.init_zeros(&format!("{prefix}.ln2.beta"), vec![d])?;
    Ok(())
}

pub fn init_stack_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    layers: usize,
    dims: LayerDims,
) -> Result<()> {
    for j in 0..layers {
        init_layer_params(store, &format!("{prefix}.layer{j}"), dims)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// JTMo encoder
// ---------------------------------------------------------------------

pub const JTMO_PREFIX: &str = "jtmo";

/// Parameter name of the token table JTMo reads from.
pub fn token_table_name(cfg: &JtmoConfig) -> &'static str {
    if cfg.share_embeddings {
        "text_enc.embed.tok"
    } else {
        "jtmo.embed.tok"
    }
}

pub fn init_jtmo_params<S: Scalar>(
    store: &mut ParamStore<S>,
    vocab_size: usize,
    cfg: &JtmoConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    if !cfg.share_embeddings {
        store.init_normal("jtmo.embed.tok", vec![vocab_size, d], 0.02)?;
    }
    store.init_normal("jtmo.embed.pos", vec![cfg.max_len, d], 0.02)?;
    store.init_normal("jtmo.embed.seg", vec![2, d], 0.02)?;
    init_stack_params(
        store,
        JTMO_PREFIX,
        cfg.layers,
        LayerDims {
            width: d,
            heads: cfg.heads,
            ffn_multiplier: cfg.ffn_multiplier,
        },
    )
}

/// Full H' `[L x D_j]` plus the pooled H_j `[1 x D_j]`.
#[derive(Debug)]
pub struct JointEncoding {
    pub h_prime: Var,
    pub h_j: Var,
}

/// Embed (token + position + segment), run the layer stack, pool.
pub fn jtmo_encode<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    input: &JointInput,
    cfg: &JtmoConfig,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<JointEncoding> {
    if input.is_empty() {
        return Err(Error::contract("jtmo_encode on empty input"));
    }
    let l = input.len();
    if l > cfg.max_len {
        return Err(Error::contract(format!(
            "joint input length {l} exceeds position table {}",
            cfg.max_len
        )));
    }

    let tok_table = graph.param(store, token_table_name(cfg))?;
    let pos_table = graph.param(store, "jtmo.embed.pos")?;
    let seg_table = graph.param(store, "jtmo.embed.seg")?;

    let tok = graph.embed(tok_table, &input.ids)?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = graph.embed(pos_table, &positions)?;
    let seg = graph.embed(seg_table, &input.segment_ids)?;

    let sum = graph.add(tok, pos)?;
    let sum = graph.add(sum, seg)?;
    let x = graph.dropout(sum, cfg.dropout_p, mode, rng)?;

    let dims = LayerDims {
        width: cfg.width,
        heads: cfg.heads,
        ffn_multiplier: cfg.ffn_multiplier,
    };
    let h_prime = encoder_stack(graph, store, JTMO_PREFIX, x, cfg.layers, dims, &input.mask)?;

    let h_j = match cfg.pooling {
        Pooling::Cls => graph.row(h_prime, 0)?,
        Pooling::Mean => graph.mean_rows_masked(h_prime, &input.mask)?,
    };
    Ok(JointEncoding { h_prime, h_j })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq {
            ids: ids.to_vec(),
            mask: vec![true; ids.len()],
        }
    }

    #[test]
    fn joint_layout_basic() {
        // reply [a,b], caption [c] -> [CLS a b SEP c SEP], segs 0 0 0 0 1 1
        let j = build_joint_input(&seq(&[10, 11]), &seq(&[12]), 16).unwrap();
        assert_eq!(j.ids, vec![CLS_ID, 10, 11, SEP_ID, 12, SEP_ID]);
        assert_eq!(j.segment_ids, vec![0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn joint_layout_empty_caption() {
        let j = build_joint_input(&seq(&[10, 11]), &TokenSeq::empty(), 16).unwrap();
        assert_eq!(j.ids, vec![CLS_ID, 10, 11, SEP_ID, SEP_ID]);
        assert_eq!(j.segment_ids, vec![0, 0, 0, 0, 1]);
        assert_eq!(j.caption_token_count(), 0);
    }

    #[test]
    fn joint_truncation_longer_first() {
        // 40 + 40 tokens, max 64: need to shed 19; starting from a tie the
        // caption goes first, then they alternate (reply, caption, ...).
        let reply = seq(&(0..40).map(|i| 100 + i).collect::<Vec<_>>());
        let caption = seq(&(0..40).map(|i| 200 + i).collect::<Vec<_>>());
        let j = build_joint_input(&reply, &caption, 64).unwrap();
        assert_eq!(j.len(), 64);

        // simulate the rule independently
        let (mut r, mut c) = (40usize, 40usize);
        while 3 + r + c > 64 {
            if r > c {
                r -= 1;
            } else {
                c -= 1;
            }
        }
        let reply_kept = j.segment_ids.iter().filter(|&&s| s == 0).count() - 2;
        assert_eq!(reply_kept, r);
        assert_eq!(j.caption_token_count(), c);
    }

    #[test]
    fn joint_rejects_tiny_max_len() {
        let err = build_joint_input(&seq(&[1]), &seq(&[2]), 2).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
    }

    fn toy_cfg() -> JtmoConfig {
        JtmoConfig {
            width: 8,
            layers: 1,
            heads: 2,
            max_len: 16,
            ffn_multiplier: 2,
            dropout_p: 0.0,
            pooling: Pooling::Cls,
            share_embeddings: false,
        }
    }

    fn toy_store(cfg: &JtmoConfig) -> ParamStore<f64> {
        let mut store = ParamStore::new(7);
        init_jtmo_params(&mut store, 20, cfg).unwrap();
        store
    }

    #[test]
    fn attention_single_position_weight_is_one() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_vec(vec![1, 8], (0..8).map(f64::from).collect()).unwrap());
        let wq = g.param(&store, "jtmo.layer0.attn.h0.wq").unwrap();
        let wk = g.param(&store, "jtmo.layer0.attn.h0.wk").unwrap();
        let wv = g.param(&store, "jtmo.layer0.attn.h0.wv").unwrap();
        let out = attention_head(&mut g, h, wq, wk, wv, &[true]).unwrap();
        // With L=1 the softmax weight is exactly 1, so out = h . wv.
        let v = g.matmul(h, wv).unwrap();
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn attention_uniform_rows_give_uniform_weights() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut g = Graph::new();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * f64::from(i)).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let h = g.constant(Tensor::from_vec(vec![4, 8], data).unwrap());
        let wq = g.param(&store, "jtmo.layer0.attn.h0.wq").unwrap();
        let wk = g.param(&store, "jtmo.layer0.attn.h0.wk").unwrap();
        let wv = g.param(&store, "jtmo.layer0.attn.h0.wv").unwrap();
        let out = attention_head(&mut g, h, wq, wk, wv, &[true; 4]).unwrap();
        // identical rows attend uniformly, so output rows are all equal
        let o = g.value(out);
        for r in 1..4 {
            for c in 0..o.cols() {
                assert!((o.at(r, c) - o.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_nested_loop_oracle() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut rng = StreamRng::new(3, "attn");
        let (l, d) = (5, 8);
        let h0 = Tensor::randn(vec![l, d], 1.0, &mut rng);
        let mask = [true, true, false, true, true];

        let mut g = Graph::new();
        let h = g.constant(h0.clone());
        let wq = g.param(&store, "jtmo.layer0.attn.h0.wq").unwrap();
        let wk = g.param(&store, "jtmo.layer0.attn.h0.wk").unwrap();
        let wv = g.param(&store, "jtmo.layer0.attn.h0.wv").unwrap();
        let out = attention_head(&mut g, h, wq, wk, wv, &mask).unwrap();

        // independent three-nested-loop oracle
        let dh = g.value(wq).cols();
        let wq_d = store.get("jtmo.layer0.attn.h0.wq").unwrap();
        let wk_d = store.get("jtmo.layer0.attn.h0.wk").unwrap();
        let wv_d = store.get("jtmo.layer0.attn.h0.wv").unwrap();
        let proj = |w: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..l)
                .map(|i| {
                    (0..dh)
                        .map(|j| (0..d).map(|k| h0.at(i, k) * w.at(k, j)).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(wq_d), proj(wk_d), proj(wv_d));
        for i in 0..l {
            let mut scores = vec![0.0f64; l];
            for j in 0..l {
                let dot: f64 = (0..dh).map(|t| q[i][t] * k[j][t]).sum();
                scores[j] = dot / (dh as f64).sqrt() + if mask[j] { 0.0 } else { MASK_BIAS };
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for t in 0..dh {
                let expect: f64 = (0..l).map(|j| exps[j] / sum * v[j][t]).sum();
                assert!(
                    (g.value(out).at(i, t) - expect).abs() < 1e-10,
                    "row {i} col {t}"
                );
            }
        }
    }

    #[test]
    fn multi_head_single_head_is_head_times_wo() {
        let mut cfg = toy_cfg();
        cfg.heads = 1;
        let mut store: ParamStore<f64> = ParamStore::new(5);
        init_jtmo_params(&mut store, 20, &cfg).unwrap();

        let mut g = Graph::new();
        let mut rng = StreamRng::new(1, "mh");
        let h = g.constant(Tensor::randn(vec![3, 8], 1.0, &mut rng));
        let dims = LayerDims {
            width: 8,
            heads: 1,
            ffn_multiplier: 2,
        };
        let out = multi_head(&mut g, &store, "jtmo.layer0", h, dims, &[true; 3]).unwrap();

        let wq = g.param(&store, "jtmo.layer0.attn.h0.wq").unwrap();
        let wk = g.param(&store, "jtmo.layer0.attn.h0.wk").unwrap();
        let wv = g.param(&store, "jtmo.layer0.attn.h0.wv").unwrap();
        let head = attention_head(&mut g, h, wq, wk, wv, &[true; 3]).unwrap();
        let wo = g.param(&store, "jtmo.layer0.attn.wo").unwrap();
        let expect = g.matmul(head, wo).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_head_identity_wo_is_concat() {
        let cfg = toy_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(5);
        init_jtmo_params(&mut store, 20, &cfg).unwrap();
        // overwrite wo with identity
        store.zero_grads();
        let mut eye = vec![0.0f64; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        store
            .update("jtmo.layer0.attn.wo", |data, _| data.copy_from_slice(&eye))
            .unwrap();

        let mut g = Graph::new();
        let mut rng = StreamRng::new(2, "mh2");
        let h = g.constant(Tensor::randn(vec![3, 8], 1.0, &mut rng));
        let dims = LayerDims {
            width: 8,
            heads: 2,
            ffn_multiplier: 2,
        };
        let out = multi_head(&mut g, &store, "jtmo.layer0", h, dims, &[true; 3]).unwrap();

        let mut heads = Vec::new();
        for i in 0..2 {
            let wq = g.param(&store, &format!("jtmo.layer0.attn.h{i}.wq")).unwrap();
            let wk = g.param(&store, &format!("jtmo.layer0.attn.h{i}.wk")).unwrap();
            let wv = g.param(&store, &format!("jtmo.layer0.attn.h{i}.wv")).unwrap();
            heads.push(attention_head(&mut g, h, wq, wk, wv, &[true; 3]).unwrap());
        }
        let concat = g.concat_cols(&heads).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(concat).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_with_zero_weights_is_double_layernorm() {
        let cfg = toy_cfg();
        let mut store: ParamStore<f64> = ParamStore::new(5);
        init_jtmo_params(&mut store, 20, &cfg).unwrap();
        // zero every attention/FFN weight; gammas stay 1, betas 0
        let names: Vec<String> = store
            .names()
            .filter(|n| n.contains(".attn.") || n.contains(".ffn."))
            .map(str::to_string)
            .collect();
        for n in names {
            store
                .update(&n, |data, _| data.iter_mut().for_each(|v| *v = 0.0))
                .unwrap();
        }

        let mut rng = StreamRng::new(9, "ln");
        let h0 = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let h = g.constant(h0.clone());
        let dims = LayerDims {
            width: 8,
            heads: 2,
            ffn_multiplier: 2,
        };
        let out = encoder_layer(&mut g, &store, "jtmo.layer0", h, dims, &[true; 4]).unwrap();

        let gamma = g.constant(Tensor::ones(vec![8]));
        let beta = g.constant(Tensor::zeros(vec![8]));
        let ln1 = g.layer_norm(h, gamma, beta, LN_EPS).unwrap();
        let ln2 = g.layer_norm(ln1, gamma, beta, LN_EPS).unwrap();
        for (a, b) in g.value(out).data().iter().zip(g.value(ln2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_matches_straight_line_oracle() {
        // Independent reimplementation of Eqs. 4-5 with plain loops.
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let mut rng = StreamRng::new(14, "oracle");
        let (l, d, heads) = (4usize, 8usize, 2usize);
        let dh = d / heads;
        let h0 = Tensor::randn(vec![l, d], 0.7, &mut rng);

        let mut g = Graph::new();
        let h = g.constant(h0.clone());
        let dims = LayerDims {
            width: d,
            heads,
            ffn_multiplier: 2,
        };
        let out = encoder_layer(&mut g, &store, "jtmo.layer0", h, dims, &[true; 4]).unwrap();

        let get = |n: &str| store.get(&format!("jtmo.layer0.{n}")).unwrap();
        let matmul = |a: &[Vec<f64>], w: &Tensor<f64>| -> Vec<Vec<f64>> {
            let (rk, rn) = (w.rows(), w.cols());
            a.iter()
                .map(|row| {
                    (0..rn)
                        .map(|j| (0..rk).map(|k| row[k] * w.at(k, j)).sum())
                        .collect()
                })
                .collect()
        };
        let rows: Vec<Vec<f64>> = (0..l)
            .map(|i| (0..d).map(|j| h0.at(i, j)).collect())
            .collect();

        // multi-head attention
        let mut head_outs: Vec<Vec<Vec<f64>>> = Vec::new();
        for i in 0..heads {
            let q = matmul(&rows, get(&format!("attn.h{i}.wq")));
            let k = matmul(&rows, get(&format!("attn.h{i}.wk")));
            let v = matmul(&rows, get(&format!("attn.h{i}.wv")));
            let mut out_h = vec![vec![0.0; dh]; l];
            for r in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|c| {
                        (0..dh).map(|t| q[r][t] * k[c][t]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for t in 0..dh {
                    out_h[r][t] = (0..l).map(|c| exps[c] / sum * v[c][t]).sum();
                }
            }
            head_outs.push(out_h);
        }
        let concat: Vec<Vec<f64>> = (0..l)
            .map(|r| head_outs.iter().flat_map(|h| h[r].clone()).collect())
            .collect();
        let attn = matmul(&concat, get("attn.wo"));

        let layer_norm = |x: &[Vec<f64>], gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            x.iter()
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| {
                            gamma.data()[j] * (v - mean) / (var + LN_EPS).sqrt() + beta.data()[j]
                        })
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>()
        };

        let res1: Vec<Vec<f64>> = (0..l)
            .map(|r| (0..d).map(|j| rows[r][j] + attn[r][j]).collect())
            .collect();
        let h_tilde = layer_norm(&res1, get("ln1.gamma"), get("ln1.beta"));

        let gelu = |x: f64| {
            let u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        };
        let mid = matmul(&h_tilde, get("ffn.w1"));
        let b1 = get("ffn.b1");
        let act: Vec<Vec<f64>> = mid
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| gelu(v + b1.data()[j]))
                    .collect()
            })
            .collect();
        let ffn_o = matmul(&act, get("ffn.w2"));
        let b2 = get("ffn.b2");
        let res2: Vec<Vec<f64>> = (0..l)
            .map(|r| {
                (0..d)
                    .map(|j| h_tilde[r][j] + ffn_o[r][j] + b2.data()[j])
                    .collect()
            })
            .collect();
        let expect = layer_norm(&res2, get("ln2.gamma"), get("ln2.beta"));

        for r in 0..l {
            for c in 0..d {
                assert!(
                    (g.value(out).at(r, c) - expect[r][c]).abs() < 1e-10,
                    "row {r} col {c}: {} vs {}",
                    g.value(out).at(r, c),
                    expect[r][c]
                );
            }
        }
    }

    #[test]
    fn encode_shapes_and_pooling() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let joint = build_joint_input(&seq(&[5, 6, 7]), &seq(&[8, 9]), cfg.max_len).unwrap();
        let mut rng = StreamRng::new(0, "enc");
        let mut g = Graph::new();
        let enc = jtmo_encode(&mut g, &store, &joint, &cfg, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(enc.h_prime).shape(), &[joint.len(), 8]);
        assert_eq!(g.value(enc.h_j).shape(), &[1, 8]);
        // [CLS] pooling: H_j equals row 0 of H'
        for c in 0..8 {
            assert_eq!(g.value(enc.h_j).at(0, c), g.value(enc.h_prime).at(0, c));
        }
    }

    #[test]
    fn segment_embedding_is_live() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let joint = build_joint_input(&seq(&[5, 6]), &seq(&[7]), cfg.max_len).unwrap();
        let mut flipped = joint.clone();
        for s in &mut flipped.segment_ids {
            *s = 1 - *s;
        }
        let mut rng = StreamRng::new(0, "seg");
        let mut g = Graph::new();
        let a = jtmo_encode(&mut g, &store, &joint, &cfg, Mode::Eval, &mut rng).unwrap();
        let b = jtmo_encode(&mut g, &store, &flipped, &cfg, Mode::Eval, &mut rng).unwrap();
        let diff: f64 = g
            .value(a.h_prime)
            .data()
            .iter()
            .zip(g.value(b.h_prime).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "segment ids should change the encoding");
    }

    #[test]
    fn shared_embeddings_reuse_the_text_table() {
        let cfg = JtmoConfig {
            share_embeddings: true,
            ..toy_cfg()
        };
        let mut store: ParamStore<f64> = ParamStore::new(7);
        let enc_cfg = crate::encoders::EncoderConfig {
            d_t: 8,
            d_v: 8,
            layers: 1,
            heads: 2,
            max_len: 16,
            image_size: 16,
            patch_size: 8,
            ffn_multiplier: 2,
            dropout_p: 0.0,
        };
        crate::encoders::text::init_text_params(&mut store, 20, &enc_cfg).unwrap();
        init_jtmo_params(&mut store, 20, &cfg).unwrap();
        assert!(!store.contains("jtmo.embed.tok"));

        let joint = build_joint_input(&seq(&[5, 6]), &seq(&[7]), cfg.max_len).unwrap();
        let mut rng = StreamRng::new(0, "share");
        let mut g = Graph::new();
        let enc = jtmo_encode(&mut g, &store, &joint, &cfg, Mode::Eval, &mut rng).unwrap();
        let loss = g.mean_all(enc.h_prime).unwrap();
        g.backward_params(loss, &mut store).unwrap();
        let grad = store.get("text_enc.embed.tok").unwrap().grad().unwrap();
        assert!(
            grad.iter().any(|&v| v != 0.0),
            "shared table receives jtmo gradients"
        );
    }

    #[test]
    fn too_long_input_is_contract_error() {
        let cfg = toy_cfg();
        let store = toy_store(&cfg);
        let joint = JointInput {
            ids: vec![CLS_ID; 17],
            segment_ids: vec![0; 17],
            mask: vec![true; 17],
        };
        let mut rng = StreamRng::new(0, "long");
        let mut g = Graph::new();
        let err = jtmo_encode(&mut g, &store, &joint, &cfg, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
