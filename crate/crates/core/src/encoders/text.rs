//! BERT-shaped text encoder: token + learned position embeddings feeding
//! a stack of self-attention layers. Produces H_t with one row per token.

use crate::error::{Error, Result};
use crate::jtmo::{encoder_stack, init_stack_params, LayerDims};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Mode, Var};
use crate::tensor::ParamStore;

use super::vocab::TokenSeq;
use super::EncoderConfig;

pub const TEXT_PREFIX: &str = "text_enc";

pub fn init_text_params<S: Scalar>(
    store: &mut ParamStore<S>,
    vocab_size: usize,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    store.init_normal("text_enc.embed.tok", vec![vocab_size, cfg.d_t], 0.02)?;
    store.init_normal("text_enc.embed.pos", vec![cfg.max_len, cfg.d_t], 0.02)?;
    init_stack_params(
        store,
        TEXT_PREFIX,
        cfg.layers,
        LayerDims {
            width: cfg.d_t,
            heads: cfg.heads,
            ffn_multiplier: cfg.ffn_multiplier,
        },
    )
}

/// Encode a token sequence to `H_t [n x d_t]`. Masked (`[PAD]`) positions
/// never influence the rows of real tokens.
pub fn encode_text<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    seq: &TokenSeq,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::contract("encode_text on an empty sequence"));
    }
    let n = seq.len();
    if n > cfg.max_len {
        return Err(Error::contract(format!(
            "sequence length {n} exceeds position table {}",
            cfg.max_len
        )));
    }

    let tok_table = graph.param(store, "text_enc.embed.tok")?;
    let pos_table = graph.param(store, "text_enc.embed.pos")?;
    let tok = graph.embed(tok_table, &seq.ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = graph.embed(pos_table, &positions)?;
    let sum = graph.add(tok, pos)?;
    let x = graph.dropout(sum, cfg.dropout_p, mode, rng)?;

    encoder_stack(
        graph,
        store,
        TEXT_PREFIX,
        x,
        cfg.layers,
        LayerDims {
            width: cfg.d_t,
            heads: cfg.heads,
            ffn_multiplier: cfg.ffn_multiplier,
        },
        &seq.mask,
    )
}
