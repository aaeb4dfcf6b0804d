//! Patch-based vision encoder: non-overlapping patches are flattened,
//! linearly embedded, given learned position embeddings and run through
//! the same transformer stack as the text side. H_v has one row per patch.

use crate::error::{Error, Result};
use crate::jtmo::{encoder_stack, init_stack_params, LayerDims};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Mode, Var};
use crate::tensor::{ParamStore, Tensor};

use super::image::ImageTensor;
use super::EncoderConfig;

pub const VISION_PREFIX: &str = "vision_enc";

pub fn init_vision_params<S: Scalar>(store: &mut ParamStore<S>, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    store.init_normal("vision_enc.embed.patch_w", vec![patch_dim, cfg.d_v], 0.02)?;
    store.init_zeros("vision_enc.embed.patch_b", vec![cfg.d_v])?;
    store.init_normal(
        "vision_enc.embed.pos",
        vec![cfg.num_patches(), cfg.d_v],
        0.02,
    )?;
    init_stack_params(
        store,
        VISION_PREFIX,
        cfg.layers,
        LayerDims {
            width: cfg.d_v,
            heads: cfg.heads,
            ffn_multiplier: cfg.ffn_multiplier,
        },
    )
}

/// Flatten non-overlapping patches into a `[N x 3p^2]` matrix. Patches are
/// raster ordered; within a patch the layout is channel-major, then rows.
pub fn patchify<S: Scalar>(img: &ImageTensor<S>, patch: usize) -> Result<Tensor<S>> {
    let (h, w) = (img.height(), img.width());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "{}: {h}x{w} not divisible by patch {patch}",
            img.source_id
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let patch_dim = 3 * patch * patch;
    let px = img.pixels.data();
    let mut out = Vec::with_capacity(n * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for c in 0..3 {
                for py in 0..patch {
                    for pxi in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + pxi;
                        out.push(px[c * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, patch_dim], out)
}

/// Encode an image to `H_v [N x d_v]`.
pub fn encode_image<S: Scalar>(
    graph: &mut Graph<S>,
    store: &ParamStore<S>,
    img: &ImageTensor<S>,
    cfg: &EncoderConfig,
    mode: Mode,
    rng: &mut StreamRng,
) -> Result<Var> {
    let patches = patchify(img, cfg.patch_size)?;
    let n = patches.rows();
    if n != cfg.num_patches() {
        return Err(Error::contract(format!(
            "{}: {n} patches, config expects {}",
            img.source_id,
            cfg.num_patches()
        )));
    }

    let x = graph.constant(patches);
    let w = graph.param(store, "vision_enc.embed.patch_w")?;
    let b = graph.param(store, "vision_enc.embed.patch_b")?;
    let projected = graph.linear(x, w, Some(b))?;
    let pos_table = graph.param(store, "vision_enc.embed.pos")?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = graph.embed(pos_table, &positions)?;
    let sum = graph.add(projected, pos)?;
    let embedded = graph.dropout(sum, cfg.dropout_p, mode, rng)?;

    let mask = vec![true; n];
    encoder_stack(
        graph,
        store,
        VISION_PREFIX,
        embedded,
        cfg.layers,
        LayerDims {
            width: cfg.d_v,
            heads: cfg.heads,
            ffn_multiplier: cfg.ffn_multiplier,
        },
        &mask,
    )
}
