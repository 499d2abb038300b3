//! Vanilla ViT backbone: patch embedding, pre-norm MHSA + MLP blocks,
//! and the even partition of blocks into stages.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;
use std::ops::Range;

pub const LN_EPS: f64 = 1e-6;

/// Graph handles for one transformer block's parameters.
///
/// The qkv projection is fused (D -> 3D), the output projection maps
/// D -> D, and the MLP is linear -> GELU -> linear (D -> mlp_dim -> D).
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Patch embedding: non-overlapping P x P patches, linearly projected to
/// width D, plus a learned positional embedding of length K = HW/P^2.
/// There is no class token; classification happens downstream from pooled
/// tokens.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    w: Var,
    b: Var,
    pos: Var,
    patch: usize,
) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("patch_embed: image {:?} not rank 4", s)));
    }
    if s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::Shape(format!(
            "patch_embed: image {}x{} not divisible by patch size {}",
            s[2], s[3], patch
        )));
    }
    // The patch projection is exactly a stride-P conv with a PxP kernel.
    let maps = g.conv2d(image, w, b, patch, 0)?;
    let tokens = g.map_to_tokens(maps)?;
    g.add_broadcast(tokens, pos)
}

/// Pre-norm self-attention with residual: f' = f + MHSA(LN(f)).
pub fn mhsa_block<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    p: &BlockVars,
    heads: usize,
) -> Result<Var> {
    let d = *g.shape(f).last().unwrap();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!(
            "mhsa_block: width {} not divisible by {} heads",
            d, heads
        )));
    }
    let normed = g.layer_norm(f, p.ln1_gamma, p.ln1_beta, T::from_f64(LN_EPS))?;
    let qkv = g.linear(normed, p.qkv_w, p.qkv_b)?;
    let q = g.slice_last(qkv, 0, d)?;
    let k = g.slice_last(qkv, d, d)?;
    let v = g.slice_last(qkv, 2 * d, d)?;
    let scores = g.attn_scores(q, k, heads)?;
    let probs = g.softmax(scores, 3)?;
    let ctx = g.attn_context(probs, v)?;
    let out = g.linear(ctx, p.proj_w, p.proj_b)?;
    g.add(f, out)
}

/// MLP sublayer with residual and an optional additive adapter delta:
/// returns MLP(LN(f')) + f' (+ delta).
pub fn mlp_block<T: Scalar>(
    g: &mut Graph<T>,
    f_prime: Var,
    p: &BlockVars,
    adapter_delta: Option<Var>,
) -> Result<Var> {
    if let Some(d) = adapter_delta {
        if g.shape(d) != g.shape(f_prime) {
            return Err(Error::Shape(format!(
                "mlp_block: adapter delta {:?} does not match tokens {:?}",
                g.shape(d),
                g.shape(f_prime)
            )));
        }
    }
    let normed = g.layer_norm(f_prime, p.ln2_gamma, p.ln2_beta, T::from_f64(LN_EPS))?;
    let hidden = g.linear(normed, p.fc1_w, p.fc1_b)?;
    let act = g.gelu(hidden)?;
    let mlp_out = g.linear(act, p.fc2_w, p.fc2_b)?;
    let res = g.add(mlp_out, f_prime)?;
    match adapter_delta {
        Some(delta) => g.add(res, delta),
        None => Ok(res),
    }
}

/// Split L blocks into N contiguous stages of L/N blocks each.
pub fn partition_stages(blocks: usize, stages: usize) -> Result<Vec<Range<usize>>> {
    if stages == 0 || blocks % stages != 0 {
        return Err(Error::Config(format!(
            "cannot split {} blocks into {} equal stages",
            blocks, stages
        )));
    }
    let per = blocks / stages;
    Ok((0..stages).map(|i| i * per..(i + 1) * per).collect())
}
