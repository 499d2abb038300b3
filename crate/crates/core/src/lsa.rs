//! Locally-aware Spatial Adapter: the convolutional pyramid head (LSA-H),
//! the bidirectional cross-attention interactions (LSA-I), and the final
//! linear classifier.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;
use crate::vit::LN_EPS;

pub const BN_EPS: f64 = 1e-5;

/// Channel plan of the head, fixed by the layer table: a three-conv stem at
/// 64 channels plus max-pool, then 128/256/256 stride-2 pyramid convs.
pub const STEM_CHANNELS: usize = 64;
pub const PYRAMID_CHANNELS: [usize; 3] = [128, 256, 256];
/// All pyramid convs are 3x3 pad 1; projectors are 1x1.
pub const CONV_KERNEL: usize = 3;

/// One Conv-BN-ReLU block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvBnVars {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Graph handles for the whole head.
#[derive(Debug, Clone, Copy)]
pub struct LsaHeadVars {
    pub stem: [ConvBnVars; 3],
    pub conv1: ConvBnVars,
    pub conv2: ConvBnVars,
    pub conv3: ConvBnVars,
    pub proj1_w: Var,
    pub proj1_b: Var,
    pub proj2_w: Var,
    pub proj2_b: Var,
    pub proj3_w: Var,
    pub proj3_b: Var,
}

/// Running batch-norm statistics for the six Conv-BN-ReLU blocks, in the
/// same order as the forward pass (stem 0-2, conv1, conv2, conv3).
pub struct LsaHeadStats<'a, T> {
    pub mean: [&'a [T]; 6],
    pub var: [&'a [T]; 6],
}

/// Forward outputs of the head.
pub struct LsaHeadOut {
    /// Concatenated pyramid tokens [B, M, D], ordered (1/8, 1/16, 1/32).
    pub tokens: Var,
    /// The deepest pyramid activation (conv3 block output), kept for
    /// saliency export.
    pub last_activation: Var,
    /// The six batch-norm nodes, for running-stat updates in train mode.
    pub bn_nodes: [Var; 6],
}

/// Spatial extents after each layer of the head for a square input:
/// (conv0-1, conv0-2, conv0-3, pool, conv1, conv2, conv3).
pub fn lsa_head_extents(input: usize) -> [usize; 7] {
    let c01 = (input + 2 - CONV_KERNEL) / 2 + 1;
    let pool = (c01 + 2 - 3) / 2 + 1;
    let c1 = (pool + 2 - CONV_KERNEL) / 2 + 1;
    let c2 = (c1 + 2 - CONV_KERNEL) / 2 + 1;
    let c3 = (c2 + 2 - CONV_KERNEL) / 2 + 1;
    [c01, c01, c01, pool, c1, c2, c3]
}

fn conv_bn_relu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &ConvBnVars,
    stride: usize,
    mean: &[T],
    var: &[T],
) -> Result<(Var, Var)> {
    let c = g.conv2d(x, p.w, p.b, stride, 1)?;
    let bn = g.batch_norm2d(c, p.gamma, p.beta, mean, var, T::from_f64(BN_EPS))?;
    let out = g.relu(bn)?;
    Ok((out, bn))
}

/// The convolutional pyramid: stem + pool to 1/4, then three stride-2
/// blocks at 1/8, 1/16 and 1/32, each projected to width D with a 1x1
/// conv and flattened to tokens; levels are concatenated coarse-last.
pub fn lsa_head<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    p: &LsaHeadVars,
    stats: &LsaHeadStats<'_, T>,
) -> Result<LsaHeadOut> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("lsa_head: image {:?} not rank 4", s)));
    }
    if s[2] % 32 != 0 || s[3] % 32 != 0 {
        return Err(Error::Shape(format!(
            "lsa_head: image {}x{} not divisible by the largest pyramid ratio 32",
            s[2], s[3]
        )));
    }
    let (x, bn0) = conv_bn_relu(g, image, &p.stem[0], 2, stats.mean[0], stats.var[0])?;
    let (x, bn1) = conv_bn_relu(g, x, &p.stem[1], 1, stats.mean[1], stats.var[1])?;
    let (x, bn2) = conv_bn_relu(g, x, &p.stem[2], 1, stats.mean[2], stats.var[2])?;
    let x = g.max_pool2d(x, 3, 2, 1)?;
    let (f8, bn3) = conv_bn_relu(g, x, &p.conv1, 2, stats.mean[3], stats.var[3])?;
    let (f16, bn4) = conv_bn_relu(g, f8, &p.conv2, 2, stats.mean[4], stats.var[4])?;
    let (f32_, bn5) = conv_bn_relu(g, f16, &p.conv3, 2, stats.mean[5], stats.var[5])?;

    let p8 = g.conv2d(f8, p.proj1_w, p.proj1_b, 1, 0)?;
    let p16 = g.conv2d(f16, p.proj2_w, p.proj2_b, 1, 0)?;
    let p32 = g.conv2d(f32_, p.proj3_w, p.proj3_b, 1, 0)?;
    let t8 = g.map_to_tokens(p8)?;
    let t16 = g.map_to_tokens(p16)?;
    let t32 = g.map_to_tokens(p32)?;
    let tokens = g.concat_tokens(&[t8, t16, t32])?;
    Ok(LsaHeadOut {
        tokens,
        last_activation: f32_,
        bn_nodes: [bn0, bn1, bn2, bn3, bn4, bn5],
    })
}

/// Cross-attention parameters: separate LayerNorms for the query and
/// key/value streams, q/k/v projections D -> D with biases, and the
/// output projection.
#[derive(Debug, Clone, Copy)]
pub struct MhcaVars {
    pub ln_q_gamma: Var,
    pub ln_q_beta: Var,
    pub ln_kv_gamma: Var,
    pub ln_kv_beta: Var,
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Multi-head cross-attention with a residual to the query stream:
/// q_seq + Attention(Q = LN(q_seq), K = V = LN(kv_seq)). No feed-forward
/// sublayer follows.
pub fn mhca<T: Scalar>(
    g: &mut Graph<T>,
    q_seq: Var,
    kv_seq: Var,
    p: &MhcaVars,
    heads: usize,
) -> Result<Var> {
    let dq = *g.shape(q_seq).last().unwrap();
    let dkv = *g.shape(kv_seq).last().unwrap();
    if dq != dkv {
        return Err(Error::Shape(format!(
            "mhca: query width {} != key/value width {}",
            dq, dkv
        )));
    }
    let qn = g.layer_norm(q_seq, p.ln_q_gamma, p.ln_q_beta, T::from_f64(LN_EPS))?;
    let kvn = g.layer_norm(kv_seq, p.ln_kv_gamma, p.ln_kv_beta, T::from_f64(LN_EPS))?;
    let q = g.linear(qn, p.q_w, p.q_b)?;
    let k = g.linear(kvn, p.k_w, p.k_b)?;
    let v = g.linear(kvn, p.v_w, p.v_b)?;
    let scores = g.attn_scores(q, k, heads)?;
    let probs = g.softmax(scores, 3)?;
    let ctx = g.attn_context(probs, v)?;
    let out = g.linear(ctx, p.out_w, p.out_b)?;
    g.add(q_seq, out)
}

/// Stage-entry interaction: spatial tokens injected into the ViT stream
/// (query = f_vit, key/value = f_spa).
pub fn lsa_inject<T: Scalar>(
    g: &mut Graph<T>,
    f_vit: Var,
    f_spa: Var,
    p: &MhcaVars,
    heads: usize,
) -> Result<Var> {
    mhca(g, f_vit, f_spa, p, heads)
}

/// Stage-exit interaction with the roles switched: the spatial stream
/// queries the ViT output (query = f_spa, key/value = f_vit).
pub fn lsa_extract<T: Scalar>(
    g: &mut Graph<T>,
    f_spa: Var,
    f_vit_end: Var,
    p: &MhcaVars,
    heads: usize,
) -> Result<Var> {
    mhca(g, f_spa, f_vit_end, p, heads)
}

/// Mean-pool the final token stream and apply the linear classifier.
pub fn classify<T: Scalar>(g: &mut Graph<T>, tokens: Var, w: Var, b: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || g.shape(w)[1] != s[2] {
        return Err(Error::Shape(format!(
            "classify: tokens {:?} vs classifier weight {:?}",
            s,
            g.shape(w)
        )));
    }
    let classes = g.shape(w)[0];
    let pooled = g.mean_pool_tokens(tokens)?;
    let as_tokens = g.reshape(pooled, &[s[0], 1, s[2]])?;
    let logits = g.linear(as_tokens, w, b)?;
    g.reshape(logits, &[s[0], classes])
}
