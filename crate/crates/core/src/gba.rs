//! Globally-aware Bottleneck Adapter: per-block down-project -> ReLU ->
//! up-project -> learnable scalar scale, producing the additive delta
//! fused with the MLP output.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

/// Graph handles for one adapter: down D -> gba_dim, up gba_dim -> D,
/// and the scalar scale `sc` (shape [1]).
#[derive(Debug, Clone, Copy)]
pub struct GbaVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
    pub sc: Var,
}

/// Adapter branch on the un-normalized MHSA output f':
/// sc * up(relu(down(f'))).
pub fn gba_forward<T: Scalar>(g: &mut Graph<T>, f_prime: Var, p: &GbaVars) -> Result<Var> {
    let d = *g.shape(f_prime).last().unwrap();
    if g.shape(p.down_w)[1] != d {
        return Err(Error::Shape(format!(
            "gba_forward: tokens of width {} but down-projection expects {}",
            d,
            g.shape(p.down_w)[1]
        )));
    }
    let down = g.linear(f_prime, p.down_w, p.down_b)?;
    let act = g.relu(down)?;
    let up = g.linear(act, p.up_w, p.up_b)?;
    g.scale_by_scalar(up, p.sc)
}

/// Exact parameter count of one adapter:
/// down (D*gba_dim + gba_dim) + up (gba_dim*D + D) + sc (1).
pub fn gba_param_count(width: usize, gba_dim: usize) -> usize {
    width * gba_dim + gba_dim + gba_dim * width + width + 1
}
