//! Architectural hyperparameters and freeze policies.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which parameter groups receive gradients during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezePolicy {
    /// Adapters and classifier trainable, backbone frozen.
    AdapterOnly,
    /// AdapterOnly plus the self-attention projections of the first block.
    #[serde(rename = "AdapterPlusBlock1MHSA")]
    AdapterPlusBlock1Mhsa,
    /// Only the classifier head.
    LinearProbe,
    /// Everything trainable.
    FullTuning,
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AdapterOnly" => Ok(Self::AdapterOnly),
            "AdapterPlusBlock1MHSA" => Ok(Self::AdapterPlusBlock1Mhsa),
            "LinearProbe" => Ok(Self::LinearProbe),
            "FullTuning" => Ok(Self::FullTuning),
            other => Err(Error::Config(format!(
                "unknown freeze policy {:?} (expected AdapterOnly, AdapterPlusBlock1MHSA, LinearProbe or FullTuning)",
                other
            ))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Full architectural configuration of the adapted ViT.
///
/// The spatial-adapter pyramid is structurally fixed at 1/8, 1/16 and 1/32
/// of the input resolution (three stride-2 reductions after the stem), so
/// `pyramid_ratios` must be `[8, 16, 32]`; the field exists to make the
/// token-count bookkeeping explicit in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer blocks L.
    pub blocks: usize,
    /// Embedding width D.
    pub width: usize,
    /// Hidden size of each block's MLP.
    pub mlp_dim: usize,
    /// Self-attention heads H.
    pub heads: usize,
    /// Patch size P in pixels.
    pub patch: usize,
    /// Input resolution (height, width) in pixels.
    pub image: (usize, usize),
    /// Input channels.
    pub channels: usize,
    /// Stage count N; blocks are split evenly into stages.
    pub stages: usize,
    /// Bottleneck width of each globally-aware adapter.
    pub gba_dim: usize,
    /// Cross-attention heads of the spatial-adapter interactions.
    pub lsa_heads: usize,
    /// Downsampling factors of the three pyramid levels.
    pub pyramid_ratios: (usize, usize, usize),
    /// Output classes (2: real vs fake).
    pub num_classes: usize,
    pub freeze_policy: FreezePolicy,
    /// Enable the bottleneck adapters (ablation switch).
    #[serde(default = "default_true")]
    pub use_gba: bool,
    /// Enable the spatial adapter (ablation switch). When off, the
    /// classifier reads mean-pooled backbone tokens instead.
    #[serde(default = "default_true")]
    pub use_lsa: bool,
}

impl ModelConfig {
    /// The configuration from the paper's model table: ViT-Base/16 at 224,
    /// 64-wide bottlenecks, 3 stages, 6 cross-attention heads.
    pub fn paper_table1() -> Self {
        Self {
            blocks: 12,
            width: 768,
            mlp_dim: 3072,
            heads: 12,
            patch: 16,
            image: (224, 224),
            channels: 3,
            stages: 3,
            gba_dim: 64,
            lsa_heads: 6,
            pyramid_ratios: (8, 16, 32),
            num_classes: 2,
            freeze_policy: FreezePolicy::AdapterOnly,
            use_gba: true,
            use_lsa: true,
        }
    }

    /// Desk-scale configuration used by tests and the bundled `tiny.json`.
    pub fn tiny() -> Self {
        Self {
            blocks: 6,
            width: 64,
            mlp_dim: 128,
            heads: 4,
            patch: 8,
            image: (64, 64),
            channels: 3,
            stages: 3,
            gba_dim: 8,
            lsa_heads: 2,
            pyramid_ratios: (8, 16, 32),
            num_classes: 2,
            freeze_policy: FreezePolicy::AdapterOnly,
            use_gba: true,
            use_lsa: true,
        }
    }

    /// Number of patch tokens K.
    pub fn num_patches(&self) -> usize {
        (self.image.0 / self.patch) * (self.image.1 / self.patch)
    }

    /// Number of spatial-adapter tokens M (sum of the three pyramid levels).
    pub fn num_spatial_tokens(&self) -> usize {
        let (h, w) = self.image;
        let (r1, r2, r3) = self.pyramid_ratios;
        h * w / (r1 * r1) + h * w / (r2 * r2) + h * w / (r3 * r3)
    }

    /// Blocks per stage (L/N).
    pub fn blocks_per_stage(&self) -> usize {
        self.blocks / self.stages
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.blocks == 0 || self.stages == 0 {
            return fail("blocks and stages must be positive".into());
        }
        if self.blocks % self.stages != 0 {
            return fail(format!(
                "blocks {} not divisible into {} stages",
                self.blocks, self.stages
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.lsa_heads == 0 || self.width % self.lsa_heads != 0 {
            return fail(format!(
                "width {} not divisible by {} cross-attention heads",
                self.width, self.lsa_heads
            ));
        }
        let (h, w) = self.image;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                h, w, self.patch
            ));
        }
        if self.pyramid_ratios != (8, 16, 32) {
            return fail(format!(
                "pyramid_ratios {:?} unsupported: the spatial-adapter stem realizes exactly (8, 16, 32)",
                self.pyramid_ratios
            ));
        }
        for r in [self.pyramid_ratios.0, self.pyramid_ratios.1, self.pyramid_ratios.2] {
            if h % r != 0 || w % r != 0 {
                return fail(format!("image {}x{} not divisible by pyramid ratio {}", h, w, r));
            }
        }
        if self.gba_dim == 0 || self.gba_dim >= self.width {
            return fail(format!(
                "gba_dim {} must be a bottleneck (positive and < width {})",
                self.gba_dim, self.width
            ));
        }
        if self.num_classes != 2 {
            return fail(format!("num_classes must be 2 for detection, got {}", self.num_classes));
        }
        if self.channels == 0 || self.mlp_dim == 0 {
            return fail("channels and mlp_dim must be positive".into());
        }
        Ok(())
    }
}
