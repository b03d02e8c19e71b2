use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which feature map the serial block's residual connection adds back before
/// its transformer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbResidual {
    /// `TM(C(CR(C(x))) + C(x))`: the first convolution's output.
    #[default]
    FirstConv,
    /// `TM(C(CR(C(x))) + CR(C(x)))`: the second layer's output.
    SecondConv,
}

/// Switches that cut sub-paths out of the network. Each removes parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Serial block without its transformer.
    pub no_sb_tm: bool,
    /// Serial block reduced to its first convolution.
    pub sb_single_conv: bool,
    /// SubNet2 without its two fusion mechanisms; the transformer output
    /// passes through unfused.
    pub no_subnet2_fusion: bool,
    /// SubNet3 without its two improved transformers.
    pub no_itm: bool,
    /// Parallel block without SubNet3; SubNet2's output feeds the residual block.
    pub no_subnet3: bool,
    /// Serial block straight into the residual block.
    pub serial_only: bool,
}

impl Ablation {
    /// Every single-switch ablation, labelled with a human-readable name.
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        let base = Ablation::default();
        vec![
            ("without TM in SB", Ablation { no_sb_tm: true, ..base }),
            ("only a convolutional layer in SB", Ablation { sb_single_conv: true, ..base }),
            ("SubNet2 without two FMs", Ablation { no_subnet2_fusion: true, ..base }),
            ("without ITM", Ablation { no_itm: true, ..base }),
            ("without SubNet3", Ablation { no_subnet3: true, ..base }),
            ("SB and RB only", Ablation { serial_only: true, ..base }),
        ]
    }

    pub(crate) fn sb_tm(&self) -> bool {
        !self.no_sb_tm && !self.sb_single_conv
    }

    pub(crate) fn subnets(&self) -> bool {
        !self.serial_only
    }

    pub(crate) fn subnet3(&self) -> bool {
        !self.serial_only && !self.no_subnet3
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 1 for gray, 3 for color.
    pub image_channels: usize,
    /// Feature width of every convolutional stage.
    pub width: usize,
    /// Side of the attention window, in tokens.
    pub window: usize,
    /// Side of the pixel patch folded into one token. With 1, each pixel is
    /// a token of `width` features.
    pub token_patch: usize,
    pub heads: usize,
    /// CFE hidden width as a multiple of the token dimension.
    pub cfe_hidden_ratio: usize,
    /// Attention score divisor; `None` means `sqrt(head_dim)`.
    pub attn_scale: Option<f64>,
    pub ln_eps: f64,
    pub sb_residual: SbResidual,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::paper(3)
    }
}

impl ModelConfig {
    pub fn paper(image_channels: usize) -> Self {
        ModelConfig {
            image_channels,
            width: 64,
            window: 8,
            token_patch: 1,
            heads: 4,
            cfe_hidden_ratio: 4,
            attn_scale: None,
            ln_eps: 1e-5,
            sb_residual: SbResidual::FirstConv,
            ablation: Ablation::default(),
        }
    }

    /// Desk-scale preset used for gradient checks and toy training.
    pub fn tiny(image_channels: usize) -> Self {
        ModelConfig { width: 8, window: 4, heads: 2, ..ModelConfig::paper(image_channels) }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Features per token.
    pub fn embed_dim(&self) -> usize {
        self.width * self.token_patch * self.token_patch
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.heads
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    pub fn cfe_hidden(&self) -> usize {
        self.embed_dim() * self.cfe_hidden_ratio
    }

    pub fn scale(&self) -> f64 {
        self.attn_scale.unwrap_or_else(|| (self.head_dim() as f64).sqrt())
    }

    /// Input sides are padded up to a multiple of this.
    pub fn spatial_multiple(&self) -> usize {
        self.window * self.token_patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_channels != 1 && self.image_channels != 3 {
            return fail(format!("image_channels must be 1 or 3, got {}", self.image_channels));
        }
        if self.width == 0 || self.heads == 0 || self.token_patch == 0 || self.cfe_hidden_ratio == 0 {
            return fail("width, heads, token_patch and cfe_hidden_ratio must be positive".into());
        }
        if self.embed_dim() % self.heads != 0 {
            return fail(format!("token dimension {} is not divisible by {} heads", self.embed_dim(), self.heads));
        }
        if self.window < 2 {
            return fail(format!("window must be at least 2, got {}", self.window));
        }
        if !(self.ln_eps >= 0.0) {
            return fail(format!("ln_eps must be non-negative, got {}", self.ln_eps));
        }
        if let Some(s) = self.attn_scale {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("attn_scale must be positive, got {s}"));
            }
        }
        Ok(())
    }
}
