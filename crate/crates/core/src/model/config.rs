use crate::error::{Error, Result};

/// Encoder depths the shipped default uses.
///
/// The per-stage block count is a free parameter of the architecture. These
/// depths are the result of [`crate::complexity::tune_depths`] against the
/// reference 11.14M parameters / 17.13 GFLOPs at 256x256 (see README).
pub const TUNED_BLOCKS_PER_STAGE: [usize; 5] = [1, 4, 2, 2, 0];

/// Two blocks in every stage, the untuned starting point.
pub const UNIFORM_BLOCKS_PER_STAGE: [usize; 5] = [2, 2, 2, 2, 2];

/// Number of resolution levels; inputs must be divisible by `2^(LEVELS-1)`.
pub const LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    /// Pooling token-mixer window (odd).
    pub mixer_kernel: usize,
    pub ffn_ratio: usize,
    pub spp_bins: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm_eps: f64,
    /// Use `Pool(x) - x` as the token mixer instead of `Pool(x)`.
    pub mixer_subtract_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_widths: vec![32, 64, 128, 256, 512],
            blocks_per_stage: TUNED_BLOCKS_PER_STAGE.to_vec(),
            mixer_kernel: 3,
            ffn_ratio: 4,
            spp_bins: vec![1, 2, 3, 6],
            in_channels: 3,
            out_channels: 1,
            norm_eps: 1e-5,
            mixer_subtract_input: false,
        }
    }
}

impl ModelConfig {
    pub fn with_blocks(mut self, blocks: &[usize]) -> Self {
        self.blocks_per_stage = blocks.to_vec();
        self
    }

    pub fn bottleneck_width(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != LEVELS || self.blocks_per_stage.len() != LEVELS {
            return Err(Error::Config(format!(
                "stage_widths and blocks_per_stage need {LEVELS} entries, got {} and {}",
                self.stage_widths.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_widths.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.ffn_ratio < 1 {
            return Err(Error::Config("ffn_ratio must be >= 1".into()));
        }
        if self.mixer_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mixer_kernel must be odd, got {}",
                self.mixer_kernel
            )));
        }
        if self.spp_bins.is_empty() || self.spp_bins.contains(&0) {
            return Err(Error::Config("spp_bins must be a non-empty list of values >= 1".into()));
        }
        let c = self.bottleneck_width();
        if !c.is_multiple_of(self.spp_bins.len()) {
            return Err(Error::Config(format!(
                "bottleneck width {c} is not divisible by the {} SPP branches",
                self.spp_bins.len()
            )));
        }
        if !self.norm_eps.is_finite() || self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Reference U-Net used for the complexity comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            widths: vec![64, 128, 256, 512, 1024],
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != LEVELS || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "U-Net needs {LEVELS} non-zero widths, got {:?}",
                self.widths
            )));
        }
        if self.widths.iter().skip(1).any(|w| w % 2 != 0) {
            return Err(Error::Config("U-Net widths below the top level must be even".into()));
        }
        Ok(())
    }
}

/// Which network a graph implements.
#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    MfenNet(ModelConfig),
    UNet(UNetConfig),
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::MfenNet(_) => "mfennet",
            Arch::UNet(_) => "unet",
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Arch::MfenNet(c) => c.in_channels,
            Arch::UNet(c) => c.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Arch::MfenNet(c) => c.out_channels,
            Arch::UNet(c) => c.out_channels,
        }
    }
}
