use serde::{Deserialize, Serialize};

use super::{NetError, Result};

/// Architecture of the residual classifier: a strided stem convolution,
/// `block_channels.len()` residual blocks and a dense softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_leads: usize,
    pub input_len: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Output channels of each residual block.
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Temporal subsampling applied by every residual block.
    pub block_downsample: usize,
    pub dropout: f64,
    pub n_classes: usize,
}

impl Default for NetConfig {
    /// Desk-scale network: two blocks, 16 then 32 channels, kernel 17.
    fn default() -> Self {
        Self {
            input_leads: 12,
            input_len: 4096,
            stem_channels: 16,
            stem_stride: 8,
            block_channels: vec![16, 32],
            kernel_size: 17,
            block_downsample: 2,
            dropout: 0.5,
            n_classes: 3,
        }
    }
}

impl NetConfig {
    /// Five residual blocks with the channel progression of the original
    /// ECG residual network.
    pub fn five_block() -> Self {
        Self {
            stem_channels: 64,
            stem_stride: 1,
            block_channels: vec![64, 128, 196, 256, 320],
            block_downsample: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.input_leads == 0 || self.stem_channels == 0 || self.n_classes < 2 {
            return bad("leads, stem channels and classes must be positive (≥2 classes)".into());
        }
        if self.block_channels.contains(&0) {
            return bad("block channel counts must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.stem_stride == 0 || self.block_downsample == 0 {
            return bad("strides must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let lengths = self.temporal_lengths();
        if let Some(&last) = lengths.last() {
            if last < 4 {
                return bad(format!(
                    "temporal length shrinks to {last} (< 4): {lengths:?}"
                ));
            }
        }
        Ok(())
    }

    /// Temporal length after the stem and after each block.
    pub fn temporal_lengths(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.block_channels.len() + 1);
        let mut len = conv_out_len(self.input_len, self.kernel_size, self.stem_stride);
        out.push(len);
        for _ in &self.block_channels {
            len = conv_out_len(len, self.kernel_size, self.block_downsample);
            out.push(len);
        }
        out
    }

    pub fn input_size(&self) -> usize {
        self.input_leads * self.input_len
    }
}

/// Output length of a "same"-padded convolution with odd kernel.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> usize {
    let pad = (kernel - 1) / 2;
    (len + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_factor: 0.1,
            plateau_patience: 7,
            min_lr: 1e-7,
            max_epochs: 70,
            weight_decay: 5e-4,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!(
                "lr_factor must lie in (0, 1), got {}",
                self.lr_factor
            ));
        }
        if !(self.initial_lr > 0.0) || !(self.min_lr < self.initial_lr) {
            return bad(format!(
                "need 0 < initial_lr and min_lr < initial_lr, got {} / {}",
                self.initial_lr, self.min_lr
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative".into());
        }
        Ok(())
    }
}
