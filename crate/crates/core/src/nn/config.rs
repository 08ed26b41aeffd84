use alloc::format;

use crate::autograd::ConvGeometry;
use crate::error::ModelError;

/// Architecture hyper-parameters of the encoder-decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub max_positions: usize,
    /// Share the decoder input embedding with the output projection.
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// CPU-sized model used by the examples and tests.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            ffn_dim: 128,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            conv_layers: 2,
            conv_kernel: 5,
            conv_stride: 2,
            dropout: 0.1,
            vocab_size,
            feat_dim: 16,
            max_positions: 512,
            tie_embeddings: true,
        }
    }

    /// 256-wide model with 12 encoder and 6 decoder layers.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            ffn_dim: 2048,
            heads: 4,
            enc_layers: 12,
            dec_layers: 6,
            dropout: 0.3,
            feat_dim: 80,
            max_positions: 1024,
            ..Self::toy(vocab_size)
        }
    }

    /// 512-wide model with 12 encoder and 6 decoder layers.
    pub fn medium(vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            heads: 8,
            ..Self::small(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy(vocab_size)),
            "small" => Some(Self::small(vocab_size)),
            "medium" => Some(Self::medium(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::Config(msg.into()));
        if self.d_model == 0
            || self.ffn_dim == 0
            || self.heads == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.vocab_size == 0
            || self.feat_dim == 0
            || self.max_positions == 0
            || self.conv_kernel == 0
        {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.conv_stride.checked_pow(self.conv_layers as u32) != Some(4) {
            return Err(ModelError::Config(format!(
                "conv_stride^conv_layers = {}^{} must down-sample by 4",
                self.conv_stride, self.conv_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn conv_geometry(&self) -> ConvGeometry {
        ConvGeometry {
            kernel: self.conv_kernel,
            stride: self.conv_stride,
            pad: self.conv_kernel / 2,
        }
    }

    /// Encoder length after the convolutional down-sampler.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        let g = self.conv_geometry();
        (0..self.conv_layers).fold(frames, |n, _| g.out_len(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["toy", "small", "medium"] {
            ModelConfig::preset(name, 60).unwrap().validate().unwrap();
        }
        let m = ModelConfig::medium(60);
        assert_eq!((m.d_model, m.ffn_dim, m.heads), (512, 2048, 8));
        let s = ModelConfig::small(60);
        assert_eq!(
            (s.d_model, s.ffn_dim, s.heads, s.enc_layers, s.dec_layers),
            (256, 2048, 4, 12, 6)
        );
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy(10);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.conv_stride = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn subsampling_lengths() {
        let c = ModelConfig::toy(10);
        let g = c.conv_geometry();
        assert_eq!((g.out_len(37), g.out_len(19)), (19, 10));
        assert_eq!(c.subsampled_len(37), 10);
        assert_eq!((g.out_len(4), g.out_len(2)), (2, 1));
        assert_eq!(c.subsampled_len(4), 1);
    }
}
