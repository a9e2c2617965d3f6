use serde::{Deserialize, Serialize};

use crate::charset::CharsetSpec;
use crate::error::{Error, Result};

/// Fixed horizontal reduction of the convolutional backbone.
pub const HORIZONTAL_DOWNSCALE: usize = 8;
/// Input line height in pixels.
pub const LINE_HEIGHT: usize = 64;

/// One convolution layer of the backbone, optionally followed by max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    /// `(height, width)` pooling window; `(1, 1)` means no pooling.
    pub pool: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub height: usize,
    pub conv: Vec<ConvLayer>,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub horizontal_downscale: usize,
    pub vocab: CharsetSpec,
    pub max_decode_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2+2 blocks, hidden 128, three conv layers 32→128.
    pub fn tiny() -> Self {
        ModelConfig {
            name: "tiny".into(),
            height: LINE_HEIGHT,
            conv: vec![
                ConvLayer { channels: 32, pool: (4, 2) },
                ConvLayer { channels: 64, pool: (2, 2) },
                ConvLayer { channels: 128, pool: (2, 2) },
            ],
            hidden_dim: 128,
            ff_dim: 512,
            n_heads: 4,
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            horizontal_downscale: HORIZONTAL_DOWNSCALE,
            vocab: CharsetSpec::default(),
            max_decode_len: 48,
        }
    }

    /// Ten-layer VGG-style backbone, 64→512 channels doubling every two layers.
    fn vgg_backbone() -> Vec<ConvLayer> {
        let chans = [64, 64, 128, 128, 256, 256, 512, 512, 512, 512];
        let pools = [(1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1)];
        chans.iter().zip(pools).map(|(&channels, pool)| ConvLayer { channels, pool }).collect()
    }

    pub fn base() -> Self {
        ModelConfig {
            name: "base".into(),
            conv: Self::vgg_backbone(),
            hidden_dim: 512,
            ff_dim: 2048,
            n_heads: 8,
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            ..Self::tiny()
        }
    }

    pub fn large() -> Self {
        ModelConfig {
            name: "large".into(),
            conv: Self::vgg_backbone(),
            hidden_dim: 768,
            ff_dim: 3072,
            n_heads: 12,
            n_encoder_blocks: 6,
            n_decoder_blocks: 6,
            ..Self::tiny()
        }
    }

    /// Smoke-test scale; trains in milliseconds per line.
    pub fn micro() -> Self {
        ModelConfig {
            name: "micro".into(),
            conv: vec![
                ConvLayer { channels: 8, pool: (4, 2) },
                ConvLayer { channels: 16, pool: (4, 2) },
                ConvLayer { channels: 16, pool: (2, 2) },
            ],
            hidden_dim: 32,
            ff_dim: 64,
            n_heads: 2,
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            max_decode_len: 32,
            ..Self::tiny()
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "micro" => Some(Self::micro()),
            "tiny" => Some(Self::tiny()),
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.horizontal_downscale != HORIZONTAL_DOWNSCALE {
            return bad(format!("horizontal_downscale must be {HORIZONTAL_DOWNSCALE}"));
        }
        let pw: usize = self.conv.iter().map(|c| c.pool.1).product();
        if pw != self.horizontal_downscale {
            return bad(format!("backbone pools reduce width by {pw}, expected {}", self.horizontal_downscale));
        }
        let ph: usize = self.conv.iter().map(|c| c.pool.0).product();
        if ph == 0 || self.height % ph != 0 {
            return bad(format!("height {} not divisible by vertical pooling {ph}", self.height));
        }
        if self.conv.is_empty() || self.conv.iter().any(|c| c.channels == 0) {
            return bad("backbone needs at least one non-empty layer".into());
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even for sinusoidal positions".into());
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be positive".into());
        }
        self.vocab.validate()
    }

    /// Height of the final feature map.
    pub fn feature_height(&self) -> usize {
        self.height / self.conv.iter().map(|c| c.pool.0).product::<usize>()
    }

    /// Width of the flattened backbone output per column.
    pub fn flat_dim(&self) -> usize {
        self.conv.last().map_or(0, |c| c.channels) * self.feature_height()
    }

    /// Parameter count computed from the shapes alone.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.ff_dim;
        let v = self.vocab.vocab_size();
        let mut conv = 0;
        let mut c_in = 1;
        for l in &self.conv {
            conv += l.channels * c_in * 9 + l.channels;
            c_in = l.channels;
        }
        let proj = self.flat_dim() * d + d;
        let mha = 4 * (d * d + d);
        let ln = 2 * d;
        let ffn = d * f + f + f * d + d;
        let enc = self.n_encoder_blocks * (mha + 2 * ln + ffn) + ln;
        let dec = self.n_decoder_blocks * (2 * mha + 3 * ln + ffn) + ln;
        let embed_head = v * d + d * v + v;
        conv + proj + enc + dec + embed_head
    }
}
