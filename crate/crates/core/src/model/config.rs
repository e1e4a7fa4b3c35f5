use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Mean of token embeddings.
    EmbedMean,
    /// Pre-norm self-attention blocks followed by mean pooling.
    Attn,
}

fn d_embed() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_max_len() -> usize {
    512
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    5
}
fn d_freeze() -> f64 {
    0.3
}
fn d_mode() -> EncoderMode {
    EncoderMode::Attn
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: u32,
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_mode")]
    pub encoder_mode: EncoderMode,
    #[serde(default = "d_layers")]
    pub attn_layers: usize,
    #[serde(default = "d_heads")]
    pub attn_heads: usize,
    /// Defaults to `4 * embed_dim`.
    #[serde(default)]
    pub ffn_dim: Option<usize>,
    /// Includes the bos and eos positions.
    #[serde(default = "d_max_len")]
    pub max_len: usize,
    /// Defaults to `embed_dim`.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Fraction of the first epoch during which only the head trains.
    #[serde(default = "d_freeze")]
    pub freeze_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: u32, encoder_mode: EncoderMode) -> Self {
        Self {
            vocab_size,
            embed_dim: d_embed(),
            encoder_mode,
            attn_layers: d_layers(),
            attn_heads: d_heads(),
            ffn_dim: None,
            max_len: d_max_len(),
            head_hidden: None,
            lr: d_lr(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            freeze_frac: d_freeze(),
            seed: 0,
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim.unwrap_or(4 * self.embed_dim)
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.embed_dim)
    }

    pub fn layers(&self) -> usize {
        match self.encoder_mode {
            EncoderMode::EmbedMean => 0,
            EncoderMode::Attn => self.attn_layers,
        }
    }

    /// Embedding rows: units plus pad, bos and eos.
    pub fn n_tokens(&self) -> usize {
        self.vocab_size as usize + 3
    }

    pub fn pad_id(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn bos_id(&self) -> usize {
        self.vocab_size as usize + 1
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size as usize + 2
    }

    /// Copy with the derived defaults written out.
    pub fn resolved(&self) -> Self {
        Self {
            ffn_dim: Some(self.ffn_dim()),
            head_hidden: Some(self.head_hidden()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.ffn_dim() == 0 || self.head_hidden() == 0 {
            return bad("all dimensions must be positive".into());
        }
        if self.encoder_mode == EncoderMode::Attn {
            if self.attn_heads == 0 || self.embed_dim % self.attn_heads != 0 {
                return bad(format!(
                    "embed_dim {} is not divisible by attn_heads {}",
                    self.embed_dim, self.attn_heads
                ));
            }
            if self.attn_layers == 0 {
                return bad("attn mode needs at least one layer".into());
            }
        }
        if self.max_len < 2 {
            return bad("max_len must leave room for bos and eos".into());
        }
        if !(0.0..=1.0).contains(&self.freeze_frac) {
            return bad(format!("freeze_frac {} outside [0, 1]", self.freeze_frac));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_json() {
        let c: ModelConfig = serde_json::from_str(r#"{"vocab_size": 200}"#).unwrap();
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.ffn_dim(), 256);
        assert_eq!(c.head_hidden(), 64);
        assert_eq!(c.encoder_mode, EncoderMode::Attn);
        assert_eq!(c.freeze_frac, 0.3);
        c.validate().unwrap();
        assert!(serde_json::from_str::<ModelConfig>(r#"{"vocab_size": 2, "bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid() {
        let mut c = ModelConfig::new(10, EncoderMode::Attn);
        c.embed_dim = 10;
        c.attn_heads = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(10, EncoderMode::EmbedMean);
        c.freeze_frac = 1.5;
        assert!(c.validate().is_err());
    }
}
