use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub patch_size: usize,
    pub volume_side: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub mask_ratio: f64,
    pub ffn_mult: usize,
    pub fusion_hidden: usize,
    pub ln_eps: f64,
    pub tau_init: f64,
    /// Score reconstruction on every maskable position instead of only the
    /// masked ones.
    pub recon_all_positions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small defaults that train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            patch_size: 8,
            volume_side: 32,
            vocab_size: 0,
            max_len: 70,
            n_classes: 3,
            mask_ratio: 0.5,
            ffn_mult: 4,
            fusion_hidden: 64,
            ln_eps: 1e-5,
            tau_init: 0.07,
            recon_all_positions: false,
        }
    }

    /// Full-size hyperparameters (768 wide, 12 heads, 24 encoder and 8 decoder
    /// layers, 128³ volumes in 16³ patches).
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 12,
            n_enc_layers: 24,
            n_dec_layers: 8,
            patch_size: 16,
            volume_side: 128,
            fusion_hidden: 768,
            ..ModelConfig::desk()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.volume_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side().pow(3)
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.patch_size == 0 || self.volume_side == 0 || !self.volume_side.is_multiple_of(self.patch_size) {
            return bad(format!("patch size {} must divide volume side {}", self.patch_size, self.volume_side));
        }
        if self.vocab_size <= crate::data::UNK_ID {
            return bad(format!("vocab_size {} leaves no room for the reserved tokens", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes {} must be at least 2", self.n_classes));
        }
        if self.ffn_mult == 0 || self.fusion_hidden == 0 {
            return bad("ffn_mult and fusion_hidden must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if !(0.01..=1.0).contains(&self.tau_init) {
            return bad(format!("tau_init {} outside [0.01, 1]", self.tau_init));
        }
        Ok(())
    }
}
