//! The mmFormer network: four hybrid modality-specific encoders (stacked
//! convolutions plus an intra-modal Transformer), a modality-correlated
//! inter-modal Transformer over the concatenated token sequence, and a
//! convolutional decoder with multimodal skip connections. Auxiliary heads
//! (a shared-weight per-modality decoder and deep supervision at every
//! decoder stage) regularize training under missing modalities.

mod count;
mod net;
mod params;

pub use count::{count_params_flops, flops_estimate};
pub use net::{
    build_multimodal_token, concat_modality_tokens, conv_encoder_forward, fuse_and_decode,
    intra_modal_transformer, mmformer_forward, multi_head_self_attention, transformer_block,
    tokenize, EncodedModality, ModelOutput,
};
pub use params::{init_params, param_specs, Init, ModelParams, ParamSpec};

use std::fmt;

use crate::tensor::TensorError;

#[derive(Debug)]
pub enum ModelError {
    BadConfig(String),
    AllMasked,
    UnknownModality(String),
    MissingParam(String),
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::AllMasked => write!(f, "modality mask must keep at least one modality"),
            ModelError::UnknownModality(name) => write!(f, "unknown modality name: {name}"),
            ModelError::MissingParam(name) => write!(f, "parameter not found: {name}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// One MRI contrast. The declaration order is the canonical order used for
/// token concatenation, skip concatenation, and every report column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityId {
    Flair,
    T1c,
    T1,
    T2,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [ModalityId::Flair, ModalityId::T1c, ModalityId::T1, ModalityId::T2];

    pub fn index(self) -> usize {
        match self {
            ModalityId::Flair => 0,
            ModalityId::T1c => 1,
            ModalityId::T1 => 2,
            ModalityId::T2 => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModalityId::Flair => "FLAIR",
            ModalityId::T1c => "T1c",
            ModalityId::T1 => "T1",
            ModalityId::T2 => "T2",
        }
    }

    /// Short lowercase tag used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            ModalityId::Flair => "flair",
            ModalityId::T1c => "t1c",
            ModalityId::T1 => "t1",
            ModalityId::T2 => "t2",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ModelError> {
        match name.trim().to_ascii_lowercase().as_str() {
            "flair" | "f" => Ok(ModalityId::Flair),
            "t1c" => Ok(ModalityId::T1c),
            "t1" => Ok(ModalityId::T1),
            "t2" => Ok(ModalityId::T2),
            other => Err(ModelError::UnknownModality(other.to_string())),
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-modality availability indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    delta: [bool; 4],
}

impl ModalityMask {
    pub fn new(delta: [bool; 4]) -> Self {
        ModalityMask { delta }
    }

    pub fn all() -> Self {
        ModalityMask { delta: [true; 4] }
    }

    pub fn single(m: ModalityId) -> Self {
        let mut delta = [false; 4];
        delta[m.index()] = true;
        ModalityMask { delta }
    }

    pub fn present(&self, m: ModalityId) -> bool {
        self.delta[m.index()]
    }

    pub fn count(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn missing_count(&self) -> usize {
        4 - self.count()
    }

    pub fn any(&self) -> bool {
        self.delta.iter().any(|&d| d)
    }

    pub fn delta(&self) -> [bool; 4] {
        self.delta
    }

    pub fn iter_present(&self) -> impl Iterator<Item = ModalityId> + '_ {
        ModalityId::ALL.into_iter().filter(|m| self.present(*m))
    }

    /// Parse a comma-separated list of modality names, e.g. `FLAIR,T2`.
    pub fn from_names(csv: &str) -> Result<Self, ModelError> {
        let mut delta = [false; 4];
        for part in csv.split(',') {
            if part.trim().is_empty() {
                continue;
            }
            delta[ModalityId::parse(part)?.index()] = true;
        }
        let mask = ModalityMask { delta };
        if !mask.any() {
            return Err(ModelError::AllMasked);
        }
        Ok(mask)
    }

    /// Available/missing glyphs in canonical order, as printed in reports.
    pub fn bullets(&self) -> String {
        self.delta.iter().map(|&d| if d { '●' } else { '○' }).collect()
    }

    /// 0/1 flags in canonical order.
    pub fn flags(&self) -> [u8; 4] {
        let mut out = [0u8; 4];
        for (o, &d) in out.iter_mut().zip(&self.delta) {
            *o = d as u8;
        }
        out
    }

    pub fn names(&self) -> String {
        self.iter_present().map(|m| m.label()).collect::<Vec<_>>().join("+")
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder/decoder stages (spatial halvings plus one).
    pub stages: usize,
    /// Channel width at each stage.
    pub channels: Vec<usize>,
    /// Token embedding width C'.
    pub token_dim: usize,
    /// Attention heads.
    pub heads: usize,
    /// FFN hidden width as a multiple of the token width.
    pub ffn_mult: usize,
    /// Transformer depth of each intra-modal encoder.
    pub intra_depth: usize,
    /// Transformer depth of the inter-modal encoder.
    pub inter_depth: usize,
    /// Group-norm groups.
    pub groups: usize,
    /// Output class channels (nested regions WT, TC, ET).
    pub classes: usize,
    /// Cubic input extent.
    pub extent: usize,
    pub use_intra: bool,
    pub use_inter: bool,
    pub use_aux: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: full channel widths at a 32-voxel extent.
    pub fn desk() -> Self {
        ModelConfig {
            stages: 5,
            channels: vec![16, 32, 64, 128, 256],
            token_dim: 256,
            heads: 8,
            ffn_mult: 4,
            intra_depth: 1,
            inter_depth: 1,
            groups: 8,
            classes: 3,
            extent: 32,
            use_intra: true,
            use_inter: true,
            use_aux: true,
        }
    }

    /// Full-scale configuration (128-voxel inputs).
    pub fn paper_scale() -> Self {
        ModelConfig { extent: 128, ..ModelConfig::desk() }
    }

    /// Reduced configuration that trains in minutes on a CPU.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: vec![8, 16, 32, 64, 128],
            token_dim: 128,
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages < 2 {
            return Err(ModelError::BadConfig(format!("need at least 2 stages, got {}", self.stages)));
        }
        if self.channels.len() != self.stages {
            return Err(ModelError::BadConfig(format!(
                "channels list has {} entries for {} stages",
                self.channels.len(),
                self.stages
            )));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(ModelError::BadConfig(format!(
                    "stage channels {c} not divisible by {} groups",
                    self.groups
                )));
            }
        }
        if self.token_dim == 0 || self.token_dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "token dim {} not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        let down = 1usize << (self.stages - 1);
        if self.extent == 0 || self.extent % down != 0 {
            return Err(ModelError::BadConfig(format!(
                "extent {} not divisible by 2^{}",
                self.extent,
                self.stages - 1
            )));
        }
        if self.classes == 0 {
            return Err(ModelError::BadConfig("classes must be positive".into()));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::BadConfig("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    /// Bottleneck extent after `stages - 1` halvings.
    pub fn bottleneck_extent(&self) -> usize {
        self.extent >> (self.stages - 1)
    }

    /// Tokens per modality: the flattened bottleneck volume.
    pub fn token_count(&self) -> usize {
        let e = self.bottleneck_extent();
        e * e * e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_flair_t1c_t1_t2() {
        let labels: Vec<&str> = ModalityId::ALL.iter().map(|m| m.label()).collect();
        assert_eq!(labels, vec!["FLAIR", "T1c", "T1", "T2"]);
    }

    #[test]
    fn mask_parsing_and_rendering() {
        let m = ModalityMask::from_names("FLAIR,T2").unwrap();
        assert!(m.present(ModalityId::Flair));
        assert!(!m.present(ModalityId::T1c));
        assert!(!m.present(ModalityId::T1));
        assert!(m.present(ModalityId::T2));
        assert_eq!(m.bullets(), "●○○●");
        assert_eq!(m.flags(), [1, 0, 0, 1]);
        assert_eq!(m.count(), 2);
        assert!(ModalityMask::from_names("").is_err());
        assert!(ModalityMask::from_names("t3").is_err());
    }

    #[test]
    fn token_count_matches_shape_formula() {
        // 128^3 input with 5 stages: 128^3 / 2^12 = 512 tokens.
        let cfg = ModelConfig::paper_scale();
        assert_eq!(cfg.token_count(), 512);
        // 32^3 input: 8 tokens.
        assert_eq!(ModelConfig::desk().token_count(), 8);
    }

    #[test]
    fn config_validation_rejects_bad_divisibility() {
        let mut cfg = ModelConfig::desk();
        cfg.extent = 40; // not divisible by 16
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.channels = vec![10, 32, 64, 128, 256]; // 10 % 8 != 0
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk();
        cfg.token_dim = 250; // not divisible by 8 heads
        assert!(cfg.validate().is_err());

        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
    }
}
