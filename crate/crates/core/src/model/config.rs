use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Final and mid-level classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Classifier {
    /// Per-level linear layer to class logits.
    Fc,
    /// Dot product of projected point features with the class masks.
    Mask,
}

/// What happens to mid-level decoder features after classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AffineMode {
    /// Features pass through unchanged.
    None,
    /// Per-point normalization with a learned class-agnostic gain and bias.
    Bn,
    /// Per-point normalization with one scale/bias pair predicted from the
    /// class decoder states, averaged over classes.
    AdaIn,
    /// Semantic-affine: class-specific scale/bias blended by confidences.
    Sa,
}

impl Classifier {
    pub fn as_str(self) -> &'static str {
        match self {
            Classifier::Fc => "fc",
            Classifier::Mask => "mask",
        }
    }
}

impl AffineMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AffineMode::None => "none",
            AffineMode::Bn => "bn",
            AffineMode::AdaIn => "adain",
            AffineMode::Sa => "sa",
        }
    }
}

impl FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(Classifier::Fc),
            "mask" => Ok(Classifier::Mask),
            _ => Err(Error::Config(format!("unknown classifier '{s}' (fc|mask)"))),
        }
    }
}

impl FromStr for AffineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AffineMode::None),
            "bn" => Ok(AffineMode::Bn),
            "adain" => Ok(AffineMode::AdaIn),
            "sa" => Ok(AffineMode::Sa),
            _ => Err(Error::Config(format!(
                "unknown affine mode '{s}' (none|bn|adain|sa)"
            ))),
        }
    }
}

impl fmt::Display for Classifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for AffineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Hierarchy levels `L`; levels `L − 1 … 1` are the supervised mid levels.
    pub levels: usize,
    /// Feature width per hierarchy level, finest first.
    pub dims: Vec<usize>,
    pub d_h: usize,
    pub d_m: usize,
    pub isam_depth: usize,
    pub esam_depth: usize,
    pub heads: usize,
    /// Mid stage `s` (1 = coarsest) reads decoder layer `s + level_offset`.
    pub level_offset: usize,
    /// Voxel edge of the first coarsening, meters.
    pub base_voxel: f64,
    pub classifier: Classifier,
    pub affine: AffineMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 4,
            levels: 4,
            dims: vec![32, 64, 96, 128],
            d_h: 64,
            d_m: 64,
            isam_depth: 4,
            esam_depth: 4,
            heads: 8,
            level_offset: 1,
            base_voxel: 0.05,
            classifier: Classifier::Mask,
            affine: AffineMode::Sa,
        }
    }
}

impl ModelConfig {
    /// Full-size dimensions: hidden and mask widths 128, six encoder and six
    /// decoder blocks, decoder layer `s + 2` feeding mid stage `s`.
    pub fn full_size() -> Self {
        ModelConfig {
            d_h: 128,
            d_m: 128,
            isam_depth: 6,
            esam_depth: 6,
            level_offset: 2,
            ..Self::default()
        }
    }

    pub fn uses_esam(&self) -> bool {
        self.classifier == Classifier::Mask || self.uses_affine_heads()
    }

    pub fn uses_affine_heads(&self) -> bool {
        matches!(self.affine, AffineMode::AdaIn | AffineMode::Sa)
    }

    /// Supervised hierarchy levels, coarsest first.
    pub fn mid_levels(&self) -> Vec<usize> {
        (1..self.levels).rev().collect()
    }

    /// Zero-based decoder layer feeding the stage at hierarchy `level`.
    pub fn esam_layer_for(&self, level: usize) -> usize {
        let stage = self.levels - level;
        stage + self.level_offset - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 {
            return bad("classes must be positive".into());
        }
        if self.levels < 2 {
            return bad(format!("levels must be at least 2, got {}", self.levels));
        }
        if self.dims.len() != self.levels {
            return bad(format!(
                "dims lists {} widths for {} levels",
                self.dims.len(),
                self.levels
            ));
        }
        if self.dims.contains(&0) || self.d_h == 0 || self.d_m == 0 {
            return bad("feature widths must be positive".into());
        }
        if self.heads == 0 || self.d_h % self.heads != 0 {
            return bad(format!(
                "d_h {} is not divisible into {} heads",
                self.d_h, self.heads
            ));
        }
        if !(self.base_voxel > 0.0 && self.base_voxel.is_finite()) {
            return bad(format!("base_voxel must be positive, got {}", self.base_voxel));
        }
        if self.uses_esam() && self.esam_depth == 0 {
            return bad("the class-query decoder needs at least one block".into());
        }
        let deepest = self.levels - 1 + self.level_offset;
        if self.uses_affine_heads() && deepest > self.esam_depth {
            return bad(format!(
                "{} mid levels with level offset {} need {} decoder blocks, got {}",
                self.levels - 1,
                self.level_offset,
                deepest,
                self.esam_depth
            ));
        }
        Ok(())
    }
}
