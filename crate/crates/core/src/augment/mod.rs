//! Stochastic perturbations: shared-parameter geometric transforms, colour
//! jitter, box masks for Cutout and CutMix, ICT blending and VAT
//! directions.
//!
//! Samplers take an explicit RNG so every draw can be replayed; the drawn
//! parameters are plain serializable values.

mod affine;
mod colour;
mod mask;
mod vat;

pub use affine::{
    apply_affine, apply_affine_classes, apply_affine_map, sample_affine, AffineParams, AffineRanges, ValidityMask,
};
pub use colour::{apply_colour, hsv_to_rgb, rgb_to_hsv, sample_colour, ColourOp, ColourParams, ColourRanges, LUMA};
pub use mask::{cutout_apply, ict_mix, mix, sample_box_mask, BoxRecord, MaskKind, MixMask, Rect};
pub use vat::{kl_mean, vat_direction, VatConfig};

#[cfg(test)]
pub(crate) use vat::tests as vat_tests;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub affine: AffineRanges,
    /// Colour jitter on student inputs of the consistency path.
    pub colour: bool,
    pub colour_ranges: ColourRanges,
    /// Box area as a fraction of the image for Cutout and CutMix.
    pub mask_ratio: f64,
    pub vat: VatConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            affine: AffineRanges::default(),
            colour: false,
            colour_ranges: ColourRanges::default(),
            mask_ratio: 0.5,
            vat: VatConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.affine.validate()?;
        self.colour_ranges.validate()?;
        self.vat.validate()?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", format!("must be in (0, 1), got {}", self.mask_ratio)));
        }
        Ok(())
    }
}
