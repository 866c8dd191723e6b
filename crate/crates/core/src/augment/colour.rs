use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::affine::uniform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColourOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

impl ColourOp {
    pub const ALL: [ColourOp; 4] = [ColourOp::Brightness, ColourOp::Contrast, ColourOp::Saturation, ColourOp::Hue];
}

/// One drawn colour jitter, replayable thanks to the stored op order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColourParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation in turns.
    pub hue: f64,
    pub op_order: [ColourOp; 4],
}

impl Default for ColourParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl ColourParams {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        op_order: ColourOp::ALL,
    };

    pub fn is_identity(&self) -> bool {
        self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0 && self.hue == 0.0
    }
}

/// Jitter magnitudes: factors are drawn from `[1 - m, 1 + m]`, hue from
/// `[-hue, hue]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColourRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColourRanges {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

impl ColourRanges {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config("colour ranges", format!("{name} magnitude must be in [0, 1), got {m}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config("colour ranges", format!("hue magnitude must be in [0, 0.5], got {}", self.hue)));
        }
        Ok(())
    }
}

const MIN_FACTOR: f64 = 1e-6;

pub fn sample_colour(rng: &mut impl Rng, ranges: &ColourRanges) -> Result<ColourParams> {
    ranges.validate()?;
    let factor = |rng: &mut _, m: f64| uniform(rng, (1.0 - m, 1.0 + m)).max(MIN_FACTOR);
    let brightness = factor(rng, ranges.brightness);
    let contrast = factor(rng, ranges.contrast);
    let saturation = factor(rng, ranges.saturation);
    let hue = uniform(rng, (-ranges.hue, ranges.hue));
    let mut op_order = ColourOp::ALL;
    op_order.shuffle(rng);
    Ok(ColourParams {
        brightness,
        contrast,
        saturation,
        hue,
        op_order,
    })
}

const RANGE_TOL: f64 = 1e-6;

/// Applies the jitter to a `[3,H,W]` RGB image in `[0,1]`. Every op
/// clamps back into `[0,1]`; identity factors are skipped so the identity
/// jitter is exact.
pub fn apply_colour(image: &Tensor, p: &ColourParams) -> Result<Tensor> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::config(
            "apply_colour",
            format!("expected a [3,H,W] RGB image, got {:?}", image.shape()),
        ));
    };
    if let Some(bad) = image
        .data()
        .iter()
        .find(|v| !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(*v))
    {
        return Err(Error::Range(format!("apply_colour: input value {bad} outside [0, 1]")));
    }
    let hw = h * w;
    let mut px: Vec<[f64; 3]> = (0..hw)
        .map(|k| {
            let d = image.data();
            [d[k], d[hw + k], d[2 * hw + k]].map(|v| v.clamp(0.0, 1.0))
        })
        .collect();
    for op in p.op_order {
        match op {
            ColourOp::Brightness if p.brightness != 1.0 => {
                for rgb in &mut px {
                    *rgb = rgb.map(|v| (p.brightness * v).clamp(0.0, 1.0));
                }
            }
            ColourOp::Contrast if p.contrast != 1.0 => {
                let mean = px.iter().map(luma).sum::<f64>() / hw as f64;
                let c = p.contrast;
                for rgb in &mut px {
                    *rgb = rgb.map(|v| (c * v + (1.0 - c) * mean).clamp(0.0, 1.0));
                }
            }
            ColourOp::Saturation if p.saturation != 1.0 => {
                let s = p.saturation;
                for rgb in &mut px {
                    let l = luma(rgb);
                    *rgb = rgb.map(|v| (s * v + (1.0 - s) * l).clamp(0.0, 1.0));
                }
            }
            ColourOp::Hue if p.hue != 0.0 => {
                for rgb in &mut px {
                    let (hh, s, v) = rgb_to_hsv(*rgb);
                    *rgb = hsv_to_rgb((hh + p.hue).rem_euclid(1.0), s, v);
                }
            }
            _ => {}
        }
    }
    let mut out = vec![0.0; 3 * hw];
    for (k, rgb) in px.iter().enumerate() {
        for ch in 0..3 {
            out[ch * hw + k] = rgb[ch];
        }
    }
    Ok(Tensor::new([3, h, w], out)?)
}

fn luma(rgb: &[f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Hue in turns `[0,1)`, saturation and value in `[0,1]`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
