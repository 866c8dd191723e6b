use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One drawn geometric transform. Applied about the image centre:
/// `out = c + scale * R(rotation) * F(hflip) * (src - c) + translate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub hflip: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        translate: (0.0, 0.0),
        scale: 1.0,
        hflip: false,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Forward 2x3 matrix mapping source `(x, y)` to output `(x, y)` for an
    /// image of the given size (`x` = column, `y` = row, pixel centres at
    /// integer coordinates).
    pub fn matrix(&self, height: usize, width: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = centre(height, width);
        let (s, c) = self.rotation.sin_cos();
        let f = if self.hflip { -1.0 } else { 1.0 };
        let a = [[self.scale * c * f, -self.scale * s], [self.scale * s * f, self.scale * c]];
        let (tx, ty) = self.translate;
        [
            [a[0][0], a[0][1], cx + tx - a[0][0] * cx - a[0][1] * cy],
            [a[1][0], a[1][1], cy + ty - a[1][0] * cx - a[1][1] * cy],
        ]
    }

    /// Inverse of [`matrix`](Self::matrix): output coordinate to source.
    pub fn inverse_matrix(&self, height: usize, width: usize) -> [[f64; 3]; 2] {
        let (cx, cy) = centre(height, width);
        let (s, c) = self.rotation.sin_cos();
        let f = if self.hflip { -1.0 } else { 1.0 };
        // F R(-rotation) / scale
        let inv = 1.0 / self.scale;
        let a = [[f * c * inv, f * s * inv], [-s * inv, c * inv]];
        let (tx, ty) = self.translate;
        let (ox, oy) = (cx + tx, cy + ty);
        [
            [a[0][0], a[0][1], cx - a[0][0] * ox - a[0][1] * oy],
            [a[1][0], a[1][1], cy - a[1][0] * ox - a[1][1] * oy],
        ]
    }
}

fn centre(height: usize, width: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    /// Radians.
    pub rotation: (f64, f64),
    /// Pixels.
    pub translate_x: (f64, f64),
    pub translate_y: (f64, f64),
    pub scale: (f64, f64),
    pub hflip: bool,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation: (-0.35, 0.35),
            translate_x: (-4.0, 4.0),
            translate_y: (-4.0, 4.0),
            scale: (0.9, 1.1),
            hflip: true,
        }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self {
            rotation: (0.0, 0.0),
            translate_x: (0.0, 0.0),
            translate_y: (0.0, 0.0),
            scale: (1.0, 1.0),
            hflip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("rotation", self.rotation),
            ("translate_x", self.translate_x),
            ("translate_y", self.translate_y),
            ("scale", self.scale),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config("affine ranges", format!("{name} needs min <= max, got ({lo}, {hi})")));
            }
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::config("affine ranges", "scale range must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn sample_affine(rng: &mut impl Rng, ranges: &AffineRanges) -> Result<AffineParams> {
    ranges.validate()?;
    let rotation = uniform(rng, ranges.rotation);
    let tx = uniform(rng, ranges.translate_x);
    let ty = uniform(rng, ranges.translate_y);
    let scale = uniform(rng, ranges.scale);
    let hflip = ranges.hflip && rng.random::<bool>();
    Ok(AffineParams {
        rotation,
        translate: (tx, ty),
        scale,
        hflip,
    })
}

/// Pixels whose inverse-mapped source coordinate lies inside the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.width + j]
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            height: self.height,
            width: self.width,
            valid: self.valid.iter().zip(&other.valid).map(|(&a, &b)| a && b).collect(),
        }
    }
}

const EDGE_TOL: f64 = 1e-9;

/// Source coordinate of every output pixel and whether it is in bounds.
fn source_grid(p: &AffineParams, height: usize, width: usize) -> (Vec<(f64, f64)>, ValidityMask) {
    let m = p.inverse_matrix(height, width);
    let mut coords = Vec::with_capacity(height * width);
    let mut valid = Vec::with_capacity(height * width);
    let (xmax, ymax) = (width as f64 - 1.0, height as f64 - 1.0);
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (j as f64, i as f64);
            let sx = m[0][0] * x + m[0][1] * y + m[0][2];
            let sy = m[1][0] * x + m[1][1] * y + m[1][2];
            let inside = sx >= -EDGE_TOL && sx <= xmax + EDGE_TOL && sy >= -EDGE_TOL && sy <= ymax + EDGE_TOL;
            coords.push((sx.clamp(0.0, xmax), sy.clamp(0.0, ymax)));
            valid.push(inside);
        }
    }
    (coords, ValidityMask { height, width, valid })
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::config(op, format!("expected a [C,H,W] tensor, got {s:?}"))),
    }
}

/// Bilinear resampling of an image under `p`; out-of-bounds pixels are 0.
pub fn apply_affine(image: &Tensor, p: &AffineParams) -> Result<(Tensor, ValidityMask)> {
    let (c, h, w) = chw("apply_affine", image)?;
    if p.is_identity() {
        return Ok((image.clone(), ValidityMask::all_valid(h, w)));
    }
    let (coords, mask) = source_grid(p, h, w);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for (k, &(sx, sy)) in coords.iter().enumerate() {
        if !mask.valid[k] {
            continue;
        }
        let x0 = sx.floor() as usize;
        let y0 = sy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = sx - x0 as f64;
        let fy = sy - y0 as f64;
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[ch * h * w + k] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Ok((Tensor::new([c, h, w], out)?, mask))
}

fn nearest_index<'a>(coords: &'a [(f64, f64)], mask: &'a ValidityMask, w: usize) -> impl Iterator<Item = Option<usize>> + 'a {
    coords.iter().zip(&mask.valid).map(move |(&(sx, sy), &ok)| {
        ok.then(|| sy.round() as usize * w + sx.round() as usize)
    })
}

/// Nearest-neighbour resampling of a `[C,H,W]` probability (or any
/// per-pixel vector) map, so vectors are moved but never blended.
pub fn apply_affine_map(map: &Tensor, p: &AffineParams) -> Result<(Tensor, ValidityMask)> {
    let (c, h, w) = chw("apply_affine_map", map)?;
    if p.is_identity() {
        return Ok((map.clone(), ValidityMask::all_valid(h, w)));
    }
    let (coords, mask) = source_grid(p, h, w);
    let src = map.data();
    let mut out = vec![0.0; c * h * w];
    for (k, idx) in nearest_index(&coords, &mask, w).enumerate() {
        let Some(s) = idx else { continue };
        for ch in 0..c {
            out[ch * h * w + k] = src[ch * h * w + s];
        }
    }
    Ok((Tensor::new([c, h, w], out)?, mask))
}

/// Nearest-neighbour resampling of an integer class map. Invalid pixels
/// keep class 0 and must be ignored via the returned mask.
pub fn apply_affine_classes(map: &ClassMap, p: &AffineParams) -> (ClassMap, ValidityMask) {
    let (h, w) = (map.height, map.width);
    if p.is_identity() {
        return (map.clone(), ValidityMask::all_valid(h, w));
    }
    let (coords, mask) = source_grid(p, h, w);
    let classes = nearest_index(&coords, &mask, w)
        .map(|idx| idx.map_or(0, |s| map.classes[s]))
        .collect();
    (
        ClassMap {
            height: h,
            width: w,
            classes,
        },
        mask,
    )
}
