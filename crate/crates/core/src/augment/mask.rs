use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Cutout,
    Cutmix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.y0..self.y0 + self.h).contains(&i) && (self.x0..self.x0 + self.w).contains(&j)
    }
}

/// Where a mask came from: the rectangle, and whether the mask is its
/// indicator or the complement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub kind: MaskKind,
    pub rect: Rect,
    pub inverted: bool,
}

/// An `H×W` mask with values in `{0,1}`, broadcast over channels and batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub provenance: Option<BoxRecord>,
}

impl MixMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            provenance: None,
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            values: vec![1.0; height * width],
            ..Self::zeros(height, width)
        }
    }

    pub fn from_box(height: usize, width: usize, record: BoxRecord) -> Result<Self> {
        let r = record.rect;
        if r.w == 0 || r.h == 0 || r.x0 + r.w > width || r.y0 + r.h > height {
            return Err(Error::config("mask box", format!("{r:?} does not fit in {height}x{width}")));
        }
        let on = if record.inverted { 0.0 } else { 1.0 };
        let values = (0..height * width)
            .map(|k| if r.contains(k / width, k % width) { on } else { 1.0 - on })
            .collect();
        Ok(Self {
            height,
            width,
            values,
            provenance: Some(record),
        })
    }

    /// `1 - m`.
    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            provenance: self.provenance.map(|p| BoxRecord {
                inverted: !p.inverted,
                ..p
            }),
        }
    }

    /// Number of pixels set to 1.
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.values.len() as f64
    }

    fn check(&self, op: &'static str, t: &Tensor) -> Result<usize> {
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2] != self.height || s[s.len() - 1] != self.width {
            return Err(Error::config(
                op,
                format!("mask is {}x{} but tensor shape is {s:?}", self.height, self.width),
            ));
        }
        Ok(t.len() / (self.height * self.width))
    }
}

/// Area tolerance as a fraction of the target area.
const AREA_SLACK: f64 = 0.01;
const MAX_ASPECT: f64 = 3.0;

/// Rectangle sides `(w, h)` that fit in `height × width` with area
/// `round(ratio·H·W)`, up to 1% when the exact area has no fitting
/// factorization with aspect ratio in `[1/3, 3]`.
fn box_sides(height: usize, width: usize, ratio: f64) -> Result<Vec<(usize, usize)>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("mask ratio", format!("must be in (0, 1), got {ratio}")));
    }
    let exact = ratio * (height * width) as f64;
    if exact < 1.0 {
        return Err(Error::config(
            "mask ratio",
            format!("{ratio} of {height}x{width} is less than one pixel"),
        ));
    }
    let area = exact.round() as usize;
    let mut cands: Vec<(usize, usize, usize)> = (1..=width)
        .map(|w| {
            let h = ((area as f64 / w as f64).round() as usize).clamp(1, height);
            (w, h, (w * h).abs_diff(area))
        })
        .collect();
    let aspect_ok = |&(w, h, _): &(usize, usize, usize)| {
        let a = w as f64 / h as f64;
        (1.0 / MAX_ASPECT..=MAX_ASPECT).contains(&a)
    };
    if cands.iter().any(aspect_ok) {
        cands.retain(aspect_ok);
    }
    let best = cands.iter().map(|c| c.2).min().unwrap_or(0);
    let tol = (best as f64).max(AREA_SLACK * area as f64);
    Ok(cands
        .into_iter()
        .filter(|c| c.2 as f64 <= tol)
        .map(|(w, h, _)| (w, h))
        .collect())
}

/// Draws a rectangle of area `ratio·H·W` lying entirely inside the image.
/// The side pair is uniform over the admissible factorizations, the
/// position uniform over all placements.
pub fn sample_box_mask(rng: &mut impl Rng, height: usize, width: usize, ratio: f64, kind: MaskKind) -> Result<MixMask> {
    let sides = box_sides(height, width, ratio)?;
    let (w, h) = sides[rng.random_range(0..sides.len())];
    let x0 = rng.random_range(0..=width - w);
    let y0 = rng.random_range(0..=height - h);
    MixMask::from_box(
        height,
        width,
        BoxRecord {
            kind,
            rect: Rect { x0, y0, w, h },
            inverted: false,
        },
    )
}

/// `a ⊙ (1 - m) + b ⊙ m`.
pub fn mix(a: &Tensor, b: &Tensor, m: &MixMask) -> Result<Tensor> {
    m.check("mix", a)?;
    let hw = m.values.len();
    let mut out = a.zip_map(b, "mix", |x, _| x)?;
    for (k, (o, &y)) in out.data_mut().iter_mut().zip(b.data()).enumerate() {
        let mv = m.values[k % hw];
        *o = *o * (1.0 - mv) + y * mv;
    }
    Ok(out)
}

/// Replaces masked pixels with `fill[channel]`.
pub fn cutout_apply(image: &Tensor, m: &MixMask, fill: &[f64]) -> Result<Tensor> {
    let planes = m.check("cutout", image)?;
    let s = image.shape();
    let c = if s.len() >= 3 { s[s.len() - 3] } else { 1 };
    if fill.len() != c {
        return Err(Error::config("cutout", format!("fill has {} channels, image has {c}", fill.len())));
    }
    let hw = m.values.len();
    let mut out = image.clone();
    let data = out.data_mut();
    for plane in 0..planes {
        let f = fill[plane % c];
        for k in 0..hw {
            if m.values[k] == 1.0 {
                data[plane * hw + k] = f;
            }
        }
    }
    Ok(out)
}

/// `λ·a + (1 - λ)·b`.
pub fn ict_mix(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("ict_mix: lambda {lambda} outside [0, 1]")));
    }
    Ok(a.zip_map(b, "ict_mix", |x, y| lambda * x + (1.0 - lambda) * y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Purpose::Data, 0);
        Tensor::from_fn(shape.to_vec(), |_| r.random::<f64>())
    }

    #[test]
    fn half_of_four_by_four_has_area_eight() {
        let mut r = rng::stream(0, Purpose::Mask, 0);
        for _ in 0..100 {
            let m = sample_box_mask(&mut r, 4, 4, 0.5, MaskKind::Cutmix).unwrap();
            assert_eq!(m.count(), 8);
        }
    }

    #[test]
    fn mask_is_exactly_its_rectangle() {
        let mut r = rng::stream(1, Purpose::Mask, 0);
        for _ in 0..200 {
            let m = sample_box_mask(&mut r, 13, 17, 0.3, MaskKind::Cutout).unwrap();
            let rect = m.provenance.unwrap().rect;
            assert!(rect.x0 + rect.w <= 17 && rect.y0 + rect.h <= 13);
            for i in 0..13 {
                for j in 0..17 {
                    let v = m.values[i * 17 + j];
                    assert!(v == 0.0 || v == 1.0);
                    assert_eq!(v == 1.0, rect.contains(i, j));
                }
            }
        }
    }

    #[test]
    fn mean_coverage_matches_ratio() {
        let mut r = rng::stream(2, Purpose::Mask, 0);
        let n = 10_000;
        let total: f64 = (0..n)
            .map(|_| sample_box_mask(&mut r, 64, 64, 0.5, MaskKind::Cutmix).unwrap().coverage())
            .sum();
        let mean = total / n as f64;
        assert!((mean - 0.5).abs() / 0.5 < 0.01, "{mean}");
    }

    #[test]
    fn box_sides_vary_at_desk_scale() {
        let sides = box_sides(64, 64, 0.5).unwrap();
        assert!(sides.len() > 5, "{sides:?}");
    }

    #[test]
    fn bad_ratios_are_errors() {
        let mut r = rng::stream(0, Purpose::Mask, 0);
        assert!(sample_box_mask(&mut r, 4, 4, 0.0, MaskKind::Cutmix).is_err());
        assert!(sample_box_mask(&mut r, 4, 4, 1.0, MaskKind::Cutmix).is_err());
        assert!(sample_box_mask(&mut r, 4, 4, 0.05, MaskKind::Cutmix).is_err());
    }

    #[test]
    fn mix_extremes_and_symmetry() {
        let a = rand_tensor(&[3, 4, 5], 0);
        let b = rand_tensor(&[3, 4, 5], 1);
        assert_eq!(mix(&a, &b, &MixMask::zeros(4, 5)).unwrap(), a);
        assert_eq!(mix(&a, &b, &MixMask::ones(4, 5)).unwrap(), b);
        let m = sample_box_mask(&mut rng::stream(3, Purpose::Mask, 0), 4, 5, 0.4, MaskKind::Cutmix).unwrap();
        assert_eq!(mix(&a, &b, &m).unwrap(), mix(&b, &a, &m.inverted()).unwrap());
        assert!(mix(&a, &rand_tensor(&[3, 4, 4], 2), &m).is_err());
    }

    #[test]
    fn cutout_replaces_exactly_the_box() {
        let img = rand_tensor(&[3, 6, 6], 4);
        let fill = [0.25, 0.5, 0.75];
        assert_eq!(cutout_apply(&img, &MixMask::zeros(6, 6), &fill).unwrap(), img);
        let full = cutout_apply(&img, &MixMask::ones(6, 6), &fill).unwrap();
        for ch in 0..3 {
            assert!(full.data()[ch * 36..(ch + 1) * 36].iter().all(|&v| v == fill[ch]));
        }
        let m = sample_box_mask(&mut rng::stream(4, Purpose::Mask, 0), 6, 6, 0.5, MaskKind::Cutout).unwrap();
        let out = cutout_apply(&img, &m, &fill).unwrap();
        let changed = (0..36).filter(|&k| (0..3).any(|ch| out.data()[ch * 36 + k] != img.data()[ch * 36 + k])).count();
        assert_eq!(changed, m.count());
    }

    #[test]
    fn ict_closed_forms() {
        let a = rand_tensor(&[3, 2, 2], 5);
        let b = rand_tensor(&[3, 2, 2], 6);
        assert_eq!(ict_mix(&a, &b, 1.0).unwrap(), a);
        let half = ict_mix(&Tensor::zeros([2, 2]), &Tensor::full([2, 2], 1.0), 0.5).unwrap();
        assert!(half.data().iter().all(|&v| v == 0.5));
        assert!(ict_mix(&a, &b, 1.5).is_err());
        assert!(ict_mix(&a, &b, -0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn blends_match_scalar_loops(seed in 0u64..1000, lambda in 0.0f64..=1.0, n in 1usize..3) {
            let shape = [n, 2, 3, 4];
            let a = rand_tensor(&shape, seed);
            let b = rand_tensor(&shape, seed + 1);
            let m = sample_box_mask(&mut rng::stream(seed, Purpose::Mask, 0), 3, 4, 0.5, MaskKind::Cutmix).unwrap();
            let mixed = mix(&a, &b, &m).unwrap();
            let ict = ict_mix(&a, &b, lambda).unwrap();
            for k in 0..a.len() {
                let mv = m.values[k % 12];
                prop_assert_eq!(mixed.data()[k], a.data()[k] * (1.0 - mv) + b.data()[k] * mv);
                prop_assert_eq!(ict.data()[k], lambda * a.data()[k] + (1.0 - lambda) * b.data()[k]);
            }
            let back = ict_mix(&b, &a, 1.0 - lambda).unwrap();
            prop_assert!(ict.max_abs_diff(&back).unwrap() < 1e-15);
        }
    }
}
