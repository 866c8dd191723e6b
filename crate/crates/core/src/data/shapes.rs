use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassMap, Dataset, Sample};
use crate::augment::hsv_to_rgb;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

/// Background, circle, square, triangle.
pub const CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeGenConfig {
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Equal-area circle radius range; squares and triangles are sized to
    /// the same area as a circle of the drawn radius.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Colour overlap κ: probability that a region's hue is drawn from the
    /// shared palette instead of its class band. 1 makes colour carry no
    /// class information.
    pub overlap: f64,
    pub noise: f64,
}

impl Default for ShapeGenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            train_count: 500,
            val_count: 100,
            min_shapes: 1,
            max_shapes: 3,
            min_radius: 7.0,
            max_radius: 12.0,
            overlap: 1.0,
            noise: 0.02,
        }
    }
}

impl ShapeGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::config("shape generator", reason));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!("need 1 <= min_shapes <= max_shapes, got {}..{}", self.min_shapes, self.max_shapes));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return bad(format!("need 1 <= min_radius <= max_radius, got {}..{}", self.min_radius, self.max_radius));
        }
        let span = 2.0 * ShapeKind::Triangle.reach(self.max_radius) + 1.0;
        if span > self.height.min(self.width) as f64 {
            return bad(format!(
                "shapes of radius {} do not fit in {}x{}",
                self.max_radius, self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must be in [0, 1], got {}", self.overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

const SQRT_PI: f64 = 1.772_453_850_905_516;

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }

    /// Square half-side with the area of a circle of radius `r`.
    fn half_side(r: f64) -> f64 {
        SQRT_PI / 2.0 * r
    }

    /// Equilateral triangle circumradius with the area of a circle of
    /// radius `r`.
    fn circumradius(r: f64) -> f64 {
        r * (4.0 * std::f64::consts::PI / (3.0 * 3f64.sqrt())).sqrt()
    }

    /// Distance from the centre to the farthest point of the shape.
    pub fn reach(self, r: f64) -> f64 {
        match self {
            ShapeKind::Circle => r,
            ShapeKind::Square => Self::half_side(r) * std::f64::consts::SQRT_2,
            ShapeKind::Triangle => Self::circumradius(r),
        }
    }
}

/// A shape placed at `(cx, cy)` (column, row) with equal-area radius `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub colour: [f64; 3],
}

impl Shape {
    /// Whether the point `(x, y)` is inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => {
                let a = ShapeKind::half_side(self.r);
                dx.abs() <= a && dy.abs() <= a
            }
            ShapeKind::Triangle => {
                // apex up; the three edges as half-planes with inward normals
                let big = ShapeKind::circumradius(self.r);
                let s3 = 3f64.sqrt();
                dy <= big / 2.0 && s3 * dx - dy <= big && -s3 * dx - dy <= big
            }
        }
    }

    pub fn reach(&self) -> f64 {
        self.kind.reach(self.r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: [f64; 3],
    pub shapes: Vec<Shape>,
}

const PLACEMENT_TRIES: usize = 100;
const COLOUR_TRIES: usize = 50;
/// Minimum RGB distance between a shape and the background.
const MIN_CONTRAST: f64 = 0.35;
/// Gap left at each end of a class hue band.
const BAND_MARGIN: f64 = 0.04;
const SV_RANGE: (f64, f64) = (0.55, 1.0);

fn draw_colour(rng: &mut impl Rng, class: u8, overlap: f64) -> [f64; 3] {
    let hue = if rng.random::<f64>() < overlap {
        rng.random::<f64>()
    } else {
        let lo = class as f64 / CLASSES as f64 + BAND_MARGIN;
        let hi = (class as f64 + 1.0) / CLASSES as f64 - BAND_MARGIN;
        rng.random_range(lo..hi)
    };
    let s = rng.random_range(SV_RANGE.0..=SV_RANGE.1);
    let v = rng.random_range(SV_RANGE.0..=SV_RANGE.1);
    hsv_to_rgb(hue, s, v)
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Draws the geometry and colours of one image. Shapes never overlap and
/// lie entirely inside the image; a slot that cannot be placed is dropped.
pub fn sample_scene(rng: &mut impl Rng, cfg: &ShapeGenConfig) -> Scene {
    let background = draw_colour(rng, 0, cfg.overlap);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let r = if cfg.min_radius == cfg.max_radius {
            cfg.min_radius
        } else {
            rng.random_range(cfg.min_radius..cfg.max_radius)
        };
        let reach = kind.reach(r);
        let (xmax, ymax) = (cfg.width as f64 - 1.0 - reach, cfg.height as f64 - 1.0 - reach);
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let cx = rng.random_range(reach..=xmax);
            let cy = rng.random_range(reach..=ymax);
            let clear = shapes
                .iter()
                .all(|s| ((s.cx - cx).powi(2) + (s.cy - cy).powi(2)).sqrt() > s.reach() + reach + 1.0);
            clear.then_some((cx, cy))
        });
        let Some((cx, cy)) = placed else { continue };
        let mut colour = draw_colour(rng, kind.class(), cfg.overlap);
        for _ in 0..COLOUR_TRIES {
            if distance(colour, background) >= MIN_CONTRAST {
                break;
            }
            colour = draw_colour(rng, kind.class(), cfg.overlap);
        }
        shapes.push(Shape { kind, cx, cy, r, colour });
    }
    Scene { background, shapes }
}

/// Rasterizes a scene with hard edges at pixel centres, then adds clamped
/// Gaussian noise.
pub fn render_scene(scene: &Scene, cfg: &ShapeGenConfig, rng: &mut impl Rng) -> (Tensor, ClassMap) {
    let (h, w) = (cfg.height, cfg.width);
    let mut classes = vec![0u8; h * w];
    let mut colours = vec![scene.background; h * w];
    for shape in &scene.shapes {
        let reach = shape.reach().ceil() as isize + 1;
        let (ci, cj) = (shape.cy.round() as isize, shape.cx.round() as isize);
        for i in (ci - reach).max(0)..(ci + reach + 1).min(h as isize) {
            for j in (cj - reach).max(0)..(cj + reach + 1).min(w as isize) {
                if shape.contains(j as f64, i as f64) {
                    let k = i as usize * w + j as usize;
                    classes[k] = shape.kind.class();
                    colours[k] = shape.colour;
                }
            }
        }
    }
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("valid noise"));
    let mut data = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for k in 0..h * w {
            let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
            data[ch * h * w + k] = (colours[k][ch] + n).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new([3, h, w], data).expect("consistent shape");
    (image, ClassMap { height: h, width: w, classes })
}

/// The sample with the given id; each id has its own RNG stream.
pub fn generate_sample(cfg: &ShapeGenConfig, seed: u64, id: u32) -> Sample {
    let mut r = rng::stream(seed, Purpose::Data, id as u64);
    let scene = sample_scene(&mut r, cfg);
    let (image, class_map) = render_scene(&scene, cfg, &mut r);
    Sample {
        id,
        image,
        class_map,
        labelled: true,
    }
}

/// `train_count` training samples (ids `0..train_count`) followed by
/// `val_count` validation samples.
pub fn gen_shapes_dataset(cfg: &ShapeGenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let total = cfg.train_count + cfg.val_count;
    let total = u32::try_from(total).map_err(|_| Error::config("shape generator", "too many samples"))?;
    let mut samples: Vec<Sample> = (0..total).map(|id| generate_sample(cfg, seed, id)).collect();
    let val = samples.split_off(cfg.train_count);
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        classes: CLASSES,
        overlap: cfg.overlap,
        train: samples,
        val,
    })
}
