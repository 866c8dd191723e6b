//! Synthetic segmentation data: a procedural shapes dataset with a
//! colour-overlap knob, labelled/unlabelled splitting and the dataset file
//! format.

mod io;
mod shapes;
mod split;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use shapes::{gen_shapes_dataset, generate_sample, render_scene, sample_scene, Scene, Shape, ShapeGenConfig, ShapeKind, CLASSES};
pub use split::{split, Split, SplitSpec, UnlabelledImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel integer classes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Data(format!(
                "class map has {} entries, expected {height}x{width}",
                classes.len()
            )));
        }
        Ok(Self { height, width, classes })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            classes: vec![class; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.classes[i * self.width + j]
    }

    /// Arg-max over channels of a `[C,H,W]` score map.
    pub fn from_scores(scores: &Tensor) -> Result<Self> {
        let [_, h, w] = *scores.shape() else {
            return Err(Error::Data(format!("expected [C,H,W] scores, got {:?}", scores.shape())));
        };
        let classes = scores.argmax_channels()?.into_iter().map(|c| c as u8).collect();
        Self::new(h, w, classes)
    }

    /// Training targets; pixels where `valid` is false are ignored.
    pub fn targets(&self, valid: Option<&[bool]>) -> Vec<Option<usize>> {
        match valid {
            None => self.classes.iter().map(|&c| Some(c as usize)).collect(),
            Some(v) => self
                .classes
                .iter()
                .zip(v)
                .map(|(&c, &ok)| ok.then_some(c as usize))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    /// `[3,H,W]` RGB in `[0,1]`.
    pub image: Tensor,
    pub class_map: ClassMap,
    pub labelled: bool,
}

/// A generated dataset: a training pool and a held-out validation set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Colour overlap the data was generated with.
    pub overlap: f64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Per-channel mean colour of the training images.
    pub fn mean_colour(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for s in &self.train {
            let hw = s.class_map.height * s.class_map.width;
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += s.image.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
            }
            n += hw;
        }
        if n == 0 {
            return [0.5; 3];
        }
        acc.map(|a| a / n as f64)
    }

    /// Fraction of pixels per class over the given samples.
    pub fn class_frequencies(samples: &[Sample], classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        let mut total = 0usize;
        for s in samples {
            for &c in &s.class_map.classes {
                counts[c as usize] += 1;
            }
            total += s.class_map.classes.len();
        }
        counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}
