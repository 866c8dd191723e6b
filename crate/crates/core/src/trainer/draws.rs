use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::augment::{sample_affine, sample_box_mask, sample_colour, AffineParams, BoxRecord, ColourParams, MaskKind};
use crate::consistency::ConsistencyMode;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Cycles through `0..len` in epochs, reshuffling at each epoch start from
/// its own stream.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    seed: u64,
    purpose: Purpose,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64, purpose: Purpose) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample batches from an empty pool".into()));
        }
        let mut s = Self {
            seed,
            purpose,
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut rng::stream(self.seed, self.purpose, self.epoch));
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The next `n` pool indices; an epoch boundary inside the batch simply
    /// continues into the next permutation.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.pos = 0;
                self.shuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Augmentation draws for the consistency term of one step. Empty vectors
/// mean the mode does not use that kind of draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsDraws {
    pub affine: Vec<AffineParams>,
    pub colour: Vec<ColourParams>,
    /// Colour jitter for the second image of a pair.
    pub colour_b: Vec<ColourParams>,
    pub masks: Vec<BoxRecord>,
    pub lambdas: Vec<f64>,
}

/// Everything random about one step, enough to recompute its losses. One
/// record per line forms the replay log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDraws {
    pub step: usize,
    /// Positions in the labelled split.
    pub labelled: Vec<usize>,
    /// Positions in the unlabelled split; pair modes list the `a` images
    /// then the `b` images.
    pub unlabelled: Vec<usize>,
    pub sup_affine: Vec<AffineParams>,
    pub cons: ConsDraws,
}

/// Draws the batches and augmentation parameters of `step`. Each kind of
/// draw comes from its own stream keyed by the step, so turning one
/// augmentation off leaves the others unchanged.
pub fn draw_step(
    cfg: &TrainConfig,
    step: usize,
    labelled: &mut BatchSampler,
    unlabelled: Option<&mut BatchSampler>,
    height: usize,
    width: usize,
) -> Result<StepDraws> {
    let seed = cfg.seed;
    let idx = step as u64;
    let aug = &cfg.augment;
    let labelled = labelled.next_batch(cfg.labelled_batch);

    let sup_affine = if cfg.augment_labelled {
        let mut r = rng::stream(seed, Purpose::Affine, 2 * idx);
        (0..labelled.len())
            .map(|_| sample_affine(&mut r, &aug.affine))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut cons = ConsDraws::default();
    let mut unl = Vec::new();
    if let Some(sampler) = unlabelled.filter(|_| cfg.uses_unlabelled()) {
        let mode = cfg.consistency.mode;
        let n = cfg.unlabelled_batch;
        unl = sampler.next_batch(if mode.needs_pairs() { 2 * n } else { n });

        let mut colour = rng::stream(seed, Purpose::Colour, idx);
        let mut jitter = |k: usize| -> Result<Vec<ColourParams>> {
            (0..k).map(|_| sample_colour(&mut colour, &aug.colour_ranges)).collect()
        };
        match mode {
            ConsistencyMode::StdAug | ConsistencyMode::Cutout if aug.colour => cons.colour = jitter(n)?,
            ConsistencyMode::Cutmix | ConsistencyMode::Ict if aug.colour => {
                cons.colour = jitter(n)?;
                cons.colour_b = jitter(n)?;
            }
            _ => {}
        }

        match mode {
            ConsistencyMode::StdAug => {
                let mut r = rng::stream(seed, Purpose::Affine, 2 * idx + 1);
                cons.affine = (0..n).map(|_| sample_affine(&mut r, &aug.affine)).collect::<Result<_>>()?;
            }
            ConsistencyMode::Cutout | ConsistencyMode::Cutmix => {
                let kind = if mode == ConsistencyMode::Cutout {
                    MaskKind::Cutout
                } else {
                    MaskKind::Cutmix
                };
                let mut r = rng::stream(seed, Purpose::Mask, idx);
                for _ in 0..n {
                    let m = sample_box_mask(&mut r, height, width, aug.mask_ratio, kind)?;
                    cons.masks.push(m.provenance.expect("box masks record their rectangle"));
                }
            }
            ConsistencyMode::Ict => {
                let mut r = rng::stream(seed, Purpose::Mix, idx);
                cons.lambdas = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
            }
            ConsistencyMode::Vat => {}
        }
    }

    Ok(StepDraws {
        step,
        labelled,
        unlabelled: unl,
        sup_affine,
        cons,
    })
}
