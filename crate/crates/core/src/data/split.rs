use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Training pool size; the first `total` samples are used.
    pub total: usize,
    pub labelled_count: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.labelled_count > self.total {
            return Err(Error::config(
                "split",
                format!("labelled_count {} exceeds total {}", self.labelled_count, self.total),
            ));
        }
        Ok(())
    }
}

/// The training view of an unlabelled sample: no class map.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledImage {
    pub id: u32,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub labelled: Vec<Sample>,
    pub unlabelled: Vec<UnlabelledImage>,
}

/// Picks `labelled_count` of the first `total` samples uniformly at
/// random; the rest of the pool becomes unlabelled. Both sides keep pool
/// order.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if spec.total > samples.len() {
        return Err(Error::Data(format!(
            "split wants {} samples but the pool has {}",
            spec.total,
            samples.len()
        )));
    }
    let mut chosen = vec![false; spec.total];
    let mut r = rng::stream(spec.seed, Purpose::Split, 0);
    for i in sample(&mut r, spec.total, spec.labelled_count) {
        chosen[i] = true;
    }
    let mut labelled = Vec::with_capacity(spec.labelled_count);
    let mut unlabelled = Vec::with_capacity(spec.total - spec.labelled_count);
    for (s, &pick) in samples[..spec.total].iter().zip(&chosen) {
        if pick {
            labelled.push(Sample {
                labelled: true,
                ..s.clone()
            });
        } else {
            unlabelled.push(UnlabelledImage {
                id: s.id,
                image: s.image.clone(),
            });
        }
    }
    Ok(Split { labelled, unlabelled })
}
