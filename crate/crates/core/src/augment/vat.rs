use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::Network;
use crate::tensor::{nchw_dims, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VatConfig {
    /// Finite-difference radius of the power iteration. `None` means
    /// `1e-6·√(H·W)`.
    #[serde(default)]
    pub xi: Option<f64>,
    pub n_power: usize,
    pub epsilon: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            xi: None,
            n_power: 1,
            epsilon: 1.0,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(xi) = self.xi {
            if !(xi > 0.0 && xi.is_finite()) {
                return Err(Error::config("vat", format!("xi must be positive, got {xi}")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("vat", format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn xi_for(&self, height: usize, width: usize) -> f64 {
        self.xi.unwrap_or(1e-6 * ((height * width) as f64).sqrt())
    }
}

/// `KL(p ‖ softmax(logits))` summed over channels and averaged over
/// pixels (and batch). `p` is a fixed target.
pub fn kl_mean<'t>(p: &Tensor, logits: Var<'t>) -> Result<Var<'t>> {
    let (n, _, hw) = nchw_dims("kl", p.shape())?;
    let pixels = (n * hw) as f64;
    let neg_entropy: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
    let tape = logits.tape();
    let cross = tape.constant(p.clone()).mul(logits.log_softmax_channels()?)?.sum();
    let kl = tape.constant(Tensor::scalar(neg_entropy)).sub(cross)?;
    Ok(kl.scale(1.0 / pixels))
}

const MAX_REDRAWS: usize = 8;

/// Contiguous per-sample blocks: one per batch entry for `[N,C,H,W]`, a
/// single block for `[C,H,W]`.
fn blocks(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[0]
    } else {
        1
    }
}

/// Scales every block to unit L2 norm. Returns the indices of blocks whose
/// norm is zero (or not finite); those are left untouched.
fn normalize_blocks(t: &mut Tensor, nblocks: usize) -> Vec<usize> {
    let size = t.len() / nblocks;
    let mut degenerate = Vec::new();
    for (b, chunk) in t.data_mut().chunks_mut(size).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            chunk.iter_mut().for_each(|v| *v /= norm);
        } else {
            degenerate.push(b);
        }
    }
    degenerate
}

fn fill_normal(t: &mut Tensor, block: usize, nblocks: usize, rng: &mut impl Rng) {
    let size = t.len() / nblocks;
    for v in &mut t.data_mut()[block * size..(block + 1) * size] {
        *v = rng.sample(StandardNormal);
    }
}

fn random_unit(shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let nb = blocks(shape);
    let mut d = Tensor::zeros(shape);
    for b in 0..nb {
        fill_normal(&mut d, b, nb, rng);
    }
    for _ in 0..MAX_REDRAWS {
        let bad = normalize_blocks(&mut d, nb);
        if bad.is_empty() {
            return Ok(d);
        }
        for b in bad {
            fill_normal(&mut d, b, nb, rng);
        }
    }
    Err(Error::Range("vat: could not draw a non-zero direction".into()))
}

/// Adversarial perturbation by power iteration. Each sample's perturbation
/// has L2 norm exactly `epsilon` (for a single `[C,H,W]` image, the whole
/// tensor does).
pub fn vat_direction<N: Network>(net: &N, x: &Tensor, cfg: &VatConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let shape = x.shape().to_vec();
    let (_, _, hw) = nchw_dims("vat_direction", &shape)?;
    let (h, w) = (shape[shape.len() - 2], hw / shape[shape.len() - 2]);
    let xi = cfg.xi_for(h, w);
    let nb = blocks(&shape);
    let p = net.predict_probs(x)?;
    let mut d = random_unit(&shape, rng)?;
    for _ in 0..cfg.n_power {
        let mut redraws = 0;
        loop {
            let tape = Tape::new();
            let params = net.params().bind(&tape, false);
            let dv = tape.param(d.clone());
            let input = tape.constant(x.clone()).add(dv.scale(xi))?;
            let loss = kl_mean(&p, net.forward(&params, input)?)?;
            tape.backward(loss)?;
            let mut g = dv.grad().unwrap_or_else(|| Tensor::zeros(&shape[..]));
            let bad = normalize_blocks(&mut g, nb);
            if bad.is_empty() {
                d = g;
                break;
            }
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Range("vat: power iteration gradient stays zero".into()));
            }
            for b in bad {
                fill_normal(&mut d, b, nb, rng);
            }
            normalize_blocks(&mut d, nb);
        }
    }
    Ok(d.scale(cfg.epsilon))
}
