use super::{Optimizer, StepDraws, TrainConfig};
use crate::augment::{apply_affine, apply_affine_classes, MixMask};
use crate::consistency::{
    cons_loss_cutmix, cons_loss_cutout, cons_loss_ict, cons_loss_stdaug, cons_loss_vat, total_loss, ConsistencyMode,
    TeacherStudent,
};
use crate::data::{ClassMap, Sample, Split, UnlabelledImage};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::segnet::Network;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// The raw (unaugmented) data of one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labelled_images: Vec<Tensor>,
    pub labelled_maps: Vec<ClassMap>,
    pub labelled_ids: Vec<u32>,
    /// `[N,C,H,W]`, or `None` when the consistency term is off.
    pub unlabelled: Option<Tensor>,
    /// Second images of each pair in cutmix and ICT.
    pub unlabelled_b: Option<Tensor>,
    pub unlabelled_ids: Vec<u32>,
}

impl Batch {
    pub fn gather(split: &Split, draws: &StepDraws, pairs: bool) -> Result<Self> {
        let lab: Vec<&Sample> = draws.labelled.iter().map(|&i| &split.labelled[i]).collect();
        let unl: Vec<&UnlabelledImage> = draws.unlabelled.iter().map(|&i| &split.unlabelled[i]).collect();
        let stack = |items: &[&UnlabelledImage]| -> Result<Option<Tensor>> {
            if items.is_empty() {
                return Ok(None);
            }
            let t: Vec<Tensor> = items.iter().map(|u| u.image.clone()).collect();
            Ok(Some(Tensor::stack(&t)?))
        };
        let (a, b) = if pairs {
            let half = unl.len() / 2;
            (stack(&unl[..half])?, stack(&unl[half..])?)
        } else {
            (stack(&unl)?, None)
        };
        Ok(Self {
            labelled_images: lab.iter().map(|s| s.image.clone()).collect(),
            labelled_maps: lab.iter().map(|s| s.class_map.clone()).collect(),
            labelled_ids: lab.iter().map(|s| s.id).collect(),
            unlabelled: a,
            unlabelled_b: b,
            unlabelled_ids: unl.iter().map(|u| u.id).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub sup: f64,
    /// Unweighted consistency loss; 0 when the term is off.
    pub cons: f64,
    /// `sup + γ·cons`.
    pub total: f64,
}

/// Supervised cross-entropy on the labelled batch with the same geometric
/// transform applied to each image and its class map. Pixels without a
/// pre-image are ignored.
pub fn supervised_loss<'t, N: Network>(
    net: &N,
    params: &[Var<'t>],
    batch: &Batch,
    draws: &StepDraws,
) -> Result<Var<'t>> {
    let n = batch.labelled_images.len();
    if n == 0 {
        return Err(Error::Data("empty labelled batch".into()));
    }
    let mut images = Vec::with_capacity(n);
    let mut targets = Vec::new();
    for i in 0..n {
        match draws.sup_affine.get(i) {
            Some(p) => {
                images.push(apply_affine(&batch.labelled_images[i], p)?.0);
                let (map, valid) = apply_affine_classes(&batch.labelled_maps[i], p);
                targets.extend(map.targets(Some(&valid.valid)));
            }
            None => {
                images.push(batch.labelled_images[i].clone());
                targets.extend(batch.labelled_maps[i].targets(None));
            }
        }
    }
    let tape = params[0].tape();
    let logits = net.forward(params, tape.constant(Tensor::stack(&images)?))?;
    Ok(logits.cross_entropy_seg(&targets)?)
}

/// The mode-specific consistency loss, or `None` when γ = 0 or there is
/// no unlabelled data.
pub fn consistency_loss<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    batch: &Batch,
    draws: &StepDraws,
    cfg: &TrainConfig,
    fill: &[f64],
) -> Result<Option<Var<'t>>> {
    let Some(x) = batch.unlabelled.as_ref().filter(|_| cfg.uses_unlabelled()) else {
        return Ok(None);
    };
    let c = &draws.cons;
    let colour = (!c.colour.is_empty()).then_some(c.colour.as_slice());
    let pair_colour = colour.map(|a| (a, c.colour_b.as_slice()));
    let threshold = cfg.consistency.confidence_threshold;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let masks = || -> Result<Vec<MixMask>> { c.masks.iter().map(|&r| MixMask::from_box(h, w, r)).collect() };
    let second = || {
        batch
            .unlabelled_b
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{} needs image pairs", cfg.consistency.mode.name())))
    };
    let loss = match cfg.consistency.mode {
        ConsistencyMode::StdAug => cons_loss_stdaug(ts, params, x, &c.affine, colour, threshold)?,
        ConsistencyMode::Cutout => cons_loss_cutout(ts, params, x, &masks()?, fill, colour, threshold)?,
        ConsistencyMode::Cutmix => cons_loss_cutmix(ts, params, x, second()?, &masks()?, pair_colour, threshold)?,
        ConsistencyMode::Ict => cons_loss_ict(ts, params, x, second()?, &c.lambdas, pair_colour, threshold)?,
        ConsistencyMode::Vat => {
            let mut r = rng::stream(cfg.seed, Purpose::Vat, draws.step as u64);
            cons_loss_vat(ts, params, x, &cfg.augment.vat, &mut r)?
        }
    };
    Ok(Some(loss))
}

/// One optimisation step: `L = L_sup + γ·L_cons`, backward, an optimizer
/// update of the student, then the EMA update of the teacher. A
/// non-finite loss aborts before any parameter changes.
pub fn train_step<N: Network>(
    ts: &mut TeacherStudent<N>,
    opt: &mut Optimizer,
    batch: &Batch,
    draws: &StepDraws,
    cfg: &TrainConfig,
    fill: &[f64],
) -> Result<StepReport> {
    let abort = || Error::NonFiniteLoss {
        step: draws.step,
        labelled: batch.labelled_ids.clone(),
        unlabelled: batch.unlabelled_ids.clone(),
    };
    let non_finite = |e: Error| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => abort(),
        e => e,
    };

    let tape = Tape::new();
    let params = ts.student.params().bind(&tape, true);
    let sup = supervised_loss(&ts.student, &params, batch, draws).map_err(non_finite)?;
    let cons = consistency_loss(ts, &params, batch, draws, cfg, fill).map_err(non_finite)?;
    let gamma = cfg.consistency.gamma;
    let total = match cons {
        Some(c) => total_loss(sup, c, gamma)?,
        None => sup,
    };
    let report = StepReport {
        step: draws.step,
        sup: sup.item().unwrap_or(f64::NAN),
        cons: cons.and_then(|c| c.item()).unwrap_or(0.0),
        total: total.item().unwrap_or(f64::NAN),
    };
    if !report.total.is_finite() {
        return Err(abort());
    }
    tape.backward(total)?;
    let grads: Vec<Option<Tensor>> = params.iter().map(|p| p.grad()).collect();
    drop(params);
    opt.step(ts.student.params_mut(), &grads)?;
    ts.ema_update()?;
    Ok(report)
}
