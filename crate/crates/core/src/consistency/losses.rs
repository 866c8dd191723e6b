use rand::Rng;

use super::TeacherStudent;
use crate::augment::{
    apply_affine, apply_affine_map, apply_colour, cutout_apply, ict_mix, kl_mean, mix, vat_direction, AffineParams,
    ColourParams, MixMask, ValidityMask, VatConfig,
};
use crate::error::{Error, Result};
use crate::segnet::Network;
use crate::tensor::{Tensor, Var};

/// Per-sample colour jitter for the two sources of a mixed student input.
pub type PairColour<'a> = (&'a [ColourParams], &'a [ColourParams]);

/// Splits `[N,C,H,W]` into samples; `[C,H,W]` is a batch of one.
fn samples(op: &'static str, x: &Tensor) -> Result<Vec<Tensor>> {
    match x.rank() {
        3 => Ok(vec![x.clone()]),
        4 => Ok(x.unstack()?),
        _ => Err(Error::config(op, format!("expected [C,H,W] or [N,C,H,W], got {:?}", x.shape()))),
    }
}

/// Restores the rank of the original input.
fn restack(like: &Tensor, items: &[Tensor]) -> Result<Tensor> {
    if like.rank() == 3 {
        Ok(items[0].clone())
    } else {
        Ok(Tensor::stack(items)?)
    }
}

fn check_len(op: &'static str, what: &str, got: usize, n: usize) -> Result<()> {
    if got != n {
        return Err(Error::config(op, format!("{got} {what} for a batch of {n}")));
    }
    Ok(())
}

fn hw(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// Mean squared difference over valid pixels and all channels. `target`
/// is a constant; gradient flows only into `student_probs`. `valid` holds
/// one mask per sample. With no valid pixel the loss is 0 and so is its
/// gradient.
pub fn cons_loss_pair<'t>(student_probs: Var<'t>, target: &Tensor, valid: &[ValidityMask]) -> Result<Var<'t>> {
    let shape = student_probs.shape();
    target.expect_shape("cons_loss_pair", &shape)?;
    let n = if shape.len() == 4 { shape[0] } else { 1 };
    check_len("cons_loss_pair", "validity masks", valid.len(), n)?;
    let (h, w) = hw(target);
    let c = shape[shape.len() - 3];
    if valid.iter().any(|m| m.height != h || m.width != w) {
        return Err(Error::config("cons_loss_pair", format!("validity masks must be {h}x{w}")));
    }
    let count: usize = valid.iter().map(ValidityMask::count).sum();
    if count == 0 {
        return Ok(student_probs.sum().scale(0.0));
    }
    let norm = 1.0 / (count * c) as f64;
    let hw = h * w;
    let weights = Tensor::from_fn(shape.clone(), |k| {
        let (sample, pixel) = (k / (c * hw), k % hw);
        if valid[sample].valid[pixel] {
            norm
        } else {
            0.0
        }
    });
    let tape = student_probs.tape();
    let diff = student_probs.sub(tape.constant(target.clone()))?;
    Ok(diff.square()?.mul(tape.constant(weights))?.sum())
}

/// Clears mask entries where the target's max probability is below
/// `threshold`.
pub fn confidence_filter(target: &Tensor, valid: &mut [ValidityMask], threshold: f64) -> Result<()> {
    let items = samples("confidence_filter", target)?;
    check_len("confidence_filter", "validity masks", valid.len(), items.len())?;
    for (t, m) in items.iter().zip(valid) {
        let c = t.shape()[0];
        let hw = t.len() / c;
        for (k, ok) in m.valid.iter_mut().enumerate() {
            let best = (0..c).map(|ch| t.data()[ch * hw + k]).fold(f64::NEG_INFINITY, f64::max);
            if best < threshold {
                *ok = false;
            }
        }
    }
    Ok(())
}

fn student_probs<'t, N: Network>(net: &N, params: &[Var<'t>], input: Tensor) -> Result<Var<'t>> {
    let tape = params[0].tape();
    Ok(net.forward(params, tape.constant(input))?.softmax_channels()?)
}

fn finish<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    input: Tensor,
    target: Tensor,
    mut valid: Vec<ValidityMask>,
    threshold: Option<f64>,
) -> Result<Var<'t>> {
    if let Some(t) = threshold {
        confidence_filter(&target, &mut valid, t)?;
    }
    let s = student_probs(&ts.student, params, input)?;
    cons_loss_pair(s, &target, &valid)
}

fn jitter(x: &Tensor, colour: Option<&ColourParams>) -> Result<Tensor> {
    match colour {
        Some(c) => apply_colour(x, c),
        None => Ok(x.clone()),
    }
}

/// Standard-augmentation consistency: the teacher sees `x`, its
/// probability map is warped by `t_α`; the student sees `t_α(x)`, colour
/// jittered first when `colour` is given. Pixels without a pre-image are
/// masked out.
pub fn cons_loss_stdaug<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    x: &Tensor,
    affine: &[AffineParams],
    colour: Option<&[ColourParams]>,
    threshold: Option<f64>,
) -> Result<Var<'t>> {
    let xs = samples("cons_loss_stdaug", x)?;
    check_len("cons_loss_stdaug", "affine draws", affine.len(), xs.len())?;
    if let Some(c) = colour {
        check_len("cons_loss_stdaug", "colour draws", c.len(), xs.len())?;
    }
    let teacher = samples("cons_loss_stdaug", &ts.teacher.predict_probs(x)?)?;
    let mut inputs = Vec::with_capacity(xs.len());
    let mut targets = Vec::with_capacity(xs.len());
    let mut valid = Vec::with_capacity(xs.len());
    for (i, xi) in xs.iter().enumerate() {
        let jittered = jitter(xi, colour.map(|c| &c[i]))?;
        inputs.push(apply_affine(&jittered, &affine[i])?.0);
        let (t, m) = apply_affine_map(&teacher[i], &affine[i])?;
        targets.push(t);
        valid.push(m);
    }
    finish(ts, params, restack(x, &inputs)?, restack(x, &targets)?, valid, threshold)
}

/// CutMix consistency: target `g(x_a)⊙(1-m) + g(x_b)⊙m` from the teacher,
/// student input `mix(x_a, x_b, m)` with each source colour jittered
/// separately when `colour` is given.
pub fn cons_loss_cutmix<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    x_a: &Tensor,
    x_b: &Tensor,
    masks: &[MixMask],
    colour: Option<PairColour<'_>>,
    threshold: Option<f64>,
) -> Result<Var<'t>> {
    x_a.expect_shape("cons_loss_cutmix", x_b.shape())?;
    let (a, b) = (samples("cons_loss_cutmix", x_a)?, samples("cons_loss_cutmix", x_b)?);
    check_len("cons_loss_cutmix", "masks", masks.len(), a.len())?;
    let ta = samples("cons_loss_cutmix", &ts.teacher.predict_probs(x_a)?)?;
    let tb = samples("cons_loss_cutmix", &ts.teacher.predict_probs(x_b)?)?;
    let (h, w) = hw(x_a);
    let mut inputs = Vec::with_capacity(a.len());
    let mut targets = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let (ca, cb) = match colour {
            Some((ca, cb)) => {
                check_len("cons_loss_cutmix", "colour draws", ca.len().min(cb.len()), a.len())?;
                (Some(&ca[i]), Some(&cb[i]))
            }
            None => (None, None),
        };
        inputs.push(mix(&jitter(&a[i], ca)?, &jitter(&b[i], cb)?, &masks[i])?);
        targets.push(mix(&ta[i], &tb[i], &masks[i])?);
    }
    let valid = vec![ValidityMask::all_valid(h, w); a.len()];
    finish(ts, params, restack(x_a, &inputs)?, restack(x_a, &targets)?, valid, threshold)
}

/// Cutout consistency: the teacher sees `x`, the student sees `x` with the
/// box filled by `fill`; only pixels outside the box count. A box covering
/// the whole image gives a zero loss.
pub fn cons_loss_cutout<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    x: &Tensor,
    masks: &[MixMask],
    fill: &[f64],
    colour: Option<&[ColourParams]>,
    threshold: Option<f64>,
) -> Result<Var<'t>> {
    let xs = samples("cons_loss_cutout", x)?;
    check_len("cons_loss_cutout", "masks", masks.len(), xs.len())?;
    if let Some(c) = colour {
        check_len("cons_loss_cutout", "colour draws", c.len(), xs.len())?;
    }
    let target = ts.teacher.predict_probs(x)?;
    let (h, w) = hw(x);
    let mut inputs = Vec::with_capacity(xs.len());
    let mut valid = Vec::with_capacity(xs.len());
    for (i, xi) in xs.iter().enumerate() {
        inputs.push(cutout_apply(&jitter(xi, colour.map(|c| &c[i]))?, &masks[i], fill)?);
        valid.push(ValidityMask {
            height: h,
            width: w,
            valid: masks[i].values.iter().map(|&v| v == 0.0).collect(),
        });
    }
    finish(ts, params, restack(x, &inputs)?, target, valid, threshold)
}

/// Interpolation consistency: target `λ·g(x_a) + (1-λ)·g(x_b)`, student
/// input `λ·x_a + (1-λ)·x_b`.
pub fn cons_loss_ict<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    x_a: &Tensor,
    x_b: &Tensor,
    lambdas: &[f64],
    colour: Option<PairColour<'_>>,
    threshold: Option<f64>,
) -> Result<Var<'t>> {
    x_a.expect_shape("cons_loss_ict", x_b.shape())?;
    let (a, b) = (samples("cons_loss_ict", x_a)?, samples("cons_loss_ict", x_b)?);
    check_len("cons_loss_ict", "lambdas", lambdas.len(), a.len())?;
    let ta = samples("cons_loss_ict", &ts.teacher.predict_probs(x_a)?)?;
    let tb = samples("cons_loss_ict", &ts.teacher.predict_probs(x_b)?)?;
    let (h, w) = hw(x_a);
    let mut inputs = Vec::with_capacity(a.len());
    let mut targets = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let (ca, cb) = match colour {
            Some((ca, cb)) => {
                check_len("cons_loss_ict", "colour draws", ca.len().min(cb.len()), a.len())?;
                (Some(&ca[i]), Some(&cb[i]))
            }
            None => (None, None),
        };
        inputs.push(ict_mix(&jitter(&a[i], ca)?, &jitter(&b[i], cb)?, lambdas[i])?);
        targets.push(ict_mix(&ta[i], &tb[i], lambdas[i])?);
    }
    let valid = vec![ValidityMask::all_valid(h, w); a.len()];
    finish(ts, params, restack(x_a, &inputs)?, restack(x_a, &targets)?, valid, threshold)
}

/// VAT loss for a fixed perturbation `r` and fixed target `p`:
/// `KL(p ‖ softmax f_θ(x + r))` averaged over pixels.
pub fn vat_loss_given<'t, N: Network>(net: &N, params: &[Var<'t>], x: &Tensor, r: &Tensor, p: &Tensor) -> Result<Var<'t>> {
    let tape = params[0].tape();
    let moved = x.zip_map(r, "vat", |a, b| a + b)?;
    let logits = net.forward(params, tape.constant(moved))?;
    kl_mean(p, logits)
}

/// Virtual adversarial consistency on the student alone: the target is the
/// student's own (detached) prediction on `x`. A zero radius gives an
/// exact zero loss.
pub fn cons_loss_vat<'t, N: Network>(
    ts: &TeacherStudent<N>,
    params: &[Var<'t>],
    x: &Tensor,
    cfg: &VatConfig,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        let logits = ts.student.forward(params, params[0].tape().constant(x.clone()))?;
        return Ok(logits.sum().scale(0.0));
    }
    let r = vat_direction(&ts.student, x, cfg, rng)?;
    let p = ts.student.predict_probs(x)?;
    vat_loss_given(&ts.student, params, x, &r, &p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{sample_affine, sample_box_mask, sample_colour, AffineRanges, ColourRanges, MaskKind};
    use crate::augment::vat_tests::{bernoulli_kl, PixelLinear};
    use crate::rng::{self, Purpose};
    use crate::segnet::{ArchDescriptor, SegNetwork};
    use crate::tensor::gradcheck::max_rel_error;
    use crate::tensor::Tape;

    fn net(seed: u64) -> SegNetwork {
        let arch = ArchDescriptor {
            in_channels: 3,
            stem_width: 3,
            stage_widths: vec![4],
            classes: 3,
        };
        SegNetwork::build(arch, seed).unwrap()
    }

    fn pair(seed_s: u64, seed_t: u64) -> TeacherStudent<SegNetwork> {
        TeacherStudent::from_pair(net(seed_s), net(seed_t), 0.99).unwrap()
    }

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, Purpose::Data, 0);
        Tensor::from_fn(shape.to_vec(), |_| r.random::<f64>())
    }

    fn eval<F>(ts: &TeacherStudent<SegNetwork>, f: F) -> f64
    where
        F: for<'a> Fn(&'a [Var<'a>]) -> Result<Var<'a>>,
    {
        let tape = Tape::new();
        let params = ts.student.params().bind(&tape, true);
        f(&params).unwrap().item().unwrap()
    }

    /// Mean squared difference over valid pixels, as plain loops.
    fn pair_oracle(s: &Tensor, t: &Tensor, valid: &[ValidityMask]) -> f64 {
        let (n, c) = if s.rank() == 4 { (s.shape()[0], s.shape()[1]) } else { (1, s.shape()[0]) };
        let hw = s.len() / (n * c);
        let (mut acc, mut count) = (0.0, 0usize);
        for i in 0..n {
            for k in 0..hw {
                if !valid[i].valid[k] {
                    continue;
                }
                count += 1;
                for ch in 0..c {
                    let idx = (i * c + ch) * hw + k;
                    acc += (s.data()[idx] - t.data()[idx]).powi(2);
                }
            }
        }
        acc / (count * c) as f64
    }

    #[test]
    fn pair_closed_forms() {
        let tape = Tape::new();
        let s = tape.param(Tensor::new([2, 1, 1], vec![1.0, 0.0]).unwrap());
        let t = Tensor::new([2, 1, 1], vec![0.0, 1.0]).unwrap();
        let all = [ValidityMask::all_valid(1, 1)];
        assert_eq!(cons_loss_pair(s, &t, &all).unwrap().item(), Some(1.0));
        assert_eq!(cons_loss_pair(s, &s.to_tensor(), &all).unwrap().item(), Some(0.0));
    }

    #[test]
    fn pair_matches_loop_oracle_and_gradchecks() {
        let s = image(&[2, 3, 4, 5], 1);
        let t = image(&[2, 3, 4, 5], 2);
        let mut r = rng::stream(3, Purpose::Mask, 0);
        let valid: Vec<_> = (0..2)
            .map(|_| ValidityMask {
                height: 4,
                width: 5,
                valid: (0..20).map(|_| r.random::<bool>()).collect(),
            })
            .collect();
        let tape = Tape::new();
        let got = cons_loss_pair(tape.param(s.clone()), &t, &valid).unwrap().item().unwrap();
        assert!((got - pair_oracle(&s, &t, &valid)).abs() < 1e-15);
        let err = max_rel_error(&[s], 0, |_, v| cons_loss_pair(v[0], &t, &valid)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn pair_without_valid_pixels_is_zero() {
        let tape = Tape::new();
        let s = tape.param(image(&[3, 2, 2], 0));
        let none = ValidityMask {
            height: 2,
            width: 2,
            valid: vec![false; 4],
        };
        let l = cons_loss_pair(s, &image(&[3, 2, 2], 1), &[none]).unwrap();
        assert_eq!(l.item(), Some(0.0));
        tape.backward(l).unwrap();
        assert!(s.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn threshold_removes_pixels_from_loss_and_gradient() {
        let target = Tensor::new([2, 1, 2], vec![0.9, 0.55, 0.1, 0.45]).unwrap();
        let mut valid = vec![ValidityMask::all_valid(1, 2)];
        confidence_filter(&target, &mut valid, 0.6).unwrap();
        assert_eq!(valid[0].valid, vec![true, false]);
        let tape = Tape::new();
        let s = tape.param(Tensor::new([2, 1, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let l = cons_loss_pair(s, &target, &valid).unwrap();
        tape.backward(l).unwrap();
        let g = s.grad().unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
        assert!(g.data()[0] != 0.0);
    }

    #[test]
    fn teacher_equals_student_zero_point() {
        let ts = TeacherStudent::new(net(4), 0.99).unwrap();
        let x = image(&[2, 3, 8, 8], 5);
        let (a, b) = (x.select(0).unwrap(), x.select(1).unwrap());
        let id = [AffineParams::IDENTITY; 2];
        let values = [
            eval(&ts, |p| cons_loss_stdaug(&ts, p, &x, &id, None, None)),
            eval(&ts, |p| cons_loss_cutmix(&ts, p, &a, &b, &[MixMask::zeros(8, 8)], None, None)),
            eval(&ts, |p| cons_loss_cutout(&ts, p, &x, &[MixMask::zeros(8, 8), MixMask::zeros(8, 8)], &[0.5; 3], None, None)),
            eval(&ts, |p| cons_loss_ict(&ts, p, &a, &b, &[1.0], None, None)),
        ];
        for v in values {
            assert!(v.abs() < 1e-10, "{v}");
        }
        let cfg = VatConfig {
            epsilon: 0.0,
            ..VatConfig::default()
        };
        let v = eval(&ts, |p| cons_loss_vat(&ts, p, &x, &cfg, &mut rng::stream(0, Purpose::Vat, 0)));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn stdaug_matches_manual_composition() {
        let ts = pair(6, 7);
        let x = image(&[3, 8, 8], 8);
        let mut r = rng::stream(8, Purpose::Affine, 0);
        let p = sample_affine(&mut r, &AffineRanges::default()).unwrap();
        let c = sample_colour(&mut rng::stream(8, Purpose::Colour, 0), &ColourRanges::default()).unwrap();
        let got = eval(&ts, |v| cons_loss_stdaug(&ts, v, &x, &[p], Some(&[c]), None));

        let (target, mask) = apply_affine_map(&ts.teacher.predict_probs(&x).unwrap(), &p).unwrap();
        let (input, _) = apply_affine(&apply_colour(&x, &c).unwrap(), &p).unwrap();
        let student = ts.student.predict_probs(&input).unwrap();
        let expect = pair_oracle(&student, &target, &[mask]);
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
    }

    #[test]
    fn colour_changes_student_input_only() {
        let ts = pair(9, 10);
        let x = image(&[3, 8, 8], 11);
        let p = sample_affine(&mut rng::stream(1, Purpose::Affine, 0), &AffineRanges::default()).unwrap();
        let c = sample_colour(&mut rng::stream(1, Purpose::Colour, 0), &ColourRanges::default()).unwrap();
        let with = eval(&ts, |v| cons_loss_stdaug(&ts, v, &x, &[p], Some(&[c]), None));
        let without = eval(&ts, |v| cons_loss_stdaug(&ts, v, &x, &[p], None, None));
        assert_ne!(with, without);
        // the target map is the teacher's on the raw image either way
        let target = apply_affine_map(&ts.teacher.predict_probs(&x).unwrap(), &p).unwrap().0;
        for colour in [None, Some(c)] {
            let input = apply_affine(&colour.map_or(x.clone(), |c| apply_colour(&x, &c).unwrap()), &p).unwrap();
            let student = ts.student.predict_probs(&input.0).unwrap();
            let expect = pair_oracle(&student, &target, &[input.1]);
            let got = if colour.is_some() { with } else { without };
            assert!((got - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn cutmix_symmetry_and_oracle() {
        let ts = pair(12, 13);
        let a = image(&[3, 8, 8], 14);
        let b = image(&[3, 8, 8], 15);
        let m = sample_box_mask(&mut rng::stream(2, Purpose::Mask, 0), 8, 8, 0.5, MaskKind::Cutmix).unwrap();
        let l = eval(&ts, |v| cons_loss_cutmix(&ts, v, &a, &b, &[m.clone()], None, None));
        let swapped = eval(&ts, |v| cons_loss_cutmix(&ts, v, &b, &a, &[m.inverted()], None, None));
        assert!((l - swapped).abs() < 1e-15);

        let target = mix(
            &ts.teacher.predict_probs(&a).unwrap(),
            &ts.teacher.predict_probs(&b).unwrap(),
            &m,
        )
        .unwrap();
        let student = ts.student.predict_probs(&mix(&a, &b, &m).unwrap()).unwrap();
        let expect = pair_oracle(&student, &target, &[ValidityMask::all_valid(8, 8)]);
        assert!((l - expect).abs() < 1e-14);
    }

    #[test]
    fn cutout_ignores_the_box_and_matches_oracle() {
        let ts = pair(16, 17);
        let x = image(&[3, 8, 8], 18);
        let m = sample_box_mask(&mut rng::stream(3, Purpose::Mask, 0), 8, 8, 0.5, MaskKind::Cutout).unwrap();
        let fill = [0.4, 0.5, 0.6];
        let l = eval(&ts, |v| cons_loss_cutout(&ts, v, &x, &[m.clone()], &fill, None, None));

        let target = ts.teacher.predict_probs(&x).unwrap();
        let student = ts.student.predict_probs(&cutout_apply(&x, &m, &fill).unwrap()).unwrap();
        let outside = ValidityMask {
            height: 8,
            width: 8,
            valid: m.values.iter().map(|&v| v == 0.0).collect(),
        };
        assert!((l - pair_oracle(&student, &target, &[outside])).abs() < 1e-14);

        let full = eval(&ts, |v| cons_loss_cutout(&ts, v, &x, &[MixMask::ones(8, 8)], &fill, None, None));
        assert_eq!(full, 0.0);
    }

    #[test]
    fn ict_symmetry_and_oracle() {
        let ts = pair(19, 20);
        let a = image(&[3, 8, 8], 21);
        let b = image(&[3, 8, 8], 22);
        let l = eval(&ts, |v| cons_loss_ict(&ts, v, &a, &b, &[0.3], None, None));
        let swapped = eval(&ts, |v| cons_loss_ict(&ts, v, &b, &a, &[0.7], None, None));
        assert!((l - swapped).abs() < 1e-12);
        let target = ict_mix(&ts.teacher.predict_probs(&a).unwrap(), &ts.teacher.predict_probs(&b).unwrap(), 0.3).unwrap();
        let student = ts.student.predict_probs(&ict_mix(&a, &b, 0.3).unwrap()).unwrap();
        assert!((l - pair_oracle(&student, &target, &[ValidityMask::all_valid(8, 8)])).abs() < 1e-14);
        assert!(eval_err(&ts, &a, &b));
    }

    fn eval_err(ts: &TeacherStudent<SegNetwork>, a: &Tensor, b: &Tensor) -> bool {
        let tape = Tape::new();
        let params = ts.student.params().bind(&tape, true);
        cons_loss_ict(ts, &params, a, b, &[1.5], None, None).is_err()
    }

    #[test]
    fn vat_matches_bernoulli_closed_form() {
        let net = PixelLinear::new([[0.3, -1.2, 0.5], [1.1, 0.4, -0.7]], [0.1, -0.2]);
        let ts = TeacherStudent::new(net, 0.99).unwrap();
        let x = Tensor::new([3, 1, 1], vec![0.2, 0.5, 0.9]).unwrap();
        let cfg = VatConfig {
            epsilon: 0.5,
            ..VatConfig::default()
        };
        let tape = Tape::new();
        let params = ts.student.params().bind(&tape, true);
        let l = cons_loss_vat(&ts, &params, &x, &cfg, &mut rng::stream(4, Purpose::Vat, 0))
            .unwrap()
            .item()
            .unwrap();
        let r = vat_direction(&ts.student, &x, &cfg, &mut rng::stream(4, Purpose::Vat, 0)).unwrap();
        let moved: Vec<f64> = x.data().iter().zip(r.data()).map(|(a, b)| a + b).collect();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let p = sig(ts.student.logit_gap(x.data()));
        let q = sig(ts.student.logit_gap(&moved));
        assert!((l - bernoulli_kl(p, q)).abs() < 1e-12);
        assert!(l > 0.0);
    }

    #[test]
    fn vat_is_non_negative() {
        let ts = pair(23, 24);
        for seed in 0..4 {
            let x = image(&[2, 3, 8, 8], seed);
            let v = eval(&ts, |p| cons_loss_vat(&ts, p, &x, &VatConfig::default(), &mut rng::stream(seed, Purpose::Vat, 0)));
            assert!(v >= 0.0, "{v}");
        }
    }

    #[test]
    fn no_gradient_reaches_the_teacher() {
        let ts = pair(25, 26);
        let x = image(&[3, 8, 8], 27);
        let tape = Tape::new();
        let student = ts.student.params().bind(&tape, true);
        let teacher = ts.teacher.params().bind(&tape, true);
        let p = sample_affine(&mut rng::stream(5, Purpose::Affine, 0), &AffineRanges::default()).unwrap();
        let l = cons_loss_stdaug(&ts, &student, &x, &[p], None, None).unwrap();
        tape.backward(l).unwrap();
        assert!(teacher.iter().all(|v| v.grad().is_none()));
        assert!(student.iter().any(|v| v.grad().is_some()));
    }

    #[test]
    fn gradchecks_through_every_mode() {
        let ts = pair(28, 29);
        let x = image(&[3, 8, 8], 30);
        let y = image(&[3, 8, 8], 31);
        let p = sample_affine(&mut rng::stream(6, Purpose::Affine, 0), &AffineRanges::default()).unwrap();
        let m = sample_box_mask(&mut rng::stream(6, Purpose::Mask, 0), 8, 8, 0.5, MaskKind::Cutmix).unwrap();
        let inputs: Vec<Tensor> = ts.student.params().iter().map(|(_, t)| t.clone()).collect();
        let names: Vec<&str> = ts.student.params().names().collect();
        let at = |n: &str| names.iter().position(|&x| x == n).unwrap();
        let r = vat_direction(&ts.student, &x, &VatConfig::default(), &mut rng::stream(6, Purpose::Vat, 0)).unwrap();
        let target = ts.student.predict_probs(&x).unwrap();
        for which in [at("head.weight"), at("stem.conv1.weight")] {
            let checks = [
                ("stdaug", max_rel_error(&inputs, which, |_, v| cons_loss_stdaug(&ts, v, &x, &[p], None, None))),
                ("cutmix", max_rel_error(&inputs, which, |_, v| cons_loss_cutmix(&ts, v, &x, &y, &[m.clone()], None, None))),
                ("cutout", max_rel_error(&inputs, which, |_, v| cons_loss_cutout(&ts, v, &x, &[m.clone()], &[0.5; 3], None, None))),
                ("ict", max_rel_error(&inputs, which, |_, v| cons_loss_ict(&ts, v, &x, &y, &[0.4], None, None))),
                ("vat", max_rel_error(&inputs, which, |_, v| vat_loss_given(&ts.student, v, &x, &r, &target))),
            ];
            for (name, err) in checks {
                let err = err.unwrap();
                assert!(err < 1e-4, "{name} {}: {err}", names[which]);
            }
        }
    }
}
