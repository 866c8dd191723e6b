//! Acceptance criteria, one pass/fail line each.
//!
//! Runs every criterion by default. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 1 3 8`.

use std::fs;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use segcons::augment::{
    apply_affine, apply_affine_classes, apply_affine_map, apply_colour, ict_mix, mix, sample_affine, sample_box_mask,
    sample_colour, AffineParams, AffineRanges, ColourOp, ColourParams, ColourRanges, MaskKind, MixMask, ValidityMask,
    VatConfig,
};
use segcons::consistency::{
    cons_loss_cutmix, cons_loss_cutout, cons_loss_ict, cons_loss_pair, cons_loss_stdaug, cons_loss_vat, ConsistencyConfig,
    ConsistencyMode, TeacherStudent,
};
use segcons::data::{gen_shapes_dataset, ClassMap, Dataset, ShapeGenConfig, SplitSpec};
use segcons::metrics::ConfusionMatrix;
use segcons::rng::{self, Purpose};
use segcons::segnet::{ArchDescriptor, Network, SegNetwork};
use segcons::tensor::gradcheck::max_rel_error;
use segcons::tensor::{Tape, Tensor, Var};
use segcons::trainer::{mean_std, run_experiment, RunOutput, TrainConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tiny_arch() -> ArchDescriptor {
    ArchDescriptor {
        in_channels: 3,
        stem_width: 3,
        stage_widths: vec![4],
        classes: 3,
    }
}

fn net(seed: u64) -> SegNetwork {
    SegNetwork::build(tiny_arch(), seed).unwrap()
}

fn image(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, Purpose::Data, 0);
    Tensor::from_fn(shape.to_vec(), |_| r.random::<f64>())
}

// ---------------------------------------------------------------- 1

/// A network at a generic point: zero biases put ReLUs exactly on their
/// kink for constant input regions, where finite differences are one-sided.
fn generic_net(seed: u64) -> SegNetwork {
    let mut n = net(seed);
    let mut r = rng::stream(seed, Purpose::Init, 1);
    for t in n.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += 0.1 * (r.random::<f64>() - 0.5);
        }
    }
    n
}

fn gradchecks() -> Check {
    let start = Instant::now();
    let ts = TeacherStudent::from_pair(generic_net(1), generic_net(2), 0.99).unwrap();
    let x = image(&[2, 3, 8, 8], 3);
    let (a, b) = (image(&[2, 3, 8, 8], 4), image(&[2, 3, 8, 8], 5));
    let mut r = rng::stream(6, Purpose::Affine, 0);
    let affine: Vec<AffineParams> = (0..2).map(|_| sample_affine(&mut r, &AffineRanges::default()).unwrap()).collect();
    let mut r = rng::stream(6, Purpose::Colour, 0);
    let colour: Vec<ColourParams> = (0..2).map(|_| sample_colour(&mut r, &ColourRanges::default()).unwrap()).collect();
    let mut r = rng::stream(6, Purpose::Mask, 0);
    let cutmix: Vec<MixMask> = (0..2).map(|_| sample_box_mask(&mut r, 8, 8, 0.5, MaskKind::Cutmix).unwrap()).collect();
    let cutout: Vec<MixMask> = (0..2).map(|_| sample_box_mask(&mut r, 8, 8, 0.5, MaskKind::Cutout).unwrap()).collect();
    let classes: Vec<Option<usize>> = {
        let mut r = rng::stream(7, Purpose::Data, 0);
        (0..2 * 64).map(|k| (k % 11 != 0).then(|| r.random_range(0..3))).collect()
    };
    let pair_target = ts.teacher.predict_probs(&x).unwrap();
    let mut r = rng::stream(8, Purpose::Mask, 0);
    let pair_valid: Vec<ValidityMask> = (0..2)
        .map(|_| ValidityMask {
            height: 8,
            width: 8,
            valid: (0..64).map(|_| r.random_bool(0.8)).collect(),
        })
        .collect();
    let vat = VatConfig::default();

    let params: Vec<Tensor> = ts.student.params().iter().map(|(_, t)| t.clone()).collect();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    macro_rules! check {
        ($name:expr, |$v:ident| $body:expr) => {{
            let mut w = 0.0f64;
            for which in 0..params.len() {
                let e = max_rel_error(&params, which, |_: &Tape, $v: &[Var<'_>]| $body).map_err(|e| format!("{}: {e}", $name))?;
                w = w.max(e);
            }
            worst.push(($name, w));
        }};
    }
    check!("supervised CE", |v| {
        let logits = ts.student.forward(v, v[0].tape().constant(x.clone()))?;
        Ok::<_, segcons::Error>(logits.cross_entropy_seg(&classes)?)
    });
    check!("pair loss", |v| {
        let probs = ts.student.forward(v, v[0].tape().constant(x.clone()))?.softmax_channels()?;
        Ok::<_, segcons::Error>(cons_loss_pair(probs, &pair_target, &pair_valid)?)
    });
    check!("std-aug", |v| cons_loss_stdaug(&ts, v, &x, &affine, Some(&colour), None));
    check!("cutmix", |v| cons_loss_cutmix(&ts, v, &a, &b, &cutmix, Some((&colour, &colour)), None));
    check!("cutout", |v| cons_loss_cutout(&ts, v, &x, &cutout, &[0.5; 3], None, None));
    check!("ICT", |v| cons_loss_ict(&ts, v, &a, &b, &[0.3, 0.8], None, None));
    check!("VAT", |v| cons_loss_vat(&ts, v, &x, &vat, &mut rng::stream(9, Purpose::Vat, 0)));

    let elapsed = start.elapsed();
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    let summary = format!("{} in {:.1}s", summary.join(", "), elapsed.as_secs_f64());
    for (n, e) in &worst {
        ensure(*e < 1e-4, || format!("{n} max rel. err {e:.3e} >= 1e-4; {summary}"))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("too slow: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------- 2

fn eval_loss<F>(ts: &TeacherStudent<SegNetwork>, f: F) -> f64
where
    F: for<'a> Fn(&'a [Var<'a>]) -> segcons::Result<Var<'a>>,
{
    let tape = Tape::new();
    let params = ts.student.params().bind(&tape, true);
    f(&params).unwrap().item().unwrap()
}

fn zero_point() -> Check {
    let mut worst = 0.0f64;
    let mut vat_max = 0.0f64;
    for seed in 0..5 {
        let ts = TeacherStudent::new(net(seed), 0.99).unwrap();
        let x = image(&[2, 3, 8, 8], 10 + seed);
        let y = image(&[2, 3, 8, 8], 20 + seed);
        let id = [AffineParams::IDENTITY; 2];
        let zeros = vec![MixMask::zeros(8, 8); 2];
        let ones = vec![MixMask::ones(8, 8); 2];
        let values = [
            eval_loss(&ts, |p| cons_loss_stdaug(&ts, p, &x, &id, None, None)),
            eval_loss(&ts, |p| cons_loss_cutmix(&ts, p, &x, &y, &zeros, None, None)),
            eval_loss(&ts, |p| cons_loss_cutmix(&ts, p, &x, &y, &ones, None, None)),
            eval_loss(&ts, |p| cons_loss_cutout(&ts, p, &x, &zeros, &[0.5; 3], None, None)),
            eval_loss(&ts, |p| cons_loss_ict(&ts, p, &x, &y, &[1.0, 0.0], None, None)),
        ];
        for v in values {
            worst = worst.max(v.abs());
        }
        let cfg = VatConfig {
            epsilon: 0.0,
            ..VatConfig::default()
        };
        let v = eval_loss(&ts, |p| cons_loss_vat(&ts, p, &x, &cfg, &mut rng::stream(seed, Purpose::Vat, 0)));
        vat_max = vat_max.max(v.abs());
    }
    let summary = format!("max non-VAT loss {worst:.1e}, VAT at eps=0 {vat_max}");
    ensure(worst < 1e-10, || summary.clone())?;
    ensure(vat_max == 0.0, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 3

/// Inverse of the forward matrix by the 2x2 adjugate.
fn source_of(p: &AffineParams, h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
    let m = p.matrix(h, w);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (dx, dy) = (x - m[0][2], y - m[1][2]);
    ((m[1][1] * dx - m[0][1] * dy) / det, (-m[1][0] * dx + m[0][0] * dy) / det)
}

fn correspondence() -> Result<String, String> {
    let (h, w) = (16, 16);
    let coords = Tensor::from_fn([2, h, w], |k| if k < h * w { (k % w) as f64 } else { ((k - h * w) / w) as f64 });
    let index_map = ClassMap::new(h, w, (0..h * w).map(|k| k as u8).collect()).unwrap();
    let ranges = AffineRanges::default();
    let mut r = rng::stream(11, Purpose::Affine, 0);
    let (mut worst_img, mut worst_map, mut valid_px) = (0.0f64, 0.0f64, 0usize);
    for draw in 0..500 {
        let p = sample_affine(&mut r, &ranges).map_err(|e| e.to_string())?;
        let (img, mask) = apply_affine(&coords, &p).map_err(|e| e.to_string())?;
        let (map, map_mask) = apply_affine_map(&coords, &p).map_err(|e| e.to_string())?;
        let (classes, class_mask) = apply_affine_classes(&index_map, &p);
        ensure(mask == map_mask && mask == class_mask, || format!("draw {draw}: validity masks differ"))?;
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                if !mask.valid[k] {
                    continue;
                }
                valid_px += 1;
                let (sx, sy) = source_of(&p, h, w, j as f64, i as f64);
                let (ix, iy) = (img.data()[k], img.data()[h * w + k]);
                let (mx, my) = (map.data()[k], map.data()[h * w + k]);
                worst_img = worst_img.max((ix - sx).abs()).max((iy - sy).abs());
                worst_map = worst_map.max((mx - sx).abs()).max((my - sy).abs());
                let c = classes.classes[k] as usize;
                ensure((c % w) as f64 == mx && (c / w) as f64 == my, || {
                    format!("draw {draw}: class map and probability map disagree at ({i},{j})")
                })?;
            }
        }
    }
    ensure(valid_px > 0, || "no valid pixels".into())?;
    ensure(worst_img <= 0.5 && worst_map <= 0.5, || {
        format!("coordinate error image {worst_img:.3}, map {worst_map:.3} px")
    })?;
    Ok(format!("coordinate error image {worst_img:.1e} px, map {worst_map:.3} px"))
}

fn mix_identities() -> Result<String, String> {
    let mut r = rng::stream(12, Purpose::Mask, 0);
    for seed in 0..50 {
        let a = image(&[3, 12, 10], 100 + seed);
        let b = image(&[3, 12, 10], 200 + seed);
        let m = sample_box_mask(&mut r, 12, 10, 0.5, MaskKind::Cutmix).unwrap();
        ensure(mix(&a, &b, &m).unwrap() == mix(&b, &a, &m.inverted()).unwrap(), || "mix(a,b,m) != mix(b,a,1-m)".into())?;
        ensure(mix(&a, &b, &MixMask::zeros(12, 10)).unwrap() == a, || "mix with m = 0 is not a".into())?;
        ensure(mix(&a, &b, &MixMask::ones(12, 10)).unwrap() == b, || "mix with m = 1 is not b".into())?;
        let lambda: f64 = r.random();
        let d = ict_mix(&a, &b, lambda).unwrap().max_abs_diff(&ict_mix(&b, &a, 1.0 - lambda).unwrap()).unwrap();
        ensure(d <= 1e-15, || format!("ict(a,b,l) vs ict(b,a,1-l) differ by {d}"))?;
        ensure(ict_mix(&a, &b, 1.0).unwrap() == a && ict_mix(&a, &b, 0.0).unwrap() == b, || "ict endpoints".into())?;
    }
    // The same identities hold through the losses.
    let ts = TeacherStudent::from_pair(net(3), net(4), 0.99).unwrap();
    let a = image(&[3, 8, 8], 5);
    let b = image(&[3, 8, 8], 6);
    let m = sample_box_mask(&mut r, 8, 8, 0.5, MaskKind::Cutmix).unwrap();
    let l = eval_loss(&ts, |p| cons_loss_cutmix(&ts, p, &a, &b, &[m.clone()], None, None));
    let s = eval_loss(&ts, |p| cons_loss_cutmix(&ts, p, &b, &a, &[m.inverted()], None, None));
    ensure(l == s, || format!("cutmix loss not symmetric: {l} vs {s}"))?;
    let l = eval_loss(&ts, |p| cons_loss_ict(&ts, p, &a, &b, &[0.25], None, None));
    let s = eval_loss(&ts, |p| cons_loss_ict(&ts, p, &b, &a, &[0.75], None, None));
    ensure((l - s).abs() <= 1e-12 * l.abs().max(1e-300), || format!("ICT loss not symmetric: {l} vs {s}"))?;
    Ok("mix/ICT identities hold".into())
}

fn mask_area() -> Result<String, String> {
    let mut out = Vec::new();
    for kind in [MaskKind::Cutmix, MaskKind::Cutout] {
        let mut r = rng::stream(13, Purpose::Mask, kind as u64);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_box_mask(&mut r, 64, 64, 0.5, kind).unwrap().coverage())
            .sum::<f64>()
            / n as f64;
        let rel = (mean - 0.5).abs() / 0.5;
        ensure(rel < 0.01, || format!("{kind:?} mean area {mean:.4}, off by {:.2}%", 100.0 * rel))?;
        out.push(format!("{kind:?} area {mean:.4}"));
    }
    Ok(out.join(", "))
}

/// Hue rotation written out from the hexcone model, independent of the
/// library's conversion helpers.
fn hue_oracle(rgb: [f64; 3], shift: f64) -> [f64; 3] {
    let [r, g, b] = rgb;
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    if maxc == minc {
        return rgb;
    }
    let s = (maxc - minc) / maxc;
    let rc = (maxc - r) / (maxc - minc);
    let gc = (maxc - g) / (maxc - minc);
    let bc = (maxc - b) / (maxc - minc);
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    let h = ((h / 6.0).rem_euclid(1.0) + shift).rem_euclid(1.0);
    let v = maxc;
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn colour_checks() -> Result<String, String> {
    let mut orders = Vec::new();
    let mut r = rng::stream(14, Purpose::Colour, 0);
    for _ in 0..24 {
        let mut o = ColourOp::ALL;
        o.shuffle(&mut r);
        orders.push(o);
    }
    for (seed, op_order) in orders.into_iter().enumerate() {
        let img = image(&[3, 9, 7], 300 + seed as u64);
        let p = ColourParams {
            op_order,
            ..ColourParams::IDENTITY
        };
        ensure(apply_colour(&img, &p).unwrap() == img, || format!("identity jitter changed the image ({op_order:?})"))?;
    }
    let mut worst = 0.0f64;
    for seed in 0..40 {
        let img = image(&[3, 6, 6], 400 + seed);
        let shift = r.random_range(-0.5..0.5);
        let p = ColourParams {
            hue: shift,
            ..ColourParams::IDENTITY
        };
        let out = apply_colour(&img, &p).unwrap();
        let hw = 36;
        for k in 0..hw {
            let d = img.data();
            let expect = hue_oracle([d[k], d[hw + k], d[2 * hw + k]], shift);
            for (ch, e) in expect.iter().enumerate() {
                worst = worst.max((out.data()[ch * hw + k] - e).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("hue shift differs from oracle by {worst:.2e}"))?;
    Ok(format!("identity exact, hue oracle max diff {worst:.1e}"))
}

fn augmentation_algebra() -> Check {
    let parts = [correspondence()?, mix_identities()?, mask_area()?, colour_checks()?];
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 4

fn ema() -> Check {
    let mut notes = Vec::new();
    for decay in [0.9, 0.99, 0.999] {
        let ts0 = TeacherStudent::from_pair(net(30), net(31), decay).unwrap();
        let mut ts = ts0.clone();
        let mut worst = 0.0f64;
        for t in 1..=100 {
            ts.ema_update().unwrap();
            let expect_factor = decay.powi(t);
            for ((_, phi0), ((_, phi), (_, theta))) in ts0
                .teacher
                .params()
                .iter()
                .zip(ts.teacher.params().iter().zip(ts.student.params().iter()))
            {
                for ((&p0, &p), &th) in phi0.data().iter().zip(phi.data()).zip(theta.data()) {
                    let got = (p - th).abs();
                    let expect = expect_factor * (p0 - th).abs();
                    let scale = (p0.abs() + th.abs()) * f64::EPSILON * t as f64;
                    worst = worst.max((got - expect).abs() / scale.max(f64::MIN_POSITIVE));
                }
            }
        }
        ensure(worst <= 4.0, || format!("decay {decay}: deviation {worst:.2} x t*eps*scale"))?;
        notes.push(format!("decay {decay}: {worst:.2}"));
    }
    Ok(format!("max deviation in units of t*eps*|values|: {}", notes.join(", ")))
}

// ---------------------------------------------------------------- 5

/// Reduced fraction.
fn reduce(n: u128, d: u128) -> (u128, u128) {
    let (mut a, mut b) = (n, d);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    (n / a.max(1), d / a.max(1))
}

/// mIoU by counting pixels per class and averaging the fractions exactly.
fn miou_oracle(pred: &ClassMap, gt: &ClassMap, classes: usize) -> (f64, Vec<Option<f64>>) {
    let mut per_class = Vec::new();
    let (mut num, mut den) = (0u128, 1u128);
    let mut present = 0u128;
    for c in 0..classes {
        let both = pred.classes.iter().zip(&gt.classes).filter(|(&p, &g)| p as usize == c && g as usize == c).count();
        let either = pred.classes.iter().zip(&gt.classes).filter(|(&p, &g)| p as usize == c || g as usize == c).count();
        if either == 0 {
            per_class.push(None);
            continue;
        }
        per_class.push(Some(both as f64 / either as f64));
        present += 1;
        (num, den) = reduce(num * either as u128 + both as u128 * den, den * either as u128);
    }
    let (num, den) = reduce(num, den * present);
    (num as f64 / den as f64, per_class)
}

fn metrics() -> Check {
    let gt = ClassMap::new(2, 2, vec![0, 1, 0, 1]).unwrap();
    let pred = ClassMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt).unwrap();
    let worked = cm.miou().map_err(|e| e.to_string())?.miou;
    ensure(worked == 7.0 / 12.0, || format!("2x2 example gives {worked}, expected 7/12"))?;

    let mut r = rng::stream(15, Purpose::Data, 0);
    for trial in 0..2000 {
        let classes = r.random_range(2..=6usize);
        let (h, w) = (r.random_range(1..=16usize), r.random_range(1..=16usize));
        let agree: f64 = r.random();
        let gt: Vec<u8> = (0..h * w).map(|_| r.random_range(0..classes) as u8).collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| if r.random_bool(agree) { g } else { r.random_range(0..classes) as u8 })
            .collect();
        let gt = ClassMap::new(h, w, gt).unwrap();
        let pred = ClassMap::new(h, w, pred).unwrap();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &gt).unwrap();
        let got = cm.miou().map_err(|e| e.to_string())?;
        let (miou, per_class) = miou_oracle(&pred, &gt, classes);
        ensure(got.miou == miou && got.per_class == per_class, || {
            format!("trial {trial}: {:?} vs oracle {miou} {per_class:?}", got)
        })?;
        if classes == 2 {
            for positive in 0..2 {
                let j = cm.jaccard_binary(positive).map_err(|e| e.to_string())?;
                ensure(j == per_class[positive].unwrap_or(1.0), || format!("trial {trial}: Jaccard {j}"))?;
            }
        }
    }
    Ok(format!("2x2 example = {worked} (7/12); 2000 random maps match the oracle exactly"))
}

// ---------------------------------------------------------------- 6, 7

const SHORTCUT_STEPS: usize = 1000;
const SHORTCUT_SEEDS: u64 = 5;
const SANITY_STEPS: usize = 3000;
const SANITY_SEEDS: u64 = 3;

fn shapes() -> Dataset {
    let cfg = ShapeGenConfig {
        overlap: 1.0,
        ..ShapeGenConfig::default()
    };
    gen_shapes_dataset(&cfg, 0).unwrap()
}

fn setting(mode: ConsistencyMode, colour: bool, gamma: f64, steps: usize) -> TrainConfig {
    let mut c = TrainConfig {
        steps,
        consistency: ConsistencyConfig::new(mode, gamma),
        eval_interval: steps / 4,
        ..TrainConfig::default()
    };
    c.augment.colour = colour;
    c
}

fn colour_shortcut() -> Check {
    let start = Instant::now();
    let data = shapes();
    let settings = [
        ("std-aug +colour g=1", setting(ConsistencyMode::StdAug, true, 1.0, SHORTCUT_STEPS)),
        ("std-aug -colour g=1", setting(ConsistencyMode::StdAug, false, 1.0, SHORTCUT_STEPS)),
        ("std-aug -colour g=0.003", setting(ConsistencyMode::StdAug, false, 0.003, SHORTCUT_STEPS)),
        ("cutmix +colour g=1", setting(ConsistencyMode::Cutmix, true, 1.0, SHORTCUT_STEPS)),
    ];
    let mut means = Vec::new();
    let mut lines = Vec::new();
    for (name, cfg) in &settings {
        let mut finals = Vec::new();
        for seed in 0..SHORTCUT_SEEDS {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let spec = SplitSpec {
                total: data.train.len(),
                labelled_count: 20,
                seed,
            };
            let r = run_experiment(&cfg, &data, &spec, None).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            finals.push(r.final_eval.miou);
        }
        let (m, s) = mean_std(&finals).unwrap();
        let per_seed: Vec<String> = finals.iter().map(|v| format!("{v:.3}")).collect();
        eprintln!("    {name}: {m:.4} ± {s:.4} [{}]", per_seed.join(" "));
        lines.push(format!("{name} {m:.4}"));
        means.push(m);
    }
    let elapsed = start.elapsed();
    let summary = format!("{} in {:.0}s", lines.join(", "), elapsed.as_secs_f64());
    let claims = [
        ("(a) colour jitter helps at g=1", means[0] > means[1]),
        ("(b) g=1 without colour <= g=0.003", means[1] <= means[2]),
        ("(c) cutmix >= std-aug with colour", means[3] >= means[0]),
    ];
    let failed: Vec<&str> = claims.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    ensure(failed.is_empty(), || format!("failed {}; {summary}", failed.join(", ")))?;
    ensure(elapsed <= Duration::from_secs(2 * 3600), || format!("over the 2 h budget; {summary}"))?;
    Ok(summary)
}

fn supervised_sanity() -> Check {
    let data = shapes();
    let cfg = setting(ConsistencyMode::StdAug, false, 0.0, SANITY_STEPS);
    let mut out = Vec::new();
    for seed in 0..SANITY_SEEDS {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let spec = SplitSpec {
            total: data.train.len(),
            labelled_count: data.train.len(),
            seed,
        };
        let r = run_experiment(&cfg, &data, &spec, None).map_err(|e| e.to_string())?;
        let m = r.final_eval.miou;
        out.push(format!("seed {seed} {m:.4}"));
        ensure(m > 0.9, || format!("seed {seed} ends at mIoU {m:.4} after {SANITY_STEPS} steps; {}", out.join(", ")))?;
    }
    Ok(format!("{SANITY_STEPS} steps: {}", out.join(", ")))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Check {
    let gen = ShapeGenConfig {
        height: 16,
        width: 16,
        train_count: 12,
        val_count: 4,
        min_radius: 2.5,
        max_radius: 4.0,
        ..ShapeGenConfig::default()
    };
    let data = gen_shapes_dataset(&gen, 3).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let modes = [
        ConsistencyMode::StdAug,
        ConsistencyMode::Cutout,
        ConsistencyMode::Cutmix,
        ConsistencyMode::Ict,
        ConsistencyMode::Vat,
    ];
    for mode in modes {
        let mut cfg = setting(mode, true, 1.0, 6);
        cfg.arch = ArchDescriptor {
            classes: data.classes,
            ..tiny_arch()
        };
        cfg.labelled_batch = 2;
        cfg.unlabelled_batch = 2;
        cfg.eval_interval = 3;
        cfg.seed = 7;
        let spec = SplitSpec {
            total: 12,
            labelled_count: 4,
            seed: 7,
        };
        let mut csvs = Vec::new();
        for rep in 0..2 {
            let out = RunOutput {
                dir: dir.path().join(format!("{}-{rep}", mode.name())),
                run_id: mode.name().into(),
                resolved: None,
            };
            run_experiment(&cfg, &data, &spec, Some(&out)).map_err(|e| e.to_string())?;
            csvs.push(fs::read(out.dir.join("metrics.csv")).map_err(|e| e.to_string())?);
        }
        ensure(csvs[0] == csvs[1], || format!("{} metrics differ between repeats", mode.name()))?;
    }
    Ok("metrics CSV byte-identical across repeats for all five modes".into())
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 8] = [
        (1, "gradcheck suite", gradchecks),
        (2, "zero-point suite", zero_point),
        (3, "augmentation algebra suite", augmentation_algebra),
        (4, "EMA suite", ema),
        (5, "metrics suite", metrics),
        (6, "colour-shortcut experiment", colour_shortcut),
        (7, "supervised sanity", supervised_sanity),
        (8, "determinism", determinism),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {n}. {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {n}. {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
