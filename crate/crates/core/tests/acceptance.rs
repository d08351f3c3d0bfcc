//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.
//!
//! Criterion 7 trains 12 models and takes hours on one CPU core. Its
//! results are cached under `target/acceptance-cache`, keyed by a hash of the
//! core sources, the experiment configuration and the dataset checksum, so
//! re-runs with unchanged code are quick. Set `DEFREG_ACCEPTANCE_RERUN=1` to
//! ignore the cache.

mod desk;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use defreg_core::data::{intensity_remap, minmax_normalize, gaussian_blur3};
use defreg_core::grids::{warp_array, warp_tensor};
use defreg_core::losses::{
    appearance_loss, global_alignment_loss, info_nce, info_nce_rows, local_alignment_loss, patch_nce_loss,
    smoothness_loss,
};
use defreg_core::training::{evaluate_with, read_steps, step_rng, summarize, PairTensors};
use defreg_core::{
    data, dice, fit, generate_shapes_splits, hd95, lr_at_epoch, synthesize_modality, total_loss, warp_mask, write_report,
    ArchConfig, DatasetSplits, DeformationField, ElasticDeformConfig, FitOptions, Interpolation, LossTerm, LossWeights,
    MaskGrid, NceConfig, Precision, Spacing, TrainConfig, Trainer,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

// criterion 1
const FD_STEP: f64 = 1e-5;
const FD_PROBES: usize = 12;
const FD_REL_TOL: f64 = 1e-4;
// relative error denominators are floored here so that gradients that are
// zero analytically compare on an absolute scale
const FD_DENOM_FLOOR: f64 = 1e-6;
// criterion 2
const WARP_TOL: f64 = 1e-6;
// criterion 3
const NCE_REL_TOL: f64 = 1e-6;
// criterion 4
const HD95_TOL: f64 = 1e-9;

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DEFREG_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", c1_gradients),
        (2, "warp identity and oracle", c2_warp),
        (3, "InfoNCE closed forms", c3_info_nce),
        (4, "metric oracles", c4_metrics),
        (5, "objective composition and schedule", c5_composition),
        (6, "local-term stop-gradient", c6_stop_gradient),
        (7, "desk experiment", desk::c7_desk_experiment),
        (8, "reproducibility", c8_reproducibility),
        (9, "synthetic-modality generator", c9_generator),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Worst relative error between autograd and central differences over
/// `FD_PROBES` random elements of each input.
fn grad_check(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let ts: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&ts).backward().unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let g = grads
            .get(vars[i].as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; input.elem_count()]);
        let base = input.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..FD_PROBES {
            let k = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                let mut args = inputs.to_vec();
                args[i] = Tensor::from_vec(v, input.dims(), &Device::Cpu).unwrap();
                scalar(&f(&args))
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let err = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn tiny_config(precision: Precision) -> TrainConfig {
    TrainConfig {
        precision,
        arch: ArchConfig {
            reg_channels: vec![4, 8, 8],
            trans_base_channels: 4,
            trans_res_blocks: 2,
            trans_encoder_blocks: 1,
            embed_dim: 16,
        },
        nce: NceConfig {
            num_locations: 16,
            layer_ids: vec![0, 2, 3, 4],
            ..Default::default()
        },
        epochs: 2,
        decay_start_epoch: 1,
        checkpoint_interval: 1,
        ..Default::default()
    }
}

fn c1_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let trainer = Trainer::new(tiny_config(Precision::F64)).map_err(|e| e.to_string())?;
    let net = trainer.translation_net();
    let heads = trainer.heads();
    let nce = trainer.config().nce.clone();
    let tau = nce.tau;

    let img = |rng: &mut ChaCha8Rng| randn(rng, &[1, 1, 16, 16], 1.0);
    let cases: Vec<(&str, Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>)> = vec![
        (
            "info_nce",
            vec![randn(&mut rng, &[8], 0.4), randn(&mut rng, &[8], 0.4), randn(&mut rng, &[5, 8], 0.4)],
            Box::new(move |a: &[Tensor]| info_nce(&a[0], &a[1], &a[2], tau).unwrap()),
        ),
        (
            "info_nce_rows",
            vec![randn(&mut rng, &[6, 8], 0.4), randn(&mut rng, &[6, 8], 0.4)],
            Box::new(move |a: &[Tensor]| info_nce_rows(&a[0], &a[1], tau).unwrap()),
        ),
        (
            "patch_nce_loss",
            vec![img(&mut rng), img(&mut rng)],
            Box::new(|a: &[Tensor]| {
                let mut r = ChaCha8Rng::seed_from_u64(5);
                patch_nce_loss(&a[0], &a[1], net, heads, &nce, &mut r).unwrap()
            }),
        ),
        (
            "local_alignment_loss",
            vec![img(&mut rng), img(&mut rng)],
            Box::new(|a: &[Tensor]| {
                let mut r = ChaCha8Rng::seed_from_u64(6);
                local_alignment_loss(&a[0], &a[1], net, heads, &nce, &mut r).unwrap()
            }),
        ),
        (
            "appearance_loss",
            vec![img(&mut rng), img(&mut rng)],
            Box::new(|a: &[Tensor]| appearance_loss(&a[0], &a[1]).unwrap()),
        ),
        (
            "global_alignment_loss",
            vec![img(&mut rng), img(&mut rng)],
            Box::new(|a: &[Tensor]| global_alignment_loss(&a[0], &a[1]).unwrap()),
        ),
        (
            "smoothness_loss",
            vec![randn(&mut rng, &[1, 2, 12, 12], 2.0)],
            Box::new(|a: &[Tensor]| smoothness_loss(&a[0]).unwrap()),
        ),
        (
            "appearance_loss through warp (field)",
            vec![img(&mut rng), randn(&mut rng, &[1, 2, 16, 16], 3.0), img(&mut rng)],
            Box::new(|a: &[Tensor]| appearance_loss(&warp_tensor(&a[0], &a[1]).unwrap(), &a[2]).unwrap()),
        ),
    ];
    let mut report = Vec::new();
    let mut bad = Vec::new();
    for (name, inputs, f) in &cases {
        let worst = grad_check(inputs, f.as_ref(), &mut rng);
        report.push(format!("{name} {worst:.1e}"));
        if !(worst < FD_REL_TOL) {
            bad.push(format!("{name}: worst rel err {worst:.3e}"));
        }
    }
    check(bad.is_empty(), || bad.join("; "))?;
    Ok(format!("{FD_PROBES} probes/input, max rel err: {}", report.join(", ")))
}

// ---------------------------------------------------------------- 2

/// Bilinear sampling written as a tent-kernel sum over every pixel.
fn tent_sample(img: &Array2<f64>, r: f64, c: f64) -> f64 {
    let (h, w) = img.dim();
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            acc += tent(r - i as f64) * tent(c - j as f64) * img[[i, j]];
        }
    }
    acc
}

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> DeformationField {
    DeformationField::new(Array3::from_shape_fn((2, h, w), |_| rng.random_range(-amp..amp))).unwrap()
}

fn c2_warp() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_arr = 0.0f64;
    let mut worst_tensor = 0.0f64;
    for case in 0..20 {
        let img = Array2::from_shape_fn((16, 16), |_| rng.random_range(-1.0..1.0));
        // some cases push samples past the border
        let amp = if case % 2 == 0 { 2.5 } else { 6.0 };
        let field = random_field(&mut rng, 16, 16, amp);

        let id = warp_array(img.view(), &DeformationField::identity(16, 16).unwrap(), Interpolation::Bilinear)
            .map_err(|e| e.to_string())?;
        check(id == img, || format!("case {case}: zero-field warp is not the identity"))?;

        let got = warp_array(img.view(), &field, Interpolation::Bilinear).map_err(|e| e.to_string())?;
        let t_img = Tensor::from_vec(img.iter().copied().collect::<Vec<_>>(), (1, 1, 16, 16), &Device::Cpu).unwrap();
        let t_field = field.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let got_t = warp_tensor(&t_img, &t_field).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for r in 0..16 {
            for c in 0..16 {
                let want = tent_sample(&img, r as f64 + field.row_component()[[r, c]], c as f64 + field.col_component()[[r, c]]);
                worst_arr = worst_arr.max((got[[r, c]] - want).abs());
                worst_tensor = worst_tensor.max((got_t[r * 16 + c] - want).abs());
            }
        }
    }
    check(worst_arr < WARP_TOL && worst_tensor < WARP_TOL, || {
        format!("oracle deviation: array {worst_arr:.3e}, tensor {worst_tensor:.3e}")
    })?;

    // nearest-neighbour mask warps never invent labels, and sub-half-pixel
    // fields leave the mask untouched
    for case in 0..20 {
        let labels = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..4u16));
        let mask = MaskGrid::new(labels).unwrap();
        let warped = warp_mask(&mask, &random_field(&mut rng, 16, 16, 5.0)).unwrap();
        check(warped.label_set().is_subset(&mask.label_set()), || {
            format!("mask case {case}: warp introduced labels")
        })?;
        let small = warp_mask(&mask, &random_field(&mut rng, 16, 16, 0.49)).unwrap();
        check(small == mask, || format!("mask case {case}: |phi| < 0.5 changed the mask"))?;
        let id = warp_mask(&mask, &DeformationField::identity(16, 16).unwrap()).unwrap();
        check(id == mask, || format!("mask case {case}: identity warp changed the mask"))?;
    }
    Ok(format!(
        "20 cases, max |warp - oracle| array {worst_arr:.1e}, tensor {worst_tensor:.1e}; mask label sets preserved"
    ))
}

// ---------------------------------------------------------------- 3

fn c3_info_nce() -> Outcome {
    // 257 dimensions: room for a query orthogonal to 256 keys
    let k = 257;
    let dev = Device::Cpu;
    let e = |i: usize| {
        let mut v = vec![0.0f64; k];
        v[i] = 1.0;
        Tensor::from_vec(v, k, &dev).unwrap()
    };
    let negs = Tensor::stack(&(1..=255).map(e).collect::<Vec<_>>(), 0).unwrap();
    let tau = 0.07;

    // matched query, 255 orthogonal negatives: log(1 + 255 e^{-1/tau})
    let matched = scalar(&info_nce(&e(0), &e(0), &negs, tau).map_err(|e| e.to_string())?);
    let want_matched = (255.0 * (-1.0f64 / tau).exp()).ln_1p();
    // query orthogonal to the positive and every negative: all logits 0
    let uniform = scalar(&info_nce(&e(256), &e(0), &negs, tau).map_err(|e| e.to_string())?);
    let want_uniform = 256f64.ln();

    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    check(rel(matched, want_matched) < NCE_REL_TOL, || {
        format!("matched case {matched:.6e} vs {want_matched:.6e}")
    })?;
    check(rel(uniform, want_uniform) < NCE_REL_TOL, || {
        format!("uniform case {uniform:.9} vs {want_uniform:.9}")
    })?;
    // the quoted 1.594e-4 is the closed form rounded up in its last digit
    // (exact value 1.59330e-4), so it is only held to 1e-3
    check(rel(want_matched, 1.594e-4) < 1e-3, || format!("closed form {want_matched:e} is not ~1.594e-4"))?;
    Ok(format!(
        "matched {matched:.6e} (rel err {:.1e} vs closed form {want_matched:.6e}; quoted 1.594e-4 off by {:.1e} rel), uniform {uniform:.9} (rel err {:.1e})",
        rel(matched, want_matched),
        rel(want_matched, 1.594e-4),
        rel(uniform, want_uniform)
    ))
}

// ---------------------------------------------------------------- 4

fn brute_dice(a: &Array2<u16>, b: &Array2<u16>, label: u16) -> f64 {
    let pa: BTreeSet<(usize, usize)> = a.indexed_iter().filter(|(_, &v)| v == label).map(|(p, _)| p).collect();
    let pb: BTreeSet<(usize, usize)> = b.indexed_iter().filter(|(_, &v)| v == label).map(|(p, _)| p).collect();
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    2.0 * pa.intersection(&pb).count() as f64 / (pa.len() + pb.len()) as f64
}

fn brute_boundary(m: &Array2<u16>, label: u16) -> Vec<(usize, usize)> {
    let (h, w) = m.dim();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m[[r as usize, c as usize]] == label;
    m.indexed_iter()
        .filter(|(_, &v)| v == label)
        .map(|(p, _)| p)
        .filter(|&(r, c)| {
            let (r, c) = (r as i64, c as i64);
            !(inside(r - 1, c - 1)
                && inside(r - 1, c)
                && inside(r - 1, c + 1)
                && inside(r, c - 1)
                && inside(r, c + 1)
                && inside(r + 1, c - 1)
                && inside(r + 1, c)
                && inside(r + 1, c + 1))
        })
        .collect()
}

fn brute_p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] * (1.0 - (pos - lo as f64)) + d[hi] * (pos - lo as f64)
}

fn brute_hd95(a: &Array2<u16>, b: &Array2<u16>, label: u16, sr: f64, sc: f64) -> f64 {
    let ba = brute_boundary(a, label);
    let bb = brute_boundary(b, label);
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dr = (r as f64 - r2 as f64) * sr;
                        let dc = (c as f64 - c2 as f64) * sc;
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    brute_p95(directed(&ba, &bb)).max(brute_p95(directed(&bb, &ba)))
}

fn c4_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_hd = 0.0f64;
    let mut hd_cases = 0;
    for case in 0..200 {
        let h = rng.random_range(1..=8);
        let w = rng.random_range(1..=8);
        let a = Array2::from_shape_fn((h, w), |_| rng.random_range(0..3u16));
        let b = Array2::from_shape_fn((h, w), |_| rng.random_range(0..3u16));
        let spacing = Spacing {
            row: rng.random_range(0.5..2.0),
            col: rng.random_range(0.5..2.0),
        };
        let (ma, mb) = (MaskGrid::new(a.clone()).unwrap(), MaskGrid::new(b.clone()).unwrap());
        for label in 0..3u16 {
            let d = dice(&ma, &mb, label).unwrap();
            let want = brute_dice(&a, &b, label);
            check(d == want, || format!("case {case} label {label}: dice {d} vs brute {want}"))?;
            let empty = !a.iter().any(|&v| v == label) || !b.iter().any(|&v| v == label);
            match hd95(&ma, &mb, label, spacing) {
                Ok(v) => {
                    check(!empty, || format!("case {case} label {label}: hd95 defined on an empty set"))?;
                    let want = brute_hd95(&a, &b, label, spacing.row, spacing.col);
                    worst_hd = worst_hd.max((v - want).abs());
                    hd_cases += 1;
                }
                Err(_) => check(empty, || format!("case {case} label {label}: hd95 failed on non-empty sets"))?,
            }
        }
    }
    check(worst_hd <= HD95_TOL, || format!("hd95 deviates from brute force by {worst_hd:.3e}"))?;

    // 3x3 square vs the same square shifted one column
    let mut a = Array2::<u16>::zeros((6, 6));
    let mut b = Array2::<u16>::zeros((6, 6));
    a.slice_mut(ndarray::s![1..4, 1..4]).fill(1);
    b.slice_mut(ndarray::s![1..4, 2..5]).fill(1);
    let d = dice(&MaskGrid::new(a).unwrap(), &MaskGrid::new(b).unwrap(), 1).unwrap();
    check(d == 12.0 / 18.0, || format!("hand-counted dice {d} != 12/18"))?;
    check(format!("{d:.4}") == "0.6667", || format!("hand-counted dice prints as {d:.4}"))?;

    // two single pixels 5 px apart
    let mut a = Array2::<u16>::zeros((8, 8));
    let mut b = Array2::<u16>::zeros((8, 8));
    a[[1, 1]] = 1;
    b[[1, 6]] = 1;
    let h = hd95(&MaskGrid::new(a).unwrap(), &MaskGrid::new(b).unwrap(), 1, Spacing::UNIT).unwrap();
    check(h == 5.0, || format!("single-pixel hd95 {h} != 5"))?;
    Ok(format!(
        "200 random masks: dice exact, hd95 max |diff| {worst_hd:.1e} over {hd_cases} defined cases; 0.6667 and 5.0 examples exact"
    ))
}

// ---------------------------------------------------------------- 5

fn c5_composition() -> Outcome {
    let weights = LossWeights {
        lambda_s: 0.0,
        ..Default::default()
    };
    check(
        (weights.lambda_p, weights.lambda_a, weights.lambda_l, weights.lambda_g) == (0.25, 1.0, 0.25, 1.0),
        || "default weights differ from 0.25/1/0.25/1".into(),
    )?;
    let terms: BTreeMap<LossTerm, f64> = LossTerm::ALL.iter().map(|&t| (t, 1.0)).collect();
    let total = total_loss(&terms, &weights).map_err(|e| e.to_string())?;
    check(total == 2.75, || format!("total_loss {total} != 2.75"))?;

    let cfg = TrainConfig::default();
    let lr250 = lr_at_epoch(250, &cfg).map_err(|e| e.to_string())?;
    let lr300 = lr_at_epoch(300, &cfg).map_err(|e| e.to_string())?;
    check(lr250 == 0.0001, || format!("lr_at_epoch(250) = {lr250}"))?;
    check(lr300 == 0.0, || format!("lr_at_epoch(300) = {lr300}"))?;
    Ok(format!("total_loss = {total}, lr(250) = {lr250}, lr(300) = {lr300}"))
}

// ---------------------------------------------------------------- 6

fn small_splits(seed: u64, counts: [usize; 3]) -> DatasetSplits {
    let elastic = ElasticDeformConfig {
        control_grid_spacing: 8.0,
        max_displacement: 2.0,
        smoothing_sigma: 1.0,
        seed,
    };
    generate_shapes_splits(counts, 16, &elastic, seed).unwrap()
}

fn c6_stop_gradient() -> Outcome {
    let splits = small_splits(6, [3, 0, 0]);
    let mut trainer = Trainer::new(tiny_config(Precision::F64)).map_err(|e| e.to_string())?;
    let pairs: Vec<PairTensors> = splits
        .train
        .records
        .iter()
        .map(|r| PairTensors::new(&r.source, &r.target, trainer.dtype(), trainer.device()).unwrap())
        .collect();
    let mut checked = 0;
    for step in 1..=5u64 {
        let pair = &pairs[(step as usize) % pairs.len()];
        let mut rng = step_rng(1000, step);
        let norms = trainer
            .term_gradient_norms(pair, LossTerm::Local, &mut rng)
            .map_err(|e| e.to_string())?;
        let leaked: Vec<String> = norms
            .iter()
            .filter(|(name, &v)| !name.starts_with("reg.") && v != 0.0)
            .map(|(name, v)| format!("{name}={v:e}"))
            .collect();
        check(leaked.is_empty(), || format!("step {step}: local gradient reached {}", leaked.join(", ")))?;
        let reg_norm: f64 = norms.iter().filter(|(n, _)| n.starts_with("reg.")).map(|(_, v)| v).sum();
        check(reg_norm > 0.0, || format!("step {step}: local term gives R no gradient"))?;
        checked += norms.iter().filter(|(n, _)| !n.starts_with("reg.")).count();
        let mut rng = step_rng(1000, step);
        trainer.train_step(&[pair], 2e-4, &mut rng).map_err(|e| e.to_string())?;
    }
    Ok(format!("5 training steps, {} T/H parameter tensors each exactly zero", checked / 5))
}

// ---------------------------------------------------------------- 8

fn c8_reproducibility() -> Outcome {
    let splits = small_splits(8, [5, 1, 2]);
    let cfg = TrainConfig {
        seed: 77,
        ..tiny_config(Precision::F32)
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(Vec<defreg_core::training::StepRecord>, Vec<u8>), String> {
        let dir = tmp.path().join(name);
        let out = fit(&splits, &cfg, &FitOptions {
            write_samples: false,
            ..FitOptions::new(&dir)
        })
        .map_err(|e| e.to_string())?;
        let steps = read_steps(&dir.join("steps.csv")).map_err(|e| e.to_string())?;
        let (metrics, _) = evaluate_with(&splits.test, |r| out.trainer.register(&r.source, &r.target)).map_err(|e| e.to_string())?;
        let report = summarize(&metrics).map_err(|e| e.to_string())?.ok_or("no scored pairs")?;
        write_report(&report, &dir.join("eval")).map_err(|e| e.to_string())?;
        let csv = std::fs::read(dir.join("eval/report.csv")).map_err(|e| e.to_string())?;
        Ok((steps, csv))
    };
    let (s1, r1) = run("a")?;
    let (s2, r2) = run("b")?;
    check(s1.len() >= 10, || format!("only {} steps recorded", s1.len()))?;
    for (i, (a, b)) in s1.iter().zip(&s2).take(10).enumerate() {
        check(a.terms == b.terms && a.total == b.total, || {
            format!("step {}: {:?} vs {:?}", i + 1, a.terms, b.terms)
        })?;
    }
    check(r1 == r2, || "report.csv differs between runs".into())?;
    Ok(format!(
        "first 10 step losses bitwise equal (step 10 total {:.6}); report.csv identical ({} bytes)",
        s1[9].total,
        r1.len()
    ))
}

// ---------------------------------------------------------------- 9

fn c9_generator() -> Outcome {
    let pi = std::f64::consts::PI;
    let img = Array2::from_shape_vec((1, 3), vec![0.0, 255.0, 127.5]).unwrap();
    let fg = Array2::from_elem((1, 3), true);
    let r = intensity_remap(img.view(), &fg);
    check(r[[0, 0]] == 1.0 && r[[0, 1]] == -1.0, || format!("endpoints map to {} and {}", r[[0, 0]], r[[0, 1]]))?;
    check(r[[0, 2]].abs() < 1e-15, || format!("I=127.5 maps to {}", r[[0, 2]]))?;

    // background untouched by the intensity step
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..20 {
        let img = Array2::from_shape_fn((12, 12), |_| rng.random_range(0.0..255.0f64).round());
        let fg = Array2::from_shape_fn((12, 12), |_| rng.random_bool(0.5));
        let out = intensity_remap(img.view(), &fg);
        for ((&o, &i), &f) in out.iter().zip(img.iter()).zip(fg.iter()) {
            if f {
                check(o == (i * pi / 255.0).cos(), || format!("foreground {i} -> {o}"))?;
            } else {
                check(o.to_bits() == i.to_bits(), || format!("background {i} changed to {o}"))?;
            }
        }
    }

    // zero elastic amplitude: the output is the remapped, blurred input on
    // the same grid, and the stored field is exactly zero
    let zero = ElasticDeformConfig {
        control_grid_spacing: 8.0,
        max_displacement: 0.0,
        smoothing_sigma: 2.0,
        seed: 0,
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (img8, mask) = data::generate_shapes_image(32, &mut rng).map_err(|e| e.to_string())?;
        let out = synthesize_modality(&img8, Some(&mask), 3, &zero, &mut rng).map_err(|e| e.to_string())?;
        check(out.field.displacements().iter().all(|&v| v == 0.0), || format!("seed {seed}: field not zero"))?;
        let fg = mask.labels().mapv(|l| l > 0);
        let (want, _) = minmax_normalize(gaussian_blur3(intensity_remap(img8.data().view(), &fg).view()).view());
        check(out.image.data() == &want, || format!("seed {seed}: zero-elastic output is not spatially unchanged"))?;
        let warped = warp_mask(&mask, &out.field).unwrap();
        check(warped == mask, || format!("seed {seed}: mask moved under the zero field"))?;
    }
    Ok("cos endpoints exact, background bit-identical, zero-elastic identity exact".into())
}
