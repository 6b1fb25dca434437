//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

#[path = "../../core/tests/support/gradcheck.rs"]
#[allow(dead_code)]
mod gradcheck;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand::Rng;

use deid_core::evalkit::{deid_effective_rate, ssim, ssim_planes, ToyVerifier};
use deid_core::facegeom::{
    aligned_crop, distance, estimate_affine, unwarp_face, warp_image, write_landmark_jsonl, AffineTransform, CanonicalTemplate,
    LandmarkRecord,
};
use deid_core::fatm::{read_checkpoint, write_checkpoint, FatmConfig, FatmModel, CODE_LEN, DECODER_PARAM_COUNT, ENCODER_PARAM_COUNT};
use deid_core::image::Image;
use deid_core::maskblend::{distance_to_polygon, interpolate_side, mask_hull};
use deid_core::rng::{self, Rng as Stream};
use deid_core::toyfaces::{generate_face_set, render_samples, render_samples_for, IdentityParams, ToySample};
use deid_core::trainer::{window_mean, FaceSet, LossRecord, TrainConfig, Trainer};
use deid_forge::commands::{cmd_deid, cmd_eval, cmd_gen_toy, cmd_train, EvalOutput, Manifest, TIMINGS_FILE};
use deid_forge::config::{Overrides, PipelineConfig};
use deid_forge::Deidentifier;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// The model trained for criterion 3, reused by 4, 6 and 8.
#[derive(Default)]
struct Shared {
    model: Option<FatmModel<f32>>,
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let mut totals: Vec<(&str, gradcheck::Report)> = Vec::new();
    for seed in 0..20 {
        for (name, rep) in gradcheck::op_suite(seed) {
            match totals.iter_mut().find(|(n, _)| *n == name) {
                Some((_, t)) => t.merge(rep),
                None => totals.push((name, rep)),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (name, rep) in &totals {
        let ok = if *name == "fatm reconstruction" { rep.ok_with_skips(gradcheck::MODEL_MAX_SKIPS) } else { rep.ok() };
        worst = worst.max(rep.max_rel);
        if !ok {
            failed.push(format!("{name} {:.2e}", rep.max_rel));
        }
    }
    outcome(
        failed.is_empty() && secs < 60.0,
        format!("{} checks x 20 seeds, max rel err {worst:.2e}, {secs:.1}s {}", totals.len(), failed.join(", ")),
    )
}

// ---------------------------------------------------------------- 2

fn architecture() -> Result<Outcome> {
    let m = FatmModel::<f32>::new(FatmConfig::full(), &["a"], 1)?;
    let face = Image::from_fn(64, 64, |x, y| [x as f32 / 63.0, y as f32 / 63.0, 0.5]).to_tensor::<f32>();
    let (code, enc) = m.encode_traced(&face)?;
    let (out, dec) = m.decode_traced(&code, "a")?;
    let want_enc: Vec<Vec<usize>> = vec![
        vec![32, 32, 128],
        vec![16, 16, 256],
        vec![8, 8, 512],
        vec![4, 4, 1024],
        vec![1024],
        vec![16384],
    ];
    let want_dec: Vec<Vec<usize>> = vec![
        vec![4, 4, 1024],
        vec![8, 8, 512],
        vec![16, 16, 256],
        vec![32, 32, 128],
        vec![64, 64, 64],
        vec![64, 64, 3],
    ];
    let counts = (m.encoder().param_count(), m.decoder("a")?.param_count());
    let pass = enc == want_enc
        && dec == want_dec
        && code.shape() == [CODE_LEN]
        && out.shape() == [64, 64, 3]
        && counts == (ENCODER_PARAM_COUNT, DECODER_PARAM_COUNT)
        && CODE_LEN == 16384;
    outcome(pass, format!("encoder {enc:?}, decoder {dec:?}, params {counts:?}"))
}

// ---------------------------------------------------------------- 3

const TRAIN_ITERS: u64 = 5000;
const REPLAY_ITERS: u64 = 100;

fn convergence_config(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 64,
        learning_rate: 5e-5,
        seed: 7,
        checkpoint_interval: REPLAY_ITERS,
        model: FatmConfig::narrowed(16).expect("valid divisor"),
        ..TrainConfig::default()
    }
}

fn toy_sets() -> Result<Vec<FaceSet>> {
    (0..2)
        .map(|i| Ok(generate_face_set(&IdentityParams::preset(i)?, &format!("id{i}"), 500, 100 + i as u64)?))
        .collect()
}

/// Trains and returns the checkpoint bytes and history at `REPLAY_ITERS`.
fn train_with_snapshot(sets: &[FaceSet], iterations: u64) -> Result<(FatmModel<f32>, Vec<LossRecord>, Vec<u8>, Vec<LossRecord>)> {
    let mut t = Trainer::new(sets, convergence_config(iterations))?;
    let mut snap = (Vec::new(), Vec::new());
    t.run(|t| {
        if t.iteration() == REPLAY_ITERS {
            write_checkpoint(t.model(), &mut snap.0).expect("in-memory write");
            snap.1 = t.history().to_vec();
        }
        Ok(())
    })?;
    let history = t.history().to_vec();
    Ok((t.into_model(), history, snap.0, snap.1))
}

fn convergence(shared: &mut Shared) -> Result<Outcome> {
    let sets = toy_sets()?;
    let start = Instant::now();
    let (model, history, snap, snap_hist) = train_with_snapshot(&sets, TRAIN_ITERS)?;
    let secs = start.elapsed().as_secs_f64();
    let mut ratios = Vec::new();
    for id in ["id0", "id1"] {
        let lead = window_mean(&history, id, 100, false).unwrap_or(f64::NAN);
        let trail = window_mean(&history, id, 100, true).unwrap_or(f64::NAN);
        ratios.push((id, lead, trail, trail / lead));
    }
    // Second run with the same seed, replayed to the snapshot iteration.
    let (replay, replay_hist, _, _) = train_with_snapshot(&sets, REPLAY_ITERS)?;
    let mut replay_bytes = Vec::new();
    write_checkpoint(&replay, &mut replay_bytes)?;
    let same = replay_bytes == snap && replay_hist == snap_hist;
    shared.model = Some(model);
    let pass = ratios.iter().all(|r| r.3 <= 0.5) && same && secs <= 7200.0;
    let desc: Vec<String> = ratios.iter().map(|(id, l, t, r)| format!("{id} {l:.4}->{t:.4} ({r:.3})")).collect();
    outcome(
        pass,
        format!(
            "{}; rerun identical through iteration {REPLAY_ITERS}: {same}; {secs:.0}s",
            desc.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 4

fn crops(samples: &[ToySample]) -> Result<Vec<Image>> {
    samples.iter().map(|s| Ok(aligned_crop(&s.image, &s.landmarks)?.0)).collect()
}

fn identity_swap(shared: &Shared) -> Result<Outcome> {
    let Some(model) = shared.model.as_ref() else {
        return outcome(false, "no trained model from criterion 3".into());
    };
    let a = IdentityParams::preset(0)?;
    let b = IdentityParams::preset(1)?;
    let ref_a = crops(&render_samples_for(&a, 0, 100, 900, 128)?)?;
    let ref_b = crops(&render_samples_for(&b, 1, 100, 901, 128)?)?;
    let verifier = ToyVerifier::fit(&[("id0".into(), ref_a), ("id1".into(), ref_b)])?;
    let test_a = crops(&render_samples_for(&a, 0, 100, 902, 128)?)?;
    let swap = Deidentifier::new(model, "id1", 1.0)?;
    let mut to_b = 0;
    for f in &test_a {
        let (i, _) = verifier.nearest(&swap.swap_crop(f)?);
        if verifier.labels[i] == "id1" {
            to_b += 1;
        }
    }
    let frac = to_b as f64 / test_a.len() as f64;
    let pairs: Vec<(Image, Image)> = (0..200)
        .map(|k| (test_a[k % 100].clone(), test_a[(k * 7 + 1 + k / 100) % 100].clone()))
        .collect();
    let report = deid_effective_rate(&pairs, |img| swap.swap_crop(img), &verifier)?;
    let pass = frac >= 0.8 && report.effective_rate >= 0.8 && report.n_pairs == 200;
    outcome(
        pass,
        format!(
            "{:.1}% of swapped held-out faces nearest to the donor; same-identity rate {:.3} -> {:.3}, effective {:.3} on {} pairs",
            100.0 * frac,
            report.pre_deid_same_rate,
            report.post_deid_same_rate,
            report.effective_rate,
            report.n_pairs
        ),
    )
}

// ---------------------------------------------------------------- 5

fn closed_form(p0: [f64; 2], p5: [f64; 2]) -> [[f64; 2]; 4] {
    let q = |v: f64| BigRational::from_float(v).expect("finite");
    std::array::from_fn(|k| {
        let i = k as i64 + 1;
        let t = BigRational::new(BigInt::from(i * (i + 1)), BigInt::from(30));
        let s = BigRational::new(BigInt::from(i), BigInt::from(5));
        let x = q(p0[0]) + (q(p5[0]) - q(p0[0])) * t;
        let y = q(p0[1]) + (q(p5[1]) - q(p0[1])) * s;
        [x.to_f64().expect("finite"), y.to_f64().expect("finite")]
    })
}

fn mask_formula() -> Result<Outcome> {
    let worked = interpolate_side([10.0, 20.0], [25.0, 45.0])?;
    let example = worked == [[11.0, 25.0], [13.0, 30.0], [16.0, 35.0], [20.0, 40.0]];
    let mut r = rng::stream(55, &[]);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let mut p = || [r.gen_range(-2e3..2e3), r.gen_range(-2e3..2e3)];
        let (a, b) = (p(), p());
        let got = interpolate_side(a, b)?;
        let want = closed_form(a, b);
        if got.iter().flatten().zip(want.iter().flatten()).any(|(g, w)| g.to_bits() != w.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(
        example && mismatches == 0,
        format!("worked example {worked:?}; {mismatches} bitwise mismatches in 10^4 pairs"),
    )
}

// ---------------------------------------------------------------- 6 and 8

fn pipeline_frames() -> Result<Vec<(ToySample, &'static str)>> {
    let mut out = Vec::new();
    for (preset, donor) in [(0, "id1"), (1, "id0")] {
        for s in render_samples(preset, 25, 600 + preset as u64, 128)? {
            out.push((s, donor));
        }
    }
    Ok(out)
}

fn splice_locality(shared: &Shared) -> Result<Outcome> {
    let Some(model) = shared.model.as_ref() else {
        return outcome(false, "no trained model from criterion 3".into());
    };
    let mut far = 0usize;
    let mut violations = 0usize;
    let mut runs = 0;
    for (s, donor) in pipeline_frames()? {
        let out = Deidentifier::new(model, donor, 1.0)?.run(&s.image, &s.landmarks)?;
        let hull = mask_hull(&s.landmarks)?;
        for y in 0..s.image.height() {
            for x in 0..s.image.width() {
                if distance_to_polygon([x as f64, y as f64], &hull) > 3.0 * out.sigma {
                    far += 1;
                    let (p, q) = (s.image.pixel(x, y), out.image.pixel(x, y));
                    if p.iter().zip(&q).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        violations += 1;
                    }
                }
            }
        }
        runs += 1;
    }
    outcome(
        runs == 50 && violations == 0 && far > 0,
        format!("{runs} runs, {far} pixels beyond 3 sigma, {violations} changed"),
    )
}

/// Direct per-window SSIM with an explicit 2-D Gaussian window.
fn naive_ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (oy + i) * w + ox + j;
                    mx += g[i][j] / total * x[k];
                    my += g[i][j] / total * y[k];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = (oy + i) * w + ox + j;
                    let wt = g[i][j] / total;
                    vx += wt * (x[k] - mx).powi(2);
                    vy += wt * (y[k] - my).powi(2);
                    cxy += wt * (x[k] - mx) * (y[k] - my);
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn random_image(r: &mut Stream, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| [r.gen(), r.gen(), r.gen()])
}

fn ssim_checks(shared: &Shared) -> Result<Outcome> {
    let mut r = rng::stream(81, &[]);
    let (mut self_err, mut sym_err, mut oracle_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let a = random_image(&mut r, 32, 32);
        let b = random_image(&mut r, 32, 32);
        let b = Image::from_raw(32, 32, a.data().iter().zip(b.data()).map(|(p, n)| 0.7 * p + 0.3 * n).collect())?;
        self_err = self_err.max((ssim(&a, &a)? - 1.0).abs());
        let ab = ssim(&a, &b)?;
        sym_err = sym_err.max((ab - ssim(&b, &a)?).abs());
        let (la, lb) = (a.luma(), b.luma());
        oracle_err = oracle_err.max((ssim_planes(&la, &lb, 32, 32)? - naive_ssim(&la, &lb, 32, 32)).abs());
    }
    let Some(model) = shared.model.as_ref() else {
        return outcome(false, "no trained model from criterion 3".into());
    };
    let mut scores = Vec::new();
    for (s, donor) in pipeline_frames()? {
        let out = Deidentifier::new(model, donor, 1.0)?.run(&s.image, &s.landmarks)?;
        scores.push(ssim(&s.image, &out.image)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = self_err <= 1e-9 && sym_err <= 1e-9 && oracle_err <= 1e-6 && mean >= 0.9;
    outcome(
        pass,
        format!(
            "self {self_err:.1e}, symmetry {sym_err:.1e}, oracle {oracle_err:.1e}; pipeline SSIM mean {mean:.4} (min {min:.4}) over {} frames",
            scores.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn geometry() -> Result<Outcome> {
    let mut r = rng::stream(70, &[]);
    let template = &CanonicalTemplate::standard().points;
    let mut coef: f64 = 0.0;
    let mut fitted = 0;
    while fitted < 500 {
        let t = AffineTransform {
            m: [
                [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-60.0..60.0)],
                [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), r.gen_range(-60.0..60.0)],
            ],
        };
        if t.determinant().abs() < 0.1 {
            continue;
        }
        coef = coef.max(estimate_affine(template, &template.transformed(&t))?.max_coefficient_error(&t));
        fitted += 1;
    }

    // Landmark round trip: Gaussian blobs at well-separated landmarks go
    // through align, crop and unwarp; their centroids must stay put.
    let picks = [8usize, 30, 36, 39, 42, 45, 48, 54];
    let mut worst_lm: f64 = 0.0;
    for s in render_samples(2, 10, 71, 128)? {
        let lm = &s.landmarks;
        let img = Image::from_fn(128, 128, |x, y| {
            let v: f64 = picks
                .iter()
                .map(|&i| {
                    let p = lm.point(i);
                    (-((x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2)) / 2.88).exp()
                })
                .sum();
            [v.min(1.0) as f32; 3]
        });
        let (crop, t) = aligned_crop(&img, lm)?;
        let back = unwarp_face(&crop, &t, 128, 128)?;
        let centroid = |im: &Image, p: [f64; 2]| {
            let (cx, cy) = (p[0].round() as usize, p[1].round() as usize);
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for y in cy - 4..=cy + 4 {
                for x in cx - 4..=cx + 4 {
                    let w = im.pixel(x, y)[0] as f64;
                    sx += w * x as f64;
                    sy += w * y as f64;
                    sw += w;
                }
            }
            [sx / sw, sy / sw]
        };
        for &i in &picks {
            worst_lm = worst_lm.max(distance(centroid(&back.image, lm.point(i)), centroid(&img, lm.point(i))));
        }
    }

    let img = Image::from_fn(96, 96, |x, y| {
        let (u, v) = (x as f32 / 95.0, y as f32 / 95.0);
        [0.5 + 0.4 * (6.0 * u).sin() * (4.0 * v).cos(), 0.5 + 0.3 * (5.0 * (u + v)).cos(), u * v]
    });
    let mut worst_psnr = f64::INFINITY;
    for (deg, s) in [(12.0, 1.1), (-25.0, 0.9), (40.0, 1.0)] {
        let t = AffineTransform::rotation_about([47.5, 47.5], deg, s).compose(&AffineTransform::translation(2.5, -1.25));
        let back = warp_image(&warp_image(&img, &t, 96, 96)?, &t.inverse()?, 96, 96)?;
        let inner = |im: &Image| -> Vec<f64> { (24..72).flat_map(|y| (24..72).flat_map(move |x| im.pixel(x, y).map(f64::from))).collect() };
        worst_psnr = worst_psnr.min(psnr(&inner(&img), &inner(&back)));
    }
    outcome(
        coef <= 1e-6 && worst_lm < 0.75 && worst_psnr > 30.0,
        format!("coefficient error {coef:.1e}; landmark round trip {worst_lm:.3} px; warp round trip {worst_psnr:.1} dB"),
    )
}

// ---------------------------------------------------------------- 9

fn write_frames(dir: &Path, samples: &[ToySample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut recs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        s.image.save_png(&dir.join(&name))?;
        recs.push(LandmarkRecord {
            image: name,
            points: s.landmarks.clone(),
        });
    }
    write_landmark_jsonl(&dir.join("landmarks.jsonl"), &recs)?;
    Ok(())
}

fn throughput() -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let ckpt = tmp.path().join("full.fatm");
    {
        let model = FatmModel::<f32>::new(FatmConfig::full(), &["donor"], 3)?;
        deid_core::fatm::save_checkpoint(&model, &ckpt)?;
    }
    let frames = tmp.path().join("frames");
    let id = IdentityParams::preset(2)?;
    write_frames(&frames, &render_samples_for(&id, 2, 3, 77, 256)?)?;
    let cfg = PipelineConfig {
        checkpoint: Some(ckpt),
        out: Some(tmp.path().join("out")),
        deid: deid_forge::config::DeidSection {
            inputs: vec![frames],
            ..Default::default()
        },
        ..Default::default()
    };
    let start = Instant::now();
    let s = cmd_deid(&cfg)?;
    let total = start.elapsed().as_secs_f64();
    let n = s.timings.frames.len();
    let worst = s.timings.frames.iter().map(|f| f.seconds).fold(0.0, f64::max);
    outcome(
        n == 3 && worst <= 1.0,
        format!(
            "full-width model, {n} frames of 256x256: mean {:.3} s, worst {worst:.3} s per frame ({total:.1} s with checkpoint load)",
            s.timings.mean_seconds
        ),
    )
}

// ---------------------------------------------------------------- 10

fn tree(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with(TIMINGS_FILE) {
                out.push((p.strip_prefix(dir)?.to_path_buf(), fs::read(&p)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

const PERSIST_CONFIG: &str = r#"{
  "seed": 5,
  "checkpoint": "model.fatm",
  "gen_toy": { "identities": [2, 3], "images": 8, "size": 96, "heldout": 6, "pairs": 10 },
  "train": { "face_sets": ["toy/id2", "toy/id3"],
             "params": { "iterations": 4, "batch_size": 4, "model": { "encoder_channels": [8, 16, 32, 64], "dense_units": 64, "decoder_channels": [32, 16, 8, 4] } } },
  "deid": { "inputs": ["toy/id2", "toy/id3"], "donor_mode": "round_robin" },
  "eval": { "pairs": "toy/pairs.jsonl", "verifier": "toy/verifier.json" }
}"#;

/// Runs every command into `root` and returns the produced files.
fn full_run(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fs::create_dir_all(root)?;
    let cfg_path = root.join("config.json");
    fs::write(&cfg_path, PERSIST_CONFIG)?;
    let load = |out: &str| {
        PipelineConfig::load(
            &cfg_path,
            &Overrides {
                out: Some(root.join(out)),
                ..Overrides::default()
            },
        )
    };
    cmd_gen_toy(&load("toy")?)?;
    cmd_train(&load("train")?)?;
    cmd_deid(&load("deid")?)?;
    cmd_eval(&load("eval")?)?;
    tree(root)
}

fn persistence() -> Result<Outcome> {
    let model = FatmModel::<f32>::new(FatmConfig::narrowed(8)?, &["x", "y"], 12)?;
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes)?;
    let back = read_checkpoint(&bytes)?;
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again)?;
    let ckpt_ok = back == model && again == bytes;

    let tmp = tempfile::tempdir()?;
    let a = full_run(&tmp.path().join("a"))?;
    let b = full_run(&tmp.path().join("b"))?;
    let identical = a == b;

    let manifest_text = fs::read_to_string(tmp.path().join("a/deid/manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    let report_text = fs::read_to_string(tmp.path().join("a/eval/report.json"))?;
    let report: EvalOutput = serde_json::from_str(&report_text)?;
    let reparse = serde_json::to_string_pretty(&manifest)? + "\n" == manifest_text
        && serde_json::to_string_pretty(&report)? + "\n" == report_text
        && report.paired.is_consistent();
    ensure!(manifest.jobs.len() == 2, "manifest lists {} jobs", manifest.jobs.len());
    outcome(
        ckpt_ok && identical && reparse,
        format!(
            "checkpoint round trip {ckpt_ok} ({} bytes); manifest and report re-serialize identically: {reparse}; two full runs byte-identical over {} files: {identical}",
            bytes.len(),
            a.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failures = 0;
    let mut ran = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut(&mut Shared) -> Result<Outcome>, shared: &mut Shared| {
        if !only.is_empty() && !only.contains(&n) {
            return;
        }
        ran += 1;
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| f(shared)));
        let (pass, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(_) => (false, "panicked".into()),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "gradient correctness", &mut |_| gradients(), &mut shared);
    report(2, "architecture fidelity", &mut |_| architecture(), &mut shared);
    report(3, "training convergence", &mut convergence, &mut shared);
    report(4, "identity swap", &mut |s| identity_swap(s), &mut shared);
    report(5, "mask formula", &mut |_| mask_formula(), &mut shared);
    report(6, "splice locality", &mut |s| splice_locality(s), &mut shared);
    report(7, "geometry", &mut |_| geometry(), &mut shared);
    report(8, "ssim", &mut |s| ssim_checks(s), &mut shared);
    report(9, "throughput", &mut |_| throughput(), &mut shared);
    report(10, "persistence", &mut |_| persistence(), &mut shared);
    println!("{} of {ran} criteria passed", ran - failures);
}
