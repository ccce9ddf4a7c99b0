//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `cargo test --test acceptance -- 3 5` runs a subset by number. Any other
//! filter string that does not mention "acceptance" skips the whole suite,
//! so `cargo test <unit-test-name>` stays fast.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use croplandws::checkpoint::Checkpoint;
use croplandws::eval::{argmax_binary, confusion, map_region, metrics, ConfusionMatrix, TilePredictor};
use croplandws::fusion::{rate_quality, ProductStack, IGNORE};
use croplandws::loss::{dice_similarity, find_matches, sample_anchors, supervised_loss, unsupervised_loss, AnchorSet, LossWeights};
use croplandws::model::{LevelValidity, ModelConfig, ModelInput, UTae};
use croplandws::nn::{Tape, Tensor};
use croplandws::raster::{tile_plan, RasterGrid, TileIndex};
use croplandws::sits::{build_patches, NormStats, PatchSample, SitsCube};
use croplandws::synth::{corrupt_cube, generate_world, robustness_grid, CorruptionConfig, ErrorRates, SyntheticWorld, WorldConfig};
use croplandws::train::{continue_train, train, validate, TrainConfig, ValidationSample};
use croplandws::Result;
use ndarray::{s, Array2, Array3, Array4};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (usize, &'static str, u64, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "metric identities vs published tables", 1, c01_metric_identities),
    (2, "label fusion oracle", 5, c02_fusion_oracle),
    (3, "loss oracles", 30, c03_loss_oracles),
    (4, "gradient check of the weakly supervised loss", 300, c04_gradient_check),
    (5, "normalization invariants", 60, c05_normalization),
    (6, "synthetic end-to-end beats input products", 1800, c06_end_to_end),
    (7, "weak-supervision ablation", 3600, c07_ablation),
    (8, "robustness grid contract", 600, c08_robustness_grid),
    (9, "continue training beats direct transfer", 3600, c09_continue_training),
    (10, "mosaicking oracle", 60, c10_mosaic_oracle),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let numbers: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let filtered_out = !args.is_empty() && numbers.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str()));
    if filtered_out {
        println!("acceptance: skipped by filter");
        return;
    }
    let mut failed = Vec::new();
    for (n, name, limit_s, run) in CRITERIA {
        if !numbers.is_empty() && !numbers.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(limit_s);
        let pass = out.pass && in_time;
        println!(
            "criterion {n:>2} {}: {name} ({}; {:.1}s of {limit_s}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

/// Builds a confusion matrix whose class accuracies are the given
/// percentages. Rows are reference (non-crop, crop), columns prediction.
fn matrix_from_accuracies(pa_crop: f64, ua_crop: f64, pa_non: f64) -> ConfusionMatrix {
    let r1 = 1e9;
    let tp = pa_crop / 100.0 * r1;
    let fn_ = r1 - tp;
    let fp = tp * (100.0 / ua_crop - 1.0);
    let r0 = fp / (1.0 - pa_non / 100.0);
    let tn = r0 - fp;
    ConfusionMatrix { counts: [[tn.round() as u64, fp.round() as u64], [fn_.round() as u64, tp.round() as u64]] }
}

fn c01_metric_identities() -> Outcome {
    // (area, pa_non, ua_non, pa_crop, ua_crop, expected crop F1, non-crop F1, avg F1)
    let rows = [
        ("Hunan", 90.09, 92.94, 68.82, 60.38, 64.32, Some(91.49), Some(77.91)),
        ("Southwest France", 81.40, 74.09, 80.63, 86.44, 83.44, None, None),
        ("Kansas", 92.81, 85.95, 83.72, 91.56, 87.47, None, None),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (area, pa0, ua0, pa1, ua1, crop, non, avg) in rows {
        let cm = matrix_from_accuracies(pa1, ua1, pa0);
        let r = metrics(&cm).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 0.05 + 1e-9;
        ok &= close(r.pa_crop, pa1) && close(r.ua_crop, ua1) && close(r.pa_noncrop, pa0) && close(r.ua_noncrop, ua0);
        ok &= close(r.crop_f1, crop);
        notes.push(format!("{area} crop F1 {:.2}", r.crop_f1));
        if let Some(v) = non {
            ok &= close(r.noncrop_f1, v);
            notes.push(format!("non-crop F1 {:.2}", r.noncrop_f1));
        }
        if let Some(v) = avg {
            ok &= close(r.avg_f1, v);
            notes.push(format!("avg F1 {:.2}", r.avg_f1));
        }
    }
    outcome(ok, notes.join(", "))
}

// ---------------------------------------------------------------- 2

fn c02_fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let layers: Vec<Array2<u8>> = (0..3)
            .map(|_| {
                Array2::from_shape_fn((32, 32), |_| match rng.random_range(0..10) {
                    0 => IGNORE,
                    v if v < 6 => 1,
                    _ => 0,
                })
            })
            .collect();
        let stack = ProductStack::new(RasterGrid::local(32, 32), layers.clone(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let (mask, fused) = rate_quality(&stack).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let vals: Vec<u8> = layers.iter().map(|l| l[[r, c]]).collect();
                let good = vals.iter().all(|&v| v != IGNORE) && vals.iter().all(|&v| v == vals[0]);
                let (m, l) = if good { (1, vals[0]) } else { (0, IGNORE) };
                mismatches += usize::from(mask.mask[[r, c]] != m) + usize::from(fused.labels[[r, c]] != l);
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 100 stacks"))
}

// ---------------------------------------------------------------- 3

fn random_distributions(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, quantize: bool) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; d * plane];
    for p in 0..plane {
        let raw: Vec<f64> = (0..d)
            .map(|_| {
                let v: f64 = rng.random::<f64>() * 3.0;
                if quantize { (v * 2.0).round() / 2.0 } else { v }
            })
            .collect();
        let total: f64 = raw.iter().map(|v| v.exp()).sum();
        for c in 0..d {
            data[c * plane + p] = raw[c].exp() / total;
        }
    }
    Tensor::from_vec(&[1, d, h, w], data)
}

fn pixel(z: &Tensor, p: usize) -> Vec<f64> {
    let (_, d, h, w) = z.dims4();
    (0..d).map(|c| z.data()[c * h * w + p]).collect()
}

fn brute_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (if a < eps { eps } else { a }, if b < eps { eps } else { b });
            a * (a.ln() - b.ln())
        })
        .sum()
}

fn brute_dice(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = 2.0 * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>() + b.iter().map(|y| y * y).sum::<f64>();
    if den == 0.0 { 1.0 } else { num / den }
}

/// Exhaustive search: rank every candidate, ties to the lowest index.
fn brute_matches(z: &Tensor, anchors: &[usize], pool: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let (_, _, h, w) = z.dims4();
    let mut out = Vec::new();
    for &a in anchors {
        let za = pixel(z, a);
        let mut cands: Vec<(f64, usize)> =
            pool.iter().filter(|&&q| q != a).map(|&q| (brute_dice(&za, &pixel(z, q)), q)).collect();
        cands.sort_by(|x, y| x.1.cmp(&y.1));
        cands.dedup_by_key(|c| c.1);
        if cands.is_empty() {
            continue;
        }
        let mut by_high = cands.clone();
        by_high.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let mut by_low = cands;
        by_low.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let (r, c) = (a / w, a % w);
        let mut nbrs: Vec<(f64, usize)> = Vec::new();
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                let q = rr * w + cc;
                if q != a {
                    nbrs.push((brute_dice(&za, &pixel(z, q)), q));
                }
            }
        }
        nbrs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        out.push((a, by_high[0].1, by_low[0].1, nbrs[0].1));
    }
    out
}

fn c03_loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    let mut match_failures = 0;
    for case in 0..50 {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let plane = h * w;

        // supervised loss
        let k = rng.random_range(2..5);
        let probs = random_distributions(&mut rng, k, h, w, false);
        let labels: Vec<u8> = (0..plane).map(|_| if rng.random_bool(0.15) { IGNORE } else { rng.random_range(0..k) as u8 }).collect();
        let mask: Vec<u8> = (0..plane).map(|_| u8::from(rng.random_bool(0.6))).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(probs.clone());
        let (sl, _) = supervised_loss(&mut tape, pv, &labels, &mask).unwrap();
        let got = tape.value(sl).item();
        let terms: Vec<f64> = (0..plane)
            .filter(|&p| mask[p] == 1 && labels[p] != IGNORE)
            .map(|p| -pixel(&probs, p)[labels[p] as usize].max(1e-12).ln())
            .collect();
        let want = if terms.is_empty() { 0.0 } else { terms.iter().sum::<f64>() / terms.len() as f64 };
        worst[0] = worst[0].max((got - want).abs());

        // dice
        let a: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
        worst[1] = worst[1].max((dice_similarity(&a, &b) - brute_dice(&a, &b)).abs());

        // matches, pool of at most 64
        let d = rng.random_range(2..6);
        let z = random_distributions(&mut rng, d, h, w, case % 2 == 0);
        let n_anchor = rng.random_range(1..=plane);
        let n_pool = rng.random_range(1..=plane.min(64));
        let (anchors, pool) = sample_anchors(plane, n_anchor, n_pool, case);
        let set = find_matches(&z, &anchors, &pool).unwrap();
        let got_m: Vec<_> = set.matches.iter().map(|m| (m.anchor, m.similar, m.dissimilar, m.neighbor)).collect();
        if got_m != brute_matches(&z, &anchors, &pool) {
            match_failures += 1;
        }

        // unsupervised loss on that match set
        let lw = LossWeights {
            alpha: rng.random::<f64>() * 2.0,
            beta: rng.random::<f64>() * 2.0,
            gamma: rng.random::<f64>() * 2.0,
            margin: rng.random::<f64>() * 2.0,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let (usl, _) = unsupervised_loss(&mut tape, zv, &set, &lw);
        let got = tape.value(usl).item();
        let n = set.matches.len() as f64;
        let mut want = 0.0;
        for m in &set.matches {
            let za = pixel(&z, m.anchor);
            want += lw.alpha * brute_kl(&za, &pixel(&z, m.similar), lw.epsilon) / n;
            want += lw.beta * (lw.margin - brute_kl(&za, &pixel(&z, m.dissimilar), lw.epsilon)).max(0.0) / n;
            want += lw.gamma * brute_kl(&za, &pixel(&z, m.neighbor), lw.epsilon) / n;
        }
        worst[3] = worst[3].max((got - want).abs());
    }
    let pass = worst.iter().all(|&e| e <= 1e-6) && match_failures == 0;
    outcome(
        pass,
        format!(
            "max error CE {:.1e}, dice {:.1e}, USL {:.1e}; {match_failures} match mismatches",
            worst[0], worst[1], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 4

fn tiny_config(t: usize, c: usize) -> ModelConfig {
    ModelConfig {
        levels: 2,
        widths: vec![8, 16, 32],
        input_channels: c,
        attention_heads: 2,
        temporal_positions: t,
        d_model: 8,
        d_k: 4,
        norm_groups: 2,
        ..Default::default()
    }
}

fn random_input(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize, invalid: f64) -> ModelInput {
    let validity: Vec<bool> = (0..t * h * w).map(|_| !rng.random_bool(invalid)).collect();
    let mut x: Vec<f64> = (0..t * c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    for ti in 0..t {
        for ci in 0..c {
            for p in 0..h * w {
                if !validity[ti * h * w + p] {
                    x[(ti * c + ci) * h * w + p] = 0.0;
                }
            }
        }
    }
    let positions = (1..=t).map(|v| v as f64 * 12.0 / t as f64).collect();
    ModelInput::new(Tensor::from_vec(&[t, c, h, w], x), validity, positions).unwrap()
}

/// Loss_WS with a fixed match set; returns the loss and, when asked, the
/// gradients of every parameter.
fn ws_loss(
    model: &UTae,
    input: &ModelInput,
    labels: &[u8],
    mask: &[u8],
    set: &AnchorSet,
    lw: &LossWeights,
    grads: bool,
) -> (f64, BTreeMap<String, Tensor>) {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, grads);
    let f = model.forward(&mut tape, &p, input).unwrap();
    let z = model.feature_space(&mut tape, &f.decoder);
    let (sl, _) = supervised_loss(&mut tape, f.probs, labels, mask).unwrap();
    let (usl, _) = unsupervised_loss(&mut tape, z, set, lw);
    let total = tape.combine(&[(sl, lw.supervised_weight), (usl, 1.0)]);
    let value = tape.value(total).item();
    let mut out = BTreeMap::new();
    if grads {
        let mut g = tape.backward(total);
        for (name, &v) in p.iter() {
            if let Some(t) = g.take(v) {
                out.insert(name.clone(), t);
            }
        }
    }
    (value, out)
}

fn c04_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, c, h, w) = (4, 3, 16, 16);
    let model = UTae::new(ModelConfig { init_seed: 4, ..tiny_config(t, c) }).unwrap();
    let input = random_input(&mut rng, t, c, h, w, 0.2);
    let labels: Vec<u8> = (0..h * w).map(|_| if rng.random_bool(0.1) { IGNORE } else { rng.random_range(0..2) }).collect();
    let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(0.7))).collect();
    let lw = LossWeights { anchors: 48, pool: 96, ..Default::default() };

    // Match set on the unperturbed feature space; anchors whose
    // dissimilarity sits within 1e-4 of the hinge are excluded.
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let f = model.forward(&mut tape, &p, &input).unwrap();
    let zv = model.feature_space(&mut tape, &f.decoder);
    let z = tape.value(zv).clone();
    let (anchors, pool) = sample_anchors(h * w, lw.anchors, lw.pool, 4);
    let mut set = find_matches(&z, &anchors, &pool).unwrap();
    let before = set.matches.len();
    set.matches.retain(|m| (brute_kl(&pixel(&z, m.anchor), &pixel(&z, m.dissimilar), lw.epsilon) - lw.margin).abs() > 1e-4);
    let hinge_skipped = before - set.matches.len();

    let (_, grads) = ws_loss(&model, &input, &labels, &mask, &set, &lw, true);
    let names: Vec<&String> = model.params.keys().collect();
    let total: usize = model.params.values().map(|t| t.len()).sum();
    let picks = rand::seq::index::sample(&mut rng, total, 128).into_vec();
    let step = 1e-6;
    let (mut checked, mut bad, mut worst) = (0, 0, 0.0f64);
    for flat in picks {
        let (mut name, mut idx) = (names[0], flat);
        for n in &names {
            let len = model.params[*n].len();
            if idx < len {
                name = n;
                break;
            }
            idx -= len;
        }
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().data_mut()[idx] += delta;
            ws_loss(&m, &input, &labels, &mask, &set, &lw, false).0
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[idx]);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-7 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        checked += 1;
        if rel > 1e-3 {
            bad += 1;
        }
    }
    outcome(
        checked >= 100 && bad == 0,
        format!("{checked} parameters, {bad} outside 1e-3, worst relative error {worst:.2e}, {hinge_skipped} anchors at the hinge skipped"),
    )
}

// ---------------------------------------------------------------- 5

fn c05_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut att_err, mut prob_err, mut mosaic_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut fallbacks = 0;
    for case in 0..18u64 {
        let (t, c) = (6, 2);
        let (h, w) = (rng.random_range(1..4) * 8, rng.random_range(1..4) * 8);
        let frames = Array4::from_shape_fn((t, c, h, w), |_| rng.random::<f64>());
        let cube = SitsCube::new(frames, (1..=t as u32).collect(), Array3::from_elem((t, h, w), true)).unwrap();
        // Every third case keeps a single frame, mostly clouded, so some
        // coarse pixels have no valid observation at all.
        let (sr, tr) = if case % 3 == 0 {
            (0.8, 5.0 / 6.0)
        } else {
            (rng.random_range(0..5) as f64 / 10.0, rng.random_range(0..6) as f64 / 6.0)
        };
        let cube = corrupt_cube(&cube, sr, tr, case).unwrap();
        let model = UTae::new(ModelConfig { init_seed: case, ..tiny_config(t, c) }).unwrap();
        let input = ModelInput::from_cube(&cube, &NormStats::identity(c)).unwrap();

        let mut tape = Tape::new();
        let p = model.bind(&mut tape, false);
        let f = model.forward(&mut tape, &p, &input).unwrap();
        fallbacks += f.attention_fallbacks;
        let lv = LevelValidity::new(&input.validity, t, h, w, model.config.levels);
        for (l, &a) in f.attention.iter().enumerate() {
            let at = tape.value(a);
            let (heads, _, lh, lw_) = at.dims4();
            let (_, _, ref valid) = lv.levels[l];
            for hd in 0..heads {
                for px in 0..lh * lw_ {
                    let any = (0..t).any(|ti| valid[ti * lh * lw_ + px]);
                    let mut sum = 0.0;
                    for ti in 0..t {
                        let v = at.data()[(hd * t + ti) * lh * lw_ + px];
                        if !any || valid[ti * lh * lw_ + px] {
                            sum += v;
                        } else {
                            att_err = att_err.max(v.abs());
                        }
                    }
                    att_err = att_err.max((sum - 1.0).abs());
                }
            }
        }
        let probs = tape.value(f.probs);
        let (_, k, ph, pw) = probs.dims4();
        for px in 0..ph * pw {
            let s: f64 = (0..k).map(|ci| probs.data()[ci * ph * pw + px]).sum();
            prob_err = prob_err.max((s - 1.0).abs());
        }

        let ck = Checkpoint { model, norm: NormStats::identity(c), state: Default::default() };
        let grid = RasterGrid::local(w + 5, h + 3);
        let big = SitsCube::new(
            Array4::from_shape_fn((t, c, h + 3, w + 5), |_| rng.random::<f64>()),
            (1..=t as u32).collect(),
            Array3::from_elem((t, h + 3, w + 5), true),
        )
        .unwrap();
        let big = corrupt_cube(&big, sr, tr, case + 100).unwrap();
        let plan = tile_plan(&grid, 8, 4).unwrap();
        let (mosaic, _) = map_region(&ck, &big, &grid, &plan).unwrap();
        for r in 0..h + 3 {
            for cc in 0..w + 5 {
                let s: f64 = (0..2).map(|ci| mosaic[[ci, r, cc]]).sum();
                mosaic_err = mosaic_err.max((s - 1.0).abs());
            }
        }
    }
    outcome(
        att_err <= 1e-5 && prob_err <= 1e-6 && mosaic_err <= 1e-6,
        format!(
            "attention {att_err:.1e}, probabilities {prob_err:.1e}, mosaic {mosaic_err:.1e}; {fallbacks} all-invalid fallbacks exercised"
        ),
    )
}

// ---------------------------------------------------------------- shared synthetic experiments

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TILE: usize = 64;
/// Rows above this line train; the strip below is held out.
const SPLIT_ROW: usize = 192;

fn synthetic_model() -> ModelConfig {
    ModelConfig {
        levels: 2,
        widths: vec![8, 16, 32],
        input_channels: 4,
        attention_heads: 4,
        temporal_positions: 12,
        d_model: 32,
        d_k: 4,
        norm_groups: 4,
        ..Default::default()
    }
}

fn schedule(seed: u64, epochs: usize, weights: LossWeights) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        decayed_learning_rate: 1e-4,
        decay_epoch: epochs * 2 / 3,
        seed,
        weights,
        ..Default::default()
    }
}

fn supervised_only() -> LossWeights {
    LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, ..Default::default() }
}

struct Experiment {
    world: SyntheticWorld,
    cube: SitsCube,
    train: Vec<PatchSample>,
    held_out: Vec<PatchSample>,
}

impl Experiment {
    fn new(seed: u64, flip: f64, shift: f64) -> Self {
        let cfg = WorldConfig {
            seed,
            phase_shift_months: shift,
            errors: ErrorRates { field_flip: flip, boundary_px: 1, salt: 0.005 },
            ..Default::default()
        };
        let (world, cube) = generate_world(&cfg).unwrap();
        let (mask, labels) = rate_quality(&world.product_stack().unwrap()).unwrap();
        let plan = tile_plan(&world.grid, TILE, TILE).unwrap();
        let patches = build_patches(&cube, &mask, &labels, &plan).unwrap();
        let (train, held_out) = patches.into_iter().partition(|p| p.tile.row0 < SPLIT_ROW);
        Self { world, cube, train, held_out }
    }

    fn validation(&self, norm: &NormStats) -> Vec<ValidationSample> {
        self.held_out
            .iter()
            .map(|p| {
                let t = p.tile;
                ValidationSample {
                    input: ModelInput::from_cube(&p.cube, norm).unwrap(),
                    reference: self.world.truth.slice(s![t.row0..t.row0 + t.rows, t.col0..t.col0 + t.cols]).to_owned(),
                }
            })
            .collect()
    }

    fn truth_strip(&self) -> Array2<u8> {
        self.world.truth.slice(s![SPLIT_ROW.., ..]).to_owned()
    }

    /// Macro F1 of each pseudo-product on the held-out strip.
    fn product_f1(&self) -> Vec<f64> {
        let truth = self.truth_strip();
        let valid = truth.mapv(|_| true);
        self.world
            .products
            .iter()
            .map(|p| metrics(&confusion(&p.slice(s![SPLIT_ROW.., ..]).to_owned(), &truth, &valid).unwrap()).unwrap().avg_f1)
            .collect()
    }

    fn model_f1(&self, ck: &Checkpoint) -> f64 {
        validate(&ck.model, &self.validation(&ck.norm)).unwrap().0
    }
}

type RunKey = (u64, u32, bool);

/// Trained checkpoints shared between criteria: (seed, flip percent, full loss).
fn trained(seed: u64, flip: f64, full: bool) -> Arc<Checkpoint> {
    static CACHE: OnceLock<Mutex<BTreeMap<RunKey, Arc<Checkpoint>>>> = OnceLock::new();
    let key = (seed, (flip * 100.0).round() as u32, full);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(ck) = cache.lock().unwrap().get(&key) {
        return ck.clone();
    }
    let exp = Experiment::new(seed, flip, 0.0);
    let weights = if full { LossWeights::default() } else { supervised_only() };
    let out = train(&exp.train, synthetic_model(), None, &schedule(seed, 30, weights), None).unwrap();
    let ck = Arc::new(out.checkpoint);
    cache.lock().unwrap().insert(key, ck.clone());
    ck
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------- 6

fn c06_end_to_end() -> Outcome {
    let (mut wins, mut model_f1, mut best_product) = (0, Vec::new(), Vec::new());
    for seed in SEEDS {
        let exp = Experiment::new(seed, 0.1, 0.0);
        let best = exp.product_f1().into_iter().fold(f64::MIN, f64::max);
        let f1 = exp.model_f1(&trained(seed, 0.1, true));
        wins += usize::from(f1 > best);
        model_f1.push(f1);
        best_product.push(best);
    }
    outcome(
        wins >= 4,
        format!("model wins {wins}/5; model F1 {} vs best product {}", fmt_list(&model_f1), fmt_list(&best_product)),
    )
}

// ---------------------------------------------------------------- 7

fn c07_ablation() -> Outcome {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut detail = Vec::new();
    let mut results = BTreeMap::new();
    for flip in [0.1, 0.2] {
        let (mut full, mut sup) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let exp = Experiment::new(seed, flip, 0.0);
            full.push(exp.model_f1(&trained(seed, flip, true)));
            sup.push(exp.model_f1(&trained(seed, flip, false)));
        }
        detail.push(format!("{:.0}% noise: full {} vs supervised-only {}", flip * 100.0, fmt_list(&full), fmt_list(&sup)));
        results.insert((flip * 100.0) as u32, (full, sup));
    }
    let (full10, sup10) = &results[&10];
    let no_worse = mean(full10) >= mean(sup10) - 0.5;
    let (full20, sup20) = &results[&20];
    let wins = full20.iter().zip(sup20).filter(|(f, s)| f > s).count();
    detail.push(format!("10% mean {:.2} vs {:.2}; 20% wins {wins}/5", mean(full10), mean(sup10)));
    outcome(no_worse && wins >= 3, detail.join("; "))
}

// ---------------------------------------------------------------- 8

fn c08_robustness_grid() -> Outcome {
    let exp = Experiment::new(SEEDS[0], 0.1, 0.0);
    let ck = trained(SEEDS[0], 0.1, true);
    let rows = exp.world.config.size - SPLIT_ROW;
    let cube = exp.cube.window(SPLIT_ROW, 0, rows, exp.world.config.size);
    let grid = exp.world.grid.window(SPLIT_ROW, 0, rows, exp.world.config.size);
    let plan = tile_plan(&grid, TILE, TILE / 2).unwrap();
    let reference = exp.truth_strip();
    let cfg = CorruptionConfig { seed: 8, ..Default::default() };
    let g = robustness_grid(ck.as_ref(), &cube, &reference, &grid, &plan, &cfg).unwrap();

    let (_, clean) = map_region(ck.as_ref(), &cube, &grid, &plan).unwrap();
    let baseline = metrics(&confusion(&clean, &reference, &reference.mapv(|_| true)).unwrap()).unwrap();
    let shape_ok = g.cells.len() == 55 && g.spatial_rates.len() == 5 && g.temporal_rates.len() == 11;
    let origin_ok = g.cell(0, 0).report == baseline;
    let frames = exp.world.config.frames;
    let mut drop_ok = true;
    let mut worst_spatial = 0.0f64;
    for c in &g.cells {
        drop_ok &= c.dropped_frames == (c.temporal_rate * frames as f64).round() as usize;
        drop_ok &= c.spatial_fractions.len() == frames - c.dropped_frames;
        for f in &c.spatial_fractions {
            worst_spatial = worst_spatial.max((f - c.spatial_rate).abs());
        }
    }
    let spatial_ok = worst_spatial <= 0.005;
    let col_mean = |j: usize| (0..5).map(|i| g.cell(i, j).report.avg_f1).sum::<f64>() / 5.0;
    outcome(
        shape_ok && origin_ok && drop_ok && spatial_ok,
        format!(
            "{} cells, origin equals clean run: {origin_ok}, frame drops exact: {drop_ok}, worst spatial deviation {:.4}; mean F1 {:.2} at 0% vs {:.2} at 83.33% frame loss",
            g.cells.len(),
            worst_spatial,
            col_mean(0),
            col_mean(10)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c09_continue_training() -> Outcome {
    let (mut wins, mut gains) = (0, Vec::new());
    for seed in SEEDS {
        let ck = trained(seed, 0.1, true);
        let shifted = Experiment::new(seed, 0.1, 2.0);
        let direct = shifted.model_f1(&ck);
        let ct = continue_train(&ck, &shifted.train, &schedule(seed, 10, LossWeights::default()), None).unwrap();
        let continued = shifted.model_f1(&ct.checkpoint);
        gains.push(continued - direct);
        wins += usize::from(continued - direct > 1.0);
    }
    outcome(wins >= 4, format!("CT gain over DT {} points; {wins}/5 above 1 point", fmt_list(&gains)))
}

// ---------------------------------------------------------------- 10

/// Output depends on both the absolute position (read from the cube) and
/// the window offset, so overlapping windows disagree.
struct PositionStub;

impl TilePredictor for PositionStub {
    fn predict_tile(&self, cube: &SitsCube) -> Result<Array3<f64>> {
        let (_, _, h, w) = cube.dims();
        let origin = cube.frames[[0, 0, 0, 0]];
        Ok(Array3::from_shape_fn((2, h, w), |(k, r, c)| {
            let abs = cube.frames[[0, 0, r, c]];
            let raw = [1.0 + (abs * 0.37 + origin * 0.11).sin(), 0.5 + (abs * 0.05).cos().abs() + r as f64 / h as f64];
            raw[k] / (raw[0] + raw[1])
        }))
    }
}

fn c10_mosaic_oracle() -> Outcome {
    let mut mismatched = 0usize;
    let mut cases = 0;
    for (h, w, tile, stride) in [(100, 130, 32, 16), (64, 64, 64, 32), (50, 77, 24, 24), (90, 45, 40, 13)] {
        let frames = Array4::from_shape_fn((1, 1, h, w), |(_, _, r, c)| (r * w + c) as f64);
        let cube = SitsCube::new(frames, vec![1], Array3::from_elem((1, h, w), true)).unwrap();
        let grid = RasterGrid::local(w, h);
        let plan: Vec<TileIndex> = tile_plan(&grid, tile, stride).unwrap();
        let (probs, binary) = map_region(&PositionStub, &cube, &grid, &plan).unwrap();
        let mut sums = Array3::<f64>::zeros((2, h, w));
        let mut counts = Array2::<f64>::zeros((h, w));
        for t in &plan {
            let p = PositionStub.predict_tile(&cube.window(t.row0, t.col0, t.rows, t.cols)).unwrap();
            for r in 0..t.rows {
                for c in 0..t.cols {
                    for k in 0..2 {
                        sums[[k, t.row0 + r, t.col0 + c]] += p[[k, r, c]];
                    }
                    counts[[t.row0 + r, t.col0 + c]] += 1.0;
                }
            }
        }
        for r in 0..h {
            for c in 0..w {
                let mean: Vec<f64> = (0..2).map(|k| sums[[k, r, c]] / counts[[r, c]]).collect();
                let same = (0..2).all(|k| mean[k].to_bits() == probs[[k, r, c]].to_bits());
                let label = u8::from(mean[1] > mean[0]);
                if !same || binary[[r, c]] != label {
                    mismatched += 1;
                }
            }
        }
        mismatched += usize::from(binary != argmax_binary(&probs));
        cases += 1;
    }
    outcome(mismatched == 0, format!("{mismatched} pixels differ across {cases} grids"))
}
