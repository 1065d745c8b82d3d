//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits non-zero
//! when any criterion fails.
//!
//! Every expected value is computed here by an independent oracle: pixel-by-pixel
//! enumeration, direct summation, or plain interval arithmetic.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcs_core::classifier::{
    BrightBlobClassifier, Classifier, CountingClassifier, Prediction, QuadrantClassifier,
};
use tcs_core::eval::{run_evaluation, EvalConfig, MetricsReport, CSV_HEADER};
use tcs_core::explainer::{
    evaluate_mutants, explain, generate_mutants, rank_pixels, ExplainerConfig, MaskingScheme,
    MutationConfig, RankingVariant,
};
use tcs_core::features::{DetectorConfig, FeatureDetection, MarkerDetector, SpecConfig, SpecRegistry};
use tcs_core::imaging::{BBox, Image, PixelMask};
use tcs_core::synth::{self, SceneConfig};
use tcs_core::tcs::{compute_tcs, overlap_ratio, TcsConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    let data = (0..w * h * 3).map(|_| rng.gen()).collect();
    Image::new("rand", w, h, 3, data).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PixelMask {
    let density: f64 = rng.gen();
    PixelMask::from_fn(w, h, |_, _| rng.gen_bool(density))
}

/// Registry of `weights.len()` marker specs named `f0`, `f1`, …
fn registry(weights: &[f64]) -> SpecRegistry {
    let configs: Vec<SpecConfig> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| SpecConfig {
            id: format!("f{i}"),
            description: String::new(),
            weight: w,
            detector: DetectorConfig::GeometricBuiltin(MarkerDetector::new([i as u8, 0, 0])),
        })
        .collect();
    SpecRegistry::from_configs(&configs).unwrap()
}

/// Feature `i` owns the 10×10 block at column `10 i` of a `10 n`×10 frame, so its
/// region has exactly 100 pixels and coverage `r` means `r` of them are explained.
fn block_detection(n: usize, i: usize) -> FeatureDetection {
    let region = PixelMask::from_fn(10 * n, 10, |x, _| x / 10 == i);
    FeatureDetection::new(format!("f{i}"), region, 1.0).unwrap()
}

fn cover_block(mask: &mut PixelMask, i: usize, r: usize) {
    for k in 0..r {
        mask.set(10 * i + k % 10, k / 10, true);
    }
}

// ---------------------------------------------------------------------------

fn pixel_ranking_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut classified_trials = 0;
    for trial in 0..200 {
        let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let img = random_image(&mut rng, w, h);
        let cfg = MutationConfig {
            num_mutants: rng.gen_range(1..=64),
            scheme: if rng.gen_bool(0.5) { MaskingScheme::RandomPixel } else { MaskingScheme::GridBlock },
            keep_fraction: rng.gen_range(0.1..0.9),
            block_size: rng.gen_range(1..=3),
            seed: rng.gen(),
            fill: 0,
        };
        let mutants = generate_mutants(&img, &cfg).map_err(|e| e.to_string())?;
        // half the trials take outcomes from a real classifier, the rest are arbitrary
        let y = QuadrantClassifier.classify(&img).unwrap().into_iter().next();
        let outcomes = match y {
            Some(y) if trial % 2 == 0 => {
                classified_trials += 1;
                evaluate_mutants(&QuadrantClassifier, &y, &mutants).map_err(|e| e.to_string())?
            }
            _ => (0..mutants.len()).map(|_| rng.gen_bool(0.5)).collect(),
        };
        let masks: Vec<PixelMask> = mutants.into_iter().map(|m| m.mask).collect();
        let got = rank_pixels(&masks, &outcomes, RankingVariant::Text).map_err(|e| e.to_string())?;

        let mut a_t = vec![0u32; w * h];
        let mut a_f = vec![0u32; w * h];
        for (mask, &ok) in masks.iter().zip(&outcomes) {
            for y in 0..h {
                for x in 0..w {
                    if mask.get(x, y) {
                        if ok {
                            a_t[y * w + x] += 1;
                        } else {
                            a_f[y * w + x] += 1;
                        }
                    }
                }
            }
        }
        let rank: Vec<i64> = a_t.iter().zip(&a_f).map(|(&t, &f)| i64::from(t) - i64::from(f)).collect();
        ensure(got.a_t == a_t && got.a_f == a_f && got.rank == rank, || {
            format!("trial {trial}: {w}x{h}, M={} disagrees with enumeration", cfg.num_mutants)
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("200 trials ({classified_trials} classifier-driven) in {elapsed:.2?}"))
}

fn overlap_ratio_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut worst = 0.0f64;
    for trial in 0..500 {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let mut f = random_mask(&mut rng, w, h);
        f.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
        let e = random_mask(&mut rng, w, h);
        let (mut both, mut total) = (0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                if f.get(x, y) {
                    total += 1;
                    both += u64::from(e.get(x, y));
                }
            }
        }
        let expected = (100 * both) as f64 / total as f64;
        let det = FeatureDetection::new("f", f, 1.0).unwrap();
        let got = overlap_ratio(&det, &e).map_err(|e| e.to_string())?;
        let err = (got - expected).abs();
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("trial {trial}: got {got}, expected {both}00/{total}"))?;
    }
    Ok(format!("500 pairs, max error {worst:e}"))
}

fn tcs_brute_force() -> Outcome {
    const LEVELS: [usize; 6] = [0, 25, 49, 50, 51, 100];
    let setups = [
        // β/Σβ are powers of two so direct summation is exact
        (vec![1.0, 1.0, 2.0], true),
        (vec![0.5, 1.5, 2.0], false),
    ];
    let mut cases = 0;
    for (weights, normalize) in &setups {
        let reg = registry(weights);
        let total: f64 = weights.iter().sum();
        for subset in 0u32..8 {
            let members: Vec<usize> = (0..3).filter(|i| subset & (1 << i) != 0).collect();
            for combo in 0..LEVELS.len().pow(members.len() as u32) {
                let rs: Vec<usize> = (0..members.len())
                    .map(|k| LEVELS[combo / LEVELS.len().pow(k as u32) % LEVELS.len()])
                    .collect();
                let mut expl = PixelMask::empty(30, 10);
                let dets: Vec<FeatureDetection> = members
                    .iter()
                    .zip(&rs)
                    .map(|(&i, &r)| {
                        cover_block(&mut expl, i, r);
                        block_detection(3, i)
                    })
                    .collect();
                for r_lim in [0.0, 50.0, 100.0] {
                    let cfg = TcsConfig { r_lim, normalize_weights: *normalize };
                    let got = compute_tcs(&dets, &expl, &reg, &cfg).map_err(|e| e.to_string())?;
                    let mut expected = 0.0;
                    for (&i, &r) in members.iter().zip(&rs) {
                        let beta = if *normalize { weights[i] / total } else { weights[i] };
                        let a = if r as f64 >= r_lim { 1.0 } else { 0.0 };
                        expected += beta * a * r as f64;
                    }
                    let gates_ok = members.iter().zip(&rs).all(|(&i, &r)| {
                        got.per_feature
                            .iter()
                            .find(|s| s.spec_id == format!("f{i}"))
                            .is_some_and(|s| s.a == u8::from(r as f64 >= r_lim) && s.r == r as f64)
                    });
                    ensure(got.tcs == expected && gates_ok && got.z_i == members.len(), || {
                        format!(
                            "features {members:?} at R={rs:?}, R_lim={r_lim}, normalized={normalize}: \
                             got {}, expected {expected}",
                            got.tcs
                        )
                    })?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} exhaustive cases match"))
}

fn gating_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    for trial in 0..1000 {
        let n = rng.gen_range(2..=5);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..5.0)).collect();
        let reg = registry(&weights);
        let normalize = rng.gen_bool(0.5);
        // the last spec is held back so it can be appended afterwards
        let present = rng.gen_range(0..n);
        let mut expl = PixelMask::empty(10 * n, 10);
        let mut dets = Vec::new();
        for i in 0..present {
            cover_block(&mut expl, i, rng.gen_range(0..=100));
            dets.push(block_detection(n, i));
        }
        let lo = rng.gen_range(0.0..=100.0f64).floor();
        let hi = rng.gen_range(lo..=100.0).floor();
        let score = |dets: &[FeatureDetection], expl: &PixelMask, r_lim: f64| {
            compute_tcs(dets, expl, &reg, &TcsConfig { r_lim, normalize_weights: normalize })
                .map(|b| b.tcs)
                .map_err(|e| e.to_string())
        };
        let (t_lo, t_hi) = (score(&dets, &expl, lo)?, score(&dets, &expl, hi)?);
        ensure(t_hi <= t_lo, || format!("trial {trial}: R_lim {lo}->{hi} raised tcs {t_lo}->{t_hi}"))?;

        let r_new = rng.gen_range(hi as usize..=100);
        cover_block(&mut expl, n - 1, r_new);
        dets.push(block_detection(n, n - 1));
        let t_more = score(&dets, &expl, hi)?;
        ensure(t_more >= t_hi, || format!("trial {trial}: appending a gated-in feature lowered tcs {t_hi}->{t_more}"))?;
    }
    Ok("1000 randomized breakdowns".into())
}

fn bypass_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let counting = CountingClassifier::new(BrightBlobClassifier::default());
    let cfg = ExplainerConfig::default();
    for trial in 0..100 {
        let (w, h) = (rng.gen_range(4..=40usize), rng.gen_range(4..=40usize));
        let img = random_image(&mut rng, w, h);
        // boxes may hang over any edge but always touch the frame
        let bw = rng.gen_range(1..=w as i64 + 10);
        let bh = rng.gen_range(1..=h as i64 + 10);
        let x = rng.gen_range(1 - bw..w as i64);
        let y = rng.gen_range(1 - bh..h as i64);
        let bbox = BBox::new(x, y, bw, bh).unwrap();
        let pred = Prediction::new("person", rng.gen()).unwrap().with_bbox(bbox);
        let e = explain(&counting, &img, &pred, &cfg).map_err(|e| e.to_string())?;
        let cw = (x + bw).min(w as i64) - x.max(0);
        let ch = (y + bh).min(h as i64) - y.max(0);
        ensure(e.mask.count() as i64 == cw * ch && e.mutant_evaluations == 0, || {
            format!("trial {trial}: box {bbox:?} in {w}x{h} gave {} pixels, expected {}", e.mask.count(), cw * ch)
        })?;
    }
    ensure(counting.calls() == 0, || format!("{} classifier calls", counting.calls()))?;
    Ok("100 boxes, 0 classifier calls".into())
}

fn evaluate_corpus(scene: &SceneConfig, cfg: &EvalConfig, seed: u64) -> Result<MetricsReport, String> {
    let corpus = synth::generate(scene).map_err(|e| e.to_string())?;
    run_evaluation(
        &corpus.dataset,
        corpus.loader(),
        &BrightBlobClassifier::default(),
        &synth::marker_registry(),
        cfg,
        seed,
    )
    .map_err(|e| e.to_string())
}

fn perfect_monitor() -> Outcome {
    let mut cfg = EvalConfig::default();
    cfg.eval.tau_grid = vec![0.0];
    cfg.eval.jobs = Some(1);
    let start = Instant::now();
    let report = evaluate_corpus(&SceneConfig::perfect_monitor(200, 11), &cfg, 11)?;
    let elapsed = start.elapsed();
    let row = &report.full().rows[0];
    ensure(report.images_evaluated == 200, || format!("{} images evaluated", report.images_evaluated))?;
    ensure(row.f1_tcs == row.f1_gt, || format!("f1_tcs {} != f1_gt {}", row.f1_tcs, row.f1_gt))?;
    ensure(row.frac_tp == Some(1.0), || format!("frac_tp {:?}", row.frac_tp))?;
    // a fraction with no ground-truth cases is undefined and reported as null
    let fp_ok = row.frac_fp == Some(1.0) || (row.frac_fp.is_none() && row.counts_gt.fp == 0);
    ensure(fp_ok, || format!("frac_fp {:?} with FP_gt = {}", row.frac_fp, row.counts_gt.fp))?;
    let fn_ok = row.frac_fn == Some(1.0) || (row.frac_fn.is_none() && row.counts_gt.fn_ == 0);
    ensure(fn_ok, || format!("frac_fn {:?} with FN_gt = {}", row.frac_fn, row.counts_gt.fn_))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    let show = |v: Option<f64>| v.map_or("null".to_owned(), |v| format!("{v}"));
    Ok(format!(
        "f1 {:.4}, frac_tp {}, frac_fp {} (FP_gt {}), frac_fn {} (FN_gt {}), {elapsed:.2?}",
        row.f1_gt,
        show(row.frac_tp),
        show(row.frac_fp),
        row.counts_gt.fp,
        show(row.frac_fn),
        row.counts_gt.fn_
    ))
}

fn under_representation() -> Outcome {
    let mut cfg = EvalConfig::default();
    cfg.eval.tau_grid = vec![20.0];
    cfg.eval.incremental_features = true;
    let report = evaluate_corpus(&SceneConfig::under_represented(200, 5), &cfg, 5)?;
    let f1: Vec<f64> = report.sections.iter().map(|s| s.rows[0].f1_tcs).collect();
    ensure(f1.len() == 3, || format!("{} sections", f1.len()))?;
    ensure(f1[0] < f1[1] && f1[1] < f1[2], || format!("f1_tcs by spec prefix {f1:?}"))?;
    Ok(format!("tau 20: face {:.4} < face+hand {:.4} < all {:.4}", f1[0], f1[1], f1[2]))
}

fn threshold_sweep() -> Outcome {
    let cfg = EvalConfig::default();
    let grid = cfg.eval.tau_grid.clone();
    let report = evaluate_corpus(&SceneConfig::under_represented(100, 8), &cfg, 8)?;
    let section = report.full();
    let tps: Vec<usize> = section.rows.iter().map(|r| r.counts_tcs.tp).collect();
    ensure(tps.windows(2).all(|w| w[1] <= w[0]), || format!("TCS-TP counts {tps:?}"))?;

    let csv = section.to_csv(&["seed: 8".into()]);
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    ensure(lines.first() == Some(&CSV_HEADER), || "header mismatch".into())?;
    ensure(lines.len() == grid.len() + 1, || format!("{} data rows", lines.len() - 1))?;
    for (line, tau) in lines[1..].iter().zip(&grid) {
        let fields: Vec<&str> = line.split(',').collect();
        ensure(fields.len() == 10, || format!("row `{line}`"))?;
        ensure(fields[0].parse::<f64>().ok() == Some(*tau), || format!("row `{line}` for tau {tau}"))?;
        for (k, f) in fields.iter().enumerate().skip(1) {
            let numeric = f.parse::<f64>().is_ok_and(f64::is_finite);
            ensure(numeric || (k >= 7 && *f == "null"), || format!("field {k} of `{line}`"))?;
        }
    }
    Ok(format!("TCS-TP {tps:?}, {} rows", lines.len() - 1))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tcs"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`tcs {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    run_cli(&["synth", "--out", &p("data"), "--count", "40", "--seed", "3", "--preset", "under-represented"])?;
    let dataset = p("data/dataset.json");
    let registry = p("data/specs.json");
    for out in ["a", "b"] {
        let out = p(out);
        let args = [
            "evaluate", &dataset, "--registry", &registry, "--seed", "3", "--incremental-features", "--out", &out,
        ];
        run_cli(&args)?;
    }
    let mut compared = 0;
    for name in ["report.csv", "report.specs-1.csv", "report.specs-2.csv", "report.json"] {
        let read = |d: &str| std::fs::read(Path::new(&p(d)).join(name)).map_err(|e| format!("{name}: {e}"));
        ensure(read("a")? == read("b")?, || format!("{name} differs between runs"))?;
        compared += 1;
    }
    Ok(format!("{compared} artifacts byte-identical"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("pixel ranking equals brute-force enumeration", pixel_ranking_oracle),
        ("overlap ratio equals pixel enumeration", overlap_ratio_exactness),
        ("tcs equals direct gated weighted sum", tcs_brute_force),
        ("gating monotonicity", gating_monotonicity),
        ("bounding-box bypass issues no classifications", bypass_path),
        ("perfect monitor agrees with ground truth", perfect_monitor),
        ("under-represented face lowers f1", under_representation),
        ("threshold sweep sanity and csv layout", threshold_sweep),
        ("evaluate is byte-for-byte deterministic", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
