//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sasp::decode::{decode_backward, decode_with};
use sasp::dtoc::dtoc_backward;
use sasp::fixtures::{self, grid_with_scores};
use sasp::metrics::grid_search_threshold;
use sasp::select::select_indices;
use sasp::{
    aggregate, dtoc_convergence, dtoc_forward, iou_pair, loss_mask, restore_coordinates, select_points, similarity,
    thresholds, train_toy, BinaryMask, DtocOptions, DtocResult, Exec, InterpGrid, LossWeights, MockDecoder,
    PatchGeometry, PixelScores, PointLabel, PointSet, SegEmbedding, SelectionConfig, SimilarityMap,
};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_scores(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

/// Uniform random continuous points inside the pixel grid, labels mixed.
fn random_points(r: &mut ChaCha8Rng, n: usize, geometry: &PatchGeometry) -> PointSet {
    let (w, h) = (geometry.img_w as f64, geometry.img_h as f64);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut token_index = Vec::with_capacity(n);
    for _ in 0..n {
        let p = [r.gen_range(0.0..=w - 1.0), r.gen_range(0.0..=h - 1.0)];
        token_index.push(geometry.token_at(p[0], p[1]));
        points.push(p);
        labels.push(if r.gen_bool(0.5) { PointLabel::Positive } else { PointLabel::Negative });
    }
    PointSet {
        points,
        labels,
        token_index,
        thresholds: sasp::select::Thresholds { pos: 0.5, neg: 0.5 },
    }
}

/// Relative error with the denominator floored at 1e-6: central differences
/// at h = 1e-5 carry roughly 1e-11 of rounding noise on pixel-sized
/// coordinates, so entries below the floor are held to an absolute 1e-10.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn forward(pts: &PointSet, scores: &[f64], grid: &InterpGrid, opts: &DtocOptions) -> DtocResult {
    let map = SimilarityMap::from_scores(scores.to_vec()).unwrap();
    dtoc_forward(pts, &map, grid, opts).unwrap()
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    match (out, limit) {
        (Ok(msg), Some(l)) if elapsed >= l => Err(format!("{msg}; took {elapsed:.2?}, limit {l:?}")),
        (Ok(msg), Some(_)) => Ok(format!("{msg}; {elapsed:.2?}")),
        (other, _) => other,
    }
}

fn dtoc_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let mut r = rng(1000 + case);
        let side = r.gen_range(1..=4usize);
        let (w, h) = (r.gen_range(2..=8usize), r.gen_range(2..=8usize));
        let geometry = PatchGeometry::new(side, w, h).unwrap();
        let scores = random_scores(&mut r, side * side, 2.0);
        let n_pts = r.gen_range(1..=4);
        let pts = random_points(&mut r, n_pts, &geometry);
        let grid = InterpGrid::new(w, h, 1.0).unwrap();
        let opts = DtocOptions {
            tau: r.gen_range(0.5..3.0),
            ..DtocOptions::default()
        };
        let base = forward(&pts, &scores, &grid, &opts);
        for j in 0..pts.len() {
            for c in 0..2 {
                let mut upstream = vec![[0.0; 2]; pts.len()];
                upstream[j][c] = 1.0;
                let analytic = dtoc_backward(&base, &upstream).unwrap();
                for t in 0..scores.len() {
                    let mut plus = scores.clone();
                    let mut minus = scores.clone();
                    plus[t] += H;
                    minus[t] -= H;
                    let fp = forward(&pts, &plus, &grid, &opts).points[j][c];
                    let fm = forward(&pts, &minus, &grid, &opts).points[j][c];
                    let numeric = (fp - fm) / (2.0 * H);
                    let e = rel_err(analytic[t], numeric);
                    if !(e < 1e-4) {
                        return Err(format!(
                            "case {case}: point {j} coord {c} token {t}: analytic {} vs numeric {numeric} (rel {e:e})",
                            analytic[t]
                        ));
                    }
                    worst = worst.max(e);
                }
            }
        }
    }
    Ok(format!("200 instances, max rel err {worst:.2e}"))
}

struct E2e {
    pts: PointSet,
    grid: InterpGrid,
    opts: DtocOptions,
    dec: MockDecoder,
    seg: SegEmbedding,
    gt: BinaryMask,
    weights: LossWeights,
}

impl E2e {
    fn loss(&self, scores: &[f64]) -> f64 {
        let res = forward(&self.pts, scores, &self.grid, &self.opts);
        let mask = decode_with(&self.dec, &res, &self.seg, 8, 8, Exec::Sequential).unwrap();
        loss_mask(&mask, &self.gt, &self.weights).unwrap().total
    }

    fn grad(&self, scores: &[f64]) -> Vec<f64> {
        let res = forward(&self.pts, scores, &self.grid, &self.opts);
        let mask = decode_with(&self.dec, &res, &self.seg, 8, 8, Exec::Sequential).unwrap();
        let loss = loss_mask(&mask, &self.gt, &self.weights).unwrap();
        let dp = decode_backward(&self.dec, &res, &self.seg, &mask, &loss.grad, Exec::Sequential).unwrap();
        dtoc_backward(&res, &dp).unwrap()
    }
}

fn end_to_end_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let mut worst = 0.0f64;
    let mut case = 0u64;
    let mut done = 0;
    while done < 50 {
        case += 1;
        let mut r = rng(2000 + case);
        let side = r.gen_range(1..=3usize);
        let geometry = PatchGeometry::new(side, 8, 8).unwrap();
        let scores = random_scores(&mut r, side * side, 1.5);
        let n_pts = r.gen_range(1..=3);
        let pts = random_points(&mut r, n_pts, &geometry);
        let seg = SegEmbedding::unprojected(vec![1.0, 0.0]).unwrap();
        let gate = vec![r.gen_range(0.5..1.5), r.gen_range(-1.0..1.0)];
        let dec = MockDecoder::new(r.gen_range(1.0..3.0), r.gen_range(1.0..4.0), r.gen_range(-2.0..1.0), gate).unwrap();
        let gt = BinaryMask::new(8, 8, (0..64).map(|_| r.gen_bool(0.4)).collect()).unwrap();
        let setup = E2e {
            pts,
            grid: InterpGrid::new(8, 8, 1.0).unwrap(),
            opts: DtocOptions {
                tau: r.gen_range(0.5..3.0),
                ..DtocOptions::default()
            },
            dec,
            seg,
            gt,
            weights: LossWeights::default(),
        };
        let analytic = setup.grad(&scores);
        for t in 0..scores.len() {
            let mut plus = scores.clone();
            let mut minus = scores.clone();
            plus[t] += H;
            minus[t] -= H;
            let numeric = (setup.loss(&plus) - setup.loss(&minus)) / (2.0 * H);
            let e = rel_err(analytic[t], numeric);
            if !(e < 1e-3) {
                return Err(format!(
                    "case {case}: token {t}: analytic {} vs numeric {numeric} (rel {e:e})",
                    analytic[t]
                ));
            }
            worst = worst.max(e);
        }
        done += 1;
    }
    Ok(format!("50 instances, max rel err {worst:.2e}"))
}

fn convexity() -> Outcome {
    let mut violations = 0usize;
    let mut checked = 0usize;
    for case in 0..1000u64 {
        let mut r = rng(3000 + case);
        let side = r.gen_range(1..=6usize);
        let (w, h) = (r.gen_range(1..=24usize), r.gen_range(1..=24usize));
        let geometry = PatchGeometry::new(side, w, h).unwrap();
        let scores = random_scores(&mut r, side * side, 20.0);
        let n_pts = r.gen_range(1..=6);
        let pts = random_points(&mut r, n_pts, &geometry);
        let grid = InterpGrid::new(w, h, r.gen_range(1.0..5.0)).unwrap();
        let opts = DtocOptions {
            tau: r.gen_range(0.05..10.0),
            ..DtocOptions::default()
        };
        let res = forward(&pts, &scores, &grid, &opts);
        let tape = res.tape().unwrap();
        for (j, p) in res.points.iter().enumerate() {
            checked += 1;
            let sum: f64 = tape.weights(j).iter().sum();
            if !(1.0 - 1e-9..=1.0 + 1e-9).contains(&sum) {
                violations += 1;
            }
            if !(p[0] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] >= 0.0 && p[1] <= (h - 1) as f64) {
                violations += 1;
            }
        }
    }
    if violations == 0 {
        Ok(format!("1000 calls, {checked} points, 0 violations"))
    } else {
        Err(format!("{violations} violations over {checked} points"))
    }
}

fn smooth_scores(seed: u64, side: usize) -> Vec<f64> {
    use std::f64::consts::TAU;
    let mut r = rng(seed);
    let (fx, fy) = (r.gen_range(0.5..2.0), r.gen_range(0.5..2.0));
    let ph = r.gen_range(0.0..TAU);
    let (bx, by) = (r.gen_range(0.2..0.8), r.gen_range(0.2..0.8));
    let amp = 2.0;
    (0..side * side)
        .map(|j| {
            let u = (j % side) as f64 / side as f64;
            let v = (j / side) as f64 / side as f64;
            let wave = (fx * u * TAU + ph).sin() * (fy * v * TAU).cos() * 0.5;
            let bump = (-((u - bx).powi(2) + (v - by).powi(2)) / 0.05).exp();
            amp * (wave + bump)
        })
        .collect()
}

fn continuum_limit() -> Outcome {
    let mut worst_s2 = 0.0f64;
    for seed in 0..20u64 {
        let scores = smooth_scores(seed, 8);
        let (grid, seg) = grid_with_scores(&scores, 4, 64, 64, seed).unwrap();
        let map = similarity(&grid, &seg).unwrap();
        let pts = select_points(&map, &grid, &SelectionConfig::default()).unwrap();
        if pts.is_empty() {
            return Err(format!("fixture {seed} selects no points"));
        }
        let entries = dtoc_convergence(&pts, &map, 64, 64, &[8.0, 4.0, 2.0, 1.0], &DtocOptions::default()).unwrap();
        let reference = &entries.last().unwrap().points;
        let errs: Vec<f64> = entries
            .iter()
            .map(|e| {
                e.points
                    .iter()
                    .zip(reference)
                    .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .fold(0.0, f64::max)
            })
            .collect();
        if errs.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("fixture {seed}: errors {errs:?} increase"));
        }
        if !(errs[2] < 0.5) {
            return Err(format!("fixture {seed}: stride-2 error {} px", errs[2]));
        }
        worst_s2 = worst_s2.max(errs[2]);
    }
    Ok(format!("20 fixtures monotone, max stride-2 error {worst_s2:.3} px"))
}

fn exhaustive_best_ciou(scores: &PixelScores, gt: &BinaryMask) -> f64 {
    let mut breakpoints: Vec<f64> = scores.values().to_vec();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    let mut masks: Vec<Vec<bool>> = breakpoints
        .iter()
        .map(|&b| scores.values().iter().map(|&v| v >= b).collect())
        .collect();
    if *breakpoints.last().unwrap() < 1.0 {
        masks.push(vec![false; scores.values().len()]);
    }
    masks
        .iter()
        .map(|m| {
            let inter = m.iter().zip(gt.data()).filter(|(a, b)| **a && **b).count();
            let union = m.iter().zip(gt.data()).filter(|(a, b)| **a || **b).count();
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn grid_search_oracle() -> Outcome {
    for case in 0..100u64 {
        let mut r = rng(5000 + case);
        let values: Vec<f64> = (0..36).map(|_| r.gen_range(0..=100u32) as f64 / 100.0).collect();
        let scores = PixelScores::new(6, 6, values).unwrap();
        let p = r.gen_range(0.1..0.9);
        let gt = BinaryMask::new(6, 6, (0..36).map(|_| r.gen_bool(p)).collect()).unwrap();
        let sweep = grid_search_threshold(&scores, &gt, 0.01).unwrap();
        let oracle = exhaustive_best_ciou(&scores, &gt);
        if sweep.best_ciou != oracle {
            return Err(format!("map {case}: sweep {} vs exhaustive {oracle}", sweep.best_ciou));
        }
    }
    Ok("100 maps, sweep optimum equals exhaustive optimum".into())
}

fn algorithm_fixtures() -> Outcome {
    let cfg = SelectionConfig::default();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let synthetic = SimilarityMap {
        scores: vec![0.0],
        normalized: vec![0.0],
        probs: vec![1.0],
        mean: 0.5,
        std: 0.2,
    };
    let t = thresholds(&synthetic, &cfg);
    check("mu=0.5 sigma=0.2 thresholds", t.pos == 0.6 && t.neg == 0.4);

    let three = SimilarityMap::from_scores(vec![0.0, 0.5, 1.0]).unwrap();
    let t = thresholds(&three, &cfg);
    let sigma = (1.0f64 / 6.0).sqrt();
    check("[0,0.5,1] thresholds", t.pos == 0.5 + 0.5 * sigma && t.neg == 0.5 - 0.5 * sigma);
    check("[0,0.5,1] t_pos ~ 0.7041", (t.pos - 0.7041).abs() < 5e-5);
    let sets = select_indices(&three, &cfg).unwrap();
    check(
        "[0,0.5,1] partition",
        sets.positive == [2] && sets.negative == [0] && sets.neutral == [1],
    );

    let constant = SimilarityMap::from_scores(vec![0.3; 9]).unwrap();
    let t = thresholds(&constant, &cfg);
    let sets = select_indices(&constant, &cfg).unwrap();
    check("constant thresholds", t.pos == 0.5 && t.neg == 0.5);
    check(
        "constant partition",
        sets.positive.is_empty() && sets.negative.is_empty() && sets.neutral.len() == 9,
    );

    let tie = SimilarityMap::from_scores(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let capped = SelectionConfig {
        max_points: Some(1),
        ..cfg
    };
    check("max_points tie-break", select_indices(&tie, &capped).unwrap().positive == [0]);

    let small = |w: usize| grid_with_scores(&[0.0, 0.0, 0.0, 1.0], 2, w, w, 1).unwrap().0;
    let g4 = small(4);
    check("N_t=4 j=0", restore_coordinates(0, &g4).unwrap() == (1.0, 1.0));
    check("N_t=4 j=3", restore_coordinates(3, &g4).unwrap() == (3.0, 3.0));
    check("N_t=4 clamp", restore_coordinates(3, &small(2)).unwrap() == (1.0, 1.0));
    let clip = grid_with_scores(&vec![0.0; 576], 2, 336, 336, 1).unwrap().0;
    check("N_t=576 j=25", restore_coordinates(25, &clip).unwrap() == (21.0, 21.0));
    check("index out of range", restore_coordinates(4, &g4).is_err());

    let (grid, seg) = grid_with_scores(&[0.0, 0.5, 0.5, 1.0], 2, 4, 4, 3).unwrap();
    let map = similarity(&grid, &seg).unwrap();
    let pts = select_points(&map, &grid, &cfg).unwrap();
    check(
        "composed point set",
        pts.points == [[3.0, 3.0], [1.0, 1.0]] && pts.labels == [PointLabel::Positive, PointLabel::Negative],
    );
    let (grid, seg) = fixtures::constant_map();
    let map = similarity(&grid, &seg).unwrap();
    check("constant point set", select_points(&map, &grid, &cfg).unwrap().is_empty());

    if failures.is_empty() {
        Ok("all hand-computed selection examples match".into())
    } else {
        Err(format!("mismatches: {}", failures.join("; ")))
    }
}

fn selection_invariance() -> Outcome {
    let cfg = SelectionConfig::default();
    for case in 0..100u64 {
        let mut r = rng(7000 + case);
        let n = r.gen_range(2..=30usize).pow(2);
        let scores = random_scores(&mut r, n, 5.0);
        let a = r.gen_range(0.01..100.0);
        let b = r.gen_range(-50.0..50.0);
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let before = select_indices(&SimilarityMap::from_scores(scores).unwrap(), &cfg).unwrap();
        let after = select_indices(&SimilarityMap::from_scores(moved).unwrap(), &cfg).unwrap();
        if before != after {
            return Err(format!("map {case}: a={a} b={b} changes the index sets"));
        }
    }
    Ok("100 maps, index sets unchanged".into())
}

fn toy_training() -> Outcome {
    let scene = fixtures::offset_blob(0);
    let trace = train_toy(&scene, &fixtures::offset_blob_config()).map_err(|e| e.to_string())?;
    let (first, last) = (trace.initial(), trace.last());
    let ratio = last.total / first.total;
    let summary = format!(
        "loss {:.4} -> {:.4} (ratio {ratio:.3}), in-mask fraction {:.2} after {} steps",
        first.total,
        last.total,
        last.in_mask_fraction,
        trace.entries.len() - 1
    );
    if ratio < 0.5 && last.in_mask_fraction >= 0.9 && trace.entries.len() - 1 <= 500 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn metrics_fixture() -> Outcome {
    let pairs: Vec<_> = fixtures::metrics_set()
        .iter()
        .map(|(_, p, g)| iou_pair(p, g).unwrap())
        .collect();
    let report = aggregate(&pairs).unwrap();
    if report.giou == 0.75 && report.ciou == 5.0 / 6.0 {
        Ok(format!("giou {} ciou {}", report.giou, report.ciou))
    } else {
        Err(format!("giou {} ciou {}", report.giou, report.ciou))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_sasp");
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = work.path().join("fx");
    let sasp = |args: &[&str], out: &Path| -> Result<(), String> {
        let status = Command::new(bin)
            .args(args)
            .arg("--out-dir")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if status.status.success() {
            Ok(())
        } else {
            Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&status.stderr)))
        }
    };
    sasp(&["fixture"], &fx)?;
    let f = |name: &str| fx.join(name).to_string_lossy().into_owned();
    let blob = f("blob.emb");
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("fixture", vec!["fixture".into()]),
        ("simmap", vec!["simmap".into(), "--emb".into(), f("peak_2x2.emb")]),
        ("points", vec!["points".into(), "--emb".into(), blob.clone()]),
        ("points-dtoc", vec!["points".into(), "--emb".into(), blob.clone(), "--dtoc".into()]),
        ("sweep", vec!["sweep".into(), "--emb".into(), blob.clone(), "--gt".into(), f("blob_gt.pgm")]),
        (
            "eval",
            vec!["eval".into(), "--pred".into(), f("metrics/pred"), "--gt".into(), f("metrics/gt")],
        ),
        ("train", vec!["train".into(), "--seed".into(), "3".into()]),
        ("convergence", vec!["convergence".into(), "--emb".into(), blob.clone()]),
    ];
    for (name, args) in &runs {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (a, b) = (work.path().join(format!("{name}-a")), work.path().join(format!("{name}-b")));
        sasp(&args, &a)?;
        sasp(&args, &b)?;
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        if sa.is_empty() || sa != sb {
            return Err(format!("{name}: artifacts differ between runs"));
        }
    }
    let trace = work.path().join("train-a/trace.json");
    let trace = trace.to_string_lossy();
    let (a, b) = (work.path().join("plot-a"), work.path().join("plot-b"));
    sasp(&["plot", "--trace", &trace], &a)?;
    sasp(&["plot", "--trace", &trace], &b)?;
    if snapshot(&a) != snapshot(&b) {
        return Err("plot: artifacts differ between runs".into());
    }
    Ok(format!("{} commands byte-identical across runs", runs.len() + 1))
}

fn main() {
    type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("DtoC gradient suite", Some(Duration::from_secs(10)), dtoc_gradients),
        ("end-to-end gradient suite", Some(Duration::from_secs(30)), end_to_end_gradients),
        ("convexity and bounds", None, convexity),
        ("continuum limit", None, continuum_limit),
        ("grid-search oracle", None, grid_search_oracle),
        ("selection fixtures", None, algorithm_fixtures),
        ("selection affine invariance", None, selection_invariance),
        ("toy training", Some(Duration::from_secs(60)), toy_training),
        ("metrics fixture", None, metrics_fixture),
        ("CLI determinism", None, cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        match timed(*limit, f) {
            Ok(msg) => println!("criterion {:>2} PASS  {name}: {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
