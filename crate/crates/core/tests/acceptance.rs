//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the
//! lines are printed on every run; exits non-zero if any criterion fails.
//!
//! Set SEGCURATE_CORPUS to a release JSONL file to check the corpus counts;
//! otherwise the synthetic fixture path is checked.

use std::collections::HashMap;
use std::sync::{Arc, Barrier};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use segcurate_core::curation::{
    derive_reference_stats, local_grid, run_stage2, DropReason, FilterConfig, GridSpec, Stage2Item,
    DEFAULT_K_SIGMA,
};
use segcurate_core::dataset::{stats, validate, DEFAULT_LINGUISTIC_THRESHOLD};
use segcurate_core::geometry::describe;
use segcurate_core::losses::{
    bce_grad, bce_loss, dice_grad, dice_loss, spatial_attention_loss, AttentionStack,
    GroundTruthGrid, DEFAULT_DICE_SMOOTH, DEFAULT_EPSILON_LOG,
};
use segcurate_core::mask::{connected_components, rle_decode, rle_encode, BinaryMask, Connectivity};
use segcurate_core::matching::{
    hungarian, sweep_queries, CandidateSet, CostMatrix, CostWeights, TargetSet, DEFAULT_SWEEP_KS,
};
use segcurate_core::metrics::{MetricsAccumulator, SampleScore};
use segcurate_core::review::{
    read_log, Event, ItemStatus, ManualClock, NewItem, ReviewDecision, ReviewStore, Rubric, Stage,
    Verdict, DEFAULT_LEASE_TTL_MS,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- losses

/// Spatial loss computed straight from the definition, independent of the
/// library: aggregate by mean over maps, background mean, mean squared
/// foreground deviation, negative log with the eps floor.
fn oracle_spatial(data: &[f64], maps: usize, gt: &[u8], eps: f64) -> f64 {
    let cells = gt.len();
    let mut agg = vec![0.0; cells];
    for k in 0..maps {
        for i in 0..cells {
            agg[i] += data[k * cells + i];
        }
    }
    for v in &mut agg {
        *v /= maps as f64;
    }
    let (mut bg_sum, mut bg_n) = (0.0, 0usize);
    for i in 0..cells {
        if gt[i] == 0 {
            bg_sum += agg[i];
            bg_n += 1;
        }
    }
    let a = bg_sum / bg_n as f64;
    let (mut f, mut fg_n) = (0.0, 0usize);
    for i in 0..cells {
        if gt[i] == 1 {
            f += (agg[i] - a) * (agg[i] - a);
            fg_n += 1;
        }
    }
    -(f / fg_n as f64).max(eps).ln()
}

fn ls_hand_example() -> Outcome {
    let stack = AttentionStack::new(1, 1, 2, vec![0.7, 0.1, 0.1, 0.1]).map_err(|e| e.to_string())?;
    let gt = GroundTruthGrid::new(2, vec![1, 0, 0, 0]).map_err(|e| e.to_string())?;
    let r = spatial_attention_loss(&stack, &gt, DEFAULT_EPSILON_LOG).map_err(|e| e.to_string())?;
    let expected = -(0.36f64).ln();
    ensure((r.background_mean - 0.1).abs() < 1e-12, || format!("a = {}", r.background_mean))?;
    ensure((r.value - expected).abs() < 1e-6, || format!("L_S = {}", r.value))?;
    ensure((r.value - 1.0217).abs() < 1e-4, || format!("L_S = {}", r.value))?;
    Ok(format!("a = {:.6}, L_S = {:.6}", r.background_mean, r.value))
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
/// Relative error is |analytic − fd| / max(|analytic|, |fd|, FD_FLOOR).
const FD_FLOOR: f64 = 1e-8;

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(FD_FLOOR)
}

/// Random d×d grid with a rectangular foreground that leaves background.
fn random_gt(rng: &mut ChaCha8Rng, d: usize) -> Vec<u8> {
    loop {
        let (r0, c0) = (rng.gen_range(0..d), rng.gen_range(0..d));
        let (r1, c1) = (rng.gen_range(r0..d), rng.gen_range(c0..d));
        let gt: Vec<u8> = (0..d * d)
            .map(|i| ((r0..=r1).contains(&(i / d)) && (c0..=c1).contains(&(i % d))) as u8)
            .collect();
        if gt.iter().any(|&g| g == 0) {
            return gt;
        }
    }
}

fn gradient_check() -> Outcome {
    let (d, blocks, heads) = (24usize, 2usize, 4usize);
    let cells = d * d;
    let maps = blocks * heads;
    let start = Instant::now();
    let worst = (0..100u64)
        .into_par_iter()
        .map(|seed| -> Result<(f64, f64, f64), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_gt(&mut rng, d);
            // foreground cells attend more strongly, as after training
            let data: Vec<f64> = (0..maps * cells)
                .map(|i| rng.gen::<f64>() + 0.5 * gt[i % cells] as f64)
                .collect();
            let stack = AttentionStack::new(blocks, heads, d, data.clone()).map_err(|e| e.to_string())?;
            let grid = GroundTruthGrid::new(d, gt.clone()).map_err(|e| e.to_string())?;
            let r = spatial_attention_loss(&stack, &grid, DEFAULT_EPSILON_LOG).map_err(|e| e.to_string())?;
            let direct = oracle_spatial(&data, maps, &gt, DEFAULT_EPSILON_LOG);
            if (direct - r.value).abs() > 1e-9 {
                return Err(format!("seed {seed}: value {} vs oracle {direct}", r.value));
            }
            let mut ls_worst = 0.0f64;
            let mut x = data;
            for j in 0..x.len() {
                let orig = x[j];
                x[j] = orig + FD_STEP;
                let up = oracle_spatial(&x, maps, &gt, DEFAULT_EPSILON_LOG);
                x[j] = orig - FD_STEP;
                let down = oracle_spatial(&x, maps, &gt, DEFAULT_EPSILON_LOG);
                x[j] = orig;
                ls_worst = ls_worst.max(rel_err(r.gradient[j], (up - down) / (2.0 * FD_STEP)));
            }

            let targets: Vec<f64> = gt.iter().map(|&g| g as f64).collect();
            let mut logits: Vec<f64> = (0..cells).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let g = bce_grad(&logits, &targets).map_err(|e| e.to_string())?;
            let mut bce_worst = 0.0f64;
            for j in 0..cells {
                let orig = logits[j];
                logits[j] = orig + FD_STEP;
                let up = bce_loss(&logits, &targets).unwrap();
                logits[j] = orig - FD_STEP;
                let down = bce_loss(&logits, &targets).unwrap();
                logits[j] = orig;
                bce_worst = bce_worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
            }

            let mut probs: Vec<f64> = (0..cells).map(|_| rng.gen_range(0.01..0.99)).collect();
            let g = dice_grad(&probs, &targets, DEFAULT_DICE_SMOOTH).map_err(|e| e.to_string())?;
            let mut dice_worst = 0.0f64;
            for j in 0..cells {
                let orig = probs[j];
                probs[j] = orig + FD_STEP;
                let up = dice_loss(&probs, &targets, DEFAULT_DICE_SMOOTH).unwrap();
                probs[j] = orig - FD_STEP;
                let down = dice_loss(&probs, &targets, DEFAULT_DICE_SMOOTH).unwrap();
                probs[j] = orig;
                dice_worst = dice_worst.max(rel_err(g[j], (up - down) / (2.0 * FD_STEP)));
            }
            Ok((ls_worst, bce_worst, dice_worst))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold((0.0f64, 0.0f64, 0.0f64), |acc, w| {
            (acc.0.max(w.0), acc.1.max(w.1), acc.2.max(w.2))
        });
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < FD_TOL, || format!("L_S max rel err {:e}", worst.0))?;
    ensure(worst.1 < FD_TOL, || format!("BCE max rel err {:e}", worst.1))?;
    ensure(worst.2 < FD_TOL, || format!("Dice max rel err {:e}", worst.2))?;
    ensure(secs < 10.0, || format!("took {secs:.2} s"))?;
    Ok(format!(
        "max rel err L_S {:.1e}, BCE {:.1e}, Dice {:.1e}; {secs:.2} s",
        worst.0, worst.1, worst.2
    ))
}

fn ls_shift_scale() -> Outcome {
    let (d, blocks, heads) = (24usize, 2usize, 4usize);
    let (mut shift_worst, mut scale_worst) = (0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + seed);
        let gt = GroundTruthGrid::new(d, random_gt(&mut rng, d)).unwrap();
        let data: Vec<f64> = (0..blocks * heads * d * d).map(|_| rng.gen::<f64>()).collect();
        let c = rng.gen_range(0.0..5.0);
        let s = rng.gen_range(0.1..10.0);
        let loss = |v: Vec<f64>| {
            let stack = AttentionStack::new(blocks, heads, d, v).unwrap();
            let r = spatial_attention_loss(&stack, &gt, DEFAULT_EPSILON_LOG).unwrap();
            assert!(!r.clamped, "seed {seed} clamps");
            r.value
        };
        let base = loss(data.clone());
        let shifted = loss(data.iter().map(|v| v + c).collect());
        let scaled = loss(data.iter().map(|v| v * s).collect());
        shift_worst = shift_worst.max((shifted - base).abs());
        scale_worst = scale_worst.max((scaled - base + 2.0 * s.ln()).abs());
    }
    ensure(shift_worst < 1e-9, || format!("shift error {shift_worst:e}"))?;
    ensure(scale_worst < 1e-9, || format!("scale error {scale_worst:e}"))?;
    Ok(format!("max shift error {shift_worst:.1e}, max scale error {scale_worst:.1e}"))
}

// ---------------------------------------------------------------- masks

fn random_mask(rng: &mut ChaCha8Rng, max_side: usize) -> BinaryMask {
    let h = rng.gen_range(1..=max_side);
    let w = rng.gen_range(1..=max_side);
    let density: f64 = rng.gen();
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density)).unwrap()
}

fn rle_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let mut m = random_mask(&mut rng, 256);
        if i % 10 == 0 {
            // some blocky masks with long runs
            let (h, w) = m.shape();
            let (a, b) = (rng.gen_range(0..h), rng.gen_range(0..w));
            m = BinaryMask::from_fn(h, w, |r, c| r >= a && c <= b).unwrap();
        }
        let back = rle_decode(&rle_encode(&m)).map_err(|e| e.to_string())?;
        ensure(back == m, || format!("mask {i} ({:?}) differs after roundtrip", m.shape()))?;
    }
    Ok("1000 masks bit-exact".into())
}

/// Depth-first flood fill from each unlabelled foreground pixel in row-major
/// order, 8-neighbourhood.
fn flood_fill_labels(m: &BinaryMask) -> (Vec<u32>, usize) {
    let (h, w) = m.shape();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    for start in 0..h * w {
        if !m.get(start / w, start % w) || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut stack = vec![start];
        labels[start] = next;
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if m.get(nr as usize, nc as usize) && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

fn components_vs_flood_fill() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..500 {
        let density = rng.gen_range(0.2..0.7);
        let m = BinaryMask::from_fn(16, 16, |_, _| rng.gen_bool(density)).unwrap();
        let got = connected_components(&m, Connectivity::Eight);
        let (labels, count) = flood_fill_labels(&m);
        ensure(got.count() == count && got.labels() == labels.as_slice(), || {
            format!("mask {i}: {} components vs oracle {count}", got.count())
        })?;
    }
    Ok("500 masks identical labelings".into())
}

fn canonical_descriptors() -> Outcome {
    let square = describe(&BinaryMask::ones(10, 10).unwrap()).map_err(|e| e.to_string())?;
    ensure(square.eccentricity == 0.0, || format!("square eccentricity {}", square.eccentricity))?;
    ensure((square.circularity - std::f64::consts::FRAC_PI_4).abs() < 1e-9, || {
        format!("square circularity {}", square.circularity)
    })?;
    ensure(square.solidity == 1.0, || format!("square solidity {}", square.solidity))?;
    ensure(square.symmetry == 1.0, || format!("square symmetry {}", square.symmetry))?;
    ensure(square.extent == 1.0, || format!("square extent {}", square.extent))?;
    let tromino = describe(&BinaryMask::from_rows(&[[1u8, 1], [1, 0]]).unwrap()).map_err(|e| e.to_string())?;
    ensure((tromino.solidity - 6.0 / 7.0).abs() < 1e-9, || format!("L solidity {}", tromino.solidity))?;
    ensure(tromino.extent == 0.75, || format!("L extent {}", tromino.extent))?;
    Ok(format!(
        "square ecc 0, circ {:.9}, sol/sym/ext 1; L-tromino sol {:.9}, ext 0.75",
        square.circularity, tromino.solidity
    ))
}

fn grid_formulas() -> Outcome {
    let cases = [
        ((100, 300), (4, 1)),
        ((300, 100), (4, 1)),
        ((100, 200), (4, 4)),
        ((100, 250), (4, 1)),
        ((40, 100), (4, 1)),
        ((41, 100), (4, 4)),
    ];
    for ((h, w), (r, c)) in cases {
        let got = local_grid(h, w);
        ensure(got == GridSpec { rows: r, cols: c }, || {
            format!("({h},{w}) gave {got:?}, want ({r},{c})")
        })?;
    }
    let json = serde_json::to_string(&local_grid(100, 300)).unwrap();
    ensure(json == r#"{"R":4,"C":1}"#, || json.clone())?;
    Ok("(100,300)->(4,1), (100,200)->(4,4), ratio 2.5 -> elongated branch".into())
}

// ---------------------------------------------------------------- matching

fn brute_force(m: &[Vec<f64>]) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == m.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..m[row].len() {
            if !used[j] {
                used[j] = true;
                go(m, row + 1, used, acc + m[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(m, 0, &mut vec![false; m[0].len()], 0.0, &mut best);
    best
}

fn hungarian_vs_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..200 {
        let k = rng.gen_range(1..=6);
        let t = rng.gen_range(1..=k);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        if i % 4 == 0 {
                            rng.gen_range(0..4) as f64
                        } else {
                            rng.gen_range(0.0..10.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let m = CostMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let got = hungarian(&m);
        let want = brute_force(&rows);
        ensure(got.total_cost == want, || {
            format!("matrix {i} ({t}x{k}): hungarian {} vs brute force {want}", got.total_cost)
        })?;
        let mut cols: Vec<usize> = got.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        ensure(cols.len() == t, || format!("matrix {i}: candidate reused"))?;
    }
    Ok("200 matrices, totals identical".into())
}

fn sweep_counters() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let target = BinaryMask::from_fn(8, 8, |r, c| r < 4 && c < 5).unwrap();
    let targets = TargetSet::new(vec![target]).map_err(|e| e.to_string())?;
    let rows = sweep_queries(
        |k| CandidateSet::new(8, 8, (0..k).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect()),
        &targets,
        &DEFAULT_SWEEP_KS,
        CostWeights::default(),
    )
    .map_err(|e| e.to_string())?;
    let got: Vec<u64> = rows.iter().map(|r| r.cost_evaluations).collect();
    ensure(got == [100, 75, 50, 25, 10, 3, 0], || format!("evaluations {got:?}"))?;
    let last = rows.last().unwrap();
    ensure(last.bypassed, || "k=1 did not bypass".into())?;
    ensure(rows[..6].iter().all(|r| !r.bypassed), || "k>1 bypassed".into())?;
    Ok(format!("evaluations {got:?}, k=1 bypassed"))
}

// ---------------------------------------------------------------- metrics

fn sample(i: u64, u: u64) -> SampleScore {
    SampleScore {
        intersection: i,
        union: u,
        iou: i as f64 / u as f64,
    }
}

fn metrics_examples() -> Outcome {
    let acc: MetricsAccumulator = [sample(1, 2), sample(4, 4)].into_iter().collect();
    let g = acc.giou().map_err(|e| e.to_string())?;
    let c = acc.ciou().map_err(|e| e.to_string())?;
    ensure(g == 0.75, || format!("gIoU {g}"))?;
    ensure((c - 5.0 / 6.0).abs() < 1e-12, || format!("cIoU {c}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let scores: Vec<SampleScore> = (0..60)
        .map(|_| {
            let u = rng.gen_range(1..500);
            sample(rng.gen_range(0..=u), u)
        })
        .collect();
    let whole: MetricsAccumulator = scores.iter().copied().collect();
    let (wg, wc) = (whole.giou().unwrap(), whole.ciou().unwrap());
    let canon = |a: &MetricsAccumulator| {
        let mut v = a.per_sample_ious.clone();
        v.sort_by(f64::total_cmp);
        (a.cum_intersection, a.cum_union, v)
    };
    for trial in 0..50 {
        // random shards, merged in two different groupings and orders
        let mut shards: Vec<MetricsAccumulator> = (0..rng.gen_range(2..6)).map(|_| MetricsAccumulator::new()).collect();
        for s in &scores {
            let n = shards.len();
            shards[rng.gen_range(0..n)].push(*s);
        }
        let left = shards.iter().cloned().fold(MetricsAccumulator::new(), |a, b| a.merge(b));
        let right = shards.iter().rev().cloned().fold(MetricsAccumulator::new(), |a, b| b.merge(a));
        let mut it = shards.into_iter();
        let first = it.next().unwrap();
        let rest = it.fold(MetricsAccumulator::new(), |a, b| a.merge(b));
        let nested = first.merge(rest);
        for m in [&left, &right, &nested] {
            ensure(canon(m) == canon(&whole), || format!("trial {trial}: merged contents differ"))?;
            ensure((m.giou().unwrap() - wg).abs() < 1e-12 && m.ciou().unwrap() == wc, || {
                format!("trial {trial}: merged metrics differ")
            })?;
        }
    }
    Ok(format!("gIoU {g}, cIoU {c:.15}; 50 shardings consistent"))
}

// ---------------------------------------------------------------- curation

fn rect(h: usize, w: usize, rows: usize, cols: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| (2..2 + rows).contains(&r) && (2..2 + cols).contains(&c)).unwrap()
}

fn stage2_fixture() -> Outcome {
    let inliers: Vec<BinaryMask> = (0..10)
        .map(|i| if i % 2 == 0 { rect(16, 24, 6, 8) } else { rect(16, 24, 6, 9) })
        .collect();
    let gold = derive_reference_stats("storage tank", &inliers).map_err(|e| e.to_string())?;
    let bar = rect(16, 24, 2, 20);
    let ell = BinaryMask::from_fn(16, 24, |r, c| (2..10).contains(&r) && (2..10).contains(&c) && (r >= 7 || c < 5)).unwrap();
    let holed = BinaryMask::from_fn(16, 24, |r, c| {
        (2..8).contains(&r) && (2..10).contains(&c) && !((4..6).contains(&r) && (4..8).contains(&c))
    })
    .unwrap();
    let mut items: Vec<Stage2Item> = inliers
        .iter()
        .enumerate()
        .map(|(i, m)| Stage2Item {
            id: format!("in{i}"),
            mask: m.clone(),
            bbox_count: 1,
            category: "storage tank".into(),
        })
        .collect();
    for (id, m) in [("bar", bar), ("ell", ell), ("holed", holed)] {
        items.push(Stage2Item {
            id: id.into(),
            mask: m,
            bbox_count: 1,
            category: "storage tank".into(),
        });
    }
    let stats = HashMap::from([("storage tank".to_string(), gold.clone())]);
    let (outcomes, summary) =
        run_stage2(&items, &stats, &FilterConfig::new(DEFAULT_K_SIGMA)).map_err(|e| e.to_string())?;
    let rejected: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.as_str()).collect();
    ensure(rejected == ["bar", "ell", "holed"], || format!("rejected {rejected:?}"))?;
    ensure(summary.kept == 10 && summary.dropped_by_range == 3 && summary.dropped_by_count == 0, || {
        format!("{summary:?}")
    })?;
    let mut detail = Vec::new();
    for o in outcomes.iter().filter(|o| !o.passed) {
        ensure(o.dropped_by == Some(DropReason::Range) && !o.failures.is_empty(), || {
            format!("{} has no recorded failures", o.id)
        })?;
        for f in &o.failures {
            // bounds recorded match mean ± 2·std of the gold band
            let band = gold.metrics.get(f.descriptor);
            let (lo, hi) = (band.mean - 2.0 * band.std, band.mean + 2.0 * band.std);
            ensure((f.lower - lo).abs() < 1e-12 && (f.upper - hi).abs() < 1e-12, || {
                format!("{}: bounds for {} not recorded", o.id, f.descriptor.name())
            })?;
            ensure(f.value < f.lower || f.value > f.upper, || format!("{} value inside band", o.id))?;
            let z = if band.std > 0.0 { (f.value - band.mean).abs() / band.std } else { f64::INFINITY };
            ensure(z > 2.0, || format!("{}: |z| = {z}", o.id))?;
        }
        let names: Vec<&str> = o.failures.iter().map(|f| f.descriptor.name()).collect();
        detail.push(format!("{} [{}]", o.id, names.join(",")));
    }
    Ok(format!("rejected {}", detail.join(" ")))
}

// ---------------------------------------------------------------- dataset

/// Synthetic records: 30 QA pairs over 10 categories, record i has
/// 1 + i % 3 masks, every 5th record is in the test split.
fn synthetic_corpus() -> (String, [usize; 4]) {
    let cats = [
        "airplane", "ship", "harbor", "bridge", "storage tank", "baseball field", "tennis court",
        "vehicle", "dam", "windmill",
    ];
    let mut text = String::new();
    let (mut masks, mut test_masks) = (0, 0);
    for i in 0..30usize {
        let n = 1 + i % 3;
        let split = if i % 5 == 0 { "test" } else { "train" };
        masks += n;
        if split == "test" {
            test_masks += n;
        }
        let ms: Vec<BinaryMask> = (0..n)
            .map(|k| BinaryMask::from_fn(12, 12, |r, c| r / 4 == k && c < 3 + i % 5).unwrap())
            .collect();
        let rles: Vec<_> = ms.iter().map(rle_encode).collect();
        let boxes: Vec<_> = ms.iter().map(|m| segcurate_core::mask_to_bbox(m).unwrap()).collect();
        let v = serde_json::json!({
            "id": format!("syn-{i:03}"),
            "image_path": format!("images/{i:03}.png"),
            "instruction": "Segment every target that matches the description.",
            "answer": "Done.",
            "masks": rles,
            "bboxes": boxes,
            "category": cats[i % cats.len()],
            "granularity": "instance",
            "multiplicity": if n > 1 { "multiple" } else { "single" },
            "reasoning": "explicit",
            "linguistic": "short",
            "split": split,
        });
        text.push_str(&v.to_string());
        text.push('\n');
    }
    (text, [masks, cats.len(), 30, test_masks])
}

fn dataset_counts() -> Outcome {
    let (label, text, want) = match std::env::var_os("SEGCURATE_CORPUS") {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{path:?}: {e}"))?;
            ("release corpus", text, [40_396, 122, 30_830, 1_900])
        }
        None => {
            let (text, want) = synthetic_corpus();
            ("synthetic fixture", text, want)
        }
    };
    let report = validate(text.as_bytes()).map_err(|e| e.to_string())?;
    ensure(report.is_clean(), || format!("{} validation errors, first {:?}", report.errors.len(), report.errors.first()))?;
    let s = stats(&report.records, DEFAULT_LINGUISTIC_THRESHOLD);
    let got = [s.mask_count, s.class_count, s.qa_count, s.test_mask_count];
    ensure(got == want, || format!("{label}: got {got:?}, want {want:?}"))?;
    Ok(format!(
        "{label}: mask_count {}, class_count {}, qa_count {}, test_mask_count {}",
        got[0], got[1], got[2], got[3]
    ))
}

// ---------------------------------------------------------------- review

fn review_concurrency() -> Outcome {
    let start = Instant::now();

    // at most one lease on a single item under a simultaneous start
    let clock = Arc::new(ManualClock::new(0));
    let single = Arc::new(ReviewStore::in_memory(clock, DEFAULT_LEASE_TTL_MS));
    single
        .enqueue(vec![NewItem {
            id: "only".into(),
            image_path: "i.png".into(),
            masks: vec![],
            instruction: "q".into(),
            answer: "a".into(),
            stage: Stage::QaReview,
        }])
        .unwrap();
    let barrier = Arc::new(Barrier::new(8));
    let winners: usize = (0..8)
        .map(|r| {
            let (s, b) = (single.clone(), barrier.clone());
            std::thread::spawn(move || {
                b.wait();
                s.next_item(&format!("rev{r}")).unwrap().is_some() as usize
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| h.join().unwrap())
        .sum();
    ensure(winners == 1, || format!("{winners} reviewers leased the single item"))?;

    // 8 reviewers on 100 items; rev0 abandons its first lease
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let log_path = dir.path().join("decisions.jsonl");
    let clock = Arc::new(ManualClock::new(1_000_000));
    let store = Arc::new(ReviewStore::open(&log_path, clock.clone(), DEFAULT_LEASE_TTL_MS).map_err(|e| e.to_string())?);
    let items: Vec<NewItem> = (0..100)
        .map(|i| NewItem {
            id: format!("qa{i:03}"),
            image_path: format!("images/{i}.png"),
            masks: vec![],
            instruction: format!("Where is target {i}?"),
            answer: "There.".into(),
            stage: if i % 10 == 0 { Stage::MaskReview } else { Stage::QaReview },
        })
        .collect();
    store.enqueue(items).unwrap();

    let work = |store: Arc<ReviewStore>, reviewer: String, abandon: bool| {
        std::thread::spawn(move || {
            let mut decided = 0;
            while let Some(item) = store.next_item(&reviewer).unwrap() {
                if abandon {
                    // walk away while holding the lease
                    return decided;
                }
                let reject = item.id.ends_with('7');
                let rubric = if reject { Rubric { grammar: false, ..Rubric::ALL_PASS } } else { Rubric::ALL_PASS };
                store
                    .submit_decision(ReviewDecision {
                        item_id: item.id,
                        reviewer: reviewer.clone(),
                        rubric,
                        verdict: if reject { Verdict::Reject } else { Verdict::Accept },
                        notes: String::new(),
                        timestamp: 0,
                        revise: false,
                    })
                    .unwrap();
                decided += 1;
            }
            decided
        })
    };
    let handles: Vec<_> = (0..8)
        .map(|r| work(store.clone(), format!("rev{r}"), r == 0))
        .collect();
    let mut total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    // the abandoned lease expires and a fresh reviewer drains the rest
    clock.advance(DEFAULT_LEASE_TTL_MS + 1);
    total += work(store.clone(), "late".into(), false).join().unwrap();
    ensure(total == 100, || format!("{total} decisions made"))?;

    let progress = store.progress();
    ensure(progress.pending == 0 && progress.leased == 0 && progress.accepted + progress.rejected == 100, || {
        format!("{progress:?}")
    })?;

    // every item: leases never overlap, exactly one decision
    let events = store.events();
    let mut leases: HashMap<&str, Vec<(u64, u64, &str)>> = HashMap::new();
    let mut decisions: HashMap<&str, usize> = HashMap::new();
    for e in &events {
        match e {
            Event::Leased { at, item_id, reviewer, expires_at } => {
                let prev = leases.entry(item_id).or_default();
                if let Some(&(_, exp, holder)) = prev.last() {
                    let still_open = decisions.get(item_id.as_str()).is_none() && *at < exp;
                    ensure(!still_open, || format!("{item_id}: leased to {reviewer} while {holder} held it"))?;
                }
                prev.push((*at, *expires_at, reviewer));
            }
            Event::Decided { decision } => *decisions.entry(&decision.item_id).or_default() += 1,
            _ => {}
        }
    }
    ensure(decisions.len() == 100 && decisions.values().all(|&n| n == 1), || {
        "an item does not have exactly one decision".into()
    })?;
    for i in 0..100 {
        let item = store.item(&format!("qa{i:03}")).unwrap();
        ensure(item.status == ItemStatus::Decided && item.decision.is_some(), || format!("qa{i:03} undecided"))?;
    }

    // replay the on-disk log
    let file_events = read_log(std::io::BufReader::new(std::fs::File::open(&log_path).unwrap())).map_err(|e| e.to_string())?;
    ensure(file_events == events, || "on-disk log differs from in-memory events".into())?;
    let replayed = ReviewStore::replay(&file_events, clock, DEFAULT_LEASE_TTL_MS).map_err(|e| e.to_string())?;
    ensure(replayed.snapshot() == store.snapshot(), || "replayed snapshot differs".into())?;

    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.2} s"))?;
    Ok(format!(
        "100 items, {} events, accepted {} rejected {}, replay identical, {secs:.2} s",
        events.len(),
        progress.accepted,
        progress.rejected
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("spatial loss hand example", ls_hand_example),
        ("gradient check (L_S, BCE, Dice)", gradient_check),
        ("spatial loss shift/scale", ls_shift_scale),
        ("RLE roundtrip", rle_roundtrip),
        ("connected components vs flood fill", components_vs_flood_fill),
        ("canonical descriptors", canonical_descriptors),
        ("local grid formulas", grid_formulas),
        ("Hungarian vs brute force", hungarian_vs_brute_force),
        ("query sweep counters", sweep_counters),
        ("gIoU / cIoU / merge", metrics_examples),
        ("stage-2 pipeline fixture", stage2_fixture),
        ("dataset counts", dataset_counts),
        ("review service concurrency", review_concurrency),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", 13 - failed, 13);
    if failed > 0 {
        std::process::exit(1);
    }
}
