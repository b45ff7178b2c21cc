//! Brute-force reference implementations shared by the test targets.
#![allow(dead_code)]

use cdiffdet::eval::{Detection, GroundTruth};
use cdiffdet::geometry::{iou, BoxXyxy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive search: the minimum total (summed in proposal order) and the
/// lexicographically smallest sorted pair list attaining it.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    let k = n.min(m);
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut used = vec![false; n.max(m)];
    let mut chosen = Vec::new();
    fn rec(
        cost: &[Vec<f64>],
        rows_small: bool,
        k: usize,
        big: usize,
        used: &mut Vec<bool>,
        chosen: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if chosen.len() == k {
            let mut pairs: Vec<(usize, usize)> = chosen
                .iter()
                .enumerate()
                .map(|(s, &b)| if rows_small { (s, b) } else { (b, s) })
                .collect();
            pairs.sort();
            let total = pairs.iter().fold(0.0, |acc, &(i, j)| acc + cost[i][j]);
            let better = match best {
                None => true,
                Some((bt, bp)) => total < *bt || (total == *bt && pairs < *bp),
            };
            if better {
                *best = Some((total, pairs));
            }
            return;
        }
        for b in 0..big {
            if !used[b] {
                used[b] = true;
                chosen.push(b);
                rec(cost, rows_small, k, big, used, chosen, best);
                chosen.pop();
                used[b] = false;
            }
        }
    }
    rec(cost, n <= m, k, n.max(m), &mut used, &mut chosen, &mut best);
    best.unwrap_or((0.0, Vec::new()))
}

/// Random cost matrix up to 7×7; every third case has small integer costs,
/// which creates ties.
pub fn random_cost(rng: &mut ChaCha8Rng, case: usize) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=7);
    let m = rng.random_range(1..=7);
    let integer = case.is_multiple_of(3);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| {
                    if integer {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(0.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn random_box(rng: &mut impl Rng) -> BoxXyxy {
    let x = rng.random_range(0.0..50.0);
    let y = rng.random_range(0.0..50.0);
    BoxXyxy::new(
        x,
        y,
        x + rng.random_range(1.0..30.0),
        y + rng.random_range(1.0..30.0),
    )
}

/// Quadratic reference: repeatedly take the best remaining box and strike
/// every remaining box overlapping it.
pub fn nms_oracle(boxes: &[BoxXyxy], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && iou(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Random boxes with coarse scores so that ties occur.
pub fn random_nms_scene(rng: &mut ChaCha8Rng) -> (Vec<BoxXyxy>, Vec<f64>) {
    let n = rng.random_range(0..=30);
    let boxes: Vec<BoxXyxy> = (0..n).map(|_| random_box(rng)).collect();
    let scores: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0..8) as f64 / 8.0)
        .collect();
    (boxes, scores)
}

pub fn gt(img: u64, category: usize, b: [f64; 4]) -> GroundTruth {
    GroundTruth {
        image_id: img,
        category,
        bbox: BoxXyxy::from_array(b),
    }
}

pub fn det(img: u64, category: usize, b: [f64; 4], score: f64) -> Detection {
    Detection {
        image_id: img,
        category,
        bbox: BoxXyxy::from_array(b),
        score,
    }
}

/// Reference AP of one category: greedy matching by descending score, the
/// full precision/recall curve, and for each of the 101 recall levels the
/// best precision at any rank reaching that recall.
pub fn ap_oracle_category(
    dets: &[Detection],
    gts: &[GroundTruth],
    category: usize,
    thr: f64,
) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == category).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.category == category).collect();
    ds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::new();
    for d in &ds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v >= bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        flags.push(best.is_some());
    }
    let total = gts.len() as f64;
    let mut points = Vec::new();
    for k in 1..=flags.len() {
        let tp = flags[..k].iter().filter(|&&f| f).count() as f64;
        points.push((tp / total, tp / k as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    Some(sum / 101.0)
}

/// Mean over categories with ground truth; 0 when there are none.
pub fn ap_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> f64 {
    let mut cats: Vec<usize> = gts
        .iter()
        .map(|g| g.category)
        .chain(dets.iter().map(|d| d.category))
        .collect();
    cats.sort();
    cats.dedup();
    let defined: Vec<f64> = cats
        .iter()
        .filter_map(|&c| ap_oracle_category(dets, gts, c, thr))
        .collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Up to three images, two categories, 12 ground-truth boxes and 18
/// detections; half the detections jitter a ground-truth box so that
/// matches happen.
pub fn random_ap_scene(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..=3);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    let n_gt = rng.random_range(0..=12);
    let n_det = rng.random_range(0..=18);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0.0..80.0), rng.random_range(0.0..80.0));
        [
            x,
            y,
            x + rng.random_range(4.0..40.0),
            y + rng.random_range(4.0..40.0),
        ]
    };
    for _ in 0..n_gt {
        gts.push(gt(
            rng.random_range(0..images),
            rng.random_range(0..2),
            rand_box(rng),
        ));
    }
    for _ in 0..n_det {
        let (img, cat, b) = if !gts.is_empty() && rng.random_bool(0.5) {
            let g = gts[rng.random_range(0..gts.len())];
            let a = g.bbox.to_array();
            let j = |v: f64, rng: &mut ChaCha8Rng| v + rng.random_range(-4.0..4.0);
            let mut b = [j(a[0], rng), j(a[1], rng), j(a[2], rng), j(a[3], rng)];
            if b[2] < b[0] {
                b.swap(0, 2);
            }
            if b[3] < b[1] {
                b.swap(1, 3);
            }
            (g.image_id, g.category, b)
        } else {
            (
                rng.random_range(0..images),
                rng.random_range(0..2),
                rand_box(rng),
            )
        };
        dets.push(det(img, cat, b, rng.random()));
    }
    (dets, gts)
}
