//! COCO-style box detection metrics.
//!
//! Matching follows the COCO evaluation rules: per image and category,
//! detections are visited by descending score and each takes the unmatched
//! ground truth of highest IoU at or above the threshold, preferring gts
//! inside the area range. Precision is made monotone and read at 101
//! recall points. A (category, threshold) cell with no ground truth is
//! undefined and skipped when averaging; a summary with nothing defined
//! reports 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxXyxy};

pub const MAX_DETS: usize = 100;
pub const SMALL: f64 = 32.0 * 32.0;
pub const LARGE: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category: usize,
    pub bbox: BoxXyxy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category: usize,
    pub bbox: BoxXyxy,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    pub const SMALL: AreaRange = AreaRange { lo: 0.0, hi: SMALL };
    pub const MEDIUM: AreaRange = AreaRange {
        lo: SMALL,
        hi: LARGE,
    };
    pub const LARGE: AreaRange = AreaRange {
        lo: LARGE,
        hi: f64::INFINITY,
    };

    fn contains(&self, area: f64) -> bool {
        area >= self.lo && area <= self.hi
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// AP over all thresholds per category id.
    pub per_category: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("ap", self.ap),
            ("ap50", self.ap50),
            ("ap75", self.ap75),
            ("ap_small", self.ap_small),
            ("ap_medium", self.ap_medium),
            ("ap_large", self.ap_large),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        for (c, v) in &self.per_category {
            s.push_str(&format!("ap_category_{c},{v}\n"));
        }
        s
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Descending score, then box coordinates, then category: a total order
/// independent of input order.
fn det_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then(a.category.cmp(&b.category))
}

/// Dataset grouped by image then category.
struct Index<'a> {
    images: Vec<u64>,
    gts: BTreeMap<(u64, usize), Vec<&'a GroundTruth>>,
    dets: BTreeMap<(u64, usize), Vec<&'a Detection>>,
}

impl<'a> Index<'a> {
    fn new(gts: &'a [GroundTruth], dets: &'a [Detection]) -> Self {
        let mut images = BTreeSet::new();
        let mut g: BTreeMap<(u64, usize), Vec<&GroundTruth>> = BTreeMap::new();
        for x in gts {
            images.insert(x.image_id);
            g.entry((x.image_id, x.category)).or_default().push(x);
        }
        let mut d: BTreeMap<(u64, usize), Vec<&Detection>> = BTreeMap::new();
        for x in dets {
            images.insert(x.image_id);
            d.entry((x.image_id, x.category)).or_default().push(x);
        }
        for v in d.values_mut() {
            v.sort_by(|a, b| det_order(a, b));
            v.truncate(MAX_DETS);
        }
        Index {
            images: images.into_iter().collect(),
            gts: g,
            dets: d,
        }
    }
}

/// Scored match flags of one image and category at one threshold:
/// `(score, is_tp)` for every non-ignored detection, and the number of
/// non-ignored gts.
fn evaluate_image(
    gts: &[&GroundTruth],
    dets: &[&Detection],
    thr: f64,
    area: AreaRange,
) -> (Vec<(f64, bool)>, usize) {
    // Non-ignored gts first, stable.
    let mut order: Vec<(usize, bool)> = gts
        .iter()
        .enumerate()
        .map(|(i, g)| (i, !area.contains(g.bbox.area())))
        .collect();
    order.sort_by_key(|&(_, ignored)| ignored);
    let mut gt_taken = vec![false; order.len()];
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best = thr.min(1.0 - 1e-10);
        let mut matched: Option<usize> = None;
        for (slot, &(gi, ignored)) in order.iter().enumerate() {
            if gt_taken[slot] {
                continue;
            }
            // Once a regular gt is matched, stop at the first ignored one.
            if let Some(m) = matched {
                if !order[m].1 && ignored {
                    break;
                }
            }
            let v = iou(&d.bbox, &gts[gi].bbox);
            if v < best {
                continue;
            }
            best = v;
            matched = Some(slot);
        }
        match matched {
            Some(slot) => {
                gt_taken[slot] = true;
                if !order[slot].1 {
                    out.push((d.score, true));
                }
            }
            None => {
                if area.contains(d.bbox.area()) {
                    out.push((d.score, false));
                }
            }
        }
    }
    let npig = order.iter().filter(|&&(_, ig)| !ig).count();
    (out, npig)
}

/// 101-point interpolated AP from score-sorted match flags, or `None` when
/// there is no ground truth.
fn interpolated_ap(flags: &[(f64, bool)], npig: usize) -> Option<f64> {
    if npig == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for &(_, is_tp) in flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npig as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn category_ap(index: &Index<'_>, category: usize, thr: f64, area: AreaRange) -> Option<f64> {
    let mut flags = Vec::new();
    let mut npig = 0;
    for &img in &index.images {
        let gts = index
            .gts
            .get(&(img, category))
            .map_or(&[][..], Vec::as_slice);
        let dets = index
            .dets
            .get(&(img, category))
            .map_or(&[][..], Vec::as_slice);
        let (f, n) = evaluate_image(gts, dets, thr, area);
        flags.extend(f);
        npig += n;
    }
    // Stable: equal scores keep image order, then in-image order.
    flags.sort_by(|a, b| b.0.total_cmp(&a.0));
    interpolated_ap(&flags, npig)
}

fn categories(gts: &[GroundTruth], dets: &[Detection]) -> Vec<usize> {
    let set: BTreeSet<usize> = gts
        .iter()
        .map(|g| g.category)
        .chain(dets.iter().map(|d| d.category))
        .collect();
    set.into_iter().collect()
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let (s, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// AP at one IoU threshold over all areas, averaged over categories.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> f64 {
    let index = Index::new(gts, dets);
    mean_defined(
        categories(gts, dets)
            .into_iter()
            .map(|c| category_ap(&index, c, iou_threshold, AreaRange::ALL)),
    )
}

pub fn coco_summary(dets: &[Detection], gts: &[GroundTruth]) -> EvalReport {
    let index = Index::new(gts, dets);
    let cats = categories(gts, dets);
    let thresholds = iou_thresholds();
    let over = |area: AreaRange, thrs: &[f64]| {
        mean_defined(
            cats.iter()
                .flat_map(|&c| thrs.iter().map(move |&t| (c, t)))
                .map(|(c, t)| category_ap(&index, c, t, area)),
        )
    };
    let per_category = cats
        .iter()
        .map(|&c| {
            let v = mean_defined(
                thresholds
                    .iter()
                    .map(|&t| category_ap(&index, c, t, AreaRange::ALL)),
            );
            (c, v)
        })
        .collect();
    EvalReport {
        ap: over(AreaRange::ALL, &thresholds),
        ap50: over(AreaRange::ALL, &[0.5]),
        ap75: over(AreaRange::ALL, &[0.75]),
        ap_small: over(AreaRange::SMALL, &thresholds),
        ap_medium: over(AreaRange::MEDIUM, &thresholds),
        ap_large: over(AreaRange::LARGE, &thresholds),
        per_category,
    }
}
