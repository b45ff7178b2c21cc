//! Box formats, overlap measures, pyramid level assignment and NMS.

use serde::{Deserialize, Serialize};

/// Corner-form box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Center-form box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxCxcywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxXyxy { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxXyxy::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Swap coordinates so that `x2 ≥ x1` and `y2 ≥ y1`.
    pub fn canonical(self) -> Self {
        BoxXyxy {
            x1: self.x1.min(self.x2),
            y1: self.y1.min(self.y2),
            x2: self.x1.max(self.x2),
            y2: self.y1.max(self.y2),
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_cxcywh(self) -> BoxCxcywh {
        BoxCxcywh {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn scaled(self, sx: f64, sy: f64) -> Self {
        BoxXyxy::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }

    pub fn clipped(self, w: f64, h: f64) -> Self {
        BoxXyxy::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }
}

impl BoxCxcywh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxCxcywh { cx, cy, w, h }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxCxcywh::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn to_xyxy(self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let c = cw.max(0.0) * ch.max(0.0);
    if c <= 0.0 {
        iou
    } else {
        iou - (c - union) / c
    }
}

pub const BASE_SIZE: f64 = 224.0;

/// `floor(log2(√area / s_base)) + 4`, clamped to `[1, 5]`. Empty boxes go to 1.
pub fn assign_fpn_level(b: &BoxXyxy, s_base: f64) -> usize {
    let area = b.area();
    if area <= 0.0 {
        return 1;
    }
    let raw = (area.sqrt() / s_base).log2().floor() + 4.0;
    raw.clamp(1.0, 5.0) as usize
}

/// Greedy non-maximum suppression.
///
/// Visits boxes by descending score (equal scores: lower index first) and
/// drops any box whose IoU with an already kept box exceeds `iou_threshold`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BoxXyxy], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}
