//! Boxes, overlap, suppression, voting and receptive-field arithmetic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_VOTE_IOU: f64 = 0.5;

/// Axis-aligned box, half-open on the max edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    /// Square of side `side` with top-left corner at `(x, y)`.
    pub fn square(x: f64, y: f64, side: f64) -> Result<Self> {
        Self::new(x, y, x + side, y + side)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox {
            x_min: self.x_min * s,
            y_min: self.y_min * s,
            x_max: self.x_max * s,
            y_max: self.y_max * s,
        }
    }

    /// Intersection with `[0, width) x [0, height)`; `None` if nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: Option<usize>,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: Option<usize>) -> Self {
        Self { bbox, score, class_id }
    }
}

/// Receptive field of one output cell: side length, jump between cells, and
/// the image coordinate of cell 0's left edge (negative when layers pad).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RFDescriptor {
    pub window: usize,
    pub stride: usize,
    pub offset: i64,
}

/// One spatial layer of a receptive-field chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfLayer {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl RfLayer {
    pub fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self { kernel, stride, dilation, pad: 0 }
    }
}

/// Window, stride and offset of the last layer of `layers` relative to the input.
pub fn rf_chain(layers: &[RfLayer]) -> Result<RFDescriptor> {
    if layers.is_empty() {
        return Err(Error::invalid("receptive field of an empty chain"));
    }
    let (mut window, mut jump, mut offset) = (1usize, 1usize, 0i64);
    for l in layers {
        if l.kernel == 0 || l.stride == 0 || l.dilation == 0 {
            return Err(Error::invalid(format!("bad layer in chain: {l:?}")));
        }
        let k_eff = (l.kernel - 1) * l.dilation + 1;
        offset -= (l.pad * jump) as i64;
        window += (k_eff - 1) * jump;
        jump *= l.stride;
    }
    Ok(RFDescriptor { window, stride: jump, offset })
}

/// Image-space window of map cell `(row, col)` at pyramid level `scale`.
pub fn cell_to_box(row: usize, col: usize, rf: &RFDescriptor, scale: f64) -> BBox {
    let x = (col * rf.stride) as f64 + rf.offset as f64;
    let y = (row * rf.stride) as f64 + rf.offset as f64;
    let side = rf.window as f64;
    BBox {
        x_min: x / scale,
        y_min: y / scale,
        x_max: (x + side) / scale,
        y_max: (y + side) / scale,
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn by_score_desc(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Stable sort by descending score.
pub fn sort_by_score(boxes: &mut [ScoredBox]) {
    boxes.sort_by(by_score_desc);
}

/// Greedy suppression: keep the best box, drop all with IoU >= `iou_threshold` against it, repeat.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order = boxes.to_vec();
    sort_by_score(&mut order);
    let mut keep: Vec<ScoredBox> = Vec::new();
    for b in order {
        if keep.iter().all(|k| iou(&k.bbox, &b.bbox) < iou_threshold) {
            keep.push(b);
        }
    }
    keep
}

/// Score-weighted mean of `kept` and every same-class pool box overlapping it by at least `iou_threshold`.
///
/// Pool entries identical to `kept` are not counted twice.
pub fn box_vote(kept: &ScoredBox, pool: &[ScoredBox], iou_threshold: f64) -> BBox {
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    let mut add = |b: &ScoredBox| {
        let w = b.score;
        acc[0] += w * b.bbox.x_min;
        acc[1] += w * b.bbox.y_min;
        acc[2] += w * b.bbox.x_max;
        acc[3] += w * b.bbox.y_max;
        total += w;
    };
    add(kept);
    let mut skipped_self = false;
    for p in pool {
        if p.class_id != kept.class_id {
            continue;
        }
        if !skipped_self && p == kept {
            skipped_self = true;
            continue;
        }
        if iou(&p.bbox, &kept.bbox) >= iou_threshold {
            add(p);
        }
    }
    if total <= 0.0 {
        return kept.bbox;
    }
    BBox {
        x_min: acc[0] / total,
        y_min: acc[1] / total,
        x_max: acc[2] / total,
        y_max: acc[3] / total,
    }
}
