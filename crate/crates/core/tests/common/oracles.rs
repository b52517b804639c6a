//! Brute-force reference implementations and random instance generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsr::dmsnet::ohem_select;
use tsr::eval::{ar_thresholds, average_precision, average_recall, match_detections, GtBox, MatchResult};
use tsr::geometry::{box_vote, iou, nms, BBox, ScoredBox};
use tsr::nn::ConvSpec;
use tsr::tensor::{Shape, Tensor};

pub const EXACT_TOL: f64 = 1e-9;

/// IoU of integer boxes by counting covered unit cells.
pub fn iou_raster(a: [i64; 4], b: [i64; 4]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let lo_x = a[0].min(b[0]);
    let hi_x = a[2].max(b[2]);
    let lo_y = a[1].min(b[1]);
    let hi_y = a[3].max(b[3]);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let ina = x >= a[0] && x < a[2] && y >= a[1] && y < a[3];
            let inb = x >= b[0] && x < b[2] && y >= b[1] && y < b[3];
            inter += (ina && inb) as u64;
            union += (ina || inb) as u64;
        }
    }
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

fn int_box(rng: &mut ChaCha8Rng, extent: i64) -> [i64; 4] {
    let x0 = rng.random_range(0..extent - 1);
    let y0 = rng.random_range(0..extent - 1);
    let x1 = rng.random_range(x0 + 1..=extent);
    let y1 = rng.random_range(y0 + 1..=extent);
    [x0, y0, x1, y1]
}

fn to_bbox(b: [i64; 4]) -> BBox {
    BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap()
}

fn raster_of(b: &BBox) -> [i64; 4] {
    [b.x_min as i64, b.y_min as i64, b.x_max as i64, b.y_max as i64]
}

fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    iou_raster(raster_of(a), raster_of(b))
}

/// Scores from a coarse grid, so ties occur.
fn scored_boxes(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<ScoredBox> {
    (0..n)
        .map(|_| {
            let class = (classes > 0).then(|| rng.random_range(1..=classes));
            ScoredBox::new(to_bbox(int_box(rng, 16)), rng.random_range(1..=10) as f64 / 10.0, class)
        })
        .collect()
}

/// Indices in descending score order, ties by position.
fn rank(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..boxes.len()).collect();
    idx.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap().then(a.cmp(&b)));
    idx
}

/// NMS as repeated "take the best remaining, delete everything it suppresses".
pub fn nms_oracle(boxes: &[ScoredBox], thr: f64) -> Vec<ScoredBox> {
    let mut remaining = rank(boxes);
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let best = remaining.remove(0);
        out.push(boxes[best]);
        remaining.retain(|&i| oracle_iou(&boxes[i].bbox, &boxes[best].bbox) < thr);
    }
    out
}

pub fn vote_oracle(kept: &ScoredBox, pool: &[ScoredBox], thr: f64) -> BBox {
    let mut voters: Vec<ScoredBox> = pool
        .iter()
        .filter(|p| p.class_id == kept.class_id && oracle_iou(&p.bbox, &kept.bbox) >= thr)
        .copied()
        .collect();
    if let Some(pos) = voters.iter().position(|p| p == kept) {
        voters.remove(pos);
    }
    voters.push(*kept);
    let w: f64 = voters.iter().map(|v| v.score).sum();
    let avg = |f: fn(&BBox) -> f64| voters.iter().map(|v| v.score * f(&v.bbox)).sum::<f64>() / w;
    BBox::new(avg(|b| b.x_min), avg(|b| b.y_min), avg(|b| b.x_max), avg(|b| b.y_max)).unwrap()
}

/// Matching by exhaustive enumeration: every partial one-to-one assignment
/// of detections to same-class ground truth above the threshold is listed,
/// and the unique one satisfying the greedy-by-score rule is returned
/// (each detection, in order, holds the best still-free ground truth, lowest index on ties).
pub fn match_oracle(dets: &[ScoredBox], gts: &[GtBox], thr: f64) -> Vec<Option<usize>> {
    let ok = |d: &ScoredBox, g: &GtBox| match (d.class_id, g.class_id) {
        (Some(a), Some(b)) => a == b,
        _ => true,
    };
    let mut all = Vec::new();
    let mut cur = vec![None; dets.len()];
    fn enumerate(
        i: usize,
        cur: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        all: &mut Vec<Vec<Option<usize>>>,
        eligible: &dyn Fn(usize, usize) -> bool,
        n_gt: usize,
    ) {
        if i == cur.len() {
            all.push(cur.clone());
            return;
        }
        cur[i] = None;
        enumerate(i + 1, cur, used, all, eligible, n_gt);
        for j in 0..n_gt {
            if !used[j] && eligible(i, j) {
                used[j] = true;
                cur[i] = Some(j);
                enumerate(i + 1, cur, used, all, eligible, n_gt);
                used[j] = false;
                cur[i] = None;
            }
        }
    }
    let eligible = |i: usize, j: usize| ok(&dets[i], &gts[j]) && oracle_iou(&dets[i].bbox, &gts[j].bbox) >= thr;
    enumerate(0, &mut cur, &mut vec![false; gts.len()], &mut all, &eligible, gts.len());
    let greedy_consistent = |a: &Vec<Option<usize>>| {
        let mut used = vec![false; gts.len()];
        for (i, &choice) in a.iter().enumerate() {
            let free: Vec<usize> = (0..gts.len()).filter(|&j| !used[j] && eligible(i, j)).collect();
            let best = free.iter().copied().fold(None::<usize>, |b, j| match b {
                Some(k) if oracle_iou(&dets[i].bbox, &gts[k].bbox) >= oracle_iou(&dets[i].bbox, &gts[j].bbox) => Some(k),
                _ => Some(j),
            });
            if choice != best {
                return false;
            }
            if let Some(j) = choice {
                used[j] = true;
            }
        }
        true
    };
    let consistent: Vec<&Vec<Option<usize>>> = all.iter().filter(|a| greedy_consistent(a)).collect();
    assert_eq!(consistent.len(), 1, "greedy rule must single out one assignment");
    consistent[0].clone()
}

fn assignment_of(m: &MatchResult, n: usize) -> Vec<Option<usize>> {
    let mut a = vec![None; n];
    for &(d, g, _) in &m.true_positives {
        a[d] = Some(g);
    }
    a
}

/// AP by enumerating every score threshold and counting from scratch.
pub fn ap_oracle(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let tp = scored.iter().filter(|s| s.0 >= t && s.1).count() as f64;
            let fp = scored.iter().filter(|s| s.0 >= t && !s.1).count() as f64;
            (tp / n_gt as f64, tp / (tp + fp))
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let best_p = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best_p;
        prev = r;
    }
    Some(ap)
}

pub fn ar_oracle(props: &[Vec<ScoredBox>], gts: &[Vec<BBox>], k: usize) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    let mut sum = 0.0;
    for t in ar_thresholds() {
        let mut hit = 0;
        for (p, g) in props.iter().zip(gts) {
            let top: Vec<ScoredBox> = rank(p).into_iter().take(k).map(|i| ScoredBox { class_id: None, ..p[i] }).collect();
            let gb: Vec<GtBox> = g.iter().map(|&b| GtBox::new(b, None)).collect();
            hit += match_oracle(&top, &gb, t).iter().flatten().count();
        }
        sum += hit as f64 / total as f64;
    }
    sum / 10.0
}

pub fn ohem_oracle(losses: &[Option<f32>], n: usize) -> Vec<usize> {
    let mut kept: Vec<(f32, usize)> = losses.iter().enumerate().filter_map(|(i, l)| l.map(|l| (l, i))).collect();
    kept.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    kept.into_iter().take(n).map(|p| p.1).collect()
}

/// Direct seven-loop convolution with zero padding.
pub fn naive_conv(x: &Tensor<f64>, spec: &ConvSpec, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let (oh, ow) = spec.output_size(s.height, s.width).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.batch, spec.out_channels, oh, ow)).unwrap();
    for n in 0..s.batch {
        for o in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..s.channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                let xx = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < s.height && (xx as usize) < s.width {
                                    acc += w.at(o, c, ky, kx) * x.at(n, c, y as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.set(n, o, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// The dense kernel equivalent to `w` applied with `dilation`: taps spread out, zeros between.
pub fn inflate_kernel(w: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let s = w.shape();
    let (h, wd) = ((s.height - 1) * dilation + 1, (s.width - 1) * dilation + 1);
    let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, h, wd)).unwrap();
    for o in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(o, c, y * dilation, x * dilation, w.at(o, c, y, x));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub name: &'static str,
    pub instances: usize,
    pub mismatches: usize,
    pub max_abs_diff: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.max_abs_diff <= EXACT_TOL
    }
}

struct Tally {
    report: OracleReport,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { report: OracleReport { name, instances: 0, mismatches: 0, max_abs_diff: 0.0 } }
    }

    fn value(&mut self, a: f64, b: f64) {
        self.report.max_abs_diff = self.report.max_abs_diff.max((a - b).abs());
    }

    fn same(&mut self, equal: bool) {
        self.report.mismatches += (!equal) as usize;
    }
}

fn bbox_diff(a: &BBox, b: &BBox) -> f64 {
    [(a.x_min, b.x_min), (a.y_min, b.y_min), (a.x_max, b.x_max), (a.y_max, b.y_max)]
        .iter()
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sweep<F: FnMut(&mut ChaCha8Rng, &mut Tally)>(name: &'static str, seed: u64, instances: usize, mut f: F) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tally::new(name);
    for _ in 0..instances {
        f(&mut rng, &mut t);
        t.report.instances += 1;
    }
    t.report
}

pub fn check_iou(seed: u64, instances: usize) -> OracleReport {
    sweep("iou", seed, instances, |rng, t| {
        let (a, b) = (int_box(rng, 20), int_box(rng, 20));
        t.value(iou(&to_bbox(a), &to_bbox(b)), iou_raster(a, b));
    })
}

pub fn check_nms(seed: u64, instances: usize) -> OracleReport {
    sweep("nms", seed, instances, |rng, t| {
        let n = rng.random_range(0..=8);
        let boxes = scored_boxes(rng, n, 0);
        let thr = rng.random_range(1..=9) as f64 / 10.0;
        t.same(nms(&boxes, thr) == nms_oracle(&boxes, thr));
    })
}

pub fn check_vote(seed: u64, instances: usize) -> OracleReport {
    sweep("box_vote", seed, instances, |rng, t| {
        let n = rng.random_range(1..=8);
        let pool = scored_boxes(rng, n, 2);
        let kept = pool[rng.random_range(0..n)];
        let thr = rng.random_range(1..=9) as f64 / 10.0;
        t.value(0.0, bbox_diff(&box_vote(&kept, &pool, thr), &vote_oracle(&kept, &pool, thr)));
    })
}

pub fn check_matching(seed: u64, instances: usize) -> OracleReport {
    sweep("match_detections", seed, instances, |rng, t| {
        let n = rng.random_range(0..=6);
        let mut dets = scored_boxes(rng, n, 2);
        let order = rank(&dets);
        dets = order.into_iter().map(|i| dets[i]).collect();
        let gts: Vec<GtBox> = (0..rng.random_range(0..=6))
            .map(|_| GtBox::new(to_bbox(int_box(rng, 16)), Some(rng.random_range(1..=2))))
            .collect();
        let thr = rng.random_range(1..=9) as f64 / 10.0;
        let m = match_detections(&dets, &gts, thr);
        let want = match_oracle(&dets, &gts, thr);
        let fps: Vec<usize> = (0..dets.len()).filter(|&i| want[i].is_none()).collect();
        let fns: Vec<usize> = (0..gts.len()).filter(|&j| !want.contains(&Some(j))).collect();
        t.same(assignment_of(&m, dets.len()) == want && m.false_positives == fps && m.false_negatives == fns);
    })
}

pub fn check_ap(seed: u64, instances: usize) -> OracleReport {
    sweep("average_precision", seed, instances, |rng, t| {
        let n = rng.random_range(0..=8);
        let scored: Vec<(f64, bool)> = (0..n).map(|_| (rng.random_range(1..=6) as f64 / 6.0, rng.random::<bool>())).collect();
        let tps = scored.iter().filter(|s| s.1).count();
        let n_gt = tps + rng.random_range(0..=3);
        match (average_precision(&scored, n_gt), ap_oracle(&scored, n_gt)) {
            (Some(a), Some(b)) => t.value(a, b),
            (a, b) => t.same(a == b),
        }
    })
}

pub fn check_ar(seed: u64, instances: usize) -> OracleReport {
    sweep("average_recall", seed, instances, |rng, t| {
        let images = rng.random_range(1..=2);
        let props: Vec<Vec<ScoredBox>> = (0..images).map(|_| {
                let n = rng.random_range(0..=5);
                scored_boxes(rng, n, 0)
            }).collect();
        let mut gts: Vec<Vec<BBox>> = (0..images)
            .map(|_| (0..rng.random_range(0..=3)).map(|_| to_bbox(int_box(rng, 16))).collect())
            .collect();
        if gts.iter().all(Vec::is_empty) {
            gts[0].push(to_bbox(int_box(rng, 16)));
        }
        let k = rng.random_range(1..=6);
        t.value(average_recall(&props, &gts, k).overall, ar_oracle(&props, &gts, k));
    })
}

pub fn check_ohem(seed: u64, instances: usize) -> OracleReport {
    sweep("ohem_select", seed, instances, |rng, t| {
        let len = rng.random_range(0..=40);
        let losses: Vec<Option<f32>> = (0..len)
            .map(|_| (rng.random::<f64>() > 0.3).then(|| rng.random_range(0..8) as f32 * 0.25))
            .collect();
        let n = rng.random_range(0..=20);
        let got = ohem_select(&losses, n);
        let available = losses.iter().flatten().count();
        t.same(got == ohem_oracle(&losses, n) && got.len() == n.min(available));
    })
}

/// The geometry and metric oracles.
pub fn all_oracles(seed: u64, instances: usize) -> Vec<OracleReport> {
    vec![
        check_iou(seed, instances),
        check_nms(seed + 1, instances),
        check_vote(seed + 2, instances),
        check_matching(seed + 3, instances),
        check_ap(seed + 4, instances),
        check_ar(seed + 5, instances),
    ]
}
