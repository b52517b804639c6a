//! Detection metrics: one-to-one matching, precision/recall, AP, AR and scale buckets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Visibility};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::pipeline::Detection;

/// Area cut-offs between the small/medium and medium/large buckets.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const LARGE_MIN_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScaleBucket {
    Small,
    Medium,
    Large,
}

impl ScaleBucket {
    pub const ALL: [ScaleBucket; 3] = [ScaleBucket::Small, ScaleBucket::Medium, ScaleBucket::Large];

    pub fn name(self) -> &'static str {
        match self {
            ScaleBucket::Small => "small",
            ScaleBucket::Medium => "medium",
            ScaleBucket::Large => "large",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Boundary areas (exactly 32^2 or 96^2) count as medium.
pub fn bucketize(b: &BBox) -> ScaleBucket {
    let a = b.area();
    if a < SMALL_MAX_AREA {
        ScaleBucket::Small
    } else if a <= LARGE_MIN_AREA {
        ScaleBucket::Medium
    } else {
        ScaleBucket::Large
    }
}

/// A ground-truth box as seen by the matcher. `class_id: None` matches any
/// detection; ignored boxes cannot be matched or missed, but they absorb
/// detections that would otherwise be false positives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class_id: Option<usize>,
    pub ignore: bool,
}

impl GtBox {
    pub fn new(bbox: BBox, class_id: Option<usize>) -> Self {
        Self { bbox, class_id, ignore: false }
    }
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, gt index, iou)`.
    pub true_positives: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    /// Unmatched, non-ignored ground-truth indices.
    pub false_negatives: Vec<usize>,
    /// Detections absorbed by ignored ground truth.
    pub ignored: Vec<usize>,
}

fn same_class(a: Option<usize>, b: Option<usize>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

/// Greedy one-to-one matching in detection order (callers sort by score).
///
/// Each detection takes the unmatched same-class ground truth with the highest
/// IoU (lowest index on ties) if that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut r = MatchResult::default();
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.ignore || taken[gi] || !same_class(d.class_id, g.class_id) {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            taken[gi] = true;
            r.true_positives.push((di, gi, v));
            continue;
        }
        let absorbed = gts.iter().any(|g| {
            g.ignore && same_class(d.class_id, g.class_id) && iou(&d.bbox, &g.bbox) >= iou_threshold
        });
        if absorbed {
            r.ignored.push(di);
        } else {
            r.false_positives.push(di);
        }
    }
    r.false_negatives = (0..gts.len()).filter(|&i| !taken[i] && !gts[i].ignore).collect();
    r
}

/// `P = TP / (TP + FP)` (1 with no detections), `R = TP / (TP + FN)` (1 with no ground truth).
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    (p, r)
}

/// One point of a precision/recall sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score threshold, highest first.
/// `scored` holds `(score, is_true_positive)`.
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut order: Vec<(f64, bool)> = scored.to_vec();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = order[i].0;
        while i < order.len() && order[i].0 == score {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (precision, recall) = precision_recall(tp, fp, n_gt.saturating_sub(tp));
        points.push(PrPoint { score, precision, recall: if n_gt == 0 { 0.0 } else { recall } });
    }
    points
}

/// Area under the precision/recall curve with the precision envelope made
/// non-increasing (all-point interpolation). `None` when there is no ground truth.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let points = pr_curve(scored, n_gt);
    let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Some(ap)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95, computed exactly.
pub fn ar_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (10 + i) as f64 / 20.0)
}

/// Average recall of class-agnostic proposals, split by scale bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArResult {
    pub k: usize,
    pub overall: f64,
    /// `None` for buckets without ground truth.
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

impl ArResult {
    pub fn bucket(&self, b: ScaleBucket) -> Option<f64> {
        match b {
            ScaleBucket::Small => self.small,
            ScaleBucket::Medium => self.medium,
            ScaleBucket::Large => self.large,
        }
    }
}

/// Recall averaged over [`ar_thresholds`], pooling all images, using each
/// image's top `k` proposals (score order). Bucket recall counts the matches
/// of the pooled matching that land on ground truth of that bucket.
pub fn average_recall(proposals: &[Vec<ScoredBox>], gts: &[Vec<BBox>], k: usize) -> ArResult {
    assert_eq!(proposals.len(), gts.len(), "one proposal list per image");
    let thresholds = ar_thresholds();
    let mut n_gt = [0usize; 3];
    for g in gts.iter().flatten() {
        n_gt[bucketize(g).index()] += 1;
    }
    let total_gt: usize = n_gt.iter().sum();
    let mut hits = [[0usize; 3]; 10];
    for (props, g) in proposals.iter().zip(gts) {
        let mut top: Vec<ScoredBox> = props.iter().map(|p| ScoredBox { class_id: None, ..*p }).collect();
        crate::geometry::sort_by_score(&mut top);
        top.truncate(k);
        let gt: Vec<GtBox> = g.iter().map(|&b| GtBox::new(b, None)).collect();
        for (ti, &t) in thresholds.iter().enumerate() {
            for (_, gi, _) in match_detections(&top, &gt, t).true_positives {
                hits[ti][bucketize(&g[gi]).index()] += 1;
            }
        }
    }
    let mean_recall = |count: &dyn Fn(&[usize; 3]) -> usize, denom: usize| -> f64 {
        if denom == 0 {
            return 1.0;
        }
        hits.iter().map(|h| count(h) as f64 / denom as f64).sum::<f64>() / thresholds.len() as f64
    };
    let bucket = |b: ScaleBucket| {
        (n_gt[b.index()] > 0).then(|| mean_recall(&|h| h[b.index()], n_gt[b.index()]))
    };
    ArResult {
        k,
        overall: if total_gt == 0 && proposals.iter().all(Vec::is_empty) {
            1.0
        } else {
            mean_recall(&|h| h.iter().sum(), total_gt)
        },
        small: bucket(ScaleBucket::Small),
        medium: bucket(ScaleBucket::Medium),
        large: bucket(ScaleBucket::Large),
    }
}

/// Which protocol to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Visible signs with both sides above the size cut-off, IoU 0.5, per-class P/R.
    Standard,
    /// All signs: AP/mAP, AR@K and scale buckets in addition to P/R.
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub benchmark: Benchmark,
    pub iou_threshold: f64,
    /// Standard benchmark: both sides must exceed this many pixels.
    pub min_side: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Full,
            iou_threshold: 0.5,
            min_side: 50.0,
        }
    }
}

/// Whether an annotation takes part in the standard benchmark.
pub fn passes_standard_filter(a: &Annotation, min_side: f64) -> bool {
    a.visibility == Visibility::Visible && a.bbox.width() > min_side && a.bbox.height() > min_side
}

/// Keeps visible annotations whose sides both exceed `min_side`.
pub fn standard_benchmark_filter(annotations: &[Annotation], min_side: f64) -> Vec<Annotation> {
    annotations
        .iter()
        .filter(|a| passes_standard_filter(a, min_side))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub name: String,
    pub ground_truth: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: ScaleBucket,
    pub ground_truth: usize,
    pub tp: usize,
    pub recall: Option<f64>,
    /// Mean AP over classes with ground truth in the bucket.
    pub map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub images: usize,
    pub per_class: Vec<ClassRow>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// Unweighted mean of per-class AP over classes with ground truth.
    pub map: Option<f64>,
    pub buckets: Vec<BucketRow>,
    pub average_recall: Vec<ArResult>,
    /// Per-class precision/recall sweeps, keyed by class name.
    pub pr_curves: BTreeMap<String, Vec<PrPoint>>,
    /// One entry per detection and per missed ground truth.
    pub traces: Vec<MatchTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    Ignored,
}

/// How one detection (or missed ground truth) was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub image_id: String,
    pub class_id: usize,
    pub outcome: MatchOutcome,
    /// Detection score; `None` for missed ground truth.
    pub score: Option<f64>,
    pub bbox: BBox,
    pub iou: Option<f64>,
    /// Bucket of the ground truth involved, if any.
    pub bucket: Option<ScaleBucket>,
}

/// Ground truth for one image in matcher form.
fn gt_boxes(anns: &[&Annotation], cfg: &EvalConfig) -> Vec<GtBox> {
    anns.iter()
        .map(|a| GtBox {
            bbox: a.bbox,
            class_id: Some(a.class_id),
            ignore: cfg.benchmark == Benchmark::Standard && !passes_standard_filter(a, cfg.min_side),
        })
        .collect()
}

fn to_scored(dets: &[Detection]) -> Vec<ScoredBox> {
    let mut v: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox::new(d.bbox, d.score, Some(d.class_id))).collect();
    crate::geometry::sort_by_score(&mut v);
    v
}

/// Per-class `(score, tp)` lists and ground-truth counts, with ground truth
/// outside `bucket` (and unmatched detections outside it) ignored.
fn class_sweeps(
    images: &[(Vec<ScoredBox>, Vec<GtBox>)],
    cfg: &EvalConfig,
    bucket: Option<ScaleBucket>,
) -> BTreeMap<usize, (Vec<(f64, bool)>, usize)> {
    let mut per: BTreeMap<usize, (Vec<(f64, bool)>, usize)> = BTreeMap::new();
    for (dets, gts) in images {
        let gts: Vec<GtBox> = gts
            .iter()
            .map(|g| GtBox {
                ignore: g.ignore || bucket.is_some_and(|b| bucketize(&g.bbox) != b),
                ..*g
            })
            .collect();
        let mut classes: Vec<usize> = dets.iter().filter_map(|d| d.class_id).collect();
        classes.extend(gts.iter().filter_map(|g| g.class_id));
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let cd: Vec<ScoredBox> = dets.iter().filter(|d| d.class_id == Some(c)).copied().collect();
            let cg: Vec<GtBox> = gts.iter().filter(|g| g.class_id == Some(c)).copied().collect();
            let m = match_detections(&cd, &cg, cfg.iou_threshold);
            let entry = per.entry(c).or_default();
            entry.1 += cg.iter().filter(|g| !g.ignore).count();
            entry.0.extend(m.true_positives.iter().map(|&(di, _, _)| (cd[di].score, true)));
            for &di in &m.false_positives {
                if bucket.is_none_or(|b| bucketize(&cd[di].bbox) == b) {
                    entry.0.push((cd[di].score, false));
                }
            }
        }
    }
    per
}

fn trace_matches(ids: &[&str], images: &[(Vec<ScoredBox>, Vec<GtBox>)], cfg: &EvalConfig) -> Vec<MatchTrace> {
    let mut out = Vec::new();
    for (id, (dets, gts)) in ids.iter().zip(images) {
        let mut classes: Vec<usize> = dets.iter().filter_map(|d| d.class_id).collect();
        classes.extend(gts.iter().filter_map(|g| g.class_id));
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let cd: Vec<ScoredBox> = dets.iter().filter(|d| d.class_id == Some(c)).copied().collect();
            let cg: Vec<GtBox> = gts.iter().filter(|g| g.class_id == Some(c)).copied().collect();
            let m = match_detections(&cd, &cg, cfg.iou_threshold);
            let mut trace = |outcome, score, bbox, iou, bucket| {
                out.push(MatchTrace { image_id: id.to_string(), class_id: c, outcome, score, bbox, iou, bucket })
            };
            for &(di, gi, v) in &m.true_positives {
                trace(MatchOutcome::TruePositive, Some(cd[di].score), cd[di].bbox, Some(v), Some(bucketize(&cg[gi].bbox)));
            }
            for &di in &m.false_positives {
                trace(MatchOutcome::FalsePositive, Some(cd[di].score), cd[di].bbox, None, None);
            }
            for &di in &m.ignored {
                trace(MatchOutcome::Ignored, Some(cd[di].score), cd[di].bbox, None, None);
            }
            for &gi in &m.false_negatives {
                trace(MatchOutcome::FalseNegative, None, cg[gi].bbox, None, Some(bucketize(&cg[gi].bbox)));
            }
        }
    }
    out
}

/// Scores detections (keyed by image id) against annotations.
pub fn evaluate(
    detections: &BTreeMap<String, Vec<Detection>>,
    annotations: &[Annotation],
    image_ids: &[String],
    class_names: &[String],
    cfg: &EvalConfig,
) -> EvalReport {
    let mut by_image: BTreeMap<&str, Vec<&Annotation>> = image_ids.iter().map(|id| (id.as_str(), Vec::new())).collect();
    for a in annotations {
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    for id in detections.keys() {
        by_image.entry(id.as_str()).or_default();
    }
    let ids: Vec<&str> = by_image.keys().copied().collect();
    let images: Vec<(Vec<ScoredBox>, Vec<GtBox>)> = by_image
        .iter()
        .map(|(id, anns)| {
            let dets = detections.get(*id).map(|d| to_scored(d)).unwrap_or_default();
            (dets, gt_boxes(anns, cfg))
        })
        .collect();

    let name = |c: usize| class_names.get(c.wrapping_sub(1)).cloned().unwrap_or_else(|| format!("CLASS_{c}"));
    let sweeps = class_sweeps(&images, cfg, None);
    let traces = trace_matches(&ids, &images, cfg);
    let mut per_class = Vec::new();
    let mut pr_curves = BTreeMap::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 1..=class_names.len() {
        let (scored, n_gt) = sweeps.get(&c).cloned().unwrap_or_default();
        let tp = scored.iter().filter(|s| s.1).count();
        let fp = scored.len() - tp;
        let fn_ = n_gt - tp;
        let (precision, recall) = precision_recall(tp, fp, fn_);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        pr_curves.insert(name(c), pr_curve(&scored, n_gt));
        per_class.push(ClassRow {
            class_id: c,
            name: name(c),
            ground_truth: n_gt,
            tp,
            fp,
            fn_,
            precision,
            recall,
            ap: average_precision(&scored, n_gt),
        });
    }
    let (precision, recall) = precision_recall(tp_all, fp_all, fn_all);
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let map = mean(per_class.iter().filter_map(|r| r.ap).collect());

    let mut buckets = Vec::new();
    let mut average_recall_rows = Vec::new();
    if cfg.benchmark == Benchmark::Full {
        for b in ScaleBucket::ALL {
            let sw = class_sweeps(&images, cfg, Some(b));
            let in_bucket = |o: MatchOutcome| traces.iter().filter(|t| t.outcome == o && t.bucket == Some(b)).count();
            let tp = in_bucket(MatchOutcome::TruePositive);
            let ground_truth = tp + in_bucket(MatchOutcome::FalseNegative);
            buckets.push(BucketRow {
                bucket: b,
                ground_truth,
                tp,
                recall: (ground_truth > 0).then(|| tp as f64 / ground_truth as f64),
                map: mean(sw.values().filter_map(|(s, n)| average_precision(s, *n)).collect()),
            });
        }
        let props: Vec<Vec<ScoredBox>> = images.iter().map(|(d, _)| d.clone()).collect();
        let gts: Vec<Vec<BBox>> = images
            .iter()
            .map(|(_, g)| g.iter().filter(|g| !g.ignore).map(|g| g.bbox).collect())
            .collect();
        for k in [50, 100, 300] {
            average_recall_rows.push(average_recall(&props, &gts, k));
        }
    }
    EvalReport {
        config: *cfg,
        images: images.len(),
        per_class,
        tp: tp_all,
        fp: fp_all,
        fn_: fn_all,
        precision,
        recall,
        map,
        buckets,
        average_recall: average_recall_rows,
        pr_curves,
        traces,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_id,class_name,ground_truth,tp,fp,fn,precision,recall,ap\n");
        for r in &self.per_class {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4},{:.4},{}",
                r.class_id, r.name, r.ground_truth, r.tp, r.fp, r.fn_, r.precision, r.recall, opt(r.ap)
            );
        }
        let _ = writeln!(
            s,
            "all,ALL,{},{},{},{},{:.4},{:.4},{}",
            self.tp + self.fn_,
            self.tp,
            self.fp,
            self.fn_,
            self.precision,
            self.recall,
            opt(self.map)
        );
        s
    }

    pub fn buckets_csv(&self) -> String {
        let mut s = String::from("bucket,ground_truth,tp,recall,map\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{},{}", b.bucket.name(), b.ground_truth, b.tp, opt(b.recall), opt(b.map));
        }
        s
    }

    pub fn ar_csv(&self) -> String {
        let mut s = String::from("k,ar,ar_small,ar_medium,ar_large\n");
        for a in &self.average_recall {
            let _ = writeln!(s, "{},{:.4},{},{},{}", a.k, a.overall, opt(a.small), opt(a.medium), opt(a.large));
        }
        s
    }

    /// All tables, separated by blank lines.
    pub fn to_text(&self) -> String {
        let mut s = self.per_class_csv();
        if !self.buckets.is_empty() {
            s.push('\n');
            s.push_str(&self.buckets_csv());
        }
        if !self.average_recall.is_empty() {
            s.push('\n');
            s.push_str(&self.ar_csv());
        }
        s
    }

    /// Writes the CSV tables, `traces.csv`, `summary.json` and one `pr_<class>.csv` per class into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("per_class.csv", self.per_class_csv())?;
        write("buckets.csv", self.buckets_csv())?;
        write("ar.csv", self.ar_csv())?;
        write(
            "summary.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        let mut t = String::from("image_id,class_id,outcome,score,x_min,y_min,x_max,y_max,iou,bucket\n");
        for m in &self.traces {
            let _ = writeln!(
                t,
                "{},{},{:?},{},{:.2},{:.2},{:.2},{:.2},{},{}",
                m.image_id,
                m.class_id,
                m.outcome,
                opt(m.score),
                m.bbox.x_min,
                m.bbox.y_min,
                m.bbox.x_max,
                m.bbox.y_max,
                opt(m.iou),
                m.bucket.map_or("NA", ScaleBucket::name)
            );
        }
        write("traces.csv", t)?;
        for (name, curve) in &self.pr_curves {
            let mut s = String::from("score,precision,recall\n");
            for p in curve {
                let _ = writeln!(s, "{},{:.6},{:.6}", p.score, p.precision, p.recall);
            }
            write(&format!("pr_{name}.csv"), s)?;
        }
        Ok(())
    }
}
