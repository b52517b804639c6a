//! End-to-end detection: proposals, crop classification and post-processing.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dmsnet::{build_pyramid, decode_proposals, forward_dense, Branch, DmsNet, PyramidConfig};
use crate::error::{Error, Result};
use crate::fusionnet::{classify_crops, FusionNet, BACKGROUND};
use crate::geometry::{box_vote, iou, nms, sort_by_score, BBox, ScoredBox, DEFAULT_NMS_IOU, DEFAULT_VOTE_IOU};
use crate::tensor::Tensor;

/// A classified sign box. `class_id` is 1-based; background never appears.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub proposal_top_k: usize,
    /// Minimum map probability for a cell to become a proposal.
    pub decode_threshold: f64,
    pub nms_iou: f64,
    pub vote_iou: f64,
    /// Minimum classifier score of a reported detection.
    pub confidence_floor: f64,
    pub pyramid: PyramidConfig,
    /// Heads that contribute proposals.
    pub branches: Vec<Branch>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            proposal_top_k: 128,
            decode_threshold: 0.5,
            nms_iou: DEFAULT_NMS_IOU,
            vote_iou: DEFAULT_VOTE_IOU,
            confidence_floor: 0.5,
            pyramid: PyramidConfig::default(),
            branches: Branch::ALL.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.proposal_top_k == 0 {
            return Err(Error::invalid("proposal_top_k must be at least 1"));
        }
        for (name, v) in [
            ("decode_threshold", self.decode_threshold),
            ("nms_iou", self.nms_iou),
            ("vote_iou", self.vote_iou),
            ("confidence_floor", self.confidence_floor),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.branches.is_empty() {
            return Err(Error::invalid("at least one branch must be enabled"));
        }
        self.pyramid.validate()
    }
}

/// Class-agnostic proposals: the top-k cells over all levels and enabled heads.
pub fn propose(dms: &DmsNet, image: &Tensor, cfg: &PipelineConfig) -> Result<Vec<ScoredBox>> {
    let s = image.shape();
    let pyramid = build_pyramid(image, &cfg.pyramid)?;
    let maps = forward_dense(dms, &pyramid, &cfg.branches)?;
    Ok(decode_proposals(&maps, s.width, s.height, cfg.decode_threshold, cfg.proposal_top_k))
}

/// Classifies each proposal; background and unclassifiable boxes are dropped.
/// The result is the candidate pool that [`postprocess`] consumes, in proposal order.
pub fn classify_proposals(fusion: &FusionNet, image: &Tensor, proposals: &[ScoredBox]) -> Result<Vec<ScoredBox>> {
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let mut pool = Vec::new();
    for (b, c) in boxes.iter().zip(classify_crops(fusion, image, &boxes)?) {
        match c {
            Ok(c) if c.class_id != BACKGROUND => pool.push(ScoredBox::new(*b, c.score as f64, Some(c.class_id))),
            Ok(_) => {}
            Err(e) => log::debug!("skipping proposal {b:?}: {e}"),
        }
    }
    Ok(pool)
}

/// Per class: NMS, voting over the pre-NMS pool, then a second suppression
/// pass with the confidence floor, because voting can move two survivors
/// closer together.
pub fn postprocess(pool: &[ScoredBox], cfg: &PipelineConfig) -> Vec<Detection> {
    let mut by_class: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    for p in pool {
        by_class.entry(p.class_id.expect("classified")).or_default().push(*p);
    }
    let mut out = Vec::new();
    for (class_id, candidates) in by_class {
        let mut voted: Vec<ScoredBox> = nms(&candidates, cfg.nms_iou)
            .iter()
            .map(|k| ScoredBox { bbox: box_vote(k, &candidates, cfg.vote_iou), ..*k })
            .collect();
        sort_by_score(&mut voted);
        let mut kept: Vec<ScoredBox> = Vec::new();
        for v in voted {
            if v.score >= cfg.confidence_floor && kept.iter().all(|k| iou(&k.bbox, &v.bbox) < cfg.nms_iou) {
                kept.push(v);
            }
        }
        out.extend(kept.into_iter().map(|k| Detection {
            bbox: k.bbox,
            class_id,
            score: k.score,
        }));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// [`classify_proposals`] followed by [`postprocess`].
pub fn refine(fusion: &FusionNet, image: &Tensor, proposals: &[ScoredBox], cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    Ok(postprocess(&classify_proposals(fusion, image, proposals)?, cfg))
}

pub fn detect(image: &Tensor, dms: &DmsNet, fusion: &FusionNet, cfg: &PipelineConfig) -> Result<Vec<Detection>> {
    let proposals = propose(dms, image, cfg)?;
    refine(fusion, image, &proposals, cfg)
}

/// Wall-clock split of one image, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub proposal_ms: f64,
    pub classification_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub proposals: usize,
    pub timing: StageTiming,
    /// Set when the image failed; its detections are then empty.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub images: Vec<ImageResult>,
    pub wall_ms: f64,
}

impl BatchReport {
    pub fn failures(&self) -> usize {
        self.images.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn mean_ms_per_image(&self) -> f64 {
        if self.images.is_empty() {
            return 0.0;
        }
        self.images.iter().map(|r| r.timing.total_ms).sum::<f64>() / self.images.len() as f64
    }

    pub fn detections(&self) -> BTreeMap<String, Vec<Detection>> {
        self.images.iter().map(|r| (r.image_id.clone(), r.detections.clone())).collect()
    }
}

fn detect_timed(image: &Tensor, dms: &DmsNet, fusion: &FusionNet, cfg: &PipelineConfig) -> Result<(Vec<Detection>, usize, StageTiming)> {
    let t0 = Instant::now();
    let proposals = propose(dms, image, cfg)?;
    let t1 = Instant::now();
    let detections = refine(fusion, image, &proposals, cfg)?;
    let t2 = Instant::now();
    let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
    Ok((
        detections,
        proposals.len(),
        StageTiming {
            proposal_ms: ms(t0, t1),
            classification_ms: ms(t1, t2),
            total_ms: ms(t0, t2),
        },
    ))
}

/// Runs [`detect`] on every image, in parallel on at most `threads` workers
/// (0 means the global pool). `load` fetches image `i`; a failure in one image
/// is recorded in its result and does not stop the batch.
pub fn detect_batch<F>(
    image_ids: &[String],
    load: F,
    dms: &DmsNet,
    fusion: &FusionNet,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<BatchReport>
where
    F: Fn(usize) -> Result<Tensor> + Sync,
{
    use rayon::prelude::*;
    cfg.validate()?;
    let start = Instant::now();
    let run = || -> Vec<ImageResult> {
        image_ids
            .par_iter()
            .enumerate()
            .map(|(i, id)| {
                let outcome = load(i).and_then(|img| detect_timed(&img, dms, fusion, cfg));
                match outcome {
                    Ok((detections, proposals, timing)) => ImageResult {
                        image_id: id.clone(),
                        detections,
                        proposals,
                        timing,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{id}: {e}");
                        ImageResult {
                            image_id: id.clone(),
                            detections: Vec::new(),
                            proposals: 0,
                            timing: StageTiming::default(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect()
    };
    let images = if threads == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))?
            .install(run)
    };
    Ok(BatchReport {
        images,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes one line per detection: `image_id class_name score x_min y_min x_max y_max`.
pub fn write_detections<W: Write>(
    w: &mut W,
    detections: &BTreeMap<String, Vec<Detection>>,
    class_names: &[String],
) -> std::io::Result<()> {
    for (id, dets) in detections {
        for d in dets {
            let name = class_names.get(d.class_id.wrapping_sub(1)).map_or("UNKNOWN", String::as_str);
            writeln!(
                w,
                "{id} {name} {:.2} {:.2} {:.2} {:.2} {:.2}",
                d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
            )?;
        }
    }
    Ok(())
}

/// Parses the detection format written by [`write_detections`]. Blank lines
/// and `#` comments are skipped; class names resolve against `class_names`.
pub fn read_detections(path: &Path, class_names: &[String]) -> Result<BTreeMap<String, Vec<Detection>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let src = path.display().to_string();
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: src.clone(),
            line: i + 1,
            message,
        };
        let f: Vec<&str> = text.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class_id = class_names
            .iter()
            .position(|n| n == f[1])
            .map(|p| p + 1)
            .ok_or_else(|| err(format!("unknown class `{}`", f[1])))?;
        let mut v = [0f64; 5];
        for (slot, s) in v.iter_mut().zip(&f[2..]) {
            *slot = s.parse().map_err(|_| err(format!("`{s}` is not a number")))?;
        }
        let bbox = BBox::new(v[1], v[2], v[3], v[4]).map_err(|e| err(e.to_string()))?;
        out.entry(f[0].to_string()).or_default().push(Detection {
            bbox,
            class_id,
            score: v[0],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        crate::data::DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn detection_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let d = Detection {
            bbox: BBox::new(1.25, 2.0, 30.5, 40.75).unwrap(),
            class_id: 3,
            score: 0.87,
        };
        let map: BTreeMap<String, Vec<Detection>> = [("img1".to_string(), vec![d])].into();
        let mut buf = Vec::new();
        write_detections(&mut buf, &map, &names()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("img1 {} 0.87 1.25 2.00 30.50 40.75\n", names()[2]));
        std::fs::write(&p, text).unwrap();
        assert_eq!(read_detections(&p, &names()).unwrap(), map);
    }

    #[test]
    fn malformed_detection_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        std::fs::write(&p, "img1 NOPE 0.5 0 0 1 1\n").unwrap();
        assert!(matches!(read_detections(&p, &names()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig { proposal_top_k: 0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { nms_iou: 1.0, ..Default::default() }.validate().is_err());
        assert!(PipelineConfig { branches: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn empty_batch() {
        let dms = DmsNet::build(1).unwrap();
        let fusion = FusionNet::build(1).unwrap();
        let r = detect_batch(&[], |_| unreachable!(), &dms, &fusion, &PipelineConfig::default(), 1).unwrap();
        assert!(r.images.is_empty());
    }

    #[test]
    fn load_failure_is_not_fatal() {
        let dms = DmsNet::build(1).unwrap();
        let fusion = FusionNet::build(1).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = detect_batch(
            &ids,
            |i| if i == 0 { Err(Error::invalid("broken")) } else { Tensor::full(crate::tensor::Shape::new(1, 3, 48, 48), 0.5) },
            &dms,
            &fusion,
            &PipelineConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(r.failures(), 1);
        assert!(r.images[1].error.is_none());
    }
}
