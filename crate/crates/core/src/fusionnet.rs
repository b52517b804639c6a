//! Crop classifier: stacked convolutions whose last three stages are fused,
//! an Inception block, global average pooling and an 11-way softmax.
//!
//! Class 0 is background; 1..=10 are sign classes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image_ops::crop_resize;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::{
    masked_cross_entropy, sgd_step, ConvSpec, Gradients, InitScheme, Network, NetworkBuilder,
    NodeId, PoolSpec, SGDConfig,
};
use crate::tensor::{Shape, Tensor};

pub const MODEL_KIND: &str = "fusionnet";
pub const PATCH_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 11;
pub const BACKGROUND: usize = 0;
/// Crops above this IoU with a sign are labelled with its class.
pub const POSITIVE_IOU: f64 = 0.6;
/// Crops below this IoU with every sign are background.
pub const NEGATIVE_IOU: f64 = 0.5;
/// Patches per forward pass during inference.
const INFERENCE_BATCH: usize = 32;

/// The classifier together with its output handles.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    net: Network,
    logits: NodeId,
    probs: NodeId,
}

impl FusionNet {
    pub fn build(seed: u64) -> Result<Self> {
        Self::build_with(InitScheme::default(), seed)
    }

    pub fn build_with(init: InitScheme, seed: u64) -> Result<Self> {
        let mut b = NetworkBuilder::new();
        let x = b.input("data", 3);
        let c = b.conv_relu("conv1", x, ConvSpec::new(100, 5, 5).with_pad(2));
        let p = b.pool("pool1", c, PoolSpec::max(2, 2));
        let c = b.conv_relu("conv2", p, ConvSpec::new(150, 3, 3).with_pad(1));
        let mut p = b.pool("pool2", c, PoolSpec::max(2, 2));
        let mut fused = Vec::new();
        for i in 1..=3 {
            let c = b.conv_relu(&format!("conv3_{i}"), p, ConvSpec::new(250, 3, 3).with_pad(1));
            p = b.pool(&format!("pool3_{i}"), c, PoolSpec::max(2, 2));
            fused.push(b.adaptive_max_pool(&format!("fuse3_{i}"), p, 2, 2));
        }
        let f = b.concat("fusion", &fused);
        let a = b.conv_relu("inc_1x1", f, ConvSpec::new(64, 1, 1));
        let r = b.conv_relu("inc_3x3_reduce", f, ConvSpec::new(32, 1, 1));
        let m = b.conv_relu("inc_3x3", r, ConvSpec::new(32, 3, 3).with_pad(1));
        let r = b.conv_relu("inc_5x5_reduce", f, ConvSpec::new(16, 1, 1));
        let n = b.conv_relu("inc_5x5", r, ConvSpec::new(32, 5, 5).with_pad(2));
        let q = b.pool("inc_pool", f, PoolSpec::max(3, 1).with_pad(1));
        let q = b.conv_relu("inc_pool_proj", q, ConvSpec::new(96, 1, 1));
        let inc = b.concat("inception", &[a, m, n, q]);
        let g = b.global_avg_pool("gap", inc);
        let fc = b.fc("fc", g, NUM_CLASSES);
        b.softmax("prob", fc);
        Self::from_network(b.build(init, seed)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        Ok(Self {
            logits: net.require("fc")?,
            probs: net.require("prob")?,
            net,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    pub fn prob_node(&self) -> NodeId {
        self.probs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.net.save(path, MODEL_KIND)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, manifest) = Network::load(path)?;
        if manifest.kind != MODEL_KIND {
            return Err(Error::Format(format!(
                "{} holds a `{}` model, expected `{MODEL_KIND}`",
                path.display(),
                manifest.kind
            )));
        }
        Self::from_network(net)
    }

    /// Class distributions for `(1, 3, 64, 64)` patches, one vector per patch.
    pub fn predict(&self, patches: &[&Tensor]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFERENCE_BATCH) {
            let batch = stack_patches(chunk)?;
            let acts = self.net.forward(&batch, &[self.probs])?;
            let probs = acts.get(self.probs).expect("requested output");
            out.extend(probs.data().chunks_exact(NUM_CLASSES).map(<[f32]>::to_vec));
        }
        Ok(out)
    }
}

fn stack_patches(patches: &[&Tensor]) -> Result<Tensor> {
    let per = 3 * PATCH_SIZE * PATCH_SIZE;
    let mut data = Vec::with_capacity(per * patches.len());
    for p in patches {
        if p.shape() != Shape::new(1, 3, PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::shape(format!("patch must be 1x3x64x64, got {}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(Shape::new(patches.len(), 3, PATCH_SIZE, PATCH_SIZE), data)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(dist: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class_id: usize,
    pub score: f32,
    pub distribution: Vec<f32>,
}

impl Classification {
    fn from_distribution(distribution: Vec<f32>) -> Self {
        let class_id = argmax(&distribution);
        Self {
            class_id,
            score: distribution[class_id],
            distribution,
        }
    }
}

/// Clips `bbox` to the image and resamples it to a 64x64 patch.
pub fn extract_patch(image: &Tensor, bbox: &BBox) -> Result<Tensor> {
    let s = image.shape();
    let clipped = bbox
        .clip(s.width as f64, s.height as f64)
        .ok_or_else(|| Error::invalid(format!("box {bbox:?} does not overlap the {}x{} image", s.width, s.height)))?;
    crop_resize(image, &clipped, PATCH_SIZE)
}

pub fn classify_crop(fusion: &FusionNet, image: &Tensor, bbox: &BBox) -> Result<Classification> {
    let patch = extract_patch(image, bbox)?;
    let dist = fusion.predict(&[&patch])?.pop().expect("one patch in, one out");
    Ok(Classification::from_distribution(dist))
}

/// Classifies many boxes of one image in batches. Boxes outside the image
/// yield per-box errors; a failing forward pass fails the whole call.
pub fn classify_crops(fusion: &FusionNet, image: &Tensor, boxes: &[BBox]) -> Result<Vec<Result<Classification>>> {
    let patches: Vec<Result<Tensor>> = boxes.iter().map(|b| extract_patch(image, b)).collect();
    let ok: Vec<&Tensor> = patches.iter().filter_map(|p| p.as_ref().ok()).collect();
    let mut dists = fusion.predict(&ok)?.into_iter();
    Ok(patches
        .into_iter()
        .map(|p| p.map(|_| Classification::from_distribution(dists.next().expect("one distribution per patch"))))
        .collect())
}

/// A labelled 64x64 training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub patch: Tensor,
    /// 0 is background.
    pub label: usize,
    pub source_box: BBox,
}

/// An image with its `(box, class)` annotations, used to draw crops from.
#[derive(Debug, Clone)]
pub struct CropSource {
    pub image: Tensor,
    pub signs: Vec<(BBox, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropCounts {
    pub positives_per_sign: usize,
    /// Background crops drawn close to each sign (partial overlaps).
    pub near_negatives_per_sign: usize,
    /// Background crops drawn anywhere in the image.
    pub negatives_per_image: usize,
    /// Smallest crop side in pixels.
    pub min_side: f64,
    pub max_attempts: usize,
}

impl Default for CropCounts {
    fn default() -> Self {
        Self {
            positives_per_sign: 4,
            near_negatives_per_sign: 2,
            negatives_per_image: 6,
            min_side: 12.0,
            max_attempts: 60,
        }
    }
}

/// Label for a crop by its best IoU with the signs; `None` in the discard band.
pub fn label_crop(bbox: &BBox, signs: &[(BBox, usize)]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (b, class) in signs {
        let v = iou(bbox, b);
        if best.is_none_or(|(bv, _)| v > bv) {
            best = Some((v, *class));
        }
    }
    match best {
        Some((v, class)) if v > POSITIVE_IOU => Some(class),
        Some((v, _)) if v >= NEGATIVE_IOU => None,
        _ => Some(BACKGROUND),
    }
}

fn clipped_square(cx: f64, cy: f64, side: f64, w: f64, h: f64) -> Option<BBox> {
    let half = side / 2.0;
    BBox::new(cx - half, cy - half, cx + half, cy + half).ok()?.clip(w, h)
}

/// Random square crops: positives jittered around each sign, background both
/// near signs and anywhere in the image. Boxes are clipped to the image before labelling.
pub fn sample_training_crops(source: &CropSource, counts: &CropCounts, seed: u64) -> Result<Vec<CropSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = source.image.shape();
    let (w, h) = (s.width as f64, s.height as f64);
    let mut boxes: Vec<(BBox, usize)> = Vec::new();
    for (sign, _) in &source.signs {
        let base = (sign.width() * sign.height()).sqrt();
        let (cx, cy) = ((sign.x_min + sign.x_max) / 2.0, (sign.y_min + sign.y_max) / 2.0);
        let (mut pos, mut neg) = (0, 0);
        for _ in 0..counts.max_attempts {
            if pos >= counts.positives_per_sign && neg >= counts.near_negatives_per_sign {
                break;
            }
            // Alternate tight jitter (mostly positives) and loose jitter (mostly partial overlaps).
            let spread = if pos < counts.positives_per_sign { 0.15 } else { 0.6 };
            let side = (base * (rng.random_range(-2.0 * spread..=2.0 * spread) as f64).exp()).max(counts.min_side);
            let dx = rng.random_range(-spread..=spread) * base;
            let dy = rng.random_range(-spread..=spread) * base;
            let Some(b) = clipped_square(cx + dx, cy + dy, side, w, h) else {
                continue;
            };
            match label_crop(&b, &source.signs) {
                Some(BACKGROUND) if neg < counts.near_negatives_per_sign => {
                    neg += 1;
                    boxes.push((b, BACKGROUND));
                }
                Some(c) if c != BACKGROUND && pos < counts.positives_per_sign => {
                    pos += 1;
                    boxes.push((b, c));
                }
                _ => {}
            }
        }
    }
    let max_side = w.min(h);
    let mut neg = 0;
    for _ in 0..counts.max_attempts {
        if neg >= counts.negatives_per_image || max_side <= counts.min_side {
            break;
        }
        let side = (counts.min_side.ln() + rng.random::<f64>() * (max_side / counts.min_side).ln()).exp();
        let x = rng.random::<f64>() * (w - side);
        let y = rng.random::<f64>() * (h - side);
        let Ok(b) = BBox::new(x, y, x + side, y + side) else {
            continue;
        };
        if label_crop(&b, &source.signs) == Some(BACKGROUND) {
            neg += 1;
            boxes.push((b, BACKGROUND));
        }
    }
    boxes
        .into_iter()
        .map(|(b, label)| {
            Ok(CropSample {
                patch: crop_resize(&source.image, &b, PATCH_SIZE)?,
                label,
                source_box: b,
            })
        })
        .collect()
}

/// Crops from every source, seeded per source so the result is order independent.
pub fn sample_crop_pool(sources: &[CropSource], counts: &CropCounts, seed: u64) -> Result<Vec<CropSample>> {
    use rayon::prelude::*;
    let per: Vec<Result<Vec<CropSample>>> = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_training_crops(s, counts, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect();
    let mut out = Vec::new();
    for p in per {
        out.extend(p?);
    }
    Ok(out)
}

/// The samples the network currently gets wrong.
pub fn mine_misclassified(fusion: &FusionNet, samples: Vec<CropSample>) -> Result<Vec<CropSample>> {
    let patches: Vec<&Tensor> = samples.iter().map(|s| &s.patch).collect();
    let dists = fusion.predict(&patches)?;
    let wrong: Vec<bool> = samples.iter().zip(&dists).map(|(s, d)| argmax(d) != s.label).collect();
    Ok(samples.into_iter().zip(wrong).filter_map(|(s, w)| w.then_some(s)).collect())
}

/// Draws a fresh crop sample from the sources and keeps the misclassified crops.
pub fn bootstrap_mine(fusion: &FusionNet, sources: &[CropSource], counts: &CropCounts, seed: u64) -> Result<Vec<CropSample>> {
    mine_misclassified(fusion, sample_crop_pool(sources, counts, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub sgd: SGDConfig,
    /// Fraction of the iteration budget after which one bootstrap round runs; `None` disables it.
    pub bootstrap_at: Option<f64>,
    /// Training images drawn for the bootstrap round; `None` mines all of them.
    pub bootstrap_images: Option<usize>,
    pub crops: CropCounts,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100_000,
            batch_size: 128,
            sgd: SGDConfig {
                lr_schedule: vec![(20_000, 0.2)],
                ..SGDConfig::default()
            },
            bootstrap_at: Some(0.5),
            bootstrap_images: None,
            crops: CropCounts::default(),
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.bootstrap_images == Some(0) {
            return Err(Error::invalid("bootstrap_images must be at least 1"));
        }
        if let Some(f) = self.bootstrap_at {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("bootstrap_at must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// Iteration after which bootstrapping runs.
    pub fn bootstrap_iteration(&self) -> Option<u64> {
        self.bootstrap_at.map(|f| (f * self.iterations as f64).round() as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub batch_accuracy: f64,
    pub pool_size: usize,
}

/// Mean cross-entropy gradient of one minibatch.
pub fn batch_gradients(fusion: &FusionNet, batch: &[&CropSample]) -> Result<(Gradients<f32>, f64, f64)> {
    let patches: Vec<&Tensor> = batch.iter().map(|s| &s.patch).collect();
    let input = stack_patches(&patches)?;
    let net = fusion.network();
    let acts = net.forward(&input, &[fusion.probs])?;
    let probs = acts.get(fusion.probs).expect("requested output");
    let targets: Vec<Option<usize>> = batch.iter().map(|s| Some(s.label)).collect();
    let ce = masked_cross_entropy(probs, &targets)?;
    let n = batch.len() as f64;
    let loss = ce.kept().map(|(_, l)| l as f64).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite classifier loss {loss}")));
    }
    let correct = probs
        .data()
        .chunks_exact(NUM_CLASSES)
        .zip(batch)
        .filter(|(d, s)| argmax(d) == s.label)
        .count();
    let seed = ce.grad_logits.mul_scalar(1.0 / n as f32);
    let grads = net.backward(&acts, vec![(fusion.logits, seed)])?;
    Ok((grads, loss, correct as f64 / n))
}

/// At most `limit` sources, drawn without replacement and kept in input order.
fn bootstrap_subset(sources: &[CropSource], limit: Option<usize>, seed: u64) -> Vec<CropSource> {
    match limit {
        Some(k) if k < sources.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, sources.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| sources[i].clone()).collect()
        }
        _ => sources.to_vec(),
    }
}

/// Minibatch SGD over the crop pool with one bootstrap round.
///
/// Minibatches are drawn with replacement. At the bootstrap iteration a fresh
/// crop sample (new seed) is drawn from `sources` and the misclassified crops
/// are appended to the pool. Returns the loss log and the number of mined crops.
pub fn train_classifier<F>(
    fusion: &mut FusionNet,
    mut pool: Vec<CropSample>,
    sources: &[CropSource],
    cfg: &ClassifierTrainConfig,
    mut hook: F,
) -> Result<(Vec<ClassifierLossRecord>, usize)>
where
    F: FnMut(&FusionNet, &ClassifierLossRecord) -> Result<()>,
{
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bootstrap = cfg.bootstrap_iteration().filter(|_| !sources.is_empty());
    let mut mined = 0;
    let mut log = Vec::new();
    for iteration in 1..=cfg.iterations {
        let batch: Vec<&CropSample> = (0..cfg.batch_size).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let (grads, loss, batch_accuracy) = batch_gradients(fusion, &batch)?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at iteration {iteration}")));
        }
        sgd_step(fusion.network_mut(), &grads, &cfg.sgd, iteration)?;
        if !fusion.network().all_finite() {
            return Err(Error::Numeric(format!("non-finite weights at iteration {iteration}")));
        }
        if bootstrap == Some(iteration) {
            let mine_seed = cfg.seed.wrapping_add(0xB007);
            let subset = bootstrap_subset(sources, cfg.bootstrap_images, mine_seed);
            let extra = bootstrap_mine(fusion, &subset, &cfg.crops, mine_seed)?;
            mined = extra.len();
            log::info!("bootstrap round mined {mined} misclassified crops");
            pool.extend(extra);
        }
        let record = ClassifierLossRecord {
            iteration,
            loss,
            batch_accuracy,
            pool_size: pool.len(),
        };
        hook(fusion, &record)?;
        log.push(record);
    }
    Ok((log, mined))
}

const CACHE_MAGIC: &[u8; 4] = b"TSRC";
const CACHE_VERSION: u32 = 1;

/// Writes crop samples as a binary pack: magic, version, count, then per
/// sample the label (u32), the source box (4 x f64) and the patch tensor.
pub fn write_crop_cache(path: &Path, samples: &[CropSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.len() as u64).to_le_bytes()).map_err(io)?;
    for s in samples {
        w.write_all(&(s.label as u32).to_le_bytes()).map_err(io)?;
        for v in [s.source_box.x_min, s.source_box.y_min, s.source_box.x_max, s.source_box.y_max] {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        s.patch.write_snapshot(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_crop_cache(path: &Path) -> Result<Vec<CropSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!("{} is not a crop cache", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported crop cache version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let count = u64::from_le_bytes(u64b);
    let mut out = Vec::new();
    for _ in 0..count {
        r.read_exact(&mut u32b).map_err(io)?;
        let label = u32::from_le_bytes(u32b) as usize;
        if label >= NUM_CLASSES {
            return Err(Error::Format(format!("crop label {label} out of range")));
        }
        let mut c = [0f64; 4];
        for v in &mut c {
            r.read_exact(&mut u64b).map_err(io)?;
            *v = f64::from_le_bytes(u64b);
        }
        let patch = Tensor::read_snapshot(&mut r)?;
        if patch.shape() != Shape::new(1, 3, PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Format(format!("crop patch has shape {}", patch.shape())));
        }
        out.push(CropSample {
            patch,
            label,
            source_box: BBox::new(c[0], c[1], c[2], c[3])?,
        });
    }
    Ok(out)
}
