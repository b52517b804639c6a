//! Dense multi-scale proposal network.
//!
//! A shared convolutional trunk feeds two fully-convolutional heads with
//! 20 px and 40 px receptive fields. Running both heads over an image pyramid
//! gives ten detection scales; every map cell scores one square window.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image_ops::{adjust, gaussian_blur, rescale};
use crate::error::{Error, Result};
use crate::geometry::{cell_to_box, iou, rf_chain, sort_by_score, BBox, RFDescriptor, ScoredBox};
use crate::nn::{
    masked_cross_entropy, sgd_step, ConvSpec, Gradients, InitScheme, Network, NetworkBuilder,
    NodeId, PoolSpec, SGDConfig, TrainingState,
};
use crate::tensor::Tensor;

pub const MODEL_KIND: &str = "dmsnet";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    B1,
    B2,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::B1, Branch::B2];

    pub fn index(self) -> usize {
        match self {
            Branch::B1 => 0,
            Branch::B2 => 1,
        }
    }

    /// 1 or 2.
    pub fn number(self) -> u8 {
        self.index() as u8 + 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Branch::B1),
            2 => Ok(Branch::B2),
            _ => Err(Error::invalid(format!("branch must be 1 or 2, got {n}"))),
        }
    }

    /// Branch trained at a 1-based iteration: odd iterations train branch 1.
    pub fn for_iteration(iteration: u64) -> Self {
        if iteration % 2 == 1 {
            Branch::B1
        } else {
            Branch::B2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub scales: Vec<f64>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scales: (0..5).map(|i| 0.6f64.powi(i)).collect(),
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        match self.scales.first() {
            Some(&s) if s == 1.0 => {}
            _ => return Err(Error::invalid("pyramid must start at scale 1.0")),
        }
        if self.scales.windows(2).any(|w| w[1] >= w[0]) || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("pyramid scales must be positive and strictly decreasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OHEMConfig {
    pub top_n: usize,
}

impl Default for OHEMConfig {
    fn default() -> Self {
        Self { top_n: 128 }
    }
}

/// IoU cut-offs that turn a window into a positive, negative or ignored cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    /// Strictly above: positive.
    pub positive: f64,
    /// Strictly below: negative.
    pub negative: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            positive: 0.7,
            negative: 0.3,
        }
    }
}

/// The proposal network together with the node handles it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct DmsNet {
    net: Network,
    logits: [NodeId; 2],
    probs: [NodeId; 2],
    rf: [RFDescriptor; 2],
}

impl DmsNet {
    pub fn build(seed: u64) -> Result<Self> {
        Self::build_with(InitScheme::default(), seed)
    }

    pub fn build_with(init: InitScheme, seed: u64) -> Result<Self> {
        let mut b = NetworkBuilder::new();
        let x = b.input("data", 3);
        let c1 = b.conv_relu("conv1", x, ConvSpec::new(60, 9, 9));
        let p = b.pool("b1_pool", c1, PoolSpec::max(6, 2));
        let h = b.conv_relu("b1_conv", p, ConvSpec::new(300, 2, 2).with_dilation(3));
        let s = b.conv("b1_score", h, ConvSpec::new(2, 1, 1));
        b.softmax("b1_prob", s);
        let p = b.pool("pool1", c1, PoolSpec::max(2, 2));
        let c2 = b.conv_relu("conv2", p, ConvSpec::new(120, 5, 5));
        let p = b.pool("b2_pool", c2, PoolSpec::max(4, 2));
        let h = b.conv_relu("b2_conv", p, ConvSpec::new(300, 3, 3).with_dilation(2));
        let s = b.conv("b2_score", h, ConvSpec::new(2, 1, 1));
        b.softmax("b2_prob", s);
        Self::from_network(b.build(init, seed)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        let logits = [net.require("b1_score")?, net.require("b2_score")?];
        let probs = [net.require("b1_prob")?, net.require("b2_prob")?];
        let rf = [
            rf_chain(&net.receptive_chain(probs[0])?)?,
            rf_chain(&net.receptive_chain(probs[1])?)?,
        ];
        Ok(Self {
            net,
            logits,
            probs,
            rf,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn rf(&self, branch: Branch) -> RFDescriptor {
        self.rf[branch.index()]
    }

    pub fn prob_node(&self, branch: Branch) -> NodeId {
        self.probs[branch.index()]
    }

    pub fn logits_node(&self, branch: Branch) -> NodeId {
        self.logits[branch.index()]
    }

    /// Map size of `branch` for an `h x w` input, or `None` if the input is too small.
    pub fn map_size(&self, branch: Branch, h: usize, w: usize) -> Option<(usize, usize)> {
        self.net.spatial_sizes(h, w)[self.probs[branch.index()].0]
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
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: Tensor,
    pub scale: f64,
    pub level: usize,
}

/// Smallest image side the proposal network accepts (the branch-1 window).
pub const MIN_LEVEL_SIDE: usize = 20;

/// Rescaled copies of `image`; levels whose shorter side drops below the
/// branch-1 window are skipped.
pub fn build_pyramid(image: &Tensor, config: &PyramidConfig) -> Result<Vec<PyramidLevel>> {
    config.validate()?;
    let s = image.shape();
    if s.height.min(s.width) < MIN_LEVEL_SIDE {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {MIN_LEVEL_SIDE} px proposal window",
            s.width, s.height
        )));
    }
    let mut levels = Vec::with_capacity(config.scales.len());
    for (level, &scale) in config.scales.iter().enumerate() {
        let img = rescale(image, scale)?;
        let ls = img.shape();
        if ls.height.min(ls.width) < MIN_LEVEL_SIDE {
            log::warn!("skipping pyramid level {level} (scale {scale}): {}x{}", ls.width, ls.height);
            continue;
        }
        levels.push(PyramidLevel {
            image: img,
            scale,
            level,
        });
    }
    Ok(levels)
}

/// Sign probabilities of one head at one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub branch: Branch,
    pub rf: RFDescriptor,
    pub pyramid_scale: f64,
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid: Vec<f32>,
}

impl ProbabilityMap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.grid[row * self.cols + col]
    }

    pub fn cell_box(&self, row: usize, col: usize) -> BBox {
        cell_to_box(row, col, &self.rf, self.pyramid_scale)
    }
}

fn sign_channel(probs: &Tensor) -> (usize, usize, Vec<f32>) {
    let s = probs.shape();
    (s.height, s.width, probs.data()[s.plane()..2 * s.plane()].to_vec())
}

/// Runs the requested heads over every level that fits them.
pub fn forward_dense(dms: &DmsNet, pyramid: &[PyramidLevel], branches: &[Branch]) -> Result<Vec<ProbabilityMap>> {
    let mut maps = Vec::new();
    for lvl in pyramid {
        let s = lvl.image.shape();
        let active: Vec<Branch> = branches
            .iter()
            .copied()
            .filter(|&b| dms.map_size(b, s.height, s.width).is_some())
            .collect();
        if active.is_empty() {
            continue;
        }
        let outputs: Vec<NodeId> = active.iter().map(|&b| dms.prob_node(b)).collect();
        let mut acts = dms.net.forward(&lvl.image, &outputs)?;
        for (&b, &node) in active.iter().zip(&outputs) {
            let probs = acts.take(node).expect("requested output");
            let (rows, cols, grid) = sign_channel(&probs);
            maps.push(ProbabilityMap {
                branch: b,
                rf: dms.rf(b),
                pyramid_scale: lvl.scale,
                level: lvl.level,
                rows,
                cols,
                grid,
            });
        }
    }
    Ok(maps)
}

/// Cells scoring at least `threshold` become boxes clipped to the image,
/// pooled over all maps, sorted by score and cut to `top_k`.
pub fn decode_proposals(
    maps: &[ProbabilityMap],
    image_width: usize,
    image_height: usize,
    threshold: f64,
    top_k: usize,
) -> Vec<ScoredBox> {
    let mut boxes = Vec::new();
    for m in maps {
        for row in 0..m.rows {
            for col in 0..m.cols {
                let p = m.at(row, col) as f64;
                if p < threshold {
                    continue;
                }
                if let Some(b) = m.cell_box(row, col).clip(image_width as f64, image_height as f64) {
                    boxes.push(ScoredBox::new(b, p, None));
                }
            }
        }
    }
    sort_by_score(&mut boxes);
    boxes.truncate(top_k);
    boxes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

impl Label {
    /// Softmax target class, or `None` when ignored.
    pub fn target(self) -> Option<usize> {
        match self {
            Label::Positive => Some(1),
            Label::Negative => Some(0),
            Label::Ignore => None,
        }
    }
}

/// Training labels for one head at one pyramid level; cell-aligned with its [`ProbabilityMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMap {
    pub branch: Branch,
    pub rf: RFDescriptor,
    pub pyramid_scale: f64,
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<Label>,
}

/// Size and scale of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGeometry {
    pub height: usize,
    pub width: usize,
    pub scale: f64,
    pub level: usize,
}

impl From<&PyramidLevel> for LevelGeometry {
    fn from(l: &PyramidLevel) -> Self {
        let s = l.image.shape();
        Self {
            height: s.height,
            width: s.width,
            scale: l.scale,
            level: l.level,
        }
    }
}

/// Labels one head at one level by the best IoU of each cell's window against the annotations.
pub fn make_gt_map(
    annotations: &[BBox],
    level: &LevelGeometry,
    dms: &DmsNet,
    branch: Branch,
    thresholds: &LabelThresholds,
) -> Option<GroundTruthMap> {
    let (rows, cols) = dms.map_size(branch, level.height, level.width)?;
    let rf = dms.rf(branch);
    let mut labels = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let window = cell_to_box(row, col, &rf, level.scale);
            let best = annotations
                .iter()
                .map(|a| iou(&window, a))
                .fold(0.0, f64::max);
            labels.push(if best > thresholds.positive {
                Label::Positive
            } else if best < thresholds.negative {
                Label::Negative
            } else {
                Label::Ignore
            });
        }
    }
    Some(GroundTruthMap {
        branch,
        rf,
        pyramid_scale: level.scale,
        level: level.level,
        rows,
        cols,
        labels,
    })
}

/// Ground-truth maps for every (level, head) pair that produces a map.
pub fn make_gt_maps(
    annotations: &[BBox],
    levels: &[LevelGeometry],
    dms: &DmsNet,
    branches: &[Branch],
    thresholds: &LabelThresholds,
) -> Vec<GroundTruthMap> {
    levels
        .iter()
        .flat_map(|l| {
            branches
                .iter()
                .filter_map(move |&b| make_gt_map(annotations, l, dms, b, thresholds))
        })
        .collect()
}

/// Indices of the `top_n` largest losses among non-ignored positions (`None`),
/// ordered by loss descending then index ascending.
pub fn ohem_select(losses: &[Option<f32>], top_n: usize) -> Vec<usize> {
    let mut kept: Vec<(usize, f32)> = losses
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(top_n);
    kept.into_iter().map(|(i, _)| i).collect()
}

/// Photometric augmentation; geometry is untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Chance of applying each transform.
    pub probability: f64,
    pub contrast: (f32, f32),
    pub blur_sigma: (f64, f64),
    /// Maximum additive brightness change on the `[0, 1]` scale.
    pub brightness: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            contrast: (0.7, 1.3),
            blur_sigma: (0.0, 1.5),
            brightness: 30.0 / 255.0,
        }
    }
}

/// Random contrast, blur and brightness, each applied with `cfg.probability`.
pub fn augment<R: Rng>(image: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let draw = |rng: &mut R| rng.random::<f64>() < cfg.probability;
    let (do_contrast, do_blur, do_bright) = (draw(rng), draw(rng), draw(rng));
    let contrast = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
    let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
    let brightness = rng.random_range(-cfg.brightness..=cfg.brightness);
    let mut out = image.clone();
    if do_contrast {
        out = adjust(&out, contrast, 0.0);
    }
    if do_blur {
        out = gaussian_blur(&out, sigma);
    }
    if do_bright {
        out = adjust(&out, 1.0, brightness);
    }
    out
}

/// [`augment`] with a fresh generator; annotations pass through unchanged.
pub fn augment_seeded(image: &Tensor, annotations: &[BBox], cfg: &AugmentConfig, seed: u64) -> (Tensor, Vec<BBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (augment(image, cfg, &mut rng), annotations.to_vec())
}

/// One training image with its sign boxes.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalTrainConfig {
    pub iterations: u64,
    pub sgd: SGDConfig,
    pub ohem: OHEMConfig,
    pub pyramid: PyramidConfig,
    pub labels: LabelThresholds,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for ProposalTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            sgd: SGDConfig::default(),
            ohem: OHEMConfig::default(),
            pyramid: PyramidConfig::default(),
            labels: LabelThresholds::default(),
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

/// One row of the training loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub active_branch: u8,
    /// Mean cross-entropy over the OHEM-selected positions (0 if none were available).
    pub mean_selected_loss: f64,
}

/// Sampler and schedule position, restorable from a checkpoint sidecar.
pub fn training_state(iteration: u64, rng: &ChaCha8Rng) -> TrainingState {
    TrainingState {
        iteration,
        rng_seed: rng.get_seed(),
        rng_word_pos: rng.get_word_pos(),
    }
}

pub fn restore_rng(state: &TrainingState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
    rng.set_word_pos(state.rng_word_pos);
    rng
}

/// One forward/backward pass of the active head over a pyramid, with OHEM.
///
/// Returns the parameter gradients (only the trunk and the active head
/// receive any) and the mean selected loss.
pub fn proposal_gradients(
    dms: &DmsNet,
    pyramid: &[PyramidLevel],
    boxes: &[BBox],
    branch: Branch,
    ohem: &OHEMConfig,
    thresholds: &LabelThresholds,
) -> Result<(Option<Gradients<f32>>, f64)> {
    let net = dms.network();
    let prob = dms.prob_node(branch);
    let logits = dms.logits_node(branch);
    let mut per_level = Vec::new();
    let mut pooled: Vec<Option<f32>> = Vec::new();
    for lvl in pyramid {
        let geo = LevelGeometry::from(lvl);
        let Some(gt) = make_gt_map(boxes, &geo, dms, branch, thresholds) else {
            continue;
        };
        let acts = net.forward(&lvl.image, &[prob])?;
        let targets: Vec<Option<usize>> = gt.labels.iter().map(|l| l.target()).collect();
        let ce = masked_cross_entropy(acts.get(prob).expect("requested output"), &targets)?;
        let offset = pooled.len();
        pooled.extend(ce.losses.iter().copied());
        per_level.push((acts, ce, offset));
    }
    let selected = ohem_select(&pooled, ohem.top_n);
    if selected.is_empty() {
        return Ok((None, 0.0));
    }
    let n = selected.len();
    let mean_loss = selected
        .iter()
        .map(|&i| pooled[i].expect("selected positions are kept") as f64)
        .sum::<f64>()
        / n as f64;
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite proposal loss {mean_loss}")));
    }
    let mut chosen = vec![false; pooled.len()];
    for &i in &selected {
        chosen[i] = true;
    }
    let scale = 1.0 / n as f32;
    let mut total: Option<Gradients<f32>> = None;
    for (acts, ce, offset) in per_level {
        let g = &ce.grad_logits;
        let s = g.shape();
        let plane = s.plane();
        let count = ce.losses.len();
        if !chosen[offset..offset + count].iter().any(|&c| c) {
            continue;
        }
        let mut seed = vec![0f32; g.len()];
        for q in 0..count {
            if chosen[offset + q] {
                for c in 0..s.channels {
                    seed[c * plane + q] = g.data()[c * plane + q] * scale;
                }
            }
        }
        let grads = net.backward(&acts, vec![(logits, Tensor::from_vec(s, seed)?)])?;
        match total.as_mut() {
            Some(t) => t.accumulate(grads)?,
            None => total = Some(grads),
        }
    }
    Ok((total, mean_loss))
}

/// Trains the proposal network for iterations `start + 1 ..= cfg.iterations`.
///
/// Odd iterations train head 1, even iterations head 2; the idle head gets
/// no gradient and is left bit-identical. `hook` sees the network, the state
/// needed to resume, and the loss record after every iteration.
pub fn train_proposal<F>(
    dms: &mut DmsNet,
    data: &[TrainSample],
    cfg: &ProposalTrainConfig,
    resume: Option<&TrainingState>,
    mut hook: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&DmsNet, &TrainingState, &LossRecord) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.sgd.validate()?;
    cfg.pyramid.validate()?;
    let (mut rng, start) = match resume {
        Some(st) => (restore_rng(st), st.iteration),
        None => (ChaCha8Rng::seed_from_u64(cfg.seed), 0),
    };
    let mut log = Vec::new();
    for iteration in start + 1..=cfg.iterations {
        let branch = Branch::for_iteration(iteration);
        let sample = &data[rng.random_range(0..data.len())];
        let image = match &cfg.augment {
            Some(a) => augment(&sample.image, a, &mut rng),
            None => sample.image.clone(),
        };
        let pyramid = build_pyramid(&image, &cfg.pyramid)?;
        let (grads, loss) = proposal_gradients(dms, &pyramid, &sample.boxes, branch, &cfg.ohem, &cfg.labels)?;
        if let Some(g) = grads {
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at iteration {iteration}")));
            }
            sgd_step(dms.network_mut(), &g, &cfg.sgd, iteration)?;
            if !dms.network().all_finite() {
                return Err(Error::Numeric(format!("non-finite weights at iteration {iteration}")));
            }
        }
        let record = LossRecord {
            iteration,
            active_branch: branch.number(),
            mean_selected_loss: loss,
        };
        hook(dms, &training_state(iteration, &rng), &record)?;
        log.push(record);
    }
    Ok(log)
}
