//! Empirical checks on the proposal network that need real forward passes or training steps.

use tsr::dmsnet::{train_proposal, Branch, DmsNet, OHEMConfig, ProposalTrainConfig, TrainSample};
use tsr::geometry::{BBox, RFDescriptor};
use tsr::nn::{Network, NodeId, Param, SGDConfig};
use tsr::tensor::{Shape, Tensor};

/// The proposal network cast to f64 with every weight set to 1/fan-in and
/// zero biases. On a positive input every ReLU is open and every max pool
/// passes a positive bump, so influence sets are exactly the analytic windows.
pub fn positive_network() -> Network<f64> {
    let dms = DmsNet::build(0).unwrap();
    let mut net = dms.network().cast::<f64>();
    for i in 0..net.nodes().len() {
        if let Some(p) = net.param_mut(NodeId(i)) {
            let s = p.weight.shape();
            let fan_in = (s.numel() / s.batch) as f64;
            p.weight = Tensor::full(s, 1.0 / fan_in).unwrap();
            if let Some(b) = p.bias.as_mut() {
                *b = Tensor::zeros(b.shape()).unwrap();
            }
        }
    }
    net
}

/// For each input column (or row), the output columns (or rows) of `node` that change
/// when that whole line of the input is bumped.
pub fn influence(net: &Network<f64>, node: NodeId, side: usize, along_rows: bool) -> Vec<Vec<usize>> {
    let base_in = Tensor::full(Shape::new(1, 3, side, side), 1.0).unwrap();
    let base = net.forward(&base_in, &[node]).unwrap().get(node).unwrap().clone();
    let s = base.shape();
    (0..side)
        .map(|i| {
            let mut x = base_in.clone();
            for c in 0..3 {
                for j in 0..side {
                    let (y, xx) = if along_rows { (i, j) } else { (j, i) };
                    x.set(0, c, y, xx, 2.0);
                }
            }
            let out = net.forward(&x, &[node]).unwrap().get(node).unwrap().clone();
            let len = if along_rows { s.height } else { s.width };
            (0..len)
                .filter(|&k| {
                    (0..s.channels).any(|c| {
                        let (y, xx) = if along_rows { (k, 0) } else { (0, k) };
                        out.at(0, c, y, xx) != base.at(0, c, y, xx)
                    })
                })
                .collect()
        })
        .collect()
}

/// Input indices that touch output `cell`.
pub fn window_of(hits: &[Vec<usize>], cell: usize) -> Vec<usize> {
    (0..hits.len()).filter(|&i| hits[i].contains(&cell)).collect()
}

/// Window, stride and offset measured on a `side`×`side` input, or `None` if the
/// influence sets are not contiguous, not equal-sized, or differ between rows and columns.
pub fn measure_rf(branch: Branch, side: usize) -> Option<RFDescriptor> {
    let dms = DmsNet::build(0).unwrap();
    let net = positive_network();
    let node = dms.logits_node(branch);
    let mut found = Vec::new();
    for along_rows in [false, true] {
        let hits = influence(&net, node, side, along_rows);
        let cells = hits.iter().flatten().max().map_or(0, |m| m + 1);
        if cells < 2 {
            return None;
        }
        let windows: Vec<Vec<usize>> = (0..cells).map(|c| window_of(&hits, c)).collect();
        let contiguous = windows.iter().all(|w| !w.is_empty() && w.windows(2).all(|p| p[1] == p[0] + 1));
        let window = windows[0].len();
        let stride = windows[1][0] - windows[0][0];
        let regular = windows
            .iter()
            .enumerate()
            .all(|(c, w)| w.len() == window && w[0] == windows[0][0] + c * stride);
        if !(contiguous && regular) {
            return None;
        }
        found.push(RFDescriptor { window, stride, offset: windows[0][0] as i64 });
    }
    (found[0] == found[1]).then_some(found[0])
}

fn params_with_prefix(net: &Network, prefix: &str) -> Vec<Param<f32>> {
    net.nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.name.starts_with(prefix))
        .filter_map(|(i, _)| net.param(NodeId(i)).cloned())
        .collect()
}

fn toy_sample() -> TrainSample {
    let mut image = Tensor::gaussian_init(Shape::new(1, 3, 64, 64), 0.4, 0.1, 5).unwrap();
    for y in 20..42 {
        for x in 18..40 {
            image.set(0, 0, y, x, 0.95);
        }
    }
    TrainSample { image, boxes: vec![BBox::new(18.0, 20.0, 40.0, 42.0).unwrap()] }
}

#[derive(Debug, Default)]
pub struct FrozenHeadReport {
    pub iterations: u64,
    /// Iterations where the idle head changed at all.
    pub idle_moved: usize,
    /// Iterations where the active head did not change.
    pub active_stuck: usize,
    pub branches: Vec<u8>,
}

impl FrozenHeadReport {
    pub fn passed(&self) -> bool {
        self.idle_moved == 0 && self.active_stuck == 0 && self.branches.iter().enumerate().all(|(i, &b)| b == if i % 2 == 0 { 1 } else { 2 })
    }
}

/// Trains a few alternating iterations with momentum and weight decay and
/// compares both heads' parameters bit for bit after every step.
pub fn frozen_head_check(iterations: u64) -> FrozenHeadReport {
    let mut dms = DmsNet::build(3).unwrap();
    let cfg = ProposalTrainConfig {
        iterations,
        sgd: SGDConfig { learning_rate: 0.01, ..SGDConfig::default() },
        ohem: OHEMConfig { top_n: 16 },
        augment: None,
        seed: 1,
        ..ProposalTrainConfig::default()
    };
    let heads = |d: &DmsNet| (params_with_prefix(d.network(), "b1_"), params_with_prefix(d.network(), "b2_"));
    let mut before = heads(&dms);
    let mut report = FrozenHeadReport { iterations, ..FrozenHeadReport::default() };
    train_proposal(&mut dms, &[toy_sample()], &cfg, None, |d, _, rec| {
        let now = heads(d);
        let (active_same, idle_same) = match Branch::from_number(rec.active_branch).unwrap() {
            Branch::B1 => (now.0 == before.0, now.1 == before.1),
            Branch::B2 => (now.1 == before.1, now.0 == before.0),
        };
        report.idle_moved += !idle_same as usize;
        report.active_stuck += active_same as usize;
        report.branches.push(rec.active_branch);
        before = now;
        Ok(())
    })
    .unwrap();
    report
}
