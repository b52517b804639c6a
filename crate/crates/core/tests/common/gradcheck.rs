//! Central finite-difference checks for every layer type, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tsr::nn::{
    adaptive_max_pool, adaptive_max_pool_backward, concat_channels, conv2d_backward, conv2d_forward,
    fc_backward, fc_forward, fc_weight_shape, global_avg_pool, global_avg_pool_backward,
    masked_cross_entropy, pool_backward, pool_forward, relu, relu_backward, softmax_backward,
    softmax_channels, split_channels, ConvSpec, PoolSpec,
};
use tsr::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that components that are
/// both essentially zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;
pub const SHAPES_PER_LAYER: usize = 20;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values at least 0.01 apart, so a step of 1e-3 never changes an argmax.
fn spaced(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).unwrap()
}

/// Values at least 0.01 away from zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let m = 0.01 + rng.sample::<f64, _>(StandardNormal).abs();
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic` and central differences of `f` around `x`.
fn compare(x: &Tensor<f64>, analytic: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

/// Worst error per layer type over its random shapes.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: &'static str,
    pub shapes: usize,
    pub max_rel_err: f64,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.shapes >= SHAPES_PER_LAYER && self.max_rel_err < TOLERANCE
    }
}

fn run(layer: &'static str, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> f64) -> LayerReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rel_err = (0..SHAPES_PER_LAYER).map(|_| case(&mut rng)).fold(0.0, f64::max);
    LayerReport { layer, shapes: SHAPES_PER_LAYER, max_rel_err }
}

pub fn conv(seed: u64) -> LayerReport {
    run("conv", seed, |rng| {
        let (spec, xs) = loop {
            let k = (rng.random_range(1..=3), rng.random_range(1..=3));
            let spec = ConvSpec {
                out_channels: rng.random_range(1..=3),
                kernel: k,
                stride: rng.random_range(1..=2),
                pad: rng.random_range(0..=2),
                dilation: rng.random_range(1..=3),
                has_bias: rng.random::<bool>(),
            };
            let xs = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(4..=8), rng.random_range(4..=8));
            if spec.output_size(xs.height, xs.width).is_ok() {
                break (spec, xs);
            }
        };
        let x = normal(rng, xs);
        let w = normal(rng, spec.weight_shape(xs.channels));
        let b = spec.has_bias.then(|| normal(rng, spec.bias_shape()));
        let y = conv2d_forward(&x, &spec, &w, b.as_ref()).unwrap();
        let r = normal(rng, y.shape());
        let g = conv2d_backward(&r, &x, &spec, &w, true).unwrap();
        let mut e = compare(&x, g.input.as_ref().unwrap(), |x| dot(&r, &conv2d_forward(x, &spec, &w, b.as_ref()).unwrap()));
        e = e.max(compare(&w, &g.weights, |w| dot(&r, &conv2d_forward(&x, &spec, w, b.as_ref()).unwrap())));
        if let Some(b) = &b {
            e = e.max(compare(b, g.bias.as_ref().unwrap(), |b| dot(&r, &conv2d_forward(&x, &spec, &w, Some(b)).unwrap())));
        }
        e
    })
}

fn pool_case(rng: &mut ChaCha8Rng, spec: PoolSpec) -> f64 {
    let xs = loop {
        let s = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(3..=9), rng.random_range(3..=9));
        if spec.output_size(s.height, s.width).is_ok() {
            break s;
        }
    };
    let x = spaced(rng, xs);
    let (y, arg) = pool_forward(&x, &spec).unwrap();
    let r = normal(rng, y.shape());
    let g = pool_backward(&r, xs, &spec, arg.as_deref()).unwrap();
    compare(&x, &g, |x| dot(&r, &pool_forward(x, &spec).unwrap().0))
}

pub fn max_pool(seed: u64) -> LayerReport {
    run("max_pool", seed, |rng| {
        let k = rng.random_range(1..=4);
        let spec = PoolSpec::max(k, rng.random_range(1..=3)).with_pad(rng.random_range(0..k));
        pool_case(rng, spec)
    })
}

pub fn avg_pool(seed: u64) -> LayerReport {
    run("avg_pool", seed, |rng| {
        let k = rng.random_range(1..=4);
        let spec = PoolSpec::avg(k, rng.random_range(1..=3)).with_pad(rng.random_range(0..k));
        pool_case(rng, spec)
    })
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5))
}

pub fn relu_layer(seed: u64) -> LayerReport {
    run("relu", seed, |rng| {
        let shape = random_shape(rng);
        let x = off_kink(rng, shape);
        let y = relu(&x);
        let r = normal(rng, y.shape());
        let g = relu_backward(&r, &y).unwrap();
        compare(&x, &g, |x| dot(&r, &relu(x)))
    })
}

pub fn fully_connected(seed: u64) -> LayerReport {
    run("fully_connected", seed, |rng| {
        let xs = random_shape(rng);
        let n_out = rng.random_range(1..=5);
        let x = normal(rng, xs);
        let w = normal(rng, fc_weight_shape(xs.channels * xs.plane(), n_out));
        let b = normal(rng, Shape::new(1, n_out, 1, 1));
        let y = fc_forward(&x, &w, Some(&b)).unwrap();
        let r = normal(rng, y.shape());
        let (gx, gw, gb) = fc_backward(&r, &x, &w).unwrap();
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&r, &fc_forward(x, w, Some(b)).unwrap());
        compare(&x, &gx, |x| f(x, &w, &b))
            .max(compare(&w, &gw, |w| f(&x, w, &b)))
            .max(compare(&b, &gb, |b| f(&x, &w, b)))
    })
}

pub fn softmax(seed: u64) -> LayerReport {
    run("softmax", seed, |rng| {
        let mut s = random_shape(rng);
        s.channels = rng.random_range(2..=5);
        let x = normal(rng, s);
        let y = softmax_channels(&x).unwrap();
        let r = normal(rng, s);
        let g = softmax_backward(&r, &y).unwrap();
        compare(&x, &g, |x| dot(&r, &softmax_channels(x).unwrap()))
    })
}

/// Softmax followed by cross-entropy, differentiated with respect to the logits.
pub fn softmax_cross_entropy(seed: u64) -> LayerReport {
    run("softmax_cross_entropy", seed, |rng| {
        let mut s = random_shape(rng);
        s.channels = rng.random_range(2..=5);
        let x = normal(rng, s);
        let targets: Vec<Option<usize>> = (0..s.batch * s.plane())
            .map(|_| (rng.random::<f64>() > 0.2).then(|| rng.random_range(0..s.channels)))
            .collect();
        let loss = |x: &Tensor<f64>| -> f64 {
            let ce = masked_cross_entropy(&softmax_channels(x).unwrap(), &targets).unwrap();
            ce.kept().map(|(_, l)| l).sum()
        };
        let ce = masked_cross_entropy(&softmax_channels(&x).unwrap(), &targets).unwrap();
        compare(&x, &ce.grad_logits, loss)
    })
}

pub fn concat(seed: u64) -> LayerReport {
    run("concat", seed, |rng| {
        let base = random_shape(rng);
        let counts: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(1..=3)).collect();
        let parts: Vec<Tensor<f64>> = counts
            .iter()
            .map(|&c| normal(rng, Shape::new(base.batch, c, base.height, base.width)))
            .collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let y = concat_channels(&refs).unwrap();
        let r = normal(rng, y.shape());
        let grads = split_channels(&r, &counts).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..parts.len() {
            worst = worst.max(compare(&parts[k], &grads[k], |p| {
                let mut refs: Vec<&Tensor<f64>> = parts.iter().collect();
                refs[k] = p;
                dot(&r, &concat_channels(&refs).unwrap())
            }));
        }
        worst
    })
}

pub fn adaptive_max(seed: u64) -> LayerReport {
    run("adaptive_max_pool", seed, |rng| {
        let s = Shape::new(rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=8), rng.random_range(2..=8));
        let (oh, ow) = (rng.random_range(1..=s.height), rng.random_range(1..=s.width));
        let x = spaced(rng, s);
        let (y, arg) = adaptive_max_pool(&x, oh, ow).unwrap();
        let r = normal(rng, y.shape());
        let g = adaptive_max_pool_backward(&r, s, &arg).unwrap();
        compare(&x, &g, |x| dot(&r, &adaptive_max_pool(x, oh, ow).unwrap().0))
    })
}

pub fn global_average(seed: u64) -> LayerReport {
    run("global_avg_pool", seed, |rng| {
        let s = random_shape(rng);
        let x = normal(rng, s);
        let y = global_avg_pool(&x);
        let r = normal(rng, y.shape());
        let g = global_avg_pool_backward(&r, s).unwrap();
        compare(&x, &g, |x| dot(&r, &global_avg_pool(x)))
    })
}

pub fn all_layers(seed: u64) -> Vec<LayerReport> {
    vec![
        conv(seed),
        max_pool(seed + 1),
        avg_pool(seed + 2),
        relu_layer(seed + 3),
        fully_connected(seed + 4),
        softmax(seed + 5),
        softmax_cross_entropy(seed + 6),
        concat(seed + 7),
        adaptive_max(seed + 8),
        global_average(seed + 9),
    ]
}
