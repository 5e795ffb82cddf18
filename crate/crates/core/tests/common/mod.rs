//! Central finite-difference oracle shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use rand::seq::index;
use sens_core::nn::{Activation, LayerSpec, Network, NetworkSpec};
use sens_core::rng::{self, Normal};
use sens_core::training::cross_entropy_loss;
use sens_core::{Shape, Tensor};

pub const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose +-EPS probe crossed a ReLU or pooling switch; the
    /// loss is not differentiable across those, so they are resampled.
    pub kinks: usize,
    pub max_rel: f64,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            checked: self.checked + other.checked,
            kinks: self.kinks + other.kinks,
            max_rel: self.max_rel.max(other.max_rel),
        }
    }
}

/// Below this magnitude a central difference is dominated by rounding in
/// the loss (about `|L| * 1e-16 / EPS`, i.e. 1e-11), so the error is
/// measured against the floor instead of the gradient itself.
pub const NOISE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, NOISE_FLOOR)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(NOISE_FLOOR)
}

fn loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    cross_entropy_loss(&net.forward(x).unwrap(), y).unwrap().0
}

/// Random `[n, ..sample]` inputs and labels for `net`.
pub fn batch_for(net: &Network, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::rng(seed);
    let mut normal = Normal::new(0.0, 1.0);
    let dims = net.input_shape().with_batch(n).unwrap().dims().to_vec();
    let x: Vec<f64> = (0..dims.iter().product::<usize>())
        .map(|_| normal.sample(&mut r))
        .collect();
    let classes = net.output_units().max(2);
    let y = (0..n)
        .map(|_| (rng::unit(&mut r) * classes as f64) as usize)
        .collect();
    (Tensor::from_vec(&dims, x).unwrap(), y)
}

/// Compares backward against central differences on `samples` distinct
/// parameters (all of them if the network is smaller).
pub fn check(net: &mut Network, x: &Tensor, y: &[usize], samples: usize, seed: u64) -> GradCheck {
    net.zero_grad();
    let probs = net.forward_train(x).unwrap();
    let (_, g) = cross_entropy_loss(&probs, y).unwrap();
    net.backward(&g).unwrap();
    let analytic: Vec<f64> = (0..net.param_count())
        .map(|i| net.grad(i).unwrap())
        .collect();
    let pattern = net.activation_pattern(x).unwrap();

    let total = net.param_count();
    let mut order = index::sample(&mut rng::rng(seed), total, total)
        .into_vec()
        .into_iter();
    let mut out = GradCheck::default();
    while out.checked < samples.min(total) {
        let Some(i) = order.next() else { break };
        let w = net.param(i).unwrap();
        net.set_param(i, w + EPS).unwrap();
        let (up, up_pat) = (loss(net, x, y), net.activation_pattern(x).unwrap());
        net.set_param(i, w - EPS).unwrap();
        let (down, down_pat) = (loss(net, x, y), net.activation_pattern(x).unwrap());
        net.set_param(i, w).unwrap();
        if up_pat != pattern || down_pat != pattern {
            out.kinks += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * EPS);
        out.max_rel = out.max_rel.max(relative_error(analytic[i], numeric));
        out.checked += 1;
    }
    out
}

pub fn dense(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { units, activation }
}

pub fn conv(filters: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel_size: 3,
        activation,
    }
}

pub const POOL: LayerSpec = LayerSpec::MaxPool2d {
    window: 2,
    stride: 2,
};

pub fn net(input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Network {
    Network::new(NetworkSpec {
        input_shape: Shape::new(input).unwrap(),
        layers,
        seed,
    })
    .unwrap()
}

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Runs `check` on a fresh network per seed.
pub fn over_seeds(make: impl Fn(u64) -> Network, batch: usize, samples: usize) -> GradCheck {
    SEEDS
        .iter()
        .map(|&s| {
            let mut n = make(s);
            let (x, y) = batch_for(&n, batch, s ^ 0xDA7A);
            check(&mut n, &x, &y, samples, s)
        })
        .fold(GradCheck::default(), GradCheck::merge)
}

/// One network per layer kind plus the tiny 8x8 paper CNN.
pub fn layer_kind_suite() -> Vec<(&'static str, GradCheck, f64)> {
    use Activation::*;
    vec![
        (
            "dense+sigmoid+softmax-ce",
            over_seeds(
                |s| net(&[5], vec![dense(24, Sigmoid), dense(6, Softmax)], s),
                4,
                200,
            ),
            1e-6,
        ),
        (
            "dense+relu+sigmoid-ce",
            over_seeds(
                |s| net(&[6], vec![dense(30, ReLU), dense(1, Sigmoid)], s),
                4,
                200,
            ),
            1e-6,
        ),
        (
            "conv+relu+maxpool",
            over_seeds(
                |s| {
                    net(
                        &[2, 6, 6],
                        vec![conv(6, ReLU), POOL, LayerSpec::Flatten, dense(3, Softmax)],
                        s,
                    )
                },
                3,
                200,
            ),
            1e-4,
        ),
        (
            "conv+sigmoid+linear-conv",
            over_seeds(
                |s| {
                    net(
                        &[2, 4, 4],
                        vec![
                            conv(6, Sigmoid),
                            conv(4, None),
                            POOL,
                            LayerSpec::Flatten,
                            dense(1, Sigmoid),
                        ],
                        s,
                    )
                },
                3,
                200,
            ),
            1e-4,
        ),
        (
            "paper-cnn-8x8",
            over_seeds(
                |s| sens_core::build_paper_cnn(Shape::new([1, 8, 8]).unwrap(), 8, 10, s).unwrap(),
                2,
                200,
            ),
            1e-4,
        ),
    ]
}
