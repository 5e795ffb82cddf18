//! Layer stacks with explicit forward and backward passes.
//!
//! A [`NetworkSpec`] is a declarative description (input shape, ordered
//! layers, seed); [`Network::new`] infers every intermediate shape and draws
//! the parameters. Softmax and sigmoid output heads are fused with the
//! cross-entropy loss: the gradient handed to [`Network::backward`] is taken
//! with respect to the head's logits.

pub mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::kernels::{self, MatRef};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    None,
    ReLU,
    Sigmoid,
    Softmax,
}

impl Activation {
    fn is_fused_head(self) -> bool {
        matches!(self, Activation::Sigmoid | Activation::Softmax)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel_size: usize,
        activation: Activation,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    fn activation(&self) -> Activation {
        match *self {
            LayerSpec::Conv2d { activation, .. } | LayerSpec::Dense { activation, .. } => {
                activation
            }
            _ => Activation::None,
        }
    }

    /// Output shape for a single sample of shape `input`.
    fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let dims = input.dims();
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel_size,
                ..
            } => {
                if filters == 0 || kernel_size == 0 {
                    return Err(Error::Shape(
                        "conv filters and kernel size must be >= 1".into(),
                    ));
                }
                if kernel_size % 2 == 0 {
                    return Err(Error::Shape(format!(
                        "same-padded conv needs an odd kernel, got {kernel_size}"
                    )));
                }
                let &[_, h, w] = dims else {
                    return Err(Error::Shape(format!(
                        "conv expects [C, H, W] input, got {dims:?}"
                    )));
                };
                Shape::new(vec![filters, h, w])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window != 2 || stride != 2 {
                    return Err(Error::Shape(format!(
                        "only 2x2 stride-2 pooling is supported, got window {window} stride {stride}"
                    )));
                }
                let &[c, h, w] = dims else {
                    return Err(Error::Shape(format!(
                        "pool expects [C, H, W] input, got {dims:?}"
                    )));
                };
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "pooling hits odd spatial extent {h}x{w}"
                    )));
                }
                Shape::new(vec![c, h / 2, w / 2])
            }
            LayerSpec::Flatten => Shape::new(vec![input.numel()]),
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return Err(Error::Shape("dense units must be >= 1".into()));
                }
                if input.rank() != 1 {
                    return Err(Error::Shape(format!(
                        "dense expects flat input, got {dims:?} (add a Flatten layer)"
                    )));
                }
                Shape::new(vec![units])
            }
        }
    }

    /// `(weight dims, bias len, fan_in)` for parameterised layers.
    fn param_layout(&self, input: &Shape) -> Option<(Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                filters,
                kernel_size: k,
                ..
            } => {
                let c = input.dims()[0];
                Some((vec![filters, c, k, k], filters, c * k * k))
            }
            LayerSpec::Dense { units, .. } => {
                let fan_in = input.dims()[0];
                Some((vec![fan_in, units], units, fan_in))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Shape of one sample, without the batch axis.
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Conv(32, 5x5, ReLU) -> Pool -> Conv(64, 5x5, ReLU) -> Pool -> Flatten
    /// -> Dense(hidden, ReLU) -> Dense(outputs) with a sigmoid head for a
    /// single output and softmax otherwise.
    pub fn paper_cnn(
        input_shape: Shape,
        hidden_units: usize,
        output_units: usize,
        seed: u64,
    ) -> Result<Self> {
        let &[_, h, w] = input_shape.dims() else {
            return Err(Error::Shape(format!(
                "CNN input must be [C, H, W], got {:?}",
                input_shape.dims()
            )));
        };
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "CNN input spatial extent {h}x{w} must be divisible by 4"
            )));
        }
        let spec = NetworkSpec {
            input_shape,
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 32,
                    kernel_size: 5,
                    activation: Activation::ReLU,
                },
                LayerSpec::MaxPool2d {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv2d {
                    filters: 64,
                    kernel_size: 5,
                    activation: Activation::ReLU,
                },
                LayerSpec::MaxPool2d {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: hidden_units,
                    activation: Activation::ReLU,
                },
                LayerSpec::Dense {
                    units: output_units,
                    activation: head_for(output_units),
                },
            ],
            seed,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    /// Dense(hidden, ReLU) -> Dense(1, Sigmoid) over a flat input.
    pub fn mlp(input_dim: usize, hidden_units: usize, seed: u64) -> Result<Self> {
        let spec = NetworkSpec {
            input_shape: Shape::new(vec![input_dim])?,
            layers: vec![
                LayerSpec::Dense {
                    units: hidden_units,
                    activation: Activation::ReLU,
                },
                LayerSpec::Dense {
                    units: 1,
                    activation: Activation::Sigmoid,
                },
            ],
            seed,
        };
        spec.infer_shapes()?;
        Ok(spec)
    }

    /// Per-sample shapes: the input followed by each layer's output.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        if self.layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        let last = self.layers.len() - 1;
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.activation() == Activation::Softmax && i != last {
                return Err(Error::Shape(
                    "softmax is only supported as the output head".into(),
                ));
            }
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        if shapes[last + 1].rank() != 1 {
            return Err(Error::Shape("network output must be flat".into()));
        }
        Ok(shapes)
    }

    pub fn output_units(&self) -> Result<usize> {
        Ok(self.infer_shapes()?.last().expect("non-empty").numel())
    }
}

fn head_for(output_units: usize) -> Activation {
    if output_units > 1 {
        Activation::Softmax
    } else {
        Activation::Sigmoid
    }
}

pub fn build_paper_cnn(
    input_shape: Shape,
    hidden_units: usize,
    output_units: usize,
    seed: u64,
) -> Result<Network> {
    Network::new(NetworkSpec::paper_cnn(
        input_shape,
        hidden_units,
        output_units,
        seed,
    )?)
}

pub fn build_mlp(input_dim: usize, hidden_units: usize, seed: u64) -> Result<Network> {
    Network::new(NetworkSpec::mlp(input_dim, hidden_units, seed)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Tensor,
    grad_weights: Vec<f64>,
    grad_bias: Vec<f64>,
}

impl Params {
    pub fn grad_weights(&self) -> &[f64] {
        &self.grad_weights
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    batch: usize,
    /// `acts[0]` is the input batch, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    argmax: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    params: Vec<Option<Params>>,
    cache: Option<ForwardCache>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Network {
    /// Instantiates `spec` with He-uniform weights `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`
    /// drawn in layer order from the spec seed, and zero biases.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.infer_shapes()?;
        let mut rng = rng::rng(spec.seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for (layer, input) in spec.layers.iter().zip(&shapes) {
            params.push(match layer.param_layout(input) {
                Some((wdims, blen, fan_in)) => {
                    let limit = (6.0 / fan_in as f64).sqrt();
                    let n: usize = wdims.iter().product();
                    let w: Vec<f64> = (0..n)
                        .map(|_| rng::uniform(&mut rng, -limit, limit))
                        .collect();
                    Some(Params {
                        weights: Tensor::from_vec(&wdims, w)?,
                        bias: Tensor::zeros(Shape::new(vec![blen])?),
                        grad_weights: vec![0.0; n],
                        grad_bias: vec![0.0; blen],
                    })
                }
                None => None,
            });
        }
        Ok(Network {
            spec,
            shapes,
            params,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &Shape {
        &self.spec.input_shape
    }

    pub fn output_units(&self) -> usize {
        self.shapes.last().expect("non-empty").numel()
    }

    pub fn head(&self) -> Activation {
        self.spec.layers.last().expect("non-empty").activation()
    }

    /// Per-layer parameters; `None` for parameter-free layers.
    pub fn layer_params(&self) -> &[Option<Params>] {
        &self.params
    }

    fn flat_params(&self) -> impl Iterator<Item = &Params> {
        self.params.iter().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.flat_params()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }

    fn locate(&self, mut index: usize) -> Option<(usize, bool, usize)> {
        for (li, p) in self.params.iter().enumerate() {
            let Some(p) = p else { continue };
            if index < p.weights.len() {
                return Some((li, true, index));
            }
            index -= p.weights.len();
            if index < p.bias.len() {
                return Some((li, false, index));
            }
            index -= p.bias.len();
        }
        None
    }

    /// Parameter at a flat index (layer order, weights before bias).
    pub fn param(&self, index: usize) -> Option<f64> {
        let (li, is_w, i) = self.locate(index)?;
        let p = self.params[li].as_ref()?;
        Some(if is_w {
            p.weights.data()[i]
        } else {
            p.bias.data()[i]
        })
    }

    pub fn grad(&self, index: usize) -> Option<f64> {
        let (li, is_w, i) = self.locate(index)?;
        let p = self.params[li].as_ref()?;
        Some(if is_w {
            p.grad_weights[i]
        } else {
            p.grad_bias[i]
        })
    }

    pub fn set_param(&mut self, index: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("set_param"));
        }
        let (li, is_w, i) = self
            .locate(index)
            .ok_or(Error::State("parameter index out of range"))?;
        let p = self.params[li].as_mut().expect("located");
        let buf = if is_w {
            p.weights.data_mut()
        } else {
            p.bias.data_mut()
        };
        buf[i] = value;
        Ok(())
    }

    /// All parameters in checkpoint order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.flat_params() {
            out.extend_from_slice(p.weights.data());
            out.extend_from_slice(p.bias.data());
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::dim(
                "set_parameters",
                &[values.len()],
                &[self.param_count()],
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("set_parameters"));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            let w = p.weights.data_mut();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = p.bias.data_mut();
            b.copy_from_slice(&values[offset..offset + b.len()]);
            offset += b.len();
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.grad_weights.fill(0.0);
            p.grad_bias.fill(0.0);
        }
    }

    /// `param -= lr * grad` for every parameter, then clears gradients.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        for p in self.params.iter_mut().flatten() {
            for (w, g) in p.weights.data_mut().iter_mut().zip(&p.grad_weights) {
                *w -= learning_rate * g;
            }
            for (b, g) in p.bias.data_mut().iter_mut().zip(&p.grad_bias) {
                *b -= learning_rate * g;
            }
            if !p
                .weights
                .data()
                .iter()
                .chain(p.bias.data())
                .all(|v| v.is_finite())
            {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        self.zero_grad();
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let dims = batch.dims();
        if dims.len() != self.spec.input_shape.rank() + 1
            || dims[1..] != *self.spec.input_shape.dims()
        {
            return Err(Error::dim(
                "network input",
                dims,
                self.spec.input_shape.dims(),
            ));
        }
        Ok(dims[0])
    }

    /// Inference pass; outputs are `[N, output_units]` probabilities for
    /// sigmoid/softmax heads.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let acts = self.run(n, batch.data().to_vec(), None)?;
        Tensor::from_vec(&[n, self.output_units()], acts)
    }

    /// Forward pass that retains the intermediates needed by
    /// [`Network::backward`].
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(batch)?;
        let mut cache = ForwardCache {
            batch: n,
            acts: Vec::with_capacity(self.spec.layers.len() + 1),
            argmax: Vec::new(),
        };
        self.cache = None;
        let out = self.run(n, batch.data().to_vec(), Some(&mut cache))?;
        let result = Tensor::from_vec(&[n, self.output_units()], out.clone())?;
        cache.acts.push(out);
        self.cache = Some(cache);
        Ok(result)
    }

    /// The piecewise-linear branch taken for `batch`: every ReLU on/off flag
    /// followed by every pooling argmax. Parameter vectors with equal
    /// patterns lie in the same differentiable piece of the loss.
    pub fn activation_pattern(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let n = self.check_batch(batch)?;
        let mut cache = ForwardCache {
            batch: n,
            acts: Vec::new(),
            argmax: Vec::new(),
        };
        let out = self.run(n, batch.data().to_vec(), Some(&mut cache))?;
        cache.acts.push(out);
        let mut pattern = Vec::new();
        for (li, layer) in self.spec.layers.iter().enumerate() {
            if layer.activation() == Activation::ReLU {
                pattern.extend(cache.acts[li + 1].iter().map(|&v| usize::from(v > 0.0)));
            }
        }
        pattern.extend(cache.argmax.into_iter().flatten());
        Ok(pattern)
    }

    fn run(
        &self,
        n: usize,
        mut x: Vec<f64>,
        mut cache: Option<&mut ForwardCache>,
    ) -> Result<Vec<f64>> {
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let in_shape = &self.shapes[li];
            let out_shape = &self.shapes[li + 1];
            let mut y = match *layer {
                LayerSpec::Conv2d { kernel_size: k, .. } => {
                    let p = self.params[li].as_ref().expect("conv params");
                    let &[c, h, w] = in_shape.dims() else {
                        unreachable!()
                    };
                    let f = out_shape.dims()[0];
                    conv_forward(&x, n, (c, h, w), f, k, p)
                }
                LayerSpec::MaxPool2d { .. } => {
                    let &[c, h, w] = in_shape.dims() else {
                        unreachable!()
                    };
                    let mut out = vec![0.0; n * out_shape.numel()];
                    let mut argmax = vec![0; out.len()];
                    kernels::maxpool2x2(&x, n * c, h, w, &mut out, &mut argmax);
                    if let Some(cache) = cache.as_deref_mut() {
                        cache.argmax.push(argmax);
                    }
                    out
                }
                LayerSpec::Flatten => x.clone(),
                LayerSpec::Dense { units, .. } => {
                    let p = self.params[li].as_ref().expect("dense params");
                    let fan_in = in_shape.numel();
                    let mut out = Vec::with_capacity(n * units);
                    for _ in 0..n {
                        out.extend_from_slice(p.bias.data());
                    }
                    kernels::gemm(
                        MatRef::new(&x, n, fan_in),
                        MatRef::new(p.weights.data(), fan_in, units),
                        1.0,
                        &mut out,
                    );
                    out
                }
            };
            match layer.activation() {
                Activation::None => {}
                Activation::ReLU => y.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Sigmoid => y.iter_mut().for_each(|v| *v = kernels::sigmoid(*v)),
                Activation::Softmax => kernels::softmax_rows_in_place(&mut y, out_shape.numel()),
            }
            if !y.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("network forward"));
            }
            if let Some(cache) = cache.as_deref_mut() {
                cache.acts.push(x);
            }
            x = y;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients for the batch seen by the preceding
    /// [`Network::forward_train`]. For a sigmoid/softmax head `loss_grad` is
    /// the gradient with respect to the head logits; otherwise with respect
    /// to the outputs. The cache is consumed.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<()> {
        let cache = self.cache.take().ok_or(Error::State(
            "backward called without a preceding forward_train",
        ))?;
        let n = cache.batch;
        let expected = [n, self.output_units()];
        if loss_grad.dims() != expected {
            return Err(Error::dim(
                "backward loss gradient",
                loss_grad.dims(),
                &expected,
            ));
        }
        let last = self.spec.layers.len() - 1;
        let mut grad = loss_grad.data().to_vec();
        let mut pool_slot = cache.argmax.len();
        for li in (0..=last).rev() {
            let layer = self.spec.layers[li].clone();
            let input = &cache.acts[li];
            let output = &cache.acts[li + 1];
            let act = layer.activation();
            if !(li == last && act.is_fused_head()) {
                match act {
                    Activation::None => {}
                    Activation::ReLU => {
                        for (g, &o) in grad.iter_mut().zip(output) {
                            if o <= 0.0 {
                                *g = 0.0;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for (g, &o) in grad.iter_mut().zip(output) {
                            *g *= o * (1.0 - o);
                        }
                    }
                    Activation::Softmax => unreachable!("softmax only as fused head"),
                }
            }
            let need_input_grad = li > 0;
            let in_shape = self.shapes[li].clone();
            grad = match layer {
                LayerSpec::Conv2d { kernel_size: k, .. } => {
                    let &[c, h, w] = in_shape.dims() else {
                        unreachable!()
                    };
                    let f = self.shapes[li + 1].dims()[0];
                    let p = self.params[li].as_mut().expect("conv params");
                    conv_backward(input, &grad, n, (c, h, w), f, k, p, need_input_grad)
                }
                LayerSpec::MaxPool2d { .. } => {
                    pool_slot -= 1;
                    let mut dx = vec![0.0; input.len()];
                    for (&idx, &g) in cache.argmax[pool_slot].iter().zip(&grad) {
                        dx[idx] += g;
                    }
                    dx
                }
                LayerSpec::Flatten => grad,
                LayerSpec::Dense { units, .. } => {
                    let fan_in = in_shape.numel();
                    let p = self.params[li].as_mut().expect("dense params");
                    kernels::gemm(
                        MatRef::new(input, n, fan_in).t(),
                        MatRef::new(&grad, n, units),
                        1.0,
                        &mut p.grad_weights,
                    );
                    for row in grad.chunks_exact(units) {
                        for (b, g) in p.grad_bias.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    if need_input_grad {
                        let mut dx = vec![0.0; n * fan_in];
                        kernels::gemm(
                            MatRef::new(&grad, n, units),
                            MatRef::new(p.weights.data(), fan_in, units).t(),
                            0.0,
                            &mut dx,
                        );
                        dx
                    } else {
                        Vec::new()
                    }
                }
            };
        }
        if !self.flat_params().all(|p| {
            p.grad_weights
                .iter()
                .chain(&p.grad_bias)
                .all(|v| v.is_finite())
        }) {
            return Err(Error::NonFinite("network backward"));
        }
        Ok(())
    }
}

fn conv_forward(
    x: &[f64],
    n: usize,
    (c, h, w): (usize, usize, usize),
    f: usize,
    k: usize,
    p: &Params,
) -> Vec<f64> {
    let hw = h * w;
    let ck = c * k * k;
    let mut cols = vec![0.0; ck * hw];
    let mut out = vec![0.0; n * f * hw];
    for (img, dst) in x.chunks_exact(c * hw).zip(out.chunks_exact_mut(f * hw)) {
        kernels::im2col_same(img, (c, h, w), (k, k), &mut cols);
        for (row, &b) in dst.chunks_exact_mut(hw).zip(p.bias.data()) {
            row.fill(b);
        }
        kernels::gemm(
            MatRef::new(p.weights.data(), f, ck),
            MatRef::new(&cols, ck, hw),
            1.0,
            dst,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    grad: &[f64],
    n: usize,
    (c, h, w): (usize, usize, usize),
    f: usize,
    k: usize,
    p: &mut Params,
    need_input_grad: bool,
) -> Vec<f64> {
    let hw = h * w;
    let ck = c * k * k;
    let mut cols = vec![0.0; ck * hw];
    let mut dcols = if need_input_grad {
        vec![0.0; ck * hw]
    } else {
        Vec::new()
    };
    let mut dx = if need_input_grad {
        vec![0.0; n * c * hw]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let img = &x[s * c * hw..(s + 1) * c * hw];
        let g = &grad[s * f * hw..(s + 1) * f * hw];
        kernels::im2col_same(img, (c, h, w), (k, k), &mut cols);
        kernels::gemm(
            MatRef::new(g, f, hw),
            MatRef::new(&cols, ck, hw).t(),
            1.0,
            &mut p.grad_weights,
        );
        for (b, row) in p.grad_bias.iter_mut().zip(g.chunks_exact(hw)) {
            *b += row.iter().sum::<f64>();
        }
        if need_input_grad {
            kernels::gemm(
                MatRef::new(p.weights.data(), f, ck).t(),
                MatRef::new(g, f, hw),
                0.0,
                &mut dcols,
            );
            kernels::col2im_same(
                &dcols,
                (c, h, w),
                (k, k),
                &mut dx[s * c * hw..(s + 1) * c * hw],
            );
        }
    }
    dx
}
