//! Differentiable layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a train-mode
//! forward. `infer` is the cache-free evaluation path and takes `&self`, so a
//! quiescent stack can serve inference from several threads at once.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FdnnError, Result};
use crate::tensor::{col2im_add, gemm_nn, gemm_nt, gemm_tn, im2col_into, ConvGeometry, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

// Largest f64 strictly below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

fn normal_tensor(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(mean, std).expect("valid normal parameters");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

fn nchw(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(FdnnError::shape(format!(
            "{what} expects an N×C×H×W tensor, got {:?}",
            x.shape()
        ))),
    }
}

fn missing_cache(what: &str) -> FdnnError {
    FdnnError::State(format!("{what}: backward called without a cached train-mode forward"))
}

fn check_grad_shape(g: &Tensor, expected: &[usize], what: &str) -> Result<()> {
    if g.shape() != expected {
        return Err(FdnnError::shape(format!(
            "{what}: gradient shape {:?} does not match output shape {:?}",
            g.shape(),
            expected
        )));
    }
    Ok(())
}

fn with_bias<T>(weight: (&'static str, T), bias: Option<T>) -> Vec<(&'static str, T)> {
    let mut v = vec![weight];
    v.extend(bias.map(|b| ("bias", b)));
    v
}

/// 2-d cross-correlation. Weight is Co×Ci×kh×kw.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: ConvGeometry,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Vec<f64>,
    in_shape: [usize; 4],
    out_shape: [usize; 4],
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, geom: ConvGeometry) -> Result<Self> {
        match weight.shape()[..] {
            [co, _, kh, kw] if kh == geom.kh && kw == geom.kw && bias.shape() == [co] => {}
            _ => {
                return Err(FdnnError::shape(format!(
                    "conv2d weight {:?} / bias {:?} inconsistent with kernel {}x{}",
                    weight.shape(),
                    bias.shape(),
                    geom.kh,
                    geom.kw
                )))
            }
        }
        Ok(Conv2d {
            weight: Param::new(weight),
            bias: Some(Param::new(bias)),
            geom,
            cache: None,
        })
    }

    pub fn init(ci: usize, co: usize, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let w = normal_tensor(&[co, ci, geom.kh, geom.kw], 0.0, INIT_STD, rng);
        Self::new(w, Tensor::zeros(&[co]), geom).expect("consistent shapes")
    }

    /// Drops the bias, e.g. when a batch norm follows and would cancel it.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> Result<(Tensor, Option<ConvCache>)> {
        let [n, c, h, w] = nchw(x, "conv2d")?;
        let (co, ci) = self.dims();
        if c != ci {
            return Err(FdnnError::shape(format!(
                "conv2d expects {ci} input channels, got input {:?}",
                x.shape()
            )));
        }
        let (ho, wo) = self.geom.output_size(h, w)?;
        let k = ci * self.geom.kh * self.geom.kw;
        let p = ho * wo;
        let mut out = vec![0.0; n * co * p];
        let mut all_cols = if keep_cols { vec![0.0; n * k * p] } else { Vec::new() };
        let mut scratch = vec![0.0; k * p];
        for s in 0..n {
            let cols: &mut [f64] = if keep_cols {
                &mut all_cols[s * k * p..(s + 1) * k * p]
            } else {
                &mut scratch
            };
            im2col_into(
                &x.data()[s * c * h * w..(s + 1) * c * h * w],
                c,
                h,
                w,
                self.geom,
                ho,
                wo,
                cols,
            );
            let dst = &mut out[s * co * p..(s + 1) * co * p];
            for (o, plane) in dst.chunks_exact_mut(p).enumerate() {
                plane.fill(self.bias.as_ref().map_or(0.0, |b| b.value.data()[o]));
            }
            gemm_nn(self.weight.value.data(), cols, dst, co, k, p);
        }
        let out_shape = [n, co, ho, wo];
        let cache = keep_cols.then_some(ConvCache {
            cols: all_cols,
            in_shape: [n, c, h, w],
            out_shape,
        });
        Ok((Tensor::new(out_shape.to_vec(), out)?, cache))
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        check_grad_shape(g, &cache.out_shape, "conv2d")?;
        let [n, c, h, w] = cache.in_shape;
        let [_, co, ho, wo] = cache.out_shape;
        let k = c * self.geom.kh * self.geom.kw;
        let p = ho * wo;
        let mut grad_x = vec![0.0; n * c * h * w];
        let mut gcols = vec![0.0; k * p];
        for s in 0..n {
            let gs = &g.data()[s * co * p..(s + 1) * co * p];
            let cols = &cache.cols[s * k * p..(s + 1) * k * p];
            gemm_nt(gs, cols, self.weight.grad.data_mut(), co, p, k);
            for (o, plane) in gs.chunks_exact(p).enumerate() {
                if let Some(b) = &mut self.bias {
                    b.grad.data_mut()[o] += plane.iter().sum::<f64>();
                }
            }
            gcols.fill(0.0);
            gemm_tn(self.weight.value.data(), gs, &mut gcols, k, co, p);
            col2im_add(
                &gcols,
                c,
                h,
                w,
                self.geom,
                ho,
                wo,
                &mut grad_x[s * c * h * w..(s + 1) * c * h * w],
            );
        }
        Tensor::new(cache.in_shape.to_vec(), grad_x)
    }
}

/// Transposed convolution, the adjoint of [`Conv2d`] with the same weight layout
/// read as Ci×Co×kh×kw.
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: ConvGeometry,
    cache: Option<DeconvCache>,
}

#[derive(Clone, Debug)]
struct DeconvCache {
    input: Tensor,
    out_shape: [usize; 4],
}

impl Deconv2d {
    pub fn new(weight: Tensor, bias: Tensor, geom: ConvGeometry) -> Result<Self> {
        match weight.shape()[..] {
            [_, co, kh, kw] if kh == geom.kh && kw == geom.kw && bias.shape() == [co] => {}
            _ => {
                return Err(FdnnError::shape(format!(
                    "deconv2d weight {:?} / bias {:?} inconsistent with kernel {}x{}",
                    weight.shape(),
                    bias.shape(),
                    geom.kh,
                    geom.kw
                )))
            }
        }
        Ok(Deconv2d {
            weight: Param::new(weight),
            bias: Some(Param::new(bias)),
            geom,
            cache: None,
        })
    }

    pub fn init(ci: usize, co: usize, geom: ConvGeometry, rng: &mut impl Rng) -> Self {
        let w = normal_tensor(&[ci, co, geom.kh, geom.kw], 0.0, INIT_STD, rng);
        Self::new(w, Tensor::zeros(&[co]), geom).expect("consistent shapes")
    }

    /// Drops the bias, e.g. when a batch norm follows and would cancel it.
    pub fn without_bias(mut self) -> Self {
        self.bias = None;
        self
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s[0], s[1])
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = nchw(x, "deconv2d")?;
        let (ci, co) = self.dims();
        if c != ci {
            return Err(FdnnError::shape(format!(
                "deconv2d expects {ci} input channels, got input {:?}",
                x.shape()
            )));
        }
        let (ho, wo) = self.geom.transposed_size(h, w)?;
        let k = co * self.geom.kh * self.geom.kw;
        let hw = h * w;
        let mut out = vec![0.0; n * co * ho * wo];
        let mut cols = vec![0.0; k * hw];
        for s in 0..n {
            cols.fill(0.0);
            gemm_tn(
                self.weight.value.data(),
                &x.data()[s * c * hw..(s + 1) * c * hw],
                &mut cols,
                k,
                ci,
                hw,
            );
            let dst = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
            for (o, plane) in dst.chunks_exact_mut(ho * wo).enumerate() {
                plane.fill(self.bias.as_ref().map_or(0.0, |b| b.value.data()[o]));
            }
            col2im_add(&cols, co, ho, wo, self.geom, h, w, dst);
        }
        Tensor::new(vec![n, co, ho, wo], out)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("deconv2d"))?;
        check_grad_shape(g, &cache.out_shape, "deconv2d")?;
        let [n, ci, h, w] = nchw(&cache.input, "deconv2d")?;
        let [_, co, ho, wo] = cache.out_shape;
        let k = co * self.geom.kh * self.geom.kw;
        let hw = h * w;
        let mut grad_x = vec![0.0; n * ci * hw];
        let mut gcols = vec![0.0; k * hw];
        for s in 0..n {
            let gs = &g.data()[s * co * ho * wo..(s + 1) * co * ho * wo];
            im2col_into(gs, co, ho, wo, self.geom, h, w, &mut gcols);
            gemm_nn(
                self.weight.value.data(),
                &gcols,
                &mut grad_x[s * ci * hw..(s + 1) * ci * hw],
                ci,
                k,
                hw,
            );
            let xs = &cache.input.data()[s * ci * hw..(s + 1) * ci * hw];
            gemm_nt(xs, &gcols, self.weight.grad.data_mut(), ci, hw, k);
            for (o, plane) in gs.chunks_exact(ho * wo).enumerate() {
                if let Some(b) = &mut self.bias {
                    b.grad.data_mut()[o] += plane.iter().sum::<f64>();
                }
            }
        }
        Tensor::new(vec![n, ci, h, w], grad_x)
    }
}

/// y = x·Wᵀ + b with W of shape G×F.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match weight.shape()[..] {
            [g, _] if bias.shape() == [g] => {}
            _ => {
                return Err(FdnnError::shape(format!(
                    "linear weight {:?} / bias {:?} inconsistent",
                    weight.shape(),
                    bias.shape()
                )))
            }
        }
        Ok(Linear {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        })
    }

    pub fn init(f: usize, g: usize, rng: &mut impl Rng) -> Self {
        let w = normal_tensor(&[g, f], 0.0, INIT_STD, rng);
        Self::new(w, Tensor::zeros(&[g])).expect("consistent shapes")
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (g, f) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let n = match x.shape()[..] {
            [n, xf] if xf == f => n,
            _ => {
                return Err(FdnnError::shape(format!(
                    "linear expects N×{f} input, got {:?}",
                    x.shape()
                )))
            }
        };
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm_nt(x.data(), self.weight.value.data(), &mut out, n, f, g);
        Tensor::new(vec![n, g], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let (g, f) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let n = x.shape()[0];
        check_grad_shape(grad, &[n, g], "linear")?;
        gemm_tn(grad.data(), x.data(), self.weight.grad.data_mut(), g, n, f);
        for row in grad.data().chunks_exact(g) {
            for (b, v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
        let mut grad_x = vec![0.0; n * f];
        gemm_nn(grad.data(), self.weight.value.data(), &mut grad_x, n, g, f);
        Tensor::new(vec![n, f], grad_x)
    }
}

/// Per-channel batch normalization over N×C×H×W input.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
enum BnCache {
    Batch { x_hat: Tensor, inv_std: Vec<f64> },
    Running { shape: Vec<usize> },
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let mut bn = Self::new(channels);
        bn.gamma = Param::new(normal_tensor(&[channels], 1.0, INIT_STD, rng));
        bn
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 4]> {
        let dims = nchw(x, "batchnorm2d")?;
        if dims[1] != self.channels() {
            return Err(FdnnError::shape(format!(
                "batchnorm2d has {} channels, got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(dims)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = self.check(x)?;
        let hw = h * w;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let scale = self.gamma.value.data()[ch] / (self.running_var.data()[ch] + self.eps).sqrt();
            let shift = self.beta.value.data()[ch] - self.running_mean.data()[ch] * scale;
            for s in 0..n {
                for v in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = self.check(x)?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return Err(FdnnError::domain(format!(
                "batchnorm2d in train mode needs at least 2 values per channel, input {:?}",
                x.shape()
            )));
        }
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let planes = |ch: usize| (0..n).map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
        for ch in 0..c {
            let mut sum = 0.0;
            for r in planes(ch) {
                sum += x.data()[r].iter().sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for r in planes(ch) {
                sq += x.data()[r].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            let var = sq / m as f64;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (gamma, beta) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for r in planes(ch) {
                for i in r {
                    let xh = (x.data()[i] - mean) * istd;
                    x_hat[i] = xh;
                    out[i] = gamma * xh + beta;
                }
            }
            let unbiased = sq / (m - 1) as f64;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        self.cache = Some(BnCache::Batch {
            x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
            inv_std,
        });
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm2d"))?;
        let c = self.channels();
        match cache {
            BnCache::Running { shape } => {
                check_grad_shape(g, shape, "batchnorm2d")?;
                let hw = shape[2] * shape[3];
                let mut out = g.data().to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    let ch = (i / hw) % c;
                    *v *= self.gamma.value.data()[ch] / (self.running_var.data()[ch] + self.eps).sqrt();
                }
                Tensor::new(shape.clone(), out)
            }
            BnCache::Batch { x_hat, inv_std } => {
                check_grad_shape(g, x_hat.shape(), "batchnorm2d")?;
                let [n, _, h, w] = nchw(x_hat, "batchnorm2d")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let mut grad_x = vec![0.0; g.len()];
                for ch in 0..c {
                    let ranges = || (0..n).map(|s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for r in ranges() {
                        for i in r {
                            sum_g += g.data()[i];
                            sum_gx += g.data()[i] * x_hat.data()[i];
                        }
                    }
                    self.gamma.grad.data_mut()[ch] += sum_gx;
                    self.beta.grad.data_mut()[ch] += sum_g;
                    let k = self.gamma.value.data()[ch] * inv_std[ch] / m;
                    for r in ranges() {
                        for i in r {
                            grad_x[i] = k * (m * g.data()[i] - sum_g - x_hat.data()[i] * sum_gx);
                        }
                    }
                }
                Tensor::new(g.shape().to_vec(), grad_x)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeakyRelu {
    pub slope: f64,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, cache: None }
    }
}

/// Logistic function with output kept strictly inside (0, 1).
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn tanh_open(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

#[derive(Clone, Debug)]
pub struct Reshape {
    /// Per-sample target shape; the leading batch dimension is kept.
    pub target: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: Vec<usize>) -> Self {
        Reshape { target, cache: None }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    Deconv2d(Deconv2d),
    Linear(Linear),
    BatchNorm2d(BatchNorm2d),
    LeakyRelu(LeakyRelu),
    Sigmoid(Option<Tensor>),
    Tanh(Option<Tensor>),
    Flatten(Option<Vec<usize>>),
    Reshape(Reshape),
}

impl Layer {
    pub fn leaky_relu(slope: f64) -> Self {
        Layer::LeakyRelu(LeakyRelu::new(slope))
    }

    pub fn sigmoid() -> Self {
        Layer::Sigmoid(None)
    }

    pub fn tanh() -> Self {
        Layer::Tanh(None)
    }

    pub fn flatten() -> Self {
        Layer::Flatten(None)
    }

    pub fn reshape(target: Vec<usize>) -> Self {
        Layer::Reshape(Reshape::new(target))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "Conv2d",
            Layer::Deconv2d(_) => "Deconv2d",
            Layer::Linear(_) => "Linear",
            Layer::BatchNorm2d(_) => "BatchNorm2d",
            Layer::LeakyRelu(_) => "LeakyReLU",
            Layer::Sigmoid(_) => "Sigmoid",
            Layer::Tanh(_) => "Tanh",
            Layer::Flatten(_) => "Flatten",
            Layer::Reshape(_) => "Reshape",
        }
    }

    /// Evaluation-semantics forward that touches no state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => Ok(l.run(x, false)?.0),
            Layer::Deconv2d(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::BatchNorm2d(l) => l.infer(x),
            Layer::LeakyRelu(l) => Ok(x.map(|v| leaky_relu(v, l.slope))),
            Layer::Sigmoid(_) => Ok(x.map(sigmoid)),
            Layer::Tanh(_) => Ok(x.map(tanh_open)),
            Layer::Flatten(_) => {
                let n = *x
                    .shape()
                    .first()
                    .ok_or_else(|| FdnnError::shape("flatten of a scalar"))?;
                let rest = x.len() / n.max(1);
                x.clone().reshape(&[n, rest])
            }
            Layer::Reshape(r) => {
                let n = *x
                    .shape()
                    .first()
                    .ok_or_else(|| FdnnError::shape("reshape of a scalar"))?;
                let mut shape = vec![n];
                shape.extend_from_slice(&r.target);
                x.clone().reshape(&shape)
            }
        }
    }

    /// Forward pass that caches what `backward` needs. In eval mode batch
    /// normalization uses its running statistics instead of batch statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => {
                let (y, cache) = l.run(x, true)?;
                l.cache = cache;
                Ok(y)
            }
            Layer::Deconv2d(l) => {
                let y = l.infer(x)?;
                l.cache = Some(DeconvCache {
                    input: x.clone(),
                    out_shape: nchw(&y, "deconv2d")?,
                });
                Ok(y)
            }
            Layer::Linear(l) => {
                let y = l.infer(x)?;
                l.cache = Some(x.clone());
                Ok(y)
            }
            Layer::BatchNorm2d(l) => match mode {
                Mode::Train => l.forward_train(x),
                Mode::Eval => {
                    let y = l.infer(x)?;
                    l.cache = Some(BnCache::Running {
                        shape: x.shape().to_vec(),
                    });
                    Ok(y)
                }
            },
            Layer::LeakyRelu(l) => {
                let y = x.map(|v| leaky_relu(v, l.slope));
                l.cache = Some(x.clone());
                Ok(y)
            }
            Layer::Sigmoid(cache) => {
                let y = x.map(sigmoid);
                *cache = Some(y.clone());
                Ok(y)
            }
            Layer::Tanh(cache) => {
                let y = x.map(tanh_open);
                *cache = Some(y.clone());
                Ok(y)
            }
            Layer::Flatten(cache) => {
                *cache = Some(x.shape().to_vec());
                Layer::Flatten(None).infer(x)
            }
            Layer::Reshape(r) => {
                r.cache = Some(x.shape().to_vec());
                let n = x.shape().first().copied().unwrap_or(0);
                let mut shape = vec![n];
                shape.extend_from_slice(&r.target);
                x.clone().reshape(&shape)
            }
        }
    }

    /// Propagates `g` (gradient w.r.t. this layer's output) to its input and
    /// accumulates parameter gradients.
    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(g),
            Layer::Deconv2d(l) => l.backward(g),
            Layer::Linear(l) => l.backward(g),
            Layer::BatchNorm2d(l) => l.backward(g),
            Layer::LeakyRelu(l) => {
                let x = l.cache.as_ref().ok_or_else(|| missing_cache("leaky_relu"))?;
                check_grad_shape(g, x.shape(), "leaky_relu")?;
                let slope = l.slope;
                let d = x.data().iter().zip(g.data()).map(|(&xv, &gv)| {
                    // derivative at 0 taken from the x >= 0 branch
                    if xv >= 0.0 {
                        gv
                    } else {
                        slope * gv
                    }
                });
                Tensor::new(x.shape().to_vec(), d.collect())
            }
            Layer::Sigmoid(cache) => {
                let y = cache.as_ref().ok_or_else(|| missing_cache("sigmoid"))?;
                check_grad_shape(g, y.shape(), "sigmoid")?;
                y.zip_map(g, |yv, gv| gv * yv * (1.0 - yv))
            }
            Layer::Tanh(cache) => {
                let y = cache.as_ref().ok_or_else(|| missing_cache("tanh"))?;
                check_grad_shape(g, y.shape(), "tanh")?;
                y.zip_map(g, |yv, gv| gv * (1.0 - yv * yv))
            }
            Layer::Flatten(cache) => {
                let shape = cache.as_ref().ok_or_else(|| missing_cache("flatten"))?;
                g.clone().reshape(shape)
            }
            Layer::Reshape(r) => {
                let shape = r.cache.as_ref().ok_or_else(|| missing_cache("reshape"))?;
                g.clone().reshape(shape)
            }
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.cache = None,
            Layer::Deconv2d(l) => l.cache = None,
            Layer::Linear(l) => l.cache = None,
            Layer::BatchNorm2d(l) => l.cache = None,
            Layer::LeakyRelu(l) => l.cache = None,
            Layer::Sigmoid(c) | Layer::Tanh(c) => *c = None,
            Layer::Flatten(c) => *c = None,
            Layer::Reshape(r) => r.cache = None,
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        match self {
            Layer::Conv2d(l) => with_bias(("weight", &l.weight), l.bias.as_ref()),
            Layer::Deconv2d(l) => with_bias(("weight", &l.weight), l.bias.as_ref()),
            Layer::Linear(l) => vec![("weight", &l.weight), ("bias", &l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &l.gamma), ("beta", &l.beta)],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        match self {
            Layer::Conv2d(l) => with_bias(("weight", &mut l.weight), l.bias.as_mut()),
            Layer::Deconv2d(l) => with_bias(("weight", &mut l.weight), l.bias.as_mut()),
            Layer::Linear(l) => vec![("weight", &mut l.weight), ("bias", &mut l.bias)],
            Layer::BatchNorm2d(l) => vec![("gamma", &mut l.gamma), ("beta", &mut l.beta)],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state that must survive a checkpoint.
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::BatchNorm2d(l) => vec![("running_mean", &l.running_mean), ("running_var", &l.running_var)],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::BatchNorm2d(l) => vec![
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => Vec::new(),
        }
    }
}

/// Something with a train-mode forward, a backward, and trainable parameters.
/// The gradient checker is written against this so fixtures can stand in for
/// real stacks.
pub trait Differentiable {
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

/// Ordered list of layers plus a train/eval flag.
#[derive(Clone, Debug, Default)]
pub struct LayerStack {
    layers: Vec<Layer>,
    mode: Mode,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Self {
        LayerStack {
            layers,
            mode: Mode::Train,
        }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.clear_cache();
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    /// Forward through every layer. In train mode activations are cached for
    /// [`LayerStack::backward`]; in eval mode this is [`LayerStack::infer`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Eval => {
                self.clear_cache();
                self.infer(x)
            }
            Mode::Train => {
                let mut h = x.clone();
                for (i, layer) in self.layers.iter_mut().enumerate() {
                    h = layer.forward(&h, Mode::Train)?;
                    h.ensure_finite(&format!("layer {i} ({}) output", layer.kind()))?;
                }
                Ok(h)
            }
        }
    }

    /// Eval-semantics forward through all layers; never mutates the stack.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.infer_prefix(x, self.layers.len())
    }

    /// Eval-semantics forward through the first `n_layers` layers.
    pub fn infer_prefix(&self, x: &Tensor, n_layers: usize) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().take(n_layers).enumerate() {
            h = layer.infer(&h)?;
            h.ensure_finite(&format!("layer {i} ({}) output", layer.kind()))?;
        }
        Ok(h)
    }

    /// Chain rule in reverse over the cached forward; parameter gradients accumulate.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            g = layer.backward(&g)?;
            g.ensure_finite(&format!("layer {i} ({}) input gradient", layer.kind()))?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, p) in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    /// Parameters named `<layer index>.<name>`, in layer order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params_mut().into_iter().map(move |(n, p)| (format!("{i}.{n}"), p)))
            .collect()
    }

    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.buffers().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.buffers_mut().into_iter().map(move |(n, t)| (format!("{i}.{n}"), t)))
            .collect()
    }

    /// Mutable parameter values followed by buffers, named and ordered as in
    /// [`LayerStack::named_params`] then [`LayerStack::named_buffers`].
    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (p, b): (Vec<(&str, &mut Tensor)>, Vec<(&str, &mut Tensor)>) = match layer {
                Layer::Conv2d(l) => (
                    with_bias(("weight", &mut l.weight.value), l.bias.as_mut().map(|b| &mut b.value)),
                    Vec::new(),
                ),
                Layer::Deconv2d(l) => (
                    with_bias(("weight", &mut l.weight.value), l.bias.as_mut().map(|b| &mut b.value)),
                    Vec::new(),
                ),
                Layer::Linear(l) => (
                    vec![("weight", &mut l.weight.value), ("bias", &mut l.bias.value)],
                    Vec::new(),
                ),
                Layer::BatchNorm2d(l) => (
                    vec![("gamma", &mut l.gamma.value), ("beta", &mut l.beta.value)],
                    vec![
                        ("running_mean", &mut l.running_mean),
                        ("running_var", &mut l.running_var),
                    ],
                ),
                _ => (Vec::new(), Vec::new()),
            };
            params.extend(p.into_iter().map(|(n, t)| (format!("{i}.{n}"), t)));
            buffers.extend(b.into_iter().map(|(n, t)| (format!("{i}.{n}"), t)));
        }
        params.extend(buffers);
        params
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

impl Differentiable for LayerStack {
    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.mode != Mode::Train {
            return Err(FdnnError::State("gradient check needs a train-mode stack".into()));
        }
        self.forward(x)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        LayerStack::backward(self, grad_out)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }
}

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-tensor error ‖a − n‖ / (‖a‖ + ‖n‖) over the input and every parameter.
    pub max_rel_error: f64,
    /// Which tensor produced `max_rel_error` ("input" or "param <index>").
    pub worst: String,
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

/// Full gradient check: every input and parameter entry.
pub fn grad_check<M: Differentiable>(model: &mut M, x: &Tensor, h: f64) -> Result<GradCheckReport> {
    grad_check_sampled(model, x, h, usize::MAX)
}

/// Gradient check against central differences of the scalar head Σ wᵢ·yᵢ, where
/// w is a fixed pseudo-random weighting (a plain sum would be blind to
/// batch-norm, whose outputs sum to a constant). At most `per_tensor` evenly
/// spaced entries of each tensor are perturbed.
pub fn grad_check_sampled<M: Differentiable>(
    model: &mut M,
    x: &Tensor,
    h: f64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    for p in model.params_mut() {
        p.zero_grad();
    }
    let y = model.forward_train(x)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let head = Tensor::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0));
    let grad_x = model.backward(&head)?;
    let analytic_params: Vec<Tensor> = model.params_mut().iter().map(|p| p.grad.clone()).collect();

    let loss_at = |m: &mut M, input: &Tensor| -> Result<f64> { m.forward_train(input)?.dot(&head) };

    let pick = |len: usize| -> Vec<usize> {
        if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|i| i * len / per_tensor).collect()
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        max_abs_error: 0.0,
        entries_checked: 0,
    };
    let record = |name: String, pairs: &[(f64, f64)], report: &mut GradCheckReport| {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &(a, n) in pairs {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
        }
        let denom = na.sqrt() + nn.sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        report.entries_checked += pairs.len();
        if rel > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = name;
        }
    };

    let mut pairs = Vec::new();
    let mut xp = x.clone();
    for i in pick(x.len()) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = loss_at(model, &xp)?;
        xp.data_mut()[i] = orig - h;
        let down = loss_at(model, &xp)?;
        xp.data_mut()[i] = orig;
        pairs.push((grad_x.data()[i], (up - down) / (2.0 * h)));
    }
    record("input".into(), &pairs, &mut report);

    for (pi, analytic) in analytic_params.iter().enumerate() {
        pairs.clear();
        for i in pick(analytic.len()) {
            let orig = model.params_mut()[pi].value.data()[i];
            model.params_mut()[pi].value.data_mut()[i] = orig + h;
            let up = loss_at(model, x)?;
            model.params_mut()[pi].value.data_mut()[i] = orig - h;
            let down = loss_at(model, x)?;
            model.params_mut()[pi].value.data_mut()[i] = orig;
            pairs.push((analytic.data()[i], (up - down) / (2.0 * h)));
        }
        record(format!("param {pi}"), &pairs, &mut report);
    }
    // restore the caches and gradients of the unperturbed point
    for p in model.params_mut() {
        p.zero_grad();
    }
    model.forward_train(x)?;
    model.backward(&head)?;
    Ok(report)
}
