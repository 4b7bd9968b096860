use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Tensor};
use crate::CnnError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Role of one entry in the layer table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, zero padding 1.
    Conv2d { in_channels: usize, out_channels: usize },
    BatchNorm2d { channels: usize },
    Relu,
    /// 2×2 window, stride 2.
    MaxPool2d,
    AdaptiveAvgPool2d { output: usize },
    Linear { in_features: usize, out_features: usize },
    Dropout { p: f64 },
}

impl LayerKind {
    pub fn role(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2d",
            LayerKind::BatchNorm2d { .. } => "BatchNorm2d",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool2d => "MaxPool2d",
            LayerKind::AdaptiveAvgPool2d { .. } => "AdaptiveAvgPool2d",
            LayerKind::Linear { .. } => "Linear",
            LayerKind::Dropout { .. } => "Dropout",
        }
    }
}

/// A named array of a layer: trainable parameter or running buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Allocated on the first backward pass that needs it.
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    fn new(name: &'static str, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Self {
        Self {
            name,
            shape,
            value,
            grad: Vec::new(),
            trainable,
        }
    }
}

/// Whether normalization uses batch statistics and dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    pub batch_stats: bool,
    pub dropout: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        batch_stats: true,
        dropout: true,
    };
    pub const EVAL: Mode = Mode {
        batch_stats: false,
        dropout: false,
    };
    /// Frozen normalization, active dropout: fine-tuning only the head.
    pub const HEAD_ONLY: Mode = Mode {
        batch_stats: false,
        dropout: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    /// Parameters then buffers, in bundle order.
    pub params: Vec<Param>,
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch mean and unbiased variance when batch statistics were used.
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu { positive: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_shape: [usize; 4] },
    AvgPool { in_shape: [usize; 4] },
    Dropout { mask: Option<Vec<f64>> },
}

impl Layer {
    /// Fresh layer: Kaiming-normal (fan-out) convolutions, N(0, 0.01) linear
    /// weights, zero biases, identity normalization.
    pub fn init(kind: LayerKind, rng: &mut ChaCha8Rng) -> Self {
        let params = match kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => {
                let std = (2.0 / (out_channels * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                let w = (0..out_channels * in_channels * 9).map(|_| dist.sample(rng)).collect();
                vec![
                    Param::new("weight", vec![out_channels, in_channels, 3, 3], w, true),
                    Param::new("bias", vec![out_channels], vec![0.0; out_channels], true),
                ]
            }
            LayerKind::BatchNorm2d { channels } => vec![
                Param::new("weight", vec![channels], vec![1.0; channels], true),
                Param::new("bias", vec![channels], vec![0.0; channels], true),
                Param::new("running_mean", vec![channels], vec![0.0; channels], false),
                Param::new("running_var", vec![channels], vec![1.0; channels], false),
            ],
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let dist = Normal::new(0.0, 0.01).expect("positive std");
                let w = (0..out_features * in_features).map(|_| dist.sample(rng)).collect();
                vec![
                    Param::new("weight", vec![out_features, in_features], w, true),
                    Param::new("bias", vec![out_features], vec![0.0; out_features], true),
                ]
            }
            _ => Vec::new(),
        };
        Self { kind, params }
    }

    pub fn has_trainable(&self) -> bool {
        self.params.iter().any(|p| p.trainable)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn output_shape(&self, s: [usize; 4]) -> Result<[usize; 4], CnnError> {
        let bad = |what: &str| Err(CnnError::Shape(format!("{} cannot take {s:?}: {what}", self.kind.role())));
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
            } => {
                if s[1] != in_channels {
                    return bad(&format!("expected {in_channels} channels"));
                }
                Ok([s[0], out_channels, s[2], s[3]])
            }
            LayerKind::BatchNorm2d { channels } => {
                if s[1] != channels {
                    return bad(&format!("expected {channels} channels"));
                }
                Ok(s)
            }
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(s),
            LayerKind::MaxPool2d => {
                if s[2] < 2 || s[3] < 2 {
                    return bad("spatial size below 2");
                }
                Ok([s[0], s[1], s[2] / 2, s[3] / 2])
            }
            LayerKind::AdaptiveAvgPool2d { output } => Ok([s[0], s[1], output, output]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if s[1] * s[2] * s[3] != in_features {
                    return bad(&format!("expected {in_features} features"));
                }
                Ok([s[0], out_features, 1, 1])
            }
        }
    }

    /// Pure forward pass; running statistics change only through [`Layer::commit`].
    pub fn forward(&self, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Cache), CnnError> {
        let out_shape = self.output_shape(x.shape)?;
        match self.kind {
            LayerKind::Conv2d { .. } => {
                let y = self.conv_forward(&x, out_shape);
                Ok((y, Cache::Input(x)))
            }
            LayerKind::BatchNorm2d { channels } => Ok(self.bn_forward(x, channels, mode.batch_stats)),
            LayerKind::Relu => {
                let positive: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
                let mut y = x;
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                Ok((y, Cache::Relu { positive }))
            }
            LayerKind::MaxPool2d => Ok(max_pool(&x, out_shape)),
            LayerKind::AdaptiveAvgPool2d { .. } => Ok((adaptive_avg_pool(&x, out_shape), Cache::AvgPool { in_shape: x.shape })),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let n = x.n();
                let mut y = Tensor::zeros(out_shape);
                let (w, b) = (&self.params[0].value, &self.params[1].value);
                for i in 0..n {
                    y.item_mut(i).copy_from_slice(b);
                }
                // Y[n, out] += X[n, in] · Wᵀ
                gemm(n, in_features, out_features, &x.data, (in_features, 1), w, (1, in_features), 1.0, &mut y.data, (out_features, 1));
                Ok((y, Cache::Input(x)))
            }
            LayerKind::Dropout { p } => {
                if !mode.dropout || p == 0.0 {
                    return Ok((x, Cache::Dropout { mask: None }));
                }
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..x.data.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                let mut y = x;
                y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                Ok((y, Cache::Dropout { mask: Some(mask) }))
            }
        }
    }

    /// Folds batch statistics from a training forward pass into the running
    /// estimates.
    pub fn commit(&mut self, cache: &Cache) {
        if let Cache::BatchNorm { batch: Some((mean, var)), .. } = cache {
            for (r, v) in self.params[2].value.iter_mut().zip(mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
            for (r, v) in self.params[3].value.iter_mut().zip(var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Propagates `dy` to the layer input. Parameter gradients accumulate
    /// only when `param_grads` is set. With `guided`, rectifiers also block
    /// negative incoming gradients.
    pub fn backward(&mut self, cache: &Cache, dy: Tensor, param_grads: bool, guided: bool) -> Tensor {
        if param_grads {
            for p in self.params.iter_mut().filter(|p| p.trainable && p.grad.len() != p.value.len()) {
                p.grad = vec![0.0; p.value.len()];
            }
        }
        match (&self.kind, cache) {
            (LayerKind::Conv2d { .. }, Cache::Input(x)) => self.conv_backward(x, &dy, param_grads),
            (LayerKind::BatchNorm2d { channels }, Cache::BatchNorm { xhat, inv_std, batch }) => {
                self.bn_backward(dy, *channels, xhat, inv_std, batch.is_some(), param_grads)
            }
            (LayerKind::Relu, Cache::Relu { positive }) => {
                let mut dx = dy;
                for (g, &pos) in dx.data.iter_mut().zip(positive) {
                    if !pos || (guided && *g < 0.0) {
                        *g = 0.0;
                    }
                }
                dx
            }
            (LayerKind::MaxPool2d, Cache::MaxPool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(*in_shape);
                for (g, &i) in dy.data.iter().zip(argmax) {
                    dx.data[i] += g;
                }
                dx
            }
            (LayerKind::AdaptiveAvgPool2d { .. }, Cache::AvgPool { in_shape }) => adaptive_avg_pool_backward(&dy, *in_shape),
            (
                LayerKind::Linear {
                    in_features,
                    out_features,
                },
                Cache::Input(x),
            ) => {
                let (fi, fo, n) = (*in_features, *out_features, x.n());
                if param_grads {
                    let (wp, rest) = self.params.split_at_mut(1);
                    // dW[out, in] += dYᵀ · X
                    gemm(fo, n, fi, &dy.data, (1, fo), &x.data, (fi, 1), 1.0, &mut wp[0].grad, (fi, 1));
                    let db = &mut rest[0].grad;
                    for i in 0..n {
                        for (g, d) in db.iter_mut().zip(dy.item(i)) {
                            *g += d;
                        }
                    }
                }
                let mut dx = Tensor::zeros(x.shape);
                // dX[n, in] = dY · W
                gemm(n, fo, fi, &dy.data, (fo, 1), &self.params[0].value, (fi, 1), 0.0, &mut dx.data, (fi, 1));
                dx
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = dy;
                if let Some(mask) = mask {
                    dx.data.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                }
                dx
            }
            (kind, _) => unreachable!("cache does not belong to {kind:?}"),
        }
    }

    fn conv_forward(&self, x: &Tensor, out_shape: [usize; 4]) -> Tensor {
        let [n, cin, h, w] = x.shape;
        let cout = out_shape[1];
        let hw = h * w;
        let k = cin * 9;
        let (wt, b) = (&self.params[0].value, &self.params[1].value);
        let mut y = Tensor::zeros(out_shape);
        let mut cols = vec![0.0; k * hw];
        for i in 0..n {
            im2col(x.item(i), cin, h, w, &mut cols);
            let out = y.item_mut(i);
            for (o, bias) in b.iter().enumerate() {
                out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *bias);
            }
            gemm(cout, k, hw, wt, (k, 1), &cols, (hw, 1), 1.0, out, (hw, 1));
        }
        y
    }

    fn conv_backward(&mut self, x: &Tensor, dy: &Tensor, param_grads: bool) -> Tensor {
        let [n, cin, h, w] = x.shape;
        let cout = dy.shape[1];
        let hw = h * w;
        let k = cin * 9;
        let mut dx = Tensor::zeros(x.shape);
        let mut cols = vec![0.0; k * hw];
        let mut dcols = vec![0.0; k * hw];
        for i in 0..n {
            let g = dy.item(i);
            if param_grads {
                im2col(x.item(i), cin, h, w, &mut cols);
                let (wp, rest) = self.params.split_at_mut(1);
                // dW[cout, k] += dY[cout, hw] · colsᵀ
                gemm(cout, hw, k, g, (hw, 1), &cols, (1, hw), 1.0, &mut wp[0].grad, (k, 1));
                for (o, db) in rest[0].grad.iter_mut().enumerate() {
                    *db += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            // dcols[k, hw] = Wᵀ · dY
            gemm(k, cout, hw, &self.params[0].value, (1, k), g, (hw, 1), 0.0, &mut dcols, (hw, 1));
            col2im(&dcols, cin, h, w, dx.item_mut(i));
        }
        dx
    }

    fn bn_forward(&self, mut x: Tensor, c: usize, batch_stats: bool) -> (Tensor, Cache) {
        let [n, _, h, w] = x.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += x.item(i)[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m;
                let mut ss = 0.0;
                for i in 0..n {
                    ss += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                }
                var[ch] = ss / m;
            }
            (mean, var)
        } else {
            (self.params[2].value.clone(), self.params[3].value.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; x.data.len()];
        let (gamma, beta) = (&self.params[0].value, &self.params[1].value);
        for i in 0..n {
            let base = i * c * hw;
            for ch in 0..c {
                for j in 0..hw {
                    let idx = base + ch * hw + j;
                    let xh = (x.data[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = xh;
                    x.data[idx] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let batch = batch_stats.then(|| {
            let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            (mean, var.iter().map(|v| v * unbiased).collect())
        });
        (x, Cache::BatchNorm { xhat, inv_std, batch })
    }

    fn bn_backward(
        &mut self,
        mut dy: Tensor,
        c: usize,
        xhat: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        param_grads: bool,
    ) -> Tensor {
        let [n, _, h, w] = dy.shape;
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    sum_dy[ch] += dy.data[j];
                    sum_dy_xhat[ch] += dy.data[j] * xhat[j];
                }
            }
        }
        if param_grads {
            for ch in 0..c {
                self.params[0].grad[ch] += sum_dy_xhat[ch];
                self.params[1].grad[ch] += sum_dy[ch];
            }
        }
        let gamma = &self.params[0].value;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let k = gamma[ch] * inv_std[ch];
                for j in base..base + hw {
                    dy.data[j] = if batch_stats {
                        k / m * (m * dy.data[j] - sum_dy[ch] - xhat[j] * sum_dy_xhat[ch])
                    } else {
                        k * dy.data[j]
                    };
                }
            }
        }
        dy
    }
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

fn max_pool(x: &Tensor, out_shape: [usize; 4]) -> (Tensor, Cache) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; y.data.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                y.data[o] = x.data[best];
                argmax[o] = best;
            }
        }
    }
    (y, Cache::MaxPool { argmax, in_shape: x.shape })
}

/// Bin `i` of `out` over an input of length `len`: `[⌊i·len/out⌋, ⌈(i+1)·len/out⌉)`.
fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn adaptive_avg_pool(x: &Tensor, out_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut y = Tensor::zeros(out_shape);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut s = 0.0;
                for yy in y0..y1 {
                    s += src[yy * w + x0..yy * w + x1].iter().sum::<f64>();
                }
                y.data[plane * oh * ow + oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

fn adaptive_avg_pool_backward(dy: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (dy.shape[2], dy.shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for plane in 0..n * c {
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = dy.data[plane * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    dst[yy * w + x0..yy * w + x1].iter_mut().for_each(|d| *d += g);
                }
            }
        }
    }
    dx
}
