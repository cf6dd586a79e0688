//! Layers with explicit forward and backward passes.
//!
//! Image tensors are `[batch, channels, height, width]`, flat tensors
//! `[batch, features]`. `forward_train` caches what `backward` needs;
//! `backward` takes dL/d(output), writes every parameter gradient (replacing
//! the previous value) and returns dL/d(input).

use rand::Rng as _;

use super::{NnError, Tensor};
use crate::rng::Rng;

/// A trainable array with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Kernel weights take L2 decay; biases and batch-norm affine terms do not.
    pub decay: bool,
}

impl Param {
    fn new(name: &'static str, shape: Vec<usize>, value: Vec<f64>, decay: bool) -> Self {
        let n = value.len();
        Param {
            name,
            shape,
            value,
            grad: vec![0.0; n],
            decay,
        }
    }

    fn glorot(name: &'static str, shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        Param::new(name, shape, value, true)
    }

    fn zeros(name: &'static str, n: usize) -> Self {
        Param::new(name, vec![n], vec![0.0; n], false)
    }
}

fn shape_err(layer: &str, expected: String, got: &[usize]) -> NnError {
    NnError::ShapeMismatch(format!("{layer}: expected input {expected}, got {got:?}"))
}

fn dims4(layer: &str, x: &Tensor) -> Result<[usize; 4], NnError> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(shape_err(layer, "[batch, channels, height, width]".into(), s)),
    }
}

fn dims2(layer: &str, x: &Tensor) -> Result<[usize; 2], NnError> {
    match *x.shape() {
        [b, f] => Ok([b, f]),
        ref s => Err(shape_err(layer, "[batch, features]".into(), s)),
    }
}

fn missing_cache(layer: &str) -> NnError {
    NnError::ShapeMismatch(format!("{layer}: backward called before forward_train"))
}

/// Output positions `ox` whose input column `ox * stride + offset` lies in
/// `0..width`.
fn valid_range(out_len: usize, stride: usize, offset: isize, width: usize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = (width as isize - 1 - offset).div_euclid(s) + 1;
    let hi = hi.clamp(0, out_len as isize);
    (lo.min(hi) as usize)..(hi as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Tensor, Tensor)>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
        rng: &mut Rng,
    ) -> Self {
        let k2 = kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            relu,
            weight: Param::glorot(
                "weight",
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * k2,
                out_channels * k2,
                rng,
            ),
            bias: Param::zeros("bias", out_channels),
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 6], NnError> {
        let [b, c, h, w] = dims4("conv2d", x)?;
        let (ho, wo) = self
            .output_hw(h, w)
            .filter(|_| c == self.in_channels)
            .ok_or_else(|| shape_err("conv2d", format!("[_, {}, >= kernel, >= kernel]", self.in_channels), x.shape()))?;
        Ok([b, c, h, w, ho, wo])
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let [b, c, h, w, ho, wo] = self.check(x)?;
        let (k, s, p, o) = (self.kernel, self.stride, self.padding as isize, self.out_channels);
        let xd = x.data();
        let wt = &self.weight.value;
        let mut out = vec![0.0; b * o * ho * wo];
        for n in 0..b {
            for oc in 0..o {
                let plane = &mut out[(n * o + oc) * ho * wo..][..ho * wo];
                plane.fill(self.bias.value[oc]);
                for ic in 0..c {
                    let input = &xd[(n * c + ic) * h * w..][..h * w];
                    for ky in 0..k {
                        let rows = valid_range(ho, s, ky as isize - p, h);
                        for kx in 0..k {
                            let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                            let off = kx as isize - p;
                            let cols = valid_range(wo, s, off, w);
                            if cols.is_empty() {
                                continue;
                            }
                            for oy in rows.clone() {
                                let iy = (oy * s) as isize + ky as isize - p;
                                let in_row = &input[iy as usize * w..][..w];
                                let out_row = &mut plane[oy * wo..][..wo];
                                if s == 1 {
                                    let start = (cols.start as isize + off) as usize;
                                    for (y, xv) in out_row[cols.clone()].iter_mut().zip(&in_row[start..]) {
                                        *y += wv * xv;
                                    }
                                } else {
                                    for ox in cols.clone() {
                                        out_row[ox] += wv * in_row[(ox as isize * s as isize + off) as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut t = Tensor::new(vec![b, o, ho, wo], out)?;
        if self.relu {
            t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(t)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let [b, c, h, w, ho, wo] = self.check(x)?;
        if grad.shape() != y.shape() {
            return Err(shape_err("conv2d backward", format!("{:?}", y.shape()), grad.shape()));
        }
        let (k, s, p, o) = (self.kernel, self.stride, self.padding as isize, self.out_channels);
        let mut g = grad.data().to_vec();
        if self.relu {
            for (gv, yv) in g.iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let xd = x.data();
        let wt = &self.weight.value;
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; o];
        let mut dx = vec![0.0; xd.len()];
        for n in 0..b {
            for oc in 0..o {
                let gp = &g[(n * o + oc) * ho * wo..][..ho * wo];
                db[oc] += gp.iter().sum::<f64>();
                for ic in 0..c {
                    let base = (n * c + ic) * h * w;
                    for ky in 0..k {
                        let rows = valid_range(ho, s, ky as isize - p, h);
                        for kx in 0..k {
                            let widx = ((oc * c + ic) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let off = kx as isize - p;
                            let cols = valid_range(wo, s, off, w);
                            if cols.is_empty() {
                                continue;
                            }
                            let mut acc = 0.0;
                            for oy in rows.clone() {
                                let iy = (oy * s) as isize + ky as isize - p;
                                let row_base = base + iy as usize * w;
                                let g_row = &gp[oy * wo..][..wo];
                                if s == 1 {
                                    let start = row_base + (cols.start as isize + off) as usize;
                                    let len = cols.len();
                                    let in_row = &xd[start..start + len];
                                    let g_seg = &g_row[cols.clone()];
                                    acc += g_seg.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                                    for (d, gv) in dx[start..start + len].iter_mut().zip(g_seg) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for ox in cols.clone() {
                                        let ix = row_base + (ox as isize * s as isize + off) as usize;
                                        acc += g_row[ox] * xd[ix];
                                        dx[ix] += wv * g_row[ox];
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        self.weight.grad = dw;
        self.bias.grad = db;
        Tensor::new(vec![b, c, h, w], dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        MaxPool2d {
            window,
            stride,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.window || w < self.window || self.window == 0 || self.stride == 0 {
            return None;
        }
        Some(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }

    /// Output plus the flat input index of every selected maximum.
    fn compute(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>), NnError> {
        let [b, c, h, w] = dims4("maxpool", x)?;
        let (ho, wo) = self
            .output_hw(h, w)
            .ok_or_else(|| shape_err("maxpool", format!("spatial size >= {}", self.window), x.shape()))?;
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for dy in 0..self.window {
                        for dx in 0..self.window {
                            let idx = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        Ok((Tensor::new(vec![b, c, ho, wo], out)?, arg))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let (in_shape, arg) = self.cache.as_ref().ok_or_else(|| missing_cache("maxpool"))?;
        if grad.len() != arg.len() {
            return Err(shape_err("maxpool backward", format!("{} values", arg.len()), grad.shape()));
        }
        let mut dx = vec![0.0; in_shape.iter().product()];
        for (&i, g) in arg.iter().zip(grad.data()) {
            dx[i] += g;
        }
        Tensor::new(in_shape.clone(), dx)
    }
}

/// Per-channel normalization (per feature for flat input).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<(Vec<f64>, Vec<f64>, Vec<usize>)>,
}

impl BatchNorm {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        BatchNorm {
            channels,
            momentum,
            epsilon,
            gamma: Param::new("gamma", vec![channels], vec![1.0; channels], false),
            beta: Param::zeros("beta", channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    /// (batch, channels, spatial size)
    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize), NnError> {
        let (b, c, sp) = match *x.shape() {
            [b, c] => (b, c, 1),
            [b, c, h, w] => (b, c, h * w),
            ref s => return Err(shape_err("batchnorm", "2-d or 4-d input".into(), s)),
        };
        if c != self.channels {
            return Err(shape_err("batchnorm", format!("{} channels", self.channels), x.shape()));
        }
        Ok((b, c, sp))
    }

    fn for_each_channel(b: usize, c: usize, sp: usize, ch: usize) -> impl Iterator<Item = usize> {
        (0..b).flat_map(move |n| {
            let base = (n * c + ch) * sp;
            base..base + sp
        })
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, sp) = self.layout(x)?;
        let m = (b * sp) as f64;
        let xd = x.data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let mean = Self::for_each_channel(b, c, sp, ch).map(|i| xd[i]).sum::<f64>() / m;
            let var = Self::for_each_channel(b, c, sp, ch)
                .map(|i| (xd[i] - mean).powi(2))
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ch] = is;
            for i in Self::for_each_channel(b, c, sp, ch) {
                x_hat[i] = (xd[i] - mean) * is;
                out[i] = self.gamma.value[ch] * x_hat[i] + self.beta.value[ch];
            }
            self.running_mean[ch] = self.momentum * self.running_mean[ch] + (1.0 - self.momentum) * mean;
            self.running_var[ch] = self.momentum * self.running_var[ch] + (1.0 - self.momentum) * var;
        }
        self.cache = Some((x_hat, inv_std, x.shape().to_vec()));
        Tensor::new(x.shape().to_vec(), out)
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (b, c, sp) = self.layout(x)?;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let is = 1.0 / (self.running_var[ch] + self.epsilon).sqrt();
            for i in Self::for_each_channel(b, c, sp, ch) {
                out[i] = self.gamma.value[ch] * (out[i] - self.running_mean[ch]) * is + self.beta.value[ch];
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let (x_hat, inv_std, shape) = self.cache.as_ref().ok_or_else(|| missing_cache("batchnorm"))?;
        if grad.shape() != shape.as_slice() {
            return Err(shape_err("batchnorm backward", format!("{shape:?}"), grad.shape()));
        }
        let (b, c, sp) = self.layout(grad)?;
        let m = (b * sp) as f64;
        let g = grad.data();
        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0, 0.0);
            for i in Self::for_each_channel(b, c, sp, ch) {
                sg += g[i];
                sgx += g[i] * x_hat[i];
            }
            dgamma[ch] = sgx;
            dbeta[ch] = sg;
            let scale = self.gamma.value[ch] * inv_std[ch] / m;
            for i in Self::for_each_channel(b, c, sp, ch) {
                dx[i] = scale * (m * g[i] - sg - x_hat[i] * sgx);
            }
        }
        self.gamma.grad = dgamma;
        self.beta.grad = dbeta;
        Tensor::new(shape.clone(), dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub units: usize,
    pub relu: bool,
    pub weight: Param,
    pub bias: Param,
    cache: Option<(Tensor, Tensor)>,
}

impl Dense {
    pub fn new(inputs: usize, units: usize, relu: bool, rng: &mut Rng) -> Self {
        Dense {
            inputs,
            units,
            relu,
            weight: Param::glorot("weight", vec![units, inputs], inputs, units, rng),
            bias: Param::zeros("bias", units),
            cache: None,
        }
    }

    fn compute(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let [b, f] = dims2("dense", x)?;
        if f != self.inputs {
            return Err(shape_err("dense", format!("[_, {}]", self.inputs), x.shape()));
        }
        let mut out = Vec::with_capacity(b * self.units);
        for row in x.data().chunks(f) {
            for (o, w_row) in self.weight.value.chunks(f).enumerate() {
                let v = self.bias.value[o] + w_row.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                out.push(if self.relu { v.max(0.0) } else { v });
            }
        }
        Tensor::new(vec![b, self.units], out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| missing_cache("dense"))?;
        if grad.shape() != y.shape() {
            return Err(shape_err("dense backward", format!("{:?}", y.shape()), grad.shape()));
        }
        let f = self.inputs;
        let mut g = grad.data().to_vec();
        if self.relu {
            for (gv, yv) in g.iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let mut dw = vec![0.0; self.weight.value.len()];
        let mut db = vec![0.0; self.units];
        let mut dx = vec![0.0; x.len()];
        for ((x_row, g_row), dx_row) in x.data().chunks(f).zip(g.chunks(self.units)).zip(dx.chunks_mut(f)) {
            for (o, &gv) in g_row.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                db[o] += gv;
                let w_row = &self.weight.value[o * f..][..f];
                for ((dwv, xv), (dxv, wv)) in dw[o * f..][..f]
                    .iter_mut()
                    .zip(x_row)
                    .zip(dx_row.iter_mut().zip(w_row))
                {
                    *dwv += gv * xv;
                    *dxv += gv * wv;
                }
            }
        }
        self.weight.grad = dw;
        self.bias.grad = db;
        Tensor::new(x.shape().to_vec(), dx)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }
}

/// Row-wise softmax over `[batch, classes]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Softmax {
    output: Option<Tensor>,
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NnError> {
    let [_, k] = dims2("softmax", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    BatchNorm(BatchNorm),
    Flatten(Option<Vec<usize>>),
    Dense(Dense),
    Dropout(Dropout),
    Softmax(Softmax),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2d(_) => "maxpool",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Flatten(_) => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Dropout(_) => "dropout",
            Layer::Softmax(_) => "softmax",
        }
    }

    /// Training-mode forward pass: batch statistics for batch norm and a
    /// fresh dropout mask drawn from `rng`.
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv2d(l) => {
                let y = l.compute(x)?;
                l.cache = Some((x.clone(), y.clone()));
                Ok(y)
            }
            Layer::MaxPool2d(l) => {
                let (y, arg) = l.compute(x)?;
                l.cache = Some((x.shape().to_vec(), arg));
                Ok(y)
            }
            Layer::BatchNorm(l) => l.forward_train(x),
            Layer::Flatten(cache) => {
                *cache = Some(x.shape().to_vec());
                flatten(x)
            }
            Layer::Dense(l) => {
                let y = l.compute(x)?;
                l.cache = Some((x.clone(), y.clone()));
                Ok(y)
            }
            Layer::Dropout(l) => {
                let keep = 1.0 - l.rate;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < l.rate { 0.0 } else { 1.0 / keep })
                    .collect();
                let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                l.mask = Some(mask);
                Tensor::new(x.shape().to_vec(), out)
            }
            Layer::Softmax(l) => {
                let y = softmax_rows(x)?;
                l.output = Some(y.clone());
                Ok(y)
            }
        }
    }

    /// Inference forward pass: running statistics, no dropout, no caching.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv2d(l) => l.compute(x),
            Layer::MaxPool2d(l) => l.compute(x).map(|(y, _)| y),
            Layer::BatchNorm(l) => l.forward_eval(x),
            Layer::Flatten(_) => flatten(x),
            Layer::Dense(l) => l.compute(x),
            Layer::Dropout(_) => Ok(x.clone()),
            Layer::Softmax(_) => softmax_rows(x),
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Conv2d(l) => l.backward(grad),
            Layer::MaxPool2d(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::Flatten(cache) => {
                let shape = cache.clone().ok_or_else(|| missing_cache("flatten"))?;
                grad.clone().reshape(shape)
            }
            Layer::Dense(l) => l.backward(grad),
            Layer::Dropout(l) => {
                let mask = l.mask.as_ref().ok_or_else(|| missing_cache("dropout"))?;
                if mask.len() != grad.len() {
                    return Err(shape_err("dropout backward", format!("{} values", mask.len()), grad.shape()));
                }
                let out = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                Tensor::new(grad.shape().to_vec(), out)
            }
            Layer::Softmax(l) => {
                let p = l.output.as_ref().ok_or_else(|| missing_cache("softmax"))?;
                if p.shape() != grad.shape() {
                    return Err(shape_err("softmax backward", format!("{:?}", p.shape()), grad.shape()));
                }
                let k = p.shape()[1];
                let mut dx = Vec::with_capacity(p.len());
                for (p_row, g_row) in p.data().chunks(k).zip(grad.data().chunks(k)) {
                    let dot: f64 = p_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    dx.extend(p_row.iter().zip(g_row).map(|(pv, gv)| pv * (gv - dot)));
                }
                Tensor::new(p.shape().to_vec(), dx)
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state saved with the weights.
    pub fn buffers(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            Layer::BatchNorm(l) => vec![("running_mean", &l.running_mean), ("running_var", &l.running_var)],
            _ => Vec::new(),
        }
    }

    /// Parameter values followed by buffers, matching `params` then `buffers`.
    pub fn state_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::Dense(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma.value,
                &mut l.beta.value,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            _ => Vec::new(),
        }
    }
}

fn flatten(x: &Tensor) -> Result<Tensor, NnError> {
    let shape = vec![x.batch(), x.item_len()];
    x.clone().reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn valid_range_bounds() {
        // stride 1, offset -1, width 5, 5 outputs: ox 1..5 map to ix 0..4
        assert_eq!(valid_range(5, 1, -1, 5), 1..5);
        assert_eq!(valid_range(5, 1, 1, 5), 0..4);
        assert_eq!(valid_range(3, 2, 0, 5), 0..3);
        assert_eq!(valid_range(3, 2, -1, 5), 1..3);
        assert_eq!(valid_range(2, 1, 10, 5), 0..0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = seeded(0);
        let mut conv = Conv2d::new(2, 2, 1, 1, 0, false, &mut rng);
        conv.weight.value = vec![1.0, 0.0, 0.0, 1.0];
        let x = random(&[3, 2, 5, 4], 1);
        assert_eq!(conv.compute(&x).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = seeded(2);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
            let conv = Conv2d::new(2, 3, 3, stride, pad, false, &mut rng);
            let x = random(&[2, 2, 6, 7], 3);
            let y = conv.compute(&x).unwrap();
            let [_, _, ho, wo] = [y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]];
            for n in 0..2 {
                for o in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut want = conv.bias.value[o];
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if (0..6).contains(&iy) && (0..7).contains(&ix) {
                                            want += conv.weight.value[((o * 2 + c) * 3 + ky) * 3 + kx]
                                                * x.data()[((n * 2 + c) * 6 + iy as usize) * 7 + ix as usize];
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((n * 3 + o) * ho + oy) * wo + ox];
                            assert!((got - want).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_window_maxima() {
        let pool = MaxPool2d::new(2, 2);
        let x = random(&[2, 3, 7, 6], 4);
        let (y, _) = pool.compute(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        for plane in 0..6 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[plane * 42 + (2 * oy + dy) * 6 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(y.data()[plane * 9 + oy * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut bn = BatchNorm::new(3, 0.9, 1e-5);
        let mut x = random(&[5, 3, 4, 4], 5);
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 7.0);
        let y = bn.forward_train(&x).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = BatchNorm::for_each_channel(5, 3, 16, ch).map(|i| y.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running statistics moved toward the batch statistics
        assert!(bn.running_mean.iter().all(|&m| m > 0.5));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = seeded(6);
        let mut layer = Layer::Dropout(Dropout::new(0.3));
        let x = Tensor::new(vec![1, 20_000], vec![1.0; 20_000]).unwrap();
        assert_eq!(layer.forward_eval(&x).unwrap(), x);
        let y = layer.forward_train(&x, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64;
        // binomial sd = sqrt(n p (1-p)) ~ 65; allow 5 sd
        assert!((zeros - 6000.0).abs() < 5.0 * 65.0);
        let kept = 1.0 / 0.7;
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - kept).abs() < 1e-15));
        let mean = y.data().iter().sum::<f64>() / 20_000.0;
        assert!((mean - 1.0).abs() < 0.03);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shift() {
        let x = random(&[4, 3], 7);
        let p = softmax_rows(&x).unwrap();
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 123.0);
        let q = softmax_rows(&shifted).unwrap();
        for (row, row2) in p.data().chunks(3).zip(q.data().chunks(3)) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in row.iter().zip(row2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let zero = softmax_rows(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let mut rng = seeded(8);
        let conv = Layer::Conv2d(Conv2d::new(2, 4, 3, 1, 1, true, &mut rng));
        assert!(matches!(
            conv.forward_eval(&Tensor::zeros(&[1, 3, 5, 5])),
            Err(NnError::ShapeMismatch(_))
        ));
        let dense = Layer::Dense(Dense::new(4, 3, false, &mut rng));
        assert!(dense.forward_eval(&Tensor::zeros(&[2, 5])).is_err());
        let mut fresh = Layer::Dense(Dense::new(4, 3, false, &mut rng));
        assert!(fresh.backward(&Tensor::zeros(&[2, 3])).is_err());
    }
}
