use rand::Rng;

use super::blaze::BlazeBlock;
use super::{shape_err, NnError, Result, Tensor};

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Input(Tensor),
    Output(Tensor),
    Shape(Vec<usize>),
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Seq(Vec<Cache>),
    Block(Box<super::blaze::BlockCache>),
}

/// Index range `lo..hi` of outputs whose tap `k_off` lands inside an input
/// of length `in_len`: `o * stride + k_off - pad ∈ [0, in_len)`.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let top = in_len as isize - 1 + pad as isize - k_off as isize;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Plane {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }

    /// `out[oy, ox] += Σ w[ky, kx] · inp[oy·s + ky − p, ox·s + kx − p]`
    fn conv_forward(&self, inp: &[f64], w: &[f64], out: &mut [f64]) {
        if self.pointwise() {
            let wv = w[0];
            for (o, i) in out.iter_mut().zip(inp) {
                *o += wv * i;
            }
            return;
        }
        let Plane { iw, ow, k, s, p, .. } = *self;
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, p, s, self.ih, self.oh);
            for kx in 0..k {
                let wv = w[ky * k + kx];
                let (ox_lo, ox_hi) = valid_range(kx, p, s, iw, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let orow = &mut out[oy * ow..(oy + 1) * ow];
                    let irow = &inp[iy * iw..(iy + 1) * iw];
                    if s == 1 {
                        let src = &irow[ox_lo + kx - p..ox_hi + kx - p];
                        for (o, i) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            orow[ox] += wv * irow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }

    fn conv_backward(&self, inp: &[f64], w: &[f64], g: &[f64], gw: &mut [f64], gin: &mut [f64]) {
        if self.pointwise() {
            let wv = w[0];
            let mut acc = 0.0;
            for ((gi, i), go) in gin.iter_mut().zip(inp).zip(g) {
                acc += go * i;
                *gi += wv * go;
            }
            gw[0] += acc;
            return;
        }
        let Plane { iw, ow, k, s, p, .. } = *self;
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, p, s, self.ih, self.oh);
            for kx in 0..k {
                let wv = w[ky * k + kx];
                let (ox_lo, ox_hi) = valid_range(kx, p, s, iw, ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let mut acc = 0.0;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let grow = &g[oy * ow..(oy + 1) * ow];
                    let irow = &inp[iy * iw..(iy + 1) * iw];
                    let girow = &mut gin[iy * iw..(iy + 1) * iw];
                    if s == 1 {
                        let off = ox_lo + kx - p;
                        let n = ox_hi - ox_lo;
                        for ((go, i), gi) in grow[ox_lo..ox_hi]
                            .iter()
                            .zip(&irow[off..off + n])
                            .zip(&mut girow[off..off + n])
                        {
                            acc += go * i;
                            *gi += wv * go;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - p;
                            acc += grow[ox] * irow[ix];
                            girow[ix] += wv * grow[ox];
                        }
                    }
                }
                gw[ky * k + kx] += acc;
            }
        }
    }

    /// Transposed: `out[iy·s + ky − p, ix·s + kx − p] += w[ky, kx] · inp[iy, ix]`
    /// where `(ih, iw)` is the small input and `(oh, ow)` the upsampled output.
    fn tconv_forward(&self, inp: &[f64], w: &[f64], out: &mut [f64]) {
        let Plane { iw, ow, k, s, p, .. } = *self;
        for ky in 0..k {
            let (iy_lo, iy_hi) = valid_range(ky, p, s, self.oh, self.ih);
            for kx in 0..k {
                let wv = w[ky * k + kx];
                let (ix_lo, ix_hi) = valid_range(kx, p, s, ow, iw);
                for iy in iy_lo..iy_hi {
                    let oy = iy * s + ky - p;
                    let irow = &inp[iy * iw..(iy + 1) * iw];
                    let orow = &mut out[oy * ow..(oy + 1) * ow];
                    for ix in ix_lo..ix_hi {
                        orow[ix * s + kx - p] += wv * irow[ix];
                    }
                }
            }
        }
    }

    fn tconv_backward(&self, inp: &[f64], w: &[f64], g: &[f64], gw: &mut [f64], gin: &mut [f64]) {
        let Plane { iw, ow, k, s, p, .. } = *self;
        for ky in 0..k {
            let (iy_lo, iy_hi) = valid_range(ky, p, s, self.oh, self.ih);
            for kx in 0..k {
                let wv = w[ky * k + kx];
                let (ix_lo, ix_hi) = valid_range(kx, p, s, ow, iw);
                let mut acc = 0.0;
                for iy in iy_lo..iy_hi {
                    let oy = iy * s + ky - p;
                    let irow = &inp[iy * iw..(iy + 1) * iw];
                    let girow = &mut gin[iy * iw..(iy + 1) * iw];
                    let grow = &g[oy * ow..(oy + 1) * ow];
                    for ix in ix_lo..ix_hi {
                        let go = grow[ix * s + kx - p];
                        acc += go * irow[ix];
                        girow[ix] += wv * go;
                    }
                }
                gw[ky * k + kx] += acc;
            }
        }
    }
}

fn conv_out_len(len: usize, k: usize, s: usize, p: usize, what: &str) -> Result<usize> {
    if len + 2 * p < k {
        return Err(NnError::Config(format!("{what}: input extent {len} smaller than kernel {k}")));
    }
    Ok((len + 2 * p - k) / s + 1)
}

/// Standard 2D convolution. Weight layout `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(NnError::Config("conv2d dimensions must be positive".into()));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
        })
    }

    /// "same" padding, `(k - 1) / 2`.
    pub fn same(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(in_c, out_c, k, stride, (k - 1) / 2, true, rng)
    }

    fn plane(&self, h: usize, w: usize) -> Result<Plane> {
        let oh = conv_out_len(h, self.kernel, self.stride, self.padding, "conv2d")?;
        let ow = conv_out_len(w, self.kernel, self.stride, self.padding, "conv2d")?;
        Ok(Plane { ih: h, iw: w, oh, ow, k: self.kernel, s: self.stride, p: self.padding })
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = x.dims3("conv2d")?;
        if c != self.in_channels {
            return Err(shape_err("conv2d input channels", &[self.in_channels, h, w], x.shape()));
        }
        Ok((h, w))
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input[..] else { return Err(shape_err("conv2d", &[self.in_channels, 0, 0], input)) };
        if c != self.in_channels {
            return Err(shape_err("conv2d input channels", &[self.in_channels, h, w], input));
        }
        let pl = self.plane(h, w)?;
        Ok(vec![self.out_channels, pl.oh, pl.ow])
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w) = self.check_input(x)?;
        let pl = self.plane(h, w)?;
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut out = Tensor::zeros(&[self.out_channels, pl.oh, pl.ow]);
        let wd = self.weight.data();
        for o in 0..self.out_channels {
            let oplane = &mut out.data[o * ohw..(o + 1) * ohw];
            if let Some(b) = &self.bias {
                oplane.iter_mut().for_each(|v| *v = b.data[o]);
            }
            for i in 0..self.in_channels {
                let wk = &wd[(o * self.in_channels + i) * kk..][..kk];
                pl.conv_forward(&x.data[i * ihw..(i + 1) * ihw], wk, oplane);
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let (_, h, w) = x.dims3("conv2d").expect("cached input");
        let pl = self.plane(h, w).expect("validated in forward");
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut gin = Tensor::zeros(x.shape());
        let (gw, rest) = grads.split_first_mut().expect("conv2d grads");
        for o in 0..self.out_channels {
            let gplane = &g.data[o * ohw..(o + 1) * ohw];
            if self.bias.is_some() {
                rest[0].data[o] += gplane.iter().sum::<f64>();
            }
            for i in 0..self.in_channels {
                let off = (o * self.in_channels + i) * kk;
                pl.conv_backward(
                    &x.data[i * ihw..(i + 1) * ihw],
                    &self.weight.data[off..off + kk],
                    gplane,
                    &mut gw.data[off..off + kk],
                    &mut gin.data[i * ihw..(i + 1) * ihw],
                );
            }
        }
        gin
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.out_shape(input)?;
        Ok((self.out_channels * self.in_channels * self.kernel * self.kernel * out[1] * out[2]) as u64)
    }
}

/// Per-channel 2D convolution. Weight layout `[C, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseConv2d {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if channels == 0 || kernel == 0 || stride == 0 {
            return Err(NnError::Config("depthwise dimensions must be positive".into()));
        }
        Ok(Self {
            channels,
            kernel,
            stride,
            padding,
            weight: Tensor::he_uniform(&[channels, kernel, kernel], kernel * kernel, rng),
            bias: bias.then(|| Tensor::zeros(&[channels])),
        })
    }

    fn plane(&self, h: usize, w: usize) -> Result<Plane> {
        let oh = conv_out_len(h, self.kernel, self.stride, self.padding, "depthwise")?;
        let ow = conv_out_len(w, self.kernel, self.stride, self.padding, "depthwise")?;
        Ok(Plane { ih: h, iw: w, oh, ow, k: self.kernel, s: self.stride, p: self.padding })
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input[..] else { return Err(shape_err("depthwise", &[self.channels, 0, 0], input)) };
        if c != self.channels {
            return Err(shape_err("depthwise channels", &[self.channels, h, w], input));
        }
        let pl = self.plane(h, w)?;
        Ok(vec![c, pl.oh, pl.ow])
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out_shape(x.shape())?;
        let (c, h, w) = x.dims3("depthwise")?;
        let pl = self.plane(h, w)?;
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut out = Tensor::zeros(&[c, pl.oh, pl.ow]);
        for ch in 0..c {
            let oplane = &mut out.data[ch * ohw..(ch + 1) * ohw];
            if let Some(b) = &self.bias {
                oplane.iter_mut().for_each(|v| *v = b.data[ch]);
            }
            pl.conv_forward(&x.data[ch * ihw..(ch + 1) * ihw], &self.weight.data[ch * kk..(ch + 1) * kk], oplane);
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let (c, h, w) = x.dims3("depthwise").expect("cached input");
        let pl = self.plane(h, w).expect("validated in forward");
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut gin = Tensor::zeros(x.shape());
        let (gw, rest) = grads.split_first_mut().expect("depthwise grads");
        for ch in 0..c {
            let gplane = &g.data[ch * ohw..(ch + 1) * ohw];
            if self.bias.is_some() {
                rest[0].data[ch] += gplane.iter().sum::<f64>();
            }
            pl.conv_backward(
                &x.data[ch * ihw..(ch + 1) * ihw],
                &self.weight.data[ch * kk..(ch + 1) * kk],
                gplane,
                &mut gw.data[ch * kk..(ch + 1) * kk],
                &mut gin.data[ch * ihw..(ch + 1) * ihw],
            );
        }
        gin
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.out_shape(input)?;
        Ok((self.channels * self.kernel * self.kernel * out[1] * out[2]) as u64)
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]). Weight layout
/// `[in, out, k, k]`; output extent `(n - 1) s - 2p + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(NnError::Config("transposed conv dimensions must be positive".into()));
        }
        if 2 * padding >= kernel + stride {
            return Err(NnError::Config("transposed conv padding too large".into()));
        }
        // Each output sees about in * k² / s² taps.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::he_uniform(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
        })
    }

    fn plane(&self, h: usize, w: usize) -> Plane {
        let up = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.padding;
        Plane { ih: h, iw: w, oh: up(h), ow: up(w), k: self.kernel, s: self.stride, p: self.padding }
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input[..] else { return Err(shape_err("conv_transpose", &[self.in_channels, 0, 0], input)) };
        if c != self.in_channels || h == 0 || w == 0 {
            return Err(shape_err("conv_transpose channels", &[self.in_channels, h, w], input));
        }
        let pl = self.plane(h, w);
        Ok(vec![self.out_channels, pl.oh, pl.ow])
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = self.out_shape(x.shape())?;
        let (_, h, w) = x.dims3("conv_transpose")?;
        let pl = self.plane(h, w);
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut out = Tensor::zeros(&shape);
        for o in 0..self.out_channels {
            let oplane = &mut out.data[o * ohw..(o + 1) * ohw];
            if let Some(b) = &self.bias {
                oplane.iter_mut().for_each(|v| *v = b.data[o]);
            }
            for i in 0..self.in_channels {
                let off = (i * self.out_channels + o) * kk;
                pl.tconv_forward(&x.data[i * ihw..(i + 1) * ihw], &self.weight.data[off..off + kk], oplane);
            }
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let (_, h, w) = x.dims3("conv_transpose").expect("cached input");
        let pl = self.plane(h, w);
        let (ihw, ohw, kk) = (h * w, pl.oh * pl.ow, self.kernel * self.kernel);
        let mut gin = Tensor::zeros(x.shape());
        let (gw, rest) = grads.split_first_mut().expect("conv_transpose grads");
        for o in 0..self.out_channels {
            let gplane = &g.data[o * ohw..(o + 1) * ohw];
            if self.bias.is_some() {
                rest[0].data[o] += gplane.iter().sum::<f64>();
            }
            for i in 0..self.in_channels {
                let off = (i * self.out_channels + o) * kk;
                pl.tconv_backward(
                    &x.data[i * ihw..(i + 1) * ihw],
                    &self.weight.data[off..off + kk],
                    gplane,
                    &mut gw.data[off..off + kk],
                    &mut gin.data[i * ihw..(i + 1) * ihw],
                );
            }
        }
        gin
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        self.out_shape(input)?;
        Ok((self.in_channels * self.out_channels * self.kernel * self.kernel * input[1] * input[2]) as u64)
    }
}

/// Max pooling with a square window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool2d {
    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let [c, h, w] = input[..] else { return Err(shape_err("maxpool", &[0, 0, 0], input)) };
        Ok(vec![c, conv_out_len(h, self.kernel, self.stride, 0, "maxpool")?, conv_out_len(w, self.kernel, self.stride, 0, "maxpool")?])
    }

    pub(crate) fn forward_indexed(&self, x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.out_shape(x.shape())?;
        let (c, h, w) = x.dims3("maxpool")?;
        let (oh, ow) = (shape[1], shape[2]);
        let mut out = Tensor::zeros(&shape);
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = ch * h * w + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = ch * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    argmax[o] = at;
                }
            }
        }
        Ok((out, argmax))
    }

    pub(crate) fn backward_indexed(in_shape: &[usize], argmax: &[usize], g: &Tensor) -> Tensor {
        let mut gin = Tensor::zeros(in_shape);
        for (go, &at) in g.data.iter().zip(argmax) {
            gin.data[at] += go;
        }
        gin
    }
}

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(NnError::Config("dense dimensions must be positive".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weight: Tensor::he_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.inputs || x.shape().len() != 1 {
            return Err(shape_err("dense input", &[self.inputs], x.shape()));
        }
        let mut out = self.bias.clone();
        for (o, y) in out.data.iter_mut().enumerate() {
            let row = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
            *y += row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>();
        }
        Ok(out)
    }

    fn backward(&self, x: &Tensor, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let mut gin = Tensor::zeros(&[self.inputs]);
        let (gw, gb) = grads.split_at_mut(1);
        for (o, &go) in g.data.iter().enumerate() {
            gb[0].data[o] += go;
            let row = &self.weight.data[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[0].data[o * self.inputs..(o + 1) * self.inputs];
            for ((gwv, xv), (gi, wv)) in grow.iter_mut().zip(&x.data).zip(gin.data.iter_mut().zip(row)) {
                *gwv += go * xv;
                *gi += go * wv;
            }
        }
        gin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Depthwise(DepthwiseConv2d),
    ConvTranspose(ConvTranspose2d),
    MaxPool(MaxPool2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    Reshape(Vec<usize>),
    Blaze(Box<BlazeBlock>),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Depthwise(_) => "depthwise",
            Layer::ConvTranspose(_) => "conv_transpose",
            Layer::MaxPool(_) => "maxpool",
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Reshape(_) => "reshape",
            Layer::Blaze(_) => "blaze",
        }
    }

    pub fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Cache)> {
        let keep_input = |x: &Tensor| if keep { Cache::Input(x.clone()) } else { Cache::None };
        Ok(match self {
            Layer::Conv2d(l) => (l.forward(x)?, keep_input(x)),
            Layer::Depthwise(l) => (l.forward(x)?, keep_input(x)),
            Layer::ConvTranspose(l) => (l.forward(x)?, keep_input(x)),
            Layer::Dense(l) => (l.forward(x)?, keep_input(x)),
            Layer::MaxPool(l) => {
                let (y, argmax) = l.forward_indexed(x)?;
                (y, if keep { Cache::Pool { in_shape: x.shape().to_vec(), argmax } } else { Cache::None })
            }
            Layer::Relu => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                let c = if keep { Cache::Output(y.clone()) } else { Cache::None };
                (y, c)
            }
            Layer::Sigmoid => {
                let mut y = x.clone();
                y.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                let c = if keep { Cache::Output(y.clone()) } else { Cache::None };
                (y, c)
            }
            Layer::Reshape(shape) => {
                let y = x.clone().reshape(shape)?;
                (y, Cache::Shape(x.shape().to_vec()))
            }
            Layer::Blaze(b) => b.forward(x, keep)?,
        })
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grads`, which holds exactly [`Layer::param_tensors`] slots.
    pub fn backward(&self, cache: &Cache, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        match (self, cache) {
            (Layer::Conv2d(l), Cache::Input(x)) => l.backward(x, g, grads),
            (Layer::Depthwise(l), Cache::Input(x)) => l.backward(x, g, grads),
            (Layer::ConvTranspose(l), Cache::Input(x)) => l.backward(x, g, grads),
            (Layer::Dense(l), Cache::Input(x)) => l.backward(x, g, grads),
            (Layer::MaxPool(_), Cache::Pool { in_shape, argmax }) => {
                MaxPool2d::backward_indexed(in_shape, argmax, g)
            }
            (Layer::Relu, Cache::Output(y)) => {
                let mut gin = g.clone();
                for (gi, yv) in gin.data.iter_mut().zip(&y.data) {
                    if *yv <= 0.0 {
                        *gi = 0.0;
                    }
                }
                gin
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut gin = g.clone();
                for (gi, yv) in gin.data.iter_mut().zip(&y.data) {
                    *gi *= yv * (1.0 - yv);
                }
                gin
            }
            (Layer::Reshape(_), Cache::Shape(s)) => g.clone().reshape(s).expect("same element count"),
            (Layer::Blaze(b), Cache::Block(c)) => b.backward(c, g, grads),
            (layer, _) => panic!("{} backward called without a training cache", layer.name()),
        }
    }

    pub fn param_tensors(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Depthwise(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::ConvTranspose(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Blaze(b) => b.params(),
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Depthwise(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::ConvTranspose(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Blaze(b) => b.params_mut(),
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let wb = |bias: bool| {
            let mut v = vec!["weight".to_string()];
            if bias {
                v.push("bias".into());
            }
            v
        };
        match self {
            Layer::Conv2d(l) => wb(l.bias.is_some()),
            Layer::Depthwise(l) => wb(l.bias.is_some()),
            Layer::ConvTranspose(l) => wb(l.bias.is_some()),
            Layer::Dense(_) => wb(true),
            Layer::Blaze(b) => b.param_names(),
            _ => vec![],
        }
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv2d(l) => l.out_shape(input),
            Layer::Depthwise(l) => l.out_shape(input),
            Layer::ConvTranspose(l) => l.out_shape(input),
            Layer::MaxPool(l) => l.out_shape(input),
            Layer::Dense(l) => {
                if input.iter().product::<usize>() != l.inputs || input.len() != 1 {
                    return Err(shape_err("dense input", &[l.inputs], input));
                }
                Ok(vec![l.outputs])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Reshape(s) => {
                if s.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(shape_err("reshape", s, input));
                }
                Ok(s.clone())
            }
            Layer::Blaze(b) => b.out_shape(input),
        }
    }

    /// Multiply-accumulates per forward pass; bias adds, activations and
    /// pooling comparisons are not counted.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        match self {
            Layer::Conv2d(l) => l.macs(input),
            Layer::Depthwise(l) => l.macs(input),
            Layer::ConvTranspose(l) => l.macs(input),
            Layer::Dense(l) => {
                self.out_shape(input)?;
                Ok((l.inputs * l.outputs) as u64)
            }
            Layer::Blaze(b) => b.macs(input),
            _ => {
                self.out_shape(input)?;
                Ok(0)
            }
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur, false)?.0;
        }
        Ok(cur)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(&cur, true)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn backward(&self, caches: &[Cache], g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_tensors();
        }
        let mut cur = g.clone();
        for ((l, c), &off) in self.layers.iter().zip(caches).zip(&offsets).rev() {
            cur = l.backward(c, &cur, &mut grads[off..off + l.param_tensors()]);
        }
        cur
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.param_names().into_iter().map(move |n| format!("{prefix}{i}.{n}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        super::count_params(&self.params())
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        super::zero_grads(&self.params())
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for l in &self.layers {
            s = l.out_shape(&s)?;
        }
        Ok(s)
    }

    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let mut s = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            total += l.macs(&s)?;
            s = l.out_shape(&s)?;
        }
        Ok(total)
    }

    /// `2 × MACs` per forward pass.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        Ok(2 * self.macs(input)?)
    }

    /// Which ReLU units are active and which max-pool taps win at `x`. The
    /// network is smooth in a neighbourhood where this stays fixed.
    pub fn activation_pattern(&self, x: &Tensor) -> Result<Vec<u64>> {
        let (_, caches) = self.forward_train(x)?;
        let mut out = Vec::new();
        self.pattern_into(&caches, &mut out);
        Ok(out)
    }

    pub(crate) fn pattern_into(&self, caches: &[Cache], out: &mut Vec<u64>) {
        for (l, c) in self.layers.iter().zip(caches) {
            match (l, c) {
                (Layer::Relu, Cache::Output(y)) => out.extend(y.data.iter().map(|v| u64::from(*v > 0.0))),
                (Layer::MaxPool(_), Cache::Pool { argmax, .. }) => out.extend(argmax.iter().map(|&i| i as u64)),
                (Layer::Blaze(b), Cache::Block(bc)) => b.pattern_into(bc, out),
                _ => {}
            }
        }
    }
}
