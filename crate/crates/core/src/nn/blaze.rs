use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Conv2d, DepthwiseConv2d, Layer, MaxPool2d, Sequential};
use super::{shape_err, NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Single,
    Double,
}

/// Shape of one BlazeBlock. `mid_channels` is only used by double blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlazeBlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub mid_channels: usize,
    pub stride: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    5
}

impl BlazeBlockSpec {
    pub fn single(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self { kind: BlockKind::Single, in_channels, out_channels, mid_channels: 0, stride, kernel: 5 }
    }

    pub fn double(in_channels: usize, mid_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self { kind: BlockKind::Double, in_channels, out_channels, mid_channels, stride, kernel: 5 }
    }
}

/// Depthwise-separable residual block: a depthwise/pointwise branch (one or
/// two stages) added to a max-pooled, zero-channel-padded shortcut, then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct BlazeBlock {
    pub spec: BlazeBlockSpec,
    pub branch: Sequential,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    branch: Vec<Cache>,
    in_shape: Vec<usize>,
    pool_argmax: Option<Vec<usize>>,
    output: Tensor,
}

impl BlazeBlock {
    pub fn new(spec: BlazeBlockSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.out_channels < spec.in_channels {
            return Err(NnError::Config(format!(
                "blaze block cannot shrink channels ({} -> {})",
                spec.in_channels, spec.out_channels
            )));
        }
        if spec.stride != 1 && spec.stride != 2 {
            return Err(NnError::Config(format!("blaze block stride must be 1 or 2, got {}", spec.stride)));
        }
        if spec.kernel % 2 == 0 {
            return Err(NnError::Config("blaze block kernel must be odd".into()));
        }
        let pad = (spec.kernel - 1) / 2;
        let k = spec.kernel;
        let mut layers = Vec::new();
        match spec.kind {
            BlockKind::Single => {
                layers.push(Layer::Depthwise(DepthwiseConv2d::new(spec.in_channels, k, spec.stride, pad, false, rng)?));
                layers.push(Layer::Conv2d(Conv2d::new(spec.in_channels, spec.out_channels, 1, 1, 0, true, rng)?));
            }
            BlockKind::Double => {
                if spec.mid_channels == 0 {
                    return Err(NnError::Config("double blaze block needs mid_channels".into()));
                }
                layers.push(Layer::Depthwise(DepthwiseConv2d::new(spec.in_channels, k, spec.stride, pad, false, rng)?));
                layers.push(Layer::Conv2d(Conv2d::new(spec.in_channels, spec.mid_channels, 1, 1, 0, true, rng)?));
                layers.push(Layer::Relu);
                layers.push(Layer::Depthwise(DepthwiseConv2d::new(spec.mid_channels, k, 1, pad, false, rng)?));
                layers.push(Layer::Conv2d(Conv2d::new(spec.mid_channels, spec.out_channels, 1, 1, 0, true, rng)?));
            }
        }
        Ok(Self { spec, branch: Sequential::new(layers) })
    }

    fn check(&self, input: &[usize]) -> Result<()> {
        let [c, h, w] = input[..] else { return Err(shape_err("blaze block", &[self.spec.in_channels, 0, 0], input)) };
        if c != self.spec.in_channels {
            return Err(shape_err("blaze block channels", &[self.spec.in_channels, h, w], input));
        }
        if self.spec.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(NnError::Config(format!("stride-2 blaze block needs even extents, got {h}x{w}")));
        }
        Ok(())
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check(input)?;
        self.branch.out_shape(input)
    }

    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        self.check(input)?;
        self.branch.macs(input)
    }

    pub fn forward(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Cache)> {
        self.check(x.shape())?;
        let (mut y, branch) = if keep {
            self.branch.forward_train(x)?
        } else {
            (self.branch.forward(x)?, Vec::new())
        };
        let (shortcut, pool_argmax) = if self.spec.stride == 2 {
            let (p, a) = MaxPool2d { kernel: 2, stride: 2 }.forward_indexed(x)?;
            (p, Some(a))
        } else {
            (x.clone(), None)
        };
        // Zero channel padding: the shortcut fills the leading channels.
        for (o, s) in y.data_mut().iter_mut().zip(shortcut.data()) {
            *o += s;
        }
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let cache = if keep {
            Cache::Block(Box::new(BlockCache {
                branch,
                in_shape: x.shape().to_vec(),
                pool_argmax,
                output: y.clone(),
            }))
        } else {
            Cache::None
        };
        Ok((y, cache))
    }

    pub(crate) fn pattern_into(&self, cache: &BlockCache, out: &mut Vec<u64>) {
        self.branch.pattern_into(&cache.branch, out);
        if let Some(a) = &cache.pool_argmax {
            out.extend(a.iter().map(|&i| i as u64));
        }
        out.extend(cache.output.data().iter().map(|v| u64::from(*v > 0.0)));
    }

    pub fn backward(&self, cache: &BlockCache, g: &Tensor, grads: &mut [Tensor]) -> Tensor {
        let mut gsum = g.clone();
        for (gi, y) in gsum.data_mut().iter_mut().zip(cache.output.data()) {
            if *y <= 0.0 {
                *gi = 0.0;
            }
        }
        let mut gin = self.branch.backward(&cache.branch, &gsum, grads);
        let n_short: usize = cache.in_shape[0] * gsum.shape()[1] * gsum.shape()[2];
        let gshort = Tensor::from_vec(
            &[cache.in_shape[0], gsum.shape()[1], gsum.shape()[2]],
            gsum.data()[..n_short].to_vec(),
        )
        .expect("shortcut slice");
        let gshort = match &cache.pool_argmax {
            Some(a) => MaxPool2d::backward_indexed(&cache.in_shape, a, &gshort),
            None => gshort,
        };
        for (a, b) in gin.data_mut().iter_mut().zip(gshort.data()) {
            *a += b;
        }
        gin
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.branch.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.branch.params_mut()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.branch.param_names("branch.")
    }
}
