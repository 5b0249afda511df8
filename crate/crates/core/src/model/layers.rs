//! Building blocks shared by the relighting network and the probe VAE.

use candle_core::{Tensor, D};

use super::conv;
use super::params::ParamStore;
use crate::error::Result;

const NORM_EPS: f64 = 1e-5;
/// Keeps the logistic head strictly inside `(0, 1)` even where f32 `tanh`
/// saturates.
const SQUASH_MARGIN: f64 = 1e-6;

/// Per-sample, per-channel normalization over the spatial axes (no affine).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let flat = x.reshape((n, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let out = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(out.reshape((n, c, h, w))?)
}

pub fn elu(x: &Tensor) -> Result<Tensor> {
    Ok(x.elu(1.0)?)
}

/// Logistic squashing into `(0, 1)`.
pub fn squash(x: &Tensor) -> Result<Tensor> {
    let s = ((x * 0.5)?.tanh()? + 1.0)? * 0.5;
    Ok(((s? * (1.0 - 2.0 * SQUASH_MARGIN))? + SQUASH_MARGIN)?)
}

/// Spatial mean, `(N, C, H, W) → (N, C)`.
pub fn global_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.mean(D::Minus1)?)
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[c_out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps fixed weights of layout `(c_out, c_in, k, k)`.
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Copy whose weights are excluded from gradient tracking.
    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detach(),
            bias: self.bias.as_ref().map(Tensor::detach),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; weight layout `(c_in, c_out, k, k)`.
#[derive(Debug, Clone)]
pub struct Deconv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        // each output pixel sees about c_in·(k/stride)² inputs
        let fan_in = (c_in * kernel * kernel / (stride * stride)).max(1);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[c_in, c_out, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[c_out], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv_transpose2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Instance,
    None,
}

impl Norm {
    fn apply(self, x: Tensor) -> Result<Tensor> {
        match self {
            Norm::Instance => instance_norm(&x),
            Norm::None => Ok(x),
        }
    }

    /// A bias in front of instance normalization is cancelled by the mean
    /// subtraction, so normalized convolutions carry none.
    fn conv_bias(self) -> bool {
        self == Norm::None
    }
}

/// conv → optional instance norm → ELU
#[derive(Debug, Clone)]
pub struct ConvAct {
    conv: Conv,
    norm: Norm,
}

impl ConvAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: Norm,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, name, c_in, c_out, kernel, stride, padding, norm.conv_bias())?,
            norm,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        elu(&self.norm.apply(self.conv.forward(x)?)?)
    }
}

/// deconv → optional instance norm → ELU
#[derive(Debug, Clone)]
pub struct DeconvAct {
    deconv: Deconv,
    norm: Norm,
}

impl DeconvAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        norm: Norm,
    ) -> Result<Self> {
        Ok(Self {
            deconv: Deconv::new(store, name, c_in, c_out, kernel, stride, padding, norm.conv_bias())?,
            norm,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        elu(&self.norm.apply(self.deconv.forward(x)?)?)
    }
}

/// Two 3×3 convolutions, each followed by normalization and ELU.
#[derive(Debug, Clone)]
pub struct DualConv {
    first: ConvAct,
    second: ConvAct,
}

impl DualConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, norm: Norm) -> Result<Self> {
        Ok(Self {
            first: ConvAct::new(store, &format!("{name}.0"), c_in, c_out, 3, 1, 1, norm)?,
            second: ConvAct::new(store, &format!("{name}.1"), c_out, c_out, 3, 1, 1, norm)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(x)?)
    }
}

/// Back-projection downsampling by 2: `l0 = down(x)`, `e = up(l0) − x`,
/// output `l0 + down(e)`.
#[derive(Debug, Clone)]
pub struct DownProjection {
    down: ConvAct,
    up: DeconvAct,
    down_residual: ConvAct,
}

impl DownProjection {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, norm: Norm) -> Result<Self> {
        Ok(Self {
            down: ConvAct::new(store, &format!("{name}.down"), c_in, c_out, 4, 2, 1, norm)?,
            up: DeconvAct::new(store, &format!("{name}.up"), c_out, c_in, 4, 2, 1, norm)?,
            down_residual: ConvAct::new(store, &format!("{name}.down_residual"), c_in, c_out, 4, 2, 1, norm)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let low = self.down.forward(x)?;
        let err = (self.up.forward(&low)? - x)?;
        Ok((low + self.down_residual.forward(&err)?)?)
    }
}

/// Back-projection upsampling by 2: `h0 = up(x)`, `e = down(h0) − x`,
/// output `h0 + up(e)`.
#[derive(Debug, Clone)]
pub struct UpProjection {
    up: DeconvAct,
    down: ConvAct,
    up_residual: DeconvAct,
}

impl UpProjection {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, norm: Norm) -> Result<Self> {
        Ok(Self {
            up: DeconvAct::new(store, &format!("{name}.up"), c_in, c_out, 4, 2, 1, norm)?,
            down: ConvAct::new(store, &format!("{name}.down"), c_out, c_in, 4, 2, 1, norm)?,
            up_residual: DeconvAct::new(store, &format!("{name}.up_residual"), c_in, c_out, 4, 2, 1, norm)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let high = self.up.forward(x)?;
        let err = (self.down.forward(&high)? - x)?;
        Ok((high + self.up_residual.forward(&err)?)?)
    }
}

/// `x + conv(ELU(conv(x)))`
#[derive(Debug, Clone)]
pub struct ResBlock {
    first: ConvAct,
    second: Conv,
    norm: Norm,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, norm: Norm) -> Result<Self> {
        Ok(Self {
            first: ConvAct::new(store, &format!("{name}.0"), channels, channels, 3, 1, 1, norm)?,
            second: Conv::new(store, &format!("{name}.1"), channels, channels, 3, 1, 1, norm.conv_bias())?,
            norm,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let branch = self.norm.apply(self.second.forward(&self.first.forward(x)?)?)?;
        Ok((x + branch)?)
    }
}
