//! Noise suppression-based semantic enhancement.
//!
//! The x_t-branch feature is filtered in the frequency domain by a learnable
//! real map, then turned into a pixel attention map and a channel attention
//! vector that gate the layer-normalised conditional feature.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{ChannelLayerNorm, Conv2d, Init, ParamPath};
use crate::spectral::SpectralBasis;

/// `IFFT(A ⊗ FFT(Conv1x1(m)))` with a real attention map `A` over the half spectrum.
#[derive(Debug, Clone)]
pub struct NoiseSuppressor {
    pub pre: Conv2d,
    /// `(C, H, W/2 + 1)`.
    pub attention: Var,
    basis: SpectralBasis,
}

impl NoiseSuppressor {
    /// Both the pre-convolution and the attention map start as the identity,
    /// so a fresh suppressor passes features through unchanged.
    pub fn new(p: &mut ParamPath, channels: usize, height: usize, width: usize, dtype: DType) -> Result<Self> {
        let basis = SpectralBasis::new(height, width, dtype)?;
        let (sh, sw) = basis.spectrum_shape();
        let pre = Conv2d::with_init(&mut p.pp("pre"), channels, channels, 1, 1, Init::Zeros, Init::Zeros)?;
        let eye = Tensor::eye(channels, dtype, &candle_core::Device::Cpu)?.reshape((channels, channels, 1, 1))?;
        pre.weight.set(&eye)?;
        Ok(Self {
            pre,
            attention: p.var("attention", &[channels, sh, sw], Init::Const(1.0))?,
            basis,
        })
    }

    pub fn forward(&self, m: &Tensor) -> Result<Tensor> {
        noise_suppress(m, self.attention.as_tensor(), &self.pre, &self.basis)
    }
}

pub fn noise_suppress(m: &Tensor, attention: &Tensor, pre: &Conv2d, basis: &SpectralBasis) -> Result<Tensor> {
    let (_, c, _, _) = m.dims4()?;
    let (sh, sw) = basis.spectrum_shape();
    if attention.dims() != [c, sh, sw] {
        return Err(Error::Shape(format!(
            "attention map {:?} does not match spectrum ({c}, {sh}, {sw})",
            attention.dims()
        )));
    }
    let spectrum = basis.rfft2(&pre.forward(m)?)?;
    basis.irfft2(&spectrum.scale(attention)?)
}

/// `pix ⊗ chan ⊗ ln_m` with the pixel map `(B,1,H,W)` and channel vector
/// `(B,C,1,1)` broadcast over `ln_m: (B,C,H,W)`.
pub fn fuse_maps(pixel: &Tensor, channel: &Tensor, ln_m: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = ln_m.dims4()?;
    if pixel.dims() != [b, 1, h, w] || channel.dims() != [b, c, 1, 1] {
        return Err(Error::Shape(format!(
            "attention maps {:?} / {:?} incompatible with feature {:?}",
            pixel.dims(),
            channel.dims(),
            ln_m.dims()
        )));
    }
    Ok(ln_m.broadcast_mul(pixel)?.broadcast_mul(channel)?)
}

/// Pixel- and channel-attention fusion of a conditional feature with the
/// noise-suppressed x_t feature at the same level.
#[derive(Debug, Clone)]
pub struct AttentionFuse {
    pub norm_x: ChannelLayerNorm,
    pub pixel: Conv2d,
    pub norm_cond: ChannelLayerNorm,
}

impl AttentionFuse {
    /// Initialised so both attention factors start close to one.
    pub fn new(p: &mut ParamPath, channels: usize) -> Result<Self> {
        let fan_in = (channels * 9) as f64;
        Ok(Self {
            norm_x: ChannelLayerNorm::new(&mut p.pp("norm_x"), channels, 1.0)?,
            pixel: Conv2d::with_init(
                &mut p.pp("pixel"),
                channels,
                1,
                3,
                1,
                Init::Normal(0.1 / fan_in.sqrt()),
                Init::Const(1.0),
            )?,
            norm_cond: ChannelLayerNorm::new(&mut p.pp("norm_cond"), channels, 0.0)?,
        })
    }

    /// Returns `(pixel map, channel vector)` computed from the filtered x_t feature.
    pub fn attention_maps(&self, m_filtered: &Tensor) -> Result<(Tensor, Tensor)> {
        let ln = self.norm_x.forward(m_filtered)?;
        let pixel = self.pixel.forward(&ln)?;
        let channel = ln.mean_keepdim(3)?.mean_keepdim(2)?;
        Ok((pixel, channel))
    }

    pub fn forward(&self, m_cond: &Tensor, m_filtered: &Tensor) -> Result<Tensor> {
        if m_cond.dims() != m_filtered.dims() {
            return Err(Error::Shape(format!(
                "attention fusion across levels: {:?} vs {:?}",
                m_cond.dims(),
                m_filtered.dims()
            )));
        }
        let (pixel, channel) = self.attention_maps(m_filtered)?;
        fuse_maps(&pixel, &channel, &self.norm_cond.forward(m_cond)?)
    }
}

/// One pyramid level of the enhancer; the same instance serves both dates.
#[derive(Debug, Clone)]
pub struct Nsse {
    pub suppressor: NoiseSuppressor,
    pub fuse: AttentionFuse,
}

impl Nsse {
    pub fn new(p: &mut ParamPath, channels: usize, height: usize, width: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            suppressor: NoiseSuppressor::new(&mut p.pp("suppress"), channels, height, width, dtype)?,
            fuse: AttentionFuse::new(&mut p.pp("fuse"), channels)?,
        })
    }

    pub fn forward(&self, m_cond: &Tensor, m_x: &Tensor) -> Result<Tensor> {
        self.fuse.forward(m_cond, &self.suppressor.forward(m_x)?)
    }
}
