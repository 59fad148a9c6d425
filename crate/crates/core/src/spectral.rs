//! Real 2-D discrete Fourier transforms built from dense DFT matrices.
//!
//! Feature maps here are at most a few dozen pixels on a side, so a matmul
//! against a precomputed basis is both fast and differentiable through the
//! ordinary tensor ops. Spectra use the half-spectrum layout of real
//! transforms, `W/2 + 1` frequencies along the width.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A complex half spectrum stored as separate real and imaginary parts.
/// Frequencies are laid out width-major, `(B, C, W/2+1, H)`, which saves
/// two transposes per transform.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub re: Tensor,
    pub im: Tensor,
}

#[derive(Debug, Clone)]
pub struct SpectralBasis {
    height: usize,
    width: usize,
    // H x H, symmetric.
    cos_h: Tensor,
    sin_h: Tensor,
    // W x (W/2+1), forward.
    cos_w: Tensor,
    sin_w: Tensor,
    // (W/2+1) x W, inverse with Hermitian weights and 1/W folded in.
    icos_w: Tensor,
    isin_w: Tensor,
}

fn matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            v.push(f(r, c));
        }
    }
    Ok(Tensor::from_vec(v, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Angle `2 pi k n / len` with the product reduced modulo `len` first, which
/// keeps the basis accurate for larger sizes.
fn angle(k: usize, n: usize, len: usize) -> f64 {
    2.0 * PI * ((k * n) % len) as f64 / len as f64
}

impl SpectralBasis {
    pub fn new(height: usize, width: usize, dtype: DType) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty spectral basis".into()));
        }
        let wf = width / 2 + 1;
        let hermitian = |k: usize| {
            if k == 0 || (width.is_multiple_of(2) && k == width / 2) {
                1.0
            } else {
                2.0
            }
        };
        Ok(Self {
            height,
            width,
            cos_h: matrix(height, height, |a, b| angle(a, b, height).cos(), dtype)?,
            sin_h: matrix(height, height, |a, b| angle(a, b, height).sin(), dtype)?,
            cos_w: matrix(width, wf, |n, k| angle(k, n, width).cos(), dtype)?,
            sin_w: matrix(width, wf, |n, k| angle(k, n, width).sin(), dtype)?,
            icos_w: matrix(wf, width, |k, n| hermitian(k) * angle(k, n, width).cos() / width as f64, dtype)?,
            isin_w: matrix(wf, width, |k, n| hermitian(k) * angle(k, n, width).sin() / width as f64, dtype)?,
        })
    }

    pub fn spectrum_shape(&self) -> (usize, usize) {
        (self.height, self.width / 2 + 1)
    }

    fn check_spatial(&self, x: &Tensor, last: usize) -> Result<(usize, usize)> {
        let (b, c, h, w) = x.dims4()?;
        if h != self.height || w != last {
            return Err(Error::Shape(format!(
                "spectral basis for {}x{} applied to {:?}",
                self.height,
                self.width,
                x.dims()
            )));
        }
        Ok((b, c))
    }

    /// Right-multiplies the last axis of an NCHW-like tensor by `m`.
    fn last_axis(x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let out_cols = m.dim(1)?;
        let y = x.reshape((rows, dims[dims.len() - 1]))?.matmul(m)?;
        let mut out = dims;
        *out.last_mut().expect("rank 4") = out_cols;
        Ok(y.reshape(out)?)
    }

    /// Swaps the two spatial axes into a contiguous tensor.
    fn swap(x: &Tensor) -> Result<Tensor> {
        Ok(x.transpose(2, 3)?.contiguous()?)
    }

    /// Forward real 2-D FFT: `(B, C, H, W)` real to a half spectrum.
    pub fn rfft2(&self, x: &Tensor) -> Result<Spectrum> {
        self.check_spatial(x, self.width)?;
        // Width half-spectrum DFT of the real signal, then swap so the
        // height DFT also runs along the last axis.
        let c = Self::swap(&Self::last_axis(x, &self.cos_w)?)?;
        let s = Self::swap(&Self::last_axis(x, &self.sin_w)?)?;
        let re = (Self::last_axis(&c, &self.cos_h)? - Self::last_axis(&s, &self.sin_h)?)?;
        let im = (Self::last_axis(&s, &self.cos_h)? + Self::last_axis(&c, &self.sin_h)?)?.neg()?;
        Ok(Spectrum { re, im })
    }

    /// Inverse of [`rfft2`](Self::rfft2). The spectrum need not be Hermitian;
    /// the imaginary residue of the inverse is discarded, matching the usual
    /// `irfft2` convention.
    pub fn irfft2(&self, s: &Spectrum) -> Result<Tensor> {
        let wf = self.width / 2 + 1;
        for part in [&s.re, &s.im] {
            let (_, _, a, b) = part.dims4()?;
            if (a, b) != (wf, self.height) {
                return Err(Error::Shape(format!(
                    "spectrum {:?} does not match a {}x{} basis",
                    part.dims(),
                    self.height,
                    self.width
                )));
            }
        }
        let inv_h = 1.0 / self.height as f64;
        let qr = (Self::last_axis(&s.re, &self.cos_h)? - Self::last_axis(&s.im, &self.sin_h)?).and_then(|t| t.affine(inv_h, 0.0))?;
        let qi = (Self::last_axis(&s.im, &self.cos_h)? + Self::last_axis(&s.re, &self.sin_h)?).and_then(|t| t.affine(inv_h, 0.0))?;
        let (qr, qi) = (Self::swap(&qr)?, Self::swap(&qi)?);
        Ok((Self::last_axis(&qr, &self.icos_w)? - Self::last_axis(&qi, &self.isin_w)?)?)
    }
}

impl Spectrum {
    /// Multiplies both parts by a real `(C, H, W/2+1)` map broadcast over
    /// the batch axis.
    pub fn scale(&self, map: &Tensor) -> Result<Spectrum> {
        let map = map.transpose(1, 2)?.unsqueeze(0)?;
        Ok(Spectrum {
            re: self.re.broadcast_mul(&map)?,
            im: self.im.broadcast_mul(&map)?,
        })
    }
}
