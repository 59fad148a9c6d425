//! Grad-CAM style heatmaps for one output pixel over the decoder levels.
//!
//! The selected scalar is the final change-map value `x_0` at the pixel. The
//! chain runs without gradients down to `x_1`; the last step is repeated with
//! zero taps added to the decoder stage outputs so that the gradient of the
//! scalar with respect to each stage feature can be read back.

use candle_core::{DType, Tensor};

use crate::data::{BitemporalPair, TensorBatch};
use crate::error::{Error, Result};
use crate::predictor::CadmModel;
use crate::rng::stream;
use crate::sampler::{sample_chain_until, ReverseChain, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// One map per decoder level, deepest (coarsest) first, each upscaled to
/// the input size with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmaps {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<Vec<f32>>,
    /// Native `(h, w)` of each level before upscaling.
    pub level_sizes: Vec<(usize, usize)>,
}

/// Channel weights from spatially averaged gradients, weighted sum of the
/// feature channels, rectified and divided by its maximum. A map without
/// positive evidence is all zeros.
pub fn cam_from_gradients(feature: &Tensor, grad: &Tensor) -> Result<Vec<f64>> {
    if feature.dims() != grad.dims() {
        return Err(Error::Shape(format!("feature {:?} vs gradient {:?}", feature.dims(), grad.dims())));
    }
    let (b, c, h, w) = feature.dims4()?;
    if b != 1 {
        return Err(Error::Shape("heatmaps are computed for a single pair".into()));
    }
    let f: Vec<f64> = feature.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let g: Vec<f64> = grad.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let gs = &g[ch * plane..(ch + 1) * plane];
        let weight = gs.iter().sum::<f64>() / plane as f64;
        for (v, &x) in cam.iter_mut().zip(&f[ch * plane..(ch + 1) * plane]) {
            *v += weight * x;
        }
    }
    let max = cam.iter().fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v = v.max(0.0) / max);
    } else {
        cam.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(cam)
}

/// Nearest-neighbour resize of a `h x w` grid to `oh x ow`.
pub fn upscale_nearest(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = y * h / oh;
        for x in 0..ow {
            out.push(map[sy * w + x * w / ow] as f32);
        }
    }
    out
}

/// Heatmaps for `pixel = (y, x)` of `pair`. `output_scale` multiplies the
/// selected scalar before differentiation.
pub fn pixel_heatmaps(
    model: &CadmModel,
    schedule: &NoiseSchedule,
    pair: &BitemporalPair,
    pixel: (usize, usize),
    cfg: &SamplerConfig,
    output_scale: f64,
) -> Result<Heatmaps> {
    let (h, w) = (pair.label.height, pair.label.width);
    let (py, px) = pixel;
    if py >= h || px >= w {
        return Err(Error::InvalidArgument(format!("pixel ({py}, {px}) outside {h}x{w}")));
    }
    cfg.validate()?;
    let dtype = model.dtype();
    let batch = TensorBatch::from_pairs(&[pair], dtype)?;
    let cond = model.encode_conditions(&batch.image_a, &batch.image_b)?;
    let chain = ReverseChain::new(schedule, cfg.steps)?;
    let mut rngs = vec![stream(cfg.seed, &[pair.key(), 0])];
    let x1 = sample_chain_until(model, &cond, &chain, &mut rngs, (h, w), dtype, 1)?.detach();

    let taps = model.decoder_taps(1)?;
    let (eps, feats) = model.forward_tapped(&x1, &cond, &[chain.model_ts[0]], Some(&taps))?;
    let s = &chain.schedule;
    let coef = s.beta(1) / (1.0 - s.alpha_bar(1)).sqrt();
    let x0 = (&x1 - eps.affine(coef, 0.0)?)?.affine(1.0 / s.alpha(1).sqrt(), 0.0)?;
    let scalar = x0.narrow(2, py, 1)?.narrow(3, px, 1)?.sum_all()?.affine(output_scale, 0.0)?;
    let grads = scalar.backward()?;

    let mut levels = Vec::with_capacity(feats.len());
    let mut level_sizes = Vec::with_capacity(feats.len());
    for (feat, tap) in feats.iter().zip(&taps.taps) {
        let (_, _, fh, fw) = feat.dims4()?;
        let g = match grads.get(tap.as_tensor()) {
            Some(g) => g.clone(),
            None => feat.zeros_like()?,
        };
        let cam = cam_from_gradients(&feat.detach(), &g)?;
        levels.push(upscale_nearest(&cam, fh, fw, h, w));
        level_sizes.push((fh, fw));
    }
    Ok(Heatmaps {
        height: h,
        width: w,
        levels,
        level_sizes,
    })
}
