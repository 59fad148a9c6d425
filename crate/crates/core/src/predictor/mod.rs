//! The conditioned noise predictor `eps_theta(x_t, I_a, I_b, t)`.
//!
//! Two siamese residual encoders produce three-level feature pyramids: one
//! encoder sees the raw images, the other sees `x_t` concatenated with each
//! image. Per level, the enhancer turns both dates into a difference feature
//! `Dif^k`, which is added together with the current-step difference
//! `m_xa^k - m_xb^k` into a residual decoder. The deepest level forms the
//! bottleneck.

pub mod nsse;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{upsample2x, silu, Conv2d, GroupNorm, Init, Linear, ParamPath, ParamStore, ResBlock, NORM_GROUPS};
pub use nsse::{fuse_maps, noise_suppress, AttentionFuse, NoiseSuppressor, Nsse};

pub const NUM_LEVELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    /// Square tile side the model is built for; the spectral attention maps
    /// are sized from it.
    pub image_size: usize,
    /// Which difference scales feed the decoder. Scale 3 is the deepest
    /// (coarsest) level, scale 1 the finest.
    pub active_scales: Vec<u8>,
    pub nsse_enabled: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 32,
            num_levels: NUM_LEVELS,
            blocks_per_level: 1,
            time_embed_dim: 64,
            image_size: 64,
            active_scales: vec![1, 2, 3],
            nsse_enabled: true,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_levels != NUM_LEVELS {
            return bad(format!("num_levels must be {NUM_LEVELS}, got {}", self.num_levels));
        }
        if self.image_channels == 0 || self.base_channels == 0 || self.blocks_per_level == 0 {
            return bad("channel and block counts must be positive".into());
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim must be positive and even, got {}", self.time_embed_dim));
        }
        if !self.base_channels.is_multiple_of(2) {
            return bad(format!("base_channels must be even, got {}", self.base_channels));
        }
        let div = 1 << self.num_levels;
        if self.image_size == 0 || !self.image_size.is_multiple_of(div) {
            return bad(format!("image_size {} not divisible by {div}", self.image_size));
        }
        validate_scales(&self.active_scales)
    }

    pub fn level_channels(&self, k: usize) -> usize {
        self.base_channels << k
    }

    /// Spatial side of pyramid level `k` (the stem halves the input once).
    pub fn level_size(&self, k: usize) -> usize {
        self.image_size >> (k + 1)
    }

    /// `(channels, height, width)` for every level.
    pub fn level_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.num_levels)
            .map(|k| (self.level_channels(k), self.level_size(k), self.level_size(k)))
            .collect()
    }

    pub fn scale_active(&self, level: usize) -> bool {
        self.active_scales.contains(&(level as u8 + 1))
    }
}

/// Active scales must be non-empty and contiguous from the deepest scale (3)
/// upward: `{3}`, `{2,3}` or `{1,2,3}`.
pub fn validate_scales(scales: &[u8]) -> Result<()> {
    let mut s = scales.to_vec();
    s.sort_unstable();
    s.dedup();
    let ok = !s.is_empty() && s.len() == scales.len() && *s.last().unwrap() == 3 && s[0] >= 1 && {
        let n = s.len() as u8;
        s.iter().enumerate().all(|(i, &v)| v == 4 - n + i as u8)
    };
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "active scales {scales:?} must be one of [3], [2, 3], [1, 2, 3]"
        )))
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, k: usize) -> &Tensor {
        &self.levels[k]
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv2d,
    stem_norm: GroupNorm,
    levels: Vec<Vec<ResBlock>>,
}

impl Encoder {
    pub fn new(p: &mut ParamPath, in_channels: usize, cfg: &PredictorConfig) -> Result<Self> {
        let c0 = cfg.level_channels(0);
        let stem = Conv2d::new(&mut p.pp("stem"), in_channels, c0, 3, 2)?;
        let stem_norm = GroupNorm::new(&mut p.pp("stem_norm"), c0, NORM_GROUPS)?;
        let mut levels = Vec::with_capacity(cfg.num_levels);
        for k in 0..cfg.num_levels {
            let mut lp = p.pp(&format!("level{k}"));
            let c_out = cfg.level_channels(k);
            let c_in = if k == 0 { c0 } else { cfg.level_channels(k - 1) };
            let mut blocks = Vec::with_capacity(cfg.blocks_per_level);
            for i in 0..cfg.blocks_per_level {
                let (ci, stride) = if i == 0 { (c_in, if k == 0 { 1 } else { 2 }) } else { (c_out, 1) };
                blocks.push(ResBlock::new(&mut lp.pp(&format!("block{i}")), ci, c_out, stride)?);
            }
            levels.push(blocks);
        }
        Ok(Self { stem, stem_norm, levels })
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let mut h = silu(&self.stem_norm.forward(&self.stem.forward(x)?)?)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for blocks in &self.levels {
            for b in blocks {
                h = b.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(FeaturePyramid { levels: out })
    }
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`: the first half holds
/// sines, the second cosines, over geometrically spaced frequencies.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    fn new(p: &mut ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            dim,
            fc1: Linear::new(&mut p.pp("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&mut p.pp("fc2"), 2 * dim, 2 * dim)?,
        })
    }

    fn forward(&self, ts: &[usize], dtype: DType) -> Result<Tensor> {
        let e = sinusoidal_embedding(ts, self.dim, dtype)?;
        let h = self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)?;
        silu(&h)
    }
}

fn add_time(h: &Tensor, proj: &Linear, temb: &Tensor) -> Result<Tensor> {
    let t = proj.forward(temb)?;
    let (b, c) = t.dims2()?;
    Ok(h.broadcast_add(&t.reshape((b, c, 1, 1))?)?)
}

#[derive(Debug, Clone)]
struct DecoderStage {
    merge: Conv2d,
    time: Linear,
    blocks: Vec<ResBlock>,
}

impl DecoderStage {
    fn new(p: &mut ParamPath, channels: usize, temb_dim: usize, blocks: usize) -> Result<Self> {
        Ok(Self {
            merge: Conv2d::new(&mut p.pp("merge"), 2 * channels, channels, 1, 1)?,
            time: Linear::new(&mut p.pp("time"), temb_dim, channels)?,
            blocks: (0..blocks)
                .map(|i| ResBlock::new(&mut p.pp(&format!("block{i}")), channels, channels, 1))
                .collect::<Result<_>>()?,
        })
    }

    /// `diff` carries the difference features injected by addition; `skip` is
    /// the symmetric x_t feature concatenated in.
    fn forward(&self, diff: &Tensor, skip: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.merge.forward(&Tensor::cat(&[diff, skip], 1)?)?;
        let mut h = add_time(&h, &self.time, temb)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    /// Ordered deepest first: stage 0 is the bottleneck at level 2.
    stages: Vec<DecoderStage>,
    /// `reduce[i]` maps stage `i` output to the channel count of the next level.
    reduce: Vec<Conv2d>,
    head_reduce: Conv2d,
    head_conv: Conv2d,
    head_norm: GroupNorm,
    head_out: Conv2d,
}

impl Decoder {
    fn new(p: &mut ParamPath, cfg: &PredictorConfig) -> Result<Self> {
        let temb = 2 * cfg.time_embed_dim;
        let mut stages = Vec::new();
        let mut reduce = Vec::new();
        for (i, k) in (0..cfg.num_levels).rev().enumerate() {
            let c = cfg.level_channels(k);
            stages.push(DecoderStage::new(&mut p.pp(&format!("stage{i}")), c, temb, cfg.blocks_per_level)?);
            if k > 0 {
                reduce.push(Conv2d::new(&mut p.pp(&format!("reduce{i}")), c, cfg.level_channels(k - 1), 1, 1)?);
            }
        }
        let c0 = cfg.level_channels(0);
        let ch = c0 / 2;
        Ok(Self {
            stages,
            reduce,
            head_reduce: Conv2d::new(&mut p.pp("head_reduce"), c0, ch, 1, 1)?,
            head_conv: Conv2d::new(&mut p.pp("head_conv"), ch + 1, ch, 3, 1)?,
            head_norm: GroupNorm::new(&mut p.pp("head_norm"), ch, NORM_GROUPS)?,
            head_out: Conv2d::with_init(&mut p.pp("head_out"), ch, 1, 3, 1, Init::Zeros, Init::Zeros)?,
        })
    }
}

/// Zero-valued tensors added to the three decoder stage outputs so that
/// gradients with respect to those features can be read back.
#[derive(Debug, Clone)]
pub struct DecoderTaps {
    pub taps: Vec<Var>,
}

/// Cached conditional encodings of an image pair; independent of `x_t` and `t`.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub image_a: Tensor,
    pub image_b: Tensor,
    pub pyr_a: FeaturePyramid,
    pub pyr_b: FeaturePyramid,
}

impl Conditioning {
    pub fn batch_size(&self) -> usize {
        self.image_a.dim(0).unwrap_or(0)
    }

    /// Repeats every pair `n` times along the batch axis (pair-major order).
    pub fn repeat(&self, n: usize) -> Result<Conditioning> {
        let rep = |t: &Tensor| -> Result<Tensor> {
            let b = t.dim(0)?;
            let idx: Vec<u32> = (0..b as u32).flat_map(|i| std::iter::repeat_n(i, n)).collect();
            let idx = Tensor::from_vec(idx, b * n, t.device())?;
            Ok(t.index_select(&idx, 0)?)
        };
        let rep_pyr = |p: &FeaturePyramid| -> Result<FeaturePyramid> {
            Ok(FeaturePyramid {
                levels: p.levels.iter().map(rep).collect::<Result<_>>()?,
            })
        };
        Ok(Conditioning {
            image_a: rep(&self.image_a)?,
            image_b: rep(&self.image_b)?,
            pyr_a: rep_pyr(&self.pyr_a)?,
            pyr_b: rep_pyr(&self.pyr_b)?,
        })
    }
}

/// The four pyramids of one forward pass.
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    pub pyr_a: FeaturePyramid,
    pub pyr_b: FeaturePyramid,
    pub pyr_xa: FeaturePyramid,
    pub pyr_xb: FeaturePyramid,
}

/// Anything that predicts the noise in `x_t` given an image pair.
pub trait NoisePredictor {
    type Cond;

    fn condition(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Self::Cond>;

    /// `ts` holds one 1-based timestep per batch element.
    fn predict(&self, x_t: &Tensor, cond: &Self::Cond, ts: &[usize]) -> Result<Tensor>;

    /// Repeats every pair's conditioning `n` times along the batch (pair-major).
    fn repeat(&self, cond: &Self::Cond, n: usize) -> Result<Self::Cond>;
}

pub struct CadmModel {
    cfg: PredictorConfig,
    num_timesteps: usize,
    store: ParamStore,
    cond_encoder: Encoder,
    x_encoder: Encoder,
    nsse: Vec<Nsse>,
    time: TimeEmbedding,
    decoder: Decoder,
}

impl CadmModel {
    pub fn new(cfg: &PredictorConfig, num_timesteps: usize, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_timesteps == 0 {
            return Err(Error::InvalidArgument("num_timesteps must be positive".into()));
        }
        let mut store = ParamStore::new(dtype, seed);
        let mut root = store.root();
        let cond_encoder = Encoder::new(&mut root.pp("cond_encoder"), cfg.image_channels, cfg)?;
        let x_encoder = Encoder::new(&mut root.pp("x_encoder"), cfg.image_channels + 1, cfg)?;
        let mut nsse = Vec::with_capacity(cfg.num_levels);
        for k in 0..cfg.num_levels {
            let s = cfg.level_size(k);
            nsse.push(Nsse::new(&mut root.pp(&format!("nsse{k}")), cfg.level_channels(k), s, s, dtype)?);
        }
        let time = TimeEmbedding::new(&mut root.pp("time"), cfg.time_embed_dim)?;
        let decoder = Decoder::new(&mut root.pp("decoder"), cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            num_timesteps,
            store,
            cond_encoder,
            x_encoder,
            nsse,
            time,
            decoder,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn nsse(&self, level: usize) -> &Nsse {
        &self.nsse[level]
    }

    /// Re-draws the zero-initialised output layer. Used by probes that need
    /// non-trivial gradients through the whole network.
    pub fn randomize_output_head(&self, seed: u64) -> Result<()> {
        let mut tmp = ParamStore::new(self.dtype(), seed);
        let w = self.decoder.head_out.weight.dims().to_vec();
        let fan_in = (w[1] * w[2] * w[3]) as f64;
        let fresh = tmp.root().var("w", &w, Init::Normal((1.0 / fan_in).sqrt()))?;
        self.decoder.head_out.weight.set(fresh.as_tensor())?;
        Ok(())
    }

    fn check_images(&self, image_a: &Tensor, image_b: &Tensor) -> Result<()> {
        if image_a.dims() != image_b.dims() {
            return Err(Error::Shape(format!(
                "image pair shapes differ: {:?} vs {:?}",
                image_a.dims(),
                image_b.dims()
            )));
        }
        let (_, c, h, w) = image_a.dims4()?;
        let s = self.cfg.image_size;
        if c != self.cfg.image_channels {
            return Err(Error::Shape(format!("expected {} image channels, got {c}", self.cfg.image_channels)));
        }
        let div = 1 << self.cfg.num_levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!("spatial dims {h}x{w} not divisible by {div}")));
        }
        if h != s || w != s {
            return Err(Error::Shape(format!("model built for {s}x{s} tiles, got {h}x{w}")));
        }
        Ok(())
    }

    fn check_xt(&self, x_t: &Tensor, image_a: &Tensor, ts: &[usize]) -> Result<()> {
        let (b, c, h, w) = x_t.dims4()?;
        let (ib, _, ih, iw) = image_a.dims4()?;
        if c != 1 || (b, h, w) != (ib, ih, iw) {
            return Err(Error::Shape(format!(
                "x_t {:?} incompatible with images {:?}",
                x_t.dims(),
                image_a.dims()
            )));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.num_timesteps) {
            return Err(Error::Timestep {
                t,
                max: self.num_timesteps,
            });
        }
        Ok(())
    }

    pub fn encode_conditions(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Conditioning> {
        self.check_images(image_a, image_b)?;
        // Pixel values in [0, 1] are centred to [-1, 1].
        let image_a = image_a.affine(2.0, -1.0)?;
        let image_b = image_b.affine(2.0, -1.0)?;
        Ok(Conditioning {
            pyr_a: self.cond_encoder.forward(&image_a)?,
            pyr_b: self.cond_encoder.forward(&image_b)?,
            image_a,
            image_b,
        })
    }

    fn encode_x(&self, x_t: &Tensor, cond: &Conditioning) -> Result<(FeaturePyramid, FeaturePyramid)> {
        let xa = self.x_encoder.forward(&Tensor::cat(&[x_t, &cond.image_a], 1)?)?;
        let xb = self.x_encoder.forward(&Tensor::cat(&[x_t, &cond.image_b], 1)?)?;
        Ok((xa, xb))
    }

    /// Runs the four encoder branches.
    pub fn encode_branches(&self, image_a: &Tensor, image_b: &Tensor, x_t: &Tensor) -> Result<BranchFeatures> {
        let cond = self.encode_conditions(image_a, image_b)?;
        let b = x_t.dim(0)?;
        self.check_xt(x_t, image_a, &vec![1; b])?;
        let (pyr_xa, pyr_xb) = self.encode_x(x_t, &cond)?;
        Ok(BranchFeatures {
            pyr_a: cond.pyr_a,
            pyr_b: cond.pyr_b,
            pyr_xa,
            pyr_xb,
        })
    }

    /// `Dif^k` for one level, or `None` when that scale is ablated.
    fn dif_level(&self, k: usize, f: &BranchFeatures) -> Result<Option<Tensor>> {
        if !self.cfg.scale_active(k) {
            return Ok(None);
        }
        let (ma, mb) = (f.pyr_a.level(k), f.pyr_b.level(k));
        let d = if self.cfg.nsse_enabled {
            let fb = self.nsse[k].forward(mb, f.pyr_xb.level(k))?;
            let fa = self.nsse[k].forward(ma, f.pyr_xa.level(k))?;
            (fb - fa)?
        } else {
            (mb - ma)?
        };
        Ok(Some(d))
    }

    /// Difference features for every level; ablated scales are all-zero.
    pub fn dif_features(&self, f: &BranchFeatures) -> Result<Vec<Tensor>> {
        for p in [&f.pyr_b, &f.pyr_xa, &f.pyr_xb] {
            if p.levels.len() != f.pyr_a.levels.len()
                || p.levels.iter().zip(&f.pyr_a.levels).any(|(x, y)| x.dims() != y.dims())
            {
                return Err(Error::Shape("feature pyramids are not level-aligned".into()));
            }
        }
        (0..self.cfg.num_levels)
            .map(|k| match self.dif_level(k, f)? {
                Some(d) => Ok(d),
                None => Ok(f.pyr_a.level(k).zeros_like()?),
            })
            .collect()
    }

    fn decode(
        &self,
        x_t: &Tensor,
        f: &BranchFeatures,
        ts: &[usize],
        taps: Option<&DecoderTaps>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let temb = self.time.forward(ts, x_t.dtype())?;
        let dec = &self.decoder;
        let mut feats = Vec::with_capacity(self.cfg.num_levels);
        let mut h: Option<Tensor> = None;
        for (i, k) in (0..self.cfg.num_levels).rev().enumerate() {
            let (xa, xb) = (f.pyr_xa.level(k), f.pyr_xb.level(k));
            let mut diff = (xa - xb)?;
            if let Some(d) = self.dif_level(k, f)? {
                diff = (diff + d)?;
            }
            if let Some(prev) = &h {
                diff = (diff + upsample2x(&dec.reduce[i - 1].forward(prev)?)?)?;
            }
            let skip = ((xa + xb)? * 0.5)?;
            let mut out = dec.stages[i].forward(&diff, &skip, &temb)?;
            if let Some(t) = taps {
                out = (out + t.taps[i].as_tensor())?;
            }
            feats.push(out.clone());
            h = Some(out);
        }
        let h = upsample2x(&dec.head_reduce.forward(h.as_ref().expect("at least one level"))?)?;
        let h = dec.head_conv.forward(&Tensor::cat(&[&h, x_t], 1)?)?;
        let h = silu(&dec.head_norm.forward(&h)?)?;
        Ok((dec.head_out.forward(&h)?, feats))
    }

    /// Full forward pass from cached conditions.
    pub fn predict_with(&self, x_t: &Tensor, cond: &Conditioning, ts: &[usize]) -> Result<Tensor> {
        Ok(self.forward_tapped(x_t, cond, ts, None)?.0)
    }

    /// Forward pass that also returns the three decoder stage outputs
    /// (deepest first), optionally with gradient taps added to them.
    pub fn forward_tapped(
        &self,
        x_t: &Tensor,
        cond: &Conditioning,
        ts: &[usize],
        taps: Option<&DecoderTaps>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_xt(x_t, &cond.image_a, ts)?;
        let (pyr_xa, pyr_xb) = self.encode_x(x_t, cond)?;
        let f = BranchFeatures {
            pyr_a: cond.pyr_a.clone(),
            pyr_b: cond.pyr_b.clone(),
            pyr_xa,
            pyr_xb,
        };
        self.decode(x_t, &f, ts, taps)
    }

    /// Zero taps shaped like the decoder stage outputs for a batch of `b`.
    pub fn decoder_taps(&self, b: usize) -> Result<DecoderTaps> {
        let taps = (0..self.cfg.num_levels)
            .rev()
            .map(|k| {
                let (c, s) = (self.cfg.level_channels(k), self.cfg.level_size(k));
                Ok(Var::zeros((b, c, s, s), self.dtype(), &Device::Cpu)?)
            })
            .collect::<Result<_>>()?;
        Ok(DecoderTaps { taps })
    }

    pub fn predict_noise(&self, x_t: &Tensor, image_a: &Tensor, image_b: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let cond = self.encode_conditions(image_a, image_b)?;
        self.predict_with(x_t, &cond, ts)
    }
}

impl NoisePredictor for CadmModel {
    type Cond = Conditioning;

    fn condition(&self, image_a: &Tensor, image_b: &Tensor) -> Result<Conditioning> {
        self.encode_conditions(image_a, image_b)
    }

    fn predict(&self, x_t: &Tensor, cond: &Conditioning, ts: &[usize]) -> Result<Tensor> {
        self.predict_with(x_t, cond, ts)
    }

    fn repeat(&self, cond: &Conditioning, n: usize) -> Result<Conditioning> {
        cond.repeat(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> CadmModel {
        let cfg = PredictorConfig {
            base_channels: 8,
            image_size: 16,
            time_embed_dim: 16,
            ..Default::default()
        };
        CadmModel::new(&cfg, 10, dtype, 3).unwrap()
    }

    fn rand(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn level_shapes_and_output_shape() {
        let m = tiny(DType::F32);
        assert_eq!(m.config().level_shapes(), vec![(8, 8, 8), (16, 4, 4), (32, 2, 2)]);
        let (a, b, x) = (rand(&[2, 3, 16, 16], 1, DType::F32), rand(&[2, 3, 16, 16], 2, DType::F32), rand(&[2, 1, 16, 16], 3, DType::F32));
        let f = m.encode_branches(&a, &b, &x).unwrap();
        for (k, (c, h, w)) in m.config().level_shapes().into_iter().enumerate() {
            assert_eq!(f.pyr_xa.level(k).dims(), &[2, c, h, w]);
        }
        let eps = m.predict_noise(&x, &a, &b, &[1, 10]).unwrap();
        assert_eq!(eps.dims(), &[2, 1, 16, 16]);
    }

    #[test]
    fn fresh_model_predicts_zero_noise() {
        let m = tiny(DType::F32);
        let (a, b, x) = (rand(&[1, 3, 16, 16], 1, DType::F32), rand(&[1, 3, 16, 16], 2, DType::F32), rand(&[1, 1, 16, 16], 3, DType::F32));
        assert_eq!(max_abs(&m.predict_noise(&x, &a, &b, &[5]).unwrap()), 0.0);
    }

    #[test]
    fn swapping_dates_negates_difference_features() {
        let m = tiny(DType::F32);
        m.randomize_output_head(1).unwrap();
        let (a, b, x) = (rand(&[2, 3, 16, 16], 4, DType::F32), rand(&[2, 3, 16, 16], 5, DType::F32), rand(&[2, 1, 16, 16], 6, DType::F32));
        let d1 = m.dif_features(&m.encode_branches(&a, &b, &x).unwrap()).unwrap();
        let d2 = m.dif_features(&m.encode_branches(&b, &a, &x).unwrap()).unwrap();
        for (p, q) in d1.iter().zip(&d2) {
            assert!(max_abs(&(p + q).unwrap()) <= 1e-5);
            assert!(max_abs(p) > 1e-3);
        }
    }

    #[test]
    fn identical_dates_give_zero_difference() {
        let m = tiny(DType::F32);
        let (a, x) = (rand(&[1, 3, 16, 16], 7, DType::F32), rand(&[1, 1, 16, 16], 8, DType::F32));
        for d in m.dif_features(&m.encode_branches(&a, &a, &x).unwrap()).unwrap() {
            assert_eq!(max_abs(&d), 0.0);
        }
    }

    #[test]
    fn ablated_scales_are_zero() {
        let cfg = PredictorConfig {
            base_channels: 8,
            image_size: 16,
            time_embed_dim: 16,
            active_scales: vec![2, 3],
            ..Default::default()
        };
        let m = CadmModel::new(&cfg, 10, DType::F32, 3).unwrap();
        let (a, b, x) = (rand(&[1, 3, 16, 16], 1, DType::F32), rand(&[1, 3, 16, 16], 2, DType::F32), rand(&[1, 1, 16, 16], 3, DType::F32));
        let d = m.dif_features(&m.encode_branches(&a, &b, &x).unwrap()).unwrap();
        assert_eq!(max_abs(&d[0]), 0.0);
        assert!(max_abs(&d[1]) > 0.0 && max_abs(&d[2]) > 0.0);
    }

    #[test]
    fn nsse_off_is_plain_feature_difference() {
        let cfg = PredictorConfig {
            base_channels: 8,
            image_size: 16,
            time_embed_dim: 16,
            nsse_enabled: false,
            ..Default::default()
        };
        let m = CadmModel::new(&cfg, 10, DType::F64, 3).unwrap();
        let (a, b, x) = (rand(&[1, 3, 16, 16], 1, DType::F64), rand(&[1, 3, 16, 16], 2, DType::F64), rand(&[1, 1, 16, 16], 3, DType::F64));
        let f = m.encode_branches(&a, &b, &x).unwrap();
        for (k, d) in m.dif_features(&f).unwrap().iter().enumerate() {
            let want = (f.pyr_b.level(k) - f.pyr_a.level(k)).unwrap();
            assert_eq!(max_abs(&(d - want).unwrap()), 0.0);
        }
    }

    #[test]
    fn scale_sets_validated() {
        for ok in [vec![3u8], vec![2, 3], vec![1, 2, 3], vec![3, 2]] {
            assert!(validate_scales(&ok).is_ok(), "{ok:?}");
        }
        for bad in [vec![], vec![1u8], vec![1, 3], vec![2], vec![3, 3], vec![0, 1, 2, 3], vec![4]] {
            assert!(validate_scales(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let m = tiny(DType::F32);
        let a = rand(&[1, 3, 16, 16], 1, DType::F32);
        let x = rand(&[1, 1, 16, 16], 3, DType::F32);
        assert!(m.predict_noise(&x, &a, &rand(&[1, 3, 8, 8], 2, DType::F32), &[1]).is_err());
        assert!(m.predict_noise(&x, &a, &a, &[11]).is_err());
        assert!(m.predict_noise(&x, &a, &a, &[0]).is_err());
        assert!(m.predict_noise(&x, &a, &a, &[1, 2]).is_err());
        assert!(m.predict_noise(&x, &rand(&[1, 3, 32, 32], 1, DType::F32), &rand(&[1, 3, 32, 32], 1, DType::F32), &[1]).is_err());
    }

    #[test]
    fn time_embedding_separates_timesteps() {
        let ts: Vec<usize> = (1..=100).collect();
        let e: Vec<f64> = sinusoidal_embedding(&ts, 64, DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for i in 0..100 {
            for j in (i + 1)..100 {
                let d: f64 = (0..64).map(|k| (e[i * 64 + k] - e[j * 64 + k]).powi(2)).sum();
                assert!(d > 1e-3, "{i} vs {j}");
            }
        }
    }

    /// Every encoder input matters: perturbing either image or x_t changes
    /// the output once the head is non-zero.
    #[test]
    fn output_depends_on_every_input() {
        let m = tiny(DType::F64);
        m.randomize_output_head(2).unwrap();
        let (a, b, x) = (rand(&[1, 3, 16, 16], 1, DType::F64), rand(&[1, 3, 16, 16], 2, DType::F64), rand(&[1, 1, 16, 16], 3, DType::F64));
        let base = m.predict_noise(&x, &a, &b, &[4]).unwrap();
        let bump = |t: &Tensor| (t + 0.1).unwrap();
        for out in [
            m.predict_noise(&bump(&x), &a, &b, &[4]).unwrap(),
            m.predict_noise(&x, &bump(&a), &b, &[4]).unwrap(),
            m.predict_noise(&x, &a, &bump(&b), &[4]).unwrap(),
            m.predict_noise(&x, &a, &b, &[7]).unwrap(),
        ] {
            assert!(max_abs(&(out - &base).unwrap()) > 1e-8);
        }
    }
}
