//! Minimal layer toolkit on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names so that iteration
//! order, initialisation and serialisation are all deterministic.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&mut self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    /// Tensors keyed by parameter name, suitable for serialisation.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub struct ParamPath<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl ParamPath<'_> {
    pub fn pp(&mut self, name: &str) -> ParamPath<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, init)
    }
}

/// Working-set budget for one im2col block. Keeping the column matrix inside
/// the cache is worth far more than large matmuls on a single core.
const COLS_BUDGET_BYTES: usize = 2 << 20;

/// Same-padded 2-D convolution for odd square kernels and stride 1 or 2.
///
/// Implemented as a patch matrix plus one matmul per batch chunk.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, ci, h, w) = x.dims4()?;
    let (co, wci, kh, kw) = weight.dims4()?;
    if wci != ci || kh != kw || kh % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d: input {:?} with weight {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!("unsupported conv stride {stride}")));
    }
    if stride == 2 && (h % 2 != 0 || w % 2 != 0) {
        return Err(Error::Shape(format!("stride-2 conv on odd spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / stride, w / stride);
    let wm = weight.reshape((co, ci * kh * kw))?;
    let per_sample = kh * kw * ci * oh * ow * x.dtype().size_in_bytes();
    let chunk = (COLS_BUDGET_BYTES / per_sample.max(1)).clamp(1, b);
    let mut outs = Vec::with_capacity(b.div_ceil(chunk));
    let mut start = 0;
    while start < b {
        let n = chunk.min(b - start);
        let xc = if n == b { x.clone() } else { x.narrow(0, start, n)? };
        let cols = kernels::patches(&xc, kh, stride)?;
        let out = wm.matmul(&cols)?.reshape((co, n, oh, ow))?;
        outs.push(if n == 1 {
            out.reshape((1, co, oh, ow))?
        } else {
            out.transpose(0, 1)?.contiguous()?
        });
        start += n;
    }
    if outs.len() == 1 {
        Ok(outs.pop().expect("one block"))
    } else {
        Ok(Tensor::cat(&outs, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(p: &mut ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        Self::with_init(p, c_in, c_out, k, stride, Init::Normal((1.0 / (3.0 * fan_in)).sqrt()), Init::Zeros)
    }

    pub fn with_init(
        p: &mut ParamPath,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[c_out, c_in, k, k], weight)?,
            bias: p.var("bias", &[c_out], bias)?,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(p: &mut ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", &[d_out, d_in], Init::Normal((1.0 / d_in as f64).sqrt()))?,
            bias: p.var("bias", &[d_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

const NORM_EPS: f64 = 1e-5;

fn per_channel(v: &Var) -> Result<Tensor> {
    let c = v.dim(0)?;
    Ok(v.as_tensor().reshape((1, c, 1, 1))?)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Var,
    pub beta: Var,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(p: &mut ParamPath, channels: usize, groups: usize) -> Result<Self> {
        if channels == 0 || groups == 0 {
            return Err(Error::InvalidArgument("group norm needs channels and groups".into()));
        }
        // Largest divisor of `channels` that does not exceed the request.
        let groups = (1..=groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        Ok(Self {
            gamma: p.var("gamma", &[channels], Init::Const(1.0))?,
            beta: p.var("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let normed = kernels::standardize(x, b * self.groups, (c / self.groups) * h * w, 1, NORM_EPS)?;
        Ok(normed
            .broadcast_mul(&per_channel(&self.gamma)?)?
            .broadcast_add(&per_channel(&self.beta)?)?)
    }
}

/// Normalisation across the channel axis at every pixel, with a per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl ChannelLayerNorm {
    pub fn new(p: &mut ParamPath, channels: usize, beta_init: f64) -> Result<Self> {
        Ok(Self {
            gamma: p.var("gamma", &[channels], Init::Const(1.0))?,
            beta: p.var("beta", &[channels], Init::Const(beta_init))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(channel_normalize(x)?
            .broadcast_mul(&per_channel(&self.gamma)?)?
            .broadcast_add(&per_channel(&self.beta)?)?)
    }
}

/// Zero-mean, unit-variance across dim 1 of an NCHW tensor, no affine.
pub fn channel_normalize(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(kernels::standardize(x, b, c, h * w, NORM_EPS)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::upsample2x(x)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Residual block: two 3x3 convolutions with group norm and SiLU, plus a 1x1
/// projection on the shortcut when the shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<Conv2d>,
}

pub const NORM_GROUPS: usize = 8;

impl ResBlock {
    pub fn new(p: &mut ParamPath, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if c_in != c_out || stride != 1 {
            Some(Conv2d::new(&mut p.pp("shortcut"), c_in, c_out, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut p.pp("conv1"), c_in, c_out, 3, stride)?,
            norm1: GroupNorm::new(&mut p.pp("norm1"), c_out, NORM_GROUPS)?,
            conv2: Conv2d::new(&mut p.pp("conv2"), c_out, c_out, 3, 1)?,
            norm2: GroupNorm::new(&mut p.pp("norm2"), c_out, NORM_GROUPS)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = silu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        silu(&(h + skip)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_loop(x: &Tensor, w: &Tensor, stride: usize) -> Vec<f64> {
        let (b, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let p = (k / 2) as isize;
        let (oh, ow) = (h / stride, wd / stride);
        let mut out = vec![0.0; b * co * oh * ow];
        for n in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * stride) as isize + i as isize - p;
                                    let ix = (xx * stride) as isize + j as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xv[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * wv[((o * ci + c) * k + i) * k + j];
                                }
                            }
                        }
                        out[((n * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_oracle() {
        for &(b, ci, co, hw, k, s) in &[
            (2, 3, 5, 8, 3, 1),
            (3, 4, 2, 8, 3, 2),
            (1, 6, 3, 6, 1, 1),
            (2, 2, 4, 6, 1, 2),
            (40, 2, 2, 4, 3, 2),
        ] {
            let x = rand_tensor(&[b, ci, hw, hw], 1, DType::F64);
            let w = rand_tensor(&[co, ci, k, k], 2, DType::F64);
            let got = conv2d(&x, &w, s).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = conv_loop(&x, &w, s);
            assert_eq!(got.len(), want.len());
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_chunking_matches_candle() {
        // Large enough to force several chunks.
        let x = rand_tensor(&[9, 32, 32, 32], 3, DType::F32);
        let w = rand_tensor(&[16, 32, 3, 3], 4, DType::F32);
        let ours = conv2d(&x, &w, 1).unwrap();
        let theirs = x.conv2d(&w, 1, 1, 1, 1).unwrap();
        let d = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            y,
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn store_is_deterministic_and_rejects_duplicates() {
        let build = || {
            let mut s = ParamStore::new(DType::F32, 7);
            let mut root = s.root();
            Conv2d::new(&mut root.pp("a"), 2, 3, 3, 1).unwrap();
            s
        };
        let (a, b) = (build(), build());
        let wa = a.get("a.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let wb = b.get("a.weight").unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(wa, wb);
        let mut s = ParamStore::new(DType::F32, 0);
        let mut root = s.root();
        root.var("x", &[1], Init::Zeros).unwrap();
        assert!(root.var("x", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn channel_norm_statistics() {
        let x = rand_tensor(&[2, 6, 3, 3], 5, DType::F64);
        let n = channel_normalize(&x).unwrap();
        let mean = n.mean_keepdim(1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean < 1e-12);
        let var = n.sqr().unwrap().mean_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
