//! Hand-written CPU kernels for the layers where composing generic tensor
//! ops costs many passes over memory: patch extraction for convolutions,
//! standardisation over an axis, and nearest-neighbour upsampling.
//!
//! Each op supports `f32` and `f64` and defines its own backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

macro_rules! dispatch {
    ($storage:expr, $layout:expr, |$v:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(d) => {
                let $v = contiguous(d, $layout)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(d) => {
                let $v = contiguous(d, $layout)?;
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("kernels support f32 and f64 only"),
        }
    };
}

/// Patch geometry of a same-padded convolution.
#[derive(Debug, Clone, Copy)]
struct Patches {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn new(dims: &[usize], k: usize, stride: usize) -> Self {
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        Self {
            n,
            c,
            h,
            w,
            k,
            stride,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Visits every (row, column-run) pair: the callback gets the column
    /// offset of an output row segment, the input offset of its first valid
    /// element and the range of valid output x positions.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = (self.k / 2) as isize;
        let s = self.stride;
        for c in 0..self.c {
            for i in 0..self.k {
                for j in 0..self.k {
                    let row = (c * self.k + i) * self.k + j;
                    let dx = j as isize - p;
                    // Valid ox satisfy 0 <= ox*s + dx < w.
                    let lo = if dx < 0 { ((-dx) as usize).div_ceil(s) } else { 0 };
                    let hi = ((self.w as isize - dx + s as isize - 1) / s as isize).clamp(0, self.ow as isize) as usize;
                    for b in 0..self.n {
                        for oy in 0..self.oh {
                            let iy = (oy * s) as isize + i as isize - p;
                            if iy < 0 || iy >= self.h as isize || lo >= hi {
                                continue;
                            }
                            let col = row * self.cols() + (b * self.oh + oy) * self.ow;
                            let src = ((b * self.c + c) * self.h + iy as usize) * self.w;
                            let x0 = (lo * s) as isize + dx;
                            f(col, src + x0 as usize, lo, hi);
                        }
                    }
                }
            }
        }
    }
}

struct Im2col {
    k: usize,
    stride: usize,
}

fn im2col<T: WithDType>(x: &[T], g: &Patches) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    let s = g.stride;
    g.for_each_run(|col, src, lo, hi| {
        let dst = &mut out[col + lo..col + hi];
        if s == 1 {
            dst.copy_from_slice(&x[src..src + (hi - lo)]);
        } else {
            for (q, d) in dst.iter_mut().enumerate() {
                *d = x[src + q * s];
            }
        }
    });
    out
}

fn col2im<T: WithDType>(cols: &[T], g: &Patches) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
    let s = g.stride;
    g.for_each_run(|col, src, lo, hi| {
        for (q, &v) in cols[col + lo..col + hi].iter().enumerate() {
            out[src + q * s] += v;
        }
    });
    out
}

impl CustomOp1 for Im2col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Patches::new(layout.dims(), self.k, self.stride);
        let out = dispatch!(storage, layout, |x| im2col(x, &g));
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2im {
            geometry: Patches::new(arg.dims(), self.k, self.stride),
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

struct Col2im {
    geometry: Patches,
}

impl CustomOp1 for Col2im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let out = dispatch!(storage, layout, |c| col2im(c, &g));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

/// Patch matrix `(C*k*k, N*OH*OW)` of an NCHW tensor for a same-padded
/// `k x k` convolution. Row order matches a `(C_out, C, k, k)` weight
/// reshaped to `(C_out, C*k*k)`.
pub fn patches(x: &Tensor, k: usize, stride: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2col { k, stride })
}

/// Standardisation over the middle axis of a contiguous `(outer, n, inner)` view.
#[derive(Debug, Clone, Copy)]
struct Standardize {
    outer: usize,
    n: usize,
    inner: usize,
    eps: f64,
}

impl Standardize {
    /// Mean and inverse standard deviation for every (outer, inner) lane.
    fn stats<T: WithDType>(&self, x: &[T]) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); self.outer * self.inner];
        let inv_n = 1.0 / self.n as f64;
        for o in 0..self.outer {
            let base = o * self.n * self.inner;
            let lanes = &mut out[o * self.inner..(o + 1) * self.inner];
            for m in 0..self.n {
                let row = &x[base + m * self.inner..base + (m + 1) * self.inner];
                for (l, &v) in lanes.iter_mut().zip(row) {
                    l.0 += v.to_f64();
                }
            }
            for l in lanes.iter_mut() {
                l.0 *= inv_n;
            }
            for m in 0..self.n {
                let row = &x[base + m * self.inner..base + (m + 1) * self.inner];
                for (l, &v) in lanes.iter_mut().zip(row) {
                    let d = v.to_f64() - l.0;
                    l.1 += d * d;
                }
            }
            for l in lanes.iter_mut() {
                l.1 = 1.0 / (l.1 * inv_n + self.eps).sqrt();
            }
        }
        out
    }

    /// Mean and inverse standard deviation of one contiguous lane.
    fn lane_stats<T: WithDType>(&self, x: &[T]) -> (f64, f64) {
        let inv_n = 1.0 / x.len() as f64;
        let mu = x.iter().map(|v| v.to_f64()).sum::<f64>() * inv_n;
        let var = x.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() * inv_n;
        (mu, 1.0 / (var + self.eps).sqrt())
    }

    fn fwd<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        if self.inner == 1 {
            let mut y = Vec::with_capacity(x.len());
            for lane in x.chunks(self.n) {
                let (mu, inv) = self.lane_stats(lane);
                y.extend(lane.iter().map(|v| T::from_f64((v.to_f64() - mu) * inv)));
            }
            return y;
        }
        let stats = self.stats(x);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..self.outer {
            let lanes = &stats[o * self.inner..(o + 1) * self.inner];
            for m in 0..self.n {
                let off = (o * self.n + m) * self.inner;
                for ((d, &v), &(mu, inv)) in y[off..off + self.inner].iter_mut().zip(&x[off..off + self.inner]).zip(lanes) {
                    *d = T::from_f64((v.to_f64() - mu) * inv);
                }
            }
        }
        y
    }

    /// `dx = inv * (g - mean(g) - y * mean(g * y))` per lane.
    fn bwd<T: WithDType>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let inv_n = 1.0 / self.n as f64;
        if self.inner == 1 {
            let mut dx = Vec::with_capacity(x.len());
            for (xl, gl) in x.chunks(self.n).zip(g.chunks(self.n)) {
                let (mu, inv) = self.lane_stats(xl);
                let (mut sg, mut sgy) = (0.0, 0.0);
                for (&v, &gv) in xl.iter().zip(gl) {
                    sg += gv.to_f64();
                    sgy += gv.to_f64() * (v.to_f64() - mu) * inv;
                }
                let (sg, sgy) = (sg * inv_n, sgy * inv_n);
                dx.extend(xl.iter().zip(gl).map(|(&v, &gv)| {
                    let y = (v.to_f64() - mu) * inv;
                    T::from_f64(inv * (gv.to_f64() - sg - y * sgy))
                }));
            }
            return dx;
        }
        let stats = self.stats(x);
        let mut dx = vec![T::zero(); x.len()];
        let mut acc = vec![(0.0f64, 0.0f64); self.inner];
        for o in 0..self.outer {
            let lanes = &stats[o * self.inner..(o + 1) * self.inner];
            acc.iter_mut().for_each(|a| *a = (0.0, 0.0));
            for m in 0..self.n {
                let off = (o * self.n + m) * self.inner;
                for (((a, &v), &gv), &(mu, inv)) in acc.iter_mut().zip(&x[off..]).zip(&g[off..off + self.inner]).zip(lanes) {
                    let y = (v.to_f64() - mu) * inv;
                    a.0 += gv.to_f64();
                    a.1 += gv.to_f64() * y;
                }
            }
            for m in 0..self.n {
                let off = (o * self.n + m) * self.inner;
                for ((((d, &v), &gv), &(mu, inv)), a) in dx[off..off + self.inner]
                    .iter_mut()
                    .zip(&x[off..])
                    .zip(&g[off..])
                    .zip(lanes)
                    .zip(&acc)
                {
                    let y = (v.to_f64() - mu) * inv;
                    *d = T::from_f64(inv * (gv.to_f64() - a.0 * inv_n - y * a.1 * inv_n));
                }
            }
        }
        dx
    }
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = dispatch!(storage, layout, |x| self.fwd(x));
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad_res.contiguous()?;
        Ok(Some(arg.apply_op2_no_bwd(&g, &StandardizeGrad(*self))?))
    }
}

struct StandardizeGrad(Standardize);

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(self.0.bwd(contiguous(x, l1)?, contiguous(g, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(self.0.bwd(contiguous(x, l1)?, contiguous(g, l2)?)),
            _ => candle_core::bail!("standardize-grad: mismatched or unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Zero mean and unit variance (plus `eps`) along the middle axis of
/// `x` viewed as `(outer, n, inner)`.
pub fn standardize(x: &Tensor, outer: usize, n: usize, inner: usize, eps: f64) -> candle_core::Result<Tensor> {
    if outer * n * inner != x.elem_count() {
        candle_core::bail!("standardize: {outer}x{n}x{inner} view of {:?}", x.dims());
    }
    x.contiguous()?.apply_op1(Standardize { outer, n, inner, eps })
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::zero(); planes * 4 * h * w];
            for p in 0..planes {
                for y in 0..h {
                    let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
                    let row = (p * 2 * h + 2 * y) * 2 * w;
                    for (q, &v) in src.iter().enumerate() {
                        out[row + 2 * q] = v;
                        out[row + 2 * q + 1] = v;
                    }
                    out.copy_within(row..row + 2 * w, row + 2 * w);
                }
            }
            out
        }
        let out = dispatch!(storage, layout, |x| run(x, b * c, h, w));
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&SumPool2x)?))
    }
}

struct SumPool2x;

impl CustomOp1 for SumPool2x {
    fn name(&self) -> &'static str {
        "sumpool2x"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h2, w2) = layout.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        fn run<T: WithDType>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                for y in 0..h {
                    let r0 = (p * 2 * h + 2 * y) * 2 * w;
                    let r1 = r0 + 2 * w;
                    for x in 0..w {
                        out[(p * h + y) * w + x] = g[r0 + 2 * x] + g[r0 + 2 * x + 1] + g[r1 + 2 * x] + g[r1 + 2 * x + 1];
                    }
                }
            }
            out
        }
        let out = dispatch!(storage, layout, |g| run(g, b * c, h, w));
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Nearest-neighbour 2x upsampling of an NCHW tensor.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Upsample2x)
}
