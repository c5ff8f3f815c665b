//! Layer plumbing on top of candle tensors.
//!
//! Convolution goes through an explicit im2col + GEMM so that both the
//! forward and the backward pass are dominated by matrix multiplies; the
//! gather/scatter of the unfold is a custom op with a hand-written adjoint.

use std::collections::BTreeMap;
use std::ops::AddAssign;
use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfold `(N, C, H, W)` into `(C·k·k, N·OH·OW)`.
struct Im2Col(ConvGeometry);

fn unfold<T: Copy + Default>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.output_hw(h, w);
    let l = oh * ow;
    let cols = n * l;
    let k = g.kernel;
    let mut out = vec![T::default(); c * k * k * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut out[((ci * k + ki) * k + kj) * cols..][..cols];
                for b in 0..n {
                    let plane = &x[(b * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[b * l + oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold<T: Copy + Default + AddAssign>(cols: &[T], (n, c, h, w): (usize, usize, usize, usize), g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.output_hw(h, w);
    let l = oh * ow;
    let ncols = n * l;
    let k = g.kernel;
    let mut out = vec![T::default(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ci * k + ki) * k + kj) * ncols..][..ncols];
                for b in 0..n {
                    let plane = &mut out[(b * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[b * l + oy * ow..][..ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (n, c, h, w) = dims;
        let (oh, ow) = self.0.output_hw(h, w);
        let shape = Shape::from((c * self.0.kernel * self.0.kernel, n * oh * ow));
        let out = match storage {
            CpuStorage::F32(x) => CpuStorage::F32(unfold(contiguous_slice(x, layout)?, dims, self.0)),
            CpuStorage::F64(x) => CpuStorage::F64(unfold(contiguous_slice(x, layout)?, dims, self.0)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let grad = grad.contiguous()?.flatten_all()?;
        let folded = match arg.dtype() {
            DType::F32 => Tensor::from_vec(fold(&grad.to_vec1::<f32>()?, dims, self.0), dims, arg.device())?,
            DType::F64 => Tensor::from_vec(fold(&grad.to_vec1::<f64>()?, dims, self.0), dims, arg.device())?,
            other => candle_core::bail!("im2col: unsupported dtype {other:?}"),
        };
        Ok(Some(folded))
    }
}

/// 2-D cross-correlation of `x: (N, Cin, H, W)` with `weight: (Cout, Cin, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if wcin != cin || k != k2 {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input with {cin} channels",
            weight.dims()
        )));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Shape(format!("input {h}x{w} smaller than kernel {k}")));
    }
    let g = ConvGeometry { kernel: k, stride, padding };
    let (oh, ow) = g.output_hw(h, w);
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.transpose(0, 1)?.reshape((cin, n * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let y = weight.reshape((cout, cin * k * k))?.matmul(&cols)?;
    Ok(y.reshape((cout, n, oh, ow))?.transpose(0, 1)?.contiguous()?)
}

/// Max pooling with implicit -inf padding; the gradient goes to the first
/// maximal element of each window.
struct MaxPool(ConvGeometry);

fn argmax_windows<T: Copy + PartialOrd>(x: &[T], (n, c, h, w): (usize, usize, usize, usize), g: ConvGeometry) -> Vec<usize> {
    let (oh, ow) = g.output_hw(h, w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<usize> = None;
                for ki in 0..g.kernel {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..g.kernel {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|b| x[idx] > x[b]) {
                            best = Some(idx);
                        }
                    }
                }
                out.push(best.expect("window overlaps the input"));
            }
        }
    }
    out
}

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (n, c, h, w) = dims;
        let (oh, ow) = self.0.output_hw(h, w);
        let out = match storage {
            CpuStorage::F32(x) => {
                let x = contiguous_slice(x, layout)?;
                CpuStorage::F32(argmax_windows(x, dims, self.0).into_iter().map(|i| x[i]).collect())
            }
            CpuStorage::F64(x) => {
                let x = contiguous_slice(x, layout)?;
                CpuStorage::F64(argmax_windows(x, dims, self.0).into_iter().map(|i| x[i]).collect())
            }
            _ => candle_core::bail!("max-pool: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((n, c, oh, ow))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let (n, c, h, w) = dims;
        let grad = grad.contiguous()?.flatten_all()?;
        let x = arg.contiguous()?.flatten_all()?;
        fn scatter<T: WithDType + PartialOrd + AddAssign>(x: &[T], g: &[T], dims: (usize, usize, usize, usize), geo: ConvGeometry) -> Vec<T> {
            let mut out = vec![T::zero(); x.len()];
            for (o, i) in argmax_windows(x, dims, geo).into_iter().enumerate() {
                out[i] += g[o];
            }
            out
        }
        let out = match arg.dtype() {
            DType::F32 => Tensor::from_vec(scatter(&x.to_vec1::<f32>()?, &grad.to_vec1::<f32>()?, dims, self.0), (n, c, h, w), arg.device())?,
            DType::F64 => Tensor::from_vec(scatter(&x.to_vec1::<f64>()?, &grad.to_vec1::<f64>()?, dims, self.0), (n, c, h, w), arg.device())?,
            _ => candle_core::bail!("max-pool: only f32 and f64 are supported"),
        };
        Ok(Some(out))
    }
}

pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if padding * 2 > kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::Shape(format!("max-pool {kernel}/{stride}/{padding} does not fit {h}x{w}")));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool(ConvGeometry { kernel, stride, padding }))?)
}

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics). Iteration order is the lexical order of names.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(map: &mut BTreeMap<String, Var>, name: String, t: Tensor) -> Result<Var> {
        if map.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let v = Var::from_tensor(&t)?;
        map.insert(name, v.clone());
        Ok(v)
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let t = t.to_dtype(self.dtype)?;
        Self::insert(&mut self.params, name.into(), t)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, t: Tensor) -> Result<Var> {
        let t = t.to_dtype(self.dtype)?;
        Self::insert(&mut self.buffers, name.into(), t)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Trainable scalar count.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters and buffers, in name order.
    pub fn all(&self) -> impl Iterator<Item = (&String, &Var)> {
        let mut merged: Vec<(&String, &Var)> = self.params.iter().chain(self.buffers.iter()).collect();
        merged.sort_by(|a, b| a.0.cmp(b.0));
        merged.into_iter()
    }

    /// Overwrite a parameter or buffer in place, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Seeded weight initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    fn tensor(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
        let v = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Self::tensor(v, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v = (0..n)
            .map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        Self::tensor(v, shape)
    }

    /// He-normal with fan-out scaling, the usual choice for ReLU conv stacks.
    pub fn kaiming_fan_out(&mut self, shape: &[usize]) -> Result<Tensor> {
        let fan_out = shape[0] * shape[2..].iter().product::<usize>();
        self.normal(shape, (2.0 / fan_out as f32).sqrt())
    }

    /// Uniform in ±1/sqrt(fan_in).
    pub fn fan_in_uniform(&mut self, shape: &[usize]) -> Result<Tensor> {
        let fan_in: usize = shape[1..].iter().product();
        self.uniform(shape, 1.0 / (fan_in as f32).sqrt())
    }

    pub fn constant(shape: &[usize], value: f32) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &Device::Cpu)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, inputs: usize, outputs: usize, bias: bool) -> Result<Self> {
        let weight = store.add_param(format!("{prefix}.weight"), init.fan_in_uniform(&[outputs, inputs])?)?;
        let bias = if bias {
            Some(store.add_param(format!("{prefix}.bias"), init.uniform(&[outputs], 1.0 / (inputs as f32).sqrt())?)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// `x: (N, in)` → `(N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Per-channel mean and biased variance of an NCHW buffer, accumulated in f64.
fn channel_stats<T: WithDType>(x: &[T], (n, c, hw): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x[base..base + hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            q += x[base..base + hw].iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// Per-channel batch mean and biased variance handed out of the op.
type SharedStats = Arc<Mutex<Option<(Vec<f64>, Vec<f64>)>>>;

/// Training-mode batch norm fused into one pass over (x, gamma, beta).
/// The batch statistics are left in `stats` for the running-stat update.
struct BatchNormTrain {
    eps: f64,
    stats: SharedStats,
}

fn bn_forward<T: WithDType>(x: &[T], gamma: &[T], beta: &[T], dims: (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let (n, c, hw) = dims;
    let (mean, var) = channel_stats(x, dims);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch].to_f64() / (var[ch] + eps).sqrt();
            let shift = beta[ch].to_f64() - mean[ch] * scale;
            let base = (b * c + ch) * hw;
            out.extend(x[base..base + hw].iter().map(|v| T::from_f64(v.to_f64() * scale + shift)));
        }
    }
    (out, mean, var)
}

fn bn_backward<T: WithDType>(x: &[T], gamma: &[T], grad: &[T], dims: (usize, usize, usize), eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let count = (n * hw) as f64;
    let (mean, var) = channel_stats(x, dims);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (xv, gv) in x[base..base + hw].iter().zip(&grad[base..base + hw]) {
                let g = gv.to_f64();
                dbeta[ch] += g;
                dgamma[ch] += g * (xv.to_f64() - mean[ch]) * inv_std[ch];
            }
        }
    }
    let mut dx = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let k = gamma[ch].to_f64() * inv_std[ch] / count;
            let base = (b * c + ch) * hw;
            dx.extend(x[base..base + hw].iter().zip(&grad[base..base + hw]).map(|(xv, gv)| {
                let xhat = (xv.to_f64() - mean[ch]) * inv_std[ch];
                T::from_f64(k * (count * gv.to_f64() - dbeta[ch] - xhat * dgamma[ch]))
            }));
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dgamma), cast(dbeta))
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let dims = (n, c, h * w);
        let (out, mean, var) = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                let (o, m, v) = bn_forward(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, contiguous_slice(b, l3)?, dims, self.eps);
                (CpuStorage::F32(o), m, v)
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                let (o, m, v) = bn_forward(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, contiguous_slice(b, l3)?, dims, self.eps);
                (CpuStorage::F64(o), m, v)
            }
            _ => candle_core::bail!("batch-norm: only matching f32 or f64 inputs are supported"),
        };
        *self.stats.lock().expect("stats lock") = Some((mean, var));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let dims = (n, c, h * w);
        let dev = x.device();
        fn flat<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
            t.contiguous()?.flatten_all()?.to_vec1::<T>()
        }
        let (dx, dg, db) = match x.dtype() {
            DType::F32 => {
                let (dx, dg, db) = bn_backward(&flat::<f32>(x)?, &flat::<f32>(gamma)?, &flat::<f32>(grad)?, dims, self.eps);
                (Tensor::from_vec(dx, (n, c, h, w), dev)?, Tensor::from_vec(dg, c, dev)?, Tensor::from_vec(db, c, dev)?)
            }
            DType::F64 => {
                let (dx, dg, db) = bn_backward(&flat::<f64>(x)?, &flat::<f64>(gamma)?, &flat::<f64>(grad)?, dims, self.eps);
                (Tensor::from_vec(dx, (n, c, h, w), dev)?, Tensor::from_vec(dg, c, dev)?, Tensor::from_vec(db, c, dev)?)
            }
            _ => candle_core::bail!("batch-norm: only f32 and f64 are supported"),
        };
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// `x * scale[c] + shift[c]` over NCHW in one pass.
struct ChannelAffine;

fn affine_forward<T: WithDType>(x: &[T], scale: &[T], shift: &[T], (n, c, hw): (usize, usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (a, s) = (scale[ch], shift[ch]);
            out.extend(x[base..base + hw].iter().map(|&v| v * a + s));
        }
    }
    out
}

fn affine_backward<T: WithDType>(x: &[T], scale: &[T], grad: &[T], (n, c, hw): (usize, usize, usize)) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    let mut dx = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for (xv, &gv) in x[base..base + hw].iter().zip(&grad[base..base + hw]) {
                dscale[ch] += gv.to_f64() * xv.to_f64();
                dshift[ch] += gv.to_f64();
                dx.push(gv * scale[ch]);
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, cast(dscale), cast(dshift))
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let dims = (n, c, h * w);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(affine_forward(contiguous_slice(x, l1)?, contiguous_slice(a, l2)?, contiguous_slice(b, l3)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(affine_forward(contiguous_slice(x, l1)?, contiguous_slice(a, l2)?, contiguous_slice(b, l3)?, dims))
            }
            _ => candle_core::bail!("channel-affine: only matching f32 or f64 inputs are supported"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let dims = (n, c, h * w);
        let dev = x.device();
        fn flat<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
            t.contiguous()?.flatten_all()?.to_vec1::<T>()
        }
        let (dx, da, db) = match x.dtype() {
            DType::F32 => {
                let (dx, da, db) = affine_backward(&flat::<f32>(x)?, &flat::<f32>(scale)?, &flat::<f32>(grad)?, dims);
                (Tensor::from_vec(dx, (n, c, h, w), dev)?, Tensor::from_vec(da, c, dev)?, Tensor::from_vec(db, c, dev)?)
            }
            DType::F64 => {
                let (dx, da, db) = affine_backward(&flat::<f64>(x)?, &flat::<f64>(scale)?, &flat::<f64>(grad)?, dims);
                (Tensor::from_vec(dx, (n, c, h, w), dev)?, Tensor::from_vec(da, c, dev)?, Tensor::from_vec(db, c, dev)?)
            }
            _ => candle_core::bail!("channel-affine: only f32 and f64 are supported"),
        };
        Ok((Some(dx), Some(da), Some(db)))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_param(format!("{prefix}.weight"), Init::constant(&[channels], 1.0)?)?,
            bias: store.add_param(format!("{prefix}.bias"), Init::constant(&[channels], 0.0)?)?,
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Init::constant(&[channels], 0.0)?)?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Init::constant(&[channels], 1.0)?)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics (and a running-stat update) when `train`, running
    /// statistics otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if train {
            let stats = Arc::new(Mutex::new(None));
            let op = BatchNormTrain { eps: self.eps, stats: stats.clone() };
            let y = x.contiguous()?.apply_op3_arc(self.weight.as_tensor(), self.bias.as_tensor(), Arc::new(Box::new(op)))?;
            let (mean, var) = stats.lock().expect("stats lock").take().expect("forward records stats");
            let count = n * h * w;
            let correction = count as f64 / (count.max(2) - 1) as f64;
            let m = self.momentum;
            let dtype = self.running_mean.dtype();
            let update = |run: &Var, batch: Vec<f64>, factor: f64| -> Result<()> {
                let batch = Tensor::from_vec(batch, c, x.device())?.to_dtype(dtype)?;
                run.set(&((run.as_tensor() * (1.0 - m))? + (batch * (m * factor))?)?)?;
                Ok(())
            };
            update(&self.running_mean, mean, 1.0)?;
            update(&self.running_var, var, correction)?;
            return Ok(y);
        }
        let inv_std = (self.running_var.as_tensor() + self.eps)?.sqrt()?.recip()?;
        let scale = (inv_std * self.weight.as_tensor())?;
        let shift = (self.bias.as_tensor() - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x.contiguous()?.apply_op3(&scale, &shift, ChannelAffine)?)
    }
}

/// Flat `Vec<T>` copy of a tensor of any shape.
pub fn to_vec<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    Ok(t.flatten_all()?.to_vec1::<T>()?)
}
