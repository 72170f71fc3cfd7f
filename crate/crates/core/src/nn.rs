//! Minimal layer toolkit on top of candle: a seeded parameter store, linear
//! and convolution layers.
//!
//! Convolutions are lowered to an explicit im2col + GEMM so that the backward
//! pass is two matrix products and a col2im scatter. On CPU this is several
//! times faster than the transposed-convolution path candle uses for the
//! input gradient.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors. Names are kept sorted so that iteration order,
/// and therefore checkpoint layout, is stable.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, values, shape)
    }

    /// He-uniform initialisation for layers followed by a rectifier.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables whose names do not start with any of `frozen_prefixes`.
    pub fn trainable(&self, frozen_prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| !frozen_prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Overwrite a parameter in place; shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, stored value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.kaiming(&format!("{name}.weight"), &[out_dim, in_dim], in_dim)?;
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let bias = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Output layer initialised small so early logits are near uniform.
    pub fn new_head(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scale: f64,
    ) -> Result<Self> {
        let bound = scale / (in_dim.max(1) as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = store.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x` is `(rows, in_dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_index, src_index)` for every in-bounds tap of one image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let patch = self.patch_len();
        let k = self.kernel;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (oy * ow + ox) * patch;
                for c in 0..self.channels {
                    let plane = c * self.height * self.width;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = plane + iy as usize * self.width;
                        let col_base = row + (c * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                f(col_base + kx, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Copy + Default>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let per_col = oh * ow * g.patch_len();
    let per_img = g.channels * g.height * g.width;
    let mut dst = vec![T::default(); batch * per_col];
    for b in 0..batch {
        let s = &src[b * per_img..(b + 1) * per_img];
        let d = &mut dst[b * per_col..(b + 1) * per_col];
        g.for_each_tap(|ci, si| d[ci] = s[si]);
    }
    dst
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let per_col = oh * ow * g.patch_len();
    let per_img = g.channels * g.height * g.width;
    let mut dst = vec![T::default(); batch * per_img];
    for b in 0..batch {
        let s = &src[b * per_col..(b + 1) * per_col];
        let d = &mut dst[b * per_img..(b + 1) * per_img];
        g.for_each_tap(|ci, si| d[si] += s[ci]);
    }
    dst
}

/// `(B, C, H, W)` -> `(B * OH * OW, C * k * k)`, one patch per row.
struct Im2Col {
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// Adjoint of [`Im2Col`].
struct Col2Im {
    batch: usize,
    geometry: Geometry,
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col/col2im require contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, channels, height, width) = layout.shape().dims4()?;
        let g = Geometry {
            channels,
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((batch * oh * ow, g.patch_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, batch, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (batch, channels, height, width) = arg.dims4()?;
        let op = Col2Im {
            batch,
            geometry: Geometry {
                channels,
                height,
                width,
                kernel: self.kernel,
                stride: self.stride,
                padding: self.padding,
            },
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry;
        let shape = Shape::from((self.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(col2im(contiguous_slice(v, layout)?, self.batch, g))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(col2im(contiguous_slice(v, layout)?, self.batch, g))
            }
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let g = self.geometry;
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col {
            kernel: g.kernel,
            stride: g.stride,
            padding: g.padding,
        })?))
    }
}

/// Square-kernel 2-D convolution, NCHW.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = store.kaiming(
            &format!("{name}.weight"),
            &[spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            fan_in,
        )?;
        let bias = if spec.bias {
            Some(store.zeros(&format!("{name}.bias"), &[spec.out_channels])?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_hw(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, channels, height, width) = x.dims4()?;
        let in_channels = self.weight.dims()[1];
        if channels != in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {in_channels} input channels, got {channels}"
            )));
        }
        if height + 2 * self.padding < self.kernel || width + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "{height}x{width} input is smaller than the {k}x{k} kernel",
                k = self.kernel
            )));
        }
        let (oh, ow) = self.output_hw(height, width);
        let cols = x.contiguous()?.apply_op1(Im2Col {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        })?;
        let out_channels = self.out_channels();
        let w = self.weight.reshape((out_channels, ()))?;
        let mut y = cols.matmul(&w.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        Ok(y
            .reshape((batch, oh * ow, out_channels))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((batch, out_channels, oh, ow))?)
    }
}

/// `sqrt(sum(x^2) + eps)` along the last dimension; finite gradient at zero.
pub fn safe_l2_norm(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()?.sum_keepdim(candle_core::D::Minus1)? + NORM_EPS)?
        .sqrt()?
        .squeeze(candle_core::D::Minus1)?)
}

pub(crate) const NORM_EPS: f64 = 1e-24;

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
