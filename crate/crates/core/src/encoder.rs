//! Image encoder and Gaussian keypoint pooling.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::config::{Backbone, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, ParamStore};

/// A `c x h x w` feature map plus the number of input pixels per cell.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    values: Tensor,
    stride: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: usize) -> Result<Self> {
        let dims = values.dims();
        if dims.len() != 3 || dims.iter().any(|d| *d == 0) || stride == 0 {
            return Err(Error::Shape(format!(
                "feature map must be a non-empty c x h x w tensor with positive stride, got {dims:?} / {stride}"
            )));
        }
        Ok(Self { values, stride })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[2]
    }

    /// Global average over spatial cells, length `c`.
    pub fn global_mean(&self) -> Result<Tensor> {
        Ok(self.values.flatten_from(1)?.mean(1)?)
    }
}

/// Pooled keypoint vector, length `c`.
#[derive(Clone, Debug)]
pub struct KeypointEmbedding(pub Tensor);

impl KeypointEmbedding {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// Gaussian weights of every cell center for each point, row-major
/// `(points, h * w)`.
///
/// Points are normalized coordinates; both points and cell centers are
/// measured in input pixels (`(i + 0.5) * stride` for cell `i`), and `xi` is
/// a pixel bandwidth. Weights are not normalized.
pub fn gaussian_weights(points: &[[f64; 2]], h: usize, w: usize, stride: usize, xi: f64) -> Result<Vec<f64>> {
    if !(xi > 0.0) {
        return Err(Error::Parameter(format!("pooling bandwidth xi must be > 0, got {xi}")));
    }
    let (img_w, img_h) = ((w * stride) as f64, (h * stride) as f64);
    let inv = 1.0 / (2.0 * xi * xi);
    let mut out = Vec::with_capacity(points.len() * h * w);
    for p in points {
        if p.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(Error::Validation(format!(
                "pooling location ({}, {}) is outside [-1, 1]",
                p[0], p[1]
            )));
        }
        let px = (p[0] + 1.0) / 2.0 * img_w;
        let py = (p[1] + 1.0) / 2.0 * img_h;
        for i in 0..h {
            let dy = (i as f64 + 0.5) * stride as f64 - py;
            for j in 0..w {
                let dx = (j as f64 + 0.5) * stride as f64 - px;
                out.push((-(dx * dx + dy * dy) * inv).exp());
            }
        }
    }
    Ok(out)
}

/// Pools several points from one map at once: `(points, c)`.
pub fn gaussian_pool_many(f: &FeatureMap, points: &[[f64; 2]], xi: f64) -> Result<Tensor> {
    let (c, h, w) = f.values.dims3()?;
    let weights = gaussian_weights(points, h, w, f.stride, xi)?;
    let wt = Tensor::from_vec(weights, (points.len(), h * w), f.values.device())?
        .to_dtype(f.values.dtype())?;
    let flat = f.values.reshape((c, h * w))?;
    Ok(wt.matmul(&flat.t()?)?)
}

/// `sum_x exp(-|x - u|^2 / (2 xi^2)) * f[x]` over all cell centers `x`.
pub fn gaussian_pool(f: &FeatureMap, u: [f64; 2], xi: f64) -> Result<KeypointEmbedding> {
    let pooled = gaussian_pool_many(f, &[u], xi)?;
    Ok(KeypointEmbedding(pooled.squeeze(0)?))
}

/// Maps `(B, 3, H, W)` images to `(B, c, H/32, W/32)` features.
pub struct Encoder {
    image_size: usize,
    net: Net,
}

enum Net {
    Tiny(TinyNet),
    Reference(Box<ResNet50>),
}

pub const TOTAL_STRIDE: usize = 32;

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, image_size: usize) -> Result<Self> {
        if image_size == 0 || image_size % TOTAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} must be a positive multiple of {TOTAL_STRIDE}"
            )));
        }
        let net = match cfg.backbone {
            Backbone::Tiny => Net::Tiny(TinyNet::new(store, "encoder", cfg.channels)?),
            Backbone::Reference => Net::Reference(Box::new(ResNet50::new(store, "encoder")?)),
        };
        Ok(Self { image_size, net })
    }

    pub fn channels(&self) -> usize {
        match &self.net {
            Net::Tiny(t) => t.channels,
            Net::Reference(_) => 2048,
        }
    }

    pub fn stride(&self) -> usize {
        TOTAL_STRIDE
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / TOTAL_STRIDE
    }

    pub fn encode_batch(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Shape(format!(
                "encoder expects 3x{s}x{s} images, got {c}x{h}x{w}",
                s = self.image_size
            )));
        }
        match &self.net {
            Net::Tiny(t) => t.forward(images),
            Net::Reference(r) => r.forward(images),
        }
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!("expected a 3 x H x W image, got {:?}", image.dims())));
        }
        let f = self.encode_batch(&image.unsqueeze(0)?)?;
        FeatureMap::new(f.squeeze(0)?, TOTAL_STRIDE)
    }
}

/// Patchify stem (8x8, stride 8) followed by three 3x3 convolutions.
struct TinyNet {
    stem: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    channels: usize,
}

impl TinyNet {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("tiny backbone needs at least one channel".into()));
        }
        Ok(Self {
            stem: Conv2d::new(store, &format!("{prefix}.stem"), ConvSpec::new(3, 32, 8, 8, 0))?,
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), ConvSpec::new(32, 64, 3, 2, 1))?,
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), ConvSpec::new(64, 64, 3, 2, 1))?,
            conv3: Conv2d::new(store, &format!("{prefix}.conv3"), ConvSpec::new(64, channels, 3, 1, 1))?,
            channels,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.stem.forward(x)?.relu()?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        self.conv3.forward(&x)
    }
}

/// Batch normalization with fixed statistics, folded to a per-channel affine.
struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.zeros(&format!("{name}.bias"), &[channels])?,
            running_mean: store.zeros(&format!("{name}.running_mean"), &[channels])?,
            running_var: store.constant(&format!("{name}.running_var"), &[channels], 1.0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let scale = (&self.weight / (self.running_var.detach() + 1e-5)?.sqrt()?)?;
        let shift = (&self.bias - (self.running_mean.detach() * &scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)?)
    }
}

struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out_ch = width * 4;
        let downsample = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, &format!("{name}.downsample.0"), ConvSpec::new(in_ch, out_ch, 1, stride, 0).no_bias())?,
                FrozenBatchNorm::new(store, &format!("{name}.downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), ConvSpec::new(in_ch, width, 1, 1, 0).no_bias())?,
            bn1: FrozenBatchNorm::new(store, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), ConvSpec::new(width, width, 3, stride, 1).no_bias())?,
            bn2: FrozenBatchNorm::new(store, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(store, &format!("{name}.conv3"), ConvSpec::new(width, out_ch, 1, 1, 0).no_bias())?,
            bn3: FrozenBatchNorm::new(store, &format!("{name}.bn3"), out_ch)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet-50 trunk (torchvision parameter names under `encoder.`), no
/// classifier head. Output has 2048 channels at stride 32.
struct ResNet50 {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    fn new(store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{prefix}.conv1"), ConvSpec::new(3, 64, 7, 2, 3).no_bias())?;
        let bn1 = FrozenBatchNorm::new(store, &format!("{prefix}.bn1"), 64)?;
        let mut layers = Vec::new();
        let mut in_ch = 64;
        for (li, (blocks, width, stride)) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)]
            .into_iter()
            .enumerate()
        {
            let mut layer = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layer.push(Bottleneck::new(store, &format!("{prefix}.layer{}.{b}", li + 1), in_ch, width, s)?);
                in_ch = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let mut x = max_pool_3x3_s2(&x)?;
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x)?;
            }
        }
        Ok(x)
    }
}

/// 3x3 max pooling, stride 2, padding 1.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    Ok(padded.max_pool2d_with_stride(3, 2)?)
}

/// Loads backbone weights from a safetensors file. Keys may be given with or
/// without the `encoder.` prefix (torchvision exports have none); tensors not
/// belonging to the backbone (e.g. `fc.*`) are ignored.
pub fn load_backbone_weights(store: &ParamStore, path: &Path) -> Result<usize> {
    let tensors = candle_core::safetensors::load(path, &candle_core::Device::Cpu)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut loaded = 0;
    for (name, value) in tensors {
        let key = if name.starts_with("encoder.") { name.clone() } else { format!("encoder.{name}") };
        if store.get(&key).is_some() {
            store.assign(&key, &value)?;
            loaded += 1;
        }
    }
    if loaded == 0 {
        return Err(Error::Checkpoint(format!("{} contains no backbone tensors", path.display())));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn map_from(values: Vec<f64>, c: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
        FeatureMap::new(Tensor::from_vec(values, (c, h, w), &Device::Cpu).unwrap(), stride).unwrap()
    }

    /// Normalized coordinate of the center of cell `(row, col)`.
    fn cell_center(row: usize, col: usize, h: usize, w: usize) -> [f64; 2] {
        [
            2.0 * (col as f64 + 0.5) / w as f64 - 1.0,
            2.0 * (row as f64 + 0.5) / h as f64 - 1.0,
        ]
    }

    #[test]
    fn single_cell_at_exact_center_has_unit_weight() {
        let mut v = vec![0.0; 2 * 4 * 4];
        v[1 * 4 + 2] = 3.0; // channel 0, cell (1, 2)
        v[16 + 1 * 4 + 2] = -2.0; // channel 1
        let f = map_from(v, 2, 4, 4, 32);
        let e = gaussian_pool(&f, cell_center(1, 2, 4, 4), 14.0).unwrap().to_vec().unwrap();
        assert!((e[0] - 3.0).abs() < 1e-12);
        assert!((e[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn corner_cell_weight_three_by_three() {
        let mut v = vec![0.0; 9];
        v[0] = 1.0;
        let stride = 32;
        let f = map_from(v, 1, 3, 3, stride);
        let xi = 20.0;
        let e = gaussian_pool(&f, [0.0, 0.0], xi).unwrap().to_vec().unwrap();
        let d2 = 2.0 * (stride as f64).powi(2);
        assert!((e[0] - (-d2 / (2.0 * xi * xi)).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_map_scales_by_weight_sum() {
        let (h, w, s) = (5, 6, 16);
        let mut v = vec![0.0; 2 * h * w];
        for i in 0..h * w {
            v[i] = 1.5;
            v[h * w + i] = -0.5;
        }
        let f = map_from(v, 2, h, w, s);
        let u = [0.13, -0.4];
        let xi = 9.0;
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..w {
                let cx = (j as f64 + 0.5) * s as f64;
                let cy = (i as f64 + 0.5) * s as f64;
                let px = (u[0] + 1.0) / 2.0 * (w * s) as f64;
                let py = (u[1] + 1.0) / 2.0 * (h * s) as f64;
                total += (-((cx - px).powi(2) + (cy - py).powi(2)) / (2.0 * xi * xi)).exp();
            }
        }
        let e = gaussian_pool(&f, u, xi).unwrap().to_vec().unwrap();
        assert!((e[0] - 1.5 * total).abs() < 1e-12);
        assert!((e[1] + 0.5 * total).abs() < 1e-12);
    }

    #[test]
    fn zero_map_pools_to_zero_and_weights_positive() {
        let f = map_from(vec![0.0; 3 * 12 * 12], 3, 12, 12, 32);
        let e = gaussian_pool(&f, [0.4, 0.9], 14.0).unwrap().to_vec().unwrap();
        assert!(e.iter().all(|v| *v == 0.0));
        let w = gaussian_weights(&[[0.0, 0.0]], 12, 12, 32, 100.0).unwrap();
        assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn bandwidth_must_be_positive() {
        let f = map_from(vec![0.0; 4], 1, 2, 2, 8);
        assert!(matches!(gaussian_pool(&f, [0.0, 0.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_pool(&f, [0.0, 0.0], -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn small_bandwidth_selects_nearest_cell() {
        let (h, w) = (12, 12);
        let v: Vec<f64> = (0..h * w).map(|i| i as f64 * 0.1 - 3.0).collect();
        let f = map_from(v.clone(), 1, h, w, 32);
        for (r, c) in [(0, 0), (5, 7), (11, 3)] {
            let e = gaussian_pool(&f, cell_center(r, c, h, w), 1e-3).unwrap().to_vec().unwrap();
            assert!((e[0] - v[r * w + c]).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_backbone_shapes_and_determinism() {
        let mut store = ParamStore::new(0, DType::F32);
        let cfg = EncoderConfig {
            backbone: Backbone::Tiny,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(&mut store, &cfg, 384).unwrap();
        let img = Tensor::randn(0f32, 1.0, (3, 384, 384), &Device::Cpu).unwrap();
        let a = enc.encode(&img).unwrap();
        assert_eq!(a.values().dims(), &[64, 12, 12]);
        assert_eq!(a.stride(), 32);
        let b = enc.encode(&img).unwrap();
        let diff = (a.values() - b.values()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let wrong = Tensor::zeros((3, 256, 256), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&wrong), Err(Error::Shape(_))));
    }
}
