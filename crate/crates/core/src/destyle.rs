//! De-stylization of support keypoint embeddings and the style-consistency
//! loss across edgemap variants.
//!
//! The network fuses a keypoint embedding with the globally pooled context of
//! its feature map:
//!
//! ```text
//! ctx   = MLP1([phi; mean(f)])        2c -> c -> c
//! fused = phi + ctx
//! gated = fused * sigmoid(fused)
//! delta = MLP2(gated)                 c -> c -> c
//! ```

use candle_core::{DType, Tensor};

use crate::encoder::{FeatureMap, KeypointEmbedding};
use crate::error::{Error, Result};
use crate::nn::{safe_l2_norm, sigmoid, Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct DestylizedEmbedding(pub Tensor);

impl DestylizedEmbedding {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

pub struct DestyleNet {
    ctx_in: Linear,
    ctx_out: Linear,
    map_in: Linear,
    map_out: Linear,
    channels: usize,
}

impl DestyleNet {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            ctx_in: Linear::new(store, &format!("{prefix}.ctx_in"), 2 * channels, channels)?,
            ctx_out: Linear::new(store, &format!("{prefix}.ctx_out"), channels, channels)?,
            map_in: Linear::new(store, &format!("{prefix}.map_in"), channels, channels)?,
            map_out: Linear::new(store, &format!("{prefix}.map_out"), channels, channels)?,
            channels,
        })
    }

    /// Builds the network from explicit layers (in order: context in/out,
    /// mapping in/out).
    pub fn from_layers(layers: [Linear; 4]) -> Result<Self> {
        let [ctx_in, ctx_out, map_in, map_out] = layers;
        let c = ctx_out.out_dim();
        if ctx_in.in_dim() != 2 * c || ctx_in.out_dim() != c || ctx_out.in_dim() != c {
            return Err(Error::Shape("context MLP must be 2c -> c -> c".into()));
        }
        if map_in.in_dim() != c || map_in.out_dim() != c || map_out.in_dim() != c || map_out.out_dim() != c {
            return Err(Error::Shape("mapping MLP must be c -> c -> c".into()));
        }
        Ok(Self {
            ctx_in,
            ctx_out,
            map_in,
            map_out,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Batched form: `phi` is (rows, c), `global` is (rows, c).
    pub fn forward(&self, phi: &Tensor, global: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        if phi.dims2()?.1 != c || global.dims() != phi.dims() {
            return Err(Error::Shape(format!(
                "de-stylization expects (rows, {c}) embeddings and context, got {:?} and {:?}",
                phi.dims(),
                global.dims()
            )));
        }
        let joint = Tensor::cat(&[phi, global], 1)?;
        let ctx = self.ctx_out.forward(&self.ctx_in.forward(&joint)?.relu()?)?;
        let fused = (phi + ctx)?;
        let gated = (&fused * sigmoid(&fused)?)?;
        self.map_out.forward(&self.map_in.forward(&gated)?.relu()?)
    }

    pub fn destylize(&self, phi: &KeypointEmbedding, f: &FeatureMap) -> Result<DestylizedEmbedding> {
        if phi.values().dims() != [f.channels()] {
            return Err(Error::Shape(format!(
                "embedding of shape {:?} does not match a {}-channel feature map",
                phi.values().dims(),
                f.channels()
            )));
        }
        let g = f.global_mean()?.unsqueeze(0)?;
        let out = self.forward(&phi.values().unsqueeze(0)?, &g)?;
        Ok(DestylizedEmbedding(out.squeeze(0)?))
    }
}

/// Sum over visible keypoints of the three pairwise L2 distances between
/// the S, S1 and S2 de-stylized embeddings. Each variant is (keypoints, c).
pub fn style_loss_tensor(variants: [&Tensor; 3], visible: &[bool]) -> Result<Tensor> {
    let dims = variants[0].dims();
    if variants.iter().any(|v| v.dims() != dims) || dims.len() != 2 {
        return Err(Error::Shape(format!(
            "style variants must share a (keypoints, c) shape, got {:?}, {:?}, {:?}",
            variants[0].dims(),
            variants[1].dims(),
            variants[2].dims()
        )));
    }
    if dims[0] != visible.len() {
        return Err(Error::Shape(format!(
            "{} visibility flags for {} keypoints",
            visible.len(),
            dims[0]
        )));
    }
    let mask = Tensor::from_vec(
        visible.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        dims[0],
        variants[0].device(),
    )?
    .to_dtype(variants[0].dtype())?;
    let [a, b, c] = variants;
    let pair = safe_l2_norm(&(a - b)?)? + safe_l2_norm(&(a - c)?)?;
    let total = (pair? + safe_l2_norm(&(b - c)?)?)?;
    Ok((total * mask)?.sum_all()?)
}

/// Scalar form over explicit per-keypoint embeddings.
pub fn style_loss(variants: [&[DestylizedEmbedding]; 3], visible: &[bool]) -> Result<f64> {
    let n = variants[0].len();
    if variants.iter().any(|v| v.len() != n) || visible.len() != n {
        return Err(Error::Shape(format!(
            "misaligned style variants: {}, {}, {} embeddings, {} flags",
            variants[0].len(),
            variants[1].len(),
            variants[2].len(),
            visible.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let stack = |v: &[DestylizedEmbedding]| -> Result<Tensor> {
        let rows: Vec<Tensor> = v.iter().map(|e| e.values().clone()).collect();
        Ok(Tensor::stack(&rows, 0)?)
    };
    let (s, s1, s2) = (stack(variants[0])?, stack(variants[1])?, stack(variants[2])?);
    let loss = style_loss_tensor([&s, &s1, &s2], visible)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
