//! Support prototypes, prototype/query correlation and the descriptor network.

use candle_core::{DType, Tensor};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, ParamStore};

/// Mean of the visible de-stylized support embeddings of one keypoint.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub values: Tensor,
    pub visible: bool,
}

/// All prototypes of an episode, stacked as (N, c).
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub values: Tensor,
    pub visible: Vec<bool>,
}

impl Prototypes {
    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn get(&self, n: usize) -> Result<Prototype> {
        Ok(Prototype {
            values: self.values.get(n)?,
            visible: self.visible[n],
        })
    }
}

/// `deltas` is (K, N, c); `vis[k][n]` marks support `k` showing keypoint `n`.
///
/// The divisor is the number of visible contributors, not K. Keypoints seen
/// by no support get a zero placeholder and `visible = false`.
pub fn build_prototypes(deltas: &Tensor, vis: &[Vec<bool>]) -> Result<Prototypes> {
    let (k, n, _) = deltas.dims3()?;
    if vis.len() != k || vis.iter().any(|row| row.len() != n) {
        return Err(Error::Shape(format!(
            "visibility grid does not match {k} supports x {n} keypoints"
        )));
    }
    let mut weights = vec![0.0; k * n];
    let mut visible = vec![false; n];
    for j in 0..n {
        let count = (0..k).filter(|&i| vis[i][j]).count();
        visible[j] = count > 0;
        for i in 0..k {
            if vis[i][j] {
                weights[i * n + j] = 1.0 / count as f64;
            }
        }
    }
    let w = Tensor::from_vec(weights, (k, n, 1), deltas.device())?.to_dtype(deltas.dtype())?;
    let values = deltas.broadcast_mul(&w)?.sum(0)?;
    Ok(Prototypes { values, visible })
}

/// `A[x] = f[x] * mu` at every spatial location.
pub fn correlate(f: &FeatureMap, mu: &Prototype) -> Result<Tensor> {
    let c = f.channels();
    if mu.values.dims() != [c] {
        return Err(Error::Shape(format!(
            "prototype of shape {:?} does not match a {c}-channel feature map",
            mu.values.dims()
        )));
    }
    Ok(f.values().broadcast_mul(&mu.values.reshape((c, 1, 1))?)?)
}

/// Correlates each selected (query, prototype) pair: `queries` is (M, c, h, w),
/// `protos` is (N, c); returns (pairs, c, h, w).
pub fn correlate_pairs(queries: &Tensor, protos: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    let (_, c, _, _) = queries.dims4()?;
    if protos.dims2()?.1 != c {
        return Err(Error::Shape(format!(
            "prototypes have {} channels, query features {c}",
            protos.dims2()?.1
        )));
    }
    let dev = queries.device();
    let qi = Tensor::from_vec(pairs.iter().map(|p| p.0 as u32).collect::<Vec<_>>(), pairs.len(), dev)?;
    let pi = Tensor::from_vec(pairs.iter().map(|p| p.1 as u32).collect::<Vec<_>>(), pairs.len(), dev)?;
    let q = queries.index_select(&qi, 0)?;
    let p = protos.index_select(&pi, 0)?.reshape((pairs.len(), c, 1, 1))?;
    Ok(q.broadcast_mul(&p)?)
}

/// Channel widths of the three descriptor convolutions.
pub fn descriptor_channels(c: usize) -> [usize; 3] {
    if c == 2048 {
        [512, 512, 1024]
    } else {
        [(c / 4).max(1), (c / 4).max(1), (c / 2).max(1)]
    }
}

/// Three 3x3 stride-2 convolutions with rectifiers, flattened.
pub struct DescriptorNet {
    convs: [Conv2d; 3],
    in_channels: usize,
}

impl DescriptorNet {
    pub fn new(store: &mut ParamStore, prefix: &str, in_channels: usize) -> Result<Self> {
        let [a, b, c] = descriptor_channels(in_channels);
        Ok(Self {
            convs: [
                Conv2d::new(store, &format!("{prefix}.conv1"), ConvSpec::new(in_channels, a, 3, 2, 1))?,
                Conv2d::new(store, &format!("{prefix}.conv2"), ConvSpec::new(a, b, 3, 2, 1))?,
                Conv2d::new(store, &format!("{prefix}.conv3"), ConvSpec::new(b, c, 3, 2, 1))?,
            ],
            in_channels,
        })
    }

    /// Output spatial sizes after each convolution for an `h x w` input.
    pub fn stage_shapes(&self, h: usize, w: usize) -> [(usize, usize, usize); 3] {
        let mut out = [(0, 0, 0); 3];
        let (mut hh, mut ww) = (h, w);
        for (i, conv) in self.convs.iter().enumerate() {
            let (a, b) = conv.output_hw(hh, ww);
            out[i] = (conv.out_channels(), a, b);
            hh = a;
            ww = b;
        }
        out
    }

    pub fn output_dim(&self, h: usize, w: usize) -> usize {
        let (c, a, b) = self.stage_shapes(h, w)[2];
        c * a * b
    }

    /// (rows, c, h, w) -> (rows, d).
    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = a.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "descriptor expects {} channels, got {c}",
                self.in_channels
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("descriptor input {h}x{w} is too small")));
        }
        let mut x = a.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x.flatten_from(1)?)
    }

    /// Single correlated map (c, h, w) -> descriptor (d).
    pub fn describe(&self, a: &Tensor) -> Result<Tensor> {
        Ok(self.forward(&a.unsqueeze(0)?)?.squeeze(0)?)
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
