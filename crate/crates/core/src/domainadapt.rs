//! Supervised keypoint-level transport loss between support prototypes and
//! query keypoint embeddings.
//!
//! For every keypoint `n` with a visible prototype `mu_n` and query
//! embeddings `phi_mn` pooled at the ground-truth query locations:
//!
//! ```text
//! mu_hat_n = mean_m phi_mn                      (no gradient)
//! p_n      = exp(-|mu_hat_n - mu_n|^2)
//! L        = sum_{n,m} p_n * |mu_n - phi_mn| * exp(-|mu_n - phi_mn|^2)
//! ```

use candle_core::{DType, Tensor};

use crate::encoder::{gaussian_pool, FeatureMap, KeypointEmbedding};
use crate::error::{Error, Result};
use crate::matcher::Prototype;
use crate::nn::safe_l2_norm;

/// Query-side prototype of one keypoint. Always detached from the graph.
#[derive(Clone, Debug)]
pub struct QueryPrototype {
    pub values: Tensor,
    pub likelihood: f64,
    pub gradient_isolated: bool,
}

/// Pools every visible ground-truth query location; invisible keypoints map
/// to `None`.
pub fn extract_query_embeddings(
    f_m: &FeatureMap,
    locations: &[([f64; 2], bool)],
    xi: f64,
) -> Result<Vec<Option<KeypointEmbedding>>> {
    locations
        .iter()
        .map(|(u, visible)| {
            if *visible {
                gaussian_pool(f_m, *u, xi).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// Mean of the available query embeddings for one keypoint and its
/// likelihood under the support prototype.
pub fn query_prototype(embeddings: &[KeypointEmbedding], mu: &Prototype) -> Result<QueryPrototype> {
    if embeddings.is_empty() {
        return Err(Error::Validation("query prototype needs at least one embedding".into()));
    }
    let rows: Vec<Tensor> = embeddings.iter().map(|e| e.values().detach()).collect();
    let values = Tensor::stack(&rows, 0)?.mean(0)?.detach();
    if values.dims() != mu.values.dims() {
        return Err(Error::Shape(format!(
            "query embeddings {:?} vs prototype {:?}",
            values.dims(),
            mu.values.dims()
        )));
    }
    let d2 = (&values - &mu.values)?
        .sqr()?
        .sum_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok(QueryPrototype {
        values,
        likelihood: (-d2).exp(),
        gradient_isolated: true,
    })
}

/// Rows of query embeddings tagged with the keypoint they belong to.
pub struct QueryEmbeddings<'a> {
    /// (rows, c).
    pub values: &'a Tensor,
    /// Keypoint index of each row.
    pub keypoint: &'a [usize],
}

/// Query prototypes for every keypoint: (N, c) detached means plus a flag
/// marking keypoints that have at least one query row.
pub fn query_prototypes(q: &QueryEmbeddings, n_keypoints: usize) -> Result<(Tensor, Vec<bool>)> {
    let rows = q.keypoint.len();
    let mut counts = vec![0usize; n_keypoints];
    for &n in q.keypoint {
        if n >= n_keypoints {
            return Err(Error::Shape(format!("keypoint index {n} out of range ({n_keypoints})")));
        }
        counts[n] += 1;
    }
    let mut weights = vec![0.0; n_keypoints * rows];
    for (r, &n) in q.keypoint.iter().enumerate() {
        weights[n * rows + r] = 1.0 / counts[n] as f64;
    }
    let w = Tensor::from_vec(weights, (n_keypoints, rows), q.values.device())?.to_dtype(q.values.dtype())?;
    let mean = w.matmul(&q.values.detach())?.detach();
    Ok((mean, counts.iter().map(|c| *c > 0).collect()))
}

/// Transport loss over all rows whose keypoint has a visible prototype.
///
/// `prototypes` is (N, c), `query_means` (N, c) must be detached.
pub fn transport_loss_tensor(
    prototypes: &Tensor,
    visible: &[bool],
    q: &QueryEmbeddings,
    query_means: &Tensor,
) -> Result<Tensor> {
    let (n, c) = prototypes.dims2()?;
    if visible.len() != n || query_means.dims() != [n, c] {
        return Err(Error::Shape("transport loss inputs are misaligned".into()));
    }
    if q.values.dims2()? != (q.keypoint.len(), c) {
        return Err(Error::Shape(format!(
            "query embeddings {:?} for {} keypoint tags",
            q.values.dims(),
            q.keypoint.len()
        )));
    }
    let keep: Vec<usize> = (0..q.keypoint.len()).filter(|&r| visible[q.keypoint[r]]).collect();
    if keep.is_empty() {
        return Ok(Tensor::zeros((), prototypes.dtype(), prototypes.device())?);
    }
    let dev = prototypes.device();
    let rows_idx = Tensor::from_vec(keep.iter().map(|r| *r as u32).collect::<Vec<_>>(), keep.len(), dev)?;
    let kp_idx = Tensor::from_vec(
        keep.iter().map(|r| q.keypoint[*r] as u32).collect::<Vec<_>>(),
        keep.len(),
        dev,
    )?;
    let phi = q.values.index_select(&rows_idx, 0)?;
    let mu = prototypes.index_select(&kp_idx, 0)?;
    let mu_hat = query_means.detach().index_select(&kp_idx, 0)?;

    let likelihood = (&mu_hat - &mu)?.sqr()?.sum(1)?.neg()?.exp()?;
    let diff = (&mu - &phi)?;
    let cost = safe_l2_norm(&diff)?;
    let sim = diff.sqr()?.sum(1)?.neg()?.exp()?;
    Ok((likelihood * cost)?.mul(&sim)?.sum_all()?)
}

/// Scalar form over explicit per-keypoint query embeddings.
pub fn transport_loss(
    prototypes: &[Prototype],
    query_embeddings: &[Vec<KeypointEmbedding>],
    query_protos: &[Option<QueryPrototype>],
) -> Result<f64> {
    if prototypes.len() != query_embeddings.len() || prototypes.len() != query_protos.len() {
        return Err(Error::Shape("transport loss inputs are misaligned".into()));
    }
    let mut total = 0.0;
    for ((mu, embs), qp) in prototypes.iter().zip(query_embeddings).zip(query_protos) {
        let Some(qp) = qp else { continue };
        if !mu.visible || embs.is_empty() {
            continue;
        }
        let p = (&qp.values - &mu.values)?
            .sqr()?
            .sum_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        let p = (-p).exp();
        for e in embs {
            let r2 = (&mu.values - e.values())?
                .sqr()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            total += p * r2.sqrt() * (-r2).exp();
        }
    }
    Ok(total)
}
