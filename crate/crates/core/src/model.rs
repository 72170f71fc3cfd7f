//! The full network and its per-episode forward pass.
//!
//! encode -> pool support keypoints -> de-stylize -> prototypes ->
//! correlate with query maps -> describe -> grid locator.

use candle_core::{DType, Tensor};

use crate::config::RunConfig;
use crate::dataset::episode::aux_pairs;
use crate::dataset::{DatasetIndex, Episode, ImageBank, Modality};
use crate::destyle::{style_loss_tensor, DestyleNet};
use crate::domainadapt::{query_prototypes, transport_loss_tensor, QueryEmbeddings};
use crate::encoder::{gaussian_pool_many, load_backbone_weights, Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::locator::{classification_loss_tensor, encode_grid_target, mean_point, offset_loss_tensor, GridLocator};
use crate::matcher::{build_prototypes, correlate_pairs, DescriptorNet, Prototypes};
use crate::nn::ParamStore;

pub const ENCODER_PREFIX: &str = "encoder";

/// Point plus visibility; invisible points may hold any in-range location.
pub type Point = ([f64; 2], bool);

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub destyle: DestyleNet,
    pub descriptor: DescriptorNet,
    pub locator: GridLocator,
    use_destyle: bool,
    xi: f64,
}

impl Model {
    /// Fresh parameters seeded from the config.
    pub fn new(config: &RunConfig, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(config.seed, dtype);
        let encoder = Encoder::new(&mut store, &config.encoder, config.image_size)?;
        let c = encoder.channels();
        let destyle = DestyleNet::new(&mut store, "destyle", c)?;
        let descriptor = DescriptorNet::new(&mut store, "descriptor", c)?;
        let h = encoder.feature_size();
        let d = descriptor.output_dim(h, h);
        let locator = GridLocator::new(&mut store, "locator", d, config.scales())?;
        if let Some(path) = &config.encoder.weights {
            load_backbone_weights(&store, path)?;
        }
        Ok(Self {
            store,
            encoder,
            destyle,
            descriptor,
            locator,
            use_destyle: config.use_destyle(),
            xi: config.xi,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn feature(&self, feats: &Tensor, i: usize) -> Result<FeatureMap> {
        FeatureMap::new(feats.get(i)?, self.encoder.stride())
    }

    /// Pools every point of every image: (B, P, c).
    fn pool_all(&self, feats: &Tensor, points: &[Vec<Point>]) -> Result<Tensor> {
        let rows = points
            .iter()
            .enumerate()
            .map(|(i, pts)| {
                let us: Vec<[f64; 2]> = pts.iter().map(|p| p.0).collect();
                gaussian_pool_many(&self.feature(feats, i)?, &us, self.xi)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// De-stylized support embeddings (B, P, c); identity when disabled.
    fn destylize_all(&self, feats: &Tensor, points: &[Vec<Point>]) -> Result<Tensor> {
        let phi = self.pool_all(feats, points)?;
        if !self.use_destyle {
            return Ok(phi);
        }
        let (b, p, c) = phi.dims3()?;
        let global = feats.flatten_from(2)?.mean(2)?.unsqueeze(1)?.broadcast_as((b, p, c))?;
        let out = self
            .destyle
            .forward(&phi.reshape((b * p, c))?, &global.contiguous()?.reshape((b * p, c))?)?;
        Ok(out.reshape((b, p, c))?)
    }

    /// Prototypes from encoded supports (K, c, h, w).
    fn prototypes(&self, support_feats: &Tensor, points: &[Vec<Point>]) -> Result<(Prototypes, Tensor)> {
        let deltas = self.destylize_all(support_feats, points)?;
        let vis: Vec<Vec<bool>> = points.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
        Ok((build_prototypes(&deltas, &vis)?, deltas))
    }

    /// Descriptors for (query, prototype) pairs: (pairs, d).
    fn describe_pairs(&self, query_feats: &Tensor, protos: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let a = correlate_pairs(query_feats, protos, pairs)?;
        self.descriptor.forward(&a)
    }

    /// Training losses for one prepared episode.
    pub fn episode_losses(&self, batch: &EpisodeBatch, switches: LossSwitches) -> Result<EpisodeLosses> {
        let k = batch.support_points.len();
        let m = batch.query_points.len();
        let mut images = vec![batch.support.clone()];
        if let Some(style) = &batch.style {
            images.extend(style.extra.iter().cloned());
        }
        images.push(batch.query.clone());
        let feats = self.encoder.encode_batch(&Tensor::cat(&images, 0)?)?;
        let support_feats = feats.narrow(0, 0, k)?;
        let query_feats = feats.narrow(0, feats.dim(0)? - m, m)?;

        let (protos, deltas) = self.prototypes(&support_feats, &batch.support_points)?;
        let n_main = batch.n_main;
        let p_all = protos.len();
        let zero = Tensor::zeros((), self.dtype(), feats.device())?;
        let mut out = EpisodeLosses::zeros(&zero);

        // Localization over (query, keypoint) pairs with a visible prototype.
        let mut pairs = Vec::new();
        let mut targets = Vec::new();
        for (qi, pts) in batch.query_points.iter().enumerate() {
            for (p, (u, vis)) in pts.iter().enumerate() {
                if *vis && protos.visible[p] {
                    pairs.push((qi, p));
                    targets.push(*u);
                }
            }
        }
        if !pairs.is_empty() {
            let psi = self.describe_pairs(&query_feats, &protos.values, &pairs)?;
            let loc = self.locator.forward(&psi)?;
            let main_rows: Vec<usize> = (0..pairs.len()).filter(|&r| pairs[r].1 < n_main).collect();
            let aux_rows: Vec<usize> = (0..pairs.len()).filter(|&r| pairs[r].1 >= n_main).collect();
            out.kp = self.localization_loss(&loc, &targets, &main_rows)?.unwrap_or(zero.clone());
            out.kp_aux = self.localization_loss(&loc, &targets, &aux_rows)?.unwrap_or(zero.clone());
            out.counts.kp_pairs = main_rows.len();
            out.counts.aux_pairs = aux_rows.len();
        }

        if switches.domain_adaptation {
            out.da_computed = true;
            let mut rows = Vec::new();
            let mut tags = Vec::new();
            for (qi, pts) in batch.query_points.iter().enumerate() {
                let vis: Vec<usize> = (0..p_all).filter(|&p| pts[p].1).collect();
                if vis.is_empty() {
                    continue;
                }
                let us: Vec<[f64; 2]> = vis.iter().map(|&p| pts[p].0).collect();
                rows.push(gaussian_pool_many(&self.feature(&query_feats, qi)?, &us, self.xi)?);
                tags.extend(vis);
            }
            if !rows.is_empty() {
                let phi = Tensor::cat(&rows, 0)?;
                out.da = self.transport_part(&protos, &phi, &tags, 0..n_main)?;
                out.da_aux = self.transport_part(&protos, &phi, &tags, n_main..p_all)?;
            }
        }

        if switches.style {
            if let Some(style) = &batch.style {
                out.style_computed = true;
                let s_deltas = match style.s_index {
                    None => deltas.clone(),
                    Some(i) => self.destylize_all(&feats.narrow(0, k * (i + 1), k)?, &batch.support_points)?,
                };
                let off = k * style.extra.len() + k;
                let s1 = self.destylize_all(&feats.narrow(0, off - 2 * k, k)?, &batch.support_points)?;
                let s2 = self.destylize_all(&feats.narrow(0, off - k, k)?, &batch.support_points)?;
                let (mut main, mut aux) = (zero.clone(), zero.clone());
                for ki in 0..k {
                    let vis: Vec<bool> = batch.support_points[ki].iter().map(|p| p.1).collect();
                    let take = |t: &Tensor, lo: usize, len: usize| -> Result<Tensor> { Ok(t.get(ki)?.narrow(0, lo, len)?) };
                    main = (main
                        + style_loss_tensor(
                            [&take(&s_deltas, 0, n_main)?, &take(&s1, 0, n_main)?, &take(&s2, 0, n_main)?],
                            &vis[..n_main],
                        )?)?;
                    if p_all > n_main {
                        let t = p_all - n_main;
                        aux = (aux
                            + style_loss_tensor(
                                [&take(&s_deltas, n_main, t)?, &take(&s1, n_main, t)?, &take(&s2, n_main, t)?],
                                &vis[n_main..],
                            )?)?;
                    }
                }
                out.style = main;
                out.style_aux = aux;
            }
        }
        Ok(out)
    }

    /// Mean over pairs of cross-entropy plus L1 offset error, summed over scales.
    fn localization_loss(
        &self,
        loc: &crate::locator::LocatorOutput,
        targets: &[[f64; 2]],
        rows: &[usize],
    ) -> Result<Option<Tensor>> {
        if rows.is_empty() {
            return Ok(None);
        }
        let dev = loc.logits[0].device();
        let idx = Tensor::from_vec(rows.iter().map(|r| *r as u32).collect::<Vec<_>>(), rows.len(), dev)?;
        let mut total: Option<Tensor> = None;
        for (s, &l) in self.locator.scales().as_slice().iter().enumerate() {
            let mut labels = Vec::with_capacity(rows.len());
            let mut offs = Vec::with_capacity(rows.len() * 2);
            for &r in rows {
                let t = encode_grid_target(targets[r], l)?;
                labels.push(t.label);
                offs.extend(t.offset);
            }
            let logits = loc.logits[s].index_select(&idx, 0)?;
            let pred = loc.offsets[s].index_select(&idx, 0)?;
            let gt = Tensor::from_vec(offs, (rows.len(), 2), dev)?.to_dtype(pred.dtype())?;
            let part = (classification_loss_tensor(&logits, &labels)? + offset_loss_tensor(&pred, &gt)?)?;
            total = Some(match total {
                None => part,
                Some(t) => (t + part)?,
            });
        }
        Ok(total.map(|t| t / rows.len() as f64).transpose()?)
    }

    fn transport_part(
        &self,
        protos: &Prototypes,
        phi: &Tensor,
        tags: &[usize],
        range: std::ops::Range<usize>,
    ) -> Result<Tensor> {
        let keep: Vec<usize> = (0..tags.len()).filter(|&r| range.contains(&tags[r])).collect();
        if keep.is_empty() || range.is_empty() {
            return Ok(Tensor::zeros((), phi.dtype(), phi.device())?);
        }
        let idx = Tensor::from_vec(keep.iter().map(|r| *r as u32).collect::<Vec<_>>(), keep.len(), phi.device())?;
        let rows = phi.index_select(&idx, 0)?;
        let local: Vec<usize> = keep.iter().map(|&r| tags[r] - range.start).collect();
        let q = QueryEmbeddings {
            values: &rows,
            keypoint: &local,
        };
        let n = range.len();
        let (means, _) = query_prototypes(&q, n)?;
        let values = protos.values.narrow(0, range.start, n)?;
        transport_loss_tensor(&values, &protos.visible[range], &q, &means)
    }

    /// Predicts every keypoint with a visible prototype in every query image.
    /// `support` is (K, 3, S, S), `queries` is (M, 3, S, S).
    pub fn predict(
        &self,
        support: &Tensor,
        support_points: &[Vec<Point>],
        queries: &Tensor,
    ) -> Result<Vec<Vec<Option<Prediction>>>> {
        let k = support_points.len();
        let m = queries.dim(0)?;
        let feats = self.encoder.encode_batch(&Tensor::cat(&[support, queries], 0)?)?;
        let (protos, _) = self.prototypes(&feats.narrow(0, 0, k)?, support_points)?;
        let query_feats = feats.narrow(0, k, m)?;
        let n = protos.len();
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|qi| (0..n).map(move |p| (qi, p)))
            .filter(|(_, p)| protos.visible[*p])
            .collect();
        let mut out = vec![vec![None; n]; m];
        if pairs.is_empty() {
            return Ok(out);
        }
        let psi = self.describe_pairs(&query_feats, &protos.values, &pairs)?;
        let per_scale = self.locator.predict_batch(&psi)?;
        for ((qi, p), scales) in pairs.into_iter().zip(per_scale) {
            out[qi][p] = Some(Prediction {
                point: mean_point(&scales),
                per_scale: scales,
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Normalized coordinates, mean over scales.
    pub point: [f64; 2],
    pub per_scale: Vec<[f64; 2]>,
}

/// Which optional losses to build at all.
#[derive(Clone, Copy, Debug)]
pub struct LossSwitches {
    pub domain_adaptation: bool,
    pub style: bool,
}

impl LossSwitches {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            domain_adaptation: config.lambda_da() > 0.0,
            style: config.lambda_style() > 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairCounts {
    pub kp_pairs: usize,
    pub aux_pairs: usize,
}

/// Loss parts as graph tensors; absent parts are zero scalars.
pub struct EpisodeLosses {
    pub kp: Tensor,
    pub kp_aux: Tensor,
    pub da: Tensor,
    pub da_aux: Tensor,
    pub style: Tensor,
    pub style_aux: Tensor,
    pub da_computed: bool,
    pub style_computed: bool,
    pub counts: PairCounts,
}

impl EpisodeLosses {
    fn zeros(zero: &Tensor) -> Self {
        Self {
            kp: zero.clone(),
            kp_aux: zero.clone(),
            da: zero.clone(),
            da_aux: zero.clone(),
            style: zero.clone(),
            style_aux: zero.clone(),
            da_computed: false,
            style_computed: false,
            counts: PairCounts::default(),
        }
    }
}

/// Style renderings attached to a batch. `extra` holds the images that are
/// not the support batch itself: `[S1, S2]`, or `[S, S1, S2]` when the
/// supports are photos.
pub struct StyleImages {
    pub extra: Vec<Tensor>,
    /// Position of S within `extra`; `None` when S is the support batch.
    pub s_index: Option<usize>,
}

/// Tensors and points of one episode. Points cover the main keypoints
/// followed by the auxiliary slots.
pub struct EpisodeBatch {
    pub support: Tensor,
    pub style: Option<StyleImages>,
    pub query: Tensor,
    pub support_points: Vec<Vec<Point>>,
    pub query_points: Vec<Vec<Point>>,
    pub n_main: usize,
}

/// Points of image `idx` for the episode's keypoints and auxiliary slots.
pub fn episode_points(
    index: &DatasetIndex,
    bank: &ImageBank,
    config: &RunConfig,
    episode: &Episode,
    idx: usize,
) -> Result<Vec<Point>> {
    let rec = &index.images[idx];
    let mut pts: Vec<Point> = episode
        .keypoint_ids
        .iter()
        .map(|&n| {
            rec.keypoints
                .get(n)
                .map(|k| (k.u, k.visible))
                .ok_or_else(|| Error::Validation(format!("keypoint {n} outside the vocabulary")))
        })
        .collect::<Result<_>>()?;
    if !episode.aux.is_empty() {
        let grid = bank.auxiliary(index, idx, aux_pairs(index, config), &config.t_values)?;
        let n_t = config.t_values.len();
        for def in &episode.aux {
            let ti = config
                .t_values
                .iter()
                .position(|t| *t == def.t)
                .ok_or_else(|| Error::Config(format!("auxiliary fraction {} not configured", def.t)))?;
            pts.push(match &grid[def.pair_index * n_t + ti] {
                Some(a) => (a.u, a.visible),
                None => ([0.0, 0.0], false),
            });
        }
    }
    Ok(pts)
}

impl EpisodeBatch {
    pub fn prepare(
        index: &DatasetIndex,
        bank: &ImageBank,
        config: &RunConfig,
        episode: &Episode,
        dtype: DType,
    ) -> Result<Self> {
        let support_items: Vec<(usize, Modality)> =
            episode.support.iter().map(|&i| (i, episode.support_modality)).collect();
        let query_items: Vec<(usize, Modality)> = episode.query.iter().map(|&i| (i, Modality::Photo)).collect();
        let style = if episode.style_companions {
            let render = |m: Modality| -> Result<Tensor> {
                let items: Vec<(usize, Modality)> = episode.support.iter().map(|&i| (i, m)).collect();
                bank.batch(index, &items, dtype)
            };
            let s1 = render(Modality::EdgemapS1)?;
            let s2 = render(Modality::EdgemapS2)?;
            Some(if episode.support_modality == Modality::EdgemapS {
                StyleImages {
                    extra: vec![s1, s2],
                    s_index: None,
                }
            } else {
                StyleImages {
                    extra: vec![render(Modality::EdgemapS)?, s1, s2],
                    s_index: Some(0),
                }
            })
        } else {
            None
        };
        Ok(Self {
            support: bank.batch(index, &support_items, dtype)?,
            style,
            query: bank.batch(index, &query_items, dtype)?,
            support_points: episode
                .support
                .iter()
                .map(|&i| episode_points(index, bank, config, episode, i))
                .collect::<Result<_>>()?,
            query_points: episode
                .query
                .iter()
                .map(|&i| episode_points(index, bank, config, episode, i))
                .collect::<Result<_>>()?,
            n_main: episode.keypoint_ids.len(),
        })
    }
}
