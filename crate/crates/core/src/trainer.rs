//! Episodic training: loss assembly, optimization and checkpointing.

use std::io::Write;
use std::path::PathBuf;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::episode::derive_seed;
use crate::dataset::{sample_episode, DatasetIndex, EpisodePool, ImageBank, Split};
use crate::error::{Error, Result};
use crate::model::{EpisodeBatch, EpisodeLosses, LossSwitches, Model, ENCODER_PREFIX};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train.jsonl";

/// The six loss parts of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kp: f64,
    pub kp_aux: f64,
    pub da: f64,
    pub da_aux: f64,
    pub style: f64,
    pub style_aux: f64,
}

impl LossParts {
    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("kp", self.kp),
            ("kp_aux", self.kp_aux),
            ("da", self.da),
            ("da_aux", self.da_aux),
            ("style", self.style),
            ("style_aux", self.style_aux),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub kp: f64,
    pub da: f64,
    pub style: f64,
}

impl Lambdas {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            kp: config.lambda_kp,
            da: config.lambda_da(),
            style: config.lambda_style(),
        }
    }
}

/// `l_kp (kp + kp_aux) + l_da (da + da_aux) + l_style (style + style_aux)`.
pub fn total_loss(parts: &LossParts, lambdas: Lambdas) -> f64 {
    lambdas.kp * (parts.kp + parts.kp_aux)
        + lambdas.da * (parts.da + parts.da_aux)
        + lambdas.style * (parts.style + parts.style_aux)
}

/// Graph form of [`total_loss`]; groups with a zero weight are left out.
pub fn total_loss_tensor(losses: &EpisodeLosses, lambdas: Lambdas) -> Result<Tensor> {
    let mut total = ((&losses.kp + &losses.kp_aux)? * lambdas.kp)?;
    if lambdas.da > 0.0 {
        total = (total + ((&losses.da + &losses.da_aux)? * lambdas.da)?)?;
    }
    if lambdas.style > 0.0 {
        total = (total + ((&losses.style + &losses.style_aux)? * lambdas.style)?)?;
    }
    Ok(total)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub class: String,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub da_skipped: bool,
    pub style_skipped: bool,
    pub kp_pairs: usize,
    pub aux_pairs: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Forward pass of one episode: the differentiable total and its parts.
pub fn run_episode(model: &Model, batch: &EpisodeBatch, config: &RunConfig) -> Result<(Tensor, LossParts, EpisodeLosses)> {
    let losses = model.episode_losses(batch, LossSwitches::from_config(config))?;
    let parts = LossParts {
        kp: scalar(&losses.kp)?,
        kp_aux: scalar(&losses.kp_aux)?,
        da: scalar(&losses.da)?,
        da_aux: scalar(&losses.da_aux)?,
        style: scalar(&losses.style)?,
        style_aux: scalar(&losses.style_aux)?,
    };
    let total = total_loss_tensor(&losses, Lambdas::from_config(config))?;
    Ok((total, parts, losses))
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut candle_core::backprop::GradStore, vars: &[candle_core::Var], max_norm: Option<f64>) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let scale = max / (norm + 1e-12);
            for v in vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
    }
    Ok(norm)
}

pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub history: Vec<LossBreakdown>,
}

/// Everything a training run needs besides the model.
pub struct TrainContext<'a> {
    pub index: &'a DatasetIndex,
    pub bank: ImageBank,
    pub pool: EpisodePool,
}

impl<'a> TrainContext<'a> {
    /// Startup checks: keypoint counts, class sizes and the seen split.
    pub fn new(config: &RunConfig, index: &'a DatasetIndex) -> Result<Self> {
        if let Some(n) = config.n_base {
            if n != index.base_keypoints.len() {
                return Err(Error::Config(format!(
                    "config expects {n} base keypoints, dataset declares {}",
                    index.base_keypoints.len()
                )));
            }
        }
        if let Some(n) = config.n_novel {
            if n != index.novel_keypoints.len() {
                return Err(Error::Config(format!(
                    "config expects {n} novel keypoints, dataset declares {}",
                    index.novel_keypoints.len()
                )));
            }
        }
        if config.use_aux && crate::dataset::episode::aux_pairs(index, config).is_empty() {
            return Err(Error::Config("auxiliary keypoints enabled but no auxiliary pairs declared".into()));
        }
        let split = Split::new(index, config)?;
        let pool = split.training_pool(index)?;
        pool.require(config.k + config.m)?;
        Ok(Self {
            index,
            bank: ImageBank::new(config),
            pool,
        })
    }
}

/// Runs `config.iterations` Adam steps over seeded episodes, logging one JSON
/// line per iteration and checkpointing every `checkpoint_every` steps.
pub fn train(
    config: &RunConfig,
    index: &DatasetIndex,
    mut progress: impl FnMut(&LossBreakdown),
) -> Result<TrainOutcome> {
    let ctx = TrainContext::new(config, index)?;
    let model = Model::new(config, DType::F32)?;
    let frozen: &[&str] = if config.encoder.freeze { &[ENCODER_PREFIX] } else { &[] };
    let vars = model.store.trainable(frozen);
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;

    std::fs::create_dir_all(&config.run_dir).map_err(|e| Error::io(&config.run_dir, e))?;
    let log_path = config.run_dir.join(LOG_FILE);
    let ckpt_path = config.run_dir.join(CHECKPOINT_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let lambdas = Lambdas::from_config(config);
    let switches = LossSwitches::from_config(config);
    let mut history = Vec::with_capacity(config.iterations);

    for it in 0..config.iterations {
        let episode = sample_episode(ctx.index, &ctx.pool, config, derive_seed(config.seed, 0, it as u64))?;
        let batch = EpisodeBatch::prepare(ctx.index, &ctx.bank, config, &episode, DType::F32)?;
        let (total, parts, losses) = run_episode(&model, &batch, config)?;
        for (name, v) in parts.named() {
            if !v.is_finite() {
                return Err(Error::NonFinite { iteration: it, part: name, value: v });
            }
        }
        let mut grads = total.backward()?;
        let grad_norm = clip_grad_norm(&mut grads, &vars, config.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { iteration: it, part: "grad_norm", value: grad_norm });
        }
        opt.step(&grads)?;

        let record = LossBreakdown {
            iteration: it,
            class: episode.class.clone(),
            parts,
            total: total_loss(&parts, lambdas),
            grad_norm,
            da_skipped: !switches.domain_adaptation,
            style_skipped: !losses.style_computed,
            kp_pairs: losses.counts.kp_pairs,
            aux_pairs: losses.counts.aux_pairs,
        };
        let line = serde_json::to_string(&record).expect("log record serializes");
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        progress(&record);
        history.push(record);

        if (it + 1) % config.checkpoint_every == 0 && it + 1 < config.iterations {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            Checkpoint::from_model(&model, config, it + 1).save(&ckpt_path)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Checkpoint::from_model(&model, config, config.iterations).save(&ckpt_path)?;
    Ok(TrainOutcome {
        model,
        checkpoint: ckpt_path,
        log: log_path,
        history,
    })
}
