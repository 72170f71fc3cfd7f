//! Class splits, evaluation protocols and seeded episode sampling.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::auxiliary::{aux_defs, AuxDef};
use super::{DatasetIndex, Modality};
use crate::config::{ModalityMode, RunConfig};
use crate::error::{Error, Result};

/// Fixed so that every run shares the same train/test partition.
const SPLIT_SEED: u64 = 0x5EED_0F_5B11;

/// Mixes a base seed with a stream tag and a counter (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, counter: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(counter.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SeenBase,
    SeenNovel,
    UnseenBase,
    UnseenNovel,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::SeenBase,
        Protocol::SeenNovel,
        Protocol::UnseenBase,
        Protocol::UnseenNovel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::SeenBase => "seen_base",
            Protocol::SeenNovel => "seen_novel",
            Protocol::UnseenBase => "unseen_base",
            Protocol::UnseenNovel => "unseen_novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn is_unseen(self) -> bool {
        matches!(self, Protocol::UnseenBase | Protocol::UnseenNovel)
    }

    pub fn is_novel(self) -> bool {
        matches!(self, Protocol::SeenNovel | Protocol::UnseenNovel)
    }

    /// Stream tag so protocols draw independent episode sequences.
    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Photo records partitioned into seen-train, seen-test and unseen pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: BTreeMap<String, Vec<usize>>,
    pub test: BTreeMap<String, Vec<usize>>,
    pub unseen: BTreeMap<String, Vec<usize>>,
}

impl Split {
    /// Seen classes are shuffled with a fixed seed and cut at `train_split`.
    pub fn new(index: &DatasetIndex, config: &RunConfig) -> Result<Self> {
        let classes = index.classes();
        for c in &config.unseen_classes {
            if !classes.contains(c) {
                return Err(Error::Config(format!("unseen class `{c}` is not in the dataset")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
        let mut split = Split {
            train: BTreeMap::new(),
            test: BTreeMap::new(),
            unseen: BTreeMap::new(),
        };
        for (class, mut members) in index.by_class() {
            members.retain(|&i| index.images[i].modality == Modality::Photo);
            if members.is_empty() {
                continue;
            }
            if config.unseen_classes.contains(&class) {
                split.unseen.insert(class, members);
                continue;
            }
            members.shuffle(&mut rng);
            let cut = ((members.len() as f64) * config.train_split).round() as usize;
            let test = members.split_off(cut.min(members.len()));
            split.train.insert(class.clone(), members);
            split.test.insert(class, test);
        }
        split.train.retain(|_, v| !v.is_empty());
        split.test.retain(|_, v| !v.is_empty());
        Ok(split)
    }

    pub fn pool(&self, index: &DatasetIndex, protocol: Protocol) -> Result<EpisodePool> {
        let classes = if protocol.is_unseen() { &self.unseen } else { &self.test };
        if classes.is_empty() {
            return Err(Error::Config(format!(
                "protocol {} has no classes to evaluate (check unseen_classes and train_split)",
                protocol.name()
            )));
        }
        let keypoints = if protocol.is_novel() {
            index.novel_keypoints.clone()
        } else {
            index.base_keypoints.clone()
        };
        if keypoints.is_empty() {
            return Err(Error::Config(format!("protocol {} selects no keypoints", protocol.name())));
        }
        Ok(EpisodePool {
            classes: classes.clone(),
            keypoints,
        })
    }

    pub fn training_pool(&self, index: &DatasetIndex) -> Result<EpisodePool> {
        if self.train.is_empty() {
            return Err(Error::Config("no seen classes to train on".into()));
        }
        if index.base_keypoints.is_empty() {
            return Err(Error::Config("dataset declares no base keypoints".into()));
        }
        Ok(EpisodePool {
            classes: self.train.clone(),
            keypoints: index.base_keypoints.clone(),
        })
    }
}

/// Instances episodes may draw from, and the keypoints they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePool {
    pub classes: BTreeMap<String, Vec<usize>>,
    pub keypoints: Vec<usize>,
}

impl EpisodePool {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }

    /// Fails naming the first class with fewer than `needed` instances.
    pub fn require(&self, needed: usize) -> Result<()> {
        for (class, members) in &self.classes {
            if members.len() < needed {
                return Err(Error::Sampling {
                    class: class.clone(),
                    available: members.len(),
                    needed,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub class: String,
    /// Indices into the dataset index.
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub support_modality: Modality,
    /// Whether S1/S2 renderings of the supports are attached.
    pub style_companions: bool,
    pub keypoint_ids: Vec<usize>,
    pub aux: Vec<AuxDef>,
}

impl Episode {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.support.len(), self.query.len(), self.keypoint_ids.len())
    }
}

fn support_modality(mode: ModalityMode, rng: &mut ChaCha8Rng) -> Modality {
    match mode {
        ModalityMode::SketchSupport => Modality::EdgemapS,
        ModalityMode::PhotoSupport => Modality::Photo,
        ModalityMode::Multimodal => {
            if rng.random_bool(0.5) {
                Modality::Photo
            } else {
                Modality::EdgemapS
            }
        }
    }
}

fn draw(
    pool: &EpisodePool,
    class: &str,
    k: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let members = pool.classes.get(class).ok_or_else(|| Error::Sampling {
        class: class.to_string(),
        available: 0,
        needed: k + m,
    })?;
    if members.len() < k + m {
        return Err(Error::Sampling {
            class: class.to_string(),
            available: members.len(),
            needed: k + m,
        });
    }
    let picked: Vec<usize> = members.choose_multiple(rng, k + m).copied().collect();
    Ok((picked[..k].to_vec(), picked[k..].to_vec()))
}

/// Training episode: a uniformly chosen class, K supports and M queries
/// without overlap. Pure function of its inputs.
pub fn sample_episode(index: &DatasetIndex, pool: &EpisodePool, config: &RunConfig, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = pool.class_names();
    if names.is_empty() {
        return Err(Error::Config("episode pool is empty".into()));
    }
    let class = names[rng.random_range(0..names.len())].clone();
    let modality = support_modality(config.modality_mode, &mut rng);
    let (support, query) = draw(pool, &class, config.k, config.m, &mut rng)?;
    Ok(Episode {
        class,
        support,
        query,
        support_modality: modality,
        style_companions: config.needs_style_companions(),
        keypoint_ids: pool.keypoints.clone(),
        aux: episode_aux(index, config),
    })
}

/// Evaluation episode for a given class. Queries are capped at the
/// instances left after drawing supports, so small test splits still yield
/// episodes.
pub fn sample_eval_episode(
    pool: &EpisodePool,
    class: &str,
    protocol: Protocol,
    config: &RunConfig,
    counter: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + protocol.stream(), counter));
    let available = pool.classes.get(class).map_or(0, Vec::len);
    if available < config.k + 1 {
        return Err(Error::Sampling {
            class: class.to_string(),
            available,
            needed: config.k + 1,
        });
    }
    let m = config.m.min(available - config.k);
    let modality = match config.modality_mode {
        ModalityMode::PhotoSupport => Modality::Photo,
        _ => Modality::EdgemapS,
    };
    let (support, query) = draw(pool, class, config.k, m, &mut rng)?;
    Ok(Episode {
        class: class.to_string(),
        support,
        query,
        support_modality: modality,
        style_companions: false,
        keypoint_ids: pool.keypoints.clone(),
        aux: Vec::new(),
    })
}

fn episode_aux(index: &DatasetIndex, config: &RunConfig) -> Vec<AuxDef> {
    if !config.use_aux {
        return Vec::new();
    }
    aux_defs(aux_pairs(index, config).len(), &config.t_values)
}

/// Configured pairs take precedence over the dataset's.
pub fn aux_pairs<'a>(index: &'a DatasetIndex, config: &'a RunConfig) -> &'a [[usize; 2]] {
    if config.aux_pairs.is_empty() {
        &index.aux_pairs
    } else {
        &config.aux_pairs
    }
}
