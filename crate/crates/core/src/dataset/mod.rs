//! Annotated datasets, edgemap style variants, auxiliary keypoints and
//! episode sampling.

pub mod auxiliary;
pub mod edgemap;
pub mod episode;
pub mod images;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use auxiliary::{auxiliary_grid, generate_auxiliary_keypoints, AuxDef, SaliencyMask, SaliencySource};
pub use edgemap::{edgemap_path, synthesize_edgemap, CacheStatus, Detector};
pub use episode::{sample_episode, EpisodePool, Episode, Protocol, Split};
pub use images::ImageBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Photo,
    #[serde(rename = "edgemap_S")]
    EdgemapS,
    #[serde(rename = "edgemap_S1")]
    EdgemapS1,
    #[serde(rename = "edgemap_S2")]
    EdgemapS2,
    Sketch,
}

/// One keypoint in normalized coordinates, `u` in [-1, 1]^2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointAnnotation {
    pub name: String,
    pub u: [f64; 2],
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_path: PathBuf,
    pub class_label: String,
    /// Pixel units of the original image: x0, y0, x1, y1.
    pub bbox: [f64; 4],
    pub keypoints: Vec<KeypointAnnotation>,
    pub modality: Modality,
    /// Original image size in pixels.
    pub width: u32,
    pub height: u32,
}

impl AnnotatedImage {
    /// File stem used to name cached edgemaps and saliency masks.
    pub fn stem(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn to_pixel(&self, u: [f64; 2]) -> [f64; 2] {
        to_pixel(u, self.width, self.height)
    }

    pub fn bbox_longer_side(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]).max(self.bbox[3] - self.bbox[1])
    }

    pub fn points(&self) -> Vec<([f64; 2], bool)> {
        self.keypoints.iter().map(|k| (k.u, k.visible)).collect()
    }
}

/// Pixel to normalized coordinate along one axis of extent `size`.
pub fn to_normalized(x: [f64; 2], width: u32, height: u32) -> [f64; 2] {
    [2.0 * x[0] / width as f64 - 1.0, 2.0 * x[1] / height as f64 - 1.0]
}

pub fn to_pixel(u: [f64; 2], width: u32, height: u32) -> [f64; 2] {
    [(u[0] + 1.0) / 2.0 * width as f64, (u[1] + 1.0) / 2.0 * height as f64]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub keypoint_names: Vec<String>,
    pub base_keypoints: Vec<usize>,
    pub novel_keypoints: Vec<usize>,
    pub aux_pairs: Vec<[usize; 2]>,
    pub images: Vec<AnnotatedImage>,
}

impl DatasetIndex {
    pub fn n_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    /// Sorted class labels.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.images.iter().map(|i| i.class_label.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Image indices per class, in file order.
    pub fn by_class(&self) -> BTreeMap<String, Vec<usize>> {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, img) in self.images.iter().enumerate() {
            map.entry(img.class_label.clone()).or_default().push(i);
        }
        map
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_keypoints();
        for &k in self.base_keypoints.iter().chain(&self.novel_keypoints) {
            if k >= n {
                return Err(Error::Validation(format!("keypoint index {k} outside the {n}-name vocabulary")));
            }
        }
        if let Some(k) = self.base_keypoints.iter().find(|k| self.novel_keypoints.contains(k)) {
            return Err(Error::Validation(format!("keypoint {k} is both base and novel")));
        }
        for p in &self.aux_pairs {
            if p[0] >= n || p[1] >= n || p[0] == p[1] {
                return Err(Error::Validation(format!("invalid auxiliary pair {p:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIndex {
    keypoint_names: Vec<String>,
    base_keypoints: Vec<usize>,
    novel_keypoints: Vec<usize>,
    #[serde(default)]
    aux_pairs: Vec<[usize; 2]>,
    images: Vec<serde_json::Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    path: PathBuf,
    class: String,
    bbox: [f64; 4],
    keypoints: Vec<RawKeypoint>,
    #[serde(default)]
    modality: Option<Modality>,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKeypoint {
    x: f64,
    y: f64,
    v: u8,
}

/// Loads a dataset index. Image paths are resolved against the index file's
/// directory; image sizes come from the record or, when absent, from the
/// image header.
pub fn load_annotations(index_path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    parse_annotations(&text, base)
}

pub fn parse_annotations(text: &str, base: &Path) -> Result<DatasetIndex> {
    let raw: RawIndex = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: "dataset index".into(),
        message: e.to_string(),
    })?;
    let n = raw.keypoint_names.len();
    let mut images = Vec::with_capacity(raw.images.len());
    for (i, value) in raw.images.into_iter().enumerate() {
        let name = value
            .get("path")
            .and_then(|p| p.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| format!("record #{i}"));
        let rec: RawImage = serde_json::from_value(value).map_err(|e| Error::Parse {
            context: format!("image `{name}`"),
            message: e.to_string(),
        })?;
        images.push(convert_record(rec, n, base)?);
    }
    let index = DatasetIndex {
        keypoint_names: raw.keypoint_names,
        base_keypoints: raw.base_keypoints,
        novel_keypoints: raw.novel_keypoints,
        aux_pairs: raw.aux_pairs,
        images,
    };
    index.validate()?;
    Ok(index)
}

fn convert_record(rec: RawImage, n: usize, base: &Path) -> Result<AnnotatedImage> {
    let name = rec.path.display().to_string();
    let image_path = if rec.path.is_relative() { base.join(&rec.path) } else { rec.path.clone() };
    let (width, height) = match (rec.width, rec.height) {
        (Some(w), Some(h)) => (w, h),
        _ => image::image_dimensions(&image_path).map_err(|e| Error::image(&image_path, e))?,
    };
    if width == 0 || height == 0 {
        return Err(Error::Validation(format!("image `{name}` has zero size")));
    }
    let [x0, y0, x1, y1] = rec.bbox;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Validation(format!("image `{name}`: bbox {:?} has no area", rec.bbox)));
    }
    if rec.keypoints.len() != n {
        return Err(Error::Validation(format!(
            "image `{name}`: {} keypoints, vocabulary has {n}",
            rec.keypoints.len()
        )));
    }
    let mut keypoints = Vec::with_capacity(n);
    for (j, kp) in rec.keypoints.iter().enumerate() {
        if kp.v > 1 {
            return Err(Error::Validation(format!("image `{name}`, keypoint {j}: v must be 0 or 1")));
        }
        if !(0.0..=width as f64).contains(&kp.x) || !(0.0..=height as f64).contains(&kp.y) {
            return Err(Error::Validation(format!(
                "image `{name}`, keypoint {j}: ({}, {}) outside the {width}x{height} image",
                kp.x, kp.y
            )));
        }
        keypoints.push(KeypointAnnotation {
            name: String::new(),
            u: to_normalized([kp.x, kp.y], width, height),
            visible: kp.v == 1,
        });
    }
    Ok(AnnotatedImage {
        image_path,
        class_label: rec.class,
        bbox: rec.bbox,
        keypoints,
        modality: rec.modality.unwrap_or(Modality::Photo),
        width,
        height,
    })
}

/// Fills keypoint names from the vocabulary.
pub fn name_keypoints(index: &mut DatasetIndex) {
    let names = index.keypoint_names.clone();
    for img in &mut index.images {
        for (kp, name) in img.keypoints.iter_mut().zip(&names) {
            kp.name = name.clone();
        }
    }
}

/// Serializable form of an index, pixel units, paths relative to `base`
/// when possible.
pub fn write_annotations(index: &DatasetIndex, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let images: Vec<serde_json::Value> = index
        .images
        .iter()
        .map(|img| {
            let p = img.image_path.strip_prefix(base).unwrap_or(&img.image_path);
            let kps: Vec<serde_json::Value> = img
                .keypoints
                .iter()
                .map(|k| {
                    let [x, y] = img.to_pixel(k.u);
                    serde_json::json!({"x": x, "y": y, "v": k.visible as u8})
                })
                .collect();
            serde_json::json!({
                "path": p,
                "class": img.class_label,
                "bbox": img.bbox,
                "keypoints": kps,
                "modality": img.modality,
                "width": img.width,
                "height": img.height,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "keypoint_names": index.keypoint_names,
        "base_keypoints": index.base_keypoints,
        "novel_keypoints": index.novel_keypoints,
        "aux_pairs": index.aux_pairs,
        "images": images,
    });
    let text = serde_json::to_string_pretty(&doc).expect("index serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
