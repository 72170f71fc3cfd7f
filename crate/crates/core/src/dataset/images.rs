//! Resized rasters and network input tensors, memoized per (image path, modality).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use super::auxiliary::{auxiliary_grid, SaliencyMask};
use super::edgemap::{load_rgb, synthesize_edgemap, CannyThresholds, Detector};
use super::{DatasetIndex, KeypointAnnotation, Modality};
use crate::config::RunConfig;
use crate::error::{Error, Result};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Resizes (no crop, aspect distorted) to `size x size`.
pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

/// (3, H, W) tensor normalized with ImageNet statistics.
pub fn to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (p.0[c] as f32 / 255.0 - MEAN[c]) / STD[c];
        }
    }
    Ok(Tensor::from_vec(data, (3, h as usize, w as usize), device)?.to_dtype(dtype)?)
}

pub struct ImageBank {
    size: u32,
    cache_dir: Option<PathBuf>,
    mask_dir: Option<PathBuf>,
    thresholds: CannyThresholds,
    rasters: Mutex<HashMap<(PathBuf, Modality), Arc<RgbImage>>>,
    aux: Mutex<HashMap<PathBuf, Arc<Vec<Option<KeypointAnnotation>>>>>,
}

impl ImageBank {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            size: config.image_size as u32,
            cache_dir: config.cache_dir.clone(),
            mask_dir: config.mask_dir.clone(),
            thresholds: CannyThresholds {
                low: config.canny_low,
                high: config.canny_high,
            },
            rasters: Mutex::new(HashMap::new()),
            aux: Mutex::new(HashMap::new()),
        }
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    /// The resized raster of image `idx` in `modality`. Photo records derive
    /// their edgemaps; sketch or edgemap records only serve their own modality.
    pub fn raster(&self, index: &DatasetIndex, idx: usize, modality: Modality) -> Result<Arc<RgbImage>> {
        let rec = &index.images[idx];
        let key = (rec.image_path.clone(), modality);
        if let Some(r) = self.rasters.lock().expect("raster cache").get(&key) {
            return Ok(r.clone());
        }
        let full = if rec.modality == modality {
            load_rgb(&rec.image_path)?
        } else if rec.modality == Modality::Photo {
            let detector = match modality {
                Modality::EdgemapS => Detector::CannyBuiltin,
                Modality::EdgemapS1 => Detector::ExternalS1,
                Modality::EdgemapS2 => Detector::ExternalS2,
                Modality::Photo | Modality::Sketch => {
                    return Err(Error::Validation(format!(
                        "no {modality:?} rendering of photo {}",
                        rec.image_path.display()
                    )))
                }
            };
            let photo = self.raster_full(index, idx)?;
            synthesize_edgemap(&photo, &rec.stem(), detector, self.cache_dir.as_deref(), self.thresholds)?
        } else {
            return Err(Error::Validation(format!(
                "{} is a {:?} record and has no {modality:?} rendering",
                rec.image_path.display(),
                rec.modality
            )));
        };
        let r = Arc::new(resize_square(&full, self.size));
        self.rasters
            .lock()
            .expect("raster cache")
            .insert(key, r.clone());
        Ok(r)
    }

    fn raster_full(&self, index: &DatasetIndex, idx: usize) -> Result<RgbImage> {
        let rec = &index.images[idx];
        let img = load_rgb(&rec.image_path)?;
        if img.dimensions() != (rec.width, rec.height) {
            return Err(Error::Shape(format!(
                "{} is {:?}, annotation says {}x{}",
                rec.image_path.display(),
                img.dimensions(),
                rec.width,
                rec.height
            )));
        }
        Ok(img)
    }

    pub fn tensor(&self, index: &DatasetIndex, idx: usize, modality: Modality, dtype: DType) -> Result<Tensor> {
        to_tensor(&*self.raster(index, idx, modality)?, dtype, &Device::Cpu)
    }

    /// Stacks several images into (B, 3, S, S).
    pub fn batch(&self, index: &DatasetIndex, items: &[(usize, Modality)], dtype: DType) -> Result<Tensor> {
        let ts = items
            .iter()
            .map(|(i, m)| self.tensor(index, *i, *m, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    /// Auxiliary keypoints of image `idx`, fixed on first use.
    pub fn auxiliary(
        &self,
        index: &DatasetIndex,
        idx: usize,
        pairs: &[[usize; 2]],
        t_values: &[f64],
    ) -> Result<Arc<Vec<Option<KeypointAnnotation>>>> {
        let rec = &index.images[idx];
        if let Some(a) = self.aux.lock().expect("aux cache").get(&rec.image_path) {
            return Ok(a.clone());
        }
        let mask = SaliencyMask::load(rec, self.mask_dir.as_deref())?;
        let grid = Arc::new(auxiliary_grid(rec, pairs, t_values, &mask)?);
        self.aux.lock().expect("aux cache").insert(rec.image_path.clone(), grid.clone());
        Ok(grid)
    }
}
