//! Auxiliary keypoints interpolated between pairs of visible keypoints, with
//! visibility decided by a saliency mask.

use std::path::Path;

use image::GrayImage;

use super::{AnnotatedImage, KeypointAnnotation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencySource {
    PrecomputedFile,
    BboxFallback,
}

/// Binary salient region at the original image resolution.
#[derive(Clone, Debug)]
pub struct SaliencyMask {
    pub mask: GrayImage,
    pub source: SaliencySource,
}

impl SaliencyMask {
    /// Interior of the bounding box, edges included.
    pub fn from_bbox(image: &AnnotatedImage) -> Self {
        let [x0, y0, x1, y1] = image.bbox;
        let mask = GrayImage::from_fn(image.width, image.height, |x, y| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            image::Luma([if cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1 { 255 } else { 0 }])
        });
        Self {
            mask,
            source: SaliencySource::BboxFallback,
        }
    }

    /// Reads `<mask_dir>/<stem>.mask.png` (nonzero = salient), falling back to
    /// the bounding box when no directory is configured or the file is absent.
    pub fn load(image: &AnnotatedImage, mask_dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = mask_dir else {
            return Ok(Self::from_bbox(image));
        };
        let path = dir.join(format!("{}.mask.png", image.stem()));
        if !path.exists() {
            return Ok(Self::from_bbox(image));
        }
        let mask = image::open(&path).map_err(|e| Error::image(&path, e))?.to_luma8();
        if mask.dimensions() != (image.width, image.height) {
            return Err(Error::Shape(format!(
                "mask {} is {:?}, image is {}x{}",
                path.display(),
                mask.dimensions(),
                image.width,
                image.height
            )));
        }
        Ok(Self {
            mask,
            source: SaliencySource::PrecomputedFile,
        })
    }

    /// Whether the normalized point falls on a salient pixel. For the bbox
    /// fallback this is the exact bbox test, independent of rasterization.
    pub fn contains(&self, image: &AnnotatedImage, u: [f64; 2]) -> bool {
        let [px, py] = image.to_pixel(u);
        match self.source {
            SaliencySource::BboxFallback => {
                let [x0, y0, x1, y1] = image.bbox;
                px >= x0 && px <= x1 && py >= y0 && py <= y1
            }
            SaliencySource::PrecomputedFile => {
                let (w, h) = self.mask.dimensions();
                let x = (px.floor().max(0.0) as u32).min(w - 1);
                let y = (py.floor().max(0.0) as u32).min(h - 1);
                self.mask.get_pixel(x, y)[0] > 0
            }
        }
    }
}

/// Identity of an auxiliary keypoint: which pair and which fraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxDef {
    pub pair_index: usize,
    pub t: f64,
}

/// All (pair, t) definitions in pair-major order.
pub fn aux_defs(n_pairs: usize, t_values: &[f64]) -> Vec<AuxDef> {
    (0..n_pairs)
        .flat_map(|p| t_values.iter().map(move |&t| AuxDef { pair_index: p, t }))
        .collect()
}

/// One slot per (pair, t); `None` when an endpoint is invisible.
pub fn auxiliary_grid(
    annotation: &AnnotatedImage,
    pairs: &[[usize; 2]],
    t_values: &[f64],
    mask: &SaliencyMask,
) -> Result<Vec<Option<KeypointAnnotation>>> {
    let n = annotation.keypoints.len();
    let mut out = Vec::with_capacity(pairs.len() * t_values.len());
    for (p, &[a, b]) in pairs.iter().enumerate() {
        if a >= n || b >= n {
            return Err(Error::Validation(format!("auxiliary pair {p} = ({a}, {b}) outside {n} keypoints")));
        }
        let (ka, kb) = (&annotation.keypoints[a], &annotation.keypoints[b]);
        for &t in t_values {
            if !(ka.visible && kb.visible) {
                out.push(None);
                continue;
            }
            let u = [ka.u[0] + t * (kb.u[0] - ka.u[0]), ka.u[1] + t * (kb.u[1] - ka.u[1])];
            out.push(Some(KeypointAnnotation {
                name: format!("aux{p}@{t}"),
                u,
                visible: mask.contains(annotation, u),
            }));
        }
    }
    Ok(out)
}

/// Emitted auxiliary points only, at most `pairs x t_values`.
pub fn generate_auxiliary_keypoints(
    annotation: &AnnotatedImage,
    pairs: &[[usize; 2]],
    t_values: &[f64],
    mask: &SaliencyMask,
) -> Result<Vec<KeypointAnnotation>> {
    Ok(auxiliary_grid(annotation, pairs, t_values, mask)?.into_iter().flatten().collect())
}
