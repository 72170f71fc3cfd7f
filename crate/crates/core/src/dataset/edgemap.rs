//! Edgemap style variants. Canny is built in; other detectors are consumed
//! as precomputed files named `<cache_dir>/<stem>.<S|S1|S2>.png`.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::Modality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detector {
    #[serde(rename = "canny_builtin")]
    CannyBuiltin,
    #[serde(rename = "external_S")]
    ExternalS,
    #[serde(rename = "external_S1")]
    ExternalS1,
    #[serde(rename = "external_S2")]
    ExternalS2,
}

impl Detector {
    /// Cache tag; the built-in detector fills the `S` slot.
    pub fn tag(self) -> &'static str {
        match self {
            Detector::CannyBuiltin | Detector::ExternalS => "S",
            Detector::ExternalS1 => "S1",
            Detector::ExternalS2 => "S2",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Detector::CannyBuiltin | Detector::ExternalS => Modality::EdgemapS,
            Detector::ExternalS1 => Modality::EdgemapS1,
            Detector::ExternalS2 => Modality::EdgemapS2,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "canny" | "canny_builtin" => Some(Detector::CannyBuiltin),
            "external_S" | "S" => Some(Detector::ExternalS),
            "external_S1" | "S1" => Some(Detector::ExternalS1),
            "external_S2" | "S2" => Some(Detector::ExternalS2),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyThresholds {
    pub low: f32,
    pub high: f32,
}

impl Default for CannyThresholds {
    fn default() -> Self {
        Self { low: 100.0, high: 200.0 }
    }
}

pub fn edgemap_path(cache_dir: &Path, stem: &str, detector: Detector) -> PathBuf {
    cache_dir.join(format!("{stem}.{}.png", detector.tag()))
}

/// Canny on 8-bit intensity, replicated to three channels. Edges are 255.
pub fn canny_edgemap(image: &RgbImage, thresholds: CannyThresholds) -> RgbImage {
    let gray: GrayImage = image::imageops::grayscale(image);
    let edges = imageproc::edges::canny(&gray, thresholds.low, thresholds.high);
    gray_to_rgb(&edges)
}

pub fn gray_to_rgb(gray: &GrayImage) -> RgbImage {
    RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y)[0];
        image::Rgb([v, v, v])
    })
}

/// Returns the edgemap of `image` for `detector`. The built-in detector
/// computes on a cache miss and stores the result; external detectors must
/// already be present in the cache.
pub fn synthesize_edgemap(
    image: &RgbImage,
    stem: &str,
    detector: Detector,
    cache_dir: Option<&Path>,
    thresholds: CannyThresholds,
) -> Result<RgbImage> {
    let cached = cache_dir.map(|d| edgemap_path(d, stem, detector));
    if let Some(path) = &cached {
        if path.exists() {
            let e = load_rgb(path)?;
            if e.dimensions() != image.dimensions() {
                return Err(Error::Shape(format!(
                    "cached edgemap {} is {:?}, image is {:?}",
                    path.display(),
                    e.dimensions(),
                    image.dimensions()
                )));
            }
            return Ok(e);
        }
    }
    match detector {
        Detector::CannyBuiltin => {
            let e = canny_edgemap(image, thresholds);
            if let Some(path) = &cached {
                write_png_atomic(&e, path)?;
            }
            Ok(e)
        }
        _ => Err(Error::CacheMiss {
            path: cached.unwrap_or_else(|| PathBuf::from(format!("<no cache dir>/{stem}.{}.png", detector.tag()))),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Generated,
    Skipped,
    Missing,
}

/// Populates one cache entry without returning the raster.
pub fn ensure_cached(
    image_path: &Path,
    stem: &str,
    detector: Detector,
    cache_dir: &Path,
    thresholds: CannyThresholds,
) -> Result<CacheStatus> {
    let path = edgemap_path(cache_dir, stem, detector);
    if path.exists() {
        return Ok(CacheStatus::Skipped);
    }
    match detector {
        Detector::CannyBuiltin => {
            let img = load_rgb(image_path)?;
            write_png_atomic(&canny_edgemap(&img, thresholds), &path)?;
            Ok(CacheStatus::Generated)
        }
        _ => Ok(CacheStatus::Missing),
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8())
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
pub fn write_png_atomic<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}.png", std::process::id()));
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::image(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = RgbImage::from_pixel(40, 30, image::Rgb([90, 120, 200]));
        let e = canny_edgemap(&img, CannyThresholds::default());
        assert_eq!(e.dimensions(), (40, 30));
        assert!(e.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn square_edges_hug_the_outline() {
        let img = RgbImage::from_fn(64, 64, |x, y| {
            if (20..44).contains(&x) && (20..44).contains(&y) {
                image::Rgb([255, 255, 255])
            } else {
                image::Rgb([0, 0, 0])
            }
        });
        let e = canny_edgemap(&img, CannyThresholds::default());
        let mut count = 0;
        for (x, y, p) in e.enumerate_pixels() {
            if p.0[0] > 0 {
                count += 1;
                let (x, y) = (x as i64, y as i64);
                let dx = (x - 20).abs().min((x - 43).abs());
                let dy = (y - 20).abs().min((y - 43).abs());
                let inside_band = (18..=45).contains(&x) && (18..=45).contains(&y);
                assert!(inside_band && (dx <= 2 || dy <= 2), "edge pixel at ({x},{y})");
            }
        }
        assert!(count > 0);
    }

    #[test]
    fn external_naming_and_cache_miss() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(8, 8);
        assert_eq!(
            edgemap_path(dir.path(), "cat_001", Detector::ExternalS1),
            dir.path().join("cat_001.S1.png")
        );
        let miss = synthesize_edgemap(&img, "cat_001", Detector::ExternalS1, Some(dir.path()), CannyThresholds::default());
        assert!(matches!(miss, Err(Error::CacheMiss { .. })));

        let stored = RgbImage::from_pixel(8, 8, image::Rgb([7, 7, 7]));
        write_png_atomic(&stored, &dir.path().join("cat_001.S1.png")).unwrap();
        let hit = synthesize_edgemap(&img, "cat_001", Detector::ExternalS1, Some(dir.path()), CannyThresholds::default()).unwrap();
        assert_eq!(hit, stored);
    }

    #[test]
    fn canny_is_cached_once_and_reused() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(32, 32, |x, _| image::Rgb([if x < 16 { 0 } else { 255 }; 3]));
        let a = synthesize_edgemap(&img, "p", Detector::CannyBuiltin, Some(dir.path()), CannyThresholds::default()).unwrap();
        let path = dir.path().join("p.S.png");
        assert!(path.exists());
        let b = synthesize_edgemap(&img, "p", Detector::CannyBuiltin, Some(dir.path()), CannyThresholds::default()).unwrap();
        assert_eq!(a, b);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
