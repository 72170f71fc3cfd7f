//! Randomized polygon dataset for desk-scale training and tests.
//!
//! Every image shows one hexagon-like polygon whose six vertices are the
//! keypoints. Vertex `n` sits near angle `n * 60` degrees clockwise from the
//! top, so keypoint identity is consistent across instances. Each class has
//! its own radius profile and palette. The generator also writes saliency
//! masks and two stand-ins for external edge detectors: a thick low-threshold
//! Canny (`S1`) and a clean wobbly outline (`S2`).

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut, draw_polygon_mut};
use imageproc::point::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::edgemap::{canny_edgemap, gray_to_rgb, write_png_atomic, CannyThresholds};
use super::{to_normalized, write_annotations, AnnotatedImage, DatasetIndex, KeypointAnnotation, Modality};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const N_VERTICES: usize = 6;

struct ClassStyle {
    name: &'static str,
    radii: [f64; N_VERTICES],
    fill: [u8; 3],
    stripe: [u8; 3],
}

const CLASSES: [ClassStyle; 6] = [
    ClassStyle { name: "hexa", radii: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0], fill: [200, 60, 50], stripe: [150, 30, 30] },
    ClassStyle { name: "star", radii: [1.0, 0.6, 1.0, 0.6, 1.0, 0.6], fill: [50, 160, 70], stripe: [20, 110, 40] },
    ClassStyle { name: "bowtie", radii: [1.0, 1.0, 0.55, 1.0, 1.0, 0.55], fill: [60, 80, 200], stripe: [30, 40, 140] },
    ClassStyle { name: "kite", radii: [0.6, 1.0, 1.0, 0.6, 1.0, 1.0], fill: [210, 180, 40], stripe: [160, 120, 20] },
    ClassStyle { name: "shell", radii: [1.0, 0.8, 0.6, 1.0, 0.8, 0.6], fill: [170, 60, 180], stripe: [110, 30, 120] },
    ClassStyle { name: "arrow", radii: [1.0, 0.7, 0.7, 0.5, 0.7, 0.7], fill: [40, 170, 180], stripe: [20, 110, 120] },
];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            per_class: 10,
            size: 384,
            seed: 0,
        }
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    CLASSES.iter().take(n).map(|c| c.name.to_string()).collect()
}

pub const BASE_KEYPOINTS: [usize; 4] = [0, 1, 3, 4];
pub const NOVEL_KEYPOINTS: [usize; 2] = [2, 5];
pub const AUX_PAIRS: [[usize; 2]; 6] = [[0, 1], [1, 3], [3, 4], [4, 0], [0, 3], [1, 4]];

struct Sample {
    photo: RgbImage,
    mask: GrayImage,
    outline: RgbImage,
    vertices: [[f64; 2]; N_VERTICES],
    bbox: [f64; 4],
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

fn render(style: &ClassStyle, size: u32, rng: &mut ChaCha8Rng) -> Sample {
    let s = size as f64;
    let scale = s * rng.random_range(0.22..0.32);
    let margin = scale + s * 0.04;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let rotation = rng.random_range(-10.0f64..10.0).to_radians();

    let mut vertices = [[0.0; 2]; N_VERTICES];
    for (n, v) in vertices.iter_mut().enumerate() {
        let angle = -PI / 2.0 + n as f64 * PI / 3.0 + rotation + rng.random_range(-6.0f64..6.0).to_radians();
        let r = scale * style.radii[n] * rng.random_range(0.9..1.1);
        *v = [cx + r * angle.cos(), cy + r * angle.sin()];
    }

    let bg_a = random_color(rng, 20, 235);
    let bg_b = random_color(rng, 20, 235);
    let mut photo = RgbImage::from_fn(size, size, |x, y| {
        let t = (x as f64 + y as f64) / (2.0 * s);
        Rgb(lerp(bg_a, bg_b, t))
    });
    for _ in 0..3 {
        let c = random_color(rng, 20, 235);
        let p = (rng.random_range(0..size) as i32, rng.random_range(0..size) as i32);
        draw_filled_circle_mut(&mut photo, p, rng.random_range(2..(size as i32 / 12).max(3)), Rgb(c));
    }

    let poly: Vec<Point<i32>> = vertices
        .iter()
        .map(|v| Point::new(v[0].round() as i32, v[1].round() as i32))
        .collect();
    let mut mask = GrayImage::new(size, size);
    draw_polygon_mut(&mut mask, &poly, Luma([255]));

    let shade: f64 = rng.random_range(-0.15..0.15);
    let fill = lerp(style.fill, [255, 255, 255], shade.max(0.0));
    let fill = lerp(fill, [0, 0, 0], (-shade).max(0.0));
    let period = (scale / 3.0).max(4.0);
    for (x, y, m) in mask.enumerate_pixels() {
        if m[0] > 0 {
            let d = (x as f64 - cx) * 0.7 + (y as f64 - cy) * 0.7;
            let band = (d / period).rem_euclid(2.0) < 1.0;
            photo.put_pixel(x, y, Rgb(if band { fill } else { style.stripe }));
        }
    }

    let mut outline_gray = GrayImage::new(size, size);
    for n in 0..N_VERTICES {
        let a = vertices[n];
        let b = vertices[(n + 1) % N_VERTICES];
        let mid = [
            (a[0] + b[0]) / 2.0 + rng.random_range(-3.0..3.0),
            (a[1] + b[1]) / 2.0 + rng.random_range(-3.0..3.0),
        ];
        for (p, q) in [(a, mid), (mid, b)] {
            draw_line_segment_mut(&mut outline_gray, (p[0] as f32, p[1] as f32), (q[0] as f32, q[1] as f32), Luma([255]));
            draw_line_segment_mut(
                &mut outline_gray,
                (p[0] as f32 + 1.0, p[1] as f32),
                (q[0] as f32 + 1.0, q[1] as f32),
                Luma([255]),
            );
        }
    }

    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for v in &vertices {
        x0 = x0.min(v[0]);
        y0 = y0.min(v[1]);
        x1 = x1.max(v[0]);
        y1 = y1.max(v[1]);
    }
    Sample {
        photo,
        mask,
        outline: gray_to_rgb(&outline_gray),
        vertices,
        bbox: [x0, y0, x1, y1],
    }
}

/// Thick, low-threshold edges on a blurred photo.
fn thick_canny(photo: &RgbImage) -> RgbImage {
    let blurred = imageproc::filter::gaussian_blur_f32(photo, 1.5);
    let thin = canny_edgemap(&blurred, CannyThresholds { low: 30.0, high: 80.0 });
    let gray = image::imageops::grayscale(&thin);
    gray_to_rgb(&imageproc::morphology::dilate(&gray, imageproc::distance_transform::Norm::LInf, 1))
}

/// Paths written by [`generate`].
#[derive(Clone, Debug)]
pub struct SyntheticLayout {
    pub root: PathBuf,
    pub index: PathBuf,
    pub cache_dir: PathBuf,
    pub mask_dir: PathBuf,
    pub config: PathBuf,
}

impl SyntheticLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            index: root.join("index.json"),
            cache_dir: root.join("cache"),
            mask_dir: root.join("masks"),
            config: root.join("tiny.toml"),
        }
    }
}

/// Writes images, masks, external-detector edgemaps, the annotation index and
/// a tiny-backbone config into `root`.
pub fn generate(root: &Path, spec: &SyntheticSpec) -> Result<(SyntheticLayout, DatasetIndex)> {
    if spec.classes == 0 || spec.classes > CLASSES.len() {
        return Err(Error::Config(format!("synthetic classes must be 1..={}", CLASSES.len())));
    }
    let layout = SyntheticLayout::new(root);
    let image_dir = root.join("images");
    for d in [&image_dir, &layout.cache_dir, &layout.mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut images = Vec::new();
    for style in CLASSES.iter().take(spec.classes) {
        for i in 0..spec.per_class {
            let sample = render(style, spec.size, &mut rng);
            let stem = format!("{}_{i:03}", style.name);
            let path = image_dir.join(format!("{stem}.png"));
            write_png_atomic(&sample.photo, &path)?;
            write_png_atomic(&sample.mask, &layout.mask_dir.join(format!("{stem}.mask.png")))?;
            write_png_atomic(&thick_canny(&sample.photo), &layout.cache_dir.join(format!("{stem}.S1.png")))?;
            write_png_atomic(&sample.outline, &layout.cache_dir.join(format!("{stem}.S2.png")))?;
            let keypoints = sample
                .vertices
                .iter()
                .enumerate()
                .map(|(n, v)| KeypointAnnotation {
                    name: format!("v{n}"),
                    u: to_normalized(*v, spec.size, spec.size),
                    visible: true,
                })
                .collect();
            images.push(AnnotatedImage {
                image_path: path,
                class_label: style.name.to_string(),
                bbox: sample.bbox,
                keypoints,
                modality: Modality::Photo,
                width: spec.size,
                height: spec.size,
            });
        }
    }
    let index = DatasetIndex {
        keypoint_names: (0..N_VERTICES).map(|n| format!("v{n}")).collect(),
        base_keypoints: BASE_KEYPOINTS.to_vec(),
        novel_keypoints: NOVEL_KEYPOINTS.to_vec(),
        aux_pairs: AUX_PAIRS.to_vec(),
        images,
    };
    write_annotations(&index, &layout.index)?;

    let config = RunConfig {
        dataset: Some("index.json".into()),
        cache_dir: Some("cache".into()),
        mask_dir: Some("masks".into()),
        run_dir: "runs/tiny".into(),
        ..RunConfig::tiny()
    };
    let text = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&layout.config, text).map_err(|e| Error::io(&layout.config, e))?;
    Ok((layout, index))
}
