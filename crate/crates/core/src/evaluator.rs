//! PCK, the four evaluation protocols, reports and overlay figures.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::episode::sample_eval_episode;
use crate::dataset::{DatasetIndex, ImageBank, Modality, Protocol, Split};
use crate::error::{Error, Result};
use crate::model::{episode_points, Model};

/// Correct/total tallies for PCK.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PckCount {
    pub correct: usize,
    pub total: usize,
}

impl PckCount {
    /// Counts one visible keypoint; the threshold is inclusive.
    pub fn add(&mut self, pred: [f64; 2], gt: [f64; 2], bbox: [f64; 4], tau: f64) {
        let side = (bbox[2] - bbox[0]).max(bbox[3] - bbox[1]);
        let d = ((pred[0] - gt[0]).powi(2) + (pred[1] - gt[1]).powi(2)).sqrt();
        self.total += 1;
        if d <= tau * side {
            self.correct += 1;
        }
    }

    pub fn percentage(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric("PCK over an empty set of visible keypoints".into()));
        }
        Ok(100.0 * self.correct as f64 / self.total as f64)
    }
}

/// Percentage of visible keypoints within `tau` times the longer bbox side.
/// Coordinates and boxes are in pixels.
pub fn pck(
    predictions: &[[f64; 2]],
    ground_truths: &[[f64; 2]],
    bboxes: &[[f64; 4]],
    tau: f64,
    visibility: &[bool],
) -> Result<f64> {
    let n = predictions.len();
    if ground_truths.len() != n || bboxes.len() != n || visibility.len() != n {
        return Err(Error::Shape("pck inputs must be aligned".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be > 0, got {tau}")));
    }
    let mut count = PckCount::default();
    for i in 0..n {
        if visibility[i] {
            count.add(predictions[i], ground_truths[i], bboxes[i], tau);
        }
    }
    count.percentage()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub per_class: BTreeMap<String, f64>,
    pub mean: f64,
    pub n_episodes: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "evaluation report".into(),
            message: e.to_string(),
        })
    }

    /// Single-report aligned table.
    pub fn to_table(&self) -> String {
        render_table(std::slice::from_ref(self))
    }
}

/// One row per report, one column per class plus the mean.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut classes: Vec<String> = reports.iter().flat_map(|r| r.per_class.keys().cloned()).collect();
    classes.sort();
    classes.dedup();
    let mut header = vec!["protocol".to_string()];
    header.extend(classes.iter().cloned());
    header.push("mean".into());
    header.push("episodes".into());
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.protocol.name().to_string()];
        for c in &classes {
            row.push(r.per_class.get(c).map_or("-".into(), |v| format!("{v:.2}")));
        }
        row.push(format!("{:.2}", r.mean));
        row.push(r.n_episodes.to_string());
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Refuses unseen protocols over classes the checkpoint was trained on.
pub fn check_protocol(trained: &RunConfig, config: &RunConfig, protocol: Protocol) -> Result<()> {
    if !protocol.is_unseen() {
        return Ok(());
    }
    if config.unseen_classes.is_empty() {
        return Err(Error::Config(format!("protocol {} needs unseen_classes", protocol.name())));
    }
    for c in &config.unseen_classes {
        if !trained.unseen_classes.contains(c) {
            return Err(Error::Config(format!(
                "class `{c}` was used in training and cannot be evaluated under {}",
                protocol.name()
            )));
        }
    }
    Ok(())
}

/// Runs `config.eval_episodes` episodes, cycling over the protocol's classes,
/// and aggregates PCK per class before averaging classes.
pub fn evaluate(
    model: &Model,
    trained: &RunConfig,
    index: &DatasetIndex,
    bank: &ImageBank,
    protocol: Protocol,
    config: &RunConfig,
) -> Result<EvalReport> {
    check_protocol(trained, config, protocol)?;
    let split = Split::new(index, config)?;
    let pool = split.pool(index, protocol)?;
    let classes = pool.class_names();
    let mut counts: BTreeMap<String, PckCount> = BTreeMap::new();
    let dtype = model.dtype();
    for e in 0..config.eval_episodes {
        let class = &classes[e % classes.len()];
        let episode = sample_eval_episode(&pool, class, protocol, config, e as u64)?;
        let support_items: Vec<(usize, Modality)> =
            episode.support.iter().map(|&i| (i, episode.support_modality)).collect();
        let query_items: Vec<(usize, Modality)> = episode.query.iter().map(|&i| (i, Modality::Photo)).collect();
        let support = bank.batch(index, &support_items, dtype)?;
        let queries = bank.batch(index, &query_items, dtype)?;
        let support_points = episode
            .support
            .iter()
            .map(|&i| episode_points(index, bank, config, &episode, i))
            .collect::<Result<Vec<_>>>()?;
        let preds = model.predict(&support, &support_points, &queries)?;
        let tally = counts.entry(class.clone()).or_default();
        for (qi, &img) in episode.query.iter().enumerate() {
            let rec = &index.images[img];
            for (j, &n) in episode.keypoint_ids.iter().enumerate() {
                let gt = &rec.keypoints[n];
                if let (true, Some(p)) = (gt.visible, &preds[qi][j]) {
                    tally.add(rec.to_pixel(p.point), rec.to_pixel(gt.u), rec.bbox, config.pck_tau);
                }
            }
        }
    }
    let mut per_class = BTreeMap::new();
    for (class, c) in &counts {
        let v = c.percentage().map_err(|_| {
            Error::UndefinedMetric(format!("class `{class}` has no keypoint visible in both support and query"))
        })?;
        per_class.insert(class.clone(), v);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(EvalReport {
        protocol,
        per_class,
        mean,
        n_episodes: config.eval_episodes,
        config_hash: config.hash(),
    })
}

/// Distinct colors, cycled by keypoint index.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

pub const DISC_RADIUS: i32 = 4;
pub const CROSS_HALF: f32 = 5.0;

pub fn keypoint_color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Draws a disc at each ground truth and a cross at each prediction, in
/// pixel coordinates, colored by keypoint index. Either list may be empty;
/// `None` entries are skipped.
pub fn render_overlay(
    image: &RgbImage,
    predictions: &[Option<[f64; 2]>],
    ground_truths: &[Option<[f64; 2]>],
    out_path: &Path,
) -> Result<RgbImage> {
    if !predictions.is_empty() && !ground_truths.is_empty() && predictions.len() != ground_truths.len() {
        return Err(Error::Shape("overlay predictions and ground truths must align".into()));
    }
    let mut canvas = image.clone();
    for (i, g) in ground_truths.iter().enumerate() {
        if let Some([x, y]) = g {
            draw_filled_circle_mut(&mut canvas, (x.round() as i32, y.round() as i32), DISC_RADIUS, keypoint_color(i));
        }
    }
    for (i, p) in predictions.iter().enumerate() {
        if let Some([x, y]) = p {
            let (x, y) = (x.round() as f32, y.round() as f32);
            let c = keypoint_color(i);
            draw_line_segment_mut(&mut canvas, (x - CROSS_HALF, y - CROSS_HALF), (x + CROSS_HALF, y + CROSS_HALF), c);
            draw_line_segment_mut(&mut canvas, (x - CROSS_HALF, y + CROSS_HALF), (x + CROSS_HALF, y - CROSS_HALF), c);
        }
    }
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    canvas.save(out_path).map_err(|e| Error::image(out_path, e))?;
    Ok(canvas)
}
