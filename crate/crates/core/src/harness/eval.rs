//! Pixel- and image-level evaluation and anomaly-map export.

use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::GroupedModel;
use crate::dfg::entropy;
use crate::error::{Error, Result};
use crate::harness::data::{write_pgm16, Sample};
use crate::harness::metrics::{auroc, average_precision};
use crate::parallel::Exec;
use crate::pipeline::{predict, Prediction};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub images: usize,
    pub anomalous_images: usize,
    pub pixels: usize,
    pub anomalous_pixels: usize,
    /// Mean fusion-weight entropy `[level][state]`; empty for static fusion.
    pub gate_entropy: Vec<[f64; 2]>,
    pub config_echo: String,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "pixel_auroc,pixel_ap,image_auroc,image_ap";

    pub fn csv_values(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4}",
            self.pixel_auroc, self.pixel_ap, self.image_auroc, self.image_ap
        )
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "pixel_auroc={:.4} pixel_ap={:.4} image_auroc={:.4} image_ap={:.4}\nimages={} anomalous={} pixels={} anomalous_pixels={}\n",
            self.pixel_auroc,
            self.pixel_ap,
            self.image_auroc,
            self.image_ap,
            self.images,
            self.anomalous_images,
            self.pixels,
            self.anomalous_pixels
        );
        for (i, e) in self.gate_entropy.iter().enumerate() {
            let _ = writeln!(s, "gate_entropy level{i} normal={:.4} abnormal={:.4}", e[0], e[1]);
        }
        s
    }

    /// Summary followed by the configuration echo.
    pub fn to_text(&self) -> String {
        format!("{}\n# configuration\n{}", self.summary(), self.config_echo)
    }
}

pub fn predict_all(model: &GroupedModel, samples: &[Sample], exec: Exec) -> Result<Vec<Prediction>> {
    exec.map(samples, |s| predict(model, &s.image)).into_iter().collect()
}

/// Pools every pixel of every image for the pixel metrics and uses one score
/// per image for the image metrics.
pub fn evaluate(model: &GroupedModel, samples: &[Sample], exec: Exec, config_echo: &str) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Metric("empty evaluation set".into()));
    }
    let preds = predict_all(model, samples, exec)?;
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for (s, p) in samples.iter().zip(&preds) {
        pixel_scores.extend_from_slice(&p.map.upsampled);
        pixel_labels.extend(s.mask.iter().map(|&m| m > 0.5));
    }
    let image_scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let image_labels: Vec<bool> = samples.iter().map(|s| s.label).collect();

    let levels = preds[0].weights.len();
    let mut gate_entropy = vec![[0.0; 2]; levels];
    for p in &preds {
        for (acc, w) in gate_entropy.iter_mut().zip(&p.weights) {
            acc[0] += entropy(&w[0]) / preds.len() as f64;
            acc[1] += entropy(&w[1]) / preds.len() as f64;
        }
    }

    Ok(MetricsReport {
        pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
        pixel_ap: average_precision(&pixel_scores, &pixel_labels)?,
        image_auroc: auroc(&image_scores, &image_labels)?,
        image_ap: average_precision(&image_scores, &image_labels)?,
        images: samples.len(),
        anomalous_images: image_labels.iter().filter(|&&l| l).count(),
        pixels: pixel_labels.len(),
        anomalous_pixels: pixel_labels.iter().filter(|&&l| l).count(),
        gate_entropy,
        config_echo: config_echo.to_string(),
    })
}

/// Writes `<id>.pgm` (16-bit upsampled map) per image and `scores.txt` with
/// one `<id> <score>` line each.
pub fn export_maps(model: &GroupedModel, samples: &[Sample], dir: &Path, exec: Exec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let preds = predict_all(model, samples, exec)?;
    let mut scores = String::new();
    for (s, p) in samples.iter().zip(&preds) {
        let (h, w) = p.map.pixel_size;
        write_pgm16(&dir.join(format!("{}.pgm", s.id)), w, h, &p.map.upsampled)?;
        let _ = writeln!(scores, "{} {:.8e}", s.id, p.score);
    }
    let path = dir.join("scores.txt");
    std::fs::write(&path, scores).map_err(|e| Error::io(&path, e))
}
