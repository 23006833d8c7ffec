//! Samples, the synthetic defect generator, and the on-disk dataset layout.
//!
//! Layout (MVTec style, 8-bit binary graymaps):
//!
//! ```text
//! <root>/<split>/good/<id>.pgm
//! <root>/<split>/defect/<id>.pgm
//! <root>/ground_truth/defect/<id>_mask.pgm
//! ```
//!
//! Generated pixels are quantised to 8 bits up front so that writing and
//! re-reading a corpus reproduces it exactly.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    /// Row-major binary mask.
    pub mask: Vec<f64>,
    pub label: bool,
}

impl Sample {
    pub fn normal(id: impl Into<String>, width: usize, height: usize, image: Vec<f64>) -> Self {
        let mask = vec![0.0; image.len()];
        Sample {
            id: id.into(),
            width,
            height,
            image,
            mask,
            label: false,
        }
    }

    pub fn defect_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    /// Gaussian-blurred white noise.
    Noise,
    /// Random oriented sinusoid grid.
    Sinusoid,
    /// Per-image random choice of the two.
    Mixed,
}

impl Texture {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "noise" => Some(Texture::Noise),
            "sinusoid" => Some(Texture::Sinusoid),
            "mixed" => Some(Texture::Mixed),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Texture::Noise => "noise",
            Texture::Sinusoid => "sinusoid",
            Texture::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub image_size: usize,
    pub count: usize,
    pub texture: Texture,
    pub anomaly_rate: f64,
    /// Defect area as a fraction of the image, inclusive bounds.
    pub defect_min_frac: f64,
    pub defect_max_frac: f64,
    /// Defect intensity shift in multiples of the texture standard deviation.
    pub delta_min: f64,
    pub delta_max: f64,
    pub texture_std: f64,
    /// Per-image global brightness offset drawn from `±brightness_jitter`.
    pub brightness_jitter: f64,
    /// Prefix for generated sample ids.
    pub id_prefix: String,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            image_size: 32,
            count: 200,
            texture: Texture::Mixed,
            anomaly_rate: 0.5,
            defect_min_frac: 0.02,
            defect_max_frac: 0.12,
            delta_min: 3.0,
            delta_max: 5.0,
            texture_std: 0.08,
            brightness_jitter: 0.0,
            id_prefix: "s".to_string(),
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.image_size < 4 {
            bad.push("image_size (>= 4)");
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            bad.push("anomaly_rate ([0, 1])");
        }
        let min_px = 1.0 / (self.image_size * self.image_size) as f64;
        if !(self.defect_min_frac > 0.0 && self.defect_min_frac <= self.defect_max_frac) || self.defect_max_frac < min_px {
            bad.push("defect_min_frac/defect_max_frac (0 < min <= max)");
        }
        if self.defect_max_frac >= 1.0 {
            bad.push("defect_max_frac (defect larger than image)");
        }
        if !(self.delta_min >= 3.0 && self.delta_min <= self.delta_max) {
            bad.push("delta_min/delta_max (3 <= min <= max texture std)");
        }
        if !(self.texture_std > 0.0 && self.texture_std < 0.25) {
            bad.push("texture_std (0, 0.25)");
        }
        if !(0.0..0.5).contains(&self.brightness_jitter) {
            bad.push("brightness_jitter [0, 0.5)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid synthetic settings: {}", bad.join(", "))))
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn blur_axis(src: &[f64], n: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let o = i as isize - r;
                // periodic boundary keeps statistics uniform across the image
                let (sy, sx) = if horizontal {
                    (y, (x as isize + o).rem_euclid(n as isize) as usize)
                } else {
                    ((y as isize + o).rem_euclid(n as isize) as usize, x)
                };
                acc += kv * src[sy * n + sx];
            }
            out[y * n + x] = acc;
        }
    }
    out
}

fn standardize(mut v: Vec<f64>, std: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x = 0.5 + (*x - mean) / sd * std);
    v
}

fn noise_texture(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
    let sigma: f64 = rng.gen_range(1.0..2.0);
    let radius = (2.5 * sigma).ceil() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);
    let smooth = blur_axis(&blur_axis(&white, n, &kernel, true), n, &kernel, false);
    standardize(smooth, std)
}

fn sinusoid_texture(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let period: f64 = rng.gen_range(4.0..10.0);
    let (phase_a, phase_b): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let f = 2.0 * std::f64::consts::PI / period;
    let (c, s) = (theta.cos(), theta.sin());
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let u = c * x + s * y;
            let v = -s * x + c * y;
            (f * u + phase_a).sin() + (f * v + phase_b).sin() + 0.2 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        })
        .collect();
    standardize(raw, std)
}

/// Rasterises a rectangle or ellipse whose pixel area fraction lies in
/// `[min_frac, max_frac]`.
fn defect_mask(rng: &mut ChaCha8Rng, n: usize, min_frac: f64, max_frac: f64) -> Vec<f64> {
    let total = (n * n) as f64;
    loop {
        let area = rng.gen_range(min_frac..=max_frac) * total;
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let ellipse = rng.gen_bool(0.5);
        // ellipse area is π/4 of its bounding box
        let box_area = if ellipse { area * 4.0 / std::f64::consts::PI } else { area };
        let w = ((box_area * aspect).sqrt().round() as usize).clamp(1, n);
        let h = ((box_area / w as f64).round() as usize).clamp(1, n);
        let x0 = rng.gen_range(0..=n - w);
        let y0 = rng.gen_range(0..=n - h);
        let mut mask = vec![0.0; n * n];
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let inside = if ellipse {
                    let dy = (y as f64 + 0.5 - y0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
                    let dx = (x as f64 + 0.5 - x0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
                    dx * dx + dy * dy <= 1.0
                } else {
                    true
                };
                if inside {
                    mask[y * n + x] = 1.0;
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / total;
        if frac >= min_frac && frac <= max_frac {
            return mask;
        }
    }
}

/// Deterministic synthetic corpus. Exactly `round(rate · count)` samples carry
/// one defect each.
pub fn gen_synthetic(params: &SyntheticParams, seed: u64) -> Result<Vec<Sample>> {
    params.validate()?;
    let n = params.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_anom = (params.anomaly_rate * params.count as f64).round() as usize;
    let mut labels: Vec<bool> = (0..params.count).map(|i| i < n_anom).collect();
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(params.count);
    for (i, &label) in labels.iter().enumerate() {
        let texture = match params.texture {
            Texture::Mixed => {
                if rng.gen_bool(0.5) {
                    Texture::Noise
                } else {
                    Texture::Sinusoid
                }
            }
            t => t,
        };
        let mut image = match texture {
            Texture::Noise => noise_texture(&mut rng, n, params.texture_std),
            _ => sinusoid_texture(&mut rng, n, params.texture_std),
        };
        if params.brightness_jitter > 0.0 {
            let offset = rng.gen_range(-params.brightness_jitter..=params.brightness_jitter);
            image.iter_mut().for_each(|v| *v += offset);
        }
        let mut mask = vec![0.0; n * n];
        if label {
            mask = defect_mask(&mut rng, n, params.defect_min_frac, params.defect_max_frac);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let delta = sign * rng.gen_range(params.delta_min..=params.delta_max) * params.texture_std;
            for (px, m) in image.iter_mut().zip(&mask) {
                if *m > 0.0 {
                    *px += delta;
                }
            }
        }
        image.iter_mut().for_each(|v| *v = quantize(*v));
        out.push(Sample {
            id: format!("{}_{i:04}", params.id_prefix),
            width: n,
            height: n,
            image,
            mask,
            label,
        });
    }
    Ok(out)
}

fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8], color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(bytes, width as u32, height as u32, color).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes an 8-bit graymap from values in `[0, 1]`.
pub fn write_pgm8(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(path, width, height, &bytes, ExtendedColorType::L8)
}

/// Writes a 16-bit binary graymap from values in `[0, 1]`. The image crate
/// only encodes 8-bit graymaps, so the header and big-endian samples are
/// written directly.
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!("{} values for a {width}x{height} map", values.len())));
    }
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a graymap as `(width, height, values in [0, 1])`. Both 8- and 16-bit
/// files are accepted.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(BufReader::new(file), ImageFormat::Pnm).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: format!("invalid graymap: {e}"),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("expected a graymap, got {:?}", other.color()),
            })
        }
    };
    Ok((w, h, values))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `samples` as split `split` under `root`.
pub fn export_dataset(root: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let good = root.join(split).join("good");
    let defect = root.join(split).join("defect");
    let gt = root.join("ground_truth").join("defect");
    for d in [&good, &defect, &gt] {
        create_dir(d)?;
    }
    for s in samples {
        let dir = if s.label { &defect } else { &good };
        write_pgm8(&dir.join(format!("{}.pgm", s.id)), s.width, s.height, &s.image)?;
        if s.label {
            write_pgm8(&gt.join(format!("{}_mask.pgm", s.id)), s.width, s.height, &s.mask)?;
        }
    }
    Ok(())
}

fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads split `split` from an MVTec-style directory. Samples come back
/// sorted by id.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let base = root.join(split);
    if !base.is_dir() {
        return Err(Error::Load(format!("no split directory {}", base.display())));
    }
    let mut out = Vec::new();
    for (sub, label) in [("good", false), ("defect", true)] {
        for path in list_pgms(&base.join(sub))? {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let (w, h, image) = read_pgm(&path)?;
            let mask = if label {
                let mpath = root.join("ground_truth").join("defect").join(format!("{id}_mask.pgm"));
                if !mpath.exists() {
                    return Err(Error::Load(format!("defect image {id} has no mask at {}", mpath.display())));
                }
                let (mw, mh, m) = read_pgm(&mpath)?;
                if (mw, mh) != (w, h) {
                    return Err(Error::Load(format!("mask of {id} is {mw}x{mh}, image is {w}x{h}")));
                }
                m.into_iter().map(|v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
            } else {
                vec![0.0; w * h]
            };
            out.push(Sample {
                id,
                width: w,
                height: h,
                image,
                mask,
                label,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
