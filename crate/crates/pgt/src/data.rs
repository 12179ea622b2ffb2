//! Images, the synthetic shapes dataset, and binary PPM/PGM I/O.

use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::{Rng, StreamKey};

/// RGB image with channel values in [0, 1], row-major, interleaved.
#[derive(Clone, Debug)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: not a binary PPM/PGM file ({reason})")]
    BadImage { path: PathBuf, reason: String },
    #[error("dataset directory {0} has no class subdirectories with images")]
    EmptyDataset(PathBuf),
}

// ── synthetic shapes ─────────────────────────────────────────────────

pub const SHAPE_CLASSES: [&str; 4] = ["disk", "square", "triangle", "cross"];

/// Index-addressed splits; the split tag enters the stream key, so the
/// train and test pools are disjoint by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SslTrain,
    ProbeTrain,
    ProbeTest,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::SslTrain => 1,
            Split::ProbeTrain => 2,
            Split::ProbeTest => 3,
        }
    }
}

/// Deterministic generator of class-balanced shape images: one colored
/// shape (disk / square / triangle / cross) with jittered position, size,
/// rotation and colors on a contrasting background, plus pixel noise.
#[derive(Clone)]
pub struct SyntheticShapes {
    key: StreamKey,
    pub image_size: usize,
}

impl SyntheticShapes {
    pub fn new(seed: u64, image_size: usize) -> Self {
        SyntheticShapes {
            key: StreamKey::root(seed).child_str("shapes"),
            image_size,
        }
    }

    pub fn n_classes(&self) -> usize {
        SHAPE_CLASSES.len()
    }

    /// Class label for an index (balanced by construction).
    pub fn label(&self, index: usize) -> usize {
        index % SHAPE_CLASSES.len()
    }

    pub fn sample(&self, split: Split, index: usize) -> (Image, usize) {
        let class = self.label(index);
        let mut rng = self
            .key
            .child(split.tag())
            .child(index as u64)
            .rng();
        let img = self.render(class, &mut rng);
        (img, class)
    }

    fn render(&self, class: usize, rng: &mut Rng) -> Image {
        let s = self.image_size as f64;
        let bg = [rng.uniform(), rng.uniform(), rng.uniform()];
        // resample until the shape color clearly contrasts the background
        let mut fg = [rng.uniform(), rng.uniform(), rng.uniform()];
        for _ in 0..32 {
            let dist: f64 = fg.iter().zip(bg.iter()).map(|(a, b)| (a - b).abs()).sum();
            if dist > 0.9 {
                break;
            }
            fg = [rng.uniform(), rng.uniform(), rng.uniform()];
        }
        let cx = rng.uniform_in(0.40 * s, 0.60 * s);
        let cy = rng.uniform_in(0.40 * s, 0.60 * s);
        let radius = rng.uniform_in(0.22 * s, 0.30 * s);
        let theta = rng.uniform_in(-0.25, 0.25);
        let (sin_t, cos_t) = theta.sin_cos();
        let mut img = Image::zeros(self.image_size, self.image_size);
        for y in 0..self.image_size {
            for x in 0..self.image_size {
                let px = x as f64 + 0.5 - cx;
                let py = y as f64 + 0.5 - cy;
                // rotate into shape frame
                let rx = cos_t * px + sin_t * py;
                let ry = -sin_t * px + cos_t * py;
                let d = match class {
                    0 => sd_disk(rx, ry, radius),
                    1 => sd_square(rx, ry, radius * 0.82),
                    2 => sd_triangle(rx, ry, radius * 1.05),
                    _ => sd_cross(rx, ry, radius, radius * 0.34),
                };
                let cov = (0.5 - d).clamp(0.0, 1.0); // 1px soft edge
                let mut rgb = [0.0; 3];
                for c in 0..3 {
                    let v = bg[c] * (1.0 - cov) + fg[c] * cov + rng.normal() * 0.03;
                    rgb[c] = v.clamp(0.0, 1.0);
                }
                img.set_pixel(y, x, rgb);
            }
        }
        img
    }
}

fn sd_disk(x: f64, y: f64, r: f64) -> f64 {
    (x * x + y * y).sqrt() - r
}

fn sd_square(x: f64, y: f64, half: f64) -> f64 {
    let (qx, qy) = (x.abs() - half, y.abs() - half);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn sd_box(x: f64, y: f64, bx: f64, by: f64) -> f64 {
    let (qx, qy) = (x.abs() - bx, y.abs() - by);
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn sd_triangle(x: f64, y: f64, r: f64) -> f64 {
    // equilateral triangle, circumradius-ish parameter r, pointing up
    let k = 3.0_f64.sqrt();
    let mut px = x.abs() - r;
    let mut py = y + r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

fn sd_cross(x: f64, y: f64, arm: f64, width: f64) -> f64 {
    sd_box(x, y, arm, width).min(sd_box(x, y, width, arm))
}

/// Image source for training and probing: the synthetic generator or a
/// directory of labeled images (resized to the model resolution by the
/// caller). Directory datasets use the first 80% of items as the probe
/// train split and the rest as the probe test split.
pub enum Dataset {
    Synthetic(SyntheticShapes),
    Labeled {
        items: Vec<(Image, usize)>,
        n_classes: usize,
    },
}

impl Dataset {
    pub fn synthetic(seed: u64, image_size: usize) -> Self {
        Dataset::Synthetic(SyntheticShapes::new(seed, image_size))
    }

    pub fn from_dir(root: &Path) -> Result<Self, DataError> {
        let (items, classes) = load_image_dir(root)?;
        Ok(Dataset::Labeled {
            items,
            n_classes: classes.len(),
        })
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Dataset::Synthetic(s) => s.n_classes(),
            Dataset::Labeled { n_classes, .. } => *n_classes,
        }
    }

    /// Unlabeled image for self-supervised training.
    pub fn ssl_image(&self, index: usize) -> Image {
        match self {
            Dataset::Synthetic(s) => s.sample(Split::SslTrain, index).0,
            Dataset::Labeled { items, .. } => items[index % items.len()].0.clone(),
        }
    }

    /// Labeled item for probe evaluation.
    pub fn probe_item(&self, split: Split, index: usize) -> (Image, usize) {
        match self {
            Dataset::Synthetic(s) => s.sample(split, index),
            Dataset::Labeled { items, .. } => {
                let cut = (items.len() * 4) / 5;
                let (base, len) = match split {
                    Split::ProbeTest => (cut, items.len() - cut),
                    _ => (0, cut),
                };
                let (img, label) = &items[base + index % len.max(1)];
                (img.clone(), *label)
            }
        }
    }
}

// ── directory-of-images loader ───────────────────────────────────────

/// Load a labeled dataset from class subdirectories of binary PPM/PGM
/// files: `root/<class-name>/*.{ppm,pgm}`. Classes are sorted by name.
pub fn load_image_dir(root: &Path) -> Result<(Vec<(Image, usize)>, Vec<String>), DataError> {
    let mut classes: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    classes.sort();
    let mut out = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ppm") | Some("pgm")
                )
            })
            .collect();
        files.sort();
        for f in files {
            out.push((read_image(&f)?, label));
        }
    }
    if out.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    Ok((out, classes))
}

/// Read a binary PPM (P6) or PGM (P5) file; gray images replicate to RGB.
pub fn read_image(path: &Path) -> Result<Image, DataError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let bad = |reason: &str| DataError::BadImage {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Option<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos > start {
            Some(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        } else {
            None
        }
    };
    let magic = token(&raw).ok_or_else(|| bad("empty file"))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        _ => return Err(bad("magic must be P5 or P6")),
    };
    let width: usize = token(&raw)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let height: usize = token(&raw)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: usize = token(&raw)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if raw.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let mut img = Image::zeros(height, width);
    for i in 0..width * height {
        let rgb = if channels == 3 {
            let b = &raw[pos + i * 3..pos + i * 3 + 3];
            [b[0], b[1], b[2]]
        } else {
            let g = raw[pos + i];
            [g, g, g]
        };
        for c in 0..3 {
            img.data[i * 3 + c] = rgb[c] as f64 / maxval as f64;
        }
    }
    Ok(img)
}

/// Write an 8-bit binary PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> std::io::Result<()> {
    assert_eq!(gray.len(), width * height);
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    std::fs::write(path, buf)
}

/// Write an 8-bit binary PPM (P6).
pub fn write_ppm(path: &Path, img: &Image) -> std::io::Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend(
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, buf)
}
