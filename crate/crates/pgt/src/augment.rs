//! Multi-crop augmentation: global and local random resized crops with
//! horizontal flips and color jitter, all driven by a seeded stream.

use crate::data::Image;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_global: usize,
    pub n_local: usize,
    /// Area fraction range for global crops.
    pub global_scale: (f64, f64),
    /// Area fraction range for local crops.
    pub local_scale: (f64, f64),
    pub hflip_p: f64,
    /// Brightness/contrast jitter half-range, e.g. 0.3 for x[0.7, 1.3].
    pub jitter: f64,
    /// Probability of collapsing a view to grayscale.
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            global_size: 32,
            local_size: 16,
            n_global: 2,
            n_local: 2,
            global_scale: (0.5, 1.0),
            local_scale: (0.25, 0.6),
            hflip_p: 0.5,
            jitter: 0.3,
            grayscale_p: 0.5,
        }
    }
}

/// Views derived from one source image.
pub struct CropSet {
    pub global_views: Vec<Image>,
    pub local_views: Vec<Image>,
}

impl CropSet {
    pub fn all_views(&self) -> impl Iterator<Item = &Image> {
        self.global_views.iter().chain(self.local_views.iter())
    }

    pub fn n_views(&self) -> usize {
        self.global_views.len() + self.local_views.len()
    }
}

pub fn make_crop_set(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> CropSet {
    let mut one = |out: usize, scale: (f64, f64)| -> Image {
        let mut v = random_resized_crop(img, out, scale, rng);
        if rng.chance(cfg.hflip_p) {
            v = hflip(&v);
        }
        color_jitter(&mut v, cfg.jitter, rng);
        if rng.chance(cfg.grayscale_p) {
            grayscale(&mut v);
        }
        v
    };
    let global_views = (0..cfg.n_global)
        .map(|_| one(cfg.global_size, cfg.global_scale))
        .collect();
    let local_views = (0..cfg.n_local)
        .map(|_| one(cfg.local_size, cfg.local_scale))
        .collect();
    CropSet {
        global_views,
        local_views,
    }
}

/// Crop a random box covering an area fraction in `scale`, with aspect
/// jitter in [3/4, 4/3], then resize bilinearly to `out_size`.
pub fn random_resized_crop(
    img: &Image,
    out_size: usize,
    scale: (f64, f64),
    rng: &mut Rng,
) -> Image {
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    let frac = rng.uniform_in(scale.0, scale.1);
    let aspect = rng.uniform_in(0.75, 4.0 / 3.0);
    let target = area * frac;
    let cw = (target * aspect).sqrt().min(w).max(2.0);
    let ch = (target / aspect).sqrt().min(h).max(2.0);
    let x0 = rng.uniform_in(0.0, w - cw);
    let y0 = rng.uniform_in(0.0, h - ch);
    resample_box(img, x0, y0, cw, ch, out_size, out_size)
}

pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    resample_box(
        img,
        0.0,
        0.0,
        img.width as f64,
        img.height as f64,
        out_h,
        out_w,
    )
}

fn resample_box(
    img: &Image,
    x0: f64,
    y0: f64,
    cw: f64,
    ch: f64,
    out_h: usize,
    out_w: usize,
) -> Image {
    let mut out = Image::zeros(out_h, out_w);
    for oy in 0..out_h {
        // map output pixel centers into the crop box
        let sy = y0 + (oy as f64 + 0.5) / out_h as f64 * ch - 0.5;
        let yb = sy.floor();
        let fy = sy - yb;
        let y_lo = (yb as isize).clamp(0, img.height as isize - 1) as usize;
        let y_hi = (yb as isize + 1).clamp(0, img.height as isize - 1) as usize;
        for ox in 0..out_w {
            let sx = x0 + (ox as f64 + 0.5) / out_w as f64 * cw - 0.5;
            let xb = sx.floor();
            let fx = sx - xb;
            let x_lo = (xb as isize).clamp(0, img.width as isize - 1) as usize;
            let x_hi = (xb as isize + 1).clamp(0, img.width as isize - 1) as usize;
            let (p00, p01) = (img.pixel(y_lo, x_lo), img.pixel(y_lo, x_hi));
            let (p10, p11) = (img.pixel(y_hi, x_lo), img.pixel(y_hi, x_hi));
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                let bottom = p10[c] * (1.0 - fx) + p11[c] * fx;
                rgb[c] = top * (1.0 - fy) + bottom * fy;
            }
            out.set_pixel(oy, ox, rgb);
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::zeros(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(y, x, img.pixel(y, img.width - 1 - x));
        }
    }
    out
}

/// Luma grayscale in place.
pub fn grayscale(img: &mut Image) {
    for i in 0..img.width * img.height {
        let p = &mut img.data[i * 3..i * 3 + 3];
        let y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        p.copy_from_slice(&[y, y, y]);
    }
}

/// Brightness and contrast scaling plus a small per-channel shift.
pub fn color_jitter(img: &mut Image, strength: f64, rng: &mut Rng) {
    let brightness = rng.uniform_in(1.0 - strength, 1.0 + strength);
    let contrast = rng.uniform_in(1.0 - strength, 1.0 + strength);
    let shift = [
        rng.uniform_in(-0.1, 0.1),
        rng.uniform_in(-0.1, 0.1),
        rng.uniform_in(-0.1, 0.1),
    ];
    let n = (img.width * img.height) as f64;
    let mut mean = [0.0; 3];
    for i in 0..img.width * img.height {
        for c in 0..3 {
            mean[c] += img.data[i * 3 + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for i in 0..img.width * img.height {
        for c in 0..3 {
            let v = img.data[i * 3 + c] * brightness;
            let v = mean[c] + (v - mean[c]) * contrast + shift[c];
            img.data[i * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
}
