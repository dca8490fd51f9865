//! Synthetic two-class desk corpus: blob-textured buds (tilted elliptical masks)
//! on striped, plaid or flat backgrounds, and non-bud patches sampled from
//! bud-free texture images with sparse knots. Used for tests, demos and pipeline smoke runs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    save_manifest, Corpus, ImageEntry, Label, Mask, MemoryImageStore, Patch, QualityFlag, SubcategoryTag, BUD_SIDE_MIN, IMAGES_DIR,
};
use crate::error::{Error, Result};
use crate::imaging::{encode_png, to_grayscale, Raster, Rect, RgbImage};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskCorpusConfig {
    pub buds: usize,
    pub non_bud_images: usize,
    pub non_bud_per_image: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DeskCorpusConfig {
    fn default() -> Self {
        DeskCorpusConfig {
            buds: 80,
            non_bud_images: 10,
            non_bud_per_image: 14,
            image_size: 384,
            seed: 2014,
        }
    }
}

/// Corpus metadata plus the rendered source images, keyed by image id.
pub struct DeskCorpus {
    pub corpus: Corpus,
    pub images: Vec<(String, RgbImage)>,
}

impl DeskCorpus {
    pub fn store<T: Scalar>(&self) -> MemoryImageStore<T> {
        let mut store = MemoryImageStore::new();
        for (id, img) in &self.images {
            store.insert(id.clone(), to_grayscale::<T>(img));
        }
        store
    }

    /// Writes `images/*.png`, masks and the manifest under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = root.join(IMAGES_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (id, img) in &self.images {
            let path = dir.join(format!("{id}.png"));
            std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
        }
        save_manifest(&self.corpus, root)
    }
}

#[derive(Clone, Copy)]
enum Background {
    Stripes { angle: f64, period: f64, contrast: f64 },
    Plaid { angle: f64, period: f64, contrast: f64 },
    Flat,
}

fn random_stripes<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64, f64) {
    (
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(14.0..32.0),
        rng.random_range(0.08..0.2),
    )
}

fn random_background<R: Rng + ?Sized>(rng: &mut R) -> Background {
    let (angle, period, contrast) = random_stripes(rng);
    match rng.random_range(0..5) {
        0..=1 => Background::Stripes { angle, period, contrast },
        2 => Background::Plaid { angle, period, contrast },
        _ => Background::Flat,
    }
}

fn render_background<R: Rng + ?Sized>(size: usize, bg: Background, rng: &mut R) -> Vec<f64> {
    let base = rng.random_range(0.35..0.55);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let v = match bg {
                Background::Stripes { angle, period, contrast } => {
                    let t = x as f64 * angle.cos() + y as f64 * angle.sin();
                    base + contrast * (std::f64::consts::TAU * t / period).sin()
                }
                Background::Plaid { angle, period, contrast } => {
                    let (c, s) = (angle.cos(), angle.sin());
                    let t = x as f64 * c + y as f64 * s;
                    let u = -(x as f64) * s + y as f64 * c;
                    let w = std::f64::consts::TAU / period;
                    base + contrast * (w * t).sin() * (w * u).sin()
                }
                Background::Flat => base,
            };
            out.push(v + 0.004 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

/// Scatters sparse soft knots over the whole image; larger and much sparser
/// than bud texture.
fn paint_knots<R: Rng + ?Sized>(pixels: &mut [f64], size: usize, density: f64, rng: &mut R) {
    let n = ((size * size) as f64 * density) as usize;
    for _ in 0..n {
        let bx = rng.random_range(0.0..size as f64);
        let by = rng.random_range(0.0..size as f64);
        let s: f64 = rng.random_range(2.5..7.0);
        let amp = if rng.random_bool(0.5) { 0.2 } else { -0.2 } * rng.random_range(0.5..1.0);
        let r = (4.0 * s).ceil() as i64;
        for y in (by as i64 - r).max(0)..(by as i64 + r + 1).min(size as i64) {
            for x in (bx as i64 - r).max(0)..(bx as i64 + r + 1).min(size as i64) {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                pixels[y as usize * size + x as usize] += amp * (-d2 / (2.0 * s * s)).exp();
            }
        }
    }
}

/// Tilted ellipse parameters: centre, semi-axes and angle.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn inside(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn half_extent(&self) -> (f64, f64) {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }
}

fn random_bud_shape<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Ellipse {
    loop {
        let a = rng.random_range(75.0..90.0);
        let b = a * rng.random_range(0.45..0.55);
        let tilt = rng.random_range(35f64..55.0).to_radians();
        let angle = if rng.random_bool(0.5) { tilt } else { std::f64::consts::PI - tilt };
        let mut e = Ellipse {
            cx: 0.0,
            cy: 0.0,
            a,
            b,
            angle,
        };
        let (hx, hy) = e.half_extent();
        if 2.0 * hx < BUD_SIDE_MIN as f64 + 4.0 || 2.0 * hy < BUD_SIDE_MIN as f64 + 4.0 {
            continue;
        }
        let jitter = size as f64 * 0.05;
        e.cx = size as f64 / 2.0 + rng.random_range(-jitter..jitter);
        e.cy = size as f64 / 2.0 + rng.random_range(-jitter..jitter);
        return e;
    }
}

/// Paints dark and bright Gaussian blobs inside the ellipse.
fn paint_bud<R: Rng + ?Sized>(pixels: &mut [f64], size: usize, e: &Ellipse, rng: &mut R) {
    let area = std::f64::consts::PI * e.a * e.b;
    let n = (area / 140.0) as usize;
    let base = rng.random_range(0.5..0.6);
    let mut blobs = Vec::with_capacity(n);
    while blobs.len() < n {
        let x = e.cx + rng.random_range(-e.a..e.a);
        let y = e.cy + rng.random_range(-e.a..e.a);
        if e.inside(x, y) {
            let s = rng.random_range(2.0..4.5);
            let amp = if rng.random_bool(0.5) { 0.22 } else { -0.22 } * rng.random_range(0.6..1.0);
            blobs.push((x, y, s, amp));
        }
    }
    let (hx, hy) = e.half_extent();
    let x0 = (e.cx - hx).floor().max(0.0) as usize;
    let x1 = ((e.cx + hx).ceil() as usize + 1).min(size);
    let y0 = (e.cy - hy).floor().max(0.0) as usize;
    let y1 = ((e.cy + hy).ceil() as usize + 1).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !e.inside(px, py) {
                continue;
            }
            let mut v = base;
            for (bx, by, s, amp) in &blobs {
                let d2 = (px - bx).powi(2) + (py - by).powi(2);
                if d2 < 16.0 * s * s {
                    v += amp * (-d2 / (2.0 * s * s)).exp();
                }
            }
            pixels[y * size + x] = v;
        }
    }
}

fn to_rgb(size: usize, pixels: &[f64]) -> RgbImage {
    Raster::from_fn(size, size, |x, y| {
        let v = (pixels[y * size + x].clamp(0.0, 1.0) * 255.0).round() as u8;
        [v, v, v]
    })
}

fn tight_mask(size: usize, e: &Ellipse) -> (Rect, Mask) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if e.inside(x as f64 + 0.5, y as f64 + 0.5) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let rect = Rect::new(x0, y0, x1 - x0, y1 - y0);
    let mask = Raster::from_fn(rect.w, rect.h, |x, y| e.inside((rect.x + x) as f64 + 0.5, (rect.y + y) as f64 + 0.5));
    (rect, mask)
}

pub fn generate_desk_corpus(cfg: &DeskCorpusConfig) -> Result<DeskCorpus> {
    // scene images hold a 3x3 grid of cells, each fitting a minimum-size patch
    let min_size = 3 * BUD_SIDE_MIN;
    if cfg.image_size < min_size {
        return Err(Error::arg(format!("image_size must be at least {min_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let mut corpus = Corpus::default();
    let mut images = Vec::new();

    for i in 0..cfg.buds {
        let id = format!("bud-img-{i:04}");
        let bg = random_background(&mut rng);
        let mut pixels = render_background(size, bg, &mut rng);
        let e = random_bud_shape(size, &mut rng);
        paint_bud(&mut pixels, size, &e, &mut rng);
        let (rect, mask) = tight_mask(size, &e);
        corpus.images.push(ImageEntry {
            id: id.clone(),
            path: format!("{IMAGES_DIR}/{id}.png"),
            width: size,
            height: size,
        });
        corpus.patches.push(Patch {
            id: format!("bud-{i:04}"),
            source_image: id.clone(),
            rect,
            label: Label::Bud,
            mask: Some(mask),
            subcategory: None,
            quality: QualityFlag::Ok,
        });
        images.push((id, to_rgb(size, &pixels)));
    }

    for i in 0..cfg.non_bud_images {
        let id = format!("scene-img-{i:04}");
        let tag = SubcategoryTag::ALL[i % SubcategoryTag::ALL.len()];
        let (angle, period, contrast) = random_stripes(&mut rng);
        let bg = match i % 3 {
            0 => Background::Stripes { angle, period, contrast },
            1 => Background::Plaid { angle, period, contrast },
            _ => Background::Flat,
        };
        let mut pixels = render_background(size, bg, &mut rng);
        let density = rng.random_range(0.0..1.0 / 1500.0);
        paint_knots(&mut pixels, size, density, &mut rng);
        // non-overlapping grid cells, each holding one randomly sized patch
        let cell = size / 3;
        let mut slots: Vec<(usize, usize)> = (0..9).map(|k| (k % 3, k / 3)).collect();
        let mut k = 0;
        while k < cfg.non_bud_per_image {
            if slots.is_empty() {
                slots = (0..9).map(|k| (k % 3, k / 3)).collect();
            }
            let (cx, cy) = slots.remove(rng.random_range(0..slots.len()));
            let w = rng.random_range(BUD_SIDE_MIN..=cell.min(130));
            let h = rng.random_range(BUD_SIDE_MIN..=cell.min(130));
            let x = cx * cell + rng.random_range(0..=cell - w);
            let y = cy * cell + rng.random_range(0..=cell - h);
            corpus.patches.push(Patch {
                id: format!("scene-{i:04}-{k:02}"),
                source_image: id.clone(),
                rect: Rect::new(x, y, w, h),
                label: Label::NonBud,
                mask: None,
                subcategory: Some(tag),
                quality: QualityFlag::Ok,
            });
            k += 1;
        }
        corpus.images.push(ImageEntry {
            id: id.clone(),
            path: format!("{IMAGES_DIR}/{id}.png"),
            width: size,
            height: size,
        });
        images.push((id, to_rgb(size, &pixels)));
    }
    corpus.validate()?;
    Ok(DeskCorpus { corpus, images })
}
