//! Raster substrate: decoding, grayscale conversion, Gaussian filtering,
//! 2x resampling, cropping and lossless quarter-turn rotation.
//!
//! Coordinates are `(x, y)` with `x` growing to the right and `y` growing
//! downwards; storage is row-major.

use std::io::Cursor;
use std::ops::Deref;

use image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned pixel rectangle, top-left anchored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// True when `w, h >= 1` and the rect lies inside a `width x height` raster.
    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    /// Half-open containment test for a real-valued point.
    pub fn contains_point<T: Scalar>(&self, x: T, y: T) -> bool {
        let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
        x >= self.x as f64 && x < self.right() as f64 && y >= self.y as f64 && y < self.bottom() as f64
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Row-major 2-D grid of pixels of any kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

/// 8-bit RGB image.
pub type RgbImage = Raster<[u8; 3]>;

/// Unconstrained real-valued raster (DoG images, intermediate filter output).
pub type Plane<T> = Raster<T>;

impl<P: Copy> Raster<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("raster dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::arg(format!(
                "raster {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Raster { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        Raster {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Raster { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: P) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[P] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn pixels(&self) -> &[P] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<P> {
        self.data
    }

    pub fn full_rect(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn map<Q: Copy>(&self, f: impl FnMut(&P) -> Q) -> Raster<Q> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Exact sub-raster copy.
    pub fn crop(&self, rect: Rect) -> Result<Self> {
        if !rect.fits_in(self.width, self.height) {
            return Err(Error::arg(format!(
                "crop rect {rect:?} outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.area());
        for y in rect.y..rect.bottom() {
            data.extend_from_slice(&self.row(y)[rect.x..rect.right()]);
        }
        Ok(Raster {
            width: rect.w,
            height: rect.h,
            data,
        })
    }

    /// Lossless clockwise rotation by `quarter_turns * 90` degrees (negative turns rotate
    /// counter-clockwise).
    pub fn rotate90(&self, quarter_turns: i32) -> Self {
        let k = quarter_turns.rem_euclid(4);
        let mut out = self.clone();
        for _ in 0..k {
            out = out.rotate_cw_once();
        }
        out
    }

    fn rotate_cw_once(&self) -> Self {
        let (w, h) = (self.width, self.height);
        // source (x, y) lands at (h - 1 - y, x) in the h x w output
        Raster::from_fn(h, w, |nx, ny| self.get(ny, h - 1 - nx))
    }
}

/// Image-frame position of source point `(x, y)` after `quarter_turns` clockwise turns of a
/// `width x height` raster. Works for sub-pixel coordinates (pixel centers at integers).
pub fn rotate90_point(x: f64, y: f64, width: usize, height: usize, quarter_turns: i32) -> (f64, f64) {
    let (mut x, mut y, mut w, mut h) = (x, y, width as f64, height as f64);
    for _ in 0..quarter_turns.rem_euclid(4) {
        let nx = h - 1.0 - y;
        let ny = x;
        x = nx;
        y = ny;
        std::mem::swap(&mut w, &mut h);
    }
    (x, y)
}

/// Single-channel image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<T>(Raster<T>);

impl<T: Scalar> GrayImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::arg(format!("gray intensity {bad} outside [0, 1]")));
        }
        Ok(GrayImage(Raster::new(width, height, data)?))
    }

    /// Wraps a plane, clamping every value into `[0, 1]` (NaN becomes 0).
    pub fn from_plane_clamped(plane: Plane<T>) -> Self {
        GrayImage(plane.map(|v| clamp_unit(*v)))
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        GrayImage(Raster::filled(width, height, clamp_unit(value)))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        GrayImage(Raster::from_fn(width, height, |x, y| clamp_unit(f(x, y))))
    }

    pub fn from_luma8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let scale = T::lit(255.0);
        let data = bytes.iter().map(|b| T::from_u8(*b).unwrap() / scale).collect();
        Ok(GrayImage(Raster::new(width, height, data)?))
    }

    pub fn to_luma8(&self) -> Vec<u8> {
        self.0
            .pixels()
            .iter()
            .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn as_plane(&self) -> &Plane<T> {
        &self.0
    }

    pub fn into_plane(self) -> Plane<T> {
        self.0
    }

    pub fn crop(&self, rect: Rect) -> Result<Self> {
        Ok(GrayImage(self.0.crop(rect)?))
    }

    pub fn rotate90(&self, quarter_turns: i32) -> Self {
        GrayImage(self.0.rotate90(quarter_turns))
    }

    pub fn gaussian_blur(&self, sigma: T) -> Result<Self> {
        Ok(Self::from_plane_clamped(gaussian_blur(&self.0, sigma)?))
    }

    pub fn resample(&self, mode: ResampleMode) -> Result<Self> {
        Ok(Self::from_plane_clamped(resample(&self.0, mode)?))
    }

    /// Photometric negative `1 - I`.
    pub fn negated(&self) -> Self {
        GrayImage(self.0.map(|v| T::one() - *v))
    }

    pub fn convert<U: Scalar>(&self) -> GrayImage<U> {
        GrayImage(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }
}

impl<T> Deref for GrayImage<T> {
    type Target = Raster<T>;

    fn deref(&self) -> &Raster<T> {
        &self.0
    }
}

#[inline]
fn clamp_unit<T: Scalar>(v: T) -> T {
    if v > T::one() {
        T::one()
    } else if v >= T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Decodes a PNG or JPEG byte stream into an RGB raster.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.is_empty() {
        return Err(Error::Decode {
            offset: 0,
            reason: "empty input".into(),
        });
    }
    let format = image::guess_format(bytes).map_err(|e| Error::Decode {
        offset: 0,
        reason: format!("unrecognized signature: {e}"),
    })?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode {
            offset: 0,
            reason: format!("unsupported format {format:?}"),
        });
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| Error::Decode {
        // the decoders do not expose their read position; report where the stream ended
        offset: bytes.len(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.pixels().map(|p| p.0).collect();
    Raster::new(w, h, data)
}

pub fn read_image(path: &std::path::Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Lossless PNG encoding of an RGB raster.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let flat: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    encode_png_raw(&flat, img.width(), img.height(), image::ExtendedColorType::Rgb8)
}

/// 8-bit grayscale PNG encoding.
pub fn encode_png_gray<T: Scalar>(img: &GrayImage<T>) -> Result<Vec<u8>> {
    encode_png_raw(&img.to_luma8(), img.width(), img.height(), image::ExtendedColorType::L8)
}

fn encode_png_raw(data: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut out))
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(out)
}

/// Luma conversion `(0.299 R + 0.587 G + 0.114 B) / 255`.
pub fn to_grayscale<T: Scalar>(img: &RgbImage) -> GrayImage<T> {
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let scale = T::lit(255.0);
    GrayImage::from_plane_clamped(img.map(|[r, g, b]| {
        (wr * T::from_u8(*r).unwrap() + wg * T::from_u8(*g).unwrap() + wb * T::from_u8(*b).unwrap()) / scale
    }))
}

/// Normalized discrete Gaussian with radius `ceil(4 sigma)`; returns the half kernel
/// `[w0, w1, ..., wr]`.
pub fn gaussian_half_kernel<T: Scalar>(sigma: T) -> Result<Vec<T>> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::arg(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (T::lit(4.0) * sigma).ceil().to_usize().unwrap_or(1).max(1);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let raw: Vec<T> = (0..=radius)
        .map(|i| {
            let d = T::from_usize_lossy(i);
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let total = raw[0] + T::lit(2.0) * raw[1..].iter().copied().sum::<T>();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Separable Gaussian convolution with border replication; dimensions unchanged.
pub fn gaussian_blur<T: Scalar>(img: &Plane<T>, sigma: T) -> Result<Plane<T>> {
    let half = gaussian_half_kernel(sigma)?;
    let r = half.len() - 1;
    let (w, h) = (img.width(), img.height());

    // horizontal pass over a replicated-padded row buffer
    let mut tmp = Vec::with_capacity(w * h);
    let mut padded = vec![T::zero(); w + 2 * r];
    let mut acc = vec![T::zero(); w];
    for y in 0..h {
        let row = img.row(y);
        for (i, p) in padded.iter_mut().enumerate() {
            let sx = (i as isize - r as isize).clamp(0, w as isize - 1) as usize;
            *p = row[sx];
        }
        // weights sum to one, so convolving deviations from the centre keeps
        // constant regions bit-exact
        acc.fill(T::zero());
        for (j, wj) in half.iter().enumerate().skip(1) {
            let left = &padded[r - j..r - j + w];
            let right = &padded[r + j..r + j + w];
            for (((a, l), rt), c) in acc.iter_mut().zip(left).zip(right).zip(row) {
                *a = *a + *wj * ((*l - *c) + (*rt - *c));
            }
        }
        tmp.extend(row.iter().zip(&acc).map(|(c, a)| *c + *a));
    }

    // vertical pass, accumulating whole rows for locality
    let mut out = Vec::with_capacity(w * h);
    let tmp_row = |yy: isize| {
        let yy = yy.clamp(0, h as isize - 1) as usize;
        &tmp[yy * w..(yy + 1) * w]
    };
    for y in 0..h as isize {
        let center = tmp_row(y);
        acc.fill(T::zero());
        for (j, wj) in half.iter().enumerate().skip(1) {
            let up = tmp_row(y - j as isize);
            let down = tmp_row(y + j as isize);
            for (((a, u), d), c) in acc.iter_mut().zip(up).zip(down).zip(center) {
                *a = *a + *wj * ((*u - *c) + (*d - *c));
            }
        }
        out.extend(center.iter().zip(&acc).map(|(c, a)| *c + *a));
    }
    Raster::new(w, h, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Bilinear upsampling that doubles both dimensions (pixel-center aligned).
    Up2xLinear,
    /// Keeps every second row and column starting at 0; output is `floor(dim / 2)`.
    Down2xDecimate,
}

pub fn resample<T: Scalar>(img: &Plane<T>, mode: ResampleMode) -> Result<Plane<T>> {
    let (w, h) = (img.width(), img.height());
    match mode {
        ResampleMode::Down2xDecimate => {
            if w < 2 || h < 2 {
                return Err(Error::arg(format!("cannot decimate {w}x{h} raster")));
            }
            Ok(Raster::from_fn(w / 2, h / 2, |x, y| img.get(2 * x, 2 * y)))
        }
        ResampleMode::Up2xLinear => {
            // output pixel i samples source coordinate (i + 0.5) / 2 - 0.5
            let taps = |n: usize, size: usize| -> Vec<(usize, usize, T)> {
                (0..n)
                    .map(|i| {
                        let s = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (size - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(size - 1);
                        (i0, i1, T::lit(s - i0 as f64))
                    })
                    .collect()
            };
            let xt = taps(2 * w, w);
            let yt = taps(2 * h, h);
            let mut data = Vec::with_capacity(4 * w * h);
            for &(y0, y1, fy) in &yt {
                let (r0, r1) = (img.row(y0), img.row(y1));
                for &(x0, x1, fx) in &xt {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    data.push(top + fy * (bot - top));
                }
            }
            Raster::new(2 * w, 2 * h, data)
        }
    }
}
