//! Scale-Invariant Feature Transform.
//!
//! Stages: Gaussian scale space and difference-of-Gaussians pyramid,
//! 26-neighbour extrema detection, quadratic sub-pixel refinement with the
//! contrast and edge-curvature tests, orientation assignment from a 36-bin
//! gradient histogram, and the 4x4x8 gradient-orientation descriptor.
//!
//! Three coordinate frames appear here. The *base* frame is the input image.
//! The *seed* frame is the image the pyramid starts from (the input upsampled
//! 2x when [`SiftConfig::double_base_image`] is set). The *octave* frame of
//! octave `o` is the seed frame decimated `o` times. Public keypoint
//! coordinates and scales are always in the base frame.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, resample, GrayImage, Plane, ResampleMode};
use crate::scalar::Scalar;

pub const DESCRIPTOR_LEN: usize = 128;

const DESCR_CELLS: usize = 4;
const DESCR_BINS: usize = 8;
const DESCR_CELL_WIDTH: f64 = 3.0;
const DESCR_CLAMP: f64 = 0.2;
const ORI_BINS: usize = 36;
const ORI_SIGMA_FACTOR: f64 = 1.5;
const ORI_RADIUS_FACTOR: f64 = 3.0;
const ORI_PEAK_RATIO: f64 = 0.8;
/// Smallest image side SIFT accepts.
pub const MIN_OCTAVE_DIM: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiftConfig<T> {
    /// Octave count; `None` derives the largest count whose top octave keeps a minimum
    /// dimension of 16 pixels.
    pub octaves: Option<usize>,
    pub scales_per_octave: usize,
    pub base_sigma: T,
    /// Divided by `scales_per_octave` before it is compared with interpolated DoG values.
    pub contrast_threshold: T,
    pub edge_ratio_threshold: T,
    pub double_base_image: bool,
    /// Blur already present in the input photograph.
    pub input_sigma: T,
    pub max_refine_steps: usize,
}

impl<T: Scalar> Default for SiftConfig<T> {
    fn default() -> Self {
        SiftConfig {
            octaves: None,
            scales_per_octave: 3,
            base_sigma: T::lit(1.6),
            contrast_threshold: T::lit(0.04),
            edge_ratio_threshold: T::lit(10.0),
            double_base_image: true,
            input_sigma: T::lit(0.5),
            max_refine_steps: 5,
        }
    }
}

impl<T: Scalar> SiftConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: T, name: &str| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::arg(format!("sift {name} must be positive, got {v}")))
            }
        };
        positive(self.base_sigma, "base_sigma")?;
        positive(self.contrast_threshold, "contrast_threshold")?;
        positive(self.edge_ratio_threshold, "edge_ratio_threshold")?;
        if self.input_sigma < T::zero() {
            return Err(Error::arg("sift input_sigma must be non-negative"));
        }
        if self.scales_per_octave < 1 {
            return Err(Error::arg("sift scales_per_octave must be at least 1"));
        }
        if self.octaves == Some(0) {
            return Err(Error::arg("sift octave count must be at least 1"));
        }
        Ok(())
    }

    /// Threshold applied to the interpolated DoG magnitude.
    pub fn effective_contrast_threshold(&self) -> T {
        self.contrast_threshold / T::from_usize_lossy(self.scales_per_octave)
    }
}

/// Maps octave-frame positions and scales back to the base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMap {
    doubled: bool,
}

impl FrameMap {
    pub fn octave_to_base<T: Scalar>(&self, octave: usize, x: T, y: T) -> (T, T) {
        let step = T::lit(2f64.powi(octave as i32));
        if self.doubled {
            // seed pixel i sits at base coordinate i / 2 - 1/4
            let half = T::lit(0.5);
            let shift = T::lit(0.25);
            (x * step * half - shift, y * step * half - shift)
        } else {
            (x * step, y * step)
        }
    }

    pub fn octave_scale_to_base<T: Scalar>(&self, octave: usize, sigma: T) -> T {
        let step = T::lit(2f64.powi(octave as i32));
        if self.doubled {
            sigma * step * T::lit(0.5)
        } else {
            sigma * step
        }
    }
}

#[derive(Clone, Debug)]
pub struct Octave<T> {
    /// `scales_per_octave + 3` progressively blurred images.
    pub levels: Vec<Plane<T>>,
    /// Absolute sigma of each level in the seed frame: `base_sigma * 2^(o + l/s)`.
    pub sigmas: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ScaleSpace<T> {
    pub octaves: Vec<Octave<T>>,
    pub scales_per_octave: usize,
    pub base_sigma: T,
    pub frame: FrameMap,
}

#[derive(Clone, Debug)]
pub struct DogPyramid<T> {
    /// `scales_per_octave + 2` difference images per octave.
    pub octaves: Vec<Vec<Plane<T>>>,
    pub scales_per_octave: usize,
    pub base_sigma: T,
    pub frame: FrameMap,
}

/// Strict 26-neighbour DoG extremum, in octave-frame integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateKeypoint<T> {
    pub octave: usize,
    pub level: usize,
    pub x: usize,
    pub y: usize,
    pub value: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint<T> {
    /// Sub-pixel position in the base frame.
    pub x: T,
    pub y: T,
    pub octave: usize,
    /// Scale-space level the keypoint was localized at.
    pub level: usize,
    /// Absolute sigma in the base frame.
    pub scale: T,
    /// Interpolated DoG value at the refined extremum.
    pub dog_value: T,
    pub octave_x: T,
    pub octave_y: T,
    /// Sigma relative to the octave frame.
    pub octave_sigma: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointDescriptor<T> {
    pub keypoint: Keypoint<T>,
    /// Radians in `[0, 2 pi)`, measured from +x towards +y (image frame, y down).
    pub orientation: T,
    pub vector: Vec<T>,
}

fn derived_octave_count(seed_w: usize, seed_h: usize) -> usize {
    let (mut w, mut h, mut n) = (seed_w, seed_h, 0);
    while w.min(h) >= MIN_OCTAVE_DIM {
        n += 1;
        w /= 2;
        h /= 2;
    }
    n
}

pub fn build_scale_space<T: Scalar>(img: &GrayImage<T>, cfg: &SiftConfig<T>) -> Result<ScaleSpace<T>> {
    cfg.validate()?;
    if img.width().min(img.height()) < MIN_OCTAVE_DIM {
        return Err(Error::arg(format!(
            "image {}x{} too small for SIFT (minimum dimension {MIN_OCTAVE_DIM})",
            img.width(),
            img.height()
        )));
    }
    let s = cfg.scales_per_octave;
    let two = T::lit(2.0);
    let (seed, seed_sigma) = if cfg.double_base_image {
        (resample(img.as_plane(), ResampleMode::Up2xLinear)?, cfg.input_sigma * two)
    } else {
        (img.as_plane().clone(), cfg.input_sigma)
    };
    let max_octaves = derived_octave_count(seed.width(), seed.height());
    let n_octaves = cfg.octaves.map_or(max_octaves, |o| o.min(max_octaves));

    // octave-relative sigma of level l
    let rel_sigma = |l: usize| cfg.base_sigma * two.powf(T::from_usize_lossy(l) / T::from_usize_lossy(s));
    let increments: Vec<T> = (1..s + 3)
        .map(|l| {
            let (a, b) = (rel_sigma(l - 1), rel_sigma(l));
            (b * b - a * a).sqrt()
        })
        .collect();
    let first = {
        let diff = cfg.base_sigma * cfg.base_sigma - seed_sigma * seed_sigma;
        gaussian_blur(&seed, diff.max(T::lit(0.01)).sqrt())?
    };

    let mut octaves: Vec<Octave<T>> = Vec::with_capacity(n_octaves);
    for o in 0..n_octaves {
        let start = match octaves.last() {
            None => first.clone(),
            Some(prev) => resample(&prev.levels[s], ResampleMode::Down2xDecimate)?,
        };
        let mut levels = Vec::with_capacity(s + 3);
        levels.push(start);
        for inc in &increments {
            let next = gaussian_blur(levels.last().unwrap(), *inc)?;
            levels.push(next);
        }
        let sigmas = (0..s + 3)
            .map(|l| cfg.base_sigma * two.powf(T::from_usize_lossy(o) + T::from_usize_lossy(l) / T::from_usize_lossy(s)))
            .collect();
        octaves.push(Octave { levels, sigmas });
    }
    Ok(ScaleSpace {
        octaves,
        scales_per_octave: s,
        base_sigma: cfg.base_sigma,
        frame: FrameMap {
            doubled: cfg.double_base_image,
        },
    })
}

pub fn build_dog<T: Scalar>(ss: &ScaleSpace<T>) -> DogPyramid<T> {
    let octaves = ss
        .octaves
        .iter()
        .map(|oct| {
            oct.levels
                .windows(2)
                .map(|pair| {
                    let data = pair[1].pixels().iter().zip(pair[0].pixels()).map(|(b, a)| *b - *a).collect();
                    Plane::new(pair[0].width(), pair[0].height(), data).expect("same dimensions")
                })
                .collect()
        })
        .collect();
    DogPyramid {
        octaves,
        scales_per_octave: ss.scales_per_octave,
        base_sigma: ss.base_sigma,
        frame: ss.frame,
    }
}

#[inline]
fn is_strict_extremum<T: Scalar>(planes: [&Plane<T>; 3], x: usize, y: usize) -> bool {
    let here = planes[1];
    let v = here.get(x, y);
    let w = here.width();
    let all_neighbours = |cmp: fn(T, T) -> bool| {
        // the centre plane rejects most pixels, so scan it first
        for p in [1, 0, 2] {
            let px = planes[p].pixels();
            for yy in y - 1..=y + 1 {
                for (i, o) in px[yy * w + x - 1..yy * w + x + 2].iter().enumerate() {
                    if p == 1 && yy == y && i == 1 {
                        continue;
                    }
                    if !cmp(v, *o) {
                        return false;
                    }
                }
            }
        }
        true
    };
    let left = here.get(x - 1, y);
    if v > left {
        all_neighbours(|a, b| a > b)
    } else if v < left {
        all_neighbours(|a, b| a < b)
    } else {
        false
    }
}

/// All interior pixels of the inner DoG levels that are strictly greater or strictly
/// smaller than their 26 neighbours.
pub fn detect_extrema<T: Scalar>(dog: &DogPyramid<T>) -> Vec<CandidateKeypoint<T>> {
    let mut out = Vec::new();
    for (o, levels) in dog.octaves.iter().enumerate() {
        if levels.len() < 3 {
            continue;
        }
        for l in 1..levels.len() - 1 {
            let (below, here, above) = (&levels[l - 1], &levels[l], &levels[l + 1]);
            let (w, h) = (here.width(), here.height());
            if w < 3 || h < 3 {
                continue;
            }
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if is_strict_extremum([below, here, above], x, y) {
                        out.push(CandidateKeypoint {
                            octave: o,
                            level: l,
                            x,
                            y,
                            value: here.get(x, y),
                        });
                    }
                }
            }
        }
    }
    out
}

/// Gradient and Hessian of the DoG stack at an integer sample, by central differences.
fn dog_derivatives<T: Scalar>(levels: &[Plane<T>], l: usize, x: usize, y: usize) -> ([T; 3], [[T; 3]; 3]) {
    let half = T::lit(0.5);
    let quarter = T::lit(0.25);
    let two = T::lit(2.0);
    let (prev, cur, next) = (&levels[l - 1], &levels[l], &levels[l + 1]);
    let v = cur.get(x, y);
    let dx = (cur.get(x + 1, y) - cur.get(x - 1, y)) * half;
    let dy = (cur.get(x, y + 1) - cur.get(x, y - 1)) * half;
    let ds = (next.get(x, y) - prev.get(x, y)) * half;
    let dxx = cur.get(x + 1, y) + cur.get(x - 1, y) - two * v;
    let dyy = cur.get(x, y + 1) + cur.get(x, y - 1) - two * v;
    let dss = next.get(x, y) + prev.get(x, y) - two * v;
    let dxy = (cur.get(x + 1, y + 1) - cur.get(x - 1, y + 1) - cur.get(x + 1, y - 1) + cur.get(x - 1, y - 1)) * quarter;
    let dxs = (next.get(x + 1, y) - next.get(x - 1, y) - prev.get(x + 1, y) + prev.get(x - 1, y)) * quarter;
    let dys = (next.get(x, y + 1) - next.get(x, y - 1) - prev.get(x, y + 1) + prev.get(x, y - 1)) * quarter;
    ([dx, dy, ds], [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
}

/// Solves `a * x = b` by Cramer's rule; `None` when singular.
fn solve3<T: Scalar>(a: [[T; 3]; 3], b: [T; 3]) -> Option<[T; 3]> {
    let det3 = |m: [[T; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det = det3(a);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let mut x = [T::zero(); 3];
    for (c, xc) in x.iter_mut().enumerate() {
        let mut m = a;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        *xc = det3(m) / det;
    }
    Some(x)
}

/// Ratio `trace^2 / det` of the 2x2 spatial DoG Hessian; `None` when `det <= 0`.
pub fn edge_curvature_ratio<T: Scalar>(plane: &Plane<T>, x: usize, y: usize) -> Option<T> {
    let two = T::lit(2.0);
    let v = plane.get(x, y);
    let dxx = plane.get(x + 1, y) + plane.get(x - 1, y) - two * v;
    let dyy = plane.get(x, y + 1) + plane.get(x, y - 1) - two * v;
    let dxy = (plane.get(x + 1, y + 1) - plane.get(x - 1, y + 1) - plane.get(x + 1, y - 1) + plane.get(x - 1, y - 1))
        * T::lit(0.25);
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    (det > T::zero()).then(|| tr * tr / det)
}

/// Sub-pixel refinement followed by the contrast and edge tests.
pub fn refine_keypoints<T: Scalar>(
    cands: &[CandidateKeypoint<T>],
    dog: &DogPyramid<T>,
    cfg: &SiftConfig<T>,
) -> Vec<Keypoint<T>> {
    cands.iter().filter_map(|c| refine_one(c, dog, cfg)).collect()
}

fn refine_one<T: Scalar>(c: &CandidateKeypoint<T>, dog: &DogPyramid<T>, cfg: &SiftConfig<T>) -> Option<Keypoint<T>> {
    let levels = dog.octaves.get(c.octave)?;
    let n_levels = levels.len();
    if n_levels < 3 {
        return None;
    }
    let (w, h) = (levels[0].width() as isize, levels[0].height() as isize);
    let half = T::lit(0.5);
    let (mut x, mut y, mut l) = (c.x as isize, c.y as isize, c.level as isize);
    let mut solution = None;
    for _ in 0..cfg.max_refine_steps.max(1) {
        let (g, hess) = dog_derivatives(levels, l as usize, x as usize, y as usize);
        let offset = solve3(hess, [-g[0], -g[1], -g[2]])?;
        if offset.iter().all(|o| o.abs() < half) {
            solution = Some((g, offset));
            break;
        }
        let step = |o: T| o.round().to_isize().unwrap_or(isize::MAX / 4);
        x += step(offset[0]);
        y += step(offset[1]);
        l += step(offset[2]);
        if x < 1 || x >= w - 1 || y < 1 || y >= h - 1 || l < 1 || l >= n_levels as isize - 1 {
            return None;
        }
    }
    let (g, offset) = solution?;
    let (xu, yu, lu) = (x as usize, y as usize, l as usize);
    let value = levels[lu].get(xu, yu) + half * (g[0] * offset[0] + g[1] * offset[1] + g[2] * offset[2]);
    if value.abs() < cfg.effective_contrast_threshold() {
        return None;
    }
    let r = cfg.edge_ratio_threshold;
    let ratio = edge_curvature_ratio(&levels[lu], xu, yu)?;
    if ratio >= (r + T::one()) * (r + T::one()) / r {
        return None;
    }
    let s = T::from_usize_lossy(dog.scales_per_octave);
    let octave_sigma = dog.base_sigma * T::lit(2.0).powf((T::from_usize_lossy(lu) + offset[2]) / s);
    let ox = T::from_usize_lossy(xu) + offset[0];
    let oy = T::from_usize_lossy(yu) + offset[1];
    let (bx, by) = dog.frame.octave_to_base(c.octave, ox, oy);
    Some(Keypoint {
        x: bx,
        y: by,
        octave: c.octave,
        level: lu,
        scale: dog.frame.octave_scale_to_base(c.octave, octave_sigma),
        dog_value: value,
        octave_x: ox,
        octave_y: oy,
        octave_sigma,
    })
}

#[inline]
fn gradient<T: Scalar>(img: &Plane<T>, x: usize, y: usize) -> (T, T) {
    (img.get(x + 1, y) - img.get(x - 1, y), img.get(x, y + 1) - img.get(x, y - 1))
}

#[inline]
fn wrap_angle<T: Scalar>(a: T) -> T {
    let tau = T::TAU();
    let mut r = a % tau;
    if r < T::zero() {
        r = r + tau;
    }
    if r >= tau {
        r = r - tau;
    }
    r
}

fn round_to_isize<T: Scalar>(v: T) -> isize {
    v.round().to_isize().unwrap_or(isize::MIN / 4)
}

/// Gaussian-weighted 36-bin gradient orientation histogram around a keypoint; `None` when the
/// neighbourhood leaves the image.
pub fn orientation_histogram<T: Scalar>(kp: &Keypoint<T>, ss: &ScaleSpace<T>) -> Option<[T; ORI_BINS]> {
    let img = &ss.octaves.get(kp.octave)?.levels[kp.level];
    let sigma = T::lit(ORI_SIGMA_FACTOR) * kp.octave_sigma;
    let radius = round_to_isize(T::lit(ORI_RADIUS_FACTOR) * sigma);
    let (cx, cy) = (round_to_isize(kp.octave_x), round_to_isize(kp.octave_y));
    let (w, h) = (img.width() as isize, img.height() as isize);
    if cx - radius < 1 || cy - radius < 1 || cx + radius > w - 2 || cy + radius > h - 2 {
        return None;
    }
    let denom = T::lit(2.0) * sigma * sigma;
    let bins_per_rad = T::from_usize_lossy(ORI_BINS) / T::TAU();
    let mut raw = [T::zero(); ORI_BINS];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let (gx, gy) = gradient(img, (cx + dx) as usize, (cy + dy) as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == T::zero() {
                continue;
            }
            let angle = wrap_angle(gy.atan2(gx));
            let weight = (-T::from_isize(dx * dx + dy * dy).unwrap() / denom).exp();
            let bin = round_to_isize(angle * bins_per_rad).rem_euclid(ORI_BINS as isize) as usize;
            raw[bin] = raw[bin] + weight * mag;
        }
    }
    Some(raw)
}

/// Dominant orientation plus every other local histogram peak reaching 80% of it.
pub fn assign_orientations<T: Scalar>(kp: &Keypoint<T>, ss: &ScaleSpace<T>) -> Vec<(Keypoint<T>, T)> {
    let Some(hist) = orientation_histogram(kp, ss) else {
        return Vec::new();
    };
    let peak = hist.iter().copied().fold(T::zero(), T::max);
    if !(peak > T::zero()) {
        return Vec::new();
    }
    let threshold = T::lit(ORI_PEAK_RATIO) * peak;
    let n = ORI_BINS;
    let mut out = Vec::new();
    for i in 0..n {
        let left = hist[(i + n - 1) % n];
        let right = hist[(i + 1) % n];
        let c = hist[i];
        if c > left && c > right && c >= threshold {
            let offset = T::lit(0.5) * (left - right) / (left - T::lit(2.0) * c + right);
            let bin = T::from_usize_lossy(i) + offset;
            let angle = wrap_angle(bin * T::TAU() / T::from_usize_lossy(n));
            out.push((*kp, angle));
        }
    }
    out
}

/// 128-d descriptor; `None` when the rotated window leaves the image or the
/// neighbourhood carries no gradient.
pub fn compute_descriptor<T: Scalar>(kp: &Keypoint<T>, orientation: T, ss: &ScaleSpace<T>) -> Option<KeypointDescriptor<T>> {
    let img = &ss.octaves.get(kp.octave)?.levels[kp.level];
    let d = DESCR_CELLS;
    let n = DESCR_BINS;
    let hist_width = DESCR_CELL_WIDTH * kp.octave_sigma.to_f64_lossy();
    let radius = (hist_width * std::f64::consts::SQRT_2 * (d as f64 + 1.0) * 0.5).round() as isize;
    let (cx, cy) = (round_to_isize(kp.octave_x), round_to_isize(kp.octave_y));
    let (w, h) = (img.width() as isize, img.height() as isize);
    if cx - radius < 1 || cy - radius < 1 || cx + radius > w - 2 || cy + radius > h - 2 {
        return None;
    }
    let theta = orientation.to_f64_lossy();
    let (cos_t, sin_t) = (theta.cos() / hist_width, theta.sin() / hist_width);
    let (fx, fy) = (kp.octave_x.to_f64_lossy() - cx as f64, kp.octave_y.to_f64_lossy() - cy as f64);
    let exp_scale = -1.0 / (2.0 * (0.5 * d as f64).powi(2));
    let bins_per_rad = n as f64 / std::f64::consts::TAU;
    let stride_r = (d + 2) * (n + 2);
    let stride_c = n + 2;
    let mut hist = vec![0.0f64; (d + 2) * (d + 2) * (n + 2)];

    for dy in -radius..=radius {
        for dx in -radius..=radius {
            // offset from the sub-pixel keypoint position, rotated into the keypoint frame
            let (ox, oy) = (dx as f64 - fx, dy as f64 - fy);
            let c_rot = ox * cos_t + oy * sin_t;
            let r_rot = -ox * sin_t + oy * cos_t;
            let rbin = r_rot + d as f64 / 2.0 - 0.5;
            let cbin = c_rot + d as f64 / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d as f64 || cbin <= -1.0 || cbin >= d as f64 {
                continue;
            }
            let (gx, gy) = gradient(img, (cx + dx) as usize, (cy + dy) as usize);
            let (gx, gy) = (gx.to_f64_lossy(), gy.to_f64_lossy());
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let rel = (gy.atan2(gx) - theta).rem_euclid(std::f64::consts::TAU);
            let obin = rel * bins_per_rad;
            let weight = mag * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (dr, dc, dobin) = (rbin - r0, cbin - c0, obin - o0);
            let (r0, c0) = ((r0 + 1.0) as usize, (c0 + 1.0) as usize);
            let o0 = (o0 as usize) % n;
            for (ri, wr) in [(0usize, 1.0 - dr), (1, dr)] {
                for (ci, wc) in [(0usize, 1.0 - dc), (1, dc)] {
                    for (oi, wo) in [(0usize, 1.0 - dobin), (1, dobin)] {
                        let idx = (r0 + ri) * stride_r + (c0 + ci) * stride_c + (o0 + oi);
                        hist[idx] += weight * wr * wc * wo;
                    }
                }
            }
        }
    }

    let mut vector = vec![0.0f64; DESCRIPTOR_LEN];
    for r in 0..d {
        for c in 0..d {
            let base = (r + 1) * stride_r + (c + 1) * stride_c;
            for o in 0..n {
                // bin n wraps onto bin 0
                let wrapped = if o == 0 { hist[base + n] } else { 0.0 };
                vector[(r * d + c) * n + o] = hist[base + o] + wrapped;
            }
        }
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    for v in &mut vector {
        *v = (*v / norm).min(DESCR_CLAMP);
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    Some(KeypointDescriptor {
        keypoint: *kp,
        orientation,
        vector: vector.into_iter().map(|v| T::lit(v / norm)).collect(),
    })
}

/// Full pipeline: scale space, DoG, extrema, refinement, orientations, descriptors.
pub fn extract<T: Scalar>(img: &GrayImage<T>, cfg: &SiftConfig<T>) -> Result<Vec<KeypointDescriptor<T>>> {
    let ss = build_scale_space(img, cfg)?;
    let dog = build_dog(&ss);
    let cands = detect_extrema(&dog);
    let kps = refine_keypoints(&cands, &dog, cfg);
    Ok(describe(&kps, &ss))
}

/// Orientation assignment and description of already-refined keypoints.
pub fn describe<T: Scalar>(kps: &[Keypoint<T>], ss: &ScaleSpace<T>) -> Vec<KeypointDescriptor<T>> {
    let mut out = Vec::new();
    for kp in kps {
        for (kp, angle) in assign_orientations(kp, ss) {
            if let Some(desc) = compute_descriptor(&kp, angle, ss) {
                out.push(desc);
            }
        }
    }
    out
}

/// Writes `x,y,scale,orientation,d0..d127`, one row per descriptor.
pub fn write_descriptors_csv<T: Scalar, W: Write>(descs: &[KeypointDescriptor<T>], mut out: W) -> std::io::Result<()> {
    write!(out, "x,y,scale,orientation")?;
    for i in 0..DESCRIPTOR_LEN {
        write!(out, ",d{i}")?;
    }
    writeln!(out)?;
    for d in descs {
        write!(
            out,
            "{},{},{},{}",
            d.keypoint.x.to_f64_lossy(),
            d.keypoint.y.to_f64_lossy(),
            d.keypoint.scale.to_f64_lossy(),
            d.orientation.to_f64_lossy()
        )?;
        for v in &d.vector {
            write!(out, ",{}", v.to_f64_lossy())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> GrayImage<f64> {
        GrayImage::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn sigma_schedule() {
        let img = GrayImage::<f64>::filled(64, 64, 0.3);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let expected: [f64; 6] = [1.6, 2.016, 2.540, 3.2, 4.032, 5.080];
        for (s, e) in ss.octaves[0].sigmas.iter().zip(expected) {
            assert!((s - e).abs() < 1e-3, "{s} vs {e}");
        }
        assert_eq!(ss.octaves[0].levels.len(), 6);
        assert!(ss.octaves[0].sigmas.windows(2).all(|w| w[0] < w[1]));
        for o in 1..ss.octaves.len() {
            let (pw, ph) = (ss.octaves[o - 1].levels[0].width(), ss.octaves[o - 1].levels[0].height());
            assert_eq!(ss.octaves[o].levels[0].width(), pw / 2);
            assert_eq!(ss.octaves[o].levels[0].height(), ph / 2);
        }
        // 128 -> 64 -> 32 -> 16 in the seed frame
        assert_eq!(ss.octaves.len(), 4);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = GrayImage::filled(15, 40, 0.3);
        assert!(build_scale_space(&img, &SiftConfig::<f64>::default()).is_err());
    }

    #[test]
    fn constant_image_has_flat_pyramid_and_no_features() {
        let img = GrayImage::filled(40, 33, 0.6);
        let cfg = SiftConfig::default();
        let ss = build_scale_space(&img, &cfg).unwrap();
        for oct in &ss.octaves {
            for lvl in &oct.levels {
                let first = lvl.get(0, 0);
                assert!(lvl.pixels().iter().all(|v| *v == first));
            }
        }
        let dog = build_dog(&ss);
        assert!(dog.octaves.iter().flatten().all(|p| p.pixels().iter().all(|v| *v == 0.0)));
        assert!(detect_extrema(&dog).is_empty());
        assert!(extract(&img, &cfg).unwrap().is_empty());
    }

    #[test]
    fn dog_is_adjacent_level_difference() {
        let img = blob(48, 40, 20.0, 18.0, 3.0);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let dog = build_dog(&ss);
        for (oct, dogs) in ss.octaves.iter().zip(&dog.octaves) {
            assert_eq!(dogs.len(), oct.levels.len() - 1);
            for (l, d) in dogs.iter().enumerate() {
                for i in 0..d.pixels().len() {
                    assert_eq!(d.pixels()[i], oct.levels[l + 1].pixels()[i] - oct.levels[l].pixels()[i]);
                }
            }
        }
    }

    #[test]
    fn ramp_orientation_points_east() {
        let img = GrayImage::from_fn(64, 64, |x, _| x as f64 / 80.0);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let kp = manual_keypoint(&ss, 0, 1, 64.0, 64.0);
        let oris = assign_orientations(&kp, &ss);
        assert_eq!(oris.len(), 1);
        let a = oris[0].1;
        let dist = a.min(std::f64::consts::TAU - a);
        assert!(dist < 5f64.to_radians(), "angle {a}");
    }

    #[test]
    fn max_of_perpendicular_ramps_gives_two_orientations() {
        // gradient east where x > y, south where y > x
        let img = GrayImage::from_fn(64, 64, |x, y| 0.2 + (x as f64).max(y as f64) / 100.0);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let kp = manual_keypoint(&ss, 0, 3, 63.0, 63.0);
        let mut angles: Vec<f64> = assign_orientations(&kp, &ss).into_iter().map(|(_, a)| a).collect();
        angles.sort_by(f64::total_cmp);
        assert_eq!(angles.len(), 2, "{angles:?}");
        let sep = angles[1] - angles[0];
        assert!((sep - std::f64::consts::FRAC_PI_2).abs() < 10f64.to_radians(), "{angles:?}");
    }

    #[test]
    fn constant_patch_has_no_orientation() {
        let img = GrayImage::filled(64, 64, 0.5);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let kp = manual_keypoint(&ss, 0, 1, 64.0, 64.0);
        assert!(assign_orientations(&kp, &ss).is_empty());
        assert!(compute_descriptor(&kp, 0.0, &ss).is_none());
    }

    #[test]
    fn border_keypoint_is_skipped() {
        let img = blob(64, 64, 32.0, 32.0, 4.0);
        let ss = build_scale_space(&img, &SiftConfig::default()).unwrap();
        let kp = manual_keypoint(&ss, 0, 1, 3.0, 3.0);
        assert!(assign_orientations(&kp, &ss).is_empty());
        assert!(compute_descriptor(&kp, 0.0, &ss).is_none());
    }

    fn manual_keypoint(ss: &ScaleSpace<f64>, octave: usize, level: usize, ox: f64, oy: f64) -> Keypoint<f64> {
        let sigma = ss.base_sigma * 2f64.powf(level as f64 / ss.scales_per_octave as f64);
        let (x, y) = ss.frame.octave_to_base(octave, ox, oy);
        Keypoint {
            x,
            y,
            octave,
            level,
            scale: ss.frame.octave_scale_to_base(octave, sigma),
            dog_value: 0.1,
            octave_x: ox,
            octave_y: oy,
            octave_sigma: sigma,
        }
    }

    #[test]
    fn descriptors_obey_contract() {
        let img = GrayImage::from_fn(96, 96, |x, y| {
            let b1 = {
                let (dx, dy) = (x as f64 - 40.0, y as f64 - 44.0);
                (-(dx * dx + dy * dy) / 32.0).exp()
            };
            let b2 = {
                let (dx, dy) = (x as f64 - 60.0, y as f64 - 52.0);
                (-(dx * dx + dy * dy) / 18.0).exp()
            };
            0.1 + 0.5 * b1 + 0.35 * b2
        });
        let descs = extract(&img, &SiftConfig::default()).unwrap();
        assert!(!descs.is_empty());
        for d in &descs {
            assert_eq!(d.vector.len(), DESCRIPTOR_LEN);
            assert!(d.vector.iter().all(|v| *v >= 0.0));
            let norm = d.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!(d.orientation >= 0.0 && d.orientation < std::f64::consts::TAU);
            assert!(d.keypoint.scale > 0.0);
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let img = blob(64, 64, 30.0, 34.0, 4.0);
        let descs = extract(&img, &SiftConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_descriptors_csv(&descs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), descs.len() + 1);
        assert_eq!(lines[0].split(',').count(), 132);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 132);
        }
    }
}
