//! Sliding-window classification over whole images with one shared SIFT pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Rect};
use crate::pipeline::Classifier;
use crate::scalar::Scalar;
use crate::sift::{extract, KeypointDescriptor, MIN_OCTAVE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    /// Window size multipliers; `[1.0]` scans at the base size only.
    pub scales: Vec<f64>,
}

impl ScanConfig {
    pub fn new(window: (usize, usize), stride: (usize, usize)) -> Self {
        ScanConfig {
            window,
            stride,
            scales: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedWindow<T> {
    pub rect: Rect,
    pub label: Label,
    pub decision: T,
    pub keypoint_count: usize,
}

fn positions(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    // a step longer than the window would leave uncovered gaps
    let stride = stride.min(size);
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|p| p + size <= extent).collect();
    // clamp a last window to the far edge so coverage is total
    if out.last().is_some_and(|p| p + size < extent) {
        out.push(extent - size);
    }
    out
}

/// Row-major window grid per scale, with the last row and column clamped to the
/// image edge. Strides longer than the window are shortened to the window size so
/// the union of windows always covers the image.
pub fn propose_windows(width: usize, height: usize, cfg: &ScanConfig) -> Result<Vec<Rect>> {
    if cfg.stride.0 < 1 || cfg.stride.1 < 1 {
        return Err(Error::arg("stride must be at least 1"));
    }
    if cfg.scales.is_empty() {
        return Err(Error::arg("at least one window scale is required"));
    }
    let mut out = Vec::new();
    for scale in &cfg.scales {
        if !(*scale > 0.0) {
            return Err(Error::arg(format!("window scale must be positive, got {scale}")));
        }
        let w = (cfg.window.0 as f64 * scale).round() as usize;
        let h = (cfg.window.1 as f64 * scale).round() as usize;
        if w < 1 || h < 1 || w > width || h > height {
            return Err(Error::arg(format!("window {w}x{h} does not fit a {width}x{height} image")));
        }
        let xs = positions(width, w, cfg.stride.0);
        for y in positions(height, h, cfg.stride.1) {
            out.extend(xs.iter().map(|x| Rect::new(*x, y, w, h)));
        }
    }
    Ok(out)
}

/// Keypoint `(x, y)` (pixel centres at integers) lies on a pixel of `rect`.
pub fn keypoint_in_rect<T: Scalar>(d: &KeypointDescriptor<T>, rect: &Rect) -> bool {
    let half = T::lit(0.5);
    rect.contains_point(d.keypoint.x + half, d.keypoint.y + half)
}

/// Extracts SIFT once on the whole image, encodes each proposed window from the
/// descriptors whose keypoint falls inside it and classifies it. Output follows
/// proposal order.
pub fn scan_classify<T: Scalar>(img: &GrayImage<T>, classifier: &Classifier<T>, cfg: &ScanConfig) -> Result<Vec<ClassifiedWindow<T>>> {
    let windows = propose_windows(img.width(), img.height(), cfg)?;
    let descs = if img.width().min(img.height()) >= MIN_OCTAVE_DIM {
        extract(img, &classifier.sift)?
    } else {
        Vec::new()
    };
    windows
        .par_iter()
        .map(|rect| {
            let inside: Vec<&[T]> = descs
                .iter()
                .filter(|d| keypoint_in_rect(d, rect))
                .map(|d| d.vector.as_slice())
                .collect();
            let c = classifier.classify_descriptors(&inside)?;
            Ok(ClassifiedWindow {
                rect: *rect,
                label: c.label,
                decision: c.decision,
                keypoint_count: c.descriptor_count,
            })
        })
        .collect()
}
