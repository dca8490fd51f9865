#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vinebud::imaging::GrayImage;
use vinebud::sift::KeypointDescriptor;

/// Gaussian blobs of mixed sizes and polarities on a mid-gray canvas, kept away from the
/// border by `margin` pixels.
pub fn blob_field(w: usize, h: usize, n: usize, margin: f64, seed: u64) -> GrayImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let x = rng.random_range(margin..w as f64 - margin);
            let y = rng.random_range(margin..h as f64 - margin);
            let s = rng.random_range(2.0..5.0);
            let a = if rng.random_bool(0.5) { 0.35 } else { -0.3 };
            (x, y, s, a)
        })
        .collect();
    GrayImage::from_fn(w, h, |x, y| {
        let mut v = 0.45;
        for (bx, by, s, a) in &blobs {
            let (dx, dy) = (x as f64 - bx, y as f64 - by);
            v += a * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
        }
        v
    })
}

/// Single isotropic Gaussian blob on black.
pub fn single_blob(w: usize, h: usize, cx: f64, cy: f64, sigma: f64) -> GrayImage<f64> {
    GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        0.9 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Fraction of `src` descriptors with a `dst` counterpart within `tol` pixels after mapping
/// through `map`, plus the cosine similarities of location/orientation-paired descriptors.
pub fn match_under_map(
    src: &[KeypointDescriptor<f64>],
    dst: &[KeypointDescriptor<f64>],
    tol: f64,
    map: impl Fn(f64, f64) -> (f64, f64),
    orientation_shift: f64,
) -> (f64, Vec<f64>) {
    let mut hits = 0usize;
    let mut cosines = Vec::new();
    for s in src {
        let (mx, my) = map(s.keypoint.x, s.keypoint.y);
        let near: Vec<&KeypointDescriptor<f64>> = dst
            .iter()
            .filter(|d| ((d.keypoint.x - mx).powi(2) + (d.keypoint.y - my).powi(2)).sqrt() <= tol)
            .collect();
        if near.is_empty() {
            continue;
        }
        hits += 1;
        let want = s.orientation + orientation_shift;
        let best = near
            .iter()
            .min_by(|a, b| {
                angle_diff(a.orientation, want)
                    .total_cmp(&angle_diff(b.orientation, want))
            })
            .unwrap();
        if angle_diff(best.orientation, want) < 0.2 {
            cosines.push(cosine(&s.vector, &best.vector));
        }
    }
    (hits as f64 / src.len().max(1) as f64, cosines)
}

/// One-dimensional two-interval fixture whose cross-validation error is zero only
/// at gamma = 2^-7, C = 2^14 of the default tuning grid.
pub fn single_separable_grid_point() -> (Vec<Vec<f64>>, Vec<vinebud::corpus::Label>) {
    use vinebud::corpus::Label;
    let s = 2f64.powf(-1.5);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..30 {
        xs.push(vec![s * (i as f64 / 29.0)]);
        ys.push(Label::Bud);
    }
    for i in 0..30 {
        xs.push(vec![s * (1.1 + 3.0 * i as f64 / 29.0)]);
        ys.push(Label::NonBud);
    }
    (xs, ys)
}

/// Corpus after split, extraction and vocabulary construction.
pub struct Prepared<S> {
    pub store: S,
    pub patches: Vec<vinebud::corpus::Patch>,
    pub split: vinebud::corpus::Split,
    pub vocab: vinebud::bof::Vocabulary<f64>,
    pub sift: vinebud::sift::SiftConfig<f64>,
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<vinebud::corpus::Label>,
    pub test_x: Vec<Vec<f64>>,
    pub test_y: Vec<vinebud::corpus::Label>,
}

pub fn prepare<S: vinebud::corpus::ImageStore<f64>>(
    store: S,
    patches: Vec<vinebud::corpus::Patch>,
    test_counts: (usize, usize),
    split_seed: u64,
    vocab_size: usize,
) -> Prepared<S> {
    use vinebud::bof::encode;
    use vinebud::pipeline::{build_vocabulary, extract_patches, VocabConfig};
    let refs: Vec<&vinebud::corpus::Patch> = patches.iter().collect();
    let split = vinebud::corpus::split(&refs, split_seed, test_counts).unwrap();
    let sift = vinebud::sift::SiftConfig::default();
    let set = extract_patches(&refs, &store, &sift).unwrap();
    let train_sets: Vec<&[Vec<f64>]> = split.train.iter().map(|i| set.entries[*i].1.as_slice()).collect();
    let vocab = build_vocabulary(&train_sets, &VocabConfig::new(vocab_size, split_seed)).unwrap();
    let hist = |i: &usize| encode(&vocab, &set.entries[*i].1).unwrap().bins;
    let label = |i: &usize| patches[*i].label;
    Prepared {
        train_x: split.train.iter().map(hist).collect(),
        train_y: split.train.iter().map(label).collect(),
        test_x: split.test.iter().map(hist).collect(),
        test_y: split.test.iter().map(label).collect(),
        store,
        patches,
        split,
        vocab,
        sift,
    }
}

pub fn desk_run(
    cfg: &vinebud::synth::DeskCorpusConfig,
    test_counts: (usize, usize),
    split_seed: u64,
    vocab_size: usize,
) -> Prepared<vinebud::corpus::MemoryImageStore<f64>> {
    let desk = vinebud::synth::generate_desk_corpus(cfg).unwrap();
    let patches = desk.corpus.usable_patches().into_iter().cloned().collect();
    prepare(desk.store::<f64>(), patches, test_counts, split_seed, vocab_size)
}

/// Independent 26-neighbour scan: compares every interior sample against the full
/// 3x3x3 cube without any early exit.
pub fn brute_force_extrema(dog: &vinebud::sift::DogPyramid<f64>) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (o, levels) in dog.octaves.iter().enumerate() {
        for l in 1..levels.len() - 1 {
            let (w, h) = (levels[l].width(), levels[l].height());
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = levels[l].get(x, y);
                    let mut gt = 0;
                    let mut lt = 0;
                    for dl in [l - 1, l, l + 1] {
                        for yy in y - 1..=y + 1 {
                            for xx in x - 1..=x + 1 {
                                if dl == l && yy == y && xx == x {
                                    continue;
                                }
                                let n = levels[dl].get(xx, yy);
                                if v > n {
                                    gt += 1;
                                }
                                if v < n {
                                    lt += 1;
                                }
                            }
                        }
                    }
                    if gt == 26 || lt == 26 {
                        out.push((o, l, x, y));
                    }
                }
            }
        }
    }
    out
}
