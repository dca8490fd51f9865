//! Bag-of-features: k-means vocabulary over local descriptors and per-patch
//! histogram encoding.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

const VOCAB_MAGIC: &[u8; 8] = b"VBUDVOC\0";
const VOCAB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iterations: usize,
    /// Lloyd iterations stop once every center moves less than this (Euclidean).
    pub epsilon: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iterations: 100,
            epsilon: 1e-3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::arg("k-means k must be at least 1"));
        }
        if self.max_iterations < 1 {
            return Err(Error::arg("k-means max_iterations must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::arg("k-means epsilon must be positive"));
        }
        Ok(())
    }
}

/// Visual vocabulary: `k` cluster centers in descriptor space.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary<T> {
    centers: Vec<Vec<T>>,
    pub config: KMeansConfig,
    /// First 8 bytes of a SHA-256 over the training points.
    pub provenance: u64,
    /// L1-normalize histograms by descriptor count.
    pub normalize: bool,
}

impl<T: Scalar> Vocabulary<T> {
    pub fn new(centers: Vec<Vec<T>>, config: KMeansConfig, provenance: u64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::arg("vocabulary needs at least one center"));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::arg("vocabulary centers must share a positive dimension"));
        }
        for i in 0..centers.len() {
            for j in 0..i {
                if centers[i] == centers[j] {
                    return Err(Error::arg(format!("vocabulary centers {j} and {i} are identical")));
                }
            }
        }
        Ok(Vocabulary {
            centers,
            config,
            provenance,
            normalize: true,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn centers(&self) -> &[Vec<T>] {
        &self.centers
    }
}

/// Fixed-size patch descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct BofHistogram<T> {
    pub bins: Vec<T>,
    pub descriptor_count: usize,
}

/// Per-run diagnostics of [`kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansReport<T> {
    /// Objective after every assignment step, final centers last.
    pub objective_history: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fingerprint<T: Scalar, P: AsRef<[T]>>(points: &[P]) -> u64 {
    let mut h = Sha256::new();
    for p in points {
        for v in p.as_ref() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        h.update([0xff]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn check_points<T: Scalar, P: AsRef<[T]>>(points: &[P], k: usize) -> Result<usize> {
    if points.len() < k {
        return Err(Error::arg(format!("k-means needs at least k={k} points, got {}", points.len())));
    }
    let dim = points.first().map_or(0, |p| p.as_ref().len());
    if dim == 0 || points.iter().any(|p| p.as_ref().len() != dim) {
        return Err(Error::arg("k-means points must share a positive dimension"));
    }
    Ok(dim)
}

/// k-means++ seeding: first center uniform, each next one drawn with probability
/// proportional to the squared distance to the nearest chosen center.
pub fn kmeans_init_pp<T: Scalar, P: AsRef<[T]>, R: Rng + ?Sized>(points: &[P], k: usize, rng: &mut R) -> Result<Vec<Vec<T>>> {
    if k < 1 {
        return Err(Error::arg("k-means k must be at least 1"));
    }
    check_points(points, k)?;
    let n = points.len();
    let mut centers: Vec<Vec<T>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(points[first].as_ref().to_vec());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_ref(), &centers[0]).to_f64_lossy())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return Err(Error::arg(format!(
                "only {} distinct points available for k={k}",
                centers.len()
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total weight");
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), &c).to_f64_lossy());
        }
        centers.push(c);
    }
    Ok(centers)
}

fn nearest<T: Scalar>(centers: &[Vec<T>], v: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_d = squared_distance(v, &centers[0]);
    for (i, c) in centers.iter().enumerate().skip(1) {
        let d = squared_distance(v, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

fn assign<T: Scalar, P: AsRef<[T]> + Sync>(points: &[P], centers: &[Vec<T>]) -> (Vec<usize>, Vec<T>) {
    points.par_iter().map(|p| nearest(centers, p.as_ref())).unzip()
}

/// Lloyd iterations from k-means++ seeds. Returns the vocabulary, the objective (sum of
/// squared distances to the nearest center) of the final centers, and a run report.
pub fn kmeans<T: Scalar, P: AsRef<[T]> + Sync>(points: &[P], cfg: &KMeansConfig) -> Result<(Vocabulary<T>, T, KMeansReport<T>)> {
    cfg.validate()?;
    let dim = check_points(points, cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_init_pp(points, cfg.k, &mut rng)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let (mut labels, mut dists) = assign(points, &centers);
    while iterations < cfg.max_iterations {
        history.push(dists.iter().copied().sum::<T>());
        iterations += 1;

        let mut sums = vec![vec![T::zero(); dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p.as_ref()) {
                *s = *s + *v;
            }
        }
        let mut next = centers.clone();
        let mut taken = vec![false; points.len()];
        for c in 0..cfg.k {
            if counts[c] > 0 {
                let n = T::from_usize_lossy(counts[c]);
                next[c] = sums[c].iter().map(|s| *s / n).collect();
            } else {
                // empty cluster: move it onto the point farthest from its own center
                let far = (0..points.len())
                    .filter(|i| !taken[*i])
                    .max_by(|a, b| dists[*a].partial_cmp(&dists[*b]).unwrap().then(b.cmp(a)));
                if let Some(i) = far {
                    taken[i] = true;
                    next[c] = points[i].as_ref().to_vec();
                }
            }
        }
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).to_f64_lossy().sqrt())
            .fold(0.0, f64::max);
        centers = next;
        (labels, dists) = assign(points, &centers);
        if shift < cfg.epsilon {
            converged = true;
            break;
        }
    }
    let objective = dists.iter().copied().sum::<T>();
    history.push(objective);
    let vocab = Vocabulary::new(centers, cfg.clone(), fingerprint(points))?;
    Ok((
        vocab,
        objective,
        KMeansReport {
            objective_history: history,
            iterations,
            converged,
        },
    ))
}

/// Index of the closest center; ties resolve to the lowest index.
pub fn nearest_center<T: Scalar>(vocab: &Vocabulary<T>, v: &[T]) -> Result<usize> {
    if v.len() != vocab.dim() {
        return Err(Error::arg(format!(
            "descriptor dimension {} does not match vocabulary dimension {}",
            v.len(),
            vocab.dim()
        )));
    }
    Ok(nearest(&vocab.centers, v).0)
}

/// Counts descriptors per nearest center; divided by the descriptor count when
/// `vocab.normalize` is set. No descriptors gives the all-zero histogram.
pub fn encode<T: Scalar, P: AsRef<[T]>>(vocab: &Vocabulary<T>, descriptors: &[P]) -> Result<BofHistogram<T>> {
    let mut counts = vec![0usize; vocab.k()];
    for d in descriptors {
        counts[nearest_center(vocab, d.as_ref())?] += 1;
    }
    let n = descriptors.len();
    let bins = if n == 0 {
        vec![T::zero(); vocab.k()]
    } else if vocab.normalize {
        let total = T::from_usize_lossy(n);
        counts.iter().map(|c| T::from_usize_lossy(*c) / total).collect()
    } else {
        counts.iter().map(|c| T::from_usize_lossy(*c)).collect()
    };
    Ok(BofHistogram {
        bins,
        descriptor_count: n,
    })
}

pub fn vocabulary_to_bytes<T: Scalar>(vocab: &Vocabulary<T>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(VOCAB_MAGIC);
    w.u32(VOCAB_VERSION);
    w.u32(vocab.k() as u32);
    w.u32(vocab.dim() as u32);
    w.u32(vocab.config.max_iterations as u32);
    w.f64(vocab.config.epsilon);
    w.u64(vocab.config.seed);
    w.u8(vocab.normalize as u8);
    w.u64(vocab.provenance);
    for c in &vocab.centers {
        for v in c {
            w.f64(v.to_f64_lossy());
        }
    }
    w.finish()
}

pub fn vocabulary_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Vocabulary<T>> {
    let mut r = Reader::new(bytes, "vocabulary");
    r.expect_magic(VOCAB_MAGIC)?;
    let version = r.u32()?;
    if version != VOCAB_VERSION {
        return Err(Error::Format(format!("vocabulary: unsupported version {version}")));
    }
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let max_iterations = r.u32()? as usize;
    let epsilon = r.f64()?;
    let seed = r.u64()?;
    let normalize = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("vocabulary: bad normalize flag {other}"))),
    };
    let provenance = r.u64()?;
    if k == 0 || dim == 0 {
        return Err(Error::Format("vocabulary: k and dimension must be positive".into()));
    }
    let body = k
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("vocabulary: header sizes overflow".into()))?;
    if r.remaining() != body {
        return Err(Error::Format(format!(
            "vocabulary: header declares {k} x {dim} centers ({body} bytes) but {} bytes follow",
            r.remaining()
        )));
    }
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = Vec::with_capacity(dim);
        for _ in 0..dim {
            c.push(T::lit(r.f64()?));
        }
        centers.push(c);
    }
    r.expect_end()?;
    let config = KMeansConfig {
        k,
        max_iterations,
        epsilon,
        seed,
    };
    let mut vocab = Vocabulary::new(centers, config, provenance).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
    vocab.normalize = normalize;
    Ok(vocab)
}

pub fn save_vocabulary<T: Scalar>(vocab: &Vocabulary<T>, path: &Path) -> Result<()> {
    write_file(path, &vocabulary_to_bytes(vocab))
}

pub fn load_vocabulary<T: Scalar>(path: &Path) -> Result<Vocabulary<T>> {
    vocabulary_from_bytes(&read_file(path)?)
}
