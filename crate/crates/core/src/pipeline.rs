//! Patch-level glue: descriptor extraction for corpus patches, cached descriptor
//! sets, vocabulary building and the composed patch classifier.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::bof::{encode, kmeans, KMeansConfig, Vocabulary};
use crate::corpus::{ImageStore, Label, Patch};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Rect};
use crate::scalar::Scalar;
use crate::sift::{extract, SiftConfig, DESCRIPTOR_LEN, MIN_OCTAVE_DIM};
use crate::svm::{label_for_decision, SvmModel};

const DESC_MAGIC: &[u8; 8] = b"VBUDDSC\0";
const DESC_VERSION: u32 = 1;

/// SIFT descriptor vectors of `rect` cropped out of `img`. Regions too small for the
/// scale space yield no descriptors.
pub fn patch_descriptors<T: Scalar>(img: &GrayImage<T>, rect: Rect, cfg: &SiftConfig<T>) -> Result<Vec<Vec<T>>> {
    if rect.w.min(rect.h) < MIN_OCTAVE_DIM {
        return Ok(Vec::new());
    }
    let crop = img.crop(rect)?;
    Ok(extract(&crop, cfg)?.into_iter().map(|d| d.vector).collect())
}

/// Descriptor vectors per patch id, in corpus order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorSet<T> {
    pub entries: Vec<(String, Vec<Vec<T>>)>,
}

impl<T: Scalar> DescriptorSet<T> {
    pub fn get(&self, patch_id: &str) -> Option<&[Vec<T>]> {
        self.entries.iter().find(|(id, _)| id == patch_id).map(|(_, d)| d.as_slice())
    }

    pub fn total_descriptors(&self) -> usize {
        self.entries.iter().map(|(_, d)| d.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DESC_MAGIC);
        w.u32(DESC_VERSION);
        w.u32(DESCRIPTOR_LEN as u32);
        w.u32(self.entries.len() as u32);
        for (id, descs) in &self.entries {
            w.u32(id.len() as u32);
            w.bytes(id.as_bytes());
            w.u32(descs.len() as u32);
            for d in descs {
                for v in d {
                    w.f64(v.to_f64_lossy());
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "descriptor set");
        r.expect_magic(DESC_MAGIC)?;
        let version = r.u32()?;
        if version != DESC_VERSION {
            return Err(Error::Format(format!("descriptor set: unsupported version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim != DESCRIPTOR_LEN {
            return Err(Error::Format(format!("descriptor set: dimension {dim}, expected {DESCRIPTOR_LEN}")));
        }
        let n = r.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("descriptor set: patch id is not UTF-8".into()))?;
            let count = r.u32()? as usize;
            if count.saturating_mul(dim * 8) > r.remaining() {
                return Err(Error::Format(format!("descriptor set: entry {id} truncated")));
            }
            let mut descs = Vec::with_capacity(count);
            for _ in 0..count {
                let mut d = Vec::with_capacity(dim);
                for _ in 0..dim {
                    d.push(T::lit(r.f64()?));
                }
                descs.push(d);
            }
            entries.push((id, descs));
        }
        r.expect_end()?;
        Ok(DescriptorSet { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Extracts descriptors for every patch; work is spread over the rayon pool and the
/// result keeps input order.
pub fn extract_patches<T: Scalar>(
    patches: &[&Patch],
    store: &dyn ImageStore<T>,
    cfg: &SiftConfig<T>,
) -> Result<DescriptorSet<T>> {
    let entries = patches
        .par_iter()
        .map(|p| {
            let img = store.gray(&p.source_image)?;
            Ok((p.id.clone(), patch_descriptors(&img, p.rect, cfg)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptorSet { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub size: usize,
    pub seed: u64,
    /// Descriptors beyond this many are subsampled (seeded) before clustering.
    pub max_descriptors: usize,
    pub max_iterations: usize,
    pub epsilon: f64,
}

impl VocabConfig {
    pub fn new(size: usize, seed: u64) -> Self {
        VocabConfig {
            size,
            seed,
            max_descriptors: 100_000,
            max_iterations: 100,
            epsilon: 1e-3,
        }
    }
}

/// Clusters the pooled descriptors of `sets` into a vocabulary.
pub fn build_vocabulary<T: Scalar>(sets: &[&[Vec<T>]], cfg: &VocabConfig) -> Result<Vocabulary<T>> {
    let pool: Vec<&Vec<T>> = sets.iter().flat_map(|s| s.iter()).collect();
    let pool: Vec<&Vec<T>> = if pool.len() > cfg.max_descriptors {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d35c);
        let mut idx = sample(&mut rng, pool.len(), cfg.max_descriptors).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    } else {
        pool
    };
    let km = KMeansConfig {
        k: cfg.size,
        max_iterations: cfg.max_iterations,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
    };
    let (vocab, objective, report) = kmeans(&pool, &km)?;
    log::info!(
        "vocabulary: k={} from {} descriptors, {} iterations, objective {:.4}",
        cfg.size,
        pool.len(),
        report.iterations,
        objective.to_f64_lossy()
    );
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification<T> {
    pub label: Label,
    pub decision: T,
    pub descriptor_count: usize,
}

/// Vocabulary + SVM + extraction settings.
#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub vocab: Vocabulary<T>,
    pub model: SvmModel<T>,
    pub sift: SiftConfig<T>,
}

impl<T: Scalar> Classifier<T> {
    pub fn classify_descriptors<P: AsRef<[T]>>(&self, descs: &[P]) -> Result<Classification<T>> {
        let hist = encode(&self.vocab, descs)?;
        let decision = self.model.decision_value(&hist.bins)?;
        Ok(Classification {
            label: label_for_decision(decision),
            decision,
            descriptor_count: hist.descriptor_count,
        })
    }

    /// Extract, encode and predict one patch.
    pub fn classify_patch(&self, img: &GrayImage<T>, rect: Rect) -> Result<Classification<T>> {
        self.classify_descriptors(&patch_descriptors(img, rect, &self.sift)?)
    }
}
