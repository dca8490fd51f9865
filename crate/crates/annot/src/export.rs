use std::path::{Path, PathBuf};

use serde::Serialize;
use vinebud::corpus::{save_manifest, Corpus, ImageEntry, Label, Patch, BUD_SIDE_MAX, BUD_SIDE_MIN};

use crate::catalog::ImageInfo;
use crate::error::Result;
use crate::store::{Entry, Kind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportSummary {
    pub path: PathBuf,
    pub images: usize,
    pub bud: usize,
    pub non_bud: usize,
    /// Records left out because they would not form a valid corpus patch.
    pub skipped: Vec<Skipped>,
}

/// Builds the corpus for a snapshot of records. Image paths are relative to
/// `images_root` when the manifest is written there, absolute otherwise.
pub fn build_corpus(images: &[ImageInfo], images_root: &Path, out: &Path, entries: &[Entry]) -> (Corpus, Vec<Skipped>) {
    let same_root = match (images_root.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => images_root == out,
    };
    let abs_root = images_root.canonicalize().unwrap_or_else(|_| images_root.to_path_buf());
    let mut corpus = Corpus {
        images: images
            .iter()
            .map(|i| ImageEntry {
                id: i.id.clone(),
                path: if same_root { i.file.clone() } else { abs_root.join(&i.file).to_string_lossy().into_owned() },
                width: i.width,
                height: i.height,
            })
            .collect(),
        patches: Vec::new(),
    };
    let mut skipped = Vec::new();
    for e in entries {
        let r = &e.record;
        if !images.iter().any(|i| i.id == r.image) {
            skipped.push(Skipped {
                id: r.id.clone(),
                reason: format!("image {} is no longer in the catalog", r.image),
            });
            continue;
        }
        match r.kind {
            Kind::BudPolygon => {
                let Some((rect, mask)) = &e.mask else { continue };
                let side_ok = |s: usize| (BUD_SIDE_MIN..=BUD_SIDE_MAX).contains(&s);
                if !side_ok(rect.w) || !side_ok(rect.h) {
                    skipped.push(Skipped {
                        id: r.id.clone(),
                        reason: format!("bud rect {}x{} outside [{BUD_SIDE_MIN}, {BUD_SIDE_MAX}]", rect.w, rect.h),
                    });
                    continue;
                }
                corpus.patches.push(Patch {
                    id: format!("{}-bud", r.id),
                    source_image: r.image.clone(),
                    rect: *rect,
                    label: Label::Bud,
                    mask: Some(mask.clone()),
                    subcategory: None,
                    quality: r.quality,
                });
            }
            Kind::NonbudRegion => {
                let rects = e.sample.as_ref().map(|(_, rs)| rs.as_slice()).unwrap_or_default();
                for (n, rect) in rects.iter().enumerate() {
                    corpus.patches.push(Patch {
                        id: format!("{}-s{n}", r.id),
                        source_image: r.image.clone(),
                        rect: *rect,
                        label: Label::NonBud,
                        mask: None,
                        subcategory: r.subcategory,
                        quality: r.quality,
                    });
                }
            }
        }
    }
    (corpus, skipped)
}

pub fn export(images: &[ImageInfo], images_root: &Path, out: &Path, entries: &[Entry]) -> Result<ExportSummary> {
    std::fs::create_dir_all(out).map_err(|e| crate::error::ServiceError::storage(out, e))?;
    let (corpus, skipped) = build_corpus(images, images_root, out, entries);
    save_manifest(&corpus, out)?;
    let bud = corpus.patches.iter().filter(|p| p.label == Label::Bud).count();
    Ok(ExportSummary {
        path: out.to_path_buf(),
        images: corpus.images.len(),
        bud,
        non_bud: corpus.patches.len() - bud,
        skipped,
    })
}
