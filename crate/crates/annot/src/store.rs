//! Annotation state persisted as an append-only JSON-lines log.
//!
//! Each write is one complete line followed by a data sync; a line cut short by a
//! crash has no trailing newline and is dropped (and truncated away) on replay.
//! Re-sampling a region supersedes its earlier sample line; once enough lines are
//! superseded the log is rewritten through a temporary file and a rename.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vinebud::corpus::{polygon_bounds, rasterize_polygon, sample_region_patches, Mask, QualityFlag, SubcategoryTag};
use vinebud::Rect;

use crate::error::{Result, ServiceError};

pub const LOG_FILE: &str = "annotations.jsonl";

/// Superseded log lines tolerated before the log is compacted.
pub const COMPACT_AFTER: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    BudPolygon,
    NonbudRegion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampling {
    pub step: usize,
    /// Patch width and height.
    pub dims: (usize, usize),
}

/// Body of `POST /annotations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewAnnotation {
    pub image: String,
    pub kind: Kind,
    pub points: Vec<(f64, f64)>,
    #[serde(default)]
    pub subcategory: Option<SubcategoryTag>,
    #[serde(default)]
    pub quality: QualityFlag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub image: String,
    pub kind: Kind,
    pub points: Vec<(f64, f64)>,
    pub subcategory: Option<SubcategoryTag>,
    pub quality: QualityFlag,
    /// Unix seconds.
    pub created_at: u64,
}

/// A record with its derived data, as returned by the API.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotationView {
    #[serde(flatten)]
    pub record: AnnotationRecord,
    /// Bounding rect of a bud polygon.
    pub rect: Option<Rect>,
    pub mask_pixels: Option<usize>,
    pub sampling: Option<Sampling>,
    /// Non-bud patches of the latest sampling run.
    pub patches: Vec<Rect>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
enum LogEntry {
    Annotation { record: AnnotationRecord },
    Sample { id: String, sampling: Sampling, rects: Vec<Rect> },
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub record: AnnotationRecord,
    /// Bud polygons only: bounding rect and its rasterized mask.
    pub mask: Option<(Rect, Mask)>,
    pub sample: Option<(Sampling, Vec<Rect>)>,
}

impl Entry {
    pub fn view(&self) -> AnnotationView {
        AnnotationView {
            record: self.record.clone(),
            rect: self.mask.as_ref().map(|(r, _)| *r),
            mask_pixels: self.mask.as_ref().map(|(_, m)| m.pixels().iter().filter(|b| **b).count()),
            sampling: self.sample.as_ref().map(|(s, _)| *s),
            patches: self.sample.as_ref().map(|(_, r)| r.clone()).unwrap_or_default(),
        }
    }
}

pub struct Store {
    path: PathBuf,
    file: File,
    len: u64,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    next_id: u64,
    superseded: usize,
}

/// Checks a polygon against its image and derives the bud mask.
fn derive(record: &AnnotationRecord, dims: (usize, usize)) -> Result<Option<(Rect, Mask)>> {
    let bad = |m: String| Err(ServiceError::Validation(m));
    if record.points.len() < 3 {
        return bad(format!("polygon needs at least 3 points, got {}", record.points.len()));
    }
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    for &(x, y) in &record.points {
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > w || y > h {
            return bad(format!("point ({x}, {y}) outside the {}x{} image", dims.0, dims.1));
        }
    }
    match record.kind {
        Kind::BudPolygon => {
            if record.subcategory.is_some() {
                return bad("subcategory tags apply to non-bud regions only".into());
            }
            let Some(rect) = polygon_bounds(&record.points) else {
                return bad("polygon has no area".into());
            };
            let mask = rasterize_polygon(&record.points, rect)?;
            if !mask.pixels().iter().any(|b| *b) {
                return bad("polygon covers no pixel centre".into());
            }
            Ok(Some((rect, mask)))
        }
        Kind::NonbudRegion => Ok(None),
    }
}

fn numeric_id(id: &str) -> Option<u64> {
    id.strip_prefix('a')?.parse().ok()
}

impl Store {
    /// Opens (creating if needed) the log at `dir/annotations.jsonl` and replays it.
    /// `dims` resolves an image id to its size; records on unknown images are kept
    /// as logged but carry no derived mask.
    pub fn open(dir: &Path, dims: impl Fn(&str) -> Option<(usize, usize)>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::storage(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::storage(&path, e))?;
        let bytes = std::fs::read(&path).map_err(|e| ServiceError::storage(&path, e))?;
        let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if complete < bytes.len() {
            log::warn!("{}: dropping {} bytes of an incomplete write", path.display(), bytes.len() - complete);
            file.set_len(complete as u64).map_err(|e| ServiceError::storage(&path, e))?;
        }
        let mut store = Store {
            path,
            file,
            len: complete as u64,
            entries: Vec::new(),
            index: HashMap::new(),
            next_id: 1,
            superseded: 0,
        };
        for (n, line) in bytes[..complete].split(|b| *b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let corrupt = |m: String| ServiceError::Storage(format!("{} line {}: {m}", store.path.display(), n + 1));
            match serde_json::from_slice::<LogEntry>(line).map_err(|e| corrupt(e.to_string()))? {
                LogEntry::Annotation { record } => {
                    if store.index.contains_key(&record.id) {
                        return Err(corrupt(format!("duplicate record {}", record.id)));
                    }
                    let mask = match dims(&record.image) {
                        Some(d) => derive(&record, d).map_err(|e| corrupt(e.to_string()))?,
                        None => {
                            log::warn!("record {} refers to missing image {}", record.id, record.image);
                            None
                        }
                    };
                    store.insert(Entry { record, mask, sample: None });
                }
                LogEntry::Sample { id, sampling, rects } => {
                    let i = *store.index.get(&id).ok_or_else(|| corrupt(format!("sample for unknown record {id}")))?;
                    if store.entries[i].sample.replace((sampling, rects)).is_some() {
                        store.superseded += 1;
                    }
                }
            }
        }
        if store.superseded > 0 {
            store.compact()?;
        }
        Ok(store)
    }

    fn insert(&mut self, entry: Entry) {
        if let Some(n) = numeric_id(&entry.record.id) {
            self.next_id = self.next_id.max(n + 1);
        }
        self.index.insert(entry.record.id.clone(), self.entries.len());
        self.entries.push(entry);
    }

    fn append(&mut self, entry: &LogEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry).expect("log entries serialize");
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        if let Err(e) = written {
            // leave no partial line for the next append to run into
            let _ = self.file.set_len(self.len);
            return Err(ServiceError::storage(&self.path, e));
        }
        self.len += line.len() as u64;
        Ok(())
    }

    pub fn log_path(&self) -> &Path {
        &self.path
    }

    pub fn post(&mut self, new: NewAnnotation, dims: (usize, usize), created_at: u64) -> Result<AnnotationView> {
        let record = AnnotationRecord {
            id: format!("a{}", self.next_id),
            image: new.image,
            kind: new.kind,
            points: new.points,
            subcategory: new.subcategory,
            quality: new.quality,
            created_at,
        };
        let mask = derive(&record, dims)?;
        self.append(&LogEntry::Annotation { record: record.clone() })?;
        self.insert(Entry { record, mask, sample: None });
        Ok(self.entries.last().unwrap().view())
    }

    /// Samples patches inside a non-bud region, replacing any earlier sampling of it.
    pub fn sample(&mut self, id: &str, sampling: Sampling) -> Result<Vec<Rect>> {
        let i = *self.index.get(id).ok_or_else(|| ServiceError::NotFound(format!("no annotation {id:?}")))?;
        let entry = &self.entries[i];
        if entry.record.kind != Kind::NonbudRegion {
            return Err(ServiceError::WrongKind(format!("annotation {id} is not a non-bud region")));
        }
        let rects = sample_region_patches(&entry.record.points, sampling.step, sampling.dims)?;
        self.append(&LogEntry::Sample {
            id: id.to_string(),
            sampling,
            rects: rects.clone(),
        })?;
        if self.entries[i].sample.replace((sampling, rects.clone())).is_some() {
            self.superseded += 1;
            if self.superseded >= COMPACT_AFTER {
                self.compact()?;
            }
        }
        Ok(rects)
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.index.get(id).map(|i| &self.entries[*i])
    }

    /// Records in creation order, optionally restricted to one image.
    pub fn list(&self, image: Option<&str>) -> Vec<AnnotationView> {
        self.entries
            .iter()
            .filter(|e| image.is_none_or(|id| e.record.image == id))
            .map(Entry::view)
            .collect()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Rewrites the log with one line per record plus its latest sampling.
    pub fn compact(&mut self) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, &LogEntry::Annotation { record: e.record.clone() }).expect("log entries serialize");
            out.push(b'\n');
            if let Some((sampling, rects)) = &e.sample {
                let line = LogEntry::Sample {
                    id: e.record.id.clone(),
                    sampling: *sampling,
                    rects: rects.clone(),
                };
                serde_json::to_writer(&mut out, &line).expect("log entries serialize");
                out.push(b'\n');
            }
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        let io = |e| ServiceError::storage(&tmp, e);
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&out).and_then(|_| f.sync_all()).map_err(io)?;
        std::fs::rename(&tmp, &self.path).map_err(|e| ServiceError::storage(&self.path, e))?;
        if let Some(dir) = self.path.parent() {
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
        }
        self.file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| ServiceError::storage(&self.path, e))?;
        self.len = out.len() as u64;
        self.superseded = 0;
        Ok(())
    }
}
