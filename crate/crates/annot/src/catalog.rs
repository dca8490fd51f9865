//! Source images found at the top level of the corpus root.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use vinebud::imaging::{decode_image, read_image, RgbImage};

use crate::error::{Result, ServiceError};

pub const THUMB_SIDE: u32 = 256;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ImageInfo {
    pub id: String,
    /// File name relative to the corpus root.
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub thumb: String,
}

pub struct Catalog {
    root: PathBuf,
    images: BTreeMap<String, ImageInfo>,
    thumbs: Mutex<HashMap<String, Arc<Vec<u8>>>>,
}

fn image_id(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if !EXTENSIONS.contains(&ext.as_str()) {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let ok = !stem.is_empty() && !stem.starts_with('.') && stem.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    ok.then(|| stem.to_string())
}

impl Catalog {
    /// Scans `root` (non-recursive). Files that are not decodable images are skipped
    /// with a warning; so are files whose stem repeats an earlier id.
    pub fn scan(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| ServiceError::storage(root, e))?;
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| ServiceError::storage(root, e))?;
            if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
                paths.push(entry.path());
            }
        }
        paths.sort();
        let mut images = BTreeMap::new();
        for path in paths {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let Some(id) = image_id(&path) else {
                if !name.starts_with('.') {
                    log::warn!("skipping {}: not an image file name", path.display());
                }
                continue;
            };
            if images.contains_key(&id) {
                log::warn!("skipping {}: image id {id:?} already taken", path.display());
                continue;
            }
            let img = match read_image(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let info = ImageInfo {
                thumb: format!("/images/{id}/thumb"),
                id: id.clone(),
                file: name,
                width: img.width(),
                height: img.height(),
            };
            images.insert(id, info);
        }
        Ok(Catalog {
            root: root.to_path_buf(),
            images,
            thumbs: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn list(&self) -> Vec<ImageInfo> {
        self.images.values().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<&ImageInfo> {
        self.images.get(id).ok_or_else(|| ServiceError::NotFound(format!("no image {id:?}")))
    }

    pub fn path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.get(id)?.file))
    }

    pub fn bytes(&self, id: &str) -> Result<Vec<u8>> {
        let path = self.path(id)?;
        std::fs::read(&path).map_err(|e| ServiceError::storage(&path, e))
    }

    /// PNG thumbnail no larger than [`THUMB_SIDE`] on either side, built on first request.
    pub fn thumbnail(&self, id: &str) -> Result<Arc<Vec<u8>>> {
        if let Some(t) = self.thumbs.lock().unwrap().get(id) {
            return Ok(t.clone());
        }
        let img = decode_image(&self.bytes(id)?)?;
        let png = Arc::new(thumbnail_png(&img)?);
        self.thumbs.lock().unwrap().insert(id.to_string(), png.clone());
        Ok(png)
    }
}

fn thumbnail_png(img: &RgbImage) -> Result<Vec<u8>> {
    let flat: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, flat)
        .ok_or_else(|| ServiceError::Storage("image buffer size mismatch".into()))?;
    let (w, h) = (buf.width(), buf.height());
    let scale = (THUMB_SIDE as f64 / w.max(h) as f64).min(1.0);
    let (tw, th) = (((w as f64 * scale).round() as u32).max(1), ((h as f64 * scale).round() as u32).max(1));
    let thumb = image::imageops::thumbnail(&buf, tw, th);
    let mut out = Cursor::new(Vec::new());
    thumb
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ServiceError::Storage(format!("thumbnail encoding: {e}")))?;
    Ok(out.into_inner())
}
