//! Corpus model: labeled patches with bud masks, the on-disk manifest, polygon
//! rasterization, region sampling, class balancing and train/test splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_image, to_grayscale, GrayImage, Raster, Rect};
use crate::scalar::Scalar;

pub const MANIFEST_FORMAT: &str = "vinebud-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const BUD_SIDE_MIN: usize = 100;
pub const BUD_SIDE_MAX: usize = 1600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Bud,
    NonBud,
}

impl Label {
    /// +1 for bud, -1 for non-bud.
    pub fn sign(self) -> f64 {
        match self {
            Label::Bud => 1.0,
            Label::NonBud => -1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Label::Bud => 1,
            Label::NonBud => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bud => "bud",
            Label::NonBud => "non-bud",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityFlag {
    #[default]
    Ok,
    Blurred,
    Overexposed,
    Underexposed,
}

macro_rules! tags {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Scene category of a non-bud patch.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum SubcategoryTag {
            $(#[serde(rename = $name)] $variant,)*
        }

        impl SubcategoryTag {
            pub const ALL: [SubcategoryTag; 10] = [$(SubcategoryTag::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(SubcategoryTag::$variant => $name,)*
                }
            }
        }

        impl FromStr for SubcategoryTag {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(SubcategoryTag::$variant),)*
                    other => Err(Error::arg(format!("unknown subcategory tag {other:?}"))),
                }
            }
        }
    };
}

tags! {
    OutOfFocus => "out-of-focus",
    BranchEdge => "branch-edge",
    BranchInternal => "branch-internal",
    Wire => "wire",
    Tendril => "tendril",
    TrunkWithBark => "trunk-with-bark",
    DryLeaves => "dry-leaves",
    DryBunches => "dry-bunches",
    BudNeighborhood => "bud-neighborhood",
    Knot => "knot",
}

impl fmt::Display for SubcategoryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub type Mask = Raster<bool>;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub id: String,
    pub source_image: String,
    pub rect: Rect,
    pub label: Label,
    /// One entry per rect pixel, `true` on bud pixels.
    pub mask: Option<Mask>,
    pub subcategory: Option<SubcategoryTag>,
    pub quality: QualityFlag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the corpus root.
    pub path: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub images: Vec<ImageEntry>,
    pub patches: Vec<Patch>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub bud: usize,
    pub non_bud: usize,
    pub quality_flagged: usize,
    pub per_subcategory: BTreeMap<String, usize>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && !id.starts_with('.')
}

impl Corpus {
    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn stats(&self) -> CorpusStats {
        let mut s = CorpusStats::default();
        for p in &self.patches {
            match p.label {
                Label::Bud => s.bud += 1,
                Label::NonBud => s.non_bud += 1,
            }
            if p.quality != QualityFlag::Ok {
                s.quality_flagged += 1;
            }
            if let Some(tag) = p.subcategory {
                *s.per_subcategory.entry(tag.to_string()).or_default() += 1;
            }
        }
        s
    }

    /// Patches usable for experiments: quality-flagged patches are left out.
    pub fn usable_patches(&self) -> Vec<&Patch> {
        self.patches.iter().filter(|p| p.quality == QualityFlag::Ok).collect()
    }

    /// Checks every corpus invariant; errors name the offending record.
    pub fn validate(&self) -> Result<()> {
        let mut dims = HashMap::new();
        for img in &self.images {
            let bad = |reason: String| Error::Manifest {
                record: format!("image {}", img.id),
                reason,
            };
            if !valid_id(&img.id) {
                return Err(bad("id must be non-empty [A-Za-z0-9._-]".into()));
            }
            if img.width == 0 || img.height == 0 {
                return Err(bad("image dimensions must be positive".into()));
            }
            if dims.insert(img.id.as_str(), (img.width, img.height)).is_some() {
                return Err(bad("duplicate image id".into()));
            }
        }
        let mut seen = HashSet::new();
        for p in &self.patches {
            validate_patch(p, &dims, &mut seen)?;
        }
        Ok(())
    }
}

fn validate_patch<'a>(p: &'a Patch, dims: &HashMap<&str, (usize, usize)>, seen: &mut HashSet<&'a str>) -> Result<()> {
    let bad = |reason: String| Error::Manifest {
        record: format!("patch {}", p.id),
        reason,
    };
    if !valid_id(&p.id) {
        return Err(bad("id must be non-empty [A-Za-z0-9._-]".into()));
    }
    if !seen.insert(p.id.as_str()) {
        return Err(bad("duplicate patch id".into()));
    }
    let (w, h) = *dims
        .get(p.source_image.as_str())
        .ok_or_else(|| bad(format!("unknown source image {:?}", p.source_image)))?;
    if p.rect.w == 0 || p.rect.h == 0 || !p.rect.fits_in(w, h) {
        return Err(bad(format!("rect {:?} not inside {w}x{h} image", p.rect)));
    }
    if let Some(m) = &p.mask {
        if m.width() != p.rect.w || m.height() != p.rect.h {
            return Err(bad(format!(
                "mask is {}x{} but rect is {}x{}",
                m.width(),
                m.height(),
                p.rect.w,
                p.rect.h
            )));
        }
    }
    match p.label {
        Label::Bud => {
            if p.mask.is_none() {
                return Err(bad("bud patch without mask".into()));
            }
            let side_ok = |s: usize| (BUD_SIDE_MIN..=BUD_SIDE_MAX).contains(&s);
            if !side_ok(p.rect.w) || !side_ok(p.rect.h) {
                return Err(bad(format!(
                    "bud rect {}x{} outside [{BUD_SIDE_MIN}, {BUD_SIDE_MAX}]",
                    p.rect.w, p.rect.h
                )));
            }
            if p.subcategory.is_some() {
                return Err(bad("subcategory tags apply to non-bud patches only".into()));
            }
        }
        Label::NonBud => {
            if p.mask.as_ref().is_some_and(|m| m.pixels().iter().any(|b| *b)) {
                return Err(bad("non-bud patch mask contains bud pixels".into()));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
enum Record {
    Header {
        format: String,
        version: u32,
    },
    Image(ImageEntry),
    Patch(PatchRecord),
}

#[derive(Serialize, Deserialize)]
struct PatchRecord {
    id: String,
    image: String,
    rect: Rect,
    label: Label,
    #[serde(default)]
    subcategory: Option<SubcategoryTag>,
    #[serde(default)]
    quality: QualityFlag,
    /// Mask PNG path relative to the corpus root.
    #[serde(default)]
    mask: Option<String>,
}

fn mask_rel_path(patch_id: &str) -> String {
    format!("{MASKS_DIR}/{patch_id}.png")
}

/// Writes `manifest.jsonl` and the mask sidecars under `root`.
pub fn save_manifest(corpus: &Corpus, root: &Path) -> Result<()> {
    corpus.validate()?;
    let masks = root.join(MASKS_DIR);
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut out = Vec::new();
    let mut line = |r: &Record| {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    };
    line(&Record::Header {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
    });
    for img in &corpus.images {
        line(&Record::Image(img.clone()));
    }
    for p in &corpus.patches {
        let mask = match &p.mask {
            Some(m) => {
                let rel = mask_rel_path(&p.id);
                let path = root.join(&rel);
                std::fs::write(&path, encode_mask_png(m)?).map_err(|e| Error::io(&path, e))?;
                Some(rel)
            }
            None => None,
        };
        line(&Record::Patch(PatchRecord {
            id: p.id.clone(),
            image: p.source_image.clone(),
            rect: p.rect,
            label: p.label,
            subcategory: p.subcategory,
            quality: p.quality,
            mask,
        }));
    }
    write_atomic(&root.join(MANIFEST_FILE), &out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads `manifest.jsonl` from a corpus root (or a direct path to the manifest file).
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
    let mut corpus = Corpus::default();
    let mut header = false;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&file, e))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            record: format!("line {lineno}"),
            reason,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match record {
            Record::Header { format, version } => {
                if header {
                    return Err(bad("duplicate header".into()));
                }
                if format != MANIFEST_FORMAT || version != MANIFEST_VERSION {
                    return Err(bad(format!("unsupported manifest {format} v{version}")));
                }
                header = true;
            }
            _ if !header => return Err(bad("first record must be the header".into())),
            Record::Image(img) => corpus.images.push(img),
            Record::Patch(p) => {
                let mask = match &p.mask {
                    Some(rel) => {
                        let mpath = root.join(rel);
                        let bytes = std::fs::read(&mpath).map_err(|e| bad(format!("patch {}: mask {}: {e}", p.id, mpath.display())))?;
                        Some(decode_mask_png(&bytes).map_err(|e| bad(format!("patch {}: {e}", p.id)))?)
                    }
                    None => None,
                };
                corpus.patches.push(Patch {
                    id: p.id,
                    source_image: p.image,
                    rect: p.rect,
                    label: p.label,
                    mask,
                    subcategory: p.subcategory,
                    quality: p.quality,
                });
            }
        }
    }
    if !header {
        return Err(Error::Manifest {
            record: "line 1".into(),
            reason: "missing header".into(),
        });
    }
    corpus.validate()?;
    Ok(corpus)
}

/// 1-bit grayscale PNG, white = bud.
pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let (w, h) = (mask.width(), mask.height());
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for (x, b) in mask.row(y).iter().enumerate() {
            if *b {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("mask png: {e}")))?;
        writer.write_image_data(&packed).map_err(|e| Error::Format(format!("mask png: {e}")))?;
    }
    Ok(out)
}

/// Accepts any grayscale PNG; non-zero samples are bud pixels.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("mask png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("mask png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("mask png: {e}")))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "mask png: expected grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w];
        data.extend(row.iter().map(|v| *v != 0));
    }
    Raster::new(w, h, data)
}

// ---------------------------------------------------------------------------
// geometry

/// Even-odd fill of a closed polygon (image pixel coordinates) over `frame`; a
/// pixel is set when its centre lies inside.
pub fn rasterize_polygon(points: &[(f64, f64)], frame: Rect) -> Result<Mask> {
    if points.len() < 3 {
        return Err(Error::arg(format!("polygon needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::arg("polygon coordinates must be finite"));
    }
    let mut mask = Raster::filled(frame.w, frame.h, false);
    let mut crossings = Vec::new();
    for row in 0..frame.h {
        let cy = (frame.y + row) as f64 + 0.5;
        crossings.clear();
        let mut j = points.len() - 1;
        for i in 0..points.len() {
            let (xi, yi) = points[i];
            let (xj, yj) = points[j];
            if (yi > cy) != (yj > cy) {
                crossings.push((xj - xi) * (cy - yi) / (yj - yi) + xi);
            }
            j = i;
        }
        if crossings.is_empty() {
            continue;
        }
        for col in 0..frame.w {
            let cx = (frame.x + col) as f64 + 0.5;
            let right = crossings.iter().filter(|x| cx < **x).count();
            if right % 2 == 1 {
                mask.set(col, row, true);
            }
        }
    }
    Ok(mask)
}

/// Integer bounding box `[floor(min), ceil(max))` clipped at zero.
pub fn polygon_bounds(points: &[(f64, f64)]) -> Option<Rect> {
    if points.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in points {
        x0 = x0.min(*x);
        y0 = y0.min(*y);
        x1 = x1.max(*x);
        y1 = y1.max(*y);
    }
    let (x0, y0) = (x0.floor().max(0.0) as usize, y0.floor().max(0.0) as usize);
    let (x1, y1) = (x1.ceil().max(0.0) as usize, y1.ceil().max(0.0) as usize);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(Rect::new(x0, y0, x1 - x0, y1 - y0))
}

pub fn mask_pixel_counts(patch: &Patch) -> Result<(usize, usize)> {
    let mask = patch
        .mask
        .as_ref()
        .ok_or_else(|| Error::arg(format!("patch {} has no mask", patch.id)))?;
    let bud = mask.pixels().iter().filter(|b| **b).count();
    Ok((bud, mask.pixels().len() - bud))
}

/// Summed-area table over a mask: `table[(y)*(w+1)+x]` counts set pixels above and
/// left of `(x, y)`.
#[derive(Clone, Debug)]
pub struct MaskIntegral {
    width: usize,
    height: usize,
    table: Vec<u64>,
}

impl MaskIntegral {
    pub fn new(mask: &Mask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut table = vec![0u64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut run = 0u64;
            for x in 0..w {
                run += mask.get(x, y) as u64;
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + run;
            }
        }
        MaskIntegral {
            width: w,
            height: h,
            table,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn total(&self) -> u64 {
        self.table[self.table.len() - 1]
    }

    /// Set pixels inside `r`, which may extend past the mask (outside counts as unset).
    pub fn count(&self, x0: i64, y0: i64, w: i64, h: i64) -> u64 {
        let cx = |v: i64| v.clamp(0, self.width as i64) as usize;
        let cy = |v: i64| v.clamp(0, self.height as i64) as usize;
        let (ax, bx) = (cx(x0), cx(x0 + w));
        let (ay, by) = (cy(y0), cy(y0 + h));
        if ax >= bx || ay >= by {
            return 0;
        }
        let s = self.width + 1;
        self.table[by * s + bx] + self.table[ay * s + ax] - self.table[ay * s + bx] - self.table[by * s + ax]
    }
}

/// Grid scan of the region's bounding box at `step`, keeping `dims` rects whose every
/// pixel lies inside the polygon.
pub fn sample_region_patches(region: &[(f64, f64)], step: usize, dims: (usize, usize)) -> Result<Vec<Rect>> {
    if step < 1 || dims.0 < 1 || dims.1 < 1 {
        return Err(Error::arg("step and dimensions must be positive"));
    }
    let Some(bounds) = polygon_bounds(region) else {
        return Ok(Vec::new());
    };
    let (w, h) = dims;
    if bounds.w < w || bounds.h < h {
        return Ok(Vec::new());
    }
    let mask = rasterize_polygon(region, bounds)?;
    let integral = MaskIntegral::new(&mask);
    let area = (w * h) as u64;
    let mut out = Vec::new();
    let mut y = 0;
    while y + h <= bounds.h {
        let mut x = 0;
        while x + w <= bounds.w {
            if integral.count(x as i64, y as i64, w as i64, h as i64) == area {
                out.push(Rect::new(bounds.x + x, bounds.y + y, w, h));
            }
            x += step;
        }
        y += step;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// balancing and splits

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub rate: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Balanced<T> {
    pub bud: Vec<T>,
    pub non_bud: Vec<T>,
}

/// Undersamples non-buds without replacement and oversamples buds (each original
/// once, then uniform duplicates) to `rate * bud.len()` elements per class.
pub fn balance<T: Clone>(bud: &[T], non_bud: &[T], cfg: &BalanceConfig) -> Result<Balanced<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    balance_with(bud, non_bud, cfg.rate, &mut rng)
}

pub fn balance_with<T: Clone, R: Rng + ?Sized>(bud: &[T], non_bud: &[T], rate: usize, rng: &mut R) -> Result<Balanced<T>> {
    let target = balance_target(bud.len(), non_bud.len(), rate)?;
    let non_bud = undersample(non_bud, target, rng);
    let bud = oversample(bud, target, rng);
    Ok(Balanced { bud, non_bud })
}

/// As [`balance_with`], with separate random streams for the two classes so the
/// bud side can be held fixed while non-bud draws change.
pub fn balance_split<T: Clone, R: Rng + ?Sized, S: Rng + ?Sized>(
    bud: &[T],
    non_bud: &[T],
    rate: usize,
    bud_rng: &mut R,
    non_bud_rng: &mut S,
) -> Result<Balanced<T>> {
    let target = balance_target(bud.len(), non_bud.len(), rate)?;
    Ok(Balanced {
        bud: oversample(bud, target, bud_rng),
        non_bud: undersample(non_bud, target, non_bud_rng),
    })
}

fn balance_target(n_bud: usize, n_non_bud: usize, rate: usize) -> Result<usize> {
    if rate < 1 {
        return Err(Error::arg("balance rate must be at least 1"));
    }
    if n_bud == 0 {
        return Err(Error::arg("balancing needs at least one bud element"));
    }
    let target = rate.checked_mul(n_bud).ok_or_else(|| Error::arg("balance target overflows"))?;
    if n_non_bud < target {
        return Err(Error::arg(format!(
            "balance rate {rate} needs {target} non-bud elements, only {n_non_bud} available"
        )));
    }
    Ok(target)
}

fn undersample<T: Clone, R: Rng + ?Sized>(items: &[T], target: usize, rng: &mut R) -> Vec<T> {
    let mut picked = sample(rng, items.len(), target).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

fn oversample<T: Clone, R: Rng + ?Sized>(items: &[T], target: usize, rng: &mut R) -> Vec<T> {
    let mut out = items.to_vec();
    while out.len() < target {
        out.push(items[rng.random_range(0..items.len())].clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Uniform disjoint split of `patches` (by index) with `test_counts = (bud, non_bud)`
/// test elements.
pub fn split(patches: &[&Patch], seed: u64, test_counts: (usize, usize)) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for (label, want) in [(Label::Bud, test_counts.0), (Label::NonBud, test_counts.1)] {
        let members: Vec<usize> = (0..patches.len()).filter(|i| patches[*i].label == label).collect();
        if members.len() < want {
            return Err(Error::arg(format!(
                "split wants {want} {label} test patches, only {} available",
                members.len()
            )));
        }
        test.extend(sample(&mut rng, members.len(), want).into_iter().map(|k| members[k]));
    }
    test.sort_unstable();
    let in_test: HashSet<usize> = test.iter().copied().collect();
    let train = (0..patches.len()).filter(|i| !in_test.contains(i)).collect();
    Ok(Split { train, test })
}

// ---------------------------------------------------------------------------
// image access

/// Source of grayscale images by corpus image id.
pub trait ImageStore<T: Scalar>: Sync {
    fn gray(&self, image_id: &str) -> Result<Arc<GrayImage<T>>>;
}

/// Loads images from a corpus root on demand, keeping a bounded number decoded.
pub struct DiskImageStore<T> {
    root: PathBuf,
    paths: HashMap<String, String>,
    cache: Mutex<Vec<(String, Arc<GrayImage<T>>)>>,
    capacity: usize,
}

impl<T: Scalar> DiskImageStore<T> {
    pub fn new(root: &Path, corpus: &Corpus, capacity: usize) -> Self {
        DiskImageStore {
            root: root.to_path_buf(),
            paths: corpus.images.iter().map(|i| (i.id.clone(), i.path.clone())).collect(),
            cache: Mutex::new(Vec::new()),
            capacity: capacity.max(1),
        }
    }
}

impl<T: Scalar> ImageStore<T> for DiskImageStore<T> {
    fn gray(&self, image_id: &str) -> Result<Arc<GrayImage<T>>> {
        {
            let mut cache = self.cache.lock().unwrap();
            if let Some(pos) = cache.iter().position(|(id, _)| id == image_id) {
                let entry = cache.remove(pos);
                let img = entry.1.clone();
                cache.push(entry);
                return Ok(img);
            }
        }
        let rel = self
            .paths
            .get(image_id)
            .ok_or_else(|| Error::arg(format!("unknown image {image_id:?}")))?;
        let img = Arc::new(to_grayscale::<T>(&read_image(&self.root.join(rel))?));
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= self.capacity {
            cache.remove(0);
        }
        cache.push((image_id.to_string(), img.clone()));
        Ok(img)
    }
}

#[derive(Default)]
pub struct MemoryImageStore<T> {
    images: HashMap<String, Arc<GrayImage<T>>>,
}

impl<T: Scalar> MemoryImageStore<T> {
    pub fn new() -> Self {
        MemoryImageStore { images: HashMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, img: GrayImage<T>) {
        self.images.insert(id.into(), Arc::new(img));
    }
}

impl<T: Scalar> ImageStore<T> for MemoryImageStore<T> {
    fn gray(&self, image_id: &str) -> Result<Arc<GrayImage<T>>> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::arg(format!("unknown image {image_id:?}")))
    }
}
