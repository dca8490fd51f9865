//! Evaluation protocol: confusion counts and metrics, stratified grid-search
//! tuning, repeated training statistics, per-subcategory non-bud recall and the
//! realistic-patch perturbation heatmap.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{balance_split, ImageStore, Label, MaskIntegral, Patch, SubcategoryTag};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Rect};
use crate::pipeline::{patch_descriptors, Classifier};
use crate::scalar::{mean_and_sd, Scalar};
use crate::svm::{train, SvmConfig, SvmModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Bud is the positive class.
pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Bud, Label::Bud) => c.tp += 1,
            (Label::NonBud, Label::NonBud) => c.tn += 1,
            (Label::Bud, Label::NonBud) => c.fp += 1,
            (Label::NonBud, Label::Bud) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// Set when the quantity had a zero denominator and was reported as 0.
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub f_degenerate: bool,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "precision", "recall", "f_measure"];

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f_measure]
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::arg("metrics of an empty confusion table"));
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_degenerate) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_degenerate) = ratio(c.tp, c.tp + c.fn_);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f_measure: f_measure(precision, recall),
        precision_degenerate,
        recall_degenerate,
        f_degenerate: precision + recall == 0.0,
    })
}

// ---------------------------------------------------------------------------
// grid search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub gammas: Vec<f64>,
    pub cs: Vec<f64>,
    pub folds: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            gammas: (-14..=-7).map(|e| 2f64.powi(e)).collect(),
            cs: (5..=14).map(|e| 2f64.powi(e)).collect(),
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub gamma: f64,
    pub c: f64,
    /// Mean over folds of `1 - f_measure` on the validation fold.
    pub mean_error: f64,
    pub fold_errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_gamma: f64,
    pub best_c: f64,
    pub best_error: f64,
    /// Gamma-major, in grid order.
    pub table: Vec<GridPoint>,
}

/// Fold index per element; each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n_bud = labels.iter().filter(|l| **l == Label::Bud).count();
    let min_class = n_bud.min(labels.len() - n_bud);
    if folds < 2 || folds > min_class {
        return Err(Error::arg(format!(
            "{folds} folds need 2 <= folds <= smallest class size ({min_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0; labels.len()];
    for class in [Label::Bud, Label::NonBud] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == class).collect();
        shuffle(&mut members, &mut rng);
        for (k, i) in members.into_iter().enumerate() {
            out[i] = k % folds;
        }
    }
    Ok(out)
}

fn shuffle<T, R: Rng + ?Sized>(v: &mut [T], rng: &mut R) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Derives independent stream seeds from a base seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Balanced training vectors for one fold (or any index subset).
fn balanced_training<T: Clone>(xs: &[Vec<T>], labels: &[Label], idx: &[usize], rate: usize, seed: u64) -> Result<(Vec<Vec<T>>, Vec<Label>)> {
    let bud: Vec<usize> = idx.iter().copied().filter(|i| labels[*i] == Label::Bud).collect();
    let non: Vec<usize> = idx.iter().copied().filter(|i| labels[*i] == Label::NonBud).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = crate::corpus::balance_with(&bud, &non, rate, &mut rng)?;
    Ok(assemble(xs, &b.bud, &b.non_bud))
}

fn assemble<T: Clone>(xs: &[Vec<T>], bud: &[usize], non: &[usize]) -> (Vec<Vec<T>>, Vec<Label>) {
    let mut x = Vec::with_capacity(bud.len() + non.len());
    let mut y = Vec::with_capacity(bud.len() + non.len());
    for i in bud {
        x.push(xs[*i].clone());
        y.push(Label::Bud);
    }
    for i in non {
        x.push(xs[*i].clone());
        y.push(Label::NonBud);
    }
    (x, y)
}

fn predict_all<T: Scalar>(model: &SvmModel<T>, xs: &[&Vec<T>]) -> Result<Vec<Label>> {
    xs.iter().map(|x| model.predict(x)).collect()
}

/// Stratified k-fold search over the grid. Each training fold is balanced at
/// `balance_rate` (validation folds are left as drawn); the score is the mean of
/// `1 - f_measure`. Ties prefer smaller C, then smaller gamma.
pub fn cross_validate_grid<T: Scalar>(
    xs: &[Vec<T>],
    labels: &[Label],
    grid: &TuningGrid,
    balance_rate: usize,
    seed: u64,
    base: &SvmConfig,
) -> Result<GridResult> {
    if xs.len() != labels.len() {
        return Err(Error::arg("histogram and label counts differ"));
    }
    if grid.gammas.is_empty() || grid.cs.is_empty() {
        return Err(Error::arg("tuning grid must not be empty"));
    }
    let folds = stratified_folds(labels, grid.folds, seed)?;
    let fold_sets: Vec<(Vec<Vec<T>>, Vec<Label>, Vec<usize>)> = (0..grid.folds)
        .map(|f| {
            let train_idx: Vec<usize> = (0..xs.len()).filter(|i| folds[*i] != f).collect();
            let val_idx: Vec<usize> = (0..xs.len()).filter(|i| folds[*i] == f).collect();
            let (x, y) = balanced_training(xs, labels, &train_idx, balance_rate, derive_seed(seed, &[1, f as u64]))?;
            Ok((x, y, val_idx))
        })
        .collect::<Result<_>>()?;

    let points: Vec<(f64, f64)> = grid.gammas.iter().flat_map(|g| grid.cs.iter().map(move |c| (*g, *c))).collect();
    let table = points
        .par_iter()
        .map(|(gamma, c)| {
            let mut cfg = base.clone();
            cfg.gamma = *gamma;
            cfg.c = *c;
            let fold_errors = fold_sets
                .iter()
                .map(|(x, y, val)| {
                    let model = train(x, y, &cfg)?;
                    let vx: Vec<&Vec<T>> = val.iter().map(|i| &xs[*i]).collect();
                    let truth: Vec<Label> = val.iter().map(|i| labels[*i]).collect();
                    let m = metrics(&confusion(&predict_all(&model, &vx)?, &truth)?)?;
                    Ok(1.0 - m.f_measure)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean_error = fold_errors.iter().sum::<f64>() / fold_errors.len() as f64;
            Ok(GridPoint {
                gamma: *gamma,
                c: *c,
                mean_error,
                fold_errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = table
        .iter()
        .min_by(|a, b| {
            a.mean_error
                .total_cmp(&b.mean_error)
                .then(a.c.total_cmp(&b.c))
                .then(a.gamma.total_cmp(&b.gamma))
        })
        .expect("non-empty grid");
    Ok(GridResult {
        best_gamma: best.gamma,
        best_c: best.c,
        best_error: best.mean_error,
        table,
    })
}

// ---------------------------------------------------------------------------
// repeated training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedConfig {
    pub balance_rate: usize,
    /// One non-bud undersampling seed per repetition.
    pub seeds: Vec<u64>,
    /// Seed of the bud oversampling draw, shared by all repetitions.
    pub bud_seed: u64,
    pub svm: SvmConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug)]
pub struct RepeatedResult<T> {
    pub runs: Vec<Metrics>,
    /// One row per metric, in [`Metrics::NAMES`] order.
    pub summary: Vec<MetricSummary>,
    pub models: Vec<SvmModel<T>>,
}

pub fn summarize(runs: &[Metrics]) -> Vec<MetricSummary> {
    Metrics::NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = runs.iter().map(|m| m.values()[k]).collect();
            let (mean, sd) = mean_and_sd(&vals);
            MetricSummary {
                metric: name.to_string(),
                mean,
                sd,
            }
        })
        .collect()
}

/// Trains one classifier per seed on a freshly undersampled non-bud set (the bud
/// side is the same in every repetition) and evaluates each on the fixed test set.
pub fn repeated_training<T: Scalar>(
    train_x: &[Vec<T>],
    train_y: &[Label],
    test_x: &[Vec<T>],
    test_y: &[Label],
    cfg: &RepeatedConfig,
) -> Result<RepeatedResult<T>> {
    if cfg.seeds.len() < 2 {
        return Err(Error::arg("repeated training needs at least 2 repetitions"));
    }
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::arg("vector and label counts differ"));
    }
    let bud: Vec<usize> = (0..train_y.len()).filter(|i| train_y[*i] == Label::Bud).collect();
    let non: Vec<usize> = (0..train_y.len()).filter(|i| train_y[*i] == Label::NonBud).collect();
    let test_refs: Vec<&Vec<T>> = test_x.iter().collect();
    let results = cfg
        .seeds
        .par_iter()
        .map(|seed| {
            let mut bud_rng = ChaCha8Rng::seed_from_u64(cfg.bud_seed);
            let mut non_rng = ChaCha8Rng::seed_from_u64(*seed);
            let b = balance_split(&bud, &non, cfg.balance_rate, &mut bud_rng, &mut non_rng)?;
            let (x, y) = assemble(train_x, &b.bud, &b.non_bud);
            let model = train(&x, &y, &cfg.svm)?;
            let m = metrics(&confusion(&predict_all(&model, &test_refs)?, test_y)?)?;
            Ok((m, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let (runs, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RepeatedResult {
        summary: summarize(&runs),
        runs,
        models,
    })
}

// ---------------------------------------------------------------------------
// subcategory recall

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagRecall {
    pub tn: usize,
    pub fp: usize,
    pub recall: f64,
}

/// `tn / (tn + fp)` per tag over non-bud predictions.
pub fn subcategory_recall(items: &[(Option<SubcategoryTag>, Label)]) -> Result<BTreeMap<SubcategoryTag, TagRecall>> {
    let mut counts: BTreeMap<SubcategoryTag, (usize, usize)> = BTreeMap::new();
    for (i, (tag, predicted)) in items.iter().enumerate() {
        let tag = tag.ok_or_else(|| Error::arg(format!("non-bud test item {i} has no subcategory tag")))?;
        let e = counts.entry(tag).or_default();
        match predicted {
            Label::NonBud => e.0 += 1,
            Label::Bud => e.1 += 1,
        }
    }
    Ok(counts
        .into_iter()
        .map(|(tag, (tn, fp))| {
            (
                tag,
                TagRecall {
                    tn,
                    fp,
                    recall: tn as f64 / (tn + fp) as f64,
                },
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// realistic patches

pub const GRID_CELLS: usize = 10;

/// One cell of the 10x10 (kept, relative) partition; index `i` covers the
/// half-open percentage range `(10 i, 10 (i + 1)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PerturbationCell {
    pub kept: usize,
    pub relative: usize,
}

impl PerturbationCell {
    pub fn new(kept: usize, relative: usize) -> Result<Self> {
        if kept >= GRID_CELLS || relative >= GRID_CELLS {
            return Err(Error::arg(format!("cell ({kept}, {relative}) outside the 10x10 grid")));
        }
        Ok(PerturbationCell { kept, relative })
    }

    pub fn kept_range(&self) -> (usize, usize) {
        (self.kept * 10, self.kept * 10 + 10)
    }

    pub fn relative_range(&self) -> (usize, usize) {
        (self.relative * 10, self.relative * 10 + 10)
    }

    pub fn all() -> impl Iterator<Item = PerturbationCell> {
        (0..GRID_CELLS).flat_map(|k| (0..GRID_CELLS).map(move |r| PerturbationCell { kept: k, relative: r }))
    }
}

/// Index of the `(lo, hi]` decile holding `100 * num / den` percent, or `None` for 0.
pub fn decile(num: u64, den: u64) -> Option<usize> {
    if num == 0 || den == 0 {
        return None;
    }
    // ceil(10 num / den) - 1, exact in integers
    Some(((10 * num).div_ceil(den) - 1) as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealisticPatch {
    pub source_id: String,
    pub rect: Rect,
    pub bud_inside: u64,
    pub bud_total: u64,
    /// Percent of the source bud's pixels inside `rect`.
    pub kept: f64,
    /// Percent of `rect` covered by bud pixels.
    pub relative: f64,
}

impl RealisticPatch {
    pub fn cell(&self) -> Option<PerturbationCell> {
        Some(PerturbationCell {
            kept: decile(self.bud_inside, self.bud_total)?,
            relative: decile(self.bud_inside, self.rect.area() as u64)?,
        })
    }
}

/// A bud patch prepared for perturbation inside its source image.
#[derive(Clone, Debug)]
pub struct BudSource<'a> {
    pub patch: &'a Patch,
    pub image_width: usize,
    pub image_height: usize,
    integral: MaskIntegral,
}

impl<'a> BudSource<'a> {
    pub fn new(patch: &'a Patch, image_width: usize, image_height: usize) -> Result<Self> {
        let mask = patch
            .mask
            .as_ref()
            .ok_or_else(|| Error::arg(format!("patch {} has no mask", patch.id)))?;
        let integral = MaskIntegral::new(mask);
        if integral.total() == 0 {
            return Err(Error::arg(format!("patch {} mask has no bud pixels", patch.id)));
        }
        if !patch.rect.fits_in(image_width, image_height) {
            return Err(Error::arg(format!("patch {} outside its image", patch.id)));
        }
        Ok(BudSource {
            patch,
            image_width,
            image_height,
            integral,
        })
    }

    pub fn bud_total(&self) -> u64 {
        self.integral.total()
    }

    /// Bud pixels of this source inside an image-frame rect.
    pub fn bud_inside(&self, rect: Rect) -> u64 {
        let r = self.patch.rect;
        self.integral.count(
            rect.x as i64 - r.x as i64,
            rect.y as i64 - r.y as i64,
            rect.w as i64,
            rect.h as i64,
        )
    }

    pub fn measure(&self, rect: Rect) -> RealisticPatch {
        let inside = self.bud_inside(rect);
        let total = self.bud_total();
        RealisticPatch {
            source_id: self.patch.id.clone(),
            rect,
            bud_inside: inside,
            bud_total: total,
            kept: 100.0 * inside as f64 / total as f64,
            relative: 100.0 * inside as f64 / rect.area() as f64,
        }
    }

    fn place(&self, cx: f64, cy: f64, w: usize, h: usize) -> Rect {
        let x = (cx - w as f64 / 2.0).round().clamp(0.0, (self.image_width - w) as f64) as usize;
        let y = (cy - h as f64 / 2.0).round().clamp(0.0, (self.image_height - h) as f64) as usize;
        Rect::new(x, y, w, h)
    }
}

/// Random rescale and shift of the bud's rect until the measured (kept, relative)
/// lands in `target`. Each attempt draws a goal inside the cell, sizes the window
/// so that goal is consistent, and slides it along a random direction to the
/// offset that keeps the goal fraction; the exact recount decides acceptance.
pub fn generate_realistic_patch<R: Rng + ?Sized>(
    src: &BudSource<'_>,
    target: PerturbationCell,
    rng: &mut R,
    max_attempts: usize,
) -> Option<RealisticPatch> {
    let total = src.bud_total() as f64;
    let r = src.patch.rect;
    let (cx0, cy0) = (r.x as f64 + r.w as f64 / 2.0, r.y as f64 + r.h as f64 / 2.0);
    let aspect0 = r.w as f64 / r.h as f64;
    let (klo, khi) = target.kept_range();
    let (rlo, rhi) = target.relative_range();
    for _ in 0..max_attempts {
        let kept = rng.random_range(klo as f64..khi as f64).max(klo as f64 + 1e-3) / 100.0;
        let rel = rng.random_range(rlo as f64..rhi as f64).max(rlo as f64 + 1e-3) / 100.0;
        let area = kept * total / rel;
        let aspect = aspect0 * rng.random_range(-0.4f64..0.4).exp();
        let w = ((area * aspect).sqrt().round() as usize).clamp(1, src.image_width);
        let h = ((area / w as f64).round() as usize).clamp(1, src.image_height);
        let goal = (kept * total).ceil() as u64;
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (theta.cos(), theta.sin());
        let at = |t: f64| src.place(cx0 + t * dx, cy0 + t * dy, w, h);
        let rect = if src.bud_inside(at(0.0)) < goal {
            at(0.0)
        } else {
            // largest shift that still keeps the goal count
            let (mut lo, mut hi) = (0.0, (r.w + r.h + w + h) as f64);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if src.bud_inside(at(mid)) >= goal {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            at(lo)
        };
        let p = src.measure(rect);
        if p.cell() == Some(target) {
            return Some(p);
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapConfig {
    pub per_cell: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig {
            per_cell: 4,
            max_attempts: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub cell: PerturbationCell,
    pub count: usize,
    /// Mean over models of the fraction of the cell's patches classified as bud.
    pub mean_recall: Option<f64>,
    pub discarded: bool,
    /// Generated patches, empty for discarded cells.
    pub patches: Vec<RealisticPatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    /// Kept-major: index `kept * 10 + relative`.
    pub cells: Vec<HeatmapCell>,
    pub per_cell: usize,
    pub buds: usize,
    pub models: usize,
}

impl Heatmap {
    pub fn cell(&self, c: PerturbationCell) -> &HeatmapCell {
        &self.cells[c.kept * GRID_CELLS + c.relative]
    }

    pub fn populated(&self) -> usize {
        self.cells.iter().filter(|c| !c.discarded).count()
    }

    /// Mean of the populated cells' recalls whose kept index is in `kept`.
    pub fn band_mean(&self, kept: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| kept.contains(&c.cell.kept))
            .filter_map(|c| c.mean_recall)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean recall over populated cells with kept in `kept` and relative in `relative`.
    pub fn block_mean(&self, kept: std::ops::Range<usize>, relative: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| kept.contains(&c.cell.kept) && relative.contains(&c.cell.relative))
            .filter_map(|c| c.mean_recall)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Grayscale rendering (`cell_px` square per cell, kept increasing upwards,
    /// relative increasing to the right); discarded cells are black.
    pub fn render(&self, cell_px: usize) -> GrayImage<f64> {
        let side = cell_px * GRID_CELLS;
        GrayImage::from_fn(side, side, |x, y| {
            let rel = x / cell_px;
            let kept = GRID_CELLS - 1 - y / cell_px;
            self.cells[kept * GRID_CELLS + rel].mean_recall.unwrap_or(0.0)
        })
    }
}

/// Generates every cell's patches for all buds (stopping a cell at its first
/// failure), extracts each patch once, and scores it with every classifier.
pub fn heatmap_experiment<T: Scalar>(
    classifiers: &[Classifier<T>],
    buds: &[&Patch],
    store: &dyn ImageStore<T>,
    cfg: &HeatmapConfig,
) -> Result<Heatmap> {
    if classifiers.is_empty() {
        return Err(Error::arg("heatmap needs at least one trained model"));
    }
    let sift = &classifiers[0].sift;
    if classifiers.iter().any(|c| c.sift != *sift) {
        return Err(Error::arg("heatmap classifiers must share their extraction settings"));
    }
    let images: Vec<_> = buds.iter().map(|p| store.gray(&p.source_image)).collect::<Result<_>>()?;
    let sources: Vec<BudSource> = buds
        .iter()
        .zip(&images)
        .map(|(p, img)| BudSource::new(p, img.width(), img.height()))
        .collect::<Result<_>>()?;

    let generated: Vec<(PerturbationCell, Option<Vec<(usize, RealisticPatch)>>)> = PerturbationCell::all()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|cell| {
            let mut out = Vec::new();
            for (b, src) in sources.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[b as u64, cell.kept as u64, cell.relative as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..cfg.per_cell {
                    match generate_realistic_patch(src, *cell, &mut rng, cfg.max_attempts) {
                        Some(p) => out.push((b, p)),
                        None => return (*cell, None),
                    }
                }
            }
            (*cell, Some(out))
        })
        .collect();

    let jobs: Vec<(usize, usize, Rect)> = generated
        .iter()
        .enumerate()
        .filter_map(|(ci, (_, v))| v.as_ref().map(|v| (ci, v)))
        .flat_map(|(ci, v)| v.iter().map(move |(b, p)| (ci, *b, p.rect)))
        .collect();
    let scored: Vec<(usize, Vec<bool>)> = jobs
        .par_iter()
        .map(|(ci, b, rect)| {
            let descs = patch_descriptors(&images[*b], *rect, sift)?;
            let hits = classifiers
                .iter()
                .map(|c| Ok(c.classify_descriptors(&descs)?.label == Label::Bud))
                .collect::<Result<Vec<bool>>>()?;
            Ok((*ci, hits))
        })
        .collect::<Result<_>>()?;

    let mut hits = vec![vec![0usize; classifiers.len()]; generated.len()];
    let mut counts = vec![0usize; generated.len()];
    for (ci, h) in scored {
        counts[ci] += 1;
        for (m, hit) in h.iter().enumerate() {
            hits[ci][m] += *hit as usize;
        }
    }
    let cells = generated
        .iter()
        .enumerate()
        .map(|(ci, (cell, v))| {
            let discarded = v.is_none() || buds.is_empty();
            let mean_recall = (!discarded).then(|| {
                hits[ci].iter().map(|h| *h as f64 / counts[ci] as f64).sum::<f64>() / classifiers.len() as f64
            });
            HeatmapCell {
                cell: *cell,
                count: counts[ci],
                mean_recall,
                discarded,
                patches: v.iter().flatten().map(|(_, p)| p.clone()).collect(),
            }
        })
        .collect();
    Ok(Heatmap {
        cells,
        per_cell: cfg.per_cell,
        buds: buds.len(),
        models: classifiers.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Raster;
    use Label::{Bud, NonBud};

    #[test]
    fn confusion_examples() {
        let truth = [Bud, Bud, NonBud, NonBud];
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 2, 0, 0));
        let c = confusion(&[Bud; 4], &truth).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (2, 0, 2, 0));
        assert!(confusion(&[Bud], &truth).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionCounts { tp: 2, tn: 2, fp: 0, fn_: 0 }).unwrap();
        assert_eq!(m.values(), [1.0; 4]);
        let m = metrics(&ConfusionCounts { tp: 0, tn: 0, fp: 0, fn_: 4 }).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
        assert!(m.precision_degenerate && !m.recall_degenerate && m.f_degenerate);
        assert!(metrics(&ConfusionCounts::default()).is_err());
        assert!((f_measure(0.867, 0.965) - 0.913).abs() <= 1e-3);
    }

    #[test]
    fn default_grid_has_80_points() {
        let g = TuningGrid::default();
        assert_eq!(g.gammas.len() * g.cs.len(), 80);
        assert_eq!(g.gammas[0], 2f64.powi(-14));
        assert_eq!(*g.cs.last().unwrap(), 16384.0);
    }

    #[test]
    fn subcategory_recall_examples() {
        let t = Some(SubcategoryTag::Knot);
        let r = subcategory_recall(&[(t, NonBud), (t, NonBud), (t, NonBud), (t, Bud)]).unwrap();
        assert_eq!(r[&SubcategoryTag::Knot].recall, 0.75);
        let r = subcategory_recall(&[(Some(SubcategoryTag::Wire), NonBud)]).unwrap();
        assert_eq!(r[&SubcategoryTag::Wire].recall, 1.0);
        assert!(subcategory_recall(&[(None, NonBud)]).is_err());
    }

    #[test]
    fn deciles_are_half_open() {
        assert_eq!(decile(0, 10), None);
        assert_eq!(decile(1, 10), Some(0));
        assert_eq!(decile(2, 10), Some(1));
        assert_eq!(decile(10, 10), Some(9));
        assert_eq!(decile(101, 1000), Some(1));
        assert_eq!(decile(100, 1000), Some(0));
    }

    fn disc_patch() -> Patch {
        // 100x100 rect, disc radius 50: about 78.5% bud pixels
        Patch {
            id: "b".into(),
            source_image: "img".into(),
            rect: Rect::new(150, 150, 100, 100),
            label: Bud,
            mask: Some(Raster::from_fn(100, 100, |x, y| {
                let (dx, dy) = (x as f64 + 0.5 - 50.0, y as f64 + 0.5 - 50.0);
                dx * dx + dy * dy <= 2500.0
            })),
            subcategory: None,
            quality: Default::default(),
        }
    }

    #[test]
    fn identity_rect_measures_mask_fraction() {
        let p = disc_patch();
        let src = BudSource::new(&p, 400, 400).unwrap();
        let m = src.measure(p.rect);
        assert_eq!(m.kept, 100.0);
        let (bud, _) = crate::corpus::mask_pixel_counts(&p).unwrap();
        assert_eq!(m.relative, 100.0 * bud as f64 / 10_000.0);
    }

    fn diagonal_ellipse_patch() -> Patch {
        // ellipse with semi-axes 70 and 30 rotated by 45 degrees
        let (c, s) = (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);
        let mut p = disc_patch();
        p.mask = Some(Raster::from_fn(100, 100, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - 50.0, y as f64 + 0.5 - 50.0);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            (u / 49.0).powi(2) + (v / 21.0).powi(2) <= 1.0
        }));
        p
    }

    /// Best relative coverage over every window that keeps more than 90% of the bud.
    fn best_relative_at_high_kept(src: &BudSource<'_>) -> f64 {
        let r = src.patch.rect;
        let total = src.bud_total();
        let mut best = 0.0f64;
        for x0 in 0..r.w {
            for x1 in x0 + 1..=r.w {
                for y0 in 0..r.h {
                    for y1 in y0 + 1..=r.h {
                        let rect = Rect::new(r.x + x0, r.y + y0, x1 - x0, y1 - y0);
                        let inside = src.bud_inside(rect);
                        if 10 * inside > 9 * total {
                            best = best.max(inside as f64 / rect.area() as f64);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn generator_hits_cells_and_misses_impossible_one() {
        let p = diagonal_ellipse_patch();
        let src = BudSource::new(&p, 400, 400).unwrap();
        assert!(best_relative_at_high_kept(&src) <= 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let top = PerturbationCell::new(9, 9).unwrap();
        assert!(generate_realistic_patch(&src, top, &mut rng, 200).is_none());
        for cell in [(9, 3), (5, 5), (0, 0), (2, 9)] {
            let cell = PerturbationCell::new(cell.0, cell.1).unwrap();
            let got = generate_realistic_patch(&src, cell, &mut rng, 200).expect("reachable cell");
            assert_eq!(got.cell(), Some(cell));
            assert!(got.rect.fits_in(400, 400));
        }
    }

    #[test]
    fn top_cell_is_reachable_for_a_disc() {
        // a centred 89 px square keeps ~91.4% of the disc at ~90.6% coverage
        let p = disc_patch();
        let src = BudSource::new(&p, 400, 400).unwrap();
        let m = src.measure(Rect::new(156, 156, 89, 89));
        assert_eq!(m.cell(), Some(PerturbationCell::new(9, 9).unwrap()));
    }
}
