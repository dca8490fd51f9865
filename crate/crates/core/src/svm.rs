//! Soft-margin binary SVM with an RBF kernel.
//!
//! Training solves the C-SVC dual with pairwise working-set steps (maximal
//! violating pair, second-order choice of the partner) until the KKT gap is
//! below `kkt_tolerance`.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

const MODEL_MAGIC: &[u8; 8] = b"VBUDSVM\0";
const MODEL_VERSION: u32 = 1;
const ALPHA_KEEP: f64 = 1e-12;
const TAU: f64 = 1e-12;
const PAR_ROW_MIN: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub c: f64,
    pub gamma: f64,
    pub kkt_tolerance: f64,
    /// Solver step cap; `None` means `max(10^7, 100·n)`.
    pub max_passes: Option<usize>,
    /// Unused by the deterministic solver, kept for run records.
    pub seed: u64,
    pub cache_bytes: usize,
}

impl SvmConfig {
    pub fn new(c: f64, gamma: f64) -> Self {
        SvmConfig {
            c,
            gamma,
            kkt_tolerance: 1e-3,
            max_passes: None,
            seed: 0,
            cache_bytes: 64 << 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::arg(format!("SVM C must be positive, got {}", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::arg(format!("SVM gamma must be positive, got {}", self.gamma)));
        }
        if !(self.kkt_tolerance > 0.0) {
            return Err(Error::arg("SVM kkt_tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel<T> {
    pub support_vectors: Vec<Vec<T>>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coefs: Vec<T>,
    pub bias: T,
    pub gamma: T,
    pub c: f64,
}

/// Solver diagnostics, including the full dual solution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub alphas: Vec<f64>,
    pub iterations: usize,
    /// Final `m(alpha) - M(alpha)` gap.
    pub violation: f64,
    /// Dual objective after every step when requested.
    pub objective_trace: Vec<f64>,
}

pub fn rbf_kernel<T: Scalar>(x: &[T], y: &[T], gamma: T) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::arg(format!("kernel dimension mismatch: {} vs {}", x.len(), y.len())));
    }
    Ok((-gamma * squared_distance(x, y)).exp())
}

struct KernelCache<'a> {
    xs: &'a [Vec<f64>],
    gamma: f64,
    rows: HashMap<usize, (Rc<Vec<f64>>, u64)>,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    fn new(xs: &'a [Vec<f64>], gamma: f64, budget: usize) -> Self {
        let row_bytes = xs.len().max(1) * std::mem::size_of::<f64>();
        KernelCache {
            xs,
            gamma,
            rows: HashMap::new(),
            capacity: (budget / row_bytes).max(2),
            clock: 0,
        }
    }

    fn compute(&self, i: usize) -> Vec<f64> {
        let (xs, gamma) = (self.xs, self.gamma);
        let xi = &xs[i];
        let k = |x: &Vec<f64>| (-gamma * squared_distance(xi, x)).exp();
        if self.xs.len() >= PAR_ROW_MIN {
            xs.par_iter().map(k).collect()
        } else {
            xs.iter().map(k).collect()
        }
    }

    fn row(&mut self, i: usize) -> Rc<Vec<f64>> {
        self.clock += 1;
        if let Some(entry) = self.rows.get_mut(&i) {
            entry.1 = self.clock;
            return entry.0.clone();
        }
        if self.rows.len() >= self.capacity {
            let oldest = *self.rows.iter().min_by_key(|(_, (_, t))| *t).unwrap().0;
            self.rows.remove(&oldest);
        }
        let row = Rc::new(self.compute(i));
        self.rows.insert(i, (row.clone(), self.clock));
        row
    }
}

pub fn train<T: Scalar, P: AsRef<[T]>>(xs: &[P], labels: &[Label], cfg: &SvmConfig) -> Result<SvmModel<T>> {
    Ok(train_with_report(xs, labels, cfg, false)?.0)
}

/// Trains and returns the full dual solution; `trace` records the dual objective
/// after every step (costs O(n) per step).
pub fn train_with_report<T: Scalar, P: AsRef<[T]>>(
    xs: &[P],
    labels: &[Label],
    cfg: &SvmConfig,
    trace: bool,
) -> Result<(SvmModel<T>, TrainReport)> {
    cfg.validate()?;
    if xs.len() != labels.len() {
        return Err(Error::arg(format!("{} vectors but {} labels", xs.len(), labels.len())));
    }
    let n = xs.len();
    let dim = xs.first().map_or(0, |x| x.as_ref().len());
    if dim == 0 || xs.iter().any(|x| x.as_ref().len() != dim) {
        return Err(Error::arg("training vectors must share a positive dimension"));
    }
    let pos = labels.iter().filter(|l| **l == Label::Bud).count();
    if pos == 0 || pos == n {
        return Err(Error::arg("training data must contain both classes"));
    }

    let data: Vec<Vec<f64>> = xs.iter().map(|x| x.as_ref().iter().map(|v| v.to_f64_lossy()).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|l| l.sign()).collect();
    let c = cfg.c;
    let eps = cfg.kkt_tolerance;
    let max_iter = cfg.max_passes.unwrap_or_else(|| 10_000_000usize.max(100 * n));
    let mut cache = KernelCache::new(&data, cfg.gamma, cfg.cache_bytes);

    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut objective_trace = Vec::new();
    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut iterations = 0;
    let violation = loop {
        // i: maximal -y G over the up set
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j = usize::MAX;
        let mut best_gain = f64::INFINITY;
        let ki = if i != usize::MAX { Some(cache.row(i)) } else { None };
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if let Some(ki) = &ki {
                let b = gmax - v;
                if b > 0.0 {
                    let a = (2.0 - 2.0 * ki[t]).max(TAU);
                    let gain = -(b * b) / a;
                    if gain < best_gain {
                        best_gain = gain;
                        j = t;
                    }
                }
            }
        }
        let gap = gmax - gmin;
        if gap < eps || j == usize::MAX {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::Training {
                iterations,
                violation: gap,
            });
        }
        iterations += 1;

        let ki = ki.unwrap();
        let kj = cache.row(j);
        let (yi, yj) = (y[i], y[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (2.0 - 2.0 * ki[j]).max(TAU);
        if yi != yj {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..n {
            grad[t] += y[t] * (yi * ki[t] * di + yj * kj[t] * dj);
        }
        if trace {
            objective_trace.push(dual_objective(&alpha, &grad));
        }
    };

    // bias from the free vectors, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_sum += yg;
            free_n += 1;
        }
    }
    let rho = if free_n > 0 { free_sum / free_n as f64 } else { (ub + lb) / 2.0 };

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    for t in 0..n {
        if alpha[t] > ALPHA_KEEP {
            support_vectors.push(xs[t].as_ref().to_vec());
            dual_coefs.push(T::lit(alpha[t] * y[t]));
        }
    }
    let model = SvmModel {
        support_vectors,
        dual_coefs,
        bias: T::lit(-rho),
        gamma: T::lit(cfg.gamma),
        c,
    };
    log::debug!("svm: n={n} steps={iterations} gap={violation:.3e} sv={}", model.support_vectors.len());
    Ok((
        model,
        TrainReport {
            alphas: alpha,
            iterations,
            violation,
            objective_trace,
        },
    ))
}

/// `sum(alpha) - 1/2 alpha^T Q alpha`, using `G = Q alpha - 1`.
fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

impl<T: Scalar> SvmModel<T> {
    pub fn dim(&self) -> usize {
        self.support_vectors.first().map_or(0, |s| s.len())
    }

    pub fn decision_value(&self, x: &[T]) -> Result<T> {
        if !self.support_vectors.is_empty() && x.len() != self.dim() {
            return Err(Error::arg(format!(
                "input dimension {} does not match model dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let mut acc = T::zero();
        for (sv, coef) in self.support_vectors.iter().zip(&self.dual_coefs) {
            acc = acc + *coef * (-self.gamma * squared_distance(sv, x)).exp();
        }
        Ok(acc + self.bias)
    }

    pub fn predict(&self, x: &[T]) -> Result<Label> {
        Ok(label_for_decision(self.decision_value(x)?))
    }
}

/// Positive decision values are buds; zero goes to non-bud.
pub fn label_for_decision<T: Scalar>(d: T) -> Label {
    if d > T::zero() {
        Label::Bud
    } else {
        Label::NonBud
    }
}

pub fn model_to_bytes<T: Scalar>(model: &SvmModel<T>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.f64(model.gamma.to_f64_lossy());
    w.f64(model.bias.to_f64_lossy());
    w.f64(model.c);
    // class map: positive, negative
    w.u8(Label::Bud.code());
    w.u8(Label::NonBud.code());
    w.u32(model.support_vectors.len() as u32);
    w.u32(model.dim() as u32);
    for c in &model.dual_coefs {
        w.f64(c.to_f64_lossy());
    }
    for sv in &model.support_vectors {
        for v in sv {
            w.f64(v.to_f64_lossy());
        }
    }
    w.finish()
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<SvmModel<T>> {
    let mut r = Reader::new(bytes, "svm model");
    r.expect_magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("svm model: unsupported version {version}")));
    }
    let gamma = r.f64()?;
    let bias = r.f64()?;
    let c = r.f64()?;
    let (pos, neg) = (r.u8()?, r.u8()?);
    if pos != Label::Bud.code() || neg != Label::NonBud.code() {
        return Err(Error::Format(format!("svm model: unknown class map ({pos}, {neg})")));
    }
    let n_sv = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let body = n_sv
        .checked_mul(dim + 1)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("svm model: header sizes overflow".into()))?;
    if r.remaining() != body {
        return Err(Error::Format(format!(
            "svm model: header declares {n_sv} vectors of dimension {dim} ({body} bytes) but {} bytes follow",
            r.remaining()
        )));
    }
    let mut dual_coefs = Vec::with_capacity(n_sv);
    for _ in 0..n_sv {
        dual_coefs.push(T::lit(r.f64()?));
    }
    let mut support_vectors = Vec::with_capacity(n_sv);
    for _ in 0..n_sv {
        let mut sv = Vec::with_capacity(dim);
        for _ in 0..dim {
            sv.push(T::lit(r.f64()?));
        }
        support_vectors.push(sv);
    }
    r.expect_end()?;
    Ok(SvmModel {
        support_vectors,
        dual_coefs,
        bias: T::lit(bias),
        gamma: T::lit(gamma),
        c,
    })
}

pub fn save_model<T: Scalar>(model: &SvmModel<T>, path: &Path) -> Result<()> {
    write_file(path, &model_to_bytes(model))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<SvmModel<T>> {
    model_from_bytes(&read_file(path)?)
}
