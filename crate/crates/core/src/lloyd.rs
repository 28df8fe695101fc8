//! Non-uniform Lloyd-Max scalar quantization with per-layer codebooks.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{HempError, Result};
use crate::param_store::ParamStore;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Reconstruction levels of one layer, strictly increasing. Indices are
/// 1-based: index `k` reconstructs to `levels[k - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub layer_id: usize,
    levels: Vec<f64>,
}

impl Codebook {
    pub fn new(layer_id: usize, levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(HempError::invalid(format!("codebook needs at least 2 levels, got {}", levels.len())));
        }
        if levels.len() > u16::MAX as usize {
            return Err(HempError::invalid(format!("codebook too large: {} levels", levels.len())));
        }
        if let Some(i) = levels.iter().position(|v| !v.is_finite()) {
            return Err(HempError::NonFinite(i));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HempError::invalid("codebook levels must be strictly increasing"));
        }
        Ok(Codebook { layer_id, levels })
    }

    /// Evenly spaced levels spanning `[lo, hi]`.
    pub fn uniform(layer_id: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(HempError::invalid("codebook needs at least 2 levels"));
        }
        let step = (hi - lo) / (n - 1) as f64;
        Self::new(layer_id, (0..n).map(|k| lo + step * k as f64).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Level for a 1-based index.
    pub fn level(&self, index: u32) -> f64 {
        self.levels[index as usize - 1]
    }

    pub fn with_layer_id(mut self, layer_id: usize) -> Self {
        self.layer_id = layer_id;
        self
    }

    /// Nearest level, ties toward the lower index, clamped to the extremes.
    pub fn quantize_one(&self, w: f64) -> u32 {
        // index = 1 + number of decision thresholds strictly below w
        let below = self.levels.windows(2).take_while(|p| 0.5 * (p[0] + p[1]) < w).count();
        below as u32 + 1
    }
}

/// Per-layer quantization indices in `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub layers: Vec<Vec<u32>>,
}

impl IndexMap {
    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn flat(&self) -> Vec<u32> {
        self.layers.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone)]
pub struct LloydFit {
    pub codebook: Codebook,
    /// MSE after each accepted iteration, starting with the initial levels.
    pub mse_history: Vec<f64>,
    /// Set when the data had fewer distinct values than requested levels.
    pub collapsed: bool,
}

/// Fits `n` levels starting from empirical quantiles `(i + 0.5) / n`.
pub fn fit_lloyd_max(values: &[f64], n: usize, tol: f64, max_iter: usize) -> Result<LloydFit> {
    let sorted = sorted_checked(values)?;
    if n < 2 {
        return Err(HempError::invalid("Lloyd-Max needs at least 2 levels"));
    }
    let init: Vec<f64> = (0..n)
        .map(|i| {
            let q = (i as f64 + 0.5) / n as f64;
            sorted[((q * sorted.len() as f64) as usize).min(sorted.len() - 1)]
        })
        .collect();
    fit_sorted(&sorted, init, tol, max_iter)
}

/// Fits starting from given levels (warm start). The level count is taken
/// from `init`.
pub fn fit_lloyd_max_from(values: &[f64], init: &[f64], tol: f64, max_iter: usize) -> Result<LloydFit> {
    let sorted = sorted_checked(values)?;
    if init.len() < 2 {
        return Err(HempError::invalid("Lloyd-Max needs at least 2 levels"));
    }
    fit_sorted(&sorted, init.to_vec(), tol, max_iter)
}

fn sorted_checked(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(HempError::invalid("cannot fit a codebook to no data"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(HempError::NonFinite(i));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn fit_sorted(sorted: &[f64], init: Vec<f64>, tol: f64, max_iter: usize) -> Result<LloydFit> {
    if !(tol > 0.0) {
        return Err(HempError::invalid("tolerance must be positive"));
    }
    let n = init.len();
    let mut distinct = sorted.to_vec();
    distinct.dedup();
    if distinct.len() < n {
        warn!("only {} distinct values for {} levels, collapsing codebook", distinct.len(), n);
        let levels = if distinct.len() >= 2 {
            distinct
        } else {
            let v = distinct[0];
            vec![v, v + 1e-3 * v.abs().max(1.0)]
        };
        let levels = round_to_f32(levels);
        let mse = sorted_mse(sorted, &levels);
        return Ok(LloydFit {
            codebook: Codebook::new(0, levels)?,
            mse_history: vec![mse],
            collapsed: true,
        });
    }

    let mut levels = init;
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    while levels.len() < n {
        // duplicated seeds behave like empty cells
        levels = repair_empty(sorted, levels);
    }
    let mut mse = sorted_mse(sorted, &levels);
    let mut history = vec![mse];
    for _ in 0..max_iter {
        let mut next = centroid_step(sorted, &levels);
        while next.len() < n {
            next = repair_empty(sorted, next);
        }
        let next_mse = sorted_mse(sorted, &next);
        if next_mse > mse {
            // rounding noise at a fixed point
            break;
        }
        let improvement = if mse > 0.0 { (mse - next_mse) / mse } else { 0.0 };
        levels = next;
        mse = next_mse;
        history.push(mse);
        if improvement < tol {
            break;
        }
    }
    let levels = round_to_f32(levels);
    Ok(LloydFit {
        codebook: Codebook::new(0, levels)?,
        mse_history: history,
        collapsed: false,
    })
}

/// Cell boundaries in the sorted data: cell k holds `sorted[b[k]..b[k+1]]`.
fn cell_bounds(sorted: &[f64], levels: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(levels.len() + 1);
    bounds.push(0);
    for p in levels.windows(2) {
        let t = 0.5 * (p[0] + p[1]);
        bounds.push(sorted.partition_point(|&x| x <= t));
    }
    bounds.push(sorted.len());
    bounds
}

/// Centroid update. Empty cells are dropped; the caller re-seeds them.
fn centroid_step(sorted: &[f64], levels: &[f64]) -> Vec<f64> {
    let bounds = cell_bounds(sorted, levels);
    let mut next: Vec<f64> = bounds
        .windows(2)
        .filter(|b| b[1] > b[0])
        .map(|b| {
            let cell = &sorted[b[0]..b[1]];
            let mean = cell.iter().sum::<f64>() / cell.len() as f64;
            mean.clamp(cell[0], cell[cell.len() - 1])
        })
        .collect();
    next.dedup();
    next
}

/// Adds one level at the midpoint of the widest occupied cell.
fn repair_empty(sorted: &[f64], mut levels: Vec<f64>) -> Vec<f64> {
    let bounds = cell_bounds(sorted, &levels);
    let (k, lo, hi) = bounds
        .windows(2)
        .enumerate()
        .filter(|(_, b)| b[1] > b[0])
        .map(|(k, b)| (k, sorted[b[0]], sorted[b[1] - 1]))
        .max_by(|a, b| (a.2 - a.1).total_cmp(&(b.2 - b.1)))
        .expect("data is nonempty");
    let mut seed = 0.5 * (lo + hi);
    if levels.contains(&seed) {
        seed = 0.5 * (lo + levels[k]);
    }
    if levels.contains(&seed) {
        seed = hi;
    }
    levels.push(seed);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
}

fn sorted_mse(sorted: &[f64], levels: &[f64]) -> f64 {
    let bounds = cell_bounds(sorted, levels);
    let sse: f64 = bounds
        .windows(2)
        .zip(levels)
        .map(|(b, &r)| sorted[b[0]..b[1]].iter().map(|&x| (x - r) * (x - r)).sum::<f64>())
        .sum();
    sse / sorted.len() as f64
}

fn round_to_f32(levels: Vec<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = levels.into_iter().map(|v| v as f32 as f64).collect();
    out.dedup();
    out
}

/// Mean squared error of quantizing `values` with `codebook`.
pub fn quantization_mse(values: &[f64], codebook: &Codebook) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values
        .iter()
        .map(|&w| {
            let d = w - codebook.level(codebook.quantize_one(w));
            d * d
        })
        .sum::<f64>()
        / values.len() as f64
}

pub fn quantize(values: &[f64], codebook: &Codebook) -> Vec<u32> {
    values.iter().map(|&w| codebook.quantize_one(w)).collect()
}

pub fn reconstruct(indices: &[u32], codebook: &Codebook) -> Result<Vec<f64>> {
    let n = codebook.level_count();
    indices
        .iter()
        .map(|&q| {
            if q == 0 || q as usize > n {
                Err(HempError::IndexOutOfRange { index: q, levels: n })
            } else {
                Ok(codebook.level(q))
            }
        })
        .collect()
}

/// Quantizes every layer against its own codebook.
pub fn quantize_store(store: &ParamStore, codebooks: &[Codebook]) -> Result<IndexMap> {
    check_codebooks(store, codebooks)?;
    Ok(IndexMap {
        layers: store
            .layers()
            .iter()
            .zip(codebooks)
            .map(|(l, cb)| quantize(&l.values, cb))
            .collect(),
    })
}

pub fn reconstruct_map(indices: &IndexMap, codebooks: &[Codebook]) -> Result<Vec<Vec<f64>>> {
    if indices.layers.len() != codebooks.len() {
        return Err(HempError::ShapeMismatch(format!(
            "{} index layers for {} codebooks",
            indices.layers.len(),
            codebooks.len()
        )));
    }
    indices
        .layers
        .iter()
        .zip(codebooks)
        .map(|(q, cb)| reconstruct(q, cb))
        .collect()
}

pub(crate) fn check_codebooks(store: &ParamStore, codebooks: &[Codebook]) -> Result<()> {
    if store.layers().len() != codebooks.len() {
        return Err(HempError::ShapeMismatch(format!(
            "{} layers but {} codebooks",
            store.layers().len(),
            codebooks.len()
        )));
    }
    Ok(())
}
