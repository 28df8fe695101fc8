//! Order-`n` block entropy of quantization indices, its differentiable
//! proxy over the continuous parameters, and the proxy's closed-form
//! gradient.
//!
//! A tuple's soft joint assignment is the product of its coordinates'
//! two-neighbor probabilities, so each tuple touches at most `2^n`
//! index vectors regardless of the number of levels. The aggregate mass
//! `S(ξ) = Σ_j p(w_j → ξ)` over the `T` complete tuples gives
//!
//! ```text
//! H_n = (1/T) Σ_ξ S(ξ) · [log2 T − log2 S(ξ)]
//! ```
//!
//! which equals the empirical block entropy when every parameter sits on
//! a level. Because `Σ_ξ S(ξ) = T` is constant, the derivative with
//! respect to coordinate `m` of tuple `j` reduces to
//!
//! ```text
//! ∂H_n/∂w = 1/(Δ·T) · Σ_ξ' π(ξ') · log2[ S(ξ', ξ_m = q₋) / S(ξ', ξ_m = q₊) ]
//! ```
//!
//! where `ξ'` ranges over the supported indices of the other coordinates
//! and `π(ξ')` is their joint mass.

use std::collections::{BTreeMap, HashMap};
use std::hash::BuildHasherDefault;
use std::collections::hash_map::DefaultHasher;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{assign_neighbors, BinAssignment};
use crate::error::{HempError, Result};
use crate::lloyd::{check_codebooks, Codebook, IndexMap};
use crate::param_store::{group_flat, ParamStore, TupleView};

/// Floor applied to probability masses inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub const MAX_ORDER: usize = 8;

const BITS_PER_COORD: u32 = 16;

/// Packed index vector: coordinate `m` occupies bits `16m..16m+16`.
pub type XiKey = u128;

type DetHashMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

pub fn pack_xi(xi: &[u32]) -> XiKey {
    xi.iter()
        .enumerate()
        .fold(0, |acc, (m, &q)| acc | (q as u128) << (BITS_PER_COORD * m as u32))
}

pub fn unpack_xi(key: XiKey, n: usize) -> Vec<u32> {
    (0..n)
        .map(|m| ((key >> (BITS_PER_COORD * m as u32)) & 0xffff) as u32)
        .collect()
}

fn with_coord(key: XiKey, m: usize, q: u32) -> XiKey {
    let shift = BITS_PER_COORD * m as u32;
    (key & !(0xffff_u128 << shift)) | (q as u128) << shift
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 || n > MAX_ORDER {
        return Err(HempError::invalid(format!("entropy order must be in 1..={MAX_ORDER}, got {n}")));
    }
    Ok(())
}

fn log2_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).log2()
}

/// Shannon entropy in bits of a distribution given by nonnegative masses
/// summing to `total`.
fn entropy_of_masses(masses: impl Iterator<Item = f64>, total: f64) -> f64 {
    let log_total = total.log2();
    let h: f64 = masses
        .filter(|&s| s > 0.0)
        .map(|s| s * (log_total - log2_floored(s)))
        .sum::<f64>()
        / total;
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleHistogram {
    pub order: usize,
    pub counts: BTreeMap<XiKey, u64>,
    pub total: u64,
}

impl TupleHistogram {
    pub fn from_indices(flat: &[u32], view: &TupleView) -> Result<Self> {
        check_order(view.order())?;
        let mut counts = BTreeMap::new();
        for t in view.tuples() {
            let xi: Vec<u32> = t.iter().map(|&p| flat[p]).collect();
            *counts.entry(pack_xi(&xi)).or_insert(0) += 1;
        }
        Ok(TupleHistogram {
            order: view.order(),
            counts,
            total: view.tuple_count() as u64,
        })
    }

    pub fn entropy(&self) -> Result<f64> {
        if self.total == 0 {
            return Err(HempError::invalid("no complete tuples to measure"));
        }
        Ok(entropy_of_masses(self.counts.values().map(|&c| c as f64), self.total as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub order: usize,
    pub h_proxy: f64,
    pub h_true: f64,
    pub per_symbol_proxy: f64,
    pub per_symbol_true: f64,
}

/// Aggregate soft masses over all complete tuples.
#[derive(Debug, Clone)]
pub struct SoftTupleTable {
    pub order: usize,
    entries: DetHashMap<XiKey, f64>,
    pub tuple_count: usize,
    /// Index vectors evaluated across all tuples.
    pub evaluations: u64,
    /// Largest number of index vectors evaluated for one tuple.
    pub max_evaluations_per_tuple: u64,
}

impl SoftTupleTable {
    pub fn build(assignments: &[BinAssignment], view: &TupleView) -> Result<Self> {
        check_order(view.order())?;
        let mut entries = DetHashMap::default();
        let mut evaluations = 0;
        let mut max_per = 0;
        let mut coords = Vec::with_capacity(view.order());
        for t in view.tuples() {
            coords.clear();
            coords.extend(t.iter().map(|&p| assignments[p]));
            let count = for_each_joint(&coords, |key, p| *entries.entry(key).or_insert(0.0) += p);
            evaluations += count;
            max_per = max_per.max(count);
        }
        Ok(SoftTupleTable {
            order: view.order(),
            entries,
            tuple_count: view.tuple_count(),
            evaluations,
            max_evaluations_per_tuple: max_per,
        })
    }

    pub fn mass(&self, xi: &[u32]) -> f64 {
        self.entries.get(&pack_xi(xi)).copied().unwrap_or(0.0)
    }

    fn mass_key(&self, key: XiKey) -> f64 {
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by key.
    pub fn sorted_entries(&self) -> Vec<(XiKey, f64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&k, &s)| (k, s)).collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    /// The proxy `H_n` in bits per tuple.
    pub fn proxy_entropy(&self) -> f64 {
        if self.tuple_count == 0 {
            return 0.0;
        }
        entropy_of_masses(self.sorted_entries().into_iter().map(|e| e.1), self.tuple_count as f64)
    }
}

/// Enumerates the supported index vectors of one tuple with their product
/// probabilities. Returns how many were visited.
fn for_each_joint(coords: &[BinAssignment], mut f: impl FnMut(XiKey, f64)) -> u64 {
    let interior: Vec<usize> = (0..coords.len()).filter(|&m| coords[m].is_interior()).collect();
    // base: every coordinate at its only (or lower) supported bin
    let mut base_key: XiKey = 0;
    let mut base_prob = 1.0;
    for (m, a) in coords.iter().enumerate() {
        if !a.is_interior() {
            let (q, p) = if a.p_minus > 0.0 { (a.q_minus, a.p_minus) } else { (a.q_plus, a.p_plus) };
            base_key = with_coord(base_key, m, q);
            base_prob *= p;
        }
    }
    let combos = 1u64 << interior.len();
    for mask in 0..combos {
        let mut key = base_key;
        let mut p = base_prob;
        for (bit, &m) in interior.iter().enumerate() {
            let a = &coords[m];
            if mask >> bit & 1 == 1 {
                key = with_coord(key, m, a.q_plus);
                p *= a.p_plus;
            } else {
                key = with_coord(key, m, a.q_minus);
                p *= a.p_minus;
            }
        }
        f(key, p);
    }
    combos
}

/// Joint soft probability of one tuple over its supported index vectors.
pub fn joint_soft_prob(assignments: &[BinAssignment]) -> Vec<(Vec<u32>, f64)> {
    let n = assignments.len();
    let mut out = Vec::new();
    for_each_joint(assignments, |key, p| out.push((unpack_xi(key, n), p)));
    out
}

/// Neighbor assignments for every flat position, each against its
/// layer's codebook.
pub fn assign_all(store: &ParamStore, codebooks: &[Codebook]) -> Result<Vec<BinAssignment>> {
    check_codebooks(store, codebooks)?;
    Ok(store
        .layers()
        .iter()
        .zip(codebooks)
        .flat_map(|(l, cb)| l.values.iter().map(move |&w| assign_neighbors(w, cb)))
        .collect())
}

/// Shared state for evaluating the proxy and its gradient at one point.
#[derive(Debug, Clone)]
pub struct ProxyState {
    pub view: TupleView,
    pub assignments: Vec<BinAssignment>,
    pub table: SoftTupleTable,
}

impl ProxyState {
    pub fn new(store: &ParamStore, codebooks: &[Codebook], n: usize) -> Result<Self> {
        check_order(n)?;
        let view = store.group_tuples(n)?;
        let assignments = assign_all(store, codebooks)?;
        Self::from_assignments(assignments, view)
    }

    pub fn from_assignments(assignments: Vec<BinAssignment>, view: TupleView) -> Result<Self> {
        let table = SoftTupleTable::build(&assignments, &view)?;
        Ok(ProxyState {
            view,
            assignments,
            table,
        })
    }

    pub fn proxy_entropy(&self) -> f64 {
        self.table.proxy_entropy()
    }

    /// `∂H_n/∂w` for every flat position; remainder and clamped
    /// positions get zero.
    pub fn gradient(&self) -> Vec<f64> {
        let total = self.assignments.len();
        let t = self.table.tuple_count;
        if t == 0 {
            return vec![0.0; total];
        }
        let scale = 1.0 / t as f64;
        let per_tuple: Vec<Vec<f64>> = self
            .view
            .tuples()
            .par_iter()
            .map(|tuple| {
                let coords: Vec<BinAssignment> = tuple.iter().map(|&p| self.assignments[p]).collect();
                (0..coords.len()).map(|m| self.coord_gradient(&coords, m) * scale).collect()
            })
            .collect();
        let mut grad = vec![0.0; total];
        for (tuple, g) in self.view.tuples().iter().zip(per_tuple) {
            for (&p, gi) in tuple.iter().zip(g) {
                grad[p] = gi;
            }
        }
        grad
    }

    /// Gradient of coordinate `m` times `T`.
    fn coord_gradient(&self, coords: &[BinAssignment], m: usize) -> f64 {
        let a = coords[m];
        if a.is_clamped() {
            return 0.0;
        }
        let mut others = coords.to_vec();
        // pin coordinate m; the enumeration below then covers the others only
        others[m] = BinAssignment {
            q_minus: a.q_minus,
            q_plus: a.q_minus,
            delta: a.delta,
            p_minus: 1.0,
            p_plus: 0.0,
        };
        let mut acc = 0.0;
        for_each_joint(&others, |key, weight| {
            let minus = self.table.mass_key(with_coord(key, m, a.q_minus));
            let plus = self.table.mass_key(with_coord(key, m, a.q_plus));
            acc += weight * (log2_floored(minus) - log2_floored(plus));
        });
        acc / a.delta
    }
}

/// Empirical order-`n` block entropy (bits per tuple) of the indices.
pub fn true_entropy(indices: &IndexMap, view: &TupleView) -> Result<f64> {
    let flat = indices.flat();
    if flat.len() < view.covered() {
        return Err(HempError::ShapeMismatch("index map shorter than tuple view".into()));
    }
    TupleHistogram::from_indices(&flat, view)?.entropy()
}

/// Block entropy of a flat index stream grouped into order-`n` tuples.
pub fn true_entropy_flat(flat: &[u32], n: usize) -> Result<f64> {
    let view = group_flat(flat.len(), n)?;
    TupleHistogram::from_indices(flat, &view)?.entropy()
}

pub fn proxy_entropy(store: &ParamStore, codebooks: &[Codebook], view: &TupleView) -> Result<f64> {
    let assignments = assign_all(store, codebooks)?;
    Ok(SoftTupleTable::build(&assignments, view)?.proxy_entropy())
}

pub fn proxy_gradient(store: &ParamStore, codebooks: &[Codebook], view: &TupleView) -> Result<Vec<f64>> {
    let assignments = assign_all(store, codebooks)?;
    Ok(ProxyState::from_assignments(assignments, view.clone())?.gradient())
}

pub fn entropy_report(store: &ParamStore, codebooks: &[Codebook], n: usize) -> Result<EntropyReport> {
    let state = ProxyState::new(store, codebooks, n)?;
    let indices = crate::lloyd::quantize_store(store, codebooks)?;
    let h_proxy = state.proxy_entropy();
    let h_true = true_entropy(&indices, &state.view)?;
    Ok(EntropyReport {
        order: n,
        h_proxy,
        h_true,
        per_symbol_proxy: h_proxy / n as f64,
        per_symbol_true: h_true / n as f64,
    })
}

/// First-order quantities for one parameter: the bracketing masses
/// contributed by all *other* covered parameters.
fn first_order_context(i: usize, state: &ProxyState) -> Option<(BinAssignment, f64, f64)> {
    let a = state.assignments[i];
    if a.is_clamped() || i >= state.view.covered() {
        return None;
    }
    let (mut k_minus, mut k_plus) = (0.0, 0.0);
    for (j, b) in state.assignments[..state.view.covered()].iter().enumerate() {
        if j != i {
            k_minus += b.prob(a.q_minus);
            k_plus += b.prob(a.q_plus);
        }
    }
    Some((a, k_minus, k_plus))
}

/// Position of parameter `i` (flat index) at which the first-order proxy
/// gradient vanishes, keeping every other parameter fixed and the current
/// bracketing interval. `None` when no such position exists.
///
/// Balancing `S(q₋) = S(q₊)` gives `p₊ − p₋ = K₋ − K₊`, i.e.
/// `p₊ = (K₋ − K₊ + 1) / 2`, feasible only when `|K₋ − K₊| ≤ 1`.
pub fn stationary_position(i: usize, store: &ParamStore, codebooks: &[Codebook]) -> Result<Option<f64>> {
    let state = ProxyState::new(store, codebooks, 1)?;
    let Some((a, k_minus, k_plus)) = first_order_context(i, &state) else {
        return Ok(None);
    };
    let diff = k_minus - k_plus;
    if !(-1.0..=1.0).contains(&diff) {
        return Ok(None);
    }
    let p_plus = 0.5 * (diff + 1.0);
    let lo = level_of(store, codebooks, i, a.q_minus);
    Ok(Some(lo + p_plus * a.delta))
}

fn level_of(store: &ParamStore, codebooks: &[Codebook], flat: usize, q: u32) -> f64 {
    let layer = store.layer_of_each()[flat];
    codebooks[layer].level(q)
}

/// `|1/(Δ·T) · log2(p(q₋)/p(q₊))|` for parameter `i` under the first-order
/// proxy, where `p(ξ)` are the pooled bin masses.
pub fn gradient_bound(i: usize, store: &ParamStore, codebooks: &[Codebook]) -> Result<f64> {
    let state = ProxyState::new(store, codebooks, 1)?;
    let a = state.assignments[i];
    if a.is_clamped() || i >= state.view.covered() {
        return Ok(0.0);
    }
    let t = state.table.tuple_count as f64;
    let p_minus = state.table.mass(&[a.q_minus]) / t;
    let p_plus = state.table.mass(&[a.q_plus]) / t;
    Ok(((log2_floored(p_minus) - log2_floored(p_plus)) / (a.delta * t)).abs())
}
