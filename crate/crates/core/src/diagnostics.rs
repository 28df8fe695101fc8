//! Numerical checks of the entropy machinery: finite-difference gradient
//! verification, stationary points and the first-order gradient bound,
//! and proxy-vs-empirical entropy per order.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::binning::assign_neighbors;
use crate::entropy::{
    assign_all, entropy_report, gradient_bound, proxy_gradient, stationary_position, EntropyReport, SoftTupleTable,
    PROB_FLOOR,
};
use crate::error::{HempError, Result};
use crate::lloyd::Codebook;
use crate::param_store::ParamStore;
use crate::rng::named_rng;

/// Parameters closer than this fraction of their interval to a level are
/// not finite-differenced: the proxy's derivative jumps there.
pub const DEFAULT_SKIP_FRACTION: f64 = 1e-4;

/// Gradients smaller than this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-9;

fn mass_term(s: f64, log_t: f64) -> f64 {
    if s > 0.0 {
        s * (log_t - s.max(PROB_FLOOR).log2())
    } else {
        0.0
    }
}

/// `H(a) − H(b)` for two tables over the same tuple count, summing only
/// the entries that differ so unchanged mass cancels exactly.
fn proxy_difference(a: &SoftTupleTable, b: &SoftTupleTable) -> f64 {
    let t = a.tuple_count as f64;
    let log_t = t.log2();
    let mut joint: BTreeMap<_, (f64, f64)> = BTreeMap::new();
    for (k, s) in a.sorted_entries() {
        joint.entry(k).or_default().0 = s;
    }
    for (k, s) in b.sorted_entries() {
        joint.entry(k).or_default().1 = s;
    }
    joint
        .values()
        .filter(|(x, y)| x != y)
        .map(|&(x, y)| mass_term(x, log_t) - mass_term(y, log_t))
        .sum::<f64>()
        / t
}

/// Central finite difference of the proxy with respect to flat parameter
/// `i`, Richardson-extrapolated from steps `h` and `h/2`.
pub fn fd_proxy_derivative(store: &ParamStore, codebooks: &[Codebook], n: usize, i: usize, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(HempError::invalid("finite-difference step must be positive"));
    }
    if i >= store.total_count() {
        return Err(HempError::invalid(format!("parameter {i} out of range")));
    }
    let view = store.group_tuples(n)?;
    let base = assign_all(store, codebooks)?;
    let layer = store.layer_of_each()[i];
    let w = store.flat_values()[i];
    let central = |step: f64| -> Result<f64> {
        let mut up = base.clone();
        up[i] = assign_neighbors(w + step, &codebooks[layer]);
        let mut down = base.clone();
        down[i] = assign_neighbors(w - step, &codebooks[layer]);
        let d = proxy_difference(&SoftTupleTable::build(&up, &view)?, &SoftTupleTable::build(&down, &view)?);
        Ok(d / (2.0 * step))
    };
    let coarse = central(h)?;
    let fine = central(h / 2.0)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// Distance from `w` to its nearest bracketing level, as a fraction of the
/// bracket width (0 for clamped values).
pub fn level_distance_fraction(w: f64, codebook: &Codebook) -> f64 {
    let a = assign_neighbors(w, codebook);
    if a.is_clamped() {
        return 0.0;
    }
    a.p_minus.min(a.p_plus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub order: usize,
    pub rows: Vec<GradCheckRow>,
    pub skipped: usize,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the closed-form gradient with finite differences at the given
/// flat positions (all positions when `params` is `None`). Positions within
/// `skip_fraction·Δ` of a level are skipped; clamped ones are kept, their
/// gradient being exactly zero on both sides.
pub fn gradient_check(
    store: &ParamStore,
    codebooks: &[Codebook],
    n: usize,
    params: Option<&[usize]>,
    skip_fraction: f64,
) -> Result<GradCheck> {
    let view = store.group_tuples(n)?;
    let analytic = proxy_gradient(store, codebooks, &view)?;
    let values = store.flat_values();
    let layer_of = store.layer_of_each();
    let all: Vec<usize> = (0..values.len()).collect();
    let mut rows = Vec::new();
    let mut skipped = 0;
    for &i in params.unwrap_or(&all) {
        let cb = &codebooks[layer_of[i]];
        let a = assign_neighbors(values[i], cb);
        if !a.is_clamped() && level_distance_fraction(values[i], cb) < skip_fraction {
            skipped += 1;
            continue;
        }
        let h = if a.is_clamped() { 1e-6 } else { 0.5 * skip_fraction * a.delta };
        // a clamped value may sit right at the range edge; step outward only
        let numeric = if a.is_clamped() && (values[i] - cb.level(a.q_minus)).abs() < 2.0 * h {
            0.0
        } else {
            fd_proxy_derivative(store, codebooks, n, i, h)?
        };
        rows.push(GradCheckRow {
            param: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    Ok(GradCheck { order: n, rows, skipped })
}

/// A single-layer problem with `len` parameters and `levels` jittered
/// levels near the integers, some parameters falling outside the range.
pub fn random_problem(seed: u64, len: usize, levels: usize) -> Result<(ParamStore, Vec<Codebook>)> {
    let mut rng = named_rng(seed, "diagnostics");
    let mut lv: Vec<f64> = (0..levels).map(|k| k as f64 + rng.gen_range(-0.3..0.3)).collect();
    lv.sort_by(f64::total_cmp);
    let values = (0..len).map(|_| rng.gen_range(-0.5..levels as f64 - 0.5)).collect();
    let mut store = ParamStore::new();
    store.push_layer("w", vec![len], values)?;
    Ok((store, vec![Codebook::new(0, lv)?]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundSweep {
    pub checked: usize,
    pub violations: usize,
    /// Largest `|gradient| / bound` seen (≤ 1 when there are no violations).
    pub max_ratio: f64,
}

/// Checks `|∂H₁/∂w_i| ≤ bound_i` at the given flat positions (all when
/// `params` is `None`).
pub fn bound_sweep(store: &ParamStore, codebooks: &[Codebook], params: Option<&[usize]>) -> Result<BoundSweep> {
    let g = proxy_gradient(store, codebooks, &store.group_tuples(1)?)?;
    let mut out = BoundSweep {
        checked: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    let all: Vec<usize> = (0..g.len()).collect();
    for &i in params.unwrap_or(&all) {
        let gi = &g[i];
        let b = gradient_bound(i, store, codebooks)?;
        out.checked += 1;
        // slack covers rounding in the two evaluation orders
        if gi.abs() > b * (1.0 + 1e-9) + 1e-15 {
            out.violations += 1;
        }
        if b > 0.0 {
            out.max_ratio = out.max_ratio.max(gi.abs() / b);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryCheck {
    pub param: usize,
    pub closed_form: f64,
    pub numeric_root: f64,
    /// `|∂H₁/∂w|` at the closed-form position.
    pub gradient_there: f64,
}

/// Root of the first-order proxy derivative in parameter `i`'s bracket,
/// by bisection on finite differences. `None` when the derivative does not
/// change sign across the bracket.
pub fn numeric_stationary_root(i: usize, store: &ParamStore, codebooks: &[Codebook]) -> Result<Option<f64>> {
    let layer = store.layer_of_each()[i];
    let cb = &codebooks[layer];
    let w = store.flat_values()[i];
    let a = assign_neighbors(w, cb);
    if a.is_clamped() {
        return Ok(None);
    }
    let (lo, hi) = (cb.level(a.q_minus), cb.level(a.q_plus));
    let step = 1e-7 * a.delta;
    let deriv = |x: f64| -> Result<f64> {
        let mut s = store.clone();
        let mut v = store.flat_values();
        v[i] = x;
        s.set_flat_values(&v)?;
        fd_proxy_derivative(&s, codebooks, 1, i, step)
    };
    let (mut a_x, mut b_x) = (lo + 2.0 * step, hi - 2.0 * step);
    let (mut fa, fb) = (deriv(a_x)?, deriv(b_x)?);
    if fa.signum() == fb.signum() {
        return Ok(None);
    }
    for _ in 0..60 {
        let mid = 0.5 * (a_x + b_x);
        let fm = deriv(mid)?;
        if fm == 0.0 {
            return Ok(Some(mid));
        }
        if fm.signum() == fa.signum() {
            a_x = mid;
            fa = fm;
        } else {
            b_x = mid;
        }
        if b_x - a_x < 1e-12 * a.delta {
            break;
        }
    }
    Ok(Some(0.5 * (a_x + b_x)))
}

/// Closed-form stationary position next to its numeric root, for every
/// parameter where both exist.
pub fn stationary_checks(store: &ParamStore, codebooks: &[Codebook], params: &[usize]) -> Result<Vec<StationaryCheck>> {
    let mut out = Vec::new();
    for &i in params {
        let (Some(closed), Some(root)) = (
            stationary_position(i, store, codebooks)?,
            numeric_stationary_root(i, store, codebooks)?,
        ) else {
            continue;
        };
        let mut s = store.clone();
        let mut v = s.flat_values();
        v[i] = closed;
        s.set_flat_values(&v)?;
        let g = proxy_gradient(&s, codebooks, &s.group_tuples(1)?)?;
        out.push(StationaryCheck {
            param: i,
            closed_form: closed,
            numeric_root: root,
            gradient_there: g[i].abs(),
        });
    }
    Ok(out)
}

/// Proxy and empirical entropy for each requested order.
pub fn entropy_table(store: &ParamStore, codebooks: &[Codebook], orders: &[usize]) -> Result<Vec<EntropyReport>> {
    orders.iter().map(|&n| entropy_report(store, codebooks, n)).collect()
}
