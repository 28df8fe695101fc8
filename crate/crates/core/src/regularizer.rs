//! Training-time regularization `R = λ_H·H_n + λ_E·E`, with the gradient of
//! `R` re-weighted per parameter by its insensitivity to the loss.

use serde::{Deserialize, Serialize};

use crate::entropy::ProxyState;
use crate::error::{HempError, Result};
use crate::lloyd::{check_codebooks, Codebook, IndexMap};
use crate::param_store::ParamStore;

/// How the `max |∂L/∂w|` normalizer of the insensitivity is scoped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsensitivityScope {
    PerLayer,
    Global,
    /// No re-weighting: every parameter gets the full regularization push.
    Off,
}

impl std::str::FromStr for InsensitivityScope {
    type Err = HempError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-layer" | "layer" => Ok(Self::PerLayer),
            "global" => Ok(Self::Global),
            "off" | "none" => Ok(Self::Off),
            _ => Err(HempError::invalid(format!("unknown insensitivity scope {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub lambda_h: f64,
    pub lambda_e: f64,
    pub order: usize,
    pub scope: InsensitivityScope,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            lambda_h: 1.0,
            lambda_e: 0.1,
            order: 2,
            scope: InsensitivityScope::PerLayer,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_h >= 0.0 && self.lambda_e >= 0.0) {
            return Err(HempError::invalid("regularization weights must be non-negative"));
        }
        if self.order == 0 {
            return Err(HempError::invalid("entropy order must be at least 1"));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.lambda_h == 0.0 && self.lambda_e == 0.0
    }
}

/// Per-parameter insensitivity in `[0, 1]`, flat order.
#[derive(Debug, Clone, PartialEq)]
pub struct InsensitivityMap(pub Vec<f64>);

fn squared_residuals(store: &ParamStore, codebooks: &[Codebook], indices: &IndexMap) -> Result<Vec<f64>> {
    check_codebooks(store, codebooks)?;
    if indices.layers.len() != store.layers().len() {
        return Err(HempError::ShapeMismatch("index map does not match store".into()));
    }
    let mut out = Vec::with_capacity(store.total_count());
    for ((layer, cb), q) in store.layers().iter().zip(codebooks).zip(&indices.layers) {
        if q.len() != layer.len() {
            return Err(HempError::ShapeMismatch(format!("layer {} index count", layer.name)));
        }
        out.extend(layer.values.iter().zip(q).map(|(&w, &k)| w - cb.level(k)));
    }
    Ok(out)
}

/// `E = sqrt(mean((w − r(q))²))` over all parameters.
pub fn reconstruction_error(store: &ParamStore, codebooks: &[Codebook], indices: &IndexMap) -> Result<f64> {
    let r = squared_residuals(store, codebooks, indices)?;
    if r.is_empty() {
        return Ok(0.0);
    }
    Ok((r.iter().map(|d| d * d).sum::<f64>() / r.len() as f64).sqrt())
}

/// `∂E/∂w = (w − ŵ) / (‖W‖₀·E)`; zero everywhere when `E = 0`.
pub fn reconstruction_gradient(store: &ParamStore, codebooks: &[Codebook], indices: &IndexMap) -> Result<Vec<f64>> {
    let r = squared_residuals(store, codebooks, indices)?;
    let n = r.len() as f64;
    let e = (r.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    if e == 0.0 {
        return Ok(vec![0.0; r.len()]);
    }
    Ok(r.into_iter().map(|d| d / (n * e)).collect())
}

/// `S̄ = 1 − |g| / max|g|`, or all ones for a zero gradient.
pub fn insensitivity(loss_grads: &[f64]) -> InsensitivityMap {
    let max = loss_grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if max == 0.0 {
        return InsensitivityMap(vec![1.0; loss_grads.len()]);
    }
    InsensitivityMap(loss_grads.iter().map(|g| (1.0 - g.abs() / max).clamp(0.0, 1.0)).collect())
}

/// Insensitivity over a flat gradient vector with the requested scope;
/// `layer_sizes` partitions the vector for per-layer scoping.
pub fn insensitivity_scoped(loss_grads: &[f64], layer_sizes: &[usize], scope: InsensitivityScope) -> InsensitivityMap {
    match scope {
        InsensitivityScope::Off => InsensitivityMap(vec![1.0; loss_grads.len()]),
        InsensitivityScope::Global => insensitivity(loss_grads),
        InsensitivityScope::PerLayer => {
            let mut out = Vec::with_capacity(loss_grads.len());
            let mut rest = loss_grads;
            for &n in layer_sizes {
                let (head, tail) = rest.split_at(n);
                out.extend(insensitivity(head).0);
                rest = tail;
            }
            InsensitivityMap(out)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegUpdate {
    /// Flat update to add to the loss gradient.
    pub update: Vec<f64>,
    pub h_proxy: f64,
    pub e_term: f64,
}

/// `S̄ ⊙ (λ_H·∂H_n/∂w + λ_E·∂E/∂w)` in flat order.
pub fn regularization_update(
    store: &ParamStore,
    codebooks: &[Codebook],
    indices: &IndexMap,
    loss_grads: &[f64],
    cfg: &RegConfig,
) -> Result<RegUpdate> {
    cfg.validate()?;
    let total = store.total_count();
    if loss_grads.len() != total {
        return Err(HempError::ShapeMismatch(format!(
            "{} loss gradients for {total} parameters",
            loss_grads.len()
        )));
    }
    let mut update = vec![0.0; total];
    let mut h_proxy = 0.0;
    if cfg.lambda_h != 0.0 {
        let state = ProxyState::new(store, codebooks, cfg.order)?;
        h_proxy = state.proxy_entropy();
        for (u, g) in update.iter_mut().zip(state.gradient()) {
            *u += cfg.lambda_h * g;
        }
    }
    let e_term = reconstruction_error(store, codebooks, indices)?;
    if cfg.lambda_e != 0.0 {
        for (u, g) in update.iter_mut().zip(reconstruction_gradient(store, codebooks, indices)?) {
            *u += cfg.lambda_e * g;
        }
    }
    let sizes: Vec<usize> = store.layers().iter().map(|l| l.len()).collect();
    let weights = insensitivity_scoped(loss_grads, &sizes, cfg.scope);
    for (u, s) in update.iter_mut().zip(&weights.0) {
        *u *= s;
    }
    Ok(RegUpdate { update, h_proxy, e_term })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::proxy_entropy;
    use crate::lloyd::{quantize_store, reconstruct};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(values: Vec<f64>, levels: Vec<f64>) -> (ParamStore, Vec<Codebook>) {
        let mut s = ParamStore::new();
        let n = values.len();
        s.push_layer("w", vec![n], values).unwrap();
        (s, vec![Codebook::new(0, levels).unwrap()])
    }

    #[test]
    fn e_examples() {
        let (s, cb) = single(vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0]);
        let idx = quantize_store(&s, &cb).unwrap();
        assert_eq!(reconstruction_error(&s, &cb, &idx).unwrap(), 0.0);
        assert!(reconstruction_gradient(&s, &cb, &idx).unwrap().iter().all(|&g| g == 0.0));

        let (s, cb) = single(vec![0.0, 1.0], vec![0.0, 3.0]);
        let idx = IndexMap { layers: vec![vec![1, 1]] };
        let e = reconstruction_error(&s, &cb, &idx).unwrap();
        assert!((e - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn e_shrinks_toward_reconstruction() {
        let (mut s, cb) = single(vec![0.3, -0.4, 0.9], vec![-1.0, 0.0, 1.0]);
        let idx = quantize_store(&s, &cb).unwrap();
        let target = reconstruct(&idx.layers[0], &cb[0]).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let v: Vec<f64> = [0.3, -0.4, 0.9].iter().zip(&target).map(|(w, r)| w + t * (r - w)).collect();
            s.set_flat_values(&v).unwrap();
            let e = reconstruction_error(&s, &cb, &idx).unwrap();
            assert!(e < prev || (e == 0.0 && prev == 0.0));
            prev = e;
        }
    }

    #[test]
    fn e_gradient_symmetric_pair() {
        let (s, cb) = single(vec![-0.2, 0.2], vec![-1.0, 0.0, 1.0]);
        let idx = quantize_store(&s, &cb).unwrap();
        let g = reconstruction_gradient(&s, &cb, &idx).unwrap();
        assert!((g[0] + g[1]).abs() < 1e-15 && g[0] < 0.0);
    }

    #[test]
    fn e_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (s, cb) = single(vals.clone(), vec![-0.7, -0.1, 0.5]);
            let idx = quantize_store(&s, &cb).unwrap();
            let g = reconstruction_gradient(&s, &cb, &idx).unwrap();
            let h = 1e-6;
            for i in 0..vals.len() {
                let mut v = vals.clone();
                let mut s2 = s.clone();
                v[i] += h;
                s2.set_flat_values(&v).unwrap();
                let up = reconstruction_error(&s2, &cb, &idx).unwrap();
                v[i] -= 2.0 * h;
                s2.set_flat_values(&v).unwrap();
                let down = reconstruction_error(&s2, &cb, &idx).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn insensitivity_examples() {
        let s = insensitivity(&[0.1, -0.2, 0.4]).0;
        for (a, b) in s.iter().zip([0.75, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(insensitivity(&[0.3, -0.3, 0.3]).0, vec![0.0; 3]);
        assert_eq!(insensitivity(&[0.0; 4]).0, vec![1.0; 4]);
    }

    #[test]
    fn scoped_insensitivity() {
        let g = [1.0, 0.5, 0.1, 0.05];
        let per = insensitivity_scoped(&g, &[2, 2], InsensitivityScope::PerLayer).0;
        assert_eq!(per[0], 0.0);
        assert_eq!(per[2], 0.0);
        let global = insensitivity_scoped(&g, &[2, 2], InsensitivityScope::Global).0;
        assert!((global[2] - 0.9).abs() < 1e-15);
        assert_eq!(insensitivity_scoped(&g, &[2, 2], InsensitivityScope::Off).0, vec![1.0; 4]);
    }

    #[test]
    fn zero_lambdas_give_zero_update() {
        let (s, cb) = single(vec![0.1, 0.7, 0.3, 0.9], vec![0.0, 1.0]);
        let idx = quantize_store(&s, &cb).unwrap();
        let cfg = RegConfig { lambda_h: 0.0, lambda_e: 0.0, ..RegConfig::default() };
        let u = regularization_update(&s, &cb, &idx, &[0.0; 4], &cfg).unwrap();
        assert_eq!(u.update, vec![0.0; 4]);
    }

    #[test]
    fn most_sensitive_parameter_is_not_pushed() {
        let (s, cb) = single(vec![0.1, 0.7, 0.3, 0.9], vec![0.0, 1.0]);
        let idx = quantize_store(&s, &cb).unwrap();
        let u = regularization_update(&s, &cb, &idx, &[0.1, -2.0, 0.3, 0.5], &RegConfig::default()).unwrap();
        assert_eq!(u.update[1], 0.0);
        assert!(u.update[0] != 0.0);
    }

    #[test]
    fn update_matches_fd_of_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (s, cb) = single(vals.clone(), vec![-0.8, -0.05, 0.6]);
        let idx = quantize_store(&s, &cb).unwrap();
        let cfg = RegConfig { lambda_h: 1.0, lambda_e: 0.1, order: 2, scope: InsensitivityScope::PerLayer };
        let u = regularization_update(&s, &cb, &idx, &vec![0.0; 40], &cfg).unwrap();
        let view = s.group_tuples(2).unwrap();
        let r = |st: &ParamStore| {
            cfg.lambda_h * proxy_entropy(st, &cb, &view).unwrap() + cfg.lambda_e * reconstruction_error(st, &cb, &idx).unwrap()
        };
        let h = 1e-6;
        for i in 0..vals.len() {
            let mut v = vals.clone();
            let mut s2 = s.clone();
            v[i] += h;
            s2.set_flat_values(&v).unwrap();
            let up = r(&s2);
            v[i] -= 2.0 * h;
            s2.set_flat_values(&v).unwrap();
            let down = r(&s2);
            let fd = (up - down) / (2.0 * h);
            let rel = (u.update[i] - fd).abs() / fd.abs().max(u.update[i].abs()).max(1e-6);
            assert!(rel < 1e-4, "i={i} {} vs {fd}", u.update[i]);
        }
    }

    #[test]
    fn e_alone_contracts_to_codebook() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut s, cb) = single(vals, vec![-0.6, 0.0, 0.6]);
        let cfg = RegConfig { lambda_h: 0.0, lambda_e: 1.0, order: 1, scope: InsensitivityScope::Off };
        let idx0 = quantize_store(&s, &cb).unwrap();
        let e0 = reconstruction_error(&s, &cb, &idx0).unwrap();
        let lr = 0.1;
        for _ in 0..200 {
            let idx = quantize_store(&s, &cb).unwrap();
            let u = regularization_update(&s, &cb, &idx, &vec![0.0; 64], &cfg).unwrap();
            let v: Vec<f64> = s.flat_values().iter().zip(&u.update).map(|(w, g)| w - lr * g).collect();
            s.set_flat_values(&v).unwrap();
        }
        let idx = quantize_store(&s, &cb).unwrap();
        let e = reconstruction_error(&s, &cb, &idx).unwrap();
        assert!(e < 0.01 * e0, "{e} vs {e0}");
    }

    proptest! {
        #[test]
        fn insensitivity_in_unit_interval_and_scale_free(g in proptest::collection::vec(-10.0f64..10.0, 1..64), c in 0.01f64..100.0) {
            let s = insensitivity(&g).0;
            prop_assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
            let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
            let s2 = insensitivity(&scaled).0;
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
