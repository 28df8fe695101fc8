//! Soft bin membership of a continuous parameter.
//!
//! The two-neighbor linear model is what training uses. The full softmax
//! over all levels is kept for reference checks and diagnostics only.

use crate::lloyd::Codebook;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinAssignment {
    pub q_minus: u32,
    pub q_plus: u32,
    pub delta: f64,
    pub p_minus: f64,
    pub p_plus: f64,
}

impl BinAssignment {
    /// Outside `[r(1), r(N)]`: all mass on the nearest extreme level.
    pub fn is_clamped(&self) -> bool {
        self.q_minus == self.q_plus
    }

    /// Both bracketing bins carry nonzero mass.
    pub fn is_interior(&self) -> bool {
        !self.is_clamped() && self.p_minus > 0.0 && self.p_plus > 0.0
    }

    /// Bins with nonzero mass, with their probabilities.
    pub fn support(&self) -> impl Iterator<Item = (u32, f64)> {
        let minus = (self.p_minus > 0.0).then_some((self.q_minus, self.p_minus));
        let plus = (!self.is_clamped() && self.p_plus > 0.0).then_some((self.q_plus, self.p_plus));
        minus.into_iter().chain(plus)
    }

    /// Probability assigned to bin `xi`.
    pub fn prob(&self, xi: u32) -> f64 {
        if xi == self.q_minus {
            self.p_minus
        } else if xi == self.q_plus {
            self.p_plus
        } else {
            0.0
        }
    }
}

/// Brackets `w` with `[r(k), r(k+1))`; `w = r(N)` uses the last interval.
pub fn assign_neighbors(w: f64, codebook: &Codebook) -> BinAssignment {
    let levels = codebook.levels();
    let n = levels.len();
    if w < levels[0] {
        return clamp_at(1, levels[1] - levels[0]);
    }
    if w > levels[n - 1] {
        return clamp_at(n as u32, levels[n - 1] - levels[n - 2]);
    }
    // number of levels <= w, at least 1 here
    let k = levels.partition_point(|&r| r <= w).min(n - 1);
    let lo = levels[k - 1];
    let hi = levels[k];
    let delta = hi - lo;
    BinAssignment {
        q_minus: k as u32,
        q_plus: k as u32 + 1,
        delta,
        p_minus: (hi - w) / delta,
        p_plus: (w - lo) / delta,
    }
}

fn clamp_at(q: u32, delta: f64) -> BinAssignment {
    BinAssignment {
        q_minus: q,
        q_plus: q,
        delta,
        p_minus: 1.0,
        p_plus: 0.0,
    }
}

/// `p(k) ∝ exp(-|w - r(k)|)` over all levels.
pub fn softmax_probs(w: f64, codebook: &Codebook) -> Vec<f64> {
    let neg_dist: Vec<f64> = codebook.levels().iter().map(|&r| -(w - r).abs()).collect();
    let max = neg_dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg_dist.iter().map(|&d| (d - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit() -> Codebook {
        Codebook::new(0, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn quarter_point() {
        let a = assign_neighbors(0.25, &unit());
        assert_eq!((a.q_minus, a.q_plus), (1, 2));
        assert!((a.p_minus - 0.75).abs() < 1e-15);
        assert!((a.p_plus - 0.25).abs() < 1e-15);
        assert_eq!(a.delta, 1.0);
    }

    #[test]
    fn at_lower_level_and_midpoint() {
        let a = assign_neighbors(0.0, &unit());
        assert_eq!((a.p_minus, a.p_plus), (1.0, 0.0));
        assert!(!a.is_interior());
        let a = assign_neighbors(0.5, &unit());
        assert_eq!((a.p_minus, a.p_plus), (0.5, 0.5));
    }

    #[test]
    fn interior_level_uses_upper_interval() {
        let cb = Codebook::new(0, vec![-1.0, 0.0, 2.0]).unwrap();
        let a = assign_neighbors(0.0, &cb);
        assert_eq!((a.q_minus, a.q_plus, a.delta), (2, 3, 2.0));
        assert_eq!(a.p_minus, 1.0);
        let top = assign_neighbors(2.0, &cb);
        assert_eq!((top.q_minus, top.q_plus, top.p_plus), (2, 3, 1.0));
    }

    #[test]
    fn clamps_outside_range() {
        let cb = Codebook::new(0, vec![-1.0, 0.0, 2.0]).unwrap();
        let a = assign_neighbors(-5.0, &cb);
        assert!(a.is_clamped());
        assert_eq!((a.q_minus, a.p_minus, a.delta), (1, 1.0, 1.0));
        let a = assign_neighbors(7.0, &cb);
        assert_eq!((a.q_minus, a.q_plus, a.p_minus, a.delta), (3, 3, 1.0, 2.0));
        assert_eq!(a.support().count(), 1);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(0.5, &unit());
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        // direct evaluation: 1 / (1 + e^-1)
        let e = (-1.0f64).exp();
        let p = softmax_probs(0.0, &unit());
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((p[0] - 0.731).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(w in -10.0f64..10.0, raw in proptest::collection::vec(-5.0f64..5.0, 2..16)) {
            let mut levels = raw;
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            prop_assume!(levels.len() >= 2);
            let p = softmax_probs(w, &Codebook::new(0, levels).unwrap());
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn neighbor_probs_are_a_distribution(w in -3.0f64..3.0) {
            let cb = Codebook::new(0, vec![-2.0, -0.5, 0.1, 1.7]).unwrap();
            let a = assign_neighbors(w, &cb);
            prop_assert!((a.p_minus + a.p_plus - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.p_minus) && (0.0..=1.0).contains(&a.p_plus));
            if !a.is_clamped() {
                prop_assert_eq!(a.q_plus, a.q_minus + 1);
                let lo = cb.level(a.q_minus);
                let hi = cb.level(a.q_plus);
                prop_assert!(lo <= w && w <= hi);
                if lo < w && w < hi {
                    prop_assert!(a.is_interior());
                }
            }
        }

        #[test]
        fn slope_is_inverse_width(w in 0.01f64..0.49) {
            let cb = Codebook::new(0, vec![0.0, 0.5, 2.0]).unwrap();
            let h = 1e-7;
            let slope = (assign_neighbors(w + h, &cb).p_plus - assign_neighbors(w - h, &cb).p_plus) / (2.0 * h);
            prop_assert!((slope - 1.0 / 0.5).abs() < 1e-6);
        }

        #[test]
        fn converges_to_one_hot_at_levels(k in 0usize..3, eps in 1e-12f64..1e-6) {
            let cb = Codebook::new(0, vec![-1.0, 0.0, 1.0]).unwrap();
            let r = cb.levels()[k];
            let a = assign_neighbors(r + eps.min(0.5) * if k == 2 { -1.0 } else { 1.0 }, &cb);
            let p = a.prob(k as u32 + 1);
            prop_assert!((p - 1.0).abs() < 2e-6);
        }
    }
}
