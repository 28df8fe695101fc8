//! SGD-with-momentum training of an [`MlpSpec`] with the entropy/E
//! regularizer pulling parameters toward their quantized values.
//!
//! Each step: loss gradient on a mini-batch, quantization against the
//! current codebooks, regularization update, then
//! `v ← μ·v + (∂L + update)`, `w ← w − lr·v`. Codebooks are refit by
//! Lloyd-Max (warm-started) every `refit_every` epochs, and one
//! [`EpochMetrics`] row is logged per epoch, plus an epoch-0 row for the
//! initial state.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{self, QuantizedModel};
use crate::datasets::Splits;
use crate::entropy::entropy_report;
use crate::error::{HempError, Result};
use crate::lloyd::{
    fit_lloyd_max, fit_lloyd_max_from, quantize_store, reconstruct_map, Codebook, IndexMap, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::mlp::{self, Init, MlpSpec};
use crate::param_store::ParamStore;
use crate::regularizer::{regularization_update, RegConfig};
use crate::rng::named_rng;

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// How bias tensors are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasQuant {
    /// One codebook per dense layer, fit on its weights and bias together.
    #[default]
    Shared,
    /// Biases get their own codebook.
    Own,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub levels: usize,
    pub reg: RegConfig,
    pub refit_every: usize,
    pub bias_quant: BiasQuant,
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 100,
            epochs: 30,
            seed: 7,
            levels: 3,
            reg: RegConfig::default(),
            refit_every: 1,
            bias_quant: BiasQuant::Shared,
            init: Init::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HempError::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(HempError::invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.refit_every == 0 {
            return Err(HempError::invalid("batch size, epochs and refit interval must be positive"));
        }
        if self.levels < 2 || self.levels > u16::MAX as usize {
            return Err(HempError::invalid("levels must lie in 2..=65535"));
        }
        self.reg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch (0 for the initial row).
    pub train_loss: f64,
    /// Test loss of the continuous parameters.
    pub loss_w: f64,
    /// Test loss of the quantized parameters.
    pub loss_wq: f64,
    pub acc_w: f64,
    pub acc_wq: f64,
    /// Proxy entropy per n-tuple, in bits.
    pub h_proxy: f64,
    /// Empirical entropy per n-tuple, in bits.
    pub h_true: f64,
    pub e_term: f64,
    /// Size of the encoded container.
    pub est_bytes: usize,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss_w,loss_wq,acc_w,acc_wq,h_proxy,h_true,e_term,est_bytes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_w,
            self.loss_wq,
            self.acc_w,
            self.acc_wq,
            self.h_proxy,
            self.h_true,
            self.e_term,
            self.est_bytes
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, history: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{}", EpochMetrics::CSV_HEADER)?;
    for m in history {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: MlpSpec,
    pub store: ParamStore,
    pub codebooks: Vec<Codebook>,
    pub indices: IndexMap,
    pub history: Vec<EpochMetrics>,
    /// Some fit had fewer distinct values than requested levels.
    pub collapsed: bool,
}

impl TrainOutcome {
    pub fn quantized_model(&self, order: usize) -> Result<QuantizedModel> {
        Ok(QuantizedModel::from_store(&self.store, &self.codebooks, &self.indices, order)?)
    }

    pub fn quantized_store(&self) -> Result<ParamStore> {
        dequantize(&self.store, &self.codebooks, &self.indices)
    }
}

/// Store with every value replaced by its reconstruction level.
pub fn dequantize(store: &ParamStore, codebooks: &[Codebook], indices: &IndexMap) -> Result<ParamStore> {
    let mut out = store.clone();
    let flat: Vec<f64> = reconstruct_map(indices, codebooks)?.into_iter().flatten().collect();
    out.set_flat_values(&flat)?;
    Ok(out)
}

fn fit_one(values: &[f64], levels: usize, warm: Option<&Codebook>) -> Result<(Vec<f64>, bool)> {
    let fit = match warm {
        Some(cb) if cb.level_count() == levels => fit_lloyd_max_from(values, cb.levels(), DEFAULT_TOL, DEFAULT_MAX_ITER)?,
        _ => fit_lloyd_max(values, levels, DEFAULT_TOL, DEFAULT_MAX_ITER)?,
    };
    Ok((fit.codebook.levels().to_vec(), fit.collapsed))
}

/// Lloyd-Max codebooks for an MLP store (tensors in weight/bias pairs),
/// warm-started from `warm` when given.
pub fn fit_codebooks(
    store: &ParamStore,
    levels: usize,
    bias_quant: BiasQuant,
    warm: Option<&[Codebook]>,
) -> Result<(Vec<Codebook>, bool)> {
    let layers = store.layers();
    if !layers.len().is_multiple_of(2) {
        return Err(HempError::ShapeMismatch("expected weight/bias tensor pairs".into()));
    }
    let mut out = Vec::with_capacity(layers.len());
    let mut collapsed = false;
    for pair in 0..layers.len() / 2 {
        let (w, b) = (&layers[2 * pair], &layers[2 * pair + 1]);
        let warm_w = warm.map(|c| &c[2 * pair]);
        let warm_b = warm.map(|c| &c[2 * pair + 1]);
        match bias_quant {
            BiasQuant::Shared => {
                let joint: Vec<f64> = w.values.iter().chain(&b.values).copied().collect();
                let (lv, c) = fit_one(&joint, levels, warm_w)?;
                collapsed |= c;
                out.push(Codebook::new(2 * pair, lv.clone())?);
                out.push(Codebook::new(2 * pair + 1, lv)?);
            }
            BiasQuant::Own => {
                let (lw, cw) = fit_one(&w.values, levels, warm_w)?;
                let (lb, cb) = fit_one(&b.values, levels, warm_b)?;
                collapsed |= cw | cb;
                out.push(Codebook::new(2 * pair, lw)?);
                out.push(Codebook::new(2 * pair + 1, lb)?);
            }
        }
    }
    Ok((out, collapsed))
}

fn measure(
    spec: &MlpSpec,
    splits: &Splits,
    store: &ParamStore,
    codebooks: &[Codebook],
    order: usize,
    epoch: usize,
    train_loss: f64,
) -> Result<(EpochMetrics, IndexMap)> {
    let indices = quantize_store(store, codebooks)?;
    let quantized = dequantize(store, codebooks, &indices)?;
    let cont = mlp::evaluate(spec, store, &splits.test)?;
    let quant = mlp::evaluate(spec, &quantized, &splits.test)?;
    let report = entropy_report(store, codebooks, order)?;
    let e_term = crate::regularizer::reconstruction_error(store, codebooks, &indices)?;
    let model = QuantizedModel::from_store(store, codebooks, &indices, order)?;
    let est_bytes = codec::encode(&model)?.len();
    let m = EpochMetrics {
        epoch,
        train_loss,
        loss_w: cont.loss,
        loss_wq: quant.loss,
        acc_w: cont.accuracy,
        acc_wq: quant.accuracy,
        h_proxy: report.h_proxy,
        h_true: report.h_true,
        e_term,
        est_bytes,
    };
    Ok((m, indices))
}

pub fn train(spec: &MlpSpec, splits: &Splits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(spec, splits, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every logged row.
pub fn train_with(
    spec: &MlpSpec,
    splits: &Splits,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let store = spec.init_with(cfg.seed, cfg.init)?;
    train_from(spec, splits, cfg, store, on_epoch)
}

/// Trains starting from the given parameters.
pub fn train_from(
    spec: &MlpSpec,
    splits: &Splits,
    cfg: &TrainConfig,
    mut store: ParamStore,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.check(&store)?;
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(HempError::invalid("training and test splits must be non-empty"));
    }
    let order = cfg.reg.order;
    let (mut codebooks, mut collapsed) = fit_codebooks(&store, cfg.levels, cfg.bias_quant, None)?;
    let (first, mut indices) = measure(spec, splits, &store, &codebooks, order, 0, 0.0)?;
    on_epoch(&first);
    let mut history = vec![first];

    let mut rng = named_rng(cfg.seed, "batches");
    let mut order_buf: Vec<usize> = (0..splits.train.len()).collect();
    let offsets = store.layer_offsets();

    for epoch in 1..=cfg.epochs {
        order_buf.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order_buf.chunks(cfg.batch_size) {
            let (loss, mut grads) = mlp::forward_backward_raw(spec, &store, &splits.train, batch)?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(HempError::Diverged { epoch, loss });
            }
            loss_sum += loss;
            batches += 1;
            if !cfg.reg.is_disabled() {
                let step_indices = quantize_store(&store, &codebooks)?;
                let reg = regularization_update(&store, &codebooks, &step_indices, &grads, &cfg.reg)?;
                grads.iter_mut().zip(&reg.update).for_each(|(g, u)| *g += u);
            }
            for (l, &off) in offsets.iter().enumerate() {
                let (values, velocity) = store.layer_mut(l);
                let g = &grads[off..off + values.len()];
                for ((w, v), &g) in values.iter_mut().zip(velocity.iter_mut()).zip(g) {
                    *v = cfg.momentum * *v + g;
                    *w -= cfg.lr * *v;
                }
            }
        }
        if epoch % cfg.refit_every == 0 {
            let (cbs, c) = fit_codebooks(&store, cfg.levels, cfg.bias_quant, Some(&codebooks))?;
            codebooks = cbs;
            collapsed |= c;
        }
        let (m, idx) = measure(spec, splits, &store, &codebooks, order, epoch, loss_sum / batches as f64)?;
        indices = idx;
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome {
        spec: spec.clone(),
        store,
        codebooks,
        indices,
        history,
        collapsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_splits, Dataset};
    use crate::regularizer::InsensitivityScope;
    use rand::Rng;

    fn small() -> (MlpSpec, Splits) {
        (MlpSpec::new(vec![8, 12, 4]).unwrap(), synth_splits(4, 50, 25, 8, 0.7, 11).unwrap())
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            lr: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_regularizer_is_plain_sgd() {
        let (spec, splits) = small();
        let mut cfg = quick(3);
        cfg.reg.lambda_h = 0.0;
        cfg.reg.lambda_e = 0.0;
        let out = train(&spec, &splits, &cfg).unwrap();

        let mut store = spec.init(cfg.seed).unwrap();
        let mut velocity = vec![0.0; store.total_count()];
        let mut rng = named_rng(cfg.seed, "batches");
        let mut perm: Vec<usize> = (0..splits.train.len()).collect();
        for _ in 0..cfg.epochs {
            perm.shuffle(&mut rng);
            for batch in perm.chunks(cfg.batch_size) {
                let (_, g) = mlp::forward_backward(&spec, &store, &splits.train, batch).unwrap();
                let mut w = store.flat_values();
                for i in 0..w.len() {
                    velocity[i] = cfg.momentum * velocity[i] + g[i];
                    w[i] -= cfg.lr * velocity[i];
                }
                store.set_flat_values(&w).unwrap();
            }
        }
        let a: Vec<u64> = out.store.flat_values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = store.flat_values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let (spec, splits) = small();
        let a = train(&spec, &splits, &quick(2)).unwrap();
        let b = train(&spec, &splits, &quick(2)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.store.flat_values(), b.store.flat_values());
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn logs_initial_and_every_epoch() {
        let (spec, splits) = small();
        let out = train(&spec, &splits, &quick(4)).unwrap();
        assert_eq!(out.history.len(), 5);
        assert_eq!(out.history.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let last = out.history.last().unwrap();
        assert!(last.acc_w > 0.9, "synthetic blobs should be learnable: {}", last.acc_w);
        for m in &out.history {
            for v in [m.loss_w, m.loss_wq, m.h_proxy, m.h_true, m.e_term] {
                assert!(v.is_finite());
            }
        }
        let bytes = codec::encode(&out.quantized_model(2).unwrap()).unwrap();
        assert_eq!(bytes.len(), last.est_bytes);
    }

    #[test]
    fn final_indices_match_store() {
        let (spec, splits) = small();
        let out = train(&spec, &splits, &quick(2)).unwrap();
        assert_eq!(out.indices, quantize_store(&out.store, &out.codebooks).unwrap());
        let q = out.quantized_store().unwrap();
        let again = mlp::evaluate(&spec, &q, &splits.test).unwrap();
        assert_eq!(again.accuracy, out.history.last().unwrap().acc_wq);
    }

    #[test]
    fn shared_and_own_bias_codebooks() {
        let (spec, _) = small();
        let store = spec.init(3).unwrap();
        let (shared, _) = fit_codebooks(&store, 3, BiasQuant::Shared, None).unwrap();
        assert_eq!(shared.len(), 4);
        assert_eq!(shared[0].levels(), shared[1].levels());
        assert_eq!(shared[1].layer_id, 1);
        let (own, _) = fit_codebooks(&store, 3, BiasQuant::Own, None).unwrap();
        assert_ne!(own[0].levels(), own[1].levels());
    }

    #[test]
    fn divergence_aborts() {
        let (spec, splits) = small();
        let cfg = TrainConfig {
            lr: 1e6,
            momentum: 0.0,
            ..quick(5)
        };
        assert!(matches!(train(&spec, &splits, &cfg), Err(HempError::Diverged { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let (spec, splits) = small();
        for cfg in [
            TrainConfig { lr: 0.0, ..quick(1) },
            TrainConfig { momentum: 1.0, ..quick(1) },
            TrainConfig { levels: 1, ..quick(1) },
            TrainConfig { batch_size: 0, ..quick(1) },
        ] {
            assert!(train(&spec, &splits, &cfg).is_err());
        }
        let mut cfg = quick(1);
        cfg.reg.order = 0;
        assert!(train(&spec, &splits, &cfg).is_err());
    }

    #[test]
    fn untrained_net_is_at_chance_on_random_labels() {
        let spec = MlpSpec::new(vec![8, 16, 10]).unwrap();
        let store = spec.init(9).unwrap();
        let mut rng = named_rng(9, "labels");
        let data = Dataset {
            features: (0..1000 * 8).map(|_| rng.gen_range(0.0..1.0)).collect(),
            dim: 8,
            rows: 1,
            cols: 8,
            labels: (0..1000).map(|_| rng.gen_range(0..10u8)).collect(),
            classes: 10,
        };
        let ev = mlp::evaluate(&spec, &store, &data).unwrap();
        assert!((ev.accuracy - 0.1).abs() <= 0.03, "{}", ev.accuracy);
    }

    #[test]
    fn entropy_falls_under_regularization() {
        let (spec, splits) = small();
        let cfg = TrainConfig {
            reg: RegConfig {
                scope: InsensitivityScope::PerLayer,
                ..RegConfig::default()
            },
            ..quick(15)
        };
        let out = train(&spec, &splits, &cfg).unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        assert!(last.h_true < first.h_true, "{} -> {}", first.h_true, last.h_true);
    }

    #[test]
    fn csv_layout() {
        let (spec, splits) = small();
        let out = train(&spec, &splits, &quick(1)).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &out.history).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss_w,loss_wq,acc_w,acc_wq,h_proxy,h_true,e_term,est_bytes");
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 9));
    }
}
