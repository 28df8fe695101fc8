//! Dense feed-forward classifier: ReLU hidden layers, softmax
//! cross-entropy output. Parameters live in a [`ParamStore`] as
//! `fc{i}.weight` (`[out, in]`, row-major) followed by `fc{i}.bias`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{HempError, Result};
use crate::param_store::ParamStore;
use crate::rng::named_rng;

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Weights and biases uniform in `±1/√fan_in`.
    #[default]
    Uniform,
    /// Weights normal with std `√(2/fan_in)`, zero biases.
    He,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(HempError::invalid("an MLP needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(HempError::invalid("layer widths must be positive"));
        }
        Ok(MlpSpec { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn dense_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Checks that `store` holds exactly this network's tensors.
    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let layers = store.layers();
        if layers.len() != 2 * self.dense_layers() {
            return Err(HempError::ShapeMismatch(format!(
                "{} tensors for a {}-layer MLP",
                layers.len(),
                self.dense_layers()
            )));
        }
        for (i, w) in self.widths.windows(2).enumerate() {
            if layers[2 * i].shape != [w[1], w[0]] || layers[2 * i + 1].shape != [w[1]] {
                return Err(HempError::ShapeMismatch(format!("dense layer {i} does not match {}x{}", w[0], w[1])));
            }
        }
        Ok(())
    }

    /// Default ([`Init::Uniform`]) initialization.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        self.init_with(seed, Init::Uniform)
    }

    pub fn init_with(&self, seed: u64, scheme: Init) -> Result<ParamStore> {
        let mut rng = named_rng(seed, "init");
        let mut store = ParamStore::new();
        for (i, w) in self.widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let (weights, biases): (Vec<f64>, Vec<f64>) = match scheme {
                Init::Uniform => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (
                        (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                        (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                    )
                }
                Init::He => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    ((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(), vec![0.0; fan_out])
                }
            };
            store.push_layer(format!("fc{i}.weight"), vec![fan_out, fan_in], weights)?;
            store.push_layer(format!("fc{i}.bias"), vec![fan_out], biases)?;
        }
        Ok(store)
    }

    /// Recovers the widths from a store's `[out, in]` / `[out]` tensor pairs.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let layers = store.layers();
        if layers.is_empty() || !layers.len().is_multiple_of(2) {
            return Err(HempError::ShapeMismatch("expected weight/bias tensor pairs".into()));
        }
        let mut widths = Vec::new();
        for pair in layers.chunks(2) {
            let [out, inp] = pair[0].shape[..] else {
                return Err(HempError::ShapeMismatch(format!("{} is not a matrix", pair[0].name)));
            };
            match widths.last() {
                None => widths.push(inp),
                Some(&prev) if prev == inp => {}
                Some(_) => return Err(HempError::ShapeMismatch(format!("{} does not chain", pair[0].name))),
            }
            widths.push(out);
        }
        let spec = Self::new(widths)?;
        spec.check(store)?;
        Ok(spec)
    }

    /// Inverse of `Display`: `"784x32x10"`.
    pub fn parse(s: &str) -> Result<Self> {
        let widths = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>().map_err(|_| HempError::invalid(format!("bad architecture {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

impl std::fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let fan_in = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(o, &bias)| {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }));
}

/// Activations of every layer for one sample; the last entry is the logits.
fn forward_all(spec: &MlpSpec, store: &ParamStore, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(spec.widths.len());
    acts.push(x.to_vec());
    for l in 0..spec.dense_layers() {
        let mut z = Vec::new();
        dense_forward(&store.layer(2 * l).values, &store.layer(2 * l + 1).values, &acts[l], &mut z);
        if l + 1 < spec.dense_layers() {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    acts
}

/// `(−log softmax(z)[label], softmax(z))`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

fn check_batch(spec: &MlpSpec, data: &Dataset, batch: &[usize]) -> Result<()> {
    if data.dim != spec.input_dim() {
        return Err(HempError::ShapeMismatch(format!(
            "data has {} features, network expects {}",
            data.dim,
            spec.input_dim()
        )));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(HempError::invalid(format!("sample {i} out of range")));
    }
    if let Some(&c) = batch.iter().map(|&i| &data.labels[i]).find(|&&c| c as usize >= spec.output_dim()) {
        return Err(HempError::invalid(format!("label {c} exceeds output width")));
    }
    Ok(())
}

/// Mean cross-entropy over `batch` (sample indices into `data`) and its
/// exact gradient in the store's flat order. A non-finite loss is an error.
pub fn forward_backward(spec: &MlpSpec, store: &ParamStore, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = forward_backward_raw(spec, store, data, batch)?;
    if !loss.is_finite() {
        return Err(HempError::invalid(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}

/// [`forward_backward`] without the finiteness check, for callers that
/// handle divergence themselves.
pub fn forward_backward_raw(spec: &MlpSpec, store: &ParamStore, data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    spec.check(store)?;
    check_batch(spec, data, batch)?;
    if batch.is_empty() {
        return Err(HempError::invalid("empty batch"));
    }
    let offsets = store.layer_offsets();
    let mut grads = vec![0.0; store.total_count()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    let depth = spec.dense_layers();

    for &s in batch {
        let acts = forward_all(spec, store, data.sample(s));
        let (l, probs) = softmax_xent(&acts[depth], data.labels[s] as usize);
        loss += l;
        let mut delta = probs;
        delta[data.labels[s] as usize] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= scale);

        for layer in (0..depth).rev() {
            let input = &acts[layer];
            let fan_in = input.len();
            let (w_off, b_off) = (offsets[2 * layer], offsets[2 * layer + 1]);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grads[b_off + o] += d;
                let row = &mut grads[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, &x)| *g += d * x);
            }
            if layer > 0 {
                let w = &store.layer(2 * layer).values;
                let mut prev = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]).for_each(|(p, &wv)| *p += d * wv);
                    }
                }
                // ReLU derivative taken as 0 at the kink
                prev.iter_mut().zip(input).for_each(|(p, &a)| {
                    if a <= 0.0 {
                        *p = 0.0
                    }
                });
                delta = prev;
            }
        }
    }
    Ok((loss * scale, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and top-1 accuracy over a whole split. Ties in the logits go
/// to the lowest class id.
pub fn evaluate(spec: &MlpSpec, store: &ParamStore, data: &Dataset) -> Result<Evaluation> {
    spec.check(store)?;
    let all: Vec<usize> = (0..data.len()).collect();
    check_batch(spec, data, &all)?;
    if data.is_empty() {
        return Err(HempError::invalid("empty evaluation set"));
    }
    let per_sample: Vec<(f64, bool)> = all
        .par_iter()
        .map(|&s| {
            let acts = forward_all(spec, store, data.sample(s));
            let logits = &acts[spec.dense_layers()];
            let label = data.labels[s] as usize;
            let (loss, _) = softmax_xent(logits, label);
            let pred = logits
                .iter()
                .enumerate()
                .fold(0, |best, (k, &z)| if z > logits[best] { k } else { best });
            (loss, pred == label)
        })
        .collect();
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: per_sample.iter().map(|p| p.0).sum::<f64>() / n,
        accuracy: per_sample.iter().filter(|p| p.1).count() as f64 / n,
    })
}
