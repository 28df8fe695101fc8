use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use hemp_core::codec::{self, QuantizedModel};
use hemp_core::datasets::{self, Splits};
use hemp_core::diagnostics::{self, DEFAULT_SKIP_FRACTION};
use hemp_core::lloyd::{quantize_store, Codebook};
use hemp_core::mlp::{self, Init, MlpSpec};
use hemp_core::param_store::ParamStore;
use hemp_core::regularizer::{InsensitivityScope, RegConfig};
use hemp_core::rng::named_rng;
use hemp_core::trainer::{self, BiasQuant, TrainConfig};

use crate::{BiasMode, Command, CompressArgs, DataArgs, DatasetKind, DecompressArgs, DiagnoseArgs, EvalArgs, InitMode, Scope, TrainArgs};

/// A flag value that parsed but makes no sense.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Continuous parameters as written by `train` and `decompress`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub arch: String,
    pub store: ParamStore,
}

impl Checkpoint {
    fn load(path: &Path) -> Result<(MlpSpec, ParamStore)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            hemp_core::datasets::DataError::Invalid(format!("{}: {e}", path.display()))
        })?;
        // rebuild so the store's invariants are checked
        let mut store = ParamStore::new();
        for l in ck.store.layers() {
            store.push_layer(l.name.clone(), l.shape.clone(), l.values.clone())?;
        }
        let spec = MlpSpec::parse(&ck.arch)?;
        spec.check(&store)?;
        Ok((spec, store))
    }

    fn save(path: &Path, spec: &MlpSpec, store: &ParamStore) -> Result<()> {
        let ck = Checkpoint {
            arch: spec.to_string(),
            store: store.clone(),
        };
        let json = serde_json::to_string(&ck)?;
        fs::write(path, json).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn bias_quant(m: BiasMode) -> BiasQuant {
    match m {
        BiasMode::Shared => BiasQuant::Shared,
        BiasMode::Own => BiasQuant::Own,
    }
}

fn data_root(explicit: &Option<PathBuf>) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let local = PathBuf::from("data");
    let fallback = if local.is_dir() {
        local
    } else {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
    };
    datasets::data_dir(&fallback)
}

fn load_splits(args: &DataArgs, spec: &MlpSpec) -> Result<Splits> {
    match args.dataset {
        DatasetKind::Mnist => {
            if spec.input_dim() != 784 || spec.output_dim() != 10 {
                return Err(usage(format!("MNIST needs 784 inputs and 10 outputs, got {spec}")));
            }
            let root = data_root(&args.data_dir);
            Ok(datasets::mnist_subset(&root, args.train_size, args.test_size, args.seed)?)
        }
        DatasetKind::Synth => {
            let classes = spec.output_dim();
            let per = |n: usize| n.div_ceil(classes).max(1);
            Ok(datasets::synth_splits(
                classes,
                per(args.train_size),
                per(args.test_size),
                spec.input_dim(),
                1.0,
                args.seed,
            )?)
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = MlpSpec::parse(&a.arch)?;
    let cfg = TrainConfig {
        lr: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.data.seed,
        levels: a.levels,
        reg: RegConfig {
            lambda_h: a.lambda_h,
            lambda_e: a.lambda_e,
            order: a.order,
            scope: match a.insensitivity {
                Scope::PerLayer => InsensitivityScope::PerLayer,
                Scope::Global => InsensitivityScope::Global,
                Scope::Off => InsensitivityScope::Off,
            },
        },
        refit_every: a.refit_every,
        bias_quant: bias_quant(a.bias_codebook),
        init: match a.init {
            InitMode::Uniform => Init::Uniform,
            InitMode::He => Init::He,
        },
    };
    cfg.validate()?;
    let splits = load_splits(&a.data, &spec)?;
    log::info!(
        "training {spec} on {} samples ({} test), n={} N={}",
        splits.train.len(),
        splits.test.len(),
        cfg.reg.order,
        cfg.levels
    );
    let outcome = trainer::train_with(&spec, &splits, &cfg, |m| {
        log::info!(
            "epoch {:>3}  loss {:.4}/{:.4}  acc {:.4}/{:.4}  H {:.4} Ĥ {:.4}  E {:.5}  {} B",
            m.epoch,
            m.loss_w,
            m.loss_wq,
            m.acc_w,
            m.acc_wq,
            m.h_proxy,
            m.h_true,
            m.e_term,
            m.est_bytes
        )
    })?;
    if outcome.collapsed {
        log::warn!("some codebooks collapsed to fewer distinct levels");
    }

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let model_path = a.out_dir.join("model.hemp");
    let bytes = codec::encode(&outcome.quantized_model(cfg.reg.order)?)?;
    fs::write(&model_path, &bytes).with_context(|| format!("writing {}", model_path.display()))?;
    let metrics_path = a.out_dir.join("metrics.csv");
    let file = fs::File::create(&metrics_path).with_context(|| format!("writing {}", metrics_path.display()))?;
    trainer::write_metrics_csv(BufWriter::new(file), &outcome.history)?;
    Checkpoint::save(&a.out_dir.join("checkpoint.json"), &spec, &outcome.store)?;
    println!("model {} ({} bytes)", model_path.display(), bytes.len());
    println!("metrics {}", metrics_path.display());
    Ok(())
}

fn compress(a: CompressArgs) -> Result<()> {
    let (_, store) = Checkpoint::load(&a.checkpoint)?;
    if a.levels < 2 {
        return Err(usage("--levels must be at least 2"));
    }
    if !(1..=8).contains(&a.order) {
        return Err(usage("--order must lie in 1..=8"));
    }
    let (codebooks, collapsed) = trainer::fit_codebooks(&store, a.levels, bias_quant(a.bias_codebook), None)?;
    if collapsed {
        log::warn!("some codebooks collapsed to fewer distinct levels");
    }
    let indices = quantize_store(&store, &codebooks)?;
    let model = QuantizedModel::from_store(&store, &codebooks, &indices, a.order)?;
    let bytes = codec::encode(&model)?;
    fs::write(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(raw) = &a.raw {
        let dump = codec::export_raw_indices(&indices, &codebooks)?;
        fs::write(raw, dump).with_context(|| format!("writing {}", raw.display()))?;
    }
    println!("{} ({} bytes)", a.out.display(), bytes.len());
    Ok(())
}

fn read_container(path: &Path) -> Result<QuantizedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(codec::decode(&bytes).map_err(hemp_core::HempError::from)?)
}

fn decompress(a: DecompressArgs) -> Result<()> {
    let model = read_container(&a.input)?;
    let store = model.to_store()?;
    let spec = MlpSpec::from_store(&store)?;
    Checkpoint::save(&a.out, &spec, &store)?;
    for l in &model.layers {
        println!("{:<12} {:?} N={}", l.name, l.shape, l.codebook.level_count());
    }
    println!("{} ({spec})", a.out.display());
    Ok(())
}

fn load_any(path: &Path) -> Result<(MlpSpec, ParamStore)> {
    if path.extension().is_some_and(|e| e == "json") {
        Checkpoint::load(path)
    } else {
        let store = read_container(path)?.to_store()?;
        Ok((MlpSpec::from_store(&store)?, store))
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let (spec, store) = load_any(&a.model)?;
    let splits = load_splits(&a.data, &spec)?;
    let ev = mlp::evaluate(&spec, &store, &splits.test)?;
    let size = fs::metadata(&a.model)?.len();
    println!("top1 {:.4}", ev.accuracy);
    println!("loss {:.6}", ev.loss);
    println!("bytes {size}");
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    if a.levels < 2 {
        return Err(usage("--levels must be at least 2"));
    }
    let (store, codebooks): (ParamStore, Vec<Codebook>) = match &a.model {
        Some(path) => {
            let (_, store) = load_any(path)?;
            let (cbs, _) = trainer::fit_codebooks(&store, a.levels, BiasQuant::Shared, None)?;
            (store, cbs)
        }
        None => {
            if a.params == 0 {
                return Err(usage("--params must be positive"));
            }
            diagnostics::random_problem(a.seed, a.params, a.levels)?
        }
    };
    let total = store.total_count();
    let mut picked: Vec<usize> = (0..total).collect();
    if total > a.samples {
        picked.shuffle(&mut named_rng(a.seed, "diagnose-sample"));
        picked.truncate(a.samples);
        picked.sort_unstable();
    }

    let file = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "kind,order,index,a,b,error")?;

    for n in 1..=3 {
        let check = diagnostics::gradient_check(&store, &codebooks, n, Some(&picked), DEFAULT_SKIP_FRACTION)?;
        for r in &check.rows {
            writeln!(csv, "grad,{n},{},{},{},{}", r.param, r.analytic, r.numeric, r.rel_error)?;
        }
        println!(
            "gradient n={n}: {} checked, {} skipped, max rel error {:.3e}",
            check.rows.len(),
            check.skipped,
            check.max_rel_error()
        );
    }

    let stationary_params: Vec<usize> = picked.iter().copied().take(16).collect();
    let stationary = diagnostics::stationary_checks(&store, &codebooks, &stationary_params)?;
    let mut worst = 0.0f64;
    for s in &stationary {
        let diff = (s.closed_form - s.numeric_root).abs();
        worst = worst.max(diff);
        writeln!(csv, "stationary,1,{},{},{},{}", s.param, s.closed_form, s.numeric_root, diff)?;
    }
    println!("stationary: {} points, max |closed − root| {worst:.3e}", stationary.len());

    let sweep = diagnostics::bound_sweep(&store, &codebooks, Some(&picked))?;
    writeln!(csv, "bound,1,{},{},{},{}", sweep.checked, sweep.max_ratio, 1.0, sweep.violations)?;
    println!("bound: {} checked, {} violations, max |g|/bound {:.6}", sweep.checked, sweep.violations, sweep.max_ratio);

    for r in diagnostics::entropy_table(&store, &codebooks, &[1, 2, 3])? {
        writeln!(csv, "entropy,{},,{},{},{}", r.order, r.h_proxy, r.h_true, (r.h_proxy - r.h_true).abs())?;
        println!(
            "entropy n={}: H {:.4}  Ĥ {:.4}  per symbol {:.4} / {:.4}",
            r.order, r.h_proxy, r.h_true, r.per_symbol_proxy, r.per_symbol_true
        );
    }
    csv.flush()?;
    println!("report {}", a.out.display());
    Ok(())
}
