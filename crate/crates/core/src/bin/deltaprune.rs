//! `deltaprune` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use deltaprune::adamr::Regularizer;
use deltaprune::checkpoint::container::{self, load_checkpoint, write_atomic, Payload};
use deltaprune::checkpoint::{apply_delta, compute_delta, delta_stats, from_csr, to_csr, DeltaSet, ModelCheckpoint, QValue};
use deltaprune::harness::{
    evaluate, layer_activations, run_experiment, train, Dataset, ExperimentConfig, ExperimentId, NetDims, Phase,
    TaskSpec, TrainConfig, TwoLayerNet, ZooConfig,
};
use deltaprune::pruners::{feature_norms, prune, FeatureNorm, Method, PruneConfig};
use deltaprune::qsearch::{default_q_grid, find_q_global, find_q_perlayer, layer_stats, Batch, EtaGrid, Objective, PerLayerConfig, SearchConfig};
use deltaprune::theory::{bounds_table, write_bounds_csv, DEFAULT_GAMMA};
use deltaprune::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "deltaprune", version, about = "Prune, search, bound and store delta parameters")]
struct Cli {
    /// Seed for masks, initialization and shuffling.
    #[arg(long, global = true, env = "DPPX_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train/val/test splits of a synthetic task.
    Data(DataArgs),
    /// Pretrain a model, or fine-tune one from `--base` with AdamR.
    Train(TrainArgs),
    /// Dense delta `fine - base`.
    Delta(DeltaArgs),
    /// Prune a delta and store it sparse.
    Prune(PruneArgs),
    /// Search the rescale parameter q.
    FindQ(FindQArgs),
    /// Tabulate the concentration-bound factors over p.
    Bounds(BoundsArgs),
    /// Convert a delta container to CSR storage.
    Pack(PackArgs),
    /// Convert a delta container to dense storage.
    Unpack(PackArgs),
    /// Accuracy of a model, optionally with a delta added.
    Eval(EvalArgs),
    /// Per-layer delta magnitude statistics.
    Stats(StatsArgs),
    /// Run a scripted experiment and write its CSV.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    #[arg(long, default_value = "finetune", value_parser = parse_phase)]
    phase: Phase,
    /// Task description (JSON); defaults to the built-in mixture.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Strip labels (for output-difference calibration sets).
    #[arg(long)]
    unlabeled: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Anchor checkpoint; fine-tunes from it when given.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Training split; defaults to the built-in task for the phase.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value = "none")]
    reg: Regularizer,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Hidden width of a fresh model.
    #[arg(long)]
    hidden: Option<usize>,
    /// Identity normalization in a fresh model.
    #[arg(long)]
    no_norm: bool,
    /// Let the regularizer act on gains and biases too.
    #[arg(long)]
    regularize_vectors: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DeltaArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PruneArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: Option<PathBuf>,
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    q: Option<f64>,
    /// JSON with a `q` (scalar or per-layer list), e.g. find-q output.
    #[arg(long)]
    q_file: Option<PathBuf>,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    /// Calibration inputs for WANDA.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FindQArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: Option<PathBuf>,
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    p: f64,
    #[arg(long, default_value = "val")]
    objective: Objective,
    #[arg(long)]
    per_layer: bool,
    #[arg(long)]
    dq: Option<f64>,
    /// Linear eta step for the per-layer search (log grid otherwise). With
    /// `--per-layer`, `--rounds` counts eta values.
    #[arg(long)]
    deta: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Objective data; labels are needed for `val`.
    #[arg(long)]
    data: PathBuf,
    /// Inputs for the per-layer statistics; defaults to `--data`.
    #[arg(long)]
    stats_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BoundsArgs {
    /// Comma-separated drop rates; defaults to 0.01, 0.02, ..., 0.99.
    #[arg(long, value_delimiter = ',')]
    p_grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    /// Scale by the influence coefficients of this delta.
    #[arg(long)]
    stats_from: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Unit-scale factors only.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Also write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    fine: Option<PathBuf>,
    #[arg(long)]
    delta: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExperimentArgs {
    #[arg(long)]
    id: ExperimentId,
    /// Seeds `seed..seed+N`.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Full experiment configuration (JSON); seeds still come from flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cache trained models here.
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "pretrain" => Ok(Phase::Pretrain),
        "finetune" => Ok(Phase::Finetune),
        other => Err(Error::Usage(format!("unknown phase `{other}`"))),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Domain(_) => 1,
        Error::NonFinite(_) | Error::Divergence(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Data(a) => cmd_data(&a, seed),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Delta(a) => cmd_delta(&a, seed),
        Command::Prune(a) => cmd_prune(&a, seed),
        Command::FindQ(a) => cmd_find_q(&a, seed),
        Command::Bounds(a) => cmd_bounds(&a, seed),
        Command::Pack(a) => cmd_pack(&a, true),
        Command::Unpack(a) => cmd_pack(&a, false),
        Command::Eval(a) => cmd_eval(&a, seed),
        Command::Stats(a) => cmd_stats(&a, seed),
        Command::Experiment(a) => cmd_experiment(&a, seed),
    }
}

fn resolved<T: Serialize>(command: &str, args: &T, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "args": args,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn one_of<'a>(fine: &'a Option<PathBuf>, delta: &'a Option<PathBuf>) -> Result<(Option<&'a Path>, Option<&'a Path>)> {
    match (fine, delta) {
        (Some(f), None) => Ok((Some(f), None)),
        (None, Some(d)) => Ok((None, Some(d))),
        _ => Err(Error::Usage("give exactly one of --fine and --delta".into())),
    }
}

/// Base checkpoint and dense delta from `--fine` or `--delta`.
fn base_and_delta(base: &Path, fine: Option<&Path>, delta: Option<&Path>) -> Result<(ModelCheckpoint, DeltaSet)> {
    let base_ckpt = load_checkpoint(base)?;
    let delta = match (fine, delta) {
        (Some(f), _) => compute_delta(&load_checkpoint(f)?, &base_ckpt)?,
        (None, Some(d)) => from_csr(&container::load_delta(d)?),
        (None, None) => unreachable!("checked by one_of"),
    };
    Ok((base_ckpt, delta))
}

fn rows(data: &Dataset) -> Vec<Vec<f64>> {
    data.inputs().into_iter().map(<[f64]>::to_vec).collect()
}

fn cmd_data(a: &DataArgs, seed: u64) -> Result<()> {
    let spec: TaskSpec = match &a.task {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => TaskSpec::default(),
    };
    let data = spec.generate(a.phase)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let split = if a.unlabeled { split.unlabeled() } else { split.clone() };
        split.save(&a.out_dir.join(format!("{name}.dpds")))?;
    }
    let mut meta = resolved("data", a, seed);
    meta["task"] = serde_json::to_value(&spec)?;
    write_json(&a.out_dir.join("data.json"), &meta)?;
    println!(
        "train={} val={} test={} dim={}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.train.dim()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<()> {
    if a.base.is_some() && (a.hidden.is_some() || a.no_norm) {
        return Err(Error::Usage("--hidden and --no-norm describe a fresh model; drop them with --base".into()));
    }
    if a.base.is_none() && a.reg != Regularizer::None {
        return Err(Error::Usage("--reg needs an anchor; pass --base".into()));
    }
    let zoo = ZooConfig::default();
    let phase = if a.base.is_some() { Phase::Finetune } else { Phase::Pretrain };
    let defaults = if a.base.is_some() { zoo.finetune } else { zoo.pretrain };
    let mut cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size,
        regularize_vectors: a.regularize_vectors,
        seed,
        ..defaults
    };
    cfg.optimizer.lr = a.lr;
    cfg.optimizer.reg = a.reg;
    cfg.optimizer.lambda = a.lambda;
    cfg.optimizer.validate()?;
    let data = match &a.data {
        Some(p) => Dataset::load(p)?,
        None => zoo.task.generate(phase)?.train,
    };
    let (mut net, anchor) = match &a.base {
        Some(b) => {
            let net = TwoLayerNet::from_checkpoint(&load_checkpoint(b)?)?;
            let anchor = net.params().to_vec();
            (net, Some(anchor))
        }
        None => {
            let dims = NetDims {
                input: data.dim(),
                hidden: a.hidden.unwrap_or(zoo.hidden),
                output: data.classes(),
            };
            (TwoLayerNet::init(dims, !a.no_norm, seed), None)
        }
    };
    let history = train(&mut net, &data, anchor.as_deref(), &cfg)?;
    let mut ckpt = net.to_checkpoint();
    let mut meta = resolved("train", a, seed);
    meta["train_config"] = serde_json::to_value(cfg)?;
    ckpt.meta.insert("config".into(), meta.to_string());
    container::save_checkpoint(&a.out, &ckpt)?;
    let last = history.epochs.last();
    println!(
        "epochs={} loss={:.6} train_acc={:.4}",
        history.epochs.len(),
        last.map_or(f64::NAN, |e| e.loss),
        last.map_or(f64::NAN, |e| e.train_acc)
    );
    Ok(())
}

fn cmd_delta(a: &DeltaArgs, seed: u64) -> Result<()> {
    let base = load_checkpoint(&a.base)?;
    let fine = load_checkpoint(&a.fine)?;
    let mut delta = compute_delta(&fine, &base)?;
    delta.meta.config.insert("cli".into(), resolved("delta", a, seed).to_string());
    container::save_dense_delta(&a.out, &delta)?;
    println!("tensors={} mean_abs={:.6e}", delta.entries().len(), delta.mean_abs());
    Ok(())
}

fn read_q_file(path: &Path) -> Result<QValue> {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    let q = v
        .get("selection")
        .and_then(|s| s.get("q"))
        .or_else(|| v.get("q"))
        .ok_or_else(|| Error::CorruptContainer(format!("{}: no `q` field", path.display())))?;
    Ok(serde_json::from_value(q.clone())?)
}

fn prune_config(a: &PruneArgs, seed: u64) -> Result<PruneConfig> {
    let usage = |m: &str| Err(Error::Usage(m.into()));
    let has_q = a.q.is_some() || a.q_file.is_some();
    if a.q.is_some() && a.q_file.is_some() {
        return usage("give at most one of --q and --q-file");
    }
    if a.method != Method::Structured && (a.a.is_some() || a.b.is_some()) {
        return usage("--a and --b only apply to structured pruning");
    }
    if a.method != Method::Wanda && a.calib.is_some() {
        return usage("--calib only applies to wanda");
    }
    let need_p = || a.p.ok_or_else(|| Error::Usage(format!("{} needs --p", a.method.name())));
    let q = match (&a.q, &a.q_file) {
        (Some(q), _) => Some(QValue::Global(*q)),
        (_, Some(f)) => Some(read_q_file(f)?),
        _ => None,
    };
    Ok(match a.method {
        Method::Dare | Method::RandomDrop | Method::Mp | Method::Wanda => {
            if has_q {
                return usage(&format!("{} fixes its own rescale; use drop_rescale_q for a custom q", a.method.name()));
            }
            let p = need_p()?;
            match a.method {
                Method::Dare => PruneConfig::dare(p, seed),
                Method::RandomDrop => PruneConfig::random_drop(p, seed),
                m => PruneConfig::importance(m, p),
            }
        }
        Method::DropRescaleQ => {
            let q = q.ok_or_else(|| Error::Usage("drop_rescale_q needs --q or --q-file".into()))?;
            PruneConfig::drop_rescale(need_p()?, q, seed)
        }
        Method::Structured => {
            if a.p.is_some() {
                return usage("structured pruning takes --a and --b, not --p");
            }
            let (Some(fa), Some(fb)) = (a.a, a.b) else {
                return usage("structured pruning needs --a and --b");
            };
            let q = match q {
                None => fa * fb,
                Some(QValue::Global(q)) => q,
                Some(QValue::PerLayer(_)) => return usage("structured pruning takes a scalar q"),
            };
            PruneConfig::structured(fa, fb, q, seed)
        }
    })
}

fn cmd_prune(a: &PruneArgs, seed: u64) -> Result<()> {
    let (fine, delta_path) = one_of(&a.fine, &a.delta)?;
    if a.method == Method::Wanda && a.calib.is_none() {
        return Err(Error::Usage("wanda needs --calib".into()));
    }
    let config = prune_config(a, seed)?;
    let (base, delta) = base_and_delta(&a.base, fine, delta_path)?;
    let norms = match &a.calib {
        Some(path) => {
            let calib = Dataset::load(path)?;
            let fine_net = TwoLayerNet::from_checkpoint(&apply_delta(&base, &delta)?)?;
            let acts = layer_activations(&fine_net, &rows(&calib))?;
            let mut norms = BTreeMap::new();
            for (name, batch) in &acts {
                norms.insert(name.clone(), feature_norms(batch, FeatureNorm::BatchL2)?);
            }
            Some(norms)
        }
        None => None,
    };
    let mut result = prune(&delta, &config, norms.as_ref())?;
    result.sparse.meta.fine_digest = delta.meta.fine_digest;
    result.sparse.meta.config.insert("cli".into(), resolved("prune", a, seed).to_string());
    let bytes = container::encode_delta(&result.sparse)?;
    write_atomic(&a.out, &bytes)?;
    println!(
        "nnz={} retention={:.6} bytes={}",
        result.sparse.nnz(),
        result.retention(),
        bytes.len()
    );
    Ok(())
}

fn cmd_find_q(a: &FindQArgs, seed: u64) -> Result<()> {
    let (fine, delta_path) = one_of(&a.fine, &a.delta)?;
    if !a.per_layer && a.deta.is_some() {
        return Err(Error::Usage("--deta applies to --per-layer".into()));
    }
    if !(a.p > 0.0 && a.p < 1.0) {
        return Err(Error::Usage(format!("--p must lie in (0, 1), got {}", a.p)));
    }
    let data = Dataset::load(&a.data)?;
    if a.objective == Objective::Validation && !data.is_labeled() {
        return Err(Error::Precondition(format!("{} has no labels; the val objective needs them", a.data.display())));
    }
    let batch = if data.is_labeled() {
        Batch::labeled(rows(&data), data.labels().to_vec())
    } else {
        Batch::unlabeled(rows(&data))
    };
    let (base, delta) = base_and_delta(&a.base, fine, delta_path)?;
    let mut search = SearchConfig::new(a.p, a.objective, seed);
    search.gamma = a.gamma;
    let (default_dq, default_rounds) = default_q_grid(a.p);
    search.dq = a.dq.unwrap_or(default_dq);
    let selection = if a.per_layer {
        search.rounds = default_rounds;
        let mut cfg = PerLayerConfig::new(a.p, a.objective, seed);
        cfg.search = search;
        cfg.eta = match (a.deta, a.rounds) {
            (Some(deta), rounds) => EtaGrid::Linear {
                deta,
                rounds: rounds.unwrap_or(20),
            },
            (None, Some(rounds)) => match EtaGrid::default() {
                EtaGrid::Log { min, max, .. } => EtaGrid::Log { min, max, rounds },
                other => other,
            },
            (None, None) => EtaGrid::default(),
        };
        let stats_x = match &a.stats_data {
            Some(p) => rows(&Dataset::load(p)?),
            None => batch.inputs.clone(),
        };
        find_q_perlayer::<TwoLayerNet>(&base, &delta, &cfg, &stats_x, &batch)?
    } else {
        search.rounds = a.rounds.unwrap_or(default_rounds);
        find_q_global::<TwoLayerNet>(&base, &delta, &search, &batch)?
    };
    let out = serde_json::json!({
        "config": resolved("find-q", a, seed),
        "selection": selection,
    });
    write_json(&a.out, &out)?;
    println!("q={} objective={:.6}", serde_json::to_string(&selection.q)?, selection.objective);
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs, seed: u64) -> Result<()> {
    let grid: Vec<f64> = if a.p_grid.is_empty() {
        (1..=99).map(|i| i as f64 / 100.0).collect()
    } else {
        a.p_grid.clone()
    };
    if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Usage(format!("p={p} outside (0, 1)")));
    }
    let scale = match (&a.stats_from, a.synthetic) {
        (Some(_), true) | (None, false) => {
            return Err(Error::Usage("give exactly one of --stats-from and --synthetic".into()))
        }
        (None, true) => {
            if a.base.is_some() || a.batch.is_some() {
                return Err(Error::Usage("--base and --batch go with --stats-from".into()));
            }
            1.0
        }
        (Some(delta_path), false) => {
            let (Some(base), Some(batch)) = (&a.base, &a.batch) else {
                return Err(Error::Usage("--stats-from needs --base and --batch".into()));
            };
            bounds_table(&grid, a.gamma, 1.0)?;
            let (base, delta) = base_and_delta(base, None, Some(delta_path))?;
            let stats = layer_stats::<TwoLayerNet>(&base, &delta, &rows(&Dataset::load(batch)?))?;
            let norms: Vec<f64> = stats.iter().flat_map(|s| s.sum_c2.iter().map(|v| v.sqrt())).collect();
            if norms.is_empty() {
                return Err(Error::Empty("influence statistics".into()));
            }
            norms.iter().sum::<f64>() / norms.len() as f64
        }
    };
    let table = bounds_table(&grid, a.gamma, scale)?;
    let mut csv = Vec::new();
    write_bounds_csv(&table, &mut csv)?;
    let mut meta = resolved("bounds", a, seed);
    meta["scale"] = serde_json::json!(scale);
    write_atomic(&a.out, &csv)?;
    write_json(&sidecar(&a.out), &meta)?;
    println!("rows={} scale={scale:.6e}", table.len());
    Ok(())
}

fn cmd_pack(a: &PackArgs, to_sparse: bool) -> Result<()> {
    let delta = match container::load(&a.input)? {
        Payload::Delta(d) => d,
        Payload::Checkpoint(_) => {
            return Err(Error::CorruptContainer(format!("{} holds a checkpoint, not a delta", a.input.display())))
        }
    };
    let dense = from_csr(&delta);
    let bytes = if to_sparse {
        container::encode_delta(&to_csr(&dense, true))?
    } else {
        container::encode_dense_delta(&dense)?
    };
    write_atomic(&a.out, &bytes)?;
    println!("nnz={} bytes={}", delta.nnz(), bytes.len());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let mut model = load_checkpoint(&a.model)?;
    if let Some(d) = &a.delta {
        model = apply_delta(&model, &container::load_delta(d)?)?;
    }
    let data = Dataset::load(&a.data)?;
    let acc = evaluate(&TwoLayerNet::from_checkpoint(&model)?, &data)?;
    if let Some(out) = &a.out {
        write_json(out, &serde_json::json!({ "config": resolved("eval", a, seed), "accuracy": acc }))?;
    }
    println!("accuracy={acc}");
    Ok(())
}

fn cmd_stats(a: &StatsArgs, seed: u64) -> Result<()> {
    let (fine, delta_path) = one_of(&a.fine, &a.delta)?;
    let (base, delta) = base_and_delta(&a.base, fine, delta_path)?;
    let data = Dataset::load(&a.data)?;
    let fine_net = TwoLayerNet::from_checkpoint(&apply_delta(&base, &delta)?)?;
    let report = delta_stats(&delta, &layer_activations(&fine_net, &rows(&data))?)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&a.out, &csv)?;
    write_json(&sidecar(&a.out), &resolved("stats", a, seed))?;
    if let Some(g) = report.row("global") {
        println!("mean_abs_dw={:.6e} mean_abs_dwx={:.6e}", g.mean_abs_dw, g.mean_abs_dwx);
    }
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs, seed: u64) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Usage("--seeds must be >= 1".into()));
    }
    let mut cfg: ExperimentConfig = match &a.config {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => ExperimentConfig::default(),
    };
    cfg.seeds = (seed..seed + a.seeds).collect();
    if a.model_dir.is_some() {
        cfg.model_dir = a.model_dir.clone();
    }
    let report = run_experiment(a.id, &cfg)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let csv_path = a.out_dir.join(format!("{}.csv", a.id.name()));
    write_atomic(&csv_path, &csv)?;
    let meta = serde_json::json!({ "cli": resolved("experiment", a, seed), "experiment": report.config });
    write_json(&a.out_dir.join(format!("{}.json", a.id.name())), &meta)?;
    println!("rows={} csv={}", report.len(), csv_path.display());
    Ok(())
}
