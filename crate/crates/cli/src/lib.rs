//! Commands behind the `pinn` binary: dataset generation, training,
//! evaluation, augmentation timing, gradient checks and the
//! sample/compute-complexity benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use pinn_core::gradsuite::{run_gradcheck, FamilyReport};
use pinn_core::intercoord::{
    augment, build_ic_fc, build_ic_pinn, evaluate_ic, ic_sample_at, score_ic, train_ic_supervised,
    IcEvaluation, IcHyper, IcModel, IcSample,
};
use pinn_core::persist::{
    load_checkpoint, load_ic_dataset, load_pra_dataset, parse_config, save_checkpoint,
    save_ic_dataset, save_pra_dataset, ExperimentConfig, Model, ModelKind, Task,
};
use pinn_core::pra::{build_pra_nets, evaluate_pra, pra_sample_at, train_pra, PraSample};
use pinn_core::rng;

/// Test sets are drawn from `seed + TEST_SEED_OFFSET`.
pub const TEST_SEED_OFFSET: u64 = 0x7e57;
pub const GRADCHECK_CASES: usize = 50;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad input, failed validation or a broken contract: exit 1.
    Contract(String),
    /// File-system trouble: exit 2.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Contract(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Contract(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<pinn_core::Error> for CliError {
    fn from(e: pinn_core::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Contract(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub samples: Option<usize>,
    pub k: Option<usize>,
    pub target: Option<f64>,
}

pub fn load_config(path: Option<&Path>, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(o) = &ov.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = ov.samples {
        cfg.train_samples = n;
    }
    if let Some(k) = ov.k {
        match cfg.task {
            Task::Ic => cfg.ic.k_max = k,
            Task::Pra => cfg.pra.k_max = k,
        }
    }
    if let Some(t) = ov.target {
        cfg.ic.target = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files written by a command. Unless [`Outputs::commit`] runs, they are
/// deleted again when the guard drops.
struct Outputs {
    dir: PathBuf,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Outputs { dir: dir.to_path_buf(), created: Vec::new(), committed: false })
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.created.push(p.clone());
        p
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.created {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(rows.is_empty()).from_path(path)?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn workers() -> usize {
    std::env::var("PINN_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// `f(0..n)` over a few scoped threads; item `i` never depends on the split.
fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> pinn_core::Result<T> + Sync) -> CliResult<Vec<T>> {
    let w = workers().min(n.max(1));
    if w <= 1 {
        return Ok((0..n).map(&f).collect::<pinn_core::Result<_>>()?);
    }
    let chunk = n.div_ceil(w);
    let parts: Vec<pinn_core::Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..w)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(f).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn ic_set(cfg: &ExperimentConfig, n: usize, seed: u64) -> CliResult<Vec<IcSample>> {
    let (k, ic, wm) = (cfg.ic.k_max, cfg.ic.channel, cfg.ic.wmmse);
    parallel_map(n, |i| ic_sample_at(i, k, &ic, &wm, seed))
}

pub fn pra_set(cfg: &ExperimentConfig, n: usize, seed: u64, mixture: bool) -> CliResult<Vec<PraSample>> {
    let h = (mixture && cfg.model.adapts_k()).then_some(&cfg.pra_train);
    parallel_map(n, |i| pra_sample_at(&cfg.pra, i, h, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes `train.jsonl` and `test.jsonl` into the output directory.
pub fn cmd_gen(cfg: &ExperimentConfig) -> CliResult<GenReport> {
    let mut out = Outputs::new(&cfg.out_dir)?;
    let train = out.file("train.jsonl");
    let test = out.file("test.jsonl");
    let test_seed = cfg.seed.wrapping_add(TEST_SEED_OFFSET);
    match cfg.task {
        Task::Ic => {
            save_ic_dataset(&train, &ic_set(cfg, cfg.train_samples, cfg.seed)?)?;
            save_ic_dataset(&test, &ic_set(cfg, cfg.test_samples, test_seed)?)?;
        }
        Task::Pra => {
            save_pra_dataset(&train, &pra_set(cfg, cfg.train_samples, cfg.seed, true)?)?;
            save_pra_dataset(&test, &pra_set(cfg, cfg.test_samples, test_seed, false)?)?;
        }
    }
    out.commit();
    Ok(GenReport { train, test })
}

fn need(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{} does not exist (run `gen` first?)", path.display())))
    }
}

/// Fresh IC model for `cfg.model` at `k` links.
pub fn new_ic_model(cfg: &ExperimentConfig, model: ModelKind, k: usize, seed: u64) -> CliResult<IcModel> {
    let rng = &mut rng::stream(seed, 1);
    Ok(match model {
        ModelKind::Pinn | ModelKind::PinnAdpK => {
            build_ic_pinn(&cfg.ic.pinn_blocks, cfg.ic.activation, model.adapts_k(), rng)?
        }
        ModelKind::Fc => build_ic_fc(k, &cfg.ic.fc_hidden, cfg.ic.activation, rng)?,
    })
}

#[derive(Serialize)]
struct IcTraceRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct PraTraceRow {
    epoch: usize,
    cost: f64,
    objective: f64,
}

/// Trains on `train.jsonl`; writes `model.json` and `trace.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<Model> {
    let data = cfg.out_dir.join("train.jsonl");
    need(&data)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let model = match cfg.task {
        Task::Ic => {
            let d = load_ic_dataset(&data)?;
            let k = d.first().map_or(cfg.ic.k_max, |s| s.k);
            if cfg.model == ModelKind::Fc && d.iter().any(|s| s.k != k) {
                return Err(CliError::Contract("the dense baseline needs a single K".into()));
            }
            let mut m = new_ic_model(cfg, cfg.model, k, cfg.seed)?;
            let hyper = cfg.ic.hyper(m.is_pinn());
            let trace = train_ic_supervised(&mut m, &d, &hyper, &mut rng::stream(cfg.seed, 2))?;
            let rows: Vec<IcTraceRow> =
                trace.iter().enumerate().map(|(epoch, &loss)| IcTraceRow { epoch, loss }).collect();
            write_csv(&out.file("trace.csv"), &rows, &["epoch", "loss"])?;
            Model::Ic(m)
        }
        Task::Pra => {
            let d = load_pra_dataset(&data)?;
            let hyper = pinn_core::pra::PraHyper { adapt_k: cfg.model.adapts_k(), ..cfg.pra_train.clone() };
            let mut nets = build_pra_nets(&cfg.pra, &hyper, &mut rng::stream(cfg.seed, 1))?;
            let t = train_pra(&mut nets, &d, &hyper, &mut rng::stream(cfg.seed, 2))?;
            let rows: Vec<PraTraceRow> = t
                .cost
                .iter()
                .zip(&t.objective)
                .enumerate()
                .map(|(epoch, (&cost, &objective))| PraTraceRow { epoch, cost, objective })
                .collect();
            write_csv(&out.file("trace.csv"), &rows, &["epoch", "cost", "objective"])?;
            Model::Pra(nets)
        }
    };
    save_checkpoint(&out.file("model.json"), &model)?;
    out.commit();
    Ok(model)
}

#[derive(Serialize)]
struct MetricRow {
    metric: &'static str,
    value: f64,
}

/// Scores `model.json` on `test.jsonl`; writes `metrics.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> CliResult<Vec<(&'static str, f64)>> {
    let (ckpt, test) = (cfg.out_dir.join("model.json"), cfg.out_dir.join("test.jsonl"));
    need(&ckpt)?;
    need(&test)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let metrics = match (cfg.task, load_checkpoint(&ckpt)?) {
        (Task::Ic, Model::Ic(m)) => {
            let t = load_ic_dataset(&test)?;
            let e = evaluate_ic(&m, &t, &cfg.ic.channel)?;
            let full: Vec<Vec<f64>> = t.iter().map(|s| vec![1.0; s.k]).collect();
            let fp = score_ic(&full, &t, &cfg.ic.channel)?;
            vec![
                ("ratio", e.ratio),
                ("median_ratio", e.median_ratio),
                ("mean_rate", e.mean_rate),
                ("mean_wmmse_rate", e.mean_label_rate),
                ("mse", e.mse),
                ("full_power_ratio", fp.ratio),
            ]
        }
        (Task::Pra, Model::Pra(n)) => {
            let t = load_pra_dataset(&test)?;
            let e = evaluate_pra(&n, &t, &cfg.pra)?;
            vec![
                ("evaluated", e.evaluated as f64),
                ("mean_objective", e.mean_objective),
                ("mean_lp_objective", e.mean_lp_objective),
                ("loss", e.loss),
                ("median_sample_loss", e.median_sample_loss),
                ("max_overload", e.max_overload),
                ("max_qos_residual", e.max_qos_residual),
                ("mean_edf_time", e.mean_edf_time),
            ]
        }
        (_, m) => {
            return Err(CliError::Contract(format!(
                "checkpoint holds a `{}` model, which does not fit the configured task",
                m.kind()
            )))
        }
    };
    let rows: Vec<MetricRow> = metrics.iter().map(|&(metric, value)| MetricRow { metric, value }).collect();
    write_csv(&out.file("metrics.csv"), &rows, &["metric", "value"])?;
    out.commit();
    Ok(metrics)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub method: &'static str,
    pub samples: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AugmentReport {
    pub samples: Vec<IcSample>,
    pub timing: Vec<TimingRow>,
}

impl AugmentReport {
    /// WMMSE labeling time over augmentation time.
    pub fn speedup(&self) -> f64 {
        self.timing[1].seconds / self.timing[0].seconds.max(f64::MIN_POSITIVE)
    }
}

/// Expands `train.jsonl` to `cfg.train_samples` samples by relabeling and
/// times it against WMMSE-labeling as many fresh channels. Writes
/// `augmented.jsonl` and `augment_timing.csv`.
pub fn cmd_augment(cfg: &ExperimentConfig) -> CliResult<AugmentReport> {
    if cfg.task != Task::Ic {
        return Err(CliError::Contract("augmentation applies to the ic task".into()));
    }
    let data = cfg.out_dir.join("train.jsonl");
    need(&data)?;
    let base = load_ic_dataset(&data)?;
    let mut out = Outputs::new(&cfg.out_dir)?;
    let total = cfg.train_samples;
    let report = augment_timed(cfg, &base, total)?;
    save_ic_dataset(&out.file("augmented.jsonl"), &report.samples)?;
    write_csv(&out.file("augment_timing.csv"), &report.timing, &["method", "samples", "seconds"])?;
    out.commit();
    Ok(report)
}

/// In-memory core of [`cmd_augment`].
pub fn augment_timed(cfg: &ExperimentConfig, base: &[IcSample], total: usize) -> CliResult<AugmentReport> {
    if total < base.len() {
        return Err(CliError::Contract(format!(
            "target size {total} is below the {} base samples",
            base.len()
        )));
    }
    let t0 = Instant::now();
    let samples = augment(base, total - base.len(), &mut rng::stream(cfg.seed, 3))?;
    let aug = t0.elapsed().as_secs_f64();
    let k = base.first().map_or(cfg.ic.k_max, |s| s.k);
    let (ic, wm) = (cfg.ic.channel, cfg.ic.wmmse);
    let label_seed = cfg.seed.wrapping_add(1);
    let t0 = Instant::now();
    for i in 0..total {
        ic_sample_at(i, k, &ic, &wm, label_seed)?;
    }
    let wmmse = t0.elapsed().as_secs_f64();
    Ok(AugmentReport {
        samples,
        timing: vec![
            TimingRow { method: "augment", samples: total, seconds: aug },
            TimingRow { method: "wmmse", samples: total, seconds: wmmse },
        ],
    })
}

/// Runs the finite-difference suite; writes `gradcheck.csv`. Fails with a
/// contract error when any family exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> CliResult<Vec<FamilyReport>> {
    let mut out = Outputs::new(&cfg.out_dir)?;
    let reports = run_gradcheck(GRADCHECK_CASES, cfg.seed)?;
    write_csv(
        &out.file("gradcheck.csv"),
        &reports,
        &["family", "cases", "max_relative_error", "passed"],
    )?;
    out.commit();
    if let Some(bad) = reports.iter().find(|r| !r.passed) {
        return Err(CliError::Contract(format!(
            "gradient check failed for {} (relative error {:e})",
            bad.family, bad.max_relative_error
        )));
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub model: &'static str,
    pub size: usize,
    pub epochs: usize,
    pub ratio: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub model: &'static str,
    /// Smallest swept size reaching the target, empty if none did.
    pub min_size: Option<usize>,
    /// Training time of that run.
    pub seconds_to_target: Option<f64>,
    pub largest_size: usize,
    /// Training time at the largest size tried.
    pub seconds_at_largest: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub target: f64,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<BenchSummary>,
}

impl BenchReport {
    pub fn summary_of(&self, model: &str) -> Option<&BenchSummary> {
        self.summary.iter().find(|s| s.model == model)
    }
}

fn model_name(m: ModelKind) -> &'static str {
    match m {
        ModelKind::Pinn => "pinn",
        ModelKind::PinnAdpK => "pinn-adp-k",
        ModelKind::Fc => "fc",
    }
}

/// Smallest size in `rows` of `model` whose ratio reaches `target`.
pub fn minimal_size(rows: &[BenchRow], model: &str, target: f64) -> Option<usize> {
    rows.iter()
        .filter(|r| r.model == model && r.ratio >= target)
        .map(|r| r.size)
        .min()
}

/// Sweeps `ic.bench_sizes` for a PINN and the dense baseline. A model stops
/// at the first size that reaches the target. Writes `bench.csv` and
/// `bench_summary.csv`.
pub fn cmd_bench(cfg: &ExperimentConfig) -> CliResult<BenchReport> {
    if cfg.task != Task::Ic {
        return Err(CliError::Contract("the benchmark runs on the ic task".into()));
    }
    let mut out = Outputs::new(&cfg.out_dir)?;
    let report = bench(cfg)?;
    write_csv(&out.file("bench.csv"), &report.rows, &["model", "size", "epochs", "ratio", "seconds"])?;
    write_csv(
        &out.file("bench_summary.csv"),
        &report.summary,
        &["model", "min_size", "seconds_to_target", "largest_size", "seconds_at_largest"],
    )?;
    out.commit();
    Ok(report)
}

/// In-memory core of [`cmd_bench`].
pub fn bench(cfg: &ExperimentConfig) -> CliResult<BenchReport> {
    let largest = *cfg
        .ic
        .bench_sizes
        .last()
        .ok_or_else(|| CliError::Contract("ic.bench_sizes is empty".into()))?;
    let pool = ic_set(cfg, largest, cfg.seed)?;
    let test = ic_set(cfg, cfg.test_samples, cfg.seed.wrapping_add(TEST_SEED_OFFSET))?;
    let pinn = if cfg.model == ModelKind::Fc { ModelKind::PinnAdpK } else { cfg.model };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for kind in [pinn, ModelKind::Fc] {
        let name = model_name(kind);
        let mut hit = None;
        let mut last_seconds = 0.0;
        for &n in &cfg.ic.bench_sizes {
            let (e, epochs, seconds) = bench_run(cfg, kind, &pool[..n], &test)?;
            log::info!("bench {name} n={n}: ratio {:.4} in {seconds:.1}s", e.ratio);
            rows.push(BenchRow { model: name, size: n, epochs, ratio: e.ratio, seconds });
            last_seconds = seconds;
            if e.ratio >= cfg.ic.target {
                hit = Some((n, seconds));
                break;
            }
        }
        summary.push(BenchSummary {
            model: name,
            min_size: hit.map(|h| h.0),
            seconds_to_target: hit.map(|h| h.1),
            largest_size: rows.last().map_or(0, |r| r.size),
            seconds_at_largest: last_seconds,
        });
    }
    Ok(BenchReport { target: cfg.ic.target, rows, summary })
}

/// Trains one fresh model on `train` and scores it on `test`.
pub fn bench_run(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    train: &[IcSample],
    test: &[IcSample],
) -> CliResult<(IcEvaluation, usize, f64)> {
    let steps_per_epoch = train.len().div_ceil(cfg.ic.train.batch_size).max(1);
    let epochs = cfg.ic.train.epochs.max(cfg.ic.bench_min_steps.div_ceil(steps_per_epoch));
    let mut m = new_ic_model(cfg, kind, cfg.ic.k_max, cfg.seed)?;
    let hyper = IcHyper { epochs, ..cfg.ic.hyper(m.is_pinn()) };
    let t0 = Instant::now();
    train_ic_supervised(&mut m, train, &hyper, &mut rng::stream(cfg.seed, 2))?;
    let seconds = t0.elapsed().as_secs_f64();
    Ok((evaluate_ic(&m, test, &cfg.ic.channel)?, epochs, seconds))
}
