//! Config-driven runs of the four experiments. Every run lands in
//! `<out>/<experiment>/<timestamp>/` with CSV outputs, checkpoints and a
//! `manifest.json`; an interrupted run can be resumed cell by cell, and a
//! manifest can be replayed to reproduce every output byte for byte.

mod config;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

pub use config::{DatasetConfig, ExperimentConfig, ExperimentKind, Overrides, TrainSection};
pub use output::{
    field, read_csv, sha256_hex, write_atomic, Csv, FileRecord, RunManifest, SeedRecord, Stage,
    CSV_SCHEMA_VERSION, MANIFEST_FILE,
};

use output::RunDir;

use crate::datasets::cifar::{load_cifar10, standard_batches};
use crate::datasets::mnist::{load_mnist, MnistFiles};
use crate::datasets::{generate_synthetic, LabeledDataset, SyntheticSpec, Task};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Network};
use crate::ova::{self, EnsembleManifest, OvaEnsemble};
use crate::rng;
use crate::training::{
    self, run_trials, summarize, trial_seeds, Confusion, MetricSet, MetricsReport, TrainConfig,
    TrialOutcome,
};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue the interrupted run in this directory.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        !self.manifest.divergences.is_empty()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

pub fn run(config: ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let config = config.resolved()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let dir = match &opts.resume {
            Some(root) => RunDir::resume(root, &config)?,
            None => RunDir::create(&config)?,
        };
        let mut ctx = Ctx {
            cfg: &config,
            dir,
            seeds: Vec::new(),
            stages: Vec::new(),
            divergences: Vec::new(),
        };
        match config.experiment {
            ExperimentKind::SyntheticSweep => synthetic_sweep(&mut ctx)?,
            ExperimentKind::LayerSizeSweep => layer_size_sweep(&mut ctx)?,
            ExperimentKind::OvaBinary => ova_runs(&mut ctx, false)?,
            ExperimentKind::OvaEnsemble => ova_runs(&mut ctx, true)?,
        }
        let (dir, manifest) = ctx
            .dir
            .finish(&config, ctx.seeds, ctx.stages, ctx.divergences)?;
        Ok(RunOutcome { dir, manifest })
    })
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub outcome: RunOutcome,
    /// Recorded files that are missing or differ in the replay, plus files
    /// the replay wrote that the original did not.
    pub mismatches: Vec<String>,
}

/// Reruns a recorded configuration into a fresh directory (under `out` if
/// given) and compares every output file by hash.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<ReplayReport> {
    let recorded = RunManifest::load(manifest_path)?;
    let mut cfg = recorded.config.clone();
    if let Some(out) = out {
        cfg.out = out;
    }
    let outcome = run(cfg, &RunOptions::default())?;
    let fresh: BTreeMap<&str, &FileRecord> = outcome
        .manifest
        .files
        .iter()
        .map(|f| (f.path.as_str(), f))
        .collect();
    let old: BTreeMap<&str, &FileRecord> = recorded
        .files
        .iter()
        .map(|f| (f.path.as_str(), f))
        .collect();
    let mut mismatches = Vec::new();
    for (path, rec) in &old {
        match fresh.get(path) {
            None => mismatches.push(format!("{path}: missing from replay")),
            Some(f) if f.sha256 != rec.sha256 => {
                mismatches.push(format!("{path}: content differs"))
            }
            _ => {}
        }
    }
    mismatches.extend(
        fresh
            .keys()
            .filter(|p| !old.contains_key(*p))
            .map(|p| format!("{p}: not in the recorded run")),
    );
    Ok(ReplayReport {
        outcome,
        mismatches,
    })
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: RunDir,
    seeds: Vec<SeedRecord>,
    stages: Vec<Stage>,
    divergences: Vec<String>,
}

impl Ctx<'_> {
    fn stage(&mut self, name: impl Into<String>, seconds: f64, resumed: bool) {
        self.stages.push(Stage {
            name: name.into(),
            seconds,
            resumed,
        });
    }

    fn load_dataset(&mut self) -> Result<LabeledDataset> {
        let t = Instant::now();
        let data = load_dataset(&self.cfg.dataset, self.cfg.seed)?;
        self.stage("load-data", t.elapsed().as_secs_f64(), false);
        Ok(data)
    }

    /// Computes the uncached cells in parallel, a worker-pool's worth at a
    /// time, then writes their files in cell order from this thread.
    fn cells<C, R>(&mut self, cells: &[C], spec: &impl CellSpec<C, R>) -> Result<Vec<R>>
    where
        C: Sync,
        R: Send,
    {
        let width = rayon::current_num_threads().max(1);
        let mut results = Vec::with_capacity(cells.len());
        for group in cells.chunks(width) {
            let cached: Vec<Option<BTreeMap<String, Vec<u8>>>> = group
                .iter()
                .map(|c| self.dir.cached(&spec.key(c)))
                .collect();
            let fresh: Vec<Option<(R, f64)>> = group
                .par_iter()
                .zip(&cached)
                .map(|(c, hit)| match hit {
                    Some(_) => Ok(None),
                    None => {
                        let t = Instant::now();
                        spec.compute(c)
                            .map(|r| Some((r, t.elapsed().as_secs_f64())))
                    }
                })
                .collect::<Result<_>>()?;
            for ((c, hit), computed) in group.iter().zip(cached).zip(fresh) {
                let key = spec.key(c);
                let r = match (hit, computed) {
                    (Some(files), _) => {
                        self.stage(&key, 0.0, true);
                        spec.load(c, &files)?
                    }
                    (None, Some((r, secs))) => {
                        let files = spec.store(c, &r)?;
                        let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
                        for (name, bytes) in files {
                            self.dir.write(&name, &bytes)?;
                        }
                        self.dir.complete(&key, &names)?;
                        self.stage(&key, secs, false);
                        r
                    }
                    (None, None) => unreachable!("uncached cell was computed"),
                };
                results.push(r);
            }
        }
        Ok(results)
    }
}

/// One resumable unit of work and its on-disk form.
trait CellSpec<C, R>: Sync {
    fn key(&self, cell: &C) -> String;
    fn compute(&self, cell: &C) -> Result<R>;
    fn store(&self, cell: &C, result: &R) -> Result<Vec<(String, Vec<u8>)>>;
    fn load(&self, cell: &C, files: &BTreeMap<String, Vec<u8>>) -> Result<R>;
}

fn file<'a>(files: &'a BTreeMap<String, Vec<u8>>, name: &str) -> Result<&'a [u8]> {
    files
        .get(name)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Data(format!("cached cell lacks {name}")))
}

/// Loads the configured dataset. For the OVA experiments on synthetic data
/// only the first (std, size) pair is used.
pub fn load_dataset(d: &DatasetConfig, seed: u64) -> Result<LabeledDataset> {
    let (data, subset) = match d {
        DatasetConfig::Mnist { dir, subset } => {
            let files = MnistFiles::in_dir(dir);
            if !files.exist() {
                return Err(Error::Data(format!(
                    "MNIST IDX files not found under {} (expected train-images-idx3-ubyte and friends)",
                    dir.display()
                )));
            }
            (load_mnist(&files)?, *subset)
        }
        DatasetConfig::Cifar10 { dir, subset } => {
            let (train, test) = standard_batches(dir);
            if let Some(missing) = train.iter().chain(&test).find(|p| !p.is_file()) {
                return Err(Error::Data(format!(
                    "CIFAR-10 batch {} not found",
                    missing.display()
                )));
            }
            (load_cifar10(&train, &test)?, *subset)
        }
        DatasetConfig::Synthetic { stds, sizes, bias } => {
            let spec = SyntheticSpec {
                bias: *bias,
                ..SyntheticSpec::new(stds[0], sizes[0], seed)
            };
            (generate_synthetic(&spec)?, None)
        }
    };
    match subset {
        Some(n) => data.with_train_subset(n),
        None => Ok(data),
    }
}

fn metric_rows(csv: &mut Csv, status: &str, r: Option<&MetricsReport>) {
    csv.row(["status".to_string(), status.to_string()]);
    if let Some(r) = r {
        for (name, v) in MetricSet::of(r).named() {
            csv.row([name.to_string(), v.to_string()]);
        }
        if let Confusion::Binary { tp, tn, fp, fn_ } = r.confusion {
            for (name, v) in [("tp", tp), ("tn", tn), ("fp", fp), ("fn", fn_)] {
                csv.row([name.to_string(), v.to_string()]);
            }
        }
    }
}

fn metrics_csv(status: &str, r: Option<&MetricsReport>) -> Vec<u8> {
    let mut csv = Csv::new("metrics", &["metric", "value"]);
    metric_rows(&mut csv, status, r);
    csv.into_bytes()
}

fn loss_csv(curve: &[f64]) -> Vec<u8> {
    let mut csv = Csv::new("loss-curve", &["epoch", "mean_loss"]);
    for (e, l) in curve.iter().enumerate() {
        csv.row([e.to_string(), l.to_string()]);
    }
    csv.into_bytes()
}

/// Status plus metric set (and binary confusion counts when present).
fn parse_metrics(bytes: &[u8]) -> Result<(String, BTreeMap<String, String>)> {
    let rows = read_csv(bytes)?;
    let map: BTreeMap<String, String> = rows
        .iter()
        .map(|r| Ok((field::<String>(r, "metric")?, field::<String>(r, "value")?)))
        .collect::<Result<_>>()?;
    let status = map
        .get("status")
        .cloned()
        .ok_or_else(|| Error::Data("metrics without status".into()))?;
    Ok((status, map))
}

fn parse_loss(bytes: &[u8]) -> Result<Vec<f64>> {
    read_csv(bytes)?
        .iter()
        .map(|r| field(r, "mean_loss"))
        .collect()
}

fn num<T: std::str::FromStr>(map: &BTreeMap<String, String>, k: &str) -> Result<T> {
    map.get(k)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("metric `{k}` missing or malformed")))
}

/// Rebuilds a report from its stored metrics and loss curve.
fn report_from(map: &BTreeMap<String, String>, loss: Vec<f64>) -> Result<MetricsReport> {
    let mut r = if map.contains_key("tp") {
        MetricsReport::from_binary(
            num(map, "tp")?,
            num(map, "tn")?,
            num(map, "fp")?,
            num(map, "fn")?,
        )
    } else {
        MetricsReport {
            accuracy: num(map, "accuracy")?,
            sensitivity: num(map, "sensitivity")?,
            specificity: num(map, "specificity")?,
            confusion: Confusion::Multi(Vec::new()),
            loss_curve: Vec::new(),
        }
    };
    r.loss_curve = loss;
    Ok(r)
}

// ---------------------------------------------------------------- synthetic

struct SyntheticCell {
    std: f64,
    n: usize,
    hidden: usize,
    seeds: Vec<u64>,
}

struct SyntheticCells {
    bias: f64,
    train: TrainConfig,
}

fn synthetic_key(c: &SyntheticCell) -> String {
    format!("std{}_n{}_h{}", c.std, c.n, c.hidden)
}

impl CellSpec<SyntheticCell, Vec<TrialOutcome>> for SyntheticCells {
    fn key(&self, c: &SyntheticCell) -> String {
        synthetic_key(c)
    }

    fn compute(&self, c: &SyntheticCell) -> Result<Vec<TrialOutcome>> {
        run_trials(
            |seed| crate::nn::build_mlp(3, c.hidden, seed),
            |seed| {
                generate_synthetic(&SyntheticSpec {
                    bias: self.bias,
                    ..SyntheticSpec::new(c.std, c.n, seed)
                })
            },
            &self.train,
            &c.seeds,
        )
    }

    fn store(
        &self,
        c: &SyntheticCell,
        trials: &Vec<TrialOutcome>,
    ) -> Result<Vec<(String, Vec<u8>)>> {
        let mut csv = Csv::new(
            "synthetic-trials",
            &[
                "trial",
                "seed",
                "status",
                "accuracy",
                "sensitivity",
                "specificity",
            ],
        );
        for (i, t) in trials.iter().enumerate() {
            let (status, m) = match t.metrics {
                Some(m) => (
                    "ok",
                    [m.accuracy, m.sensitivity, m.specificity].map(|v| v.to_string()),
                ),
                None => ("diverged", Default::default()),
            };
            csv.row([
                i.to_string(),
                t.seed.to_string(),
                status.to_string(),
                m[0].clone(),
                m[1].clone(),
                m[2].clone(),
            ]);
        }
        Ok(vec![(
            format!("trials/{}.csv", synthetic_key(c)),
            csv.into_bytes(),
        )])
    }

    fn load(
        &self,
        c: &SyntheticCell,
        files: &BTreeMap<String, Vec<u8>>,
    ) -> Result<Vec<TrialOutcome>> {
        read_csv(file(files, &format!("trials/{}.csv", synthetic_key(c)))?)?
            .iter()
            .map(|r| {
                let seed = field(r, "seed")?;
                let metrics = match field::<String>(r, "status")?.as_str() {
                    "ok" => Some(MetricSet {
                        accuracy: field(r, "accuracy")?,
                        sensitivity: field(r, "sensitivity")?,
                        specificity: field(r, "specificity")?,
                    }),
                    _ => None,
                };
                Ok(TrialOutcome { seed, metrics })
            })
            .collect()
    }
}

fn synthetic_sweep(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let DatasetConfig::Synthetic { stds, sizes, bias } = &cfg.dataset else {
        return Err(Error::Config(
            "synthetic-sweep needs the synthetic dataset".into(),
        ));
    };
    // Trial t of every width sees the same data draw.
    let mut cells = Vec::new();
    for (si, &std) in stds.iter().enumerate() {
        for (ni, &n) in sizes.iter().enumerate() {
            let base = rng::derive(rng::derive(cfg.seed, si as u64), ni as u64);
            let seeds = trial_seeds(base, cfg.trials);
            for &hidden in &cfg.hidden {
                cells.push(SyntheticCell {
                    std,
                    n,
                    hidden,
                    seeds: seeds.clone(),
                });
            }
        }
    }
    let spec = SyntheticCells {
        bias: *bias,
        train: cfg.train_config(),
    };
    // one cell at a time: the trials inside a cell already fan out
    let outcomes = ctx.cells_serial(&cells, &spec)?;
    let mut csv = Csv::new(
        "synthetic-summary",
        &[
            "std",
            "n_samples",
            "hidden",
            "trials",
            "diverged",
            "accuracy_mean",
            "accuracy_std",
            "sensitivity_mean",
            "sensitivity_std",
            "specificity_mean",
            "specificity_std",
        ],
    );
    for (cell, trials) in cells.iter().zip(outcomes) {
        let key = synthetic_key(cell);
        ctx.seeds.push(SeedRecord {
            cell: key.clone(),
            seeds: cell.seeds.clone(),
        });
        let total = trials.len();
        let diverged = trials.iter().filter(|t| t.metrics.is_none()).count();
        if diverged > 0 {
            ctx.divergences
                .push(format!("{key}: {diverged} of {total} trials diverged"));
        }
        let mut row = vec![
            cell.std.to_string(),
            cell.n.to_string(),
            cell.hidden.to_string(),
            total.to_string(),
            diverged.to_string(),
        ];
        match summarize(trials) {
            Ok(s) => {
                for (mean, sd) in s.mean.named().iter().zip(s.std.named()) {
                    row.push(mean.1.to_string());
                    row.push(sd.1.to_string());
                }
            }
            Err(_) => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        csv.row(row);
    }
    ctx.dir.write("summary.csv", &csv.into_bytes())
}

impl Ctx<'_> {
    /// [`Ctx::cells`] without cross-cell parallelism.
    fn cells_serial<C: Sync, R: Send>(
        &mut self,
        cells: &[C],
        spec: &impl CellSpec<C, R>,
    ) -> Result<Vec<R>> {
        let mut out = Vec::with_capacity(cells.len());
        for c in cells {
            let key = spec.key(c);
            if let Some(files) = self.dir.cached(&key) {
                self.stage(&key, 0.0, true);
                out.push(spec.load(c, &files)?);
                continue;
            }
            let t = Instant::now();
            let r = spec.compute(c)?;
            let secs = t.elapsed().as_secs_f64();
            let files = spec.store(c, &r)?;
            let names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
            for (name, bytes) in files {
                self.dir.write(&name, &bytes)?;
            }
            self.dir.complete(&key, &names)?;
            self.stage(&key, secs, false);
            out.push(r);
        }
        Ok(out)
    }
}

// ------------------------------------------------------- width (CNN) cells

/// A trained network and its report, or the divergence that stopped it.
type Trained = std::result::Result<(Network, MetricsReport), String>;

/// Seed of the single multi-class network of width `hidden`.
pub fn width_seed(base: u64, hidden: usize) -> u64 {
    rng::derive(base, hidden as u64)
}

fn diverged_or<T>(r: Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e) if e.is_divergence() => Ok(Err(e.to_string())),
        Err(e) => Err(e),
    }
}

fn store_trained(prefix: &str, t: &Trained) -> Result<Vec<(String, Vec<u8>)>> {
    Ok(match t {
        Ok((net, report)) => vec![
            (format!("{prefix}.sens"), checkpoint::encode(net)?),
            (
                format!("{prefix}_metrics.csv"),
                metrics_csv("ok", Some(report)),
            ),
            (format!("{prefix}_loss.csv"), loss_csv(&report.loss_curve)),
        ],
        Err(msg) => vec![(
            format!("{prefix}_metrics.csv"),
            metrics_csv(&format!("diverged: {msg}"), None),
        )],
    })
}

fn load_trained(prefix: &str, files: &BTreeMap<String, Vec<u8>>) -> Result<Trained> {
    let (status, map) = parse_metrics(file(files, &format!("{prefix}_metrics.csv"))?)?;
    if status != "ok" {
        return Ok(Err(status.trim_start_matches("diverged: ").to_string()));
    }
    let net = checkpoint::decode(file(files, &format!("{prefix}.sens"))?)?;
    let loss = parse_loss(file(files, &format!("{prefix}_loss.csv"))?)?;
    Ok(Ok((net, report_from(&map, loss)?)))
}

struct WidthCells<'a> {
    data: &'a LabeledDataset,
    train: TrainConfig,
    dir: &'static str,
}

impl CellSpec<usize, Trained> for WidthCells<'_> {
    fn key(&self, h: &usize) -> String {
        format!("{}_h{h}", self.dir)
    }

    fn compute(&self, &h: &usize) -> Result<Trained> {
        let seed = width_seed(self.train.seed, h);
        let net = single_network(self.data, h, seed)?;
        diverged_or(training::train(net, self.data, &self.train.with_seed(seed)))
    }

    fn store(&self, h: &usize, t: &Trained) -> Result<Vec<(String, Vec<u8>)>> {
        store_trained(&format!("{}/h{h}", self.dir), t)
    }

    fn load(&self, h: &usize, files: &BTreeMap<String, Vec<u8>>) -> Result<Trained> {
        load_trained(&format!("{}/h{h}", self.dir), files)
    }
}

/// The multi-class network of a given width for `data`: the paper CNN for
/// images, an MLP for flat (binary) data.
pub fn single_network(data: &LabeledDataset, hidden: usize, seed: u64) -> Result<Network> {
    let k = data.class_count();
    match *data.sample_dims() {
        [_, _, _] => {
            crate::nn::build_paper_cnn(crate::Shape::new(data.sample_dims())?, hidden, k, seed)
        }
        [d] if k == 2 => crate::nn::build_mlp(d, hidden, seed),
        ref dims => Err(Error::Shape(format!(
            "no multi-class network for {k} classes of shape {dims:?}"
        ))),
    }
}

fn train_widths(
    ctx: &mut Ctx,
    data: &LabeledDataset,
    widths: &[usize],
    dir: &'static str,
) -> Result<Vec<Trained>> {
    let train = ctx.cfg.train_config();
    for &h in widths {
        ctx.seeds.push(SeedRecord {
            cell: format!("{dir}_h{h}"),
            seeds: vec![width_seed(train.seed, h)],
        });
    }
    let results = ctx.cells(widths, &WidthCells { data, train, dir })?;
    for (h, r) in widths.iter().zip(&results) {
        if let Err(msg) = r {
            ctx.divergences.push(format!("{dir} width {h}: {msg}"));
        }
    }
    Ok(results)
}

fn layer_size_sweep(ctx: &mut Ctx) -> Result<()> {
    let data = ctx.load_dataset()?;
    let widths = ctx.cfg.hidden.clone();
    let results = train_widths(ctx, &data, &widths, "widths")?;
    let mut summary = Csv::new(
        "accuracy-vs-width",
        &[
            "hidden",
            "status",
            "accuracy",
            "sensitivity",
            "specificity",
            "final_loss",
        ],
    );
    let mut curves = Csv::new("loss-curves", &["hidden", "epoch", "mean_loss"]);
    for (h, r) in widths.iter().zip(&results) {
        match r {
            Ok((_, rep)) => {
                let last = rep.loss_curve.last().copied().unwrap_or(f64::NAN);
                summary.row([
                    h.to_string(),
                    "ok".into(),
                    rep.accuracy.to_string(),
                    rep.sensitivity.to_string(),
                    rep.specificity.to_string(),
                    last.to_string(),
                ]);
                for (e, l) in rep.loss_curve.iter().enumerate() {
                    curves.row([h.to_string(), e.to_string(), l.to_string()]);
                }
            }
            Err(_) => summary.row([
                h.to_string(),
                "diverged".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]),
        }
    }
    ctx.dir
        .write("accuracy_vs_width.csv", &summary.into_bytes())?;
    ctx.dir.write("loss_curves.csv", &curves.into_bytes())
}

// -------------------------------------------------------------- OVA cells

struct MemberCells<'a> {
    data: &'a LabeledDataset,
    train: TrainConfig,
}

fn member_prefix(&(h, c): &(usize, usize)) -> String {
    format!("members/h{h}/member_{c:02}")
}

impl CellSpec<(usize, usize), Trained> for MemberCells<'_> {
    fn key(&self, &(h, c): &(usize, usize)) -> String {
        format!("member_h{h}_c{c}")
    }

    fn compute(&self, &(h, c): &(usize, usize)) -> Result<Trained> {
        diverged_or(ova::train_member(self.data, c, h, &self.train))
    }

    fn store(&self, cell: &(usize, usize), t: &Trained) -> Result<Vec<(String, Vec<u8>)>> {
        store_trained(&member_prefix(cell), t)
    }

    fn load(&self, cell: &(usize, usize), files: &BTreeMap<String, Vec<u8>>) -> Result<Trained> {
        load_trained(&member_prefix(cell), files)
    }
}

fn verdict_csv(outcome: &ova::EnsembleOutcome) -> Vec<u8> {
    let mut csv = Csv::new(
        "ensemble-samples",
        &["sample_index", "true_label", "positive_set", "verdict"],
    );
    for s in &outcome.samples {
        let set: Vec<String> = s.positives.iter().map(|c| c.to_string()).collect();
        csv.row([
            s.index.to_string(),
            s.label.to_string(),
            set.join(";"),
            s.verdict.tag().to_string(),
        ]);
    }
    csv.into_bytes()
}

fn ova_runs(ctx: &mut Ctx, ensemble: bool) -> Result<()> {
    let data = ctx.load_dataset()?;
    let k = data.class_count();
    let train = ctx.cfg.train_config();
    let hidden = ctx.cfg.hidden.clone();
    let cells: Vec<(usize, usize)> = hidden
        .iter()
        .flat_map(|&h| (0..k).map(move |c| (h, c)))
        .collect();
    ctx.seeds.push(SeedRecord {
        cell: "members".into(),
        seeds: (0..k).map(|c| ova::member_seed(train.seed, c)).collect(),
    });
    let members = ctx.cells(&cells, &MemberCells { data: &data, train })?;

    let mut binary = Csv::new(
        "ova-binary",
        &[
            "hidden",
            "class",
            "class_name",
            "status",
            "accuracy",
            "sensitivity",
            "specificity",
            "tp",
            "tn",
            "fp",
            "fn",
        ],
    );
    let mut by_width: BTreeMap<usize, Vec<Option<Network>>> = BTreeMap::new();
    for (&(h, c), t) in cells.iter().zip(members) {
        let name = &data.class_names()[c];
        match t {
            Ok((net, r)) => {
                let Confusion::Binary { tp, tn, fp, fn_ } = r.confusion else {
                    return Err(Error::State("member report is not binary"));
                };
                binary.row([
                    h.to_string(),
                    c.to_string(),
                    name.clone(),
                    "ok".into(),
                    r.accuracy.to_string(),
                    r.sensitivity.to_string(),
                    r.specificity.to_string(),
                    tp.to_string(),
                    tn.to_string(),
                    fp.to_string(),
                    fn_.to_string(),
                ]);
                by_width.entry(h).or_default().push(Some(net));
            }
            Err(msg) => {
                ctx.divergences
                    .push(format!("width {h} class {c} ({name}): {msg}"));
                let mut row = vec![
                    h.to_string(),
                    c.to_string(),
                    name.clone(),
                    "diverged".into(),
                ];
                row.extend(std::iter::repeat_n(String::new(), 7));
                binary.row(row);
                by_width.entry(h).or_default().push(None);
            }
        }
    }
    ctx.dir.write("ova_binary.csv", &binary.into_bytes())?;
    for &h in &hidden {
        let manifest = EnsembleManifest {
            classes: data.class_names().to_vec(),
            threshold: training::DECISION_THRESHOLD,
            policy: Default::default(),
            seeds: (0..k).map(|c| ova::member_seed(train.seed, c)).collect(),
            members: (0..k).map(|c| format!("member_{c:02}.sens")).collect(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        ctx.dir
            .write(&format!("members/h{h}/ensemble.json"), &json)?;
    }
    if !ensemble {
        return Ok(());
    }

    let mut summary = Csv::new(
        "ensemble-summary",
        &[
            "hidden",
            "total",
            "correct",
            "redundant",
            "no_positive",
            "wrong_single",
            "correct_frac",
            "redundant_frac",
            "remainder_frac",
            "misclassified_frac",
            "max_positive",
        ],
    );
    let mut comparison = Csv::new("ensemble-comparison", &["model", "hidden", "accuracy"]);
    for (h, nets) in by_width {
        let Some(nets) = nets.into_iter().collect::<Option<Vec<Network>>>() else {
            continue;
        };
        let t = Instant::now();
        let seeds = (0..k).map(|c| ova::member_seed(train.seed, c)).collect();
        let e = OvaEnsemble::from_members(nets, data.class_names().to_vec(), seeds)?;
        let o = e.evaluate(&data)?;
        ctx.stage(
            format!("evaluate-ensemble_h{h}"),
            t.elapsed().as_secs_f64(),
            false,
        );
        ctx.dir
            .write(&format!("ensemble/h{h}_samples.csv"), &verdict_csv(&o))?;
        let c = o.counts;
        summary.row([
            h.to_string(),
            c.total().to_string(),
            c.correct.to_string(),
            c.redundant.to_string(),
            c.no_positive.to_string(),
            c.wrong_single.to_string(),
            o.correct().to_string(),
            o.redundant().to_string(),
            o.remainder().to_string(),
            o.misclassified().to_string(),
            o.max_positive.to_string(),
        ]);
        comparison.row([
            format!("ova-ensemble-{k}x"),
            h.to_string(),
            o.correct().to_string(),
        ]);
    }
    let widths = ctx.cfg.compare_hidden.clone().unwrap_or_default();
    for (w, r) in widths
        .iter()
        .zip(train_widths(ctx, &data, &widths, "single")?)
    {
        let acc = r
            .map(|(_, rep)| rep.accuracy.to_string())
            .unwrap_or_default();
        comparison.row(["single".to_string(), w.to_string(), acc]);
    }
    ctx.dir
        .write("ensemble_summary.csv", &summary.into_bytes())?;
    ctx.dir.write("comparison.csv", &comparison.into_bytes())
}
