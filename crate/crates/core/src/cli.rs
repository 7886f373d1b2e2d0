//! The `edd` command line: pretrain, distill, eval and report.
//!
//! Settings resolve as defaults, then `--config`, then each `--set key=value`
//! in order, then the dedicated flags (`--seed`, `--out`, `--objective`,
//! `--preset`). The resolved configuration is written to `<out.dir>/config.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{preset_outer_loops, DataSource, RunConfig, Values};
use crate::data::fixtures::{glyph_digits, GlyphSpec};
use crate::data::{cifar_files, load_cifar_bin, load_idx_with_classes, Dataset, Split};
use crate::distill::{init_synthetic, run_with, RunLog, StepRecord, SyntheticSet};
use crate::error::{Error, Result};
use crate::eval::{distill_flops_per_outer, random_subset_baseline, train_on_synthetic, Cost, EvalReport};
use crate::modelpool::{pretrain_pool, Pool};
use crate::nets::ArchDescriptor;

pub const CONFIG_FILE: &str = "config.cfg";
pub const SYNTHETIC_FILE: &str = "synthetic.ddsy";
pub const RUN_LOG_FILE: &str = "run.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
/// Column order of the curve files written by `report`.
pub const CURVE_COLUMNS: [&str; 5] = ["step", "loss", "elapsed_ms", "flops", "accuracy"];

#[derive(Parser, Debug)]
#[command(name = "edd", version, about = "Dataset distillation from early-stage, perturbed model pools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (`out.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain the early-stage model pool.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a synthetic set from the pool.
    Distill {
        #[command(flatten)]
        common: Common,
        /// x5, x10 or x20: outer loops = distill.reference_outer_loops / k.
        #[arg(long)]
        preset: Option<String>,
        /// cosine, l2 or distmatch.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Train on a synthetic set and report test accuracy.
    Eval {
        /// A `.ddsy` file. Without --config, a `config.cfg` next to it is used.
        synthetic: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Turn distillation run directories into curve CSVs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for the CSV files.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

/// Resolves the configuration for a command.
pub fn resolve(common: &Common, config: Option<&Path>, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut values = match common.config.as_deref().or(config) {
        Some(path) => Values::load(path)?,
        None => Values::default(),
    };
    for s in &common.set {
        values.apply(s)?;
    }
    if let Some(seed) = common.seed {
        values.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        values.set("out.dir", &out.to_string_lossy())?;
    }
    for (k, v) in extra {
        values.set(k, v)?;
    }
    RunConfig::from_values(values)
}

fn require_file(key: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingInput { key: key.into(), path: path.to_path_buf() })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(CONFIG_FILE), cfg.values.to_text())
}

/// Training split, test split (normalized with training statistics).
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let classes = Some(cfg.classes);
    match &cfg.data {
        DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
            require_file("data.train_images", train_images)?;
            require_file("data.train_labels", train_labels)?;
            require_file("data.test_images", test_images)?;
            require_file("data.test_labels", test_labels)?;
            let train = load_idx_with_classes(train_images, train_labels, classes, None)?;
            let test = load_idx_with_classes(test_images, test_labels, classes, Some(train.stats()))?;
            Ok((train, test))
        }
        DataSource::Cifar { dir } => {
            if !dir.is_dir() {
                return Err(Error::MissingInput { key: "data.cifar_dir".into(), path: dir.clone() });
            }
            let train = load_cifar_bin(&cifar_files(dir, Split::Train)?, cfg.classes, None)?;
            let test = load_cifar_bin(&cifar_files(dir, Split::Test)?, cfg.classes, Some(train.stats()))?;
            Ok((train, test))
        }
        DataSource::Glyphs { side, train_per_class, test_per_class, seed } => {
            if cfg.classes != 10 {
                return Err(Error::Config { key: "data.classes".into(), msg: "glyph digits have 10 classes".into() });
            }
            glyph_digits(&GlyphSpec::digits(*side), *train_per_class, *test_per_class, *seed)
        }
    }
}

fn arch_for(cfg: &RunConfig, ds: &Dataset) -> ArchDescriptor {
    cfg.model.arch(ds.num_classes(), ds.image_dims())
}

pub fn cmd_pretrain(common: &Common) -> Result<()> {
    let cfg = resolve(common, None, &[])?;
    let (train, _) = load_data(&cfg)?;
    let arch = arch_for(&cfg, &train);
    echo_config(&cfg)?;
    let records = pretrain_pool(&train, &arch, &cfg.pretrain, Some(&cfg.pool_dir))?;
    println!("pool: N={} P={} -> {}", records.len(), cfg.pretrain.epochs, cfg.pool_dir.display());
    for (i, r) in records.iter().enumerate() {
        let loss = r.meta.get("final_loss").map_or("-", String::as_str);
        println!("model {i:03}  lr {:.5}  aug {}  final train loss {loss}", r.lr, r.aug_policy);
    }
    Ok(())
}

pub fn cmd_distill(common: &Common, preset: Option<&str>, objective: Option<&str>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(o) = objective {
        extra.push(("distill.objective", o.to_string()));
    }
    let mut cfg = resolve(common, None, &extra)?;
    if let Some(p) = preset {
        let t = preset_outer_loops(p, cfg.reference_outer_loops)?;
        let mut values = cfg.values.clone();
        values.set("distill.outer_loops", &t.to_string())?;
        cfg = RunConfig::from_values(values)?;
    }
    if !cfg.pool_dir.is_dir() {
        return Err(Error::MissingInput { key: "pool.dir".into(), path: cfg.pool_dir.clone() });
    }
    let (train, _) = load_data(&cfg)?;
    let pool = Pool::load_dir(&cfg.pool_dir)?;
    let s0 = init_synthetic(&train, cfg.ipc, cfg.factor, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    echo_config(&cfg)?;
    let snap_dir = cfg.out_dir.join(SNAPSHOT_DIR);
    let every = cfg.snapshot_every;
    let t = cfg.distill.outer_loops;
    let (s, log) = run_with(&train, &pool, &s0, &cfg.distill, |rec, s| {
        let done = rec.step + 1;
        if every > 0 && done % every == 0 {
            create_dir(&snap_dir)?;
            s.export(&snap_dir.join(snapshot_name(done)))?;
        }
        if done % (t / 10).max(1) == 0 || done == t {
            println!("step {:5}  match {:.6}  net {:.4}  {} ms", rec.step, rec.matching_loss_mean, rec.net_loss, rec.elapsed_ms);
        }
        Ok(())
    })?;
    s.export(&cfg.out_dir.join(SYNTHETIC_FILE))?;
    log.write_jsonl(&cfg.out_dir.join(RUN_LOG_FILE))?;
    let arch = arch_for(&cfg, &train);
    println!(
        "done: T={} synthetic updates {} network updates {} estimated FLOPs {:.3e}",
        log.steps.len(),
        log.synthetic_updates,
        log.network_updates,
        log.steps.len() as f64 * distill_flops_per_outer(&arch, &cfg.distill, cfg.ipc, cfg.factor),
    );
    println!("final matching loss {}", log.steps.last().map_or(f64::NAN, |r| r.matching_loss_mean));
    Ok(())
}

/// `step_000050.ddsy` holds the set after 50 outer loops.
pub fn snapshot_name(done: usize) -> String {
    format!("step_{done:06}.ddsy")
}

/// `<stem>.eval.json` next to the evaluated file.
pub fn eval_report_path(synthetic: &Path, out: Option<&Path>) -> PathBuf {
    let stem = synthetic.file_stem().map_or("synthetic".into(), |s| s.to_string_lossy().into_owned());
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| synthetic.parent().map(Path::to_path_buf).unwrap_or_default());
    dir.join(format!("{stem}.eval.json"))
}

/// The run directory of a synthetic file: its parent, or the parent's parent for snapshots.
fn run_dir_of(synthetic: &Path) -> Option<PathBuf> {
    let parent = synthetic.parent()?;
    if parent.file_name().is_some_and(|n| n == SNAPSHOT_DIR) {
        parent.parent().map(Path::to_path_buf)
    } else {
        Some(parent.to_path_buf())
    }
}

pub fn cmd_eval(synthetic: &Path, common: &Common) -> Result<()> {
    require_file("synthetic", synthetic)?;
    let run_dir = run_dir_of(synthetic);
    let sibling = run_dir.as_ref().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let mut common = common.clone();
    let out = common.out.take();
    let cfg = resolve(&common, sibling.as_deref(), &[])?;
    let s = SyntheticSet::import(synthetic)?;
    let (train, test) = load_data(&cfg)?;
    let arch = arch_for(&cfg, &test);
    let protocol = cfg.protocol(arch.clone());
    let mut report = train_on_synthetic(&s, &protocol, &test, cfg.eval_reps, cfg.seed)?;
    if cfg.eval_baseline {
        let base = random_subset_baseline(&train, s.ipc() * s.factor() * s.factor(), &protocol, &test, cfg.eval_reps, cfg.seed)?;
        report = report.with_baseline(&base)?;
    }
    if let Some(log) = run_dir.map(|d| d.join(RUN_LOG_FILE)).filter(|p| p.is_file()) {
        let steps = RunLog::read_jsonl(&log)?;
        let done = snapshot_steps(synthetic).unwrap_or(steps.len());
        let upto = &steps[..done.min(steps.len())];
        report.distill = Some(Cost {
            steps: upto.len() as u64,
            wall_seconds: upto.last().map_or(0.0, |r| r.elapsed_ms as f64 / 1000.0),
            flops: upto.len() as f64 * distill_flops_per_outer(&arch, &cfg.distill, s.ipc(), s.factor()),
        });
    }
    let path = eval_report_path(synthetic, out.as_deref());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(&path, report.to_json()?)?;
    write(&path.with_extension("csv"), report.to_csv())?;
    println!("accuracy {:.4} +- {:.4} over {} reps {:?}", report.mean, report.std, report.accuracies.len(), report.accuracies);
    if let Some(b) = report.baseline_mean {
        println!("random-subset baseline {b:.4} (margin {:+.4})", report.mean - b);
    }
    println!("report -> {}", path.display());
    Ok(())
}

fn snapshot_steps(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("step_")?.parse().ok()
}

/// One curve row per outer loop; accuracy is filled where an evaluation exists.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub elapsed_ms: u64,
    pub flops: f64,
    pub accuracy: Option<f64>,
}

fn read_eval(path: &Path) -> Result<Option<EvalReport>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Curve rows of one distillation run directory.
pub fn run_curve(dir: &Path) -> Result<Vec<CurveRow>> {
    let log_path = dir.join(RUN_LOG_FILE);
    require_file("run log", &log_path)?;
    let cfg_path = dir.join(CONFIG_FILE);
    require_file("run config", &cfg_path)?;
    let syn_path = dir.join(SYNTHETIC_FILE);
    require_file("synthetic", &syn_path)?;
    let cfg = RunConfig::from_values(Values::load(&cfg_path)?)?;
    let steps: Vec<StepRecord> = RunLog::read_jsonl(&log_path)?;
    let s = SyntheticSet::import(&syn_path)?;
    let d = s.images().dims();
    let arch = cfg.model.arch(s.num_classes(), (d[1], d[2], d[3]));
    let per_outer = distill_flops_per_outer(&arch, &cfg.distill, s.ipc(), s.factor());
    let final_eval = read_eval(&eval_report_path(&syn_path, None))?;
    steps
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let done = i + 1;
            let snap = eval_report_path(&dir.join(SNAPSHOT_DIR).join(snapshot_name(done)), None);
            let mut accuracy = read_eval(&snap)?.map(|e| e.mean);
            if accuracy.is_none() && done == steps.len() {
                accuracy = final_eval.as_ref().map(|e| e.mean);
            }
            Ok(CurveRow { step: r.step, loss: r.matching_loss_mean, elapsed_ms: r.elapsed_ms, flops: done as f64 * per_outer, accuracy })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid("report", e.to_string());
    w.write_record(CURVE_COLUMNS).map_err(csv_err)?;
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([r.step.to_string(), r.loss.to_string(), r.elapsed_ms.to_string(), r.flops.to_string(), acc])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid("report", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `<out>/<label>.csv` per run, labels taken from the directory names.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (i, dir) in runs.iter().enumerate() {
        if !dir.is_dir() {
            return Err(Error::MissingInput { key: "run directory".into(), path: dir.clone() });
        }
        let rows = run_curve(dir)?;
        let base = dir.file_name().map_or(format!("run{i}"), |n| n.to_string_lossy().into_owned());
        let mut path = out.join(format!("{base}.csv"));
        if written.contains(&path) {
            path = out.join(format!("{base}-{i}.csv"));
        }
        write(&path, curve_csv(&rows)?)?;
        println!("{} -> {} ({} rows)", dir.display(), path.display(), rows.len());
        written.push(path);
    }
    Ok(written)
}

/// Sizes the global worker pool from `DD_THREADS` when set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DD_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config { key: "DD_THREADS".into(), msg: format!("`{v}` is not a count") })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config { key: "DD_THREADS".into(), msg: e.to_string() })?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Distill { common, preset, objective } => cmd_distill(&common, preset.as_deref(), objective.as_deref()),
        Command::Eval { synthetic, common } => cmd_eval(&synthetic, &common),
        Command::Report { runs, out } => cmd_report(&runs, &out).map(|_| ()),
    }
}
