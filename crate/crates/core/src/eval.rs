//! Train-on-synthetic evaluation, the random-real-subset baseline, FLOPs
//! estimates and ablation sweeps.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugPolicy;
use crate::data::Dataset;
use crate::distill::{init_synthetic, run, DistillConfig, SyntheticSet};
use crate::error::{Error, Result};
use crate::modelpool::{pretrain_snapshots, CheckpointRecord, Pool, PretrainSpec};
use crate::nets::{ArchDescriptor, Network};
use crate::tensor::Tensor;
use crate::train::{accuracy, train_epoch, Sgd};

/// Minimum number of repetitions behind any reported mean.
pub const MIN_REPS: usize = 3;

/// How an evaluation network is trained. Baselines and synthetic sets must
/// share one protocol; [`EvalProtocol::hash`] makes that checkable.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalProtocol {
    pub arch: ArchDescriptor,
    pub epochs: usize,
    /// Initial learning rate, decayed to zero with a half cosine.
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aug: AugPolicy,
}

impl EvalProtocol {
    pub fn new(arch: ArchDescriptor) -> Self {
        EvalProtocol {
            arch,
            epochs: 60,
            lr: 0.01,
            batch: 256,
            momentum: 0.9,
            weight_decay: 5e-4,
            aug: AugPolicy::standard(),
        }
    }

    fn canonical(&self) -> String {
        format!(
            "arch={};epochs={};lr={};batch={};momentum={};weight_decay={};aug={}",
            self.arch, self.epochs, self.lr, self.batch, self.momentum, self.weight_decay, self.aug
        )
    }

    /// SHA-256 of the canonical protocol description, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        0.5 * self.lr * (1.0 + (PI * epoch as f64 / self.epochs as f64).cos())
    }

    /// Optimizer steps one training run takes on `n` images.
    pub fn steps_for(&self, n: usize) -> u64 {
        (self.epochs * n.div_ceil(self.batch)) as u64
    }
}

/// Trains one fresh network under `protocol` and returns its test accuracy,
/// or `None` when the training loss stops being finite.
pub fn train_and_test(images: &Tensor, labels: &[usize], protocol: &EvalProtocol, test: &Dataset, seed: u64) -> Result<Option<f64>> {
    let mut net = Network::build(&protocol.arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let mut opt = Sgd::new(protocol.lr, protocol.momentum, protocol.weight_decay);
    for epoch in 0..protocol.epochs {
        opt.lr = protocol.lr_at(epoch);
        let loss = train_epoch(&mut net, images, labels, protocol.batch, &mut opt, &protocol.aug, &mut rng)?;
        if !loss.is_finite() {
            return Ok(None);
        }
    }
    accuracy(&net, test.images(), test.labels()).map(Some)
}

/// What producing the evaluated images cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub steps: u64,
    pub wall_seconds: f64,
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Seeds of repetitions whose training diverged; they are left out of the mean.
    pub failed_reps: Vec<u64>,
    pub baseline_accuracies: Vec<f64>,
    pub baseline_mean: Option<f64>,
    /// Optimizer steps and estimated FLOPs of the evaluation training itself.
    pub eval_steps: u64,
    pub eval_flops: f64,
    pub wall_seconds: f64,
    /// Cost of the distillation that produced the set, when known.
    pub distill: Option<Cost>,
    pub protocol_hash: String,
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    fn from_runs(seeds: &[u64], results: Vec<Option<f64>>, protocol: &EvalProtocol, n_images: usize, wall: f64) -> Result<Self> {
        let mut accuracies = Vec::new();
        let mut failed = Vec::new();
        for (&seed, r) in seeds.iter().zip(results) {
            match r {
                Some(a) => accuracies.push(a),
                None => failed.push(seed),
            }
        }
        if accuracies.is_empty() {
            return Err(Error::invalid("eval", "every repetition diverged"));
        }
        let (mean, std) = mean_std(&accuracies);
        let eval_steps = protocol.steps_for(n_images) * seeds.len() as u64;
        Ok(EvalReport {
            accuracies,
            mean,
            std,
            failed_reps: failed,
            baseline_accuracies: Vec::new(),
            baseline_mean: None,
            eval_steps,
            eval_flops: flops_estimate(&protocol.arch, protocol.batch.min(n_images), eval_steps),
            wall_seconds: wall,
            distill: None,
            protocol_hash: protocol.hash(),
        })
    }

    /// Attaches a baseline evaluated under the same protocol.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Result<Self> {
        if baseline.protocol_hash != self.protocol_hash {
            return Err(Error::invalid("eval", "baseline was trained under a different protocol"));
        }
        self.baseline_accuracies = baseline.accuracies.clone();
        self.baseline_mean = Some(baseline.mean);
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `rep,accuracy,kind` row per repetition.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep,accuracy,kind\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{a},synthetic\n"));
        }
        for (i, a) in self.baseline_accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{a},baseline\n"));
        }
        out
    }
}

fn rep_seeds(seed: u64, reps: usize) -> Result<Vec<u64>> {
    if reps < MIN_REPS {
        return Err(Error::invalid("eval", format!("at least {MIN_REPS} repetitions are required, got {reps}")));
    }
    Ok((0..reps as u64).map(|r| seed.wrapping_mul(1_000_003).wrapping_add(r)).collect())
}

/// Trains `reps` networks on the decoded synthetic set and tests each one.
pub fn train_on_synthetic(s: &SyntheticSet, protocol: &EvalProtocol, test: &Dataset, reps: usize, seed: u64) -> Result<EvalReport> {
    let seeds = rep_seeds(seed, reps)?;
    let (images, labels) = s.decoded()?;
    let start = Instant::now();
    let results = seeds
        .par_iter()
        .map(|&sd| train_and_test(&images, &labels, protocol, test, sd))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_runs(&seeds, results, protocol, labels.len(), start.elapsed().as_secs_f64())
}

/// A random real subset with `ipc` images per class.
pub fn random_subset(ds: &Dataset, ipc: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(ipc * ds.num_classes());
    for c in 0..ds.num_classes() {
        let idx = ds.class_indices(c);
        if idx.len() < ipc {
            return Err(Error::invalid("baseline", format!("class {c} has {} examples, {ipc} needed", idx.len())));
        }
        chosen.extend(sample_indices(&mut rng, idx.len(), ipc).into_iter().map(|k| idx[k]));
    }
    let b = ds.select(&chosen)?;
    Ok((b.images, b.labels))
}

/// The same protocol on a fresh random real subset per repetition.
pub fn random_subset_baseline(ds: &Dataset, ipc: usize, protocol: &EvalProtocol, test: &Dataset, reps: usize, seed: u64) -> Result<EvalReport> {
    let seeds = rep_seeds(seed, reps)?;
    let start = Instant::now();
    let results = seeds
        .par_iter()
        .map(|&sd| {
            let (images, labels) = random_subset(ds, ipc, sd)?;
            train_and_test(&images, &labels, protocol, test, sd)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_runs(&seeds, results, protocol, ipc * ds.num_classes(), start.elapsed().as_secs_f64())
}

/// FLOPs of `steps` training steps on batches of `batch` images: a multiply-add
/// is 2 FLOPs and a training step costs three forward passes.
pub fn flops_estimate(arch: &ArchDescriptor, batch: usize, steps: u64) -> f64 {
    2.0 * arch.forward_macs() as f64 * 3.0 * batch as f64 * steps as f64
}

/// Estimated FLOPs of one outer loop of distillation. Each synthetic update
/// costs a training step on the real batch plus a second-order pass on the
/// decoded synthetic batch (counted as two training steps); each inner loop
/// ends with one network update.
pub fn distill_flops_per_outer(arch: &ArchDescriptor, cfg: &DistillConfig, ipc: usize, factor: usize) -> f64 {
    let classes = arch.num_classes;
    let synthetic = ipc * factor * factor;
    let per_class = flops_estimate(arch, cfg.real_batch, 1) + 2.0 * flops_estimate(arch, synthetic, 1);
    cfg.inner_loops as f64 * (classes as f64 * per_class + flops_estimate(arch, cfg.net_batch, 1))
}

/// Estimated FLOPs of a full distillation run; exactly linear in the outer-loop count.
pub fn distill_flops(arch: &ArchDescriptor, cfg: &DistillConfig, ipc: usize, factor: usize) -> f64 {
    cfg.outer_loops as f64 * distill_flops_per_outer(arch, cfg, ipc, factor)
}

/// Ablation axes of the efficiency study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    PretrainEpochs,
    Alpha,
    PoolSize,
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::PretrainEpochs => "pretrain_epochs",
            AblationAxis::Alpha => "alpha",
            AblationAxis::PoolSize => "pool_size",
        })
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_epochs" => Ok(AblationAxis::PretrainEpochs),
            "alpha" => Ok(AblationAxis::Alpha),
            "pool_size" => Ok(AblationAxis::PoolSize),
            other => Err(Error::invalid("ablation", format!("unknown axis `{other}`"))),
        }
    }
}

/// Pretrained checkpoints keyed by epoch count, so pools for several P and N
/// share one pretraining pass per P. Members with the same index are the same
/// model (seed, lr, policy) at different epochs.
#[derive(Clone, Debug, Default)]
pub struct PoolBank {
    by_epochs: BTreeMap<usize, Vec<CheckpointRecord>>,
}

impl PoolBank {
    /// Pretrains `models` networks and keeps them at every epoch count in `epochs`.
    pub fn build(ds: &Dataset, arch: &ArchDescriptor, spec: &PretrainSpec, models: usize, epochs: &[usize]) -> Result<Self> {
        let spec = PretrainSpec { models, ..spec.clone() };
        let snaps = pretrain_snapshots(ds, arch, &spec, epochs)?;
        Ok(PoolBank { by_epochs: epochs.iter().copied().zip(snaps).collect() })
    }

    /// Adds (or replaces) the members pretrained for `epochs` epochs.
    pub fn insert(&mut self, epochs: usize, records: Vec<CheckpointRecord>) {
        self.by_epochs.insert(epochs, records);
    }

    /// The first `n` members pretrained for `epochs` epochs.
    pub fn pool(&self, epochs: usize, n: usize) -> Result<Pool> {
        let recs = self
            .by_epochs
            .get(&epochs)
            .ok_or_else(|| Error::invalid("pool bank", format!("no checkpoints for {epochs} epochs")))?;
        if n > recs.len() {
            return Err(Error::invalid("pool bank", format!("{n} members requested, {} available at {epochs} epochs", recs.len())));
        }
        Pool::new(recs[..n].to_vec())
    }
}

/// Everything one ablation arm needs besides the swept value.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub bank: &'a PoolBank,
    pub distill: DistillConfig,
    pub ipc: usize,
    pub factor: usize,
    pub protocol: EvalProtocol,
    /// One full distill-then-evaluate repetition per seed.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub wall_seconds: f64,
}

/// Distills and evaluates once per seed for the given configuration.
pub fn pipeline_arm(setup: &AblationSetup<'_>, cfg: &DistillConfig) -> Result<Vec<f64>> {
    if setup.seeds.len() < MIN_REPS {
        return Err(Error::invalid("ablation", format!("at least {MIN_REPS} seeds per arm are required")));
    }
    let pool = setup.bank.pool(cfg.pretrain_epochs, cfg.pool_size)?;
    setup
        .seeds
        .iter()
        .map(|&seed| {
            let s0 = init_synthetic(setup.train, setup.ipc, setup.factor, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let cfg = DistillConfig { seed, ..cfg.clone() };
            let (s, _) = run(setup.train, &pool, &s0, &cfg)?;
            let (images, labels) = s.decoded()?;
            train_and_test(&images, &labels, &setup.protocol, setup.test, seed)?
                .ok_or_else(|| Error::invalid("ablation", format!("evaluation diverged for seed {seed}")))
        })
        .collect()
}

/// Runs the full pipeline for every value along `axis`.
pub fn ablation_sweep(axis: AblationAxis, values: &[f64], setup: &AblationSetup<'_>) -> Result<Vec<AblationRow>> {
    values
        .iter()
        .map(|&value| {
            let mut cfg = setup.distill.clone();
            let count = || -> Result<usize> {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::invalid("ablation", format!("{axis} needs whole values, got {value}")));
                }
                Ok(value as usize)
            };
            match axis {
                AblationAxis::PretrainEpochs => cfg.pretrain_epochs = count()?,
                AblationAxis::PoolSize => cfg.pool_size = count()?,
                AblationAxis::Alpha => cfg.alpha = value,
            }
            let start = Instant::now();
            let accuracies = pipeline_arm(setup, &cfg)?;
            let (mean, std) = mean_std(&accuracies);
            Ok(AblationRow { value, accuracies, mean, std, wall_seconds: start.elapsed().as_secs_f64() })
        })
        .collect()
}

/// `value,mean,std,wall_seconds` rows.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("value,mean,std,wall_seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.value, r.mean, r.std, r.wall_seconds));
    }
    out
}
