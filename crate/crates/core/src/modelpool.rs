//! Early-stage model pool: pretraining a handful of diverse networks for a
//! few epochs, the DDCK checkpoint format, and checkpoint sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::AugPolicy;
use crate::codec::{Reader, Writer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{ArchDescriptor, Network};
use crate::tensor::Tensor;
use crate::train::{train_epoch, Sgd};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One pretrained network as stored on disk.
///
/// Parameters are held at f32 precision (widened to f64), so a save/load
/// round trip reproduces the record exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub aug_policy: String,
    pub params: Vec<(String, Tensor)>,
    /// Free-form `key=value` extras such as the last training loss.
    pub meta: BTreeMap<String, String>,
}

impl CheckpointRecord {
    pub fn from_network(net: &Network, seed: u64, epochs: usize, lr: f64, aug_policy: &AugPolicy) -> Self {
        CheckpointRecord {
            arch: net.arch.clone(),
            seed,
            epochs,
            lr,
            aug_policy: aug_policy.to_string(),
            params: net
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.map(|v| v as f32 as f64)))
                .collect(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        Network::from_tensors(&self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str32(&self.arch.to_string());
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            let len = u16::try_from(name.len()).map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
            w.u16(len);
            w.bytes(name.as_bytes());
            let ndim = u8::try_from(t.dims().len()).map_err(|_| Error::format("checkpoint", "too many dims"))?;
            w.u8(ndim);
            for &d in t.dims() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        let mut meta = format!(
            "seed={}\nepochs={}\nlr={}\naug_policy={}\n",
            self.seed, self.epochs, self.lr, self.aug_policy
        );
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::format("checkpoint", format!("metadata entry `{k}` is not a single key=value line")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        w.str32(&meta);
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let arch: ArchDescriptor = r.str32()?.parse()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = r.utf8(len)?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("checkpoint", "dims overflow"))?;
            let data = r.f32s(numel)?.into_iter().map(f64::from).collect();
            params.push((name, Tensor::new(&dims, data)?));
        }
        let mut meta: BTreeMap<String, String> = BTreeMap::new();
        for line in r.str32()?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format("checkpoint", format!("bad metadata line `{line}`")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        r.finish()?;
        let mut take = |key: &str| meta.remove(key).ok_or_else(|| Error::format("checkpoint", format!("metadata lacks `{key}`")));
        let bad = |key: &str| Error::format("checkpoint", format!("bad metadata value for `{key}`"));
        let seed = take("seed")?.parse().map_err(|_| bad("seed"))?;
        let epochs = take("epochs")?.parse().map_err(|_| bad("epochs"))?;
        let lr = take("lr")?.parse().map_err(|_| bad("lr"))?;
        let aug_policy = take("aug_policy")?;
        let record = CheckpointRecord {
            arch,
            seed,
            epochs,
            lr,
            aug_policy,
            params,
            meta,
        };
        // Names and shapes must agree with the architecture.
        record.to_network()?;
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// How pretraining hyperparameters vary across the pool.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSpec {
    pub models: usize,
    pub epochs: usize,
    /// Learning rates are drawn log-uniformly from this range.
    pub lr_range: (f64, f64),
    /// Each model trains with one policy picked uniformly from this list.
    pub policies: Vec<AugPolicy>,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            models: 5,
            epochs: 2,
            lr_range: (0.005, 0.02),
            policies: vec![AugPolicy::none(), AugPolicy::standard()],
            batch: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// Per-model draw from a [`PretrainSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPlan {
    pub seed: u64,
    pub lr: f64,
    pub policy: AugPolicy,
}

impl PretrainSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lr_range;
        if self.models == 0 {
            return Err(Error::invalid("pretrain", "pool needs at least one model"));
        }
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("pretrain", format!("bad lr range ({lo}, {hi})")));
        }
        if self.policies.is_empty() || self.batch == 0 {
            return Err(Error::invalid("pretrain", "need at least one policy and a positive batch"));
        }
        Ok(())
    }

    /// Seeds, learning rates and policies for every model, drawn up front so
    /// they do not depend on scheduling.
    pub fn plans(&self) -> Result<Vec<ModelPlan>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.lr_range;
        Ok((0..self.models)
            .map(|_| {
                let seed = rng.random();
                let u: f64 = rng.random();
                let lr = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                let policy = self.policies[rng.random_range(0..self.policies.len())].clone();
                ModelPlan { seed, lr, policy }
            })
            .collect())
    }
}

/// Trains every model of the pool and keeps a checkpoint after each epoch
/// count listed in `at` (0 is the initialization). The result is indexed
/// like `at`.
pub fn pretrain_snapshots(ds: &Dataset, arch: &ArchDescriptor, spec: &PretrainSpec, at: &[usize]) -> Result<Vec<Vec<CheckpointRecord>>> {
    if ds.is_empty() {
        return Err(Error::invalid("pretrain", "empty dataset"));
    }
    if arch.num_classes != ds.num_classes() || arch.input != ds.image_dims() {
        return Err(Error::invalid("pretrain", format!("architecture `{arch}` does not fit the dataset")));
    }
    let plans = spec.plans()?;
    let last = at.iter().copied().max().unwrap_or(0);
    let per_model: Vec<Vec<CheckpointRecord>> = plans
        .par_iter()
        .map(|plan| -> Result<Vec<CheckpointRecord>> {
            let mut net = Network::build(arch, plan.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut opt = Sgd::new(plan.lr, spec.momentum, spec.weight_decay);
            let mut snaps: Vec<Option<CheckpointRecord>> = vec![None; at.len()];
            let mut loss = f64::NAN;
            for epoch in 0..=last {
                if epoch > 0 {
                    loss = train_epoch(&mut net, ds.images(), ds.labels(), spec.batch, &mut opt, &plan.policy, &mut rng)?;
                }
                for (slot, &e) in snaps.iter_mut().zip(at) {
                    if e == epoch {
                        let mut rec = CheckpointRecord::from_network(&net, plan.seed, epoch, plan.lr, &plan.policy);
                        if epoch > 0 {
                            rec.meta.insert("final_loss".into(), loss.to_string());
                        }
                        *slot = Some(rec);
                    }
                }
            }
            Ok(snaps.into_iter().map(|s| s.expect("every snapshot epoch is visited")).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..at.len()).map(|k| per_model.iter().map(|m| m[k].clone()).collect()).collect())
}

/// Pretrains `spec.models` networks for exactly `spec.epochs` epochs each and,
/// when `out_dir` is given, writes them as `model_000.ddck`, `model_001.ddck`, ...
pub fn pretrain_pool(ds: &Dataset, arch: &ArchDescriptor, spec: &PretrainSpec, out_dir: Option<&Path>) -> Result<Vec<CheckpointRecord>> {
    let records = pretrain_snapshots(ds, arch, spec, &[spec.epochs])?.remove(0);
    if let Some(dir) = out_dir {
        write_pool(&records, dir)?;
    }
    Ok(records)
}

pub fn checkpoint_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("model_{index:03}.ddck"))
}

pub fn write_pool(records: &[CheckpointRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, rec) in records.iter().enumerate() {
        rec.save(&checkpoint_path(dir, i))?;
    }
    Ok(())
}

/// How an outer step picks its starting network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Random,
    WeightAverage,
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selection::Random => "random",
            Selection::WeightAverage => "weight-average",
        })
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selection::Random),
            "weight-average" | "average" => Ok(Selection::WeightAverage),
            other => Err(Error::invalid("selection", format!("unknown selection `{other}`"))),
        }
    }
}

/// A non-empty set of checkpoints sharing one architecture.
#[derive(Clone, Debug)]
pub struct Pool {
    records: Vec<CheckpointRecord>,
    nets: Vec<Network>,
}

impl Pool {
    pub fn new(records: Vec<CheckpointRecord>) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::invalid("pool", "empty pool"))?;
        if let Some(other) = records.iter().find(|r| r.arch != first.arch) {
            return Err(Error::invalid("pool", format!("mixed architectures `{}` and `{}`", first.arch, other.arch)));
        }
        let nets = records.iter().map(CheckpointRecord::to_network).collect::<Result<_>>()?;
        Ok(Pool { records, nets })
    }

    /// Loads every `*.ddck` file of `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ddck"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::invalid("pool", format!("no .ddck checkpoints in {}", dir.display())));
        }
        Pool::new(paths.iter().map(|p| CheckpointRecord::load(p)).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.records[0].arch
    }

    pub fn records(&self) -> &[CheckpointRecord] {
        &self.records
    }

    /// Element-wise mean of all members.
    pub fn weight_average(&self) -> Network {
        let mut avg = self.nets[0].clone();
        let inv = 1.0 / self.nets.len() as f64;
        for (k, p) in avg.params.iter_mut().enumerate() {
            let data = p.value.data_mut();
            for other in &self.nets[1..] {
                for (a, &b) in data.iter_mut().zip(other.params[k].value.data()) {
                    *a += b;
                }
            }
            data.iter_mut().for_each(|v| *v *= inv);
        }
        avg
    }

    /// A starting network and, for random selection, the member index it came from.
    pub fn sample<R: Rng + ?Sized>(&self, mode: Selection, rng: &mut R) -> (Network, Option<usize>) {
        match mode {
            Selection::Random => {
                let i = rng.random_range(0..self.nets.len());
                (self.nets[i].clone(), Some(i))
            }
            Selection::WeightAverage => (self.weight_average(), None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::two_halves;
    use crate::train::accuracy;

    fn arch() -> ArchDescriptor {
        ArchDescriptor::convnet(1, 4, 2, (1, 8, 8))
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let net = Network::build(&arch(), 3).unwrap();
        let mut rec = CheckpointRecord::from_network(&net, 3, 2, 0.0125, &AugPolicy::standard());
        rec.meta.insert("final_loss".into(), "0.25".into());
        let back = CheckpointRecord::from_bytes(&rec.to_bytes().unwrap()).unwrap();
        assert_eq!(back, rec);
        let mut bytes = rec.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(CheckpointRecord::from_bytes(&bytes).is_err());
        assert!(CheckpointRecord::from_bytes(&rec.to_bytes().unwrap()[..40]).is_err());
    }

    #[test]
    fn zero_epochs_gives_distinct_initializations() {
        let ds = two_halves(8, 4, 0, None).unwrap();
        let spec = PretrainSpec { models: 5, epochs: 0, ..PretrainSpec::default() };
        let pool = pretrain_pool(&ds, &arch(), &spec, None).unwrap();
        assert_eq!(pool.len(), 5);
        for (i, a) in pool.iter().enumerate() {
            assert_eq!(a.epochs, 0);
            for b in &pool[i + 1..] {
                assert_ne!(a.seed, b.seed);
                assert_ne!(a.params, b.params);
            }
        }
    }

    #[test]
    fn one_epoch_beats_chance_on_separable_toy() {
        let ds = two_halves(8, 32, 0, None).unwrap();
        let spec = PretrainSpec { models: 1, epochs: 1, batch: 8, policies: vec![AugPolicy::none()], ..PretrainSpec::default() };
        let rec = &pretrain_pool(&ds, &arch(), &spec, None).unwrap()[0];
        let acc = accuracy(&rec.to_network().unwrap(), ds.images(), ds.labels()).unwrap();
        assert!(acc > 0.5, "accuracy {acc}");
    }

    #[test]
    fn weight_average_of_opposites_is_zero() {
        let net = Network::build(&arch(), 1).unwrap();
        let mut neg = net.clone();
        for p in &mut neg.params {
            p.value = p.value.map(|v| -v);
        }
        let pool = Pool::new(vec![
            CheckpointRecord::from_network(&net, 1, 0, 0.01, &AugPolicy::none()),
            CheckpointRecord::from_network(&neg, 1, 0, 0.01, &AugPolicy::none()),
        ])
        .unwrap();
        let (avg, idx) = pool.sample(Selection::WeightAverage, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(idx, None);
        assert!(avg.params.iter().all(|p| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mixed_architectures_are_refused() {
        let a = Network::build(&arch(), 1).unwrap();
        let b = Network::build(&ArchDescriptor::convnet(1, 8, 2, (1, 8, 8)), 1).unwrap();
        let recs = vec![
            CheckpointRecord::from_network(&a, 1, 0, 0.01, &AugPolicy::none()),
            CheckpointRecord::from_network(&b, 1, 0, 0.01, &AugPolicy::none()),
        ];
        assert!(Pool::new(recs).is_err());
        assert!(Pool::new(Vec::new()).is_err());
    }
}
