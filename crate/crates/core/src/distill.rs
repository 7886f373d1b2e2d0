//! The distillation loop: outer steps over perturbed early-stage networks,
//! inner steps alternating per-class synthetic updates with real-data
//! network updates. Also the DDSY synthetic-set file format.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, apply_tensor, AugPolicy, MultiForm, SharedDraw};
use crate::codec::{Reader, Writer};
use crate::data::{denormalize_u8, sample_batch, sample_class_batch, Batch, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::matchloss::{synth_grad, MatchConfig};
use crate::modelpool::{Pool, Selection};
use crate::nets::Network;
use crate::perturb::{perturb, DEFAULT_EPSILON};
use crate::tensor::Tensor;

pub const SYNTHETIC_MAGIC: &[u8; 4] = b"DDSY";
pub const SYNTHETIC_VERSION: u32 = 1;

/// Learnable synthetic images, `ipc` stored images per class, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSet {
    images: Tensor,
    labels: Vec<usize>,
    ipc: usize,
    num_classes: usize,
    factor: usize,
    stats: ChannelStats,
}

impl SyntheticSet {
    pub fn new(images: Tensor, ipc: usize, num_classes: usize, factor: usize, stats: ChannelStats) -> Result<Self> {
        let d = images.dims();
        if d.len() != 4 || d[0] != ipc * num_classes || ipc == 0 || num_classes == 0 {
            return Err(Error::invalid("synthetic", format!("images {d:?} do not hold {ipc} per class for {num_classes} classes")));
        }
        if stats.mean.len() != d[1] || stats.std.len() != d[1] {
            return Err(Error::invalid("synthetic", "channel statistics do not match image channels"));
        }
        MultiForm::new(factor)?.decode_tensor(&images.slice0(0, 1)?)?;
        let labels = (0..num_classes).flat_map(|c| std::iter::repeat_n(c, ipc)).collect();
        Ok(SyntheticSet { images, labels, ipc, num_classes, factor, stats })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Stored images of class `c`.
    pub fn class_images(&self, c: usize) -> Result<Tensor> {
        self.images.slice0(c * self.ipc, self.ipc)
    }

    /// The training set the stored images stand for: multi-formation decoded,
    /// with matching labels.
    pub fn decoded(&self) -> Result<(Tensor, Vec<usize>)> {
        let mf = MultiForm::new(self.factor)?;
        Ok((mf.decode_tensor(&self.images)?, mf.decode_labels(&self.labels)))
    }

    /// Pixels clamped to the valid range and quantized, for viewing.
    pub fn to_u8(&self) -> Vec<u8> {
        denormalize_u8(&self.images, &self.stats)
    }

    /// The same set with pixels and statistics narrowed to f32.
    pub fn rounded(&self) -> SyntheticSet {
        let r = |v: &f64| *v as f32 as f64;
        SyntheticSet {
            images: self.images.map(|v| v as f32 as f64),
            stats: ChannelStats {
                mean: self.stats.mean.iter().map(r).collect(),
                std: self.stats.std.iter().map(r).collect(),
            },
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let too_big = |what: &str| Error::format("synthetic set", format!("{what} does not fit the header field"));
        let mut w = Writer::default();
        w.bytes(SYNTHETIC_MAGIC);
        w.u32(SYNTHETIC_VERSION);
        w.u8(u8::try_from(self.factor).map_err(|_| too_big("factor"))?);
        w.u16(u16::try_from(self.ipc).map_err(|_| too_big("ipc"))?);
        w.u16(u16::try_from(self.num_classes).map_err(|_| too_big("class count"))?);
        for &d in self.images.dims() {
            w.u32(u32::try_from(d).map_err(|_| too_big("dimension"))?);
        }
        for &v in self.images.data() {
            w.f32(v as f32);
        }
        for &l in &self.labels {
            w.u16(l as u16);
        }
        for &m in &self.stats.mean {
            w.f32(m as f32);
        }
        for &s in &self.stats.std {
            w.f32(s as f32);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "synthetic set");
        r.magic(SYNTHETIC_MAGIC)?;
        let version = r.u32()?;
        if version != SYNTHETIC_VERSION {
            return Err(Error::format("synthetic set", format!("unsupported version {version}")));
        }
        let factor = r.u8()? as usize;
        let ipc = r.u16()? as usize;
        let classes = r.u16()? as usize;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("synthetic set", "dims overflow"))?;
        let pixels = r.f32s(numel)?.into_iter().map(f64::from).collect();
        let labels = (0..dims[0]).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
        let mean = r.f32s(dims[1])?.into_iter().map(f64::from).collect();
        let std = r.f32s(dims[1])?.into_iter().map(f64::from).collect();
        r.finish()?;
        let set = SyntheticSet::new(Tensor::new(&dims, pixels)?, ipc, classes, factor, ChannelStats { mean, std })
            .map_err(|e| Error::format("synthetic set", e.to_string()))?;
        if set.labels != labels {
            return Err(Error::format("synthetic set", "labels are not grouped by class"));
        }
        Ok(set)
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn import(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Initializes each class from `ipc * factor^2` distinct random real images of
/// that class, packed into multi-formation tiles when `factor > 1`.
pub fn init_synthetic<R: Rng + ?Sized>(ds: &Dataset, ipc: usize, factor: usize, rng: &mut R) -> Result<SyntheticSet> {
    let mf = MultiForm::new(factor)?;
    let need = ipc * mf.parts();
    let mut parts = Vec::with_capacity(ds.num_classes());
    for c in 0..ds.num_classes() {
        let idx = ds.class_indices(c);
        if idx.len() < need {
            return Err(Error::invalid("init_synthetic", format!("class {c} has {} examples, {need} needed", idx.len())));
        }
        let chosen: Vec<usize> = sample_indices(rng, idx.len(), need).into_iter().map(|k| idx[k]).collect();
        parts.push(mf.pack(&ds.select(&chosen)?.images)?);
    }
    let stats = ds.stats();
    let r = |v: &f64| *v as f32 as f64;
    let stats = ChannelStats { mean: stats.mean.iter().map(r).collect(), std: stats.std.iter().map(r).collect() };
    SyntheticSet::new(Tensor::concat0(&parts)?, ipc, ds.num_classes(), factor, stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// T: outer loops, each with a freshly sampled and perturbed network.
    pub outer_loops: usize,
    /// M: inner loops per outer loop.
    pub inner_loops: usize,
    /// N: number of pool members to draw from (the first N of the pool).
    pub pool_size: usize,
    /// P: epochs every pool member must have been pretrained for.
    pub pretrain_epochs: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// eta: network learning rate for the real-data update.
    pub net_lr: f64,
    /// lambda: synthetic-pixel learning rate.
    pub image_lr: f64,
    pub image_momentum: f64,
    /// Real images per class for each synthetic update.
    pub real_batch: usize,
    /// Real images for each network update.
    pub net_batch: usize,
    pub matching: MatchConfig,
    pub aug: AugPolicy,
    pub selection: Selection,
    pub seed: u64,
    /// Compute per-class gradients in parallel; results are unchanged.
    pub parallel_classes: bool,
    /// Draw the network-update batch evenly across classes instead of uniformly.
    pub class_balanced: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            outer_loops: 400,
            inner_loops: 5,
            pool_size: 5,
            pretrain_epochs: 2,
            alpha: 1.0,
            epsilon: DEFAULT_EPSILON,
            net_lr: 0.01,
            image_lr: 0.01,
            image_momentum: 0.0,
            real_batch: 64,
            net_batch: 64,
            matching: MatchConfig::default(),
            aug: AugPolicy::standard(),
            selection: Selection::Random,
            seed: 0,
            parallel_classes: false,
            class_balanced: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("outer_loops", self.outer_loops),
            ("inner_loops", self.inner_loops),
            ("pool_size", self.pool_size),
            ("real_batch", self.real_batch),
            ("net_batch", self.net_batch),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("distill", format!("{name} must be at least 1")));
        }
        if !(self.net_lr > 0.0) || !(self.image_lr >= 0.0) || !(self.alpha >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("distill", "learning rates and epsilon must be positive, alpha non-negative"));
        }
        if !(0.0..1.0).contains(&self.image_momentum) {
            return Err(Error::invalid("distill", "image momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One line of the run log, written after every outer loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub matching_loss_mean: f64,
    pub net_loss: f64,
    pub elapsed_ms: u64,
    /// Pool member the step started from; `null` under weight averaging.
    pub checkpoint_id: Option<usize>,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub synthetic_updates: usize,
    pub network_updates: usize,
}

impl RunLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<StepRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// Everything one class update needs from the random stream, drawn in a
/// fixed order before any gradient is computed.
struct ClassDraw {
    real: Batch,
    aug: SharedDraw,
}

fn check_pool(ds: &Dataset, pool: &Pool, s: &SyntheticSet, cfg: &DistillConfig) -> Result<Pool> {
    let arch = pool.arch();
    if arch.num_classes != ds.num_classes() || arch.input != ds.image_dims() {
        return Err(Error::invalid("distill", format!("pool architecture `{arch}` does not fit the dataset")));
    }
    if s.num_classes != ds.num_classes() || s.images.dims()[1..] != [arch.input.0, arch.input.1, arch.input.2] {
        return Err(Error::invalid("distill", "synthetic set does not match the dataset"));
    }
    if cfg.pool_size > pool.len() {
        return Err(Error::invalid("distill", format!("pool has {} members, {} requested", pool.len(), cfg.pool_size)));
    }
    let members = pool.records()[..cfg.pool_size].to_vec();
    if let Some(r) = members.iter().find(|r| r.epochs != cfg.pretrain_epochs) {
        return Err(Error::invalid("distill", format!("pool member trained for {} epochs, config expects {}", r.epochs, cfg.pretrain_epochs)));
    }
    Pool::new(members)
}

pub fn run(ds: &Dataset, pool: &Pool, s0: &SyntheticSet, cfg: &DistillConfig) -> Result<(SyntheticSet, RunLog)> {
    run_with(ds, pool, s0, cfg, |_, _| Ok(()))
}

/// [`run`] with a callback after every outer loop, given the step record and
/// the current synthetic set.
pub fn run_with<F>(ds: &Dataset, pool: &Pool, s0: &SyntheticSet, cfg: &DistillConfig, mut on_step: F) -> Result<(SyntheticSet, RunLog)>
where
    F: FnMut(&StepRecord, &SyntheticSet) -> Result<()>,
{
    cfg.validate()?;
    let pool = check_pool(ds, pool, s0, cfg)?;
    let mf = MultiForm::new(s0.factor)?;
    let (_, h, w) = ds.image_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = s0.clone();
    let mut velocity = Tensor::zeros(s.images.dims());
    let mut log = RunLog::default();
    let class_labels = |c: usize| mf.decode_labels(&vec![c; s0.ipc]);
    let start = Instant::now();

    for step in 0..cfg.outer_loops {
        let (base, checkpoint_id) = pool.sample(cfg.selection, &mut rng);
        let mut net: Network = perturb(&base, cfg.alpha, &mut rng, cfg.epsilon)?;
        let mut match_total = 0.0;
        let mut net_total = 0.0;

        for inner in 0..cfg.inner_loops {
            let draws = (0..s.num_classes)
                .map(|c| {
                    let real = sample_class_batch(ds, c, cfg.real_batch, &mut rng)?;
                    let aug = SharedDraw::sample(&cfg.aug, h, w, &mut rng)?;
                    Ok(ClassDraw {
                        real: Batch { images: apply_tensor(&real.images, &aug)?, labels: real.labels },
                        aug,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let class_grad = |(c, d): (usize, &ClassDraw)| {
                let stored = s.class_images(c)?;
                synth_grad(&net, &stored, &class_labels(c), &d.real, &cfg.matching, |v| apply(mf.decode(v)?, &d.aug))
            };
            let grads = if cfg.parallel_classes {
                draws.par_iter().enumerate().map(class_grad).collect::<Vec<_>>()
            } else {
                draws.iter().enumerate().map(class_grad).collect()
            };
            for (c, g) in grads.into_iter().enumerate() {
                let g = g?;
                if !g.loss.is_finite() || !g.grad.all_finite() {
                    return Err(Error::NonFinite { step, inner, class: c, image_lr: cfg.image_lr, net_lr: cfg.net_lr });
                }
                update_class(&mut s, &mut velocity, c, &g.grad, cfg)?;
                match_total += g.loss;
                log.synthetic_updates += 1;
            }

            let batch = if cfg.class_balanced {
                balanced_batch(ds, cfg.net_batch, &mut rng)?
            } else {
                sample_batch(ds, cfg.net_batch, &mut rng)?
            };
            let aug = SharedDraw::sample(&cfg.aug, h, w, &mut rng)?;
            let (loss, grads) = net.loss_and_grads(&apply_tensor(&batch.images, &aug)?, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, inner, class: usize::MAX, image_lr: cfg.image_lr, net_lr: cfg.net_lr });
            }
            net.sgd_step_in_place(&grads, cfg.net_lr)?;
            net_total += loss;
            log.network_updates += 1;
        }

        let record = StepRecord {
            step,
            matching_loss_mean: match_total / (cfg.inner_loops * s.num_classes) as f64,
            net_loss: net_total / cfg.inner_loops as f64,
            elapsed_ms: start.elapsed().as_millis() as u64,
            checkpoint_id,
            alpha: cfg.alpha,
        };
        on_step(&record, &s)?;
        log.steps.push(record);
    }
    Ok((s, log))
}

/// `S_c <- S_c - lambda * v`, with `v = mu v + g` (plain SGD when `mu = 0`).
fn update_class(s: &mut SyntheticSet, velocity: &mut Tensor, c: usize, grad: &Tensor, cfg: &DistillConfig) -> Result<()> {
    let len = grad.numel();
    let range = c * len..(c + 1) * len;
    let v = &mut velocity.data_mut()[range.clone()];
    for (vv, &g) in v.iter_mut().zip(grad.data()) {
        *vv = cfg.image_momentum * *vv + g;
    }
    let v = &velocity.data()[range.clone()];
    for (x, &vv) in s.images.data_mut()[range].iter_mut().zip(v) {
        *x -= cfg.image_lr * vv;
    }
    Ok(())
}

/// `size` images spread as evenly as possible over the classes.
fn balanced_batch<R: Rng + ?Sized>(ds: &Dataset, size: usize, rng: &mut R) -> Result<Batch> {
    let k = ds.num_classes();
    let mut parts = Vec::new();
    for c in 0..k {
        let n = size / k + usize::from(c < size % k);
        if n > 0 {
            parts.push(sample_class_batch(ds, c, n, rng)?);
        }
    }
    Ok(Batch {
        images: Tensor::concat0(&parts.iter().map(|b| b.images.clone()).collect::<Vec<_>>())?,
        labels: parts.into_iter().flat_map(|b| b.labels).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::two_halves;
    use crate::modelpool::{pretrain_pool, PretrainSpec};
    use crate::nets::ArchDescriptor;

    fn setup(factor: usize) -> (Dataset, Pool, SyntheticSet) {
        let ds = two_halves(8, 12, 0, None).unwrap();
        let arch = ArchDescriptor::convnet(1, 4, 2, (1, 8, 8));
        let spec = PretrainSpec { models: 2, epochs: 0, ..PretrainSpec::default() };
        let pool = Pool::new(pretrain_pool(&ds, &arch, &spec, None).unwrap()).unwrap();
        let s = init_synthetic(&ds, 2, factor, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (ds, pool, s)
    }

    fn small_cfg() -> DistillConfig {
        DistillConfig {
            outer_loops: 2,
            inner_loops: 2,
            pool_size: 2,
            pretrain_epochs: 0,
            real_batch: 4,
            net_batch: 4,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn init_uses_real_images_of_each_class() {
        let (ds, _, s) = setup(1);
        assert_eq!(s.labels(), &[0, 0, 1, 1]);
        for c in 0..2 {
            let imgs = s.class_images(c).unwrap();
            for k in 0..2 {
                let img = imgs.slice0(k, 1).unwrap();
                let found = ds.class_indices(c).iter().any(|&i| ds.images().slice0(i, 1).unwrap() == img);
                assert!(found);
            }
        }
        assert!(init_synthetic(&ds, 13, 1, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn zero_image_lr_keeps_images() {
        let (ds, pool, s0) = setup(1);
        let cfg = DistillConfig { image_lr: 0.0, outer_loops: 1, inner_loops: 1, ..small_cfg() };
        let (s, log) = run(&ds, &pool, &s0, &cfg).unwrap();
        assert_eq!(s, s0);
        assert_eq!(log.synthetic_updates, 2);
        assert_eq!(log.network_updates, 1);
    }

    #[test]
    fn parallel_classes_do_not_change_the_result() {
        let (ds, pool, s0) = setup(2);
        let cfg = small_cfg();
        let a = run(&ds, &pool, &s0, &cfg).unwrap().0;
        let b = run(&ds, &pool, &s0, &DistillConfig { parallel_classes: true, ..cfg }).unwrap().0;
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_ne!(a, s0);
    }

    #[test]
    fn ddsy_roundtrip_and_corruption() {
        let (_, _, s) = setup(2);
        let bytes = s.to_bytes().unwrap();
        let back = SyntheticSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, s.rounded());
        assert_eq!(back.factor(), 2);
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(SyntheticSet::from_bytes(&bad).is_err());
        assert!(SyntheticSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(SyntheticSet::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn pool_epoch_mismatch_is_rejected() {
        let (ds, pool, s0) = setup(1);
        let cfg = DistillConfig { pretrain_epochs: 2, ..small_cfg() };
        assert!(run(&ds, &pool, &s0, &cfg).is_err());
        let cfg = DistillConfig { pool_size: 3, ..small_cfg() };
        assert!(run(&ds, &pool, &s0, &cfg).is_err());
    }

    #[test]
    fn nan_pixel_reports_non_finite() {
        let (ds, pool, s0) = setup(1);
        let mut images = s0.images().clone();
        images.data_mut()[40] = f64::NAN;
        let s0 = SyntheticSet::new(images, 2, 2, 1, s0.stats().clone()).unwrap();
        match run(&ds, &pool, &s0, &small_cfg()) {
            Err(Error::NonFinite { step, class, .. }) => assert_eq!((step, class), (0, 0)),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
