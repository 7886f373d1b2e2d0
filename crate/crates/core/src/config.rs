//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! (`pool.n`, `distill.alpha`). Every key has a default listed in [`KEYS`];
//! unknown keys are rejected. Values are resolved in the order
//! defaults, file, overrides, and [`Values::to_text`] echoes the result in a
//! form that [`Values::parse`] reads back to the same configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugPolicy;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::matchloss::{MatchConfig, Objective, Reduction};
use crate::modelpool::{PretrainSpec, Selection};
use crate::nets::{ArchDescriptor, ArchKind, Norm};

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, doc: &'static str) -> Key {
    Key { name, default, doc }
}

/// Every accepted key with its default.
pub const KEYS: &[Key] = &[
    key("seed", "0", "seed for pretraining, initialization, distillation and evaluation"),
    key("out.dir", "runs/default", "output directory"),
    key("data.format", "glyphs", "idx | cifar | glyphs (procedural digits, no files needed)"),
    key("data.train_images", "", "IDX image file of the training split"),
    key("data.train_labels", "", "IDX label file of the training split"),
    key("data.test_images", "", "IDX image file of the test split"),
    key("data.test_labels", "", "IDX label file of the test split"),
    key("data.cifar_dir", "", "directory with data_batch_*.bin and test_batch.bin"),
    key("data.classes", "10", "number of classes"),
    key("data.glyph_side", "16", "glyph image side in pixels"),
    key("data.glyph_train_per_class", "200", "glyph training images per class"),
    key("data.glyph_test_per_class", "100", "glyph test images per class"),
    key("data.glyph_seed", "0", "seed of the procedural glyphs, independent of `seed`"),
    key("model.kind", "convnet", "convnet | mlp"),
    key("model.depth", "3", "conv blocks (convnet) or hidden layers (mlp)"),
    key("model.width", "32", "channels (convnet) or hidden units (mlp)"),
    key("model.norm", "group", "group (one group per channel) | group:G | none"),
    key("pool.dir", "", "checkpoint directory; empty means <out.dir>/pool"),
    key("pool.n", "5", "pool size N; distillation uses the first N members"),
    key("pool.epochs", "2", "pretraining epochs P"),
    key("pool.lr_min", "0.005", "lower end of the log-uniform pretraining lr range"),
    key("pool.lr_max", "0.02", "upper end of the log-uniform pretraining lr range"),
    key("pool.batch", "64", "pretraining batch size"),
    key("pool.momentum", "0.9", "pretraining momentum"),
    key("pool.weight_decay", "0.0005", "pretraining weight decay"),
    key("pool.policies", "none | flip@0.5,shift(4),cutout(0.25)", "`|`-separated augmentation policies, one picked per model"),
    key("distill.outer_loops", "400", "outer loops T"),
    key("distill.reference_outer_loops", "2000", "T of the reference schedule that --preset divides"),
    key("distill.inner_loops", "5", "inner loops M"),
    key("distill.alpha", "1", "perturbation magnitude"),
    key("distill.epsilon", "1e-10", "filter-normalization epsilon"),
    key("distill.net_lr", "0.01", "network lr of the real-data update"),
    key("distill.image_lr", "0.01", "synthetic-pixel lr"),
    key("distill.image_momentum", "0", "synthetic-pixel momentum"),
    key("distill.real_batch", "64", "real images per class for each synthetic update"),
    key("distill.net_batch", "64", "real images for each network update"),
    key("distill.objective", "l2", "cosine | l2 | distmatch"),
    key("distill.layers", "", "comma-separated parameter-name prefixes to match; empty means all"),
    key("distill.reduction", "sum", "sum | mean over matched groups"),
    key("distill.aug", "flip@0.5,shift(4),cutout(0.25)", "augmentation shared by both branches"),
    key("distill.selection", "random", "random | weight-average"),
    key("distill.parallel_classes", "false", "compute per-class gradients in parallel"),
    key("distill.class_balanced", "false", "balance the network-update batch over classes"),
    key("distill.snapshot_every", "0", "write the synthetic set every k outer loops; 0 disables"),
    key("synthetic.ipc", "10", "stored images per class"),
    key("synthetic.factor", "1", "multi-formation factor"),
    key("eval.epochs", "60", "training epochs per evaluation"),
    key("eval.lr", "0.01", "initial lr, cosine-decayed to zero"),
    key("eval.batch", "256", "evaluation batch size"),
    key("eval.momentum", "0.9", "evaluation momentum"),
    key("eval.weight_decay", "0.0005", "evaluation weight decay"),
    key("eval.aug", "flip@0.5,shift(4),cutout(0.25)", "evaluation augmentation"),
    key("eval.reps", "3", "repetitions, at least 3"),
    key("eval.baseline", "true", "also evaluate a random real subset of equal size"),
];

fn lookup(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

/// Resolved key/value pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Values {
    map: BTreeMap<String, String>,
}

impl Default for Values {
    fn default() -> Self {
        Values { map: KEYS.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl Values {
    /// Applies the settings in `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Values> {
        let mut v = Values::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, val) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                msg: format!("line {} is not `key = value`", no + 1),
            })?;
            v.set(k.trim(), val.trim())?;
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Values> {
        if !path.is_file() {
            return Err(Error::MissingInput { key: "--config".into(), path: path.to_path_buf() });
        }
        Values::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if lookup(key).is_none() {
            return Err(Error::Config { key: key.into(), msg: "unknown key".into() });
        }
        self.map.insert(key.into(), value.into());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.into(),
            msg: "override must look like key=value".into(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.map.get(key).map(String::as_str).unwrap_or_else(|| panic!("`{key}` is not a known key"))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).parse().map_err(|e: T::Err| Error::Config { key: key.into(), msg: e.to_string() })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Every key, sorted, one `key = value` line each.
    pub fn to_text(&self) -> String {
        self.map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Cifar { dir: PathBuf },
    Glyphs { side: usize, train_per_class: usize, test_per_class: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    /// `None` means one group per channel.
    pub norm: Option<Norm>,
}

impl ModelConfig {
    pub fn arch(&self, num_classes: usize, input: (usize, usize, usize)) -> ArchDescriptor {
        let mut arch = match self.kind {
            ArchKind::ConvNet => ArchDescriptor::convnet(self.depth, self.width, num_classes, input),
            ArchKind::Mlp => ArchDescriptor::mlp(self.depth, self.width, num_classes, input),
        };
        if let Some(norm) = self.norm {
            arch.norm = norm;
        }
        arch
    }
}

/// Typed view of a resolved [`Values`].
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub values: Values,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub classes: usize,
    pub model: ModelConfig,
    pub pool_dir: PathBuf,
    pub pretrain: PretrainSpec,
    pub distill: DistillConfig,
    pub reference_outer_loops: usize,
    pub snapshot_every: usize,
    pub ipc: usize,
    pub factor: usize,
    /// Evaluation protocol without the architecture, which depends on the data.
    pub eval_epochs: usize,
    pub eval_lr: f64,
    pub eval_batch: usize,
    pub eval_momentum: f64,
    pub eval_weight_decay: f64,
    pub eval_aug: AugPolicy,
    pub eval_reps: usize,
    pub eval_baseline: bool,
}

fn bool_of(v: &Values, key: &str) -> Result<bool> {
    match v.get(key) {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config { key: key.into(), msg: format!("`{other}` is not true or false") }),
    }
}

fn required(v: &Values, key: &str) -> Result<PathBuf> {
    v.path(key).ok_or_else(|| Error::MissingInput { key: key.into(), path: PathBuf::new() })
}

impl RunConfig {
    pub fn from_values(v: Values) -> Result<RunConfig> {
        let seed: u64 = v.parsed("seed")?;
        let out_dir = v.path("out.dir").ok_or_else(|| Error::Config { key: "out.dir".into(), msg: "must not be empty".into() })?;
        let data = match v.get("data.format") {
            "idx" => DataSource::Idx {
                train_images: required(&v, "data.train_images")?,
                train_labels: required(&v, "data.train_labels")?,
                test_images: required(&v, "data.test_images")?,
                test_labels: required(&v, "data.test_labels")?,
            },
            "cifar" => DataSource::Cifar { dir: required(&v, "data.cifar_dir")? },
            "glyphs" => DataSource::Glyphs {
                side: v.parsed("data.glyph_side")?,
                train_per_class: v.parsed("data.glyph_train_per_class")?,
                test_per_class: v.parsed("data.glyph_test_per_class")?,
                seed: v.parsed("data.glyph_seed")?,
            },
            other => return Err(Error::Config { key: "data.format".into(), msg: format!("unknown format `{other}`") }),
        };
        let model = ModelConfig {
            kind: match v.get("model.kind") {
                "convnet" => ArchKind::ConvNet,
                "mlp" => ArchKind::Mlp,
                other => return Err(Error::Config { key: "model.kind".into(), msg: format!("unknown kind `{other}`") }),
            },
            depth: v.parsed("model.depth")?,
            width: v.parsed("model.width")?,
            norm: match v.get("model.norm") {
                "group" => None,
                "none" => Some(Norm::None),
                other => match other.strip_prefix("group:").and_then(|g| g.parse().ok()) {
                    Some(g) => Some(Norm::Group(g)),
                    None => return Err(Error::Config { key: "model.norm".into(), msg: format!("unknown norm `{other}`") }),
                },
            },
        };
        let pool_dir = v.path("pool.dir").unwrap_or_else(|| out_dir.join("pool"));
        let policies = v
            .get("pool.policies")
            .split('|')
            .map(|p| p.parse().map_err(|e: Error| Error::Config { key: "pool.policies".into(), msg: e.to_string() }))
            .collect::<Result<Vec<AugPolicy>>>()?;
        let pretrain = PretrainSpec {
            models: v.parsed("pool.n")?,
            epochs: v.parsed("pool.epochs")?,
            lr_range: (v.parsed("pool.lr_min")?, v.parsed("pool.lr_max")?),
            policies,
            batch: v.parsed("pool.batch")?,
            momentum: v.parsed("pool.momentum")?,
            weight_decay: v.parsed("pool.weight_decay")?,
            seed,
        };
        let layers = v.get("distill.layers").split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        let reduction = match v.get("distill.reduction") {
            "sum" => Reduction::Sum,
            "mean" => Reduction::Mean,
            other => return Err(Error::Config { key: "distill.reduction".into(), msg: format!("unknown reduction `{other}`") }),
        };
        let distill = DistillConfig {
            outer_loops: v.parsed("distill.outer_loops")?,
            inner_loops: v.parsed("distill.inner_loops")?,
            pool_size: pretrain.models,
            pretrain_epochs: pretrain.epochs,
            alpha: v.parsed("distill.alpha")?,
            epsilon: v.parsed("distill.epsilon")?,
            net_lr: v.parsed("distill.net_lr")?,
            image_lr: v.parsed("distill.image_lr")?,
            image_momentum: v.parsed("distill.image_momentum")?,
            real_batch: v.parsed("distill.real_batch")?,
            net_batch: v.parsed("distill.net_batch")?,
            matching: MatchConfig { objective: v.parsed::<Objective>("distill.objective")?, layers, reduction },
            aug: v.parsed("distill.aug")?,
            selection: v.parsed::<Selection>("distill.selection")?,
            seed,
            parallel_classes: bool_of(&v, "distill.parallel_classes")?,
            class_balanced: bool_of(&v, "distill.class_balanced")?,
        };
        distill.validate().map_err(|e| Error::Config { key: "distill.*".into(), msg: e.to_string() })?;
        Ok(RunConfig {
            seed,
            out_dir,
            data,
            classes: v.parsed("data.classes")?,
            model,
            pool_dir,
            pretrain,
            distill,
            reference_outer_loops: v.parsed("distill.reference_outer_loops")?,
            snapshot_every: v.parsed("distill.snapshot_every")?,
            ipc: v.parsed("synthetic.ipc")?,
            factor: v.parsed("synthetic.factor")?,
            eval_epochs: v.parsed("eval.epochs")?,
            eval_lr: v.parsed("eval.lr")?,
            eval_batch: v.parsed("eval.batch")?,
            eval_momentum: v.parsed("eval.momentum")?,
            eval_weight_decay: v.parsed("eval.weight_decay")?,
            eval_aug: v.parsed("eval.aug")?,
            eval_reps: v.parsed("eval.reps")?,
            eval_baseline: bool_of(&v, "eval.baseline")?,
            values: v,
        })
    }

    pub fn protocol(&self, arch: ArchDescriptor) -> EvalProtocol {
        EvalProtocol {
            arch,
            epochs: self.eval_epochs,
            lr: self.eval_lr,
            batch: self.eval_batch,
            momentum: self.eval_momentum,
            weight_decay: self.eval_weight_decay,
            aug: self.eval_aug.clone(),
        }
    }
}

/// Outer loops for a `xK` speed-up preset: the reference T divided by K, exactly.
pub fn preset_outer_loops(preset: &str, reference: usize) -> Result<usize> {
    let k: usize = preset
        .strip_prefix('x')
        .and_then(|k| k.parse().ok())
        .filter(|k| [5, 10, 20].contains(k))
        .ok_or_else(|| Error::Config { key: "--preset".into(), msg: format!("`{preset}` is not x5, x10 or x20") })?;
    if reference % k != 0 {
        return Err(Error::Config {
            key: "distill.reference_outer_loops".into(),
            msg: format!("{reference} is not divisible by {k}"),
        });
    }
    Ok(reference / k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::from_values(Values::default()).unwrap();
        assert_eq!(cfg.distill.outer_loops, 400);
        assert_eq!(cfg.pretrain.policies.len(), 2);
        assert_eq!(cfg.pool_dir, PathBuf::from("runs/default/pool"));
        assert_eq!(cfg.distill.aug, AugPolicy::standard());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_key() {
        match Values::parse("pool.nn = 3").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "pool.nn"),
            e => panic!("{e}"),
        }
        let v = Values::parse("distill.alpha = lots").unwrap();
        match RunConfig::from_values(v).unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "distill.alpha"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn echo_round_trips() {
        let mut v = Values::parse("# comment\npool.n = 7   # trailing\n\ndistill.objective=cosine\n").unwrap();
        v.apply("seed=9").unwrap();
        assert_eq!(Values::parse(&v.to_text()).unwrap(), v);
        assert_eq!(v.get("pool.n"), "7");
    }

    #[test]
    fn idx_requires_paths() {
        let v = Values::parse("data.format = idx").unwrap();
        match RunConfig::from_values(v).unwrap_err() {
            Error::MissingInput { key, .. } => assert_eq!(key, "data.train_images"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn presets_divide_exactly() {
        assert_eq!(preset_outer_loops("x5", 2000).unwrap(), 400);
        assert_eq!(preset_outer_loops("x10", 2000).unwrap(), 200);
        assert_eq!(preset_outer_loops("x20", 2000).unwrap(), 100);
        assert!(preset_outer_loops("x3", 2000).is_err());
        assert!(preset_outer_loops("x20", 2010).is_err());
    }
}
