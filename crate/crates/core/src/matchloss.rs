//! Matching objectives between real and synthetic gradients (or feature
//! means), and the second-order gradient of the objective with respect to
//! synthetic pixels.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nets::{filter_ranges, FilterAxis, Network};
use crate::tensor::Tensor;

/// Norm threshold below which a channel is considered zero and skipped by
/// the cosine objective.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Sum over channels of `1 - cos(gS_ch, gT_ch)`.
    Cosine,
    /// Squared Frobenius distance of the gradients.
    L2,
    /// Squared distance between mean penultimate features.
    DistMatch,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Cosine => "cosine",
            Objective::L2 => "l2",
            Objective::DistMatch => "distmatch",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Objective::Cosine),
            "l2" => Ok(Objective::L2),
            "distmatch" => Ok(Objective::DistMatch),
            other => Err(Error::invalid("objective", format!("unknown objective `{other}`"))),
        }
    }
}

/// How per-group distances combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub objective: Objective,
    /// Parameter-name prefixes to include (`conv1`, `fc.weight`, ...); empty means all.
    pub layers: Vec<String>,
    pub reduction: Reduction,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            objective: Objective::L2,
            layers: Vec::new(),
            reduction: Reduction::Sum,
        }
    }
}

impl MatchConfig {
    pub fn with_objective(objective: Objective) -> Self {
        MatchConfig {
            objective,
            ..MatchConfig::default()
        }
    }

    fn includes(&self, name: &str) -> bool {
        self.layers.is_empty() || self.layers.iter().any(|l| name.starts_with(l.as_str()))
    }
}

/// Gradients of the training loss, one tensor per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub names: Vec<String>,
    pub filters: Vec<FilterAxis>,
    pub tensors: Vec<Tensor>,
}

impl GradSet {
    fn check_aligned(&self, other: &GradSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("match", format!("grad sets disagree on groups: {:?} vs {:?}", self.names, other.names)));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.dims() != b.dims() {
                return Err(Error::shape("match", a.dims(), b.dims()));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> GradSet {
        GradSet {
            tensors: self.tensors.iter().map(|t| t.map(|v| v * c)).collect(),
            ..self.clone()
        }
    }

    fn included(&self, cfg: &MatchConfig) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.names.len()).filter(|&i| cfg.includes(&self.names[i])).collect();
        if idx.is_empty() {
            return Err(Error::invalid("match", format!("layer filter {:?} selects no parameter group", cfg.layers)));
        }
        Ok(idx)
    }
}

/// Cross-entropy gradients of `net` on a labelled batch.
pub fn grads_of_loss(net: &Network, images: &Tensor, labels: &[usize]) -> Result<GradSet> {
    let (_, tensors) = net.loss_and_grads(images, labels)?;
    Ok(GradSet {
        names: net.params.iter().map(|p| p.name.clone()).collect(),
        filters: net.params.iter().map(|p| p.filters).collect(),
        tensors,
    })
}

/// `1 - cos` summed over the filter rows of one group; rows where either side
/// has (near-)zero norm contribute nothing.
fn cosine_group<'t>(gs: Var<'t>, gt: Var<'t>, axis: FilterAxis) -> Result<Var<'t>> {
    let tape = gs.tape();
    let dims = gs.dims();
    let ranges = filter_ranges(&dims, axis);
    let rows = ranges.len();
    let len = ranges.first().map_or(0, |r| r.len());
    let n = rows * len;
    let flat_s = gs.reshape(&[n])?;
    let flat_t = gt.reshape(&[n])?;
    let dot = flat_s.mul(flat_t)?.reduce(1, len, &[rows])?;
    let ns = flat_s.square()?.reduce(1, len, &[rows])?;
    let nt = flat_t.square()?.reduce(1, len, &[rows])?;
    let (nsv, ntv) = (ns.value(), nt.value());
    let skip: Vec<f64> = nsv
        .data()
        .iter()
        .zip(ntv.data())
        .map(|(&a, &b)| if a.sqrt() < COSINE_EPS || b.sqrt() < COSINE_EPS { 1.0 } else { 0.0 })
        .collect();
    let keep = Tensor::from_fn(&[rows], |i| 1.0 - skip[i]);
    let skip = tape.constant(Tensor::new(&[rows], skip)?);
    // Skipped rows get a unit denominator so no NaN leaks into the gradient.
    let denom = ns.add(skip)?.powf(0.5).mul(nt.add(skip)?.powf(0.5))?;
    let cos = dot.div(denom)?;
    let keep = tape.constant(keep);
    Ok(keep.sub(cos.mul(keep)?)?.sum())
}

fn l2_group<'t>(gs: Var<'t>, gt: Var<'t>) -> Result<Var<'t>> {
    gs.sub(gt)?.sum_sq()
}

/// Combines per-group distances for the groups selected by `cfg`.
fn match_vars<'t>(gs: &[Var<'t>], gt: &[Var<'t>], axes: &[FilterAxis], cfg: &MatchConfig) -> Result<Var<'t>> {
    let tape = gs.first().map(|v| v.tape()).ok_or_else(|| Error::invalid("match", "no groups"))?;
    let mut total: Option<Var<'t>> = None;
    for ((&s, &t), &axis) in gs.iter().zip(gt).zip(axes) {
        if s.dims() != t.dims() {
            return Err(Error::shape("match", &s.dims(), &t.dims()));
        }
        let d = match cfg.objective {
            Objective::Cosine => cosine_group(s, t, axis)?,
            Objective::L2 => l2_group(s, t)?,
            Objective::DistMatch => return Err(Error::invalid("match", "distmatch does not compare gradients")),
        };
        total = Some(match total {
            None => d,
            Some(acc) => acc.add(d)?,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(match cfg.reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.scale(1.0 / gs.len().max(1) as f64),
    })
}

fn match_values(gs: &GradSet, gt: &GradSet, cfg: &MatchConfig) -> Result<f64> {
    gs.check_aligned(gt)?;
    let idx = gs.included(cfg)?;
    let tape = Tape::new();
    let s: Vec<Var<'_>> = idx.iter().map(|&i| tape.constant(gs.tensors[i].clone())).collect();
    let t: Vec<Var<'_>> = idx.iter().map(|&i| tape.constant(gt.tensors[i].clone())).collect();
    let axes: Vec<FilterAxis> = idx.iter().map(|&i| gs.filters[i]).collect();
    match_vars(&s, &t, &axes, cfg)?.value().item()
}

/// Channel-wise cosine objective, `sum (1 - cos)` over the selected groups.
pub fn cosine_match(gs: &GradSet, gt: &GradSet, cfg: &MatchConfig) -> Result<f64> {
    match_values(gs, gt, &MatchConfig { objective: Objective::Cosine, ..cfg.clone() })
}

/// Squared Frobenius distance summed (or averaged) over the selected groups.
pub fn l2_match(gs: &GradSet, gt: &GradSet, cfg: &MatchConfig) -> Result<f64> {
    match_values(gs, gt, &MatchConfig { objective: Objective::L2, ..cfg.clone() })
}

fn mean_features<'t>(net: &Network, params: &[Var<'t>], images: Var<'t>) -> Result<Var<'t>> {
    let feats = net.features(params, images)?;
    let d = feats.dims();
    if d[0] == 0 {
        return Err(Error::invalid("dist_match", "empty batch"));
    }
    Ok(feats.reduce(d[0], 1, &[d[1]])?.scale(1.0 / d[0] as f64))
}

fn dist_match_var<'t>(net: &Network, params: &[Var<'t>], s: Var<'t>, real_mean: Var<'t>) -> Result<Var<'t>> {
    mean_features(net, params, s)?.sub(real_mean)?.sum_sq()
}

/// Squared distance between mean penultimate features of two batches.
pub fn dist_match(net: &Network, img_s: &Tensor, img_t: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let params = net.bind_const(&tape);
    let real = mean_features(net, &params, tape.constant(img_t.clone()))?;
    dist_match_var(net, &params, tape.constant(img_s.clone()), real)?.value().item()
}

/// Matching loss and its gradient with respect to the stored synthetic pixels.
#[derive(Clone, Debug)]
pub struct SynthGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// Differentiates the configured objective through the synthetic branch.
///
/// `transform` maps the stored synthetic images to the batch the network
/// sees (multi-formation decode, augmentation); `labels` label that batch.
/// The real batch is treated as a constant: nothing flows into it.
pub fn synth_grad<F>(net: &Network, stored: &Tensor, labels: &[usize], real: &Batch, cfg: &MatchConfig, transform: F) -> Result<SynthGrad>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    evaluate(net, stored, labels, real, cfg, transform, true).map(|(loss, grad)| SynthGrad {
        loss,
        grad: grad.expect("gradient requested"),
    })
}

/// The objective value alone, as [`synth_grad`] would see it.
pub fn matching_loss<F>(net: &Network, stored: &Tensor, labels: &[usize], real: &Batch, cfg: &MatchConfig, transform: F) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    evaluate(net, stored, labels, real, cfg, transform, false).map(|(loss, _)| loss)
}

fn evaluate<F>(
    net: &Network,
    stored: &Tensor,
    labels: &[usize],
    real: &Batch,
    cfg: &MatchConfig,
    transform: F,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let s = if want_grad { tape.var(stored.clone()) } else { tape.constant(stored.clone()) };
    let loss = match cfg.objective {
        Objective::DistMatch => {
            let params = net.bind_const(&tape);
            let real_mean = mean_features(net, &params, tape.constant(real.images.clone()))?.detach();
            dist_match_var(net, &params, transform(s)?, real_mean)?
        }
        Objective::Cosine | Objective::L2 => {
            let names: Vec<String> = net.params.iter().map(|p| p.name.clone()).collect();
            let idx: Vec<usize> = (0..names.len()).filter(|&i| cfg.includes(&names[i])).collect();
            if idx.is_empty() {
                return Err(Error::invalid("match", format!("layer filter {:?} selects no parameter group", cfg.layers)));
            }
            let real_grads = grads_of_loss(net, &real.images, &real.labels)?;
            let params = net.bind(&tape);
            let ce = net.forward(&params, transform(s)?)?.cross_entropy(labels)?;
            let wrt: Vec<Var<'_>> = idx.iter().map(|&i| params[i]).collect();
            let gs = tape.grad(ce, &wrt, want_grad)?;
            let gt: Vec<Var<'_>> = idx.iter().map(|&i| tape.constant(real_grads.tensors[i].clone())).collect();
            let axes: Vec<FilterAxis> = idx.iter().map(|&i| net.params[i].filters).collect();
            match_vars(&gs, &gt, &axes, cfg)?
        }
    };
    let value = loss.value().item()?;
    let grad = if want_grad {
        Some(tape.grad(loss, &[s], false)?[0].value())
    } else {
        None
    };
    Ok((value, grad))
}
