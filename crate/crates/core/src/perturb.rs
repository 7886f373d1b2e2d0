//! Filter-normalized Gaussian parameter perturbation.
//!
//! A direction `d ~ N(0, I)` is rescaled filter by filter so that each slice
//! has the Frobenius norm of the matching parameter filter (up to `eps`), then
//! added to the network with magnitude `alpha`. The per-filter rescaling removes
//! the scale invariance of ReLU networks: scaling a filter of `theta` by `c`
//! scales its displacement by `c` too.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-10;

/// One tensor per parameter group, shaped like the network it was drawn for.
#[derive(Clone, Debug, PartialEq)]
pub struct Direction {
    pub tensors: Vec<Tensor>,
}

impl Direction {
    fn check(&self, net: &Network) -> Result<()> {
        if self.tensors.len() != net.params.len() {
            return Err(Error::shape("direction", &[self.tensors.len()], &[net.params.len()]));
        }
        for (t, p) in self.tensors.iter().zip(&net.params) {
            if t.dims() != p.value.dims() {
                return Err(Error::shape("direction", t.dims(), p.value.dims()));
            }
        }
        Ok(())
    }
}

pub fn sample_direction<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Direction {
    Direction {
        tensors: net
            .params
            .iter()
            .map(|p| Tensor::from_fn(p.value.dims(), |_| rng.sample(StandardNormal)))
            .collect(),
    }
}

/// `d_f <- d_f * |theta_f| / (|d_f| + eps)` for every filter slice `f`.
pub fn filter_normalize(d: &Direction, net: &Network, eps: f64) -> Result<Direction> {
    d.check(net)?;
    let mut out = d.clone();
    for (t, p) in out.tensors.iter_mut().zip(&net.params) {
        let theta = p.value.data();
        let data = t.data_mut();
        for r in p.filter_ranges() {
            let dn = data[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            let tn = theta[r.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = tn / (dn + eps);
            data[r].iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(out)
}

/// `theta + alpha * d` as a new network.
pub fn apply_direction(net: &Network, d: &Direction, alpha: f64) -> Result<Network> {
    d.check(net)?;
    let mut out = net.clone();
    for (p, t) in out.params.iter_mut().zip(&d.tensors) {
        for (v, &dv) in p.value.data_mut().iter_mut().zip(t.data()) {
            *v += alpha * dv;
        }
    }
    Ok(out)
}

/// Samples a fresh filter-normalized direction and moves `net` along it by `alpha`.
pub fn perturb<R: Rng + ?Sized>(net: &Network, alpha: f64, rng: &mut R, eps: f64) -> Result<Network> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("perturb", format!("alpha must be >= 0, got {alpha}")));
    }
    // Draw even when alpha is zero so the random stream does not depend on alpha.
    let d = sample_direction(net, rng);
    if alpha == 0.0 {
        return Ok(net.clone());
    }
    apply_direction(net, &filter_normalize(&d, net, eps)?, alpha)
}
