//! Minibatch SGD on labelled images, shared by pretraining and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{apply_tensor, AugPolicy, SharedDraw};
use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) -> Result<()> {
        if grads.len() != net.params.len() {
            return Err(Error::shape("sgd", &[grads.len()], &[net.params.len()]));
        }
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return net.sgd_step_in_place(grads, self.lr);
        }
        if self.velocity.is_empty() {
            self.velocity = net.params.iter().map(|p| Tensor::zeros(p.value.dims())).collect();
        }
        let mut steps = Vec::with_capacity(grads.len());
        for ((p, g), v) in net.params.iter().zip(grads).zip(&mut self.velocity) {
            if g.dims() != p.value.dims() {
                return Err(Error::shape("sgd", g.dims(), p.value.dims()));
            }
            let vd = v.data_mut();
            for ((vv, &gv), &tv) in vd.iter_mut().zip(g.data()).zip(p.value.data()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * tv;
            }
            steps.push(v.clone());
        }
        net.sgd_step_in_place(&steps, self.lr)
    }
}

/// One pass over `images` in shuffled minibatches, each batch augmented with
/// its own draw from `policy`. Returns the mean batch loss.
pub fn train_epoch<R: Rng + ?Sized>(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    batch: usize,
    opt: &mut Sgd,
    policy: &AugPolicy,
    rng: &mut R,
) -> Result<f64> {
    let n = labels.len();
    if n == 0 || images.dims().first() != Some(&n) {
        return Err(Error::invalid("train", format!("{n} labels for images {:?}", images.dims())));
    }
    if batch == 0 {
        return Err(Error::invalid("train", "batch size must be positive"));
    }
    let (h, w) = (images.dims()[2], images.dims()[3]);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for idx in order.chunks(batch) {
        let mut x = images.select0(idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        if !policy.is_empty() {
            x = apply_tensor(&x, &SharedDraw::sample(policy, h, w, rng)?)?;
        }
        let (loss, grads) = net.loss_and_grads(&x, &y)?;
        opt.step(net, &grads)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Fraction of `images` whose arg-max prediction equals the label.
pub fn accuracy(net: &Network, images: &Tensor, labels: &[usize]) -> Result<f64> {
    const CHUNK: usize = 256;
    let n = labels.len();
    if n == 0 {
        return Err(Error::invalid("accuracy", "empty evaluation set"));
    }
    let mut correct = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let logits = net.predict(&images.slice0(start, end - start)?)?;
        let k = logits.dims()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels[start..end]) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / n as f64)
}
