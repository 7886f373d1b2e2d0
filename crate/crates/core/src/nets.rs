//! The ConvNet-D / MLP network family.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const KERNEL: usize = 3;
const CONV_GEOM: ConvGeom = ConvGeom { stride: 1, pad: 1 };
const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    ConvNet,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    Group(usize),
}

/// Shape of a network: family, depth, width, normalization, classes and input.
///
/// The canonical string form (see [`fmt::Display`]) is what checkpoints store,
/// e.g. `kind=convnet;depth=3;width=64;norm=group:64;classes=10;input=1x28x28`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub kind: ArchKind,
    pub depth: usize,
    pub width: usize,
    pub norm: Norm,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
}

impl ArchDescriptor {
    /// ConvNet with one group per channel (instance-style group norm).
    pub fn convnet(depth: usize, width: usize, num_classes: usize, input: (usize, usize, usize)) -> Self {
        ArchDescriptor {
            kind: ArchKind::ConvNet,
            depth,
            width,
            norm: Norm::Group(width),
            num_classes,
            input,
        }
    }

    pub fn mlp(depth: usize, width: usize, num_classes: usize, input: (usize, usize, usize)) -> Self {
        ArchDescriptor {
            kind: ArchKind::Mlp,
            depth,
            width,
            norm: Norm::None,
            num_classes,
            input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("arch", msg));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 || self.width == 0 || self.num_classes == 0 {
            return bad(format!("zero-sized field in {self}"));
        }
        match self.kind {
            ArchKind::ConvNet => {
                if self.depth == 0 {
                    return bad("convnet needs depth >= 1".into());
                }
                if let Norm::Group(g) = self.norm {
                    if g == 0 || self.width % g != 0 {
                        return bad(format!("{g} groups do not divide width {}", self.width));
                    }
                }
                let (mut fh, mut fw) = (h, w);
                for _ in 0..self.depth {
                    if fh < POOL || fw < POOL {
                        return bad(format!("input {h}x{w} too small for depth {}", self.depth));
                    }
                    fh /= POOL;
                    fw /= POOL;
                }
            }
            ArchKind::Mlp => {
                if self.norm != Norm::None {
                    return bad("mlp does not support normalization".into());
                }
            }
        }
        Ok(())
    }

    /// Spatial size of the final ConvNet feature map.
    fn feature_hw(&self) -> (usize, usize) {
        let (_, mut h, mut w) = self.input;
        for _ in 0..self.depth {
            h /= POOL;
            w /= POOL;
        }
        (h, w)
    }

    /// Width of the penultimate feature vector fed to the classifier.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ArchKind::ConvNet => {
                let (h, w) = self.feature_hw();
                self.width * h * w
            }
            ArchKind::Mlp if self.depth == 0 => self.input_len(),
            ArchKind::Mlp => self.width,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// Parameter count computed from the layer layout, independent of [`Network::build`].
    pub fn param_count(&self) -> usize {
        let k = self.num_classes;
        match self.kind {
            ArchKind::ConvNet => {
                let mut cin = self.input.0;
                let mut total = 0;
                for _ in 0..self.depth {
                    total += self.width * cin * KERNEL * KERNEL + self.width;
                    if matches!(self.norm, Norm::Group(_)) {
                        total += 2 * self.width;
                    }
                    cin = self.width;
                }
                total + self.feature_dim() * k + k
            }
            ArchKind::Mlp => {
                let mut fan_in = self.input_len();
                let mut total = 0;
                for _ in 0..self.depth {
                    total += fan_in * self.width + self.width;
                    fan_in = self.width;
                }
                total + fan_in * k + k
            }
        }
    }

    /// Multiply-adds of one forward pass on one image (convolutions and linear layers).
    pub fn forward_macs(&self) -> u64 {
        let k = self.num_classes as u64;
        match self.kind {
            ArchKind::ConvNet => {
                let (mut cin, mut h, mut w) = self.input;
                let mut macs = 0u64;
                for _ in 0..self.depth {
                    macs += (self.width * cin * KERNEL * KERNEL * h * w) as u64;
                    cin = self.width;
                    h /= POOL;
                    w /= POOL;
                }
                macs + self.feature_dim() as u64 * k
            }
            ArchKind::Mlp => {
                let mut fan_in = self.input_len() as u64;
                let mut macs = 0;
                for _ in 0..self.depth {
                    macs += fan_in * self.width as u64;
                    fan_in = self.width as u64;
                }
                macs + fan_in * k
            }
        }
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ArchKind::ConvNet => "convnet",
            ArchKind::Mlp => "mlp",
        };
        let norm = match self.norm {
            Norm::None => "none".to_string(),
            Norm::Group(g) => format!("group:{g}"),
        };
        let (c, h, w) = self.input;
        write!(
            f,
            "kind={kind};depth={};width={};norm={norm};classes={};input={c}x{h}x{w}",
            self.depth, self.width, self.num_classes
        )
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid("arch", msg);
        let mut kind = None;
        let mut depth = None;
        let mut width = None;
        let mut norm = None;
        let mut classes = None;
        let mut input = None;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{v}` is not a count")));
        for field in s.split(';') {
            let (key, val) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("field `{field}` lacks `=`")))?;
            match key.trim() {
                "kind" => {
                    kind = Some(match val {
                        "convnet" => ArchKind::ConvNet,
                        "mlp" => ArchKind::Mlp,
                        other => return Err(bad(format!("unsupported kind `{other}`"))),
                    })
                }
                "depth" => depth = Some(num(val)?),
                "width" => width = Some(num(val)?),
                "norm" => {
                    norm = Some(match val {
                        "none" => Norm::None,
                        v => match v.strip_prefix("group:") {
                            Some(g) => Norm::Group(num(g)?),
                            None => return Err(bad(format!("unsupported norm `{v}`"))),
                        },
                    })
                }
                "classes" => classes = Some(num(val)?),
                "input" => {
                    let parts: Vec<&str> = val.split('x').collect();
                    if parts.len() != 3 {
                        return Err(bad(format!("input `{val}` is not CxHxW")));
                    }
                    input = Some((num(parts[0])?, num(parts[1])?, num(parts[2])?));
                }
                other => return Err(bad(format!("unsupported field `{other}`"))),
            }
        }
        let need = |name: &str| bad(format!("missing field `{name}`"));
        let arch = ArchDescriptor {
            kind: kind.ok_or_else(|| need("kind"))?,
            depth: depth.ok_or_else(|| need("depth"))?,
            width: width.ok_or_else(|| need("width"))?,
            norm: norm.ok_or_else(|| need("norm"))?,
            num_classes: classes.ok_or_else(|| need("classes"))?,
            input: input.ok_or_else(|| need("input"))?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Which slices of a parameter count as one "filter" for normalization and
/// channel-wise matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterAxis {
    /// One filter per index of the leading axis (conv output channel, fc output row).
    Leading,
    /// The whole tensor is a single filter (biases, norm affine vectors).
    Whole,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub filters: FilterAxis,
}

impl Param {
    /// Flat index ranges of each filter slice; together they partition the tensor.
    pub fn filter_ranges(&self) -> Vec<Range<usize>> {
        filter_ranges(self.value.dims(), self.filters)
    }
}

pub fn filter_ranges(dims: &[usize], axis: FilterAxis) -> Vec<Range<usize>> {
    let n: usize = dims.iter().product();
    match axis {
        FilterAxis::Whole => vec![0..n],
        FilterAxis::Leading => {
            let lead = dims.first().copied().unwrap_or(1).max(1);
            let len = n / lead;
            (0..lead).map(|j| j * len..(j + 1) * len).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub arch: ArchDescriptor,
    pub params: Vec<Param>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| rng.random_range(-bound..bound))
}

impl Network {
    /// Fresh network: Kaiming-uniform weights, zero biases, unit/zero norm affine.
    pub fn build(arch: &ArchDescriptor, seed: u64) -> Result<Network> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut push = |name: String, value: Tensor, filters| params.push(Param { name, value, filters });
        let k = arch.num_classes;
        match arch.kind {
            ArchKind::ConvNet => {
                let mut cin = arch.input.0;
                for i in 1..=arch.depth {
                    let w = arch.width;
                    let fan_in = cin * KERNEL * KERNEL;
                    push(format!("conv{i}.weight"), kaiming_uniform(&mut rng, &[w, cin, KERNEL, KERNEL], fan_in), FilterAxis::Leading);
                    push(format!("conv{i}.bias"), Tensor::zeros(&[w]), FilterAxis::Whole);
                    if matches!(arch.norm, Norm::Group(_)) {
                        push(format!("norm{i}.weight"), Tensor::ones(&[w]), FilterAxis::Whole);
                        push(format!("norm{i}.bias"), Tensor::zeros(&[w]), FilterAxis::Whole);
                    }
                    cin = w;
                }
            }
            ArchKind::Mlp => {
                let mut fan_in = arch.input_len();
                for i in 1..=arch.depth {
                    push(format!("fc{i}.weight"), kaiming_uniform(&mut rng, &[arch.width, fan_in], fan_in), FilterAxis::Leading);
                    push(format!("fc{i}.bias"), Tensor::zeros(&[arch.width]), FilterAxis::Whole);
                    fan_in = arch.width;
                }
            }
        }
        let fd = arch.feature_dim();
        push("fc.weight".into(), kaiming_uniform(&mut rng, &[k, fd], fd), FilterAxis::Leading);
        push("fc.bias".into(), Tensor::zeros(&[k]), FilterAxis::Whole);
        Ok(Network { arch: arch.clone(), params })
    }

    /// Reassembles a network from named tensors, checking them against the layout.
    pub fn from_tensors(arch: &ArchDescriptor, tensors: Vec<(String, Tensor)>) -> Result<Network> {
        let mut net = Network::build(arch, 0)?;
        if tensors.len() != net.params.len() {
            return Err(Error::invalid(
                "network",
                format!("{} tensors given, layout has {}", tensors.len(), net.params.len()),
            ));
        }
        for (p, (name, value)) in net.params.iter_mut().zip(tensors) {
            if p.name != name || p.value.dims() != value.dims() {
                return Err(Error::invalid(
                    "network",
                    format!("tensor `{name}` {:?} does not fit slot `{}` {:?}", value.dims(), p.name, p.value.dims()),
                ));
            }
            p.value = value;
        }
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.var(p.value.clone())).collect()
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let d = x.dims();
        let (c, h, w) = self.arch.input;
        if d.len() != 4 || d[1..] != [c, h, w] {
            return Err(Error::shape("forward", &d, &[0, c, h, w]));
        }
        Ok(())
    }

    /// Penultimate features `(batch, feature_dim)` for bound parameters `params`.
    pub fn features<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.check_input(&x)?;
        if params.len() != self.params.len() {
            return Err(Error::shape("forward", &[params.len()], &[self.params.len()]));
        }
        let batch = x.dims()[0];
        let mut it = params.iter().copied();
        let mut next = || it.next().expect("parameter count checked above");
        match self.arch.kind {
            ArchKind::ConvNet => {
                let mut h = x;
                for _ in 0..self.arch.depth {
                    let (w, b) = (next(), next());
                    h = h.conv2d(w, CONV_GEOM)?;
                    let d = h.dims();
                    let plane = d[2] * d[3];
                    h = h.add(b.expand(batch, plane, &d)?)?;
                    if let Norm::Group(groups) = self.arch.norm {
                        let (gamma, beta) = (next(), next());
                        h = h.group_norm(groups, NORM_EPS)?;
                        h = h.mul(gamma.expand(batch, plane, &d)?)?.add(beta.expand(batch, plane, &d)?)?;
                    }
                    h = h.relu().avgpool2d(POOL)?;
                }
                h.reshape(&[batch, self.arch.feature_dim()])
            }
            ArchKind::Mlp => {
                let mut h = x.reshape(&[batch, self.arch.input_len()])?;
                for _ in 0..self.arch.depth {
                    let (w, b) = (next(), next());
                    h = linear(h, w, b)?.relu();
                }
                Ok(h)
            }
        }
    }

    /// Logits `(batch, num_classes)`.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let feats = self.features(params, x)?;
        let n = params.len();
        linear(feats, params[n - 2], params[n - 1])
    }

    /// Forward pass on plain values, without any gradient tracking.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.bind_const(&tape);
        Ok(self.forward(&params, tape.constant(images.clone()))?.value())
    }

    /// Mean cross-entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let params = self.bind(&tape);
        let loss = self.forward(&params, tape.constant(images.clone()))?.cross_entropy(labels)?;
        let grads = tape.grad(loss, &params, false)?;
        Ok((loss.value().item()?, grads.iter().map(|g| g.value()).collect()))
    }

    /// `theta - lr * grad`, element-wise, as a new network.
    pub fn sgd_step(&self, grads: &[Tensor], lr: f64) -> Result<Network> {
        let mut next = self.clone();
        next.sgd_step_in_place(grads, lr)?;
        Ok(next)
    }

    pub fn sgd_step_in_place(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape("sgd_step", &[grads.len()], &[self.params.len()]));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.value.dims() != g.dims() {
                return Err(Error::shape("sgd_step", p.value.dims(), g.dims()));
            }
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (t, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                *t -= lr * d;
            }
        }
        Ok(())
    }
}

fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let y = x.matmul(w.t()?)?;
    let d = y.dims();
    y.add(b.expand(d[0], 1, &d)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn conv3() -> ArchDescriptor {
        ArchDescriptor::convnet(3, 128, 10, (3, 32, 32))
    }

    #[test]
    fn descriptor_string_roundtrip() {
        for arch in [conv3(), ArchDescriptor::mlp(2, 16, 10, (1, 8, 8))] {
            let s = arch.to_string();
            assert_eq!(s.parse::<ArchDescriptor>().unwrap(), arch);
        }
        let mut nonorm = ArchDescriptor::convnet(2, 8, 4, (1, 8, 8));
        nonorm.norm = Norm::None;
        assert_eq!(nonorm.to_string().parse::<ArchDescriptor>().unwrap(), nonorm);
    }

    #[test]
    fn descriptor_rejects_unsupported_fields() {
        assert!("kind=resnet;depth=3;width=8;norm=none;classes=2;input=1x8x8".parse::<ArchDescriptor>().is_err());
        assert!("kind=convnet;depth=3;width=8;norm=batch;classes=2;input=1x8x8".parse::<ArchDescriptor>().is_err());
        assert!("kind=convnet;depth=3;width=8;norm=none;classes=2".parse::<ArchDescriptor>().is_err());
        assert!("kind=convnet;depth=5;width=8;norm=none;classes=2;input=1x8x8".parse::<ArchDescriptor>().is_err());
    }

    #[test]
    fn convnet3_width128_matches_layer_table_count() {
        // Hand count from the ConvNet-3 layer table (3x32x32 input, 10 classes):
        // conv1 3*128*9 + 128, conv2/conv3 128*128*9 + 128 each,
        // three group norms with 128 + 128 affine values,
        // fc over 128 * 4 * 4 = 2048 features into 10 classes.
        let hand = (3 * 128 * 9 + 128) + 2 * (128 * 128 * 9 + 128) + 3 * 256 + (2048 * 10 + 10);
        assert_eq!(hand, 320_010);
        let net = Network::build(&conv3(), 1).unwrap();
        assert_eq!(net.num_params(), hand);
        assert_eq!(conv3().param_count(), hand);
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let arch = ArchDescriptor::convnet(2, 8, 4, (1, 8, 8));
        assert_eq!(Network::build(&arch, 9).unwrap(), Network::build(&arch, 9).unwrap());
        assert_ne!(Network::build(&arch, 9).unwrap(), Network::build(&arch, 10).unwrap());
    }

    #[test]
    fn mlp_forward_shape() {
        let arch = ArchDescriptor::mlp(2, 16, 10, (1, 8, 8));
        let net = Network::build(&arch, 0).unwrap();
        let y = net.predict(&Tensor::ones(&[5, 1, 8, 8])).unwrap();
        assert_eq!(y.dims(), &[5, 10]);
        assert_eq!(net.num_params(), arch.param_count());
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = Network::build(&ArchDescriptor::mlp(1, 4, 3, (1, 4, 4)), 0).unwrap();
        assert!(net.predict(&Tensor::ones(&[2, 1, 4, 5])).is_err());
    }

    #[test]
    fn zero_weights_give_equal_logits() {
        let arch = ArchDescriptor::convnet(2, 4, 5, (1, 8, 8));
        let mut net = Network::build(&arch, 3).unwrap();
        for p in &mut net.params {
            p.value = Tensor::zeros(p.value.dims());
        }
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| (i as f64).sin());
        let y = net.predict(&x).unwrap();
        for row in y.data().chunks(5) {
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let arch = ArchDescriptor::convnet(2, 4, 3, (1, 8, 8));
        let net = Network::build(&arch, 3).unwrap();
        let x = Tensor::from_fn(&[4, 1, 8, 8], |i| (i as f64 * 0.3).cos());
        let all = net.predict(&x).unwrap();
        for i in 0..4 {
            let one = net.predict(&x.slice0(i, 1).unwrap()).unwrap();
            for (a, b) in one.data().iter().zip(&all.data()[i * 3..(i + 1) * 3]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_passes_grad_check() {
        let arch = ArchDescriptor::convnet(1, 2, 3, (1, 6, 6));
        let net = Network::build(&arch, 4).unwrap();
        let x = Tensor::from_fn(&[2, 1, 6, 6], |i| (i as f64 * 0.77).sin());
        let err = grad_check(
            |tape, v| {
                let params = net.bind_const(tape);
                Ok(net.forward(&params, v[0])?.mean())
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sgd_step_arithmetic() {
        let arch = ArchDescriptor::mlp(0, 1, 1, (1, 1, 1));
        let mut net = Network::build(&arch, 0).unwrap();
        net.params[0].value = Tensor::ones(&[1, 1]);
        let grads = vec![Tensor::full(&[1, 1], 0.5), Tensor::zeros(&[1])];
        let next = net.sgd_step(&grads, 0.1).unwrap();
        assert_eq!(next.params[0].value.data(), &[0.95]);
        assert_eq!(net.sgd_step(&grads, 0.0).unwrap(), net);
        assert!(net.sgd_step(&grads[..1], 0.1).is_err());
    }

    #[test]
    fn sgd_step_matches_loop_oracle() {
        let arch = ArchDescriptor::convnet(1, 3, 2, (1, 4, 4));
        let net = Network::build(&arch, 5).unwrap();
        let grads: Vec<Tensor> = net
            .params
            .iter()
            .enumerate()
            .map(|(k, p)| Tensor::from_fn(p.value.dims(), |i| ((i + k) as f64 * 0.61).sin()))
            .collect();
        let lr = 0.037;
        let next = net.sgd_step(&grads, lr).unwrap();
        for ((p, g), q) in net.params.iter().zip(&grads).zip(&next.params) {
            for i in 0..p.value.numel() {
                let expect = p.value.data()[i] - lr * g.data()[i];
                assert_eq!(q.value.data()[i].to_bits(), expect.to_bits());
            }
        }
    }

    #[test]
    fn filter_slices_partition_every_param() {
        let net = Network::build(&ArchDescriptor::convnet(2, 4, 3, (1, 8, 8)), 0).unwrap();
        for p in &net.params {
            let ranges = p.filter_ranges();
            let mut next = 0;
            for r in &ranges {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, p.value.numel());
            if p.name.ends_with(".weight") && !p.name.starts_with("norm") {
                assert_eq!(ranges.len(), p.value.dims()[0]);
            } else {
                assert_eq!(ranges.len(), 1);
            }
        }
    }
}
