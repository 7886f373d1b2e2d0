//! Differentiable augmentation with shared randomness, and multi-formation
//! decode.
//!
//! Every augmentation is a pure index/mask transform: each output pixel either
//! copies one input pixel or is zero. A [`SharedDraw`] fixes the random
//! parameters once, so applying it to the real and the synthetic batch yields
//! geometrically identical transforms, and gradients pass through exactly.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, NO_SOURCE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugKind {
    FlipH,
    /// Translate by up to `max_px` pixels on each axis, zero fill.
    Shift { max_px: usize },
    /// Zero a square whose side is `frac` of the image height.
    Cutout { frac: f64 },
    /// Nearest-neighbour zoom about the centre by a factor in `min..=max`.
    Scale { min: f64, max: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugOp {
    pub kind: AugKind,
    pub prob: f64,
}

/// Ordered list of augmentation ops.
///
/// Text form: comma-separated `name[(param)][@prob]`, e.g.
/// `flip@0.5,shift(4),cutout(0.25),scale(0.9-1.1)@0.5`; `none` is empty.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AugPolicy {
    pub ops: Vec<AugOp>,
}

impl AugPolicy {
    pub fn none() -> Self {
        AugPolicy::default()
    }

    /// Flip with p=0.5, shift up to 4 px, cutout of a quarter of the side.
    pub fn standard() -> Self {
        AugPolicy {
            ops: vec![
                AugOp { kind: AugKind::FlipH, prob: 0.5 },
                AugOp { kind: AugKind::Shift { max_px: 4 }, prob: 1.0 },
                AugOp { kind: AugKind::Cutout { frac: 0.25 }, prob: 1.0 },
            ],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}

impl fmt::Display for AugPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return write!(f, "none");
        }
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match op.kind {
                AugKind::FlipH => write!(f, "flip")?,
                AugKind::Shift { max_px } => write!(f, "shift({max_px})")?,
                AugKind::Cutout { frac } => write!(f, "cutout({frac})")?,
                AugKind::Scale { min, max } => write!(f, "scale({min}-{max})")?,
            }
            if op.prob != 1.0 {
                write!(f, "@{}", op.prob)?;
            }
        }
        Ok(())
    }
}

impl FromStr for AugPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid("aug policy", msg);
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(AugPolicy::none());
        }
        let mut ops = Vec::new();
        for item in s.split(',') {
            let item = item.trim();
            let (body, prob) = match item.split_once('@') {
                Some((b, p)) => (b, p.parse::<f64>().map_err(|_| bad(format!("bad probability in `{item}`")))?),
                None => (item, 1.0),
            };
            if !(0.0..=1.0).contains(&prob) {
                return Err(bad(format!("probability {prob} outside [0, 1]")));
            }
            let (name, arg) = match body.split_once('(') {
                Some((n, rest)) => {
                    let arg = rest.strip_suffix(')').ok_or_else(|| bad(format!("unclosed `(` in `{item}`")))?;
                    (n, Some(arg))
                }
                None => (body, None),
            };
            let need = |what: &str| bad(format!("`{name}` needs a {what} argument"));
            let kind = match name {
                "flip" => AugKind::FlipH,
                "shift" => AugKind::Shift {
                    max_px: arg.ok_or_else(|| need("pixel"))?.parse().map_err(|_| bad(format!("bad shift in `{item}`")))?,
                },
                "cutout" => {
                    let frac: f64 = arg.ok_or_else(|| need("fraction"))?.parse().map_err(|_| bad(format!("bad cutout in `{item}`")))?;
                    if !(0.0..=1.0).contains(&frac) {
                        return Err(bad(format!("cutout fraction {frac} outside [0, 1]")));
                    }
                    AugKind::Cutout { frac }
                }
                "scale" => {
                    let arg = arg.ok_or_else(|| need("range"))?;
                    let (lo, hi) = arg.split_once('-').ok_or_else(|| bad(format!("scale range `{arg}` is not lo-hi")))?;
                    let min: f64 = lo.parse().map_err(|_| bad(format!("bad scale in `{item}`")))?;
                    let max: f64 = hi.parse().map_err(|_| bad(format!("bad scale in `{item}`")))?;
                    if !(min > 0.0 && min <= max) {
                        return Err(bad(format!("scale range {min}-{max} is empty or non-positive")));
                    }
                    AugKind::Scale { min, max }
                }
                other => return Err(bad(format!("unknown op `{other}`"))),
            };
            ops.push(AugOp { kind, prob });
        }
        Ok(AugPolicy { ops })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Step {
    Flip,
    Shift { dy: isize, dx: isize },
    Cutout { y0: usize, x0: usize, side: usize },
    Scale { factor: f64 },
}

/// Concrete random parameters for one application of an [`AugPolicy`] to
/// images of a fixed size. Sample once, apply to both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedDraw {
    h: usize,
    w: usize,
    steps: Vec<Step>,
}

impl SharedDraw {
    pub fn identity(h: usize, w: usize) -> Self {
        SharedDraw { h, w, steps: Vec::new() }
    }

    pub fn sample<R: Rng + ?Sized>(policy: &AugPolicy, h: usize, w: usize, rng: &mut R) -> Result<Self> {
        let mut steps = Vec::new();
        for op in &policy.ops {
            // Always consume the same random numbers so draws stay aligned across policies.
            let fire = rng.random::<f64>() < op.prob;
            let step = match op.kind {
                AugKind::FlipH => Step::Flip,
                AugKind::Shift { max_px } => {
                    if max_px >= h || max_px >= w {
                        return Err(Error::invalid("augment", format!("shift {max_px} px does not fit a {h}x{w} image")));
                    }
                    let m = max_px as i64;
                    Step::Shift {
                        dy: rng.random_range(-m..=m) as isize,
                        dx: rng.random_range(-m..=m) as isize,
                    }
                }
                AugKind::Cutout { frac } => {
                    let side = ((frac * h as f64).round() as usize).min(h).min(w);
                    Step::Cutout {
                        y0: rng.random_range(0..=h - side),
                        x0: rng.random_range(0..=w - side),
                        side,
                    }
                }
                AugKind::Scale { min, max } => Step::Scale {
                    factor: rng.random_range(min..=max),
                },
            };
            if fire {
                steps.push(step);
            }
        }
        Ok(SharedDraw { h, w, steps })
    }

    /// Source pixel in the input plane for every output pixel, composed over all steps.
    fn plane_map(&self) -> Vec<u32> {
        let (h, w) = (self.h, self.w);
        let mut map: Vec<u32> = (0..(h * w) as u32).collect();
        for step in &self.steps {
            let prev = map.clone();
            for y in 0..h {
                for x in 0..w {
                    let src = match *step {
                        Step::Flip => Some((y, w - 1 - x)),
                        Step::Shift { dy, dx } => {
                            let (sy, sx) = (y as isize - dy, x as isize - dx);
                            (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then(|| (sy as usize, sx as usize))
                        }
                        Step::Cutout { y0, x0, side } => {
                            let inside = y >= y0 && y < y0 + side && x >= x0 && x < x0 + side;
                            (!inside).then_some((y, x))
                        }
                        Step::Scale { factor } => {
                            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
                            let sy = ((y as f64 + 0.5 - cy) / factor + cy - 0.5).round();
                            let sx = ((x as f64 + 0.5 - cx) / factor + cx - 0.5).round();
                            (sy >= 0.0 && sx >= 0.0 && sy < h as f64 && sx < w as f64).then(|| (sy as usize, sx as usize))
                        }
                    };
                    map[y * w + x] = match src {
                        Some((sy, sx)) => prev[sy * w + sx],
                        None => NO_SOURCE,
                    };
                }
            }
        }
        map
    }

    fn full_map(&self, dims: &[usize]) -> Result<Arc<[u32]>> {
        if dims.len() != 4 || dims[2] != self.h || dims[3] != self.w {
            return Err(Error::shape("augment", dims, &[0, 0, self.h, self.w]));
        }
        let plane = self.plane_map();
        let hw = self.h * self.w;
        let planes = dims[0] * dims[1];
        let mut src = Vec::with_capacity(planes * hw);
        for p in 0..planes {
            let base = (p * hw) as u32;
            src.extend(plane.iter().map(|&s| if s == NO_SOURCE { NO_SOURCE } else { base + s }));
        }
        Ok(src.into())
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Applies a draw to NCHW images on the tape.
pub fn apply<'t>(images: Var<'t>, draw: &SharedDraw) -> Result<Var<'t>> {
    let dims = images.dims();
    let src = draw.full_map(&dims)?;
    if draw.is_identity() {
        return Ok(images);
    }
    images.gather_with(src, &dims)
}

/// Applies a draw to plain NCHW values.
pub fn apply_tensor(images: &Tensor, draw: &SharedDraw) -> Result<Tensor> {
    let src = draw.full_map(images.dims())?;
    if draw.is_identity() {
        return Ok(images.clone());
    }
    tensor::gather(images, &src, images.dims())
}

/// Multi-formation setting: each stored image holds `factor^2` sub-images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiForm {
    pub factor: usize,
}

impl MultiForm {
    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("multiform", "factor must be at least 1"));
        }
        Ok(MultiForm { factor })
    }

    pub fn parts(&self) -> usize {
        self.factor * self.factor
    }

    /// For every decoded element, its source element in the stored tensor.
    fn decode_map(&self, dims: &[usize]) -> Result<(Vec<usize>, Arc<[u32]>)> {
        let f = self.factor;
        if dims.len() != 4 || dims[2] % f != 0 || dims[3] % f != 0 {
            return Err(Error::invalid("decode", format!("stored dims {dims:?} not divisible by factor {f}")));
        }
        let [n, c, h, w] = [dims[0], dims[1], dims[2], dims[3]];
        let (ph, pw) = (h / f, w / f);
        let mut src = Vec::with_capacity(n * f * f * c * h * w);
        for i in 0..n {
            for q in 0..f * f {
                let (qy, qx) = (q / f, q % f);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sy = qy * ph + y / f;
                            let sx = qx * pw + x / f;
                            src.push((((i * c + ch) * h + sy) * w + sx) as u32);
                        }
                    }
                }
            }
        }
        Ok((vec![n * f * f, c, h, w], src.into()))
    }

    /// Splits every stored image into `factor^2` tiles and upsamples each back
    /// to full size (nearest), so `n` stored images decode to `n * factor^2`.
    pub fn decode<'t>(&self, stored: Var<'t>) -> Result<Var<'t>> {
        if self.factor == 1 {
            return Ok(stored);
        }
        let (dims, src) = self.decode_map(&stored.dims())?;
        stored.gather_with(src, &dims)
    }

    pub fn decode_tensor(&self, stored: &Tensor) -> Result<Tensor> {
        if self.factor == 1 {
            return Ok(stored.clone());
        }
        let (dims, src) = self.decode_map(stored.dims())?;
        tensor::gather(stored, &src, &dims)
    }

    /// Labels of the decoded batch.
    pub fn decode_labels(&self, labels: &[usize]) -> Vec<usize> {
        labels.iter().flat_map(|&l| std::iter::repeat_n(l, self.parts())).collect()
    }

    /// Packs groups of `factor^2` full-size images into single stored images,
    /// average-pooling each one into its tile. Inverse layout of [`Self::decode`].
    pub fn pack(&self, images: &Tensor) -> Result<Tensor> {
        let f = self.factor;
        if f == 1 {
            return Ok(images.clone());
        }
        let d = images.dims();
        if d.len() != 4 || d[0] % (f * f) != 0 || d[2] % f != 0 || d[3] % f != 0 {
            return Err(Error::invalid("pack", format!("cannot pack {d:?} with factor {f}")));
        }
        let small = tensor::avgpool2d(images, f)?;
        let [n, c, h, w] = [d[0] / (f * f), d[1], d[2], d[3]];
        let (ph, pw) = (h / f, w / f);
        let mut out = vec![0.0; n * c * h * w];
        for i in 0..n {
            for q in 0..f * f {
                let (qy, qx) = (q / f, q % f);
                for ch in 0..c {
                    for y in 0..ph {
                        for x in 0..pw {
                            out[((i * c + ch) * h + qy * ph + y) * w + qx * pw + x] =
                                small.data()[(((i * f * f + q) * c + ch) * ph + y) * pw + x];
                        }
                    }
                }
            }
        }
        Tensor::new(&[n, c, h, w], out)
    }
}
