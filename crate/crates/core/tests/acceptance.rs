//! Acceptance checks 1-8. Prints one `PASS`/`FAIL` line per criterion and
//! exits non-zero if any fails. `EDD_ACCEPTANCE=1,3,5` runs a subset.
//!
//! Criteria 6 and 7 train real models at desk scale (procedural 16x16 glyph
//! digits, ConvNet-3 width 32) and take most of an hour together.

use std::cell::Cell;
use std::sync::Arc;
use std::time::{Duration, Instant};

use edd::augment::AugPolicy;
use edd::autodiff::{Tape, Var};
use edd::config::{preset_outer_loops, Values};
use edd::data::fixtures::{glyph_digits, GlyphSpec};
use edd::data::{Batch, Dataset};
use edd::distill::{init_synthetic, run, DistillConfig, SyntheticSet};
use edd::eval::{
    distill_flops, flops_estimate, mean_std, pipeline_arm, random_subset_baseline, train_on_synthetic, AblationRow,
    AblationSetup, EvalProtocol, PoolBank,
};
use edd::gradcheck::grad_check;
use edd::matchloss::{cosine_match, dist_match, grads_of_loss, l2_match, matching_loss, synth_grad, MatchConfig, Objective};
use edd::modelpool::{pretrain_pool, Pool, PretrainSpec};
use edd::nets::{ArchDescriptor, Network};
use edd::perturb::{apply_direction, filter_normalize, perturb, sample_direction, DEFAULT_EPSILON};
use edd::tensor::{ConvGeom, Tensor, NO_SOURCE};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn within_budget(start: Instant, budget: Duration, what: String) -> Outcome {
    let took = start.elapsed();
    if took > budget {
        Err(format!("{what}; took {:.0}s, budget {:.0}s", took.as_secs_f64(), budget.as_secs_f64()))
    } else {
        Ok(format!("{what} ({:.1}s)", took.as_secs_f64()))
    }
}

// ---------------------------------------------------------------- criterion 1

const FD_STEP: f64 = 1e-5;
const FIRST_ORDER_TOL: f64 = 1e-6;
const CASES_1: u32 = 128;

/// Values bounded away from zero so `ln`, `powf` and `relu` are smooth at the probe.
fn away_from_zero(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| {
        let m: f64 = rng.random_range(0.2..1.5);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn positive(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| rng.random_range(0.3..2.0))
}

/// Projects a tensor-valued result to a scalar with fixed weights, so every
/// output coordinate contributes a distinct amount.
fn probe<'t>(t: &'t Tape, y: Var<'t>) -> Result<Var<'t>, edd::Error> {
    let c = Tensor::from_fn(&y.dims(), |i| ((i as f64) * 0.61).sin() + 0.3);
    Ok(y.mul(t.constant(c))?.sum())
}

macro_rules! op_case {
    ($name:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {{
        fn f<'t>($t: &'t Tape, $v: &[Var<'t>]) -> Result<Var<'t>, edd::Error> {
            $body
        }
        ($name, $inputs, f as for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, edd::Error>)
    }};
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, edd::Error>;

fn gather_map() -> Arc<[u32]> {
    // reverses a 6-vector into 8 slots, two of them empty
    vec![5, 4, NO_SOURCE, 3, 2, 1, 0, NO_SOURCE].into()
}

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let a = |d: &[usize], k: u64| away_from_zero(d, seed.wrapping_mul(31).wrapping_add(k));
    let p = |d: &[usize], k: u64| positive(d, seed.wrapping_mul(37).wrapping_add(k));
    vec![
        op_case!("add", vec![a(&[3, 2], 1), a(&[3, 2], 2)], |t, v| probe(t, v[0].add(v[1])?)),
        op_case!("sub", vec![a(&[3, 2], 1), a(&[3, 2], 2)], |t, v| probe(t, v[0].sub(v[1])?)),
        op_case!("mul", vec![a(&[3, 2], 1), a(&[3, 2], 2)], |t, v| probe(t, v[0].mul(v[1])?)),
        op_case!("div", vec![a(&[3, 2], 1), p(&[3, 2], 2)], |t, v| probe(t, v[0].div(v[1])?)),
        op_case!("neg", vec![a(&[4], 1)], |t, v| probe(t, v[0].neg())),
        op_case!("scale", vec![a(&[4], 1)], |t, v| probe(t, v[0].scale(-2.5))),
        op_case!("add_scalar", vec![a(&[4], 1)], |t, v| probe(t, v[0].add_scalar(0.7))),
        op_case!("exp", vec![a(&[4], 1)], |t, v| probe(t, v[0].exp())),
        op_case!("ln", vec![p(&[4], 1)], |t, v| probe(t, v[0].ln())),
        op_case!("sin", vec![a(&[4], 1)], |t, v| probe(t, v[0].sin())),
        op_case!("cos", vec![a(&[4], 1)], |t, v| probe(t, v[0].cos())),
        op_case!("powf", vec![p(&[4], 1)], |t, v| probe(t, v[0].powf(1.7))),
        op_case!("square", vec![a(&[4], 1)], |t, v| probe(t, v[0].square()?)),
        op_case!("relu", vec![a(&[6], 1)], |t, v| probe(t, v[0].relu())),
        op_case!("matmul", vec![a(&[2, 3], 1), a(&[3, 4], 2)], |t, v| probe(t, v[0].matmul(v[1])?)),
        op_case!("transpose", vec![a(&[2, 3], 1)], |t, v| probe(t, v[0].t()?)),
        op_case!("reshape", vec![a(&[2, 3], 1)], |t, v| probe(t, v[0].reshape(&[3, 2])?)),
        op_case!("sum", vec![a(&[2, 3], 1)], |_t, v| Ok(v[0].sin().sum())),
        op_case!("mean", vec![a(&[2, 3], 1)], |_t, v| Ok(v[0].sin().mean())),
        op_case!("sum_sq", vec![a(&[2, 3], 1)], |_t, v| v[0].sum_sq()),
        op_case!("frobenius", vec![a(&[2, 3], 1)], |_t, v| v[0].frobenius()),
        op_case!("expand", vec![a(&[3], 1)], |t, v| probe(t, v[0].expand(2, 4, &[2, 3, 4])?)),
        op_case!("reduce", vec![a(&[2, 3, 4], 1)], |t, v| probe(t, v[0].reduce(2, 4, &[3])?)),
        op_case!("conv2d", vec![a(&[2, 2, 4, 4], 1), a(&[3, 2, 3, 3], 2)], |t, v| probe(
            t,
            v[0].conv2d(v[1], ConvGeom { stride: 1, pad: 1 })?
        )),
        op_case!("conv2d/stride2", vec![a(&[1, 2, 5, 5], 1), a(&[2, 2, 3, 3], 2)], |t, v| probe(
            t,
            v[0].conv2d(v[1], ConvGeom { stride: 2, pad: 1 })?
        )),
        op_case!("avgpool2d", vec![a(&[2, 2, 4, 4], 1)], |t, v| probe(t, v[0].avgpool2d(2)?)),
        op_case!("gather", vec![a(&[6], 1)], |t, v| probe(t, v[0].gather_with(gather_map(), &[8])?)),
        op_case!("upsample", vec![a(&[1, 2, 2, 3], 1)], |t, v| probe(t, v[0].upsample_nearest(2)?)),
        op_case!("group_norm", vec![a(&[2, 4, 3, 3], 1)], |t, v| probe(t, v[0].group_norm(2, 1e-5)?)),
        op_case!("cross_entropy", vec![a(&[3, 4], 1)], |_t, v| v[0].cross_entropy(&[0, 3, 1])),
        // gradients of gradients record the adjoint-only ops
        op_case!("conv2d adjoints", vec![a(&[1, 2, 4, 4], 1), a(&[2, 2, 3, 3], 2)], |t, v| {
            let y = probe(t, v[0].conv2d(v[1], ConvGeom { stride: 1, pad: 1 })?.square()?)?;
            let g = t.grad(y, &[v[0], v[1]], true)?;
            Ok(g[0].sum_sq()?.add(g[1].sum_sq()?)?)
        }),
        op_case!("avgpool adjoint", vec![a(&[1, 2, 4, 4], 1)], |t, v| {
            let y = probe(t, v[0].avgpool2d(2)?.square()?)?;
            t.grad(y, &[v[0]], true)?[0].sum_sq()
        }),
        op_case!("gather adjoint", vec![a(&[6], 1)], |t, v| {
            let y = probe(t, v[0].gather_with(gather_map(), &[8])?.square()?)?;
            t.grad(y, &[v[0]], true)?[0].sum_sq()
        }),
        op_case!("group_norm adjoint", vec![a(&[2, 4, 2, 2], 1)], |t, v| {
            let y = probe(t, v[0].group_norm(2, 1e-5)?)?;
            t.grad(y, &[v[0]], true)?[0].sum_sq()
        }),
    ]
}

fn net_case(arch: &ArchDescriptor, seed: u64) -> edd::Result<f64> {
    let net = Network::build(arch, seed)?;
    let (c, h, w) = arch.input;
    let n = 3;
    let x = away_from_zero(&[n, c, h, w], seed ^ 0xabc);
    let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % arch.num_classes).collect();
    // zero biases put dead-layer pre-activations exactly on the ReLU kink
    let point: Vec<Tensor> = net
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.name.ends_with("bias") {
                away_from_zero(&p.value.dims(), seed ^ (i as u64 + 7)).map(|v| 0.2 * v)
            } else {
                p.value.clone()
            }
        })
        .chain([x])
        .collect();
    let np = net.params.len();
    grad_check(
        |_tape, v| {
            let logits = net.forward(&v[..np], v[np])?;
            logits.cross_entropy(&labels)
        },
        &point,
        FD_STEP,
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let worst = Cell::new((0.0f64, ""));
    let record = |name: &'static str, e: f64| {
        if e > worst.get().0 || e.is_nan() {
            worst.set((e, name));
        }
    };
    let conv = ArchDescriptor::convnet(1, 2, 3, (1, 6, 6));
    let conv2 = ArchDescriptor::convnet(2, 2, 3, (1, 4, 4));
    let mlp = ArchDescriptor::mlp(2, 4, 3, (1, 3, 3));
    let ops_seen = Cell::new(0);
    let result = runner(CASES_1).run(&any::<u64>(), |seed| {
        let cases = op_cases(seed);
        ops_seen.set(cases.len());
        for (name, point, f) in cases {
            let e = grad_check(f, &point, FD_STEP).map_err(|e| TestCaseError::fail(format!("{name}: {e}")))?;
            record(name, e);
            prop_assert!(e < FIRST_ORDER_TOL, "{name}: relative error {e:e}");
        }
        for (name, arch) in [("convnet-1", &conv), ("convnet-2", &conv2), ("mlp-2", &mlp)] {
            let e = net_case(arch, seed).map_err(|e| TestCaseError::fail(format!("{name}: {e}")))?;
            record(name, e);
            prop_assert!(e < FIRST_ORDER_TOL, "{name}: relative error {e:e}");
        }
        Ok(())
    });
    let (e, name) = worst.get();
    let ops_seen = ops_seen.get();
    let summary = format!("{ops_seen} op checks + 3 network losses x {CASES_1} cases, worst {e:.2e} ({name}) < {FIRST_ORDER_TOL:e}");
    match result {
        Ok(()) => within_budget(start, Duration::from_secs(120), summary),
        Err(err) => Err(format!("{summary}; {err}")),
    }
}

// ---------------------------------------------------------------- criterion 2

const SECOND_ORDER_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;

/// `|a - n| / max(|a|, |n|, 1e-6 * max_k |a_k|)`: relative, with a floor for
/// pixels whose gradient is negligible against the largest one.
fn per_pixel_rel(analytic: &Tensor, numeric: &[f64]) -> f64 {
    let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale))
        .fold(0.0, f64::max)
}

fn second_order_on_net(objective: Objective) -> edd::Result<(f64, usize)> {
    let arch = ArchDescriptor::convnet(1, 2, 2, (1, 6, 6));
    let net = Network::build(&arch, 5)?;
    let stored = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i as f64) * 0.37).sin() * 1.3);
    let labels = vec![0, 1];
    let real = Batch {
        images: Tensor::from_fn(&[4, 1, 6, 6], |i| ((i as f64) * 0.11 + 0.5).cos()),
        labels: vec![0, 1, 0, 1],
    };
    let cfg = MatchConfig::with_objective(objective);
    let analytic = synth_grad(&net, &stored, &labels, &real, &cfg, |v| Ok(v))?.grad;
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(stored.numel());
    let mut probe = stored.clone();
    for k in 0..stored.numel() {
        let orig = stored.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = matching_loss(&net, &probe, &labels, &real, &cfg, |v| Ok(v))?;
        probe.data_mut()[k] = orig - h;
        let down = matching_loss(&net, &probe, &labels, &real, &cfg, |v| Ok(v))?;
        probe.data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    Ok((per_pixel_rel(&analytic, &numeric), arch.param_count()))
}

/// `loss = (d/dw (w s)^2)^2 = 4 w^2 s^4`, so `d loss / ds = 16 w^2 s^3`.
fn oracle_square(w0: f64, s0: f64) -> edd::Result<f64> {
    let tape = Tape::new();
    let w = tape.var(Tensor::scalar(w0));
    let s = tape.var(Tensor::scalar(s0));
    let gw = tape.grad(w.mul(s)?.square()?, &[w], true)?[0];
    let gs = tape.grad(gw.square()?, &[s], false)?[0].value().item()?;
    let expect = 16.0 * w0 * w0 * s0.powi(3);
    Ok((gs - expect).abs() / expect.abs().max(1.0))
}

/// Gradient matching on `l(w; x, y) = (w x - y)^2 / 2` with one synthetic
/// point `s` and one real point `t`: `g(x) = (w x - y) x`,
/// `D(s) = (g(s) - g(t))^2`, `dD/ds = 2 (g(s) - g(t)) (2 w s - y)`.
fn oracle_linear_match(w0: f64, s0: f64, t0: f64, y: f64) -> edd::Result<f64> {
    let tape = Tape::new();
    let w = tape.var(Tensor::scalar(w0));
    let s = tape.var(Tensor::scalar(s0));
    let t = tape.constant(Tensor::scalar(t0));
    let gs = tape.grad(w.mul(s)?.add_scalar(-y).square()?.scale(0.5), &[w], true)?[0];
    let gt = tape.grad(w.mul(t)?.add_scalar(-y).square()?.scale(0.5), &[w], false)?[0];
    let d = gs.sub(gt)?.square()?;
    let got = tape.grad(d, &[s], false)?[0].value().item()?;
    let g = |x: f64| (w0 * x - y) * x;
    let expect = 2.0 * (g(s0) - g(t0)) * (2.0 * w0 * s0 - y);
    Ok((got - expect).abs() / expect.abs().max(1.0))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for objective in [Objective::Cosine, Objective::L2] {
        let (e, params) = second_order_on_net(objective).map_err(|e| e.to_string())?;
        ok &= e < SECOND_ORDER_TOL && params <= 200;
        parts.push(format!("{objective} {e:.2e}"));
        if objective == Objective::L2 {
            parts.push(format!("net {params} params"));
        }
    }
    let mut oracle = 0.0f64;
    for &(w, s, t, y) in &[(0.7, -1.3, 0.4, 0.2), (-2.0, 0.5, 1.5, -1.0), (1.1, 2.2, -0.3, 0.9)] {
        oracle = oracle.max(oracle_square(w, s).map_err(|e| e.to_string())?);
        oracle = oracle.max(oracle_linear_match(w, s, t, y).map_err(|e| e.to_string())?);
    }
    ok &= oracle < ORACLE_TOL;
    let summary = format!(
        "per-pixel FD on 2x6x6 set: {} (< {SECOND_ORDER_TOL:e}); 1-parameter oracles {oracle:.1e} (< {ORACLE_TOL:e})",
        parts.join(", ")
    );
    if ok {
        within_budget(start, Duration::from_secs(60), summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- criterion 3

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let archs = [ArchDescriptor::convnet(2, 8, 10, (1, 8, 8)), ArchDescriptor::mlp(2, 16, 10, (1, 4, 4))];
    let eps = DEFAULT_EPSILON;
    let (mut ident, mut equiv) = (0.0f64, 0.0f64);
    let mut filters = 0usize;
    let mut bitwise = true;
    for (ai, arch) in archs.iter().enumerate() {
        for seed in 0..5u64 {
            let net = Network::build(arch, seed).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed + 10 * ai as u64);
            let d = sample_direction(&net, &mut rng);
            let dn = filter_normalize(&d, &net, eps).map_err(|e| e.to_string())?;
            for ((p, raw), out) in net.params.iter().zip(&d.tensors).zip(&dn.tensors) {
                for r in p.filter_ranges() {
                    let theta = norm(&p.value.data()[r.clone()]);
                    let dnorm = norm(&raw.data()[r.clone()]);
                    let expect = theta * dnorm / (dnorm + eps);
                    let got = norm(&out.data()[r.clone()]);
                    ident = ident.max((got - expect).abs() / expect.max(1.0));
                    filters += 1;
                }
            }
            let alpha = 0.8;
            let moved = apply_direction(&net, &dn, alpha).map_err(|e| e.to_string())?;
            for c in [1e-3, 0.37, 4.0, 250.0] {
                let mut scaled = net.clone();
                for p in &mut scaled.params {
                    p.value = p.value.map(|v| v * c);
                }
                let dn_c = filter_normalize(&d, &scaled, eps).map_err(|e| e.to_string())?;
                let moved_c = apply_direction(&scaled, &dn_c, alpha).map_err(|e| e.to_string())?;
                for ((p0, p1), (q0, q1)) in net.params.iter().zip(&moved.params).zip(scaled.params.iter().zip(&moved_c.params)) {
                    for r in p0.filter_ranges() {
                        let disp: Vec<f64> = r.clone().map(|k| p1.value.data()[k] - p0.value.data()[k]).collect();
                        let disp_c: Vec<f64> = r.clone().map(|k| q1.value.data()[k] - q0.value.data()[k]).collect();
                        let (a, b) = (c * norm(&disp), norm(&disp_c));
                        if a > 0.0 {
                            equiv = equiv.max((a - b).abs() / a);
                        }
                    }
                }
            }
            let same = perturb(&net, 0.0, &mut rng, eps).map_err(|e| e.to_string())?;
            bitwise &= net
                .params
                .iter()
                .zip(&same.params)
                .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let summary = format!(
        "{filters} filters: norm identity {ident:.1e} (< 1e-12), scale equivariance {equiv:.1e} (< 1e-10), alpha=0 bitwise {bitwise}"
    );
    if ident < 1e-12 && equiv < 1e-10 && bitwise {
        within_budget(start, Duration::from_secs(60), summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let arch = ArchDescriptor::convnet(2, 4, 3, (1, 8, 8));
    let worst_scale = Cell::new(0.0f64);
    let strategy = (any::<u64>(), -3.0f64..3.0);
    let result = runner(100).run(&strategy, |(seed, log_c)| {
        let fail = |e: edd::Error| TestCaseError::fail(e.to_string());
        let net = Network::build(&arch, seed).map_err(fail)?;
        let img = |k: u64, n: usize| away_from_zero(&[n, 1, 8, 8], seed ^ k);
        let (s, t) = (img(1, 3), img(2, 5));
        let gs = grads_of_loss(&net, &s, &[0, 1, 2]).map_err(fail)?;
        let gt = grads_of_loss(&net, &t, &[2, 1, 0, 0, 1]).map_err(fail)?;
        let cfg = MatchConfig::default();
        prop_assert_eq!(l2_match(&gs, &gs, &cfg).map_err(fail)?, 0.0);
        let c = 10f64.powf(log_c);
        let base = cosine_match(&gs, &gt, &cfg).map_err(fail)?;
        let scaled = cosine_match(&gs.scaled(c), &gt, &cfg).map_err(fail)?;
        worst_scale.set(worst_scale.get().max((base - scaled).abs()));
        prop_assert!((base - scaled).abs() <= 1e-12, "cosine moved by {:e} under scale {c}", (base - scaled).abs());
        prop_assert_eq!(dist_match(&net, &s, &s).map_err(fail)?, 0.0);
        Ok(())
    });
    let summary = format!(
        "100 cases: l2(g,g) == 0, dist(S,S) == 0, cosine scale drift {:.1e} (<= 1e-12)",
        worst_scale.get()
    );
    match result {
        Ok(()) => within_budget(start, Duration::from_secs(60), summary),
        Err(e) => Err(format!("{summary}; {e}")),
    }
}

// ---------------------------------------------------------------- criteria 5, 8

struct Tiny {
    train: Dataset,
    pool: Pool,
}

fn tiny(classes: usize) -> edd::Result<Tiny> {
    let spec = GlyphSpec { classes, ..GlyphSpec::digits(16) };
    let (train, _) = glyph_digits(&spec, 10, 1, 3)?;
    let arch = ArchDescriptor::convnet(1, 4, classes, (1, 16, 16));
    let ps = PretrainSpec { models: 2, epochs: 1, batch: 16, seed: 3, ..PretrainSpec::default() };
    let pool = Pool::new(pretrain_pool(&train, &arch, &ps, None)?)?;
    Ok(Tiny { train, pool })
}

fn tiny_cfg(outer: usize, inner: usize) -> DistillConfig {
    DistillConfig {
        outer_loops: outer,
        inner_loops: inner,
        pool_size: 2,
        pretrain_epochs: 1,
        real_batch: 4,
        net_batch: 8,
        seed: 11,
        ..DistillConfig::default()
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let t = tiny(4).map_err(|e| e.to_string())?;
    let s0 = init_synthetic(&t.train, 2, 1, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let cfg = tiny_cfg(7, 3);
    let (a, log) = run(&t.train, &t.pool, &s0, &cfg).map_err(|e| e.to_string())?;
    let (b, _) = run(&t.train, &t.pool, &s0, &cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, pb) = (dir.path().join("a.ddsy"), dir.path().join("b.ddsy"));
    a.export(&pa).map_err(|e| e.to_string())?;
    b.export(&pb).map_err(|e| e.to_string())?;
    let same = std::fs::read(&pa).map_err(|e| e.to_string())? == std::fs::read(&pb).map_err(|e| e.to_string())?;
    let summary = format!(
        "T=7 M=3 C=4: {} synthetic / {} network updates (want 84 / 21), {} log lines, DDSY byte-identical {same}",
        log.synthetic_updates,
        log.network_updates,
        log.steps.len()
    );
    if log.synthetic_updates == 84 && log.network_updates == 21 && log.steps.len() == 7 && same {
        within_budget(start, Duration::from_secs(120), summary)
    } else {
        Err(summary)
    }
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let reference = Values::default().get("distill.reference_outer_loops").parse::<usize>().map_err(|e| e.to_string())?;
    let t = tiny(2).map_err(|e| e.to_string())?;
    let arch = t.pool.arch().clone();
    let s0 = init_synthetic(&t.train, 1, 1, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let full = tiny_cfg(reference, 1);
    let (_, ref_log) = run(&t.train, &t.pool, &s0, &full).map_err(|e| e.to_string())?;
    let ref_flops = distill_flops(&arch, &full, 1, 1);
    let ref_eval_flops = flops_estimate(&arch, full.net_batch, ref_log.steps.len() as u64);
    let mut parts = Vec::new();
    let mut ok = ref_log.steps.len() == reference && ref_flops.fract() == 0.0;
    for k in [5usize, 10, 20] {
        let outer = preset_outer_loops(&format!("x{k}"), reference).map_err(|e| e.to_string())?;
        let cfg = DistillConfig { outer_loops: outer, ..full.clone() };
        let (_, log) = run(&t.train, &t.pool, &s0, &cfg).map_err(|e| e.to_string())?;
        let flops = distill_flops(&arch, &cfg, 1, 1);
        let eval_flops = flops_estimate(&arch, cfg.net_batch, log.steps.len() as u64);
        let exact = ref_log.steps.len() == k * log.steps.len()
            && ref_log.synthetic_updates == k * log.synthetic_updates
            && ref_log.network_updates == k * log.network_updates
            && ref_flops == k as f64 * flops
            && ref_flops / flops == k as f64
            && ref_eval_flops == k as f64 * eval_flops;
        ok &= exact;
        parts.push(format!("x{k}: {} steps, flops ratio {}", log.steps.len(), ref_flops / flops));
    }
    let summary = format!("reference T={reference}; {}", parts.join("; "));
    if ok {
        within_budget(start, Duration::from_secs(600), summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- criteria 6, 7

/// Desk-scale setting shared by the efficacy and ablation checks.
struct Desk {
    train: Dataset,
    test: Dataset,
    arch: ArchDescriptor,
    aug: AugPolicy,
    spec: PretrainSpec,
    distill: DistillConfig,
    protocol: EvalProtocol,
}

const IPC: usize = 10;
/// Calibrated margin of train-on-synthetic over the random-subset baseline
/// was +0.043 (0.5587 vs 0.5157); half of it is the regression bound.
const EFFICACY_MARGIN: f64 = 0.02;

fn desk() -> edd::Result<Desk> {
    let side = 16;
    let (train, test) = glyph_digits(&GlyphSpec::digits(side), 200, 100, 0)?;
    let arch = ArchDescriptor::convnet(3, 32, 10, (1, side, side));
    let aug: AugPolicy = "shift(2)".parse()?;
    let spec = PretrainSpec { models: 5, epochs: 1, policies: vec![AugPolicy::none(), aug.clone()], seed: 0, ..PretrainSpec::default() };
    let distill = DistillConfig {
        outer_loops: 100,
        inner_loops: 5,
        pool_size: 5,
        pretrain_epochs: 1,
        alpha: 1.0,
        image_lr: 1.0,
        image_momentum: 0.5,
        real_batch: 16,
        net_batch: 32,
        matching: MatchConfig::with_objective(Objective::Cosine),
        aug: aug.clone(),
        seed: 0,
        ..DistillConfig::default()
    };
    let protocol = EvalProtocol { epochs: 60, lr: 0.01, aug: aug.clone(), ..EvalProtocol::new(arch.clone()) };
    Ok(Desk { train, test, arch, aug, spec, distill, protocol })
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let d = desk().map_err(|e| e.to_string())?;
    let err = |e: edd::Error| e.to_string();
    let pool = Pool::new(pretrain_pool(&d.train, &d.arch, &d.spec, None).map_err(err)?).map_err(err)?;
    let s0: SyntheticSet = init_synthetic(&d.train, IPC, 1, &mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
    let (s, _) = run(&d.train, &pool, &s0, &d.distill).map_err(err)?;
    let report = train_on_synthetic(&s, &d.protocol, &d.test, 3, 0).map_err(err)?;
    let base = random_subset_baseline(&d.train, IPC, &d.protocol, &d.test, 3, 0).map_err(err)?;
    let report = report.with_baseline(&base).map_err(err)?;
    let margin = report.mean - base.mean;
    let summary = format!(
        "distilled {:.4} +- {:.4} vs random subset {:.4} +- {:.4}: margin {margin:+.4} (bound > {EFFICACY_MARGIN})",
        report.mean, report.std, base.mean, base.std
    );
    if report.accuracies.len() == 3 && margin > EFFICACY_MARGIN {
        within_budget(start, Duration::from_secs(30 * 60), summary)
    } else {
        Err(summary)
    }
}

const WELL_TRAINED: usize = 30;

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let d = desk().map_err(|e| e.to_string())?;
    let err = |e: edd::Error| e.to_string();
    let mut bank = PoolBank::build(&d.train, &d.arch, &d.spec, 10, &[0, 1]).map_err(err)?;
    let high = PoolBank::build(&d.train, &d.arch, &d.spec, 5, &[WELL_TRAINED]).map_err(err)?;
    bank.insert(WELL_TRAINED, high.pool(WELL_TRAINED, 5).map_err(err)?.records().to_vec());
    let setup = AblationSetup {
        train: &d.train,
        test: &d.test,
        bank: &bank,
        distill: d.distill.clone(),
        ipc: IPC,
        factor: 1,
        protocol: EvalProtocol { aug: d.aug.clone(), ..d.protocol.clone() },
        seeds: vec![0, 1, 2],
    };
    let arm = |cfg: DistillConfig, value: f64| -> Result<AblationRow, String> {
        let t0 = Instant::now();
        let accuracies = pipeline_arm(&setup, &cfg).map_err(err)?;
        let (mean, std) = mean_std(&accuracies);
        let row = AblationRow { value, accuracies, mean, std, wall_seconds: t0.elapsed().as_secs_f64() };
        println!("    arm {value:>5} ... {:.4} +- {:.4} {:?} ({:.0}s)", row.mean, row.std, row.accuracies, row.wall_seconds);
        Ok(row)
    };
    let base = &d.distill;
    println!("    base arm: P=1 alpha=1 N=5");
    let b = arm(base.clone(), 1.0)?;
    println!("    pretrain epochs");
    let p0 = arm(DistillConfig { pretrain_epochs: 0, ..base.clone() }, 0.0)?;
    let p30 = arm(DistillConfig { pretrain_epochs: WELL_TRAINED, ..base.clone() }, WELL_TRAINED as f64)?;
    println!("    alpha");
    let a0 = arm(DistillConfig { alpha: 0.0, ..base.clone() }, 0.0)?;
    let a10 = arm(DistillConfig { alpha: 10.0, ..base.clone() }, 10.0)?;
    println!("    pool size");
    let n2 = arm(DistillConfig { pool_size: 2, ..base.clone() }, 2.0)?;
    let n10 = arm(DistillConfig { pool_size: 10, ..base.clone() }, 10.0)?;

    let checks = [
        ("P=1 >= P=0", b.mean >= p0.mean),
        ("P=1 >= P=30", b.mean >= p30.mean),
        ("a=1 >= a=0", b.mean >= a0.mean),
        ("a=1 >= a=10", b.mean >= a10.mean),
    ];
    let ns = [n2.mean, b.mean, n10.mean];
    let spread = ns.iter().cloned().fold(f64::MIN, f64::max) - ns.iter().cloned().fold(f64::MAX, f64::min);
    let mut failed: Vec<String> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.to_string()).collect();
    if spread > 0.02 {
        failed.push(format!("N spread {spread:.4} > 0.02"));
    }
    let summary = format!(
        "P 0/1/30: {:.4}/{:.4}/{:.4}; alpha 0/1/10: {:.4}/{:.4}/{:.4}; N 2/5/10: {:.4}/{:.4}/{:.4} (spread {spread:.4})",
        p0.mean, b.mean, p30.mean, a0.mean, b.mean, a10.mean, n2.mean, b.mean, n10.mean
    );
    if failed.is_empty() {
        within_budget(start, Duration::from_secs(90 * 60), summary)
    } else {
        Err(format!("{summary}; failed: {}", failed.join(", ")))
    }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("EDD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "first-order gradients", criterion_1),
        (2, "second-order gradients", criterion_2),
        (3, "filter-normalization invariants", criterion_3),
        (4, "matching-loss contracts", criterion_4),
        (5, "outer/inner loop accounting", criterion_5),
        (6, "desk-scale efficacy", criterion_6),
        (7, "directional ablations", criterion_7),
        (8, "speed-up presets", criterion_8),
    ];
    let mut failures = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let line = match std::panic::catch_unwind(f) {
            Ok(Ok(msg)) => format!("criterion {n} PASS  {name}: {msg}"),
            Ok(Err(msg)) => {
                failures += 1;
                format!("criterion {n} FAIL  {name}: {msg}")
            }
            Err(_) => {
                failures += 1;
                format!("criterion {n} FAIL  {name}: panicked")
            }
        };
        println!("{line}");
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
