//! Desk-scale calibration run: pretrain a small pool on procedural digits,
//! distill, and compare train-on-synthetic accuracy with the random-subset
//! baseline. Knobs come from environment variables, e.g.
//!
//! ```text
//! EDD_T=100 EDD_IMAGE_LR=0.1 cargo run --release --example calibrate
//! ```

use std::env;
use std::str::FromStr;
use std::time::Instant;

use edd::augment::AugPolicy;
use edd::data::fixtures::{glyph_digits, GlyphSpec};
use edd::distill::{init_synthetic, run_with, DistillConfig};
use edd::eval::{random_subset_baseline, train_on_synthetic, EvalProtocol};
use edd::matchloss::{MatchConfig, Objective};
use edd::modelpool::{pretrain_pool, Pool, PretrainSpec};
use edd::nets::ArchDescriptor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn knob<T: FromStr>(name: &str, default: T) -> T {
    env::var(format!("EDD_{name}")).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> edd::Result<()> {
    let side: usize = knob("SIDE", 16);
    let width: usize = knob("WIDTH", 32);
    let seed: u64 = knob("SEED", 0);
    let (train, test) = glyph_digits(&GlyphSpec::digits(side), knob("TRAIN_PER_CLASS", 200), knob("TEST_PER_CLASS", 100), seed)?;
    let arch = ArchDescriptor::convnet(3, width, 10, (1, side, side));
    let aug: AugPolicy = knob("AUG", "shift(2)".to_string()).parse()?;

    let t0 = Instant::now();
    let spec = PretrainSpec {
        models: knob("N", 5),
        epochs: knob("P", 1),
        policies: vec![AugPolicy::none(), aug.clone()],
        seed,
        ..PretrainSpec::default()
    };
    let pool = Pool::new(pretrain_pool(&train, &arch, &spec, None)?)?;
    println!("pretrain: {:.1}s", t0.elapsed().as_secs_f64());

    let objective: Objective = knob("OBJECTIVE", "l2".to_string()).parse()?;
    let cfg = DistillConfig {
        outer_loops: knob("T", 100),
        inner_loops: knob("M", 5),
        pool_size: spec.models,
        pretrain_epochs: spec.epochs,
        alpha: knob("ALPHA", 1.0),
        net_lr: knob("NET_LR", 0.01),
        image_lr: knob("IMAGE_LR", 0.1),
        image_momentum: knob("IMAGE_MOMENTUM", 0.5),
        real_batch: knob("REAL_BATCH", 16),
        net_batch: knob("NET_BATCH", 32),
        matching: MatchConfig::with_objective(objective),
        aug: aug.clone(),
        seed,
        ..DistillConfig::default()
    };
    let protocol = EvalProtocol {
        epochs: knob("EVAL_EPOCHS", 60),
        lr: knob("EVAL_LR", 0.01),
        aug: aug.clone(),
        ..EvalProtocol::new(arch.clone())
    };
    let ipc: usize = knob("IPC", 10);
    let reps: usize = knob("REPS", 3);

    let t0 = Instant::now();
    let base = random_subset_baseline(&train, ipc, &protocol, &test, reps, seed)?;
    println!("baseline: {:.4} +- {:.4} {:?} ({:.1}s)", base.mean, base.std, base.accuracies, t0.elapsed().as_secs_f64());

    let s0 = init_synthetic(&train, ipc, 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let every = (cfg.outer_loops / 10).max(1);
    let t0 = Instant::now();
    let (s, _) = run_with(&train, &pool, &s0, &cfg, |rec, _| {
        if rec.step % every == 0 || rec.step + 1 == cfg.outer_loops {
            println!("step {:4}  match {:.5}  net {:.4}  {:.1}s", rec.step, rec.matching_loss_mean, rec.net_loss, rec.elapsed_ms as f64 / 1000.0);
        }
        Ok(())
    })?;
    println!("distill: {:.1}s", t0.elapsed().as_secs_f64());
    let init = train_on_synthetic(&s0, &protocol, &test, reps, seed)?;
    println!("init set: {:.4} +- {:.4}", init.mean, init.std);
    let rep = train_on_synthetic(&s, &protocol, &test, reps, seed)?;
    println!("distilled: {:.4} +- {:.4} {:?}", rep.mean, rep.std, rep.accuracies);
    println!("margin over baseline: {:+.4}", rep.mean - base.mean);
    Ok(())
}
