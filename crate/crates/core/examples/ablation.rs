//! Desk-scale ablation arms over pretraining epochs, perturbation size and
//! pool size. Prints one line per arm as it finishes.
//!
//! ```text
//! cargo run --release --example ablation
//! ```

use std::env;
use std::str::FromStr;
use std::time::Instant;

use edd::augment::AugPolicy;
use edd::data::fixtures::{glyph_digits, GlyphSpec};
use edd::distill::DistillConfig;
use edd::eval::{mean_std, pipeline_arm, AblationSetup, EvalProtocol, PoolBank};
use edd::matchloss::{MatchConfig, Objective};
use edd::modelpool::PretrainSpec;
use edd::nets::ArchDescriptor;

fn knob<T: FromStr>(name: &str, default: T) -> T {
    env::var(format!("EDD_{name}")).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> edd::Result<()> {
    let side = 16;
    let seed: u64 = knob("SEED", 0);
    let (train, test) = glyph_digits(&GlyphSpec::digits(side), 200, 100, seed)?;
    let arch = ArchDescriptor::convnet(3, 32, 10, (1, side, side));
    let aug: AugPolicy = "shift(2)".parse()?;
    let spec = PretrainSpec { policies: vec![AugPolicy::none(), aug.clone()], seed, ..PretrainSpec::default() };

    let t0 = Instant::now();
    let mut bank = PoolBank::build(&train, &arch, &spec, 10, &[0, 1])?;
    let well_trained: u64 = knob("P_HIGH", 30);
    let high = PoolBank::build(&train, &arch, &spec, 5, &[well_trained as usize])?;
    bank.insert(well_trained as usize, high.pool(well_trained as usize, 5)?.records().to_vec());
    println!("pools: {:.1}s", t0.elapsed().as_secs_f64());

    let objective: Objective = knob("OBJECTIVE", "cosine".to_string()).parse()?;
    let base = DistillConfig {
        outer_loops: knob("T", 100),
        inner_loops: 5,
        pool_size: 5,
        pretrain_epochs: 1,
        alpha: 1.0,
        image_lr: knob("IMAGE_LR", 1.0),
        image_momentum: 0.5,
        real_batch: 16,
        net_batch: 32,
        matching: MatchConfig::with_objective(objective),
        aug: aug.clone(),
        ..DistillConfig::default()
    };
    let setup = AblationSetup {
        train: &train,
        test: &test,
        bank: &bank,
        distill: base.clone(),
        ipc: 10,
        factor: 1,
        protocol: EvalProtocol { epochs: 60, lr: 0.01, aug, ..EvalProtocol::new(arch) },
        seeds: vec![seed, seed + 1, seed + 2],
    };
    let arms: Vec<(&str, DistillConfig)> = vec![
        ("base", base.clone()),
        ("P=0", DistillConfig { pretrain_epochs: 0, ..base.clone() }),
        ("P=high", DistillConfig { pretrain_epochs: well_trained as usize, ..base.clone() }),
        ("alpha=0", DistillConfig { alpha: 0.0, ..base.clone() }),
        ("alpha=10", DistillConfig { alpha: 10.0, ..base.clone() }),
        ("N=2", DistillConfig { pool_size: 2, ..base.clone() }),
        ("N=10", DistillConfig { pool_size: 10, ..base.clone() }),
    ];
    let only: String = knob("ARMS", String::new());
    for (name, cfg) in arms {
        if !only.is_empty() && !only.split(',').any(|a| a == name) {
            continue;
        }
        let t0 = Instant::now();
        let acc = pipeline_arm(&setup, &cfg)?;
        let (mean, std) = mean_std(&acc);
        println!("{name:10} {mean:.4} +- {std:.4} {acc:?} ({:.1}s)", t0.elapsed().as_secs_f64());
    }
    Ok(())
}
