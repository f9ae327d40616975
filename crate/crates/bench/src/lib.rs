//! Fixtures shared by the benchmarks.

use cpgd_core::oracle::LossInstance;
use cpgd_core::rng::{domain, stream};
use cpgd_core::{Algorithm, LossConfig, Result, TaskConfig, TaskKind, TrainConfig};

/// A small arithmetic-sum training config, sized so one step is a few milliseconds.
pub fn bench_config(algorithm: Algorithm) -> TrainConfig {
    let mut cfg = TrainConfig {
        task: TaskConfig {
            kind: TaskKind::ArithmeticSum,
            ..TaskConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.loss = LossConfig::for_algorithm(algorithm);
    cfg
}

/// A fixed random loss instance for the loss-evaluation benchmark.
pub fn loss_instance(seed: u64) -> Result<LossInstance> {
    LossInstance::random(&mut stream(seed, &[domain::ORACLE, 9]))
}
