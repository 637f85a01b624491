//! Shared fixtures for integration tests: a miniature two-domain suite that
//! trains in seconds.

use std::path::Path;

use unitime::config::{EvalConfig, RunConfig};
use unitime::data::DomainSpec;
use unitime::model::{AblationFlags, ModelConfig, Tunability};
use unitime::synth::{write_csv, GeneratorKind, GeneratorSpec};
use unitime::training::TrainConfig;

/// Writes two small domains (seasonal and drifted walk) and returns a run
/// config pointing at them. Geometry is deliberately heterogeneous.
pub fn tiny_suite(dir: &Path, seed: u64) -> RunConfig {
    let generators = vec![
        GeneratorSpec {
            name: "mini_seasonal".into(),
            kind: GeneratorKind::Seasonal,
            channels: 2,
            rows: 240,
            periods: vec![8.0],
            trend_slope: 0.0,
            noise_std: 0.2,
            seed,
        },
        GeneratorSpec {
            name: "mini_walk".into(),
            kind: GeneratorKind::RandomWalk,
            channels: 1,
            rows: 200,
            periods: Vec::new(),
            trend_slope: 0.5,
            noise_std: 1.0,
            seed: seed + 1,
        },
    ];
    for g in &generators {
        write_csv(g, dir).expect("tiny suite CSV");
    }
    RunConfig {
        model: ModelConfig {
            hidden: 8,
            heads: 2,
            backbone_layers: 1,
            light_layers: 1,
            patch_len: 8,
            max_tokens: 10,
            max_horizon: 8,
            max_recon: 16,
            mask_ratio: 0.25,
            vocab_size: 0,
            tunability: Tunability::Full,
            ablation: AblationFlags::default(),
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            oversampling_alpha: 0.5,
            seed: Some(seed),
            grad_clip: None,
        },
        eval: EvalConfig::default(),
        domains: vec![
            DomainSpec {
                name: "mini_seasonal".into(),
                instruction: "short periodic sensor trace".into(),
                channels: 2,
                lookback: 16,
                horizon: 8,
                stride: 8,
                csv: dir.join("mini_seasonal.csv").display().to_string(),
            },
            DomainSpec {
                name: "mini_walk".into(),
                instruction: "drifting account balance".into(),
                channels: 1,
                lookback: 16,
                horizon: 4,
                stride: 4,
                csv: dir.join("mini_walk.csv").display().to_string(),
            },
        ],
    }
}
