//! Fixtures shared by the binary-level and acceptance test suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moa_core::adapter::{MoaConfig, RouterMode};
use moa_core::backbone::BackboneConfig;
use moa_core::data::DataConfig;
use moa_core::harness::{OptimConfig, RunConfig};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moa"))
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary should launch")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Two-block 16-wide geometry over a 7-identity dataset: a full run takes a
/// fraction of a second, so end-to-end round trips stay cheap.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            mlp_ratio: 2,
            image_hw: (8, 8),
            patch: 4,
            channels: 1,
            vocab_size: 16,
            text_len: 8,
            ..BackboneConfig::default()
        },
        moa: MoaConfig {
            n_experts: 3,
            top_k: 2,
            reduction: 8,
            router: RouterMode::Domain,
            prompt_count: 2,
            ..MoaConfig::default()
        },
        optim: OptimConfig {
            epochs: 2,
            batch_size: 8,
            eval_every: 1,
            max_steps: None,
            ..OptimConfig::default()
        },
        data: DataConfig {
            num_train_ids: 4,
            num_test_ids: 3,
            imgs_per_id: 4,
            caps_per_img: 1,
            n_attributes: 4,
            noise: 0.1,
            min_gap: 0.25,
            image_hw: (8, 8),
            channels: 1,
            vocab_size: 16,
            ..DataConfig::default()
        },
        seed: 11,
        ..RunConfig::default()
    }
}

pub fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    tiny_config().save(&path).expect("config should serialize");
    path
}
