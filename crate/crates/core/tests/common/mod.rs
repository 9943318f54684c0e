#![allow(dead_code, clippy::field_reassign_with_default)]

use std::io::Write;
use std::path::PathBuf;

use iaml::backbone::BackboneConfig;
use iaml::config::{RunConfig, DATA_ROOT_ENV};
use iaml::data::{discover_pairs, LoadedPair, PairedDataset};
use iaml::synthetic::synthetic_pair;

/// In-memory synthetic pairs, `count` of them at `size × size`, seeded `first..`.
pub fn synthetic_set(count: usize, size: usize, first: u64) -> PairedDataset {
    PairedDataset {
        pairs: (0..count as u64)
            .map(|i| {
                let (low, clean) = synthetic_pair(size, size, first + i);
                LoadedPair {
                    pair_id: format!("{}", i + 1),
                    low,
                    clean,
                }
            })
            .collect(),
    }
}

/// The first `count` LOL-v1 training pairs when a dataset root is configured,
/// otherwise synthetic stand-ins. The second value names the source.
pub fn overfit_pairs(count: usize) -> (PairedDataset, String) {
    if let Some(root) = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from) {
        if let Ok(mut records) = discover_pairs(&root, "our485") {
            records.truncate(count);
            if let Ok(set) = PairedDataset::load(&records, 32) {
                if set.len() == count {
                    return (set, format!("LOL-v1 our485 under {}", root.display()));
                }
            }
        }
    }
    (synthetic_set(count, 48, 100), "synthetic 48x48".to_string())
}

/// Toy-scale configuration shared by the overfit and ablation checks.
pub fn toy_config(steps: u64, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.model = BackboneConfig {
        depth: 2,
        base_channels: 8,
        ..BackboneConfig::tiny()
    };
    c.train.crop = 32;
    c.train.batch_size = 4;
    c.train.lr = 5e-3;
    c.train.epochs = steps;
    c.train.max_steps = steps;
    c.train.ema_mu = 0.999;
    c.train.seed = seed;
    c.train.checkpoint_every = 0;
    c
}

/// Writes straight to the process stdout so the line survives test-output capture.
pub fn announce(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
