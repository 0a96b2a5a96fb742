#![allow(dead_code)]

use flis_core::data::{DataConfig, FederatedData, PartitionScheme};
use flis_core::{FederationConfig, ModelParams};

/// The shipped default experiment: 20 clients in 4 planted label groups.
pub fn default_experiment(seed: u64) -> (FederationConfig, FederatedData) {
    let cfg = FederationConfig { seed, ..FederationConfig::default() };
    let data = DataConfig::default().build(cfg.num_clients, seed).unwrap();
    (cfg, data)
}

/// A fast variant: 8 clients, 4 label pairs, short runs.
pub fn small(seed: u64) -> (FederationConfig, FederatedData) {
    let cfg = FederationConfig { num_clients: 8, rounds: 4, local_epochs: 2, seed, ..FederationConfig::default() };
    let data = DataConfig {
        dim: 8,
        per_class: 60,
        server_size: 80,
        partition: PartitionScheme::LabelSkew { fraction: 0.25 },
        ..DataConfig::default()
    }
    .build(cfg.num_clients, seed)
    .unwrap();
    (cfg, data)
}

pub fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.weights().iter().zip(b.weights()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pair count against planted groups, straight from the definition: a pair is
/// together when some cluster holds both.
pub fn pair_error(found: &flis_core::ClusterSet, truth: &[i64]) -> (usize, usize) {
    let members = found.members();
    let (mut fp, mut fneg) = (0, 0);
    for (x, &a) in members.iter().enumerate() {
        for &b in &members[x + 1..] {
            let together = found.clusters.iter().any(|c| c.contains(&a) && c.contains(&b));
            let same = truth[a] == truth[b];
            fp += usize::from(together && !same);
            fneg += usize::from(!together && same);
        }
    }
    (fp, fneg)
}
