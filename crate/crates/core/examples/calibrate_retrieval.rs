//! Measures top-1 retrieval over 1000 queries for a few registry seeds.
//! The pinned acceptance threshold (0.95) was chosen from this run.

use pcrl_core::clues::retrieval_benchmark;

fn main() {
    for registry_seed in 0..3u64 {
        let stats = retrieval_benchmark(registry_seed, 10_000, 1000, 0.5);
        println!(
            "registry {registry_seed}: hit rate {:.4}, layer violations {}, empty {}",
            stats.hit_rate(),
            stats.layer_violations,
            stats.empty
        );
    }
}
