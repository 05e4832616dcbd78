mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bodyregion::stats::bootstrap::{bootstrap_ci, weighted_sensitivity_metric, BootstrapConfig};

fn mean_width(studies: usize, cohorts: u64) -> f64 {
    let total: f64 = (0..cohorts)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + c);
            let cohort = common::slab_cohort(&mut rng, studies);
            let config = BootstrapConfig {
                resamples: 500,
                seed: c,
                ..BootstrapConfig::default()
            };
            let ci = bootstrap_ci(&cohort, &weighted_sensitivity_metric, &config).unwrap();
            ci.hi - ci.lo
        })
        .sum();
    total / cohorts as f64
}

#[test]
fn doubling_studies_shrinks_width_by_root_two() {
    let small = mean_width(200, 30);
    let large = mean_width(400, 30);
    let ratio = large / small;
    println!("mean width {small:.4} -> {large:.4}, ratio {ratio:.3}");
    assert!((0.65..=0.75).contains(&ratio), "ratio {ratio}");
}
