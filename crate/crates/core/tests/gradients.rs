mod common;

use common::{gradient_report, FD_REL_TOL};

#[test]
fn every_loss_matches_central_differences() {
    for seed in 100..150 {
        let r = gradient_report(seed);
        assert!(r.params <= 1000, "config {seed} has {} parameters", r.params);
        assert!(
            r.worst() <= FD_REL_TOL,
            "config {seed}: baseline {:.2e} wl2 {:.2e} wl2/pred {:.2e} adv {:.2e} combined {:.2e} disc {:.2e}",
            r.baseline_l2,
            r.weighted_l2,
            r.weighted_l2_pred,
            r.generator_adversarial,
            r.generator_combined,
            r.discriminator
        );
    }
}
