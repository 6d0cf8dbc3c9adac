mod common;

use common::oracles::{self, random_pair};
use inertial_odometry::metrics::{ate, d_rte, rmse, t_rte};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL * b.abs().max(1.0)
}

fn close_opt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => close(a, b),
        (None, None) => true,
        _ => false,
    }
}

#[test]
fn metrics_match_direct_definitions() {
    for seed in 0..100 {
        let p = random_pair(seed);
        assert!(
            close(ate(&p.est, &p.truth).unwrap(), oracles::ate(&p)),
            "ate seed {seed}"
        );
        for interval in [0.5, 3.0, 10.0, 1e6] {
            let got = t_rte(&p.est, &p.truth, &p.t, interval).unwrap();
            assert!(
                close_opt(got, oracles::t_rte(&p, interval)),
                "t_rte seed {seed} interval {interval}"
            );
        }
        for distance in [1.0, 5.0, 1e6] {
            let got = d_rte(&p.est, &p.truth, distance).unwrap();
            assert!(
                close_opt(got, oracles::d_rte(&p, distance)),
                "d_rte seed {seed} distance {distance}"
            );
        }
        let errs: Vec<Vec<f64>> = p
            .est
            .iter()
            .zip(&p.truth)
            .map(|(e, t)| vec![e[0] - t[0], e[1] - t[1], e[0] * 0.1])
            .collect();
        assert!(close(rmse(&errs).unwrap(), oracles::rmse(&errs)), "rmse seed {seed}");
    }
}

#[test]
fn oversized_windows_give_none() {
    let p = random_pair(3);
    assert_eq!(t_rte(&p.est, &p.truth, &p.t, 1e9).unwrap(), None);
    assert_eq!(d_rte(&p.est, &p.truth, 1e9).unwrap(), None);
}

proptest! {
    #[test]
    fn ate_is_zero_only_for_identical_tracks(seed in 0u64..1000, shift in -5.0f64..5.0) {
        let p = random_pair(seed);
        prop_assert_eq!(ate(&p.truth, &p.truth).unwrap(), 0.0);
        let moved: Vec<[f64; 2]> = p.truth.iter().map(|q| [q[0] + shift, q[1]]).collect();
        prop_assert!((ate(&moved, &p.truth).unwrap() - shift.abs()).abs() < 1e-12);
        prop_assert_eq!(t_rte(&moved, &p.truth, &p.t, 1.0).unwrap().unwrap_or(0.0) < 1e-9, true);
    }
}
