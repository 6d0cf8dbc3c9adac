mod common;

use common::ekf_loop;

#[test]
fn fusion_bounds_drift_and_removes_outliers() {
    for seed in 0..3 {
        let r = ekf_loop::run(seed);
        assert!(r.fused_rmse <= 0.03, "seed {seed}: {r:?}");
        assert!(r.gyro_final >= 0.3, "seed {seed}: {r:?}");
        assert!(r.fused_p95 < r.meas_p95, "seed {seed}: {r:?}");
    }
}

#[test]
fn fusion_is_deterministic() {
    let a = ekf_loop::run(11);
    let b = ekf_loop::run(11);
    assert_eq!(a.fused_rmse, b.fused_rmse);
    assert_eq!(a.gyro_final, b.gyro_final);
}
