mod common;

use common::manifold;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn many_random_roundtrips() {
    manifold::run(20_000, 1).unwrap();
}

proptest! {
    #[test]
    fn every_seed_passes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(manifold::check_case(&mut rng), Ok(()));
    }

    #[test]
    fn boxminus_is_antisymmetric(a in prop::array::uniform4(-1.0f64..1.0), b in prop::array::uniform4(-1.0f64..1.0)) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3 && b.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let qa = inertial_odometry::quat::UnitQuaternion::from_array(a).unwrap();
        let qb = inertial_odometry::quat::UnitQuaternion::from_array(b).unwrap();
        let d = qa.boxminus(&qb);
        prop_assume!(d.norm() < std::f64::consts::PI - 1e-6);
        prop_assert!((d + qb.boxminus(&qa)).norm() < 1e-9);
    }
}
