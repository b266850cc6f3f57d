mod common;

use common::{op_error, OPS};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for op in OPS {
            let err = op_error(op, seed);
            prop_assert!(err < 1e-4, "{op} seed {seed}: {err}");
        }
    }
}
