mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn relaxation_interpolates_and_stays_continuous(seed in any::<u64>(), jitter in -0.49f64..0.49) {
        let case = common::relaxation::random_case(seed);
        prop_assert_eq!(case.check(jitter), Ok(()));
    }
}
