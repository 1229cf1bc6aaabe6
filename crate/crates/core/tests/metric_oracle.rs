mod common;

use common::oracles::{dominance, percentile, rescaling_invariance};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn percentile_matches_definition(seed in any::<u64>()) {
        let r = percentile(seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn dominance_graph_matches_pairwise_oracle(seed in any::<u64>()) {
        let r = dominance(seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }

    #[test]
    fn total_ranking_ignores_column_scale(seed in any::<u64>()) {
        let r = rescaling_invariance(seed);
        prop_assert!(r.is_ok(), "{}", r.unwrap_err());
    }
}
