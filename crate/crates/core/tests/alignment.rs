mod common;

use talknet::align::{min_frames, viterbi_align};

#[test]
fn viterbi_agrees_with_exhaustive_search() {
    let tally = common::run_viterbi_oracle(1000);
    assert!(tally.mismatches.is_empty(), "{tally:?}");
    assert_eq!(tally.matched, 1000);
    assert_eq!(tally.sums_ok, tally.feasible);
    // The generator must exercise both outcomes.
    assert!(tally.feasible > 500 && tally.feasible < 1000, "{tally:?}");
}

#[test]
fn infeasible_exactly_below_min_frames() {
    for seed in 0..300 {
        let (lattice, target) = common::random_case(seed);
        let feasible = viterbi_align(&lattice, &target).is_ok();
        assert_eq!(feasible, lattice.frames() >= min_frames(&target), "seed {seed}");
    }
}
