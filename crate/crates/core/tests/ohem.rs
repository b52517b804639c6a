mod common;

use common::{oracles, probes};

#[test]
fn selection_agrees_with_sort_oracle() {
    let r = oracles::check_ohem(99, 2000);
    assert!(r.passed(), "{r:?}");
}

#[test]
fn idle_head_stays_bit_identical() {
    let r = probes::frozen_head_check(6);
    assert_eq!(r.branches, vec![1, 2, 1, 2, 1, 2]);
    assert!(r.passed(), "{r:?}");
}
