mod common;

use common::*;

fn assert_matches(r: OracleReport) {
    assert!(
        r.passed(),
        "{}: {} mismatching of {} cases, max abs error {:.2e}",
        r.name,
        r.mismatches,
        r.cases,
        r.max_abs_error
    );
}

#[test]
fn mask_average_pool_matches_double_loop() {
    assert_matches(oracle_map());
}

#[test]
fn pseudo_labels_match_exhaustive_search() {
    assert_matches(oracle_pseudo_labels());
}

#[test]
fn harvest_matches_enumeration() {
    assert_matches(oracle_harvest());
}

#[test]
fn miou_matches_pixel_counting() {
    assert_matches(oracle_miou());
}

#[test]
fn kmeans_recovers_planted_centers() {
    let r = clustering_report();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn regions_partition_and_shrink_with_scale() {
    let r = region_report();
    assert!(r.passed(), "{r:?}");
}
