//! Oracle equivalence and structural invariants at the documented counts.

use dtea_core::pipeline::PipelineConfig;
use dtea_core::selfcheck::{
    conv_suite, entropy_suite, knn_suite, permutation_suite, preset_smoke, structure_suite,
    Tolerances, CONV_CASES, ENTROPY_CASES, KNN_CASES, PERMUTATION_CASES, STRUCTURE_CASES,
};

#[test]
fn dilated_knn_matches_bruteforce() {
    let report = knn_suite(KNN_CASES, 0x11AA);
    println!("{}", report.summary_line());
    assert_eq!(report.cases, KNN_CASES);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn entropy_and_selection_match_oracles() {
    let report = entropy_suite(ENTROPY_CASES, 0x22AA, &Tolerances::default());
    println!("{}", report.summary_line());
    assert_eq!(report.cases, ENTROPY_CASES);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn convolution_matches_naive_oracle() {
    let report = conv_suite(CONV_CASES, 0x33AA, &Tolerances::default());
    println!("{}", report.summary_line());
    assert_eq!(report.cases, CONV_CASES);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn random_configs_hold_structural_invariants() {
    let report = structure_suite(STRUCTURE_CASES, 0x44AA);
    println!("{}", report.summary_line());
    assert_eq!(report.cases, STRUCTURE_CASES);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn channel_permutation_property_holds() {
    let report = permutation_suite(PERMUTATION_CASES, 0x55AA);
    println!("{}", report.summary_line());
    assert_eq!(report.cases, PERMUTATION_CASES);
    assert!(report.passed(), "{:#?}", report.failures);
}

#[test]
fn tiny_preset_smoke() {
    let report = preset_smoke(&PipelineConfig::tiny());
    assert!(report.passed(), "{:#?}", report.failures);
}
