mod common;

#[test]
fn convolutions_match_nested_loops() {
    let (e64, e32) = common::conv_oracle_errors(11, 50);
    assert!(e64 < 1e-10, "binary64 error {e64:e}");
    assert!(e32 < 1e-5, "binary32 error {e32:e}");
}
