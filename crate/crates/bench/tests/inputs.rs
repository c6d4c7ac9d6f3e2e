use segcurate_bench::{attention, blobs, cost_matrix, noise};

#[test]
fn inputs_are_seeded() {
    assert_eq!(blobs(64, 64, 5, 9), blobs(64, 64, 5, 9));
    assert_ne!(noise(32, 32, 0.5, 1), noise(32, 32, 0.5, 2));
    assert_eq!(cost_matrix(3, 7, 1).data, cost_matrix(3, 7, 1).data);
}

#[test]
fn attention_grid_has_both_classes() {
    let (_, gt) = attention(1, 1, 9, 0);
    let fg = gt.cells().iter().filter(|&&c| c == 1).count();
    assert!(fg > 0 && fg < 81);
}
