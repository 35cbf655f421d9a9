use occflow_bench::{scenario, scores_and_labels, tensor};

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(scores_and_labels(256, 9), scores_and_labels(256, 9));
    assert_eq!(tensor(&[2, 3], 1).to_vec(), tensor(&[2, 3], 1).to_vec());
    assert_eq!(scenario(3), scenario(3));
}

#[test]
fn labels_are_binary_and_scores_bounded() {
    let (p, y) = scores_and_labels(1000, 2);
    assert!(y.iter().all(|&v| v == 0.0 || v == 1.0) && y.contains(&1.0));
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
}
