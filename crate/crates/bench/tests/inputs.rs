use nst_bench::{conv_flops, random_tensor};

#[test]
fn random_tensor_is_reproducible_and_bounded() {
    let a = random_tensor(3, 8, 8, 5);
    assert_eq!(a.data(), random_tensor(3, 8, 8, 5).data());
    assert_ne!(a.data(), random_tensor(3, 8, 8, 6).data());
    assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
}

#[test]
fn conv_flops_counts_two_per_multiply_add() {
    assert_eq!(conv_flops(1, 1, 1, 1, 1), 2);
    assert_eq!(conv_flops(16, 32, 3, 4, 5), 2 * 16 * 32 * 9 * 20);
}
