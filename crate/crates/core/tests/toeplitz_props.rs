use nka_core::rng::{gaussian_matrix, RngState};
use nka_core::tensor::Mat;
use nka_core::toeplitz::{causal_mask, toeplitz_matmul, toeplitz_matmul_naive, ToeplitzKernel};
use proptest::prelude::*;

fn random_kernel(rng: &mut RngState, n: usize) -> ToeplitzKernel {
    ToeplitzKernel::new(n, rng.gaussian_vec(2 * n - 1)).unwrap()
}

#[test]
fn fft_matches_naive_for_every_length_up_to_512() {
    let mut rng = RngState::new(42);
    for n in 1..=512 {
        let kernel = random_kernel(&mut rng, n);
        let x = gaussian_matrix(&mut rng, n, 3);
        let err = toeplitz_matmul(&kernel, &x)
            .unwrap()
            .rel_frobenius_err(&toeplitz_matmul_naive(&kernel, &x).unwrap());
        assert!(err <= 1e-9, "n = {n}: {err:e}");
    }
}

#[test]
fn causal_mask_matches_explicit_lower_triangle() {
    let mut rng = RngState::new(5);
    for n in [1, 2, 9, 40] {
        let kernel = random_kernel(&mut rng, n);
        let x = gaussian_matrix(&mut rng, n, 4);
        let got = toeplitz_matmul_naive(&causal_mask(&kernel), &x).unwrap();
        let mut want = Mat::zeros(n, 4);
        for i in 0..n {
            for j in 0..=i {
                let c = kernel.at(j as isize - i as isize);
                for col in 0..4 {
                    want.set(i, col, want.get(i, col) + c * x.get(j, col));
                }
            }
        }
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert_eq!(causal_mask(&causal_mask(&kernel)).offsets(), causal_mask(&kernel).offsets());
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn linear_in_right_factor(n in 1usize..200, cols in 1usize..5, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed: u64) {
        let mut rng = RngState::new(seed);
        let kernel = random_kernel(&mut rng, n);
        let x = gaussian_matrix(&mut rng, n, cols);
        let y = gaussian_matrix(&mut rng, n, cols);
        let combo = Mat::from_fn(n, cols, |i, j| alpha * x.get(i, j) + beta * y.get(i, j));
        let lhs = toeplitz_matmul(&kernel, &combo).unwrap();
        let tx = toeplitz_matmul(&kernel, &x).unwrap();
        let ty = toeplitz_matmul(&kernel, &y).unwrap();
        let rhs = Mat::from_fn(n, cols, |i, j| alpha * tx.get(i, j) + beta * ty.get(i, j));
        // relative to the size of the summands, since alpha x + beta y may cancel
        let scale = (alpha.abs() * tx.frobenius_norm() + beta.abs() * ty.frobenius_norm()).max(1e-300);
        let diff = Mat::from_fn(n, cols, |i, j| lhs.get(i, j) - rhs.get(i, j)).frobenius_norm();
        prop_assert!(diff / scale <= 1e-10);
    }
}
