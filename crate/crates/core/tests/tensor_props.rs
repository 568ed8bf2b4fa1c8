use nka_core::fft::{fft, ComplexBuf};
use nka_core::rng::{gaussian_matrix, RngState};
use nka_core::tensor::{l2_norm, matmul, numerical_rank, row_l2_normalize, Mat, RANK_TOL_SCALE};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, seed: u64) -> Mat {
    gaussian_matrix(&mut RngState::new(seed), rows, cols)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn matmul_is_associative(a in 1usize..12, b in 1usize..12, c in 1usize..12, e in 1usize..12, seed: u64) {
        let x = mat(a, b, seed);
        let y = mat(b, c, seed.wrapping_add(1));
        let z = mat(c, e, seed.wrapping_add(2));
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        prop_assert!(left.rel_frobenius_err(&right) < 1e-9);
    }

    #[test]
    fn normalized_rows_are_unit_or_zero(rows in 1usize..10, cols in 1usize..10, scale in -6i32..6, seed: u64) {
        let mut m = mat(rows, cols, seed).scaled(10f64.powi(scale));
        // one all-zero row
        m.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
        let guard = 1e-12;
        let out = row_l2_normalize(&m, guard).unwrap();
        for i in 0..rows {
            let norm = l2_norm(out.row(i));
            if l2_norm(m.row(i)) >= guard {
                prop_assert!((norm - 1.0).abs() <= 1e-12, "row {i} norm {norm}");
            } else {
                prop_assert_eq!(norm, 0.0);
            }
        }
    }

    #[test]
    fn rank_of_product_is_bounded(r in 1usize..9, inner in 1usize..9, c in 1usize..9, seed: u64) {
        let a = mat(r, inner, seed);
        let b = mat(inner, c, seed.wrapping_add(7));
        let ab = matmul(&a, &b).unwrap();
        let ra = numerical_rank(&a, RANK_TOL_SCALE).unwrap();
        let rb = numerical_rank(&b, RANK_TOL_SCALE).unwrap();
        prop_assert!(numerical_rank(&ab, RANK_TOL_SCALE).unwrap() <= ra.min(rb));
    }

    #[test]
    fn gaussian_stream_is_reproducible(r in 1usize..20, c in 1usize..20, seed: u64) {
        let a = mat(r, c, seed);
        let b = mat(r, c, seed);
        let bytes = |m: &Mat| m.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        prop_assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn fft_round_trip(log_len in 0u32..13, seed: u64) {
        let len = 1usize << log_len;
        let data = RngState::new(seed).gaussian_vec(2 * len);
        let buf = ComplexBuf::from_interleaved(data.clone()).unwrap();
        let back = fft(&fft(&buf, false).unwrap(), true).unwrap();
        let peak = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = back.interleaved().iter().zip(&data).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        prop_assert!(err <= 1e-12 * peak);
    }
}
