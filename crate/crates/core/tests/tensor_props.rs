use moeroute::tensor::ops;
use moeroute::Tensor;
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-range..range, r * c)
            .prop_map(move |data| Tensor::matrix(r, c, data).unwrap())
    })
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 9, 800.0)) {
        let p = ops::softmax_rows(&x).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9, "row {} sums to {}", r, s);
            prop_assert!(p.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(4, 6, 20.0), shift in -50.0f64..50.0) {
        let a = ops::softmax_rows(&x).unwrap();
        let b = ops::softmax_rows(&ops::add_scalar(&x, shift)).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop(
        (m, k, n) in (1usize..7, 1usize..7, 1usize..7),
        seed in any::<u64>(),
    ) {
        let mut rng = moeroute::SeededRng::new(seed);
        let a = rng.normal_tensor(&[m, k], 1.0);
        let b = rng.normal_tensor(&[k, n], 1.0);
        let fast = a.matmul(&b).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        let bt = b.transpose().unwrap();
        let nt = ops::matmul_nt(&a, &bt).unwrap();
        prop_assert!(nt.max_abs_diff(&fast) <= 1e-12);
    }

    #[test]
    fn layer_norm_rows_standardize(x in matrix(5, 8, 10.0)) {
        prop_assume!(x.cols() >= 2);
        let c = x.cols();
        let gain = Tensor::full(&[c], 1.0);
        let bias = Tensor::zeros(&[c]);
        let (y, _) = ops::layer_norm_rows(&x, &gain, &bias).unwrap();
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let out = y.row(r);
            let out_mean = out.iter().sum::<f64>() / c as f64;
            let out_var = out.iter().map(|v| v * v).sum::<f64>() / c as f64;
            prop_assert!(out_mean.abs() <= 1e-9);
            let expected = var / (var + ops::LN_EPS);
            prop_assert!((out_var - expected).abs() <= 1e-9, "{} vs {}", out_var, expected);
        }
    }

    #[test]
    fn transpose_is_an_involution(x in matrix(6, 6, 5.0)) {
        let back = x.transpose().unwrap().transpose().unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn blocked_attention_matches_composed_ops(
        lq in 1usize..150,
        lk in 1usize..90,
        heads in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = moeroute::SeededRng::new(seed);
        let dh = 3;
        let q = rng.normal_tensor(&[lq, heads * dh], 1.0);
        let k = rng.normal_tensor(&[lk, heads * dh], 1.0);
        let v = rng.normal_tensor(&[lk, heads * dh], 1.0);
        let got = ops::attention(&q, &k, &v, heads, dh, 0.5).unwrap();
        let mut parts = Vec::new();
        for h in 0..heads {
            let s = ops::scale(&ops::matmul_nt(&ops::slice_cols(&q, h * dh, dh).unwrap(), &ops::slice_cols(&k, h * dh, dh).unwrap()).unwrap(), 0.5);
            parts.push(ops::matmul(&ops::softmax_rows(&s).unwrap(), &ops::slice_cols(&v, h * dh, dh).unwrap()).unwrap());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        prop_assert!(got.max_abs_diff(&ops::concat_cols(&refs).unwrap()) <= 1e-12);
    }
}
