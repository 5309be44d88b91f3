use proptest::collection::vec;
use proptest::prelude::*;

use deltamem::numerics::{l2norm_eps, Tensor};
use deltamem::osam::{delta_write, row_write, OnlineState};

const EPS: f64 = 1e-6;

fn state(r: usize) -> impl Strategy<Value = Tensor<f64>> {
    vec(-2.0f64..2.0, r * r).prop_map(move |d| Tensor::matrix(r, r, d).unwrap())
}

fn unit(v: &[f64]) -> Vec<f64> {
    l2norm_eps(v, EPS)
}

/// `(S, k, v, beta)` for a random rank in 1..=8.
fn instance() -> impl Strategy<Value = (Tensor<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|r| (state(r), vec(-1.0f64..1.0, r), vec(-1.0f64..1.0, r), vec(0.0f64..=1.0, r)))
}

proptest! {
    #[test]
    fn l2norm_is_unit_away_from_zero(x in vec(-10.0f64..10.0, 1..32)) {
        let y = l2norm_eps(&x, EPS);
        let pre = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let post = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(post <= 1.0);
        if pre >= 1e-2 {
            prop_assert!(post >= 0.999);
        }
    }

    #[test]
    fn rows_stack_to_the_matrix_write((s, k, v, beta) in instance()) {
        let k = unit(&k);
        let full = delta_write(&s, &k, &v, &beta).unwrap();
        let r = k.len();
        for i in 0..r {
            let row = row_write(&s.data()[i * r..(i + 1) * r], i, &k, &v, &beta).unwrap();
            prop_assert_eq!(&row[..], &full.data()[i * r..(i + 1) * r]);
        }
    }

    #[test]
    fn consistent_pairs_only_decay((s, k, _v, beta) in instance()) {
        let k = unit(&k);
        let r = k.len();
        let v: Vec<f64> = (0..r).map(|i| (0..r).map(|j| s.data()[i * r + j] * k[j]).sum()).collect();
        let out = delta_write(&s, &k, &v, &beta).unwrap();
        let vk = v.iter().map(|x| x * x).sum::<f64>().sqrt() * k.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut diff = 0.0;
        for i in 0..r {
            for j in 0..r {
                let d = out.data()[i * r + j] - (1.0 - beta[i]) * s.data()[i * r + j];
                diff += d * d;
            }
        }
        prop_assert!(diff.sqrt() <= 1e-6 * vk.max(1e-12) + 1e-12, "residual {} vs |v k^T| {}", diff.sqrt(), vk);
    }

    #[test]
    fn closed_gate_keeps_the_state((s, k, v, _beta) in instance()) {
        let k = unit(&k);
        let zero = vec![0.0; k.len()];
        let out = delta_write(&s, &k, &v, &zero).unwrap();
        prop_assert_eq!(out.data(), s.data());
    }

    #[test]
    fn bounded_writes_stay_bounded(
        r in 1usize..=8,
        writes in vec((vec(-1.0f64..1.0, 8), vec(-3.0f64..3.0, 8), vec(0.0f64..=2.0 / 3.0, 8)), 1..200),
    ) {
        let mut st = OnlineState::<f64>::zeros(r, 1);
        let mut vmax = vec![0.0f64; r];
        for (k, v, b) in &writes {
            let k = unit(&k[..r]);
            st.write(0, &k, &v[..r], &b[..r]).unwrap();
            for i in 0..r {
                vmax[i] = vmax[i].max(v[i].abs());
            }
            let bound = vmax.iter().map(|m| m * m).sum::<f64>().sqrt();
            prop_assert!(st.sub_state(0).frobenius_norm() <= bound * (1.0 + 1e-9));
        }
        prop_assert!(st.is_finite());
    }
}
