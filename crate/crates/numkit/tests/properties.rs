use numkit::{cosine_alignment_loss, lr_at, poisson_nll, Schedule, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::from_f64([rows, cols], &v).unwrap())
}

proptest! {
    #[test]
    fn cosine_loss_bounded(s in matrix(4, 6), t in matrix(4, 6)) {
        let l = cosine_alignment_loss(&s, &t).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn cosine_loss_positive_rescale_invariant(
        s in matrix(3, 5),
        t in matrix(3, 5),
        scales in prop::collection::vec(0.1f64..10.0, 3),
    ) {
        let mut scaled = s.clone();
        for r in 0..3 {
            for c in 0..5 {
                scaled.data_mut()[r * 5 + c] *= scales[r];
            }
        }
        let a = cosine_alignment_loss(&s, &t).unwrap();
        let b = cosine_alignment_loss(&scaled, &t).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn poisson_nll_minimum_at_log_count(k in 1u32..20, eta in -5.0f64..5.0) {
        let one = Tensor::<f64>::from_f64([1], &[1.0]).unwrap();
        let kk = Tensor::from_f64([1], &[k as f64]).unwrap();
        let at = poisson_nll(&Tensor::from_f64([1], &[(k as f64).ln()]).unwrap(), &kk, &one).unwrap();
        let off = poisson_nll(&Tensor::from_f64([1], &[eta]).unwrap(), &kk, &one).unwrap();
        prop_assert!(off >= at - 1e-12);
    }

    #[test]
    fn learning_rate_continuous_at_warmup_end(warm in 1u32..200, start in 0.01f64..1.0, max_lr in 1e-5f64..1e-1) {
        let s = Schedule { warmup_epochs: warm, warmup_start_factor: start, max_lr, ..Schedule::default() };
        let ramp_limit = max_lr * (start + (1.0 - start) * warm as f64 / warm as f64);
        prop_assert!((ramp_limit - lr_at(warm, &s)).abs() < 1e-15);
    }
}
