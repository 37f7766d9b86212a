use proptest::prelude::*;
use sdd_tta::pretrain::downsample_mask;
use sdd_tta::tensor::{Tape, Tensor, PROB_EPS};
use sdd_tta::tta::{loss_class, loss_seg, total_loss, LossSchedule, SegLoss};

fn kl_loop(p: &[f64], x: &[f64], full: bool) -> f64 {
    let c = |v: f64| v.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut s = 0.0;
    for (&pi, &xi) in p.iter().zip(x) {
        let (pi, xi) = (c(pi), c(xi));
        s += xi * xi.ln() - xi * pi.ln();
        if full {
            s += (1.0 - xi) * (1.0 - xi).ln() - (1.0 - xi) * (1.0 - pi).ln();
        }
    }
    s / p.len() as f64
}

fn map(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![1, n], v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn seg_divergence_is_nonnegative_and_zero_on_equal_maps(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64)
    ) {
        let (p, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (pt, xt) = (map(p.clone()), map(x.clone()));
        let l = loss_seg(&pt, &xt, SegLoss::BernoulliKl).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(loss_seg(&xt, &xt, SegLoss::BernoulliKl).unwrap() <= 1e-9);
        prop_assert!((l - kl_loop(&p, &x, true)).abs() <= 1e-9 * (1.0 + l));
        let one = loss_seg(&pt, &xt, SegLoss::OneSided).unwrap();
        prop_assert!((one - kl_loop(&p, &x, false)).abs() <= 1e-9 * (1.0 + one.abs()));
    }

    #[test]
    fn tape_losses_match_scalar_forms(
        pairs in prop::collection::vec((0.01f64..0.99, 0.0f64..=1.0), 1..16)
    ) {
        let (p, x): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut t = Tape::<f64>::new();
        let pn = t.constant(map(p.clone()));
        let kl = t.bernoulli_kl(pn, map(x.clone()), true).unwrap();
        let bce = t.bce(pn, map(x.clone())).unwrap();
        prop_assert!((t.value(kl).data()[0] - kl_loop(&p, &x, true)).abs() < 1e-12);
        let want: f64 = p.iter().zip(&x).map(|(&q, &y)| loss_class(q, y)).sum::<f64>() / p.len() as f64;
        prop_assert!((t.value(bce).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn lambda_is_linear_then_floored(n in 1usize..500, floor in 0.0f64..0.5) {
        let at = |t| LossSchedule { t, n, lambda_min: floor }.lambda_class();
        prop_assert_eq!(at(0), 1.0);
        prop_assert_eq!(at(n), floor);
        prop_assert_eq!(at(n + 7), floor);
        for t in 0..n {
            prop_assert!(at(t + 1) <= at(t));
        }
    }
}

#[test]
fn lambda_endpoints_and_strict_decrease() {
    let at = |t| {
        LossSchedule {
            t,
            n: 300,
            lambda_min: 0.0,
        }
        .lambda_class()
    };
    assert_eq!(at(0), 1.0);
    assert_eq!(at(300), 0.0);
    for t in 0..300 {
        assert!(at(t + 1) < at(t));
        assert_eq!(at(t), 1.0 - t as f64 / 300.0);
    }
    let s = LossSchedule {
        t: 150,
        n: 300,
        lambda_min: 0.0,
    };
    assert_eq!(total_loss(1.0, 3.0, &s), 2.0);
}

#[test]
fn class_loss_minimised_at_target() {
    for &x in &[0.1, 0.5, 0.8] {
        let at = loss_class(x, x);
        for &q in &[0.05, 0.3, 0.6, 0.95] {
            assert!(loss_class(q, x) >= at - 1e-15);
        }
    }
}

proptest! {
    #[test]
    fn downsample_is_block_max(bits in prop::collection::vec(any::<bool>(), 16 * 24)) {
        let mask = Tensor::from_fn(&[16, 24], |i| if bits[i] { 1.0f32 } else { 0.0 });
        let d = downsample_mask(&mask).unwrap();
        prop_assert_eq!(d.shape(), [2, 3]);
        for by in 0..2 {
            for bx in 0..3 {
                let mut any = false;
                for y in 0..8 {
                    for x in 0..8 {
                        any |= bits[(by * 8 + y) * 24 + bx * 8 + x];
                    }
                }
                prop_assert_eq!(d.data()[by * 3 + bx], if any { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn downsample_rejects_ragged_sizes() {
    assert!(downsample_mask(&Tensor::zeros(&[12, 16])).is_err());
}
