use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::gradcheck::{gradcheck, gradcheck_scaled};
use scar_core::rng::{stream, Stream};
use scar_core::{concat_cols, concat_rows, Tape, Tensor};

fn rand_tensor(rng: &mut Stream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = stream(11, "kl-mc");
    let d = 8;
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sd: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let tape = Tape::new();
    let kl = tape
        .constant(&Tensor::vector(mu.clone()))
        .kl_diag_gaussian(tape.constant(&Tensor::vector(sd.clone())))
        .unwrap()
        .item();
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut lr = 0.0;
        for i in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu[i] + sd[i] * e;
            // log q(z) - log p(z); the 2π terms cancel
            lr += -0.5 * e * e - sd[i].ln() + 0.5 * z * z;
        }
        acc += lr;
    }
    let mc = acc / n as f64;
    assert!((mc - kl).abs() < 1e-2, "closed form {kl} vs MC {mc}");
}

#[test]
fn kl_gradcheck_100() {
    let mut rng = stream(12, "kl-gc");
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
        let err = gradcheck(
            |_, v| {
                let mu = v.slice_rows(0, 1);
                let sd = v.slice_rows(1, 2).exp();
                mu.kl_diag_gaussian(sd)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn grl_gradcheck_100() {
    let mut rng = stream(13, "grl-gc");
    for _ in 0..100 {
        let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let err = gradcheck_scaled(
            |t, v| v.grl(0.25).matmul(t.constant(&w)).tanh().softmax_cross_entropy(&[0, 1, 2]),
            &x,
            1e-3,
            -0.25,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn elementwise_and_structural_ops_gradcheck() {
    let mut rng = stream(14, "ops-gc");
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[3, 4], 0.2, 1.5);
        let w = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
        let eps: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cases: Vec<Box<dyn for<'t> Fn(&'t Tape, scar_core::Var<'t>) -> Result<scar_core::Var<'t>, scar_core::TensorError>>> = vec![
            Box::new(|_, v| Ok(v.ln().mul(v.exp()).sum())),
            Box::new(|_, v| Ok(v.gelu().relu().square().mean())),
            Box::new(|_, v| Ok(v.layer_norm().mul(v).sum())),
            Box::new(|_, v| Ok(v.softmax_rows().square().sum())),
            Box::new(|_, v| Ok(v.transpose().matmul(v).tanh().sum())),
            Box::new(|_, v| Ok(concat_cols(&[v, v.slice_cols(1, 3)]).square().sum())),
            Box::new(|_, v| Ok(concat_rows(&[v, v.gather_rows(&[Some(2), None])]).tanh().row_sum().square().sum())),
            Box::new(|t, v| Ok(v.matmul(t.constant(&w)).add_bias(v.slice_rows(0, 1).reshape(&[4])).mul_row(v.slice_rows(1, 2).reshape(&[4])).sum())),
            Box::new(|_, v| Ok(v.slice_rows(0, 1).reshape(&[4]).offset(2.0).sum().scale(3.0).neg())),
            Box::new(|_, v| v.reparam_sample(v.square(), &eps).map(|z| z.tanh().sum())),
            Box::new(|_, v| Ok(v.matmul(v.transpose()).logdet_spd()?.add(v.mean()))),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = gradcheck(f, &x, 1e-3).unwrap();
            assert!(err < 1e-4, "case {i}: {err}");
        }
    }
}

fn pool_margin(v: &[f64], h: usize, w: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for plane in v.chunks(h * w) {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let mut win = [
                    plane[2 * y * w + 2 * x],
                    plane[2 * y * w + 2 * x + 1],
                    plane[(2 * y + 1) * w + 2 * x],
                    plane[(2 * y + 1) * w + 2 * x + 1],
                ];
                win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                margin = margin.min(win[0] - win[1]);
            }
        }
    }
    margin
}

#[test]
fn conv_pool_gradcheck() {
    let mut rng = stream(15, "conv-gc");
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    let mut checked = 0;
    while checked < 5 {
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4], -1.0, 1.0);
        // max pooling is only differentiable away from ties; skip near-ties
        let t = Tape::new();
        let pre = t.constant(&x).conv2d(t.constant(&w), t.constant(&b)).tanh().value();
        if pool_margin(&pre, 4, 4) < 1e-2 {
            continue;
        }
        checked += 1;
        let err = gradcheck(
            |t, v| {
                let y = v.conv2d(t.constant(&w), t.constant(&b)).tanh().max_pool2().global_avg_pool();
                y.softmax_cross_entropy(&[0, 2])
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4], -1.0, 1.0);
    let err = gradcheck(
        |t, v| Ok(t.constant(&x).conv2d(v, t.constant(&b)).square().mean()),
        &w,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #[test]
    fn kl_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..10), s in prop::collection::vec(0.05f64..4.0, 10)) {
        let sd = &s[..mu.len()];
        let t = Tape::new();
        let kl = t.constant(&Tensor::vector(mu.clone())).kl_diag_gaussian(t.constant(&Tensor::vector(sd.to_vec()))).unwrap().item();
        prop_assert!(kl >= 0.0);
        let at_prior = mu.iter().all(|m| *m == 0.0) && sd.iter().all(|v| *v == 1.0);
        prop_assert_eq!(kl == 0.0, at_prior);
    }

    #[test]
    fn grl_backward_is_exactly_scaled(x in prop::collection::vec(-3.0f64..3.0, 1..8), alpha in 0.0f64..2.0) {
        let g = |rev: bool| {
            let t = Tape::new();
            let v = t.leaf(&Tensor::vector(x.clone()));
            let h = if rev { v.grl(alpha) } else { v };
            let loss = h.tanh().square().sum();
            t.backward(loss).get(v).unwrap().to_vec()
        };
        let (plain, rev) = (g(false), g(true));
        for (p, r) in plain.iter().zip(&rev) {
            prop_assert_eq!(*r, -alpha * p);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var(row in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let n = row.len();
        let t = Tape::new();
        let y = t.constant(&Tensor::matrix(1, n, row.clone()).unwrap()).layer_norm().value();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }
}
