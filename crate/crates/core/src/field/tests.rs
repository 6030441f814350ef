use super::*;
use crate::rng::{normal_tensor, stream, Domain};
use proptest::prelude::*;
use rand::Rng;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        width: 16,
        blocks: 2,
        fourier_features: 4,
        fourier_scale: 16.0,
    }
}

/// Small network with every tensor (head included) randomised.
fn random_net(dim: usize, seed: u64) -> FieldNetwork {
    let mut net = FieldNetwork::new(&small_config(), dim, seed).unwrap();
    let mut rng = stream(seed, Domain::Verify, 99);
    for (name, p) in net.param_names().into_iter().zip(net.params_mut()) {
        if name.starts_with("head") || p.shape().len() == 1 {
            let scale = 0.3;
            *p = normal_tensor(p.shape(), &mut rng).scale(scale);
        }
    }
    net
}

fn random_query(b: usize, d: usize, seed: u64) -> FieldQuery {
    let mut rng = stream(seed, Domain::Verify, 7);
    let x = normal_tensor(&[b, d], &mut rng);
    let y = normal_tensor(&[b, d], &mut rng);
    let mut r = Vec::new();
    let mut t = Vec::new();
    for _ in 0..b {
        let tt: f64 = rng.gen_range(0.05..0.95);
        t.push(tt);
        r.push(tt * rng.gen::<f64>());
    }
    FieldQuery::new(x, y, r, t).unwrap()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().norm_l2() / b.norm_l2().max(1e-300)
}

fn sample_affine() -> AnalyticField {
    AnalyticField::new(
        vec![0.8, -1.5, 0.0, 2.2],
        vec![0.3, -0.7, 1.0, 0.0],
        vec![-1.1, 0.4, 0.5, 2.0],
        vec![0.6, 0.0, -0.9, 1.3],
    )
    .unwrap()
}

/// RK4 on the augmented state `(x, ∫v)` from `t` down to `r`.
fn rk4_average(f: &AnalyticField, x: &[f64], r: f64, t: f64, steps: usize) -> Vec<f64> {
    let d = x.len();
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let v = |xx: f64, tau: f64| {
            let xt = Tensor::new(
                vec![1, d],
                (0..d).map(|j| if j == i { xx } else { 0.0 }).collect(),
            )
            .unwrap();
            f.velocity_rows(&xt, &[tau]).unwrap().data()[i]
        };
        let h = (r - t) / steps as f64;
        let (mut xs, mut acc, mut tau) = (x[i], 0.0, t);
        for _ in 0..steps {
            let k1 = v(xs, tau);
            let k2 = v(xs + 0.5 * h * k1, tau + 0.5 * h);
            let k3 = v(xs + 0.5 * h * k2, tau + 0.5 * h);
            let k4 = v(xs + h * k3, tau + h);
            let incr = h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            xs += incr;
            acc += incr;
            tau += h;
        }
        // acc = x_r − x_t, so u = (x_t − x_r)/(t − r).
        out.push(-acc / (t - r));
    }
    out
}

#[test]
fn query_validation() {
    let x = Tensor::zeros(&[2, 3]);
    assert!(FieldQuery::new(x.clone(), x.clone(), vec![0.2, 0.0], vec![0.1, 0.5]).is_err());
    assert!(FieldQuery::new(x.clone(), x.clone(), vec![0.0, 0.0], vec![0.5, 1.5]).is_err());
    assert!(FieldQuery::new(
        x.clone(),
        Tensor::zeros(&[2, 2]),
        vec![0.0; 2],
        vec![0.5; 2]
    )
    .is_err());
    assert!(FieldQuery::new(x.clone(), x.clone(), vec![0.0], vec![0.5]).is_err());
    let q = FieldQuery::new(x.clone(), x, vec![0.1, 0.5], vec![0.4, 0.5]).unwrap();
    assert_eq!(q.spans(), vec![0.4 - 0.1, 0.0]);
}

#[test]
fn zero_head_gives_zero_output() {
    let net = FieldNetwork::new(&small_config(), 6, 3).unwrap();
    let q = random_query(5, 6, 1);
    let u = net.forward(&q).unwrap();
    assert!(u.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let net = random_net(6, 4);
    let q = random_query(7, 6, 2);
    assert_eq!(net.forward(&q).unwrap(), net.forward(&q).unwrap());
    let again = FieldNetwork::new(&small_config(), 6, 4).unwrap();
    let fresh = FieldNetwork::new(&small_config(), 6, 4).unwrap();
    assert_eq!(again, fresh);
}

#[test]
fn batch_permutation_commutes() {
    let net = random_net(6, 5);
    let q = random_query(6, 6, 3);
    let perm = [3, 0, 5, 1, 4, 2];
    let u = net.forward(&q).unwrap();
    let up = net.forward(&q.gather(&perm)).unwrap();
    assert_eq!(up, u.gather_rows(&perm));
}

#[test]
fn zero_tangent_gives_zero_derivative() {
    let net = random_net(6, 6);
    let q = random_query(4, 6, 4);
    let (u, du) = net
        .forward_with_jvp(&q, &Tensor::zeros(&[4, 6]), 0.0)
        .unwrap();
    assert_eq!(u, net.forward(&q).unwrap());
    assert!(du.data().iter().all(|&v| v == 0.0));
}

#[test]
fn network_jvp_matches_finite_difference() {
    let net = random_net(6, 8);
    for seed in 0..10 {
        let q = random_query(3, 6, 100 + seed);
        let mut rng = stream(seed, Domain::Verify, 8);
        let dx = normal_tensor(&[3, 6], &mut rng);
        let (_, jv) = net.forward_with_jvp(&q, &dx, 1.0).unwrap();
        let fd3 = finite_difference_total_derivative(&net, &q, &dx, 1.0, 1e-3).unwrap();
        let fd4 = finite_difference_total_derivative(&net, &q, &dx, 1.0, 1e-4).unwrap();
        assert!(
            rel_err(&fd3, &jv) < 1e-3,
            "seed {seed}: {}",
            rel_err(&fd3, &jv)
        );
        assert!(
            rel_err(&fd4, &jv) < 1e-4,
            "seed {seed}: {}",
            rel_err(&fd4, &jv)
        );
    }
}

#[test]
fn finite_difference_exact_for_linear_field() {
    let field = LinearBasisField::new(&[0.5, -1.25, 2.0, 0.0, 0.0, 0.0, 0.75]);
    let q = random_query(5, 1, 9);
    let dx = Tensor::full(&[5, 1], 0.3);
    let (_, jv) = field.forward_with_jvp(&q, &dx, 1.0).unwrap();
    for h in [1e-1, 1e-2, 0.3] {
        let fd = finite_difference_total_derivative(&field, &q, &dx, 1.0, h).unwrap();
        assert!(rel_err(&fd, &jv) < 1e-12, "h={h}");
    }
    assert!(finite_difference_total_derivative(&field, &q, &dx, 1.0, 0.0).is_err());
}

#[test]
fn finite_difference_is_second_order() {
    let f = sample_affine();
    let q = FieldQuery::uniform(
        Tensor::from_rows(&[[0.4, -0.3, 1.2, 0.7]]).unwrap(),
        Tensor::zeros(&[1, 4]),
        0.2,
        0.8,
    )
    .unwrap();
    let dx = f.velocity_rows(&q.x, &q.t).unwrap();
    let (_, exact) = f.forward_with_jvp(&q, &dx, 1.0).unwrap();
    let err = |h: f64| {
        rel_err(
            &finite_difference_total_derivative(&f, &q, &dx, 1.0, h).unwrap(),
            &exact,
        )
    };
    let ratio = err(0.02) / err(0.01);
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn analytic_jvp_equals_closed_form_total_derivative() {
    let f = sample_affine();
    let q = random_query(6, 4, 10);
    let v = f.velocity_rows(&q.x, &q.t).unwrap();
    let (_, jv) = f.forward_with_jvp(&q, &v, 1.0).unwrap();
    let closed = f.total_derivative(&q).unwrap();
    for (a, b) in jv.data().iter().zip(closed.data()) {
        assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn analytic_special_cases() {
    let x = Tensor::from_rows(&[[0.3], [-2.0]]).unwrap();
    let y = Tensor::zeros(&[2, 1]);
    let constant = AnalyticField::new(vec![0.0], vec![1.7], vec![0.0], vec![0.0]).unwrap();
    let ramp = AnalyticField::new(vec![0.0], vec![0.0], vec![1.0], vec![0.0]).unwrap();
    for &(r, t) in &[(0.0, 1.0), (0.25, 0.5), (0.6, 0.6)] {
        let q = FieldQuery::uniform(x.clone(), y.clone(), r, t).unwrap();
        assert!(constant
            .forward(&q)
            .unwrap()
            .data()
            .iter()
            .all(|&u| u == 1.7));
        for &u in ramp.forward(&q).unwrap().data() {
            assert!((u - 0.5 * (t + r)).abs() < 1e-15);
        }
    }
}

#[test]
fn analytic_matches_quadrature_oracle() {
    let decay =
        AnalyticField::new(vec![1.3, -0.6], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]).unwrap();
    let full = AnalyticField::new(
        vec![1.3, -0.6],
        vec![0.2, -0.5],
        vec![1.0, 0.7],
        vec![-0.4, 0.9],
    )
    .unwrap();
    let x = [0.8, -1.4];
    for &(r, t) in &[(0.0, 1.0), (0.3, 0.7), (0.5, 0.95)] {
        let q = FieldQuery::uniform(
            Tensor::from_rows(&[x]).unwrap(),
            Tensor::zeros(&[1, 2]),
            r,
            t,
        )
        .unwrap();
        let d = t - r;
        let u = decay.forward(&q).unwrap();
        for i in 0..2 {
            let a = [1.3, -0.6][i];
            let closed = x[i] * (1.0 - (-a * d).exp()) / d;
            assert!((u.data()[i] - closed).abs() <= 1e-12 * closed.abs());
        }
        for f in [&decay, &full] {
            let u = f.forward(&q).unwrap();
            let oracle = rk4_average(f, &x, r, t, 10_000);
            for (a, b) in u.data().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn analytic_diagonal_is_instantaneous() {
    let f = sample_affine();
    let q = random_query(5, 4, 11);
    let diag = FieldQuery::new(q.x.clone(), q.y.clone(), q.t.clone(), q.t.clone()).unwrap();
    assert_eq!(
        f.forward(&diag).unwrap(),
        f.velocity_rows(&q.x, &q.t).unwrap()
    );
}

#[test]
fn analytic_identity_residual_on_grid() {
    let f = sample_affine();
    let mut worst: f64 = 0.0;
    for xi in 0..10 {
        for ri in 0..10 {
            for ti in 0..10 {
                let x = -2.0 + 4.0 * xi as f64 / 9.0;
                let (r, t) = (ri as f64 / 9.0, ti as f64 / 9.0);
                if r > t {
                    continue;
                }
                let q = FieldQuery::uniform(Tensor::full(&[1, 4], x), Tensor::zeros(&[1, 4]), r, t)
                    .unwrap();
                let v = f.velocity_rows(&q.x, &q.t).unwrap();
                let (u, du) = f.forward_with_jvp(&q, &v, 1.0).unwrap();
                for i in 0..4 {
                    let res = u.data()[i] - (v.data()[i] - (t - r) * du.data()[i]);
                    worst = worst.max(res.abs());
                }
            }
        }
    }
    assert!(worst < 1e-8, "residual {worst}");
}

#[test]
fn counting_field_counts_calls() {
    let f = CountingField::new(sample_affine());
    let q = random_query(2, 4, 12);
    f.forward(&q).unwrap();
    f.forward_with_jvp(&q, &q.x, 1.0).unwrap();
    InstantaneousField::velocity(&f, &q.x, &q.y, 0.5).unwrap();
    assert_eq!(f.calls(), 3);
    f.reset();
    assert_eq!(f.calls(), 0);
}

#[test]
fn time_reversal_negates_diagonal() {
    let f = sample_affine();
    let q = random_query(2, 4, 13);
    let v = TimeReversed(&f).velocity(&q.x, &q.y, 0.25).unwrap();
    let expect = f.velocity_rows(&q.x, &[0.75, 0.75]).unwrap().scale(-1.0);
    assert_eq!(v, expect);
}

#[test]
fn checkpoint_roundtrip() {
    let net = random_net(6, 14);
    let ema: Vec<Tensor> = net.params().iter().map(|p| p.scale(0.5)).collect();
    let ck = Checkpoint::from_network(&net, Some(&ema));
    let mut buf = Vec::new();
    ck.write_to(&mut buf, CheckpointDtype::F64).unwrap();
    assert_eq!(&buf[..4], CHECKPOINT_MAGIC);
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_network("param").unwrap(), net);
    assert_eq!(back.inference_network().unwrap().params(), &ema[..]);

    let mut buf32 = Vec::new();
    ck.write_to(&mut buf32, CheckpointDtype::F32).unwrap();
    let net32 = Checkpoint::read_from(&mut buf32.as_slice())
        .unwrap()
        .to_network("param")
        .unwrap();
    for (a, b) in net32.params().iter().zip(net.params()) {
        assert!(rel_err(a, b) < 1e-6 || b.norm_l2() == 0.0);
    }

    buf[0] = b'X';
    assert!(matches!(
        Checkpoint::read_from(&mut buf.as_slice()),
        Err(FieldError::Checkpoint(_))
    ));
}

#[test]
fn network_layout() {
    let net = FieldNetwork::new(&NetworkConfig::default(), 514, 0).unwrap();
    let names = net.param_names();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(net.freq_t().shape(), &[1, 32]);
    assert!(net.num_params() > 200_000);
    let mut other = net.clone();
    assert!(other.set_params(&net.params()[1..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn network_jvp_is_linear_in_tangent(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let net = random_net(4, 21);
        let q = random_query(2, 4, seed);
        let mut rng = stream(seed, Domain::Verify, 3);
        let d1 = normal_tensor(&[2, 4], &mut rng);
        let d2 = normal_tensor(&[2, 4], &mut rng);
        let (_, j1) = net.forward_with_jvp(&q, &d1, 0.7).unwrap();
        let (_, j2) = net.forward_with_jvp(&q, &d2, -0.3).unwrap();
        let mut comb = d1.scale(a);
        comb.axpy(b, &d2).unwrap();
        let (_, jc) = net.forward_with_jvp(&q, &comb, 0.7 * a - 0.3 * b).unwrap();
        let mut expect = j1.scale(a);
        expect.axpy(b, &j2).unwrap();
        for (x, y) in jc.data().iter().zip(expect.data()) {
            prop_assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn analytic_displacement_lands_on_trajectory(x in -3.0f64..3.0, r in 0.0f64..1.0, frac in 0.0f64..=1.0) {
        let f = sample_affine();
        let t = r + (1.0 - r) * frac;
        let q = FieldQuery::uniform(Tensor::full(&[1, 4], x), Tensor::zeros(&[1, 4]), r, t).unwrap();
        let u = f.forward(&q).unwrap();
        let mut landed = q.x.clone();
        landed.axpy(-(t - r), &u).unwrap();
        let truth = f.flow(&q.x, t, r).unwrap();
        for (a, b) in landed.data().iter().zip(truth.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
