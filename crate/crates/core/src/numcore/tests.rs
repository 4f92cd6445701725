use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_grad_ok(report: gradcheck::GradReport) {
    assert!(report.passed(), "gradient mismatches: {:?}", report.mismatches);
    assert!(report.coordinates > 0);
}

#[test]
fn matmul_identity_and_scalar() {
    let eye = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
    let col = Tensor::new(vec![2, 1], vec![3.0f32, 4.0]).unwrap();
    assert_eq!(matmul(&eye, &col).unwrap().data(), &[3.0, 4.0]);
    let a = Tensor::new(vec![1, 1], vec![2.0f32]).unwrap();
    let b = Tensor::new(vec![1, 1], vec![3.0f32]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut expected = [0.0f32; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
            }
        }
    }
    let out = matmul(
        &Tensor::new(vec![3, 4], a).unwrap(),
        &Tensor::new(vec![4, 2], b).unwrap(),
    )
    .unwrap();
    for (o, e) in out.data().iter().zip(expected) {
        assert!((o - e).abs() <= 1e-6);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[2, 3]);
    let err = matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    assert!(tape.matmul(va, vb).is_err());
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_t(&[0.0f32, 0.0], 1.0).unwrap(), vec![0.5, 0.5]);
    for c in [-7.5f32, 0.0, 123.0] {
        for t in [0.3f32, 1.0, 9.0] {
            let s = softmax_t(&[c, c, c], t).unwrap();
            for v in s {
                assert!((v - 1.0 / 3.0).abs() < 1e-7);
            }
        }
    }
    let got = softmax_t(&[1.0f32, 2.0, 3.0], 2.0).unwrap();
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|z| (z / 2.0).exp()).collect();
    let total: f64 = e.iter().sum();
    for (g, x) in got.iter().zip(&e) {
        assert!((*g as f64 - x / total).abs() <= 1e-6);
    }
    assert!(softmax_t(&[1.0f32], 0.0).is_err());
    assert!(softmax_t(&[1.0f32], -1.0).is_err());
}

#[test]
fn kl_examples() {
    assert_eq!(kl_divergence(&[0.5f64, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
    let v = kl_divergence(&[1.0f64, 0.0], &[0.5, 0.5]).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(kl_divergence(&[1.0f64], &[0.5, 0.5]).is_err());
    // q = 0 where p > 0 stays finite thanks to the floor
    assert!(kl_divergence(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap().is_finite());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new(vec![2, 3], vec![0.3; 6]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_squared_norm() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::vector(vec![100.0]).unwrap());
    assert!(matches!(tape.exp(x), Err(Error::NonFinite("exp"))));
}

#[test]
fn gradient_accumulation_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let build = |tape: &mut Tape<f32>, x: Var, which: u8| -> Var {
        match which {
            0 => {
                let s = tape.square(x).unwrap();
                tape.sum(s).unwrap()
            }
            _ => {
                let t = tape.tanh(x).unwrap();
                let e = tape.exp(t).unwrap();
                tape.mean(e).unwrap()
            }
        }
    };

    let mut joint = Tape::new();
    let x = joint.param(Tensor::new(vec![2, 3], x0.clone()).unwrap());
    let l1 = build(&mut joint, x, 0);
    let l2 = build(&mut joint, x, 1);
    let total = joint.add(l1, l2).unwrap();
    joint.backward(total).unwrap();

    let mut split = Tape::new();
    let y = split.param(Tensor::new(vec![2, 3], x0).unwrap());
    let m2 = build(&mut split, y, 1);
    let m1 = build(&mut split, y, 0);
    split.backward(m2).unwrap();
    split.backward(m1).unwrap();

    for (a, b) in joint.grad(x).unwrap().iter().zip(split.grad(y).unwrap()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn gradcheck_matmul_both_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let bt = rand_tensor(&mut rng, &[2, 4]);
    assert_grad_ok(
        gradcheck::check(&[a.clone(), b], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.square(m)?;
            t.sum(s)
        })
        .unwrap(),
    );
    assert_grad_ok(
        gradcheck::check(&[a, bt], |t, v| {
            let m = t.matmul_ex(v[0], v[1], true)?;
            let s = t.tanh(m)?;
            t.sum(s)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let y = rand_tensor(&mut rng, &[2, 3]);
    let bias = rand_tensor(&mut rng, &[3]);
    let mask: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.5 } else { 0.0 }).collect();
    assert_grad_ok(
        gradcheck::check(&[x, y, bias], |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.add_bias(c, v[2])?;
            let e = t.sigmoid(d)?;
            let f = t.exp(e)?;
            let g = t.mul_const(f, mask.clone())?;
            let h = t.scale(g, -0.7)?;
            let rs = t.row_sum(h)?;
            let sq = t.square(rs)?;
            t.sum(sq)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let y = rand_tensor(&mut rng, &[4, 2]);
    let r = rand_tensor(&mut rng, &[5]);
    assert_grad_ok(
        gradcheck::check(&[x, y, r], |t, v| {
            let c = t.concat_cols(v[0], v[1])?;
            let s = t.slice_rows(c, 1, 2)?;
            let sc = t.slice_cols(c, 2, 3)?;
            let g = t.gather_rows(sc, &[3, 0, 3])?;
            let m = t.mean_rows(c, &[0, 2, 3])?;
            let st = t.stack_rows(&[m, v[2]])?;
            let p = t.pick(g, &[0, 2, 1])?;
            let a = t.square(s)?;
            let a = t.sum(a)?;
            let b = t.tanh(st)?;
            let b = t.sum(b)?;
            let c2 = t.exp(p)?;
            let c2 = t.sum(c2)?;
            let ab = t.add(a, b)?;
            t.add(ab, c2)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    assert_grad_ok(
        gradcheck::check(&[x.clone(), w.clone()], |t, v| {
            let ls = t.log_softmax(v[0], 1.7)?;
            let m = t.mul(ls, v[1])?;
            t.sum(m)
        })
        .unwrap(),
    );
    assert_grad_ok(
        gradcheck::check(&[x, w], |t, v| {
            let s = t.softmax(v[0], 0.6)?;
            let m = t.mul(s, v[1])?;
            t.sum(m)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_pairwise_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[4, 5]);
    assert_grad_ok(
        gradcheck::check(&[x], |t, v| {
            let d = t.pairwise_dist(v[0])?;
            let n = t.scale(d, -1.0)?;
            let e = t.exp(n)?;
            t.sum(e)
        })
        .unwrap(),
    );
}

#[test]
fn gradcheck_gru_sequence_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (steps, batch, hidden) = (3, 2, 2);
    let gx = rand_tensor(&mut rng, &[steps * batch, 3 * hidden]);
    let u = rand_tensor(&mut rng, &[hidden, 3 * hidden]);
    let w = rand_tensor(&mut rng, &[batch, hidden]);
    for reverse in [false, true] {
        assert_grad_ok(
            gradcheck::check(&[gx.clone(), u.clone(), w.clone()], |t, v| {
                let h = t.gru_sequence(v[0], v[1], batch, reverse)?;
                let m = t.mul(h, v[2])?;
                t.sum(m)
            })
            .unwrap(),
        );
    }
}

#[test]
fn gru_single_step_matches_hand_evaluation() {
    // 2-unit cell, one timestep, zero initial state plus a second step
    let gx = vec![0.1, -0.2, 0.3, 0.05, 0.4, -0.6, -0.3, 0.2, 0.1, 0.0, -0.4, 0.5];
    let u = vec![
        0.2, -0.1, 0.05, 0.3, -0.2, 0.1, //
        -0.3, 0.25, 0.1, -0.05, 0.4, 0.2,
    ];
    let mut tape = Tape::<f64>::new();
    let gxv = tape.constant(Tensor::new(vec![2, 6], gx.clone()).unwrap());
    let uv = tape.constant(Tensor::new(vec![2, 6], u.clone()).unwrap());
    let out = tape.gru_sequence(gxv, uv, 1, false).unwrap();

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let step = |h: [f64; 2], g: &[f64]| -> [f64; 2] {
        let mut gh = [0.0; 6];
        for (c, v) in gh.iter_mut().enumerate() {
            *v = h[0] * u[c] + h[1] * u[6 + c];
        }
        let mut next = [0.0; 2];
        for j in 0..2 {
            let z = sig(g[j] + gh[j]);
            let r = sig(g[2 + j] + gh[2 + j]);
            let n = (g[4 + j] + r * gh[4 + j]).tanh();
            next[j] = (1.0 - z) * n + z * h[j];
        }
        next
    };
    let h1 = step([0.0, 0.0], &gx[0..6]);
    let h2 = step(h1, &gx[6..12]);
    let got = tape.value(out).data();
    assert!((got[0] - h2[0]).abs() < 1e-12 && (got[1] - h2[1]).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let gxv = tape.constant(Tensor::new(vec![1, 6], gx[0..6].to_vec()).unwrap());
    let uv = tape.constant(Tensor::new(vec![2, 6], u.clone()).unwrap());
    let out = tape.gru_sequence(gxv, uv, 1, false).unwrap();
    let got = tape.value(out).data();
    assert!((got[0] - h1[0]).abs() < 1e-12 && (got[1] - h1[1]).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(
        z in prop::collection::vec(-1e4f32..1e4f32, 1..16),
        t in 0.05f32..20.0,
    ) {
        let s = softmax_t(&z, t).unwrap();
        let total: f64 = s.iter().map(|v| *v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(s.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn kl_is_nonnegative(
        a in prop::collection::vec(0.0f64..1.0, 2..8),
        b in prop::collection::vec(0.01f64..1.0, 2..8),
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let sa: f64 = a.iter().sum::<f64>() + 1e-9;
        let sb: f64 = b.iter().sum();
        let p: Vec<f64> = a.iter().map(|v| (v + 1e-9 / n as f64) / sa).collect();
        let q: Vec<f64> = b.iter().map(|v| v / sb).collect();
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
    }
}

#[test]
fn gradcheck_anchored_quadratic_prefix() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 2]);
    let anchor: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weight: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..2.0)).collect();
    assert_grad_ok(
        gradcheck::check(&[x.clone()], |t, v| t.anchored_quadratic(v[0], anchor.clone(), weight.clone())).unwrap(),
    );
    // elements past the anchor carry no gradient
    let mut tape = Tape::<f64>::new();
    let xv = tape.param(x);
    let l = tape.anchored_quadratic(xv, anchor, weight).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(&tape.grad(xv).unwrap()[4..], &[0.0, 0.0]);
}
