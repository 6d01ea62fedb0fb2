use diva_core::gradcheck::finite_diff_check;
use diva_core::gradsuite::{self, OP_TOLERANCE};
use diva_core::rng::{sample_gaussian, RngStream};
use diva_core::{DivaError, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_central_differences(seed in any::<u64>()) {
        let entries = gradsuite::op_checks(&mut RngStream::new(seed, 0)).unwrap();
        for e in entries {
            prop_assert!(e.passes(), "{} at seed {seed}: {:?}", e.name, e.report);
        }
    }

    #[test]
    fn attention_style_composite(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 1);
        let q = sample_gaussian(&[3, 4], &mut rng);
        let k = sample_gaussian(&[5, 4], &mut rng);
        let v = sample_gaussian(&[5, 2], &mut rng);
        let r = finite_diff_check(
            |t, x| {
                let kk = t.constant(k.clone());
                let vv = t.constant(v.clone());
                let s = t.matmul_t(x, kk, false, true)?;
                let s = t.scale(s, 0.5)?;
                let p = t.softmax(s, 1)?;
                let o = t.matmul(p, vv)?;
                let o = t.gelu(o)?;
                t.mean(o)
            },
            &q,
            1e-5,
        )
        .unwrap();
        prop_assert!(r.passes(OP_TOLERANCE), "{r:?}");
    }
}

#[test]
fn matmul_is_associative() {
    let mut rng = RngStream::new(3, 0);
    let a = sample_gaussian(&[8, 8], &mut rng);
    let b = sample_gaussian(&[8, 8], &mut rng);
    let c = sample_gaussian(&[8, 8], &mut rng);
    let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
    let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
    assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
}

#[test]
fn matmul_matches_naive_triple_loop() {
    let mut rng = RngStream::new(4, 0);
    let a = sample_gaussian(&[5, 7], &mut rng);
    let b = sample_gaussian(&[7, 3], &mut rng);
    let c = a.matmul(&b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7)
                .map(|k| a.data()[i * 7 + k] * b.data()[k * 3 + j])
                .sum();
            assert!((c.data()[i * 3 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_of_reused_variable_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap().with_grad(true));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0]);
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).with_grad(true));
    assert!(matches!(tape.backward(x), Err(DivaError::NonScalarLoss(_))));
    let c = tape.constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(c), Err(DivaError::DetachedLoss)));
    let mut other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0).with_grad(true));
    assert!(tape.backward(y).is_err());
    let m = tape.leaf(Tensor::zeros(&[2, 3]));
    let n = tape.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.matmul(m, n),
        Err(DivaError::ShapeMismatch { .. })
    ));
}
