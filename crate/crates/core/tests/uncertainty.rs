mod common;

use common::{random, scaled_grad_check};
use proptest::prelude::*;
use uhr_core::tensor::{Tape, Tensor};
use uhr_core::uncertainty::{
    entropy_uncertainty, entropy_value, resize_to_scale, scale_uncertainty, to_gray8, uncertainty_map, ProbMap,
    DEFAULT_EPS,
};

fn entropy_eager(values: &[f64]) -> Vec<f64> {
    let mut t = Tape::new();
    let m = t.constant(Tensor::new([1, 1, values.len()], values.to_vec()).unwrap()).unwrap();
    let u = entropy_uncertainty(&mut t, m, DEFAULT_EPS).unwrap();
    t.value(u).to_vec()
}

/// Binary entropy in bits without the epsilon guard.
fn bits(m: f64) -> f64 {
    -(m * m.log2() + (1.0 - m) * (1.0 - m).log2())
}

#[test]
fn entropy_examples() {
    let u = entropy_eager(&[0.5, 0.0, 1.0, 0.9]);
    assert!((u[0] - 1.0).abs() <= 1e-6);
    assert!(u[1] <= 1e-7 && u[2] <= 1e-7);
    assert!((u[3] - 0.46900).abs() < 5e-6);
    assert!((u[3] - bits(0.9)).abs() < 1e-7);
}

#[test]
fn tape_and_eager_entropy_agree() {
    let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let tape = entropy_eager(&xs);
    for (x, u) in xs.iter().zip(tape) {
        assert!((u - entropy_value(*x, DEFAULT_EPS)).abs() <= 1e-15);
    }
}

#[test]
fn entropy_rises_toward_one_half() {
    let xs: Vec<f64> = (0..=100).map(|i| 0.5 * i as f64 / 100.0).collect();
    let u = entropy_eager(&xs);
    assert!(u.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn entropy_gradient_away_from_the_clamp() {
    for seed in 0..10 {
        let x = random(&[1, 3, 3], 0.05, 0.95, seed);
        let err = scaled_grad_check(
            |t, v| {
                let u = entropy_uncertainty(t, v, DEFAULT_EPS)?;
                let w = t.constant(random(&[1, 3, 3], -1.0, 1.0, seed + 40))?;
                let p = t.mul(u, w)?;
                t.sum(p)
            },
            &x,
            1e-6,
        );
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn resize_examples() {
    let mut t = Tape::new();
    let m = random(&[1, 5, 7], 0.0, 1.0, 1);
    let mv = t.constant(m.clone()).unwrap();
    let same = resize_to_scale(&mut t, mv, 5, 7).unwrap();
    assert_eq!(t.value(same).data(), m.data());
    let c = t.constant(Tensor::full([1, 8, 8], 0.3)).unwrap();
    let small = resize_to_scale(&mut t, c, 2, 2).unwrap();
    assert!(t.value(small).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    let checker = t.constant(Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let one = resize_to_scale(&mut t, checker, 1, 1).unwrap();
    assert_eq!(t.value(one).item(), 0.5);
}

#[test]
fn resize_then_entropy_differs_from_entropy_then_resize() {
    let mut t = Tape::new();
    let checker = t.constant(Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
    let (m, u) = scale_uncertainty(&mut t, checker, 1, 1, DEFAULT_EPS, false).unwrap();
    assert_eq!(t.value(m).item(), 0.5);
    assert!((t.value(u).item() - 1.0).abs() < 1e-6);
    let e = entropy_uncertainty(&mut t, checker, DEFAULT_EPS).unwrap();
    let other = resize_to_scale(&mut t, e, 1, 1).unwrap();
    assert!(t.value(other).item() < 1e-6);
}

#[test]
fn detached_uncertainty_blocks_its_gradient() {
    let mut grads = Vec::new();
    for detach in [false, true] {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::full([1, 2, 2], 0.3), true).unwrap();
        let (_, u) = scale_uncertainty(&mut t, m, 1, 1, DEFAULT_EPS, detach).unwrap();
        let s = t.sum(u).unwrap();
        t.backward(s).unwrap();
        grads.push(t.grad(m).unwrap().to_vec());
    }
    assert!(grads[0].iter().all(|g| g.abs() > 0.1));
    assert!(grads[1].iter().all(|&g| g == 0.0));
}

#[test]
fn prob_map_validation_and_gray_encoding() {
    assert!(ProbMap::new(Tensor::full([1, 2, 2], 1.5)).is_err());
    assert!(ProbMap::new(Tensor::full([2, 2], 0.5)).is_err());
    let u = uncertainty_map(&ProbMap::new(Tensor::full([1, 2, 2], 0.5)).unwrap(), DEFAULT_EPS);
    assert_eq!(to_gray8(u.tensor().data()), vec![255; 4]);
    assert_eq!(to_gray8(&[0.0, 1.0, 0.5, -0.2]), vec![0, 255, 128, 0]);
}

proptest! {
    #[test]
    fn entropy_is_symmetric_and_bounded(m in 0.0f64..=1.0) {
        let u = entropy_eager(&[m, 1.0 - m]);
        prop_assert!((u[0] - u[1]).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&u[0]));
    }

    #[test]
    fn resize_preserves_range(seed in 0u64..10_000, h in 1usize..12, w in 1usize..12, oh in 1usize..12, ow in 1usize..12) {
        let mut t = Tape::new();
        let m = t.constant(random(&[1, h, w], 0.0, 1.0, seed)).unwrap();
        let r = resize_to_scale(&mut t, m, oh, ow).unwrap();
        prop_assert!(t.value(r).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
