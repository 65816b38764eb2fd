mod common;

use common::{random, scaled_grad_check};
use proptest::prelude::*;
use uhr_core::imgeo::BinaryMask;
use uhr_core::tensor::{Tape, Tensor, Var};
use uhr_core::uoic::{info_nce, masked_avg_pool, mine_hard_negative, pretrain_loss, wmap};

fn vector(t: &mut Tape, v: &[f64]) -> Var {
    t.constant(Tensor::new([v.len()], v.to_vec()).unwrap()).unwrap()
}

fn nce_value(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let mut t = Tape::new();
    let a = vector(&mut t, anchor);
    let p = vector(&mut t, pos);
    let n: Vec<Var> = negs.iter().map(|v| vector(&mut t, v)).collect();
    let out = info_nce(&mut t, &[a], &[p], &n, tau).unwrap();
    t.value(out.loss.unwrap()).item()
}

/// Plain scalar evaluation, independent of the tape.
fn oracle_nce(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let sp = cos(anchor, pos) / tau;
    let denom: f64 = sp.exp() + negs.iter().map(|n| (cos(anchor, n) / tau).exp()).sum::<f64>();
    -(sp.exp() / denom).ln()
}

#[test]
fn equal_similarities_give_log_one_plus_n() {
    let a = [0.3, -1.2, 0.8];
    for n in [1usize, 3, 7] {
        let negs: Vec<&[f64]> = (0..n).map(|_| &a[..]).collect();
        let got = nce_value(&a, &a, &negs, 0.1);
        assert!((got - ((1 + n) as f64).ln()).abs() <= 1e-9, "n {n}: {got}");
    }
}

#[test]
fn perfect_separation_closed_form() {
    let a = [1.0, 2.0, -0.5];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let got = nce_value(&a, &a, &[&neg], 0.1);
    let expect = (-20f64).exp().ln_1p();
    assert!((got - 2.061e-9).abs() < 1e-12);
    assert!((got - expect).abs() < 1e-14, "{got:e} vs {expect:e}");
}

#[test]
fn matches_scalar_oracle_on_random_vectors() {
    for seed in 0..20 {
        let a = random(&[5], -1.0, 1.0, seed).to_vec();
        let p = random(&[5], -1.0, 1.0, seed + 100).to_vec();
        let n1 = random(&[5], -1.0, 1.0, seed + 200).to_vec();
        let n2 = random(&[5], -1.0, 1.0, seed + 300).to_vec();
        let got = nce_value(&a, &p, &[&n1, &n2], 0.1);
        let want = oracle_nce(&a, &p, &[&n1, &n2], 0.1);
        assert!((got - want).abs() <= 1e-9 * want.max(1.0), "seed {seed}");
    }
}

#[test]
fn loss_decreases_as_the_positive_aligns() {
    let a = [1.0, 0.0];
    let neg = [0.0, 1.0];
    let far = nce_value(&a, &[0.2, 1.0], &[&neg], 0.1);
    let near = nce_value(&a, &[1.0, 0.2], &[&neg], 0.1);
    assert!(near < far);
}

#[test]
fn zero_norm_vectors_are_dropped_and_counted() {
    let mut t = Tape::new();
    let a = vector(&mut t, &[1.0, 0.0]);
    let z = vector(&mut t, &[0.0, 0.0]);
    let n = vector(&mut t, &[0.0, 1.0]);
    let out = info_nce(&mut t, &[a, z], &[a, a], &[n, z], 0.1).unwrap();
    assert_eq!(out.anchors_used, 1);
    assert_eq!(out.dropped_terms, 2);
    let none = info_nce(&mut t, &[z], &[a], &[n], 0.1).unwrap();
    assert!(none.loss.is_none());
}

#[test]
fn info_nce_gradient() {
    for seed in 0..10 {
        let x = random(&[4, 6], -1.0, 1.0, seed);
        let err = scaled_grad_check(
            |t, v| {
                let rows: Vec<Var> = (0..4)
                    .map(|i| {
                        let r = t.slice(v, 0, i, 1)?;
                        t.reshape(r, &[6])
                    })
                    .collect::<uhr_core::Result<_>>()?;
                let out = info_nce(t, &rows[..2], &rows[2..], &rows[..], 0.5)?;
                Ok(out.loss.unwrap())
            },
            &x,
            1e-5,
        );
        assert!(err <= 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn wmap_hand_computation() {
    let mut t = Tape::new();
    // two pixels, D = 2
    let f = t.constant(Tensor::new([2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap()).unwrap();
    let w = t.constant(Tensor::new([1, 1, 2], vec![0.2, 0.6]).unwrap()).unwrap();
    let (z, mass) = wmap(&mut t, f, w).unwrap();
    assert!((mass - 0.8).abs() < 1e-15);
    let expect = [(0.2 * 1.0 + 0.6 * 3.0) / 0.8, (0.2 * -2.0 + 0.6 * 4.0) / 0.8];
    for (g, e) in t.value(z).data().iter().zip(expect) {
        assert!((g - e).abs() < 1e-7);
    }
    let neg = t.constant(Tensor::new([1, 1, 2], vec![-0.1, 0.5]).unwrap()).unwrap();
    assert!(wmap(&mut t, f, neg).is_err());
}

#[test]
fn masked_pool_examples() {
    let mut t = Tape::new();
    let f = t.constant(random(&[3, 4, 4], -1.0, 1.0, 2)).unwrap();
    let full = BinaryMask::from_fn(4, 4, |_, _| true);
    let z = masked_avg_pool(&mut t, f, &full).unwrap().unwrap();
    for (c, g) in t.value(z).data().iter().enumerate() {
        let mean = t.value(f).data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!((g - mean).abs() < 1e-12);
    }
    let two = BinaryMask::from_fn(4, 4, |r, c| (r, c) == (0, 1) || (r, c) == (1, 2));
    let z = masked_avg_pool(&mut t, f, &two).unwrap().unwrap();
    let fv = t.value(f).data();
    for c in 0..3 {
        let expect = (fv[c * 16 + 1] + fv[c * 16 + 6]) / 2.0;
        assert!((t.value(z).data()[c] - expect).abs() < 1e-12);
    }
    let empty = BinaryMask::new(4, 4);
    assert!(masked_avg_pool(&mut t, f, &empty).unwrap().is_none());
}

#[test]
fn hard_negative_examples() {
    let mut t = Tape::new();
    let f = t.constant(random(&[3, 4, 4], -1.0, 1.0, 3)).unwrap();
    let y = BinaryMask::from_fn(4, 4, |r, c| (r, c) == (0, 0));
    let zeros = t.constant(Tensor::zeros([1, 4, 4])).unwrap();
    assert!(mine_hard_negative(&mut t, f, &y, zeros).unwrap().is_none());
    // one confident background pixel
    let mut p = vec![0.0; 16];
    p[0] = 1.0;
    p[9] = 1.0;
    let prob = t.constant(Tensor::new([1, 4, 4], p).unwrap()).unwrap();
    let z = mine_hard_negative(&mut t, f, &y, prob).unwrap().unwrap();
    for c in 0..3 {
        assert!((t.value(z).data()[c] - t.value(f).data()[c * 16 + 9]).abs() < 1e-7);
    }
}

#[test]
fn pretrain_loss_combines_terms() {
    let mut t = Tape::new();
    let seg = t.constant(Tensor::scalar(0.7)).unwrap();
    let nce = t.constant(Tensor::scalar(1.5)).unwrap();
    let only = pretrain_loss(&mut t, seg, Some(nce), 0.0).unwrap();
    assert_eq!(t.value(only).item(), 0.7);
    let both = pretrain_loss(&mut t, seg, Some(nce), 1.0).unwrap();
    assert!((t.value(both).item() - 2.2).abs() < 1e-15);
    assert!(pretrain_loss(&mut t, seg, Some(nce), -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_is_scale_invariant(seed in 0u64..10_000, k in 0usize..4, s in 0.01f64..100.0) {
        let vs: Vec<Vec<f64>> = (0..4).map(|i| random(&[5], -1.0, 1.0, seed * 4 + i).to_vec()).collect();
        let base = nce_value(&vs[0], &vs[1], &[&vs[2], &vs[3]], 0.1);
        let mut scaled = vs.clone();
        scaled[k].iter_mut().for_each(|v| *v *= s);
        let got = nce_value(&scaled[0], &scaled[1], &[&scaled[2], &scaled[3]], 0.1);
        prop_assert!((got - base).abs() <= 1e-9);
    }

    #[test]
    fn wmap_is_invariant_to_weight_rescaling(seed in 0u64..10_000, s in 0.1f64..10.0) {
        let mut t = Tape::new();
        let f = t.constant(random(&[3, 4, 4], -1.0, 1.0, seed)).unwrap();
        let w = random(&[1, 4, 4], 0.0, 1.0, seed + 1);
        let w1 = t.constant(w.clone()).unwrap();
        let w2 = t.constant(w.map(|v| v * s)).unwrap();
        let (a, _) = wmap(&mut t, f, w1).unwrap();
        let (b, _) = wmap(&mut t, f, w2).unwrap();
        prop_assert!(t.value(a).max_abs_diff(t.value(b)) <= 1e-6);
    }

    #[test]
    fn hard_negative_ignores_prediction_scale(seed in 0u64..10_000, s in 0.1f64..1.0) {
        let mut t = Tape::new();
        let f = t.constant(random(&[3, 8, 8], -1.0, 1.0, seed)).unwrap();
        let bits: Vec<u8> = random(&[64], 0.0, 1.0, seed + 7).data().iter().map(|v| u8::from(*v < 0.3)).collect();
        let y = BinaryMask::from_bits(8, 8, bits).unwrap();
        let p = random(&[1, 8, 8], 0.1, 1.0, seed + 9);
        let p1 = t.constant(p.clone()).unwrap();
        let p2 = t.constant(p.map(|v| v * s)).unwrap();
        let a = mine_hard_negative(&mut t, f, &y, p1).unwrap();
        let b = mine_hard_negative(&mut t, f, &y, p2).unwrap();
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!(t.value(a).max_abs_diff(t.value(b)) <= 1e-6);
        }
    }
}
