use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhr_core::imgeo::{
    circumradius, connected_components, copy_paste, edt, paste_origin, BinaryMask,
    CopyPasteConfig,
};
use uhr_core::tensor::Tensor;

fn random_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    let bits: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect();
    BinaryMask::from_bits(h, w, bits).unwrap()
}

fn brute_edt(m: &BinaryMask) -> Vec<f64> {
    let on: Vec<(usize, usize)> = m.iter_on().collect();
    let (h, w) = m.dims();
    let mut out = vec![f64::INFINITY; h * w];
    for r in 0..h {
        for c in 0..w {
            for &(fr, fc) in &on {
                let dr = r as f64 - fr as f64;
                let dc = c as f64 - fc as f64;
                out[r * w + c] = out[r * w + c].min((dr * dr + dc * dc).sqrt());
            }
        }
    }
    out
}

#[test]
fn edt_matches_brute_force_on_200_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let h = rng.random_range(1..=64);
        let w = rng.random_range(1..=64);
        let density = [0.0, 0.002, 0.02, 0.2, 0.9][rng.random_range(0..5)];
        let m = random_mask(h, w, density, &mut rng);
        let got = edt(&m);
        for (a, b) in got.values().iter().zip(brute_edt(&m)) {
            if b.is_infinite() {
                assert!(a.is_infinite());
            } else {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b} on {h}x{w}");
            }
        }
    }
}

#[test]
fn edt_is_zero_exactly_on_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = random_mask(20, 30, 0.1, &mut rng);
    let d = edt(&m);
    for r in 0..20 {
        for c in 0..30 {
            assert_eq!(d.get(r, c) == 0.0, m.get(r, c));
        }
    }
}

fn flood_labels(m: &BinaryMask) -> usize {
    // independent union-find over 8-neighbours
    let (h, w) = m.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < h as isize && nc >= 0 && nc < w as isize && m.get(nr as usize, nc as usize) {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr as usize * w + nc as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut roots: Vec<usize> = m.iter_on().map(|(r, c)| find(&mut parent, r * w + c)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

#[test]
fn components_partition_the_foreground() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let m = random_mask(rng.random_range(1..40), rng.random_range(1..40), 0.3, &mut rng);
        let comps = connected_components(&m);
        assert_eq!(comps.len(), flood_labels(&m));
        let (h, w) = m.dims();
        let mut union = BinaryMask::new(h, w);
        let mut firsts = Vec::new();
        for inst in &comps {
            let full = inst.full_mask(h, w);
            assert!(!union.intersects(&full));
            union = union.or(&full);
            let b = inst.bbox;
            assert!(inst.pixels.iter().all(|&(r, c)| r >= b.top
                && r < b.top + b.height
                && c >= b.left
                && c < b.left + b.width));
            assert!(inst.pixels.iter().any(|p| p.0 == b.top));
            assert!(inst.pixels.iter().any(|p| p.0 == b.top + b.height - 1));
            assert!(inst.pixels.iter().any(|p| p.1 == b.left));
            assert!(inst.pixels.iter().any(|p| p.1 == b.left + b.width - 1));
            firsts.push(inst.pixels.iter().map(|&(r, c)| r * w + c).min().unwrap());
        }
        assert_eq!(union, m);
        assert!(firsts.windows(2).all(|p| p[0] < p[1]));
    }
}

fn blob_scene(rng: &mut ChaCha8Rng, size: usize, max_radius: f64) -> (Tensor, BinaryMask) {
    let n = rng.random_range(1..=3);
    let blobs: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..size as f64),
                rng.random_range(0.0..size as f64),
                rng.random_range(2.0..max_radius),
            )
        })
        .collect();
    let mask = BinaryMask::from_fn(size, size, |r, c| {
        blobs.iter().any(|&(y, x, rad)| {
            let (dy, dx) = (r as f64 - y, c as f64 - x);
            dy * dy + dx * dx <= rad * rad
        })
    });
    let image = Tensor::from_fn([1, size, size], |i| ((i * 37) % 101) as f64 / 100.0);
    (image, mask)
}

#[test]
fn copy_paste_invariants_hold_over_1000_augmentations() {
    let cfg = CopyPasteConfig::default();
    let mut successes = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (image, y) = blob_scene(&mut rng, 48, 10.0);
        let out = copy_paste(&image, &y, &cfg, &mut rng).unwrap();
        if !out.succeeded() {
            assert_eq!(out.mask, y);
            assert_eq!(out.image, image);
            continue;
        }
        successes += 1;
        assert!(!out.m_b.intersects(&y));
        assert_eq!(out.mask, y.or(&out.m_b));
        assert!(out.m_a.is_subset_of(&out.mask));
        assert!(out.m_b.is_subset_of(&out.mask));
        assert!(!out.m_a.intersects(&out.m_b));
        let (cr, cc) = out.record.center.unwrap();
        let r_s = out.record.radius;
        for (r, c) in out.m_b.iter_on() {
            let (dr, dc) = (r as f64 - cr as f64, c as f64 - cc as f64);
            assert!((dr * dr + dc * dc).sqrt() <= r_s + 1e-12);
        }
        for (i, (a, b)) in image.data().iter().zip(out.image.data()).enumerate() {
            if !out.m_b.get(i / 48, i % 48) {
                assert_eq!(a, b);
            }
        }
    }
    assert!(successes > 900, "only {successes} successful augmentations");
}

#[test]
fn crowded_scene_exercises_the_fallback() {
    // a lesion covering almost everything leaves no feasible centre
    let y = BinaryMask::from_fn(16, 16, |r, c| !(r == 0 && c == 0));
    let image = Tensor::zeros([1, 16, 16]);
    let out = copy_paste(&image, &y, &CopyPasteConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(!out.succeeded());
    assert_eq!(out.record.attempts, 4);
    assert_eq!(out.mask, y);
}

#[test]
fn pasted_box_stays_inside_the_safety_disk() {
    for h in 1..12usize {
        for w in 1..12usize {
            let r_s = circumradius(h, w);
            let (top, left) = paste_origin((20, 20), h, w);
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let dr = (top + r - 20) as f64;
                    let dc = (left + c - 20) as f64;
                    assert!((dr * dr + dc * dc).sqrt() <= r_s + 1e-12);
                }
            }
        }
    }
}

proptest! {
    #[test]
    fn scaled_solid_rectangles_never_grow(h in 2usize..20, w in 2usize..20, f in 0.3f64..1.0) {
        let pixels: Vec<_> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let m = BinaryMask::from_fn(h, w, |_, _| true);
        let inst = connected_components(&m).remove(0);
        prop_assert_eq!(inst.area(), pixels.len());
        if let Ok(s) = uhr_core::imgeo::scale_instance(&inst, f) {
            prop_assert!(s.area() <= inst.area());
            prop_assert!(s.mask.bits().iter().all(|&b| b <= 1));
        }
    }

    #[test]
    fn copy_paste_is_deterministic(seed in 0u64..10_000) {
        let mut a = ChaCha8Rng::seed_from_u64(seed);
        let (image, y) = blob_scene(&mut a, 32, 6.0);
        let out1 = copy_paste(&image, &y, &CopyPasteConfig::default(), &mut a).unwrap();
        let mut b = ChaCha8Rng::seed_from_u64(seed);
        let _ = blob_scene(&mut b, 32, 6.0);
        let out2 = copy_paste(&image, &y, &CopyPasteConfig::default(), &mut b).unwrap();
        prop_assert_eq!(out1.record, out2.record);
        prop_assert_eq!(out1.mask, out2.mask);
    }
}
