use std::collections::VecDeque;

use super::mask::{BinaryMask, Instance};

/// 8-connected foreground components, ordered by their first pixel in
/// row-major scan order. Pixels inside each instance are listed in BFS order
/// from that first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Instance> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.bits()[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            pixels.push((r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && mask.bits()[j] == 1 {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        out.push(Instance::from_pixels(pixels));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_has_no_components() {
        assert!(connected_components(&BinaryMask::new(4, 4)).is_empty());
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let m = BinaryMask::from_bits(2, 2, vec![1, 0, 0, 1]).unwrap();
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 1);
        assert_eq!(cc[0].area(), 2);
    }

    #[test]
    fn zero_row_separates() {
        let m = BinaryMask::from_bits(3, 1, vec![1, 0, 1]).unwrap();
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 2);
        assert_eq!(cc[0].pixels, vec![(0, 0)]);
        assert_eq!(cc[1].pixels, vec![(2, 0)]);
    }

    #[test]
    fn bbox_is_tight() {
        let m = BinaryMask::from_fn(6, 7, |r, c| (1..=3).contains(&r) && (2..=5).contains(&c) && r + c != 4);
        let cc = connected_components(&m);
        assert_eq!(cc.len(), 1);
        let b = cc[0].bbox;
        assert_eq!((b.top, b.left, b.height, b.width), (1, 2, 3, 4));
        assert!(cc[0].pixels.iter().all(|&(r, c)| r >= b.top && r < b.top + b.height && c >= b.left && c < b.left + b.width));
    }
}
