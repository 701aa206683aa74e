//! Mask hygiene: closing, hole relabeling, hole injection and IoU.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabelMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    fn same_dims(&self, other: &Mask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks counting as identical.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Running max (`dilate`) or min over a `kernel`-wide window along rows then
/// columns. Out-of-canvas pixels are ignored.
fn square_filter(m: &Mask, kernel: usize, dilate: bool) -> Mask {
    let (w, h) = (m.width, m.height);
    let r = kernel / 2;
    let pick = |acc: bool, v: bool| if dilate { acc || v } else { acc && v };
    let mut rows = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = (lo..=hi).fold(!dilate, |acc, xx| pick(acc, m.data[y * w + xx]));
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).fold(!dilate, |acc, yy| pick(acc, rows[yy * w + x]));
        }
    }
    Mask {
        width: w,
        height: h,
        data: out,
    }
}

/// Morphological closing with a `kernel × kernel` square.
pub fn close_binary(m: &Mask, kernel: usize) -> Mask {
    square_filter(&square_filter(m, kernel, true), kernel, false)
}

/// Fill spurious background holes.
///
/// A 4-connected background component is relabeled when every one of its
/// pixels lights up in the blackhat response (closing minus the foreground),
/// i.e. the closing swallows it whole. It takes the most frequent class
/// among its 4-neighbors, ties to the lowest index. Background reachable
/// from wider gaps is left alone.
pub fn clean_mask(m: &LabelMap, kernel: usize) -> Result<LabelMap> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Input(format!("kernel {kernel} must be odd and at least 1")));
    }
    let (w, h) = (m.width, m.height);
    let fg = m.foreground();
    let closed = close_binary(&fg, kernel);
    let mut out = m.clone();
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if fg.data[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        queue.push_back(start);
        let mut swallowed = true;
        let mut votes = [0usize; 256];
        while let Some(p) = queue.pop_front() {
            component.push(p);
            swallowed &= closed.data[p];
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if fg.data[q] {
                    votes[m.data[q] as usize] += 1;
                } else if !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if swallowed {
            // Highest vote wins; `max_by_key` keeps the last maximum, so scan in reverse.
            if let Some((class, &n)) = votes.iter().enumerate().rev().max_by_key(|(_, &n)| n) {
                if n > 0 {
                    for &p in &component {
                        out.data[p] = class as u8;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Top-left corners of `outer × outer` single-class, unreserved squares.
fn hole_sites(m: &LabelMap, reserved: &[bool], outer: usize) -> Vec<(usize, usize)> {
    let (w, h) = (m.width, m.height);
    let mut sites = Vec::new();
    if outer > w || outer > h {
        return sites;
    }
    for y in 0..=h - outer {
        'pos: for x in 0..=w - outer {
            let class = m.get(x, y);
            if class == 0 {
                continue;
            }
            for yy in y..y + outer {
                for xx in x..x + outer {
                    if m.get(xx, yy) != class || reserved[yy * w + xx] {
                        continue 'pos;
                    }
                }
            }
            sites.push((x, y));
        }
    }
    sites
}

/// Punch `count` square background holes of side at most `max_size`, each
/// surrounded by a one-pixel ring of a single foreground class and not
/// touching any other hole's ring. A drawn side that does not fit shrinks
/// until it does.
pub fn inject_holes(m: &LabelMap, seed: u64, count: usize, max_size: usize) -> Result<LabelMap> {
    if count == 0 {
        return Ok(m.clone());
    }
    if max_size == 0 {
        return Err(Error::Input("max_size must be at least 1".into()));
    }
    let w = m.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    let mut reserved = vec![false; w * m.height];
    for placed in 0..count {
        let mut side = rng.random_range(1..=max_size);
        // Shrink until a ring-enclosed square fits somewhere.
        let candidates = loop {
            let found = hole_sites(m, &reserved, side + 2);
            if !found.is_empty() || side == 1 {
                break found;
            }
            side -= 1;
        };
        let outer = side + 2;
        if candidates.is_empty() {
            return Err(Error::Input(format!("no interior room for hole {} of {count}", placed + 1)));
        }
        let (x, y) = candidates[rng.random_range(0..candidates.len())];
        for yy in y..y + outer {
            for xx in x..x + outer {
                reserved[yy * w + xx] = true;
            }
        }
        for yy in y + 1..y + 1 + side {
            for xx in x + 1..x + 1 + side {
                out.set(xx, yy, 0);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, mut on: impl FnMut(usize, usize) -> bool) -> Mask {
        Mask {
            width: w,
            height: h,
            data: (0..w * h).map(|p| on(p % w, p / w)).collect(),
        }
    }

    /// Literal definition: max/min over the in-canvas window.
    fn reference_close(m: &Mask, k: usize) -> Mask {
        let r = k as isize / 2;
        let window = |src: &Mask, x: usize, y: usize, dilate: bool| {
            let mut acc = !dilate;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < src.width && (yy as usize) < src.height {
                        let v = src.data[yy as usize * src.width + xx as usize];
                        acc = if dilate { acc || v } else { acc && v };
                    }
                }
            }
            acc
        };
        let d = mask(m.width, m.height, |x, y| window(m, x, y, true));
        mask(m.width, m.height, |x, y| window(&d, x, y, false))
    }

    #[test]
    fn closing_matches_reference() {
        let mut state = 12345u32;
        for _ in 0..20 {
            let m = mask(17, 13, |_, _| {
                state = state.wrapping_mul(1664525).wrapping_add(1013904223);
                state >> 30 == 0
            });
            for k in [1, 3, 5, 7] {
                assert_eq!(close_binary(&m, k), reference_close(&m, k));
            }
        }
    }

    #[test]
    fn single_pixel_hole_is_filled() {
        let mut m = LabelMap::filled(30, 30, 0);
        for y in 5..25 {
            for x in 5..25 {
                m.set(x, y, 4);
            }
        }
        let mut holed = m.clone();
        holed.set(14, 15, 0);
        // The oracle's closing covers the hole, so the component is swallowed.
        let closed = reference_close(&holed.foreground(), 7);
        assert!(closed.data[15 * 30 + 14]);
        assert_eq!(clean_mask(&holed, 7).unwrap(), m);
    }

    #[test]
    fn courtyard_survives() {
        let mut m = LabelMap::filled(40, 40, 0);
        for y in 5..35 {
            for x in 5..35 {
                m.set(x, y, 4);
            }
        }
        for y in 15..24 {
            for x in 15..24 {
                m.set(x, y, 0);
            }
        }
        // Reference closing leaves the courtyard center open.
        let closed = reference_close(&m.foreground(), 7);
        assert!(!closed.data[19 * 40 + 19]);
        assert_eq!(clean_mask(&m, 7).unwrap(), m);
    }

    #[test]
    fn hole_free_map_is_unchanged() {
        let mut m = LabelMap::filled(20, 20, 0);
        for y in 2..10 {
            for x in 3..15 {
                m.set(x, y, 2);
            }
        }
        assert_eq!(clean_mask(&m, 7).unwrap(), m);
    }

    #[test]
    fn hole_takes_dominant_neighbor() {
        let mut m = LabelMap::filled(12, 12, 0);
        for y in 2..10 {
            for x in 2..10 {
                m.set(x, y, if x < 5 { 3 } else { 5 });
            }
        }
        m.set(6, 6, 0);
        let out = clean_mask(&m, 3).unwrap();
        assert_eq!(out.get(6, 6), 5);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(clean_mask(&LabelMap::filled(4, 4, 0), 4).is_err());
    }

    #[test]
    fn iou_of_shifted_block_is_one_third() {
        let a = mask(6, 6, |x, y| (1..3).contains(&x) && (1..3).contains(&y));
        let b = mask(6, 6, |x, y| (2..4).contains(&x) && (1..3).contains(&y));
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = mask(6, 6, |x, _| x == 5);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let empty = mask(6, 6, |_, _| false);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn iou_dimension_mismatch() {
        assert!(mask_iou(&mask(2, 2, |_, _| true), &mask(3, 2, |_, _| true)).is_err());
    }

    #[test]
    fn holes_need_room() {
        let mut m = LabelMap::filled(10, 10, 0);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, 1);
            }
        }
        assert_eq!(inject_holes(&m, 1, 0, 3).unwrap(), m);
        // A 4x4 block admits one ring-enclosed 2x2 hole at most; bigger draws shrink.
        let one = inject_holes(&m, 1, 1, 4).unwrap();
        assert_eq!(one.histogram(2)[1], 12);
        assert!(inject_holes(&m, 1, 20, 2).is_err());
    }
}
