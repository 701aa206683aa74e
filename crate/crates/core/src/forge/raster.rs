//! Pixel-center rasterization of the few primitives figures are built from.

use super::LabelMap;

pub(crate) type Pt = [f32; 2];

pub(crate) fn add(a: Pt, b: Pt) -> Pt {
    [a[0] + b[0], a[1] + b[1]]
}

pub(crate) fn scale(a: Pt, s: f32) -> Pt {
    [a[0] * s, a[1] * s]
}

fn dist_to_segment(p: Pt, a: Pt, b: Pt) -> f32 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

/// Inclusive pixel bounds of a box, clipped to the map.
fn bounds(m: &LabelMap, lo: Pt, hi: Pt) -> Option<(usize, usize, usize, usize)> {
    let x0 = lo[0].floor().max(0.0) as isize;
    let y0 = lo[1].floor().max(0.0) as isize;
    let x1 = (hi[0].ceil() as isize).min(m.width as isize - 1);
    let y1 = (hi[1].ceil() as isize).min(m.height as isize - 1);
    if x1 < x0 || y1 < y0 {
        None
    } else {
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// Paint pixels whose center satisfies `inside`, within a bounding box.
fn fill(m: &mut LabelMap, lo: Pt, hi: Pt, value: u8, inside: impl Fn(Pt) -> bool) {
    if let Some((x0, y0, x1, y1)) = bounds(m, lo, hi) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if inside([x as f32 + 0.5, y as f32 + 0.5]) {
                    m.set(x, y, value);
                }
            }
        }
    }
}

/// Stadium of the given full width around segment `a`–`b`.
pub(crate) fn capsule(m: &mut LabelMap, a: Pt, b: Pt, width: f32, value: u8) {
    let r = width / 2.0;
    let lo = [a[0].min(b[0]) - r, a[1].min(b[1]) - r];
    let hi = [a[0].max(b[0]) + r, a[1].max(b[1]) + r];
    fill(m, lo, hi, value, |p| dist_to_segment(p, a, b) <= r);
}

pub(crate) fn disk(m: &mut LabelMap, c: Pt, r: f32, value: u8) {
    fill(m, [c[0] - r, c[1] - r], [c[0] + r, c[1] + r], value, |p| {
        let d = [p[0] - c[0], p[1] - c[1]];
        d[0] * d[0] + d[1] * d[1] <= r * r
    });
}

/// Part of a disk with `y <= cut` (the upper cap).
pub(crate) fn disk_above(m: &mut LabelMap, c: Pt, r: f32, cut: f32, value: u8) {
    fill(m, [c[0] - r, c[1] - r], [c[0] + r, c[1] + r], value, |p| {
        let d = [p[0] - c[0], p[1] - c[1]];
        d[0] * d[0] + d[1] * d[1] <= r * r && p[1] <= cut
    });
}

/// Convex polygon given in either winding order.
pub(crate) fn convex(m: &mut LabelMap, pts: &[Pt], value: u8) {
    let lo = pts.iter().fold([f32::MAX; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
    let hi = pts.iter().fold([f32::MIN; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
    fill(m, lo, hi, value, |p| {
        let mut sign = 0.0f32;
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if cross != 0.0 {
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
        }
        true
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_area_is_close_to_pi_r_squared() {
        let mut m = LabelMap::filled(40, 40, 0);
        disk(&mut m, [20.0, 20.0], 10.0, 1);
        let area = m.data.iter().filter(|&&v| v == 1).count() as f32;
        assert!((area - std::f32::consts::PI * 100.0).abs() < 12.0, "{area}");
    }

    #[test]
    fn convex_square_covers_exact_pixels() {
        let mut m = LabelMap::filled(10, 10, 0);
        convex(&mut m, &[[2.0, 2.0], [6.0, 2.0], [6.0, 5.0], [2.0, 5.0]], 3);
        assert_eq!(m.data.iter().filter(|&&v| v == 3).count(), 12);
    }

    #[test]
    fn capsule_clips_at_borders() {
        let mut m = LabelMap::filled(8, 8, 0);
        capsule(&mut m, [-5.0, 4.0], [20.0, 4.0], 2.0, 1);
        assert_eq!(m.data.iter().filter(|&&v| v == 1).count(), 16);
    }
}
