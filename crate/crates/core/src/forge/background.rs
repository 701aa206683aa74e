//! Per-segment median colors and procedural background compositing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ColorMap, LabelMap, RgbImage};
use crate::error::{Error, Result};

fn rand_color<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

fn check_dims(img: &RgbImage, m: &LabelMap) -> Result<()> {
    if (img.width, img.height) != (m.width, m.height) || img.data.len() != 3 * m.data.len() {
        return Err(Error::Shape(format!(
            "image {}x{} vs label map {}x{}",
            img.width, img.height, m.width, m.height
        )));
    }
    Ok(())
}

/// Per-class, per-channel lower median of `img` over each non-background
/// region of `m`; background is black.
pub fn median_color_map(img: &RgbImage, m: &LabelMap) -> Result<ColorMap> {
    check_dims(img, m)?;
    let classes = m.data.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut values: Vec<[Vec<f32>; 3]> = (0..classes).map(|_| [Vec::new(), Vec::new(), Vec::new()]).collect();
    for (p, &l) in m.data.iter().enumerate() {
        if l != 0 {
            let px = img.pixel(p);
            for c in 0..3 {
                values[l as usize][c].push(px[c]);
            }
        }
    }
    let colors: Vec<Option<[f32; 3]>> = values
        .into_iter()
        .map(|mut ch| {
            if ch[0].is_empty() {
                return None;
            }
            Some([0, 1, 2].map(|c| {
                ch[c].sort_by(f32::total_cmp);
                ch[c][(ch[c].len() - 1) / 2]
            }))
        })
        .collect();
    Ok(ColorMap::from_class_colors(m, &colors))
}

/// Replace background pixels with a seeded procedural room-like texture:
/// a two-tone wall with a soft gradient, a floor band, a few colored blocks
/// and fine grain. Foreground pixels are copied untouched.
pub fn composite_background(img: &RgbImage, m: &LabelMap, seed: u64) -> Result<RgbImage> {
    check_dims(img, m)?;
    let (w, h) = (m.width as f32, m.height as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_6772_6f75);
    let wall = rand_color(&mut rng, 0.25, 0.85);
    let floor = rand_color(&mut rng, 0.15, 0.6);
    let mut blocks = Vec::new();
    for _ in 0..rng.random_range(2..5) {
        let x0 = rng.random_range(0.0..w * 0.8);
        let y0 = rng.random_range(0.0..h * 0.8);
        let bw = rng.random_range(w * 0.1..w * 0.4);
        let bh = rng.random_range(h * 0.1..h * 0.4);
        blocks.push(([x0, y0, x0 + bw, y0 + bh], rand_color(&mut rng, 0.05, 0.95)));
    }
    let horizon = rng.random_range(0.55..0.8) * h;
    let freq = rng.random_range(0.15..0.6);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let mut out = img.clone();
    for (p, &l) in m.data.iter().enumerate() {
        if l != 0 {
            continue;
        }
        let (x, y) = ((p % m.width) as f32 + 0.5, (p / m.width) as f32 + 0.5);
        let mut c = if y < horizon {
            let wave = 0.08 * (freq * x + phase).sin();
            wall.map(|v| v + wave - 0.1 * y / h)
        } else {
            floor.map(|v| v + 0.05 * ((x / 3.0).floor() % 2.0))
        };
        for (b, bc) in &blocks {
            if x >= b[0] && x < b[2] && y >= b[1] && y < b[3] {
                c = *bc;
            }
        }
        let grain = rng.random_range(-0.04..0.04);
        out.set_pixel(p, c.map(|v| (v + grain).clamp(0.0, 1.0)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_three() {
        let m = LabelMap::new(3, 1, vec![2, 2, 2]).unwrap();
        let img = RgbImage {
            width: 3,
            height: 1,
            data: vec![0.3, 0.3, 0.3, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2],
        };
        let cm = median_color_map(&img, &m).unwrap();
        assert_eq!(cm.0.pixel(0), [0.2, 0.2, 0.2]);
    }

    #[test]
    fn even_count_takes_lower_median_per_channel() {
        let m = LabelMap::new(4, 1, vec![1, 1, 1, 1]).unwrap();
        let img = RgbImage {
            width: 4,
            height: 1,
            data: vec![0.4, 0.1, 0.9, 0.1, 0.2, 0.8, 0.3, 0.4, 0.7, 0.2, 0.3, 0.6],
        };
        let cm = median_color_map(&img, &m).unwrap();
        // Sorted channels: r (.1 .2 .3 .4), g (.1 .2 .3 .4), b (.6 .7 .8 .9).
        assert_eq!(cm.0.pixel(2), [0.2, 0.2, 0.7]);
    }

    #[test]
    fn background_is_black_and_constant_image_is_kept() {
        let m = LabelMap::new(3, 1, vec![0, 1, 3]).unwrap();
        let img = RgbImage::filled(3, 1, [0.5, 0.25, 0.75]);
        let cm = median_color_map(&img, &m).unwrap();
        assert_eq!(cm.0.pixel(0), [0.0; 3]);
        assert_eq!(cm.0.pixel(1), [0.5, 0.25, 0.75]);
        assert_eq!(cm.0.pixel(2), [0.5, 0.25, 0.75]);
    }

    #[test]
    fn compositing_touches_only_background() {
        let m = LabelMap::new(4, 2, vec![0, 1, 1, 0, 0, 0, 2, 2]).unwrap();
        let img = RgbImage::filled(4, 2, [0.5; 3]);
        let out = composite_background(&img, &m, 9).unwrap();
        for p in 0..8 {
            if m.data[p] != 0 {
                assert_eq!(out.pixel(p), img.pixel(p));
            }
        }
        assert!(out.in_unit_range());
        assert_eq!(out, composite_background(&img, &m, 9).unwrap());
        assert_ne!(out, img);
    }

    #[test]
    fn all_foreground_is_unchanged() {
        let m = LabelMap::filled(5, 5, 3);
        let img = RgbImage::filled(5, 5, [0.1, 0.2, 0.3]);
        assert_eq!(composite_background(&img, &m, 1).unwrap(), img);
    }
}
