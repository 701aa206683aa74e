//! Articulated figure: pose sampling, skeleton, part silhouette, garments
//! and textures.

use std::f32::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{add, capsule, convex, disk, disk_above, scale, Pt};
use super::{class, clean_mask, part, ForgeConfig, LabelMap, PartSilhouette, RgbImage};
use crate::error::{Error, Result};

// Body proportions in figure units (standing height is roughly 1).
const HEAD_R: f32 = 0.068;
const NECK: f32 = 0.035;
const TORSO: f32 = 0.30;
const SHOULDER_HALF: f32 = 0.10;
const HIP_HALF: f32 = 0.055;
const UPPER_ARM: f32 = 0.16;
const FOREARM: f32 = 0.15;
const THIGH: f32 = 0.23;
const SHIN: f32 = 0.22;
const FOOT: f32 = 0.035;

// Articulation limits (radians). Arm and hip angles open away from the body
// measured from straight down; bends add to them.
const NECK_LIMIT: f32 = 0.25;
const SHOULDER_RANGE: (f32, f32) = (0.12, FRAC_PI_2 + 0.2);
const ELBOW_RANGE: (f32, f32) = (0.0, 1.0);
const HIP_RANGE: (f32, f32) = (0.0, 0.4);
const KNEE_RANGE: (f32, f32) = (0.0, 0.35);

/// Pose, scale and placement of one figure. Index 0 of each pair is the
/// figure's left side (image right).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigurePose {
    pub neck: f32,
    pub shoulders: [f32; 2],
    pub elbows: [f32; 2],
    pub hips: [f32; 2],
    pub knees: [f32; 2],
    /// Pixels per figure unit.
    pub scale: f32,
    /// Pelvis center in pixels.
    pub translation: [f32; 2],
    pub arm_width: f32,
    pub leg_width: f32,
    pub torso_width: f32,
}

/// Joint positions in pixels.
#[derive(Debug, Clone)]
struct Skeleton {
    pelvis: Pt,
    neck: Pt,
    head: Pt,
    head_r: f32,
    shoulders: [Pt; 2],
    elbows: [Pt; 2],
    wrists: [Pt; 2],
    hips: [Pt; 2],
    knees: [Pt; 2],
    ankles: [Pt; 2],
    toes: [Pt; 2],
}

fn in_range(v: f32, (lo, hi): (f32, f32)) -> bool {
    v >= lo && v <= hi
}

/// Unit vector at `angle` from straight down, opening toward `side`
/// (+1 = image right).
fn limb_dir(angle: f32, side: f32) -> Pt {
    [side * angle.sin(), angle.cos()]
}

impl FigurePose {
    /// Arms straight out, legs straight down, centered.
    pub fn t_pose(cfg: &ForgeConfig) -> Self {
        let res = cfg.resolution as f32;
        let s = 0.80 * res;
        FigurePose {
            neck: 0.0,
            shoulders: [FRAC_PI_2; 2],
            elbows: [0.0; 2],
            hips: [0.1; 2],
            knees: [0.0; 2],
            scale: s,
            translation: [res / 2.0, 0.52 * res],
            arm_width: 0.055 * s,
            leg_width: 0.075 * s,
            torso_width: 0.19 * s,
        }
    }

    pub fn validate(&self, cfg: &ForgeConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if !(self.neck.abs() <= NECK_LIMIT) {
            return bad(format!("neck angle {} outside ±{NECK_LIMIT}", self.neck));
        }
        for side in 0..2 {
            if !in_range(self.shoulders[side], SHOULDER_RANGE)
                || !in_range(self.elbows[side], ELBOW_RANGE)
                || !in_range(self.hips[side], HIP_RANGE)
                || !in_range(self.knees[side], KNEE_RANGE)
            {
                return bad(format!("joint angles of side {side} outside articulation limits"));
            }
        }
        for (name, w) in [
            ("arm", self.arm_width),
            ("leg", self.leg_width),
            ("torso", self.torso_width),
        ] {
            if !(w >= 1.0 && w.is_finite()) {
                return bad(format!("{name} width {w} must be at least one pixel"));
            }
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale {} must be positive", self.scale));
        }
        let (lo, hi) = self.skeleton().extent(self);
        let res = cfg.resolution as f32;
        if lo[0] < 0.0 || lo[1] < 0.0 || hi[0] > res || hi[1] > res {
            return bad(format!(
                "figure spans ({:.1}, {:.1})-({:.1}, {:.1}), outside the {res} px canvas",
                lo[0], lo[1], hi[0], hi[1]
            ));
        }
        Ok(())
    }

    fn skeleton(&self) -> Skeleton {
        let s = self.scale;
        let pelvis = self.translation;
        let neck = add(pelvis, [0.0, -TORSO * s]);
        let head = add(neck, scale([self.neck.sin(), -self.neck.cos()], (NECK + HEAD_R) * s));
        let sides = [1.0f32, -1.0];
        let mut sk = Skeleton {
            pelvis,
            neck,
            head,
            head_r: HEAD_R * s,
            shoulders: [[0.0; 2]; 2],
            elbows: [[0.0; 2]; 2],
            wrists: [[0.0; 2]; 2],
            hips: [[0.0; 2]; 2],
            knees: [[0.0; 2]; 2],
            ankles: [[0.0; 2]; 2],
            toes: [[0.0; 2]; 2],
        };
        for (i, &side) in sides.iter().enumerate() {
            sk.shoulders[i] = add(neck, [side * SHOULDER_HALF * s, 0.025 * s]);
            sk.elbows[i] = add(sk.shoulders[i], scale(limb_dir(self.shoulders[i], side), UPPER_ARM * s));
            sk.wrists[i] = add(
                sk.elbows[i],
                scale(limb_dir(self.shoulders[i] + self.elbows[i], side), FOREARM * s),
            );
            sk.hips[i] = add(pelvis, [side * HIP_HALF * s, 0.0]);
            sk.knees[i] = add(sk.hips[i], scale(limb_dir(self.hips[i], side), THIGH * s));
            sk.ankles[i] = add(sk.knees[i], scale(limb_dir(self.hips[i] - self.knees[i], side), SHIN * s));
            sk.toes[i] = add(sk.ankles[i], [side * 0.02 * s, FOOT * s]);
        }
        sk
    }

    fn torso_quad(&self, sk: &Skeleton) -> [Pt; 4] {
        let top = self.torso_width / 2.0;
        let bottom = 0.8 * top;
        [
            add(sk.neck, [-top, 0.0]),
            add(sk.neck, [top, 0.0]),
            add(sk.pelvis, [bottom, 0.0]),
            add(sk.pelvis, [-bottom, 0.0]),
        ]
    }

    /// Random pose within articulation limits, placed inside the canvas.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &ForgeConfig) -> Result<Self> {
        let res = cfg.resolution as f32;
        let mut pose = FigurePose::t_pose(cfg);
        pose.scale = rng.random_range(0.76..0.86) * res;
        let s = pose.scale;
        pose.neck = rng.random_range(-0.15..0.15);
        let raised = rng.random_bool(0.3);
        for i in 0..2 {
            pose.shoulders[i] = if raised {
                rng.random_range(0.9..SHOULDER_RANGE.1)
            } else {
                rng.random_range(SHOULDER_RANGE.0..0.9)
            };
            pose.elbows[i] = rng.random_range(ELBOW_RANGE.0..0.7);
            pose.hips[i] = rng.random_range(0.02..HIP_RANGE.1);
            pose.knees[i] = rng.random_range(KNEE_RANGE.0..KNEE_RANGE.1).min(pose.hips[i] + 0.1);
        }
        pose.arm_width = rng.random_range(0.05..0.065) * s;
        pose.leg_width = rng.random_range(0.07..0.085) * s;
        pose.torso_width = rng.random_range(0.17..0.22) * s;
        // Place the figure: measure its extent around the origin, then shift.
        pose.translation = [0.0, 0.0];
        let (lo, hi) = pose.skeleton().extent(&pose);
        let margin = 1.0 + cfg.garment_overhang * cfg.unit();
        let x_range = (margin - lo[0], res - margin - hi[0]);
        let y_range = (margin - lo[1], res - margin - hi[1]);
        if x_range.0 > x_range.1 || y_range.0 > y_range.1 {
            return Err(Error::Config(format!("figure does not fit a {res} px canvas")));
        }
        pose.translation = [
            rng.random_range(x_range.0..=x_range.1),
            rng.random_range(y_range.0..=y_range.1),
        ];
        Ok(pose)
    }
}

impl Skeleton {
    /// Bounding box including limb thickness.
    fn extent(&self, pose: &FigurePose) -> (Pt, Pt) {
        let mut lo = [f32::MAX; 2];
        let mut hi = [f32::MIN; 2];
        let mut grow = |p: Pt, r: f32| {
            lo = [lo[0].min(p[0] - r), lo[1].min(p[1] - r)];
            hi = [hi[0].max(p[0] + r), hi[1].max(p[1] + r)];
        };
        grow(self.head, self.head_r * 1.15);
        for i in 0..2 {
            for p in [self.shoulders[i], self.elbows[i], self.wrists[i]] {
                grow(p, pose.arm_width / 2.0);
            }
            for p in [self.hips[i], self.knees[i], self.ankles[i], self.toes[i]] {
                grow(p, pose.leg_width / 2.0 + 0.5);
            }
            grow(self.shoulders[i], pose.torso_width / 2.0 - SHOULDER_HALF * pose.scale);
        }
        (lo, hi)
    }
}

fn draw_leg(m: &mut LabelMap, sk: &Skeleton, i: usize, width: f32, v: u8) {
    capsule(m, sk.hips[i], sk.knees[i], width, v);
    capsule(m, sk.knees[i], sk.ankles[i], width * 0.9, v);
    capsule(m, sk.ankles[i], sk.toes[i], width * 0.9, v);
}

fn draw_arm(m: &mut LabelMap, sk: &Skeleton, i: usize, width: f32, v: u8) {
    capsule(m, sk.shoulders[i], sk.elbows[i], width, v);
    capsule(m, sk.elbows[i], sk.wrists[i], width * 0.9, v);
}

/// Six-part rasterization; torso first, then legs and arms, then the head.
pub fn render_part_silhouette(pose: &FigurePose, cfg: &ForgeConfig) -> Result<PartSilhouette> {
    cfg.validate()?;
    pose.validate(cfg)?;
    let res = cfg.resolution;
    let sk = pose.skeleton();
    let mut m = LabelMap::filled(res, res, part::BACKGROUND);
    convex(&mut m, &pose.torso_quad(&sk), part::TORSO);
    draw_leg(&mut m, &sk, 0, pose.leg_width, part::LEFT_LEG);
    draw_leg(&mut m, &sk, 1, pose.leg_width, part::RIGHT_LEG);
    draw_arm(&mut m, &sk, 0, pose.arm_width, part::LEFT_ARM);
    draw_arm(&mut m, &sk, 1, pose.arm_width, part::RIGHT_ARM);
    capsule(&mut m, sk.neck, sk.head, pose.arm_width, part::HEAD);
    disk(&mut m, sk.head, sk.head_r, part::HEAD);
    PartSilhouette::new(m)
}

/// One forged training example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgedSample {
    pub label: LabelMap,
    pub rgb: RgbImage,
    pub silhouette: PartSilhouette,
    pub pose: FigurePose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Sleeves {
    None,
    Short,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bottom {
    Shorts,
    Trousers,
    Skirt,
}

fn lerp(a: Pt, b: Pt, t: f32) -> Pt {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

fn draw_garments<R: Rng + ?Sized>(rng: &mut R, pose: &FigurePose, cfg: &ForgeConfig) -> LabelMap {
    let res = cfg.resolution;
    let sk = pose.skeleton();
    let over = cfg.garment_overhang * cfg.unit();
    let mut m = LabelMap::filled(res, res, class::BACKGROUND);

    let sleeves = match rng.random_range(0..10) {
        0..=1 => Sleeves::None,
        2..=5 => Sleeves::Short,
        _ => Sleeves::Long,
    };
    let bottom = match rng.random_range(0..10) {
        0..=2 => Bottom::Shorts,
        3..=7 => Bottom::Trousers,
        _ => Bottom::Skirt,
    };
    let long_hair = rng.random_bool(0.4);
    let hat = rng.random_bool(0.25);
    let bag = rng.random_bool(0.3);
    let loose = rng.random_range(0.0..=over);

    // Bare limbs first; garments paint over them.
    for i in 0..2 {
        draw_leg(&mut m, &sk, i, pose.leg_width, class::SKIN);
        draw_arm(&mut m, &sk, i, pose.arm_width, class::SKIN);
    }
    capsule(&mut m, sk.neck, sk.head, pose.arm_width * 1.1, class::SKIN);

    // Long hair falls behind the shoulders, so it goes under the top.
    if long_hair {
        let below = add(sk.neck, [0.0, 0.06 * pose.scale]);
        capsule(&mut m, sk.head, below, 2.0 * sk.head_r + loose.min(1.0), class::HAIR);
    }

    // Bottoms.
    let waist_y = sk.pelvis[1] - 0.06 * pose.scale;
    let hip_band = [
        [sk.pelvis[0] - 0.8 * pose.torso_width / 2.0 - loose / 2.0, waist_y],
        [sk.pelvis[0] + 0.8 * pose.torso_width / 2.0 + loose / 2.0, waist_y],
        add(sk.hips[0], [pose.leg_width / 2.0 + loose / 2.0, 0.04 * pose.scale]),
        add(sk.hips[1], [-pose.leg_width / 2.0 - loose / 2.0, 0.04 * pose.scale]),
    ];
    convex(&mut m, &hip_band, class::BOTTOM);
    match bottom {
        Bottom::Shorts | Bottom::Trousers => {
            let reach = if bottom == Bottom::Shorts {
                rng.random_range(0.35..0.6)
            } else {
                rng.random_range(0.9..1.0)
            };
            for i in 0..2 {
                let w = pose.leg_width + loose;
                if reach <= 0.5 {
                    capsule(&mut m, sk.hips[i], lerp(sk.hips[i], sk.knees[i], reach * 2.0), w, class::BOTTOM);
                } else {
                    capsule(&mut m, sk.hips[i], sk.knees[i], w, class::BOTTOM);
                    let end = lerp(sk.knees[i], sk.ankles[i], (reach - 0.5) * 2.0);
                    capsule(&mut m, sk.knees[i], end, w * 0.9, class::BOTTOM);
                }
            }
        }
        Bottom::Skirt => {
            let t = rng.random_range(0.5..0.9);
            let flare = pose.leg_width / 2.0 + loose;
            let l = lerp(sk.hips[0], sk.knees[0], t);
            let r = lerp(sk.hips[1], sk.knees[1], t);
            convex(
                &mut m,
                &[hip_band[0], hip_band[1], add(l, [flare, 0.0]), add(r, [-flare, 0.0])],
                class::BOTTOM,
            );
        }
    }

    // Shoes.
    for (i, shoe) in [(0, class::LEFT_SHOE), (1, class::RIGHT_SHOE)] {
        let start = lerp(sk.knees[i], sk.ankles[i], 0.8);
        capsule(&mut m, start, sk.ankles[i], pose.leg_width * 0.95, shoe);
        capsule(&mut m, sk.ankles[i], sk.toes[i], pose.leg_width * 1.05, shoe);
    }

    // Top: torso plus sleeves.
    let quad = pose.torso_quad(&sk);
    let widen = |p: Pt, dx: f32| add(p, [dx, 0.0]);
    let hem = lerp(sk.neck, sk.pelvis, rng.random_range(0.78..0.95));
    let hem_half = 0.82 * pose.torso_width / 2.0 + loose;
    convex(
        &mut m,
        &[
            widen(quad[0], -loose / 2.0),
            widen(quad[1], loose / 2.0),
            [hem[0] + hem_half, hem[1]],
            [hem[0] - hem_half, hem[1]],
        ],
        class::TOP,
    );
    let sleeve_w = pose.arm_width + loose.min(1.5);
    for i in 0..2 {
        match sleeves {
            Sleeves::None => capsule(&mut m, sk.shoulders[i], sk.shoulders[i], sleeve_w * 1.2, class::TOP),
            Sleeves::Short => {
                let end = lerp(sk.shoulders[i], sk.elbows[i], rng.random_range(0.4..0.8));
                capsule(&mut m, sk.shoulders[i], end, sleeve_w, class::TOP);
            }
            Sleeves::Long => {
                capsule(&mut m, sk.shoulders[i], sk.elbows[i], sleeve_w, class::TOP);
                let end = lerp(sk.elbows[i], sk.wrists[i], rng.random_range(0.75..0.95));
                capsule(&mut m, sk.elbows[i], end, sleeve_w * 0.9, class::TOP);
            }
        }
    }

    // Head: face, hair cap, optional hat.
    disk(&mut m, sk.head, sk.head_r, class::FACE);
    let hairline = sk.head[1] - rng.random_range(0.1..0.45) * sk.head_r;
    disk_above(&mut m, sk.head, sk.head_r + loose.min(1.0), hairline, class::HAIR);
    if hat {
        let brim_y = sk.head[1] - 0.45 * sk.head_r;
        let half = sk.head_r + loose.min(1.5);
        let crown = sk.head[1] - sk.head_r - loose.min(1.0);
        convex(
            &mut m,
            &[
                [sk.head[0] - 0.7 * half, crown],
                [sk.head[0] + 0.7 * half, crown],
                [sk.head[0] + half, brim_y],
                [sk.head[0] - half, brim_y],
            ],
            class::HAT,
        );
    }

    // A small bag hanging from one hand.
    if bag {
        let i = rng.random_range(0..2);
        let half = (pose.arm_width / 2.0 + 0.6 * over).max(1.5);
        let c = add(sk.wrists[i], [0.0, half * 0.6]);
        convex(
            &mut m,
            &[
                [c[0] - half, c[1] - half],
                [c[0] + half, c[1] - half],
                [c[0] + half, c[1] + half],
                [c[0] - half, c[1] + half],
            ],
            class::BAG,
        );
    }
    m
}

/// Drop labeled pixels farther than `radius` (Chebyshev) from the body.
fn clip_to_silhouette(m: &mut LabelMap, sil: &PartSilhouette, radius: usize) {
    let body = sil.foreground();
    let (w, h) = (m.width, m.height);
    let mut near = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if body.data[y * w + x] {
                for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        near[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    for (v, &ok) in m.data.iter_mut().zip(&near) {
        if !ok {
            *v = class::BACKGROUND;
        }
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn wide<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(lo..hi))
}

/// Per-class base colors for one sample.
fn class_colors<R: Rng + ?Sized>(rng: &mut R, classes: usize) -> Vec<[f32; 3]> {
    const SKIN_TONES: [[f32; 3]; 4] = [
        [0.96, 0.80, 0.69],
        [0.87, 0.67, 0.53],
        [0.68, 0.48, 0.35],
        [0.45, 0.31, 0.22],
    ];
    const HAIR: [[f32; 3]; 4] = [
        [0.10, 0.07, 0.05],
        [0.35, 0.22, 0.10],
        [0.75, 0.60, 0.30],
        [0.50, 0.50, 0.50],
    ];
    let tone = SKIN_TONES[rng.random_range(0..4)];
    let skin = jitter(rng, tone, 0.03);
    let face = skin.map(|v| (v * 1.03).min(1.0));
    let hair = HAIR[rng.random_range(0..4)];
    let hair = jitter(rng, hair, 0.04);
    let top = wide(rng, 0.05, 0.95);
    let bottom = wide(rng, 0.05, 0.85);
    let shoes = wide(rng, 0.05, 0.45);
    let hat = wide(rng, 0.1, 0.9);
    let bag = wide(rng, 0.1, 0.9);
    let bg = [0.88, 0.88, 0.86].map(|v: f32| v + rng.random_range(-0.03..0.03));
    let mut colors = vec![bg, skin, hair, face, top, bottom, shoes, shoes, hat, bag];
    while colors.len() < classes {
        colors.push(wide(rng, 0.1, 0.9));
    }
    colors
}

fn texture<R: Rng + ?Sized>(rng: &mut R, m: &LabelMap, cfg: &ForgeConfig) -> RgbImage {
    let res = cfg.resolution;
    let colors = class_colors(rng, cfg.palette.len());
    let stripes = rng.random_bool(0.3);
    let stripe_period = rng.random_range(3.0..6.0) * cfg.unit();
    let gradient = rng.random_range(-0.03..0.03);
    let noise = Normal::new(0.0, cfg.texture_noise.max(f32::MIN_POSITIVE)).expect("finite std");
    let mut img = RgbImage::filled(res, res, [0.0; 3]);
    for y in 0..res {
        for x in 0..res {
            let p = y * res + x;
            let l = m.data[p];
            let mut c = colors[l as usize];
            let mut shade = 0.0;
            if l == class::BACKGROUND {
                shade += gradient * (y as f32 / res as f32 - 0.5);
            }
            if l == class::TOP && stripes && ((y as f32 / stripe_period) as usize) % 2 == 1 {
                shade -= 0.06;
            }
            let n = if cfg.texture_noise > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            for v in c.iter_mut() {
                *v = (*v + shade + n).clamp(0.0, 1.0);
            }
            img.set_pixel(p, c);
        }
    }
    img
}

/// Deterministic sample for `seed`: pose, silhouette, garment label map
/// and textured image. Label map and silhouette pass the hygiene step.
pub fn generate_sample(seed: u64, cfg: &ForgeConfig) -> Result<ForgedSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = FigurePose::sample(&mut rng, cfg)?;
    let silhouette = render_part_silhouette(&pose, cfg)?;
    let silhouette = PartSilhouette(clean_mask(silhouette.map(), cfg.clean_kernel)?);
    let mut label = draw_garments(&mut rng, &pose, cfg);
    let radius = (cfg.garment_overhang * cfg.unit()).floor() as usize;
    clip_to_silhouette(&mut label, &silhouette, radius);
    let label = clean_mask(&label, cfg.clean_kernel)?;
    let rgb = texture(&mut rng, &label, cfg);
    Ok(ForgedSample {
        label,
        rgb,
        silhouette,
        pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_pose_is_valid_and_symmetric() {
        let cfg = ForgeConfig::default();
        let pose = FigurePose::t_pose(&cfg);
        pose.validate(&cfg).unwrap();
        let sil = render_part_silhouette(&pose, &cfg).unwrap();
        let m = sil.map();
        let res = cfg.resolution;
        // The canvas center is the mirror axis, so x mirrors to res-1-x.
        for y in 0..res {
            for x in 0..res {
                let a = m.get(x, y) == part::LEFT_ARM;
                let b = m.get(res - 1 - x, y) == part::RIGHT_ARM;
                assert_eq!(a, b, "asymmetric at ({x}, {y})");
            }
        }
        assert!(m.data.contains(&part::LEFT_ARM));
    }

    #[test]
    fn lowered_arms_touch_torso() {
        let cfg = ForgeConfig::default();
        let mut pose = FigurePose::t_pose(&cfg);
        pose.shoulders = [0.15; 2];
        let sil = render_part_silhouette(&pose, &cfg).unwrap();
        let m = sil.map();
        let res = cfg.resolution;
        for arm in [part::LEFT_ARM, part::RIGHT_ARM] {
            let mut adjacent = false;
            for y in 0..res {
                for x in 1..res - 1 {
                    if m.get(x, y) == arm
                        && (m.get(x - 1, y) == part::TORSO || m.get(x + 1, y) == part::TORSO)
                    {
                        adjacent = true;
                    }
                }
            }
            assert!(adjacent, "arm {arm} not adjacent to torso");
        }
    }

    #[test]
    fn zero_limb_width_rejected() {
        let cfg = ForgeConfig::default();
        let mut pose = FigurePose::t_pose(&cfg);
        pose.arm_width = 0.0;
        assert!(render_part_silhouette(&pose, &cfg).is_err());
    }

    #[test]
    fn oversized_figure_rejected() {
        let cfg = ForgeConfig::default();
        let mut pose = FigurePose::t_pose(&cfg);
        pose.scale *= 2.0;
        assert!(pose.validate(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_sample() {
        let cfg = ForgeConfig::default();
        assert_eq!(generate_sample(7, &cfg).unwrap(), generate_sample(7, &cfg).unwrap());
        assert_ne!(generate_sample(7, &cfg).unwrap().label, generate_sample(8, &cfg).unwrap().label);
    }

    #[test]
    fn tiny_canvas_rejected() {
        let cfg = ForgeConfig {
            resolution: 16,
            ..ForgeConfig::default()
        };
        assert!(generate_sample(1, &cfg).is_err());
    }
}
