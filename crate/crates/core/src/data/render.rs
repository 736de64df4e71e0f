//! Procedural item images: a per-type silhouette on a white background,
//! filled with a palette colour and overlaid with a texture.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::comparison::TypeId;

pub const MAX_TEXTURES: usize = 5;
pub const MAX_PALETTES: usize = 12;

const HUE_NAMES: [&str; MAX_PALETTES] = [
    "red", "orange", "yellow", "lime", "green", "teal", "cyan", "azure", "blue", "violet", "magenta", "rose",
];
const TEXTURE_NAMES: [&str; MAX_TEXTURES] = ["solid", "striped", "dotted", "checked", "diagonal"];

const NOISE_SIGMA: f64 = 0.02;
const HUE_JITTER: f64 = 0.025;
const SHADE: f64 = 0.45;

fn palette_hue(palette: usize, palettes: usize) -> f64 {
    palette as f64 / palettes as f64
}

/// Name of palette `p` out of `palettes`: the colour-wheel name nearest its
/// hue. Distinct for up to [`MAX_PALETTES`] palettes.
pub fn palette_name(palette: usize, palettes: usize) -> &'static str {
    let slot = (palette_hue(palette, palettes) * MAX_PALETTES as f64).round() as usize % MAX_PALETTES;
    HUE_NAMES[slot]
}

pub fn texture_name(texture: usize) -> &'static str {
    TEXTURE_NAMES[texture]
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn in_rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    (u0..u1).contains(&u) && (v0..v1).contains(&v)
}

fn dist(u: f64, v: f64, cu: f64, cv: f64) -> f64 {
    ((u - cu).powi(2) + (v - cv).powi(2)).sqrt()
}

/// Whether normalized coordinate `(u, v)` (x right, y down, both in [0,1))
/// lies inside the silhouette of `t`.
pub fn silhouette(t: TypeId, u: f64, v: f64) -> bool {
    match t {
        TypeId::Top => {
            let torso = in_rect(u, v, 0.3, 0.7, 0.2, 0.86);
            let sleeves = in_rect(u, v, 0.1, 0.9, 0.2, 0.44);
            (torso || sleeves) && dist(u, v, 0.5, 0.18) > 0.09
        }
        TypeId::Bottom => {
            in_rect(u, v, 0.26, 0.74, 0.1, 0.26)
                || in_rect(u, v, 0.26, 0.47, 0.26, 0.92)
                || in_rect(u, v, 0.53, 0.74, 0.26, 0.92)
        }
        TypeId::Shoe => in_rect(u, v, 0.1, 0.9, 0.56, 0.8) || in_rect(u, v, 0.1, 0.46, 0.28, 0.56),
        TypeId::Bag => {
            let d = dist(u, v, 0.5, 0.42);
            in_rect(u, v, 0.18, 0.82, 0.42, 0.86) || (v < 0.42 && (0.14..0.22).contains(&d))
        }
        TypeId::Accessory => dist(u, v, 0.5, 0.5) < 0.34,
    }
}

fn texture_shade(texture: usize, x: usize, y: usize, phase: usize) -> bool {
    match texture {
        1 => ((y + phase) / 2).is_multiple_of(2),
        2 => {
            let (dx, dy) = ((x + phase) % 6, (y + phase) % 6);
            let (fx, fy) = (dx as f64 - 2.5, dy as f64 - 2.5);
            fx * fx + fy * fy <= 2.0
        }
        3 => (((x + phase) / 3) + ((y + phase) / 3)).is_multiple_of(2),
        4 => ((x + y + phase) / 2).is_multiple_of(2),
        _ => false,
    }
}

/// Renders one `[3, side, side]` image with values in `[0, 1]`.
pub fn render_item(t: TypeId, palette: usize, palettes: usize, texture: usize, side: usize, rng: &mut impl Rng) -> Vec<f32> {
    let hue = palette_hue(palette, palettes) + rng.gen_range(-HUE_JITTER..=HUE_JITTER);
    let base = hsv_to_rgb(hue, rng.gen_range(0.65..0.9), rng.gen_range(0.65..0.9));
    let phase = rng.gen_range(0..6);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let plane = side * side;
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
            let rgb = if silhouette(t, u, v) {
                let k = if texture_shade(texture, x, y, phase) { SHADE } else { 1.0 };
                base.map(|c| c * k)
            } else {
                [1.0; 3]
            };
            for (c, value) in rgb.iter().enumerate() {
                let noisy = value + noise.sample(rng);
                // 8-bit levels, exactly what a PPM round trip yields
                let level = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
                img[c * plane + y * side + x] = f32::from(level) / 255.0;
            }
        }
    }
    img
}
