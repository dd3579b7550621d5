//! Procedural, eye-aligned face images.
//!
//! Each identity seed fixes skin tone, hair, face proportions, eye spacing and
//! colour, and mouth shape. The eye row is the same for every identity
//! (`round(0.42·S)`) and the face is centred horizontally, so all faces share
//! one alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::error::{FdnnError, Result};

pub const MIN_FACE_SIZE: usize = 16;
pub const EYE_ROW_FRACTION: f64 = 0.42;

/// Row of the eye centres for an S×S face.
pub fn eye_row(size: usize) -> usize {
    (EYE_ROW_FRACTION * size as f64).round() as usize
}

/// Identity-specific drawing parameters, all in units of the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceParams {
    pub background: [f64; 3],
    pub background_tint: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub face_center_y: f64,
    pub face_half_width: f64,
    pub face_half_height: f64,
    pub hair_volume: f64,
    pub hairline: f64,
    pub eye_offset: f64,
    pub eye_half_width: f64,
    pub eye_half_height: f64,
    pub mouth_y: f64,
    pub mouth_half_width: f64,
    pub mouth_curve: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

impl FaceParams {
    pub fn sample(id_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id_seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let skin = lerp3([0.98, 0.84, 0.72], [0.40, 0.26, 0.17], u(0.0, 1.0));
        let skin = skin.map(|v| (v + u(-0.04, 0.04)).clamp(0.0, 1.0));
        let hair_base = [
            [0.08, 0.06, 0.05],
            [0.35, 0.22, 0.12],
            [0.85, 0.72, 0.40],
            [0.60, 0.25, 0.10],
            [0.70, 0.70, 0.72],
        ];
        let hi = (u(0.0, hair_base.len() as f64) as usize).min(hair_base.len() - 1);
        let hair = hair_base[hi].map(|v| (v + u(-0.06, 0.06)).clamp(0.0, 1.0));
        let iris_base = [[0.25, 0.45, 0.75], [0.35, 0.22, 0.10], [0.30, 0.55, 0.30]];
        let ii = (u(0.0, 3.0) as usize).min(2);
        let iris = iris_base[ii].map(|v| (v + u(-0.05, 0.05)).clamp(0.0, 1.0));
        FaceParams {
            background: [u(0.2, 0.9), u(0.2, 0.9), u(0.2, 0.9)],
            background_tint: [u(-0.2, 0.2), u(-0.2, 0.2), u(-0.2, 0.2)],
            skin,
            hair,
            iris,
            lips: [u(0.55, 0.85), u(0.15, 0.35), u(0.20, 0.40)],
            face_center_y: u(0.50, 0.56),
            face_half_width: u(0.25, 0.34),
            face_half_height: u(0.33, 0.42),
            hair_volume: u(0.03, 0.10),
            hairline: u(0.22, 0.32),
            eye_offset: u(0.11, 0.16),
            eye_half_width: u(0.045, 0.075),
            eye_half_height: u(0.025, 0.04),
            mouth_y: u(0.66, 0.74),
            mouth_half_width: u(0.07, 0.13),
            mouth_curve: u(-0.02, 0.03),
        }
    }
}

/// A rendered face plus the pixel coordinates that belong to the eyes.
pub struct RenderedFace {
    pub image: Image,
    pub eye_pixels: Vec<(usize, usize)>,
}

/// Renders identity `id_seed` at S×S.
pub fn gen_face(id_seed: u64, size: usize) -> Result<Image> {
    Ok(render_face(&FaceParams::sample(id_seed), size)?.image)
}

pub fn render_face(p: &FaceParams, size: usize) -> Result<RenderedFace> {
    if size < MIN_FACE_SIZE {
        return Err(FdnnError::config(format!(
            "face size must be at least {MIN_FACE_SIZE}, got {size}"
        )));
    }
    let s = size as f64;
    let cx = s / 2.0;
    let cy = p.face_center_y * s;
    let (a, b) = (p.face_half_width * s, p.face_half_height * s);
    let ey = eye_row(size);
    let eye_dx = p.eye_offset * s;
    // integer half-height keeps every eye symmetric about its centre row
    let eye_ry = (p.eye_half_height * s).round().max(1.0);
    let eye_rx = (p.eye_half_width * s).max(1.5);
    let hair_top = cy - b - p.hair_volume * s;
    let hairline = cy - b + p.hairline * 2.0 * b;

    let mut rgb = vec![[0.0; 3]; size * size];
    let mut eye_pixels = Vec::new();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = py / s;
            let mut c = [0, 1, 2].map(|i| p.background[i] + p.background_tint[i] * (t - 0.5));

            let face_r = ((px - cx) / a).powi(2) + ((py - cy) / b).powi(2);
            let hair_r = ((px - cx) / (a + p.hair_volume * s)).powi(2)
                + ((py - cy + 0.5 * p.hair_volume * s) / (b + p.hair_volume * s)).powi(2);
            let in_face = face_r <= 1.0;
            if hair_r <= 1.0 && py >= hair_top && (!in_face || py < hairline) {
                c = p.hair;
            } else if in_face {
                let shade = 1.0 - 0.18 * ((px - cx) / a).powi(2) - 0.08 * ((py - cy) / b).max(0.0);
                c = p.skin.map(|v| v * shade);
                // nose ridge
                if (px - cx).abs() < 0.5 && py > ey as f64 + eye_ry && py < cy + 0.12 * s {
                    c = p.skin.map(|v| v * 0.8);
                }
                // eyebrows
                let brow_y = ey as f64 - eye_ry - 0.045 * s;
                if (py - brow_y).abs() < 0.6 && ((px - cx).abs() - eye_dx).abs() < eye_rx {
                    c = p.hair.map(|v| v * 0.8);
                }
                // mouth: a shallow parabola
                let mx = (px - cx) / (p.mouth_half_width * s);
                let mouth_line = p.mouth_y * s + p.mouth_curve * s * (mx * mx);
                if mx.abs() <= 1.0 && (py - mouth_line).abs() < 0.55 + 0.5 * (1.0 - mx * mx) {
                    c = p.lips;
                }
            }
            // eyes, tested on integer row offsets so each eye is row-symmetric
            let dy = y as f64 - ey as f64;
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let r = ((px - ex) / eye_rx).powi(2) + (dy / (eye_ry + 0.5)).powi(2);
                if r <= 1.0 {
                    let iris_r = ((px - ex) / (0.45 * eye_rx)).powi(2) + (dy / (eye_ry + 0.5)).powi(2);
                    c = if iris_r <= 0.3 {
                        [0.04, 0.03, 0.03]
                    } else if iris_r <= 1.0 {
                        p.iris
                    } else {
                        [0.95, 0.95, 0.93]
                    };
                    eye_pixels.push((y, x));
                }
            }
            rgb[y * size + x] = c;
        }
    }
    let image = Image::from_fn(size, size, |c, y, x| rgb[y * size + x][c]);
    Ok(RenderedFace { image, eye_pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ppm::encode_ppm;
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        assert_eq!(gen_face(17, 32).unwrap(), gen_face(17, 32).unwrap());
    }

    #[test]
    fn eyes_are_aligned() {
        for size in [16, 24, 32, 64, 128] {
            for seed in 0..50 {
                let f = render_face(&FaceParams::sample(seed), size).unwrap();
                assert!(!f.eye_pixels.is_empty());
                let mean_row = f.eye_pixels.iter().map(|&(y, _)| y as f64).sum::<f64>() / f.eye_pixels.len() as f64;
                assert_eq!(mean_row, eye_row(size) as f64, "size {size} seed {seed}");
                let mean_col = f.eye_pixels.iter().map(|&(_, x)| x as f64).sum::<f64>() / f.eye_pixels.len() as f64;
                assert!((mean_col - size as f64 / 2.0 + 0.5).abs() < 0.75);
            }
        }
    }

    #[test]
    fn distinct_identities() {
        let mut seen = HashSet::new();
        for seed in 0..1000u64 {
            assert!(seen.insert(encode_ppm(&gen_face(seed, 16).unwrap())), "seed {seed}");
        }
    }

    #[test]
    fn rejects_tiny_sizes() {
        assert!(matches!(gen_face(0, 8), Err(FdnnError::Config(_))));
    }
}
