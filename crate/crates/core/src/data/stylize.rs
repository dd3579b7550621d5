//! Deterministic parametric "artistic" filters used to synthesize stylized faces.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{FdnnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleKind {
    Identity,
    /// Per-channel posterization to `levels` values plus dark strokes on strong edges.
    PosterEdge {
        levels: u32,
        edge_threshold: f64,
    },
    /// Hue rotation followed by a sinusoidal coordinate warp.
    HueWarp {
        hue_degrees: f64,
        amplitude: f64,
        frequency: f64,
    },
    /// `block`×`block` averaging with dark grid lines.
    Mosaic {
        block: usize,
    },
    /// Colour inversion then a (2r+1)² box blur.
    InvertBlur {
        radius: usize,
    },
    /// Luminance quantized into `bands` bands, each painted with a palette colour.
    ContourBands {
        bands: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleSplit {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub split: StyleSplit,
    #[serde(flatten)]
    pub kind: StyleKind,
}

impl StyleSpec {
    pub fn new(name: impl Into<String>, kind: StyleKind, split: StyleSplit) -> Self {
        StyleSpec {
            name: name.into(),
            split,
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FdnnError::config(format!("style {:?}: {msg}", self.name)));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
            return bad("names must be non-empty ASCII alphanumerics or '-'".into());
        }
        match self.kind {
            StyleKind::PosterEdge { levels, edge_threshold } => {
                if levels < 2 {
                    return bad(format!("posterization needs at least 2 levels, got {levels}"));
                }
                if !(edge_threshold > 0.0) {
                    return bad(format!("edge threshold must be positive, got {edge_threshold}"));
                }
            }
            StyleKind::HueWarp {
                hue_degrees,
                amplitude,
                frequency,
            } => {
                if !(hue_degrees.is_finite() && amplitude.is_finite() && frequency.is_finite()) {
                    return bad("hue warp parameters must be finite".into());
                }
            }
            StyleKind::Mosaic { block } => {
                if block < 1 {
                    return bad("mosaic block must be at least 1".into());
                }
            }
            StyleKind::ContourBands { bands } => {
                if bands < 2 {
                    return bad(format!("contour banding needs at least 2 bands, got {bands}"));
                }
            }
            StyleKind::Identity | StyleKind::InvertBlur { .. } => {}
        }
        Ok(())
    }
}

/// The three styles used for training.
pub fn default_seen_styles() -> Vec<StyleSpec> {
    vec![
        StyleSpec::new(
            "poster-edge",
            StyleKind::PosterEdge {
                levels: 4,
                edge_threshold: 0.08,
            },
            StyleSplit::Seen,
        ),
        StyleSpec::new(
            "hue-warp",
            StyleKind::HueWarp {
                hue_degrees: 120.0,
                amplitude: 1.5,
                frequency: 2.0,
            },
            StyleSplit::Seen,
        ),
        StyleSpec::new("mosaic", StyleKind::Mosaic { block: 4 }, StyleSplit::Seen),
    ]
}

/// Styles held out for testing only.
pub fn default_unseen_styles() -> Vec<StyleSpec> {
    vec![
        StyleSpec::new("invert-blur", StyleKind::InvertBlur { radius: 1 }, StyleSplit::Unseen),
        StyleSpec::new(
            "contour-bands",
            StyleKind::ContourBands { bands: 5 },
            StyleSplit::Unseen,
        ),
    ]
}

pub fn stylize(image: &Image, spec: &StyleSpec) -> Result<Image> {
    spec.validate()?;
    Ok(match spec.kind {
        StyleKind::Identity => image.clone(),
        StyleKind::PosterEdge { levels, edge_threshold } => poster_edge(image, levels, edge_threshold),
        StyleKind::HueWarp {
            hue_degrees,
            amplitude,
            frequency,
        } => hue_warp(image, hue_degrees, amplitude, frequency),
        StyleKind::Mosaic { block } => mosaic(image, block),
        StyleKind::InvertBlur { radius } => invert_blur(image, radius),
        StyleKind::ContourBands { bands } => contour_bands(image, bands),
    })
}

fn posterize(v: f64, levels: u32) -> f64 {
    let k = (levels - 1) as f64;
    (v * k).round() / k
}

/// Sobel gradient magnitude of luma, with replicated borders, scaled to per-pixel units.
fn edge_magnitude(image: &Image) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let luma = image.luma_plane();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        luma[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = gx.hypot(gy) / 8.0;
        }
    }
    out
}

fn poster_edge(image: &Image, levels: u32, threshold: f64) -> Image {
    let w = image.width();
    let edges = edge_magnitude(image);
    Image::from_fn(image.height(), w, |c, y, x| {
        let q = posterize(image.get(c, y, x), levels);
        if edges[y * w + x] > threshold {
            0.25 * q
        } else {
            q
        }
    })
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize).min(5);
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn bilinear(image: &Image, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (image.height(), image.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
    let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn hue_warp(image: &Image, degrees: f64, amplitude: f64, frequency: f64) -> Image {
    let (h, w) = (image.height(), image.width());
    let shift = degrees / 360.0;
    let rotated = Image::from_fn(h, w, {
        let mut cache = vec![None; h * w];
        move |c, y, x| {
            let px: &mut Option<[f64; 3]> = &mut cache[y * w + x];
            let rgb = px.get_or_insert_with(|| {
                let [hh, s, v] = rgb_to_hsv(image.pixel(y, x));
                hsv_to_rgb([hh + shift, s, v])
            });
            rgb[c]
        }
    });
    let tau = std::f64::consts::TAU;
    Image::from_fn(h, w, |c, y, x| {
        let sy = y as f64 + amplitude * (tau * frequency * x as f64 / w as f64).sin();
        let sx = x as f64 + amplitude * (tau * frequency * y as f64 / h as f64).sin();
        bilinear(&rotated, c, sy, sx)
    })
}

fn mosaic(image: &Image, block: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let mut means = vec![[0.0; 3]; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let ys = by * block..((by + 1) * block).min(h);
            let xs = bx * block..((bx + 1) * block).min(w);
            let n = (ys.len() * xs.len()) as f64;
            let mut acc = [0.0; 3];
            for y in ys {
                for x in xs.clone() {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += image.get(c, y, x);
                    }
                }
            }
            means[by * bw + bx] = acc.map(|a| a / n);
        }
    }
    Image::from_fn(h, w, |c, y, x| {
        let m = means[(y / block) * bw + x / block][c];
        if y % block == 0 || x % block == 0 {
            0.5 * m
        } else {
            m
        }
    })
}

fn invert_blur(image: &Image, radius: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let r = radius as isize;
    Image::from_fn(h, w, |c, y, x| {
        let (mut acc, mut n) = (0.0, 0.0);
        for yy in (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1) {
            for xx in (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1) {
                acc += 1.0 - image.get(c, yy as usize, xx as usize);
                n += 1.0;
            }
        }
        acc / n
    })
}

fn band_colour(band: u32, bands: u32) -> [f64; 3] {
    let hue = (0.62 + 0.37 * band as f64).rem_euclid(1.0);
    let value = (band as f64 + 0.5) / bands as f64;
    hsv_to_rgb([hue, 0.6, 0.25 + 0.75 * value])
}

fn contour_bands(image: &Image, bands: u32) -> Image {
    let w = image.width();
    let luma = image.luma_plane();
    Image::from_fn(image.height(), w, |c, y, x| {
        let band = ((luma[y * w + x] * bands as f64).floor() as u32).min(bands - 1);
        band_colour(band, bands)[c]
    })
}
