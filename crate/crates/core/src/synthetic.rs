//! Synthetic frame pairs with exact ground-truth flow.
//!
//! Textures are sums of eight random sinusoids per channel, with wavelengths
//! between 6 and 24 pixels. The second frame is the first one resampled at
//! `p - t` with clamp-to-edge bilinear interpolation, so the ground truth is
//! the constant field `t`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flow::{FlowField, Resolution};
use crate::ops::bilinear_sample;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const WAVES: usize = 8;
const WAVELENGTH: (f64, f64) = (6.0, 24.0);

/// Axis-aligned rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    Translation { seed: u64, t: (f64, f64) },
    FlatRegion { seed: u64, rect: Rect, t: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub frame1: Tensor,
    pub frame2: Tensor,
    pub gt_flow: FlowField,
    pub kind: SceneKind,
}

/// `[3,H,W]` band-limited texture with values in `[0.1, 0.9]`.
pub fn texture(seed: u64, height: usize, width: usize) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let mut out = Tensor::zeros(&[3, height, width]);
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
            .map(|_| {
                let k = 2.0 * PI / rng.uniform(WAVELENGTH.0, WAVELENGTH.1);
                let dir = rng.uniform(0.0, 2.0 * PI);
                let phase = rng.uniform(0.0, 2.0 * PI);
                let amp = rng.uniform(0.5, 1.0);
                (k * dir.cos(), k * dir.sin(), phase, amp)
            })
            .collect();
        let total: f64 = waves.iter().map(|w| w.3).sum();
        for y in 0..height {
            for x in 0..width {
                let s: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
                    .sum();
                out.set(&[c, y, x], 0.5 + 0.4 * s / total);
            }
        }
    }
    out
}

/// Resamples `frame` at `p - t` for every pixel `p`.
pub fn translate(frame: &Tensor, t: (f64, f64)) -> Result<Tensor> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| ((i % w) as f64 - t.0, (i / w) as f64 - t.1))
        .collect();
    bilinear_sample(frame, &coords)?.reshape(&[3, h, w])
}

fn check_shift(op: &'static str, height: usize, width: usize, t: (f64, f64)) -> Result<()> {
    let limit = height.min(width) as f64 / 4.0;
    if !(t.0.abs() < limit && t.1.abs() < limit) {
        return Err(Error::invalid(
            op,
            format!("shift ({}, {}) must stay below {limit} pixels per axis", t.0, t.1),
        ));
    }
    Ok(())
}

/// Textured frame and its copy shifted by `t`.
pub fn gen_translation_pair(texture_seed: u64, height: usize, width: usize, t: (f64, f64)) -> Result<SyntheticScene> {
    check_shift("gen_translation_pair", height, width, t)?;
    let frame1 = texture(texture_seed, height, width);
    let frame2 = translate(&frame1, t)?;
    Ok(SyntheticScene {
        frame1,
        frame2,
        gt_flow: FlowField::constant(height, width, t, Resolution::Full),
        kind: SceneKind::Translation {
            seed: texture_seed,
            t,
        },
    })
}

/// Textured background with a constant-color rectangle, shifted by `t`.
pub fn gen_flat_region_scene(
    texture_seed: u64,
    height: usize,
    width: usize,
    rect: Rect,
    t: (f64, f64),
) -> Result<SyntheticScene> {
    check_shift("gen_flat_region_scene", height, width, t)?;
    if rect.width == 0 || rect.height == 0 || rect.x + rect.width > width || rect.y + rect.height > height {
        return Err(Error::invalid(
            "gen_flat_region_scene",
            format!("rectangle {rect:?} is not inside the {width}x{height} frame"),
        ));
    }
    let mut frame1 = texture(texture_seed, height, width);
    let fill = [0.5, 0.5, 0.5];
    for (c, &v) in fill.iter().enumerate() {
        for y in rect.y..rect.y + rect.height {
            for x in rect.x..rect.x + rect.width {
                frame1.set(&[c, y, x], v);
            }
        }
    }
    let frame2 = translate(&frame1, t)?;
    Ok(SyntheticScene {
        frame1,
        frame2,
        gt_flow: FlowField::constant(height, width, t, Resolution::Full),
        kind: SceneKind::FlatRegion {
            seed: texture_seed,
            rect,
            t,
        },
    })
}

/// Largest difference between `frame2(p)` and `frame1` bilinearly sampled at
/// `p - flow(p)`, over pixels whose source lies inside the frame.
pub fn warp_residual(scene: &SyntheticScene) -> Result<f64> {
    let (h, w) = (scene.frame1.shape()[1], scene.frame1.shape()[2]);
    let mut worst: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = scene.gt_flow.at(y, x);
            let (sx, sy) = (x as f64 - u, y as f64 - v);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let s = bilinear_sample(&scene.frame1, &[(sx, sy)])?;
            for c in 0..3 {
                worst = worst.max((s.data()[c] - scene.frame2.at(&[c, y, x])).abs());
            }
        }
    }
    Ok(worst)
}

/// Scenes used by the toy-training run: 64x64 textures moving by up to (6, 4).
pub fn toy_scenes(seed: u64) -> Result<Vec<SyntheticScene>> {
    let shifts = [(6.0, 4.0), (4.0, 2.0), (5.0, 3.0), (3.0, 4.0)];
    shifts
        .iter()
        .enumerate()
        .map(|(i, &t)| gen_translation_pair(seed.wrapping_add(i as u64), 64, 64, t))
        .collect()
}
