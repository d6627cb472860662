//! Naive nested-loop reference implementations.
//!
//! These are deliberately written without sharing code with the fast paths
//! and are used only by tests and the self-test suites. Pipeline-level
//! oracles live next to their subjects: [`crate::correlation::correlation_oracle`]
//! and [`crate::afl::afl_oracle`].

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::lookup::LookupGrid;
use crate::tensor::Tensor;

/// Every oracle the self-test registry must exercise.
pub const NAMES: [&str; 9] = [
    "conv2d",
    "avg_pool2d",
    "bilinear_sample",
    "softmax",
    "global_max_min_pool",
    "correlation",
    "lookup",
    "axis_attention",
    "relative_shift",
];

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, _, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = bias.data()[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (x * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += kernel.at(&[o, c, dy, dx]) * input.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, y, x], s);
            }
        }
    }
    out
}

pub fn avg_pool2d(input: &Tensor, k: usize) -> Tensor {
    let r = input.rank();
    let (h, w) = (input.shape()[r - 2], input.shape()[r - 1]);
    let outer: usize = input.shape()[..r - 2].iter().product();
    let mut shape = input.shape().to_vec();
    shape[r - 2] = h / k;
    shape[r - 1] = w / k;
    let mut out = Tensor::zeros(&shape);
    let (ho, wo) = (h / k, w / k);
    for o in 0..outer {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += input.data()[o * h * w + (y * k + dy) * w + x * k + dx];
                    }
                }
                out.data_mut()[o * ho * wo + y * wo + x] = s / (k * k) as f64;
            }
        }
    }
    out
}

/// Bilinear value of one `[H,W]` plane (row-major slice) with clamping.
pub fn bilinear_plane(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

pub fn bilinear_sample(field: &Tensor, coords: &[(f64, f64)]) -> Tensor {
    let (c, h, w) = (field.shape()[0], field.shape()[1], field.shape()[2]);
    Tensor::from_fn(&[c, coords.len()], |i| {
        let plane = &field.data()[i[0] * h * w..(i[0] + 1) * h * w];
        let (x, y) = coords[i[1]];
        bilinear_plane(plane, h, w, x, y)
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn global_max_min_pool(input: &Tensor) -> Vec<f64> {
    let c = input.shape()[0];
    let hw = input.len() / c;
    let planes: Vec<&[f64]> = input.data().chunks(hw).collect();
    let mut out: Vec<f64> = planes
        .iter()
        .map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    out.extend(planes.iter().map(|p| p.iter().copied().fold(f64::INFINITY, f64::min)));
    out
}

/// Lookup by explicit per-pixel, per-offset bilinear sampling.
pub fn lookup(pyr: &[Tensor], flow: &FlowField, grids: &[LookupGrid]) -> Result<Tensor> {
    if pyr.len() != grids.len() {
        return Err(Error::invalid("lookup oracle", "one grid per level is required"));
    }
    let (h, w) = (flow.height(), flow.width());
    let channels: usize = grids.iter().map(|g| g.len()).sum();
    let mut out = Tensor::zeros(&[channels, h, w]);
    let mut ch = 0;
    for (l, (level, grid)) in pyr.iter().zip(grids).enumerate() {
        let (lh, lw) = (level.shape()[2], level.shape()[3]);
        let div = (1u64 << l) as f64;
        for &(ox, oy) in &grid.offsets {
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = flow.at(y, x);
                    let plane_start = (y * w + x) * lh * lw;
                    let plane = &level.data()[plane_start..plane_start + lh * lw];
                    let val = bilinear_plane(plane, lh, lw, (x as f64 + u) / div + ox, (y as f64 + v) / div + oy);
                    out.set(&[ch, y, x], val);
                }
            }
            ch += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let one = Tensor::ones(&[1, 3, 3]);
        let box3 = Tensor::ones(&[1, 1, 3, 3]);
        let out = conv2d(&one, &box3, &Tensor::zeros(&[1]), 1, 1);
        assert_eq!(out.at(&[0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0]), 4.0);
        let f = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&f, 2).data(), &[2.5]);
        assert_eq!(bilinear_sample(&f, &[(0.5, 0.5), (-3.0, 9.0)]).data(), &[2.5, 3.0]);
        assert_eq!(global_max_min_pool(&f), vec![4.0, 1.0]);
    }
}
