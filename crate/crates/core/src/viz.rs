//! Flow color coding on the 55-entry Middlebury color wheel.
//!
//! Hue follows the flow direction and saturation the magnitude relative to
//! the largest vector (or a caller-supplied cap); zero flow is white.

use std::f64::consts::PI;

use crate::flow::FlowField;
use crate::tensor::Tensor;

const SEGMENTS: [(usize, [u8; 3], [u8; 3]); 6] = [
    (15, [255, 0, 0], [255, 255, 0]),
    (6, [255, 255, 0], [0, 255, 0]),
    (4, [0, 255, 0], [0, 255, 255]),
    (11, [0, 255, 255], [0, 0, 255]),
    (13, [0, 0, 255], [255, 0, 255]),
    (6, [255, 0, 255], [255, 0, 0]),
];

/// The wheel as RGB triples in `[0,1]`, starting at red.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for (n, from, to) in SEGMENTS {
        for i in 0..n {
            let t = i as f64 / n as f64;
            let mut c = [0.0; 3];
            for k in 0..3 {
                let a = from[k] as f64;
                let b = to[k] as f64;
                c[k] = (a + (b - a) * t).floor() / 255.0;
            }
            wheel.push(c);
        }
    }
    wheel
}

/// Color of a vector with normalized magnitude `rad` and direction `angle`
/// (radians, `atan2(v, u)`).
pub fn direction_color(wheel: &[[f64; 3]], angle: f64, rad: f64) -> [f64; 3] {
    let n = wheel.len();
    // Indexed by the reversed vector, as in the Middlebury reference code.
    let a = (angle - PI) / (2.0 * PI);
    let a = a - a.floor();
    let fk = a * n as f64;
    let k0 = (fk.floor() as usize) % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        out[c] = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
    }
    out
}

/// `[3,H,W]` image in `[0,1]`. Magnitudes are divided by `cap`, or by the
/// largest magnitude in the field when `cap` is `None`.
pub fn flow_to_color(flow: &FlowField, cap: Option<f64>) -> Tensor {
    let wheel = color_wheel();
    let (h, w) = (flow.height(), flow.width());
    let mags: Vec<f64> = flow
        .u()
        .data()
        .iter()
        .zip(flow.v().data())
        .map(|(u, v)| u.hypot(*v))
        .collect();
    let norm = cap.unwrap_or_else(|| mags.iter().copied().fold(0.0, f64::max));
    let plane = h * w;
    let mut out = vec![1.0; 3 * plane];
    for p in 0..plane {
        if mags[p] == 0.0 || !(norm > 0.0) {
            continue;
        }
        let angle = flow.v().data()[p].atan2(flow.u().data()[p]);
        let rgb = direction_color(&wheel, angle, mags[p] / norm);
        for c in 0..3 {
            out[c * plane + p] = rgb[c];
        }
    }
    Tensor::new(&[3, h, w], out).unwrap()
}
