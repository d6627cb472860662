//! Middlebury `.flo`: `"PIEH"`, `i32` width, `i32` height, then `(u, v)`
//! pairs of little-endian `f32` in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{FlowField, Resolution};
use crate::tensor::Tensor;

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (h, w) = (flow.height(), flow.width());
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for (u, v) in flow.u().data().iter().zip(flow.v().data()) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 4 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::Format("not a .flo file: missing PIEH magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Length {
            expected: 12,
            found: bytes.len(),
        });
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::Format(format!("invalid .flo extents {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = (w as u64) * (h as u64) * 8 + 12;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected: expected as usize,
            found: bytes.len(),
        });
    }
    let vals: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let u = vals.iter().step_by(2).copied().collect();
    let v = vals.iter().skip(1).step_by(2).copied().collect();
    FlowField::new(
        Tensor::new(&[h, w], u)?,
        Tensor::new(&[h, w], v)?,
        Resolution::Full,
    )
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    decode_flo(&std::fs::read(path)?)
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    super::write_atomic(path, &encode_flo(flow))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_hand_built_header() {
        let mut b = FLO_MAGIC.to_vec();
        b.extend_from_slice(&2i32.to_le_bytes());
        b.extend_from_slice(&1i32.to_le_bytes());
        for v in [1f32, 2.0, 3.0, 4.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let f = decode_flo(&b).unwrap();
        assert_eq!(f.u().data(), &[1.0, 3.0]);
        assert_eq!(f.v().data(), &[2.0, 4.0]);
        assert_eq!(encode_flo(&f), b);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let f = FlowField::constant(2, 2, (1.0, -1.0), Resolution::Full);
        let mut b = encode_flo(&f);
        assert!(matches!(decode_flo(&b[..b.len() - 1]), Err(Error::Length { .. })));
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_flo(&b), Err(Error::Format(_))));
    }
}
