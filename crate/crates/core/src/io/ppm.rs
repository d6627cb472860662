//! Binary PPM (`P6`) images as `[3,H,W]` tensors with values in `[0,1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes to 8 bits per channel (values clamped to `[0,1]`).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("image must be [3,H,W], got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for p in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + p];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while let Some(&c) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(c) if c.is_ascii_whitespace() => self.pos += 1,
                _ => return,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PPM header".into()))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM: missing P6 magic".into()));
    }
    let mut hd = Header { bytes, pos: 2 };
    let w = hd.number()?;
    let h = hd.number()?;
    let maxval = hd.number()?;
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("invalid PPM extents {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if !bytes.get(hd.pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(Error::Format("malformed PPM header".into()));
    }
    let data = &bytes[hd.pos + 1..];
    let plane = w * h;
    if data.len() != 3 * plane {
        return Err(Error::Length {
            expected: 3 * plane,
            found: data.len(),
        });
    }
    let scale = maxval as f64;
    let mut out = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = data[3 * p + c] as f64 / scale;
        }
    }
    Tensor::new(&[3, h, w], out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    super::write_atomic(path, &encode_ppm(image)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_of_quantized_values() {
        let img = Tensor::from_fn(&[3, 2, 3], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 6) as f64 * 51.0 / 255.0);
        let bytes = encode_ppm(&img).unwrap();
        assert!(decode_ppm(&bytes).unwrap().bit_eq(&img));
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut b = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        b.extend_from_slice(&[255, 0, 51]);
        let t = decode_ppm(&b).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn rejects_truncated_payload() {
        let b = b"P6 2 2 255\n\x00\x00\x00".to_vec();
        assert!(matches!(decode_ppm(&b), Err(Error::Length { .. })));
        assert!(matches!(decode_ppm(b"P3 1 1 255\n"), Err(Error::Format(_))));
    }
}
