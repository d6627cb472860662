//! Dense two-component displacement fields.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Units of a [`FlowField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    /// Feature-grid pixels at 1/8 of the image resolution.
    Eighth,
    /// Image pixels.
    Full,
}

/// Horizontal (`u`) and vertical (`v`) displacement per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    u: Tensor,
    v: Tensor,
    resolution: Resolution,
}

impl FlowField {
    pub fn new(u: Tensor, v: Tensor, resolution: Resolution) -> Result<Self> {
        if u.rank() != 2 || u.shape() != v.shape() {
            return Err(Error::shape(
                "flow field",
                format!("u {:?} and v {:?} must be equal [H,W]", u.shape(), v.shape()),
            ));
        }
        Ok(Self { u, v, resolution })
    }

    pub fn zeros(height: usize, width: usize, resolution: Resolution) -> Self {
        Self::constant(height, width, (0.0, 0.0), resolution)
    }

    pub fn constant(height: usize, width: usize, uv: (f64, f64), resolution: Resolution) -> Self {
        Self {
            u: Tensor::full(&[height, width], uv.0),
            v: Tensor::full(&[height, width], uv.1),
            resolution,
        }
    }

    /// Splits a `[2,H,W]` tensor into its components.
    pub fn from_tensor(t: &Tensor, resolution: Resolution) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::shape(
                "flow field",
                format!("expected [2,H,W], got {:?}", t.shape()),
            ));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let n = h * w;
        let u = Tensor::new(&[h, w], t.data()[..n].to_vec())?;
        let v = Tensor::new(&[h, w], t.data()[n..].to_vec())?;
        Ok(Self { u, v, resolution })
    }

    /// `[2,H,W]` tensor with `u` first.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.u.data().to_vec();
        data.extend_from_slice(self.v.data());
        Tensor::new(&[2, self.height(), self.width()], data).unwrap()
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.width() + x;
        (self.u.data()[i], self.v.data()[i])
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }

    /// Top-left `height x width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || height > self.height() || width > self.width() {
            return Err(Error::invalid(
                "crop",
                format!("{height}x{width} window of a {}x{} field", self.height(), self.width()),
            ));
        }
        let pick = |t: &Tensor| {
            Tensor::from_fn(&[height, width], |i| t.data()[i[0] * self.width() + i[1]])
        };
        Ok(Self {
            u: pick(&self.u),
            v: pick(&self.v),
            resolution: self.resolution,
        })
    }

    pub(crate) fn check_same_extent(&self, other: &FlowField, op: &'static str) -> Result<()> {
        if self.u.shape() != other.u.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.u.shape(), other.u.shape()),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_keeps_component_order() {
        let t = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = FlowField::from_tensor(&t, Resolution::Full).unwrap();
        assert_eq!(f.at(0, 1), (2.0, 4.0));
        assert_eq!(f.to_tensor(), t);
    }

    #[test]
    fn crop_takes_top_left_window() {
        let u = Tensor::from_fn(&[3, 4], |i| (i[0] * 4 + i[1]) as f64);
        let f = FlowField::new(u.clone(), u, Resolution::Full).unwrap();
        let c = f.crop(2, 3).unwrap();
        assert_eq!(c.u().data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
        assert!(f.crop(4, 1).is_err());
    }
}
