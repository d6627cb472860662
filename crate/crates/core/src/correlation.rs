//! All-pairs correlation pyramid.
//!
//! Level 0 holds every inner product `<F1(i,j), F2(x,y)>` as an
//! `[H, W, H, W]` volume; level `l` average-pools the last two axes of level
//! `l-1` by 2. Memory is `O(L * H^2 W^2)` values.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest feature-grid extent accepted by [`correlation_oracle`].
pub const ORACLE_MAX_EXTENT: usize = 16;

#[derive(Debug, Clone)]
pub struct CorrelationPyramid<'g> {
    pub levels: Vec<Var<'g>>,
}

impl CorrelationPyramid<'_> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Detached copies of every level.
    pub fn values(&self) -> Vec<Tensor> {
        self.levels.iter().map(|l| l.value().as_ref().clone()).collect()
    }
}

fn check_features(f1: &[usize], f2: &[usize], levels: usize) -> Result<(usize, usize, usize)> {
    const OP: &str = "correlation";
    if f1.len() != 3 || f1 != f2 {
        return Err(Error::shape(
            OP,
            format!("feature maps must be equal [D,H,W], got {f1:?} and {f2:?}"),
        ));
    }
    if levels == 0 {
        return Err(Error::invalid(OP, "at least one level is required"));
    }
    let (d, h, w) = (f1[0], f1[1], f1[2]);
    let m = 1usize << (levels - 1);
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            OP,
            format!("feature extents {h}x{w} must be divisible by {m} for {levels} levels"),
        ));
    }
    Ok((d, h, w))
}

/// Builds the pyramid on the tape; `scale` divides by `sqrt(D)`.
pub fn build_correlation_pyramid<'g>(
    f1: Var<'g>,
    f2: Var<'g>,
    levels: usize,
    scale: bool,
) -> Result<CorrelationPyramid<'g>> {
    let (d, h, w) = check_features(&f1.shape(), &f2.shape(), levels)?;
    let a = f1.reshape(&[d, h * w])?.permute(&[1, 0])?;
    let b = f2.reshape(&[d, h * w])?;
    let mut c = a.matmul(b)?.reshape(&[h, w, h, w])?;
    if scale {
        c = c.scale(1.0 / (d as f64).sqrt());
    }
    let mut out = vec![c];
    for _ in 1..levels {
        let prev = *out.last().unwrap();
        out.push(prev.avg_pool2d(2)?);
    }
    Ok(CorrelationPyramid { levels: out })
}

/// Tensor-level convenience wrapper around [`build_correlation_pyramid`].
pub fn correlation_pyramid(f1: &Tensor, f2: &Tensor, levels: usize, scale: bool) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let pyr = build_correlation_pyramid(g.constant(f1.clone()), g.constant(f2.clone()), levels, scale)?;
    Ok(pyr.values())
}

/// Naive-loop pyramid for extents up to [`ORACLE_MAX_EXTENT`].
pub fn correlation_oracle(f1: &Tensor, f2: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (d, h, w) = check_features(f1.shape(), f2.shape(), levels)?;
    if h > ORACLE_MAX_EXTENT || w > ORACLE_MAX_EXTENT {
        return Err(Error::invalid(
            "correlation_oracle",
            format!("extents {h}x{w} exceed the oracle limit {ORACLE_MAX_EXTENT}"),
        ));
    }
    let mut base = Tensor::zeros(&[h, w, h, w]);
    for i in 0..h {
        for j in 0..w {
            for x in 0..h {
                for y in 0..w {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += f1.at(&[c, i, j]) * f2.at(&[c, x, y]);
                    }
                    base.set(&[i, j, x, y], s);
                }
            }
        }
    }
    let mut out = vec![base];
    for l in 1..levels {
        let prev = &out[l - 1];
        let (ph, pw) = (prev.shape()[2], prev.shape()[3]);
        let mut next = Tensor::zeros(&[h, w, ph / 2, pw / 2]);
        for i in 0..h {
            for j in 0..w {
                for x in 0..ph / 2 {
                    for y in 0..pw / 2 {
                        let s = prev.at(&[i, j, 2 * x, 2 * y])
                            + prev.at(&[i, j, 2 * x + 1, 2 * y])
                            + prev.at(&[i, j, 2 * x, 2 * y + 1])
                            + prev.at(&[i, j, 2 * x + 1, 2 * y + 1]);
                        next.set(&[i, j, x, y], s / 4.0);
                    }
                }
            }
        }
        out.push(next);
    }
    Ok(out)
}
