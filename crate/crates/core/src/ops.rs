//! Forward and backward kernels on plain tensors.
//!
//! The differentiable graph in [`crate::autodiff`] calls into these; they are
//! also usable directly when no gradient is needed.

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::{strides_of, Tensor};

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected a rank-{rank} tensor, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 3 {
            return Err(Error::shape(OP, format!("input must be [C,H,W], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(
                OP,
                format!("kernel must be [C_out,C_in,kH,kW], got {kernel:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {c_in}, kernel expects {kc}"),
            ));
        }
        if h + 2 * pad < kh {
            return Err(Error::shape(
                OP,
                format!("height: padded height {} is smaller than kernel height {kh}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                OP,
                format!("width: padded width {} is smaller than kernel width {kw}", w + 2 * pad),
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds the input into a `[C_in*kH*kW, H'*W']` matrix.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let p = self.pixels();
        let mut cols = vec![0.0; self.k() * p];
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        let p = self.pixels();
        for c in 0..self.c_in {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,kH,kW]` kernel.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias: expected [{}], got {:?}", g.c_out, bias.shape()),
        ));
    }
    let p = g.pixels();
    let mut out = vec![0.0; g.c_out * p];
    for (o, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[o]);
    }
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input.data()
    } else {
        owned = g.im2col(input.data());
        &owned
    };
    gemm(
        g.c_out,
        g.k(),
        p,
        MatRef::row_major(kernel.data(), g.k()),
        MatRef::row_major(cols, p),
        1.0,
        &mut out,
    );
    Tensor::new(&[g.c_out, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
    need_params: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)
        .expect("conv geometry validated in forward");
    let p = g.pixels();
    let k = g.k();
    let dy = grad_out.data();

    let mut grad_input = None;
    if need_input {
        let mut dcols = vec![0.0; k * p];
        gemm(
            k,
            g.c_out,
            p,
            MatRef::transposed(kernel.data(), k),
            MatRef::row_major(dy, p),
            0.0,
            &mut dcols,
        );
        let gx = if g.is_pointwise() {
            dcols
        } else {
            let mut gx = vec![0.0; g.c_in * g.h * g.w];
            g.col2im(&dcols, &mut gx);
            gx
        };
        grad_input = Some(Tensor::new(input.shape(), gx).unwrap());
    }

    let (mut grad_kernel, mut grad_bias) = (None, None);
    if need_params {
        let owned;
        let cols: &[f64] = if g.is_pointwise() {
            input.data()
        } else {
            owned = g.im2col(input.data());
            &owned
        };
        let mut gw = vec![0.0; g.c_out * k];
        gemm(
            g.c_out,
            p,
            k,
            MatRef::row_major(dy, p),
            MatRef::transposed(cols, p),
            0.0,
            &mut gw,
        );
        let gb: Vec<f64> = dy.chunks(p).map(|r| r.iter().sum()).collect();
        grad_kernel = Some(Tensor::new(kernel.shape(), gw).unwrap());
        grad_bias = Some(Tensor::new(&[g.c_out], gb).unwrap());
    }
    (grad_input, grad_kernel, grad_bias)
}

/// Mean over non-overlapping `k x k` blocks of the trailing two dimensions.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    const OP: &str = "avg_pool2d";
    if input.rank() < 2 {
        return Err(Error::shape(OP, format!("need at least 2 dimensions, got {:?}", input.shape())));
    }
    if k == 0 {
        return Err(Error::invalid(OP, "pool size must be at least 1"));
    }
    let r = input.rank();
    let (h, w) = (input.shape()[r - 2], input.shape()[r - 1]);
    if h % k != 0 || w % k != 0 {
        return Err(Error::shape(
            OP,
            format!("trailing extents {h}x{w} are not divisible by pool size {k}"),
        ));
    }
    let (ho, wo) = (h / k, w / k);
    let lead: usize = input.shape()[..r - 2].iter().product();
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; lead * ho * wo];
    for b in 0..lead {
        let src = &input.data()[b * h * w..(b + 1) * h * w];
        let dst = &mut out[b * ho * wo..(b + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    for v in row {
                        acc += v;
                    }
                }
                dst[oy * wo + ox] = acc * scale;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(&shape, out)
}

pub(crate) fn avg_pool2d_backward(input_shape: &[usize], k: usize, grad_out: &Tensor) -> Tensor {
    let r = input_shape.len();
    let (h, w) = (input_shape[r - 2], input_shape[r - 1]);
    let (ho, wo) = (h / k, w / k);
    let lead: usize = input_shape[..r - 2].iter().product();
    let scale = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; lead * h * w];
    for b in 0..lead {
        let g = &grad_out.data()[b * ho * wo..(b + 1) * ho * wo];
        let dst = &mut gx[b * h * w..(b + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = g[(y / k) * wo + x / k] * scale;
            }
        }
    }
    Tensor::new(input_shape, gx).unwrap()
}

/// Bilinear interpolation cell for one clamped coordinate.
#[derive(Debug, Clone, Copy)]
struct Cell {
    lo: usize,
    hi: usize,
    frac: f64,
    /// Whether the coordinate lies outside the valid range (derivative is zero there).
    clamped: bool,
}

fn cell(coord: f64, extent: usize) -> Cell {
    let max = (extent - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let lo = (c.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    Cell {
        lo,
        hi,
        frac: c - lo as f64,
        clamped,
    }
}

/// Distance from a coordinate to the nearest point where bilinear sampling is
/// not differentiable (integer lattice lines, including the clamp borders).
pub(crate) fn lattice_margin(coord: f64) -> f64 {
    let f = coord - coord.floor();
    f.min(1.0 - f)
}

fn check_gather(field: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<(usize, usize, usize, usize)> {
    const OP: &str = "bilinear_gather";
    expect_rank(OP, field, 3)?;
    expect_rank(OP, xs, 2)?;
    if xs.shape() != ys.shape() {
        return Err(Error::shape(
            OP,
            format!("x coords {:?} vs y coords {:?}", xs.shape(), ys.shape()),
        ));
    }
    let (b, h, w) = (field.shape()[0], field.shape()[1], field.shape()[2]);
    if xs.shape()[0] != b {
        return Err(Error::shape(
            OP,
            format!("batch: field has {b} planes, coords have {}", xs.shape()[0]),
        ));
    }
    if !xs.is_finite() || !ys.is_finite() {
        return Err(Error::invalid(OP, "coordinates must be finite"));
    }
    Ok((b, h, w, xs.shape()[1]))
}

/// Samples plane `b` of a `[B,H,W]` field at `(xs[b,k], ys[b,k])` with
/// clamp-to-edge bilinear interpolation; `x` runs along `W`, `y` along `H`.
pub fn bilinear_gather(field: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
    let (b, h, w, n) = check_gather(field, xs, ys)?;
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        let plane = &field.data()[bi * h * w..(bi + 1) * h * w];
        for k in 0..n {
            let cx = cell(xs.data()[bi * n + k], w);
            let cy = cell(ys.data()[bi * n + k], h);
            let v00 = plane[cy.lo * w + cx.lo];
            let v01 = plane[cy.lo * w + cx.hi];
            let v10 = plane[cy.hi * w + cx.lo];
            let v11 = plane[cy.hi * w + cx.hi];
            let top = v00 * (1.0 - cx.frac) + v01 * cx.frac;
            let bottom = v10 * (1.0 - cx.frac) + v11 * cx.frac;
            out[bi * n + k] = top * (1.0 - cy.frac) + bottom * cy.frac;
        }
    }
    Tensor::new(&[b, n], out)
}

pub(crate) struct GatherGrads {
    pub field: Tensor,
    pub xs: Tensor,
    pub ys: Tensor,
}

pub(crate) fn bilinear_gather_backward(
    field: &Tensor,
    xs: &Tensor,
    ys: &Tensor,
    grad_out: &Tensor,
) -> GatherGrads {
    let (b, h, w, n) = check_gather(field, xs, ys).expect("validated in forward");
    let mut gf = vec![0.0; b * h * w];
    let mut gx = vec![0.0; b * n];
    let mut gy = vec![0.0; b * n];
    for bi in 0..b {
        let plane = &field.data()[bi * h * w..(bi + 1) * h * w];
        let gplane = &mut gf[bi * h * w..(bi + 1) * h * w];
        for k in 0..n {
            let i = bi * n + k;
            let g = grad_out.data()[i];
            let cx = cell(xs.data()[i], w);
            let cy = cell(ys.data()[i], h);
            let (fx, fy) = (cx.frac, cy.frac);
            gplane[cy.lo * w + cx.lo] += g * (1.0 - fx) * (1.0 - fy);
            gplane[cy.lo * w + cx.hi] += g * fx * (1.0 - fy);
            gplane[cy.hi * w + cx.lo] += g * (1.0 - fx) * fy;
            gplane[cy.hi * w + cx.hi] += g * fx * fy;
            let v00 = plane[cy.lo * w + cx.lo];
            let v01 = plane[cy.lo * w + cx.hi];
            let v10 = plane[cy.hi * w + cx.lo];
            let v11 = plane[cy.hi * w + cx.hi];
            if !cx.clamped && cx.hi != cx.lo {
                gx[i] = g * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy);
            }
            if !cy.clamped && cy.hi != cy.lo {
                gy[i] = g * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx);
            }
        }
    }
    GatherGrads {
        field: Tensor::new(field.shape(), gf).unwrap(),
        xs: Tensor::new(xs.shape(), gx).unwrap(),
        ys: Tensor::new(ys.shape(), gy).unwrap(),
    }
}

/// Samples every channel of a `[C,H,W]` field at the same list of `(x, y)`
/// points, returning `[C, n]`.
pub fn bilinear_sample(field: &Tensor, coords: &[(f64, f64)]) -> Result<Tensor> {
    expect_rank("bilinear_sample", field, 3)?;
    if coords.is_empty() {
        return Err(Error::invalid("bilinear_sample", "no coordinates given"));
    }
    let c = field.shape()[0];
    let n = coords.len();
    let xs = Tensor::from_fn(&[c, n], |i| coords[i[1]].0);
    let ys = Tensor::from_fn(&[c, n], |i| coords[i[1]].1);
    bilinear_gather(field, &xs, &ys)
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = *logits.shape().last().unwrap();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(logits.shape(), out).unwrap()
}

pub(crate) fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), dst) in y
        .data()
        .chunks(n)
        .zip(grad_out.data().chunks(n))
        .zip(gx.chunks_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape(), gx).unwrap()
}

/// Per-channel spatial maxima followed by per-channel minima.
pub fn global_max_min_pool(input: &Tensor) -> Result<Tensor> {
    Ok(global_max_min_pool_indexed(input)?.0)
}

/// As [`global_max_min_pool`], also returning the flat spatial index of each
/// extremum (first occurrence) and the smallest gap between an extremum and
/// the runner-up, which measures distance to a tie.
pub(crate) fn global_max_min_pool_indexed(input: &Tensor) -> Result<(Tensor, Vec<usize>, f64)> {
    expect_rank("global_max_min_pool", input, 3)?;
    let c = input.shape()[0];
    let hw = input.shape()[1] * input.shape()[2];
    let mut out = vec![0.0; 2 * c];
    let mut idx = vec![0usize; 2 * c];
    let mut gap = f64::INFINITY;
    for ch in 0..c {
        let plane = &input.data()[ch * hw..(ch + 1) * hw];
        let (mut imax, mut imin) = (0, 0);
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[imax] {
                imax = i;
            }
            if v < plane[imin] {
                imin = i;
            }
        }
        if hw > 1 {
            let second_max = plane
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != imax)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let second_min = plane
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != imin)
                .map(|(_, &v)| v)
                .fold(f64::INFINITY, f64::min);
            gap = gap.min(plane[imax] - second_max).min(second_min - plane[imin]);
        }
        out[ch] = plane[imax];
        out[c + ch] = plane[imin];
        idx[ch] = imax;
        idx[c + ch] = imin;
    }
    Ok((Tensor::new(&[2 * c], out)?, idx, gap))
}

/// Batched matrix product `[B,n,k] x [B,k,m] -> [B,n,m]`.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    const OP: &str = "matmul";
    expect_rank(OP, a, 3)?;
    expect_rank(OP, b, 3)?;
    let (bs, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bb, kb, m) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bb {
        return Err(Error::shape(OP, format!("batch: {bs} vs {bb}")));
    }
    if k != kb {
        return Err(Error::shape(
            OP,
            format!("inner dimension: lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; bs * n * m];
    for i in 0..bs {
        gemm(
            n,
            k,
            m,
            MatRef::row_major(&a.data()[i * n * k..(i + 1) * n * k], k),
            MatRef::row_major(&b.data()[i * k * m..(i + 1) * k * m], m),
            0.0,
            &mut out[i * n * m..(i + 1) * n * m],
        );
    }
    Tensor::new(&[bs, n, m], out)
}

pub(crate) fn batched_matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (bs, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let m = b.shape()[2];
    let g = grad_out.data();
    let ga = need_a.then(|| {
        let mut ga = vec![0.0; bs * n * k];
        for i in 0..bs {
            gemm(
                n,
                m,
                k,
                MatRef::row_major(&g[i * n * m..(i + 1) * n * m], m),
                MatRef::transposed(&b.data()[i * k * m..(i + 1) * k * m], m),
                0.0,
                &mut ga[i * n * k..(i + 1) * n * k],
            );
        }
        Tensor::new(a.shape(), ga).unwrap()
    });
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; bs * k * m];
        for i in 0..bs {
            gemm(
                k,
                n,
                m,
                MatRef::transposed(&a.data()[i * n * k..(i + 1) * n * k], k),
                MatRef::row_major(&g[i * n * m..(i + 1) * n * m], m),
                0.0,
                &mut gb[i * k * m..(i + 1) * k * m],
            );
        }
        Tensor::new(b.shape(), gb).unwrap()
    });
    (ga, gb)
}

/// Reorders dimensions: output dimension `d` is input dimension `axes[d]`.
pub fn permute(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::invalid(
            "permute",
            format!("{axes:?} is not a permutation of {r} axes"),
        ));
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..t.len() {
        out.push(t.data()[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

/// Sums out one axis, removing it (a rank-1 input reduces to `[1]`).
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= t.rank() {
        return Err(Error::invalid("sum_axis", format!("axis {axis} for rank {}", t.rank())));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let n = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..n {
            let src = &t.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape: Vec<usize> = t.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(&shape, out)
}

/// Expands size-1 dimensions of `t` to `shape` (equal rank required).
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.rank() != shape.len()
        || t.shape().iter().zip(shape).any(|(&a, &b)| a != b && a != 1)
    {
        return Err(Error::shape(
            "broadcast",
            format!("cannot broadcast {:?} to {shape:?}", t.shape()),
        ));
    }
    let src_strides = strides_of(t.shape());
    Ok(Tensor::from_fn(shape, |idx| {
        let off: usize = idx
            .iter()
            .zip(t.shape())
            .zip(&src_strides)
            .map(|((&i, &n), &s)| if n == 1 { 0 } else { i * s })
            .sum();
        t.data()[off]
    }))
}

pub(crate) fn unbroadcast(grad: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let dst_strides = strides_of(shape);
    let src_shape = grad.shape().to_vec();
    let mut idx = vec![0usize; src_shape.len()];
    for &g in grad.data() {
        let off: usize = idx
            .iter()
            .zip(shape)
            .zip(&dst_strides)
            .map(|((&i, &n), &s)| if n == 1 { 0 } else { i * s })
            .sum();
        out.data_mut()[off] += g;
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < src_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Contiguous sub-range `[start, start+len)` of `axis`.
pub fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
        ));
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let n = t.shape()[axis];
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, out)
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
    if axis >= first.rank() {
        return Err(Error::invalid("concat", format!("axis {axis} for rank {}", first.rank())));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_unit_kernel_scales() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_box_filter_with_padding() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.at(&[0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_output_extents() {
        let x = Tensor::zeros(&[3, 17, 12]);
        let k = Tensor::zeros(&[5, 3, 7, 7]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[5]), 2, 3).unwrap();
        assert_eq!(y.shape(), &[5, 9, 6]);
    }

    #[test]
    fn conv_errors_name_the_dimension() {
        let x = Tensor::zeros(&[3, 8, 8]);
        let k = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[4]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[3]), 1, 1).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
        let err = conv2d(&x, &k, &Tensor::zeros(&[4]), 0, 1).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn avg_pool_block_mean() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool2d(&x, 2).unwrap().data(), &[2.5]);
        let c = Tensor::full(&[3, 6, 6], 1.75);
        for k in [1, 2, 3, 6] {
            let y = avg_pool2d(&c, k).unwrap();
            assert!(y.data().iter().all(|&v| v == 1.75));
        }
        assert!(avg_pool2d(&Tensor::zeros(&[3, 5]), 2).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let f = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = bilinear_sample(&f, &[(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (-10.0, -10.0), (9.0, 9.0)])
            .unwrap();
        assert_eq!(s.data(), &[2.5, 2.0, 3.0, 1.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::full(&[4], 3.0));
        assert_eq!(y.data(), &[0.25; 4]);
        let y = softmax(&t(&[2], &[0.0, 2f64.ln()]));
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn max_min_pool_examples() {
        let x = t(&[2, 2, 2], &[1.0, 5.0, -2.0, 0.0, 7.0, 7.0, 7.0, 7.0]);
        let y = global_max_min_pool(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, -2.0, 7.0]);
    }

    #[test]
    fn permute_and_inverse() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.at(&[3, 1, 2]), 123.0);
        let back = permute(&y, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn broadcast_roundtrip_sums() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let y = broadcast_to(&x, &[2, 3]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let g = unbroadcast(&Tensor::ones(&[2, 3]), &[2, 1]);
        assert_eq!(g.data(), &[3.0, 3.0]);
    }

    #[test]
    fn slice_concat_inverse() {
        let x = Tensor::from_fn(&[3, 4, 2], |i| (i[0] * 8 + i[1] * 2 + i[2]) as f64);
        let a = slice_axis(&x, 1, 0, 1).unwrap();
        let b = slice_axis(&x, 1, 1, 3).unwrap();
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
    }
}
