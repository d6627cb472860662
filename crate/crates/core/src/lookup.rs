//! Correlation lookup with fixed and amorphous (scaled and split) grids.
//!
//! For a pixel `p` with flow `f` the lookup samples level `l` of the
//! pyramid at `(p + f) / 2^l + o` for every grid offset `o`. The amorphous
//! variant maps each integer offset `(i, j)` to
//! `(s_x i + sign(i) d_x, s_y j + sign(j) d_y)` with per-level scalars
//! predicted from the hidden state and context features.

use crate::autodiff::{Graph, Var};
use crate::config::GridShape;
use crate::correlation::CorrelationPyramid;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::params::ParamScope;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Bounds of the predicted grid scale.
pub const SCALE_RANGE: (f64, f64) = (1.0, 3.0);
/// Bounds of the predicted grid split.
pub const SPLIT_RANGE: (f64, f64) = (0.0, 2.0);

/// Sampling offsets `(dx, dy)` in level-local pixels, row-major in `(dy, dx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupGrid {
    pub offsets: Vec<(f64, f64)>,
    pub radius: usize,
}

impl LookupGrid {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Whether negating every offset yields the same set.
    pub fn is_symmetric(&self) -> bool {
        self.offsets
            .iter()
            .all(|&(x, y)| self.offsets.iter().any(|&(a, b)| a == -x && b == -y))
    }

    fn axis_tensors(&self) -> (Tensor, Tensor) {
        let xs = self.offsets.iter().map(|o| o.0).collect();
        let ys = self.offsets.iter().map(|o| o.1).collect();
        (Tensor::from_vec(xs), Tensor::from_vec(ys))
    }
}

/// Integer grid of radius `r` in the given shape.
pub fn make_grid(r: usize, shape: GridShape) -> LookupGrid {
    let r = r as i64;
    let mut offsets = Vec::new();
    for j in -r..=r {
        for i in -r..=r {
            let inside = match shape {
                GridShape::Square => true,
                GridShape::Diamond => i.abs() + j.abs() <= r,
            };
            if inside {
                offsets.push((i as f64, j as f64));
            }
        }
    }
    LookupGrid {
        offsets,
        radius: r as usize,
    }
}

/// Full `(2r+1)^2` square grid.
pub fn make_vanilla_grid(r: usize) -> LookupGrid {
    make_grid(r, GridShape::Square)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scales and splits a grid: `(i, j) -> (s_x i + sign(i) d_x, s_y j + sign(j) d_y)`.
pub fn alo_transform_grid(grid: &LookupGrid, s_x: f64, s_y: f64, d_x: f64, d_y: f64) -> LookupGrid {
    LookupGrid {
        offsets: grid
            .offsets
            .iter()
            .map(|&(i, j)| (s_x * i + sign(i) * d_x, s_y * j + sign(j) * d_y))
            .collect(),
        radius: grid.radius,
    }
}

/// Furthest image-space displacement one lookup can reach:
/// `(s r + d) * 2^(L-1) * 8`.
pub fn reach(radius: usize, levels: usize, s: f64, d: f64) -> f64 {
    (s * radius as f64 + d) * (1u64 << (levels - 1)) as f64 * 8.0
}

/// The four grid parameters of every pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct AloScalars {
    pub s_x: Vec<f64>,
    pub s_y: Vec<f64>,
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

impl AloScalars {
    /// `s = 1`, `d = 0` on every level, which leaves grids unchanged.
    pub fn identity(levels: usize) -> Self {
        Self {
            s_x: vec![1.0; levels],
            s_y: vec![1.0; levels],
            d_x: vec![0.0; levels],
            d_y: vec![0.0; levels],
        }
    }

    /// Unpacks head outputs laid out as `[x0, y0, x1, y1, ...]`.
    pub fn from_head(s: &Tensor, d: &Tensor) -> Result<Self> {
        if s.rank() != 1 || s.shape() != d.shape() || !s.len().is_multiple_of(2) {
            return Err(Error::shape(
                "alo scalars",
                format!("expected two equal [2L] vectors, got {:?} and {:?}", s.shape(), d.shape()),
            ));
        }
        let even = |t: &Tensor| t.data().iter().step_by(2).copied().collect();
        let odd = |t: &Tensor| t.data().iter().skip(1).step_by(2).copied().collect();
        Ok(Self {
            s_x: even(s),
            s_y: odd(s),
            d_x: even(d),
            d_y: odd(d),
        })
    }

    pub fn levels(&self) -> usize {
        self.s_x.len()
    }

    /// Whether every scale lies in [`SCALE_RANGE`] and every split in [`SPLIT_RANGE`].
    pub fn in_range(&self) -> bool {
        let within = |v: &[f64], (lo, hi): (f64, f64)| v.iter().all(|&x| (lo..=hi).contains(&x));
        within(&self.s_x, SCALE_RANGE)
            && within(&self.s_y, SCALE_RANGE)
            && within(&self.d_x, SPLIT_RANGE)
            && within(&self.d_y, SPLIT_RANGE)
    }

    /// One transformed copy of `base` per level.
    pub fn grids(&self, base: &LookupGrid) -> Vec<LookupGrid> {
        (0..self.levels())
            .map(|l| alo_transform_grid(base, self.s_x[l], self.s_y[l], self.d_x[l], self.d_y[l]))
            .collect()
    }
}

/// Head outputs on the tape, each `[2L]` laid out as `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, Copy)]
pub struct AloHead<'g> {
    pub s: Var<'g>,
    pub d: Var<'g>,
}

impl<'g> AloHead<'g> {
    /// Constant `s = 1`, `d = 0`.
    pub fn identity(graph: &'g Graph, levels: usize) -> Self {
        Self {
            s: graph.constant(Tensor::ones(&[2 * levels])),
            d: graph.constant(Tensor::zeros(&[2 * levels])),
        }
    }

    pub fn scalars(&self) -> Result<AloScalars> {
        AloScalars::from_head(&self.s.value(), &self.d.value())
    }
}

/// Predicts the grid parameters: concat, 1x1 conv, global max and min
/// pooling, then two single-layer maps squashed to `s = 1 + 2 sigma`,
/// `d = 2 sigma`.
pub fn alo_scalar_head<'g>(
    p: &ParamScope<'g, '_>,
    hidden: Var<'g>,
    context: Var<'g>,
    levels: usize,
) -> Result<AloHead<'g>> {
    let (hs, cs) = (hidden.shape(), context.shape());
    if hs.len() != 3 || cs.len() != 3 || hs[1..] != cs[1..] {
        return Err(Error::shape(
            "alo_scalar_head",
            format!("hidden {hs:?} and context {cs:?} must be spatially aligned [C,H,W]"),
        ));
    }
    let x = p.graph().concat(&[hidden, context], 0)?;
    let mixed = p.conv("alo.mix", x, 1, 0)?;
    let pooled = mixed.global_max_min_pool()?;
    let n = pooled.shape()[0];
    let col = pooled.reshape(&[n, 1])?;
    let fc = |name: &str| -> Result<Var<'g>> {
        let (w, b) = p.layer(name)?;
        if w.shape() != [2 * levels, n] {
            return Err(Error::shape(
                "alo_scalar_head",
                format!("`{name}.w` is {:?}, expected [{}, {n}]", w.shape(), 2 * levels),
            ));
        }
        w.matmul(col)?.reshape(&[2 * levels])?.add(b)
    };
    let s = fc("alo.fc_s")?.sigmoid().scale(2.0).add_scalar(1.0);
    let d = fc("alo.fc_d")?.sigmoid().scale(2.0);
    Ok(AloHead { s, d })
}

/// Evaluates [`alo_scalar_head`] without recording gradients.
pub fn alo_scalars(
    hidden: &Tensor,
    context: &Tensor,
    weights: &ModelWeights,
    levels: usize,
) -> Result<AloScalars> {
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    alo_scalar_head(&p, g.constant(hidden.clone()), g.constant(context.clone()), levels)?.scalars()
}

/// Per-level offsets on the tape, each `[K]`.
#[derive(Debug, Clone, Copy)]
pub struct LevelOffsets<'g> {
    pub dx: Var<'g>,
    pub dy: Var<'g>,
}

/// Constant offsets of fixed grids, one per level.
pub fn constant_offsets<'g>(graph: &'g Graph, grids: &[LookupGrid]) -> Vec<LevelOffsets<'g>> {
    grids
        .iter()
        .map(|g| {
            let (x, y) = g.axis_tensors();
            LevelOffsets {
                dx: graph.constant(x),
                dy: graph.constant(y),
            }
        })
        .collect()
}

/// Offsets of `base` transformed by the head outputs, differentiable in them.
pub fn alo_offsets<'g>(head: &AloHead<'g>, base: &LookupGrid) -> Result<Vec<LevelOffsets<'g>>> {
    let graph = head.s.graph();
    let levels = head.s.shape()[0] / 2;
    let k = base.len();
    let (ix, iy) = base.axis_tensors();
    let (sx, sy) = (ix.map(sign), iy.map(sign));
    let (ix, iy, sx, sy) = (
        graph.constant(ix),
        graph.constant(iy),
        graph.constant(sx),
        graph.constant(sy),
    );
    let pick = |v: Var<'g>, i: usize| v.slice(0, i, 1)?.broadcast_to(&[k]);
    (0..levels)
        .map(|l| {
            let dx = pick(head.s, 2 * l)?.mul(ix)?.add(pick(head.d, 2 * l)?.mul(sx)?)?;
            let dy = pick(head.s, 2 * l + 1)?.mul(iy)?.add(pick(head.d, 2 * l + 1)?.mul(sy)?)?;
            Ok(LevelOffsets { dx, dy })
        })
        .collect()
}

/// Samples every pyramid level around `p + flow(p)`.
///
/// `flow` is `[2,h,w]` in feature-grid pixels. The result is `[L*K, h, w]`,
/// levels in order and offsets in grid order within each level.
pub fn lookup<'g>(
    pyr: &CorrelationPyramid<'g>,
    flow: Var<'g>,
    offsets: &[LevelOffsets<'g>],
) -> Result<Var<'g>> {
    const OP: &str = "lookup_correlation";
    if offsets.len() != pyr.num_levels() {
        return Err(Error::invalid(
            OP,
            format!("{} grids for {} pyramid levels", offsets.len(), pyr.num_levels()),
        ));
    }
    let fs = flow.shape();
    let ls = pyr.levels[0].shape();
    if fs.len() != 3 || fs[0] != 2 || fs[1..] != ls[..2] {
        return Err(Error::shape(
            OP,
            format!("flow {fs:?} does not match the pyramid's [{}, {}] pixel grid", ls[0], ls[1]),
        ));
    }
    let graph = flow.graph();
    let (h, w) = (fs[1], fs[2]);
    let hw = h * w;
    let px = graph.constant(Tensor::from_fn(&[hw, 1], |i| (i[0] % w) as f64));
    let py = graph.constant(Tensor::from_fn(&[hw, 1], |i| (i[0] / w) as f64));
    let qx = px.add(flow.slice(0, 0, 1)?.reshape(&[hw, 1])?)?;
    let qy = py.add(flow.slice(0, 1, 1)?.reshape(&[hw, 1])?)?;

    let mut parts = Vec::with_capacity(offsets.len());
    for (l, (level, off)) in pyr.levels.iter().zip(offsets).enumerate() {
        let k = off.dx.shape()[0];
        if off.dy.shape() != [k] {
            return Err(Error::shape(OP, format!("level {l}: offset vectors differ in length")));
        }
        let target = [hw, k];
        let inv = 1.0 / (1u64 << l) as f64;
        let xs = qx
            .scale(inv)
            .broadcast_to(&target)?
            .add(off.dx.reshape(&[1, k])?.broadcast_to(&target)?)?;
        let ys = qy
            .scale(inv)
            .broadcast_to(&target)?
            .add(off.dy.reshape(&[1, k])?.broadcast_to(&target)?)?;
        let s = level.shape();
        let field = level.reshape(&[hw, s[2], s[3]])?;
        parts.push(field.gather_bilinear(xs, ys)?);
    }
    let all = graph.concat(&parts, 1)?;
    let c = all.shape()[1];
    all.permute(&[1, 0])?.reshape(&[c, h, w])
}

/// Tensor-level lookup with one fixed grid per level.
pub fn lookup_correlation(pyr: &[Tensor], flow: &FlowField, grids: &[LookupGrid]) -> Result<Tensor> {
    let g = Graph::new();
    let pyr = CorrelationPyramid {
        levels: pyr.iter().map(|t| g.constant(t.clone())).collect(),
    };
    let flow = g.constant(flow.to_tensor());
    let out = lookup(&pyr, flow, &constant_offsets(&g, grids))?;
    Ok(out.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::correlation_pyramid;
    use crate::flow::Resolution;
    use crate::rng::SplitMix64;

    #[test]
    fn vanilla_grid_shapes() {
        assert_eq!(make_vanilla_grid(0).offsets, vec![(0.0, 0.0)]);
        let g = make_vanilla_grid(4);
        assert_eq!(g.len(), 81);
        assert!(g.is_symmetric());
        assert_eq!(g.offsets[0], (-4.0, -4.0));
        assert_eq!(g.offsets[1], (-3.0, -4.0));
        let d = make_grid(4, GridShape::Diamond);
        assert_eq!(d.len(), 41);
        assert!(d.is_symmetric());
    }

    #[test]
    fn transform_arithmetic() {
        let g = LookupGrid {
            offsets: vec![(2.0, -3.0), (0.0, 5.0)],
            radius: 5,
        };
        let t = alo_transform_grid(&g, 1.5, 2.0, 0.5, 1.0);
        assert_eq!(t.offsets, vec![(3.5, -7.0), (0.0, 11.0)]);
        let base = make_vanilla_grid(3);
        assert_eq!(alo_transform_grid(&base, 1.0, 1.0, 0.0, 0.0), base);
    }

    #[test]
    fn reach_values() {
        assert_eq!(reach(4, 4, 1.0, 0.0), 256.0);
        assert_eq!(reach(4, 4, 3.0, 2.0), 896.0);
    }

    #[test]
    fn zero_flow_self_similarity() {
        let mut rng = SplitMix64::new(1);
        let mut f = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        for p in 0..16 {
            let n: f64 = (0..3).map(|c| f.data()[c * 16 + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                f.data_mut()[c * 16 + p] /= n;
            }
        }
        let pyr = correlation_pyramid(&f, &f, 2, false).unwrap();
        let flow = FlowField::zeros(4, 4, Resolution::Eighth);
        let grids = vec![make_vanilla_grid(0); 2];
        let out = lookup_correlation(&pyr, &flow, &grids).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4]);
        for p in 0..16 {
            assert!((out.data()[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_offsets_at_identity_match_fixed_grid_bitwise() {
        let g = Graph::new();
        let base = make_vanilla_grid(2);
        let head = AloHead::identity(&g, 3);
        let learned = alo_offsets(&head, &base).unwrap();
        let fixed = constant_offsets(&g, &vec![base.clone(); 3]);
        for (a, b) in learned.iter().zip(&fixed) {
            assert!(a.dx.value().bit_eq(&b.dx.value()));
            assert!(a.dy.value().bit_eq(&b.dy.value()));
        }
    }

    #[test]
    fn zero_head_gives_midrange_scalars() {
        let cfg = crate::config::ModelConfig {
            hidden_dim: 4,
            context_dim: 3,
            alo_mid: 5,
            levels: 3,
            ..crate::config::ModelConfig::default()
        };
        let w = ModelWeights::zeros(&cfg).unwrap();
        let mut rng = SplitMix64::new(2);
        let h = Tensor::uniform(&[4, 2, 3], -1.0, 1.0, &mut rng);
        let c = Tensor::uniform(&[3, 2, 3], 0.0, 1.0, &mut rng);
        let s = alo_scalars(&h, &c, &w, 3).unwrap();
        assert_eq!(s.s_x, vec![2.0; 3]);
        assert_eq!(s.s_y, vec![2.0; 3]);
        assert_eq!(s.d_x, vec![1.0; 3]);
        assert_eq!(s.d_y, vec![1.0; 3]);
    }
}
