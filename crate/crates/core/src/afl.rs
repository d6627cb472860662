//! Axis-wise attention that appends relative positional encodings to the
//! feature maps.
//!
//! Along every row (and, separately, every column) each position `i` attends
//! over all positions `j` of the same line with keys equal to queries. The
//! attention-weighted relative encoding `sum_j a_j pe(i - j)` is obtained
//! from the weighted absolute encoding `o = sum_j a_j pe(j)` by the
//! angle-difference identities, so no `n x n` table of relative encodings is
//! ever built.

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamScope;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Longest line accepted by [`afl_oracle`].
pub const ORACLE_MAX_LEN: usize = 64;

/// Default frequency base.
pub const PE_BASE: f64 = 1000.0;

/// Angular frequency of pair `k`: `base^(-k / d_pe)`.
pub fn frequency(k: usize, d_pe: usize, base: f64) -> f64 {
    base.powf(-(k as f64) / d_pe as f64)
}

/// Encoding of a single (possibly negative or fractional) position.
pub fn encode_position(t: f64, d_pe: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_pe);
    for k in 0..d_pe / 2 {
        let a = t * frequency(k, d_pe, base);
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Encodings of positions `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncodingTable {
    pub d_pe: usize,
    pub base: f64,
    /// `[n, d_pe]`.
    pub table: Tensor,
}

impl PositionalEncodingTable {
    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.table.data()[t * self.d_pe..(t + 1) * self.d_pe]
    }

    pub fn frequency(&self, k: usize) -> f64 {
        frequency(k, self.d_pe, self.base)
    }

    /// `[n, d_pe]` coefficients `(C, S)` such that the relative encoding at
    /// `i` is `o * C[i] + swap(o) * S[i]`, where `swap` exchanges each
    /// `(sin, cos)` pair.
    fn shift_coefficients(&self) -> (Tensor, Tensor) {
        let n = self.len();
        let c = Tensor::from_fn(&[n, self.d_pe], |idx| {
            let a = idx[0] as f64 * self.frequency(idx[1] / 2);
            if idx[1] % 2 == 0 {
                -a.cos()
            } else {
                a.cos()
            }
        });
        let s = Tensor::from_fn(&[n, self.d_pe], |idx| {
            (idx[0] as f64 * self.frequency(idx[1] / 2)).sin()
        });
        (c, s)
    }
}

/// Table of `pe(0..n)` with the default base.
pub fn positional_encoding(n: usize, d_pe: usize) -> Result<PositionalEncodingTable> {
    positional_encoding_with_base(n, d_pe, PE_BASE)
}

pub fn positional_encoding_with_base(n: usize, d_pe: usize, base: f64) -> Result<PositionalEncodingTable> {
    if d_pe == 0 || !d_pe.is_multiple_of(2) {
        return Err(Error::invalid(
            "positional_encoding",
            format!("d_pe must be even and positive, got {d_pe}"),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("positional_encoding", "n must be at least 1"));
    }
    let mut data = Vec::with_capacity(n * d_pe);
    for t in 0..n {
        data.extend(encode_position(t as f64, d_pe, base));
    }
    Ok(PositionalEncodingTable {
        d_pe,
        base,
        table: Tensor::new(&[n, d_pe], data)?,
    })
}

/// Converts `o = sum_j a_j pe(j)` into `sum_j a_j pe(i - j)`.
pub fn relative_shift(o: &[f64], i: usize, table: &PositionalEncodingTable) -> Vec<f64> {
    let mut r = vec![0.0; table.d_pe];
    for k in 0..table.d_pe / 2 {
        let a = i as f64 * table.frequency(k);
        let (s, c) = a.sin_cos();
        r[2 * k] = s * o[2 * k + 1] - c * o[2 * k];
        r[2 * k + 1] = c * o[2 * k + 1] + s * o[2 * k];
    }
    r
}

/// Attention over independent lines: `[B, n, D] -> [B, n, d_pe]`.
fn attend_lines<'g>(p: &ParamScope<'g, '_>, cfg: &ModelConfig, x: Var<'g>) -> Result<Var<'g>> {
    let shape = x.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh, dpe) = (cfg.heads, cfg.head_dim, cfg.pe_dim);
    let graph = p.graph();
    let proj = p.get("afl.proj.w")?;
    if proj.shape() != [heads * dh, d] {
        return Err(Error::shape(
            "axis_attention",
            format!("`afl.proj.w` is {:?}, features have {d} channels", proj.shape()),
        ));
    }
    let q = x
        .reshape(&[b * n, d])?
        .matmul(proj.permute(&[1, 0])?)?
        .reshape(&[b, n, heads, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, n, dh])?;
    let logits = q.matmul(q.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt());
    let attn = logits.softmax();

    let table = positional_encoding_with_base(n, dpe, cfg.pe_base)?;
    let pe = graph
        .constant(table.table.reshape(&[1, n, dpe])?)
        .broadcast_to(&[b * heads, n, dpe])?;
    let absolute = attn
        .matmul(pe)?
        .reshape(&[b, heads, n, dpe])?
        .sum_axis(1)?
        .scale(1.0 / heads as f64);

    let swap = Tensor::from_fn(&[dpe, dpe], |i| if i[0] ^ 1 == i[1] { 1.0 } else { 0.0 });
    let swapped = absolute
        .reshape(&[b * n, dpe])?
        .matmul(graph.constant(swap))?
        .reshape(&[b, n, dpe])?;
    let (c, s) = table.shift_coefficients();
    let c = graph.constant(c.reshape(&[1, n, dpe])?).broadcast_to(&[b, n, dpe])?;
    let s = graph.constant(s.reshape(&[1, n, dpe])?).broadcast_to(&[b, n, dpe])?;
    absolute.mul(c)?.add(swapped.mul(s)?)
}

/// Relative encodings `[d_pe, n]` of one line of features `[D, n]`.
pub fn axis_attention(
    features_axis: &Tensor,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    if features_axis.rank() != 2 {
        return Err(Error::shape(
            "axis_attention",
            format!("expected [D, n], got {:?}", features_axis.shape()),
        ));
    }
    let (d, n) = (features_axis.shape()[0], features_axis.shape()[1]);
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    let x = g.constant(features_axis.clone()).permute(&[1, 0])?.reshape(&[1, n, d])?;
    let out = attend_lines(&p, cfg, x)?.reshape(&[n, cfg.pe_dim])?.permute(&[1, 0])?;
    Ok(out.value().as_ref().clone())
}

/// Row-wise (`dx`) and column-wise (`dy`) encodings, each `[d_pe, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisEncodings {
    pub dx_enc: Tensor,
    pub dy_enc: Tensor,
}

fn encodings<'g>(
    p: &ParamScope<'g, '_>,
    cfg: &ModelConfig,
    features: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::shape(
            "localize_features",
            format!("expected [D,H,W], got {shape:?}"),
        ));
    }
    let rows = features.permute(&[1, 2, 0])?;
    let mut dx = attend_lines(p, cfg, rows)?.permute(&[2, 0, 1])?;
    let cols = features.permute(&[2, 1, 0])?;
    let mut dy = attend_lines(p, cfg, cols)?.permute(&[2, 1, 0])?;
    if cfg.afl_scale {
        let target = dx.shape();
        let gain = |axis: &str| -> Result<Var<'g>> {
            p.get(&format!("afl.scale_{axis}.w"))?
                .sigmoid()
                .scale(2.0)
                .reshape(&[1, 1, 1])?
                .broadcast_to(&target)
        };
        dx = dx.mul(gain("x")?)?;
        dy = dy.mul(gain("y")?)?;
    }
    Ok((dx, dy))
}

/// Appends row and column encodings: `[D,H,W] -> [D + 2 d_pe, H, W]`.
pub fn localize_features<'g>(
    p: &ParamScope<'g, '_>,
    cfg: &ModelConfig,
    features: Var<'g>,
) -> Result<Var<'g>> {
    let (dx, dy) = encodings(p, cfg, features)?;
    p.graph().concat(&[features, dx, dy], 0)
}

/// Evaluates the row and column encodings without recording gradients.
pub fn axis_encodings(features: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<AxisEncodings> {
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    let (dx, dy) = encodings(&p, cfg, g.constant(features.clone()))?;
    Ok(AxisEncodings {
        dx_enc: dx.value().as_ref().clone(),
        dy_enc: dy.value().as_ref().clone(),
    })
}

/// Direct evaluation of `sum_j a_j pe(i - j)` per head, averaged over heads.
pub fn afl_oracle(features_axis: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<Tensor> {
    if features_axis.rank() != 2 {
        return Err(Error::shape(
            "afl_oracle",
            format!("expected [D, n], got {:?}", features_axis.shape()),
        ));
    }
    let (d, n) = (features_axis.shape()[0], features_axis.shape()[1]);
    if n > ORACLE_MAX_LEN {
        return Err(Error::invalid(
            "afl_oracle",
            format!("line length {n} exceeds the oracle limit {ORACLE_MAX_LEN}"),
        ));
    }
    let (heads, dh, dpe) = (cfg.heads, cfg.head_dim, cfg.pe_dim);
    let proj = weights.get("afl.proj.w")?;
    if proj.shape() != [heads * dh, d] {
        return Err(Error::shape(
            "afl_oracle",
            format!("`afl.proj.w` is {:?}, features have {d} channels", proj.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[dpe, n]);
    for head in 0..heads {
        let q: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..dh)
                    .map(|k| {
                        (0..d)
                            .map(|c| proj.at(&[head * dh + k, c]) * features_axis.at(&[c, i]))
                            .sum()
                    })
                    .collect()
            })
            .collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                let pe = encode_position(i as f64 - j as f64, dpe, cfg.pe_base);
                for (k, v) in pe.iter().enumerate() {
                    let cur = out.at(&[k, i]);
                    out.set(&[k, i], cur + e[j] / z * v / heads as f64);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn cfg(d: usize, dpe: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: d,
            pe_dim: dpe,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn table_basics() {
        let t = positional_encoding(5, 8).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(t.row(3)[0], 3f64.sin());
        for r in 0..5 {
            for k in 0..4 {
                let (s, c) = (t.row(r)[2 * k], t.row(r)[2 * k + 1]);
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
        assert!(positional_encoding(3, 7).is_err());
    }

    #[test]
    fn shift_at_origin_mirrors_sines() {
        let t = positional_encoding(4, 4).unwrap();
        let o = [0.3, 0.5, -0.2, 0.9];
        assert_eq!(relative_shift(&o, 0, &t), vec![-0.3, 0.5, 0.2, 0.9]);
    }

    #[test]
    fn single_position_returns_pe_zero() {
        let c = cfg(6, 8);
        let w = ModelWeights::init(&c, 3).unwrap();
        let x = Tensor::uniform(&[6, 1], -1.0, 1.0, &mut SplitMix64::new(1));
        let out = axis_attention(&x, &w, &c).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_direct_relative_sum() {
        let c = cfg(6, 16);
        let w = ModelWeights::init(&c, 4).unwrap();
        let x = Tensor::uniform(&[6, 9], -2.0, 2.0, &mut SplitMix64::new(5));
        let fast = axis_attention(&x, &w, &c).unwrap();
        let slow = afl_oracle(&x, &w, &c).unwrap();
        assert!(fast.max_abs_diff(&slow) < 1e-10);
    }

    #[test]
    fn cost_grows_with_line_length_not_pairs() {
        let c = cfg(8, 16);
        let w = ModelWeights::init(&c, 1).unwrap();
        let macs = |n: usize| {
            let g = Graph::new();
            let p = ParamScope::frozen(&g, &w);
            let f = g.constant(Tensor::uniform(&[8, n, n], -1.0, 1.0, &mut SplitMix64::new(2)));
            localize_features(&p, &c, f).unwrap();
            g.macs() as f64
        };
        let ratio = macs(16) / macs(8);
        assert!(ratio > 4.0 && ratio <= 8.0, "{ratio}");
    }
}
