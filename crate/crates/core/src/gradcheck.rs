//! Finite-difference validation of tape gradients.

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::synthetic::SyntheticScene;
use crate::tensor::Tensor;
use crate::train::scene_loss;
use crate::weights::ModelWeights;

/// Probe points closer than this multiple of `eps` to a max/min tie or a
/// bilinear cell boundary are rejected.
pub const SMOOTHNESS_FACTOR: f64 = 100.0;

/// Compares the tape gradient of the scalar function `f` at `point` against
/// central differences with step `eps`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn gradient_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("gradient_check", "eps must be positive"));
    }
    let graph = Graph::new();
    let x = graph.variable(point.clone());
    let y = f(&graph, x)?;
    if y.value().len() != 1 {
        return Err(Error::shape(
            "gradient_check",
            format!("function must return one value, got {:?}", y.shape()),
        ));
    }
    let tolerance = SMOOTHNESS_FACTOR * eps;
    if graph.smooth_margin() < tolerance {
        return Err(Error::NonSmoothProbe {
            margin: graph.smooth_margin(),
            tolerance,
        });
    }
    let analytic = graph.backward(y)?.get_or_zeros(x);

    let eval = |p: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(p.clone());
        Ok(f(&g, v)?.value().data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Scalar test function of one flat parameter vector.
pub type ScalarFn = for<'g> fn(&'g Graph, Var<'g>) -> Result<Var<'g>>;

/// One differentiable operation wrapped into a scalar function of a flat
/// probe vector of `len` entries.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub len: usize,
    pub f: ScalarFn,
}

fn fixed<'g>(g: &'g Graph, shape: &[usize], seed: u64) -> Var<'g> {
    let mut rng = SplitMix64::new(seed);
    g.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng))
}

fn case_arith<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let (a, b) = (x.slice(0, 0, 6)?, x.slice(0, 6, 6)?);
    let y = a.mul(b)?.add(a)?.sub(b.scale(2.0))?;
    Ok(y.mul(a.add_scalar(0.3).sin())?.sum())
}

fn case_tanh<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    Ok(x.tanh().mul(x)?.sum())
}

fn case_sigmoid<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    Ok(x.sigmoid().mul(x)?.sum())
}

fn case_relu_abs<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let c = fixed(g, &[12], 1);
    Ok(x.relu().mul(c)?.add(x.abs().scale(0.7))?.sum())
}

fn case_sin_cos<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    Ok(x.sin().mul(x.scale(2.0).cos())?.sum())
}

fn case_reshape_permute<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let y = x.reshape(&[2, 3, 4])?.permute(&[2, 0, 1])?;
    Ok(y.tanh().mul(fixed(g, &[4, 2, 3], 2))?.sum())
}

fn case_broadcast<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let y = x.reshape(&[3, 1])?.broadcast_to(&[3, 4])?;
    Ok(y.sin().mul(fixed(g, &[3, 4], 3))?.sum())
}

fn case_slice_concat<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let y = g.concat(&[x.slice(0, 6, 6)?, x.slice(0, 0, 6)?, x.slice(0, 3, 2)?], 0)?;
    Ok(y.tanh().mul(fixed(g, &[14], 4))?.sum())
}

fn case_reductions<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let m = x.reshape(&[3, 4])?;
    let rows = m.sum_axis(1)?;
    rows.mul(rows.sin())?.sum().add(m.tanh().mean())
}

fn case_matmul<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let a = x.slice(0, 0, 24)?.reshape(&[2, 3, 4])?;
    let b = x.slice(0, 24, 16)?.reshape(&[2, 4, 2])?;
    let c = x.slice(0, 0, 12)?.reshape(&[3, 4])?;
    let d = x.slice(0, 12, 8)?.reshape(&[4, 2])?;
    a.matmul(b)?.tanh().sum().add(c.matmul(d)?.sin().sum())
}

fn case_conv<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let input = x.slice(0, 0, 40)?.reshape(&[2, 4, 5])?;
    let w = x.slice(0, 40, 54)?.reshape(&[3, 2, 3, 3])?;
    let b = x.slice(0, 94, 3)?;
    input.conv2d(w, b, 2, 1)?.tanh().sum().add(input.conv2d(w, b, 1, 0)?.sin().sum())
}

fn case_pool<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let y = x.reshape(&[2, 4, 6])?.avg_pool2d(2)?;
    Ok(y.sin().mul(fixed(g, &[2, 2, 3], 5))?.sum())
}

fn case_gather<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let field = x.slice(0, 0, 40)?.reshape(&[2, 4, 5])?;
    let xs = x.slice(0, 40, 12)?.reshape(&[2, 6])?.scale(1.8).add_scalar(2.0);
    let ys = x.slice(0, 52, 12)?.reshape(&[2, 6])?.scale(1.4).add_scalar(1.5);
    Ok(field.gather_bilinear(xs, ys)?.sin().sum())
}

fn case_sample<'g>(_g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let field = x.slice(0, 0, 40)?.reshape(&[2, 4, 5])?;
    let xs = x.slice(0, 40, 6)?.scale(1.8).add_scalar(2.0);
    let ys = x.slice(0, 46, 6)?.scale(1.4).add_scalar(1.5);
    Ok(field.bilinear_sample(xs, ys)?.tanh().sum())
}

fn case_softmax<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let p = x.reshape(&[3, 4])?.scale(2.0).softmax();
    Ok(p.mul(fixed(g, &[3, 4], 6))?.sum())
}

fn case_max_min<'g>(g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
    let m = x.reshape(&[2, 3, 4])?.global_max_min_pool()?;
    Ok(m.mul(fixed(g, &[4], 7))?.sum())
}

/// Every differentiable tape operation, each exercised by at least one case.
pub fn op_cases() -> Vec<OpCase> {
    let c = |name, len, f: ScalarFn| OpCase { name, len, f };
    vec![
        c("add/sub/mul/scale/add_scalar", 12, case_arith),
        c("tanh", 10, case_tanh),
        c("sigmoid", 10, case_sigmoid),
        c("relu/abs", 12, case_relu_abs),
        c("sin/cos", 10, case_sin_cos),
        c("reshape/permute", 24, case_reshape_permute),
        c("broadcast_to", 3, case_broadcast),
        c("slice/concat", 12, case_slice_concat),
        c("sum/sum_axis/mean", 12, case_reductions),
        c("matmul", 40, case_matmul),
        c("conv2d", 97, case_conv),
        c("avg_pool2d", 48, case_pool),
        c("gather_bilinear", 64, case_gather),
        c("bilinear_sample", 52, case_sample),
        c("softmax", 12, case_softmax),
        c("global_max_min_pool", 24, case_max_min),
    ]
}

/// Runs [`gradient_check`] on a random probe for every case, drawing a new
/// probe whenever one lands on a non-smooth point. Probe entries are kept at
/// least 0.05 away from zero so `relu` and `abs` stay differentiable.
pub fn check_op_cases(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let mut attempt = 0;
        loop {
            let point = Tensor::uniform(&[case.len], -1.0, 1.0, &mut rng)
                .map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() } else { v });
            match gradient_check(case.f, &point, eps) {
                Ok(err) => {
                    out.push((case.name, err));
                    break;
                }
                Err(Error::NonSmoothProbe { .. }) if attempt < 20 => attempt += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Compares the tape gradient of the sequence loss of one scene against
/// central differences on `samples` randomly chosen weight entries.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// together with the sampled `(name, index, analytic, numeric)` rows.
pub fn end_to_end_check(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    scene: &SyntheticScene,
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<(f64, Vec<(String, usize, f64, f64)>)> {
    const FLOOR: f64 = 1e-6;
    let (_, grads) = scene_loss(cfg, weights, scene, true)?;
    let grads = grads.ok_or_else(|| Error::invalid("end_to_end_check", "loss is not finite"))?;
    let names: Vec<&String> = grads.keys().collect();
    let mut rng = SplitMix64::new(seed);
    let mut probe = weights.clone();
    let mut rows = Vec::with_capacity(samples);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let name = names[rng.below(names.len())].clone();
        let idx = rng.below(grads[&name].len());
        let x0 = weights.get(&name)?.data()[idx];
        probe.get_mut(&name)?.data_mut()[idx] = x0 + eps;
        let up = scene_loss(cfg, &probe, scene, false)?.0;
        probe.get_mut(&name)?.data_mut()[idx] = x0 - eps;
        let down = scene_loss(cfg, &probe, scene, false)?.0;
        probe.get_mut(&name)?.data_mut()[idx] = x0;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[&name].data()[idx];
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR));
        rows.push((name, idx, analytic, numeric));
    }
    Ok((worst, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let err = gradient_check(|g, _x| Ok(g.constant(Tensor::scalar(2.5))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_sum_matches_central_differences() {
        let mut rng = SplitMix64::new(11);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[2, 5, 6], -1.0, 1.0, &mut rng);
        let err = gradient_check(
            |g, x| {
                let k = g.constant(k.clone());
                let b = g.constant(b.clone());
                Ok(x.conv2d(k, b, 1, 1)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sampling_gradient_is_horizontal_cell_difference() {
        let field = Tensor::new(&[1, 2, 3], vec![1.0, 4.0, 2.0, 3.0, 9.0, 5.0]).unwrap();
        let (x0, y0) = (0.3, 0.6);
        let g = Graph::new();
        let f = g.constant(field.clone());
        let xs = g.variable(Tensor::from_vec(vec![x0]));
        let ys = g.constant(Tensor::from_vec(vec![y0]));
        let out = f.bilinear_sample(xs, ys).unwrap().sum();
        let dx = g.backward(out).unwrap().get(xs).unwrap().data()[0];
        // (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        let expected = 0.4 * (4.0 - 1.0) + 0.6 * (9.0 - 3.0);
        assert!((dx - expected).abs() < 1e-12);

        let err = gradient_check(
            |g, x| {
                let f = g.constant(field.clone());
                let ys = g.constant(Tensor::from_vec(vec![y0]));
                Ok(f.bilinear_sample(x, ys)?.sum())
            },
            &Tensor::from_vec(vec![x0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn probe_on_cell_boundary_is_rejected() {
        let field = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let res = gradient_check(
            |g, x| {
                let f = g.constant(field.clone());
                let ys = g.constant(Tensor::from_vec(vec![0.5]));
                Ok(f.bilinear_sample(x, ys)?.sum())
            },
            &Tensor::from_vec(vec![1.0]),
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonSmoothProbe { .. })));
    }

    #[test]
    fn every_op_case_passes() {
        for (name, err) in check_op_cases(5, 1e-5).unwrap() {
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn probe_on_max_tie_is_rejected() {
        let res = gradient_check(
            |_, x| Ok(x.global_max_min_pool()?.sum()),
            &Tensor::new(&[1, 1, 3], vec![2.0, 2.0, -1.0]).unwrap(),
            1e-5,
        );
        assert!(matches!(res, Err(Error::NonSmoothProbe { .. })));
    }
}
