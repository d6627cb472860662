//! Toy training: clipped gradient descent on the sequence loss over a few
//! synthetic scenes.

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamScope;
use crate::synthetic::SyntheticScene;
use crate::tensor::Tensor;
use crate::updater::{refine_graph, sequence_loss_graph};
use crate::weights::ModelWeights;

/// Largest frame extent accepted by [`toy_train`].
pub const MAX_EXTENT: usize = 64;
/// Largest iteration count accepted by [`toy_train`].
pub const MAX_ITERS: usize = 4;
/// Largest step count accepted by [`toy_train`].
pub const MAX_STEPS: usize = 500;
/// Per-coordinate gradient bound.
pub const CLIP: f64 = 1.0;

/// Sequence loss of one scene and, optionally, its parameter gradients.
pub fn scene_loss(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    scene: &SyntheticScene,
    with_grad: bool,
) -> Result<(f64, Option<IndexMap<String, Tensor>>)> {
    let g = Graph::new();
    let p = if with_grad {
        ParamScope::trainable(&g, weights)
    } else {
        ParamScope::frozen(&g, weights)
    };
    let out = refine_graph(&p, cfg, g.constant(scene.frame1.clone()), g.constant(scene.frame2.clone()))?;
    let gt = g.constant(scene.gt_flow.to_tensor());
    let loss = sequence_loss_graph(&out.flows, gt, cfg.gamma)?;
    let value = loss.value().data()[0];
    if !with_grad || !value.is_finite() {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    Ok((value, Some(p.gradients(&grads))))
}

fn check_limits(cfg: &ModelConfig, scenes: &[SyntheticScene], steps: usize, lr: f64) -> Result<()> {
    const OP: &str = "toy_train";
    if scenes.is_empty() {
        return Err(Error::invalid(OP, "at least one scene is required"));
    }
    if cfg.iters > MAX_ITERS {
        return Err(Error::invalid(
            OP,
            format!("iters {} exceeds the toy limit {MAX_ITERS}", cfg.iters),
        ));
    }
    if steps > MAX_STEPS {
        return Err(Error::invalid(OP, format!("steps {steps} exceeds the toy limit {MAX_STEPS}")));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(OP, format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for s in scenes {
        let sh = s.frame1.shape();
        if sh[1] > MAX_EXTENT || sh[2] > MAX_EXTENT {
            return Err(Error::invalid(
                OP,
                format!("frames of {}x{} exceed the toy limit {MAX_EXTENT}", sh[1], sh[2]),
            ));
        }
    }
    Ok(())
}

/// Runs `steps` updates `w -= lr * clamp(grad, -1, 1)` on the mean loss over
/// `scenes` and returns the `steps + 1` losses observed before each update
/// and after the last one.
///
/// Scenes are evaluated in parallel; their gradients are summed in scene
/// order, so results do not depend on the thread count.
pub fn toy_train(
    cfg: &ModelConfig,
    weights: &mut ModelWeights,
    scenes: &[SyntheticScene],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    toy_train_with(cfg, weights, scenes, steps, lr, |_, _| {})
}

/// As [`toy_train`], calling `progress(step, loss)` after every evaluation.
pub fn toy_train_with(
    cfg: &ModelConfig,
    weights: &mut ModelWeights,
    scenes: &[SyntheticScene],
    steps: usize,
    lr: f64,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    check_limits(cfg, scenes, steps, lr)?;
    weights.check_against(cfg)?;
    let n = scenes.len() as f64;
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let with_grad = step < steps;
        let shared: &ModelWeights = weights;
        let results: Vec<(f64, Option<IndexMap<String, Tensor>>)> = scenes
            .par_iter()
            .map(|s| scene_loss(cfg, shared, s, with_grad))
            .collect::<Result<_>>()?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        progress(step, loss);
        if !with_grad {
            break;
        }
        let mut total: IndexMap<String, Tensor> = IndexMap::new();
        for (_, grads) in results {
            for (name, g) in grads.expect("gradients requested") {
                match total.get_mut(&name) {
                    Some(acc) => acc.accumulate(&g),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        for (name, g) in total {
            let w = weights.get_mut(&name)?;
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= lr * (gv / n).clamp(-CLIP, CLIP);
            }
        }
    }
    Ok(losses)
}
