//! Feature and context encoders.
//!
//! Both encoders share one layout: a 7x7 stride-2 stem and two 3x3 stride-2
//! stages, each stage followed by two residual units
//! `relu(x + conv(relu(conv(x))))`, then a 1x1 projection. Output maps are at
//! 1/8 of the input resolution.

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamScope;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Hidden-state initializer and context features of the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextState {
    /// `[D_h, H/8, W/8]`, tanh-bounded.
    pub hidden0: Tensor,
    /// `[D_c, H/8, W/8]`, non-negative.
    pub context: Tensor,
}

pub(crate) fn check_image(image: &[usize]) -> Result<()> {
    if image.len() != 3 || image[0] != 3 {
        return Err(Error::shape(
            "encoder",
            format!("image must be [3,H,W], got {image:?}"),
        ));
    }
    let (h, w) = (image[1], image[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape(
            "encoder",
            format!("image extents {h}x{w} must be multiples of 8; pad the input first"),
        ));
    }
    Ok(())
}

fn encoder<'g>(p: &ParamScope<'g, '_>, prefix: &str, image: Var<'g>) -> Result<Var<'g>> {
    check_image(&image.shape())?;
    let mut x = image.add_scalar(-0.5);
    for s in 0..3 {
        let pad = if s == 0 { 3 } else { 1 };
        x = p.conv(&format!("{prefix}.s{s}.down"), x, 2, pad)?.relu();
        for r in 0..2 {
            let unit = format!("{prefix}.s{s}.res{r}");
            let y = p.conv(&format!("{unit}.conv1"), x, 1, 1)?.relu();
            let y = p.conv(&format!("{unit}.conv2"), y, 1, 1)?;
            x = x.add(y)?.relu();
        }
    }
    p.conv(&format!("{prefix}.proj"), x, 1, 0)
}

/// Feature map `[D, H/8, W/8]` of one frame.
pub fn feature_encoder<'g>(p: &ParamScope<'g, '_>, image: Var<'g>) -> Result<Var<'g>> {
    encoder(p, "fnet", image)
}

/// `(hidden0, context)` of the first frame.
pub fn context_encoder<'g>(
    p: &ParamScope<'g, '_>,
    cfg: &ModelConfig,
    image: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let out = encoder(p, "cnet", image)?;
    let hidden = out.slice(0, 0, cfg.hidden_dim)?.tanh();
    let context = out.slice(0, cfg.hidden_dim, cfg.context_dim)?.relu();
    Ok((hidden, context))
}

/// Evaluates the feature encoder without recording gradients.
pub fn encode_features(image: &Tensor, weights: &ModelWeights) -> Result<Tensor> {
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    let out = feature_encoder(&p, g.constant(image.clone()))?;
    Ok(out.value().as_ref().clone())
}

/// Evaluates the context encoder without recording gradients.
pub fn encode_context(
    image: &Tensor,
    weights: &ModelWeights,
    cfg: &ModelConfig,
) -> Result<ContextState> {
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    let (h, c) = context_encoder(&p, cfg, g.constant(image.clone()))?;
    Ok(ContextState {
        hidden0: h.value().as_ref().clone(),
        context: c.value().as_ref().clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder_widths: [4, 6, 8],
            feature_dim: 8,
            hidden_dim: 6,
            context_dim: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn output_is_one_eighth_resolution() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let img = Tensor::uniform(&[3, 32, 24], 0.0, 1.0, &mut SplitMix64::new(2));
        assert_eq!(encode_features(&img, &w).unwrap().shape(), &[8, 4, 3]);
        let ctx = encode_context(&img, &w, &cfg).unwrap();
        assert_eq!(ctx.hidden0.shape(), &[6, 4, 3]);
        assert_eq!(ctx.context.shape(), &[5, 4, 3]);
    }

    #[test]
    fn rejects_unpadded_input() {
        let w = ModelWeights::init(&small_cfg(), 1).unwrap();
        let err = encode_features(&Tensor::zeros(&[3, 20, 16]), &w).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn zero_weights_give_constant_tanh_bias() {
        let cfg = small_cfg();
        let mut w = ModelWeights::zeros(&cfg).unwrap();
        let bias: Vec<f64> = (0..11).map(|i| i as f64 * 0.1 - 0.3).collect();
        w.set("cnet.proj.b", Tensor::from_vec(bias.clone())).unwrap();
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(5));
        let ctx = encode_context(&img, &w, &cfg).unwrap();
        for c in 0..6 {
            for i in 0..4 {
                assert_eq!(ctx.hidden0.data()[c * 4 + i], bias[c].tanh());
            }
        }
        assert!(ctx.context.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn both_frames_share_one_parameter_set() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, 1).unwrap();
        let g = Graph::new();
        let p = ParamScope::trainable(&g, &w);
        let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut SplitMix64::new(2));
        feature_encoder(&p, g.constant(img.clone())).unwrap();
        let first = p.get("fnet.proj.w").unwrap().id();
        let bound = p.bound_names().len();
        feature_encoder(&p, g.constant(img)).unwrap();
        assert_eq!(p.get("fnet.proj.w").unwrap().id(), first);
        assert_eq!(p.bound_names().len(), bound);
    }
}
