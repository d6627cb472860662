//! Recurrent refinement: motion features, convolutional GRU, flow head,
//! upsampling and the discounted sequence loss.

use crate::afl::localize_features;
use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::correlation::build_correlation_pyramid;
use crate::encoders::{context_encoder, feature_encoder};
use crate::error::{Error, Result};
use crate::flow::{FlowField, Resolution};
use crate::lookup::{alo_offsets, alo_scalar_head, constant_offsets, lookup, make_grid, AloHead, AloScalars};
use crate::params::ParamScope;
use crate::tensor::Tensor;
use crate::weights::ModelWeights;

/// Upsampling factor between the feature grid and the image.
pub const UPSAMPLE: usize = 8;

/// Iteration count and discount of the sequence loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub iters: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gamma: 0.8, iters: 12 }
    }
}

impl LossConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            gamma: cfg.gamma,
            iters: cfg.iters,
        }
    }
}

/// One convolutional GRU update:
/// `z = sigma(conv[h;x])`, `r = sigma(conv[h;x])`,
/// `q = tanh(conv[r*h; x])`, `h' = (1-z) h + z q`.
pub fn gru_step<'g>(p: &ParamScope<'g, '_>, hidden: Var<'g>, x: Var<'g>) -> Result<Var<'g>> {
    let (hs, xs) = (hidden.shape(), x.shape());
    if hs.len() != 3 || xs.len() != 3 || hs[1..] != xs[1..] {
        return Err(Error::shape(
            "gru_step",
            format!("hidden {hs:?} and input {xs:?} must be spatially aligned [C,H,W]"),
        ));
    }
    let g = p.graph();
    let hx = g.concat(&[hidden, x], 0)?;
    let z = p.conv("gru.z", hx, 1, 1)?.sigmoid();
    let r = p.conv("gru.r", hx, 1, 1)?.sigmoid();
    let rhx = g.concat(&[r.mul(hidden)?, x], 0)?;
    let q = p.conv("gru.q", rhx, 1, 1)?.tanh();
    let one_minus_z = z.scale(-1.0).add_scalar(1.0);
    one_minus_z.mul(hidden)?.add(z.mul(q)?)
}

/// `[corr_enc; flow_enc; context; scalars]` where the `4L` scalars
/// (`s` then `d`) are broadcast over the grid.
pub fn assemble_motion_features<'g>(
    p: &ParamScope<'g, '_>,
    corr: Var<'g>,
    flow: Var<'g>,
    context: Var<'g>,
    scalars: Var<'g>,
) -> Result<Var<'g>> {
    let cs = context.shape();
    if cs.len() != 3 || corr.shape()[1..] != cs[1..] || flow.shape() != [2, cs[1], cs[2]] {
        return Err(Error::shape(
            "assemble_motion_features",
            format!(
                "corr {:?}, flow {:?} and context {cs:?} must share the grid",
                corr.shape(),
                flow.shape()
            ),
        ));
    }
    let n = scalars.shape()[0];
    let c1 = p.conv("motion.corr1", corr, 1, 0)?.relu();
    let c2 = p.conv("motion.corr2", c1, 1, 1)?.relu();
    let fe = p.conv("motion.flow", flow, 1, 1)?.relu();
    let block = scalars.reshape(&[n, 1, 1])?.broadcast_to(&[n, cs[1], cs[2]])?;
    p.graph().concat(&[c2, fe, context, block], 0)
}

/// Two 3x3 convolutions mapping the hidden state to a flow increment.
pub fn flow_head<'g>(p: &ParamScope<'g, '_>, hidden: Var<'g>) -> Result<Var<'g>> {
    let h = p.conv("head.conv1", hidden, 1, 1)?.relu();
    p.conv("head.conv2", h, 1, 1)
}

/// Bilinear x8 upsampling of a `[2,h,w]` flow with values scaled by 8.
pub fn upsample_flow<'g>(flow: Var<'g>) -> Result<Var<'g>> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::shape("upsample_flow", format!("expected [2,h,w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (hh, ww) = (h * UPSAMPLE, w * UPSAMPLE);
    let f = UPSAMPLE as f64;
    let src = |o: usize| (o as f64 + 0.5) / f - 0.5;
    let xs = Tensor::from_fn(&[2, hh * ww], |i| src(i[1] % ww));
    let ys = Tensor::from_fn(&[2, hh * ww], |i| src(i[1] / ww));
    let g = flow.graph();
    let up = flow.gather_bilinear(g.constant(xs), g.constant(ys))?;
    Ok(up.reshape(&[2, hh, ww])?.scale(f))
}

/// Tensor-level [`upsample_flow`].
pub fn upsample_flow_field(flow: &FlowField) -> Result<FlowField> {
    let g = Graph::new();
    let up = upsample_flow(g.constant(flow.to_tensor()))?;
    FlowField::from_tensor(&up.value(), Resolution::Full)
}

/// Tape handles produced by [`refine_graph`].
pub struct RefineOutput<'g> {
    /// Full-resolution flow after each iteration, `[2,H,W]`.
    pub flows: Vec<Var<'g>>,
    /// Grid parameters used in each iteration.
    pub heads: Vec<AloHead<'g>>,
}

/// Runs encoders, optional feature localization, the correlation pyramid and
/// `cfg.iters` refinement steps from zero flow.
pub fn refine_graph<'g>(
    p: &ParamScope<'g, '_>,
    cfg: &ModelConfig,
    frame1: Var<'g>,
    frame2: Var<'g>,
) -> Result<RefineOutput<'g>> {
    cfg.validate()?;
    if frame1.shape() != frame2.shape() {
        return Err(Error::shape(
            "refine",
            format!("frames differ: {:?} vs {:?}", frame1.shape(), frame2.shape()),
        ));
    }
    let graph = p.graph();
    let mut f1 = feature_encoder(p, frame1)?;
    let mut f2 = feature_encoder(p, frame2)?;
    if cfg.afl {
        f1 = localize_features(p, cfg, f1)?;
        f2 = localize_features(p, cfg, f2)?;
    }
    let pyr = build_correlation_pyramid(f1, f2, cfg.levels, cfg.corr_scale)?;
    let (mut hidden, context) = context_encoder(p, cfg, frame1)?;

    let s = hidden.shape();
    let (h, w) = (s[1], s[2]);
    let base = make_grid(cfg.radius, cfg.grid);
    let fixed = constant_offsets(graph, &vec![base.clone(); cfg.levels]);
    let mut flow = graph.constant(Tensor::zeros(&[2, h, w]));
    let mut out = RefineOutput {
        flows: Vec::with_capacity(cfg.iters),
        heads: Vec::with_capacity(cfg.iters),
    };
    for _ in 0..cfg.iters {
        let (head, offsets) = if cfg.alo {
            let head = alo_scalar_head(p, hidden, context, cfg.levels)?;
            let offsets = alo_offsets(&head, &base)?;
            (head, offsets)
        } else {
            (AloHead::identity(graph, cfg.levels), fixed.clone())
        };
        let corr = lookup(&pyr, flow, &offsets)?;
        let scalars = graph.concat(&[head.s, head.d], 0)?;
        let x = assemble_motion_features(p, corr, flow, context, scalars)?;
        hidden = gru_step(p, hidden, x)?;
        flow = flow.add(flow_head(p, hidden)?)?;
        out.flows.push(upsample_flow(flow)?);
        out.heads.push(head);
    }
    Ok(out)
}

/// Flows `a_1 .. a_N` at full resolution plus the grid parameters per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub flows: Vec<FlowField>,
    pub scalars: Vec<AloScalars>,
}

impl RefinementTrace {
    pub fn last(&self) -> &FlowField {
        self.flows.last().expect("a trace holds at least one flow")
    }
}

/// Evaluates the full pipeline without recording gradients.
pub fn refine(frame1: &Tensor, frame2: &Tensor, weights: &ModelWeights, cfg: &ModelConfig) -> Result<RefinementTrace> {
    let g = Graph::new();
    let p = ParamScope::frozen(&g, weights);
    let out = refine_graph(&p, cfg, g.constant(frame1.clone()), g.constant(frame2.clone()))?;
    let flows = out
        .flows
        .iter()
        .map(|f| FlowField::from_tensor(&f.value(), Resolution::Full))
        .collect::<Result<_>>()?;
    let scalars = out.heads.iter().map(|h| h.scalars()).collect::<Result<_>>()?;
    Ok(RefinementTrace { flows, scalars })
}

/// `sum_i gamma^(N-i) mean_px(|du| + |dv|)` on the tape.
pub fn sequence_loss_graph<'g>(flows: &[Var<'g>], gt: Var<'g>, gamma: f64) -> Result<Var<'g>> {
    let n = flows.len();
    if n == 0 {
        return Err(Error::invalid("sequence_loss", "no iterates given"));
    }
    let pixels = (gt.value().len() / 2) as f64;
    let mut total: Option<Var<'g>> = None;
    for (i, f) in flows.iter().enumerate() {
        if f.shape() != gt.shape() {
            return Err(Error::shape(
                "sequence_loss",
                format!("iterate {:?} vs ground truth {:?}", f.shape(), gt.shape()),
            ));
        }
        let weight = gamma.powi((n - 1 - i) as i32);
        let term = f.sub(gt)?.abs().sum().scale(weight / pixels);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Discounted L1 loss of a trace against ground truth.
pub fn sequence_loss(trace: &RefinementTrace, gt: &FlowField, gamma: f64) -> Result<f64> {
    let n = trace.flows.len();
    if n == 0 {
        return Err(Error::invalid("sequence_loss", "no iterates given"));
    }
    let pixels = (gt.height() * gt.width()) as f64;
    let mut total = 0.0;
    for (i, f) in trace.flows.iter().enumerate() {
        f.check_same_extent(gt, "sequence_loss")?;
        let l1: f64 = f
            .u()
            .data()
            .iter()
            .zip(gt.u().data())
            .chain(f.v().data().iter().zip(gt.v().data()))
            .map(|(a, b)| (a - b).abs())
            .sum();
        total += gamma.powi((n - 1 - i) as i32) * (l1 / pixels);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 6,
            hidden_dim: 5,
            context_dim: 4,
            encoder_widths: [3, 4, 5],
            pe_dim: 4,
            heads: 2,
            head_dim: 3,
            radius: 1,
            levels: 2,
            alo_mid: 4,
            corr_hidden: 6,
            corr_out: 5,
            flow_out: 3,
            head_hidden: 6,
            iters: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn loss_worked_example() {
        let gt = FlowField::zeros(1, 2, Resolution::Full);
        let a1 = FlowField::constant(1, 2, (0.5, 0.5), Resolution::Full);
        let a2 = FlowField::constant(1, 2, (0.25, 0.25), Resolution::Full);
        let trace = RefinementTrace {
            flows: vec![a1, a2],
            scalars: vec![],
        };
        assert_eq!(sequence_loss(&trace, &gt, 0.8).unwrap(), 1.3);
        assert_eq!(LossConfig::default().gamma, 0.8);
    }

    #[test]
    fn upsampling_scales_constant_flow() {
        let f = FlowField::constant(2, 3, (1.0, 0.0), Resolution::Eighth);
        let up = upsample_flow_field(&f).unwrap();
        assert_eq!((up.height(), up.width()), (16, 24));
        assert!(up.u().data().iter().all(|&v| v == 8.0));
        assert!(up.v().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weight_gru_halves_toward_tanh_bias() {
        let cfg = tiny_cfg();
        let mut w = ModelWeights::zeros(&cfg).unwrap();
        w.set("gru.q.b", Tensor::full(&[5], 0.4)).unwrap();
        let g = Graph::new();
        let p = ParamScope::frozen(&g, &w);
        let mut rng = SplitMix64::new(1);
        let h = Tensor::uniform(&[5, 2, 2], -1.0, 1.0, &mut rng);
        let x = Tensor::uniform(&[cfg.motion_channels(), 2, 2], -1.0, 1.0, &mut rng);
        let out = gru_step(&p, g.constant(h.clone()), g.constant(x)).unwrap().value();
        for (o, hv) in out.data().iter().zip(h.data()) {
            assert!((o - (0.5 * hv + 0.5 * 0.4f64.tanh())).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_flow_head_keeps_flow_zero() {
        let cfg = tiny_cfg();
        let mut w = ModelWeights::init(&cfg, 2).unwrap();
        w.set("head.conv2.w", Tensor::zeros(&[2, 6, 3, 3])).unwrap();
        w.set("head.conv2.b", Tensor::zeros(&[2])).unwrap();
        let mut rng = SplitMix64::new(3);
        let a = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 32, 32], 0.0, 1.0, &mut rng);
        let trace = refine(&a, &b, &w, &cfg).unwrap();
        assert_eq!(trace.flows.len(), 2);
        for f in &trace.flows {
            assert!(f.u().data().iter().chain(f.v().data()).all(|&v| v == 0.0));
        }
    }
}
