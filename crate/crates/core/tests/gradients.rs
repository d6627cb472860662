use efraft::gradcheck::{check_op_cases, end_to_end_check, op_cases};
use efraft::synthetic::gen_translation_pair;
use efraft::train::scene_loss;
use efraft::{ModelConfig, ModelWeights};

fn e2e_cfg() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden_dim: 6,
        context_dim: 5,
        encoder_widths: [4, 6, 8],
        pe_dim: 4,
        heads: 2,
        head_dim: 3,
        radius: 1,
        levels: 2,
        alo_mid: 6,
        corr_hidden: 8,
        corr_out: 6,
        flow_out: 4,
        head_hidden: 8,
        iters: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..3 {
        for (name, err) in check_op_cases(seed, 1e-5).unwrap() {
            assert!(err <= 1e-4, "{name}: {err:e}");
        }
    }
    assert_eq!(op_cases().len(), 16);
}

#[test]
fn end_to_end_loss_gradient_matches_central_differences() {
    let cfg = e2e_cfg();
    let w = ModelWeights::init(&cfg, 4).unwrap();
    let scene = gen_translation_pair(2, 16, 16, (1.3, -0.7)).unwrap();
    let (worst, rows) = end_to_end_check(&cfg, &w, &scene, 40, 1e-4, 9).unwrap();
    assert_eq!(rows.len(), 40);
    assert!(worst <= 1e-3, "worst relative error {worst:e}: {rows:?}");
}

#[test]
fn both_modules_receive_gradient() {
    let cfg = e2e_cfg();
    let w = ModelWeights::init(&cfg, 4).unwrap();
    let scene = gen_translation_pair(2, 16, 16, (1.3, -0.7)).unwrap();
    let (_, grads) = scene_loss(&cfg, &w, &scene, true).unwrap();
    let grads = grads.unwrap();
    for name in ["alo.fc_s.w", "alo.fc_d.w", "alo.mix.w", "afl.proj.w"] {
        let g = &grads[name];
        assert!(g.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn disabled_modules_bind_no_parameters() {
    let cfg = ModelConfig {
        alo: false,
        afl: false,
        ..e2e_cfg()
    };
    let w = ModelWeights::init(&cfg, 4).unwrap();
    let scene = gen_translation_pair(2, 16, 16, (1.3, -0.7)).unwrap();
    let (_, grads) = scene_loss(&cfg, &w, &scene, true).unwrap();
    let grads = grads.unwrap();
    assert!(grads.keys().all(|k| !k.starts_with("alo.") && !k.starts_with("afl.")));
    // The GRU still reads the constant scalar block, so its weights on
    // those channels stay bound even though the baseline count leaves them out.
    assert_eq!(
        grads.values().map(|t| t.len()).sum::<usize>(),
        cfg.active_param_count(false, false) + cfg.alo_gru_params()
    );
}
