//! End-to-end acceptance run: one line per criterion, non-zero exit if any
//! criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use efraft::afl::{afl_oracle, axis_attention, encode_position};
use efraft::bench::{bench_lookup, default_configs, BenchSettings};
use efraft::correlation::{correlation_oracle, correlation_pyramid};
use efraft::gradcheck::{check_op_cases, end_to_end_check};
use efraft::io::{decode_flo, encode_flo, write_ppm};
use efraft::lookup::{
    alo_offsets, alo_scalars, alo_transform_grid, constant_offsets, lookup, lookup_correlation, make_vanilla_grid,
    reach, AloHead, AloScalars,
};
use efraft::metrics::{compute_epe, compute_f1_all, OutlierRule};
use efraft::ops::avg_pool2d;
use efraft::synthetic::{gen_translation_pair, toy_scenes};
use efraft::train::{toy_train, MAX_ITERS};
use efraft::updater::{sequence_loss, LossConfig, RefinementTrace};
use efraft::{FlowField, Graph, ModelConfig, ModelWeights, Resolution, SplitMix64, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {:.1} s, limit {:.0} s", t.as_secs_f64(), limit.as_secs_f64()))?;
    Ok(t)
}

fn str_err<T>(r: efraft::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_features(seed: u64) -> (Tensor, Tensor) {
    let mut rng = SplitMix64::new(seed);
    (
        Tensor::uniform(&[16, 8, 8], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[16, 8, 8], -1.0, 1.0, &mut rng),
    )
}

fn correlation_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let (f1, f2) = random_features(seed);
        let fast = str_err(correlation_pyramid(&f1, &f2, 4, false))?;
        let slow = str_err(correlation_oracle(&f1, &f2, 4))?;
        for (a, b) in fast.iter().zip(&slow) {
            check(a.shape() == b.shape(), || "level shapes differ".into())?;
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    check(worst <= 1e-12, || format!("max abs diff {worst:e}"))?;
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("max abs diff {worst:.1e}, {:.2} s", t.as_secs_f64()))
}

fn pyramid_pooling_identity() -> Outcome {
    for seed in 0..10 {
        let (f1, f2) = random_features(100 + seed);
        let pyr = str_err(correlation_pyramid(&f1, &f2, 4, false))?;
        for l in 1..4 {
            let pooled = str_err(avg_pool2d(&pyr[l - 1], 2))?;
            check(pooled.bit_eq(&pyr[l]), || format!("seed {seed}: level {l} differs from pooled level {}", l - 1))?;
        }
    }
    Ok("levels 1..3 equal pooled predecessors bitwise".into())
}

fn alo_identity_reduction() -> Outcome {
    let base = make_vanilla_grid(4);
    for seed in 0..5 {
        let mut rng = SplitMix64::new(200 + seed);
        let f1 = Tensor::uniform(&[32, 8, 16], -1.0, 1.0, &mut rng);
        let f2 = Tensor::uniform(&[32, 8, 16], -1.0, 1.0, &mut rng);
        let pyr = str_err(correlation_pyramid(&f1, &f2, 4, false))?;
        let u = Tensor::uniform(&[8, 16], -6.0, 6.0, &mut rng);
        let v = Tensor::uniform(&[8, 16], -6.0, 6.0, &mut rng);
        let flow = str_err(FlowField::new(u, v, Resolution::Eighth))?;

        let vanilla = str_err(lookup_correlation(&pyr, &flow, &vec![base.clone(); 4]))?;
        let ident = str_err(lookup_correlation(&pyr, &flow, &AloScalars::identity(4).grids(&base)))?;
        check(ident.bit_eq(&vanilla), || format!("seed {seed}: tensor path differs"))?;

        let g = Graph::new();
        let levels: Vec<_> = pyr.iter().map(|t| g.constant(t.clone())).collect();
        let pyr_var = efraft::correlation::CorrelationPyramid { levels };
        let flow_var = g.constant(flow.to_tensor());
        let fixed = constant_offsets(&g, &vec![base.clone(); 4]);
        let head = AloHead::identity(&g, 4);
        let learned = str_err(alo_offsets(&head, &base))?;
        let a = str_err(lookup(&pyr_var, flow_var, &fixed))?;
        let b = str_err(lookup(&pyr_var, flow_var, &learned))?;
        check(a.value().bit_eq(&b.value()), || format!("seed {seed}: graph path differs"))?;
        check(a.value().bit_eq(&vanilla), || format!("seed {seed}: graph and tensor paths differ"))?;
    }
    let mut rng = SplitMix64::new(7);
    for draw in 0..1000 {
        let g = alo_transform_grid(
            &base,
            rng.uniform(1.0, 3.0),
            rng.uniform(1.0, 3.0),
            rng.uniform(0.0, 2.0),
            rng.uniform(0.0, 2.0),
        );
        check(g.is_symmetric(), || format!("draw {draw}: grid not symmetric under negation"))?;
    }
    Ok("identity scalars bit-identical on 5 models; 1000 grids symmetric".into())
}

fn alo_ranges() -> Outcome {
    let cfg = ModelConfig::default();
    let mut rng = SplitMix64::new(31);
    let mut violations = 0;
    let mut weights = ModelWeights::init(&cfg, 0).map_err(|e| e.to_string())?;
    for i in 0..10_000u64 {
        if i % 500 == 0 {
            weights = str_err(ModelWeights::init(&cfg, i))?;
        }
        let gain = 10f64.powf(rng.uniform(-2.0, 3.0));
        let h = Tensor::uniform(&[cfg.hidden_dim, 2, 3], -gain, gain, &mut rng);
        let c = Tensor::uniform(&[cfg.context_dim, 2, 3], -gain, gain, &mut rng);
        if !str_err(alo_scalars(&h, &c, &weights, cfg.levels))?.in_range() {
            violations += 1;
        }
    }
    check(violations == 0, || format!("{violations} draws out of range"))?;
    let zero = str_err(ModelWeights::zeros(&cfg))?;
    let h = Tensor::uniform(&[cfg.hidden_dim, 2, 3], -1.0, 1.0, &mut rng);
    let c = Tensor::uniform(&[cfg.context_dim, 2, 3], -1.0, 1.0, &mut rng);
    let s = str_err(alo_scalars(&h, &c, &zero, cfg.levels))?;
    check(s.s_x.iter().chain(&s.s_y).all(|&v| v == 2.0), || format!("zero head s = {:?}", s.s_x))?;
    check(s.d_x.iter().chain(&s.d_y).all(|&v| v == 1.0), || format!("zero head d = {:?}", s.d_x))?;
    Ok("0 violations in 10000 draws; zero pre-activation gives s=2, d=1".into())
}

fn reach_arithmetic() -> Outcome {
    let cfg = ModelConfig::default();
    let vanilla = reach(cfg.radius, cfg.levels, 1.0, 0.0);
    let widest = reach(cfg.radius, cfg.levels, 3.0, 2.0);
    check(vanilla == 256.0 && widest == 896.0, || format!("reach {vanilla} / {widest}"))?;

    // A single correlation spike between pixel (0,0) and the feature cell
    // 88 columns away, i.e. 704 image pixels.
    let (h, w, far) = (8, 128, 88);
    let mut volume = Tensor::zeros(&[h, w, h, w]);
    volume.set(&[0, 0, 0, far], 1.0);
    let mut pyr = vec![volume];
    for _ in 1..cfg.levels {
        let next = str_err(avg_pool2d(pyr.last().unwrap(), 2))?;
        pyr.push(next);
    }
    let flow = FlowField::zeros(h, w, Resolution::Eighth);
    let base = make_vanilla_grid(cfg.radius);
    let sample = |grids: &[efraft::lookup::LookupGrid]| -> Result<f64, String> {
        let out = str_err(lookup_correlation(&pyr, &flow, grids))?;
        let c = out.shape()[0];
        Ok((0..c).map(|k| out.at(&[k, 0, 0]).abs()).fold(0.0, f64::max))
    };
    let missed = sample(&vec![base.clone(); cfg.levels])?;
    let alo = AloScalars {
        s_x: vec![3.0; cfg.levels],
        s_y: vec![3.0; cfg.levels],
        d_x: vec![2.0; cfg.levels],
        d_y: vec![2.0; cfg.levels],
    };
    let hit = sample(&alo.grids(&base))?;
    check(missed == 0.0, || format!("vanilla grid saw the spike ({missed})"))?;
    check(hit > 0.0, || "amorphous grid missed the spike".into())?;

    let report = str_err(bench_lookup(
        &ModelConfig {
            feature_dim: 4,
            hidden_dim: 4,
            context_dim: 4,
            encoder_widths: [2, 2, 2],
            alo_mid: 4,
            corr_hidden: 4,
            corr_out: 4,
            flow_out: 2,
            head_hidden: 4,
            heads: 1,
            head_dim: 2,
            pe_dim: 4,
            ..cfg.clone()
        },
        &default_configs(),
        &BenchSettings {
            iters: 1,
            repeats: 1,
            ..BenchSettings::default()
        },
    ))?;
    for r in &report.records {
        let expected = if r.alo { widest } else { vanilla };
        check(r.reach_px == expected, || format!("{}: report reach {}", r.name, r.reach_px))?;
    }
    Ok(format!(
        "vanilla 256 px, ALO 896 px; spike at {} px: vanilla max {missed}, ALO max {hit:.4}",
        far * 8
    ))
}

fn afl_shift_exactness() -> Outcome {
    let mut rng = SplitMix64::new(41);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let d_pe = if i % 2 == 0 { 8 } else { 16 };
        let n = 1 + rng.below(32);
        let cfg = ModelConfig {
            feature_dim: 12,
            pe_dim: d_pe,
            ..ModelConfig::default()
        };
        let w = str_err(ModelWeights::init(&cfg, 50 + i))?;
        let x = Tensor::uniform(&[12, n], -2.0, 2.0, &mut rng);
        let fast = str_err(axis_attention(&x, &w, &cfg))?;
        worst = worst.max(fast.max_abs_diff(&str_err(afl_oracle(&x, &w, &cfg))?));
    }
    check(worst <= 1e-10, || format!("max diff {worst:e}"))?;

    let mut center_sine: f64 = 0.0;
    for d_pe in [8, 16] {
        let cfg = ModelConfig {
            feature_dim: 12,
            pe_dim: d_pe,
            ..ModelConfig::default()
        };
        let w = str_err(ModelWeights::init(&cfg, 3))?;
        let single = str_err(axis_attention(&Tensor::uniform(&[12, 1], -1.0, 1.0, &mut rng), &w, &cfg))?;
        let pe0 = encode_position(0.0, d_pe, cfg.pe_base);
        check(single.data() == pe0.as_slice(), || format!("n=1 gives {:?}", single.data()))?;

        let n = 21;
        let column: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let flat = Tensor::from_fn(&[12, n], |i| column[i[0]]);
        let enc = str_err(axis_attention(&flat, &w, &cfg))?;
        for k in 0..d_pe / 2 {
            center_sine = center_sine.max(enc.at(&[2 * k, n / 2]).abs());
        }
    }
    check(center_sine <= 1e-12, || format!("center sine component {center_sine:e}"))?;
    Ok(format!("max diff {worst:.1e} over 20 rows; n=1 gives pe(0); center sine {center_sine:.1e}"))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let ops = str_err(check_op_cases(0, 1e-5))?;
    let (worst_name, worst_op) = ops
        .iter()
        .copied()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    check(worst_op <= 1e-4, || format!("{worst_name}: relative error {worst_op:e}"))?;

    let cfg = ModelConfig {
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
    };
    let w = str_err(ModelWeights::init(&cfg, 4))?;
    let scene = str_err(gen_translation_pair(2, 16, 16, (1.3, -0.7)))?;
    let (e2e, _) = str_err(end_to_end_check(&cfg, &w, &scene, 40, 1e-4, 9))?;
    check(e2e <= 1e-3, || format!("end-to-end relative error {e2e:e}"))?;
    let t = within(start, Duration::from_secs(120))?;
    Ok(format!(
        "{} op cases, worst {worst_op:.1e} ({worst_name}); end-to-end {e2e:.1e}; {:.2} s",
        ops.len(),
        t.as_secs_f64()
    ))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        iters: MAX_ITERS,
        ..ModelConfig::default()
    };
    let mut w = str_err(ModelWeights::init(&cfg, 0))?;
    let scenes = str_err(toy_scenes(0))?;
    let losses = str_err(toy_train(&cfg, &mut w, &scenes, 200, 1e-3))?;
    let (first, last) = (losses[0], losses[200]);
    check(last <= 0.5 * first, || format!("loss {first:.4} -> {last:.4}"))?;
    let t = within(start, Duration::from_secs(600))?;
    Ok(format!(
        "loss {first:.4} -> {last:.4} (ratio {:.3}) in {:.1} s",
        last / first,
        t.as_secs_f64()
    ))
}

fn loss_arithmetic() -> Outcome {
    let gt = FlowField::zeros(2, 3, Resolution::Full);
    let trace = RefinementTrace {
        flows: vec![
            FlowField::constant(2, 3, (0.5, 0.5), Resolution::Full),
            FlowField::constant(2, 3, (0.25, -0.25), Resolution::Full),
        ],
        scalars: vec![],
    };
    let loss = str_err(sequence_loss(&trace, &gt, 0.8))?;
    check(loss == 1.3, || format!("loss {loss:?}"))?;
    check(LossConfig::default().gamma == 0.8 && ModelConfig::default().gamma == 0.8, || {
        "default gamma is not 0.8".into()
    })?;
    Ok("worked example = 1.3 exactly; default gamma 0.8".into())
}

fn metrics() -> Outcome {
    let gt = FlowField::constant(5, 7, (2.0, -1.0), Resolution::Full);
    let pred = FlowField::constant(5, 7, (5.0, 3.0), Resolution::Full);
    let epe = str_err(compute_epe(&pred, &gt))?;
    check(epe == 5.0, || format!("EPE {epe}"))?;
    let gt = FlowField::constant(1, 1, (100.0, 0.0), Resolution::Full);
    let pred = FlowField::constant(1, 1, (104.0, 0.0), Resolution::Full);
    let or = str_err(compute_f1_all(&pred, &gt, OutlierRule::PaperOr))?;
    let and = str_err(compute_f1_all(&pred, &gt, OutlierRule::KittiAnd))?;
    check(or == 100.0 && and == 0.0, || format!("paper_or {or}, kitti_and {and}"))?;
    let mut rng = SplitMix64::new(9);
    let f32s = |rng: &mut SplitMix64| Tensor::uniform(&[6, 9], -40.0, 40.0, rng).map(|v| v as f32 as f64);
    let flow = str_err(FlowField::new(f32s(&mut rng), f32s(&mut rng), Resolution::Full))?;
    let bytes = encode_flo(&flow);
    let back = str_err(decode_flo(&bytes))?;
    check(back.u().bit_eq(flow.u()) && back.v().bit_eq(flow.v()), || ".flo values changed".into())?;
    check(encode_flo(&back) == bytes, || ".flo bytes changed".into())?;
    Ok("EPE 5.0; gt 100 / err 4: outlier (paper_or), inlier (kitti_and); .flo lossless".into())
}

fn overhead_direction() -> Outcome {
    let cfg = ModelConfig::default();
    let settings = BenchSettings {
        repeats: 7,
        ..BenchSettings::default()
    };
    let report = str_err(bench_lookup(&cfg, &default_configs(), &settings))?;
    let both = report.record("alo+afl").ok_or("missing alo+afl record")?;
    check(both.time_overhead > 0.0, || format!("time overhead {:.4}", both.time_overhead))?;
    check(both.param_growth < 0.15, || format!("parameter growth {:.4}", both.param_growth))?;
    Ok(format!(
        "time +{:.1}%, memory +{:.1}%, parameters +{:.1}%",
        100.0 * both.time_overhead,
        100.0 * both.memory_overhead,
        100.0 * both.param_growth
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n).display().to_string();
    let scene = str_err(gen_translation_pair(11, 64, 64, (5.0, 3.0)))?;
    str_err(write_ppm(&dir.path().join("a.ppm"), &scene.frame1))?;
    str_err(write_ppm(&dir.path().join("b.ppm"), &scene.frame2))?;
    let bin = env!("CARGO_BIN_EXE_efraft");
    let run = |args: &[String]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
    };
    run(&["init-weights".into(), "--out".into(), p("w.efw"), "--seed".into(), "5".into()])?;
    for out in ["one.flo", "two.flo"] {
        run(&[
            "estimate".into(),
            "--frame1".into(),
            p("a.ppm"),
            "--frame2".into(),
            p("b.ppm"),
            "--weights".into(),
            p("w.efw"),
            "--out".into(),
            p(out),
        ])?;
    }
    let one = std::fs::read(p("one.flo")).map_err(|e| e.to_string())?;
    let two = std::fs::read(p("two.flo")).map_err(|e| e.to_string())?;
    check(one == two, || "outputs differ".into())?;
    Ok(format!("two estimates produced identical {}-byte .flo files", one.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("correlation oracle equivalence", correlation_oracle_equivalence),
        ("pyramid pooling identity", pyramid_pooling_identity),
        ("ALO identity reduction and grid symmetry", alo_identity_reduction),
        ("ALO scalar ranges", alo_ranges),
        ("reach arithmetic and spike probe", reach_arithmetic),
        ("AFL shift-trick exactness", afl_shift_exactness),
        ("gradient checks", gradient_checks),
        ("toy training halves the loss", toy_training),
        ("loss arithmetic", loss_arithmetic),
        ("metrics and .flo round trip", metrics),
        ("overhead direction", overhead_direction),
        ("estimate determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
