//! Registry of oracle-equivalence and invariant suites run by `selftest`.

use crate::afl::{afl_oracle, axis_attention, positional_encoding, relative_shift};
use crate::config::ModelConfig;
use crate::correlation::{correlation_oracle, correlation_pyramid};
use crate::error::Result as LibResult;
use crate::flow::{FlowField, Resolution};
use crate::gradcheck::check_op_cases;
use crate::io::{decode_flo, encode_flo};
use crate::lookup::{alo_scalars, alo_transform_grid, lookup_correlation, make_vanilla_grid, reach, AloScalars};
use crate::metrics::{compute_epe, compute_f1_all, OutlierRule};
use crate::oracle;
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::updater::{sequence_loss, RefinementTrace};
use crate::weights::ModelWeights;

pub type SuiteResult = std::result::Result<(), String>;

pub struct Suite {
    pub name: &'static str,
    /// Oracles from [`oracle::NAMES`] this suite compares against.
    pub oracles: &'static [&'static str],
    pub run: fn() -> SuiteResult,
}

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub result: SuiteResult,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> SuiteResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: LibResult<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn close(name: &str, a: &Tensor, b: &Tensor, tol: f64) -> SuiteResult {
    ensure(a.shape() == b.shape(), || format!("{name}: shapes {:?} vs {:?}", a.shape(), b.shape()))?;
    let d = a.max_abs_diff(b);
    ensure(d <= tol, || format!("{name}: max difference {d:.3e} exceeds {tol:.0e}"))
}

pub fn registry() -> Vec<Suite> {
    vec![
        Suite {
            name: "conv2d-oracle",
            oracles: &["conv2d"],
            run: conv_suite,
        },
        Suite {
            name: "avg-pool-oracle",
            oracles: &["avg_pool2d"],
            run: pool_suite,
        },
        Suite {
            name: "bilinear-oracle",
            oracles: &["bilinear_sample"],
            run: bilinear_suite,
        },
        Suite {
            name: "softmax-and-pool-oracle",
            oracles: &["softmax", "global_max_min_pool"],
            run: softmax_suite,
        },
        Suite {
            name: "gradient-checks",
            oracles: &[],
            run: gradient_suite,
        },
        Suite {
            name: "correlation-oracle",
            oracles: &["correlation"],
            run: correlation_suite,
        },
        Suite {
            name: "lookup-oracle",
            oracles: &["lookup"],
            run: lookup_suite,
        },
        Suite {
            name: "alo-scalars",
            oracles: &[],
            run: alo_suite,
        },
        Suite {
            name: "afl-oracle",
            oracles: &["axis_attention", "relative_shift"],
            run: afl_suite,
        },
        Suite {
            name: "io-and-metrics",
            oracles: &[],
            run: io_suite,
        },
    ]
}

pub fn run_all() -> Vec<Outcome> {
    registry()
        .into_iter()
        .map(|s| Outcome {
            name: s.name,
            result: (s.run)(),
        })
        .collect()
}

fn conv_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(11);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 3)] {
        let x = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[8, 4, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let fast = lib(ops::conv2d(&x, &k, &b, stride, pad))?;
        close("conv2d", &fast, &oracle::conv2d(&x, &k, &b, stride, pad), 1e-12)?;
    }
    Ok(())
}

fn pool_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(12);
    let v = Tensor::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
    close("avg_pool2d", &lib(ops::avg_pool2d(&v, 2))?, &oracle::avg_pool2d(&v, 2), 1e-12)?;
    let twice = lib(ops::avg_pool2d(&lib(ops::avg_pool2d(&v, 2))?, 2))?;
    close("pool composition", &twice, &lib(ops::avg_pool2d(&v, 4))?, 1e-12)
}

fn bilinear_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(13);
    let f = Tensor::uniform(&[3, 6, 7], -1.0, 1.0, &mut rng);
    let coords: Vec<(f64, f64)> = (0..50)
        .map(|_| (rng.uniform(-2.0, 9.0), rng.uniform(-2.0, 8.0)))
        .collect();
    close(
        "bilinear_sample",
        &lib(ops::bilinear_sample(&f, &coords))?,
        &oracle::bilinear_sample(&f, &coords),
        1e-12,
    )?;
    let nudged: Vec<(f64, f64)> = coords.iter().map(|&(x, y)| (x + 1e-9, y - 1e-9)).collect();
    close(
        "bilinear continuity",
        &lib(ops::bilinear_sample(&f, &coords))?,
        &lib(ops::bilinear_sample(&f, &nudged))?,
        2e-6,
    )
}

fn softmax_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(14);
    let x = Tensor::uniform(&[4, 7], -3.0, 3.0, &mut rng);
    let fast = ops::softmax(&x);
    for r in 0..4 {
        let row = &x.data()[r * 7..(r + 1) * 7];
        let want = oracle::softmax(row);
        let got = &fast.data()[r * 7..(r + 1) * 7];
        let d = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(d <= 1e-12, || format!("softmax row {r}: difference {d:.3e}"))?;
    }
    let shifted = ops::softmax(&x.map(|v| v + 17.5));
    close("softmax shift invariance", &fast, &shifted, 1e-12)?;
    let p = Tensor::uniform(&[5, 3, 4], -1.0, 1.0, &mut rng);
    let got = lib(ops::global_max_min_pool(&p))?;
    ensure(got.data() == oracle::global_max_min_pool(&p).as_slice(), || {
        "global_max_min_pool differs from oracle".into()
    })
}

fn gradient_suite() -> SuiteResult {
    for (name, err) in lib(check_op_cases(15, 1e-5))? {
        ensure(err <= 1e-4, || format!("{name}: relative gradient error {err:.3e}"))?;
    }
    Ok(())
}

fn correlation_suite() -> SuiteResult {
    for seed in 0..10 {
        let mut rng = SplitMix64::new(100 + seed);
        let f1 = Tensor::uniform(&[16, 8, 8], -1.0, 1.0, &mut rng);
        let f2 = Tensor::uniform(&[16, 8, 8], -1.0, 1.0, &mut rng);
        let fast = lib(correlation_pyramid(&f1, &f2, 4, false))?;
        let slow = lib(correlation_oracle(&f1, &f2, 4))?;
        for (l, (a, b)) in fast.iter().zip(&slow).enumerate() {
            close(&format!("correlation level {l}"), a, b, 1e-12)?;
        }
        for l in 1..4 {
            let pooled = lib(ops::avg_pool2d(&fast[l - 1], 2))?;
            ensure(pooled.bit_eq(&fast[l]), || format!("level {l} is not the pooled level {}", l - 1))?;
        }
    }
    Ok(())
}

fn lookup_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(16);
    let f1 = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
    let f2 = Tensor::uniform(&[4, 8, 8], -1.0, 1.0, &mut rng);
    let pyr = lib(correlation_pyramid(&f1, &f2, 3, false))?;
    let flow = lib(FlowField::new(
        Tensor::uniform(&[8, 8], -3.0, 3.0, &mut rng),
        Tensor::uniform(&[8, 8], -3.0, 3.0, &mut rng),
        Resolution::Eighth,
    ))?;
    let base = make_vanilla_grid(2);
    let vanilla = vec![base.clone(); 3];
    let fast = lib(lookup_correlation(&pyr, &flow, &vanilla))?;
    close("vanilla lookup", &fast, &lib(oracle::lookup(&pyr, &flow, &vanilla))?, 1e-12)?;
    let scalars = AloScalars {
        s_x: vec![1.3, 2.1, 2.9],
        s_y: vec![1.7, 1.1, 2.5],
        d_x: vec![0.4, 1.9, 0.0],
        d_y: vec![1.2, 0.3, 2.0],
    };
    let grids = scalars.grids(&base);
    let fast = lib(lookup_correlation(&pyr, &flow, &grids))?;
    close("amorphous lookup", &fast, &lib(oracle::lookup(&pyr, &flow, &grids))?, 1e-12)?;
    let ident = AloScalars::identity(3).grids(&base);
    let a = lib(lookup_correlation(&pyr, &flow, &ident))?;
    let b = lib(lookup_correlation(&pyr, &flow, &vanilla))?;
    ensure(a.bit_eq(&b), || "identity scalars changed the lookup".into())
}

fn alo_suite() -> SuiteResult {
    let base = make_vanilla_grid(4);
    let mut rng = SplitMix64::new(17);
    for _ in 0..200 {
        let g = alo_transform_grid(
            &base,
            rng.uniform(1.0, 3.0),
            rng.uniform(1.0, 3.0),
            rng.uniform(0.0, 2.0),
            rng.uniform(0.0, 2.0),
        );
        ensure(g.is_symmetric(), || "transformed grid lost its symmetry".into())?;
    }
    let cfg = ModelConfig {
        hidden_dim: 6,
        context_dim: 5,
        alo_mid: 8,
        ..ModelConfig::default()
    };
    let w = lib(ModelWeights::init(&cfg, 3))?;
    for _ in 0..50 {
        let h = Tensor::uniform(&[6, 3, 4], -50.0, 50.0, &mut rng);
        let c = Tensor::uniform(&[5, 3, 4], 0.0, 50.0, &mut rng);
        let s = lib(alo_scalars(&h, &c, &w, cfg.levels))?;
        ensure(s.in_range(), || format!("scalars out of range: {s:?}"))?;
    }
    let zero = lib(ModelWeights::zeros(&cfg))?;
    let h = Tensor::uniform(&[6, 3, 4], -1.0, 1.0, &mut rng);
    let c = Tensor::uniform(&[5, 3, 4], 0.0, 1.0, &mut rng);
    let s = lib(alo_scalars(&h, &c, &zero, cfg.levels))?;
    ensure(s.s_x.iter().chain(&s.s_y).all(|&v| v == 2.0), || "zero head: s != 2".into())?;
    ensure(s.d_x.iter().chain(&s.d_y).all(|&v| v == 1.0), || "zero head: d != 1".into())?;
    ensure(reach(4, 4, 1.0, 0.0) == 256.0 && reach(4, 4, 3.0, 2.0) == 896.0, || {
        "reach arithmetic".into()
    })
}

fn afl_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(18);
    for (i, d_pe) in [8, 16].into_iter().cycle().take(10).enumerate() {
        let n = 1 + (i * 7) % 32;
        let cfg = ModelConfig {
            feature_dim: 6,
            pe_dim: d_pe,
            ..ModelConfig::default()
        };
        let w = lib(ModelWeights::init(&cfg, i as u64))?;
        let x = Tensor::uniform(&[6, n], -2.0, 2.0, &mut rng);
        let fast = lib(axis_attention(&x, &w, &cfg))?;
        close(&format!("axis attention n={n}"), &fast, &lib(afl_oracle(&x, &w, &cfg))?, 1e-10)?;
    }
    let table = lib(positional_encoding(16, 8))?;
    let raw: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
    let z: f64 = raw.iter().sum();
    let a: Vec<f64> = raw.iter().map(|v| v / z).collect();
    for i in 0..16 {
        let mut o = vec![0.0; 8];
        let mut direct = vec![0.0; 8];
        for (j, aj) in a.iter().enumerate() {
            let pj = crate::afl::encode_position(j as f64, 8, table.base);
            let rel = crate::afl::encode_position(i as f64 - j as f64, 8, table.base);
            for k in 0..8 {
                o[k] += aj * pj[k];
                direct[k] += aj * rel[k];
            }
        }
        let r = relative_shift(&o, i, &table);
        let d = r.iter().zip(&direct).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(d <= 1e-12, || format!("relative shift at i={i}: difference {d:.3e}"))?;
    }
    Ok(())
}

fn io_suite() -> SuiteResult {
    let mut rng = SplitMix64::new(19);
    let f = lib(FlowField::new(
        Tensor::uniform(&[6, 8], -9.0, 9.0, &mut rng).map(|v| v as f32 as f64),
        Tensor::uniform(&[6, 8], -9.0, 9.0, &mut rng).map(|v| v as f32 as f64),
        Resolution::Full,
    ))?;
    let back = lib(decode_flo(&encode_flo(&f)))?;
    ensure(back.u().bit_eq(f.u()) && back.v().bit_eq(f.v()), || ".flo round trip".into())?;
    let gt = FlowField::constant(4, 4, (1.0, 1.0), Resolution::Full);
    let pred = FlowField::constant(4, 4, (4.0, 5.0), Resolution::Full);
    ensure(lib(compute_epe(&pred, &gt))? == 5.0, || "EPE of a (3,4) error".into())?;
    let gt = FlowField::constant(1, 1, (100.0, 0.0), Resolution::Full);
    let pred = FlowField::constant(1, 1, (104.0, 0.0), Resolution::Full);
    ensure(
        lib(compute_f1_all(&pred, &gt, OutlierRule::PaperOr))? == 100.0
            && lib(compute_f1_all(&pred, &gt, OutlierRule::KittiAnd))? == 0.0,
        || "outlier rules".into(),
    )?;
    let zero = FlowField::zeros(1, 2, Resolution::Full);
    let trace = RefinementTrace {
        flows: vec![
            FlowField::constant(1, 2, (0.5, 0.5), Resolution::Full),
            FlowField::constant(1, 2, (0.25, 0.25), Resolution::Full),
        ],
        scalars: vec![],
    };
    ensure(lib(sequence_loss(&trace, &zero, 0.8))? == 1.3, || "loss worked example".into())
}
