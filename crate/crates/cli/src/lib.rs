//! Command-line driver: argument parsing, config layering and the
//! subcommands. [`run`] maps outcomes to exit codes: 0 on success, 1 on
//! usage errors, 2 on runtime or validation errors.

mod args;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::Parser;

use efraft::bench::{bench_lookup, default_configs, BenchSettings};
use efraft::io::{read_flo, read_ppm, write_atomic, write_flo, write_ppm};
use efraft::metrics::{compute_epe, compute_f1_all, OutlierRule};
use efraft::updater::refine;
use efraft::viz::flow_to_color;
use efraft::{selftest, synthetic, train, ModelConfig, ModelWeights, Tensor};

pub use args::{Cli, Command, ModelArgs};

/// Environment variable capping the worker threads (0 or unset = auto).
pub const THREADS_ENV: &str = "EFRAFT_THREADS";

/// Configuration keys accepted in files besides the model keys.
const CLI_KEYS: [&str; 1] = ["seed"];

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match configure_threads().and_then(|()| execute(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a non-negative integer, got `{raw}`"))?;
    if n > 0 {
        // A second call in the same process finds the pool already built.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Estimate(a) => estimate(a),
        Command::Eval(a) => eval(a),
        Command::Selftest => Ok(run_selftest()),
        Command::Bench(a) => bench(a),
        Command::TrainToy(a) => train_toy(a),
        Command::InitWeights(a) => init_weights(a),
        Command::Viz(a) => viz(a),
    }
}

/// `<weights>.cfg`, written next to every weights file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_os_string();
    s.push(".cfg");
    PathBuf::from(s)
}

fn apply_text(cfg: &mut ModelConfig, text: &str, origin: &Path) -> Result<()> {
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", origin.display(), lineno + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if CLI_KEYS.contains(&k) {
            continue;
        }
        cfg.set(k, v)
            .with_context(|| format!("{}:{}", origin.display(), lineno + 1))?;
    }
    Ok(())
}

/// Layers the configuration sources over `base`, then validates.
pub fn resolve_config(base: ModelConfig, sidecar: Option<&Path>, args: &ModelArgs) -> Result<ModelConfig> {
    let mut cfg = base;
    for path in sidecar.into_iter().chain(args.config.as_deref()) {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        apply_text(&mut cfg, &text, path)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(n) = args.iters {
        cfg.iters = n;
    }
    if let Some(on) = args.alo {
        cfg.alo = on;
    }
    if let Some(on) = args.afl {
        cfg.afl = on;
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_weights(weights: &ModelWeights, cfg: &ModelConfig, path: &Path) -> Result<()> {
    weights.save(path).with_context(|| format!("writing {}", path.display()))?;
    let mut text = cfg.to_kv_text();
    if let Some(seed) = weights.seed() {
        writeln!(text, "seed={seed}").unwrap();
    }
    let side = sidecar_path(path);
    write_atomic(&side, text.as_bytes()).with_context(|| format!("writing {}", side.display()))?;
    Ok(())
}

/// Replicates the last row and column until both extents are multiples of `m`.
pub fn pad_edge(image: &Tensor, m: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    Tensor::from_fn(&[c, ph, pw], |i| image.at(&[i[0], i[1].min(h - 1), i[2].min(w - 1)]))
}

fn estimate(a: args::EstimateArgs) -> Result<i32> {
    let weights = ModelWeights::load(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    let side = sidecar_path(&a.weights);
    let cfg = resolve_config(ModelConfig::default(), side.exists().then_some(side.as_path()), &a.model)?;
    weights.check_against(&cfg)?;
    let f1 = read_ppm(&a.frame1).with_context(|| format!("reading {}", a.frame1.display()))?;
    let f2 = read_ppm(&a.frame2).with_context(|| format!("reading {}", a.frame2.display()))?;
    if f1.shape() != f2.shape() {
        bail!("frames differ in size: {:?} vs {:?}", f1.shape(), f2.shape());
    }
    let (h, w) = (f1.shape()[1], f1.shape()[2]);
    let m = cfg.size_multiple();
    let trace = refine(&pad_edge(&f1, m), &pad_edge(&f2, m), &weights, &cfg)?;
    let flow = trace.last().crop(h, w)?;
    if !flow.is_finite() {
        bail!("estimated flow contains non-finite values");
    }
    write_flo(&a.out, &flow).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.viz {
        write_ppm(path, &flow_to_color(&flow, None)).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "estimated {w}x{h} flow in {} iterations (alo={}, afl={}) -> {}",
        cfg.iters,
        cfg.alo,
        cfg.afl,
        a.out.display()
    );
    Ok(0)
}

fn eval(a: args::EvalArgs) -> Result<i32> {
    let pred = read_flo(&a.pred).with_context(|| format!("reading {}", a.pred.display()))?;
    let gt = read_flo(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    println!("epe\t{:.6}", compute_epe(&pred, &gt)?);
    for rule in OutlierRule::ALL {
        println!("f1_all[{rule}]\t{:.4}", compute_f1_all(&pred, &gt, rule)?);
    }
    Ok(0)
}

fn run_selftest() -> i32 {
    let outcomes = selftest::run_all();
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(()) => println!("PASS {}", o.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}: {msg}", o.name);
            }
        }
    }
    println!("{} of {} suites passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        0
    } else {
        2
    }
}

fn bench(a: args::BenchArgs) -> Result<i32> {
    let cfg = resolve_config(ModelConfig::default(), None, &a.model)?;
    let settings = BenchSettings {
        height: a.height,
        width: a.width,
        iters: cfg.iters,
        repeats: a.repeats,
        seed: a.seed,
    };
    let report = bench_lookup(&cfg, &default_configs(), &settings)?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = &a.tsv {
        write_atomic(path, tsv.as_bytes())?;
    }
    if let Some(path) = &a.json {
        write_atomic(path, report.to_json().as_bytes())?;
    }
    Ok(0)
}

fn train_toy(a: args::TrainArgs) -> Result<i32> {
    let base = ModelConfig {
        iters: train::MAX_ITERS,
        ..ModelConfig::default()
    };
    let cfg = resolve_config(base, None, &a.model)?;
    let mut weights = ModelWeights::init(&cfg, a.seed)?;
    let scenes = synthetic::toy_scenes(a.seed)?;
    let losses = train::toy_train_with(&cfg, &mut weights, &scenes, a.steps, a.lr, |step, loss| {
        if step % 10 == 0 || step == a.steps {
            eprintln!("step {step:>4}  loss {loss:.6}");
        }
    })?;
    let (first, last) = (losses[0], losses[losses.len() - 1]);
    println!("loss {first:.6} -> {last:.6} (ratio {:.4})", last / first);
    if let Some(path) = &a.curve {
        let mut text = String::from("step\tloss\n");
        for (i, l) in losses.iter().enumerate() {
            writeln!(text, "{i}\t{l}").unwrap();
        }
        write_atomic(path, text.as_bytes())?;
    }
    if let Some(path) = &a.out {
        save_weights(&weights, &cfg, path)?;
    }
    Ok(0)
}

fn init_weights(a: args::InitArgs) -> Result<i32> {
    let cfg = resolve_config(ModelConfig::default(), None, &a.model)?;
    let weights = ModelWeights::init(&cfg, a.seed)?;
    let count = weights.num_scalars();
    if count != cfg.analytic_param_count() {
        bail!(
            "initialized {count} parameters but the config predicts {}",
            cfg.analytic_param_count()
        );
    }
    save_weights(&weights, &cfg, &a.out)?;
    println!("{count} parameters in {} tensors -> {}", weights.len(), a.out.display());
    Ok(0)
}

fn viz(a: args::VizArgs) -> Result<i32> {
    if let Some(cap) = a.cap {
        if !(cap > 0.0 && cap.is_finite()) {
            bail!("--cap must be a positive number, got {cap}");
        }
    }
    let flow = read_flo(&a.flow).with_context(|| format!("reading {}", a.flow.display()))?;
    write_ppm(&a.out, &flow_to_color(&flow, a.cap)).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(0)
}
