//! Runtime, memory and parameter comparison of the lookup variants.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::lookup::{reach, SCALE_RANGE, SPLIT_RANGE};
use crate::params::ParamScope;
use crate::synthetic::gen_translation_pair;
use crate::updater::refine_graph;
use crate::weights::ModelWeights;

/// Which optional modules a benchmark run enables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchConfig {
    pub name: String,
    pub alo: bool,
    pub afl: bool,
}

impl BenchConfig {
    pub fn new(name: &str, alo: bool, afl: bool) -> Self {
        Self {
            name: name.to_string(),
            alo,
            afl,
        }
    }
}

/// Baseline first, then each module alone, then both.
pub fn default_configs() -> Vec<BenchConfig> {
    vec![
        BenchConfig::new("baseline", false, false),
        BenchConfig::new("alo", true, false),
        BenchConfig::new("afl", false, true),
        BenchConfig::new("alo+afl", true, true),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            iters: 12,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub name: String,
    pub alo: bool,
    pub afl: bool,
    pub iters: usize,
    /// Median wall time of one full estimate divided by the iteration count.
    pub ms_per_iter: f64,
    /// Bytes held by every recorded tensor of one estimate.
    pub memory_bytes: usize,
    pub params: usize,
    /// Largest displacement one lookup can reach, in image pixels.
    pub reach_px: f64,
    /// Relative time change against the first record.
    pub time_overhead: f64,
    /// Relative memory change against the first record.
    pub memory_overhead: f64,
    /// Relative parameter change against the first record.
    pub param_growth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn record(&self, name: &str) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "config\talo\tafl\titers\tms_per_iter\tmemory_bytes\tparams\treach_px\ttime_overhead\tmemory_overhead\tparam_growth\n",
        );
        for r in &self.records {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.name,
                r.alo,
                r.afl,
                r.iters,
                r.ms_per_iter,
                r.memory_bytes,
                r.params,
                r.reach_px,
                r.time_overhead,
                r.memory_overhead,
                r.param_growth
            )
            .unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times full estimates on one synthetic pair for each configuration.
///
/// Runs are interleaved across configurations so that slow drift of the
/// machine affects all of them alike. The first configuration is the
/// reference for the relative columns.
pub fn bench_lookup(cfg: &ModelConfig, configs: &[BenchConfig], settings: &BenchSettings) -> Result<BenchReport> {
    let weights = ModelWeights::init(cfg, settings.seed)?;
    let scene = gen_translation_pair(settings.seed, settings.height, settings.width, (3.0, 2.0))?;
    let run_cfgs: Vec<ModelConfig> = configs
        .iter()
        .map(|c| ModelConfig {
            alo: c.alo,
            afl: c.afl,
            iters: settings.iters,
            ..cfg.clone()
        })
        .collect();

    let run = |c: &ModelConfig| -> Result<(f64, usize)> {
        let start = Instant::now();
        let g = Graph::new();
        let p = ParamScope::frozen(&g, &weights);
        refine_graph(&p, c, g.constant(scene.frame1.clone()), g.constant(scene.frame2.clone()))?;
        let elapsed = start.elapsed().as_secs_f64();
        Ok((elapsed, g.value_bytes()))
    };

    let mut times = vec![Vec::new(); configs.len()];
    let mut memory = vec![0; configs.len()];
    for c in &run_cfgs {
        run(c)?;
    }
    for _ in 0..settings.repeats.max(1) {
        for (i, c) in run_cfgs.iter().enumerate() {
            let (t, m) = run(c)?;
            times[i].push(t);
            memory[i] = m;
        }
    }

    let mut records: Vec<BenchRecord> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (s, d) = if c.alo {
                (SCALE_RANGE.1, SPLIT_RANGE.1)
            } else {
                (1.0, 0.0)
            };
            BenchRecord {
                name: c.name.clone(),
                alo: c.alo,
                afl: c.afl,
                iters: settings.iters,
                ms_per_iter: 1e3 * median(times[i].clone()) / settings.iters as f64,
                memory_bytes: memory[i],
                params: cfg.active_param_count(c.alo, c.afl),
                reach_px: reach(cfg.radius, cfg.levels, s, d),
                time_overhead: 0.0,
                memory_overhead: 0.0,
                param_growth: 0.0,
            }
        })
        .collect();
    if let Some(base) = records.first().cloned() {
        for r in &mut records {
            r.time_overhead = r.ms_per_iter / base.ms_per_iter - 1.0;
            r.memory_overhead = r.memory_bytes as f64 / base.memory_bytes as f64 - 1.0;
            r.param_growth = r.params as f64 / base.params as f64 - 1.0;
        }
    }
    Ok(BenchReport {
        height: settings.height,
        width: settings.width,
        records,
    })
}
