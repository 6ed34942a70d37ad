//! Strategy x schedule x seed grids, run in parallel.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{ExperimentConfig, StrategyName};
use crate::error::HarnessError;
use crate::output::emit_metrics;
use crate::run::{datasets, run_experiment, RunRecord};

/// Environment variable capping the number of runs in flight.
pub const THREADS_ENV: &str = "C2F_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub strategies: Vec<StrategyName>,
    /// Schedule grid, used by progressive runs only.
    pub t0s: Vec<f64>,
    pub ramp_ends: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// One config per distinct setting, each still carrying every seed.
    pub fn configs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &s in &self.strategies {
            let with = |t0: f64, ramp_end: f64| ExperimentConfig {
                strategy: s,
                t0,
                ramp_end,
                hold: self.base.hold.min(ramp_end),
                seeds: self.seeds.clone(),
                ..self.base.clone()
            };
            if s == StrategyName::Pt {
                for &t0 in &self.t0s {
                    for &r in &self.ramp_ends {
                        out.push(with(t0, r));
                    }
                }
            } else {
                out.push(with(self.base.t0, self.base.ramp_end));
            }
        }
        out
    }
}

/// Row label: strategy, plus `(t0, ramp_end)` for progressive runs.
pub fn label(cfg: &ExperimentConfig) -> String {
    match cfg.strategy {
        StrategyName::Bl => "BL".into(),
        StrategyName::Ind => "IND".into(),
        StrategyName::Jnt => "JNT".into(),
        StrategyName::Pt => format!("PT({},{})", cfg.t0, cfg.ramp_end),
    }
}

/// Thread count from [`THREADS_ENV`], else rayon's default.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Runs every (config, seed) pair. Records come back in grid order whatever
/// the thread count. When `out` is given each run writes its files under
/// `out/<label>/seed<seed>`.
pub fn run_sweep(
    spec: &SweepSpec,
    threads: Option<usize>,
    out: Option<&Path>,
) -> Result<Vec<RunRecord>, HarnessError> {
    let configs = spec.configs();
    for c in &configs {
        c.validate()?;
    }
    let data = datasets(&spec.base)?;
    let jobs: Vec<(&ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::Other(format!("thread pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(cfg, seed)| {
                let (record, pair) = run_experiment(cfg, seed, &data)?;
                if let Some(dir) = out {
                    let sub = dir.join(label(cfg)).join(format!("seed{seed}"));
                    emit_metrics(&record, Some(&pair), &sub)?;
                }
                Ok(record)
            })
            .collect()
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Markdown table with one row per (setting, seed) and a median row per
/// setting. C and F are the coarse- and fine-stage headline metric in percent.
pub fn sweep_table(records: &[RunRecord]) -> String {
    let mut out = String::from("| setting | seed | C | F | final fine loss |\n|---|---|---|---|---|\n");
    let mut labels: Vec<String> = Vec::new();
    for r in records {
        let l = label(&r.config);
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let pct = |v: f64| if v.is_nan() { "-".to_string() } else { format!("{:.2}", 100.0 * v) };
    for l in labels {
        let rows: Vec<&RunRecord> = records.iter().filter(|r| label(&r.config) == l).collect();
        let (mut cs, mut fs, mut ls) = (Vec::new(), Vec::new(), Vec::new());
        for r in &rows {
            let c = r.eval.coarse.primary();
            let f = r.eval.fine.as_ref().map(|m| m.primary()).unwrap_or(f64::NAN);
            let loss = r.final_fine_loss();
            let _ = writeln!(out, "| {l} | {} | {} | {} | {loss:.4} |", r.seed, pct(c), pct(f));
            cs.push(c);
            fs.push(f);
            ls.push(loss);
        }
        let _ = writeln!(
            out,
            "| {l} | median | {} | {} | {:.4} |",
            pct(median(&cs)),
            pct(median(&fs)),
            median(&ls)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TaskName;

    #[test]
    fn grid_expands_progressive_only() {
        let spec = SweepSpec {
            base: ExperimentConfig::preset(TaskName::Loc),
            strategies: vec![StrategyName::Bl, StrategyName::Pt],
            t0s: vec![0.0, 0.5],
            ramp_ends: vec![0.3, 0.6, 0.9],
            seeds: vec![1, 2],
        };
        let c = spec.configs();
        assert_eq!(c.len(), 1 + 6);
        assert_eq!(label(&c[0]), "BL");
        assert_eq!(label(&c[1]), "PT(0,0.3)");
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
