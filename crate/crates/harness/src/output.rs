//! Files written for each run.

use std::fmt::Write as _;
use std::path::Path;

use c2f_core::train::{CoarseFinePair, StepTrace};

use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::error::HarnessError;
use crate::run::RunRecord;

pub const METRICS_HEADER: &str = "iter,t,chose_coarse,loss_coarse,loss_fine,loss_total,lr";

pub fn metrics_csv(traces: &[StepTrace]) -> String {
    let mut out = String::with_capacity(64 * (traces.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for s in traces {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.iter, s.t, s.chose_coarse, s.loss_coarse, s.loss_fine, s.loss_total, s.lr
        );
    }
    out
}

/// Polyline chart of windowed coarse and fine losses.
pub fn curves_svg(traces: &[StepTrace], window: usize) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let window = window.max(1);
    let series = |f: &dyn Fn(&StepTrace) -> f64| -> Vec<(f64, f64)> {
        traces
            .chunks(window)
            .map(|c| {
                let x = c[0].iter as f64;
                (x, c.iter().map(f).sum::<f64>() / c.len() as f64)
            })
            .collect()
    };
    let coarse = series(&|s| s.loss_coarse);
    let fine = series(&|s| s.loss_fine);
    let xmax = traces.last().map(|s| s.iter as f64).unwrap_or(1.0).max(1.0);
    let ymax = coarse
        .iter()
        .chain(&fine)
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .fold(1e-12, f64::max);
    let line = |pts: &[(f64, f64)], color: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    pad + x / xmax * (w - 2.0 * pad),
                    h - pad - y / ymax * (h - 2.0 * pad)
                )
            })
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"12\">loss (max {ymax:.3}) over {xmax} iterations: coarse blue, fine red</text>\n",
        y0 = h - pad,
        x1 = w - pad,
    );
    svg += &line(&coarse, "steelblue");
    if fine.iter().any(|p| p.1 != 0.0) {
        svg += &line(&fine, "firebrick");
    }
    svg += "</svg>\n";
    svg
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    write_atomic(path, text.as_bytes()).map_err(|e| HarnessError::io(path, e))
}

/// Writes `metrics.csv`, `eval.json`, `run.json`, `config.toml`,
/// `curves.svg` and (when given) `checkpoint.c2f` into `dir`.
pub fn emit_metrics(
    record: &RunRecord,
    pair: Option<&CoarseFinePair>,
    dir: &Path,
) -> Result<(), HarnessError> {
    if record.traces.is_empty() {
        return Err(HarnessError::Other("no training rows to write".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(&record.traces))?;
    let eval = serde_json::to_string_pretty(&record.eval).expect("evaluation serializes");
    write(&dir.join("eval.json"), &(eval + "\n"))?;
    let run = serde_json::to_string_pretty(record).expect("record serializes");
    write(&dir.join("run.json"), &(run + "\n"))?;
    write(&dir.join("config.toml"), &record.config.to_toml_string())?;
    write(&dir.join("curves.svg"), &curves_svg(&record.traces, 50))?;
    if let Some(pair) = pair {
        save_checkpoint(pair, &dir.join("checkpoint.c2f"))?;
    }
    Ok(())
}
