//! Per-step metrics records and the versioned CSV they serialize to.
//! Column set is fixed by the `# moalign-metrics v1` header; stage-1 runs
//! fill `loss_flow`, stage-2 runs fill `loss_diff` / `loss_align`. In
//! deterministic mode `wall_ms` is written as 0 so that identical seeds
//! produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{PipelineError, Result};

pub const METRICS_HEADER: &str = "# moalign-metrics v1";
pub const STEP_COLUMNS: &str = "step,loss_diff,loss_align,loss_flow,loss_total,grad_norm,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_diff: f64,
    pub loss_align: f64,
    pub loss_flow: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| PipelineError::io(path, e))?;
        writeln!(out, "{STEP_COLUMNS}").map_err(|e| PipelineError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            out,
        })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt(r.loss_diff),
            fmt(r.loss_align),
            fmt(r.loss_flow),
            fmt(r.loss_total),
            fmt(r.grad_norm),
            fmt(r.wall_ms)
        )
        .map_err(|e| PipelineError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| PipelineError::io(&self.path, e))
    }
}

/// Parse a metrics CSV back into records (used by the ablation runner and
/// the acceptance suite).
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("step,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(PipelineError::Config(format!(
                "{}: bad metrics row '{line}'",
                path.display()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                PipelineError::Config(format!("{}: bad number '{s}'", path.display()))
            })
        };
        rows.push(StepRecord {
            step: f[0]
                .parse()
                .map_err(|_| PipelineError::Config(format!("bad step '{}'", f[0])))?,
            loss_diff: num(f[1])?,
            loss_align: num(f[2])?,
            loss_flow: num(f[3])?,
            loss_total: num(f[4])?,
            grad_norm: num(f[5])?,
            wall_ms: num(f[6])?,
        });
    }
    Ok(rows)
}

/// Long-format evaluation CSV: `metric,value` rows, with optional leading
/// `# warning:` comment lines.
pub fn write_eval_csv(path: &Path, warnings: &[String], rows: &[(String, f64)]) -> Result<()> {
    let mut text = String::new();
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for w in warnings {
        text.push_str(&format!("# warning: {w}\n"));
    }
    text.push_str("metric,value\n");
    for (k, v) in rows {
        text.push_str(&format!("{k},{}\n", fmt(*v)));
    }
    std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_monotone_steps() {
        let dir = std::env::temp_dir().join("moalign-metrics-test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.csv");
        let mut w = MetricsWriter::create(&p).unwrap();
        for step in 0..5 {
            w.write(&StepRecord {
                step,
                loss_diff: step as f64 * 0.5,
                loss_align: 0.25,
                loss_flow: 0.0,
                loss_total: step as f64 * 0.5 + 0.125,
                grad_norm: 1.0,
                wall_ms: 0.0,
            })
            .unwrap();
        }
        w.finish().unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[0].step < w[1].step));
        assert!((rows[3].loss_diff - 1.5).abs() < 1e-12);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
    }
}
