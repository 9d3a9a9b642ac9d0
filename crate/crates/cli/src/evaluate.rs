use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use scribble_guidance::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
}

impl Stat {
    fn of(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        };
        Self { mean, median }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub reports: usize,
    pub scribble_ratio: Stat,
    pub scribble_ratio_pooled: Stat,
    pub miou: Stat,
    pub orientation_error_deg: Stat,
}

impl Aggregate {
    pub fn of(reports: &[EvalReport]) -> Self {
        let col = |f: fn(&EvalReport) -> f64| Stat::of(reports.iter().map(f).collect());
        Self {
            reports: reports.len(),
            scribble_ratio: col(|r| r.scribble_ratio),
            scribble_ratio_pooled: col(|r| r.scribble_ratio_pooled),
            miou: col(|r| r.miou),
            orientation_error_deg: col(|r| r.orientation_error_deg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub a: Aggregate,
    pub b: Aggregate,
    /// Mean of `b` minus mean of `a`.
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    pub scribble_ratio: f64,
    pub scribble_ratio_pooled: f64,
    pub miou: f64,
    pub orientation_error_deg: f64,
}

impl Comparison {
    pub fn new(a: Aggregate, b: Aggregate) -> Self {
        let delta = Delta {
            scribble_ratio: b.scribble_ratio.mean - a.scribble_ratio.mean,
            scribble_ratio_pooled: b.scribble_ratio_pooled.mean - a.scribble_ratio_pooled.mean,
            miou: b.miou.mean - a.miou.mean,
            orientation_error_deg: b.orientation_error_deg.mean - a.orientation_error_deg.mean,
        };
        Self { a, b, delta }
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Every `metrics.json` below `dir`, in path order.
pub fn load_reports(dir: &Path) -> anyhow::Result<Vec<EvalReport>> {
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    if files.is_empty() {
        bail!("no metrics.json files under {}", dir.display());
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{} is not a metrics report", f.display()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(Stat::of(vec![0.8, 0.4]), Stat { mean: 0.6000000000000001, median: 0.6000000000000001 });
        assert_eq!(Stat::of(vec![3.0, 1.0, 2.0]).median, 2.0);
    }
}
