//! Grid sweeps over one configuration axis, aggregated by median over seeds.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::config::{ExperimentConfig, Mode};
use super::run::{run_experiment_with_cache, RunSummary};
use crate::error::{Error, Result};
use crate::metrics::{median, APResult};
use crate::sampler::{Ratio, SamplingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Initial magnification; turns RGA on.
    Lambda0,
    /// Comma-separated per-head ratios, e.g. `1:1,1:9`; turns PRM on.
    RatioPair,
    /// `soft` or `hard` for every head.
    SamplingMode,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda0" => Ok(Self::Lambda0),
            "ratio-pair" => Ok(Self::RatioPair),
            "sampling-mode" => Ok(Self::SamplingMode),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}, expected lambda0, ratio-pair or sampling-mode"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lambda0 => "lambda0",
            Self::RatioPair => "ratio-pair",
            Self::SamplingMode => "sampling-mode",
        })
    }
}

/// `base` with `value` applied along `axis`.
pub fn apply_axis(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    match axis {
        SweepAxis::Lambda0 => {
            let l: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("lambda0 value {value:?} is not a number")))?;
            c.set_lambda0(l);
            c.set_mode(if c.mode().prm() { Mode::RgaPrm } else { Mode::Rga });
        }
        SweepAxis::RatioPair => {
            let ratios = value
                .split(',')
                .map(str::parse::<Ratio>)
                .collect::<Result<Vec<_>>>()?;
            c.set_prm_ratios(ratios);
            c.set_mode(if c.mode().rga() { Mode::RgaPrm } else { Mode::Prm });
        }
        SweepAxis::SamplingMode => c.set_sampling_mode(value.trim().parse::<SamplingMode>()?),
    }
    c.validate()?;
    Ok(c)
}

const METRICS: [&str; 5] = ["ap_mean", "ap50", "ap75", "ap_bucket_1_3", "ap_bucket_8_inf"];

fn metric_values(r: &APResult) -> [f64; 5] {
    let s = r.summary();
    METRICS.map(|k| s.get(k).and_then(|v| v.as_f64()).unwrap_or(f64::NAN))
}

/// Median metrics of one swept value.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    /// Ensemble medians in the order of [`SweepTable::header`].
    pub ensemble: Vec<f64>,
    /// Median `ap_mean` of each head used alone.
    pub heads: Vec<f64>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    fn max_heads(&self) -> usize {
        self.rows.iter().map(|r| r.heads.len()).max().unwrap_or(0)
    }

    pub fn header(&self) -> String {
        let mut cols = vec![self.axis.to_string(), "status".into(), "seeds_ok".into()];
        cols.extend(METRICS.iter().map(|s| s.to_string()));
        cols.extend((1..=self.max_heads()).map(|i| format!("h{i}_ap_mean")));
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.header())?;
        let heads = self.max_heads();
        for r in &self.rows {
            let status = if r.seeds_failed == 0 { "ok" } else { "failed" };
            // a value containing commas is quoted
            let value = if r.value.contains(',') {
                format!("\"{}\"", r.value)
            } else {
                r.value.clone()
            };
            write!(w, "{value},{status},{}", r.seeds_ok)?;
            let fmt = |v: Option<&f64>| match v {
                Some(x) if x.is_finite() => format!("{x:.6}"),
                _ => String::new(),
            };
            for i in 0..METRICS.len() {
                write!(w, ",{}", fmt(r.ensemble.get(i)))?;
            }
            for i in 0..heads {
                write!(w, ",{}", fmt(r.heads.get(i)))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn cell_dir(out: &Path, axis: SweepAxis, value: &str, seed: u64) -> PathBuf {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    out.join(format!("{axis}-{clean}")).join(format!("seed-{seed}"))
}

/// Runs every `(value, seed)` cell, each in its own directory under `out`,
/// and writes `sweep.csv`. Failed cells are recorded and skipped.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<SweepTable> {
    sweep_with(base, axis, values, seeds, out, |c, dir| {
        run_experiment_with_cache(c, dir, &out.join("data"))
    })
}

/// [`sweep`] with a custom cell runner.
pub fn sweep_with(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    mut run: impl FnMut(&ExperimentConfig, &Path) -> Result<RunSummary>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut ensemble: Vec<[f64; 5]> = Vec::new();
        let mut heads: Vec<Vec<f64>> = Vec::new();
        let mut errors = Vec::new();
        for &seed in seeds {
            let result = apply_axis(base, axis, value).and_then(|mut c| {
                c.seed = seed;
                run(&c, &cell_dir(out, axis, value, seed))
            });
            match result {
                Ok(s) => {
                    ensemble.push(metric_values(&s.eval.ensemble));
                    heads.push(s.eval.heads.iter().map(|h| h.mean).collect());
                }
                Err(e) => errors.push(format!("seed {seed}: {e}")),
            }
        }
        let column = |i: usize| median(&ensemble.iter().map(|m| m[i]).collect::<Vec<_>>());
        let n_heads = heads.iter().map(Vec::len).max().unwrap_or(0);
        let head_medians = (0..n_heads)
            .map(|i| median(&heads.iter().filter_map(|h| h.get(i).copied()).collect::<Vec<_>>()))
            .collect();
        rows.push(SweepRow {
            value: value.clone(),
            seeds_ok: ensemble.len(),
            seeds_failed: errors.len(),
            ensemble: if ensemble.is_empty() {
                Vec::new()
            } else {
                (0..METRICS.len()).map(column).collect()
            },
            heads: head_medians,
            errors,
        });
    }
    let table = SweepTable { axis, rows };
    let path = out.join("sweep.csv");
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("writing to memory");
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
