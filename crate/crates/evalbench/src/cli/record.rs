use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Column order of every result CSV.
pub const RECORD_COLUMNS: [&str; 7] = [
    "experiment",
    "method",
    "protocol_or_estimator",
    "step",
    "metric",
    "value",
    "seed",
];

/// Column order of the `summarize` output.
pub const SUMMARY_COLUMNS: [&str; 9] = [
    "experiment",
    "method",
    "protocol_or_estimator",
    "step",
    "metric",
    "n",
    "mean",
    "std",
    "se",
];

/// One measured value. `step` is a task count or an acquisition count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub method: String,
    pub protocol_or_estimator: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl ExperimentRecord {
    pub fn new(
        experiment: &str,
        method: &str,
        protocol_or_estimator: &str,
        step: usize,
        metric: &str,
        value: f64,
        seed: u64,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{experiment}/{method}/{protocol_or_estimator} {metric} at step {step}, seed {seed}"
            )));
        }
        Ok(Self {
            experiment: experiment.into(),
            method: method.into(),
            protocol_or_estimator: protocol_or_estimator.into(),
            step,
            metric: metric.into(),
            value,
            seed,
        })
    }
}

/// Writes the header even when `records` is empty.
pub fn write_records(records: &[ExperimentRecord], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(RECORD_COLUMNS)?;
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(r: impl Read, origin: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            message: format!(
                "expected columns {}, found {}",
                RECORD_COLUMNS.join(","),
                header.join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<ExperimentRecord>().enumerate() {
        let rec = row.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("row {}: {e}", i + 2),
        })?;
        if !rec.value.is_finite() {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                message: format!("row {}: value is not finite", i + 2),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Mean and spread of one group. `std` and `se` are `None` for a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub protocol_or_estimator: String,
    pub step: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub se: Option<f64>,
}

/// Groups by everything except value and seed, in order of first appearance.
pub fn summarize(records: &[ExperimentRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(&str, &str, &str, usize, &str)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in records {
        let key = (
            r.experiment.as_str(),
            r.method.as_str(),
            r.protocol_or_estimator.as_str(),
            r.step,
            r.metric.as_str(),
        );
        let slot = *index.entry(key).or_insert_with(|| {
            keys.push(key);
            values.push(Vec::new());
            keys.len() - 1
        });
        values[slot].push(r.value);
    }
    keys.into_iter()
        .zip(values)
        .map(|((e, m, p, s, k), v)| {
            let spread = (v.len() > 1).then(|| stats::std_dev(&v));
            SummaryRow {
                experiment: e.into(),
                method: m.into(),
                protocol_or_estimator: p.into(),
                step: s,
                metric: k.into(),
                n: v.len(),
                mean: stats::mean(&v),
                std: spread,
                se: spread.map(|sd| sd / (v.len() as f64).sqrt()),
            }
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_COLUMNS)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.experiment.clone(),
            r.method.clone(),
            r.protocol_or_estimator.clone(),
            r.step.to_string(),
            r.metric.clone(),
            r.n.to_string(),
            r.mean.to_string(),
            opt(r.std),
            opt(r.se),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads every file and summarizes the union of their rows.
pub fn summarize_files(paths: &[impl AsRef<Path>]) -> Result<Vec<SummaryRow>> {
    let mut all = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let f = std::fs::File::open(p).map_err(|e| Error::Parse {
            path: p.to_path_buf(),
            message: e.to_string(),
        })?;
        all.extend(read_records(f, p)?);
    }
    Ok(summarize(&all))
}
