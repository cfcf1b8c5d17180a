//! Metric files: one CSV row per (aggregator, run, round) plus a summary row
//! per aggregator, or the full series as JSON.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use iowa_fl::ScenarioResult;

use crate::config::Format;

pub const CSV_COLUMNS: [&str; 9] = [
    "run",
    "round",
    "aggregator",
    "global_accuracy",
    "c_used",
    "n_discarded",
    "adversarial_discarded",
    "benign_discarded",
    "weights_json",
];

/// Value of the `run` column on summary rows.
pub const SUMMARY_RUN: &str = "mean";

pub fn write_csv<W: Write>(results: &[ScenarioResult], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for result in results {
        for series in &result.runs {
            for m in &series.rounds {
                let weights = serde_json::to_string(&m.weights).map_err(io::Error::other)?;
                w.write_record([
                    series.run.to_string(),
                    m.round_index.to_string(),
                    result.aggregator.clone(),
                    m.global_accuracy.to_string(),
                    m.c_used.map(|c| c.to_string()).unwrap_or_default(),
                    m.discarded_ids.len().to_string(),
                    m.adversarial_discarded.to_string(),
                    m.benign_discarded.to_string(),
                    weights,
                ])?;
            }
        }
        w.write_record([
            SUMMARY_RUN.to_string(),
            result.mean_global_accuracy.len().to_string(),
            result.aggregator.clone(),
            result.mean_final_accuracy().to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush()
}

pub fn write_json<W: Write>(results: &[ScenarioResult], mut out: W) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, results).map_err(io::Error::other)?;
    writeln!(out)?;
    out.flush()
}

/// Writes `results` to `path`, or to stdout when `path` is `None`.
pub fn emit_metrics(results: &[ScenarioResult], path: Option<&Path>, format: Format) -> io::Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    };
    match format {
        Format::Csv => write_csv(results, sink),
        Format::Json => write_json(results, sink),
    }
}

pub fn read_json(path: &Path) -> io::Result<Vec<ScenarioResult>> {
    let file = File::open(path)?;
    serde_json::from_reader(io::BufReader::new(file)).map_err(io::Error::other)
}
