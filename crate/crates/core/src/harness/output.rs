//! Persistence: `summary.csv`, one JSON-lines log per run and a resolved
//! configuration snapshot.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::Error;

use super::experiment::{aggregate, RunResult};
use super::metrics::{AggregateRow, MetricStat, RunMetrics};
use super::record::{EpisodeRecord, RunHeader, StepLog};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config_resolved.toml";
pub const RUNS_DIR: &str = "runs";
const SUMMARY_HEADER: [&str; 7] = ["experiment", "method", "condition", "metric", "mean", "std", "n"];

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), message: message.into() }
}

pub fn run_file_name(h: &RunHeader) -> String {
    format!(
        "{}_{:02}-{}_{}_s{:03}_r{:02}.jsonl",
        h.experiment,
        h.method_index,
        h.method.slug(),
        h.condition.name(),
        h.seed_index,
        h.run
    )
}

pub fn write_summary(rows: &[AggregateRow], path: &Path) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_summary_to(rows, BufWriter::new(file)).map_err(|e| format_err(path, e.to_string()))
}

/// Writes the summary CSV to any sink.
pub fn write_summary_to<W: Write>(rows: &[AggregateRow], sink: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SUMMARY_HEADER)?;
    for row in rows {
        for s in &row.stats {
            w.write_record([
                row.experiment.as_str(),
                row.method.as_str(),
                row.condition.as_str(),
                s.metric.as_str(),
                &s.mean.to_string(),
                &s.std.to_string(),
                &s.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses `summary.csv` back into rows, grouping consecutive lines.
pub fn read_summary(path: &Path) -> Result<Vec<AggregateRow>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers().map_err(|e| format_err(path, e.to_string()))?.clone();
    if headers.iter().ne(SUMMARY_HEADER) {
        return Err(format_err(path, "unexpected summary header"));
    }
    let mut rows: Vec<AggregateRow> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64, Error> {
            rec[i].parse().map_err(|_| format_err(path, format!("bad number `{}`", &rec[i])))
        };
        let stat = MetricStat {
            metric: rec[3].to_string(),
            mean: num(4)?,
            std: num(5)?,
            n: rec[6].parse().map_err(|_| format_err(path, format!("bad count `{}`", &rec[6])))?,
        };
        match rows.last_mut() {
            Some(last) if last.experiment == rec[0] && last.method == rec[1] && last.condition == rec[2] => {
                last.stats.push(stat)
            }
            _ => rows.push(AggregateRow {
                experiment: rec[0].to_string(),
                method: rec[1].to_string(),
                condition: rec[2].to_string(),
                stats: vec![stat],
            }),
        }
    }
    Ok(rows)
}

pub fn write_run(record: &EpisodeRecord, path: &Path) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json_err = |e: serde_json::Error| format_err(path, e.to_string());
    serde_json::to_writer(&mut w, &record.header).map_err(json_err)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    for step in &record.steps {
        serde_json::to_writer(&mut w, step).map_err(json_err)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run(path: &Path) -> Result<EpisodeRecord, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| format_err(path, "empty run log"))?
        .map_err(|e| Error::io(path, e))?;
    let header: RunHeader =
        serde_json::from_str(&first).map_err(|e| format_err(path, format!("header: {e}")))?;
    let mut steps = Vec::with_capacity(header.steps);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step: StepLog =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 2)))?;
        steps.push(step);
    }
    Ok(EpisodeRecord { header, steps })
}

/// All run logs under `dir/runs` (or `dir` itself), in reporting order.
pub fn read_runs(dir: &Path) -> Result<Vec<EpisodeRecord>, Error> {
    let runs_dir = if dir.join(RUNS_DIR).is_dir() { dir.join(RUNS_DIR) } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&runs_dir)
        .map_err(|e| Error::io(&runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut records = paths.iter().map(|p| read_run(p)).collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| {
        let key = |h: &RunHeader| (h.experiment.clone(), h.method_index, h.seed_index, h.run);
        key(&a.header).cmp(&key(&b.header))
    });
    Ok(records)
}

/// Recomputes the aggregate rows from raw run logs.
pub fn reaggregate(records: Vec<EpisodeRecord>) -> Vec<AggregateRow> {
    let runs: Vec<RunResult> = records
        .into_iter()
        .map(|record| RunResult { metrics: RunMetrics::from_steps(&record.steps), record })
        .collect();
    aggregate(&runs)
}

/// Writes the summary, run logs and resolved config into `out_dir`.
pub fn write_outputs(rows: &[AggregateRow], runs: &[RunResult], cfg: &Config, out_dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let runs_dir = out_dir.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let mut written = Vec::with_capacity(runs.len() + 2);

    let summary = out_dir.join(SUMMARY_FILE);
    write_summary(rows, &summary)?;
    written.push(summary);

    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| Error::io(&config_path, e))?;
    written.push(config_path);

    for run in runs {
        let path = runs_dir.join(run_file_name(&run.record.header));
        write_run(&run.record, &path)?;
        written.push(path);
    }
    Ok(written)
}
