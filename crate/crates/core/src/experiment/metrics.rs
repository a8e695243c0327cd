//! Per-round metrics CSV and the human-readable summary built from it.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::federation::{Phase, RoundReport};

pub const HEADER: [&str; 10] = [
    "experiment_id",
    "scope",
    "round",
    "phase",
    "client_id",
    "loss",
    "test_accuracy",
    "threshold",
    "n_selected",
    "pseudo_accuracy",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends one `round` row and one `client` row per participant for each report.
///
/// On `round` rows `threshold` is the global threshold; on `client` rows it is
/// that client's maximum global-model confidence.
pub struct MetricsWriter {
    experiment_id: String,
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, experiment_id: &str) -> Result<Self> {
        let mut out = csv::Writer::from_writer(File::create(path)?);
        out.write_record(HEADER).map_err(csv_io)?;
        out.flush()?;
        Ok(MetricsWriter {
            experiment_id: experiment_id.to_string(),
            out,
        })
    }

    pub fn write_report(&mut self, r: &RoundReport) -> Result<()> {
        let round = r.round.to_string();
        self.out
            .write_record([
                self.experiment_id.as_str(),
                "round",
                &round,
                r.phase.as_str(),
                "",
                &r.mean_client_loss.to_string(),
                &r.test_accuracy.to_string(),
                &opt(r.threshold),
                &r.total_pseudo_selected.to_string(),
                &opt(r.pseudo_label_accuracy),
            ])
            .map_err(csv_io)?;
        for c in &r.clients {
            self.out
                .write_record([
                    self.experiment_id.as_str(),
                    "client",
                    &round,
                    r.phase.as_str(),
                    &c.client_id.to_string(),
                    &c.loss.to_string(),
                    "",
                    &opt(c.client_threshold),
                    &c.n_selected.to_string(),
                    &opt(c.pseudo_accuracy()),
                ])
                .map_err(csv_io)?;
        }
        self.out.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Wall-clock seconds per round, kept apart so the metrics stay reproducible.
pub struct TimingsWriter(BufWriter<File>);

impl TimingsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "round,seconds")?;
        out.flush()?;
        Ok(TimingsWriter(out))
    }

    pub fn write(&mut self, round: usize, elapsed: Duration) -> Result<()> {
        writeln!(self.0, "{round},{:.3}", elapsed.as_secs_f64())?;
        self.0.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Round,
    Client,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub experiment_id: String,
    pub scope: Scope,
    pub round: usize,
    pub phase: Phase,
    pub client_id: Option<usize>,
    pub loss: f64,
    pub test_accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub n_selected: usize,
    pub pseudo_accuracy: Option<f64>,
}

fn bad(line: u64, message: impl Into<String>) -> Error {
    Error::Metrics {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| bad(line, format!("column `{}`: cannot parse {raw:?}", HEADER[i])))
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<Option<T>> {
    if rec.get(i).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        field(rec, i, line).map(Some)
    }
}

fn unit(v: Option<f64>, name: &str, line: u64) -> Result<()> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(bad(line, format!("{name} {x} outside [0, 1]"))),
        _ => Ok(()),
    }
}

/// Reads and checks a metrics file; errors carry 1-based line numbers.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut records = rdr.records();
    match records.next() {
        None => return Err(bad(1, "missing header")),
        Some(rec) => {
            let rec = rec.map_err(|e| bad(1, e.to_string()))?;
            if rec.iter().ne(HEADER.iter().copied()) {
                return Err(bad(1, format!("unexpected header, want {}", HEADER.join(","))));
            }
        }
    }
    for rec in records {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != HEADER.len() {
            return Err(bad(line, format!("expected {} columns, found {}", HEADER.len(), rec.len())));
        }
        let scope = match &rec[1] {
            "round" => Scope::Round,
            "client" => Scope::Client,
            other => return Err(bad(line, format!("unknown scope {other:?}"))),
        };
        let phase = Phase::parse(&rec[3]).ok_or_else(|| bad(line, format!("unknown phase {:?}", &rec[3])))?;
        let row = MetricsRow {
            experiment_id: rec[0].to_string(),
            scope,
            round: field(&rec, 2, line)?,
            phase,
            client_id: opt_field(&rec, 4, line)?,
            loss: field(&rec, 5, line)?,
            test_accuracy: opt_field(&rec, 6, line)?,
            threshold: opt_field(&rec, 7, line)?,
            n_selected: field(&rec, 8, line)?,
            pseudo_accuracy: opt_field(&rec, 9, line)?,
        };
        unit(row.test_accuracy, "test_accuracy", line)?;
        unit(row.pseudo_accuracy, "pseudo_accuracy", line)?;
        if scope == Scope::Round && row.test_accuracy.is_none() {
            return Err(bad(line, "round row without test_accuracy"));
        }
        if rows.last().is_some_and(|prev| prev.round > row.round) {
            return Err(bad(line, "round index decreased"));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTrajectory {
    pub phase: Phase,
    pub first: f64,
    pub min: f64,
    pub max: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub experiment_id: Option<String>,
    pub rounds: usize,
    /// `(round, accuracy)` of the last round.
    pub final_accuracy: Option<(usize, f64)>,
    /// Earliest round reaching the highest accuracy.
    pub best_accuracy: Option<(usize, f64)>,
    pub losses: Vec<LossTrajectory>,
    pub pseudo_labels_used: usize,
}

impl MetricsReport {
    pub fn from_rows(rows: &[MetricsRow]) -> Self {
        let rounds: Vec<&MetricsRow> = rows.iter().filter(|r| r.scope == Scope::Round).collect();
        let acc = |r: &MetricsRow| r.test_accuracy.unwrap_or(0.0);
        let best = rounds
            .iter()
            .fold(None::<&MetricsRow>, |best, r| match best {
                Some(b) if acc(b) >= acc(r) => Some(b),
                _ => Some(r),
            })
            .map(|r| (r.round, acc(r)));
        let mut losses: Vec<LossTrajectory> = Vec::new();
        for r in &rounds {
            match losses.last_mut() {
                Some(t) if t.phase == r.phase => {
                    t.min = t.min.min(r.loss);
                    t.max = t.max.max(r.loss);
                    t.last = r.loss;
                }
                _ => losses.push(LossTrajectory {
                    phase: r.phase,
                    first: r.loss,
                    min: r.loss,
                    max: r.loss,
                    last: r.loss,
                }),
            }
        }
        MetricsReport {
            experiment_id: rows.first().map(|r| r.experiment_id.clone()),
            rounds: rounds.len(),
            final_accuracy: rounds.last().map(|r| (r.round, acc(r))),
            best_accuracy: best,
            losses,
            pseudo_labels_used: rounds.iter().map(|r| r.n_selected).sum(),
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "experiment: {}", self.experiment_id.as_deref().unwrap_or("-"))?;
        writeln!(f, "rounds: {}", self.rounds)?;
        if let Some((round, acc)) = self.final_accuracy {
            writeln!(f, "final accuracy: {acc:.4} (round {round})")?;
        }
        if let Some((round, acc)) = self.best_accuracy {
            writeln!(f, "best accuracy: {acc:.4} (round {round})")?;
        }
        for t in &self.losses {
            writeln!(
                f,
                "{} loss: first {:.4}, min {:.4}, max {:.4}, last {:.4}",
                t.phase.as_str(),
                t.first,
                t.min,
                t.max,
                t.last
            )?;
        }
        writeln!(f, "pseudo labels used: {}", self.pseudo_labels_used)
    }
}

/// Reads a metrics file and renders its summary.
pub fn emit_summary(path: &Path) -> Result<String> {
    Ok(MetricsReport::from_rows(&read_metrics(path)?).to_string())
}
