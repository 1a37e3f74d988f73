//! CSV output for training, evaluation and lab runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedrobust::fedopt::IterMetrics;

use crate::error::{CliError, CliResult};

pub const METRICS_HEADER: [&str; 8] = [
    "iter",
    "round",
    "train_loss",
    "penalty",
    "robust_loss",
    "grad_w_norm",
    "grad_psi_norm",
    "clean_test_acc",
];
pub const LAB_HEADER: [&str; 8] = ["t", "a", "b", "P", "e", "g", "grad_phi_sq", "bound_rhs"];
pub const EVAL_HEADER: [&str; 2] = ["budget", "accuracy"];

/// Shortest round-tripping decimal, so equal floats give equal bytes.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn metrics_record(row: &IterMetrics) -> [String; 8] {
    [
        row.iter.to_string(),
        row.round.to_string(),
        fmt_f64(row.train_loss),
        fmt_f64(row.penalty),
        fmt_f64(row.robust_loss),
        fmt_f64(row.grad_w_norm),
        fmt_f64(row.grad_psi_norm),
        row.clean_test_acc.map(fmt_f64).unwrap_or_default(),
    ]
}

/// Append-only CSV file with a fixed header.
pub struct CsvSink<W: Write> {
    inner: csv::Writer<W>,
    path: PathBuf,
}

impl CsvSink<BufWriter<File>> {
    pub fn create(path: &Path, header: &[&str]) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut sink = Self {
            inner: csv::Writer::from_writer(BufWriter::new(file)),
            path: path.to_path_buf(),
        };
        sink.write(header)?;
        sink.flush()?;
        Ok(sink)
    }
}

impl<W: Write> CsvSink<W> {
    pub fn from_writer(w: W, header: &[&str]) -> CliResult<Self> {
        let mut sink = Self {
            inner: csv::Writer::from_writer(w),
            path: PathBuf::from("<memory>"),
        };
        sink.write(header)?;
        Ok(sink)
    }

    fn csv_err(&self, e: csv::Error) -> CliError {
        let io = match e.into_kind() {
            csv::ErrorKind::Io(io) => io,
            other => std::io::Error::other(format!("{other:?}")),
        };
        CliError::io(&self.path, io)
    }

    pub fn write<S: AsRef<[u8]>>(&mut self, record: &[S]) -> CliResult<()> {
        self.inner.write_record(record).map_err(|e| self.csv_err(e))
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| CliError::io(&self.path, e))
    }

    /// Writes a metrics row, flushing at synchronization rows so an
    /// interrupted run leaves whole rounds on disk.
    pub fn write_metrics(&mut self, row: &IterMetrics) -> CliResult<()> {
        self.write(&metrics_record(row))?;
        if row.synced {
            self.flush()?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> CliResult<W> {
        let path = self.path.clone();
        self.inner
            .into_inner()
            .map_err(|e| CliError::io(path, e.into_error()))
    }
}

/// Metrics rows rendered exactly as the training CSV would hold them.
pub fn metrics_csv(rows: &[IterMetrics]) -> CliResult<String> {
    let mut sink = CsvSink::from_writer(Vec::new(), &METRICS_HEADER)?;
    for r in rows {
        sink.write_metrics(r)?;
    }
    Ok(String::from_utf8(sink.into_inner()?).expect("csv output is utf-8"))
}
