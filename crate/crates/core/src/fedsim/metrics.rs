//! Per-round metrics and their CSV form.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::dual::{DualState, UsageVector};
use crate::error::{Error, Result};
use crate::policy::{Compression, Knobs};

pub const CSV_COLUMNS: [&str; 22] = [
    "round",
    "val_loss",
    "val_acc",
    "k",
    "s",
    "b",
    "q",
    "grad_accum",
    "lambda_E",
    "lambda_C",
    "lambda_M",
    "lambda_T",
    "u_E",
    "u_C",
    "u_M",
    "u_T",
    "r_E",
    "r_C",
    "r_M",
    "r_T",
    "wire_bytes",
    "clients",
];

/// One round of a run. `duals` are the values after this round's update,
/// so round `t`'s knobs derive from round `t - 1`'s duals.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub knobs: Knobs,
    pub duals: DualState,
    /// Mean over participating clients.
    pub usage: UsageVector,
    pub ratios: [f64; 4],
    /// Total encoded update bytes received this round.
    pub wire_bytes: usize,
    /// Clients whose updates were aggregated, ascending.
    pub clients: Vec<usize>,
}

impl RoundMetrics {
    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![
            self.round.to_string(),
            self.val_loss.to_string(),
            self.val_acc.to_string(),
            self.knobs.k.to_string(),
            self.knobs.s.to_string(),
            self.knobs.b.to_string(),
            self.knobs.q.level().to_string(),
            self.knobs.grad_accum.to_string(),
        ];
        r.extend(self.duals.as_array().iter().map(f64::to_string));
        r.extend(self.usage.as_array().iter().map(f64::to_string));
        r.extend(self.ratios.iter().map(f64::to_string));
        r.push(self.wire_bytes.to_string());
        r.push(
            self.clients
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        );
        r
    }

    fn from_record(rec: &csv::StringRecord) -> std::result::Result<Self, String> {
        fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> std::result::Result<T, String> {
            rec[i]
                .parse()
                .map_err(|_| format!("column {} has unparsable value {:?}", CSV_COLUMNS[i], &rec[i]))
        }
        if rec.len() != CSV_COLUMNS.len() {
            return Err(format!("expected {} columns, found {}", CSV_COLUMNS.len(), rec.len()));
        }
        let arr = |start: usize| -> std::result::Result<[f64; 4], String> {
            Ok([
                num(rec, start)?,
                num(rec, start + 1)?,
                num(rec, start + 2)?,
                num(rec, start + 3)?,
            ])
        };
        let q: u8 = num(rec, 6)?;
        let clients = if rec[21].is_empty() {
            Vec::new()
        } else {
            rec[21]
                .split(';')
                .map(|c| c.parse().map_err(|_| format!("bad client id {c:?}")))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(RoundMetrics {
            round: num(rec, 0)?,
            val_loss: num(rec, 1)?,
            val_acc: num(rec, 2)?,
            knobs: Knobs {
                k: num(rec, 3)?,
                s: num(rec, 4)?,
                b: num(rec, 5)?,
                q: Compression::from_level(q).map_err(|e| e.to_string())?,
                grad_accum: num(rec, 7)?,
            },
            duals: DualState::from_array(arr(8)?),
            usage: UsageVector::from_array(arr(12)?),
            ratios: arr(16)?,
            wire_bytes: num(rec, 20)?,
            clients,
        })
    }
}

/// Writes the header on creation and flushes after every row, so an
/// interrupted run leaves a valid prefix.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = MetricsWriter {
            inner: csv::Writer::from_writer(file),
            path,
        };
        w.write(CSV_COLUMNS)?;
        Ok(w)
    }

    fn write<I, T>(&mut self, rec: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        let err = |e: String| Error::Metrics {
            path: self.path.clone(),
            message: e,
        };
        self.inner.write_record(rec).map_err(|e| err(e.to_string()))?;
        self.inner.flush().map_err(|e| err(e.to_string()))
    }

    pub fn write_round(&mut self, m: &RoundMetrics) -> Result<()> {
        self.write(m.to_record())
    }
}

/// Renders a full trace as CSV bytes, header included.
pub fn to_csv_bytes(rows: &[RoundMetrics]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record(r.to_record()).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    let path = path.as_ref();
    let err = |message: String| Error::Metrics {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?;
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(err(format!(
            "header {:?} does not match the metrics schema",
            header.iter().collect::<Vec<_>>()
        )));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            RoundMetrics::from_record(&rec).map_err(|m| err(format!("row {}: {m}", i + 1)))
        })
        .collect()
}
