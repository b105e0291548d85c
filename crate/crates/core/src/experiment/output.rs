//! Run artifacts: CSV tables and parameter checkpoints.
//!
//! # CSV files
//!
//! Comma separated, one header line, no quoting needed (all fields are
//! numbers or identifiers). Reals use the shortest representation that
//! parses back to the same value. Empty fields mean "not measured".
//!
//! | file          | columns                                                                     |
//! |---------------|-----------------------------------------------------------------------------|
//! | `trace.csv`   | step, epoch, loss, lr, misalignment, sync_event (0/1)                       |
//! | `ledger.csv`  | epoch, client_id, message_kind, bytes                                       |
//! | `eval.csv`    | epoch, knn_acc, probe_acc                                                   |
//! | `attack.csv`  | cut_layer, seed, mse                                                        |
//! | `summary.csv` | cut_layer, scheme, seed, final_knn, probe_acc, total_bytes, peak_misalignment |
//! | `plan.csv`    | scheme, cut_layer, activation_bytes, sync_bytes, total_bytes                |
//!
//! # Checkpoint files
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! magic      8 bytes  "SMOCOCKP"
//! version    u32      1
//! count      u32      number of tensors
//! count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u32)
//! data       for each tensor in table order, product(dims) f32 LE values
//! ```
//!
//! Nothing follows the data; trailing bytes are an error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::protocol::{LedgerRow, SyncScheme, TraceRow};
use crate::tensor::Tensor;

pub const TRACE_HEADER: [&str; 6] = ["step", "epoch", "loss", "lr", "misalignment", "sync_event"];
pub const LEDGER_HEADER: [&str; 4] = ["epoch", "client_id", "message_kind", "bytes"];
pub const EVAL_HEADER: [&str; 3] = ["epoch", "knn_acc", "probe_acc"];
pub const ATTACK_HEADER: [&str; 3] = ["cut_layer", "seed", "mse"];
pub const SUMMARY_HEADER: [&str; 7] = [
    "cut_layer",
    "scheme",
    "seed",
    "final_knn",
    "probe_acc",
    "total_bytes",
    "peak_misalignment",
];
pub const PLAN_HEADER: [&str; 5] = ["scheme", "cut_layer", "activation_bytes", "sync_bytes", "total_bytes"];

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMOCOCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// A CSV file written row by row and flushed after every batch of rows.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(header)?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn trace_fields(r: &TraceRow) -> [String; 6] {
    [
        r.step.to_string(),
        r.epoch.to_string(),
        r.loss.to_string(),
        r.lr.to_string(),
        r.misalignment.to_string(),
        (r.sync_event as u8).to_string(),
    ]
}

pub fn ledger_fields(r: &LedgerRow) -> [String; 4] {
    [
        r.epoch.to_string(),
        r.client_id.to_string(),
        r.kind.as_str().to_string(),
        r.bytes.to_string(),
    ]
}

pub fn eval_fields(epoch: usize, knn: Option<f64>, probe: Option<f64>) -> [String; 3] {
    [epoch.to_string(), opt(knn), opt(probe)]
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cut_layer: usize,
    pub scheme: SyncScheme,
    pub seed: u64,
    pub final_knn: Option<f64>,
    pub probe_acc: Option<f64>,
    pub total_bytes: u64,
    pub peak_misalignment: f64,
}

impl SummaryRow {
    pub fn fields(&self) -> [String; 7] {
        [
            self.cut_layer.to_string(),
            self.scheme.as_str().to_string(),
            self.seed.to_string(),
            opt(self.final_knn),
            opt(self.probe_acc),
            self.total_bytes.to_string(),
            self.peak_misalignment.to_string(),
        ]
    }
}

pub fn write_summary(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let mut sink = CsvSink::create(path, &SUMMARY_HEADER)?;
    for r in rows {
        sink.row(r.fields())?;
    }
    sink.flush()
}

/// Reads a CSV file, requiring the exact header and equal-length rows.
pub fn read_csv_strict(path: impl AsRef<Path>, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let found = reader.headers()?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Config(format!(
            "{}: header {:?} differs from expected {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            header
        )));
    }
    reader.records().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = c.u32("tensor count")? as usize;
    let mut table = Vec::new();
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut entries = Vec::with_capacity(count);
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?, "data")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if c.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(ParamSet::from_entries(entries))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    decode_checkpoint(&std::fs::read(path)?)
}
