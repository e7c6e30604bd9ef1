use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::diagnostics::MetricsRow;
use crate::error::{Error, Result};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Appends metrics rows to a CSV file, flushing after each row.
pub struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(MetricsRow::HEADER)
            .map_err(|e| csv_error(path, e))?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(CsvLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut log = CsvLog::create(path)?;
    rows.iter().try_for_each(|r| log.push(r))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(MetricsRow::HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

fn write_json_value<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json_value<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: e.to_string(),
    })
}

pub fn write_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_json_value(path, rows)
}

pub fn read_json(path: &Path) -> Result<Vec<MetricsRow>> {
    read_json_value(path)
}

/// Final numbers of a run plus the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub epochs: usize,
    pub final_top1: f64,
    pub final_top5: f64,
    pub final_mem_memorized: Option<f64>,
    pub config: ExperimentConfig,
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    write_json_value(path, summary)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    read_json_value(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, mem: bool) -> MetricsRow {
        let x = 1.0 / (epoch as f64 + 3.0);
        MetricsRow {
            epoch,
            lr: 0.02 * x,
            train_ce: 2.302585092994046 * x,
            train_elr: -0.1 * x,
            train_total: 2.0 * x,
            test_ce: 1.1 * x,
            test_total: 1.1 * x,
            top1: 0.123456789012345,
            top5: 1.0,
            mem_correct: mem.then_some(x),
            mem_memorized: mem.then_some(1e-17),
            mem_other: mem.then_some(1.0 - x - 1e-17),
            seconds: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<_> = (0..5).map(|e| row(e, e % 2 == 0)).collect();
        write_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "epoch,lr,train_ce,train_elr,train_total,test_ce,test_total,top1,top5,mem_correct,mem_memorized,mem_other,seconds\n"
        ));
        assert_eq!(read_csv(&path).unwrap(), rows);
    }

    #[test]
    fn json_csv_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..4).map(|e| row(e, e > 0)).collect();
        write_json(&dir.path().join("a.json"), &rows).unwrap();
        let a = read_json(&dir.path().join("a.json")).unwrap();
        write_csv(&dir.path().join("b.csv"), &a).unwrap();
        let b = read_csv(&dir.path().join("b.csv")).unwrap();
        write_json(&dir.path().join("c.json"), &b).unwrap();
        let c = read_json(&dir.path().join("c.json")).unwrap();
        assert_eq!(c, rows);
    }

    #[test]
    fn wrong_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "epoch,lr\n0,0.1\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let r = write_csv(Path::new("/nonexistent/dir/m.csv"), &[]);
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
