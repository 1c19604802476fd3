//! CSV tables and key=value reports.
//!
//! Numbers are written with 17 significant digits so files reproduce bit
//! for bit and read back exactly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{io_err, CliError, Result};

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Numeric CSV with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let parse_err = |line: u64, message: String| CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => CliError::Io {
                    path: path.to_path_buf(),
                    source,
                },
                other => parse_err(1, format!("{other:?}")),
            })?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers.is_empty() || headers[0] != "time" {
            return Err(parse_err(1, "first column must be \"time\"".into()));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| parse_err(line, format!("not a number: {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Parse {
                path: self.path.clone(),
                line: 1,
                message: format!("missing column {name:?}"),
            })?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }
}

pub fn write_table<I>(path: &Path, headers: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut line = headers.join(",");
    line.push('\n');
    for row in rows {
        let fields: Vec<String> = row.into_iter().map(fmt_num).collect();
        line.push_str(&fields.join(","));
        line.push('\n');
        if line.len() > 1 << 16 {
            out.write_all(line.as_bytes()).map_err(io_err(path))?;
            line.clear();
        }
    }
    out.write_all(line.as_bytes()).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_report(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Parse {
                    path: path.to_path_buf(),
                    line: n as u64 + 1,
                    message: "expected key=value".into(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![vec![0.1, 1.0 / 3.0], vec![1e-300, -2.5e10]];
        write_table(&path, &["time".into(), "value".into()], rows.clone()).unwrap();
        let t = Table::read(&path).unwrap();
        assert_eq!(t.rows, rows);
        assert_eq!(t.column("value").unwrap(), vec![1.0 / 3.0, -2.5e10]);
        assert!(t.column("nope").is_err());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "time,value\n0,1\n0.1,abc\n").unwrap();
        match Table::read(&path) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "time,value\n0,1\n0.1\n").unwrap();
        match Table::read(&path) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Table::read(&dir.path().join("missing.csv")),
            Err(CliError::Io { .. })
        ));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.txt");
        let entries = vec![("a.rmse".to_string(), "0.5".to_string())];
        write_report(&path, &entries).unwrap();
        assert_eq!(read_report(&path).unwrap(), entries);
    }
}
