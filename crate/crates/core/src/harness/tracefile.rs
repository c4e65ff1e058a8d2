//! Trace CSV files: `time_s,cpu_mw,lpm_mw,tx_mw,rx_mw,total_mw`, one row per
//! interval and a final `avg` row.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::energy::PowerSample;
use crate::powertrace::{summarize, TraceError};

pub const HEADER: [&str; 6] = ["time_s", "cpu_mw", "lpm_mw", "tx_mw", "rx_mw", "total_mw"];
pub const AVG_LABEL: &str = "avg";

#[derive(Debug, Error)]
pub enum TraceFileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Format { line: u64, msg: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// A parsed trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub rows: Vec<PowerSample>,
    pub avg: PowerSample,
}

fn fmt_mw(v: f64) -> String {
    format!("{v:.9}")
}

pub fn write_trace<W: Write>(out: W, rows: &[PowerSample]) -> Result<(), TraceFileError> {
    let avg = summarize(rows)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    let record = |label: String, s: &PowerSample| {
        let mut r = vec![label];
        r.extend([s.cpu_mw, s.lpm_mw, s.tx_mw, s.rx_mw, s.total_mw].map(fmt_mw));
        r
    };
    for s in rows {
        w.write_record(record(format!("{}", s.interval_end_s), s))?;
    }
    w.write_record(record(AVG_LABEL.into(), &avg))?;
    w.flush().map_err(|source| TraceFileError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[PowerSample]) -> Result<(), TraceFileError> {
    let file = std::fs::File::create(path).map_err(|source| TraceFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_trace(std::io::BufWriter::new(file), rows)
}

pub fn read_trace<R: Read>(input: R) -> Result<TraceFile, TraceFileError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(HEADER) {
        return Err(TraceFileError::Format {
            line: 1,
            msg: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut avg = None;
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if avg.is_some() {
            return Err(TraceFileError::Format {
                line,
                msg: "rows after the avg row".into(),
            });
        }
        let num = |i: usize| -> Result<f64, TraceFileError> {
            rec[i].parse::<f64>().map_err(|_| TraceFileError::Format {
                line,
                msg: format!("bad {} value {:?}", HEADER[i], &rec[i]),
            })
        };
        let sample = PowerSample {
            interval_end_s: if &rec[0] == AVG_LABEL {
                f64::NAN
            } else {
                num(0)?
            },
            cpu_mw: num(1)?,
            lpm_mw: num(2)?,
            tx_mw: num(3)?,
            rx_mw: num(4)?,
            total_mw: num(5)?,
        };
        if &rec[0] == AVG_LABEL {
            avg = Some(sample);
        } else {
            rows.push(sample);
        }
    }
    let Some(mut avg) = avg else {
        return Err(TraceFileError::Format {
            line: 0,
            msg: "missing avg row".into(),
        });
    };
    avg.interval_end_s = rows.last().map_or(0.0, |r| r.interval_end_s);
    Ok(TraceFile { rows, avg })
}

pub fn read_csv(path: &Path) -> Result<TraceFile, TraceFileError> {
    let file = std::fs::File::open(path).map_err(|source| TraceFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_trace(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<PowerSample> {
        (1..=10)
            .map(|i| {
                PowerSample::from_components(
                    i as f64 * 10.0,
                    0.1 * i as f64,
                    0.0003,
                    0.02,
                    0.7 / i as f64,
                )
            })
            .collect()
    }

    #[test]
    fn layout_and_roundtrip() {
        let mut buf = Vec::new();
        write_trace(&mut buf, &rows()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines[0], "time_s,cpu_mw,lpm_mw,tx_mw,rx_mw,total_mw");
        assert!(lines[11].starts_with("avg,"));
        assert!(lines[1].starts_with("10,0.100000000,"));
        let back = read_trace(&buf[..]).unwrap();
        for (a, b) in back.rows.iter().zip(rows()) {
            assert_eq!(a.interval_end_s, b.interval_end_s);
            for (x, y) in a.components().iter().zip(b.components()) {
                assert!((x - y).abs() <= 5e-10);
            }
        }
        let mut again = Vec::new();
        write_trace(&mut again, &rows()).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(read_trace(&b"a,b\n1,2\n"[..]).is_err());
        assert!(
            read_trace(&b"time_s,cpu_mw,lpm_mw,tx_mw,rx_mw,total_mw\n10,1,1,1,1,4\n"[..]).is_err()
        );
        assert!(read_trace(
            &b"time_s,cpu_mw,lpm_mw,tx_mw,rx_mw,total_mw\n10,x,1,1,1,4\navg,1,1,1,1,4\n"[..]
        )
        .is_err());
        assert!(write_trace(Vec::new(), &[]).is_err());
    }
}
