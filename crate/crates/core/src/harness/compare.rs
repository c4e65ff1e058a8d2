//! Cross-protocol comparison: ranking by average total power and pairwise
//! percentage deltas.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::energy::PowerSample;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("need at least two protocols to compare, got {0}")]
    TooFew(usize),
    #[error("protocol {0:?} appears twice")]
    Duplicate(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// `(a - b) / b` in percent, rounded to one decimal, per state and total.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDelta {
    pub a: String,
    pub b: String,
    pub cpu_pct: f64,
    pub lpm_pct: f64,
    pub tx_pct: f64,
    pub rx_pct: f64,
    pub total_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Averages in ranking order.
    pub averages: Vec<(String, PowerSample)>,
    pub ranking: Vec<String>,
    pub deltas: Vec<PairDelta>,
}

pub fn pct_delta(a: f64, b: f64) -> f64 {
    ((a - b) / b * 1000.0).round() / 10.0
}

pub fn compare(inputs: &[(String, PowerSample)]) -> Result<ComparisonReport, CompareError> {
    if inputs.len() < 2 {
        return Err(CompareError::TooFew(inputs.len()));
    }
    let mut averages = inputs.to_vec();
    averages.sort_by(|(na, a), (nb, b)| a.total_mw.total_cmp(&b.total_mw).then_with(|| na.cmp(nb)));
    let mut names: Vec<&String> = averages.iter().map(|(n, _)| n).collect();
    names.sort();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(CompareError::Duplicate(w[0].clone()));
    }
    let mut deltas = Vec::new();
    for (na, a) in &averages {
        for (nb, b) in &averages {
            if na == nb {
                continue;
            }
            deltas.push(PairDelta {
                a: na.clone(),
                b: nb.clone(),
                cpu_pct: pct_delta(a.cpu_mw, b.cpu_mw),
                lpm_pct: pct_delta(a.lpm_mw, b.lpm_mw),
                tx_pct: pct_delta(a.tx_mw, b.tx_mw),
                rx_pct: pct_delta(a.rx_mw, b.rx_mw),
                total_pct: pct_delta(a.total_mw, b.total_mw),
            });
        }
    }
    let ranking = averages.iter().map(|(n, _)| n.clone()).collect();
    Ok(ComparisonReport {
        averages,
        ranking,
        deltas,
    })
}

impl ComparisonReport {
    pub fn delta(&self, a: &str, b: &str) -> Option<&PairDelta> {
        self.deltas.iter().find(|d| d.a == a && d.b == b)
    }

    /// Report CSV: `avg` rows in ranking order, then `delta_pct` rows.
    pub fn write_report<W: Write>(&self, out: W) -> Result<(), CompareError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "row", "protocol", "baseline", "cpu", "lpm", "tx", "rx", "total",
        ])?;
        for (rank, (name, s)) in self.averages.iter().enumerate() {
            let vals =
                [s.cpu_mw, s.lpm_mw, s.tx_mw, s.rx_mw, s.total_mw].map(|v| format!("{v:.9}"));
            let mut rec = vec!["avg".to_owned(), name.clone(), format!("rank{}", rank + 1)];
            rec.extend(vals);
            w.write_record(rec)?;
        }
        for d in &self.deltas {
            let vals =
                [d.cpu_pct, d.lpm_pct, d.tx_pct, d.rx_pct, d.total_pct].map(|v| format!("{v:.1}"));
            let mut rec = vec!["delta_pct".to_owned(), d.a.clone(), d.b.clone()];
            rec.extend(vals);
            w.write_record(rec)?;
        }
        w.flush().map_err(|source| CompareError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    /// Whitespace-separated grouped-bar data, one line per protocol.
    pub fn write_plot_data<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# protocol cpu_mw lpm_mw tx_mw rx_mw total_mw")?;
        for (name, s) in &self.averages {
            writeln!(
                out,
                "{name} {} {} {} {} {}",
                s.cpu_mw, s.lpm_mw, s.tx_mw, s.rx_mw, s.total_mw
            )?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CompareError> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|source| CompareError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn write_report_csv(report: &ComparisonReport, path: &Path) -> Result<(), CompareError> {
    report.write_report(create(path)?)
}

pub fn emit_plot_data(report: &ComparisonReport, path: &Path) -> Result<(), CompareError> {
    let mut f = create(path)?;
    report
        .write_plot_data(&mut f)
        .and_then(|_| f.flush())
        .map_err(|source| CompareError::Io {
            path: path.display().to_string(),
            source,
        })
}
