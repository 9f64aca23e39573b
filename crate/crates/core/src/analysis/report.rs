//! Per-epoch metrics as CSV. Two rows per epoch (`train`, `test`);
//! reconciliation columns are filled on train rows only. Floats carry 17
//! significant digits so a parse reproduces them exactly.

use std::path::Path;

use super::AnalysisError;
use crate::train::TrainReport;

pub fn report_header(modules: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "split", "loss", "acc", "sgr_loss_mean"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((2..=modules).map(|k| format!("sgr_{k}")));
    h
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(report: &TrainReport, path: &Path) -> Result<(), AnalysisError> {
    let k = report.network.len();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(report_header(k))?;
    for e in &report.epochs {
        let mut train = vec![e.epoch.to_string(), "train".into(), num(e.train_loss), num(e.train_acc)];
        train.push(e.sgr_mean().map(num).unwrap_or_default());
        let per: Vec<String> = e.sgr_per_layer.iter().copied().map(num).collect();
        train.extend((0..k.saturating_sub(1)).map(|i| per.get(i).cloned().unwrap_or_default()));
        w.write_record(&train)?;

        let mut test = vec![e.epoch.to_string(), "test".into(), num(e.test_loss), num(e.test_acc)];
        test.extend(std::iter::repeat_n(String::new(), k));
        w.write_record(&test)?;
    }
    w.flush().map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A parsed CSV file with a header row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn index(&self, column: &str) -> Result<usize, AnalysisError> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| AnalysisError::MissingColumn(column.into()))
    }

    /// Numeric column; empty cells are `None`.
    pub fn column(&self, column: &str) -> Result<Vec<Option<f64>>, AnalysisError> {
        let i = self.index(column)?;
        self.rows
            .iter()
            .map(|r| {
                let cell = r.get(i).map(String::as_str).unwrap_or("");
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse().map(Some).map_err(|_| AnalysisError::BadValue {
                    column: column.into(),
                    value: cell.into(),
                })
            })
            .collect()
    }

    /// Rows whose `column` equals `value`.
    pub fn filter(&self, column: &str, value: &str) -> Result<Table, AnalysisError> {
        let i = self.index(column)?;
        Ok(Table {
            header: self.header.clone(),
            rows: self.rows.iter().filter(|r| r.get(i).is_some_and(|c| c == value)).cloned().collect(),
        })
    }
}

pub fn read_table(path: &Path) -> Result<Table, AnalysisError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok(Table { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localnet::{HeadSpec, Network};
    use crate::train::{EpochRecord, TrainConfig};

    fn report(epochs: usize) -> TrainReport {
        let net = Network::build(&[4, 5, 5, 5], 1, 3, HeadSpec::Etf, 0).unwrap();
        TrainReport {
            config: TrainConfig::default(),
            epochs: (0..epochs)
                .map(|e| EpochRecord {
                    epoch: e,
                    lr: 0.1,
                    train_loss: 1.0 / 3.0 + e as f64,
                    train_acc: 0.1 + 0.2,
                    test_loss: std::f64::consts::PI,
                    test_acc: 2.0f64.sqrt() / 10.0,
                    sgr_per_layer: vec![1e-17 / 3.0, 0.7],
                    seconds: 123.0,
                })
                .collect(),
            network: net,
            delta_probe: None,
            stage_trace: Vec::new(),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&report(0), &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "epoch,split,loss,acc,sgr_loss_mean,sgr_2,sgr_3\n"
        );
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rep = report(3);
        write_csv(&rep, &p).unwrap();
        let t = read_table(&p).unwrap();
        assert_eq!(t.rows.len(), 6);
        let train = t.filter("split", "train").unwrap();
        let test = t.filter("split", "test").unwrap();
        assert_eq!((train.rows.len(), test.rows.len()), (3, 3));
        let loss = train.column("loss").unwrap();
        for (e, l) in rep.epochs.iter().zip(loss) {
            assert_eq!(l, Some(e.train_loss));
        }
        assert_eq!(train.column("acc").unwrap()[0], Some(0.1 + 0.2));
        assert_eq!(train.column("sgr_2").unwrap()[2], Some(1e-17 / 3.0));
        assert_eq!(test.column("acc").unwrap()[1], Some(2.0f64.sqrt() / 10.0));
        assert!(test.column("sgr_loss_mean").unwrap().iter().all(Option::is_none));
        assert!(!std::fs::read_to_string(&p).unwrap().contains("\r"));
        assert!(matches!(t.column("seconds"), Err(AnalysisError::MissingColumn(_))));
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_csv(&report(1), &dir.path().join("missing/r.csv")).is_err());
    }
}
