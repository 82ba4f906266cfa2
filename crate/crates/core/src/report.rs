//! Metrics artifacts: one CSV row per epoch plus a JSON document with full
//! per-layer detail.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::MetricsRecord;

/// CSV header for a record stream. Attack and layer columns come from the
/// first record.
pub fn csv_columns(first: &MetricsRecord) -> Vec<String> {
    let mut cols: Vec<String> = ["epoch", "lr", "clean_acc"].map(String::from).to_vec();
    cols.extend(first.robust_acc.iter().map(|a| format!("{}_acc", a.attack)));
    cols.extend(["loss_E", "loss_CC", "loss_total", "sparsity", "kappa_max"].map(String::from));
    cols.extend((0..first.layers.len()).map(|i| format!("kappa_layer_{i}")));
    cols
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, e.to_string())
}

/// Floats use the shortest representation that parses back to the same
/// value; an infinite condition number is written `inf`.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<String> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("no metrics records to write"))?;
    let cols = csv_columns(first);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&cols).map_err(csv_error)?;
    for r in records {
        let mut row = vec![
            r.epoch.to_string(),
            r.lr.to_string(),
            r.clean_acc.to_string(),
        ];
        row.extend(r.robust_acc.iter().map(|a| a.accuracy.to_string()));
        row.extend([
            r.loss_e.to_string(),
            r.loss_cc.to_string(),
            r.loss_total.to_string(),
            r.sparsity.to_string(),
            r.kappa_max.to_string(),
        ]);
        row.extend(r.layers.iter().map(|l| l.kappa.to_string()));
        if row.len() != cols.len() {
            return Err(Error::dim(format!(
                "epoch {} has {} columns, header has {}",
                r.epoch,
                row.len(),
                cols.len()
            )));
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses CSV written by [`metrics_csv`] into its header and numeric rows.
pub fn parse_metrics_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_error)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(offset, format!("not a number: '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn metrics_json(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::invalid("no metrics records to write"));
    }
    serde_json::to_string_pretty(records).map_err(|e| Error::invalid(e.to_string()))
}

/// Writes `<base>.csv` and `<base>.json`; returns both paths.
pub fn write_metrics(
    records: &[MetricsRecord],
    base: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let base = base.as_ref();
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");
    fs::write(&csv_path, metrics_csv(records)?).map_err(|e| Error::io(&csv_path, e))?;
    fs::write(&json_path, metrics_json(records)?).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Kappa;
    use crate::metrics::LayerCondition;
    use crate::trainer::AttackAccuracy;

    fn record(epoch: usize, kappa: Kappa) -> MetricsRecord {
        MetricsRecord {
            epoch,
            lr: 0.1,
            clean_acc: 0.875,
            robust_acc: vec![AttackAccuracy {
                attack: "pgd".into(),
                accuracy: 1.0 / 3.0,
            }],
            loss_e: 0.123456789012345,
            loss_cc: -3.5,
            loss_total: 0.123456789012345 - 0.0035,
            sparsity: 0.9,
            kappa_max: kappa,
            layers: vec![LayerCondition {
                layer: 0,
                kappa,
                sigma_max: 2.0,
                sigma_min: 0.0,
                rank: 1,
            }],
        }
    }

    #[test]
    fn single_record_csv() {
        let text = metrics_csv(&[record(0, Kappa::Infinite)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "epoch,lr,clean_acc,pgd_acc,loss_E,loss_CC,loss_total,sparsity,kappa_max,kappa_layer_0"
        );
        assert!(lines[1].ends_with(",inf,inf"));
        assert!(metrics_csv(&[]).is_err());
    }

    #[test]
    fn infinite_kappa_json_is_null_with_flag() {
        let json = metrics_json(&[record(0, Kappa::Infinite)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[0]["kappa_max"]["value"], serde_json::Value::Null);
        assert_eq!(v[0]["kappa_max"]["infinite"], true);
        let back: Vec<MetricsRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[0], record(0, Kappa::Infinite));
    }
}
