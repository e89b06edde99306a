//! Long-format CSV tables: one `(key, side, metric, value)` row per number.

use std::path::Path;

use kgc_core::eval::{CardinalityCell, EvalReport, Metrics};

use crate::CliError;

pub type Row = (String, String, String, f64);

fn metric_rows(key: &str, side: &str, m: &Metrics, out: &mut Vec<Row>) {
    let mut push =
        |metric: String, value: f64| out.push((key.to_owned(), side.to_owned(), metric, value));
    push("count".into(), m.count as f64);
    push("mr".into(), m.mr);
    push("mrr".into(), m.mrr);
    for (n, v) in &m.hits {
        push(format!("hits@{n}"), *v);
    }
}

pub fn relation_rows(report: &EvalReport) -> Vec<Row> {
    let mut rows = Vec::new();
    for (relation, m) in &report.per_relation {
        metric_rows(relation, "all", m, &mut rows);
    }
    rows
}

pub fn cardinality_rows(cells: &[CardinalityCell]) -> Vec<Row> {
    let mut rows = Vec::new();
    for cell in cells {
        metric_rows(
            cell.category.as_str(),
            cell.side.as_str(),
            &cell.metrics,
            &mut rows,
        );
    }
    rows
}

pub fn write(path: &Path, key: &str, rows: &[Row]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    w.write_record([key, "side", "metric", "value"])
        .map_err(csv_err)?;
    for (k, side, metric, value) in rows {
        w.write_record([
            k.as_str(),
            side.as_str(),
            metric.as_str(),
            &value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
