//! CSV output for metric reports and loss curves.

use std::path::Path;

use bcsnet_core::metrics::{MetricReport, MetricRow};
use bcsnet_core::train::LossCurve;

use crate::error::{Error, Result};

pub const METRIC_HEADER: [&str; 7] = ["id", "dsc", "prec", "recall", "sm", "ephi", "mae"];
pub const MEAN_ID: &str = "mean";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn row_fields(r: &MetricRow) -> Vec<String> {
    std::iter::once(r.id.clone())
        .chain(r.values().iter().map(|v| v.to_string()))
        .collect()
}

pub fn write_metrics<W: std::io::Write>(report: &MetricReport, out: W, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_HEADER).map_err(csv_err(path))?;
    for r in report.rows.iter().chain([&report.mean]) {
        w.write_record(row_fields(r)).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_metrics(report: &MetricReport, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(report, f, path)
}

/// Parse a metrics CSV back into rows, checking the header and that the
/// last row is the mean.
pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let bad = |msg: String| Error::Config {
        path: path.to_path_buf(),
        message: msg,
    };
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(METRIC_HEADER) {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let mut v = [0.0; 6];
        for (slot, field) in v.iter_mut().zip(rec.iter().skip(1)) {
            *slot = field.parse().map_err(|_| bad(format!("row `{}`: bad number `{field}`", &rec[0])))?;
        }
        rows.push(MetricRow {
            id: rec[0].to_string(),
            dsc: v[0],
            prec: v[1],
            recall: v[2],
            sm: v[3],
            ephi: v[4],
            mae: v[5],
        });
    }
    match rows.pop() {
        Some(mean) if mean.id == MEAN_ID => Ok(MetricReport { rows, mean }),
        _ => Err(bad(format!("last row is not `{MEAN_ID}`"))),
    }
}

pub const CURVE_HEADER: [&str; 12] = [
    "epoch", "total", "wbce_s2", "wbce_s3", "wbce_s4", "wbce_ss", "wiou_s2", "wiou_s3", "wiou_s4", "wiou_ss", "boundary",
    "component_sum",
];

pub fn save_curve(curve: &LossCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(CURVE_HEADER).map_err(csv_err(path))?;
    for e in &curve.epochs {
        let l = &e.loss;
        let mut rec = vec![e.epoch.to_string(), l.total.to_string()];
        rec.extend(l.wbce.iter().chain(&l.wiou).map(|v| v.to_string()));
        rec.push(l.boundary.to_string());
        rec.push(l.component_sum().to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, x: f64) -> MetricRow {
        MetricRow {
            id: id.into(),
            dsc: x,
            prec: x / 3.0,
            recall: 1.0,
            sm: 0.5,
            ephi: 0.25,
            mae: 1e-17,
        }
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rep = MetricReport {
            rows: vec![row("a", 0.1), row("b,with comma", 0.7)],
            mean: row(MEAN_ID, 0.4),
        };
        save_metrics(&rep, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,dsc,prec,recall,sm,ephi,mae\n"));
        assert!(text.lines().last().unwrap().starts_with("mean,"));
        assert_eq!(read_metrics(&p).unwrap(), rep);
    }
}
