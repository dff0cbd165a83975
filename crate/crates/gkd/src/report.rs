//! Evaluation reports: CSV plus a fixed-width text table.
//!
//! Each model gets three rows (test_A, test_B, GAP) over the columns
//! SE, ACC, AUC, F1, mIoU and FSD. Undefined values print as `NA`.

use gkd_core::metrics::{MetricsReport, METRIC_NAMES};

use crate::hash::ConfigHash;

pub const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelReport {
    pub model: String,
    pub test_a: MetricsReport,
    pub test_b: MetricsReport,
}

impl ModelReport {
    pub fn rows(&self) -> [(&'static str, [Option<f64>; 6]); 3] {
        [
            ("test_A", self.test_a.values()),
            ("test_B", self.test_b.values()),
            ("GAP", MetricsReport::gap_row(&self.test_a, &self.test_b)),
        ]
    }
}

fn cell(v: Option<f64>, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:.prec$}"),
        None => NA.to_string(),
    }
}

pub fn to_csv(reports: &[ModelReport], hash: &ConfigHash) -> String {
    let mut buf = format!("# config_hash {hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["model", "dataset"];
        header.extend(METRIC_NAMES);
        w.write_record(&header).expect("in-memory write");
        for r in reports {
            for (dataset, vals) in r.rows() {
                let mut rec = vec![r.model.clone(), dataset.to_string()];
                rec.extend(vals.iter().map(|&v| cell(v, 6)));
                w.write_record(&rec).expect("in-memory write");
            }
        }
        w.flush().expect("in-memory flush");
    }
    String::from_utf8(buf).expect("ascii output")
}

pub fn to_text(reports: &[ModelReport], hash: &ConfigHash) -> String {
    let mut out = format!("config_hash {hash}\n\n");
    let mut line = format!("{:<18} {:<8}", "Model", "Dataset");
    for m in METRIC_NAMES {
        line += &format!(" {m:>9}");
    }
    out += line.trim_end();
    out.push('\n');
    let rule = "-".repeat(line.len());
    out += &rule;
    out.push('\n');
    for r in reports {
        for (i, (dataset, vals)) in r.rows().into_iter().enumerate() {
            let name = if i == 0 { r.model.as_str() } else { "" };
            let mut line = format!("{name:<18} {dataset:<8}");
            for v in vals {
                line += &format!(" {:>9}", cell(v, 4));
            }
            out += &line;
            out.push('\n');
        }
        out += &rule;
        out.push('\n');
    }
    out
}
