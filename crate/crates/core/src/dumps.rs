//! Comma-separated text formats: attention dumps, AP report files, and the
//! ΔAP plot data consumed by external plotting tools.

use crate::detector::train::GraphDump;
use crate::error::{Error, Result};
use crate::eval::{ApReport, ClassAp, DeltaReport};

/// Attention dump: one `weight` row per ordered pair (value in v0) and one
/// `edge` row per ordered pair (attribute vector in v0..), per graph.
pub fn attention_dump_csv(dumps: &[GraphDump]) -> String {
    let max_e = dumps
        .iter()
        .map(|d| *d.edges.shape().last().unwrap())
        .max()
        .unwrap_or(1);
    let mut out = String::from("graph,record,i,j");
    for k in 0..max_e.max(1) {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for dump in dumps {
        let n = dump.weights.shape()[0];
        let e = *dump.edges.shape().last().unwrap();
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!(
                    "{},weight,{i},{j},{}",
                    dump.name,
                    dump.weights.data()[i * n + j]
                ));
                out.push_str(&",".repeat(max_e - 1));
                out.push('\n');
            }
        }
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!("{},edge,{i},{j}", dump.name));
                let row = &dump.edges.data()[(i * n + j) * e..(i * n + j + 1) * e];
                for v in row {
                    out.push_str(&format!(",{v}"));
                }
                out.push_str(&",".repeat(max_e - e));
                out.push('\n');
            }
        }
    }
    out
}

/// AP report file: one row per class and a final `all` row with the means.
pub fn ap_report_csv(report: &ApReport) -> String {
    let mut out = String::from("class_id,gt_count,ap50,ap\n");
    for c in &report.per_class {
        out.push_str(&format!(
            "{},{},{},{}\n",
            c.class_id, c.gt_count, c.ap50, c.ap
        ));
    }
    let total: usize = report.per_class.iter().map(|c| c.gt_count).sum();
    out.push_str(&format!(
        "all,{},{},{}\n",
        total, report.mean_ap50, report.mean_ap
    ));
    out
}

pub fn parse_ap_report(text: &str) -> Result<ApReport> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty report".to_string()))?;
    if header != "class_id,gt_count,ap50,ap" {
        return Err(Error::Config(format!("unexpected report header: {header}")));
    }
    let mut per_class = Vec::new();
    let mut means = None;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!("malformed report row: {line}")));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number: {s}")))
        };
        if fields[0] == "all" {
            means = Some((parse(fields[2])?, parse(fields[3])?));
            continue;
        }
        per_class.push(ClassAp {
            class_id: fields[0]
                .parse()
                .map_err(|_| Error::Config(format!("bad class id: {}", fields[0])))?,
            gt_count: fields[1]
                .parse()
                .map_err(|_| Error::Config(format!("bad count: {}", fields[1])))?,
            ap50: parse(fields[2])?,
            ap: parse(fields[3])?,
        });
    }
    let (mean_ap50, mean_ap) =
        means.ok_or_else(|| Error::Config("report missing the all row".to_string()))?;
    Ok(ApReport {
        per_class,
        mean_ap50,
        mean_ap,
    })
}

/// Plot data: per-class ΔAP points followed by the four fitted lines. For
/// `fit_*` rows the last two columns carry slope and intercept.
pub fn plot_data_csv(delta: &DeltaReport) -> String {
    let mut out =
        String::from("kind,class_id,gt_count,delta_ap50_or_slope,delta_ap_or_intercept\n");
    for &(class_id, gt_count, d50, dap) in &delta.per_class {
        out.push_str(&format!("point,{class_id},{gt_count},{d50},{dap}\n"));
    }
    let mut fit = |name: &str, f: &crate::eval::FrequencyRegression| {
        out.push_str(&format!("{name},,,{},{}\n", f.slope, f.intercept));
    };
    fit("fit_ap50_vs_count", &delta.fit_ap50_count);
    fit("fit_ap50_vs_logcount", &delta.fit_ap50_logcount);
    fit("fit_ap_vs_count", &delta.fit_ap_count);
    fit("fit_ap_vs_logcount", &delta.fit_ap_logcount);
    out
}
