use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::compare::ComparisonRow;
use super::metrics::{MetricSet, Unit};
use super::EvalError;
use crate::shareflow::escape_html;

/// Network-position comparison on the first rotated dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnaSummary {
    pub groups: [String; 2],
    pub units: [usize; 2],
    pub mr1_means: [f64; 2],
    /// Share of total score variance on MR1 and MR2.
    pub variance: Vec<f64>,
    pub estimate: Option<super::Estimate>,
    pub unfit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub instrument: String,
    pub measure: String,
    pub condition: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReportInputs<'a> {
    pub title: &'a str,
    pub rows: &'a [ComparisonRow],
    pub metrics: Option<&'a MetricSet>,
    pub ena: Option<&'a EnaSummary>,
    pub surveys: &'a [SurveyRow],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    /// Comparison table, one line per row.
    pub csv: String,
    pub html: String,
}

fn value(v: f64, unit: Unit) -> String {
    match unit {
        Unit::Seconds => format!("{v:.2} s"),
        Unit::SecondsPerQuality => format!("{v:.2} s/q"),
        _ => format!("{v:.3}"),
    }
}

fn analysis(r: &ComparisonRow) -> String {
    match (&r.estimate, &r.unfit) {
        (Some(e), _) => format!("β = {:.3}, p = {:.3}, {} = {:.2}", e.beta, e.p, e.stat_name, e.stat),
        (None, Some(reason)) => format!("unfit({reason})"),
        (None, None) => "unfit(no estimate)".into(),
    }
}

fn ci(r: &ComparisonRow) -> String {
    r.estimate
        .as_ref()
        .map_or_else(|| "--".into(), |e| format!("{:.3} -- {:.3}", e.ci_low, e.ci_high))
}

fn csv_table(rows: &[ComparisonRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "metric",
        "unit",
        "treatment",
        "treatment_n",
        "treatment_mean",
        "treatment_sd",
        "baseline",
        "baseline_n",
        "baseline_mean",
        "baseline_sd",
        "model",
        "beta",
        "se",
        "stat_name",
        "stat",
        "p",
        "ci_low",
        "ci_high",
        "improvement_percent",
        "improvement",
    ])
    .expect("in-memory csv write");
    for r in rows {
        let f = |x: f64| format!("{x:.6}");
        let est: [String; 7] = match (&r.estimate, &r.unfit) {
            (Some(e), _) => [
                f(e.beta),
                f(e.se),
                e.stat_name.clone(),
                f(e.stat),
                f(e.p),
                f(e.ci_low),
                f(e.ci_high),
            ],
            _ => {
                let mut cells: [String; 7] = Default::default();
                cells[0] = analysis(r);
                cells
            }
        };
        let mut rec = vec![
            r.metric.as_str().to_string(),
            r.metric.unit().as_str().to_string(),
            r.treatment.condition.clone(),
            r.treatment.n.to_string(),
            f(r.treatment.mean),
            f(r.treatment.sd),
            r.baseline.condition.clone(),
            r.baseline.n.to_string(),
            f(r.baseline.mean),
            f(r.baseline.sd),
            r.formula.clone(),
        ];
        rec.extend(est);
        rec.push(r.improvement.percent.map_or_else(String::new, |p| format!("{p:.2}")));
        rec.push(r.improvement.descriptor.clone());
        w.write_record(&rec).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

const STYLE: &str = "body{font-family:system-ui,sans-serif;margin:2rem;color:#222}\
table{border-collapse:collapse;margin:1rem 0}\
th,td{border:1px solid #bbb;padding:.35rem .6rem;text-align:left;vertical-align:top}\
th{background:#f0f0f0}td.num{text-align:right}.unfit{color:#a33}";

/// Static summary document plus the comparison table as CSV.
pub fn generate_report(inputs: &ReportInputs<'_>) -> Result<Report, EvalError> {
    if inputs.rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let rows = inputs.rows;
    let (tname, bname) = (&rows[0].treatment.condition, &rows[0].baseline.condition);
    let mut h = String::new();
    let title = if inputs.title.is_empty() { "Evaluation report" } else { inputs.title };
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{t}</title>\n\
         <style>{STYLE}</style>\n</head>\n<body>\n<h1>{t}</h1>\n",
        t = escape_html(title)
    );
    let _ = write!(
        h,
        "<h2>Condition comparison</h2>\n<table>\n<tr><th>Metric</th><th>{}</th><th>{}</th>\
         <th>Statistical Analysis</th><th>CI (difference)</th><th>Improvement</th></tr>\n",
        escape_html(tname),
        escape_html(bname)
    );
    for r in rows {
        let unit = r.metric.unit();
        let cls = if r.estimate.is_none() { " class=\"unfit\"" } else { "" };
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}, SD = {:.2} (n = {})</td><td>{}, SD = {:.2} (n = {})</td>\
             <td{cls}>{}</td><td>{}</td><td>{}</td></tr>",
            escape_html(r.metric.label()),
            value(r.treatment.mean, unit),
            r.treatment.sd,
            r.treatment.n,
            value(r.baseline.mean, unit),
            r.baseline.sd,
            r.baseline.n,
            escape_html(&analysis(r)),
            ci(r),
            escape_html(&r.improvement.descriptor),
        );
    }
    h.push_str("</table>\n");
    let models: Vec<String> = rows.iter().map(|r| format!("{}: {}", r.metric, r.formula)).collect();
    let _ = write!(h, "<h3>Models</h3>\n<ul>\n");
    for m in models {
        let _ = writeln!(h, "<li><code>{}</code></li>", escape_html(&m));
    }
    h.push_str("</ul>\n<p>CIs are β ± 1.96·SE; p values use the normal approximation.</p>\n");

    if let Some(m) = inputs.metrics {
        if !m.failures.is_empty() {
            h.push_str("<h3>Metrics not computed</h3>\n<ul>\n");
            for f in &m.failures {
                let _ = writeln!(h, "<li>{}: {}</li>", f.metric, escape_html(&f.error));
            }
            h.push_str("</ul>\n");
        }
    }
    if let Some(e) = inputs.ena {
        let _ = write!(
            h,
            "<h2>Network model</h2>\n<table>\n<tr><th>Group</th><th>Units</th><th>Mean MR1</th></tr>\n\
             <tr><td>{}</td><td class=\"num\">{}</td><td class=\"num\">{:.4}</td></tr>\n\
             <tr><td>{}</td><td class=\"num\">{}</td><td class=\"num\">{:.4}</td></tr>\n</table>\n",
            escape_html(&e.groups[0]),
            e.units[0],
            e.mr1_means[0],
            escape_html(&e.groups[1]),
            e.units[1],
            e.mr1_means[1]
        );
        let var: Vec<String> = e.variance.iter().map(|v| format!("{:.1}%", 100.0 * v)).collect();
        let _ = writeln!(h, "<p>Variance explained: {}</p>", var.join(", "));
        let pos = match (&e.estimate, &e.unfit) {
            (Some(x), _) => format!(
                "β = {:.3}, p = {:.3}, t = {:.2}, CI {:.3} -- {:.3}",
                x.beta, x.p, x.stat, x.ci_low, x.ci_high
            ),
            (None, Some(r)) => format!("unfit({r})"),
            (None, None) => "unfit(no estimate)".into(),
        };
        let _ = writeln!(h, "<p>MR1 position by condition: {}</p>", escape_html(&pos));
    }
    if !inputs.surveys.is_empty() {
        h.push_str(
            "<h2>Surveys</h2>\n<table>\n<tr><th>Instrument</th><th>Measure</th><th>Condition</th>\
             <th>n</th><th>Mean</th><th>SD</th></tr>\n",
        );
        for s in inputs.surveys {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td class=\"num\">{}</td>\
                 <td class=\"num\">{:.2}</td><td class=\"num\">{:.2}</td></tr>",
                escape_html(&s.instrument),
                escape_html(&s.measure),
                escape_html(&s.condition),
                s.n,
                s.mean,
                s.sd
            );
        }
        h.push_str("</table>\n");
    }
    h.push_str("</body>\n</html>\n");
    Ok(Report {
        csv: csv_table(rows),
        html: h,
    })
}
