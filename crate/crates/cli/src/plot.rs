//! Evaluation reports and their SVG / CSV renderings.

use std::fmt::Write as _;

use pgnd::metrics::{MetricReport, MetricSummary};
use pgnd::{Error, Result};
use serde::{Deserialize, Serialize};

/// What `eval` writes: the metric report plus how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ReportFile", into = "ReportFile")]
pub struct EvalReport {
    pub method: String,
    pub views: Option<usize>,
    pub metrics: MetricReport,
}

// flat on disk; serde's flatten would hide field paths in parse errors
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFile {
    method: String,
    views: Option<usize>,
    mde: MetricSummary,
    chamfer: MetricSummary,
    emd: MetricSummary,
}

impl From<ReportFile> for EvalReport {
    fn from(f: ReportFile) -> Self {
        EvalReport { method: f.method, views: f.views, metrics: MetricReport { mde: f.mde, chamfer: f.chamfer, emd: f.emd } }
    }
}

impl From<EvalReport> for ReportFile {
    fn from(r: EvalReport) -> Self {
        ReportFile { method: r.method, views: r.views, mde: r.metrics.mde, chamfer: r.metrics.chamfer, emd: r.metrics.emd }
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Parse one report or an array of reports (one per method).
pub fn parse_reports(text: &str) -> Result<Vec<EvalReport>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Validation(format!("report is not JSON: {e}")))?;
    let parse = |v: serde_json::Value| -> Result<Vec<EvalReport>> {
        if v.is_array() {
            serde_path_to_error::deserialize(v)
        } else {
            serde_path_to_error::deserialize(v).map(|r| vec![r])
        }
        .map_err(|e| Error::Validation(format!("report field `{}`: {}", e.path(), e.inner())))
    };
    parse(value)
}

const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];
const METRICS: [&str; 3] = ["MDE", "CD", "EMD"];

fn summaries(r: &EvalReport) -> [(f64, f64); 3] {
    let m = &r.metrics;
    [(m.mde.mean, m.mde.std), (m.chamfer.mean, m.chamfer.std), (m.emd.mean, m.emd.std)]
}

fn has_data(reports: &[EvalReport]) -> bool {
    reports.iter().any(|r| !r.metrics.mde.per_clip.is_empty())
}

/// Bar chart with one panel per metric and one bar (mean ± std) per method.
pub fn render_svg(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    if !has_data(reports) {
        s.push_str("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"320\" height=\"120\" viewBox=\"0 0 320 120\">\n");
        s.push_str("<rect width=\"320\" height=\"120\" fill=\"white\"/>\n");
        s.push_str("<text x=\"160\" y=\"64\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">no data</text>\n</svg>\n");
        return s;
    }
    let reports: Vec<&EvalReport> = reports.iter().filter(|r| !r.metrics.mde.per_clip.is_empty()).collect();
    let bar_w = 36.0;
    let gap = 12.0;
    let panel_w = reports.len() as f64 * (bar_w + gap) + gap;
    let (left, top, plot_h, bottom) = (60.0, 30.0, 220.0, 60.0);
    let width = left + 3.0 * (panel_w + 20.0) + 20.0;
    let height = top + plot_h + bottom;
    let ymax = reports
        .iter()
        .flat_map(|r| summaries(r).map(|(m, sd)| m + sd))
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);

    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">");
    let _ = writeln!(s, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>");
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, "<line x1=\"{left:.1}\" x2=\"{:.1}\" y1=\"{yy:.2}\" y2=\"{yy:.2}\" stroke=\"#dddddd\"/>", width - 20.0, yy = y(v));
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.2}\" text-anchor=\"end\">{:.4}</text>", left - 6.0, y(v) + 4.0, v);
    }
    let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">error (m)</text>", top + plot_h / 2.0, top + plot_h / 2.0);
    for (mi, name) in METRICS.iter().enumerate() {
        let x0 = left + mi as f64 * (panel_w + 20.0) + 10.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"13\">{name}</text>", x0 + panel_w / 2.0, top - 10.0);
        for (ri, r) in reports.iter().enumerate() {
            let (mean, sd) = summaries(r)[mi];
            let bx = x0 + gap + ri as f64 * (bar_w + gap);
            let cx = bx + bar_w / 2.0;
            let color = PALETTE[ri % PALETTE.len()];
            let _ = writeln!(s, "<g class=\"bar\" data-method=\"{}\" data-metric=\"{name}\">", escape(&r.method));
            let _ = writeln!(s, "<rect x=\"{bx:.1}\" y=\"{:.2}\" width=\"{bar_w:.1}\" height=\"{:.2}\" fill=\"{color}\"/>", y(mean), y(0.0) - y(mean));
            let _ = writeln!(s, "<line x1=\"{cx:.1}\" x2=\"{cx:.1}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", y((mean - sd).max(0.0)), y(mean + sd));
            for v in [(mean - sd).max(0.0), mean + sd] {
                let _ = writeln!(s, "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{yy:.2}\" y2=\"{yy:.2}\" stroke=\"black\"/>", cx - 6.0, cx + 6.0, yy = y(v));
            }
            s.push_str("</g>\n");
        }
    }
    let _ = writeln!(s, "<line x1=\"{left:.1}\" x2=\"{:.1}\" y1=\"{yy:.2}\" y2=\"{yy:.2}\" stroke=\"black\"/>", width - 20.0, yy = y(0.0));
    for (ri, r) in reports.iter().enumerate() {
        let lx = left + ri as f64 * 140.0;
        let ly = top + plot_h + 30.0;
        let _ = writeln!(s, "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>", ly - 10.0, PALETTE[ri % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>", lx + 18.0, escape(&label(r)));
    }
    s.push_str("</svg>\n");
    s
}

fn label(r: &EvalReport) -> String {
    match r.views {
        Some(v) => format!("{} ({v} views)", r.method),
        None => r.method.clone(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `method,views,metric,mean,std,clips`, one row per bar.
pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method,views,metric,mean,std,clips\n");
    for r in reports {
        let views = r.views.map_or(String::new(), |v| v.to_string());
        for (name, (mean, sd)) in METRICS.iter().zip(summaries(r)) {
            let _ = writeln!(s, "{},{views},{name},{mean},{sd},{}", r.method, r.metrics.mde.per_clip.len());
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(method: &str, values: Vec<f64>) -> EvalReport {
        EvalReport { method: method.into(), views: Some(4), metrics: MetricReport::from_clips(values.clone(), values.clone(), values) }
    }

    #[test]
    fn grouped_bars() {
        let svg = render_svg(&[report("grid", vec![0.01, 0.02]), report("particle", vec![0.03, 0.01])]);
        assert_eq!(svg.matches("<g class=\"bar\"").count(), 6);
        assert!(svg.contains("particle (4 views)"));
        assert_eq!(svg, render_svg(&[report("grid", vec![0.01, 0.02]), report("particle", vec![0.03, 0.01])]));
    }

    #[test]
    fn empty_report_is_placeholder() {
        let svg = render_svg(&[report("grid", vec![])]);
        assert!(svg.contains(">no data<"));
        assert!(!svg.contains("class=\"bar\""));
    }

    #[test]
    fn parse_single_and_many() {
        let one = report("grid", vec![0.5]);
        assert_eq!(parse_reports(&one.to_json()).unwrap(), vec![one.clone()]);
        let both = serde_json::to_string(&vec![one.clone(), report("particle", vec![0.2])]).unwrap();
        assert_eq!(parse_reports(&both).unwrap().len(), 2);
        let err = parse_reports(r#"{"method": "grid", "views": null, "mde": {"mean": "x"}}"#).unwrap_err();
        assert!(err.to_string().contains("mde.mean"), "{err}");
        assert_eq!(render_csv(&[one]).lines().count(), 4);
    }
}
