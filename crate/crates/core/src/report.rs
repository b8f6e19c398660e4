//! Summary statistics, boxplots and CSV output for per-patient metrics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const METRICS_CSV_HEADER: [&str; 6] = ["patient_id", "fold", "dsc", "hd95_mm", "hd_mm", "warnings"];

pub const SUMMARY_CSV_HEADER: [&str; 15] = [
    "label",
    "metric",
    "n",
    "n_excluded",
    "mean",
    "std_pop",
    "min",
    "max",
    "whisker_low",
    "q1",
    "median",
    "q3",
    "whisker_high",
    "n_outliers",
    "outliers",
];

/// One patient's test-time result. Distances are `None` when a surface was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub patient_id: String,
    pub fold: usize,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub hd_mm: Option<f64>,
    /// Semicolon-separated warning tags.
    pub warnings: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Dsc,
    Hd95,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dsc => "dsc",
            Metric::Hd95 => "hd95_mm",
        }
    }

    pub fn axis_label(self) -> &'static str {
        match self {
            Metric::Dsc => "DSC",
            Metric::Hd95 => "HD95 (mm)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    /// Points outside the 1.5·IQR fences, ascending.
    pub outliers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation (divides by `n`).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub boxplot: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub rows: Vec<MetricRow>,
    pub dsc: Summary,
    /// `None` when every patient's HD95 was undefined.
    pub hd95: Option<Summary>,
    /// Rows left out of the HD95 statistics because the distance was undefined.
    pub hd95_excluded: usize,
}

impl MetricReport {
    pub fn summary(&self, metric: Metric) -> Option<&Summary> {
        match metric {
            Metric::Dsc => Some(&self.dsc),
            Metric::Hd95 => self.hd95.as_ref(),
        }
    }
}

/// Quantile of ascending `sorted` by linear interpolation between order
/// statistics at position `q·(n-1)`.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&s, 0.25);
    let median = quantile_linear(&s, 0.5);
    let q3 = quantile_linear(&s, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside = |v: &&f64| **v >= lo_fence && **v <= hi_fence;
    // Quartiles lie between data points, so at least one point is inside.
    let whisker_low = *s.iter().find(inside).expect("quartile range holds data");
    let whisker_high = *s.iter().rev().find(inside).expect("quartile range holds data");
    let outliers = s.iter().copied().filter(|v| !inside(&v)).collect();
    Some(BoxStats {
        whisker_low,
        q1,
        median,
        q3,
        whisker_high,
        outliers,
    })
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    let boxplot = box_stats(values)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Summary {
        n: values.len(),
        mean,
        std: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        boxplot,
    })
}

pub fn aggregate(label: &str, rows: &[MetricRow]) -> Result<MetricReport> {
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let dsc = summarize(&dscs).ok_or(ReportError::Empty)?;
    let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd95_mm).collect();
    let hd95_excluded = rows.len() - hds.len();
    if hd95_excluded > 0 {
        log::warn!("{label}: {hd95_excluded} patient(s) with undefined HD95 excluded from aggregates");
    }
    Ok(MetricReport {
        label: label.to_string(),
        rows: rows.to_vec(),
        dsc,
        hd95: summarize(&hds),
        hd95_excluded,
    })
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(METRICS_CSV_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.patient_id.clone(),
            r.fold.to_string(),
            fmt6(r.dsc),
            fmt_opt(r.hd95_mm),
            fmt_opt(r.hd_mm),
            r.warnings.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-patient rows of a report.
pub fn write_csv(report: &MetricReport, path: &Path) -> Result<()> {
    write_metrics_csv(&report.rows, path)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let malformed = |reason: String| ReportError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(METRICS_CSV_HEADER) {
        return Err(malformed(format!(
            "unexpected header {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let num = |field: &str, what: &str| -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|e| malformed(format!("bad {what} {field:?}: {e}")))
    };
    let opt = |field: &str, what: &str| -> Result<Option<f64>> {
        if field.is_empty() {
            Ok(None)
        } else {
            num(field, what).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        rows.push(MetricRow {
            patient_id: rec[0].to_string(),
            fold: rec[1]
                .parse()
                .map_err(|e| malformed(format!("bad fold {:?}: {e}", &rec[1])))?,
            dsc: num(&rec[2], "dsc")?,
            hd95_mm: opt(&rec[3], "hd95_mm")?,
            hd_mm: opt(&rec[4], "hd_mm")?,
            warnings: rec[5].to_string(),
        });
    }
    Ok(rows)
}

/// One line per (report, metric) with the aggregate and boxplot statistics.
pub fn write_summary_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(SUMMARY_CSV_HEADER).map_err(csv_err(path))?;
    for rep in reports {
        for metric in [Metric::Dsc, Metric::Hd95] {
            let excluded = match metric {
                Metric::Dsc => 0,
                Metric::Hd95 => rep.hd95_excluded,
            };
            let mut rec = vec![rep.label.clone(), metric.name().to_string()];
            match rep.summary(metric) {
                Some(s) => {
                    let b = &s.boxplot;
                    rec.push(s.n.to_string());
                    rec.push(excluded.to_string());
                    rec.extend(
                        [
                            s.mean,
                            s.std,
                            s.min,
                            s.max,
                            b.whisker_low,
                            b.q1,
                            b.median,
                            b.q3,
                            b.whisker_high,
                        ]
                        .map(fmt6),
                    );
                    rec.push(b.outliers.len().to_string());
                    rec.push(b.outliers.iter().map(|&v| fmt6(v)).collect::<Vec<_>>().join(" "));
                }
                None => {
                    rec.push("0".into());
                    rec.push(excluded.to_string());
                    rec.extend(std::iter::repeat_n(String::new(), SUMMARY_CSV_HEADER.len() - 4));
                }
            }
            w.write_record(&rec).map_err(csv_err(path))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Linear map from data values to SVG y pixels (larger values plot higher).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YAxis {
    pub lo: f64,
    pub hi: f64,
    pub top_px: f64,
    pub bottom_px: f64,
}

impl YAxis {
    pub fn to_px(&self, v: f64) -> f64 {
        self.bottom_px - (v - self.lo) / (self.hi - self.lo) * (self.bottom_px - self.top_px)
    }

    fn ticks(&self) -> Vec<f64> {
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 2.5, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|i| i as f64 * step).collect()
    }
}

const SVG_WIDTH: f64 = 360.0;
const SVG_HEIGHT: f64 = 320.0;
const PLOT_LEFT: f64 = 70.0;
const PLOT_RIGHT: f64 = 340.0;
const PLOT_TOP: f64 = 30.0;
const PLOT_BOTTOM: f64 = 270.0;

/// Axis used by [`render_boxplot_svg`] for these reports.
pub fn y_axis(reports: &[MetricReport], metric: Metric) -> Result<YAxis> {
    let summaries: Vec<&Summary> = reports.iter().filter_map(|r| r.summary(metric)).collect();
    if summaries.is_empty() {
        return Err(ReportError::Empty);
    }
    let lo = summaries.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
    let hi = summaries.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
    // DSC lives on [0, 1]; distances start at zero with a little headroom.
    let (lo, hi) = match metric {
        Metric::Dsc => (lo.min(0.0), hi.max(1.0)),
        Metric::Hd95 => (lo.min(0.0), hi + 0.05 * hi.abs().max(1.0)),
    };
    Ok(YAxis {
        lo,
        hi: if hi > lo { hi } else { lo + 1.0 },
        top_px: PLOT_TOP,
        bottom_px: PLOT_BOTTOM,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Side-by-side boxplots of one metric, one box per report.
pub fn render_boxplot_svg(reports: &[MetricReport], metric: Metric) -> Result<String> {
    let axis = y_axis(reports, metric)?;
    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        w,
        r#"<rect x="0" y="0" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        w,
        r#"<line class="axis" x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}" stroke="black"/>"#
    );
    let _ = writeln!(
        w,
        r#"<line class="axis" x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}" stroke="black"/>"#
    );
    for t in axis.ticks() {
        let y = axis.to_px(t);
        let _ = writeln!(
            w,
            r#"<line class="tick" x1="{:.3}" y1="{y:.3}" x2="{PLOT_LEFT}" y2="{y:.3}" stroke="black"/>"#,
            PLOT_LEFT - 5.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="end">{}</text>"#,
            PLOT_LEFT - 8.0,
            y + 4.0,
            format_tick(t)
        );
    }
    let mid_y = (PLOT_TOP + PLOT_BOTTOM) / 2.0;
    let _ = writeln!(
        w,
        r#"<text x="18" y="{mid_y:.3}" text-anchor="middle" transform="rotate(-90 18 {mid_y:.3})">{}</text>"#,
        escape(metric.axis_label())
    );

    let slot = (PLOT_RIGHT - PLOT_LEFT) / reports.len() as f64;
    let box_w = (slot * 0.4).min(60.0);
    for (i, rep) in reports.iter().enumerate() {
        let cx = PLOT_LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            w,
            r#"<text x="{cx:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            PLOT_BOTTOM + 20.0,
            escape(&rep.label)
        );
        let Some(s) = rep.summary(metric) else { continue };
        let b = &s.boxplot;
        let (x0, x1) = (cx - box_w / 2.0, cx + box_w / 2.0);
        let (y_q1, y_q3) = (axis.to_px(b.q1), axis.to_px(b.q3));
        let _ = writeln!(
            w,
            r#"<line class="whisker" x1="{cx:.3}" y1="{:.3}" x2="{cx:.3}" y2="{y_q1:.3}" stroke="black"/>"#,
            axis.to_px(b.whisker_low)
        );
        let _ = writeln!(
            w,
            r#"<line class="whisker" x1="{cx:.3}" y1="{y_q3:.3}" x2="{cx:.3}" y2="{:.3}" stroke="black"/>"#,
            axis.to_px(b.whisker_high)
        );
        for v in [b.whisker_low, b.whisker_high] {
            let y = axis.to_px(v);
            let _ = writeln!(
                w,
                r#"<line class="cap" x1="{:.3}" y1="{y:.3}" x2="{:.3}" y2="{y:.3}" stroke="black"/>"#,
                cx - box_w / 4.0,
                cx + box_w / 4.0
            );
        }
        let _ = writeln!(
            w,
            r#"<rect class="box" x="{x0:.3}" y="{y_q3:.3}" width="{box_w:.3}" height="{:.3}" fill="lightsteelblue" stroke="black"/>"#,
            y_q1 - y_q3
        );
        let ym = axis.to_px(b.median);
        let _ = writeln!(
            w,
            r#"<line class="median" x1="{x0:.3}" y1="{ym:.3}" x2="{x1:.3}" y2="{ym:.3}" stroke="black" stroke-width="2"/>"#
        );
        for &o in &b.outliers {
            let _ = writeln!(
                w,
                r#"<circle class="outlier" cx="{cx:.3}" cy="{:.3}" r="3" fill="none" stroke="black"/>"#,
                axis.to_px(o)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}
