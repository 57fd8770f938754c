//! Report artifacts: an SVG training-history chart and the normalized
//! confusion matrix as CSV in the publication layout (predicted rows,
//! reference columns, Sum/UA margin column and Sum/PA margin rows).

use standseg_core::metrics::MetricsReport;
use standseg_core::trainer::{best_epoch, EpochRecord};
use standseg_core::{Error, Result};
use std::fmt::Write as _;

const PANEL_W: f64 = 760.0;
const PANEL_H: f64 = 150.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_T: f64 = 30.0;
const GAP: f64 = 40.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn panel(
    svg: &mut String,
    top: f64,
    epochs: &[usize],
    series: &[Series],
    title: &str,
    marker_epoch: usize,
) {
    let lo = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let x_of = |e: usize| {
        let span = (epochs.len() - 1).max(1) as f64;
        MARGIN_L + PANEL_W * (e - epochs[0]) as f64 / span
    };
    let y_of = |v: f64| top + PANEL_H - PANEL_H * (v - lo) / (hi - lo);

    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{top}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#ccc"/>"##
    );
    let _ = writeln!(
        svg,
        r##"<text x="{MARGIN_L}" y="{:.2}" font-size="13" fill="#333">{title}</text>"##,
        top - 8.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#666" text-anchor="end">{hi:.3}</text>"##,
        MARGIN_L - 5.0,
        top + 10.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#666" text-anchor="end">{lo:.3}</text>"##,
        MARGIN_L - 5.0,
        top + PANEL_H
    );
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = epochs
            .iter()
            .zip(&s.values)
            .map(|(&e, &v)| format!("{:.2},{:.2}", x_of(e), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"##,
            s.color,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-size="11" fill="{}">{}</text>"##,
            MARGIN_L + PANEL_W - 150.0 + 75.0 * i as f64,
            top - 8.0,
            s.color,
            s.label
        );
    }
    // dotted vertical marker at the best epoch
    let _ = writeln!(
        svg,
        r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{:.2}" stroke="#555" stroke-width="1" stroke-dasharray="4 3"/>"##,
        top + PANEL_H,
        x = x_of(marker_epoch),
    );
}

/// Render the training history as a three-panel SVG line chart with the
/// best epoch (by val mMCC) marked with a dotted vertical line.
pub fn history_svg(history: &[EpochRecord]) -> Result<String> {
    if history.is_empty() {
        return Err(Error::Input("history is empty, nothing to plot".into()));
    }
    let epochs: Vec<usize> = history.iter().map(|r| r.epoch).collect();
    let (marker, _) = best_epoch(history).expect("nonempty history");
    let height = MARGIN_T + 3.0 * (PANEL_H + GAP) + 20.0;
    let width = MARGIN_L + PANEL_W + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let panels: [(&str, Vec<Series>); 3] = [
        (
            "loss",
            vec![
                Series {
                    label: "train",
                    color: "#1f77b4",
                    values: history.iter().map(|r| r.train_loss).collect(),
                },
                Series {
                    label: "val",
                    color: "#ff7f0e",
                    values: history.iter().map(|r| r.val_loss).collect(),
                },
            ],
        ),
        (
            "validation mMCC",
            vec![Series {
                label: "val",
                color: "#2ca02c",
                values: history.iter().map(|r| r.val_mmcc).collect(),
            }],
        ),
        (
            "validation OA",
            vec![Series {
                label: "val",
                color: "#9467bd",
                values: history.iter().map(|r| r.val_oa).collect(),
            }],
        ),
    ];
    for (i, (title, series)) in panels.iter().enumerate() {
        let top = MARGIN_T + i as f64 * (PANEL_H + GAP);
        panel(&mut svg, top, &epochs, series, title, marker);
    }
    let _ = writeln!(
        svg,
        r##"<text x="{MARGIN_L}" y="{:.2}" font-size="11" fill="#666">epoch 1..{} — dotted line: best epoch {marker}</text>"##,
        height - 6.0,
        epochs.last().unwrap()
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// The normalized confusion matrix as CSV: one row per predicted class with
/// a Sum and UA column, then a Sum row (column totals) and a PA row. Values
/// are written with full round-trip precision so the margins reproduce the
/// row/column sums exactly.
pub fn matrix_csv(report: &MetricsReport) -> String {
    let labels: Vec<&str> = report.per_class.iter().map(|c| c.class.as_str()).collect();
    let n = labels.len();
    let m = &report.matrix_normalized;
    let mut csv = String::new();
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let _ = writeln!(csv, "predicted,{},Sum,UA", labels.join(","));
    for (i, class) in report.per_class.iter().enumerate() {
        let cells: Vec<String> = m[i].iter().map(|v| v.to_string()).collect();
        let row_sum: f64 = m[i].iter().sum();
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            class.class,
            cells.join(","),
            row_sum,
            fmt(class.ua)
        );
    }
    let col_sums: Vec<f64> = (0..n).map(|j| (0..n).map(|i| m[i][j]).sum()).collect();
    let total: f64 = col_sums.iter().sum();
    let _ = writeln!(
        csv,
        "Sum,{},{},",
        col_sums.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        total
    );
    let _ = writeln!(
        csv,
        "PA,{},,",
        report
            .per_class
            .iter()
            .map(|c| fmt(c.pa))
            .collect::<Vec<_>>()
            .join(",")
    );
    csv
}
