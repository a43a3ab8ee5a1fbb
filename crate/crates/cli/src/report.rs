use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};
use tesr_core::datapipe::percentile_sorted;
use tesr_core::metrics::{GapStratum, MetricsReport};

/// Output of one `eval` invocation: one report per series length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBundle {
    pub runs: Vec<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub high: f64,
}

/// Quartiles with whiskers at the furthest points within 1.5 IQR.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    sorted.sort_by(f32::total_cmp);
    let q = |p| percentile_sorted(&sorted, p) as f64;
    let (q1, median, q3) = (q(25.0), q(50.0), q(75.0));
    let iqr = q3 - q1;
    let inside = values.iter().filter(|&&v| v >= q1 - 1.5 * iqr && v <= q3 + 1.5 * iqr);
    Some(BoxStats {
        low: inside.clone().copied().fold(f64::INFINITY, f64::min),
        q1,
        median,
        q3,
        high: inside.copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

fn run_label(r: &MetricsReport) -> String {
    match r.series_length {
        Some(n) => format!("{} (N={n})", r.model),
        None => r.model.clone(),
    }
}

const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

/// Per-sample MAE by gap stratum, one box per run; empty strata get no box
/// and a footnote instead.
pub fn mae_boxplot_svg(runs: &[MetricsReport]) -> String {
    let box_w = 26.0;
    let group_w = (runs.len() as f64 * (box_w + 8.0) + 40.0).max(120.0);
    let (left, top, plot_h) = (60.0, 30.0, 300.0);
    let width = left + group_w * 3.0 + 20.0;
    let legend_h = 18.0 * runs.len() as f64;
    let mut stats = BTreeMap::new();
    let mut empty = Vec::new();
    let mut y_max: f64 = 0.0;
    for (i, run) in runs.iter().enumerate() {
        for stratum in GapStratum::ALL {
            let values: Vec<f64> = run
                .samples
                .iter()
                .filter(|s| s.stratum == stratum)
                .map(|s| s.values.mae)
                .collect();
            match box_stats(&values) {
                Some(b) => {
                    y_max = y_max.max(b.high);
                    stats.insert((i, stratum), b);
                }
                None => empty.push((run_label(run), stratum)),
            }
        }
    }
    let y_max = if y_max > 0.0 { (y_max * 1.1).ceil() } else { 1.0 };
    let height = top + plot_h + 50.0 + legend_h + 18.0 * empty.len() as f64 + 10.0;
    let y = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="16" text-anchor="middle">MAE by time gap to the closest acquisition</text>"#,
        width / 2.0
    );
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            width - 20.0,
            left - 6.0,
            y(v) + 4.0,
            yy = y(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">MAE</text>"#,
        top + plot_h / 2.0
    );
    for (g, stratum) in GapStratum::ALL.iter().enumerate() {
        let gx = left + group_w * g as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} days</text>"#,
            gx + group_w / 2.0,
            top + plot_h + 20.0,
            escape(stratum.label())
        );
        let offset = (group_w - runs.len() as f64 * (box_w + 8.0)) / 2.0;
        for i in 0..runs.len() {
            let Some(b) = stats.get(&(i, *stratum)) else { continue };
            let x0 = gx + offset + i as f64 * (box_w + 8.0) + 4.0;
            let xm = x0 + box_w / 2.0;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                svg,
                r#"<g class="box" data-stratum="{label}" data-run="{i}"><line x1="{xm:.1}" x2="{xm:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/><line x1="{xm:.1}" x2="{xm:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/><rect x="{x0:.1}" y="{:.1}" width="{box_w}" height="{:.1}" fill="{color}" stroke="black"/><line x1="{x0:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/></g>"#,
                y(b.high),
                y(b.q3),
                y(b.q1),
                y(b.low),
                y(b.q3),
                (y(b.q1) - y(b.q3)).max(0.5),
                x0 + box_w,
                y(b.median),
                y(b.median),
                label = escape(stratum.label()),
            );
        }
    }
    let mut ly = top + plot_h + 44.0;
    for (i, run) in runs.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<rect x="{left}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{}" y="{:.1}">{}</text>"#,
            ly - 10.0,
            PALETTE[i % PALETTE.len()],
            left + 18.0,
            ly,
            escape(&run_label(run))
        );
        ly += 18.0;
    }
    for (label, stratum) in &empty {
        let _ = writeln!(
            svg,
            r#"<text class="footnote" x="{left}" y="{ly:.1}" font-style="italic">* {}: no samples with a {} day gap</text>"#,
            escape(label),
            escape(stratum.label())
        );
        ly += 18.0;
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Aggregate and per-stratum means of every run.
pub fn metrics_table(runs: &[MetricsReport]) -> String {
    let mut out = String::new();
    for (i, run) in runs.iter().enumerate() {
        let csv = run.to_csv();
        let body = if i == 0 { &csv[..] } else { csv.split_once('\n').map_or("", |(_, b)| b) };
        out.push_str(body);
    }
    out
}

/// One row per series length for models evaluated at several lengths.
pub fn ablation_table(runs: &[MetricsReport]) -> Option<String> {
    let mut by_model: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in runs {
        by_model.entry(&r.model).or_default().push(r);
    }
    let mut out = String::from("model,series_length,mae,shift_mae,psnr,ssim\n");
    let mut rows = 0;
    for (model, mut reports) in by_model {
        reports.retain(|r| r.series_length.is_some());
        if reports.len() < 2 {
            continue;
        }
        reports.sort_by_key(|r| std::cmp::Reverse(r.series_length));
        for r in reports {
            let Some(m) = r.mean else { continue };
            let _ = writeln!(
                out,
                "{model},{},{:.4},{:.4},{:.4},{:.4}",
                r.series_length.expect("retained"),
                m.mae,
                m.shift_mae,
                m.psnr,
                m.ssim
            );
            rows += 1;
        }
    }
    (rows > 0).then_some(out)
}
