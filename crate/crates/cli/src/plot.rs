//! Minimal SVG chart of a result table's summary rows: one marker per row,
//! a 95% interval bar, and a legend entry per series.

use std::fmt::Write;

use lindistill::experiments::{ExperimentKind, ResultRow, ResultTable};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

struct Point<'a> {
    row: &'a ResultRow,
    x: f64,
    y: f64,
    ci: f64,
}

/// Horizontal coordinate: the parameter, or for monotonicity runs the
/// monotonicity index, so the chart shows risk against that index.
fn abscissa(kind: ExperimentKind, row: &ResultRow) -> f64 {
    match kind {
        ExperimentKind::Monotonicity => row.aux.first().copied().flatten().unwrap_or(f64::NAN),
        _ => row.param,
    }
}

fn x_label(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Geometry => "kappa",
        ExperimentKind::Bias => "delta",
        ExperimentKind::Monotonicity => "monotonicity index",
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render(table: &ResultTable) -> String {
    let kind = table.experiment;
    let points: Vec<Point> = table
        .summaries()
        .map(|row| Point {
            row,
            x: abscissa(kind, row),
            y: row.risk.unwrap_or(f64::NAN),
            ci: row.ci_half_width.unwrap_or(0.0),
        })
        .collect();
    let (x0, x1) = range(points.iter().map(|p| p.x));
    let (y0, y1) = range(
        points
            .iter()
            .flat_map(|p| [p.y - p.ci, p.y + p.ci])
            .chain([0.0]),
    );
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<title>{} experiment</title>", kind.as_str());
    let _ = writeln!(
        s,
        r##"<rect class="frame" x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    let _ = writeln!(s, r#"<g class="axes">"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            HEIGHT - BOTTOM + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.3}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        x_label(kind)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">risk</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let _ = writeln!(s, "</g>");

    for (i, p) in points.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = escape(&p.row.series);
        let _ = writeln!(
            s,
            r#"<g class="series" data-series="{label}" data-param="{:?}">"#,
            p.row.param
        );
        if p.x.is_finite() && p.y.is_finite() {
            let (cx, cy) = (sx(p.x), sy(p.y));
            let _ = writeln!(
                s,
                r#"<line class="ci" x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{color}"/>"#,
                sy(p.y - p.ci),
                sy(p.y + p.ci)
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{color}"/>"#
            );
        }
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            s,
            r#"<circle class="legend" cx="{lx:.2}" cy="{:.2}" r="4" fill="{color}"/>"#,
            ly - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}">{label}</text>"#,
            lx + 10.0
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use lindistill::experiments::RowKind;

    fn summary(series: &str, param: f64, risk: f64) -> ResultRow {
        ResultRow {
            kind: RowKind::Summary,
            series: series.into(),
            param,
            trial: None,
            risk: Some(risk),
            ci_half_width: Some(0.01),
            count: 3,
            failures: 0,
            status: "ok".into(),
            aux: vec![None; 3],
            aux_ci: vec![None; 3],
        }
    }

    #[test]
    fn one_group_per_summary_and_escaped_labels() {
        let table = ResultTable {
            experiment: ExperimentKind::Geometry,
            rows: vec![summary("a<b", 1.0, 0.2), summary("c", 2.0, 0.1)],
        };
        let svg = render(&table);
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("NaN"));
    }
}
