//! Report rendering: a markdown summary of the metric reports plus simple
//! SVG line plots for training curves and sweep results.

use crate::metrics::MetricReport;
use crate::pipeline::{OrderOutcome, SweepPoint};
use crate::{CoreError, Result};
use std::fmt::Write as _;
use std::path::Path;

/// A minimal SVG polyline plot; one series per label.
pub fn svg_line_plot(
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
    path: &Path,
) -> Result<()> {
    let (w, h, ml, mb, mt, mr) = (640.0, 360.0, 56.0, 40.0, 32.0, 16.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return Err(CoreError::Evaluation(format!("no data for plot `{title}`")));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mb - mt);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut svg = String::new();
    let _ = write!(
        svg,
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\" font-family=\"monospace\" font-size=\"12\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        title = title
    );
    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{yb}\" stroke=\"black\"/>\n",
        ml = ml,
        yb = h - mb,
        xr = w - mr,
        mt = mt
    );
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.3}</text>\n",
            px(xv),
            h - mb + 16.0,
            xv
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n",
            ml - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path_d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_d.join(" ")
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n",
            w - mr - 150.0,
            mt + 16.0 * (i as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
        .map_err(|e| CoreError::io(format!("writing plot {}", path.display()), e))
}

fn read_curve(path: &Path, col: usize) -> Option<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let x: f64 = cells.first()?.parse().ok()?;
        let y: f64 = cells.get(col)?.parse().ok()?;
        if y.is_finite() {
            out.push((x, y));
        }
    }
    Some(out)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn fmt_count(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

/// Renders `eval/report.md` plus `eval/plots/*.svg` for a run directory.
pub fn render_run(run_dir: &Path) -> Result<()> {
    let eval = run_dir.join("eval");
    let plots = eval.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| CoreError::io("creating plots dir", e))?;

    let report = MetricReport::load(&eval.join("report.json"))?;
    let raw = MetricReport::load(&eval.join("report_raw.json")).ok();
    let rules = MetricReport::load(&eval.join("rules.json")).ok();

    let mut md = String::new();
    let _ = writeln!(md, "# Run report\n");
    let _ = writeln!(md, "config hash: `{}`\n", report.config_hash);

    let _ = writeln!(md, "## Downstream responder (test split)\n");
    let _ = writeln!(
        md,
        "| training KB | response acc | dialog acc | BLEU | entity F1 | KB entity F1 |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    if let Some(raw) = &raw {
        let _ = writeln!(
            md,
            "| raw (latest snapshot) | {} | {} | {} | {} | {} |",
            fmt_opt(raw.response_accuracy),
            fmt_opt(raw.dialog_accuracy),
            fmt_opt(raw.bleu),
            fmt_opt(raw.entity_f1),
            fmt_opt(raw.kb_entity_f1),
        );
    }
    let _ = writeln!(
        md,
        "| repaired (per-dialog) | {} | {} | {} | {} | {} |",
        fmt_opt(report.response_accuracy),
        fmt_opt(report.dialog_accuracy),
        fmt_opt(report.bleu),
        fmt_opt(report.entity_f1),
        fmt_opt(report.kb_entity_f1),
    );

    let _ = writeln!(md, "\n## Arbitration (train split)\n");
    let _ = writeln!(
        md,
        "| arbitration | inconsistency pre | post | insertions | deletions | RI F1 | RD F1 | RC acc |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
    let _ = writeln!(
        md,
        "| learned | {} | {} | {} | {} | {} | {} | {} |",
        fmt_opt(report.inconsistency_rate_pre),
        fmt_opt(report.inconsistency_rate_post),
        fmt_count(report.insertion_count),
        fmt_count(report.deletion_count),
        fmt_opt(report.ri_f1),
        fmt_opt(report.rd_f1),
        fmt_opt(report.rc_accuracy),
    );
    if let Some(rules) = &rules {
        let _ = writeln!(
            md,
            "| rules | {} | {} | {} | {} | {} | {} | {} |",
            fmt_opt(rules.inconsistency_rate_pre),
            fmt_opt(rules.inconsistency_rate_post),
            fmt_count(rules.insertion_count),
            fmt_count(rules.deletion_count),
            fmt_opt(rules.ri_f1),
            fmt_opt(rules.rd_f1),
            fmt_opt(rules.rc_accuracy),
        );
    }

    if let Ok(text) = std::fs::read_to_string(eval.join("orders.json")) {
        if let Ok(orders) = serde_json::from_str::<Vec<OrderOutcome>>(&text) {
            let _ = writeln!(md, "\n## Stage-order study\n");
            let _ = writeln!(md, "| order | response acc | dialog acc | inconsistency post |");
            let _ = writeln!(md, "|---|---|---|---|");
            for o in &orders {
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} | {:.4} |",
                    o.order, o.response_accuracy, o.dialog_accuracy, o.inconsistency_post
                );
            }
        }
    }

    // Training curves.
    let curves = run_dir.join("curves");
    let curve_specs: [(&str, &str, usize, &str); 5] = [
        ("ri.csv", "insertion classifier accuracy", 3, "ri.svg"),
        ("mem.csv", "reward model loss", 1, "mem.svg"),
        ("rd.csv", "deletion policy average reward", 1, "rd.svg"),
        ("rc.csv", "completion policy average reward", 1, "rc.svg"),
        ("tod_arb.csv", "responder loss (repaired KBs)", 1, "tod_arb.svg"),
    ];
    let _ = writeln!(md, "\n## Training curves\n");
    for (file, title, col, out) in curve_specs {
        if let Some(points) = read_curve(&curves.join(file), col) {
            svg_line_plot(title, &[(title.to_string(), points)], &plots.join(out))?;
            let _ = writeln!(md, "![{title}](plots/{out})");
        }
    }

    // Sweep plot (present when the run root holds a sweep summary).
    if let Ok(text) = std::fs::read_to_string(run_dir.join("sweep.json")) {
        if let Ok(points) = serde_json::from_str::<Vec<SweepPoint>>(&text) {
            let series = vec![
                (
                    "raw".to_string(),
                    points
                        .iter()
                        .map(|p| (p.injected_rate, p.raw_dialog_accuracy))
                        .collect(),
                ),
                (
                    "repaired".to_string(),
                    points
                        .iter()
                        .map(|p| (p.injected_rate, p.arb_dialog_accuracy))
                        .collect(),
                ),
            ];
            svg_line_plot(
                "dialog accuracy vs injected inconsistency",
                &series,
                &plots.join("sweep.svg"),
            )?;
            let _ = writeln!(md, "![sweep](plots/sweep.svg)");
        }
    }

    std::fs::write(eval.join("report.md"), md)
        .map_err(|e| CoreError::io("writing report.md", e))
}
