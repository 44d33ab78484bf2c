//! Text tables and an SVG plot of learning-curve summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use patrep::evalkit::CurveSummary;

fn cell(s: &CurveSummary) -> String {
    if s.count == 0 {
        "NA".to_string()
    } else if s.sem.is_finite() {
        format!("{:.3} ± {:.3}", s.mean_auroc, s.sem)
    } else {
        format!("{:.3}", s.mean_auroc)
    }
}

/// One table per task: rows are training sizes, columns are methods.
pub fn tables(summary: &[CurveSummary]) -> String {
    let tasks: BTreeSet<&str> = summary.iter().map(|s| s.task.as_str()).collect();
    let mut out = String::new();
    for task in tasks {
        let rows: Vec<&CurveSummary> = summary.iter().filter(|s| s.task == task).collect();
        let methods: BTreeSet<&str> = rows.iter().map(|s| s.method.as_str()).collect();
        let sizes: BTreeSet<usize> = rows.iter().map(|s| s.n).collect();
        let lookup: BTreeMap<(&str, usize), String> = rows.iter().map(|s| ((s.method.as_str(), s.n), cell(s))).collect();

        let mut widths: Vec<usize> = methods.iter().map(|m| m.chars().count()).collect();
        for (w, m) in widths.iter_mut().zip(&methods) {
            for &n in &sizes {
                *w = (*w).max(lookup.get(&(*m, n)).map_or(1, |c| c.chars().count()));
            }
        }
        let _ = writeln!(out, "AUROC, {task} (mean ± SEM)");
        let _ = write!(out, "{:>6}", "N");
        for (m, w) in methods.iter().zip(&widths) {
            let _ = write!(out, "  {m:>w$}");
        }
        out.push('\n');
        for &n in &sizes {
            let _ = write!(out, "{n:>6}");
            for (m, w) in methods.iter().zip(&widths) {
                let c = lookup.get(&(*m, n)).map_or("-", String::as_str);
                let _ = write!(out, "  {c:>w$}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN: f64 = 48.0;

/// Learning curves with one panel per task, log-scaled N and SEM error bars.
pub fn svg(summary: &[CurveSummary]) -> String {
    let ok: Vec<&CurveSummary> = summary.iter().filter(|s| s.count > 0 && s.mean_auroc.is_finite()).collect();
    let tasks: Vec<&str> = ok.iter().map(|s| s.task.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let methods: Vec<&str> = ok.iter().map(|s| s.method.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let width = MARGIN + tasks.len().max(1) as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 16.0 * methods.len() as f64 + 16.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let err = |s: &CurveSummary| if s.sem.is_finite() { s.sem } else { 0.0 };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &ok {
        lo = lo.min(s.mean_auroc - err(s));
        hi = hi.max(s.mean_auroc + err(s));
    }
    if !lo.is_finite() {
        lo = 0.5;
        hi = 1.0;
    }
    let pad = ((hi - lo) * 0.05).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let nmin = ok.iter().map(|s| s.n).min().unwrap_or(1).max(1) as f64;
    let nmax = ok.iter().map(|s| s.n).max().unwrap_or(2).max(2) as f64;
    let span = if nmax > nmin { (nmax / nmin).ln() } else { 1.0 };

    for (t, task) in tasks.iter().enumerate() {
        let x0 = MARGIN + t as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let px = |n: usize| x0 + PANEL_W * ((n as f64 / nmin).ln() / span);
        let py = |a: f64| y0 + PANEL_H * (1.0 - (a - lo) / (hi - lo));
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{task}</text>"#, x0 + PANEL_W / 2.0, y0 - 12.0);
        let _ = writeln!(
            out,
            r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        for n in ok.iter().map(|s| s.n).collect::<BTreeSet<_>>() {
            let x = px(n);
            let _ = writeln!(out, r##"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="#444"/>"##, y0 + PANEL_H, y0 + PANEL_H + 4.0);
            let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{n}</text>"#, y0 + PANEL_H + 16.0);
        }
        for k in 0..=4 {
            let a = lo + (hi - lo) * k as f64 / 4.0;
            let y = py(a);
            let _ = writeln!(out, r##"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="#444"/>"##, x0 - 4.0);
            let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{a:.2}</text>"#, x0 - 6.0, y + 4.0);
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">N (log scale)</text>"#, x0 + PANEL_W / 2.0, y0 + PANEL_H + 32.0);

        for (m, method) in methods.iter().enumerate() {
            let color = PALETTE[m % PALETTE.len()];
            let mut pts: Vec<&&CurveSummary> = ok.iter().filter(|s| s.task == *task && s.method == *method).collect();
            pts.sort_by_key(|s| s.n);
            if pts.is_empty() {
                continue;
            }
            let line: Vec<String> = pts.iter().map(|s| format!("{:.1},{:.1}", px(s.n), py(s.mean_auroc))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
            for s in pts {
                let (x, e) = (px(s.n), err(s));
                let _ = writeln!(
                    out,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    py(s.mean_auroc - e),
                    py(s.mean_auroc + e)
                );
                let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, py(s.mean_auroc));
            }
        }
    }
    for (m, method) in methods.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        let y = MARGIN + PANEL_H + 52.0 + 16.0 * m as f64;
        let _ = writeln!(out, r#"<rect x="{MARGIN}" y="{}" width="12" height="4" fill="{color}"/>"#, y - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{method}</text>"#, MARGIN + 18.0);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(method: &str, task: &str, n: usize, mean: f64, sem: f64, count: usize) -> CurveSummary {
        CurveSummary { method: method.into(), task: task.into(), n, mean_auroc: mean, sem, count }
    }

    #[test]
    fn table_lists_every_cell() {
        let rows = [s("a", "mortality", 125, 0.61, 0.01, 3), s("b", "mortality", 125, 0.7, f64::NAN, 1), s("a", "mortality", 250, 0.0, 0.0, 0)];
        let t = tables(&rows);
        assert!(t.contains("0.610 ± 0.010"));
        assert!(t.contains("0.700"));
        assert!(t.contains("NA"));
        assert_eq!(t.lines().filter(|l| l.trim_start().starts_with("125")).count(), 1);
    }

    #[test]
    fn svg_has_a_panel_per_task() {
        let rows = [s("a", "mortality", 125, 0.6, 0.02, 4), s("a", "er_visit", 250, 0.7, 0.01, 4)];
        let doc = svg(&rows);
        assert!(doc.starts_with("<svg"));
        assert!(doc.trim_end().ends_with("</svg>"));
        assert_eq!(doc.matches("fill=\"none\" stroke=\"#444\"").count(), 2);
    }
}
