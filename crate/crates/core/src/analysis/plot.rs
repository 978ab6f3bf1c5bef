//! Rate-distortion table and SVG scatter.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::SweepResult;
use crate::error::{Error, Result};

const HEADER: &str = "beta\trate\tdistortion";

/// Tab-separated table with six decimals per value.
pub fn render_rd_table(sweep: &SweepResult) -> String {
    let mut out = format!("{HEADER}\n");
    for p in &sweep.points {
        writeln!(out, "{:.6}\t{:.6}\t{:.6}", p.beta, p.rd.rate, p.rd.distortion).expect("string write");
    }
    out
}

/// Parses a table written by [`render_rd_table`] into `(beta, rate, distortion)`.
pub fn read_rd_table(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::invalid("missing rate-distortion table header"));
    }
    lines
        .map(|l| {
            let v: Vec<f64> = l
                .split('\t')
                .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(format!("bad table value {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [b, r, d] => Ok((b, r, d)),
                _ => Err(Error::invalid(format!("expected 3 columns, got {}", v.len()))),
            }
        })
        .collect()
}

/// Scatter of distortion against rate with one labelled point per beta.
/// Coordinates come from the table's rounded values so both files agree.
pub fn render_rd_svg(sweep: &SweepResult) -> Result<String> {
    let rows = read_rd_table(&render_rd_table(sweep))?;
    let (w, h, m) = (640.0, 480.0, 70.0);
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { 0.1 * (hi - lo) } else { lo.abs().max(1.0) * 0.1 };
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(rows.iter().map(|r| r.1).collect());
    let (y0, y1) = span(rows.iter().map(|r| r.2).collect());
    let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let out = &mut s;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(out, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            px(xv),
            h - m + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            m - 6.0,
            py(yv) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">rate (KL, nats per segment)</text>"#,
        w / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">distortion (reconstruction, nats per segment)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (b, r, d) in &rows {
        let _ = writeln!(
            out,
            r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="5" fill="steelblue" data-beta="{b:.6}" data-rate="{r:.6}" data-distortion="{d:.6}"/>"#,
            px(*r),
            py(*d)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">beta={b}</text>"#,
            px(*r) + 8.0,
            py(*d) - 8.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `<stem>.tsv` and `<stem>.svg`; returns both paths.
pub fn emit_rd_plot(sweep: &SweepResult, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if sweep.points.is_empty() {
        return Err(Error::invalid("cannot plot an empty sweep"));
    }
    let table = stem.with_extension("tsv");
    let plot = stem.with_extension("svg");
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&table, render_rd_table(sweep)).map_err(|e| Error::io(&table, e))?;
    fs::write(&plot, render_rd_svg(sweep)?).map_err(|e| Error::io(&plot, e))?;
    Ok((table, plot))
}
