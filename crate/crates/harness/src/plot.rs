//! SVG 1.1 plots: log-log error curves and log-scaled flux heatmaps.
//!
//! All coordinates are printed with fixed precision so identical input gives
//! identical bytes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HarnessError, Result};
use crate::output::read_csv;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
/// Viridis stops from low to high.
const COLORMAP: [(f64, f64, f64); 5] =
    [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Error against step size from a `variant,rank,h,error,slope_local` table.
    LogLog,
    /// Scalar flux from an `x,y,phi` table.
    Heatmap,
}

impl FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loglog" => Ok(PlotKind::LogLog),
            "heatmap" => Ok(PlotKind::Heatmap),
            _ => Err(HarnessError::Input(format!("unknown plot kind `{s}` (expected loglog or heatmap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(h, error)` pairs; non-positive values are skipped.
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(out, r##"<?xml version="1.0" encoding="UTF-8"?>"##);
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"##,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Log-log plot of each series plus dashed guide lines `err ~ h^p` for `p` in `guides`.
pub fn loglog_svg(series: &[Series], guides: &[u32], title: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|&(x, y)| x > 0.0 && y > 0.0).collect();
    if pts.is_empty() {
        return Err(HarnessError::Input("nothing to plot".into()));
    }
    let lx = |v: f64| v.log10();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(lx(x));
        x1 = x1.max(lx(x));
        y0 = y0.min(lx(y));
        y1 = y1.max(lx(y));
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (lx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| HEIGHT - MARGIN - (lx(y) - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(out, r##"<defs><clipPath id="area"><rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}"/></clipPath></defs>"##);
    let _ = writeln!(out, r##"<rect x="{MARGIN}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>"##);
    for d in (x0 as i64)..=(x1 as i64) {
        let x = px(10f64.powi(d as i32));
        let _ = writeln!(
            out,
            r##"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">1e{d}</text>"##,
            HEIGHT - MARGIN + 16.0
        );
    }
    for d in (y0 as i64)..=(y1 as i64) {
        let y = py(10f64.powi(d as i32));
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{d}</text>"##,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">h</text>"##,
        WIDTH / 2.0,
        HEIGHT - 18.0
    );

    // Guides pass through the largest-h point of the first series.
    let anchor = series[0].points.iter().copied().filter(|&(x, y)| x > 0.0 && y > 0.0).fold(None, |acc: Option<(f64, f64)>, p| {
        match acc {
            Some(a) if a.0 >= p.0 => Some(a),
            _ => Some(p),
        }
    });
    if let Some((ax, ay)) = anchor {
        let (hx0, hx1) = (10f64.powf(x0), 10f64.powf(x1));
        for &p in guides {
            let at = |x: f64| ay * (x / ax).powi(p as i32);
            let _ = writeln!(
                out,
                r##"<line class="guide" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 3" clip-path="url(#area)"><title>order {p}</title></line>"##,
                px(hx0),
                py(at(hx0)),
                px(hx1),
                py(at(hx1))
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .filter(|&&(x, y)| x > 0.0 && y > 0.0)
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></polyline>"##,
            coords.join(" "),
            escape(&s.label)
        );
        let ly = MARGIN + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{ly:.2}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"##,
            MARGIN + 8.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn colormap(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP.len() - 2);
    let f = t - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    let mix = |u: f64, v: f64| (u + f * (v - u)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Heatmap of `(x, y, value)` cells on a tensor grid, colored by `log10(value)`.
/// Non-positive cells are white.
pub fn heatmap_svg(cells: &[(f64, f64, f64)], title: &str) -> Result<String> {
    if cells.is_empty() {
        return Err(HarnessError::Input("nothing to plot".into()));
    }
    let mut xs: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let mut ys: Vec<f64> = cells.iter().map(|c| c.1).collect();
    for v in [&mut xs, &mut ys] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let logs: Vec<f64> = cells.iter().filter(|c| c.2 > 0.0 && c.2.is_finite()).map(|c| c.2.log10()).collect();
    let (lo, hi) = logs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let size = (HEIGHT - 2.0 * MARGIN).min(WIDTH - 2.0 * MARGIN - 80.0);
    let (cw, ch) = (size / xs.len() as f64, size / ys.len() as f64);
    let index = |v: &[f64], x: f64| v.binary_search_by(|p| p.total_cmp(&x)).unwrap_or(0);

    let mut out = String::new();
    header(&mut out, title);
    for &(x, y, v) in cells {
        let (i, j) = (index(&xs, x), index(&ys, y));
        let fill = if v > 0.0 && v.is_finite() { colormap((v.log10() - lo) / span) } else { "#ffffff".to_string() };
        let _ = writeln!(
            out,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"##,
            MARGIN + i as f64 * cw,
            MARGIN + (ys.len() - 1 - j) as f64 * ch,
            cw,
            ch
        );
    }
    let _ = writeln!(out, r##"<rect x="{MARGIN}" y="{MARGIN}" width="{size:.3}" height="{size:.3}" fill="none" stroke="#000000"/>"##);
    // Color bar.
    let bx = MARGIN + size + 20.0;
    let steps = 32;
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let _ = writeln!(
            out,
            r##"<rect class="bar" x="{bx:.3}" y="{:.3}" width="16" height="{:.3}" fill="{}"/>"##,
            MARGIN + (1.0 - t) * (size - size / steps as f64),
            size / steps as f64,
            colormap(t)
        );
    }
    if !logs.is_empty() {
        for (v, y) in [(hi, MARGIN + 10.0), (lo, MARGIN + size)] {
            let _ = writeln!(
                out,
                r##"<text x="{:.3}" y="{y:.3}" font-family="sans-serif" font-size="11">1e{v:.1}</text>"##,
                bx + 22.0
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn parse_num(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| HarnessError::Input(format!("{}: `{s}` is not a number", path.display())))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HarnessError::Input(format!("{}: missing column `{name}`", path.display())))
}

/// Reads a CSV written by the harness and renders it.
pub fn render_plot(csv: &Path, kind: PlotKind) -> Result<String> {
    let (header, rows) = read_csv(csv)?;
    if rows.is_empty() {
        return Err(HarnessError::Input(format!("{}: empty table", csv.display())));
    }
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match kind {
        PlotKind::LogLog => {
            let (cv, cr, ch, ce) =
                (column(&header, "variant", csv)?, column(&header, "rank", csv)?, column(&header, "h", csv)?, column(&header, "error", csv)?);
            let mut series: Vec<Series> = Vec::new();
            for row in &rows {
                let label = format!("{} r={}", row[cv], row[cr]);
                let p = (parse_num(&row[ch], csv)?, parse_num(&row[ce], csv)?);
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.points.push(p),
                    None => series.push(Series { label, points: vec![p] }),
                }
            }
            loglog_svg(&series, &[1, 2, 3, 4], &title)
        }
        PlotKind::Heatmap => {
            let (cx, cy, cp) = (column(&header, "x", csv)?, column(&header, "y", csv)?, column(&header, "phi", csv)?);
            let cells = rows
                .iter()
                .map(|r| Ok((parse_num(&r[cx], csv)?, parse_num(&r[cy], csv)?, parse_num(&r[cp], csv)?)))
                .collect::<Result<Vec<_>>>()?;
            heatmap_svg(&cells, &title)
        }
    }
}

pub fn render_plot_to(csv: &Path, kind: PlotKind, svg: &Path) -> Result<()> {
    let text = render_plot(csv, kind)?;
    std::fs::write(svg, text).map_err(|e| HarnessError::io(svg, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_series_and_guides() {
        let s = |label: &str, c: f64| Series { label: label.into(), points: vec![(0.1, c * 0.1), (0.01, c * 0.01), (0.001, c * 0.001)] };
        let svg = loglog_svg(&[s("a", 1.0), s("b", 0.1)], &[1, 2, 3, 4], "t").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r##"class="guide""##).count(), 4);
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg, loglog_svg(&[s("a", 1.0), s("b", 0.1)], &[1, 2, 3, 4], "t").unwrap());
    }

    #[test]
    fn negative_cells_are_white() {
        let cells = vec![(0.5, 0.5, 1.0), (1.5, 0.5, -1e-3), (0.5, 1.5, 1e-2), (1.5, 1.5, 0.1)];
        let svg = heatmap_svg(&cells, "flux").unwrap();
        let cell_rects: Vec<&str> = svg.lines().filter(|l| l.starts_with("<rect x=") && l.contains("width=\"180.000\"")).collect();
        assert_eq!(cell_rects.len(), 4);
        let white: Vec<&&str> = cell_rects.iter().filter(|l| l.contains(r##"fill="#ffffff""##)).collect();
        assert_eq!(white.len(), 1);
        // (1.5, 0.5) is the right column, bottom row.
        assert!(white[0].contains(r##"x="240.000""##) && white[0].contains(r##"y="240.000""##), "{}", white[0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(loglog_svg(&[], &[1], "t").is_err());
        assert!(heatmap_svg(&[], "t").is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "variant,rank,h,error,slope_local\n").unwrap();
        assert!(matches!(render_plot(&p, PlotKind::LogLog), Err(HarnessError::Input(_))));
        assert!("bar".parse::<PlotKind>().is_err());
    }
}
