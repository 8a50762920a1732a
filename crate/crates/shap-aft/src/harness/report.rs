//! Report rendering: pivot tables from result CSVs and deterministic SVG
//! figures (annotated class-pair heatmaps, confusion matrices, accuracy
//! curves, and averaged-contribution curves). CSVs remain the source of
//! truth; figures are derived. Missing grid cells are rendered as explicit
//! gaps, never interpolated.

use super::schemes::parse_defense_row;
use super::stages::{phi_bar_rel, Workspace, DEFENSE_CSV};
use super::ExperimentConfig;
use crate::attacks::AttackKind;
use crate::attribution::read_phi_bar;
use crate::error::{Error, Result};
use crate::signal::ModulationScheme;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

const CELL: f64 = 46.0;
const MARGIN: f64 = 90.0;

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Svg {
        Svg {
            body: String::new(),
            width,
            height,
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}" stroke="#444" stroke-width="0.5"/>"##
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size:.1}" text-anchor="{anchor}" font-family="monospace">{content}</text>"#
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        if points.len() < 2 {
            return;
        }
        let pts: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, color: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="{r:.1}" fill="{color}"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

fn heat_color(v: f64, lo: f64, hi: f64) -> String {
    // Blue for low, white at the midpoint, red for high.
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (
            (55.0 + 200.0 * u) as u8,
            (110.0 + 145.0 * u) as u8,
            255u8,
        )
    } else {
        let u = (t - 0.5) / 0.5;
        (255u8, (255.0 - 145.0 * u) as u8, (255.0 - 200.0 * u) as u8)
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Read a class-matrix CSV (names in first row/column) into a float grid.
fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let raw = fs::read_to_string(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut rows = Vec::new();
    for line in raw.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|c| c.parse::<f64>().unwrap_or(0.0))
            .collect();
        rows.push(cells);
    }
    Ok(rows)
}

/// Annotated matrix figure with one cell per class pair.
pub fn render_matrix_svg(matrix: &[Vec<f64>], title: &str) -> String {
    let n = matrix.len();
    let names: Vec<&str> = ModulationScheme::ALL.iter().map(|s| s.name()).collect();
    let size = MARGIN + n as f64 * CELL + 20.0;
    let mut svg = Svg::new(size, size + 20.0);
    svg.text(size / 2.0, 20.0, 13.0, "middle", title);
    let lo = matrix
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = matrix
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    for (i, row) in matrix.iter().enumerate() {
        let y = MARGIN + i as f64 * CELL;
        svg.text(
            MARGIN - 6.0,
            y + CELL / 2.0 + 3.0,
            9.0,
            "end",
            names.get(i).unwrap_or(&"?"),
        );
        for (j, &v) in row.iter().enumerate() {
            let x = MARGIN + j as f64 * CELL;
            svg.rect(x, y, CELL, CELL, &heat_color(v, lo, hi));
            let label = if v.abs() >= 100.0 || v == v.trunc() {
                format!("{v:.0}")
            } else {
                format!("{v:.2}")
            };
            svg.text(x + CELL / 2.0, y + CELL / 2.0 + 3.0, 8.0, "middle", &label);
        }
    }
    for (j, name) in names.iter().take(n).enumerate() {
        let x = MARGIN + j as f64 * CELL;
        svg.text(x + CELL / 2.0, MARGIN - 8.0, 9.0, "middle", name);
    }
    svg.finish()
}

const LINE_COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Multi-series line chart over a shared numeric x axis; `None` cells are
/// gaps.
pub fn render_curves_svg(
    title: &str,
    x_label: &str,
    xs: &[f64],
    series: &[(String, Vec<Option<f64>>)],
    y_range: Option<(f64, f64)>,
) -> String {
    let w = 560.0;
    let h = 360.0;
    let (x0, y0, x1, y1) = (70.0, 40.0, w - 160.0, h - 50.0);
    let mut svg = Svg::new(w, h);
    svg.text(w / 2.0, 20.0, 13.0, "middle", title);

    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (ymin, ymax) = y_range.unwrap_or_else(|| {
        let vals: Vec<f64> = series
            .iter()
            .flat_map(|(_, v)| v.iter().flatten().cloned().collect::<Vec<f64>>())
            .collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi.is_finite() && hi > lo {
            (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo))
        } else {
            (0.0, 1.0)
        }
    });
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin).max(1e-12) * (x1 - x0);
    let sy = |y: f64| y1 - (y - ymin) / (ymax - ymin).max(1e-12) * (y1 - y0);

    svg.polyline(&[(x0, y1), (x1, y1)], "#000");
    svg.polyline(&[(x0, y0), (x0, y1)], "#000");
    for &x in xs {
        svg.text(sx(x), y1 + 16.0, 9.0, "middle", &format!("{x}"));
        svg.polyline(&[(sx(x), y1), (sx(x), y1 + 4.0)], "#000");
    }
    svg.text((x0 + x1) / 2.0, h - 14.0, 10.0, "middle", x_label);
    for k in 0..=4 {
        let y = ymin + (ymax - ymin) * k as f64 / 4.0;
        svg.text(x0 - 8.0, sy(y) + 3.0, 9.0, "end", &format!("{y:.2}"));
        svg.polyline(&[(x0 - 4.0, sy(y)), (x0, sy(y))], "#000");
    }

    for (si, (name, values)) in series.iter().enumerate() {
        let color = LINE_COLORS[si % LINE_COLORS.len()];
        let mut run: Vec<(f64, f64)> = Vec::new();
        for (&x, v) in xs.iter().zip(values) {
            match v {
                Some(y) => {
                    run.push((sx(x), sy(*y)));
                    svg.circle(sx(x), sy(*y), 2.5, color);
                }
                None => {
                    svg.polyline(&run, color);
                    run.clear();
                }
            }
        }
        svg.polyline(&run, color);
        let ly = y0 + 14.0 * si as f64;
        svg.polyline(&[(x1 + 8.0, ly), (x1 + 28.0, ly)], color);
        svg.text(x1 + 32.0, ly + 3.0, 9.0, "start", name);
    }
    svg.finish()
}

/// Averaged-contribution curve figure: one series per attack level.
fn phi_bar_figure(ws: &Workspace, kind: AttackKind, levels: &[f64]) -> Result<Option<String>> {
    let mut series: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    let mut len = 0usize;
    let mut tags: Vec<(String, Option<f64>)> = vec![("clean".into(), None)];
    for &l in levels {
        tags.push((format!("level {l}"), Some(l)));
    }
    for (label, level) in tags {
        let rel = phi_bar_rel(kind, level);
        let path = ws.path(&rel);
        if !path.exists() {
            continue;
        }
        let phi = read_phi_bar(&path)?;
        len = len.max(phi.len());
        series.push((label, phi.into_iter().map(Some).collect()));
    }
    if series.is_empty() {
        return Ok(None);
    }
    let xs: Vec<f64> = (0..len).map(|i| i as f64).collect();
    Ok(Some(render_curves_svg(
        &format!("averaged contribution per sample point ({})", kind.name()),
        "sample point index",
        &xs,
        &series,
        None,
    )))
}

pub fn write_reports(cfg: &ExperimentConfig, ws: &mut Workspace) -> Result<()> {
    let stage = "report";
    let defense_path = ws.require(DEFENSE_CSV)?;
    let raw = fs::read_to_string(&defense_path)?;
    let rows: Vec<_> = raw.lines().skip(1).filter_map(parse_defense_row).collect();
    if rows.is_empty() {
        return Err(Error::MissingArtifact(
            "defense.csv has no result rows".into(),
        ));
    }

    // Pivot: one row per (attack, level), one column per scheme.
    let schemes: Vec<String> = {
        let mut seen = BTreeSet::new();
        rows.iter()
            .filter(|r| seen.insert(r.scheme.clone()))
            .map(|r| r.scheme.clone())
            .collect()
    };
    let mut cells: Vec<(AttackKind, f64)> = Vec::new();
    for r in &rows {
        if !cells.iter().any(|&(k, l)| k == r.attack && l == r.level) {
            cells.push((r.attack, r.level));
        }
    }
    let mut table = String::from("attack,level");
    for s in &schemes {
        table.push(',');
        table.push_str(s);
    }
    table.push('\n');
    for &(kind, level) in &cells {
        table.push_str(&format!("{kind},{level}"));
        for s in &schemes {
            table.push(',');
            if let Some(r) = rows
                .iter()
                .find(|r| r.attack == kind && r.level == level && &r.scheme == s)
            {
                table.push_str(&format!("{}", r.a_oa));
            }
        }
        table.push('\n');
    }
    fs::write(ws.path("reports/accuracy_table.csv"), table)?;
    ws.declare("reports/accuracy_table.csv", stage)?;

    // Accuracy-versus-level curves per attack kind.
    for kind in AttackKind::ALL {
        let levels: Vec<f64> = cells
            .iter()
            .filter(|&&(k, _)| k == kind)
            .map(|&(_, l)| l)
            .collect();
        if levels.is_empty() {
            continue;
        }
        let series: Vec<(String, Vec<Option<f64>>)> = schemes
            .iter()
            .map(|s| {
                let values = levels
                    .iter()
                    .map(|&l| {
                        rows.iter()
                            .find(|r| r.attack == kind && r.level == l && &r.scheme == s)
                            .map(|r| r.a_oa)
                    })
                    .collect();
                (s.clone(), values)
            })
            .collect();
        let svg = render_curves_svg(
            &format!("overall accuracy vs attack level ({})", kind.name()),
            if kind == AttackKind::Cw {
                "iterations"
            } else {
                "perturbation budget"
            },
            &levels,
            &series,
            Some((0.0, 1.0)),
        );
        let rel = format!("reports/accuracy_{}.svg", kind.name());
        fs::write(ws.path(&rel), svg)?;
        ws.declare(&rel, stage)?;
    }

    // Class-pair heatmap and consistency confusions, when the explain stage
    // has run.
    for (csv_rel, svg_rel, title) in [
        (
            "reports/heatmap.csv",
            "reports/heatmap.svg",
            "class-pair attribution sums",
        ),
        (
            "reports/confusion_labeled.csv",
            "reports/confusion_labeled.svg",
            "labeled attacked confusion",
        ),
        (
            "reports/confusion_unclassified.csv",
            "reports/confusion_unclassified.svg",
            "unclassified attacked confusion",
        ),
    ] {
        let path = ws.path(csv_rel);
        if path.exists() {
            let matrix = read_matrix(&path)?;
            fs::write(ws.path(svg_rel), render_matrix_svg(&matrix, title))?;
            ws.declare(svg_rel, stage)?;
        }
    }

    if let Some(kind) = AttackKind::parse(&cfg.attribution.explain_kind) {
        if let Some(svg) = phi_bar_figure(ws, kind, &cfg.attack.levels(kind))? {
            let rel = format!("reports/phi_bar_{}.svg", kind.name());
            fs::write(ws.path(&rel), svg)?;
            ws.declare(&rel, stage)?;
        }
    }

    // Run summary: configuration identity and component versions.
    let info = format!(
        "config_hash: {}\nseed: {}\ncrate_version: {}\n",
        cfg.config_hash(),
        cfg.seed,
        env!("CARGO_PKG_VERSION"),
    );
    fs::write(ws.path("reports/run_info.txt"), info)?;
    ws.declare("reports/run_info.txt", stage)?;
    Ok(())
}
