//! Minimal SVG line charts for closed-loop traces.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use embedded_mpc::lti::PolytopicConstraints;
use embedded_mpc::{Scenario, SimTrace};

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 180.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 34.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub ys: Vec<f64>,
    pub dashed: bool,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Horizontal constraint lines.
    pub bounds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub xs: Vec<f64>,
    pub panels: Vec<Panel>,
}

impl Figure {
    pub fn to_svg(&self) -> String {
        let height = PANEL_H * self.panels.len() as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (i, panel) in self.panels.iter().enumerate() {
            self.draw_panel(&mut out, panel, i as f64 * PANEL_H);
        }
        out.push_str("</svg>\n");
        out
    }

    fn draw_panel(&self, out: &mut String, panel: &Panel, top: f64) {
        let (x0, x1) = range(self.xs.iter().copied());
        let (y0, y1) = range(
            panel
                .series
                .iter()
                .flat_map(|s| s.ys.iter().copied())
                .chain(panel.bounds.iter().copied()),
        );
        let pw = PANEL_W - MARGIN_L - MARGIN_R;
        let ph = PANEL_H - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + MARGIN_T + (y1 - y) / (y1 - y0) * ph;

        let _ = writeln!(
            out,
            r##"<rect x="{MARGIN_L}" y="{}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
            top + MARGIN_T
        );
        let _ = writeln!(out, r#"<text x="{MARGIN_L}" y="{}">{}</text>"#, top + 18.0, escape(&panel.title));
        for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN_L - 4.0, y + 4.0, tick(v));
        }
        let base = top + PANEL_H - MARGIN_B;
        for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
            let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, base + 14.0, tick(v));
        }
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">t [s]</text>"#, MARGIN_L + pw / 2.0, base + 28.0);

        for b in &panel.bounds {
            let y = sy(*b);
            let _ = writeln!(
                out,
                r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#000" stroke-width="1" stroke-dasharray="2,3"/>"##,
                MARGIN_L + pw
            );
        }
        for (k, s) in panel.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
            let mut points = String::new();
            for (x, y) in self.xs.iter().zip(&s.ys) {
                if y.is_finite() {
                    let _ = write!(points, "{:.2},{:.2} ", sx(*x), sy(*y));
                }
            }
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.trim_end()
            );
            let ly = top + MARGIN_T + 12.0 + 13.0 * k as f64;
            let lx = MARGIN_L + pw - 90.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{}" y="{}">{}</text>"#,
                ly - 4.0,
                lx + 20.0,
                ly - 4.0,
                lx + 24.0,
                ly,
                escape(&s.label)
            );
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Levels of single-coordinate rows `a·x + b ≤ 0` acting on coordinate `j`.
fn axis_bounds(coeffs: &[Vec<f64>], offsets: &[f64], j: usize) -> Vec<f64> {
    coeffs
        .iter()
        .zip(offsets)
        .filter(|(c, _)| c[j] != 0.0 && c.iter().enumerate().all(|(i, v)| i == j || *v == 0.0))
        .map(|(c, b)| -b / c[j])
        .collect()
}

struct Bounds {
    state: Vec<Vec<f64>>,
    input: Vec<Vec<f64>>,
}

fn bounds_from(constraints: &PolytopicConstraints) -> Bounds {
    let split = |rows: &[embedded_mpc::lti::ConstraintRow], dim: usize| -> Vec<Vec<f64>> {
        let coeffs: Vec<Vec<f64>> = rows.iter().map(|r| r.coeffs.iter().copied().collect()).collect();
        let offsets: Vec<f64> = rows.iter().map(|r| r.offset).collect();
        (0..dim).map(|j| axis_bounds(&coeffs, &offsets, j)).collect()
    };
    Bounds {
        state: split(constraints.state_rows(), constraints.n()),
        input: split(constraints.input_rows(), constraints.m()),
    }
}

/// Builds the output, state and input figures.
pub fn figures(trace: &SimTrace, scenario: Option<&Scenario>) -> Result<[(&'static str, Figure); 3]> {
    if trace.is_empty() {
        bail!("trace has no rows; nothing to plot");
    }
    let bounds = scenario.map(|s| bounds_from(&s.constraints));
    let xs = trace.times();
    let col = |pick: fn(&embedded_mpc::TraceRow) -> &Vec<f64>, i: usize| trace.series(pick, i);

    let outputs = (0..trace.l)
        .map(|i| {
            // an output that reads a single state inherits that state's bounds
            let level = match (scenario, &bounds) {
                (Some(s), Some(b)) => {
                    let c = s.plant.c.row(i);
                    let nz: Vec<usize> = (0..c.len()).filter(|j| c[*j] != 0.0).collect();
                    match nz.as_slice() {
                        [j] if c[*j] == 1.0 && s.plant.d.row(i).iter().all(|v| *v == 0.0) => b.state[*j].clone(),
                        _ => Vec::new(),
                    }
                }
                _ => Vec::new(),
            };
            Panel {
                title: format!("output {}", i + 1),
                series: vec![
                    Series { label: format!("psi_{}", i + 1), ys: col(|r| &r.psi, i), dashed: false },
                    Series { label: format!("r_{}", i + 1), ys: col(|r| &r.r, i), dashed: true },
                ],
                bounds: level,
            }
        })
        .collect();
    let states = (0..trace.n)
        .map(|i| Panel {
            title: format!("state {}", i + 1),
            series: vec![Series { label: format!("xi_{}", i + 1), ys: col(|r| &r.xi, i), dashed: false }],
            bounds: bounds.as_ref().map(|b| b.state[i].clone()).unwrap_or_default(),
        })
        .collect();
    let inputs = (0..trace.m)
        .map(|i| Panel {
            title: format!("input {}", i + 1),
            series: vec![Series { label: format!("nu_{}", i + 1), ys: col(|r| &r.nu, i), dashed: false }],
            bounds: bounds.as_ref().map(|b| b.input[i].clone()).unwrap_or_default(),
        })
        .collect();
    Ok([
        ("output.svg", Figure { xs: xs.clone(), panels: outputs }),
        ("states.svg", Figure { xs: xs.clone(), panels: states }),
        ("inputs.svg", Figure { xs, panels: inputs }),
    ])
}

/// Renders the three figures into `dir`, prefixing file names with `stem`.
pub fn write_plots(trace: &SimTrace, scenario: Option<&Scenario>, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let figs = figures(trace, scenario)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    for (name, fig) in figs {
        let path = dir.join(format!("{stem}_{name}"));
        std::fs::write(&path, fig.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_pick_single_coordinate_rows() {
        let coeffs = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 1.0]];
        let offsets = vec![-20.5, 0.0, -3.0];
        assert_eq!(axis_bounds(&coeffs, &offsets, 0), vec![20.5, 0.0]);
        assert!(axis_bounds(&coeffs, &offsets, 1).is_empty());
    }

    #[test]
    fn flat_series_gets_a_nonzero_range() {
        let (lo, hi) = range([3.0, 3.0].into_iter());
        assert!(lo < 3.0 && hi > 3.0);
    }

    #[test]
    fn reference_is_dashed() {
        let mut t = SimTrace::new(1, 1, 1);
        t.rows.push(embedded_mpc::TraceRow {
            t: 0.0,
            xi: vec![0.0],
            nu: vec![0.0],
            r: vec![1.0],
            psi: vec![0.0],
            kkt_res: 0.0,
            term_margin: 1.0,
            max_cviol: -1.0,
            rdot_norm: 0.0,
        });
        let figs = figures(&t, None).unwrap();
        let svg = figs[0].1.to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("stroke-dasharray=\"6,4\""));
    }
}
