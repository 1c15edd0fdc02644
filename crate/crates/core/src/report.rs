//! Tables and figures: the per-setting metrics summary, its aggregate with
//! geometric means, and SVG bar charts and heatmaps built from them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::BenchResult;
use crate::metrics::g_mean;

/// Label of the geometric-mean group in tables and charts.
pub const G_MEAN: &str = "g_mean";

/// One row of the metrics summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub benchmark: String,
    pub setting: String,
    pub svf: f64,
    pub abs_svf: f64,
    pub scaled_svf: f64,
    pub mpu: f64,
    pub power_overhead: f64,
    pub stsf: f64,
    pub m_eff: usize,
}

/// Summary rows for one benchmark; `with_max_avg` keeps the max_avg row.
pub fn summary_rows(result: &BenchResult, with_max_avg: bool) -> Vec<SummaryRow> {
    result
        .rows()
        .filter(|m| with_max_avg || m.setting != result.max_avg.setting)
        .map(|m| SummaryRow {
            benchmark: result.benchmark.clone(),
            setting: m.setting.clone(),
            svf: m.svf.svf,
            abs_svf: m.svf.svf.abs(),
            scaled_svf: m.scaled_svf(),
            mpu: m.mpu,
            power_overhead: m.power_overhead,
            stsf: m.stsf,
            m_eff: m.m_eff,
        })
        .collect()
}

/// Settings in first-seen order.
pub fn settings_of(rows: &[SummaryRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.setting) {
            out.push(r.setting.clone());
        }
    }
    out
}

/// Benchmarks in first-seen order.
pub fn benchmarks_of(rows: &[SummaryRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.benchmark) {
            out.push(r.benchmark.clone());
        }
    }
    out
}

/// One `g_mean` row per setting. SVF columns use absolute values; `m_eff`
/// is the rounded arithmetic mean.
pub fn g_mean_rows(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    settings_of(rows)
        .into_iter()
        .map(|setting| {
            let part: Vec<&SummaryRow> = rows.iter().filter(|r| r.setting == setting).collect();
            let gm =
                |f: fn(&SummaryRow) -> f64| g_mean(&part.iter().map(|r| f(r)).collect::<Vec<_>>());
            let abs = gm(|r| r.abs_svf);
            SummaryRow {
                benchmark: G_MEAN.into(),
                setting,
                svf: abs,
                abs_svf: abs,
                scaled_svf: gm(|r| r.scaled_svf),
                mpu: gm(|r| r.mpu),
                power_overhead: gm(|r| r.power_overhead),
                stsf: gm(|r| r.stsf),
                m_eff: (part.iter().map(|r| r.m_eff as f64).sum::<f64>() / part.len() as f64)
                    .round() as usize,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::validation(format!("summary: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::validation(format!("summary: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_summary(text: &str, path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Time-averaged temperature map of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub panel: String,
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub temperature_c: f64,
}

pub fn heatmap_csv(cells: &[HeatmapCell]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for c in cells {
        w.serialize(c)
            .map_err(|e| Error::validation(format!("heatmap: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::validation(format!("heatmap: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_heatmap(text: &str, path: &Path) -> Result<Vec<HeatmapCell>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac",
];

fn header(width: f64, height: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, "<!-- thermoshield {} -->", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grouped bars, one group per benchmark (plus `g_mean`), one bar per
/// setting; optional dots overlay a second quantity on the same axis.
pub struct BarChart<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    pub settings: Vec<String>,
    pub bar: fn(&SummaryRow) -> f64,
    pub dot: Option<fn(&SummaryRow) -> f64>,
}

impl BarChart<'_> {
    pub fn render(&self, rows: &[SummaryRow]) -> String {
        let benches = benchmarks_of(rows);
        let value = |b: &str, s: &str, f: fn(&SummaryRow) -> f64| {
            rows.iter()
                .find(|r| r.benchmark == b && r.setting == s)
                .map(f)
        };
        let bar_w = 8.0;
        let group_w = bar_w * self.settings.len().max(1) as f64 + 12.0;
        let (left, top, plot_h) = (60.0, 40.0, 260.0);
        let width = left + group_w * benches.len() as f64 + 160.0;
        let height = top + plot_h + 110.0;
        let mut y_max = rows
            .iter()
            .filter(|r| self.settings.contains(&r.setting))
            .flat_map(|r| [(self.bar)(r), self.dot.map_or(0.0, |d| d(r))])
            .fold(0.0, f64::max);
        if y_max <= 0.0 {
            y_max = 1.0;
        }
        let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, y_max) / y_max);
        let mut s = header(width, height, self.title);
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            writeln!(
                s,
                r##"<line x1="{left}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
                width - 160.0,
                left - 4.0,
                y(v) + 4.0,
                y = y(v)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            top + plot_h / 2.0,
            escape(self.y_label)
        )
        .unwrap();
        for (g, b) in benches.iter().enumerate() {
            let x0 = left + group_w * g as f64 + 6.0;
            for (i, set) in self.settings.iter().enumerate() {
                let x = x0 + bar_w * i as f64;
                let color = PALETTE[i % PALETTE.len()];
                if let Some(v) = value(b, set, self.bar) {
                    writeln!(
                        s,
                        r#"<rect x="{x:.2}" y="{:.2}" width="{bar_w}" height="{:.2}" fill="{color}"><title>{} {} {v}</title></rect>"#,
                        y(v),
                        top + plot_h - y(v),
                        escape(b),
                        escape(set)
                    )
                    .unwrap();
                }
                if let Some(v) = self.dot.and_then(|d| value(b, set, d)) {
                    writeln!(
                        s,
                        r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#000000"/>"##,
                        x + bar_w / 2.0,
                        y(v)
                    )
                    .unwrap();
                }
            }
            let cx = x0 + bar_w * self.settings.len() as f64 / 2.0;
            let ly = top + plot_h + 8.0;
            writeln!(
                s,
                r#"<text x="{cx:.2}" y="{ly:.2}" transform="rotate(60 {cx:.2} {ly:.2})">{}</text>"#,
                escape(b)
            )
            .unwrap();
        }
        let lx = width - 150.0;
        for (i, set) in self.settings.iter().enumerate() {
            let ly = top + 14.0 * i as f64;
            writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                PALETTE[i % PALETTE.len()],
                lx + 14.0,
                ly + 9.0,
                escape(set)
            )
            .unwrap();
        }
        if self.dot.is_some() {
            let ly = top + 14.0 * self.settings.len() as f64;
            writeln!(
                s,
                r##"<circle cx="{}" cy="{}" r="3" fill="#000000"/><text x="{}" y="{}">scaled</text>"##,
                lx + 5.0,
                ly + 5.0,
                lx + 14.0,
                ly + 9.0
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Side-by-side temperature maps sharing one color scale.
pub fn heatmap_svg(title: &str, cells: &[HeatmapCell]) -> String {
    let mut panels: Vec<&str> = Vec::new();
    for c in cells {
        if !panels.contains(&c.panel.as_str()) {
            panels.push(&c.panel);
        }
    }
    let rows = cells.iter().map(|c| c.row + 1).max().unwrap_or(1);
    let cols = cells.iter().map(|c| c.col + 1).max().unwrap_or(1);
    let cell = 40.0;
    let (top, gap) = (50.0, 30.0);
    let panel_w = cell * cols as f64;
    let width = gap + (panel_w + gap) * panels.len() as f64;
    let height = top + cell * rows as f64 + 60.0;
    let lo = cells
        .iter()
        .map(|c| c.temperature_c)
        .fold(f64::INFINITY, f64::min);
    let hi = cells
        .iter()
        .map(|c| c.temperature_c)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = header(width.max(240.0), height, title);
    for (p, name) in panels.iter().enumerate() {
        let x0 = gap + (panel_w + gap) * p as f64;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + panel_w / 2.0,
            top - 8.0,
            escape(name)
        )
        .unwrap();
        for c in cells.iter().filter(|c| c.panel == *name) {
            let t = (c.temperature_c - lo) / span;
            let (r, b) = ((255.0 * t).round() as u8, (255.0 * (1.0 - t)).round() as u8);
            writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{cell}" height="{cell}" fill="#{r:02x}40{b:02x}"><title>{:.3} °C</title></rect>"##,
                x0 + cell * c.col as f64,
                top + cell * c.row as f64,
                c.temperature_c
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{gap}" y="{}">scale {lo:.2} °C (blue) to {hi:.2} °C (red)</text>"#,
        height - 20.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Figure files produced by [`render_figures`].
pub const FIGURES: [&str; 4] = [
    "fig4_svf.svg",
    "fig5_mpu.svg",
    "fig6_heatmap.svg",
    "fig7_overhead.svg",
];

/// Renders the figure set from aggregate rows (benchmarks plus `g_mean`).
/// The heatmap is skipped when no map data is given.
pub fn render_figures(rows: &[SummaryRow], heatmap: &[HeatmapCell]) -> Vec<(&'static str, String)> {
    let shielded: Vec<String> = settings_of(rows)
        .into_iter()
        .filter(|s| s != "unshielded")
        .collect();
    let mut svf_settings = vec!["unshielded".to_string()];
    svf_settings.extend(shielded.iter().cloned());
    let mut out = vec![
        (
            FIGURES[0],
            BarChart {
                title: "SVF per benchmark (bars) and power-scaled SVF (dots)",
                y_label: "|SVF|",
                settings: svf_settings,
                bar: |r| r.abs_svf,
                dot: Some(|r| r.scaled_svf.abs()),
            }
            .render(rows),
        ),
        (
            FIGURES[1],
            BarChart {
                title: "Metric of power utilization",
                y_label: "MPU",
                settings: shielded.clone(),
                bar: |r| r.mpu,
                dot: None,
            }
            .render(rows),
        ),
    ];
    if !heatmap.is_empty() {
        out.push((
            FIGURES[2],
            heatmap_svg("Protected-layer thermal profile", heatmap),
        ));
    }
    out.push((
        FIGURES[3],
        BarChart {
            title: "Power overhead",
            y_label: "generator / total power",
            settings: shielded,
            bar: |r| r.power_overhead,
            dot: None,
        }
        .render(rows),
    ));
    out
}
