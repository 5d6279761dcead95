//! Report files: one CSV per table, one SVG bar chart per run, and
//! `summary.json` indexing everything.
//!
//! File names are `<report>_<seeds>_<table>.csv` and
//! `<report>_<run>_seed-<seed>.svg`, where `<seeds>` reads `seeds-0-1-2`.
//! Characters outside `[A-Za-z0-9._-]` become `_`. Missing values are empty
//! CSV cells; numbers use six decimals. Emitting the same reports twice
//! writes the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First key of every `summary.json`.
pub const REPORT_SCHEMA: &str = "pogmv-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Per-view accuracies of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarChart {
    pub run: String,
    pub seed: u64,
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub name: String,
    pub seeds: Vec<u64>,
    pub summary: serde_json::Value,
    pub tables: Vec<Table>,
    pub charts: Vec<BarChart>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    schema: &'static str,
    reports: Vec<SummaryEntry<'a>>,
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    kind: &'a str,
    name: &'a str,
    seeds: &'a [u64],
    files: Vec<String>,
    summary: &'a serde_json::Value,
}

pub(crate) fn fmt_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn seeds_tag(seeds: &[u64]) -> String {
    let ids: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("seeds-{}", ids.join("-"))
}

fn table_csv(table: &Table) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let io = |e: csv::Error| Error::IoFailure(std::io::Error::other(e));
    w.write_record(&table.columns).map_err(io)?;
    for row in &table.rows {
        w.write_record(row).map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::IoFailure(std::io::Error::other(e.to_string())))
}

/// A fixed-size SVG with one bar per view; empty views get no bar.
pub fn bar_chart_svg(chart: &BarChart) -> String {
    const W: f64 = 320.0;
    const H: f64 = 200.0;
    const PAD: f64 = 30.0;
    let n = chart.values.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="18" font-family="monospace" font-size="12">{} seed {}</text>"#, xml_escape(&chart.run), chart.seed);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    for (i, v) in chart.values.iter().enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        if let Some(v) = v {
            let h = (H - 2.0 * PAD - 10.0) * v.clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r##"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#4a78b5"/>"##,
                H - PAD - h,
                slot * 0.7
            );
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-family="monospace" font-size="10">{v:.3}</text>"#, H - PAD - h - 3.0);
        }
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" font-family="monospace" font-size="10">v{i}</text>"#, H - PAD + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes every report under `out_dir` and returns the files written,
/// `summary.json` last.
pub fn emit_report(reports: &[Report], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut entries = Vec::with_capacity(reports.len());
    for report in reports {
        let mut files = Vec::new();
        for table in &report.tables {
            let file = sanitize(&format!("{}_{}_{}.csv", report.name, seeds_tag(&report.seeds), table.name));
            std::fs::write(out_dir.join(&file), table_csv(table)?)?;
            files.push(file);
        }
        for chart in &report.charts {
            let file = sanitize(&format!("{}_{}_seed-{}.svg", report.name, chart.run, chart.seed));
            std::fs::write(out_dir.join(&file), bar_chart_svg(chart))?;
            files.push(file);
        }
        written.extend(files.iter().map(|f| out_dir.join(f)));
        entries.push(SummaryEntry { kind: &report.kind, name: &report.name, seeds: &report.seeds, files, summary: &report.summary });
    }
    let summary = SummaryFile { schema: REPORT_SCHEMA, reports: entries };
    let path = out_dir.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("serializable summary") + "\n")?;
    written.push(path);
    Ok(written)
}
