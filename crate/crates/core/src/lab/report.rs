//! On-disk artefacts: per-record CSV/JSON, optional SVG, and a summary index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Profile, RunRecord, Table, Verdict};
use crate::effham::CriticalTriple;
use crate::env::EnvironmentSpec;
use crate::error::{LabError, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: String,
    pub experiment: String,
    pub pass: bool,
    pub verdicts: Vec<Verdict>,
    pub seeds: Vec<u64>,
    pub environment: EnvironmentSpec,
    pub notes: Vec<String>,
    pub critical: Option<CriticalTriple>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub tool_version: String,
    pub records: Vec<RecordSummary>,
}

impl ReportSummary {
    pub fn passed(&self) -> bool {
        self.records.iter().all(|r| r.pass)
    }
}

fn write_table(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(&table.columns).map_err(|e| csv_error(path, e))?;
    for row in &table.rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, std::io::Error::other(e.to_string()))
}

fn profiles_table(profiles: &[Profile]) -> Table {
    let mut t = Table::new(&["label", "x", "y"]);
    for p in profiles {
        for (x, y) in p.x.iter().zip(&p.y) {
            t.push(vec![p.label.clone(), format!("{x:?}"), format!("{y:?}")]);
        }
    }
    t
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Writes `<id>.csv`, `<id>_profiles.csv`, `<id>.json` (and `<id>.svg` when
/// `plots` is set) for every record, then `summary.json`.
pub fn emit_report(records: &[RunRecord], out: &Path, plots: bool) -> Result<ReportSummary> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let mut summary = ReportSummary {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        records: Vec::new(),
    };
    for rec in records {
        if rec.id.is_empty() || rec.id.contains(['/', '\\']) {
            return Err(LabError::RejectedInput(format!("record id {:?} is not a file stem", rec.id)));
        }
        write_table(&out.join(format!("{}.csv", rec.id)), &rec.table)?;
        if !rec.profiles.is_empty() {
            write_table(&out.join(format!("{}_profiles.csv", rec.id)), &profiles_table(&rec.profiles))?;
            if plots {
                write_text(&out.join(format!("{}.svg", rec.id)), &line_plot_svg(&rec.id, &rec.profiles))?;
            }
        }
        let json = serde_json::to_string_pretty(rec).expect("records serialize");
        write_text(&out.join(format!("{}.json", rec.id)), &json)?;
        summary.records.push(RecordSummary {
            id: rec.id.clone(),
            experiment: rec.experiment.clone(),
            pass: rec.passed(),
            verdicts: rec.verdicts.clone(),
            seeds: rec.seeds.clone(),
            environment: rec.environment.clone(),
            notes: rec.notes.clone(),
            critical: rec.critical.clone(),
            wall_clock_seconds: rec.wall_clock_seconds,
        });
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join("summary.json"), &json)?;
    Ok(summary)
}

/// Reads every `<id>.json` record in a directory (ignoring `summary.json`
/// and `<id>_critical.json` triples).
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| LabError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && name != "summary.json" && !name.ends_with("_critical.json")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| LabError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| LabError::RejectedInput(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Minimal multi-series line chart.
pub fn line_plot_svg(title: &str, profiles: &[Profile]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 48.0;
    const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = profiles.iter().flat_map(|p| p.x.iter().zip(&p.y)).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-300 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-300 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0:.3}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.3}</text>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y1:.3}</text>"#, PAD + 4.0);
    for (k, p) in profiles.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let path: Vec<String> = p
            .x
            .iter()
            .zip(&p.y)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 16.0 * (k + 1) as f64,
            esc(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::{constant_spec, Comparison};

    #[test]
    fn empty_report_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("out");
        let s = emit_report(&[], &dir, true).unwrap();
        assert!(s.records.is_empty() && s.passed());
        let text = fs::read_to_string(dir.join("summary.json")).unwrap();
        let back: ReportSummary = serde_json::from_str(&text).unwrap();
        assert!(back.records.is_empty());
    }

    #[test]
    fn records_round_trip_and_csv_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let mut rec = RunRecord::new("demo", "eig", &constant_spec(0.0), &[0]);
        rec.table = Table::new(&["eps", "lambda"]);
        rec.table.push(vec!["0.1".into(), "0.25".into()]);
        rec.verdicts.push(Verdict::check("toy", 1.0, Comparison::Le, 2.0));
        rec.profiles.push(Profile {
            label: "a<b".into(),
            x: vec![0.0, 1.0],
            y: vec![1.0, 2.0],
        });
        emit_report(std::slice::from_ref(&rec), &dir, true).unwrap();
        let first = fs::read_to_string(dir.join("demo.csv")).unwrap();
        assert_eq!(first, "eps,lambda\n0.1,0.25\n");
        emit_report(std::slice::from_ref(&rec), &dir, true).unwrap();
        assert_eq!(first, fs::read_to_string(dir.join("demo.csv")).unwrap());
        let svg = fs::read_to_string(dir.join("demo.svg")).unwrap();
        assert!(svg.contains("a&lt;b") && svg.contains("<polyline"));
        let back = read_records(&dir).unwrap();
        assert_eq!(back.len(), 1);
        assert!(back[0].verdicts[0].recompute());
    }
}
