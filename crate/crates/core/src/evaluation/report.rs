//! Report files: `report.json`, `report.csv`, `clusters.csv`,
//! `zero_shot.csv` and `comm_space.svg`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalReport};

pub const REPORT_FILES: [&str; 5] = ["report.json", "report.csv", "clusters.csv", "zero_shot.csv", "comm_space.svg"];

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        let mut push = |metric: &str, s: super::Stat| {
            rows.push(SummaryRow {
                metric: metric.into(),
                mean: s.mean,
                sd: s.sd,
                n: s.n,
            })
        };
        if let Some(p) = &self.performance {
            push("episode_length", p.length);
            push("success_rate", p.success);
        }
        if let Some(a) = &self.alignment {
            push("cosine", a.cosine);
            push("bleu", a.bleu);
        }
        if let Some(t) = &self.topographic {
            rows.push(SummaryRow {
                metric: "topographic_rho".into(),
                mean: t.rho,
                sd: 0.0,
                n: t.pairs,
            });
        }
        rows
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), EvalError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> EvalError {
    EvalError::Invalid(format!("csv: {e}"))
}

#[derive(Serialize)]
struct ClusterLine<'a> {
    cluster: usize,
    size: usize,
    message: &'a str,
    score: Option<f64>,
}

#[derive(Serialize)]
struct ZeroShotLine<'a> {
    row: usize,
    col: usize,
    episodes: usize,
    success_rate: f64,
    cosine: Option<f64>,
    cosine_n: usize,
    bleu: Option<f64>,
    bleu_n: usize,
    example: &'a str,
}

/// Writes every report file into `dir`, creating it if needed. Missing
/// sections produce files with headers only.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    write_csv(&dir.join("report.csv"), &["metric", "mean", "sd", "n"], &report.summary_rows())?;
    let clusters: Vec<ClusterLine> = report
        .clusters
        .iter()
        .flat_map(|c| &c.clusters)
        .map(|c| ClusterLine {
            cluster: c.cluster,
            size: c.size,
            message: c.message.as_deref().unwrap_or(""),
            score: c.score,
        })
        .collect();
    write_csv(&dir.join("clusters.csv"), &["cluster", "size", "message", "score"], &clusters)?;
    let zs: Vec<ZeroShotLine> = report
        .zero_shot
        .iter()
        .map(|z| ZeroShotLine {
            row: z.cell.0,
            col: z.cell.1,
            episodes: z.episodes,
            success_rate: z.success_rate,
            cosine: z.cosine.map(|s| s.mean),
            cosine_n: z.cosine.map_or(0, |s| s.n),
            bleu: z.bleu.map(|s| s.mean),
            bleu_n: z.bleu.map_or(0, |s| s.n),
            example: z.example.as_deref().unwrap_or(""),
        })
        .collect();
    write_csv(
        &dir.join("zero_shot.csv"),
        &[
            "row",
            "col",
            "episodes",
            "success_rate",
            "cosine",
            "cosine_n",
            "bleu",
            "bleu_n",
            "example",
        ],
        &zs,
    )?;
    fs::write(dir.join("comm_space.svg"), svg(report))?;
    Ok(())
}

/// Reads `report.csv` back.
pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn svg(report: &EvalReport) -> String {
    const SIZE: f64 = 640.0;
    const PAD: f64 = 40.0;
    let pts = &report.projection;
    let labels: Vec<Option<usize>> = report
        .clusters
        .as_ref()
        .map(|c| c.labels.clone())
        .unwrap_or_else(|| vec![None; pts.len()]);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let scale = |v: f64, k: usize| {
        let span = (hi[k] - lo[k]).max(1e-12);
        let t = (v - lo[k]) / span;
        if k == 0 {
            PAD + t * (SIZE - 2.0 * PAD)
        } else {
            SIZE - PAD - t * (SIZE - 2.0 * PAD)
        }
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{PAD}" y="24" font-family="sans-serif" font-size="14">{} / {}: message space (PCA)</text>"#,
        escape(&report.env),
        escape(&report.variant)
    );
    for (p, l) in pts.iter().zip(&labels) {
        let color = l.map_or("#bbbbbb", |k| PALETTE[k % PALETTE.len()]);
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#,
            scale(p[0], 0),
            scale(p[1], 1)
        );
    }
    if let Some(c) = &report.clusters {
        for row in &c.clusters {
            let members: Vec<&[f64; 2]> = pts.iter().zip(&labels).filter(|(_, l)| **l == Some(row.cluster)).map(|(p, _)| p).collect();
            let (Some(msg), false) = (&row.message, members.is_empty()) else { continue };
            let cx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            let cy = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" fill="{}">{}</text>"#,
                scale(cx, 0),
                scale(cy, 1),
                PALETTE[row.cluster % PALETTE.len()],
                escape(msg)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
