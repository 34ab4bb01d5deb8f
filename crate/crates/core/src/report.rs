//! Multi-model comparison tables and optional SVG plots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::train::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Sca,
    Captions,
    Ratings,
}

fn groups_of(r: &MetricsReport) -> BTreeSet<Group> {
    let mut g = BTreeSet::new();
    if r.sca.is_some() {
        g.insert(Group::Sca);
    }
    if r.bleu4.is_some() && r.cider.is_some() {
        g.insert(Group::Captions);
    }
    if r.deviations.is_some() {
        g.insert(Group::Ratings);
    }
    g
}

pub fn parse_report(text: &str, origin: &str) -> Result<MetricsReport> {
    serde_json::from_str(text).map_err(|e| Error::parse(origin, e.line(), e.to_string()))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub model: String,
    pub oa: Option<f64>,
    pub ma: Option<f64>,
    pub cider: Option<f64>,
    pub bleu4: Option<f64>,
    /// Never computed.
    pub meteor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationRow {
    pub model: String,
    pub d_r1: f64,
    pub d_r2: f64,
    pub d_r3: f64,
}

/// Rows shared by the text and JSON renderings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub groups: Vec<Group>,
    pub accuracy: Vec<AccuracyRow>,
    pub deviations: Vec<DeviationRow>,
}

impl Comparison {
    /// Keeps the metric groups present in every report; fails if there are
    /// none. The "gt" rows come from the first report that carries them.
    pub fn new(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::Data("no reports given".into()))?;
        let common = reports
            .iter()
            .skip(1)
            .fold(groups_of(first), |acc, r| acc.intersection(&groups_of(r)).copied().collect());
        if common.is_empty() {
            return Err(Error::Data("the reports share no metric group".into()));
        }
        let has = |g| common.contains(&g);
        let mut accuracy = Vec::new();
        let mut deviations = Vec::new();
        if has(Group::Sca) || has(Group::Captions) {
            for r in reports {
                let sca = r.sca.as_ref().filter(|_| has(Group::Sca));
                let cap = has(Group::Captions);
                accuracy.push(AccuracyRow {
                    model: r.model.clone(),
                    oa: sca.map(|s| s.oa),
                    ma: sca.map(|s| s.ma),
                    cider: r.cider.filter(|_| cap),
                    bleu4: r.bleu4.filter(|_| cap),
                    meteor: None,
                });
            }
            if has(Group::Captions) {
                if let Some(gt) = reports.iter().find_map(|r| r.gt.as_ref().filter(|g| g.bleu4.is_some())) {
                    accuracy.push(AccuracyRow {
                        model: "gt".into(),
                        oa: None,
                        ma: None,
                        cider: gt.cider,
                        bleu4: gt.bleu4,
                        meteor: None,
                    });
                }
            }
        }
        if has(Group::Ratings) {
            for r in reports {
                let d = r.deviations.expect("ratings group is common");
                deviations.push(DeviationRow {
                    model: r.model.clone(),
                    d_r1: d[0],
                    d_r2: d[1],
                    d_r3: d[2],
                });
            }
            if let Some(d) = reports.iter().find_map(|r| r.gt.as_ref().and_then(|g| g.deviations)) {
                deviations.push(DeviationRow {
                    model: "gt".into(),
                    d_r1: d[0],
                    d_r2: d[1],
                    d_r3: d[2],
                });
            }
        }
        Ok(Comparison {
            groups: common.into_iter().collect(),
            accuracy,
            deviations,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.accuracy.is_empty() {
            let rows: Vec<Vec<String>> = self
                .accuracy
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        cell(r.oa, 3),
                        cell(r.ma, 3),
                        cell(r.cider, 3),
                        cell(r.bleu4, 3),
                        cell(r.meteor, 3),
                    ]
                })
                .collect();
            out += &grid(&["model", "OA", "MA", "Cider", "Bleu-4", "Meteor"], &rows);
        }
        if !self.deviations.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let rows: Vec<Vec<String>> = self
                .deviations
                .iter()
                .map(|r| {
                    vec![
                        r.model.clone(),
                        format!("{:.4}", r.d_r1),
                        format!("{:.4}", r.d_r2),
                        format!("{:.4}", r.d_r3),
                    ]
                })
                .collect();
            out += &grid(&["model", "d_r1", "d_r2", "d_r3"], &rows);
        }
        out
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.digits$}"))
}

fn grid(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_owned() + "\n"
    };
    let mut out = line(header.to_vec());
    out += &"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    out.push('\n');
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

/// Grouped bars of per-class accuracy, one color per report.
pub fn accuracy_svg(reports: &[MetricsReport]) -> Result<String> {
    let classes: BTreeSet<&String> = reports
        .iter()
        .filter_map(|r| r.sca.as_ref())
        .flat_map(|s| s.per_class.keys())
        .collect();
    if classes.is_empty() {
        return Err(Error::Data("no per-class accuracies to plot".into()));
    }
    let (bar, gap, h, top, left) = (14.0, 18.0, 200.0, 20.0, 40.0);
    let group_w = bar * reports.len() as f64 + gap;
    let width = left + group_w * classes.len() as f64 + 20.0;
    let height = top + h + 80.0 + 16.0 * reports.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + h);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + h * (1.0 - v);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y + 4.0);
    }
    for (ci, class) in classes.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * ci as f64;
        for (ri, r) in reports.iter().enumerate() {
            if let Some(acc) = r.sca.as_ref().and_then(|s| s.per_class.get(*class)) {
                let bh = h * acc.accuracy;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{bar}" height="{bh}" fill="{}"/>"#,
                    x0 + bar * ri as f64,
                    top + h - bh,
                    PALETTE[ri % PALETTE.len()]
                );
            }
        }
        let cx = x0 + bar * reports.len() as f64 / 2.0;
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#, top + h + 14.0, escape(class));
    }
    for (ri, r) in reports.iter().enumerate() {
        let y = top + h + 40.0 + 16.0 * ri as f64;
        let _ = writeln!(s, r#"<rect x="{left}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[ri % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, left + 14.0, escape(&r.model));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Total loss per log record as a polyline.
pub fn loss_svg(log: &TrainLog) -> Result<String> {
    if log.records.is_empty() {
        return Err(Error::Data("empty training log".into()));
    }
    let (w, h, pad) = (480.0, 240.0, 40.0);
    let xs: Vec<f64> = log.records.iter().map(|r| r.iteration as f64).collect();
    let ys: Vec<f64> = log.records.iter().map(|r| r.total).collect();
    let (x_max, y_max) = (xs.iter().cloned().fold(1.0, f64::max), ys.iter().cloned().fold(1e-12, f64::max));
    let points: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| format!("{:.2},{:.2}", pad + (w - 2.0 * pad) * x / x_max, h - pad - (h - 2.0 * pad) * y / y_max))
        .collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(s, r#"<text x="{pad}" y="{}">0</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, w - pad, h - pad + 14.0, x_max);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y_max:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" points="{}"/>"#, PALETTE[0], points.join(" "));
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
