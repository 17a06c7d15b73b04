//! Report rendering: CSV, JSON and plain-text tables.
//!
//! Everything here is a pure function of its inputs, so repeated runs with
//! the same config produce byte-identical files. Wall times only appear in
//! [`timings_csv`].

use std::fmt::Write as _;

use mosaic_core::metrics::EvalReport;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::ScaleRow;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::pipeline::{Ablation, PipelineOutput, StageReport};

/// Serializes `rows` as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Serialize)]
struct MetricRow {
    kind: &'static str,
    i: Option<usize>,
    j: Option<usize>,
    rotation_deg: f64,
    translation_m: f64,
    success: Option<bool>,
}

/// Long-format CSV: one row per vertex and per pair, then mean and median
/// rows for the vertex errors (`vertex_*`) and pair errors (`pair_*`).
pub fn eval_csv(report: &EvalReport) -> Result<String> {
    let mut rows = Vec::new();
    for (k, (re, te)) in report.re_deg.iter().zip(&report.te_m).enumerate() {
        rows.push(MetricRow {
            kind: "vertex",
            i: Some(k),
            j: None,
            rotation_deg: *re,
            translation_m: *te,
            success: None,
        });
    }
    for p in &report.pairs {
        rows.push(MetricRow {
            kind: "pair",
            i: Some(p.i),
            j: Some(p.j),
            rotation_deg: p.rre_deg,
            translation_m: p.rte_m,
            success: Some(p.success),
        });
    }
    let summary = |kind, r: f64, t: f64| MetricRow {
        kind,
        i: None,
        j: None,
        rotation_deg: r,
        translation_m: t,
        success: None,
    };
    rows.push(summary("vertex_mean", report.re.mean, report.te.mean));
    rows.push(summary("vertex_median", report.re.median, report.te.median));
    if let (Some(r), Some(t)) = (report.rre, report.rte) {
        rows.push(summary("pair_mean", r.mean, t.mean));
        rows.push(summary("pair_median", r.median, t.median));
    }
    to_csv(rows)
}

#[derive(Serialize)]
struct StageRow<'a> {
    stage: &'a str,
    converged: bool,
    iterations: usize,
    summary: &'a str,
}

pub fn stages_csv(stages: &[StageReport]) -> Result<String> {
    to_csv(stages.iter().map(|s| StageRow {
        stage: s.name,
        converged: s.converged,
        iterations: s.iterations,
        summary: &s.summary,
    }))
}

#[derive(Serialize)]
struct TimingRow<'a> {
    stage: &'a str,
    seconds: f64,
}

/// Wall time per stage; not reproducible across runs.
pub fn timings_csv(stages: &[StageReport]) -> Result<String> {
    to_csv(stages.iter().map(|s| TimingRow {
        stage: s.name,
        seconds: s.seconds,
    }))
}

pub fn eval_json(report: &EvalReport) -> Value {
    json!({
        "thresholds": {
            "rre_deg": report.config.rre_threshold_deg,
            "rte_m": report.config.rte_threshold_m,
        },
        "recall": report.recall,
        "re_deg": {"mean": report.re.mean, "median": report.re.median},
        "te_m": {"mean": report.te.mean, "median": report.te.median},
        "rre_deg": report.rre.map(|s| json!({"mean": s.mean, "median": s.median})),
        "rte_m": report.rte.map(|s| json!({"mean": s.mean, "median": s.median})),
        "vertices": report.re_deg.iter().zip(&report.te_m).enumerate()
            .map(|(k, (r, t))| json!({"id": k, "re_deg": r, "te_m": t}))
            .collect::<Vec<_>>(),
        "pairs": report.pairs.iter()
            .map(|p| json!({"i": p.i, "j": p.j, "rre_deg": p.rre_deg, "rte_m": p.rte_m, "success": p.success}))
            .collect::<Vec<_>>(),
    })
}

/// Machine-readable run report; includes the effective config.
pub fn run_json(cfg: &PipelineConfig, out: &PipelineOutput) -> Value {
    json!({
        "config": cfg,
        "mask": out.mask.to_string(),
        "stages": out.stages.iter()
            .map(|s| json!({"stage": s.name, "converged": s.converged, "iterations": s.iterations, "summary": s.summary}))
            .collect::<Vec<_>>(),
        "warnings": out.warnings,
        "metrics": out.report.as_ref().map(eval_json),
    })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

pub fn eval_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "recall thresholds: RRE < {} deg, RTE < {} m",
        report.config.rre_threshold_deg, report.config.rte_threshold_m
    );
    let _ = writeln!(s, "{:<8} {:>12} {:>12}", "", "mean", "median");
    let _ = writeln!(
        s,
        "{:<8} {:>12.6} {:>12.6}",
        "RE deg", report.re.mean, report.re.median
    );
    let _ = writeln!(
        s,
        "{:<8} {:>12.6} {:>12.6}",
        "TE m", report.te.mean, report.te.median
    );
    let _ = writeln!(
        s,
        "{:<8} {:>12} {:>12}",
        "RRE deg",
        opt(report.rre.map(|x| x.mean), 6),
        opt(report.rre.map(|x| x.median), 6)
    );
    let _ = writeln!(
        s,
        "{:<8} {:>12} {:>12}",
        "RTE m",
        opt(report.rte.map(|x| x.mean), 6),
        opt(report.rte.map(|x| x.median), 6)
    );
    let _ = writeln!(s, "{:<8} {:>12}", "RR", opt(report.recall, 4));
    s
}

pub fn stage_table(stages: &[StageReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<26} {:>9} {:>6}  summary",
        "stage", "converged", "iters"
    );
    for st in stages {
        let _ = writeln!(
            s,
            "{:<26} {:>9} {:>6}  {}",
            st.name,
            if st.converged { "yes" } else { "no" },
            st.iterations,
            st.summary
        );
    }
    s
}

#[derive(Serialize)]
struct AblationCsvRow {
    configuration: String,
    r: bool,
    tr: bool,
    ta: bool,
    d: bool,
    re_mean_deg: f64,
    re_median_deg: f64,
    te_mean_m: f64,
    te_median_m: f64,
}

pub fn ablation_csv(ab: &Ablation) -> Result<String> {
    to_csv(ab.rows.iter().map(|r| AblationCsvRow {
        configuration: r.mask.to_string(),
        r: r.mask.rotation,
        tr: r.mask.reestimation,
        ta: true,
        d: r.mask.refinement,
        re_mean_deg: r.re.mean,
        re_median_deg: r.re.median,
        te_mean_m: r.te.mean,
        te_median_m: r.te.median,
    }))
}

/// One line per configuration with a check mark per stage, as in an
/// ablation table.
pub fn ablation_table(ab: &Ablation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} seeds", ab.seeds.len());
    let _ = writeln!(
        s,
        "{:<12} {:^3} {:^3} {:^3} {:^3} {:>10} {:>10}",
        "config", "R", "TR", "TA", "D", "RE deg", "TE m"
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for r in &ab.rows {
        let _ = writeln!(
            s,
            "{:<12} {:^3} {:^3} {:^3} {:^3} {:>10.4} {:>10.4}",
            r.mask.to_string(),
            mark(r.mask.rotation),
            mark(r.mask.reestimation),
            "x",
            mark(r.mask.refinement),
            r.re.mean,
            r.te.mean
        );
    }
    s
}

pub fn scaling_csv(rows: &[ScaleRow]) -> Result<String> {
    to_csv(rows)
}
