//! Plain-text tables for terminal output.

use std::fmt::Write;

use conscope_core::ConScoreReport;

pub fn render_report(report: &ConScoreReport) -> String {
    let width = report
        .entries
        .iter()
        .map(|e| e.covariate.len())
        .max()
        .unwrap_or(0)
        .max("covariate".len());
    let with_p = report.entries.iter().any(|e| e.permutation_p.is_some());

    let mut out = String::new();
    let _ = writeln!(
        out,
        "run {}  checkpoint {}  model fit {:.4}",
        report.run_id, report.checkpoint, report.model_fit
    );
    let _ = write!(
        out,
        "{:<width$}  {:<8}  {:>6}  {:>8}  {:>8}  {:>8}",
        "covariate", "probe", "n", "r2", "|cos|", "score"
    );
    if with_p {
        let _ = write!(out, "  {:>8}", "p");
    }
    out.push('\n');
    for e in &report.entries {
        let kind = serde_json::to_value(e.probe_kind).unwrap();
        let _ = write!(
            out,
            "{:<width$}  {:<8}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}",
            e.covariate,
            kind.as_str().unwrap_or("?"),
            e.n_used,
            e.r2,
            e.cos_abs,
            e.score
        );
        if with_p {
            match e.permutation_p {
                Some(p) => {
                    let _ = write!(out, "  {p:>8.4}");
                }
                None => out.push_str("         -"),
            }
        }
        out.push('\n');
        for w in &e.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
    }
    out
}
