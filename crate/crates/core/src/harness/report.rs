//! Text, markdown and CSV renderings: the sign-alignment contingency table,
//! the stage overview and timeline, and verification reports.

use std::fmt::Write as _;

use crate::probe::{SignClass, SignTable};
use crate::theory::{MeasuredTimes, PredictedTimes, StageReport};

use super::pipeline::VerifyReport;

fn class_header(class: SignClass, t: &str) -> String {
    format!("|S_{{{}}}^({t})|", class.label())
}

pub fn sign_table_markdown(table: &SignTable) -> String {
    let mut out = String::new();
    let _ = write!(out, "| init (t={}) \\ t={} ", table.t_ref, table.t);
    for c in SignClass::ALL {
        let _ = write!(out, "| {} ", class_header(c, "t"));
    }
    out.push_str("| Row sum |\n|---|---:|---:|---:|---:|---:|\n");
    let rows = table.row_sums();
    for r in SignClass::ALL {
        let _ = write!(out, "| {} ", class_header(r, "0"));
        for c in SignClass::ALL {
            let _ = write!(out, "| {} ", table.counts[r.index()][c.index()]);
        }
        let _ = writeln!(out, "| {} |", rows[r.index()]);
    }
    out.push_str("| Column sum ");
    for c in table.column_sums() {
        let _ = write!(out, "| {c} ");
    }
    let _ = writeln!(out, "| {} |", table.total());
    if table.degenerate > 0 {
        let _ = writeln!(out, "\n{} pairs with a zero sign were left out.", table.degenerate);
    }
    out
}

pub fn sign_table_csv(table: &SignTable) -> String {
    let mut out = String::from("init_class");
    for c in SignClass::ALL {
        let _ = write!(out, ",{}", c.label());
    }
    out.push_str(",row_sum\n");
    let rows = table.row_sums();
    for r in SignClass::ALL {
        out.push_str(r.label());
        for c in SignClass::ALL {
            let _ = write!(out, ",{}", table.counts[r.index()][c.index()]);
        }
        let _ = writeln!(out, ",{}", rows[r.index()]);
    }
    out.push_str("column_sum");
    for c in table.column_sums() {
        let _ = write!(out, ",{c}");
    }
    let _ = writeln!(out, ",{}", table.total());
    out
}

const OVERVIEW: [(&str, &str); 5] = [
    ("I", "The mean value noise shifts early, then stabilizes."),
    ("II", "The query & key noise align their sign to each other."),
    ("III", "Majority voting determines the sign of query & key signals."),
    ("IV", "The noise-signal softmax outputs decay fast exponentially,"),
    ("", "then the query & key noise align their sign to signals."),
];

/// Stage overview with each stage's verdict when a report is given.
pub fn stage_overview_markdown(report: Option<&StageReport>) -> String {
    let mut out = String::from("| Stage | Behavior | Verdict |\n|---|---|---|\n");
    for (stage, text) in OVERVIEW {
        let verdict = match (stage, report) {
            ("", _) | (_, None) => String::new(),
            (s, Some(r)) => r.verdict(s).map(|v| v.verdict.to_string()).unwrap_or_default(),
        };
        let _ = writeln!(out, "| {} | {text} | {verdict} |", if stage.is_empty() { String::new() } else { format!("Stage {stage}") });
    }
    out
}

fn fmt_time(t: Option<f64>) -> String {
    t.map(|t| format!("{t}")).unwrap_or_else(|| "-".into())
}

fn timeline_rows(p: &PredictedTimes, m: &MeasuredTimes) -> Vec<(&'static str, String, String, &'static str)> {
    let pt = |x: f64| format!("{x:.2}");
    vec![
        ("Stage I end", pt(p.t1), fmt_time(m.t_stage1_end), "T1 vs all v_xi positive at a settled rate"),
        ("Stage II end", pt(p.t2_sgn), fmt_time(m.t_qk_aligned), "T2_sgn vs full query/key noise sign agreement"),
        ("Stage II bound", pt(p.t2), "-".into(), "T2"),
        ("Stage III", pt(p.t3), fmt_time(m.t_signal_departure), "T3 vs query signal departure"),
        (
            "s21 decayed",
            format!("{} .. {}", p.t4_minus_lo.map_or("-".into(), pt), pt(p.t4_minus_hi)),
            fmt_time(m.t_s21_decayed),
            "T4- bounds vs max_i s21 below threshold",
        ),
        ("key noise flip", pt(p.t4), fmt_time(m.t_key_flip), "T4 vs median turning point"),
        ("query noise flip", "-".into(), fmt_time(m.t_query_flip), "median turning point"),
        ("key noise crossing", "-".into(), fmt_time(m.t_key_cross), "median crossing"),
        ("query noise crossing", "-".into(), fmt_time(m.t_query_cross), "median crossing"),
        ("final alignment", "-".into(), fmt_time(m.t_final_aligned), ""),
    ]
}

pub fn timeline_markdown(p: &PredictedTimes, m: &MeasuredTimes) -> String {
    let mut out = String::from("| Event | Predicted | Measured | Note |\n|---|---:|---:|---|\n");
    for (event, pred, meas, note) in timeline_rows(p, m) {
        let _ = writeln!(out, "| {event} | {pred} | {meas} | {note} |");
    }
    if !p.monotone {
        out.push_str("\nPredicted times are flagged non-monotone:\n");
        for note in &p.notes {
            let _ = writeln!(out, "- {note}");
        }
    }
    out
}

pub fn timeline_csv(p: &PredictedTimes, m: &MeasuredTimes) -> String {
    let mut out = String::from("event,predicted,measured\n");
    for (event, pred, meas, _) in timeline_rows(p, m) {
        let _ = writeln!(out, "{event},{pred},{meas}");
    }
    out
}

/// Human-readable verification report.
pub fn verify_text(report: &VerifyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "optimizer: {}", report.optimizer.name());
    let _ = writeln!(out, "overall: {}", report.overall);
    if let Some(p) = &report.stages.preflight {
        let _ = writeln!(out, "preflight: {p}");
    }
    out.push('\n');
    out.push_str(&stage_overview_markdown(Some(&report.stages)));
    out.push('\n');
    for v in &report.stages.verdicts {
        let _ = writeln!(out, "Stage {}: {} (snapshots {:?})", v.stage, v.verdict, v.snapshots);
        for e in &v.evidence {
            let _ = writeln!(out, "  {e}");
        }
    }
    out.push('\n');
    out.push_str(&timeline_markdown(&report.stages.predicted, &report.stages.measured));
    out.push('\n');
    let scope = if report.theorem_applies { "" } else { " (informational)" };
    let c = &report.convergence;
    let _ = writeln!(out, "convergence{scope}: {}", c.verdict);
    for e in &c.evidence {
        let _ = writeln!(out, "  {e}");
    }
    let s = &report.sparsity;
    let _ = writeln!(
        out,
        "attention sparsity{scope}: {} (first sparse at {}, smallest max(s11, s21) = {:.3e} at t = {})",
        s.verdict,
        fmt_time(s.first_sparse),
        s.best,
        s.best_t
    );
    let g = &report.generalization;
    let _ = writeln!(
        out,
        "generalization{scope}: {} (test loss {}, zero-one {}, bound >= {})",
        g.verdict,
        g.test_loss.map_or("-".into(), |x| format!("{x:.4}")),
        g.zero_one.map_or("-".into(), |x| format!("{x:.4}")),
        g.lower_bound
    );
    let a = &report.audit;
    match &a.skipped {
        Some(why) => {
            let _ = writeln!(out, "increment audit: skipped ({why})");
        }
        None => {
            let _ = writeln!(
                out,
                "increment audit: {} of {} increments off the quanta over {} steps, max relative deviation {:.3e}, supports disjoint: {}",
                a.flagged, a.increments_checked, a.steps_checked, a.max_rel_deviation, a.supports_disjoint
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_table() -> SignTable {
        SignTable {
            t_ref: "0".into(),
            t: "10".into(),
            counts: [[486, 1, 0, 25], [244, 4, 9, 250], [223, 10, 4, 221], [37, 2, 3, 481]],
            degenerate: 0,
        }
    }

    #[test]
    fn markdown_layout() {
        let md = sign_table_markdown(&paper_table());
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[2].ends_with("| 486 | 1 | 0 | 25 | 512 |"));
        assert_eq!(lines[6], "| Column sum | 990 | 17 | 16 | 977 | 2000 |");
    }

    #[test]
    fn csv_layout() {
        let csv = sign_table_csv(&paper_table());
        assert_eq!(csv.lines().next().unwrap(), "init_class,K+Q+,K+Q-,K-Q+,K-Q-,row_sum");
        assert_eq!(csv.lines().last().unwrap(), "column_sum,990,17,16,977,2000");
    }

    #[test]
    fn overview_has_four_stages() {
        let md = stage_overview_markdown(None);
        for s in ["Stage I ", "Stage II ", "Stage III ", "Stage IV "] {
            assert!(md.contains(s), "{s}");
        }
    }
}
