use std::fmt::Write as _;

use crate::synth::{BenchmarkReport, CrossMatrix};

fn fmt_score(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

/// One line per task plus aggregate lines tagged `average`.
pub fn report_csv(r: &BenchmarkReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "format", "in_train", "metric", "score", "raw", "skipped", "sub_scores", "error"])?;
    for row in &r.rows {
        let subs: Vec<String> = row.sub_scores.iter().map(|s| format!("{s:.6}")).collect();
        w.write_record([
            row.name.clone(),
            row.format.to_string(),
            row.in_train.to_string(),
            row.metric.clone(),
            row.score.map(|s| format!("{s:.6}")).unwrap_or_default(),
            row.raw.map(|s| format!("{s:.6}")).unwrap_or_default(),
            row.skipped.to_string(),
            subs.join(";"),
            row.error.clone().unwrap_or_default(),
        ])?;
    }
    let mut agg = |name: String, v: Option<f64>| {
        w.write_record([&name, "", "", "average", &v.map(|s| format!("{s:.6}")).unwrap_or_default(), "", "", "", ""])
    };
    for (f, v) in &r.format_averages {
        agg(format!("{f} average"), Some(*v))?;
    }
    agg("in-train average".into(), r.in_train_average)?;
    agg("out-of-train average".into(), r.out_of_train_average)?;
    agg("overall average".into(), r.overall_average)?;
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Plain-text table: per-task scores, format averages and the in/out-of-train summary.
pub fn report_table(r: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Benchmark report: {}", r.label);
    let _ = writeln!(s, "{:<22} {:<6} {:<6} {:<22} {:>8}", "task", "format", "split", "metric", "score");
    for row in &r.rows {
        let split = if row.in_train { "in" } else { "out*" };
        let _ = writeln!(
            s,
            "{:<22} {:<6} {:<6} {:<22} {:>8}",
            row.name,
            row.format.as_str(),
            split,
            row.metric,
            fmt_score(row.score)
        );
        if let Some(e) = &row.error {
            let _ = writeln!(s, "    error: {e}");
        }
    }
    let _ = writeln!(s);
    for (f, v) in &r.format_averages {
        let _ = writeln!(s, "{:<22} {:>8.2}", format!("{f} average"), v);
    }
    let _ = writeln!(s, "{:>12} {:>14} {:>10}", "In-Train", "Out-of-Train", "Average");
    let _ = writeln!(
        s,
        "{:>12} {:>14} {:>10}",
        fmt_score(r.in_train_average),
        fmt_score(r.out_of_train_average),
        fmt_score(r.overall_average)
    );
    let _ = writeln!(s, "* out-of-train tasks reuse corpus documents with unseen labels or queries");
    if let Some(c) = &r.cross {
        s.push('\n');
        s.push_str(&cross_table(c));
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Format × control-code scores; `*` marks a diagonal entry that is its row's maximum.
pub fn cross_table(c: &CrossMatrix) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<22}", "task \\ code");
    for code in &c.codes {
        let _ = write!(s, " {:>9}", code.to_string());
    }
    s.push('\n');
    for row in &c.rows {
        let _ = write!(s, "{:<22}", format!("{} ({})", row.task, row.format));
        let own = row.format.query_code();
        for (code, v) in c.codes.iter().zip(&row.scores) {
            let mark = if *code == own && row.diagonal_max { "*" } else { " " };
            let _ = write!(s, " {:>8}{mark}", fmt_score(*v));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "diagonal is the row maximum in {} of {} rows", c.diagonal_wins(), c.rows.len());
    s
}
