//! Accuracy tables as Markdown and CSV.

use std::fmt::Write as _;
use std::io::Write;

use crate::analysis::fmt_f64;
use crate::error::Result;
use crate::protocol::ReportTable;

/// Pipe tables with accuracies in percent, one section per table.
pub fn to_markdown(tables: &[ReportTable]) -> String {
    let mut s = String::new();
    for t in tables {
        let _ = writeln!(s, "### {}\n", t.title);
        let _ = writeln!(s, "| method | {} | avg |", t.tasks.join(" | "));
        let _ = writeln!(s, "|---|{}---:|", "---:|".repeat(t.tasks.len()));
        for r in &t.rows {
            let cells: Vec<String> = r.accuracy.iter().map(|a| format!("{:.1}", a * 100.0)).collect();
            let _ = writeln!(s, "| {} | {} | {:.1} |", r.method, cells.join(" | "), r.average() * 100.0);
        }
        s.push('\n');
    }
    s
}

/// Long format `table,method,task,accuracy`; the average uses task `avg`.
pub fn write_csv(tables: &[ReportTable], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["table", "method", "task", "accuracy"])?;
    for t in tables {
        for r in &t.rows {
            for (task, a) in t.tasks.iter().zip(&r.accuracy) {
                out.write_record([t.title.as_str(), &r.method, task, &fmt_f64(*a)])?;
            }
            out.write_record([t.title.as_str(), &r.method, "avg", &fmt_f64(r.average())])?;
        }
    }
    out.flush()?;
    Ok(())
}
