//! The `report` command: re-render heatmaps.html from stored reports.

use std::path::{Path, PathBuf};

use attnrobust_core::attribution::{read_reports_jsonl, write_heatmaps_html};

use crate::CliError;

/// Re-render every reports.jsonl found in `dir` (directly or one level down
/// in seed/cell directories). Returns the regenerated heatmap paths.
pub fn execute(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut report_files = Vec::new();
    collect(dir, 0, &mut report_files).map_err(|e| CliError::other(e.to_string()))?;
    if report_files.is_empty() {
        return Err(CliError::validation(format!(
            "{} contains no reports.jsonl",
            dir.display()
        )));
    }
    report_files.sort();
    let mut rendered = Vec::with_capacity(report_files.len());
    for file in report_files {
        let reports = read_reports_jsonl(&file)?;
        let out = file.with_file_name("heatmaps.html");
        write_heatmaps_html(&reports, &out)?;
        rendered.push(out);
    }
    Ok(rendered)
}

fn collect(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let direct = dir.join("reports.jsonl");
    if direct.is_file() {
        out.push(direct);
    }
    if depth >= 2 {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, depth + 1, out)?;
        }
    }
    Ok(())
}
