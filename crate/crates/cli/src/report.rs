//! `report.json` and `report.md`.

use std::fmt::Write as _;
use std::path::Path;

use guided_inpaint_core::eval::RestorationReport;

use crate::error::CliResult;
use crate::io::write_atomic;

fn fmt_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".into()
    } else {
        format!("{db:.2}dB")
    }
}

/// One row per method with corpus means; L1 and L2 as percentages.
pub fn markdown(reports: &[RestorationReport]) -> String {
    let mut s = String::new();
    if let Some(r) = reports.first() {
        let _ = writeln!(s, "Restoration metrics over the {:?} region, config {}.\n", r.region, r.config_hash);
    }
    s.push_str("| Method | Mean L1 | Mean L2 | PSNR | Examples |\n|---|---|---|---|---|\n");
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.2}% | {:.2}% | {} | {} |",
            r.method.label(),
            100.0 * r.mean.l1,
            100.0 * r.mean.l2,
            fmt_psnr(r.mean.psnr),
            r.examples.len()
        );
    }
    s
}

pub fn write_reports(dir: &Path, reports: &[RestorationReport]) -> CliResult<()> {
    let json = serde_json::to_string_pretty(reports).expect("report serializes");
    write_atomic(&dir.join("report.json"), json.as_bytes())?;
    write_atomic(&dir.join("report.md"), markdown(reports).as_bytes())
}
