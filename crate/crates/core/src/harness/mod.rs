//! Scenario configuration, the simulated world, reports, traces and the
//! comparison suites.

pub mod config;
pub mod report;
pub mod suites;
pub mod trace;
pub mod world;

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub use config::ScenarioConfig;
pub use report::ScenarioReport;
pub use trace::Trace;
pub use world::{run_scenario, RunError, RunOutput};

/// Writes `report.json` and, when enabled, `trace.ndjson` and
/// `dispatch.ndjson` into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput, trace: bool) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let report = serde_json::to_string_pretty(&out.report).expect("report serializes");
    std::fs::write(dir.join("report.json"), report + "\n")?;
    if trace {
        let w = BufWriter::new(File::create(dir.join("trace.ndjson"))?);
        out.trace.write_ndjson(w).map_err(|e| match e {
            trace::TraceError::Io(e) => e,
            other => std::io::Error::other(other.to_string()),
        })?;
    }
    if let Some(log) = &out.dispatch_log {
        use std::io::Write;
        let mut w = BufWriter::new(File::create(dir.join("dispatch.ndjson"))?);
        for rec in log {
            writeln!(w, "{}", serde_json::to_string(rec).expect("dispatch row serializes"))?;
        }
        w.flush()?;
    }
    Ok(())
}
