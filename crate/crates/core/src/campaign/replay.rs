//! Re-executing a recorded campaign and checking it against its files.

use std::fs;
use std::path::Path;

use crate::campaign::{load_runset, Session, FAULT_FILE, RESULTS_DIR, RUNSET_FILE, SCENARIO_FILE};
use crate::dataset::DatasetHandle;
use crate::error::Result;
use crate::fault_gen::load_fault_matrix;
use crate::model::Model;
use crate::scenario::{parse_scenario, ScenarioConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub records_checked: usize,
    pub files_checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn first_differing_line(a: &[u8], b: &[u8]) -> usize {
    let mut line = 1;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return line;
        }
        if *x == b'\n' {
            line += 1;
        }
    }
    line
}

/// Re-runs every injection of `fault_file` and compares the outcome with
/// `runset_file` record by record and, when `results_dir` is given, with
/// the stored result files byte by byte. A fault matrix that does not
/// belong to `cfg` and `model` is refused with [`Error::Mismatch`].
///
/// [`Error::Mismatch`]: crate::Error::Mismatch
pub fn replay(
    fault_file: impl AsRef<Path>,
    runset_file: impl AsRef<Path>,
    model: &Model,
    ds: &DatasetHandle,
    cfg: &ScenarioConfig,
    results_dir: Option<&Path>,
    threads: usize,
) -> Result<ReplayReport> {
    let matrix = load_fault_matrix(fault_file)?;
    let mut cfg = cfg.clone();
    cfg.seed = matrix.seed;
    let mut session = Session::with_faults(model.clone(), ds.clone(), cfg, matrix)?;
    session.set_threads(threads)?;
    let stored_resil = results_dir.filter(|d| d.join("resil.csv").exists() || d.join("resil.json").exists());
    if stored_resil.is_some() {
        session.enable_mitigation()?;
    }
    let run = session.run()?;

    let mut report = ReplayReport::default();
    match load_runset(runset_file) {
        Err(e) => report.mismatches.push(format!("runset unreadable: {e}")),
        Ok(stored) => {
            if stored.len() != run.records().len() {
                report
                    .mismatches
                    .push(format!("runset holds {} records, replay applied {}", stored.len(), run.records().len()));
            }
            for (i, (s, r)) in stored.iter().zip(run.records()).enumerate() {
                if let Some(field) = s.first_difference(r) {
                    report.mismatches.push(format!(
                        "record {i} (epoch {}, image {}, column {}): {field} differs",
                        r.epoch, r.image_id, r.fault_column
                    ));
                }
            }
            report.records_checked = stored.len().min(run.records().len());
        }
    }

    if let Some(dir) = results_dir {
        for (rel, bytes) in run.result_files()? {
            let name = rel.strip_prefix(&format!("{RESULTS_DIR}/")).unwrap_or(&rel);
            let path = dir.join(name);
            match fs::read(&path) {
                Err(e) => report.mismatches.push(format!("{}: {e}", path.display())),
                Ok(stored) if stored != bytes => report.mismatches.push(format!(
                    "{}: differs from replay at line {}",
                    path.display(),
                    first_differing_line(&stored, &bytes)
                )),
                Ok(_) => {}
            }
            report.files_checked += 1;
        }
    }
    Ok(report)
}

/// [`replay`] for a campaign output directory, reading the scenario from
/// its meta set.
pub fn replay_dir(run_dir: impl AsRef<Path>, model: &Model, ds: &DatasetHandle, threads: usize) -> Result<ReplayReport> {
    let dir = run_dir.as_ref();
    let cfg = parse_scenario(dir.join(SCENARIO_FILE))?;
    replay(
        dir.join(FAULT_FILE),
        dir.join(RUNSET_FILE),
        model,
        ds,
        &cfg,
        Some(&dir.join(RESULTS_DIR)),
        threads,
    )
}
