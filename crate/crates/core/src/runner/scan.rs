//! Answer-change rate across a ladder of backends.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{BackendsConfig, RunConfig};
use super::{run_baseline, Baseline, RunError, RunHooks};
use crate::metrics::{answer_change_rate, bootstrap_ratio_ci, change_units};
use crate::tasks::QuestionKind;

pub const SCAN_FILE: &str = "scan.csv";
pub const SCAN_COLUMNS: [&str; 9] =
    ["backend", "task", "rate", "n", "ci_low", "ci_high", "abstain_rate", "status", "run_id"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RungStatus {
    Ok,
    /// Too many integer answers abstained for the rate to be meaningful.
    Excluded,
    /// The rung failed; no rate is available.
    Missing,
}

impl RungStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RungStatus::Ok => "ok",
            RungStatus::Excluded => "excluded",
            RungStatus::Missing => "missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub backend: String,
    pub task: String,
    pub rate: Option<f64>,
    pub n: usize,
    pub ci: Option<(f64, f64)>,
    pub abstain_rate: Option<f64>,
    pub status: RungStatus,
    pub run_id: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub path: PathBuf,
    pub rows: Vec<ScanRow>,
}

/// Runs a baseline per rung and tabulates the change rate per task.
/// Rungs that fail on the backend side are reported as missing.
pub fn run_scan(cfg: &RunConfig, hooks: &RunHooks) -> Result<ScanOutcome, RunError> {
    cfg.validate()?;
    let scan = cfg.scan.as_ref().ok_or_else(|| RunError::Config("no [scan] section configured".into()))?;
    let base_id = cfg.run_id.clone().unwrap_or_else(|| "scan".to_string());
    let tasks = cfg.load_tasks()?;
    let mut rows = Vec::new();
    for (i, rung) in scan.backends.iter().enumerate() {
        let backend = rung.resolve()?;
        let mut rung_cfg = cfg.clone();
        rung_cfg.run_id = Some(format!("{base_id}-scan-{i}"));
        rung_cfg.backends = BackendsConfig { cot: rung.clone(), mistake: None, paraphrase: None };
        rung_cfg.scan = None;
        let run_id = rung_cfg.run_id.clone().unwrap_or_default();
        let result = run_baseline(&rung_cfg, hooks);
        match result {
            Ok(id) => {
                let (base, _) = Baseline::load(&cfg.out_dir.join(&id), false)?;
                for (task, _, _) in &tasks {
                    rows.push(rung_row(&base, &backend.name, task, &id, scan.abstain_threshold, cfg.report.bootstrap_resamples, cfg.seed)?);
                }
            }
            Err(RunError::Backend(msg)) => {
                log::warn!("scan rung {} failed: {msg}", backend.name);
                for (task, _, _) in &tasks {
                    rows.push(ScanRow {
                        backend: backend.name.clone(),
                        task: task.clone(),
                        rate: None,
                        n: 0,
                        ci: None,
                        abstain_rate: None,
                        status: RungStatus::Missing,
                        run_id: run_id.clone(),
                        error: Some(msg.clone()),
                    });
                }
            }
            Err(e) => return Err(e),
        }
    }
    let dir = cfg.out_dir.join(&base_id);
    std::fs::create_dir_all(&dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(SCAN_FILE);
    write_scan(&path, &rows)?;
    Ok(ScanOutcome { path, rows })
}

fn rung_row(
    base: &Baseline,
    backend: &str,
    task: &str,
    run_id: &str,
    threshold: f64,
    resamples: usize,
    seed: u64,
) -> Result<ScanRow, RunError> {
    let no_cot: Vec<_> = base.no_cot.iter().filter(|r| r.task == task).cloned().collect();
    let samples: Vec<_> = base.samples.iter().filter(|s| s.task == task).cloned().collect();
    let integer = base.questions.iter().filter(|q| q.task == task).all(|q| q.kind == QuestionKind::FreeInteger);
    let rate = answer_change_rate(&no_cot, &samples).map_err(|e| RunError::Integrity(e.to_string()))?;
    let ok: Vec<_> = samples.iter().filter(|s| !s.failed()).collect();
    let answers = ok.len() + no_cot.len();
    let abstains = ok.iter().filter(|s| s.answer.is_abstain()).count() + no_cot.iter().filter(|r| r.answer.is_abstain()).count();
    let abstain_rate = (answers > 0).then(|| abstains as f64 / answers as f64);
    let status = match abstain_rate {
        Some(a) if integer && a > threshold => RungStatus::Excluded,
        _ => RungStatus::Ok,
    };
    Ok(ScanRow {
        backend: backend.to_string(),
        task: task.to_string(),
        rate: rate.rate,
        n: rate.n,
        ci: bootstrap_ratio_ci(&change_units(&no_cot, &samples), resamples, seed, 0.95),
        abstain_rate,
        status,
        run_id: run_id.to_string(),
        error: None,
    })
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_scan(path: &Path, rows: &[ScanRow]) -> Result<(), RunError> {
    let io = |e: csv::Error| RunError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(SCAN_COLUMNS).map_err(io)?;
    for r in rows {
        w.write_record([
            r.backend.clone(),
            r.task.clone(),
            num(r.rate),
            r.n.to_string(),
            num(r.ci.map(|c| c.0)),
            num(r.ci.map(|c| c.1)),
            num(r.abstain_rate),
            r.status.as_str().to_string(),
            r.run_id.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| RunError::Io(e.to_string()))
}
