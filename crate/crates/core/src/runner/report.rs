//! Report emission from a run directory's records and manifest alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::records::read_lenient;
use super::{intervention_file, Baseline, RunError};
use crate::interventions::{InterventionKind, InterventionRecord};
use crate::metrics::{Bootstrap, FaithfulnessReport};

pub const REPORT_DIR: &str = "report";
pub const REPORT_COLUMNS: [&str; 8] =
    ["task", "aoc_early", "aoc_mistakes", "acc_no_cot", "acc_cot", "acc_delta", "change_rate", "iid_baseline"];

/// Published values for orientation only, from a far larger model.
/// Columns: task, aoc_early, aoc_mistakes, acc_no_cot, acc_cot, acc_delta.
pub const REFERENCE_VALUES: [(&str, f64, f64, f64, f64, f64); 2] =
    [("AQuA", 0.44, 0.52, 28.0, 43.0, 15.32), ("ARC (Easy)", 0.02, 0.07, 96.0, 96.0, 0.77)];

#[derive(Debug, Clone, Serialize)]
pub struct ReportFile {
    pub run_id: String,
    pub manifest_hash: String,
    pub complete: bool,
    pub notices: Vec<String>,
    pub reports: Vec<FaithfulnessReport>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub dir: PathBuf,
    pub complete: bool,
    pub notices: Vec<String>,
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let io = |e: csv::Error| RunError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| RunError::Io(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    std::fs::write(path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

/// Computes every report for the run and writes them under `report/`.
/// Incomplete runs produce a partial report with coverage notices.
pub fn emit_report(dir: &Path) -> Result<ReportOutcome, RunError> {
    let (base, baseline_complete) = Baseline::load(dir, true)?;
    let manifest = &base.manifest;
    let mut notices = Vec::new();
    if !baseline_complete {
        notices.push("baseline collection is incomplete; figures cover the records written so far".to_string());
    }
    let mut by_kind: BTreeMap<InterventionKind, Vec<InterventionRecord>> = BTreeMap::new();
    for kind in InterventionKind::ALL {
        let path = dir.join(intervention_file(kind));
        if !path.exists() {
            notices.push(format!("{kind}: not run"));
            continue;
        }
        let file = read_lenient::<InterventionRecord>(&path)?;
        if file.header.manifest != manifest.content_hash() {
            return Err(RunError::Integrity(format!("{} belongs to a different manifest", path.display())));
        }
        if !file.sealed {
            notices.push(format!("{kind}: incomplete, {} records so far", file.records.len()));
        }
        by_kind.insert(kind, file.records);
    }
    let bootstrap = (manifest.knobs.bootstrap_resamples > 0)
        .then_some(Bootstrap { resamples: manifest.knobs.bootstrap_resamples, seed: manifest.seed });

    let mut reports = Vec::new();
    for task in &manifest.tasks {
        let t = task.name.as_str();
        let questions: Vec<_> = base.questions.iter().filter(|q| q.task == t).cloned().collect();
        let no_cot: Vec<_> = base.no_cot.iter().filter(|r| r.task == t).cloned().collect();
        let samples: Vec<_> = base.samples.iter().filter(|s| s.task == t).cloned().collect();
        let records: BTreeMap<_, _> =
            by_kind.iter().map(|(k, rs)| (*k, rs.iter().filter(|r| r.task == t).cloned().collect::<Vec<_>>())).collect();
        let report =
            FaithfulnessReport::compute(t, &manifest.backends.cot.name, &questions, &no_cot, &samples, &records, bootstrap)
                .map_err(|e| RunError::Integrity(format!("task {t}: {e}")))?;
        reports.push(report);
    }

    let out = dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out).map_err(|e| RunError::Io(e.to_string()))?;
    let complete = notices.is_empty();
    write_tables(&out, &reports)?;
    let file = ReportFile {
        run_id: manifest.run_id.clone(),
        manifest_hash: manifest.content_hash(),
        complete,
        notices: notices.clone(),
        reports,
    };
    let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
    json.push('\n');
    write_text(&out.join("report.json"), &json)?;
    write_text(&out.join("summary.md"), &summary(&file, manifest))?;
    Ok(ReportOutcome { dir: out, complete, notices })
}

fn write_tables(out: &Path, reports: &[FaithfulnessReport]) -> Result<(), RunError> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.task.clone(),
                num(r.aoc_early.as_ref().and_then(|a| a.overall)),
                num(r.aoc_mistakes.as_ref().and_then(|a| a.overall)),
                num(r.accuracy.acc_no_cot),
                num(r.accuracy.acc_cot),
                num(r.accuracy.delta),
                num(r.change_rate.rate),
                num(r.iid_baseline.mean),
            ]
        })
        .collect();
    write_csv(&out.join("report.csv"), &REPORT_COLUMNS, &rows)?;

    let mut curves = Vec::new();
    let mut aoc = Vec::new();
    let mut filler = Vec::new();
    for r in reports {
        for c in &r.curves {
            for p in &c.points {
                curves.push(vec![
                    r.task.clone(),
                    c.kind.to_string(),
                    c.cot_length.to_string(),
                    p.depth.to_string(),
                    num(Some(p.fraction)),
                    p.n.to_string(),
                ]);
            }
        }
        for a in [&r.aoc_early, &r.aoc_mistakes].into_iter().flatten() {
            for (len, v) in &a.per_length {
                aoc.push(vec![r.task.clone(), a.kind.to_string(), len.to_string(), num(Some(*v)), num(a.weights.get(len).copied())]);
            }
            aoc.push(vec![r.task.clone(), a.kind.to_string(), "all".into(), num(a.overall), num(Some(1.0))]);
        }
        for p in &r.filler_series {
            filler.push(vec![
                r.task.clone(),
                p.n_tokens.to_string(),
                num(Some(p.percentile)),
                num(p.accuracy),
                num(Some(p.same_as_no_cot)),
                p.n.to_string(),
            ]);
        }
    }
    write_csv(&out.join("curves.csv"), &["task", "kind", "L", "depth", "fraction", "n"], &curves)?;
    write_csv(&out.join("aoc.csv"), &["task", "kind", "L", "aoc", "weight"], &aoc)?;
    write_csv(&out.join("filler.csv"), &["task", "n_tokens", "percentile", "accuracy", "same_as_no_cot", "n"], &filler)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn summary(file: &ReportFile, manifest: &super::manifest::RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run {}\n", file.run_id);
    let _ = writeln!(s, "- CoT backend: `{}`", manifest.backends.cot.name);
    let _ = writeln!(s, "- Mistake backend: `{}`", manifest.backends.mistake.name);
    let _ = writeln!(s, "- Paraphrase backend: `{}`", manifest.backends.paraphrase.name);
    let _ = writeln!(s, "- Samples per question: {}", manifest.samples_per_question);
    let _ = writeln!(s, "- Manifest hash: `{}`\n", file.manifest_hash);
    if !file.notices.is_empty() {
        let _ = writeln!(s, "## Coverage\n\nThis report is partial:\n");
        for n in &file.notices {
            let _ = writeln!(s, "- {n}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "## Results\n");
    let _ = writeln!(
        s,
        "| task | questions | samples | AOC early | AOC mistakes | acc no CoT (%) | acc CoT (%) | delta | change rate | 95% CI | IID baseline | abstain CoT / no CoT |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|---|");
    for r in &file.reports {
        let ci = r.change_rate_ci.map(|(lo, hi)| format!("[{lo:.3}, {hi:.3}]")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} / {} |",
            r.task,
            r.n_questions,
            r.n_samples,
            cell(r.aoc_early.as_ref().and_then(|a| a.overall), 3),
            cell(r.aoc_mistakes.as_ref().and_then(|a| a.overall), 3),
            cell(r.accuracy.acc_no_cot, 1),
            cell(r.accuracy.acc_cot, 1),
            cell(r.accuracy.delta, 2),
            cell(r.change_rate.rate, 3),
            ci,
            cell(r.iid_baseline.mean, 3),
            r.n_abstain_cot,
            r.n_abstain_no_cot,
        );
    }
    let _ = writeln!(s, "\n## Reference values (not targets)\n");
    let _ = writeln!(
        s,
        "Published figures for two tasks measured on a much larger proprietary model. They are shown for orientation only; this harness does not try to reproduce them.\n"
    );
    let _ = writeln!(s, "| task | AOC early | AOC mistakes | acc no CoT (%) | acc CoT (%) | delta |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for (task, early, mistakes, a0, a1, d) in REFERENCE_VALUES {
        let _ = writeln!(s, "| {task} | {early:.2} | {mistakes:.2} | {a0:.0} | {a1:.0} | {d:.2} |");
    }
    let _ = writeln!(s, "\n## Conventions\n");
    let k = &manifest.knobs;
    for (name, v) in [
        ("AOC", &k.aoc_rule),
        ("Filler percentile", &k.percentile_rule),
        ("Ties", &k.tie_break),
        ("Abstains", &k.abstain_policy),
        ("Filler grid", &k.filler_cap),
        ("Confidence intervals", &k.bootstrap),
    ] {
        let _ = writeln!(s, "- {name}: {v}");
    }
    s
}
