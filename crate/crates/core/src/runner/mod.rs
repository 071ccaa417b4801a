//! Experiment orchestration: baseline collection, interventions, scans and
//! reports, persisted under `<out_dir>/<run_id>/`.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json          settings, sealed on first start
//! questions.jsonl        every question in the run
//! no_cot.jsonl           one no-CoT answer per question
//! samples.jsonl          sampled chains of thought
//! <kind>.jsonl           one file per intervention
//! report/                emitted tables and summary
//! ```
//!
//! Record files are written by one thread in a fixed order, so an
//! interrupted run resumed with the same settings produces the same bytes.

pub mod config;
pub mod manifest;
pub mod records;
pub mod report;
pub mod scan;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, TryLockError};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;

use crate::gateway::{AnswerKey, Gateway};
use crate::interventions::{
    filler_plan, mistake_plan, paraphrase_plan, run_add_mistake, run_early_answering, run_filler, run_paraphrase,
    Context, InterventionKind, InterventionRecord,
};
use crate::pipeline::{check_failures, collect_sample, no_cot_answer, NoCotRecord, PipelineError, ReasoningSample};
use crate::prompts::PromptError;
use crate::segment::{RuleSegmenter, Segmenter};
use crate::tasks::Question;
use config::{Backends, RunConfig};
use manifest::RunManifest;
use records::{read_records, Filler, Header, Opened, RecordWriter, SCHEMA_VERSION};

pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const NO_COT_FILE: &str = "no_cot.jsonl";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const LOCK_FILE: &str = ".lock";
/// Questions processed per parallel batch.
const CHUNK: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("integrity failure: {0}")]
    Integrity(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("stopped before completion")]
    Interrupted,
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Backend(_) => 3,
            RunError::Integrity(_) => 4,
            RunError::Io(_) | RunError::Interrupted => 1,
        }
    }
}

impl From<PipelineError> for RunError {
    fn from(e: PipelineError) -> Self {
        match &e {
            _ if e.is_backend_failure() => RunError::Backend(e.to_string()),
            PipelineError::Gateway(crate::gateway::GatewayError::Cache(io)) => RunError::Io(io.to_string()),
            PipelineError::Gateway(crate::gateway::GatewayError::Distribution(_)) => RunError::Backend(e.to_string()),
            _ => RunError::Config(e.to_string()),
        }
    }
}

impl From<PromptError> for RunError {
    fn from(e: PromptError) -> Self {
        RunError::Config(e.to_string())
    }
}

/// Test hooks for exercising resume.
#[derive(Debug, Clone, Default)]
pub struct RunHooks {
    /// Stop with [`RunError::Interrupted`] after appending this many records.
    pub stop_after: Option<usize>,
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub cache_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

/// Advisory lock held for the lifetime of one orchestrator.
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(LOCK_FILE);
        let file = File::create(&path).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(TryLockError::WouldBlock) => {
                Err(RunError::Config(format!("{} is in use by another process", dir.display())))
            }
            Err(TryLockError::Error(e)) => Err(RunError::Io(e.to_string())),
        }
    }
}

fn header(manifest: &RunManifest, kind: &str) -> Header {
    Header {
        schema: SCHEMA_VERSION,
        kind: kind.to_string(),
        run_id: manifest.run_id.clone(),
        manifest: manifest.content_hash(),
    }
}

pub fn intervention_file(kind: InterventionKind) -> String {
    format!("{kind}.jsonl")
}

type SampleKey = (String, String, u32);
type RecordKey = (String, String, u32, usize);

fn sample_key(s: &ReasoningSample) -> SampleKey {
    (s.task.clone(), s.question_id.clone(), s.sample_index)
}

fn record_key(r: &InterventionRecord) -> RecordKey {
    (r.task.clone(), r.question_id.clone(), r.sample_index, r.param)
}

fn qkey(task: &str, id: &str) -> (String, String) {
    (task.to_string(), id.to_string())
}

/// Everything needed to execute against a prepared run directory.
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub questions: Vec<Question>,
    pub backends: Backends,
    pub segmenter: RuleSegmenter,
}

/// Validates the configuration and derives the run id and directory
/// without touching any backend.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared, RunError> {
    cfg.validate()?;
    let tasks = cfg.load_tasks()?;
    let backends = cfg.backends()?;
    let segmenter = cfg.segmenter.build();
    let mut manifest = RunManifest::build(cfg, &backends, &tasks, &segmenter);
    manifest.run_id = match &cfg.run_id {
        Some(id) => id.clone(),
        None => format!("run-{}", &manifest.content_hash()[..12]),
    };
    let dir = cfg.out_dir.join(&manifest.run_id);
    let questions = tasks.into_iter().flat_map(|(_, _, qs)| qs).collect();
    Ok(Prepared { dir, manifest, questions, backends, segmenter })
}

fn gateway(cache_dir: Option<PathBuf>, questions: &[Question]) -> Gateway {
    Gateway::new(cache_dir).with_answer_key(AnswerKey::from_questions(questions))
}

fn open<T: DeserializeOwned>(path: &Path, header: &Header) -> Result<Opened<T>, RunError> {
    RecordWriter::open(path, header)
}

/// Collects baseline samples and no-CoT answers; resumes a partial run.
pub fn run_baseline(cfg: &RunConfig, hooks: &RunHooks) -> Result<String, RunError> {
    let p = prepare(cfg)?;
    std::fs::create_dir_all(&p.dir).map_err(|e| RunError::Io(format!("{}: {e}", p.dir.display())))?;
    let _lock = RunLock::acquire(&p.dir)?;
    let manifest = p.manifest.seal(&p.dir)?;
    let gw = gateway(cfg.cache_dir.clone(), &p.questions);
    let mut budget = hooks.stop_after;

    write_questions(&p.dir, &manifest, &p.questions, &mut budget)?;

    if let Opened::Open(mut writer, existing) = open::<NoCotRecord>(&p.dir.join(NO_COT_FILE), &header(&manifest, "no_cot"))? {
        let done = existing.iter().map(|r| qkey(&r.task, &r.question_id)).collect();
        let mut filler = Filler { writer: &mut writer, done, budget: &mut budget };
        for chunk in p.questions.chunks(CHUNK) {
            let todo: Vec<&Question> = chunk.iter().filter(|q| !filler.done.contains(&qkey(&q.task, &q.id))).collect();
            let answers: Vec<NoCotRecord> =
                todo.par_iter().map(|q| no_cot_answer(&gw, q, &p.backends.cot)).collect::<Result<_, _>>()?;
            for r in &answers {
                filler.push(qkey(&r.task, &r.question_id), r)?;
            }
        }
        writer.seal()?;
    }

    let n = manifest.samples_per_question;
    if let Opened::Open(mut writer, existing) = open::<ReasoningSample>(&p.dir.join(SAMPLES_FILE), &header(&manifest, "samples"))? {
        let done: HashSet<SampleKey> = existing.iter().map(sample_key).collect();
        let mut filler = Filler { writer: &mut writer, done, budget: &mut budget };
        for chunk in p.questions.chunks(CHUNK) {
            let todo: Vec<(&Question, u32)> = chunk
                .iter()
                .flat_map(|q| (0..n).map(move |i| (q, i)))
                .filter(|(q, i)| !filler.done.contains(&(q.task.clone(), q.id.clone(), *i)))
                .collect();
            let fresh: Vec<ReasoningSample> = todo
                .par_iter()
                .map(|(q, i)| collect_sample(&gw, q, *i, &manifest.sampling, &p.backends.cot, &p.segmenter))
                .collect::<Result<_, _>>()?;
            let mut fresh: HashMap<SampleKey, ReasoningSample> = fresh.into_iter().map(|s| (sample_key(&s), s)).collect();
            for q in chunk {
                let all: Vec<ReasoningSample> = (0..n)
                    .filter_map(|i| {
                        let k = (q.task.clone(), q.id.clone(), i);
                        fresh.get(&k).cloned().or_else(|| existing.iter().find(|s| sample_key(s) == k).cloned())
                    })
                    .collect();
                check_failures(&q.id, &all)?;
                for i in 0..n {
                    if let Some(s) = fresh.remove(&(q.task.clone(), q.id.clone(), i)) {
                        filler.push(sample_key(&s), &s)?;
                    }
                }
            }
        }
        writer.seal()?;
    }
    Ok(manifest.run_id)
}

fn write_questions(
    dir: &Path,
    manifest: &RunManifest,
    questions: &[Question],
    budget: &mut Option<usize>,
) -> Result<(), RunError> {
    let path = dir.join(QUESTIONS_FILE);
    match open::<Question>(&path, &header(manifest, "questions"))? {
        Opened::Sealed(existing) => {
            if existing != questions {
                return Err(RunError::Integrity(format!("{} does not match the configured tasks", path.display())));
            }
        }
        Opened::Open(mut writer, existing) => {
            let done = existing.iter().map(|q| qkey(&q.task, &q.id)).collect();
            let mut filler = Filler { writer: &mut writer, done, budget };
            for q in questions {
                filler.push(qkey(&q.task, &q.id), q)?;
            }
            writer.seal()?;
        }
    }
    Ok(())
}

/// Sealed baseline artifacts of a run.
pub struct Baseline {
    pub manifest: RunManifest,
    pub questions: Vec<Question>,
    pub no_cot: Vec<NoCotRecord>,
    pub samples: Vec<ReasoningSample>,
}

fn read_sealed<T: DeserializeOwned>(dir: &Path, file: &str, lenient: bool) -> Result<records::RecordFile<T>, RunError> {
    let path = dir.join(file);
    if !path.exists() {
        return Err(RunError::Config(format!("{} is missing; run the baseline first", path.display())));
    }
    if lenient {
        records::read_lenient(&path)
    } else {
        read_records(&path)
    }
}

fn check_header(file: &records::RecordFile<impl Sized>, manifest: &RunManifest, path: &str) -> Result<(), RunError> {
    if file.header.run_id != manifest.run_id || file.header.manifest != manifest.content_hash() {
        return Err(RunError::Integrity(format!("{path} belongs to a different manifest")));
    }
    Ok(())
}

impl Baseline {
    /// Loads the baseline; unsealed files are an error unless `allow_partial`.
    pub fn load(dir: &Path, allow_partial: bool) -> Result<(Self, bool), RunError> {
        let manifest = RunManifest::load(dir)?;
        let questions = read_sealed::<Question>(dir, QUESTIONS_FILE, allow_partial)?;
        let no_cot = read_sealed::<NoCotRecord>(dir, NO_COT_FILE, allow_partial);
        let samples = read_sealed::<ReasoningSample>(dir, SAMPLES_FILE, allow_partial);
        let (no_cot, samples) = match (no_cot, samples) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) if !allow_partial => return Err(e),
            (a, b) => (
                a.unwrap_or(records::RecordFile { header: questions.header.clone(), records: Vec::new(), sealed: false }),
                b.unwrap_or(records::RecordFile { header: questions.header.clone(), records: Vec::new(), sealed: false }),
            ),
        };
        check_header(&questions, &manifest, QUESTIONS_FILE)?;
        if !no_cot.records.is_empty() {
            check_header(&no_cot, &manifest, NO_COT_FILE)?;
        }
        if !samples.records.is_empty() {
            check_header(&samples, &manifest, SAMPLES_FILE)?;
        }
        let complete = questions.sealed && no_cot.sealed && samples.sealed;
        if !complete && !allow_partial {
            return Err(RunError::Config(format!("baseline in {} is incomplete; resume it first", dir.display())));
        }
        Ok((Self { manifest, questions: questions.records, no_cot: no_cot.records, samples: samples.records }, complete))
    }
}

/// Status of one intervention after [`run_interventions`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KindStatus {
    Completed { records: usize },
    AlreadyComplete,
}

fn segmenter_for(manifest: &RunManifest) -> Result<RuleSegmenter, RunError> {
    let seg = match &manifest.segmenter.abbreviations {
        Some(list) => RuleSegmenter::with_abbreviations(list),
        None => RuleSegmenter::default(),
    };
    if seg.id() != manifest.segmenter.id {
        return Err(RunError::Config(format!("segmenter {} is not available in this build", manifest.segmenter.id)));
    }
    Ok(seg)
}

/// Runs the requested interventions over a sealed baseline.
pub fn run_interventions(
    dir: &Path,
    kinds: &[InterventionKind],
    exec: &ExecOptions,
    hooks: &RunHooks,
) -> Result<Vec<(InterventionKind, KindStatus)>, RunError> {
    let (base, _) = Baseline::load(dir, false)?;
    let _lock = RunLock::acquire(dir)?;
    let manifest = &base.manifest;
    let segmenter = segmenter_for(manifest)?;
    let mut backends = manifest.backends.clone();
    if let Some(p) = exec.parallelism {
        for b in [&mut backends.cot, &mut backends.mistake, &mut backends.paraphrase] {
            b.limits.max_parallel = p;
        }
    }
    let gw = gateway(exec.cache_dir.clone(), &base.questions);
    let ctx = Context {
        gateway: &gw,
        cot_backend: &backends.cot,
        mistake_backend: &backends.mistake,
        paraphrase_backend: &backends.paraphrase,
        params: &manifest.sampling,
        segmenter: &segmenter,
    };
    let mut by_question: BTreeMap<(String, String), Vec<&ReasoningSample>> = BTreeMap::new();
    let limit = manifest.interventions.max_samples.unwrap_or(u32::MAX);
    for s in base.samples.iter().filter(|s| !s.failed() && s.sample_index < limit) {
        by_question.entry(qkey(&s.task, &s.question_id)).or_default().push(s);
    }
    let no_cot: HashMap<(String, String), &NoCotRecord> =
        base.no_cot.iter().map(|r| (qkey(&r.task, &r.question_id), r)).collect();

    let mut budget = hooks.stop_after;
    let mut statuses = Vec::new();
    let mut seen = HashSet::new();
    for &kind in kinds {
        if !seen.insert(kind) {
            continue;
        }
        let path = dir.join(intervention_file(kind));
        let (mut writer, existing) = match open::<InterventionRecord>(&path, &header(manifest, kind.as_str()))? {
            Opened::Sealed(_) => {
                log::info!("{kind} already complete for {}", manifest.run_id);
                statuses.push((kind, KindStatus::AlreadyComplete));
                continue;
            }
            Opened::Open(w, existing) => (w, existing),
        };
        let done: HashSet<RecordKey> = existing.iter().map(record_key).collect();
        let mut filler = Filler { writer: &mut writer, done, budget: &mut budget };
        for chunk in base.questions.chunks(CHUNK) {
            let units: Vec<Unit<'_>> = chunk
                .iter()
                .flat_map(|q| {
                    let samples = by_question.get(&qkey(&q.task, &q.id)).cloned().unwrap_or_default();
                    plan_units(kind, q, samples, manifest)
                })
                .filter(|u| u.keys().iter().any(|k| !filler.done.contains(k)))
                .collect();
            let produced: Vec<Vec<InterventionRecord>> = units
                .par_iter()
                .map(|u| u.realize(&ctx, &no_cot))
                .collect::<Result<_, _>>()?;
            for r in produced.iter().flatten() {
                filler.push(record_key(r), r)?;
            }
        }
        let records = writer.count();
        writer.seal()?;
        statuses.push((kind, KindStatus::Completed { records }));
    }
    Ok(statuses)
}

/// One independently computed group of records.
struct Unit<'a> {
    kind: InterventionKind,
    question: &'a Question,
    sample: Option<&'a ReasoningSample>,
    params: Vec<usize>,
}

fn plan_units<'a>(
    kind: InterventionKind,
    q: &'a Question,
    samples: Vec<&'a ReasoningSample>,
    manifest: &RunManifest,
) -> Vec<Unit<'a>> {
    let unit = |s: &'a ReasoningSample, params: Vec<usize>| Unit { kind, question: q, sample: Some(s), params };
    match kind {
        InterventionKind::Filler => {
            if samples.is_empty() {
                return Vec::new();
            }
            let owned: Vec<ReasoningSample> = samples.iter().map(|s| (*s).clone()).collect();
            vec![Unit { kind, question: q, sample: None, params: filler_plan(&owned) }]
        }
        InterventionKind::EarlyAnswering => samples.into_iter().map(|s| unit(s, (0..=s.steps.len()).collect())).collect(),
        InterventionKind::AddMistake => samples
            .into_iter()
            .map(|s| unit(s, mistake_plan(s, manifest.interventions.mistake_mode, manifest.seed)))
            .collect(),
        InterventionKind::Paraphrase => samples
            .into_iter()
            .map(|s| unit(s, paraphrase_plan(s, manifest.interventions.paraphrase_full)))
            .collect(),
    }
}

impl Unit<'_> {
    fn keys(&self) -> Vec<RecordKey> {
        let idx = self.sample.map_or(0, |s| s.sample_index);
        self.params.iter().map(|&p| (self.question.task.clone(), self.question.id.clone(), idx, p)).collect()
    }

    fn realize(
        &self,
        ctx: &Context<'_>,
        no_cot: &HashMap<(String, String), &NoCotRecord>,
    ) -> Result<Vec<InterventionRecord>, RunError> {
        let q = self.question;
        Ok(match (self.kind, self.sample) {
            (InterventionKind::EarlyAnswering, Some(s)) => run_early_answering(ctx, q, s)?,
            (InterventionKind::AddMistake, Some(s)) => {
                self.params.iter().map(|&i| run_add_mistake(ctx, q, s, i)).collect::<Result<_, _>>()?
            }
            (InterventionKind::Paraphrase, Some(s)) => {
                self.params.iter().map(|&k| run_paraphrase(ctx, q, s, k)).collect::<Result<_, _>>()?
            }
            (InterventionKind::Filler, _) => {
                let base = no_cot
                    .get(&qkey(&q.task, &q.id))
                    .ok_or_else(|| RunError::Integrity(format!("no no-CoT answer for {}", q.id)))?;
                run_filler(ctx, q, &self.params, &base.answer)?
            }
            (_, None) => Vec::new(),
        })
    }
}

/// Resolves a run directory from an id and output directory.
pub fn run_dir(out_dir: &Path, run_id: &str) -> PathBuf {
    out_dir.join(run_id)
}

/// Verifies every record file in a run directory against its footer and
/// the manifest. Returns the files checked.
pub fn verify_run(dir: &Path) -> Result<Vec<(String, usize, bool)>, RunError> {
    let manifest = RunManifest::load(dir)?;
    let mut out = Vec::new();
    let mut files = vec![QUESTIONS_FILE.to_string(), NO_COT_FILE.to_string(), SAMPLES_FILE.to_string()];
    files.extend(InterventionKind::ALL.iter().map(|k| intervention_file(*k)));
    for name in files {
        let path = dir.join(&name);
        if !path.exists() {
            continue;
        }
        let f = read_records::<serde_json::Value>(&path)?;
        check_header(&f, &manifest, &name)?;
        out.push((name, f.records.len(), f.sealed));
    }
    Ok(out)
}
