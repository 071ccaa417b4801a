//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::gateway::{BackendDescriptor, SamplingParams};
use crate::interventions::MistakeMode;
use crate::pipeline::DEFAULT_SAMPLES_PER_QUESTION;
use crate::segment::RuleSegmenter;
use crate::tasks::{generate_addition, load_tasks, AdditionSpec, Question};

/// A backend given either as `scripted:<id>` shorthand or a full table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackendSpec {
    Flag(String),
    Full(BackendDescriptor),
}

impl BackendSpec {
    pub fn resolve(&self) -> Result<BackendDescriptor, RunError> {
        let b = match self {
            BackendSpec::Flag(flag) => BackendDescriptor::from_flag(flag).map_err(|e| RunError::Config(e.to_string()))?,
            BackendSpec::Full(b) => b.clone(),
        };
        b.validate().map_err(|e| RunError::Config(e.to_string()))?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub cot: BackendSpec,
    /// Defaults to the CoT backend.
    #[serde(default)]
    pub mistake: Option<BackendSpec>,
    /// Defaults to the CoT backend.
    #[serde(default)]
    pub paraphrase: Option<BackendSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSource {
    /// Task name; required for task files, derived for addition specs.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub file: Option<PathBuf>,
    /// Addition spec such as `operands=8,digits=2,count=200,seed=7`.
    #[serde(default)]
    pub addition: Option<String>,
}

impl TaskSource {
    pub fn describe(&self) -> String {
        match (&self.file, &self.addition) {
            (Some(f), _) => format!("file:{}", f.display()),
            (_, Some(a)) => format!("addition:{a}"),
            _ => "none".into(),
        }
    }

    /// Loads the questions; relative files resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(String, Vec<Question>), RunError> {
        let cfg = |e: crate::tasks::TaskError| RunError::Config(e.to_string());
        match (&self.file, &self.addition) {
            (Some(file), None) => {
                let name = self.name.clone().ok_or_else(|| RunError::Config("task file needs a name".into()))?;
                let path = if file.is_absolute() { file.clone() } else { base.join(file) };
                Ok((name.clone(), load_tasks(&path, &name).map_err(cfg)?))
            }
            (None, Some(spec)) => {
                let spec: AdditionSpec = spec.parse().map_err(cfg)?;
                let name = spec.task_name();
                if self.name.as_ref().is_some_and(|n| *n != name) {
                    return Err(RunError::Config(format!("addition task is always named {name}")));
                }
                Ok((name, generate_addition(&spec).map_err(cfg)?))
            }
            _ => Err(RunError::Config("each task needs exactly one of `file` or `addition`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterventionConfig {
    pub mistake_mode: MistakeMode,
    /// Also paraphrase the full chain of thought.
    pub paraphrase_full: bool,
    /// Only the first `n` samples of each question are perturbed.
    pub max_samples: Option<u32>,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self { mistake_mode: MistakeMode::Exhaustive, paraphrase_full: false, max_samples: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Bootstrap resamples for change-rate intervals; 0 disables them.
    pub bootstrap_resamples: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { bootstrap_resamples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Capability ladder, smallest first.
    pub backends: Vec<BackendSpec>,
    /// Rungs abstaining on more than this fraction of integer answers are
    /// marked excluded for that task.
    #[serde(default = "default_abstain_threshold")]
    pub abstain_threshold: f64,
}

fn default_abstain_threshold() -> f64 {
    0.2
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    /// Replaces the default abbreviation guard list.
    pub abbreviations: Option<Vec<String>>,
}

impl SegmenterConfig {
    pub fn build(&self) -> RuleSegmenter {
        match &self.abbreviations {
            Some(list) => RuleSegmenter::with_abbreviations(list),
            None => RuleSegmenter::default(),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_samples() -> u32 {
    DEFAULT_SAMPLES_PER_QUESTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Overrides `max_parallel` on every backend.
    #[serde(default)]
    pub parallelism: Option<usize>,
    #[serde(default = "default_samples")]
    pub samples_per_question: u32,
    #[serde(default)]
    pub max_questions: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Fixed manifest timestamp; the current time is used when unset.
    #[serde(default)]
    pub created_at: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskSource>,
    pub backends: BackendsConfig,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    #[serde(default)]
    pub interventions: InterventionConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub scan: Option<ScanConfig>,
    /// Directory relative task files resolve against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_id: Option<String>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub backend: Option<String>,
    pub parallelism: Option<usize>,
    pub samples_per_question: Option<u32>,
    pub max_questions: Option<usize>,
    pub task_file: Option<PathBuf>,
    pub task_name: Option<String>,
    pub addition: Vec<String>,
}

/// Resolved backends for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backends {
    pub cot: BackendDescriptor,
    pub mistake: BackendDescriptor,
    pub paraphrase: BackendDescriptor,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, RunError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// A configuration with only a CoT backend, for flag-driven runs.
    pub fn minimal(cot: BackendSpec) -> Self {
        Self {
            run_id: None,
            out_dir: default_out_dir(),
            cache_dir: None,
            parallelism: None,
            samples_per_question: DEFAULT_SAMPLES_PER_QUESTION,
            max_questions: None,
            seed: 0,
            created_at: None,
            tasks: Vec::new(),
            backends: BackendsConfig { cot, mistake: None, paraphrase: None },
            sampling: SamplingParams::default(),
            segmenter: SegmenterConfig::default(),
            interventions: InterventionConfig::default(),
            report: ReportConfig::default(),
            scan: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), RunError> {
        if let Some(v) = &o.run_id {
            self.run_id = Some(v.clone());
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = &o.cache_dir {
            self.cache_dir = Some(v.clone());
        }
        if let Some(v) = &o.backend {
            self.backends.cot = BackendSpec::Flag(v.clone());
        }
        if let Some(v) = o.parallelism {
            self.parallelism = Some(v);
        }
        if let Some(v) = o.samples_per_question {
            self.samples_per_question = v;
        }
        if let Some(v) = o.max_questions {
            self.max_questions = Some(v);
        }
        match (&o.task_file, &o.task_name) {
            (Some(file), Some(name)) => {
                let file = std::env::current_dir().map(|d| d.join(file)).unwrap_or_else(|_| file.clone());
                self.tasks.push(TaskSource { name: Some(name.clone()), file: Some(file), addition: None });
            }
            (None, None) => {}
            _ => return Err(RunError::Config("--task-file and --task-name go together".into())),
        }
        for spec in &o.addition {
            self.tasks.push(TaskSource { name: None, file: None, addition: Some(spec.clone()) });
        }
        Ok(())
    }

    pub fn backends(&self) -> Result<Backends, RunError> {
        let mut cot = self.backends.cot.resolve()?;
        let mut mistake = match &self.backends.mistake {
            Some(b) => b.resolve()?,
            None => cot.clone(),
        };
        let mut paraphrase = match &self.backends.paraphrase {
            Some(b) => b.resolve()?,
            None => cot.clone(),
        };
        if let Some(p) = self.parallelism {
            for b in [&mut cot, &mut mistake, &mut paraphrase] {
                b.limits.max_parallel = p;
            }
        }
        Ok(Backends { cot, mistake, paraphrase })
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.tasks.is_empty() {
            return Err(RunError::Config("no tasks configured".into()));
        }
        if self.samples_per_question == 0 {
            return Err(RunError::Config("samples_per_question must be at least 1".into()));
        }
        if self.parallelism == Some(0) {
            return Err(RunError::Config("parallelism must be positive".into()));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return Err(RunError::Config(format!("run id '{id}' must be non-empty [A-Za-z0-9._-]")));
            }
        }
        self.sampling.validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.backends()?;
        if let Some(scan) = &self.scan {
            if scan.backends.len() < 2 {
                return Err(RunError::Config("a scan needs at least two backends".into()));
            }
            if !(0.0..=1.0).contains(&scan.abstain_threshold) {
                return Err(RunError::Config("abstain_threshold must be in [0, 1]".into()));
            }
            for b in &scan.backends {
                b.resolve()?;
            }
        }
        Ok(())
    }

    /// Questions per task in configuration order, truncated to `max_questions`.
    pub fn load_tasks(&self) -> Result<Vec<(String, String, Vec<Question>)>, RunError> {
        let mut out: Vec<(String, String, Vec<Question>)> = Vec::new();
        for source in &self.tasks {
            let (name, mut questions) = source.load(&self.base_dir)?;
            if out.iter().any(|(n, _, _)| *n == name) {
                return Err(RunError::Config(format!("task {name} configured twice")));
            }
            if let Some(max) = self.max_questions {
                questions.truncate(max);
            }
            if questions.is_empty() {
                return Err(RunError::Config(format!("task {name} has no questions")));
            }
            out.push((name, source.describe(), questions));
        }
        Ok(out)
    }
}
