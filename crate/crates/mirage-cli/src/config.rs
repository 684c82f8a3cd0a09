//! TOML run configuration.
//!
//! Every key has a matching command-line flag; flags win. Input paths
//! named by the config must exist at validation time.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use mirage_core::backend::{GenerationBackend, HttpBackend, HttpBackendConfig, MockBackend};
use mirage_core::curriculum::{CurriculumSchedule, PipelineSettings, ScheduleKind};
use mirage_core::injector::{CompletionSettings, TemplateSet};
use mirage_core::lexicon::{load_lexicon, ConflictPolicy, Segmenter, SynonymLexicon};
use mirage_core::{Error, Result};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub top_k: TopK,
    pub paths: Paths,
    pub backend: BackendConfig,
    pub generation: Generation,
    pub injection: Injection,
    pub schedule: Schedule,
    pub run: Run,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(transparent)]
pub struct TopK(pub usize);

impl Default for TopK {
    fn default() -> Self {
        TopK(32)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Synonym lexicon file; required by most subcommands.
    pub lexicon: String,
    /// Guiding templates file; empty selects the built-in set.
    pub templates: String,
    /// Abbreviation stoplist; empty selects the built-in list.
    pub abbreviations: String,
    /// Unannotated samples for `iterate`.
    pub unannotated: String,
    /// Root directory for run outputs.
    pub output_root: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// "mock" or "http".
    pub kind: String,
    pub base_url: String,
    /// Environment variable holding the API key; empty means none.
    pub api_key_env: String,
    pub model_name: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub retry_backoff_ms: u64,
    pub image_field: String,
    pub logprobs_top_k: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        let http = HttpBackendConfig::default();
        BackendConfig {
            kind: "mock".to_string(),
            base_url: http.base_url,
            api_key_env: String::new(),
            model_name: http.model_name,
            timeout_ms: http.timeout_ms,
            max_in_flight: http.max_in_flight,
            max_attempts: http.max_attempts,
            retry_backoff_ms: http.retry_backoff_ms,
            image_field: "image".to_string(),
            logprobs_top_k: http.logprobs_top_k,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Generation {
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for Generation {
    fn default() -> Self {
        Generation {
            max_tokens: 96,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Injection {
    pub rho: f64,
    pub completion_max_tokens: usize,
    pub completion_temperature: f64,
    /// `inject` exits with the backend-failure code when more than this
    /// fraction of samples is lost to backend errors.
    pub max_backend_failure_fraction: f64,
}

impl Default for Injection {
    fn default() -> Self {
        Injection {
            rho: 0.2,
            completion_max_tokens: 48,
            completion_temperature: 0.0,
            max_backend_failure_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub kind: String,
    pub rho_start: f64,
    pub rho_step: f64,
    pub iterations: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            kind: "linear_decreasing".to_string(),
            rho_start: 0.8,
            rho_step: 0.2,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Run {
    pub run_id: String,
    /// Shell command run after each iteration; empty disables it.
    pub hook_command: String,
    pub worker_chunk: usize,
}

impl Default for Run {
    fn default() -> Self {
        Run {
            run_id: String::new(),
            hook_command: String::new(),
            worker_chunk: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        config.validate_paths()?;
        Ok(config)
    }

    fn validate_paths(&self) -> Result<()> {
        for (key, value) in [
            ("paths.lexicon", &self.paths.lexicon),
            ("paths.templates", &self.paths.templates),
            ("paths.abbreviations", &self.paths.abbreviations),
            ("paths.unannotated", &self.paths.unannotated),
        ] {
            if !value.is_empty() && !Path::new(value).exists() {
                return Err(Error::Config(format!(
                    "{key} = {value:?} does not exist"
                )));
            }
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<SynonymLexicon> {
        if self.paths.lexicon.is_empty() {
            return Err(Error::Config(
                "no lexicon configured: set paths.lexicon or pass --lexicon".into(),
            ));
        }
        load_lexicon(&self.paths.lexicon, ConflictPolicy::KeepFirst)
    }

    pub fn templates(&self) -> Result<TemplateSet> {
        if self.paths.templates.is_empty() {
            Ok(TemplateSet::builtin())
        } else {
            TemplateSet::load(&self.paths.templates)
        }
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        if self.paths.abbreviations.is_empty() {
            Ok(Segmenter::default())
        } else {
            Segmenter::from_abbreviation_file(&self.paths.abbreviations)
        }
    }

    pub fn backend(&self) -> Result<Box<dyn GenerationBackend>> {
        match self.backend.kind.as_str() {
            "mock" => Ok(Box::new(MockBackend::demo())),
            "http" => {
                let config = HttpBackendConfig {
                    base_url: self.backend.base_url.clone(),
                    api_key_env: if self.backend.api_key_env.is_empty() {
                        None
                    } else {
                        Some(self.backend.api_key_env.clone())
                    },
                    model_name: self.backend.model_name.clone(),
                    timeout_ms: self.backend.timeout_ms,
                    max_in_flight: self.backend.max_in_flight,
                    max_attempts: self.backend.max_attempts,
                    retry_backoff_ms: self.backend.retry_backoff_ms,
                    image_field: if self.backend.image_field.is_empty() {
                        None
                    } else {
                        Some(self.backend.image_field.clone())
                    },
                    logprobs_top_k: self.backend.logprobs_top_k,
                };
                Ok(Box::new(HttpBackend::new(config)?))
            }
            other => Err(Error::Config(format!(
                "unknown backend kind {other:?}; expected \"mock\" or \"http\""
            ))),
        }
    }

    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        let kind = match self.schedule.kind.as_str() {
            "linear_decreasing" => ScheduleKind::LinearDecreasing,
            "linear_increasing" => ScheduleKind::LinearIncreasing,
            "constant" => ScheduleKind::Constant,
            other => {
                return Err(Error::Config(format!(
                    "unknown schedule kind {other:?}"
                )))
            }
        };
        let schedule = CurriculumSchedule {
            kind,
            rho_start: self.schedule.rho_start,
            rho_step: self.schedule.rho_step,
            iterations: self.schedule.iterations,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn pipeline_settings(&self) -> Result<PipelineSettings> {
        Ok(PipelineSettings {
            lexicon: self.lexicon()?,
            templates: self.templates()?,
            segmenter: self.segmenter()?,
            master_seed: self.master_seed,
            generation_max_tokens: self.generation.max_tokens,
            generation_temperature: self.generation.temperature,
            completion: CompletionSettings {
                max_tokens: self.injection.completion_max_tokens,
                temperature: self.injection.completion_temperature,
                seed: None,
            },
            worker_chunk: self.run.worker_chunk,
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        let root = if self.paths.output_root.is_empty() {
            "runs"
        } else {
            &self.paths.output_root
        };
        let run_id = if self.run.run_id.is_empty() {
            format!("run-{}", self.master_seed)
        } else {
            self.run.run_id.clone()
        };
        Path::new(root).join(run_id)
    }
}
