//! Iteration driver: regenerate, rebuild, inject, emit.
//!
//! Each iteration generates fresh preferred responses with the current
//! backend, rebuilds the co-occurrence graph from that corpus (never a
//! stale one), injects at the curriculum's rate for that iteration, and
//! writes the dataset plus an accounting record. Completed generations
//! are cached on disk keyed by sample and iteration, so an aborted run
//! resumes to a byte-identical result. Training between iterations is
//! an external hook; the "latest model" is whatever the configured
//! backend serves.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{GenerationBackend, GenerationRequest};
use crate::cooccurrence::{build_graph, CooccurrenceGraph};
use crate::dataset::{
    self, PreferenceRecord, ResponseRecord, UnannotatedSample,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::injector::{
    build_injection_plan, inject, CompletionSettings, DiscardReason, PreferencePair, TemplateSet,
};
use crate::lexicon::{parse_objects, ObjectTagSet, SegmentedResponse, Segmenter, SynonymLexicon};

pub const GENERATION_CACHE_FILE: &str = "gen_cache.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const RECORD_FILE: &str = "record.json";
pub const DISCARD_LOG_FILE: &str = "discards.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    LinearDecreasing,
    LinearIncreasing,
    Constant,
}

/// Injection-rate schedule over iterations `1..=iterations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub kind: ScheduleKind,
    pub rho_start: f64,
    pub rho_step: f64,
    pub iterations: u32,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            kind: ScheduleKind::LinearDecreasing,
            rho_start: 0.8,
            rho_step: 0.2,
            iterations: 3,
        }
    }
}

impl CurriculumSchedule {
    /// Injection rate for iteration `t`, computed in exact decimal
    /// arithmetic so `0.8 - 0.2·t` really yields 0.6/0.4/0.2 rather
    /// than binary-float near-misses. Errors when `t` is outside the
    /// schedule or the rate leaves `(0, 1]`.
    pub fn rho(&self, t: u32) -> Result<f64> {
        if t < 1 || t > self.iterations {
            return Err(Error::OutOfRange(format!(
                "iteration {t} outside schedule 1..={}",
                self.iterations
            )));
        }
        let rho = self.rho_exact(t)?;
        if rho <= BigRational::zero() || rho > BigRational::one() {
            return Err(Error::OutOfRange(format!(
                "rho at iteration {t} is {} which is outside (0, 1]",
                rho.to_f64().unwrap_or(f64::NAN)
            )));
        }
        rho.to_f64()
            .ok_or_else(|| Error::OutOfRange("rho is not representable".into()))
    }

    fn rho_exact(&self, t: u32) -> Result<BigRational> {
        let start = decimal_ratio(self.rho_start)?;
        let step = decimal_ratio(self.rho_step)?;
        let t = BigRational::from_integer(BigInt::from(t));
        Ok(match self.kind {
            ScheduleKind::LinearDecreasing => start - step * t,
            ScheduleKind::LinearIncreasing => start + step * t,
            ScheduleKind::Constant => start,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("schedule needs at least one iteration".into()));
        }
        for t in 1..=self.iterations {
            self.rho(t)?;
        }
        Ok(())
    }
}

/// Exact rational value of a float's shortest decimal representation.
/// `0.8` becomes 4/5, not the binary fraction nearest 0.8.
fn decimal_ratio(x: f64) -> Result<BigRational> {
    if !x.is_finite() {
        return Err(Error::OutOfRange(format!("{x} is not a finite rate")));
    }
    let text = format!("{x}");
    let (mantissa_text, exp) = match text.split_once(['e', 'E']) {
        Some((m, e)) => (
            m,
            e.parse::<i32>()
                .map_err(|_| Error::OutOfRange(format!("unparseable exponent in {text}")))?,
        ),
        None => (text.as_str(), 0),
    };
    let negative = mantissa_text.starts_with('-');
    let unsigned = mantissa_text.trim_start_matches('-');
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, f),
        None => (unsigned, ""),
    };
    let digits: String = format!("{int_part}{frac_part}");
    let mut numer: BigInt = digits
        .parse()
        .map_err(|_| Error::OutOfRange(format!("unparseable rate {text}")))?;
    if negative {
        numer = -numer;
    }
    let scale = frac_part.len() as i32 - exp;
    let ten = BigInt::from(10);
    Ok(if scale >= 0 {
        BigRational::new(numer, ten.pow(scale as u32))
    } else {
        BigRational::new(numer * ten.pow((-scale) as u32), BigInt::one())
    })
}

/// Stated worker-seed mixing function: the first eight little-endian
/// bytes of `SHA-256(master ‖ role ‖ 0x00 ‖ sample_id ‖ 0x00 ‖ t)`.
pub fn derive_seed(master_seed: u64, role: &str, sample_id: &str, iteration: u32) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(role.as_bytes());
    hasher.update([0u8]);
    hasher.update(sample_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(iteration.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Everything an iteration needs besides the samples and the backend.
#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub lexicon: SynonymLexicon,
    pub templates: TemplateSet,
    pub segmenter: Segmenter,
    pub master_seed: u64,
    pub generation_max_tokens: usize,
    pub generation_temperature: f64,
    pub completion: CompletionSettings,
    /// Generations are flushed to the cache in chunks of this size.
    pub worker_chunk: usize,
}

impl PipelineSettings {
    pub fn new(lexicon: SynonymLexicon, templates: TemplateSet) -> Self {
        PipelineSettings {
            lexicon,
            templates,
            segmenter: Segmenter::default(),
            master_seed: 0,
            generation_max_tokens: 64,
            generation_temperature: 0.0,
            completion: CompletionSettings::default(),
            worker_chunk: 8,
        }
    }
}

/// Accounting for one completed iteration. Paths are relative to the
/// iteration directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub rho: f64,
    pub n_input: u64,
    pub n_emitted: u64,
    pub n_discarded: u64,
    pub discard_reasons: BTreeMap<String, u64>,
    pub dataset_path: String,
    pub graph_path: String,
    pub mean_sentence_count: f64,
    pub mean_replaced_count: f64,
}

/// Outcome of injecting a whole corpus: emitted records plus one
/// discard reason per dropped sample, both in input order.
#[derive(Debug, Clone)]
pub struct InjectionOutcome {
    pub records: Vec<PreferenceRecord>,
    pub discards: Vec<(String, DiscardReason)>,
    pub mean_sentence_count: f64,
    pub mean_replaced_count: f64,
}

impl InjectionOutcome {
    pub fn discard_counts(&self) -> BTreeMap<String, u64> {
        let mut counts = BTreeMap::new();
        for (_, reason) in &self.discards {
            *counts.entry(reason.as_str().to_string()).or_insert(0) += 1;
        }
        counts
    }
}

/// Segments and tags a response corpus.
pub fn parse_corpus(
    responses: &[ResponseRecord],
    settings: &PipelineSettings,
) -> Result<Vec<(SegmentedResponse, ObjectTagSet)>> {
    let segmented = exec::map_ordered(responses, |r| settings.segmenter.segment(&r.text));
    let mut out = Vec::with_capacity(responses.len());
    for seg in segmented {
        let seg = seg?;
        let tags = parse_objects(&seg, &settings.lexicon);
        out.push((seg, tags));
    }
    Ok(out)
}

/// Plans and executes injection for every response. Samples are
/// processed concurrently with per-sample seeds derived from
/// `(master_seed, sample_id, iteration)`, so the output is independent
/// of scheduling. Backend failures discard the affected sample only.
pub fn inject_responses(
    responses: &[ResponseRecord],
    parsed: &[(SegmentedResponse, ObjectTagSet)],
    graph: &CooccurrenceGraph,
    rho: f64,
    iteration: u32,
    backend: &dyn GenerationBackend,
    settings: &PipelineSettings,
) -> Result<InjectionOutcome> {
    if responses.len() != parsed.len() {
        return Err(Error::LengthMismatch(format!(
            "{} responses but {} parsed entries",
            responses.len(),
            parsed.len()
        )));
    }
    let inputs: Vec<(usize, &ResponseRecord)> = responses.iter().enumerate().collect();
    let outcomes: Vec<Result<SampleOutcome>> = exec::map_ordered(&inputs, |(i, response)| {
        let (seg, tags) = &parsed[*i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            settings.master_seed,
            "inject",
            &response.sample_id,
            iteration,
        ));
        let plan = match build_injection_plan(seg, tags, graph, &settings.templates, rho, &mut rng)
        {
            Ok(plan) => plan,
            Err(reason) => return Ok(SampleOutcome::Discarded(reason)),
        };
        let completion = CompletionSettings {
            seed: Some(derive_seed(
                settings.master_seed,
                "complete",
                &response.sample_id,
                iteration,
            )),
            ..settings.completion.clone()
        };
        let dispreferred = match inject(
            &plan,
            seg,
            &response.prompt,
            backend,
            &settings.templates,
            &completion,
        ) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("sample {}: completion failed: {e}", response.sample_id);
                return Ok(SampleOutcome::Discarded(DiscardReason::BackendFailure));
            }
        };
        let pair = PreferencePair::assemble(
            response.sample_id.clone(),
            response.image_ref.clone(),
            response.prompt.clone(),
            seg.clone(),
            dispreferred,
            plan,
            iteration,
            &settings.templates,
        )?;
        Ok(SampleOutcome::Emitted(Box::new(pair)))
    });

    let mut records = Vec::new();
    let mut discards = Vec::new();
    let mut sentence_count_sum = 0u64;
    let mut replaced_count_sum = 0u64;
    for (outcome, response) in outcomes.into_iter().zip(responses) {
        match outcome? {
            SampleOutcome::Emitted(pair) => {
                sentence_count_sum += pair.preferred.sentence_count() as u64;
                replaced_count_sum += pair.plan.replace_indices.len() as u64;
                records.push(pair.to_record());
            }
            SampleOutcome::Discarded(reason) => {
                discards.push((response.sample_id.clone(), reason));
            }
        }
    }
    let n_emitted = records.len() as u64;
    Ok(InjectionOutcome {
        mean_sentence_count: mean(sentence_count_sum, n_emitted),
        mean_replaced_count: mean(replaced_count_sum, n_emitted),
        records,
        discards,
    })
}

enum SampleOutcome {
    Emitted(Box<PreferencePair>),
    Discarded(DiscardReason),
}

/// Runs one full iteration into `out_dir`: generate (with cache),
/// parse, rebuild the graph, inject, and write dataset, graph, record,
/// and discard log. Generation failures abort (resumable); injection
/// failures discard the affected sample.
pub fn run_iteration(
    samples: &[UnannotatedSample],
    backend: &dyn GenerationBackend,
    t: u32,
    rho: f64,
    out_dir: &Path,
    settings: &PipelineSettings,
) -> Result<IterationRecord> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no unannotated samples".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let responses = generate_with_cache(samples, backend, t, out_dir, settings)?;
    let parsed = parse_corpus(&responses, settings)?;

    let tag_sets: Vec<ObjectTagSet> = parsed.iter().map(|(_, tags)| tags.clone()).collect();
    let graph = build_graph(&tag_sets)?;
    graph.save(out_dir.join(GRAPH_FILE))?;

    let outcome = inject_responses(&responses, &parsed, &graph, rho, t, backend, settings)?;

    dataset::write_preferences(&outcome.records, out_dir.join(DATASET_FILE))?;
    dataset::atomic_write(out_dir.join(DISCARD_LOG_FILE), |f| {
        for (sample_id, reason) in &outcome.discards {
            writeln!(f, "{sample_id}\t{}", reason.as_str())?;
        }
        Ok(())
    })?;

    let n_emitted = outcome.records.len() as u64;
    let n_discarded = outcome.discards.len() as u64;
    debug_assert_eq!(n_emitted + n_discarded, samples.len() as u64);
    let record = IterationRecord {
        t,
        rho,
        n_input: samples.len() as u64,
        n_emitted,
        n_discarded,
        discard_reasons: outcome.discard_counts(),
        dataset_path: DATASET_FILE.to_string(),
        graph_path: GRAPH_FILE.to_string(),
        mean_sentence_count: outcome.mean_sentence_count,
        mean_replaced_count: outcome.mean_replaced_count,
    };
    dataset::atomic_write(out_dir.join(RECORD_FILE), |f| {
        let pretty = serde_json::to_string_pretty(&record).expect("record serializes");
        writeln!(f, "{pretty}")
    })?;
    Ok(record)
}

fn mean(sum: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Generates preferred responses, reusing any cached ones. Completed
/// chunks are appended to the cache as they finish, so an abort keeps
/// its progress; once everything is present the cache is rewritten in
/// input order, making the final file deterministic.
fn generate_with_cache(
    samples: &[UnannotatedSample],
    backend: &dyn GenerationBackend,
    t: u32,
    out_dir: &Path,
    settings: &PipelineSettings,
) -> Result<Vec<ResponseRecord>> {
    let cache_path = out_dir.join(GENERATION_CACHE_FILE);
    let mut cached: HashMap<String, String> = HashMap::new();
    if cache_path.exists() {
        let text = std::fs::read_to_string(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
        for line in text.lines() {
            match serde_json::from_str::<ResponseRecord>(line) {
                Ok(record) => {
                    cached.insert(record.sample_id, record.text);
                }
                Err(_) => {
                    // Torn tail from an aborted append; regenerate it.
                    log::warn!("skipping malformed cache line in {}", cache_path.display());
                }
            }
        }
    }

    let missing: Vec<&UnannotatedSample> = samples
        .iter()
        .filter(|s| !cached.contains_key(&s.sample_id))
        .collect();
    if !missing.is_empty() {
        let mut appender = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cache_path)
            .map_err(|e| Error::io(&cache_path, e))?;
        let chunk_size = settings.worker_chunk.max(1);
        for chunk in missing.chunks(chunk_size) {
            let generated: Vec<Result<String>> = exec::map_ordered(chunk, |sample| {
                let request = GenerationRequest {
                    prompt: sample.prompt.clone(),
                    image_ref: Some(sample.image_ref.clone()),
                    max_tokens: settings.generation_max_tokens,
                    temperature: settings.generation_temperature,
                    stop_sequences: Vec::new(),
                    seed: Some(derive_seed(
                        settings.master_seed,
                        "generate",
                        &sample.sample_id,
                        t,
                    )),
                };
                let result = backend.generate(&request)?;
                if result.text.trim().is_empty() {
                    return Err(Error::Rejected(format!(
                        "empty preferred response for sample {}",
                        sample.sample_id
                    )));
                }
                Ok(result.text)
            });
            let mut lines = String::new();
            for (result, sample) in generated.into_iter().zip(chunk) {
                let text = result?;
                let record = ResponseRecord {
                    sample_id: sample.sample_id.clone(),
                    image_ref: sample.image_ref.clone(),
                    prompt: sample.prompt.clone(),
                    text: text.clone(),
                };
                lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
                lines.push('\n');
                cached.insert(sample.sample_id.clone(), text);
            }
            appender
                .write_all(lines.as_bytes())
                .and_then(|_| appender.sync_all())
                .map_err(|e| Error::io(&cache_path, e))?;
        }
    }

    let responses: Vec<ResponseRecord> = samples
        .iter()
        .map(|s| ResponseRecord {
            sample_id: s.sample_id.clone(),
            image_ref: s.image_ref.clone(),
            prompt: s.prompt.clone(),
            text: cached[&s.sample_id].clone(),
        })
        .collect();
    dataset::write_responses(&responses, &cache_path)?;
    Ok(responses)
}

/// Runs `schedule.iterations` iterations under `run_dir/iter-<t>/`,
/// invoking the optional hook command after each iteration's dataset is
/// written. With `resume`, iterations that already have a record are
/// skipped wholesale (their hook is not re-run).
pub fn run_pipeline(
    samples: &[UnannotatedSample],
    backend: &dyn GenerationBackend,
    schedule: &CurriculumSchedule,
    settings: &PipelineSettings,
    run_dir: &Path,
    resume: bool,
    hook_command: Option<&str>,
) -> Result<Vec<IterationRecord>> {
    schedule.validate()?;
    let mut records = Vec::with_capacity(schedule.iterations as usize);
    for t in 1..=schedule.iterations {
        let iter_dir = run_dir.join(format!("iter-{t}"));
        let record_path = iter_dir.join(RECORD_FILE);
        if record_path.exists() {
            if !resume {
                return Err(Error::Config(format!(
                    "{} already exists; pass resume to continue this run",
                    record_path.display()
                )));
            }
            let text =
                std::fs::read_to_string(&record_path).map_err(|e| Error::io(&record_path, e))?;
            let record: IterationRecord = serde_json::from_str(&text)
                .map_err(|e| Error::parse(&record_path, 0, e.to_string()))?;
            records.push(record);
            continue;
        }
        let rho = schedule.rho(t)?;
        let record = run_iteration(samples, backend, t, rho, &iter_dir, settings)?;
        records.push(record);
        if let Some(command) = hook_command {
            run_hook(command, &iter_dir, t)?;
        }
    }
    Ok(records)
}

fn run_hook(command: &str, iter_dir: &Path, t: u32) -> Result<()> {
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(command)
        .env("MIRAGE_ITERATION", t.to_string())
        .env("MIRAGE_ITER_DIR", iter_dir)
        .status()
        .map_err(|e| Error::Hook(format!("failed to spawn {command:?}: {e}")))?;
    if !status.success() {
        return Err(Error::Hook(format!(
            "{command:?} exited with {status} after iteration {t}"
        )));
    }
    Ok(())
}

/// Log-probabilities of both sides of one pair under a backend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairGap {
    pub sample_id: String,
    pub logp_preferred: f64,
    pub logp_dispreferred: f64,
}

impl PairGap {
    pub fn gap(&self) -> f64 {
        self.logp_preferred - self.logp_dispreferred
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapHistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub preferred: u64,
    pub dispreferred: u64,
}

/// Score report over a preference dataset: per-pair log-probabilities,
/// their mean gap, and aligned histograms of both sides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub pairs: Vec<PairGap>,
    pub mean_gap: f64,
    pub n_skipped: u64,
    pub histogram: Vec<GapHistogramBin>,
}

pub const GAP_HISTOGRAM_BINS: usize = 20;

/// Scores both responses of every pair under the backend. Pairs whose
/// scoring fails are logged and skipped.
pub fn pair_gap_report(
    records: &[PreferenceRecord],
    backend: &dyn GenerationBackend,
) -> Result<GapReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no preference pairs to score".into()));
    }
    let scored: Vec<Result<PairGap>> = exec::map_ordered(records, |record| {
        let prompt = format!("{}\n", record.prompt);
        let preferred =
            backend.score_sequence(&prompt, Some(&record.image_ref), &record.preferred_text)?;
        let dispreferred = backend.score_sequence(
            &prompt,
            Some(&record.image_ref),
            &record.dispreferred_text,
        )?;
        Ok(PairGap {
            sample_id: record.sample_id.clone(),
            logp_preferred: preferred.total,
            logp_dispreferred: dispreferred.total,
        })
    });

    let mut pairs = Vec::new();
    let mut n_skipped = 0u64;
    for (result, record) in scored.into_iter().zip(records) {
        match result {
            Ok(gap) => pairs.push(gap),
            Err(e) => {
                log::warn!("skipping pair {}: {e}", record.sample_id);
                n_skipped += 1;
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput("all pairs failed to score".into()));
    }
    let mean_gap = pairs.iter().map(PairGap::gap).sum::<f64>() / pairs.len() as f64;
    let histogram = build_histogram(&pairs, GAP_HISTOGRAM_BINS);
    Ok(GapReport {
        pairs,
        mean_gap,
        n_skipped,
        histogram,
    })
}

/// Aligned histograms of preferred and dis-preferred log-probabilities
/// over their common range.
fn build_histogram(pairs: &[PairGap], bins: usize) -> Vec<GapHistogramBin> {
    let values: Vec<f64> = pairs
        .iter()
        .flat_map(|p| [p.logp_preferred, p.logp_dispreferred])
        .collect();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let clamp_bin = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
    let mut out: Vec<GapHistogramBin> = (0..bins)
        .map(|i| GapHistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            preferred: 0,
            dispreferred: 0,
        })
        .collect();
    for pair in pairs {
        out[clamp_bin(pair.logp_preferred)].preferred += 1;
        out[clamp_bin(pair.logp_dispreferred)].dispreferred += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Signed;

    #[test]
    fn default_schedule_hits_paper_rates_exactly() {
        let schedule = CurriculumSchedule::default();
        assert_eq!(schedule.rho(1).unwrap(), 0.6);
        assert_eq!(schedule.rho(2).unwrap(), 0.4);
        assert_eq!(schedule.rho(3).unwrap(), 0.2);
    }

    #[test]
    fn constant_schedule_is_constant() {
        let schedule = CurriculumSchedule {
            kind: ScheduleKind::Constant,
            rho_start: 0.2,
            rho_step: 0.0,
            iterations: 5,
        };
        for t in 1..=5 {
            assert_eq!(schedule.rho(t).unwrap(), 0.2);
        }
    }

    #[test]
    fn reverse_schedule_increases() {
        let schedule = CurriculumSchedule {
            kind: ScheduleKind::LinearIncreasing,
            rho_start: 0.0,
            rho_step: 0.2,
            iterations: 3,
        };
        assert_eq!(schedule.rho(1).unwrap(), 0.2);
        assert_eq!(schedule.rho(3).unwrap(), 0.6);
    }

    #[test]
    fn monotone_decrease_holds_across_the_schedule() {
        let schedule = CurriculumSchedule::default();
        for t in 1..schedule.iterations {
            assert!(schedule.rho(t + 1).unwrap() < schedule.rho(t).unwrap());
        }
    }

    #[test]
    fn out_of_range_rho_is_rejected() {
        let schedule = CurriculumSchedule {
            kind: ScheduleKind::LinearDecreasing,
            rho_start: 0.8,
            rho_step: 0.2,
            iterations: 4, // t=4 would give exactly 0.0
        };
        assert!(matches!(schedule.rho(4), Err(Error::OutOfRange(_))));
        assert!(schedule.validate().is_err());
        assert!(matches!(schedule.rho(9), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn decimal_ratio_recovers_short_decimals() {
        let cases = [
            (0.8, (4, 5)),
            (0.2, (1, 5)),
            (0.05, (1, 20)),
            (1.0, (1, 1)),
            (0.0, (0, 1)),
        ];
        for (x, (n, d)) in cases {
            let r = decimal_ratio(x).unwrap();
            assert_eq!(
                r,
                BigRational::new(BigInt::from(n), BigInt::from(d)),
                "decimal_ratio({x})"
            );
        }
        assert!(decimal_ratio(1e-7).unwrap() > BigRational::zero());
        assert!(decimal_ratio(-0.5).unwrap().is_negative());
    }

    #[test]
    fn seed_derivation_separates_roles_samples_and_iterations() {
        let base = derive_seed(42, "inject", "s1", 1);
        assert_eq!(base, derive_seed(42, "inject", "s1", 1));
        assert_ne!(base, derive_seed(42, "inject", "s1", 2));
        assert_ne!(base, derive_seed(42, "inject", "s2", 1));
        assert_ne!(base, derive_seed(42, "generate", "s1", 1));
        assert_ne!(base, derive_seed(43, "inject", "s1", 1));
    }
}
