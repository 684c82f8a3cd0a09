//! End-to-end iteration behavior on the deterministic mock backend.

mod common;

use std::sync::atomic::{AtomicUsize, Ordering};

use mirage_core::backend::{
    GenerationBackend, GenerationRequest, GenerationResult, SequenceScore, TokenDistribution,
};
use mirage_core::cooccurrence::{build_graph, CooccurrenceGraph};
use mirage_core::curriculum::{
    pair_gap_report, run_iteration, run_pipeline, CurriculumSchedule, GENERATION_CACHE_FILE,
    GRAPH_FILE,
};
use mirage_core::dataset::{read_preferences, read_responses, PreferenceRecord, PIPELINE_VERSION};
use mirage_core::injector::replacement_count;
use mirage_core::lexicon::{parse_objects, segment_sentences};
use mirage_core::Error;

/// Delegating backend that fails generation after a set number of calls.
struct FailAfter<B> {
    inner: B,
    remaining: AtomicUsize,
}

impl<B> FailAfter<B> {
    fn new(inner: B, allowed: usize) -> Self {
        FailAfter {
            inner,
            remaining: AtomicUsize::new(allowed),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for FailAfter<B> {
    fn generate(&self, request: &GenerationRequest) -> mirage_core::Result<GenerationResult> {
        let left = self.remaining.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| {
            v.checked_sub(1)
        });
        match left {
            Ok(_) => self.inner.generate(request),
            Err(_) => Err(Error::Transport("simulated crash".into())),
        }
    }

    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> mirage_core::Result<SequenceScore> {
        self.inner.score_sequence(prompt, image_ref, continuation)
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> mirage_core::Result<TokenDistribution> {
        self.inner.next_token_distribution(prompt, image_ref, top_k)
    }
}

/// Delegating backend that counts generation calls.
struct Counting<B> {
    inner: B,
    generated: AtomicUsize,
}

impl<B> Counting<B> {
    fn new(inner: B) -> Self {
        Counting {
            inner,
            generated: AtomicUsize::new(0),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for Counting<B> {
    fn generate(&self, request: &GenerationRequest) -> mirage_core::Result<GenerationResult> {
        // Completions are text-only; only description generations carry
        // an image reference.
        if request.image_ref.is_some() {
            self.generated.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.generate(request)
    }

    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> mirage_core::Result<SequenceScore> {
        self.inner.score_sequence(prompt, image_ref, continuation)
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> mirage_core::Result<TokenDistribution> {
        self.inner.next_token_distribution(prompt, image_ref, top_k)
    }
}

fn verify_pairs(records: &[PreferenceRecord], rho: f64) {
    let lexicon = common::demo_lexicon();
    for record in records {
        let preferred = segment_sentences(&record.preferred_text).unwrap();
        let dispreferred = segment_sentences(&record.dispreferred_text).unwrap();
        let l = preferred.sentence_count();
        assert_eq!(l, dispreferred.sentence_count(), "{}", record.sample_id);
        assert_eq!(
            record.replace_indices.len(),
            replacement_count(l, rho).min(l - 1),
            "{}",
            record.sample_id
        );
        assert!(!record.replace_indices.contains(&1));

        let diff: Vec<usize> = preferred
            .sentences()
            .iter()
            .zip(dispreferred.sentences())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i + 1)
            .collect();
        assert_eq!(diff, record.replace_indices, "{}", record.sample_id);

        let plus_tags = parse_objects(&preferred, &lexicon);
        let minus_tags = parse_objects(&dispreferred, &lexicon);
        for object in &record.hallucinated_objects {
            assert!(!plus_tags.contains(object), "{}: {object}", record.sample_id);
            assert!(minus_tags.contains(object), "{}: {object}", record.sample_id);
        }
        assert_eq!(record.pipeline_version, PIPELINE_VERSION);
    }
}

#[test]
fn iteration_emits_verified_pairs_and_accounts_for_everything() {
    let samples = common::toy_samples(24);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(42);
    let dir = tempfile::tempdir().unwrap();

    let record = run_iteration(&samples, &backend, 3, 0.2, dir.path(), &settings).unwrap();
    assert_eq!(record.n_input, 24);
    assert_eq!(record.n_emitted + record.n_discarded, record.n_input);
    assert_eq!(record.n_discarded, 0, "{:?}", record.discard_reasons);

    let records = read_preferences(dir.path().join(&record.dataset_path)).unwrap();
    assert_eq!(records.len(), 24);
    verify_pairs(&records, 0.2);
}

#[test]
fn graph_is_built_from_this_iterations_corpus() {
    let samples = common::toy_samples(12);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(7);
    let dir = tempfile::tempdir().unwrap();

    run_iteration(&samples, &backend, 1, 0.6, dir.path(), &settings).unwrap();

    let responses = read_responses(dir.path().join(GENERATION_CACHE_FILE)).unwrap();
    let lexicon = common::demo_lexicon();
    let tag_sets: Vec<_> = responses
        .iter()
        .map(|r| parse_objects(&segment_sentences(&r.text).unwrap(), &lexicon))
        .collect();
    let expected = build_graph(&tag_sets).unwrap();
    let saved = CooccurrenceGraph::load(dir.path().join(GRAPH_FILE)).unwrap();
    assert_eq!(saved, expected);
}

#[test]
fn early_iterations_replace_more_sentences() {
    let samples = common::toy_samples(18);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(9);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();

    let at_06 = run_iteration(&samples, &backend, 1, 0.6, dir_a.path(), &settings).unwrap();
    let at_02 = run_iteration(&samples, &backend, 3, 0.2, dir_b.path(), &settings).unwrap();
    assert!(
        at_06.mean_replaced_count > at_02.mean_replaced_count,
        "{} vs {}",
        at_06.mean_replaced_count,
        at_02.mean_replaced_count
    );
}

#[test]
fn short_responses_are_discarded_with_reasons() {
    let samples = common::toy_samples(6);
    let mut backend = mirage_core::backend::MockBackend::demo();
    for sample in &samples {
        backend = backend.with_scripted_response(
            sample.prompt.clone(),
            Some(&sample.image_ref),
            "a dog runs in the park. a cat sleeps on the rug. the lamp is warm. a kite is green.",
        );
    }
    let settings = common::settings(1);
    let dir = tempfile::tempdir().unwrap();

    // L = 4, rho = 0.1: round(0.4) = 0, every sample discarded.
    let record = run_iteration(&samples, &backend, 1, 0.1, dir.path(), &settings).unwrap();
    assert_eq!(record.n_emitted, 0);
    assert_eq!(record.n_discarded, 6);
    assert_eq!(record.discard_reasons["zero-replacement-count"], 6);

    let log = std::fs::read_to_string(dir.path().join("discards.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().all(|l| l.ends_with("zero-replacement-count")));
}

#[test]
fn crash_and_resume_reproduces_the_uninterrupted_run() {
    let samples = common::toy_samples(20);
    let settings = common::settings(23);
    let schedule = CurriculumSchedule::default();

    let clean_dir = tempfile::tempdir().unwrap();
    let clean_backend = common::scripted_backend(&samples);
    let clean =
        run_pipeline(&samples, &clean_backend, &schedule, &settings, clean_dir.path(), false, None)
            .unwrap();
    assert_eq!(clean.len(), 3);

    // Crash mid-generation of the first iteration (after 10 of 20).
    let crash_dir = tempfile::tempdir().unwrap();
    let crashing = FailAfter::new(common::scripted_backend(&samples), 10);
    let err = run_pipeline(
        &samples, &crashing, &schedule, &settings, crash_dir.path(), false, None,
    )
    .unwrap_err();
    assert!(err.is_backend(), "unexpected error {err:?}");

    // Resume with a healthy backend; cached generations must be reused.
    let counting = Counting::new(common::scripted_backend(&samples));
    let resumed = run_pipeline(
        &samples, &counting, &schedule, &settings, crash_dir.path(), true, None,
    )
    .unwrap();
    assert_eq!(clean, resumed);
    let generated = counting.generated.load(Ordering::SeqCst);
    // Iteration 1 regenerates only the missing samples; iterations 2 and
    // 3 run in full.
    assert!(generated < 60, "cache was not used: {generated} calls");

    common::assert_dirs_identical(clean_dir.path(), crash_dir.path());
}

#[test]
fn rerunning_without_resume_is_refused() {
    let samples = common::toy_samples(4);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(2);
    let schedule = CurriculumSchedule {
        iterations: 1,
        ..CurriculumSchedule::default()
    };
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&samples, &backend, &schedule, &settings, dir.path(), false, None).unwrap();
    assert!(matches!(
        run_pipeline(&samples, &backend, &schedule, &settings, dir.path(), false, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn hook_runs_after_each_iteration_and_failures_abort() {
    let samples = common::toy_samples(4);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(3);
    let schedule = CurriculumSchedule::default();
    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("hook_log");
    let hook = format!("echo \"$MIRAGE_ITERATION\" >> {}", marker.display());
    run_pipeline(
        &samples,
        &backend,
        &schedule,
        &settings,
        &dir.path().join("run"),
        false,
        Some(&hook),
    )
    .unwrap();
    assert_eq!(std::fs::read_to_string(&marker).unwrap(), "1\n2\n3\n");

    let failing_dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(
        &samples,
        &backend,
        &schedule,
        &settings,
        failing_dir.path(),
        false,
        Some("exit 3"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Hook(_)));
}

#[test]
fn control_pair_with_identical_sides_has_zero_gap() {
    let backend = common::scripted_backend(&[]);
    let text = "a dog runs in the park. the lamp is warm.";
    let record = PreferenceRecord {
        sample_id: "control".into(),
        image_ref: "img-x".into(),
        prompt: common::PROMPT.into(),
        preferred_text: text.into(),
        dispreferred_text: text.into(),
        replace_indices: vec![2],
        hallucinated_objects: vec!["lamp".into()],
        template_ids: vec![0],
        iteration: 1,
        rho: 0.2,
        pipeline_version: PIPELINE_VERSION.into(),
    };
    let report = pair_gap_report(&[record], &backend).unwrap();
    assert_eq!(report.mean_gap, 0.0);
    assert_eq!(report.n_skipped, 0);
}

#[test]
fn injected_pairs_score_below_their_originals() {
    let samples = common::toy_samples(16);
    let backend = common::scripted_backend(&samples);
    let settings = common::settings(5);
    let dir = tempfile::tempdir().unwrap();
    let record = run_iteration(&samples, &backend, 1, 0.4, dir.path(), &settings).unwrap();
    let records = read_preferences(dir.path().join(&record.dataset_path)).unwrap();
    let report = pair_gap_report(&records, &backend).unwrap();
    assert!(report.mean_gap > 0.0, "mean gap {}", report.mean_gap);
    for pair in &report.pairs {
        assert!(pair.gap() > 0.0, "{}: {}", pair.sample_id, pair.gap());
    }
}
