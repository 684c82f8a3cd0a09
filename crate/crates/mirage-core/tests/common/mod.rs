//! Shared toy-pipeline setup for the integration and acceptance suites.

use mirage_core::backend::MockBackend;
use mirage_core::dataset::UnannotatedSample;
use mirage_core::injector::TemplateSet;
use mirage_core::lexicon::{ConflictPolicy, SynonymLexicon};
use mirage_core::curriculum::PipelineSettings;

pub const PROMPT: &str = "Describe the image.";

/// Object lexicon over the demo backend's noun vocabulary.
pub fn demo_lexicon() -> SynonymLexicon {
    let entries: Vec<(&str, Vec<&str>)> = [
        "dog", "cat", "man", "woman", "table", "couch", "lamp", "window", "rug", "ball", "kite",
        "frisbee", "park", "kitchen", "grass", "chair", "book", "plant", "mirror", "clock",
        "vase", "shelf", "basket",
    ]
    .iter()
    .map(|w| (*w, Vec::new()))
    .collect();
    SynonymLexicon::from_entries("demo", entries, ConflictPolicy::KeepFirst).unwrap()
}

/// Sentences that follow the demo model's high-probability paths.
pub fn sentence_pool() -> Vec<&'static str> {
    vec![
        "a dog runs in the park.",
        "a cat sleeps on the rug.",
        "a man stands near the window.",
        "a woman sits on the couch.",
        "the lamp is warm.",
        "a kite is green.",
        "the ball is soft.",
        "a frisbee is quiet.",
        "the grass is green.",
        "a table is warm.",
        "the kitchen is quiet.",
        "a chair is soft.",
        "the book is quiet.",
        "a plant is green.",
        "the mirror is warm.",
        "a clock is quiet.",
        "the vase is green.",
        "a shelf is warm.",
        "the basket is soft.",
    ]
}

/// Sentence counts chosen so the default curriculum strictly lowers the
/// per-sample replacement count: round(0.6L) > round(0.4L) > round(0.2L).
pub fn sentence_count_for(index: usize) -> usize {
    [5, 7, 8][index % 3]
}

pub fn toy_samples(n: usize) -> Vec<UnannotatedSample> {
    (0..n)
        .map(|i| UnannotatedSample {
            sample_id: format!("s{i:04}"),
            image_ref: format!("img-{i:04}"),
            prompt: PROMPT.to_string(),
        })
        .collect()
}

/// Fixed description for a sample: `L` pool sentences starting at a
/// sample-dependent offset.
pub fn scripted_text(index: usize) -> String {
    let pool = sentence_pool();
    let l = sentence_count_for(index);
    let sentences: Vec<&str> = (0..l).map(|k| pool[(index * 3 + k) % pool.len()]).collect();
    sentences.join(" ")
}

/// Demo backend with a scripted description per sample.
pub fn scripted_backend(samples: &[UnannotatedSample]) -> MockBackend {
    let mut backend = MockBackend::demo();
    for (i, sample) in samples.iter().enumerate() {
        backend = backend.with_scripted_response(
            sample.prompt.clone(),
            Some(&sample.image_ref),
            scripted_text(i),
        );
    }
    backend
}

pub fn settings(master_seed: u64) -> PipelineSettings {
    let mut settings = PipelineSettings::new(demo_lexicon(), TemplateSet::builtin());
    settings.master_seed = master_seed;
    settings.generation_max_tokens = 96;
    settings
}

/// Recursive byte comparison of two directories.
pub fn assert_dirs_identical(a: &std::path::Path, b: &std::path::Path) {
    let list = |dir: &std::path::Path| -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .unwrap_or_else(|e| panic!("read_dir {}: {e}", dir.display()))
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| !n.ends_with(".lock"))
            .collect();
        names.sort();
        names
    };
    let names_a = list(a);
    let names_b = list(b);
    assert_eq!(names_a, names_b, "directory listings differ: {a:?} vs {b:?}");
    for name in names_a {
        let pa = a.join(&name);
        let pb = b.join(&name);
        if pa.is_dir() {
            assert_dirs_identical(&pa, &pb);
        } else {
            let ba = std::fs::read(&pa).unwrap();
            let bb = std::fs::read(&pb).unwrap();
            assert_eq!(ba, bb, "file bytes differ: {}", pa.display());
        }
    }
}
