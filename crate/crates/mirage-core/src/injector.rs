//! Dis-preferred response construction.
//!
//! Sentences of a preferred response are selected by position-weighted
//! sampling (later sentences more likely, the first never), a
//! co-occurring but absent object is chosen for each from the graph,
//! and a template-guided text-only completion replaces the sentence.
//! Replacements run in ascending index order so the completion context
//! for a later sentence contains the already-injected earlier ones.

use std::collections::BTreeSet;
use std::path::Path;

use num_rational::Ratio;
use rand::Rng;

use crate::backend::{FinishReason, GenerationBackend, GenerationRequest};
use crate::cooccurrence::CooccurrenceGraph;
use crate::dataset::{PreferenceRecord, PIPELINE_VERSION};
use crate::error::{Error, Result};
use crate::lexicon::{ObjectTagSet, SegmentedResponse};

/// Placeholder that every guiding template must contain exactly once.
pub const PLACEHOLDER: &str = "<hal-object>";

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.txt");

/// A guiding sentence pattern with a single object slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidingTemplate {
    id: usize,
    pattern: String,
}

impl GuidingTemplate {
    pub fn new(id: usize, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::Invariant(format!(
                "template {id} must contain exactly one {PLACEHOLDER} placeholder: {pattern:?}"
            )));
        }
        Ok(GuidingTemplate { id, pattern })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn instantiate(&self, object: &str) -> String {
        self.pattern.replace(PLACEHOLDER, object)
    }
}

/// Non-empty, id-indexed collection of guiding templates.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<GuidingTemplate>,
}

impl TemplateSet {
    pub fn new(templates: Vec<GuidingTemplate>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        Ok(TemplateSet { templates })
    }

    /// The built-in guidance patterns (ids are line positions, 0-based).
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("built-in template file is valid")
    }

    /// Loads one pattern per line; blank lines and `#` comments skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Invariant(msg) => Error::parse(path, 0, msg),
            other => other,
        })
    }

    fn parse(text: &str) -> Result<Self> {
        let templates = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(id, pattern)| GuidingTemplate::new(id, pattern))
            .collect::<Result<Vec<_>>>()?;
        Self::new(templates)
    }

    pub fn get(&self, id: usize) -> Result<&GuidingTemplate> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("unknown template id {id}")))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &GuidingTemplate> {
        self.templates.iter()
    }
}

/// Why a sample produced no preference pair. A normal outcome, not an
/// error; the orchestrator logs one reason per discarded sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DiscardReason {
    /// `round(rho * L)` was zero.
    ZeroReplacementCount,
    /// Single-sentence response; the first sentence is never replaced.
    SingleSentence,
    /// The graph had no candidate outside the exclusion set.
    NoCandidate,
    /// A completion request failed or returned nothing usable.
    BackendFailure,
}

impl DiscardReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            DiscardReason::ZeroReplacementCount => "zero-replacement-count",
            DiscardReason::SingleSentence => "single-sentence",
            DiscardReason::NoCandidate => "no-candidate",
            DiscardReason::BackendFailure => "backend-failure",
        }
    }
}

/// Positional sampling weights `w_k = 1 + (k-1)/L` for `k = 1..=L`,
/// making the last sentence of a long response about twice as likely as
/// the first. Computed as `(L+k-1)/L` in one division so each weight is
/// the correctly rounded value of the underlying rational.
pub fn sentence_weights(l: usize) -> Vec<f64> {
    (1..=l).map(|k| (l + k - 1) as f64 / l as f64).collect()
}

/// Exact rational form of [`sentence_weights`].
pub fn sentence_weights_exact(l: usize) -> Vec<Ratio<u64>> {
    (1..=l)
        .map(|k| Ratio::new((l + k - 1) as u64, l as u64))
        .collect()
}

/// Number of sentences to replace: `rho * L` rounded half away from
/// zero.
pub fn replacement_count(l: usize, rho: f64) -> usize {
    (rho * l as f64 + 0.5).floor() as usize
}

/// Samples `round(rho * L)` distinct 1-based sentence indices from
/// `{2..=L}` without replacement, proportional to the masked positional
/// weights (successive renormalized draws). Returns them ascending.
///
/// `rho` must lie in `(0, 1]`. Discards when the rounded count is zero
/// or the response has a single sentence; a count exceeding `L-1` is
/// clamped.
pub fn sample_replace_indices<R: Rng + ?Sized>(
    l: usize,
    rho: f64,
    rng: &mut R,
) -> std::result::Result<Vec<usize>, DiscardReason> {
    if l <= 1 {
        return Err(DiscardReason::SingleSentence);
    }
    let count = replacement_count(l, rho);
    if count == 0 {
        return Err(DiscardReason::ZeroReplacementCount);
    }
    let count = count.min(l - 1);

    let weights = sentence_weights(l);
    let mut candidates: Vec<usize> = (2..=l).collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = candidates.iter().map(|&k| weights[k - 1]).sum();
        let target = rng.random::<f64>() * total;
        let mut cumulative = 0.0;
        let mut pick = candidates.len() - 1;
        for (slot, &k) in candidates.iter().enumerate() {
            cumulative += weights[k - 1];
            if cumulative > target {
                pick = slot;
                break;
            }
        }
        chosen.push(candidates.remove(pick));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// A fully resolved injection: which sentences to replace, with which
/// guiding template, describing which absent object.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub sentence_count: usize,
    pub rho: f64,
    /// 1-based, strictly increasing, never containing 1.
    pub replace_indices: Vec<usize>,
    pub template_ids: Vec<usize>,
    pub objects: Vec<String>,
}

impl InjectionPlan {
    pub fn validate(&self) -> Result<()> {
        let expected = replacement_count(self.sentence_count, self.rho).min(self.sentence_count.saturating_sub(1));
        let n = self.replace_indices.len();
        if n == 0 || n != expected {
            return Err(Error::Invariant(format!(
                "plan has {n} replacement indices, expected {expected}"
            )));
        }
        if self.template_ids.len() != n || self.objects.len() != n {
            return Err(Error::Invariant(
                "plan index/template/object lists must have equal lengths".into(),
            ));
        }
        let ascending = self.replace_indices.windows(2).all(|w| w[0] < w[1]);
        let in_range = self
            .replace_indices
            .iter()
            .all(|&k| k >= 2 && k <= self.sentence_count);
        if !ascending || !in_range {
            return Err(Error::Invariant(format!(
                "replacement indices must be distinct, ascending, within [2, {}]: {:?}",
                self.sentence_count, self.replace_indices
            )));
        }
        Ok(())
    }
}

/// Chooses replacement sites, hallucinated objects, and templates for
/// one preferred response.
///
/// For each replacement index (ascending) the query context is the tag
/// union of the still-retained original sentences; already-chosen
/// objects are excluded from candidacy but never added to the context.
/// Discards when any query comes back empty.
pub fn build_injection_plan<R: Rng + ?Sized>(
    y_plus: &SegmentedResponse,
    objects: &ObjectTagSet,
    graph: &CooccurrenceGraph,
    templates: &TemplateSet,
    rho: f64,
    rng: &mut R,
) -> std::result::Result<InjectionPlan, DiscardReason> {
    let l = y_plus.sentence_count();
    let replace_indices = sample_replace_indices(l, rho, rng)?;

    let per_sentence = objects.per_sentence();
    let mut removed: BTreeSet<usize> = BTreeSet::new();
    let mut exclude: BTreeSet<String> = objects.tags().clone();
    let mut chosen_objects = Vec::with_capacity(replace_indices.len());
    let mut template_ids = Vec::with_capacity(replace_indices.len());

    for &k in &replace_indices {
        removed.insert(k);
        let mut context: BTreeSet<String> = BTreeSet::new();
        for (i, tags) in per_sentence.iter().enumerate() {
            if !removed.contains(&(i + 1)) {
                context.extend(tags.iter().cloned());
            }
        }
        let Some(object) = graph.query_hallucinated_object(&context, &exclude) else {
            return Err(DiscardReason::NoCandidate);
        };
        let object = object.to_string();
        exclude.insert(object.clone());
        chosen_objects.push(object);
        let slot = rng.random_range(0..templates.len());
        template_ids.push(
            templates
                .iter()
                .nth(slot)
                .expect("slot is within the template set")
                .id(),
        );
    }

    Ok(InjectionPlan {
        sentence_count: l,
        rho,
        replace_indices,
        template_ids,
        objects: chosen_objects,
    })
}

/// Decoding settings for hallucination completions.
#[derive(Debug, Clone)]
pub struct CompletionSettings {
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for CompletionSettings {
    fn default() -> Self {
        CompletionSettings {
            max_tokens: 48,
            temperature: 0.0,
            seed: None,
        }
    }
}

/// Executes a plan: for each replacement index `k` (ascending), asks the
/// backend for a text-only completion of
/// `prompt ⊕ newline ⊕ (sentences 1..k-1 of the partially built y⁻) ⊕
/// instantiated template`, stops it at the first sentence terminator,
/// and swaps the composed sentence in. Untouched sentences are copied
/// verbatim. The image reference is deliberately never forwarded.
pub fn inject(
    plan: &InjectionPlan,
    y_plus: &SegmentedResponse,
    prompt: &str,
    backend: &dyn GenerationBackend,
    templates: &TemplateSet,
    settings: &CompletionSettings,
) -> Result<SegmentedResponse> {
    plan.validate()?;
    if plan.sentence_count != y_plus.sentence_count() {
        return Err(Error::LengthMismatch(format!(
            "plan was built for {} sentences, response has {}",
            plan.sentence_count,
            y_plus.sentence_count()
        )));
    }
    let mut sentences: Vec<String> = y_plus.sentences().to_vec();
    for (slot, &k) in plan.replace_indices.iter().enumerate() {
        let template = templates.get(plan.template_ids[slot])?;
        let instantiated = template.instantiate(&plan.objects[slot]);
        let context = sentences[..k - 1].join(" ");
        let request = GenerationRequest {
            prompt: format!("{prompt}\n{context} {instantiated}"),
            image_ref: None,
            max_tokens: settings.max_tokens,
            temperature: settings.temperature,
            stop_sequences: vec![".".to_string(), "!".to_string(), "?".to_string()],
            seed: settings.seed,
        };
        let result = backend.generate(&request)?;
        if result.finish_reason == FinishReason::Error {
            return Err(Error::Rejected(format!(
                "completion for sentence {k} produced no text"
            )));
        }
        sentences[k - 1] = compose_replacement(&instantiated, &result.text);
    }
    SegmentedResponse::from_sentences(sentences)
}

/// Template text plus completion, normalized to a single terminated
/// sentence.
fn compose_replacement(instantiated: &str, completion: &str) -> String {
    let completion = completion.trim();
    let mut sentence = if completion.is_empty() {
        instantiated.to_string()
    } else {
        format!("{instantiated} {completion}")
    };
    match sentence.find(['.', '!', '?']) {
        Some(pos) => sentence.truncate(pos + 1),
        None => sentence.push('.'),
    }
    sentence
}

/// A complete preference pair: the original response, its corrupted
/// twin, and the plan that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub sample_id: String,
    pub image_ref: String,
    pub prompt: String,
    pub preferred: SegmentedResponse,
    pub dispreferred: SegmentedResponse,
    pub plan: InjectionPlan,
    pub iteration: u32,
}

impl PreferencePair {
    /// Bundles the pieces after verifying the pair invariants: equal
    /// sentence counts, a sentence-level diff exactly matching the plan,
    /// and every replaced sentence starting with its instantiated
    /// template.
    pub fn assemble(
        sample_id: impl Into<String>,
        image_ref: impl Into<String>,
        prompt: impl Into<String>,
        preferred: SegmentedResponse,
        dispreferred: SegmentedResponse,
        plan: InjectionPlan,
        iteration: u32,
        templates: &TemplateSet,
    ) -> Result<Self> {
        plan.validate()?;
        if preferred.sentence_count() != dispreferred.sentence_count() {
            return Err(Error::Invariant(format!(
                "sentence counts differ: {} vs {}",
                preferred.sentence_count(),
                dispreferred.sentence_count()
            )));
        }
        let planned: BTreeSet<usize> = plan.replace_indices.iter().copied().collect();
        for (i, (a, b)) in preferred
            .sentences()
            .iter()
            .zip(dispreferred.sentences())
            .enumerate()
        {
            let differs = a != b;
            let should_differ = planned.contains(&(i + 1));
            if differs != should_differ {
                return Err(Error::Invariant(format!(
                    "sentence {} {}",
                    i + 1,
                    if differs {
                        "changed but was not planned"
                    } else {
                        "was planned but is unchanged"
                    }
                )));
            }
        }
        for (slot, &k) in plan.replace_indices.iter().enumerate() {
            let prefix = templates
                .get(plan.template_ids[slot])?
                .instantiate(&plan.objects[slot]);
            if !dispreferred.sentences()[k - 1].starts_with(&prefix) {
                return Err(Error::Invariant(format!(
                    "replaced sentence {k} does not start with its template text"
                )));
            }
        }
        Ok(PreferencePair {
            sample_id: sample_id.into(),
            image_ref: image_ref.into(),
            prompt: prompt.into(),
            preferred,
            dispreferred,
            plan,
            iteration,
        })
    }

    pub fn to_record(&self) -> PreferenceRecord {
        PreferenceRecord {
            sample_id: self.sample_id.clone(),
            image_ref: self.image_ref.clone(),
            prompt: self.prompt.clone(),
            preferred_text: self.preferred.joined(),
            dispreferred_text: self.dispreferred.joined(),
            replace_indices: self.plan.replace_indices.clone(),
            hallucinated_objects: self.plan.objects.clone(),
            template_ids: self.plan.template_ids.clone(),
            iteration: self.iteration,
            rho: self.plan.rho,
            pipeline_version: PIPELINE_VERSION.to_string(),
        }
    }
}
