//! Hallucination evaluation and diagnostics.
//!
//! CHAIR counts object mentions against ground truth, PDM-H measures
//! how much an image actually changes the next-token distribution
//! (Hellinger distance between the image+text and text-only heads), and
//! the positional / co-occurrence summaries reproduce the structural
//! analyses the injection design rests on.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{GenerationBackend, TokenDistribution};
use crate::cooccurrence::CooccurrenceGraph;
use crate::error::{Error, Result};
use crate::exec;
use crate::lexicon::{ObjectTagSet, SegmentedResponse};

/// Ground-truth object set for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthAnnotation {
    pub sample_id: String,
    pub present_tags: BTreeSet<String>,
}

/// CHAIR scores with the raw counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChairResult {
    /// Hallucinated fraction of mentioned objects.
    pub chair_i: f64,
    /// Fraction of responses with at least one hallucinated object.
    pub chair_s: f64,
    pub n_objects: u64,
    pub n_hallucinated_objects: u64,
    pub n_responses: u64,
    pub n_hallucinated_responses: u64,
}

fn check_annotations(
    responses: &[(String, ObjectTagSet)],
    truth: &BTreeMap<String, GroundTruthAnnotation>,
) -> Result<()> {
    if responses.is_empty() {
        return Err(Error::EmptyInput("no responses to score".into()));
    }
    let missing: Vec<String> = responses
        .iter()
        .map(|(id, _)| id)
        .filter(|id| !truth.contains_key(*id))
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingAnnotations(missing))
    }
}

fn count_one(tags: &ObjectTagSet, present: &BTreeSet<String>) -> (u64, u64) {
    let mentioned = tags.tags().len() as u64;
    let hallucinated = tags
        .tags()
        .iter()
        .filter(|t| !present.contains(*t))
        .count() as u64;
    (mentioned, hallucinated)
}

fn aggregate_chair(counts: Vec<(u64, u64)>) -> ChairResult {
    let mut result = ChairResult {
        chair_i: 0.0,
        chair_s: 0.0,
        n_objects: 0,
        n_hallucinated_objects: 0,
        n_responses: counts.len() as u64,
        n_hallucinated_responses: 0,
    };
    for (mentioned, hallucinated) in counts {
        result.n_objects += mentioned;
        result.n_hallucinated_objects += hallucinated;
        if hallucinated > 0 {
            result.n_hallucinated_responses += 1;
        }
    }
    result.chair_i = result.n_hallucinated_objects as f64 / result.n_objects.max(1) as f64;
    result.chair_s = result.n_hallucinated_responses as f64 / result.n_responses as f64;
    result
}

/// Scores parsed responses against annotations. A mentioned tag is
/// hallucinated iff it is absent from the sample's `present_tags`; each
/// response contributes its distinct tags once.
pub fn chair(
    responses: &[(String, ObjectTagSet)],
    truth: &BTreeMap<String, GroundTruthAnnotation>,
) -> Result<ChairResult> {
    check_annotations(responses, truth)?;
    let counts = exec::map_ordered(responses, |(id, tags)| {
        count_one(tags, &truth[id].present_tags)
    });
    Ok(aggregate_chair(counts))
}

/// Sequential reference implementation of [`chair`].
pub fn chair_seq(
    responses: &[(String, ObjectTagSet)],
    truth: &BTreeMap<String, GroundTruthAnnotation>,
) -> Result<ChairResult> {
    check_annotations(responses, truth)?;
    let counts = exec::map_ordered_seq(responses, |(id, tags)| {
        count_one(tags, &truth[id].present_tags)
    });
    Ok(aggregate_chair(counts))
}

/// Hellinger distance `H(p, q) = (1/√2)·√Σ(√p_i - √q_i)²` between two
/// distributions aligned over the union of their supports (missing
/// tokens count as zero, each side renormalized over the union).
/// Symmetric, zero iff the distributions agree, and at most 1, reached
/// on disjoint supports.
pub fn pdm_h(
    dist_with_image: &TokenDistribution,
    dist_text_only: &TokenDistribution,
) -> Result<f64> {
    let p = mass_by_token(dist_with_image)?;
    let q = mass_by_token(dist_text_only)?;
    let p_total: f64 = p.values().sum();
    let q_total: f64 = q.values().sum();
    if p_total <= 0.0 || q_total <= 0.0 {
        return Err(Error::SupportMismatch("distribution has no mass".into()));
    }
    let union: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
    let mut sum = 0.0;
    for token in union {
        let pi = p.get(token).copied().unwrap_or(0.0) / p_total;
        let qi = q.get(token).copied().unwrap_or(0.0) / q_total;
        let diff = pi.sqrt() - qi.sqrt();
        sum += diff * diff;
    }
    Ok((sum / 2.0).sqrt().min(1.0))
}

fn mass_by_token(dist: &TokenDistribution) -> Result<BTreeMap<String, f64>> {
    dist.validate()?;
    let mut map = BTreeMap::new();
    for (token, p) in dist.support() {
        if map.insert(token.clone(), *p).is_some() {
            return Err(Error::SupportMismatch(format!(
                "token {token:?} duplicated in one distribution"
            )));
        }
    }
    Ok(map)
}

/// Per-step PDM-H along a generated token sequence: at step `j` the
/// backend's next-token head conditioned on `(image, prompt, y_<j)` is
/// compared with the text-only head on `(prompt, y_<j)`. Failed steps
/// are logged and reported as `None`.
pub fn pdm_h_curve(
    backend: &dyn GenerationBackend,
    prompt: &str,
    image_ref: &str,
    tokens: &[String],
    top_k: usize,
) -> Vec<Option<f64>> {
    let mut curve = Vec::with_capacity(tokens.len());
    for j in 0..tokens.len() {
        let prefix = join_tokens(prompt, &tokens[..j]);
        let step = backend
            .next_token_distribution(&prefix, Some(image_ref), top_k)
            .and_then(|with_image| {
                let text_only = backend.next_token_distribution(&prefix, None, top_k)?;
                pdm_h(&with_image, &text_only)
            });
        match step {
            Ok(h) => curve.push(Some(h)),
            Err(e) => {
                log::warn!("pdm-h step {} failed: {e}", j + 1);
                curve.push(None);
            }
        }
    }
    curve
}

/// Prompt followed by the already-generated prefix; terminator tokens
/// attach without a leading space.
fn join_tokens(prompt: &str, tokens: &[String]) -> String {
    let mut out = prompt.to_string();
    for token in tokens {
        if matches!(token.as_str(), "." | "!" | "?") {
            out.push_str(token);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(token);
        }
    }
    out
}

/// Hallucination rate per normalized sentence position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionalProfile {
    pub bins: Vec<PositionBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionBin {
    pub total: u64,
    pub hallucinated: u64,
    pub rate: f64,
}

/// Bins sentence positions by `k/L` into `bins` equal intervals
/// (`bin = ceil(k·bins/L) - 1`, computed in integers) and reports the
/// flagged fraction per bin.
pub fn positional_profile(
    items: &[(SegmentedResponse, Vec<bool>)],
    bins: usize,
) -> Result<PositionalProfile> {
    if bins == 0 {
        return Err(Error::Config("bin count must be at least 1".into()));
    }
    let mut totals = vec![(0u64, 0u64); bins];
    for (response, flags) in items {
        let l = response.sentence_count();
        if flags.len() != l {
            return Err(Error::LengthMismatch(format!(
                "response has {l} sentences but {} flags",
                flags.len()
            )));
        }
        for (k, flagged) in flags.iter().enumerate() {
            let bin = ((k + 1) * bins).div_ceil(l) - 1;
            totals[bin].0 += 1;
            if *flagged {
                totals[bin].1 += 1;
            }
        }
    }
    Ok(PositionalProfile {
        bins: totals
            .into_iter()
            .map(|(total, hallucinated)| PositionBin {
                total,
                hallucinated,
                rate: if total == 0 {
                    0.0
                } else {
                    hallucinated as f64 / total as f64
                },
            })
            .collect(),
    })
}

/// How hallucinated tags relate to each response's correct tags in the
/// co-occurrence graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CooccurStats {
    pub n_hallucinated: u64,
    /// Fraction of hallucinated tags with any positive co-occurrence
    /// score against the response's correct tags.
    pub cooccurring_fraction: f64,
    pub top1_fraction: f64,
    pub top5_fraction: f64,
}

/// For every hallucinated tag of every response, ranks it against the
/// response's correctly mentioned tags and aggregates the fractions.
/// Responses without correct tags contribute their hallucinated tags to
/// the denominator only.
pub fn cooccur_stats(
    responses: &[(String, ObjectTagSet)],
    truth: &BTreeMap<String, GroundTruthAnnotation>,
    graph: &CooccurrenceGraph,
) -> Result<CooccurStats> {
    check_annotations(responses, truth)?;
    let mut n_hallucinated = 0u64;
    let mut cooccurring = 0u64;
    let mut top1 = 0u64;
    let mut top5 = 0u64;
    for (id, tags) in responses {
        let present = &truth[id].present_tags;
        let anchors: BTreeSet<String> = tags.tags().intersection(present).cloned().collect();
        for tag in tags.tags() {
            if present.contains(tag) {
                continue;
            }
            n_hallucinated += 1;
            if let Some(rank) = graph.cooccurrence_rank(&anchors, tag) {
                cooccurring += 1;
                if rank <= 1 {
                    top1 += 1;
                }
                if rank <= 5 {
                    top5 += 1;
                }
            }
        }
    }
    let denom = n_hallucinated.max(1) as f64;
    Ok(CooccurStats {
        n_hallucinated,
        cooccurring_fraction: cooccurring as f64 / denom,
        top1_fraction: top1 as f64 / denom,
        top5_fraction: top5 as f64 / denom,
    })
}
