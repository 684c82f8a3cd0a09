//! Text-generation backends.
//!
//! One trait covers the three capabilities the pipeline needs: sampling
//! completions, scoring a continuation, and exposing the next-token
//! distribution. [`MockBackend`] is a pure function of its inputs and
//! backs every test; [`HttpBackend`] speaks a JSON completion API so any
//! locally hosted model can drive the pipeline.

mod http;
mod mock;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::MockBackend;

use crate::error::{Error, Result};

/// A single generation request. Images travel as opaque references; the
/// backends decide what to do with them.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub image_ref: Option<String>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            image_ref: None,
            max_tokens: 64,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be a non-negative real, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Logprob of one emitted token plus the top-k alternatives at that
/// step, sorted by descending logprob and always containing the chosen
/// token's entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    pub top_k: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    pub finish_reason: FinishReason,
}

/// A sequence score: the total log-probability and its per-token terms.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceScore {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// A discrete next-token distribution over an explicit support.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    support: Vec<(String, f64)>,
    renormalized: bool,
}

impl TokenDistribution {
    /// Builds a distribution from positive weights, renormalizing them
    /// to sum to 1.
    pub fn from_weighted(support: Vec<(String, f64)>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::EmptyInput("token distribution has no support".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (token, w) in &support {
            if !w.is_finite() || *w <= 0.0 {
                return Err(Error::Invariant(format!(
                    "token {token:?} has non-positive weight {w}"
                )));
            }
            if !seen.insert(token.as_str()) {
                return Err(Error::SupportMismatch(format!(
                    "token {token:?} appears twice in one distribution"
                )));
            }
        }
        let total: f64 = support.iter().map(|(_, w)| w).sum();
        let support = support
            .into_iter()
            .map(|(t, w)| (t, w / total))
            .collect();
        Ok(TokenDistribution {
            support,
            renormalized: true,
        })
    }

    pub fn support(&self) -> &[(String, f64)] {
        &self.support
    }

    pub fn renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn probability(&self, token: &str) -> f64 {
        self.support
            .iter()
            .find(|(t, _)| t == token)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }

    /// Checks positivity and unit mass (within 1e-9) for renormalized
    /// distributions.
    pub fn validate(&self) -> Result<()> {
        if self.support.iter().any(|(_, p)| *p <= 0.0 || !p.is_finite()) {
            return Err(Error::Invariant("probabilities must be positive".into()));
        }
        if self.renormalized {
            let sum: f64 = self.support.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "renormalized distribution sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Uniform interface over text generators.
///
/// Handles are shareable across workers; implementations enforce their
/// own in-flight limits. Requests are independent and carry no ordering
/// guarantees.
pub trait GenerationBackend: Send + Sync {
    /// Produces a completion for the request. Honors `stop_sequences`
    /// (the returned text excludes the stop match) and `max_tokens`.
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult>;

    /// Total and per-token log-probability of `continuation` after
    /// `prompt` (and optionally an image).
    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> Result<SequenceScore>;

    /// Next-token distribution truncated to `top_k` and renormalized.
    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> Result<TokenDistribution>;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        (**self).generate(request)
    }

    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> Result<SequenceScore> {
        (**self).score_sequence(prompt, image_ref, continuation)
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> Result<TokenDistribution> {
        (**self).next_token_distribution(prompt, image_ref, top_k)
    }
}
