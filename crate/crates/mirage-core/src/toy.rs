//! Tabular bigram language model.
//!
//! Small enough to enumerate exactly, rich enough that sequence
//! log-probabilities, next-token distributions, and analytic gradients
//! all interact nontrivially. Rows of the logits table are softmax-
//! normalized conditionals `p(next | prev)`.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Token index into a [`ToyLanguageModel`] vocabulary.
pub type TokenId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLanguageModel {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    /// `logits[prev][next]`, softmax over each row.
    logits: Vec<Vec<f64>>,
    /// Row used as context when scoring from an empty prefix.
    start: TokenId,
}

impl ToyLanguageModel {
    /// Builds a model from an explicit logits table. The table must be
    /// square in the vocabulary size and finite everywhere.
    pub fn new<S: AsRef<str>>(vocab: &[S], logits: Vec<Vec<f64>>, start: &str) -> Result<Self> {
        let vocab: Vec<String> = vocab.iter().map(|s| s.as_ref().to_string()).collect();
        if vocab.is_empty() {
            return Err(Error::Config("toy model vocabulary is empty".into()));
        }
        let mut index = HashMap::new();
        for (i, tok) in vocab.iter().enumerate() {
            if index.insert(tok.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        if logits.len() != vocab.len() || logits.iter().any(|row| row.len() != vocab.len()) {
            return Err(Error::Config(format!(
                "logits table must be {n}x{n} for a {n}-token vocabulary",
                n = vocab.len()
            )));
        }
        if logits.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("logits table contains non-finite values".into()));
        }
        let start = *index
            .get(start)
            .ok_or_else(|| Error::UnknownToken(start.to_string()))?;
        Ok(ToyLanguageModel {
            vocab,
            index,
            logits,
            start,
        })
    }

    /// Uniform model: every conditional is `1 / |vocab|`.
    pub fn uniform<S: AsRef<str>>(vocab: &[S], start: &str) -> Result<Self> {
        let n = vocab.len();
        Self::new(vocab, vec![vec![0.0; n]; n], start)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn start_token(&self) -> TokenId {
        self.start
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.vocab[id]
    }

    pub fn token_id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    /// Token id, mapping out-of-vocabulary tokens to `fallback`.
    pub fn token_id_or(&self, token: &str, fallback: TokenId) -> TokenId {
        self.index.get(token).copied().unwrap_or(fallback)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.token_id(t.as_ref())).collect()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.logits
    }

    /// `log p(· | prev)` via a max-shifted softmax.
    pub fn log_row(&self, prev: TokenId) -> Vec<f64> {
        log_softmax(&self.logits[prev])
    }

    /// `p(· | prev)`; rows sum to 1 within 1e-12.
    pub fn row(&self, prev: TokenId) -> Vec<f64> {
        self.log_row(prev).iter().map(|l| l.exp()).collect()
    }

    /// Context row for a (possibly empty) prefix.
    pub fn context_row(&self, context: &[TokenId]) -> TokenId {
        context.last().copied().unwrap_or(self.start)
    }

    /// Log-probability of `continuation` after `context`: the sum of
    /// per-transition conditionals.
    pub fn sequence_logprob(&self, context: &[TokenId], continuation: &[TokenId]) -> f64 {
        self.transition_logprobs(context, continuation).iter().sum()
    }

    /// Per-token conditional log-probabilities of `continuation`.
    pub fn transition_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Vec<f64> {
        let mut prev = self.context_row(context);
        let mut out = Vec::with_capacity(continuation.len());
        for &next in continuation {
            out.push(self.log_row(prev)[next]);
            prev = next;
        }
        out
    }

    /// Greedy next token: highest probability, lowest index on ties.
    pub fn argmax_next(&self, prev: TokenId) -> TokenId {
        let row = &self.logits[prev];
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|v| v - log_sum).collect()
}
