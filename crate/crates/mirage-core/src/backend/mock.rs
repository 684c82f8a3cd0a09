//! Deterministic in-process backend over a [`ToyLanguageModel`].
//!
//! Every operation is a pure function of `(prompt, image_ref, seed)`:
//! greedy decoding at temperature 0, seeded categorical sampling above
//! it. Optional extras keep pipeline tests expressive without touching
//! purity: fixed scripted responses per `(prompt, image)` key, a second
//! logits table used when an image reference is present, and a set of
//! "opener" tokens picked by hash at each sentence start so that
//! different images yield different multi-sentence descriptions.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::backend::{
    FinishReason, GenerationBackend, GenerationRequest, GenerationResult, SequenceScore,
    TokenDistribution, TokenLogprob,
};
use crate::error::{Error, Result};
use crate::toy::{TokenId, ToyLanguageModel};

/// Vocabulary entry unknown words map to.
pub const UNK_TOKEN: &str = "<unk>";

const TERMINATORS: [&str; 3] = [".", "!", "?"];

#[derive(Debug, Clone)]
pub struct MockBackend {
    model: ToyLanguageModel,
    image_model: Option<ToyLanguageModel>,
    openers: Vec<TokenId>,
    scripted: BTreeMap<(String, Option<String>), String>,
    unk: TokenId,
    logprob_top_k: usize,
}

impl MockBackend {
    /// Wraps a toy model; its vocabulary must contain [`UNK_TOKEN`].
    pub fn new(model: ToyLanguageModel) -> Result<Self> {
        let unk = model.token_id(UNK_TOKEN)?;
        Ok(MockBackend {
            model,
            image_model: None,
            openers: Vec::new(),
            scripted: BTreeMap::new(),
            unk,
            logprob_top_k: 5,
        })
    }

    /// Installs a second logits table used whenever a request carries an
    /// image reference. Must share the text model's vocabulary.
    pub fn with_image_model(mut self, image_model: ToyLanguageModel) -> Result<Self> {
        if image_model.vocab() != self.model.vocab() {
            return Err(Error::Config(
                "image model must share the text model's vocabulary".into(),
            ));
        }
        self.image_model = Some(image_model);
        Ok(self)
    }

    /// Enables hash-picked sentence openers drawn from `tokens`.
    pub fn with_openers<S: AsRef<str>>(mut self, tokens: &[S]) -> Result<Self> {
        self.openers = tokens
            .iter()
            .map(|t| self.model.token_id(t.as_ref()))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Registers a fixed response for an exact `(prompt, image)` key;
    /// stop sequences and `max_tokens` still apply to it.
    pub fn with_scripted_response(
        mut self,
        prompt: impl Into<String>,
        image_ref: Option<&str>,
        text: impl Into<String>,
    ) -> Self {
        self.scripted
            .insert((prompt.into(), image_ref.map(str::to_string)), text.into());
        self
    }

    pub fn model(&self) -> &ToyLanguageModel {
        &self.model
    }

    /// A ready-made scene-description model: agent and object nouns with
    /// hand-set transitions that always walk into a terminator, plus
    /// rarely-used filler words that score poorly. Openers are enabled,
    /// so descriptions vary with the image reference.
    pub fn demo() -> Self {
        let model = demo_model();
        let openers = [
            "dog", "cat", "man", "woman", "table", "couch", "lamp", "window", "rug", "ball",
            "kite", "frisbee",
        ];
        MockBackend::new(model)
            .expect("demo vocabulary contains <unk>")
            .with_openers(&openers)
            .expect("openers are in the demo vocabulary")
    }

    fn model_for(&self, image_ref: Option<&str>) -> &ToyLanguageModel {
        match (&self.image_model, image_ref) {
            (Some(m), Some(_)) => m,
            _ => &self.model,
        }
    }

    /// Lenient tokenizer: lowercased words (unknown ones become
    /// [`UNK_TOKEN`]) and standalone terminator tokens.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        tokenize_words(text)
            .into_iter()
            .map(|w| self.model.token_id_or(&w, self.unk))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        detokenize(
            &tokens
                .iter()
                .map(|&t| self.model.token(t).to_string())
                .collect::<Vec<_>>(),
        )
    }

    fn opener_for(&self, request: &GenerationRequest, sentence_index: usize) -> TokenId {
        let mut hasher = Sha256::new();
        hasher.update(b"mock-opener");
        hasher.update(request.prompt.as_bytes());
        hasher.update([0u8]);
        hasher.update(request.image_ref.as_deref().unwrap_or("").as_bytes());
        hasher.update(request.seed.unwrap_or(0).to_le_bytes());
        hasher.update((sentence_index as u64).to_le_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        self.openers[(u64::from_le_bytes(bytes) % self.openers.len() as u64) as usize]
    }

    fn sampling_rng(&self, request: &GenerationRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"mock-sample");
        hasher.update(request.prompt.as_bytes());
        hasher.update([0u8]);
        hasher.update(request.image_ref.as_deref().unwrap_or("").as_bytes());
        hasher.update(request.seed.unwrap_or(0).to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    fn walk(&self, request: &GenerationRequest, model: &ToyLanguageModel) -> Vec<TokenId> {
        let context = self.tokenize(&request.prompt);
        let mut prev = model.context_row(&context);
        let mut rng = self.sampling_rng(request);
        let mut emitted = Vec::new();
        let mut sentence_index = 0usize;
        while emitted.len() < request.max_tokens {
            // A sentence starts where the previous token is a terminator;
            // a prompt ending mid-sentence continues that sentence.
            let at_sentence_start = TERMINATORS.contains(&model.token(prev));
            let next = if !self.openers.is_empty() && at_sentence_start {
                let opener = self.opener_for(request, sentence_index);
                sentence_index += 1;
                opener
            } else if request.temperature == 0.0 {
                model.argmax_next(prev)
            } else {
                sample_tempered(model, prev, request.temperature, &mut rng)
            };
            emitted.push(next);
            prev = next;
        }
        emitted
    }

    fn logprobs_for(
        &self,
        model: &ToyLanguageModel,
        context: &[TokenId],
        emitted: &[TokenId],
    ) -> Vec<TokenLogprob> {
        let mut prev = model.context_row(context);
        let mut out = Vec::with_capacity(emitted.len());
        for &token in emitted {
            let log_row = model.log_row(prev);
            let mut ranked: Vec<(TokenId, f64)> =
                log_row.iter().copied().enumerate().collect();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut top_k: Vec<(String, f64)> = ranked
                .iter()
                .take(self.logprob_top_k)
                .map(|(id, lp)| (model.token(*id).to_string(), *lp))
                .collect();
            if !ranked
                .iter()
                .take(self.logprob_top_k)
                .any(|(id, _)| *id == token)
            {
                top_k.push((model.token(token).to_string(), log_row[token]));
            }
            out.push(TokenLogprob {
                token: model.token(token).to_string(),
                logprob: log_row[token],
                top_k,
            });
            prev = token;
        }
        out
    }
}

impl GenerationBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let model = self.model_for(request.image_ref.as_deref());
        let script_key = (request.prompt.clone(), request.image_ref.clone());

        let (emitted, truncated_by_length) = match self.scripted.get(&script_key) {
            Some(text) => {
                let tokens = self.tokenize(text);
                let cut = tokens.len() > request.max_tokens;
                (tokens[..tokens.len().min(request.max_tokens)].to_vec(), cut)
            }
            None => (self.walk(request, model), true),
        };

        let full_text = self.detokenize(&emitted);
        let (text, stopped) = apply_stop_sequences(&full_text, &request.stop_sequences);
        let kept_tokens = if stopped {
            let kept = self.tokenize(&text);
            emitted[..kept.len().min(emitted.len())].to_vec()
        } else {
            emitted
        };

        let finish_reason = if text.is_empty() {
            FinishReason::Error
        } else if stopped {
            FinishReason::Stop
        } else if truncated_by_length {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let context = self.tokenize(&request.prompt);
        Ok(GenerationResult {
            token_logprobs: Some(self.logprobs_for(model, &context, &kept_tokens)),
            text,
            finish_reason,
        })
    }

    fn score_sequence(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        continuation: &str,
    ) -> Result<SequenceScore> {
        let model = self.model_for(image_ref);
        let context = self.tokenize(prompt);
        let tokens = self.tokenize(continuation);
        if tokens.is_empty() {
            return Err(Error::EmptyInput(
                "continuation tokenizes to zero tokens".into(),
            ));
        }
        let per_token = model.transition_logprobs(&context, &tokens);
        Ok(SequenceScore {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    fn next_token_distribution(
        &self,
        prompt: &str,
        image_ref: Option<&str>,
        top_k: usize,
    ) -> Result<TokenDistribution> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        let model = self.model_for(image_ref);
        let context = self.tokenize(prompt);
        let row = model.row(model.context_row(&context));
        let mut ranked: Vec<(TokenId, f64)> = row.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        TokenDistribution::from_weighted(
            ranked
                .into_iter()
                .take(top_k)
                .map(|(id, p)| (model.token(id).to_string(), p))
                .collect(),
        )
    }
}

fn sample_tempered(
    model: &ToyLanguageModel,
    prev: TokenId,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    let logits = &model.logits()[prev];
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let target = rng.random::<f64>() * total;
    let mut cumulative = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cumulative += w;
        if cumulative > target {
            return i;
        }
    }
    weights.len() - 1
}

/// Cuts `text` before the earliest stop-sequence match.
fn apply_stop_sequences(text: &str, stops: &[String]) -> (String, bool) {
    let mut cut: Option<usize> = None;
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = Some(cut.map_or(pos, |c| c.min(pos)));
        }
    }
    match cut {
        Some(pos) => (text[..pos].trim_end().to_string(), true),
        None => (text.to_string(), false),
    }
}

/// Splits into lowercased word strings and standalone terminators.
fn tokenize_words(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' || c == '-' || c == '_' || c == '<' || c == '>' {
            current.push(c);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if c == '.' || c == '!' || c == '?' {
                tokens.push(c.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for token in tokens {
        if TERMINATORS.contains(&token.as_str()) {
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

/// Builds the demo bigram table. Every greedy walk reaches a period:
/// agents take a verb, verbs take a preposition, objects link through
/// "is" to an adjective, and adjectives close the sentence.
fn demo_model() -> ToyLanguageModel {
    let vocab = [
        UNK_TOKEN, ".", "a", "the", "dog", "cat", "man", "woman", "table", "couch", "lamp",
        "window", "rug", "ball", "kite", "frisbee", "park", "kitchen", "grass", "chair", "book",
        "plant", "mirror", "clock", "vase", "shelf", "basket", "runs", "sits", "sleeps", "stands",
        "rests", "on", "in", "near", "by", "is", "there", "green", "quiet", "warm", "soft",
    ];
    let n = vocab.len();
    let mut logits = vec![vec![-4.0; n]; n];
    let id = |t: &str| vocab.iter().position(|v| *v == t).unwrap();
    let mut set = |prev: &str, next: &str, v: f64| {
        logits[id(prev)][id(next)] = v;
    };

    set(".", "a", 3.0);
    set(".", "the", 2.7);
    let agents = ["dog", "cat", "man", "woman"];
    let objects = [
        "table", "couch", "lamp", "window", "rug", "ball", "kite", "frisbee", "park", "kitchen",
        "grass", "chair", "book", "plant", "mirror", "clock", "vase", "shelf", "basket",
    ];
    for (i, noun) in agents.iter().chain(objects.iter()).copied().enumerate() {
        set("a", noun, 2.8 - 0.05 * i as f64);
        set("the", noun, 1.6 + 0.05 * i as f64);
    }
    for (agent, verb) in agents.into_iter().zip(["runs", "sits", "sleeps", "stands"]) {
        set(agent, verb, 3.0);
    }
    set("runs", "in", 2.5);
    set("sits", "on", 2.5);
    set("sleeps", "on", 2.5);
    set("stands", "near", 2.5);
    set("rests", "by", 2.5);
    for prep in ["on", "in", "near", "by"] {
        set(prep, "the", 3.0);
    }
    for object in objects {
        set(object, "is", 3.0);
        set(object, ".", 1.5);
    }
    for (i, adj) in ["green", "quiet", "warm", "soft"].into_iter().enumerate() {
        set("is", adj, 2.5 - 0.1 * i as f64);
        set(adj, ".", 3.0);
    }
    // Walks entering unknown-word territory come back out through "a"
    // so template completions never stall on an immediate terminator.
    set(UNK_TOKEN, "a", 2.0);
    set(UNK_TOKEN, ".", 1.0);
    set("there", "is", 2.0);

    ToyLanguageModel::new(&vocab, logits, ".").unwrap()
}
