//! Object lexicon, sentence segmentation, and object-tag parsing.
//!
//! Responses are normalized, split into sentences, and scanned for
//! object mentions. A [`SynonymLexicon`] maps surface forms ("bike",
//! "bicycle") to one canonical tag ("bicycle") so that downstream
//! counting treats synonyms as the same object.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Characters a canonical tag or surface form may not contain; they are
/// delimiters in the lexicon and graph file formats.
const FORBIDDEN_TAG_CHARS: [char; 4] = [':', ',', '\t', '\n'];

/// How to handle a surface form that appears under two canonical tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConflictPolicy {
    /// Keep the first-seen mapping and log a warning.
    #[default]
    KeepFirst,
    /// Fail with [`Error::LexiconConflict`].
    Strict,
}

/// Maps surface word forms to canonical object tags.
///
/// Every surface form belongs to exactly one tag, and each tag is a
/// surface form of itself.
#[derive(Debug, Clone)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, BTreeSet<String>>,
    surface_to_tag: BTreeMap<String, String>,
    source_name: String,
}

impl SynonymLexicon {
    /// Builds a lexicon from `(canonical_tag, forms)` pairs. Tags and
    /// forms are lowercased; duplicate tags merge their form sets.
    pub fn from_entries<I, S, F>(source_name: &str, pairs: I, policy: ConflictPolicy) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<F>)>,
        S: AsRef<str>,
        F: AsRef<str>,
    {
        let mut lexicon = SynonymLexicon {
            entries: BTreeMap::new(),
            surface_to_tag: BTreeMap::new(),
            source_name: source_name.to_string(),
        };
        for (tag, forms) in pairs {
            let tag = normalize_form(tag.as_ref());
            validate_tag(&tag)?;
            lexicon.insert_form(&tag, tag.clone(), policy)?;
            for form in forms {
                let form = normalize_form(form.as_ref());
                if form.is_empty() {
                    continue;
                }
                validate_tag(&form)?;
                lexicon.insert_form(&tag, form, policy)?;
            }
        }
        Ok(lexicon)
    }

    fn insert_form(&mut self, tag: &str, form: String, policy: ConflictPolicy) -> Result<()> {
        match self.surface_to_tag.get(&form) {
            Some(existing) if existing != tag => match policy {
                ConflictPolicy::Strict => {
                    return Err(Error::LexiconConflict {
                        surface: form,
                        kept: existing.clone(),
                        rejected: tag.to_string(),
                    })
                }
                ConflictPolicy::KeepFirst => {
                    log::warn!(
                        "surface form {form:?} already maps to {existing:?}; ignoring mapping to {tag:?}"
                    );
                    // The tag itself must still exist as a node even if its
                    // self-form was claimed earlier.
                    self.entries.entry(tag.to_string()).or_default();
                    return Ok(());
                }
            },
            _ => {}
        }
        self.surface_to_tag.insert(form.clone(), tag.to_string());
        self.entries.entry(tag.to_string()).or_default().insert(form);
        Ok(())
    }

    /// Canonical tag for a surface form, if known.
    pub fn tag_for(&self, surface: &str) -> Option<&str> {
        self.surface_to_tag
            .get(&normalize_form(surface))
            .map(String::as_str)
    }

    /// All canonical tags, sorted.
    pub fn canonical_tags(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Surface forms registered for a tag.
    pub fn surface_forms(&self, tag: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(tag)
    }

    /// Iterates `(surface_form, canonical_tag)` pairs, sorted by form.
    pub fn surface_mappings(&self) -> impl Iterator<Item = (&str, &str)> {
        self.surface_to_tag
            .iter()
            .map(|(f, t)| (f.as_str(), t.as_str()))
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn validate_tag(tag: &str) -> Result<()> {
    if let Some(c) = tag.chars().find(|c| FORBIDDEN_TAG_CHARS.contains(c)) {
        return Err(Error::Invariant(format!(
            "tag or surface form {tag:?} contains reserved character {c:?}"
        )));
    }
    Ok(())
}

/// Lowercases and collapses internal whitespace to single spaces.
fn normalize_form(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Loads a lexicon file: one `canonical_tag: form1, form2, ...` entry per
/// line, `#` starts a comment, duplicate canonical tags merge their forms.
pub fn load_lexicon(path: impl AsRef<Path>, policy: ConflictPolicy) -> Result<SynonymLexicon> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (tag, forms) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(path, i + 1, "expected `tag: form, form, ...`"))?;
        if tag.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "empty canonical tag"));
        }
        let forms: Vec<String> = forms
            .split(',')
            .map(|f| f.trim().to_string())
            .filter(|f| !f.is_empty())
            .collect();
        pairs.push((tag.trim().to_string(), forms));
    }
    SynonymLexicon::from_entries(&name, pairs, policy)
}

/// A response split into sentences. Joining the sentences with single
/// spaces reconstructs the whitespace-normalized response text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedResponse {
    sentences: Vec<String>,
}

impl SegmentedResponse {
    /// Wraps pre-split sentences, normalizing whitespace inside each.
    pub fn from_sentences<I, S>(sentences: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let sentences: Vec<String> = sentences
            .into_iter()
            .map(|s| normalize_whitespace(s.as_ref()))
            .collect();
        if sentences.is_empty() || sentences.iter().any(String::is_empty) {
            return Err(Error::EmptyInput(
                "segmented response must contain only non-empty sentences".into(),
            ));
        }
        Ok(SegmentedResponse { sentences })
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    /// Number of sentences (the `L` driving injection counts).
    pub fn sentence_count(&self) -> usize {
        self.sentences.len()
    }

    /// The normalized response text.
    pub fn joined(&self) -> String {
        self.sentences.join(" ")
    }
}

impl fmt::Display for SegmentedResponse {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.joined())
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deterministic rule-based sentence splitter.
///
/// A sentence boundary is a maximal run of `.`/`!`/`?`, optionally
/// followed by closing quotes or brackets, followed by whitespace or end
/// of text. A single period does not split when the preceding token is a
/// known abbreviation or contains an internal period (initialisms such
/// as "U.S.A."); all-digit tokens do split ("weighs 3. The...").
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: BTreeSet<String>,
}

/// Abbreviations that suppress splitting after a single period.
const DEFAULT_ABBREVIATIONS: [&str; 20] = [
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "fig", "al",
    "inc", "ltd", "co", "dept", "approx", "mt",
];

const CLOSING_CHARS: [char; 7] = ['"', '\'', ')', ']', '}', '\u{2019}', '\u{201d}'];

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter {
            abbreviations: DEFAULT_ABBREVIATIONS
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl Segmenter {
    /// Replaces the default abbreviation stoplist with one loaded from a
    /// file (one lowercase token per line, `#` comments).
    pub fn from_abbreviation_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let abbreviations = text
            .lines()
            .map(|l| l.trim().trim_end_matches('.').to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Ok(Segmenter { abbreviations })
    }

    /// Splits a response into sentences.
    pub fn segment(&self, response: &str) -> Result<SegmentedResponse> {
        let text = normalize_whitespace(response);
        if text.is_empty() {
            return Err(Error::EmptyInput("response is empty".into()));
        }
        let chars: Vec<char> = text.chars().collect();
        let mut sentences = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            if !is_terminator(chars[i]) {
                i += 1;
                continue;
            }
            let run_start = i;
            while i < chars.len() && is_terminator(chars[i]) {
                i += 1;
            }
            let run_len = i - run_start;
            let mut end = i;
            while end < chars.len() && CLOSING_CHARS.contains(&chars[end]) {
                end += 1;
            }
            let at_boundary = end == chars.len() || chars[end] == ' ';
            if !at_boundary {
                i = end;
                continue;
            }
            if run_len == 1 && chars[run_start] == '.' && self.is_abbreviation(&chars[..run_start])
            {
                i = end;
                continue;
            }
            let sentence: String = chars[start..end].iter().collect();
            let sentence = sentence.trim().to_string();
            if !sentence.is_empty() {
                sentences.push(sentence);
            }
            start = end;
            i = end;
        }
        let tail: String = chars[start..].iter().collect();
        let tail = tail.trim().to_string();
        if !tail.is_empty() {
            sentences.push(tail);
        }
        SegmentedResponse::from_sentences(sentences)
    }

    /// Inspects the token immediately before a period.
    fn is_abbreviation(&self, before: &[char]) -> bool {
        let mut token: Vec<char> = Vec::new();
        for &c in before.iter().rev() {
            if c.is_alphanumeric() || c == '.' {
                token.push(c.to_ascii_lowercase());
            } else {
                break;
            }
        }
        token.reverse();
        while token.first() == Some(&'.') {
            token.remove(0);
        }
        if token.is_empty() {
            return false;
        }
        if token.iter().all(|c| c.is_ascii_digit()) {
            return false;
        }
        let token: String = token.into_iter().collect();
        token.contains('.') || self.abbreviations.contains(&token)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Convenience wrapper using the default abbreviation stoplist.
pub fn segment_sentences(response: &str) -> Result<SegmentedResponse> {
    Segmenter::default().segment(response)
}

/// Canonical object tags found in a response, as a whole and per sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectTagSet {
    tags: BTreeSet<String>,
    per_sentence: Vec<BTreeSet<String>>,
}

impl ObjectTagSet {
    pub fn tags(&self) -> &BTreeSet<String> {
        &self.tags
    }

    pub fn per_sentence(&self) -> &[BTreeSet<String>] {
        &self.per_sentence
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.tags.contains(tag)
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

/// Scans a segmented response for object mentions.
///
/// Matching is case-insensitive, runs at word boundaries, and prefers
/// the longest surface form starting at a given word. The final word of
/// a form also matches its "s"/"es" plural.
pub fn parse_objects(response: &SegmentedResponse, lexicon: &SynonymLexicon) -> ObjectTagSet {
    let matcher = FormMatcher::new(lexicon);
    let per_sentence: Vec<BTreeSet<String>> = response
        .sentences()
        .iter()
        .map(|s| matcher.scan(s))
        .collect();
    let tags = per_sentence.iter().flatten().cloned().collect();
    ObjectTagSet { tags, per_sentence }
}

struct FormEntry {
    words: Vec<String>,
    tag: String,
}

struct FormMatcher {
    // Indexed by every singular candidate of a form's first word.
    by_first_word: HashMap<String, Vec<FormEntry>>,
}

impl FormMatcher {
    fn new(lexicon: &SynonymLexicon) -> Self {
        let mut by_first_word: HashMap<String, Vec<FormEntry>> = HashMap::new();
        for (form, tag) in lexicon.surface_mappings() {
            let words: Vec<String> = form.split(' ').map(str::to_string).collect();
            if words.is_empty() {
                continue;
            }
            by_first_word
                .entry(words[0].clone())
                .or_default()
                .push(FormEntry {
                    words,
                    tag: tag.to_string(),
                });
        }
        // Longest form first; ties resolved below in `scan`.
        for entries in by_first_word.values_mut() {
            entries.sort_by(|a, b| {
                b.words
                    .len()
                    .cmp(&a.words.len())
                    .then_with(|| a.tag.cmp(&b.tag))
            });
        }
        FormMatcher { by_first_word }
    }

    fn scan(&self, sentence: &str) -> BTreeSet<String> {
        let tokens = word_tokens(sentence);
        let mut found = BTreeSet::new();
        let mut i = 0usize;
        while i < tokens.len() {
            match self.longest_match(&tokens, i) {
                Some((tag, consumed)) => {
                    found.insert(tag.to_string());
                    i += consumed;
                }
                None => i += 1,
            }
        }
        found
    }

    fn longest_match<'a>(&'a self, tokens: &[String], at: usize) -> Option<(&'a str, usize)> {
        let mut best: Option<(&FormEntry, bool)> = None;
        for stem in singular_candidates(&tokens[at]) {
            let Some(entries) = self.by_first_word.get(&stem) else {
                continue;
            };
            for entry in entries {
                let n = entry.words.len();
                if at + n > tokens.len() {
                    continue;
                }
                // A single-word form's first word is also its last, so the
                // plural-tolerant stem lookup already covered it; the first
                // word of a longer form must match exactly.
                if n > 1 && entry.words[0] != tokens[at] {
                    continue;
                }
                if n == 1 && entry.words[0] != stem {
                    continue;
                }
                let interior_ok = (1..n.saturating_sub(1)).all(|k| entry.words[k] == tokens[at + k]);
                let last_ok = n == 1
                    || singular_candidates(&tokens[at + n - 1]).contains(&entry.words[n - 1]);
                if !interior_ok || !last_ok {
                    continue;
                }
                // Longest match wins; among equal lengths prefer an exact
                // (non-plural) match, then the lexicographically smallest tag.
                let exact = entry.words[n - 1] == tokens[at + n - 1];
                let better = match best {
                    None => true,
                    Some((cur, cur_exact)) => {
                        n > cur.words.len()
                            || (n == cur.words.len() && exact && !cur_exact)
                            || (n == cur.words.len() && exact == cur_exact && entry.tag < cur.tag)
                    }
                };
                if better {
                    best = Some((entry, exact));
                }
            }
        }
        best.map(|(e, _)| (e.tag.as_str(), e.words.len()))
    }
}

/// Forms the token itself plus de-pluralized variants could match.
fn singular_candidates(token: &str) -> Vec<String> {
    let mut out = vec![token.to_string()];
    if let Some(stem) = token.strip_suffix("es") {
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
    }
    if let Some(stem) = token.strip_suffix('s') {
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
    }
    out
}

/// Lowercased word tokens: maximal runs of alphanumerics, `'`, `-`, `_`.
fn word_tokens(sentence: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in sentence.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' || c == '-' || c == '_' {
            current.push(c);
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}
