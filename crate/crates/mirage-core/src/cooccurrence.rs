//! Co-occurrence graph over canonical object tags.
//!
//! The graph counts, per response, every unordered pair of distinct tags
//! appearing together (once per response regardless of mention count)
//! and the number of responses containing each tag. Queries against it
//! pick hallucination candidates and rank how strongly a tag co-occurs
//! with a set of anchors.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::lexicon::ObjectTagSet;

const GRAPH_FORMAT_VERSION: &str = "v1";
const BUILD_CHUNK: usize = 256;

/// Weighted undirected co-occurrence graph.
///
/// Structurally symmetric: `weight(a, b)` equals `weight(b, a)`, and no
/// self-pairs are stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CooccurrenceGraph {
    adjacency: BTreeMap<String, BTreeMap<String, u64>>,
    node_frequency: BTreeMap<String, u64>,
    corpus_size: u64,
}

impl CooccurrenceGraph {
    /// Number of responses the graph was built from.
    pub fn corpus_size(&self) -> u64 {
        self.corpus_size
    }

    pub fn node_count(&self) -> usize {
        self.node_frequency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeMap::len).sum::<usize>() / 2
    }

    /// Tags in lexicographic order.
    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.node_frequency.keys().map(String::as_str)
    }

    /// Number of responses containing `tag`.
    pub fn frequency(&self, tag: &str) -> u64 {
        self.node_frequency.get(tag).copied().unwrap_or(0)
    }

    /// Co-occurrence count of an unordered pair; 0 if absent.
    pub fn weight(&self, a: &str, b: &str) -> u64 {
        self.adjacency
            .get(a)
            .and_then(|n| n.get(b))
            .copied()
            .unwrap_or(0)
    }

    /// Neighbors of a tag with their counts, sorted by neighbor tag.
    pub fn neighbors(&self, tag: &str) -> impl Iterator<Item = (&str, u64)> {
        self.adjacency
            .get(tag)
            .into_iter()
            .flat_map(|n| n.iter().map(|(t, c)| (t.as_str(), *c)))
    }

    /// Sum of edge weights between `candidate` and every context tag.
    pub fn context_score(&self, candidate: &str, context: &BTreeSet<String>) -> u64 {
        context.iter().map(|t| self.weight(candidate, t)).sum()
    }

    /// Picks the tag outside `exclude` that most frequently co-occurs
    /// with the context tags (sum of edge weights). Ties break toward
    /// higher node frequency, then the lexicographically smallest tag.
    /// With no positive score anywhere the most frequent non-excluded
    /// tag is returned; `None` means every tag is excluded.
    pub fn query_hallucinated_object(
        &self,
        context_tags: &BTreeSet<String>,
        exclude: &BTreeSet<String>,
    ) -> Option<&str> {
        let mut best: Option<(&str, u64, u64)> = None;
        for tag in self.node_frequency.keys() {
            if exclude.contains(tag) {
                continue;
            }
            let score = self.context_score(tag, context_tags);
            let freq = self.frequency(tag);
            let better = match best {
                None => true,
                Some((cur_tag, cur_score, cur_freq)) => {
                    score > cur_score
                        || (score == cur_score && freq > cur_freq)
                        || (score == cur_score && freq == cur_freq && tag.as_str() < cur_tag)
                }
            };
            if better {
                best = Some((tag, score, freq));
            }
        }
        best.map(|(tag, _, _)| tag)
    }

    /// Competition rank of `candidate` among all non-anchor tags by
    /// descending context score against the anchors: `1 + ` the number
    /// of non-anchor tags scoring strictly higher. `None` when the
    /// candidate never co-occurs with any anchor.
    pub fn cooccurrence_rank(
        &self,
        anchor_tags: &BTreeSet<String>,
        candidate: &str,
    ) -> Option<usize> {
        let own = self.context_score(candidate, anchor_tags);
        if own == 0 {
            return None;
        }
        let above = self
            .node_frequency
            .keys()
            .filter(|t| t.as_str() != candidate && !anchor_tags.contains(*t))
            .filter(|t| self.context_score(t, anchor_tags) > own)
            .count();
        Some(above + 1)
    }

    fn merge(&mut self, other: CooccurrenceGraph) {
        for (tag, freq) in other.node_frequency {
            *self.node_frequency.entry(tag).or_insert(0) += freq;
        }
        for (tag, neighbors) in other.adjacency {
            let entry = self.adjacency.entry(tag).or_default();
            for (n, c) in neighbors {
                *entry.entry(n).or_insert(0) += c;
            }
        }
        self.corpus_size += other.corpus_size;
    }

    fn from_responses(corpus: &[ObjectTagSet]) -> CooccurrenceGraph {
        let mut graph = CooccurrenceGraph::default();
        for response in corpus {
            let tags = response.tags();
            for tag in tags {
                *graph.node_frequency.entry(tag.clone()).or_insert(0) += 1;
            }
            for a in tags {
                for b in tags {
                    if a < b {
                        *graph
                            .adjacency
                            .entry(a.clone())
                            .or_default()
                            .entry(b.clone())
                            .or_insert(0) += 1;
                        *graph
                            .adjacency
                            .entry(b.clone())
                            .or_default()
                            .entry(a.clone())
                            .or_insert(0) += 1;
                    }
                }
            }
        }
        graph.corpus_size = corpus.len() as u64;
        graph
    }

    /// Serializes the graph: a version header, then one tab-separated
    /// line per tag (`tag<TAB>frequency<TAB>neighbor:count,...`) in
    /// lexicographic order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::dataset::atomic_write(path, |w| {
            let mut w = BufWriter::new(w);
            writeln!(
                w,
                "#mirage-graph {GRAPH_FORMAT_VERSION} corpus_size={}",
                self.corpus_size
            )?;
            for (tag, freq) in &self.node_frequency {
                let neighbors = self
                    .adjacency
                    .get(tag)
                    .map(|n| {
                        n.iter()
                            .map(|(t, c)| format!("{t}:{c}"))
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .unwrap_or_default();
                writeln!(w, "{tag}\t{freq}\t{neighbors}")?;
            }
            w.flush()
        })
    }

    /// Reads a graph produced by [`CooccurrenceGraph::save`], verifying
    /// header, field shape, and edge symmetry.
    pub fn load(path: impl AsRef<Path>) -> Result<CooccurrenceGraph> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty graph file"))?;
        let expected_prefix = format!("#mirage-graph {GRAPH_FORMAT_VERSION} corpus_size=");
        let corpus_size: u64 = header
            .strip_prefix(&expected_prefix)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::parse(path, 1, format!("bad header {header:?}; expected `{expected_prefix}N`"))
            })?;
        let mut graph = CooccurrenceGraph {
            corpus_size,
            ..Default::default()
        };
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(tag), Some(freq), Some(neighbors), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(path, i + 1, "expected 3 tab-separated fields"));
            };
            let freq: u64 = freq
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad frequency {freq:?}")))?;
            graph.node_frequency.insert(tag.to_string(), freq);
            if !neighbors.is_empty() {
                let mut adj = BTreeMap::new();
                for pair in neighbors.split(',') {
                    let (n, c) = pair.split_once(':').ok_or_else(|| {
                        Error::parse(path, i + 1, format!("bad neighbor entry {pair:?}"))
                    })?;
                    let c: u64 = c.parse().map_err(|_| {
                        Error::parse(path, i + 1, format!("bad neighbor count {pair:?}"))
                    })?;
                    adj.insert(n.to_string(), c);
                }
                graph.adjacency.insert(tag.to_string(), adj);
            }
        }
        for (tag, neighbors) in &graph.adjacency {
            for (n, c) in neighbors {
                if graph.weight(n, tag) != *c {
                    return Err(Error::parse(
                        path,
                        0,
                        format!("asymmetric edge {tag:?} <-> {n:?}"),
                    ));
                }
                if !graph.node_frequency.contains_key(n) {
                    return Err(Error::parse(path, 0, format!("edge references unknown tag {n:?}")));
                }
            }
        }
        Ok(graph)
    }
}

/// Builds the graph from a corpus of parsed responses, in parallel when
/// the `parallel` feature is enabled. Per-chunk partial counts merge in
/// input order, so the result is identical to [`build_graph_seq`].
pub fn build_graph(corpus: &[ObjectTagSet]) -> Result<CooccurrenceGraph> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("co-occurrence corpus is empty".into()));
    }
    let chunks: Vec<&[ObjectTagSet]> = corpus.chunks(BUILD_CHUNK).collect();
    let partials = exec::map_ordered(&chunks, |chunk| CooccurrenceGraph::from_responses(chunk));
    let mut graph = CooccurrenceGraph::default();
    for partial in partials {
        graph.merge(partial);
    }
    Ok(graph)
}

/// Sequential reference implementation of [`build_graph`].
pub fn build_graph_seq(corpus: &[ObjectTagSet]) -> Result<CooccurrenceGraph> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("co-occurrence corpus is empty".into()));
    }
    Ok(CooccurrenceGraph::from_responses(corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{parse_objects, ConflictPolicy, SegmentedResponse, SynonymLexicon};

    fn tagset(words: &[&str]) -> ObjectTagSet {
        let entries: Vec<(&str, Vec<&str>)> = words.iter().map(|w| (*w, vec![])).collect();
        let lexicon = SynonymLexicon::from_entries("t", entries, ConflictPolicy::KeepFirst).unwrap();
        let sentence = if words.is_empty() {
            "nothing at all".to_string()
        } else {
            format!("a {} here.", words.join(" and a "))
        };
        let seg = SegmentedResponse::from_sentences([sentence]).unwrap();
        parse_objects(&seg, &lexicon)
    }

    #[test]
    fn counts_pairs_once_per_response() {
        let corpus = vec![
            tagset(&["dog", "frisbee"]),
            tagset(&["dog", "frisbee"]),
            tagset(&["dog"]),
        ];
        let graph = build_graph(&corpus).unwrap();
        assert_eq!(graph.weight("dog", "frisbee"), 2);
        assert_eq!(graph.weight("frisbee", "dog"), 2);
        assert_eq!(graph.frequency("dog"), 3);
        assert_eq!(graph.frequency("frisbee"), 2);
        assert_eq!(graph.corpus_size(), 3);
    }

    #[test]
    fn single_tag_responses_make_edgeless_nodes() {
        let corpus = vec![tagset(&["dog"]), tagset(&["cat"])];
        let graph = build_graph(&corpus).unwrap();
        assert_eq!(graph.node_count(), 2);
        assert_eq!(graph.edge_count(), 0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_graph(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn query_returns_only_candidate() {
        let corpus = vec![
            tagset(&["dog", "frisbee"]),
            tagset(&["dog", "frisbee"]),
            tagset(&["dog", "frisbee"]),
        ];
        let graph = build_graph(&corpus).unwrap();
        let context: BTreeSet<String> = ["dog".to_string()].into();
        let exclude: BTreeSet<String> = ["dog".to_string()].into();
        assert_eq!(graph.query_hallucinated_object(&context, &exclude), Some("frisbee"));
    }

    #[test]
    fn query_exhausted_candidates_returns_none() {
        let corpus = vec![tagset(&["dog", "frisbee"])];
        let graph = build_graph(&corpus).unwrap();
        let exclude: BTreeSet<String> =
            ["dog".to_string(), "frisbee".to_string()].into();
        assert_eq!(graph.query_hallucinated_object(&BTreeSet::new(), &exclude), None);
    }

    #[test]
    fn query_zero_scores_fall_back_to_frequency() {
        let corpus = vec![
            tagset(&["dog"]),
            tagset(&["dog"]),
            tagset(&["cat"]),
            tagset(&["ant", "bee"]),
        ];
        let graph = build_graph(&corpus).unwrap();
        // Context tag has no edges at all, so every score is zero.
        let context: BTreeSet<String> = ["cat".to_string()].into();
        let exclude: BTreeSet<String> = ["cat".to_string()].into();
        assert_eq!(graph.query_hallucinated_object(&context, &exclude), Some("dog"));
    }

    #[test]
    fn query_never_returns_excluded_tags() {
        let corpus = vec![
            tagset(&["dog", "frisbee", "park"]),
            tagset(&["dog", "park"]),
        ];
        let graph = build_graph(&corpus).unwrap();
        let context: BTreeSet<String> = ["dog".to_string()].into();
        let exclude: BTreeSet<String> = ["park".to_string(), "dog".to_string()].into();
        let got = graph.query_hallucinated_object(&context, &exclude).unwrap();
        assert!(!exclude.contains(got));
    }

    #[test]
    fn rank_of_unique_cooccurring_tag_is_one() {
        let corpus = vec![tagset(&["dog", "frisbee"]), tagset(&["dog", "frisbee"])];
        let graph = build_graph(&corpus).unwrap();
        let anchors: BTreeSet<String> = ["dog".to_string()].into();
        assert_eq!(graph.cooccurrence_rank(&anchors, "frisbee"), Some(1));
    }

    #[test]
    fn rank_of_never_cooccurring_tag_is_none() {
        let corpus = vec![tagset(&["dog", "frisbee"]), tagset(&["cat"])];
        let graph = build_graph(&corpus).unwrap();
        let anchors: BTreeSet<String> = ["dog".to_string()].into();
        assert_eq!(graph.cooccurrence_rank(&anchors, "cat"), None);
    }

    #[test]
    fn shuffled_corpus_builds_identical_graph() {
        let mut corpus = vec![
            tagset(&["dog", "frisbee"]),
            tagset(&["cat", "sofa", "lamp"]),
            tagset(&["dog", "cat"]),
            tagset(&["lamp"]),
        ];
        let forward = build_graph(&corpus).unwrap();
        corpus.reverse();
        let backward = build_graph(&corpus).unwrap();
        assert_eq!(forward.adjacency, backward.adjacency);
        assert_eq!(forward.node_frequency, backward.node_frequency);
    }

    #[test]
    fn parallel_and_sequential_builds_agree() {
        let corpus: Vec<ObjectTagSet> = (0..600)
            .map(|i| match i % 4 {
                0 => tagset(&["dog", "frisbee"]),
                1 => tagset(&["cat", "sofa"]),
                2 => tagset(&["dog", "cat", "lamp"]),
                _ => tagset(&["lamp"]),
            })
            .collect();
        assert_eq!(build_graph(&corpus).unwrap(), build_graph_seq(&corpus).unwrap());
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = vec![
            tagset(&["dog", "frisbee", "park"]),
            tagset(&["dog", "park"]),
            tagset(&["sofa"]),
        ];
        let graph = build_graph(&corpus).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.tsv");
        graph.save(&path).unwrap();
        let loaded = CooccurrenceGraph::load(&path).unwrap();
        assert_eq!(graph, loaded);
        // Deterministic bytes on re-save.
        let first = std::fs::read(&path).unwrap();
        graph.save(&path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn load_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.tsv");
        std::fs::write(&path, "#something-else\n").unwrap();
        assert!(matches!(CooccurrenceGraph::load(&path), Err(Error::Parse { .. })));
    }
}
