//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mirage_core::cooccurrence::{build_graph, CooccurrenceGraph};
use mirage_core::curriculum::{
    pair_gap_report, parse_corpus, inject_responses, run_pipeline,
};
use mirage_core::dataset::{
    self, atomic_write, read_annotations, read_preferences, read_responses,
};
use mirage_core::dpo::{demo_setup, train_toy_dpo, DpoConfig};
use mirage_core::injector::DiscardReason;
use mirage_core::lexicon::{ObjectTagSet, SegmentedResponse};
use mirage_core::metrics::{
    chair, cooccur_stats, pdm_h_curve, positional_profile, GroundTruthAnnotation,
};
use mirage_core::{Error, Result};

use crate::config::RunConfig;

pub fn build_graph_cmd(config: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let settings = config.pipeline_settings()?;
    let responses = read_responses(corpus)?;
    if responses.is_empty() {
        return Err(Error::EmptyInput(format!(
            "corpus {} contains no responses",
            corpus.display()
        )));
    }
    let parsed = parse_corpus(&responses, &settings)?;
    let tag_sets: Vec<ObjectTagSet> = parsed.into_iter().map(|(_, tags)| tags).collect();
    let graph = build_graph(&tag_sets)?;
    graph.save(out)?;

    let mut degrees: Vec<(usize, &str)> = graph
        .nodes()
        .map(|tag| (graph.neighbors(tag).count(), tag))
        .collect();
    degrees.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    println!(
        "graph: {} nodes, {} edges, corpus size {}",
        graph.node_count(),
        graph.edge_count(),
        graph.corpus_size()
    );
    println!("top tags by degree:");
    for (degree, tag) in degrees.iter().take(10) {
        println!("  {tag}: {degree} neighbors, frequency {}", graph.frequency(tag));
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn inject_cmd(
    config: &RunConfig,
    corpus: &Path,
    graph_path: &Path,
    out: &Path,
    iteration: u32,
) -> Result<()> {
    let settings = config.pipeline_settings()?;
    let backend = config.backend()?;
    let responses = read_responses(corpus)?;
    if responses.is_empty() {
        return Err(Error::EmptyInput(format!(
            "corpus {} contains no responses",
            corpus.display()
        )));
    }
    let graph = CooccurrenceGraph::load(graph_path)?;
    let parsed = parse_corpus(&responses, &settings)?;

    let corpus_tags: std::collections::BTreeSet<&str> = parsed
        .iter()
        .flat_map(|(_, tags)| tags.tags().iter().map(String::as_str))
        .collect();
    if !corpus_tags.is_empty() && !corpus_tags.iter().any(|t| graph.frequency(t) > 0) {
        log::warn!(
            "corpus and graph share no tags; injection will fall back to frequency-only choices"
        );
    }

    let rho = config.injection.rho;
    let outcome = inject_responses(
        &responses,
        &parsed,
        &graph,
        rho,
        iteration,
        backend.as_ref(),
        &settings,
    )?;
    dataset::write_preferences(&outcome.records, out)?;

    println!(
        "emitted {} pairs, discarded {} (rho = {rho})",
        outcome.records.len(),
        outcome.discards.len()
    );
    for (reason, count) in outcome.discard_counts() {
        println!("  discarded {count}: {reason}");
    }
    println!("wrote {}", out.display());

    let backend_failures = outcome
        .discards
        .iter()
        .filter(|(_, r)| *r == DiscardReason::BackendFailure)
        .count();
    let failure_fraction = backend_failures as f64 / responses.len() as f64;
    if failure_fraction > config.injection.max_backend_failure_fraction {
        return Err(Error::Rejected(format!(
            "backend failure budget exceeded: {backend_failures}/{} samples ({:.1}% > {:.1}%)",
            responses.len(),
            100.0 * failure_fraction,
            100.0 * config.injection.max_backend_failure_fraction
        )));
    }
    Ok(())
}

pub fn iterate_cmd(config: &RunConfig, resume: bool) -> Result<()> {
    let settings = config.pipeline_settings()?;
    let backend = config.backend()?;
    let schedule = config.schedule()?;
    if config.paths.unannotated.is_empty() {
        return Err(Error::Config(
            "no input samples configured: set paths.unannotated".into(),
        ));
    }
    let samples = dataset::read_unannotated(&config.paths.unannotated)?;
    let run_dir = config.run_dir();
    let hook = if config.run.hook_command.is_empty() {
        None
    } else {
        Some(config.run.hook_command.as_str())
    };
    let records = run_pipeline(
        &samples,
        backend.as_ref(),
        &schedule,
        &settings,
        &run_dir,
        resume,
        hook,
    )?;
    println!("run directory: {}", run_dir.display());
    for record in &records {
        println!(
            "iter-{}: rho {}, emitted {}/{} (mean L {:.2}, mean replaced {:.2})",
            record.t,
            record.rho,
            record.n_emitted,
            record.n_input,
            record.mean_sentence_count,
            record.mean_replaced_count
        );
    }
    Ok(())
}

fn annotation_map(path: &Path) -> Result<BTreeMap<String, GroundTruthAnnotation>> {
    Ok(read_annotations(path)?
        .into_iter()
        .map(|a| (a.sample_id.clone(), a))
        .collect())
}

fn parsed_responses(
    config: &RunConfig,
    corpus: &Path,
) -> Result<Vec<(String, SegmentedResponse, ObjectTagSet)>> {
    let settings = config.pipeline_settings()?;
    let responses = read_responses(corpus)?;
    let parsed = parse_corpus(&responses, &settings)?;
    Ok(responses
        .into_iter()
        .zip(parsed)
        .map(|(r, (seg, tags))| (r.sample_id, seg, tags))
        .collect())
}

fn write_report_lines<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |f| {
        for row in rows {
            writeln!(f, "{}", serde_json::to_string(row).expect("row serializes"))?;
        }
        Ok(())
    })
}

pub fn eval_chair_cmd(
    config: &RunConfig,
    responses: &Path,
    annotations: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let parsed = parsed_responses(config, responses)?;
    let scored: Vec<(String, ObjectTagSet)> =
        parsed.into_iter().map(|(id, _, tags)| (id, tags)).collect();
    let truth = annotation_map(annotations)?;
    let result = chair(&scored, &truth)?;
    println!("chair_i {:.4} ({} / {} objects hallucinated)", result.chair_i, result.n_hallucinated_objects, result.n_objects);
    println!("chair_s {:.4} ({} / {} responses hallucinated)", result.chair_s, result.n_hallucinated_responses, result.n_responses);
    if let Some(path) = report {
        write_report_lines(path, &[&result])?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct PdmhRow {
    sample_id: String,
    mean: Option<f64>,
    values: Vec<Option<f64>>,
}

pub fn eval_pdmh_cmd(config: &RunConfig, responses_path: &Path, report: Option<&Path>) -> Result<()> {
    let backend = config.backend()?;
    let responses = read_responses(responses_path)?;
    if responses.is_empty() {
        return Err(Error::EmptyInput("no responses to evaluate".into()));
    }
    let top_k = config.top_k.0;
    let mut rows = Vec::new();
    for response in &responses {
        let tokens: Vec<String> = response
            .text
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let values = pdm_h_curve(
            backend.as_ref(),
            &response.prompt,
            &response.image_ref,
            &tokens,
            top_k,
        );
        let known: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = if known.is_empty() {
            None
        } else {
            Some(known.iter().sum::<f64>() / known.len() as f64)
        };
        rows.push(PdmhRow {
            sample_id: response.sample_id.clone(),
            mean,
            values,
        });
    }
    let overall: Vec<f64> = rows.iter().filter_map(|r| r.mean).collect();
    println!("pdm-h over {} responses (top_k {top_k})", rows.len());
    for row in rows.iter().take(10) {
        match row.mean {
            Some(mean) => println!("  {}: mean {:.6} over {} steps", row.sample_id, mean, row.values.len()),
            None => println!("  {}: no scored steps", row.sample_id),
        }
    }
    if !overall.is_empty() {
        println!(
            "mean over responses: {:.6}",
            overall.iter().sum::<f64>() / overall.len() as f64
        );
    }
    if let Some(path) = report {
        write_report_lines(path, &rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn eval_gap_cmd(config: &RunConfig, dataset_path: &Path, report: Option<&Path>) -> Result<()> {
    let backend = config.backend()?;
    let records = read_preferences(dataset_path)?;
    let result = pair_gap_report(&records, backend.as_ref())?;
    println!(
        "scored {} pairs ({} skipped), mean gap {:.6}",
        result.pairs.len(),
        result.n_skipped,
        result.mean_gap
    );
    println!("log-probability histogram (preferred | dispreferred):");
    for bin in &result.histogram {
        if bin.preferred > 0 || bin.dispreferred > 0 {
            println!(
                "  [{:>10.3}, {:>10.3}): {:>5} | {:>5}",
                bin.lo, bin.hi, bin.preferred, bin.dispreferred
            );
        }
    }
    if let Some(path) = report {
        write_report_lines(path, &result.pairs)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn eval_positional_cmd(
    config: &RunConfig,
    dataset_path: &Path,
    bins: usize,
    report: Option<&Path>,
) -> Result<()> {
    let settings = config.pipeline_settings()?;
    let records = read_preferences(dataset_path)?;
    let mut items = Vec::with_capacity(records.len());
    for record in &records {
        let response = settings.segmenter.segment(&record.dispreferred_text)?;
        let mut flags = vec![false; response.sentence_count()];
        for &k in &record.replace_indices {
            if k == 0 || k > flags.len() {
                return Err(Error::LengthMismatch(format!(
                    "record {}: replace index {k} outside 1..={}",
                    record.sample_id,
                    flags.len()
                )));
            }
            flags[k - 1] = true;
        }
        items.push((response, flags));
    }
    let profile = positional_profile(&items, bins)?;
    println!("hallucination rate by normalized sentence position ({bins} bins):");
    for (i, bin) in profile.bins.iter().enumerate() {
        println!(
            "  bin {:>2}: {:>6}/{:<6} rate {:.4}",
            i + 1,
            bin.hallucinated,
            bin.total,
            bin.rate
        );
    }
    if let Some(path) = report {
        write_report_lines(path, &profile.bins)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn eval_cooccur_cmd(
    config: &RunConfig,
    responses: &Path,
    annotations: &Path,
    graph_path: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let parsed = parsed_responses(config, responses)?;
    let scored: Vec<(String, ObjectTagSet)> =
        parsed.into_iter().map(|(id, _, tags)| (id, tags)).collect();
    let truth = annotation_map(annotations)?;
    let graph = CooccurrenceGraph::load(graph_path)?;
    let stats = cooccur_stats(&scored, &truth, &graph)?;
    println!("hallucinated tags: {}", stats.n_hallucinated);
    println!("co-occurring with a correct tag: {:.4}", stats.cooccurring_fraction);
    println!("rank <= 1: {:.4}", stats.top1_fraction);
    println!("rank <= 5: {:.4}", stats.top5_fraction);
    if let Some(path) = report {
        write_report_lines(path, &[&stats])?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn toy_dpo_cmd(
    pairs: usize,
    seed: u64,
    beta: f64,
    learning_rate: f64,
    epochs: usize,
    stats_path: Option<&Path>,
) -> Result<()> {
    let (model, dataset) = demo_setup(pairs, seed);
    let config = DpoConfig {
        beta,
        learning_rate,
        epochs,
    };
    let (_, stats) = train_toy_dpo(&model, &dataset, &config)?;
    let stride = (stats.len() / 10).max(1);
    for epoch_stats in stats
        .iter()
        .step_by(stride)
        .chain(std::iter::once(stats.last().unwrap()))
    {
        println!(
            "{}",
            serde_json::to_string(epoch_stats).expect("stats serialize")
        );
    }
    let first = stats.first().unwrap();
    let last = stats.last().unwrap();
    println!(
        "mean loss {:.6} -> {:.6}, mean margin {:.6} -> {:.6} over {} epochs",
        first.mean_loss, last.mean_loss, first.mean_margin, last.mean_margin, epochs
    );
    if let Some(path) = stats_path {
        write_report_lines(path, &stats)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
