//! Preference-optimization objective on the toy model.
//!
//! The loss for one pair is `-log σ(β·((logp_θ(y⁺) - logp_ref(y⁺)) -
//! (logp_θ(y⁻) - logp_ref(y⁻))))`, computed through a branch-stable
//! softplus so margins of ±1e4 stay finite. The analytic gradient with
//! respect to the policy's bigram logits backs a deterministic
//! full-batch descent loop; the reference model is a frozen copy of the
//! starting point and receives no gradient.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::toy::ToyLanguageModel;

/// Sequence log-probabilities entering the objective for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoBatchItem {
    pub logp_policy_plus: f64,
    pub logp_policy_minus: f64,
    pub logp_ref_plus: f64,
    pub logp_ref_minus: f64,
}

impl DpoBatchItem {
    pub fn validate(&self) -> Result<()> {
        let values = [
            self.logp_policy_plus,
            self.logp_policy_minus,
            self.logp_ref_plus,
            self.logp_ref_minus,
        ];
        if values.iter().any(|v| !v.is_finite() || *v > 0.0) {
            return Err(Error::Invariant(format!(
                "sequence log-probabilities must be finite and non-positive: {values:?}"
            )));
        }
        Ok(())
    }
}

/// Hyper-parameters for the toy training loop.
#[derive(Debug, Clone, Copy)]
pub struct DpoConfig {
    /// Preference-strength coefficient scaling the log-ratio margin.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 20.0,
            epochs: 1500,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow on either tail.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss and margin for one pair: `margin = β·(Δ⁺ - Δ⁻)` over the
/// policy-vs-reference log ratios, `loss = -log σ(margin)`. The loss is
/// finite and strictly positive for any finite margin.
pub fn dpo_loss(item: &DpoBatchItem, beta: f64) -> (f64, f64) {
    let margin = beta
        * ((item.logp_policy_plus - item.logp_ref_plus)
            - (item.logp_policy_minus - item.logp_ref_minus));
    (softplus(-margin), margin)
}

/// Log-probability of `continuation` after `context` under the toy
/// model. Unknown tokens are an error here; lenient mapping is the mock
/// backend's job.
pub fn toy_sequence_logprob<S: AsRef<str>>(
    model: &ToyLanguageModel,
    context: &[S],
    continuation: &[S],
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::EmptyInput("continuation has no tokens".into()));
    }
    let context = model.encode(context)?;
    let continuation = model.encode(continuation)?;
    Ok(model.sequence_logprob(&context, &continuation))
}

/// A token-level preference pair for the toy trainer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPreferencePair {
    pub context: Vec<String>,
    pub preferred: Vec<String>,
    pub dispreferred: Vec<String>,
}

/// Gradient with respect to the policy's logits table.
pub type GradientTable = Vec<Vec<f64>>;

fn zero_gradient(model: &ToyLanguageModel) -> GradientTable {
    vec![vec![0.0; model.vocab_size()]; model.vocab_size()]
}

/// Accumulates `sign * d logp(continuation) / d logits` into `grad`.
/// For the bigram, `d log softmax(logits[r])[j] / d logits[r][c]` is
/// `δ_jc - p(c|r)`, so only rows actually visited receive mass.
fn accumulate_logprob_gradient(
    model: &ToyLanguageModel,
    context: &[usize],
    continuation: &[usize],
    sign: f64,
    grad: &mut GradientTable,
) {
    let mut prev = model.context_row(context);
    for &next in continuation {
        let row = model.row(prev);
        for (c, p) in row.iter().enumerate() {
            let indicator = if c == next { 1.0 } else { 0.0 };
            grad[prev][c] += sign * (indicator - p);
        }
        prev = next;
    }
}

/// Loss, margin, and analytic gradient of the loss with respect to the
/// policy logits for one pair. The reference model enters only through
/// its (constant) log-probabilities.
pub fn dpo_gradient(
    policy: &ToyLanguageModel,
    reference: &ToyLanguageModel,
    pair: &TokenPreferencePair,
    beta: f64,
) -> Result<(f64, f64, GradientTable)> {
    if policy.vocab() != reference.vocab() {
        return Err(Error::Config(
            "policy and reference must share a vocabulary".into(),
        ));
    }
    let context = policy.encode(&pair.context)?;
    let plus = policy.encode(&pair.preferred)?;
    let minus = policy.encode(&pair.dispreferred)?;
    if plus.is_empty() || minus.is_empty() {
        return Err(Error::EmptyInput("preference pair has an empty side".into()));
    }

    let item = DpoBatchItem {
        logp_policy_plus: policy.sequence_logprob(&context, &plus),
        logp_policy_minus: policy.sequence_logprob(&context, &minus),
        logp_ref_plus: reference.sequence_logprob(&context, &plus),
        logp_ref_minus: reference.sequence_logprob(&context, &minus),
    };
    let (loss, margin) = dpo_loss(&item, beta);

    // loss = softplus(-margin), d loss / d margin = -σ(-margin).
    let dloss_dmargin = -sigmoid(-margin);
    let mut grad = zero_gradient(policy);
    accumulate_logprob_gradient(policy, &context, &plus, dloss_dmargin * beta, &mut grad);
    accumulate_logprob_gradient(policy, &context, &minus, -dloss_dmargin * beta, &mut grad);
    Ok((loss, margin, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw policy preference gap `logp(y⁺) - logp(y⁻)` for one pair,
/// before any β scaling or reference subtraction.
pub fn policy_margin(model: &ToyLanguageModel, pair: &TokenPreferencePair) -> Result<f64> {
    let context = model.encode(&pair.context)?;
    let plus = model.encode(&pair.preferred)?;
    let minus = model.encode(&pair.dispreferred)?;
    Ok(model.sequence_logprob(&context, &plus) - model.sequence_logprob(&context, &minus))
}

/// Mean loss, mean margin, and mean gradient over a dataset. Per-pair
/// terms are computed in parallel but reduced in dataset order, so the
/// result is bit-identical to [`epoch_stats_seq`].
pub fn epoch_stats(
    policy: &ToyLanguageModel,
    reference: &ToyLanguageModel,
    dataset: &[TokenPreferencePair],
    beta: f64,
) -> Result<(f64, f64, GradientTable)> {
    let per_pair = exec::map_ordered(dataset, |pair| dpo_gradient(policy, reference, pair, beta));
    reduce_epoch(policy, dataset.len(), per_pair)
}

/// Sequential reference implementation of [`epoch_stats`].
pub fn epoch_stats_seq(
    policy: &ToyLanguageModel,
    reference: &ToyLanguageModel,
    dataset: &[TokenPreferencePair],
    beta: f64,
) -> Result<(f64, f64, GradientTable)> {
    let per_pair =
        exec::map_ordered_seq(dataset, |pair| dpo_gradient(policy, reference, pair, beta));
    reduce_epoch(policy, dataset.len(), per_pair)
}

fn reduce_epoch(
    policy: &ToyLanguageModel,
    n: usize,
    per_pair: Vec<Result<(f64, f64, GradientTable)>>,
) -> Result<(f64, f64, GradientTable)> {
    let mut loss_sum = 0.0;
    let mut margin_sum = 0.0;
    let mut grad = zero_gradient(policy);
    for result in per_pair {
        let (loss, margin, pair_grad) = result?;
        loss_sum += loss;
        margin_sum += margin;
        for (row, pair_row) in grad.iter_mut().zip(&pair_grad) {
            for (g, pg) in row.iter_mut().zip(pair_row) {
                *g += pg;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for row in &mut grad {
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    Ok((loss_sum * scale, margin_sum * scale, grad))
}

/// Per-epoch training statistics, measured before that epoch's update.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
}

/// Deterministic full-batch gradient descent against a frozen copy of
/// the starting model. Fails with [`Error::Diverged`] if the loss stops
/// being finite.
pub fn train_toy_dpo(
    model: &ToyLanguageModel,
    dataset: &[TokenPreferencePair],
    config: &DpoConfig,
) -> Result<(ToyLanguageModel, Vec<EpochStats>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let reference = model.clone();
    let mut policy = model.clone();
    let mut stats = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let (mean_loss, mean_margin, grad) =
            epoch_stats(&policy, &reference, dataset, config.beta)?;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "mean loss became {mean_loss} at epoch {epoch}"
            )));
        }
        stats.push(EpochStats {
            epoch,
            mean_loss,
            mean_margin,
        });
        let logits = policy.logits_mut();
        for (row, grad_row) in logits.iter_mut().zip(&grad) {
            for (w, g) in row.iter_mut().zip(grad_row) {
                *w -= config.learning_rate * g;
            }
        }
    }
    Ok((policy, stats))
}

/// Fixed synthetic setup for demos and verification: a small random
/// model plus `pairs` preference pairs shaped like the real pipeline's
/// output. Each dis-preferred side is its preferred side with one token
/// swapped for a designated junk token, so the preference signal is
/// consistent across the dataset. Deterministic in `seed`.
pub fn demo_setup(pairs: usize, seed: u64) -> (ToyLanguageModel, Vec<TokenPreferencePair>) {
    let vocab = [
        "<s>", "sun", "moon", "tide", "wind", "sand", "wave", "fog", "haze",
    ];
    let good = &vocab[1..7];
    let junk = &vocab[7..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vocab.len();
    let mut logits = vec![vec![0.0; n]; n];
    for row in &mut logits {
        for value in row.iter_mut() {
            *value = rng.random_range(-1.0..1.0);
        }
    }
    let model = ToyLanguageModel::new(&vocab, logits, "<s>").expect("valid demo model");

    let pick = |rng: &mut ChaCha8Rng, pool: &[&str]| pool[rng.random_range(0..pool.len())].to_string();
    let dataset = (0..pairs)
        .map(|_| {
            let context = vec![pick(&mut rng, good)];
            let preferred: Vec<String> = (0..3).map(|_| pick(&mut rng, good)).collect();
            let mut dispreferred = preferred.clone();
            let slot = rng.random_range(0..dispreferred.len());
            dispreferred[slot] = pick(&mut rng, junk);
            TokenPreferencePair {
                context,
                preferred,
                dispreferred,
            }
        })
        .collect();
    (model, dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOG_2: f64 = 0.693_147_180_559_945_3;

    fn item(pp: f64, pm: f64, rp: f64, rm: f64) -> DpoBatchItem {
        DpoBatchItem {
            logp_policy_plus: pp,
            logp_policy_minus: pm,
            logp_ref_plus: rp,
            logp_ref_minus: rm,
        }
    }

    #[test]
    fn equal_policies_give_log_two() {
        let (loss, margin) = dpo_loss(&item(-1.0, -2.0, -1.0, -2.0), 0.1);
        assert_eq!(margin, 0.0);
        assert!((loss - LOG_2).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_monotonically_in_margin() {
        let mut last = f64::INFINITY;
        for m in [-100.0, -10.0, -1.0, 0.0, 1.0, 10.0, 100.0] {
            let loss = softplus(-m);
            assert!(loss < last);
            assert!(loss > 0.0);
            last = loss;
        }
    }

    #[test]
    fn worked_example_matches_precomputed_value() {
        // margin = 0.1·((-1.0 + 1.5) - (-2.0 + 1.5)) = 0.1;
        // -log σ(0.1) evaluated at 40 decimal digits beforehand.
        let (loss, margin) = dpo_loss(&item(-1.0, -2.0, -1.5, -1.5), 0.1);
        assert!((margin - 0.1).abs() < 1e-15);
        assert!((loss - 0.644_396_660_073_570_9).abs() < 1e-15);
    }

    #[test]
    fn extreme_margins_stay_finite() {
        for m in [-1e4f64, -100.0, 100.0, 1e4] {
            let beta = 1.0;
            let (loss, _) = dpo_loss(&item(m.min(0.0), (-m).min(0.0), 0.0, 0.0), beta);
            assert!(loss.is_finite());
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn margin_ignores_common_shifts() {
        let beta = 0.3;
        let base = item(-1.2, -3.4, -0.9, -2.2);
        let (_, margin) = dpo_loss(&base, beta);
        for shift in [-5.0, -0.7, 0.0] {
            let shifted = item(
                base.logp_policy_plus + shift,
                base.logp_policy_minus + shift * 0.5,
                base.logp_ref_plus + shift,
                base.logp_ref_minus + shift * 0.5,
            );
            let (_, shifted_margin) = dpo_loss(&shifted, beta);
            assert!((margin - shifted_margin).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_sequence_logprob() {
        let model = ToyLanguageModel::uniform(&["<s>", "a", "b", "c"], "<s>").unwrap();
        let lp = toy_sequence_logprob(&model, &["a"], &["b", "c"]).unwrap();
        assert!((lp - 2.0 * (0.25f64).ln()).abs() < 1e-12);
        let single = toy_sequence_logprob(&model, &["a"], &["b"]).unwrap();
        assert!((single - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_sides_have_zero_gradient() {
        let (model, _) = demo_setup(1, 3);
        let pair = TokenPreferencePair {
            context: vec!["sun".into()],
            preferred: vec!["moon".into(), "tide".into()],
            dispreferred: vec!["moon".into(), "tide".into()],
        };
        let (_, margin, grad) = dpo_gradient(&model, &model, &pair, 0.1).unwrap();
        assert_eq!(margin, 0.0);
        assert!(grad.iter().flatten().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn unvisited_rows_have_zero_gradient() {
        let (model, _) = demo_setup(1, 3);
        let pair = TokenPreferencePair {
            context: vec!["sun".into()],
            preferred: vec!["moon".into()],
            dispreferred: vec!["tide".into()],
        };
        let (_, _, grad) = dpo_gradient(&model, &model, &pair, 0.1).unwrap();
        let visited = [model.token_id("sun").unwrap()];
        for (row_index, row) in grad.iter().enumerate() {
            if !visited.contains(&row_index) {
                assert!(row.iter().all(|g| g.abs() < 1e-15), "row {row_index}");
            }
        }
    }

    /// Central finite differences of the loss with respect to one logit.
    fn fd_gradient_entry(
        policy: &ToyLanguageModel,
        reference: &ToyLanguageModel,
        pair: &TokenPreferencePair,
        beta: f64,
        row: usize,
        col: usize,
        h: f64,
    ) -> f64 {
        let loss_at = |delta: f64| {
            let mut bumped = policy.clone();
            bumped.logits_mut()[row][col] += delta;
            let (loss, _, _) = dpo_gradient(&bumped, reference, pair, beta).unwrap();
            loss
        };
        (loss_at(h) - loss_at(-h)) / (2.0 * h)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (model, dataset) = demo_setup(5, 17);
        let reference = {
            let (reference, _) = demo_setup(5, 18);
            reference
        };
        let beta = 0.1;
        let h = 1e-5;
        for pair in &dataset {
            let (_, _, grad) = dpo_gradient(&model, &reference, pair, beta).unwrap();
            for row in 0..model.vocab_size() {
                for col in 0..model.vocab_size() {
                    let fd = fd_gradient_entry(&model, &reference, pair, beta, row, col, h);
                    let a = grad[row][col];
                    let denom = a.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (a - fd).abs() / denom < 1e-5,
                        "grad[{row}][{col}] analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_pair_margin_increases_every_epoch() {
        let (model, dataset) = demo_setup(1, 7);
        let config = DpoConfig {
            epochs: 50,
            ..DpoConfig::default()
        };
        let (_, stats) = train_toy_dpo(&model, &dataset, &config).unwrap();
        for window in stats.windows(2) {
            assert!(
                window[1].mean_margin > window[0].mean_margin,
                "margin stalled: {window:?}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (model, dataset) = demo_setup(8, 7);
        let config = DpoConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..DpoConfig::default()
        };
        let (trained, stats) = train_toy_dpo(&model, &dataset, &config).unwrap();
        assert_eq!(trained.logits(), model.logits());
        assert!(stats
            .windows(2)
            .all(|w| w[0].mean_loss == w[1].mean_loss));
        assert!((stats[0].mean_margin).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_epochs_agree_exactly() {
        let (model, dataset) = demo_setup(64, 5);
        let reference = model.clone();
        let (loss_a, margin_a, grad_a) = epoch_stats(&model, &reference, &dataset, 0.1).unwrap();
        let (loss_b, margin_b, grad_b) =
            epoch_stats_seq(&model, &reference, &dataset, 0.1).unwrap();
        assert_eq!(loss_a, loss_b);
        assert_eq!(margin_a, margin_b);
        assert_eq!(grad_a, grad_b);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (model, _) = demo_setup(1, 7);
        assert!(matches!(
            train_toy_dpo(&model, &[], &DpoConfig::default()),
            Err(Error::EmptyInput(_))
        ));
    }
}
