//! One-tailed Wilcoxon signed-rank test and bootstrap accuracy resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size tested exactly; larger samples use the normal approximation.
pub const EXACT_MAX_N: usize = 20;
/// Differences (and gaps between absolute differences) at or below this
/// count as zero (or as tied).
const TIE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// `a` tends to exceed `b`.
    Greater,
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Rank sum of the positive differences `a − b`.
    pub w_plus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] - values[order[start]] <= TIE_EPS {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

/// Paired signed-rank test of `a` against `b`. Zero differences are
/// dropped. Samples of at most [`EXACT_MAX_N`] nonzero pairs get the exact
/// null distribution over all `2ⁿ` sign patterns; larger ones use the
/// normal approximation with continuity and tie corrections.
pub fn wilcoxon_one_tailed(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 pairs, got {}",
            a.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| d.abs() > TIE_EPS)
        .collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("all paired differences are zero"));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    // Under `Less`, large values of the negative rank sum are extreme.
    let total = (n * (n + 1)) as f64 / 2.0;
    let stat = match alternative {
        Alternative::Greater => w_plus,
        Alternative::Less => total - w_plus,
    };
    let (p_value, exact) = if n <= EXACT_MAX_N {
        (exact_upper_tail(&ranks, stat), true)
    } else {
        (normal_upper_tail(&ranks, stat), false)
    };
    Ok(WilcoxonResult {
        p_value,
        w_plus,
        n,
        exact,
    })
}

/// `P(W ≥ stat)` where `W` sums a uniformly random subset of `ranks`.
/// Ranks are half-integers, so doubling makes the subset-sum table integral.
fn exact_upper_tail(ranks: &[f64], stat: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let threshold = (2.0 * stat).round() as usize;
    let hits: f64 = counts[threshold.min(max + 1)..].iter().sum();
    hits / 2f64.powi(ranks.len() as i32)
}

fn normal_upper_tail(ranks: &[f64], stat: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        tie_term += (j * j * j - j) as f64;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (stat - mean - 0.5) / var.sqrt();
    1.0 - Normal::new(0.0, 1.0).expect("unit normal").cdf(z)
}

/// Accuracies of `repeats` with-replacement subsets of size `subset_size`.
pub fn bootstrap_eval(
    predictions: &[usize],
    labels: &[usize],
    subset_size: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if subset_size == 0 || repeats == 0 {
        return Err(Error::InvalidArgument(
            "subset size and repeats must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..repeats)
        .map(|_| {
            let hits = (0..subset_size)
                .filter(|_| {
                    let i = rng.gen_range(0..predictions.len());
                    predictions[i] == labels[i]
                })
                .count();
            hits as f64 / subset_size as f64
        })
        .collect())
}
