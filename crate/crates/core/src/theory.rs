//! Monte Carlo check of the memory-versus-state expansion bound.
//!
//! One step of a linear vanilla RNN is perturbed two ways. Widening the
//! state by `d` units adds `W̃ · h̃` to the original `D` coordinates, with
//! closed-form mean squared size `D·d·σ⁴`. Appending `M` slots to an
//! `N`-slot bank changes the attention content by `Δc = Σ_j β_j · value_j`,
//! which reaches the state through `W_c`. Everything random is iid
//! `N(0, σ²)`. When the new slots receive no more unnormalized attention
//! than the old ones, `|β_j| ≤ α′_j`, so `Var(Δc_k) ≤ σ²` and the memory
//! perturbation is the smaller of the two.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Logits beyond this magnitude make `exp` unreliable; such draws are redone.
const MAX_LOGIT: f64 = 700.0;
/// Draws tried per trial in conditioned mode before giving up.
const MAX_REJECTIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "weights")]
pub enum AttentionMode {
    /// `α̃_j = exp(h · key_j)` with fresh keys every trial.
    Sampled,
    /// As `Sampled`, redrawn until the new slots hold no more mass than the old.
    SampledConditioned,
    /// The same unnormalized weights (length `N + M`) in every trial.
    Fixed(Vec<f64>),
}

/// Whether the attention query `h` is redrawn per trial or drawn once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Resample,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Original hidden width `D`.
    pub state_dim: usize,
    /// Expansion width and slot dimension `d`.
    pub expand_dim: usize,
    pub sigma: f64,
    /// Existing slots `N`.
    pub old_slots: usize,
    /// Added slots `M`.
    pub new_slots: usize,
    pub trials: usize,
    pub seed: u64,
    pub attention: AttentionMode,
    #[serde(default)]
    pub query: QueryMode,
}

impl SimulationConfig {
    pub fn sampled(
        state_dim: usize,
        expand_dim: usize,
        sigma: f64,
        old_slots: usize,
        new_slots: usize,
    ) -> Self {
        SimulationConfig {
            state_dim,
            expand_dim,
            sigma,
            old_slots,
            new_slots,
            trials: 100_000,
            seed: 0,
            attention: AttentionMode::Sampled,
            query: QueryMode::Resample,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("simulation config: {m}")));
        if self.state_dim == 0 || self.expand_dim == 0 || self.old_slots == 0 || self.new_slots == 0
        {
            return bad("D, d, N and M must be at least 1");
        }
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        if let AttentionMode::Fixed(w) = &self.attention {
            if w.len() != self.old_slots + self.new_slots {
                return bad("fixed attention needs N + M weights");
            }
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad("fixed attention weights must be positive");
            }
        }
        Ok(())
    }

    fn trial_rng(&self, trial: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(trial as u64);
        r
    }

    /// The query shared by every trial in [`QueryMode::Fixed`].
    pub fn fixed_query(&self) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(u64::MAX);
        gaussian(self.state_dim, self.sigma, &mut r)
    }
}

/// Every intermediate of one simulated expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremTrial {
    /// `‖W̃ · h̃‖²`.
    pub sq_diff_state: f64,
    /// `‖W_c · Δc‖²`.
    pub sq_diff_mem: f64,
    pub beta: Tensor,
    /// `Σ_j β_j · value_j`.
    pub delta_c: Tensor,
    /// Content before expansion, read from the old slots only.
    pub content_old: Vec<f64>,
    /// Content after expansion; `content_new − content_old` is an
    /// independent route to `delta_c`.
    pub content_new: Vec<f64>,
    /// Normalized attention after expansion, `α′`.
    pub alpha_new: Vec<f64>,
    pub mass_old: f64,
    pub mass_new: f64,
    pub assumption_held: bool,
    /// Draws discarded for overflow or, in conditioned mode, for violating
    /// the mass assumption.
    pub resamples: usize,
}

/// `β_j = −α̃_j·S_new / (S_total·S_old)` for old slots and `α̃_j / S_total`
/// for new ones.
pub fn beta_weights(unnormalized_old: &Tensor, unnormalized_new: &Tensor) -> Result<Tensor> {
    let (old, new) = (unnormalized_old.data(), unnormalized_new.data());
    if old.is_empty() || new.is_empty() {
        return Err(Error::Empty("attention weights"));
    }
    if old.iter().chain(new).any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument(
            "unnormalized attention weights must be positive".into(),
        ));
    }
    let s_old: f64 = old.iter().sum();
    let s_new: f64 = new.iter().sum();
    let total = s_old + s_new;
    let beta = old
        .iter()
        .map(|a| -a * s_new / (total * s_old))
        .chain(new.iter().map(|a| a / total))
        .collect();
    Ok(Tensor::vector(beta))
}

/// `E‖h⁽ˢ⁾ − h‖² = D·d·σ⁴`.
pub fn analytic_state_msd(state_dim: usize, expand_dim: usize, sigma: f64) -> f64 {
    state_dim as f64 * expand_dim as f64 * sigma.powi(4)
}

fn gaussian<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn sq_norm_of_product(rows: usize, cols: usize, w: &[f64], x: &[f64]) -> f64 {
    (0..rows)
        .map(|i| {
            let y: f64 = w[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
            y * y
        })
        .sum()
}

/// Draws unnormalized attention weights; returns them with the number of
/// rejected draws.
fn draw_attention<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    query: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    let n = cfg.old_slots;
    let slots = n + cfg.new_slots;
    let conditioned = match &cfg.attention {
        AttentionMode::Fixed(w) => return Ok((w.clone(), 0)),
        AttentionMode::Sampled => false,
        AttentionMode::SampledConditioned => true,
    };
    for rejected in 0..MAX_REJECTIONS {
        let h = match query {
            Some(q) => q.to_vec(),
            None => gaussian(cfg.state_dim, cfg.sigma, rng),
        };
        let keys = gaussian(slots * cfg.state_dim, cfg.sigma, rng);
        let logits: Vec<f64> = keys
            .chunks_exact(cfg.state_dim)
            .map(|k| k.iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect();
        if logits.iter().any(|l: &f64| l.abs() > MAX_LOGIT) {
            continue;
        }
        let weights: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        if conditioned && weights[n..].iter().sum::<f64>() > weights[..n].iter().sum::<f64>() {
            continue;
        }
        return Ok((weights, rejected));
    }
    Err(Error::InvalidArgument(format!(
        "no admissible attention draw in {MAX_REJECTIONS} attempts"
    )))
}

/// One expansion with freshly drawn weights, states, keys and values.
pub fn simulate_trial<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    rng: &mut R,
) -> Result<TheoremTrial> {
    cfg.validate()?;
    let query = (cfg.query == QueryMode::Fixed).then(|| cfg.fixed_query());
    simulate(cfg, query.as_deref(), rng)
}

fn simulate<R: Rng + ?Sized>(
    cfg: &SimulationConfig,
    query: Option<&[f64]>,
    rng: &mut R,
) -> Result<TheoremTrial> {
    let (big_d, d, n) = (cfg.state_dim, cfg.expand_dim, cfg.old_slots);
    let (weights, resamples) = draw_attention(cfg, query, rng)?;
    let slots = weights.len();
    let values = gaussian(slots * d, cfg.sigma, rng);
    let w_state = gaussian(big_d * d, cfg.sigma, rng);
    let h_new = gaussian(d, cfg.sigma, rng);
    let w_content = gaussian(big_d * d, cfg.sigma, rng);

    let beta = beta_weights(
        &Tensor::vector(weights[..n].to_vec()),
        &Tensor::vector(weights[n..].to_vec()),
    )?;
    let mass_old: f64 = weights[..n].iter().sum();
    let mass_new: f64 = weights[n..].iter().sum();
    let total = mass_old + mass_new;

    let mut delta_c = vec![0.0; d];
    let mut content_old = vec![0.0; d];
    let mut content_new = vec![0.0; d];
    for (j, value) in values.chunks_exact(d).enumerate() {
        let (b, a_new) = (beta.data()[j], weights[j] / total);
        let a_old = if j < n { weights[j] / mass_old } else { 0.0 };
        for k in 0..d {
            delta_c[k] += b * value[k];
            content_old[k] += a_old * value[k];
            content_new[k] += a_new * value[k];
        }
    }
    Ok(TheoremTrial {
        sq_diff_state: sq_norm_of_product(big_d, d, &w_state, &h_new),
        sq_diff_mem: sq_norm_of_product(big_d, d, &w_content, &delta_c),
        beta,
        delta_c: Tensor::vector(delta_c),
        content_old,
        content_new,
        alpha_new: weights.iter().map(|w| w / total).collect(),
        mass_old,
        mass_new,
        assumption_held: mass_new <= mass_old,
        resamples,
    })
}

/// Sample mean and its standard error `std / √n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// `None` for fewer than two samples.
    pub fn of(xs: &[f64]) -> Option<Estimate> {
        let n = xs.len();
        if n < 2 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(Estimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// No (or too few) trials satisfied the mass assumption, so the bound
    /// says nothing about them.
    HypothesisViolated,
}

impl Verdict {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::HypothesisViolated => "HYPOTHESIS VIOLATED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub config: SimulationConfig,
    pub analytic_state_msd: f64,
    pub mc_state_msd: Estimate,
    pub mc_mem_msd: Estimate,
    pub mc_mem_msd_conditioned: Option<Estimate>,
    /// Per-trial `‖Δc‖² / d`, whose mean is `Var(Δc_k)`.
    pub var_delta_c: Estimate,
    pub var_delta_c_conditioned: Option<Estimate>,
    pub assumption_rate: f64,
    pub resamples: usize,
    /// Monte Carlo state MSD within 3 standard errors of `D·d·σ⁴`.
    pub closed_form: Verdict,
    /// Conditioned memory MSD ≤ state MSD + 3 combined standard errors.
    pub inequality: Verdict,
    /// Same comparison over all trials; informational, since the bound
    /// does not cover trials that break the assumption.
    pub inequality_unconditioned: Verdict,
    /// Conditioned `Var(Δc_k) ≤ σ² + 3` standard errors.
    pub variance_bound: Verdict,
}

impl VerifierReport {
    pub fn passed(&self) -> bool {
        [self.closed_form, self.inequality, self.variance_bound]
            .iter()
            .all(|v| *v == Verdict::Pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let c = &self.config;
        let est = |e: Option<Estimate>| {
            e.map_or("n/a".to_string(), |e| {
                format!("{:.4} ± {:.4}", e.mean, e.stderr)
            })
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            "D={} d={} sigma={} N={} M={} trials={} seed={} attention={} query={}",
            c.state_dim,
            c.expand_dim,
            c.sigma,
            c.old_slots,
            c.new_slots,
            c.trials,
            c.seed,
            match &c.attention {
                AttentionMode::Sampled => "sampled",
                AttentionMode::SampledConditioned => "sampled_conditioned",
                AttentionMode::Fixed(_) => "fixed",
            },
            match c.query {
                QueryMode::Resample => "resample",
                QueryMode::Fixed => "fixed",
            }
        );
        let rows = [
            (
                "analytic state MSD (Ddσ⁴)",
                format!("{:.4}", self.analytic_state_msd),
            ),
            ("MC state MSD", est(Some(self.mc_state_msd))),
            ("MC memory MSD (all)", est(Some(self.mc_mem_msd))),
            (
                "MC memory MSD (assumption held)",
                est(self.mc_mem_msd_conditioned),
            ),
            ("Var(Δc_k) (all)", est(Some(self.var_delta_c))),
            (
                "Var(Δc_k) (assumption held)",
                est(self.var_delta_c_conditioned),
            ),
            ("assumption rate", format!("{:.4}", self.assumption_rate)),
            ("resampled draws", self.resamples.to_string()),
            ("closed form", self.closed_form.label().into()),
            ("memory ≤ state", self.inequality.label().into()),
            (
                "memory ≤ state (unconditioned)",
                self.inequality_unconditioned.label().into(),
            ),
            ("Var(Δc_k) ≤ σ²", self.variance_bound.label().into()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "  {k:<34} {v}");
        }
        s
    }
}

struct TrialSummary {
    state: f64,
    mem: f64,
    var: f64,
    held: bool,
    resamples: usize,
}

/// Runs `cfg.trials` independent trials in parallel. Each trial owns the RNG
/// stream numbered by its index, so the report does not depend on
/// scheduling.
pub fn verify_theorem(cfg: &SimulationConfig) -> Result<VerifierReport> {
    cfg.validate()?;
    if cfg.trials < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 trials for standard errors".into(),
        ));
    }
    let query = (cfg.query == QueryMode::Fixed).then(|| cfg.fixed_query());
    let d = cfg.expand_dim as f64;
    let trials: Vec<TrialSummary> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let t = simulate(cfg, query.as_deref(), &mut cfg.trial_rng(i))?;
            Ok(TrialSummary {
                state: t.sq_diff_state,
                mem: t.sq_diff_mem,
                var: t.delta_c.data().iter().map(|x| x * x).sum::<f64>() / d,
                held: t.assumption_held,
                resamples: t.resamples,
            })
        })
        .collect::<Result<_>>()?;

    let pick = |f: fn(&TrialSummary) -> f64, only_held: bool| -> Vec<f64> {
        trials
            .iter()
            .filter(|t| t.held || !only_held)
            .map(f)
            .collect()
    };
    let analytic = analytic_state_msd(cfg.state_dim, cfg.expand_dim, cfg.sigma);
    let state = Estimate::of(&pick(|t| t.state, false)).expect("at least 2 trials");
    let mem = Estimate::of(&pick(|t| t.mem, false)).expect("at least 2 trials");
    let var = Estimate::of(&pick(|t| t.var, false)).expect("at least 2 trials");
    let mem_c = Estimate::of(&pick(|t| t.mem, true));
    let var_c = Estimate::of(&pick(|t| t.var, true));
    let below =
        |m: Estimate| m.mean <= state.mean + 3.0 * (state.stderr.powi(2) + m.stderr.powi(2)).sqrt();
    let sigma2 = cfg.sigma * cfg.sigma;
    Ok(VerifierReport {
        config: cfg.clone(),
        analytic_state_msd: analytic,
        closed_form: Verdict::from_bool((state.mean - analytic).abs() <= 3.0 * state.stderr),
        inequality: mem_c.map_or(Verdict::HypothesisViolated, |m| {
            Verdict::from_bool(below(m))
        }),
        inequality_unconditioned: Verdict::from_bool(below(mem)),
        variance_bound: var_c.map_or(Verdict::HypothesisViolated, |v| {
            Verdict::from_bool(v.mean <= sigma2 + 3.0 * v.stderr)
        }),
        mc_state_msd: state,
        mc_mem_msd: mem,
        mc_mem_msd_conditioned: mem_c,
        var_delta_c: var,
        var_delta_c_conditioned: var_c,
        assumption_rate: trials.iter().filter(|t| t.held).count() as f64 / cfg.trials as f64,
        resamples: trials.iter().map(|t| t.resamples).sum(),
    })
}
