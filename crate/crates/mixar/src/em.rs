//! Maximum-likelihood fitting of a mixture of autoregressive experts by the
//! EM algorithm with multi-start initialization.
//!
//! Each restart alternates an E-step (posterior regime responsibilities via
//! log-sum-exp) with three M-step updates: the exact constrained maximizer
//! for the mixing weights (floored at `eta`), a weighted least-squares solve
//! for linear experts, and backtracking gradient ascent for MLP experts with
//! the noise scale updated in closed form. Every update maximizes or
//! improves its piece of the EM objective, so the likelihood trace is
//! non-decreasing up to floating-point slack.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    accumulate_gradient, log_sum_exp, Expert, ExpertSpec, LinearExpert, MixtureModel, MlpExpert,
    SeriesData, PARAM_BOUND, SIGMA_FLOOR,
};
use crate::seed::derive_seed;

/// Knobs for one EM fit.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Cap on EM iterations per restart.
    pub max_em_iterations: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub rel_tolerance: f64,
    /// Number of independent restarts; the best final likelihood wins.
    pub restarts: usize,
    /// Mixing-weight floor kept by the weight M-step.
    pub eta: f64,
    /// Cap on inner gradient-ascent iterations per MLP M-step.
    pub inner_max_iterations: usize,
    /// Inner stop threshold on the weighted log-likelihood improvement.
    pub inner_tolerance: f64,
    /// Seed from which all restart seeds are derived.
    pub master_seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_em_iterations: 200,
            rel_tolerance: 1e-6,
            restarts: 10,
            eta: 1e-3,
            inner_max_iterations: 50,
            inner_tolerance: 1e-8,
            master_seed: 0,
        }
    }
}

/// Posterior regime probabilities per transition: a row-stochastic
/// `(n - lags) x p` matrix.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Responsibilities {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_components(&self) -> usize {
        self.cols
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        self.data[t * self.cols + i]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// Copy of component `i`'s responsibility column.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.rows).map(|t| self.get(t, i)).collect()
    }
}

/// Outcome of one fit: the model, its likelihood and run diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: MixtureModel,
    /// Marginal log-likelihood of `model` on the fitted series.
    pub loglik: f64,
    /// EM iterations performed by the winning restart.
    pub em_iterations: usize,
    /// Whether the tolerance was met before the iteration cap.
    pub converged: bool,
    /// Index of the winning restart.
    pub best_restart: usize,
    /// Per-iteration log-likelihood of the winning restart, starting at the
    /// initialization value.
    pub loglik_trace: Vec<f64>,
    /// Times the linear M-step had to fall back to a ridge-jittered solve.
    pub ridge_fallbacks: usize,
}

/// Posterior responsibility of each component for each transition under the
/// current model.
pub fn e_step(model: &MixtureModel, series: &SeriesData) -> Result<Responsibilities> {
    Ok(e_step_with_loglik(model, series)?.0)
}

/// Fused pass computing the responsibilities and the log-likelihood of the
/// same model in one sweep.
fn e_step_with_loglik(
    model: &MixtureModel,
    series: &SeriesData,
) -> Result<(Responsibilities, f64)> {
    let lags = model.lags();
    if series.len() < lags + 1 {
        return Err(Error::InsufficientData {
            needed: lags + 1,
            got: series.len(),
        });
    }
    let p = model.num_components();
    let rows = series.num_transitions(lags);
    // per-expert constants: ln(w_i) - ln(sigma_i) and 1 / (2 sigma_i^2)
    let pre: Vec<(f64, f64)> = model
        .experts()
        .iter()
        .zip(model.weights())
        .map(|(e, w)| {
            let s = e.sigma();
            (w.ln() - s.ln(), 1.0 / (2.0 * s * s))
        })
        .collect();
    let mut data = Vec::with_capacity(rows * p);
    let mut terms = vec![0.0; p];
    let mut loglik = 0.0;
    for (window, y) in series.transitions(lags) {
        for (i, e) in model.experts().iter().enumerate() {
            let r = y - e.eval(window);
            terms[i] = pre[i].0 - r * r * pre[i].1;
        }
        // the -0.5 ln(2 pi) constant cancels in the normalization and is
        // restored once per transition for the likelihood
        let lse = log_sum_exp(&terms);
        for &t in &terms {
            data.push((t - lse).exp());
        }
        loglik += lse - 0.5 * LN_2PI;
    }
    Ok((Responsibilities { data, rows, cols: p }, loglik))
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Exact maximizer of the weight part of the EM objective over the simplex
/// with the floor constraint `w_i >= eta`: column means, with violating
/// components pinned at `eta` and the remainder rescaled.
pub fn m_step_weights(resp: &Responsibilities, eta: f64) -> Vec<f64> {
    let p = resp.num_components();
    let rows = resp.rows() as f64;
    let raw: Vec<f64> = (0..p)
        .map(|i| (0..resp.rows()).map(|t| resp.get(t, i)).sum::<f64>() / rows)
        .collect();
    let mut pinned = vec![false; p];
    let mut w = raw.clone();
    loop {
        let pinned_count = pinned.iter().filter(|&&b| b).count();
        let free_mass = 1.0 - eta * pinned_count as f64;
        let free_sum: f64 = (0..p).filter(|&i| !pinned[i]).map(|i| raw[i]).sum();
        let free_count = p - pinned_count;
        for i in 0..p {
            if !pinned[i] {
                w[i] = if free_sum > 0.0 {
                    raw[i] * free_mass / free_sum
                } else {
                    free_mass / free_count as f64
                };
            }
        }
        let mut changed = false;
        for i in 0..p {
            if !pinned[i] && w[i] < eta {
                pinned[i] = true;
                w[i] = eta;
                changed = true;
            }
        }
        if !changed {
            return w;
        }
    }
}

/// Weighted least-squares update for one linear expert: solves the normal
/// equations of `y_t` on `(window_t, 1)` with the responsibility column as
/// weights. Returns the expert and whether a ridge fallback (jitter `1e-8`
/// on the diagonal) was needed for a singular system.
pub fn m_step_linear(
    series: &SeriesData,
    column: &[f64],
    lags: usize,
) -> Result<(LinearExpert, bool)> {
    let rows = series.num_transitions(lags);
    assert_eq!(column.len(), rows, "responsibility column length");
    let total: f64 = column.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidModel(
            "responsibility column sums to zero".into(),
        ));
    }
    let d = lags + 1;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut b = DVector::<f64>::zeros(d);
    for (t, (window, y)) in series.transitions(lags).enumerate() {
        let w = column[t];
        if w == 0.0 {
            continue;
        }
        for r in 0..d {
            let xr = if r < lags { window[r] } else { 1.0 };
            b[r] += w * xr * y;
            for c in r..d {
                let xc = if c < lags { window[c] } else { 1.0 };
                a[(r, c)] += w * xr * xc;
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }
    let (solution, ridged) = match a.clone().cholesky() {
        Some(ch) => (ch.solve(&b), false),
        None => {
            let mut aj = a;
            for i in 0..d {
                aj[(i, i)] += 1e-8;
            }
            let ch = aj
                .cholesky()
                .ok_or_else(|| Error::NonFinite("normal equations".into()))?;
            (ch.solve(&b), true)
        }
    };
    let coeffs: Vec<f64> = (0..lags)
        .map(|i| solution[i].clamp(-PARAM_BOUND, PARAM_BOUND))
        .collect();
    let intercept = solution[lags].clamp(-PARAM_BOUND, PARAM_BOUND);
    let mut wss = 0.0;
    for (t, (window, y)) in series.transitions(lags).enumerate() {
        let mut f = intercept;
        for (c, x) in coeffs.iter().zip(window) {
            f += c * x;
        }
        let r = y - f;
        wss += column[t] * r * r;
    }
    let sigma = (wss / total).sqrt().clamp(SIGMA_FLOOR, PARAM_BOUND);
    Ok((
        LinearExpert {
            coeffs,
            intercept,
            sigma,
        },
        ridged,
    ))
}

/// Weighted log-likelihood contribution of one expert under a
/// responsibility column.
fn weighted_loglik(series: &SeriesData, column: &[f64], expert: &Expert) -> f64 {
    let (wss, total) = sigma_stats(series, column, expert);
    q_at_sigma(wss, total, expert.sigma())
}

/// Weighted sum of squared residuals and total weight for one expert.
fn sigma_stats(series: &SeriesData, column: &[f64], expert: &Expert) -> (f64, f64) {
    let mut wss = 0.0;
    let mut total = 0.0;
    for (t, (window, y)) in series.transitions(expert.lags()).enumerate() {
        let w = column[t];
        if w == 0.0 {
            continue;
        }
        let r = y - expert.eval(window);
        wss += w * r * r;
        total += w;
    }
    (wss, total)
}

/// Weighted Gaussian log-likelihood given the residual statistics.
fn q_at_sigma(wss: f64, total: f64, sigma: f64) -> f64 {
    -total * (0.5 * LN_2PI + sigma.ln()) - wss / (2.0 * sigma * sigma)
}

fn with_sigma(expert: &Expert, sigma: f64) -> Expert {
    let mut flat = expert.flat_params();
    *flat.last_mut().expect("non-empty params") = sigma;
    expert.with_flat_params(&flat)
}

/// Gradient-ascent update for one MLP expert: backtracking halving line
/// search on the mean parameters (start step 0.1, at most 20 halvings,
/// only improving steps accepted) with the noise scale recomputed in closed
/// form after every accepted step. Never returns a worse expert than
/// `start`.
pub fn m_step_mlp(
    series: &SeriesData,
    column: &[f64],
    start: &MlpExpert,
    cfg: &FitConfig,
) -> MlpExpert {
    let rows = series.num_transitions(start.lags);
    assert_eq!(column.len(), rows, "responsibility column length");
    let total: f64 = column.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return start.clone();
    }
    let mut cur = Expert::Mlp(start.clone());
    let (wss, tw) = sigma_stats(series, column, &cur);
    let sigma = (wss / tw).sqrt().clamp(SIGMA_FLOOR, PARAM_BOUND);
    cur = with_sigma(&cur, sigma);
    let mut q = q_at_sigma(wss, tw, sigma);
    let dim = cur.param_count();
    let sigma_idx = dim - 1;
    for _ in 0..cfg.inner_max_iterations {
        let q_before = q;
        let mut grad = vec![0.0; dim];
        for (t, (window, y)) in series.transitions(start.lags).enumerate() {
            if column[t] != 0.0 {
                accumulate_gradient(&cur, window, y, column[t], &mut grad);
            }
        }
        grad[sigma_idx] = 0.0;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        // search along the unit gradient so the first trial step has a
        // parameter-space scale of 0.1 regardless of sample size
        let flat = cur.flat_params();
        let mut step = 0.1 / norm;
        let mut accepted = false;
        for _ in 0..=20 {
            let mut cand = flat.clone();
            for i in 0..sigma_idx {
                cand[i] = (cand[i] + step * grad[i]).clamp(-PARAM_BOUND, PARAM_BOUND);
            }
            let cand_expert = cur.with_flat_params(&cand);
            let (cand_wss, cand_tw) = sigma_stats(series, column, &cand_expert);
            if q_at_sigma(cand_wss, cand_tw, cur.sigma()) > q {
                // accept, then refresh sigma in closed form from the same
                // residual statistics
                let sigma = (cand_wss / cand_tw).sqrt().clamp(SIGMA_FLOOR, PARAM_BOUND);
                cur = with_sigma(&cand_expert, sigma);
                q = q_at_sigma(cand_wss, cand_tw, sigma);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if q - q_before < cfg.inner_tolerance {
            break;
        }
    }
    match cur {
        Expert::Mlp(m) => m,
        _ => unreachable!(),
    }
}

/// Deterministic multi-start initialization.
///
/// Mixing weights start uniform. Linear experts start at the full-series
/// least-squares fit plus per-component Gaussian jitter (scale
/// `0.5 * |coefficient| + 0.1`); MLP experts draw every weight uniformly
/// from `[-0.7, 0.7]`. Both kinds inherit the residual standard deviation
/// of the full-series fit as their starting noise scale.
pub fn initialize(
    series: &SeriesData,
    p: usize,
    spec: ExpertSpec,
    seed: u64,
) -> Result<MixtureModel> {
    if p == 0 {
        return Err(Error::InvalidModel("component count must be positive".into()));
    }
    let lags = spec.lags();
    if series.len() < lags + 1 {
        return Err(Error::InsufficientData {
            needed: lags + 1,
            got: series.len(),
        });
    }
    let ones = vec![1.0; series.num_transitions(lags)];
    let (ols, _) = m_step_linear(series, &ones, lags)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, center: f64| {
        let scale = 0.5 * center.abs() + 0.1;
        let draw: f64 = Normal::new(0.0, scale).expect("positive scale").sample(rng);
        (center + draw).clamp(-PARAM_BOUND, PARAM_BOUND)
    };
    let mut experts = Vec::with_capacity(p);
    for _ in 0..p {
        let expert = match spec {
            ExpertSpec::Linear { .. } => Expert::Linear(LinearExpert {
                coeffs: ols.coeffs.iter().map(|&c| jitter(&mut rng, c)).collect(),
                intercept: jitter(&mut rng, ols.intercept),
                sigma: ols.sigma,
            }),
            ExpertSpec::Mlp { lags, hidden_units } => {
                let mut draw = || rng.random_range(-0.7..0.7);
                Expert::Mlp(MlpExpert {
                    lags,
                    output_bias: draw(),
                    output_weights: (0..hidden_units).map(|_| draw()).collect(),
                    hidden_biases: (0..hidden_units).map(|_| draw()).collect(),
                    hidden_weights: (0..hidden_units * lags).map(|_| draw()).collect(),
                    sigma: ols.sigma,
                })
            }
        };
        experts.push(expert);
    }
    MixtureModel::new(experts, vec![1.0 / p as f64; p])
}

/// Run one EM chain from an explicit starting model.
///
/// `best_restart` in the result is always zero; [`em_run`] rewrites it.
pub fn em_single(series: &SeriesData, init: MixtureModel, cfg: &FitConfig) -> Result<FitResult> {
    let p = init.num_components();
    if !(cfg.eta > 0.0 && cfg.eta < 1.0 / p as f64) {
        return Err(Error::InvalidModel(format!(
            "eta = {} must lie in (0, 1/{p})",
            cfg.eta
        )));
    }
    let lags = init.lags();
    let mut model = init;
    let (mut resp, mut loglik) = e_step_with_loglik(&model, series)?;
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut ridge_fallbacks = 0;
    for _ in 0..cfg.max_em_iterations {
        let weights = m_step_weights(&resp, cfg.eta);
        let mut experts = Vec::with_capacity(p);
        for (i, expert) in model.experts().iter().enumerate() {
            let column = resp.column(i);
            // a fully starved component keeps its parameters for this
            // iteration; its weight is already pinned at the floor
            let starved = !column.iter().any(|&w| w > 0.0);
            let updated = match expert {
                Expert::Linear(_) if starved => expert.clone(),
                Expert::Linear(_) => {
                    let (lin, ridged) = m_step_linear(series, &column, lags)?;
                    if ridged {
                        ridge_fallbacks += 1;
                    }
                    Expert::Linear(lin)
                }
                Expert::Mlp(start) => Expert::Mlp(m_step_mlp(series, &column, start, cfg)),
            };
            experts.push(updated);
        }
        model = MixtureModel::new(experts, weights)?;
        let (next_resp, next_loglik) = e_step_with_loglik(&model, series)?;
        resp = next_resp;
        trace.push(next_loglik);
        let gain = next_loglik - loglik;
        let denom = loglik.abs().max(1.0);
        loglik = next_loglik;
        if gain < cfg.rel_tolerance * denom {
            converged = true;
            break;
        }
    }
    let em_iterations = trace.len() - 1;
    Ok(FitResult {
        model,
        loglik,
        em_iterations,
        converged,
        best_restart: 0,
        loglik_trace: trace,
        ridge_fallbacks,
    })
}

/// Fit a `p`-component mixture by the best of `cfg.restarts` independent EM
/// chains. Restart seeds are derived from `cfg.master_seed`, so the result
/// is a pure function of the inputs regardless of scheduling.
pub fn em_run(
    series: &SeriesData,
    p: usize,
    spec: ExpertSpec,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let lags = spec.lags();
    if series.len() < lags + p + 1 {
        return Err(Error::InsufficientData {
            needed: lags + p + 1,
            got: series.len(),
        });
    }
    let outcomes: Vec<(usize, Result<FitResult>)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.master_seed, &[r as u64]);
            let run = initialize(series, p, spec, seed)
                .and_then(|init| em_single(series, init, cfg));
            (r, run)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut first_error: Option<Error> = None;
    for (r, outcome) in outcomes {
        match outcome {
            Ok(mut fit) => {
                fit.best_restart = r;
                let better = match &best {
                    Some(b) => fit.loglik > b.loglik,
                    None => true,
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(e);
                }
            }
        }
    }
    best.ok_or_else(|| Error::AllRestartsFailed {
        restarts: cfg.restarts,
        source: Box::new(first_error.expect("at least one restart ran")),
    })
}
