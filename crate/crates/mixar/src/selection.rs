//! Penalized-likelihood selection of the component count.
//!
//! For each candidate order `p` up to a cap, the best multi-start EM fit
//! stands in for the likelihood supremum over the `p`-component family; the
//! selected order maximizes `loglik(p) - penalty(p)`, ties resolved to the
//! smallest `p`.

use crate::em::{em_run, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{ExpertSpec, SeriesData};
use crate::seed::derive_seed;

/// Penalty family for the selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyMode {
    /// `0.5 * p * ln(n)`: one penalty unit per component.
    BicPerComponent,
    /// `0.5 * (p * expert_dim + p - 1) * ln(n)`: classical BIC counting all
    /// free parameters (per-expert parameters plus `p - 1` mixing weights).
    BicPerParameter,
}

impl PenaltyMode {
    /// Penalty value at order `p` for a series of length `n`;
    /// `expert_dim` is the free-parameter count of one expert.
    pub fn penalty(&self, p: usize, n: f64, expert_dim: usize) -> f64 {
        debug_assert!(p >= 1 && n >= 2.0);
        match self {
            PenaltyMode::BicPerComponent => 0.5 * p as f64 * n.ln(),
            PenaltyMode::BicPerParameter => {
                0.5 * (p * expert_dim + p - 1) as f64 * n.ln()
            }
        }
    }
}

/// Fit and criterion value for a single candidate order.
#[derive(Debug, Clone)]
pub struct OrderFit {
    pub p: usize,
    pub loglik: f64,
    pub penalty: f64,
    /// `loglik - penalty`.
    pub criterion: f64,
    pub fit: FitResult,
}

/// Per-order fits and the selected component count.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub per_p: Vec<OrderFit>,
    /// Smallest order attaining the maximum criterion.
    pub chosen: usize,
}

/// Fit every order `1..=p_max` and select the criterion maximizer.
pub fn select_order(
    series: &SeriesData,
    p_max: usize,
    spec: ExpertSpec,
    cfg: &FitConfig,
    mode: PenaltyMode,
) -> Result<SelectionResult> {
    assert!(p_max >= 1, "p_max must be positive");
    let n = series.len() as f64;
    let mut per_p = Vec::with_capacity(p_max);
    for p in 1..=p_max {
        let order_cfg = FitConfig {
            master_seed: derive_seed(cfg.master_seed, &[0x0705_E1EC, p as u64]),
            ..cfg.clone()
        };
        let fit = em_run(series, p, spec, &order_cfg).map_err(|e| Error::OrderFit {
            p,
            source: Box::new(e),
        })?;
        let penalty = mode.penalty(p, n, spec.param_count());
        per_p.push(OrderFit {
            p,
            loglik: fit.loglik,
            penalty,
            criterion: fit.loglik - penalty,
            fit,
        });
    }
    for pair in per_p.windows(2) {
        let slack = 1e-6 * pair[0].loglik.abs();
        if pair[1].loglik < pair[0].loglik - slack {
            log::warn!(
                "best fit for p = {} has lower log-likelihood than p = {} ({} < {}); \
                 EM restarts likely hit local maxima",
                pair[1].p,
                pair[0].p,
                pair[1].loglik,
                pair[0].loglik
            );
        }
    }
    let chosen = choose(&per_p);
    Ok(SelectionResult { per_p, chosen })
}

/// Smallest order attaining the maximum criterion.
fn choose(per_p: &[OrderFit]) -> usize {
    let mut best = &per_p[0];
    for candidate in &per_p[1..] {
        if candidate.criterion > best.criterion {
            best = candidate;
        }
    }
    best.p
}
