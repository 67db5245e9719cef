//! Experts, mixtures and their densities.
//!
//! An expert is one autoregressive regression function plus a centered
//! Gaussian noise scale: either a linear map of the lag window or a
//! one-hidden-layer perceptron with tanh activations. A [`MixtureModel`]
//! combines `p` experts with mixing weights and provides the conditional
//! density of the next observation given the lag window, the marginal
//! log-likelihood of a series, and the analytic gradients used by the
//! M-step of the EM fitter.
//!
//! All values are immutable after construction and every operation is a
//! pure function, so models can be evaluated concurrently without
//! synchronization.

use crate::error::{Error, Result};

/// Lower bound kept on every noise scale so a component cannot collapse
/// onto a single data point.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Compact parameter-space bound: every weight, bias and noise scale must
/// satisfy `|value| <= PARAM_BOUND`.
pub const PARAM_BOUND: f64 = 1e6;

/// Tolerance on `sum(weights) - 1` accepted by [`MixtureModel::new`].
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Log-density of a centered Gaussian with standard deviation `sigma`
/// evaluated at `residual`.
pub fn gaussian_log_density(residual: f64, sigma: f64) -> Result<f64> {
    if !residual.is_finite() {
        return Err(Error::NonFinite(format!("residual {residual}")));
    }
    debug_assert!(sigma >= SIGMA_FLOOR);
    Ok(gauss_ln(residual, sigma))
}

#[inline]
fn gauss_ln(residual: f64, sigma: f64) -> f64 {
    -0.5 * LN_2PI - sigma.ln() - residual * residual / (2.0 * sigma * sigma)
}

/// A linear autoregressive expert `y = a . window + b` with noise scale `sigma`.
///
/// `coeffs[i]` multiplies `window[i]`; windows are ordered most-recent-last,
/// so the last coefficient belongs to the previous observation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearExpert {
    pub coeffs: Vec<f64>,
    pub intercept: f64,
    pub sigma: f64,
}

/// A one-hidden-layer perceptron expert
/// `y = output_bias + sum_j output_weights[j] * tanh(hidden_biases[j] + hidden_weights[j] . window)`
/// with noise scale `sigma`.
///
/// `hidden_weights` is stored unit-major: entry `j * lags + m` connects
/// window position `m` to hidden unit `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpExpert {
    pub lags: usize,
    pub output_bias: f64,
    pub output_weights: Vec<f64>,
    pub hidden_biases: Vec<f64>,
    pub hidden_weights: Vec<f64>,
    pub sigma: f64,
}

impl MlpExpert {
    pub fn hidden_units(&self) -> usize {
        self.output_weights.len()
    }
}

/// One mixture component: a regression function plus its noise scale.
#[derive(Debug, Clone, PartialEq)]
pub enum Expert {
    Linear(LinearExpert),
    Mlp(MlpExpert),
}

impl Expert {
    /// Window length consumed by this expert.
    pub fn lags(&self) -> usize {
        match self {
            Expert::Linear(e) => e.coeffs.len(),
            Expert::Mlp(e) => e.lags,
        }
    }

    /// Hidden-unit count; zero for linear experts.
    pub fn hidden_units(&self) -> usize {
        match self {
            Expert::Linear(_) => 0,
            Expert::Mlp(e) => e.hidden_units(),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            Expert::Linear(e) => e.sigma,
            Expert::Mlp(e) => e.sigma,
        }
    }

    /// Intercept-like location parameter, used only for canonical ordering.
    pub(crate) fn location(&self) -> f64 {
        match self {
            Expert::Linear(e) => e.intercept,
            Expert::Mlp(e) => e.output_bias,
        }
    }

    /// Number of free parameters including the noise scale.
    pub fn param_count(&self) -> usize {
        match self {
            Expert::Linear(e) => e.coeffs.len() + 2,
            Expert::Mlp(e) => 2 + e.hidden_units() * (e.lags + 2),
        }
    }

    /// Evaluate the regression function on a lag window
    /// (most-recent-last, length must equal [`Expert::lags`]).
    pub fn predict(&self, window: &[f64]) -> Result<f64> {
        if window.len() != self.lags() {
            return Err(Error::DimensionMismatch {
                expected: self.lags(),
                got: window.len(),
            });
        }
        Ok(self.eval(window))
    }

    #[inline]
    pub(crate) fn eval(&self, window: &[f64]) -> f64 {
        match self {
            Expert::Linear(e) => {
                let mut acc = e.intercept;
                for (a, x) in e.coeffs.iter().zip(window) {
                    acc += a * x;
                }
                acc
            }
            Expert::Mlp(e) => {
                let mut acc = e.output_bias;
                for j in 0..e.hidden_units() {
                    let mut z = e.hidden_biases[j];
                    let row = &e.hidden_weights[j * e.lags..(j + 1) * e.lags];
                    for (w, x) in row.iter().zip(window) {
                        z += w * x;
                    }
                    acc += e.output_weights[j] * z.tanh();
                }
                acc
            }
        }
    }

    /// Check shape consistency, finiteness and the compactness bounds.
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64| -> Result<()> {
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("{name} is not finite")));
            }
            if v.abs() > PARAM_BOUND {
                return Err(Error::InvalidModel(format!(
                    "{name} = {v} exceeds the parameter bound {PARAM_BOUND}"
                )));
            }
            Ok(())
        };
        let check_sigma = |sigma: f64| -> Result<()> {
            if !(SIGMA_FLOOR..=PARAM_BOUND).contains(&sigma) {
                return Err(Error::InvalidModel(format!(
                    "sigma = {sigma} outside [{SIGMA_FLOOR}, {PARAM_BOUND}]"
                )));
            }
            Ok(())
        };
        match self {
            Expert::Linear(e) => {
                if e.coeffs.is_empty() {
                    return Err(Error::InvalidModel("linear expert needs at least one lag".into()));
                }
                for (i, &a) in e.coeffs.iter().enumerate() {
                    check(&format!("coeffs[{i}]"), a)?;
                }
                check("intercept", e.intercept)?;
                check_sigma(e.sigma)
            }
            Expert::Mlp(e) => {
                if e.lags == 0 {
                    return Err(Error::InvalidModel("mlp expert needs at least one lag".into()));
                }
                let k = e.hidden_units();
                if e.hidden_biases.len() != k {
                    return Err(Error::InvalidModel(format!(
                        "hidden_biases has length {}, expected {k}",
                        e.hidden_biases.len()
                    )));
                }
                if e.hidden_weights.len() != k * e.lags {
                    return Err(Error::InvalidModel(format!(
                        "hidden_weights has length {}, expected {}",
                        e.hidden_weights.len(),
                        k * e.lags
                    )));
                }
                check("output_bias", e.output_bias)?;
                for (i, &v) in e.output_weights.iter().enumerate() {
                    check(&format!("output_weights[{i}]"), v)?;
                }
                for (i, &v) in e.hidden_biases.iter().enumerate() {
                    check(&format!("hidden_biases[{i}]"), v)?;
                }
                for (i, &v) in e.hidden_weights.iter().enumerate() {
                    check(&format!("hidden_weights[{i}]"), v)?;
                }
                check_sigma(e.sigma)
            }
        }
    }

    /// Flatten the free parameters into one vector.
    ///
    /// Layouts (shared with [`responsibility_gradient`]):
    /// linear `[coeffs.., intercept, sigma]`;
    /// mlp `[output_bias, output_weights.., hidden_biases.., hidden_weights.., sigma]`.
    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Expert::Linear(e) => {
                let mut v = e.coeffs.clone();
                v.push(e.intercept);
                v.push(e.sigma);
                v
            }
            Expert::Mlp(e) => {
                let mut v = Vec::with_capacity(self.param_count());
                v.push(e.output_bias);
                v.extend_from_slice(&e.output_weights);
                v.extend_from_slice(&e.hidden_biases);
                v.extend_from_slice(&e.hidden_weights);
                v.push(e.sigma);
                v
            }
        }
    }

    /// Rebuild an expert of the same shape from a flat parameter vector.
    pub fn with_flat_params(&self, params: &[f64]) -> Expert {
        assert_eq!(params.len(), self.param_count(), "flat parameter length");
        match self {
            Expert::Linear(e) => {
                let l = e.coeffs.len();
                Expert::Linear(LinearExpert {
                    coeffs: params[..l].to_vec(),
                    intercept: params[l],
                    sigma: params[l + 1],
                })
            }
            Expert::Mlp(e) => {
                let k = e.hidden_units();
                let l = e.lags;
                Expert::Mlp(MlpExpert {
                    lags: l,
                    output_bias: params[0],
                    output_weights: params[1..1 + k].to_vec(),
                    hidden_biases: params[1 + k..1 + 2 * k].to_vec(),
                    hidden_weights: params[1 + 2 * k..1 + 2 * k + k * l].to_vec(),
                    sigma: params[1 + 2 * k + k * l],
                })
            }
        }
    }
}

/// Shape of the expert family to fit: kind, lag count and hidden units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertSpec {
    Linear { lags: usize },
    Mlp { lags: usize, hidden_units: usize },
}

impl ExpertSpec {
    pub fn lags(&self) -> usize {
        match self {
            ExpertSpec::Linear { lags } => *lags,
            ExpertSpec::Mlp { lags, .. } => *lags,
        }
    }

    /// Free parameters per expert of this shape (noise scale included).
    pub fn param_count(&self) -> usize {
        match self {
            ExpertSpec::Linear { lags } => lags + 2,
            ExpertSpec::Mlp { lags, hidden_units } => 2 + hidden_units * (lags + 2),
        }
    }
}

/// Gradient of `weight * gaussian_log_density(y - F(window), sigma)` with
/// respect to the expert's free parameters, in [`Expert::flat_params`] order.
pub fn responsibility_gradient(
    expert: &Expert,
    window: &[f64],
    y: f64,
    weight: f64,
) -> Result<Vec<f64>> {
    if window.len() != expert.lags() {
        return Err(Error::DimensionMismatch {
            expected: expert.lags(),
            got: window.len(),
        });
    }
    if !weight.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("gradient input".into()));
    }
    let mut grad = vec![0.0; expert.param_count()];
    accumulate_gradient(expert, window, y, weight, &mut grad);
    Ok(grad)
}

/// Hot-path version of [`responsibility_gradient`]: adds the gradient of one
/// weighted observation into `grad` without re-validating inputs.
#[inline]
pub(crate) fn accumulate_gradient(
    expert: &Expert,
    window: &[f64],
    y: f64,
    weight: f64,
    grad: &mut [f64],
) {
    let sigma = expert.sigma();
    let residual = y - expert.eval(window);
    // d/dF of the log-density, scaled by the responsibility weight
    let pull = weight * residual / (sigma * sigma);
    match expert {
        Expert::Linear(e) => {
            let l = e.coeffs.len();
            for m in 0..l {
                grad[m] += pull * window[m];
            }
            grad[l] += pull;
            grad[l + 1] += weight * (-1.0 / sigma + residual * residual / (sigma * sigma * sigma));
        }
        Expert::Mlp(e) => {
            let k = e.hidden_units();
            let l = e.lags;
            grad[0] += pull;
            for j in 0..k {
                let mut z = e.hidden_biases[j];
                let row = &e.hidden_weights[j * l..(j + 1) * l];
                for (w, x) in row.iter().zip(window) {
                    z += w * x;
                }
                let th = z.tanh();
                let sech2 = 1.0 - th * th;
                grad[1 + j] += pull * th;
                let back = pull * e.output_weights[j] * sech2;
                grad[1 + k + j] += back;
                for m in 0..l {
                    grad[1 + 2 * k + j * l + m] += back * window[m];
                }
            }
            grad[1 + 2 * k + k * l] +=
                weight * (-1.0 / sigma + residual * residual / (sigma * sigma * sigma));
        }
    }
}

/// An observed scalar series `y_1..y_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesData {
    values: Vec<f64>,
}

impl SeriesData {
    /// Wrap a series, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("series value at index {i}")));
            }
        }
        Ok(SeriesData { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of (window, target) transitions available at a given lag count.
    pub fn num_transitions(&self, lags: usize) -> usize {
        self.values.len().saturating_sub(lags)
    }

    /// Iterate over `(window, target)` pairs; windows are most-recent-last.
    pub fn transitions(&self, lags: usize) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (lags..self.values.len()).map(move |t| (&self.values[t - lags..t], self.values[t]))
    }
}

/// A `p`-component mixture of autoregressive experts with fixed mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    experts: Vec<Expert>,
    weights: Vec<f64>,
}

impl MixtureModel {
    /// Build a mixture, validating every structural invariant: matching lag
    /// counts, positive weights summing to one, and per-expert bounds.
    pub fn new(experts: Vec<Expert>, weights: Vec<f64>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::InvalidModel("mixture needs at least one expert".into()));
        }
        if experts.len() != weights.len() {
            return Err(Error::InvalidModel(format!(
                "{} experts but {} weights",
                experts.len(),
                weights.len()
            )));
        }
        let lags = experts[0].lags();
        for (i, e) in experts.iter().enumerate() {
            e.validate()?;
            if e.lags() != lags {
                return Err(Error::InvalidModel(format!(
                    "expert {i} has {} lags, expected {lags}",
                    e.lags()
                )));
            }
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidModel(format!("weights[{i}] = {w} must be positive")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidModel(format!("weights sum to {sum}, expected 1")));
        }
        Ok(MixtureModel { experts, weights })
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Structural component count `p` of this representation.
    ///
    /// Duplicated experts are counted separately; no attempt is made to
    /// minimize over equivalent representations.
    pub fn num_components(&self) -> usize {
        self.experts.len()
    }

    /// Common window length of all experts.
    pub fn lags(&self) -> usize {
        self.experts[0].lags()
    }

    /// Conditional density of `y` given a lag window, as a direct sum of the
    /// weighted component densities.
    pub fn conditional_density(&self, window: &[f64], y: f64) -> Result<f64> {
        self.check_window(window)?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("target {y}")));
        }
        let mut acc = 0.0;
        for (e, &w) in self.experts.iter().zip(&self.weights) {
            acc += w * gauss_ln(y - e.eval(window), e.sigma()).exp();
        }
        Ok(acc)
    }

    /// Log of the conditional density, computed with log-sum-exp so that it
    /// stays finite even where the direct sum would underflow.
    pub fn log_conditional_density(&self, window: &[f64], y: f64) -> Result<f64> {
        self.check_window(window)?;
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("target {y}")));
        }
        let mut terms = Vec::with_capacity(self.experts.len());
        for (e, &w) in self.experts.iter().zip(&self.weights) {
            terms.push(w.ln() + gauss_ln(y - e.eval(window), e.sigma()));
        }
        Ok(log_sum_exp(&terms))
    }

    /// Marginal log-likelihood: the sum of [`Self::log_conditional_density`]
    /// over every transition in the series.
    pub fn log_likelihood(&self, series: &SeriesData) -> Result<f64> {
        let lags = self.lags();
        if series.len() < lags + 1 {
            return Err(Error::InsufficientData {
                needed: lags + 1,
                got: series.len(),
            });
        }
        let mut terms = vec![0.0; self.experts.len()];
        let mut total = 0.0;
        for (window, y) in series.transitions(lags) {
            for (i, (e, &w)) in self.experts.iter().zip(&self.weights).enumerate() {
                terms[i] = w.ln() + gauss_ln(y - e.eval(window), e.sigma());
            }
            total += log_sum_exp(&terms);
        }
        Ok(total)
    }

    /// Copy with components sorted by descending weight, ties broken by
    /// ascending intercept (output bias for MLP experts). Used only when
    /// reporting; fitting never reorders.
    pub fn canonicalized(&self) -> MixtureModel {
        let mut idx: Vec<usize> = (0..self.experts.len()).collect();
        idx.sort_by(|&a, &b| {
            self.weights[b]
                .partial_cmp(&self.weights[a])
                .unwrap()
                .then(self.experts[a].location().partial_cmp(&self.experts[b].location()).unwrap())
        });
        MixtureModel {
            experts: idx.iter().map(|&i| self.experts[i].clone()).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.len() != self.lags() {
            return Err(Error::DimensionMismatch {
                expected: self.lags(),
                got: window.len(),
            });
        }
        Ok(())
    }
}

/// `ln(sum_i exp(terms[i]))`, stable against underflow.
pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|&t| (t - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(coeffs: &[f64], intercept: f64, sigma: f64) -> Expert {
        Expert::Linear(LinearExpert {
            coeffs: coeffs.to_vec(),
            intercept,
            sigma,
        })
    }

    fn mlp(
        lags: usize,
        output_bias: f64,
        output_weights: &[f64],
        hidden_biases: &[f64],
        hidden_weights: &[f64],
        sigma: f64,
    ) -> Expert {
        Expert::Mlp(MlpExpert {
            lags,
            output_bias,
            output_weights: output_weights.to_vec(),
            hidden_biases: hidden_biases.to_vec(),
            hidden_weights: hidden_weights.to_vec(),
            sigma,
        })
    }

    fn random_expert(rng: &mut ChaCha8Rng, kind_mlp: bool, lags: usize, k: usize) -> Expert {
        let mut draw = |scale: f64| rng.random_range(-scale..scale);
        if kind_mlp {
            Expert::Mlp(MlpExpert {
                lags,
                output_bias: draw(2.0),
                output_weights: (0..k).map(|_| draw(2.0)).collect(),
                hidden_biases: (0..k).map(|_| draw(2.0)).collect(),
                hidden_weights: (0..k * lags).map(|_| draw(2.0)).collect(),
                sigma: rng.random_range(0.2..2.0),
            })
        } else {
            Expert::Linear(LinearExpert {
                coeffs: (0..lags).map(|_| draw(2.0)).collect(),
                intercept: draw(2.0),
                sigma: rng.random_range(0.2..2.0),
            })
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, p: usize, lags: usize) -> MixtureModel {
        let experts = (0..p)
            .map(|_| {
                let is_mlp = rng.random_bool(0.5);
                random_expert(rng, is_mlp, lags, 2)
            })
            .collect();
        let raw: Vec<f64> = (0..p).map(|_| rng.random_range(0.2..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        MixtureModel::new(experts, raw.iter().map(|w| w / sum).collect()).unwrap()
    }

    #[test]
    fn predict_mlp_zero_preactivation() {
        let e = mlp(1, 1.0, &[1.0], &[0.0], &[0.0], 1.0);
        assert_eq!(e.predict(&[5.0]).unwrap(), 1.0);
    }

    #[test]
    fn predict_linear_half_slope() {
        let e = linear(&[0.5], 0.5, 1.0);
        assert_eq!(e.predict(&[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn predict_mlp_two_units_hand_value() {
        // straight-line evaluation of 0.3 + tanh(0.3) - 2 tanh(0.08)
        let e = mlp(1, 0.3, &[1.0, -2.0], &[0.1, -0.2], &[0.5, 0.7], 1.0);
        let expected = 0.3 + (0.3f64).tanh() - 2.0 * (0.08f64).tanh();
        assert!((e.predict(&[0.4]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn predict_rejects_window_mismatch() {
        let e = linear(&[0.5], 0.0, 1.0);
        assert!(matches!(
            e.predict(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn gaussian_log_density_standard_values() {
        let half_ln_2pi = 0.918_938_533_204_672_7;
        assert!((gaussian_log_density(0.0, 1.0).unwrap() + half_ln_2pi).abs() < 1e-12);
        let expected = -half_ln_2pi - std::f64::consts::LN_2 - 0.5;
        assert!((gaussian_log_density(2.0, 2.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_log_density_hand_value() {
        // independent evaluation of the formula at (0.3, 0.5)
        let expected =
            -0.5 * (2.0 * std::f64::consts::PI).ln() - (0.5f64).ln() - 0.09 / (2.0 * 0.25);
        assert!((gaussian_log_density(0.3, 0.5).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn gaussian_log_density_rejects_non_finite() {
        assert!(gaussian_log_density(f64::NAN, 1.0).is_err());
        assert!(gaussian_log_density(f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn conditional_density_single_component() {
        let m = MixtureModel::new(vec![linear(&[0.3], 0.1, 0.7)], vec![1.0]).unwrap();
        let window = [0.8];
        let y = 0.5;
        let direct = gaussian_log_density(y - (0.3 * 0.8 + 0.1), 0.7).unwrap().exp();
        assert!((m.conditional_density(&window, y).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn conditional_density_collapses_for_identical_experts() {
        let e = linear(&[0.3], 0.1, 0.7);
        let single = MixtureModel::new(vec![e.clone()], vec![1.0]).unwrap();
        let double = MixtureModel::new(vec![e.clone(), e], vec![0.6, 0.4]).unwrap();
        let w = [0.8];
        let a = single.conditional_density(&w, 0.5).unwrap();
        let b = double.conditional_density(&w, 0.5).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn conditional_density_two_term_oracle() {
        let m = MixtureModel::new(
            vec![linear(&[0.1], 0.5, 0.5), linear(&[0.5], -0.5, 0.5)],
            vec![0.7, 0.3],
        )
        .unwrap();
        // brute-force two-term sum computed from scratch
        let pdf = |r: f64, s: f64| (-r * r / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let expected = 0.7 * pdf(0.2 - (0.1 * 1.0 + 0.5), 0.5) + 0.3 * pdf(0.2 - (0.5 * 1.0 - 0.5), 0.5);
        let got = m.conditional_density(&[1.0], 0.2).unwrap();
        assert!((got - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn log_likelihood_single_transition() {
        let m = MixtureModel::new(vec![linear(&[0.2], 0.1, 0.9)], vec![1.0]).unwrap();
        let series = SeriesData::new(vec![1.0, 0.4]).unwrap();
        let expected = m.log_conditional_density(&[1.0], 0.4).unwrap();
        assert!((m.log_likelihood(&series).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_standard_normal_at_zero() {
        let m = MixtureModel::new(vec![linear(&[0.0], 0.0, 1.0)], vec![1.0]).unwrap();
        let series = SeriesData::new(vec![0.0, 0.0]).unwrap();
        assert!((m.log_likelihood(&series).unwrap() + 0.918_938_533_2).abs() < 1e-10);
    }

    #[test]
    fn log_likelihood_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let p = 1 + (trial % 3);
            let model = random_model(&mut rng, p, 2);
            let values: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
            let series = SeriesData::new(values.clone()).unwrap();
            // naive double loop over transitions and components
            let mut naive = 0.0;
            for t in 2..values.len() {
                let mut dens = 0.0;
                for (e, &w) in model.experts().iter().zip(model.weights()) {
                    let f = e.predict(&values[t - 2..t]).unwrap();
                    let r = values[t] - f;
                    let s = e.sigma();
                    dens += w * (-r * r / (2.0 * s * s)).exp()
                        / (s * (2.0 * std::f64::consts::PI).sqrt());
                }
                naive += dens.ln();
            }
            let fast = model.log_likelihood(&series).unwrap();
            assert!((fast - naive).abs() < 1e-10, "trial {trial}: {fast} vs {naive}");
        }
    }

    #[test]
    fn log_likelihood_rejects_short_series() {
        let m = MixtureModel::new(vec![linear(&[0.1, 0.2], 0.0, 1.0)], vec![1.0]).unwrap();
        let series = SeriesData::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            m.log_likelihood(&series),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn summands_match_conditional_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let p = 1 + rng.random_range(0..3);
            let model = random_model(&mut rng, p, 1);
            let window = [rng.random_range(-2.0..2.0)];
            let y = rng.random_range(-2.0..2.0);
            let lcd = model.log_conditional_density(&window, y).unwrap();
            let cd = model.conditional_density(&window, y).unwrap();
            assert!((lcd.exp() - cd).abs() <= 1e-12 * cd.abs().max(1e-300));
        }
    }

    #[test]
    fn permuting_components_leaves_densities_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = random_model(&mut rng, 3, 1);
        let perm = MixtureModel::new(
            vec![
                model.experts()[2].clone(),
                model.experts()[0].clone(),
                model.experts()[1].clone(),
            ],
            vec![model.weights()[2], model.weights()[0], model.weights()[1]],
        )
        .unwrap();
        let values: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let series = SeriesData::new(values).unwrap();
        let a = model.log_likelihood(&series).unwrap();
        let b = perm.log_likelihood(&series).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
        let c = model.conditional_density(&[0.3], 0.1).unwrap();
        let d = perm.conditional_density(&[0.3], 0.1).unwrap();
        assert!((c - d).abs() <= 1e-12 * c);
    }

    #[test]
    fn merging_identical_experts_preserves_density() {
        let e = linear(&[0.4], -0.2, 0.6);
        let merged = MixtureModel::new(vec![e.clone()], vec![1.0]).unwrap();
        let split = MixtureModel::new(vec![e.clone(), e], vec![0.25, 0.75]).unwrap();
        for y in [-1.0, 0.0, 0.3, 2.0] {
            let a = merged.conditional_density(&[0.5], y).unwrap();
            let b = split.conditional_density(&[0.5], y).unwrap();
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn mlp_output_is_bounded_by_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let e = random_expert(&mut rng, true, 2, 3);
            let bound = match &e {
                Expert::Mlp(m) => {
                    m.output_bias.abs() + m.output_weights.iter().map(|a| a.abs()).sum::<f64>()
                }
                _ => unreachable!(),
            };
            let window = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            assert!(e.predict(&window).unwrap().abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn gradient_zero_residual_and_zero_weight() {
        let e = linear(&[0.5], 0.5, 0.8);
        // window (1.0) predicts exactly 1.0, so the residual vanishes
        let g = responsibility_gradient(&e, &[1.0], 1.0, 0.4).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - (-0.4 / 0.8)).abs() < 1e-15);

        let g0 = responsibility_gradient(&e, &[1.0], 3.0, 0.0).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for trial in 0..40 {
            let is_mlp = trial % 2 == 0;
            let lags = if trial % 4 < 2 { 1 } else { 3 };
            let expert = random_expert(&mut rng, is_mlp, lags, 2);
            let window: Vec<f64> = (0..lags).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y = rng.random_range(-2.0..2.0);
            let weight = rng.random_range(0.1..1.0);
            let grad = responsibility_gradient(&expert, &window, y, weight).unwrap();
            let params = expert.flat_params();
            let h = 1e-6;
            for i in 0..params.len() {
                let mut plus = params.clone();
                plus[i] += h;
                let mut minus = params.clone();
                minus[i] -= h;
                let f = |p: &[f64]| {
                    let e = expert.with_flat_params(p);
                    weight * gauss_ln(y - e.eval(&window), e.sigma())
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-6,
                    "trial {trial} param {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn num_components_is_structural() {
        let e = linear(&[0.1], 0.0, 1.0);
        let one = MixtureModel::new(vec![e.clone()], vec![1.0]).unwrap();
        assert_eq!(one.num_components(), 1);
        let three = MixtureModel::new(
            vec![e.clone(), linear(&[0.2], 0.0, 1.0), linear(&[0.3], 0.0, 1.0)],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        assert_eq!(three.num_components(), 3);
        // two identical experts still count as two
        let dup = MixtureModel::new(vec![e.clone(), e], vec![0.5, 0.5]).unwrap();
        assert_eq!(dup.num_components(), 2);
    }

    #[test]
    fn model_validation_rejects_bad_weights() {
        let e = linear(&[0.1], 0.0, 1.0);
        assert!(MixtureModel::new(vec![e.clone(), e.clone()], vec![0.5, 0.4]).is_err());
        assert!(MixtureModel::new(vec![e.clone()], vec![-1.0]).is_err());
        assert!(MixtureModel::new(vec![e], vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn expert_validation_enforces_bounds() {
        assert!(linear(&[0.1], 0.0, 1e-6).validate().is_err());
        assert!(linear(&[2e6], 0.0, 1.0).validate().is_err());
        assert!(linear(&[0.1], f64::NAN, 1.0).validate().is_err());
        let bad_shape = mlp(2, 0.0, &[1.0], &[0.0], &[0.1], 1.0);
        assert!(bad_shape.validate().is_err());
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for is_mlp in [false, true] {
            let e = random_expert(&mut rng, is_mlp, 3, 2);
            let rebuilt = e.with_flat_params(&e.flat_params());
            assert_eq!(e, rebuilt);
        }
    }

    #[test]
    fn canonicalized_orders_by_weight_then_location() {
        let m = MixtureModel::new(
            vec![linear(&[0.1], 1.0, 1.0), linear(&[0.2], -1.0, 1.0), linear(&[0.3], 0.0, 1.0)],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let c = m.canonicalized();
        assert_eq!(c.weights(), &[0.5, 0.3, 0.2]);
        // equal weights fall back to ascending intercept
        let tie = MixtureModel::new(
            vec![linear(&[0.1], 1.0, 1.0), linear(&[0.2], -1.0, 1.0)],
            vec![0.5, 0.5],
        )
        .unwrap();
        let c = tie.canonicalized();
        match &c.experts()[0] {
            Expert::Linear(e) => assert_eq!(e.intercept, -1.0),
            _ => unreachable!(),
        }
    }

    #[test]
    fn series_rejects_non_finite() {
        assert!(SeriesData::new(vec![0.0, f64::NAN]).is_err());
        assert!(SeriesData::new(vec![0.0, 1.0]).is_ok());
    }
}
