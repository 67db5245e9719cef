//! JSON persistence for mixture models and generator specs.
//!
//! Reals are serialized in scientific notation with 17 significant digits,
//! which round-trips every finite double exactly without committing to a
//! binary format. Loading validates the full set of model invariants, so a
//! well-typed file with, say, weights summing to 0.9 is still rejected.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Expert, LinearExpert, MixtureModel, MlpExpert};
use crate::simulate::{GenerativeSpec, DEFAULT_BURN_IN};

use super::CliError;

/// On-disk schema of a mixture model.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub weights: Vec<f64>,
    pub experts: Vec<ExpertFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Linear,
    Mlp,
}

/// On-disk schema of one expert. The `kind` tag decides which of the
/// optional parameter groups must be present; a flat layout keeps parse
/// errors pointing at the exact offending field.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertFile {
    pub kind: ExpertKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lags: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_biases: Option<Vec<f64>>,
    /// One row of length `lags` per hidden unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_weights: Option<Vec<Vec<f64>>>,
    pub sigma: f64,
}

/// On-disk schema of a generator spec: a model plus optional start state.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub model: ModelFile,
    #[serde(default)]
    pub burn_in: Option<usize>,
    #[serde(default)]
    pub initial_window: Option<Vec<f64>>,
}

impl From<&Expert> for ExpertFile {
    fn from(expert: &Expert) -> Self {
        let empty = ExpertFile {
            kind: ExpertKind::Linear,
            coeffs: None,
            intercept: None,
            lags: None,
            output_bias: None,
            output_weights: None,
            hidden_biases: None,
            hidden_weights: None,
            sigma: expert.sigma(),
        };
        match expert {
            Expert::Linear(e) => ExpertFile {
                kind: ExpertKind::Linear,
                coeffs: Some(e.coeffs.clone()),
                intercept: Some(e.intercept),
                ..empty
            },
            Expert::Mlp(e) => ExpertFile {
                kind: ExpertKind::Mlp,
                lags: Some(e.lags),
                output_bias: Some(e.output_bias),
                output_weights: Some(e.output_weights.clone()),
                hidden_biases: Some(e.hidden_biases.clone()),
                hidden_weights: Some(
                    e.hidden_weights.chunks(e.lags).map(|row| row.to_vec()).collect(),
                ),
                ..empty
            },
        }
    }
}

impl ExpertFile {
    fn into_expert(self) -> Result<Expert, String> {
        fn need<T>(value: Option<T>, field: &str, kind: &str) -> Result<T, String> {
            value.ok_or_else(|| format!("missing field `{field}` for kind {kind}"))
        }
        fn forbid<T>(value: &Option<T>, field: &str, kind: &str) -> Result<(), String> {
            if value.is_some() {
                return Err(format!("field `{field}` is not allowed for kind {kind}"));
            }
            Ok(())
        }
        match self.kind {
            ExpertKind::Linear => {
                forbid(&self.lags, "lags", "linear")?;
                forbid(&self.output_bias, "output_bias", "linear")?;
                forbid(&self.output_weights, "output_weights", "linear")?;
                forbid(&self.hidden_biases, "hidden_biases", "linear")?;
                forbid(&self.hidden_weights, "hidden_weights", "linear")?;
                Ok(Expert::Linear(LinearExpert {
                    coeffs: need(self.coeffs, "coeffs", "linear")?,
                    intercept: need(self.intercept, "intercept", "linear")?,
                    sigma: self.sigma,
                }))
            }
            ExpertKind::Mlp => {
                forbid(&self.coeffs, "coeffs", "mlp")?;
                forbid(&self.intercept, "intercept", "mlp")?;
                let lags = need(self.lags, "lags", "mlp")?;
                let hidden_weights = need(self.hidden_weights, "hidden_weights", "mlp")?;
                for (j, row) in hidden_weights.iter().enumerate() {
                    if row.len() != lags {
                        return Err(format!(
                            "hidden_weights[{j}] has {} entries, expected lags = {lags}",
                            row.len()
                        ));
                    }
                }
                Ok(Expert::Mlp(MlpExpert {
                    lags,
                    output_bias: need(self.output_bias, "output_bias", "mlp")?,
                    output_weights: need(self.output_weights, "output_weights", "mlp")?,
                    hidden_biases: need(self.hidden_biases, "hidden_biases", "mlp")?,
                    hidden_weights: hidden_weights.into_iter().flatten().collect(),
                    sigma: self.sigma,
                }))
            }
        }
    }
}

impl ModelFile {
    pub fn from_model(model: &MixtureModel) -> Self {
        ModelFile {
            weights: model.weights().to_vec(),
            experts: model.experts().iter().map(ExpertFile::from).collect(),
        }
    }

    pub fn into_model(self) -> Result<MixtureModel, CliError> {
        let experts = self
            .experts
            .into_iter()
            .enumerate()
            .map(|(i, file)| {
                file.into_expert()
                    .map_err(|msg| CliError::Data(format!("experts[{i}]: {msg}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        MixtureModel::new(experts, self.weights).map_err(|e| CliError::Data(e.to_string()))
    }
}

/// JSON formatter writing every real with 17 significant digits.
struct Sci17Formatter;

impl serde_json::ser::Formatter for Sci17Formatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

fn to_json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sci17Formatter);
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Data(format!("serialization failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serializer emits UTF-8"))
}

fn parse_json<'a, T: Deserialize<'a>>(path: &Path, text: &'a str) -> Result<T, CliError> {
    let mut deserializer = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut deserializer).map_err(|e| {
        CliError::Data(format!(
            "{}: field `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })
}

/// Write a model as JSON.
pub fn save_model(model: &MixtureModel, path: &Path) -> Result<(), CliError> {
    let text = to_json_string(&ModelFile::from_model(model))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Load and validate a model from JSON.
pub fn load_model(path: &Path) -> Result<MixtureModel, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let file: ModelFile = parse_json(path, &text)?;
    file.into_model()
}

/// Load a generator spec: a model plus optional burn-in and start window.
pub fn load_spec(path: &Path) -> Result<GenerativeSpec, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let file: SpecFile = parse_json(path, &text)?;
    let truth = file.model.into_model()?;
    let mut spec = GenerativeSpec::new(truth).with_burn_in(file.burn_in.unwrap_or(DEFAULT_BURN_IN));
    if let Some(window) = file.initial_window {
        spec = spec.with_initial_window(window);
    }
    spec.validate().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(spec)
}
