//! Declarative merge recipes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::Dtype;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    WeightedAverage,
    TaskArithmetic,
    Ties,
    TiesSv,
    DareTies,
}

impl Algorithm {
    /// Trim / elect / disjoint-merge algorithms.
    pub fn is_ties_family(self) -> bool {
        matches!(self, Algorithm::Ties | Algorithm::TiesSv | Algorithm::DareTies)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimGranularity {
    #[default]
    PerTensor,
    Global,
}

fn one() -> f64 {
    1.0
}

/// One merge, as read from a recipe file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub algorithm: Algorithm,
    /// Shared initialization; optional only for `weighted_average`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<PathBuf>,
    pub models: Vec<PathBuf>,
    /// Per-model trim densities (TIES family).
    #[serde(default)]
    pub densities: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub slack: f64,
    /// Model whose parameters TIES-SV shields; also orients the conflict summary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected_model: Option<usize>,
    #[serde(default)]
    pub trim_granularity: TrimGranularity,
    #[serde(default)]
    pub normalize: bool,
    #[serde(default)]
    pub drop_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dtype: Option<Dtype>,
    /// Averaging weights (`weighted_average`; a single `w` means `(w, 1 − w)`) or
    /// per-model coefficients (`task_arithmetic`, multiplied by `scale`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl MergeRecipe {
    /// A recipe with defaults for everything but the algorithm and inputs.
    pub fn new(algorithm: Algorithm, base: Option<PathBuf>, models: Vec<PathBuf>) -> Self {
        MergeRecipe {
            algorithm,
            base,
            models,
            densities: Vec::new(),
            scale: 1.0,
            slack: 0.0,
            protected_model: None,
            trim_granularity: TrimGranularity::PerTensor,
            normalize: false,
            drop_p: 0.0,
            seed: 0,
            output_dtype: None,
            weights: None,
        }
    }

    /// Parses a recipe; relative paths are resolved against the file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe: MergeRecipe = serde_json::from_str(&text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(dir) = path.parent() {
            recipe.resolve_paths(dir);
        }
        Ok(recipe)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(b) = self.base.as_mut() {
            join(b);
        }
        self.models.iter_mut().for_each(join);
    }

    /// Checks every invariant; no file is touched.
    pub fn validate(&self) -> Result<()> {
        let n = self.models.len();
        let algo = self.algorithm;
        let min_models = if algo == Algorithm::WeightedAverage { 2 } else { 1 };
        if n < min_models {
            return Err(Error::invalid(format!("{algo:?} needs at least {min_models} model(s), got {n}")));
        }
        if algo == Algorithm::TiesSv && n != 2 {
            return Err(Error::invalid(format!("ties_sv merges exactly 2 models, got {n}")));
        }
        if self.base.is_none() && algo != Algorithm::WeightedAverage {
            return Err(Error::invalid("recipe needs a base checkpoint"));
        }
        if !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale {} is not finite", self.scale)));
        }

        if algo.is_ties_family() {
            if self.densities.len() != n {
                return Err(Error::invalid(format!(
                    "{} densities for {n} models",
                    self.densities.len()
                )));
            }
            if let Some(k) = self.densities.iter().find(|k| !(0.0..=1.0).contains(*k)) {
                return Err(Error::invalid(format!("density {k} outside [0, 1]")));
            }
        } else {
            if !self.densities.is_empty() {
                return Err(Error::invalid("densities only apply to ties, ties_sv and dare_ties"));
            }
            if self.normalize {
                return Err(Error::invalid("normalize only applies to ties, ties_sv and dare_ties"));
            }
            if self.trim_granularity != TrimGranularity::PerTensor {
                return Err(Error::invalid("trim_granularity only applies to ties, ties_sv and dare_ties"));
            }
        }

        if !(0.0..=1.0).contains(&self.slack) {
            return Err(Error::invalid(format!("slack {} outside [0, 1]", self.slack)));
        }
        if self.slack != 0.0 && algo != Algorithm::TiesSv {
            return Err(Error::invalid("slack only applies to ties_sv"));
        }
        match self.protected_model {
            Some(i) if i >= n => {
                return Err(Error::invalid(format!("protected_model {i} out of range for {n} models")))
            }
            Some(_) if !algo.is_ties_family() => {
                return Err(Error::invalid("protected_model only applies to ties, ties_sv and dare_ties"))
            }
            None if algo == Algorithm::TiesSv => {
                return Err(Error::invalid("ties_sv needs protected_model"))
            }
            _ => {}
        }

        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::invalid(format!("drop_p {} outside [0, 1)", self.drop_p)));
        }
        if self.drop_p != 0.0 && algo != Algorithm::DareTies {
            return Err(Error::invalid("drop_p only applies to dare_ties"));
        }

        if let Some(w) = &self.weights {
            if let Some(x) = w.iter().find(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("weight {x} is not finite")));
            }
            match algo {
                Algorithm::WeightedAverage if w.len() == 1 && n == 2 => {
                    if !(0.0..=1.0).contains(&w[0]) {
                        return Err(Error::invalid(format!("weight {} outside [0, 1]", w[0])));
                    }
                }
                Algorithm::WeightedAverage | Algorithm::TaskArithmetic if w.len() == n => {}
                Algorithm::WeightedAverage | Algorithm::TaskArithmetic => {
                    return Err(Error::invalid(format!("{} weights for {n} models", w.len())))
                }
                _ => return Err(Error::invalid("weights only apply to weighted_average and task_arithmetic")),
            }
        }
        Ok(())
    }

    /// Effective per-model coefficients for the linear algorithms.
    pub(crate) fn linear_coefficients(&self) -> Vec<f64> {
        let n = self.models.len();
        match self.algorithm {
            Algorithm::WeightedAverage => match self.weights.as_deref() {
                Some([w]) if n == 2 => vec![*w, 1.0 - *w],
                Some(w) => w.to_vec(),
                None => vec![1.0 / n as f64; n],
            },
            _ => match self.weights.as_deref() {
                Some(w) => w.iter().map(|c| self.scale * c).collect(),
                None => vec![self.scale; n],
            },
        }
    }
}
