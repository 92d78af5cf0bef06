//! Pipeline configuration and declarative feature encoding.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design_glm::{LonelyPsu, INTERCEPT};
use crate::error::{Error, Result};
use crate::gee_twostep::AlphaMode;
use crate::logit::SolverConfig;

/// One input column and how it becomes model features. Numeric columns map
/// to a single feature of the same name; categorical columns expand to one
/// indicator `column=level` per non-reference level, in declared order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDecl {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    /// Defaults to the first level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl FeatureDecl {
    pub fn numeric(column: &str) -> Self {
        FeatureDecl {
            column: column.into(),
            levels: None,
            reference: None,
        }
    }

    fn reference_level(&self) -> Option<&str> {
        let levels = self.levels.as_ref()?;
        Some(self.reference.as_deref().unwrap_or_else(|| levels[0].as_str()))
    }
}

/// Validated encoding: maps raw column values to an intercept-first vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    decls: Vec<FeatureDecl>,
    names: Vec<String>,
}

impl Encoder {
    pub fn new(decls: &[FeatureDecl]) -> Result<Self> {
        let mut names = vec![INTERCEPT.to_string()];
        for d in decls {
            match &d.levels {
                None => {
                    if d.reference.is_some() {
                        return Err(Error::EncodingMismatch(format!(
                            "column `{}` has a reference level but no levels",
                            d.column
                        )));
                    }
                    names.push(d.column.clone());
                }
                Some(levels) => {
                    if levels.len() < 2 {
                        return Err(Error::EncodingMismatch(format!(
                            "categorical column `{}` needs at least two levels",
                            d.column
                        )));
                    }
                    let reference = d.reference_level().unwrap();
                    if !levels.iter().any(|l| l == reference) {
                        return Err(Error::EncodingMismatch(format!(
                            "reference `{reference}` is not a level of `{}`",
                            d.column
                        )));
                    }
                    for (i, l) in levels.iter().enumerate() {
                        if levels[..i].contains(l) {
                            return Err(Error::EncodingMismatch(format!(
                                "level `{l}` of `{}` declared twice",
                                d.column
                            )));
                        }
                        if l != reference {
                            names.push(format!("{}={l}", d.column));
                        }
                    }
                }
            }
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::EncodingMismatch(format!("feature `{n}` declared twice")));
            }
        }
        Ok(Encoder {
            decls: decls.to_vec(),
            names,
        })
    }

    /// Feature names, intercept first.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.decls.iter().map(|d| d.column.as_str())
    }

    /// Encodes one row; `get` returns the raw value of a column. `row` labels
    /// errors.
    pub fn encode<'a>(&self, get: impl Fn(&str) -> Option<&'a str>, row: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.names.len());
        out.push(1.0);
        for d in &self.decls {
            let raw = get(&d.column)
                .ok_or_else(|| Error::Schema(format!("missing column `{}`", d.column)))?
                .trim();
            match &d.levels {
                None => {
                    let v: f64 = raw.parse().map_err(|_| {
                        Error::Schema(format!("row {row}: column `{}` value `{raw}` is not numeric", d.column))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Schema(format!("row {row}: column `{}` is not finite", d.column)));
                    }
                    out.push(v);
                }
                Some(levels) => {
                    if !levels.iter().any(|l| l == raw) {
                        return Err(Error::EncodingMismatch(format!(
                            "row {row}: column `{}` has undeclared level `{raw}`",
                            d.column
                        )));
                    }
                    let reference = d.reference_level().unwrap();
                    for l in levels.iter().filter(|l| l.as_str() != reference) {
                        out.push(if l == raw { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GeeMode {
    /// Fit the clustered model when any incident has several offenders.
    #[default]
    Auto,
    Always,
    Never,
}

fn default_floor() -> f64 {
    0.01
}

fn default_bound() -> f64 {
    1e6
}

fn default_bins() -> usize {
    10
}

fn default_folds() -> usize {
    5
}

fn default_replicates() -> usize {
    50
}

fn default_resample() -> usize {
    10_000
}

fn default_seed() -> u64 {
    1
}

/// Everything one pipeline run needs. Relative paths are resolved against
/// the directory of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub survey: Option<PathBuf>,
    pub offenses: PathBuf,
    /// CSV with columns `incident_id,pi_hat`.
    #[serde(default)]
    pub propensities: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_floor")]
    pub positivity_floor: f64,
    #[serde(default)]
    pub allow_positivity_violation: bool,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub lonely_psu: LonelyPsu,
    /// Survey sampling fraction for the superpopulation term.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_bound")]
    pub covariate_bound: f64,
    /// Offense-file columns whose joint value defines a rate group.
    #[serde(default)]
    pub group_by: Vec<String>,
    /// Incident characteristics shared by the survey and the offense file.
    #[serde(default)]
    pub z: Vec<FeatureDecl>,
    /// Offender covariates of the arrest model.
    #[serde(default)]
    pub x: Vec<FeatureDecl>,
    #[serde(default)]
    pub gee: GeeMode,
    #[serde(default)]
    pub alpha: AlphaMode,
    #[serde(default = "default_bins")]
    pub calibration_bins: usize,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    /// Arrest coefficients to probe with the focal-slope diagnostic.
    #[serde(default)]
    pub focal: Vec<String>,
    #[serde(default = "default_replicates")]
    pub focal_replicates: usize,
    #[serde(default = "default_resample")]
    pub focal_resample_size: usize,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.survey.as_mut() {
            fix(p);
        }
        fix(&mut self.offenses);
        if let Some(p) = self.propensities.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positivity_floor > 0.0 && self.positivity_floor < 1.0) {
            return Err(Error::InvalidInput("positivity_floor must lie in (0, 1)".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return Err(Error::InvalidInput("lambda must lie in [0, 1]".into()));
        }
        if self.x.is_empty() && self.z.is_empty() {
            return Err(Error::InvalidInput("no features declared".into()));
        }
        self.z_encoder()?;
        self.x_encoder()?;
        Ok(())
    }

    pub fn z_encoder(&self) -> Result<Encoder> {
        Encoder::new(&self.z)
    }

    pub fn x_encoder(&self) -> Result<Encoder> {
        Encoder::new(&self.x)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("config: {e}")))
    }
}
