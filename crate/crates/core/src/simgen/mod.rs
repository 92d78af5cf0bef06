//! Synthetic surveys and offense populations with known parameters, and the
//! Monte Carlo harness that checks the estimators against them.
//!
//! Offenses are drawn as (X, Z, R, A) with Z a deterministic coarsening of
//! the incident-level part of X, R ~ Bernoulli(π(Z; γ₀)), and, given R = 1,
//! arrests with marginal probability q(X; θ₀)/π(Z; γ₀), so that
//! E[A | X] = q(X; θ₀). Within an incident, arrests share a Gaussian common
//! factor whose loading is the scenario's latent correlation.

mod coverage;
mod generate;
mod quadrature;

use serde::{Deserialize, Serialize};

use crate::design_glm::INTERCEPT;
use crate::error::{Error, Result};
use crate::linalg::expit;

pub use coverage::{
    estimate_replicate, run_coverage, run_coverage_detailed, CoverageReport, CoverageRow, EstimatorSelection,
    ReplicateOutcome,
};
pub use generate::{
    generate_offenses, generate_offenses_with, generate_survey, generate_survey_with, implied_alpha, pair_moment,
    population_truth, DesignedSurvey, OffensePopulation, SimIncident, Truth,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CovariateDist {
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    #[default]
    Incident,
    Offender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub dist: CovariateDist,
    #[serde(default)]
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ZTransform {
    Copy,
    /// 1 when the source is at least `cut`.
    Threshold { cut: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZFeature {
    pub name: String,
    pub source: String,
    pub transform: ZTransform,
}

/// Product term added to the true arrest predictor but absent from the
/// fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub first: String,
    pub second: String,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurveyDesignSpec {
    pub strata: usize,
    pub psus_per_stratum: usize,
    pub units_per_psu: usize,
    /// Inclusion probability per stratum; a single value applies to all.
    pub inclusion_probs: Vec<f64>,
    /// Scale of the PSU-level logit shift applied to Bernoulli incident covariates.
    pub psu_heterogeneity: f64,
}

impl Default for SurveyDesignSpec {
    fn default() -> Self {
        SurveyDesignSpec {
            strata: 10,
            psus_per_stratum: 20,
            units_per_psu: 10,
            inclusion_probs: (0..10).map(|h| 1e-4 * (1.0 + h as f64 / 3.0)).collect(),
            psu_heterogeneity: 0.5,
        }
    }
}

impl SurveyDesignSpec {
    pub fn inclusion_prob(&self, stratum: usize) -> f64 {
        if self.inclusion_probs.len() == 1 {
            self.inclusion_probs[0]
        } else {
            self.inclusion_probs[stratum]
        }
    }

    pub fn sample_size(&self) -> usize {
        self.strata * self.psus_per_stratum * self.units_per_psu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub seed: u64,
    /// Offender/incident covariates, intercept excluded.
    pub covariates: Vec<CovariateSpec>,
    /// Incident covariates seen by the survey, intercept excluded.
    pub z_features: Vec<ZFeature>,
    /// Reporting coefficients, intercept first. An infinite intercept means
    /// every offense is reported.
    pub gamma0: Vec<f64>,
    /// Arrest coefficients, intercept first.
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
    #[serde(default = "default_floor")]
    pub positivity_floor: f64,
    #[serde(default = "default_bound")]
    pub covariate_bound: f64,
    #[serde(default)]
    pub survey: SurveyDesignSpec,
    /// Number of offenses (incidents) in the population.
    pub population: usize,
    /// P(K = k) for k = 1, 2, ...
    #[serde(default = "default_cluster_sizes")]
    pub cluster_size_probs: Vec<f64>,
    /// Loading of the shared latent factor within an incident.
    #[serde(default)]
    pub latent_correlation: f64,
}

fn default_floor() -> f64 {
    0.01
}

fn default_bound() -> f64 {
    100.0
}

fn default_cluster_sizes() -> Vec<f64> {
    vec![1.0]
}

fn bern(name: &str, p: f64, level: Level) -> CovariateSpec {
    CovariateSpec {
        name: name.into(),
        dist: CovariateDist::Bernoulli { p },
        level,
    }
}

fn unif(name: &str, low: f64, high: f64, level: Level) -> CovariateSpec {
    CovariateSpec {
        name: name.into(),
        dist: CovariateDist::Uniform { low, high },
        level,
    }
}

fn copy(name: &str, source: &str) -> ZFeature {
    ZFeature {
        name: name.into(),
        source: source.into(),
        transform: ZTransform::Copy,
    }
}

impl ScenarioSpec {
    /// Single-offender scenario: three incident covariates for reporting
    /// (d_z = 4 with intercept) and five offense covariates for arrest
    /// (d_x = 6 with intercept). Reporting rises with injury.
    pub fn baseline() -> Self {
        ScenarioSpec {
            name: "baseline".into(),
            seed: 20240601,
            covariates: vec![
                bern("x_offender_black", 0.3, Level::Offender),
                bern("x_injured", 0.25, Level::Incident),
                unif("x_offender_age", -1.0, 1.0, Level::Offender),
                bern("x_victim_black", 0.25, Level::Incident),
                unif("x_hour", 0.0, 1.0, Level::Incident),
            ],
            z_features: vec![
                copy("z_injured", "x_injured"),
                copy("z_victim_black", "x_victim_black"),
                ZFeature {
                    name: "z_night".into(),
                    source: "x_hour".into(),
                    transform: ZTransform::Threshold { cut: 0.5 },
                },
            ],
            gamma0: vec![0.2, 0.8, -0.3, 0.4],
            theta0: vec![-2.0, 0.3, 0.5, -0.4, -0.2, 0.3],
            interactions: Vec::new(),
            positivity_floor: 0.01,
            covariate_bound: 100.0,
            survey: SurveyDesignSpec::default(),
            population: 50_000,
            cluster_size_probs: vec![1.0],
            latent_correlation: 0.0,
        }
    }

    /// Baseline covariates with incidents of one to four offenders.
    pub fn clustered() -> Self {
        ScenarioSpec {
            name: "clustered".into(),
            cluster_size_probs: vec![0.55, 0.25, 0.12, 0.08],
            latent_correlation: 0.4,
            ..Self::baseline()
        }
    }

    /// Every offense is reported (π ≡ 1).
    pub fn all_reported() -> Self {
        let mut s = Self::baseline();
        s.name = "all-reported".into();
        s.gamma0 = vec![f64::INFINITY, 0.0, 0.0, 0.0];
        s
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::SpecInvalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::SpecInvalid(e.to_string()))
    }

    pub fn scaled(&self, factor: usize) -> Self {
        let mut s = self.clone();
        s.population *= factor;
        s.survey.psus_per_stratum *= factor;
        s
    }

    pub fn all_reported_mode(&self) -> bool {
        self.gamma0.first() == Some(&f64::INFINITY)
    }

    pub fn z_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.z_features.iter().map(|z| z.name.clone()))
            .collect()
    }

    pub fn x_names(&self) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain(self.covariates.iter().map(|c| c.name.clone()))
            .collect()
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.covariates
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::SpecInvalid(format!("unknown covariate `{name}`")))
    }

    /// Z (intercept first) from raw covariates (intercept excluded).
    pub(crate) fn coarsen(&self, raw: &[f64], sources: &[usize]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.z_features.len() + 1);
        z.push(1.0);
        for (f, &s) in self.z_features.iter().zip(sources) {
            z.push(match f.transform {
                ZTransform::Copy => raw[s],
                ZTransform::Threshold { cut } => {
                    if raw[s] >= cut {
                        1.0
                    } else {
                        0.0
                    }
                }
            });
        }
        z
    }

    pub(crate) fn z_sources(&self) -> Result<Vec<usize>> {
        self.z_features.iter().map(|f| self.index_of(&f.source)).collect()
    }

    pub(crate) fn interaction_pairs(&self) -> Result<Vec<(usize, usize, f64)>> {
        self.interactions
            .iter()
            .map(|i| Ok((self.index_of(&i.first)?, self.index_of(&i.second)?, i.coef)))
            .collect()
    }

    pub fn pi_of(&self, z: &[f64]) -> f64 {
        if self.all_reported_mode() {
            return 1.0;
        }
        expit(self.gamma0.iter().zip(z).map(|(g, v)| g * v).sum())
    }

    /// True arrest probability for raw covariates (intercept excluded).
    pub(crate) fn q_of(&self, raw: &[f64], interactions: &[(usize, usize, f64)]) -> f64 {
        let mut eta = self.theta0[0];
        for (t, v) in self.theta0[1..].iter().zip(raw) {
            eta += t * v;
        }
        for &(a, b, c) in interactions {
            eta += c * raw[a] * raw[b];
        }
        expit(eta)
    }

    /// Candidate values per covariate at which monotone functions of a
    /// linear predictor attain their extremes within each Z cell.
    fn extreme_points(&self) -> Vec<Vec<f64>> {
        self.covariates
            .iter()
            .map(|c| match &c.dist {
                CovariateDist::Bernoulli { .. } => vec![0.0, 1.0],
                CovariateDist::Discrete { values, .. } => values.clone(),
                CovariateDist::Uniform { low, high } => {
                    let mut v = vec![*low, *high];
                    for z in &self.z_features {
                        if let (true, ZTransform::Threshold { cut }) = (z.source == c.name, &z.transform) {
                            if cut > low && cut < high {
                                v.push(*cut);
                                v.push(cut - 1e-9 * (high - low));
                            }
                        }
                    }
                    v
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let dx = self.covariates.len() + 1;
        let dz = self.z_features.len() + 1;
        if self.theta0.len() != dx {
            return Err(Error::SpecInvalid(format!("theta0 has {} entries, expected {dx}", self.theta0.len())));
        }
        if self.gamma0.len() != dz {
            return Err(Error::SpecInvalid(format!("gamma0 has {} entries, expected {dz}", self.gamma0.len())));
        }
        if self.population == 0 {
            return Err(Error::SpecInvalid("population must be positive".into()));
        }
        if self.cluster_size_probs.is_empty()
            || self.cluster_size_probs.iter().any(|p| !(*p >= 0.0))
            || (self.cluster_size_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::SpecInvalid("cluster size probabilities must sum to 1".into()));
        }
        if !(0.0..1.0).contains(&self.latent_correlation) {
            return Err(Error::SpecInvalid("latent correlation must lie in [0, 1)".into()));
        }
        let s = &self.survey;
        if s.strata == 0 || s.psus_per_stratum < 2 || s.units_per_psu == 0 {
            return Err(Error::SpecInvalid("survey needs strata with at least two PSUs".into()));
        }
        if !(s.inclusion_probs.len() == 1 || s.inclusion_probs.len() == s.strata)
            || s.inclusion_probs.iter().any(|p| !(*p > 0.0 && *p <= 1.0))
        {
            return Err(Error::SpecInvalid("inclusion probabilities must be in (0, 1], one per stratum".into()));
        }
        for c in &self.covariates {
            let ok = match &c.dist {
                CovariateDist::Bernoulli { p } => (0.0..=1.0).contains(p),
                CovariateDist::Uniform { low, high } => low < high && low.abs() < self.covariate_bound && high.abs() < self.covariate_bound,
                CovariateDist::Discrete { values, probs } => {
                    values.len() == probs.len()
                        && !values.is_empty()
                        && values.iter().all(|v| v.abs() < self.covariate_bound)
                        && probs.iter().all(|p| *p >= 0.0)
                        && (probs.iter().sum::<f64>() - 1.0).abs() < 1e-9
                }
            };
            if !ok {
                return Err(Error::SpecInvalid(format!("covariate `{}` has an invalid distribution", c.name)));
            }
        }
        let sources = self.z_sources()?;
        for (f, &s) in self.z_features.iter().zip(&sources) {
            if self.covariates[s].level != Level::Incident {
                return Err(Error::SpecInvalid(format!(
                    "z feature `{}` must derive from an incident-level covariate",
                    f.name
                )));
            }
        }
        let inter = self.interaction_pairs()?;
        if self.all_reported_mode() {
            return Ok(());
        }

        // q ≤ π and π ≥ floor at every extreme point.
        let points = self.extreme_points();
        let mut idx = vec![0usize; points.len()];
        let mut raw = vec![0.0; points.len()];
        loop {
            for (k, &i) in idx.iter().enumerate() {
                raw[k] = points[k][i];
            }
            let z = self.coarsen(&raw, &sources);
            let pi = self.pi_of(&z);
            if pi < self.positivity_floor {
                return Err(Error::SpecInvalid(format!(
                    "reporting propensity {pi:.3e} below floor {} at {raw:?}",
                    self.positivity_floor
                )));
            }
            let q = self.q_of(&raw, &inter);
            if q > pi {
                return Err(Error::SpecInvalid(format!(
                    "arrest probability {q:.4} exceeds reporting propensity {pi:.4} at {raw:?}"
                )));
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return Ok(());
                }
                idx[k] += 1;
                if idx[k] < points[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    /// Quadrature nodes (value, probability) per covariate; uniform ranges
    /// are split at every threshold so the rule never straddles a jump.
    pub(crate) fn covariate_rules(&self) -> Vec<Vec<(f64, f64)>> {
        self.covariates
            .iter()
            .map(|c| match &c.dist {
                CovariateDist::Bernoulli { p } => vec![(0.0, 1.0 - p), (1.0, *p)],
                CovariateDist::Discrete { values, probs } => {
                    values.iter().cloned().zip(probs.iter().cloned()).collect()
                }
                CovariateDist::Uniform { low, high } => {
                    let mut cuts = vec![*low];
                    for z in &self.z_features {
                        if let (true, ZTransform::Threshold { cut }) = (z.source == c.name, &z.transform) {
                            if cut > low && cut < high {
                                cuts.push(*cut);
                            }
                        }
                    }
                    cuts.push(*high);
                    cuts.sort_by(f64::total_cmp);
                    cuts.windows(2)
                        .flat_map(|w| quadrature::composite(w[0], w[1], 24, 1))
                        .map(|(v, wt)| (v, wt / (high - low)))
                        .collect()
                }
            })
            .collect()
    }

    /// E[f(raw covariates)] under the population distribution.
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        let rules = self.covariate_rules();
        let mut raw = vec![0.0; rules.len()];
        fn rec<F: Fn(&[f64]) -> f64>(k: usize, rules: &[Vec<(f64, f64)>], raw: &mut Vec<f64>, w: f64, f: &F) -> (f64, f64) {
            if k == rules.len() {
                return (w * f(raw), w);
            }
            let mut s = (0.0, 0.0);
            for &(v, p) in &rules[k] {
                if p == 0.0 {
                    continue;
                }
                raw[k] = v;
                let (a, b) = rec(k + 1, rules, raw, w * p, f);
                s.0 += a;
                s.1 += b;
            }
            s
        }
        // Dividing by the total mass removes the rule's rounding drift.
        let (sum, mass) = rec(0, &rules, &mut raw, 1.0, &f);
        sum / mass
    }

    /// π* = E[π(Z; γ₀)].
    pub fn pi_star(&self) -> Result<f64> {
        let sources = self.z_sources()?;
        Ok(self.expectation(|raw| self.pi_of(&self.coarsen(raw, &sources))))
    }

    /// q* = E[q(X; θ₀)] per offender.
    pub fn q_star(&self) -> Result<f64> {
        let inter = self.interaction_pairs()?;
        Ok(self.expectation(|raw| self.q_of(raw, &inter)))
    }
}
