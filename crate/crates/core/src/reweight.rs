//! Horvitz–Thompson total and ratio rates from reported records, with
//! plug-in variances that carry the first-stage uncertainty.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design_glm::{predict_pi, PiModel};
use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959964;

/// One reported offense (one offender row of a reported incident).
#[derive(Debug, Clone, PartialEq)]
pub struct OffenseRecord {
    pub incident_id: String,
    pub offender_id: String,
    /// Incident covariates aligned with the reporting model, intercept first.
    pub z: Vec<f64>,
    /// Offender covariates, intercept first.
    pub x: Vec<f64>,
    pub a: bool,
    /// Externally estimated reporting propensity, if supplied.
    pub pi_hat: Option<f64>,
}

/// Source of the per-record reporting propensities.
#[derive(Debug, Clone, PartialEq)]
pub enum FirstStage {
    Model(PiModel),
    /// Use each record's `pi_hat`; no first-stage covariance is available.
    External,
}

impl FirstStage {
    pub fn propensities(&self, records: &[OffenseRecord]) -> Result<Vec<f64>> {
        match self {
            FirstStage::Model(model) => records
                .iter()
                .map(|r| {
                    predict_pi(model, &r.z).map_err(|_| {
                        Error::ModelMismatch(format!(
                            "record {} has {} incident covariates, model expects {}",
                            r.incident_id,
                            r.z.len(),
                            model.dim()
                        ))
                    })
                })
                .collect(),
            FirstStage::External => records
                .iter()
                .map(|r| {
                    let p = r.pi_hat.ok_or_else(|| {
                        Error::ModelMismatch(format!(
                            "record {} has no external propensity",
                            r.incident_id
                        ))
                    })?;
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(Error::InvalidInput(format!(
                            "record {} has propensity {p} outside (0, 1]",
                            r.incident_id
                        )));
                    }
                    Ok(p)
                })
                .collect(),
        }
    }

    /// γ̂, Σ̂ᵛ and n_v when the first stage is a fitted model with covariance.
    pub fn covariance(&self) -> Option<(DVector<f64>, DMatrix<f64>, usize)> {
        match self {
            FirstStage::Model(m) => m.sigma_v_matrix().map(|s| (m.gamma(), s, m.n_survey)),
            FirstStage::External => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateConfig {
    pub positivity_floor: f64,
    /// Proceed even when some propensity is below the floor.
    pub allow_positivity_violation: bool,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            positivity_floor: 0.01,
            allow_positivity_violation: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub value: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// n / n_v used in the variance (0 when the first stage is omitted).
    pub kappa: f64,
}

impl RateEstimate {
    pub fn wald(value: f64, se: f64, kappa: f64) -> Self {
        RateEstimate {
            value,
            se,
            ci_low: value - Z_975 * se,
            ci_high: value + Z_975 * se,
            kappa,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PopulationTotal {
    pub n: usize,
    /// N̂ with its standard error.
    pub total: RateEstimate,
    /// N̂ / n.
    pub inflation: RateEstimate,
    /// Asymptotic variance of √n (N̂/N − 1).
    pub v_n: f64,
    pub first_stage_included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rates {
    pub n: usize,
    pub n_hat: f64,
    pub pi_star: RateEstimate,
    pub q_star: RateEstimate,
    /// Share of reported records with an arrest.
    pub alpha_star: f64,
    pub first_stage_included: bool,
}

/// Verifies the positivity floor; returns the number of violating records.
pub fn check_positivity(pi: &[f64], cfg: &RateConfig) -> Result<usize> {
    let below: Vec<f64> = pi
        .iter()
        .cloned()
        .filter(|&p| p < cfg.positivity_floor)
        .collect();
    if !below.is_empty() && !cfg.allow_positivity_violation {
        return Err(Error::PositivityViolation {
            count: below.len(),
            floor: cfg.positivity_floor,
            min: below.iter().cloned().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(below.len())
}

/// Inputs shared by the three plug-in variances.
struct Prepared {
    pi: Vec<f64>,
    /// κ wᵀ Σ̂ᵛ w with w = mean over records of e^{−γ̂ᵀz} z.
    first_stage: f64,
    kappa: f64,
    included: bool,
}

fn prepare(records: &[OffenseRecord], first_stage: &FirstStage, cfg: &RateConfig) -> Result<Prepared> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no reported records".into()));
    }
    let pi = first_stage.propensities(records)?;
    check_positivity(&pi, cfg)?;
    let n = records.len() as f64;
    match first_stage.covariance() {
        Some((_, sigma_v, n_v)) => {
            let d = sigma_v.nrows();
            // ∂(1/π)/∂γ = −e^{−γᵀz} z and e^{−γᵀz} = 1/π − 1.
            let mut w = DVector::zeros(d);
            for (rec, &p) in records.iter().zip(&pi) {
                let e = 1.0 / p - 1.0;
                for j in 0..d {
                    w[j] += e * rec.z[j];
                }
            }
            w /= n;
            let kappa = n / n_v as f64;
            let first = kappa * (w.transpose() * &sigma_v * &w)[(0, 0)];
            Ok(Prepared {
                pi,
                first_stage: first.max(0.0),
                kappa,
                included: true,
            })
        }
        None => Ok(Prepared {
            pi,
            first_stage: 0.0,
            kappa: 0.0,
            included: false,
        }),
    }
}

fn total_from(prep: &Prepared) -> PopulationTotal {
    let n = prep.pi.len();
    let nf = n as f64;
    let n_hat: f64 = prep.pi.iter().map(|p| 1.0 / p).sum();
    let pi_star = nf / n_hat;
    let inner = prep.pi.iter().map(|p| (1.0 - p) / (p * p)).sum::<f64>() / nf;
    let v_n = pi_star * pi_star * (inner + prep.first_stage);
    let rel_se = (v_n / nf).sqrt();
    PopulationTotal {
        n,
        total: RateEstimate::wald(n_hat, n_hat * rel_se, prep.kappa),
        inflation: RateEstimate::wald(n_hat / nf, n_hat / nf * rel_se, prep.kappa),
        v_n,
        first_stage_included: prep.included,
    }
}

/// N̂ = Σ 1/π̂_i over reported records.
pub fn estimate_population_total(
    records: &[OffenseRecord],
    first_stage: &FirstStage,
    cfg: &RateConfig,
) -> Result<PopulationTotal> {
    Ok(total_from(&prepare(records, first_stage, cfg)?))
}

fn rates_from(records: &[OffenseRecord], prep: &Prepared) -> Rates {
    let nf = records.len() as f64;
    let n_hat: f64 = prep.pi.iter().map(|p| 1.0 / p).sum();
    let arrests = records.iter().filter(|r| r.a).count() as f64;
    let pi_star = nf / n_hat;
    let q_star = arrests / n_hat;

    let mut v_pi = 0.0;
    let mut v_q = 0.0;
    for (rec, &p) in records.iter().zip(&prep.pi) {
        let dp = 1.0 - pi_star / p;
        let a = if rec.a { 1.0 } else { 0.0 };
        let dq = a - q_star / p;
        v_pi += dp * dp;
        v_q += dq * dq;
    }
    let ps2 = pi_star * pi_star;
    let v_pi = ps2 * (v_pi / nf) + ps2 * ps2 * prep.first_stage;
    let v_q = ps2 * (v_q / nf) + ps2 * q_star * q_star * prep.first_stage;
    Rates {
        n: records.len(),
        n_hat,
        pi_star: RateEstimate::wald(pi_star, (v_pi / nf).sqrt(), prep.kappa),
        q_star: RateEstimate::wald(q_star, (v_q / nf).sqrt(), prep.kappa),
        alpha_star: arrests / nf,
        first_stage_included: prep.included,
    }
}

/// π̂* = n / N̂ and q̂* = Σ a_i / N̂ with their plug-in standard errors.
pub fn estimate_rates(
    records: &[OffenseRecord],
    first_stage: &FirstStage,
    cfg: &RateConfig,
) -> Result<Rates> {
    Ok(rates_from(records, &prepare(records, first_stage, cfg)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRates {
    pub total: PopulationTotal,
    pub rates: Rates,
}

/// Rates within each group; `keys[i]` labels `records[i]`. Groups with no
/// records never appear in the output.
pub fn grouped_rates(
    records: &[OffenseRecord],
    keys: &[String],
    first_stage: &FirstStage,
    cfg: &RateConfig,
) -> Result<BTreeMap<String, GroupRates>> {
    if keys.len() != records.len() {
        return Err(Error::InvalidInput(format!(
            "{} group keys for {} records",
            keys.len(),
            records.len()
        )));
    }
    let mut groups: BTreeMap<&str, Vec<OffenseRecord>> = BTreeMap::new();
    for (rec, key) in records.iter().zip(keys) {
        groups.entry(key.as_str()).or_default().push(rec.clone());
    }
    groups
        .into_iter()
        .map(|(key, recs)| {
            let prep = prepare(&recs, first_stage, cfg)?;
            Ok((
                key.to_string(),
                GroupRates {
                    total: total_from(&prep),
                    rates: rates_from(&recs, &prep),
                },
            ))
        })
        .collect()
}
