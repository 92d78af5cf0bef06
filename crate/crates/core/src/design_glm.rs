//! Survey-weighted logistic model for the reporting propensity, with a
//! stratified between-PSU linearization covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_outer_lower, dot_row, expit, fill_upper, spd_inverse, symmetrize};
use crate::logit::{fit_weighted_logistic, score_and_information, SolverConfig};

pub const INTERCEPT: &str = "intercept";

/// One victimization from the survey.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyRecord {
    /// Covariates, intercept first.
    pub z: Vec<f64>,
    /// Whether the victimization was reported.
    pub r: bool,
    /// Inverse inclusion probability.
    pub weight: f64,
    pub stratum: String,
    pub psu: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LonelyPsu {
    #[default]
    Fail,
    /// Single-PSU strata contribute their deviation from the grand mean PSU total.
    CenterAtGrandMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignConfig {
    pub solver: SolverConfig,
    pub lonely_psu: LonelyPsu,
    /// Sampling fraction n_v / N_v; scales the superpopulation term.
    pub lambda: f64,
    /// Bound M on |z_j|.
    pub covariate_bound: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig {
            solver: SolverConfig::default(),
            lonely_psu: LonelyPsu::Fail,
            lambda: 0.0,
            covariate_bound: 1e6,
        }
    }
}

/// Fitted reporting-propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiModel {
    pub feature_names: Vec<String>,
    pub gamma_hat: Vec<f64>,
    /// Covariance of √n_v (γ̂ − γ₀), row-major; `None` until estimated.
    pub sigma_v: Option<Vec<Vec<f64>>>,
    pub n_survey: usize,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub iterations: usize,
}

impl PiModel {
    pub fn dim(&self) -> usize {
        self.gamma_hat.len()
    }

    pub fn gamma(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.gamma_hat)
    }

    pub fn sigma_v_matrix(&self) -> Option<DMatrix<f64>> {
        self.sigma_v.as_ref().map(|rows| {
            let d = rows.len();
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        })
    }

    pub fn set_sigma_v(&mut self, m: &DMatrix<f64>) {
        self.sigma_v = Some(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        );
    }

    /// Standard errors of γ̂ (sqrt(diag Σ̂ᵛ / n_v)).
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let s = self.sigma_v_matrix()?;
        let n = self.n_survey as f64;
        Some((0..s.nrows()).map(|j| (s[(j, j)] / n).max(0.0).sqrt()).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("reporting model: {e}")))
    }

    /// Errors unless `names` matches the model's feature order exactly.
    pub fn check_feature_names(&self, names: &[String]) -> Result<()> {
        if names.len() != self.feature_names.len() {
            return Err(Error::FeatureMismatch(format!(
                "expected {} features, found {}",
                self.feature_names.len(),
                names.len()
            )));
        }
        for (k, (a, b)) in self.feature_names.iter().zip(names).enumerate() {
            if a != b {
                return Err(Error::FeatureMismatch(format!(
                    "feature {k}: model has `{a}`, input has `{b}`"
                )));
            }
        }
        Ok(())
    }
}

/// π(z; γ̂) for one covariate vector.
pub fn predict_pi(model: &PiModel, z: &[f64]) -> Result<f64> {
    if z.len() != model.dim() {
        return Err(Error::FeatureMismatch(format!(
            "covariate vector has length {}, model expects {}",
            z.len(),
            model.dim()
        )));
    }
    let eta: f64 = model.gamma_hat.iter().zip(z).map(|(g, v)| g * v).sum();
    Ok(expit(eta))
}

pub fn predict_pi_batch(model: &PiModel, zs: &[&[f64]]) -> Result<Vec<f64>> {
    zs.iter().map(|z| predict_pi(model, z)).collect()
}

pub fn validate_survey(records: &[SurveyRecord], feature_names: &[String], bound: f64) -> Result<()> {
    if feature_names.first().map(String::as_str) != Some(INTERCEPT) {
        return Err(Error::FeatureMismatch(
            "first feature must be `intercept`".into(),
        ));
    }
    let d = feature_names.len();
    for (i, rec) in records.iter().enumerate() {
        if rec.z.len() != d {
            return Err(Error::FeatureMismatch(format!(
                "survey record {i} has {} covariates, expected {d}",
                rec.z.len()
            )));
        }
        if !(rec.weight.is_finite() && rec.weight > 0.0) {
            return Err(Error::InvalidInput(format!(
                "survey record {i} has invalid weight {}",
                rec.weight
            )));
        }
        if rec.z[0] != 1.0 {
            return Err(Error::InvalidInput(format!(
                "survey record {i} has intercept column {}",
                rec.z[0]
            )));
        }
        if let Some(v) = rec.z.iter().find(|v| !(v.is_finite() && v.abs() < bound)) {
            return Err(Error::InvalidInput(format!(
                "survey record {i} has covariate {v} outside the bound {bound}"
            )));
        }
    }
    Ok(())
}

fn survey_design(records: &[SurveyRecord]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let d = records.first().map_or(0, |r| r.z.len());
    let x = DMatrix::from_fn(records.len(), d, |i, j| records[i].z[j]);
    let y = records.iter().map(|r| if r.r { 1.0 } else { 0.0 }).collect();
    let w = records.iter().map(|r| r.weight).collect();
    (x, y, w)
}

/// Solves Σ w_i (r_i − expit(γᵀz_i)) z_i = 0 by weighted IRWLS.
pub fn fit_weighted_logit(
    records: &[SurveyRecord],
    feature_names: &[String],
    cfg: &DesignConfig,
) -> Result<PiModel> {
    validate_survey(records, feature_names, cfg.covariate_bound)?;
    let d = feature_names.len();
    if records.len() < d {
        return Err(Error::SingularDesign);
    }
    let positives = records.iter().filter(|r| r.r).count();
    if positives == 0 || positives == records.len() {
        return Err(Error::Separation("all survey outcomes identical".into()));
    }
    let (x, y, w) = survey_design(records);
    // Normalizing the weights leaves the root unchanged and keeps the
    // step-halving slack on a fixed scale.
    let mean_w = w.iter().sum::<f64>() / w.len() as f64;
    let w: Vec<f64> = w.iter().map(|v| v / mean_w).collect();
    let sol = fit_weighted_logistic(&x, &y, &w, None, &cfg.solver)?;
    Ok(PiModel {
        feature_names: feature_names.to_vec(),
        gamma_hat: sol.beta.iter().cloned().collect(),
        sigma_v: None,
        n_survey: records.len(),
        lambda: cfg.lambda,
        iterations: sol.iterations,
    })
}

/// Weighted score Σ w_i (r_i − π_i) z_i at `gamma`.
pub fn weighted_score(records: &[SurveyRecord], gamma: &DVector<f64>) -> DVector<f64> {
    let (x, y, w) = survey_design(records);
    score_and_information(&x, &y, &w, gamma).0
}

/// Jacobian of [`weighted_score`]: −Σ w_i π_i(1−π_i) z_i z_iᵀ.
pub fn weighted_score_jacobian(records: &[SurveyRecord], gamma: &DVector<f64>) -> DMatrix<f64> {
    let (x, y, w) = survey_design(records);
    -score_and_information(&x, &y, &w, gamma).1
}

/// Σ̂ᵛ, the estimated covariance of √n_v (γ̂ − γ₀).
///
/// Score contributions are totalled within PSUs and the PSU totals are
/// centered within strata with the usual m_h/(m_h − 1) factor. The bread is
/// the weighted information; both use weights normalized to mean one, so
/// the result is invariant to rescaling the weights.
pub fn design_covariance(
    model: &PiModel,
    records: &[SurveyRecord],
    lonely: LonelyPsu,
) -> Result<DMatrix<f64>> {
    let d = model.dim();
    if records.is_empty() {
        return Err(Error::InvalidInput("empty survey".into()));
    }
    if records.iter().any(|r| r.z.len() != d) {
        return Err(Error::FeatureMismatch(
            "survey covariates do not match the model".into(),
        ));
    }
    let n = records.len() as f64;
    let (x, _, w) = survey_design(records);
    let mean_w = w.iter().sum::<f64>() / n;
    let gamma = model.gamma();

    let mut bread = DMatrix::zeros(d, d);
    let mut superpop = DMatrix::zeros(d, d);
    let mut totals: BTreeMap<&str, BTreeMap<&str, DVector<f64>>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let omega = w[i] / mean_w;
        let p = expit(dot_row(&x, i, &gamma));
        add_outer_lower(&mut bread, &x, i, omega * p * (1.0 - p));
        let resid = if rec.r { 1.0 } else { 0.0 } - p;
        add_outer_lower(&mut superpop, &x, i, omega * resid * resid);
        let t = totals
            .entry(rec.stratum.as_str())
            .or_default()
            .entry(rec.psu.as_str())
            .or_insert_with(|| DVector::zeros(d));
        for j in 0..d {
            t[j] += omega * resid * rec.z[j];
        }
    }
    fill_upper(&mut bread);
    fill_upper(&mut superpop);
    bread /= n;
    superpop /= n;

    let n_psu: usize = totals.values().map(|s| s.len()).sum();
    let grand_mean = totals
        .values()
        .flat_map(|s| s.values())
        .fold(DVector::zeros(d), |acc, t| acc + t)
        / n_psu as f64;

    let mut meat = DMatrix::zeros(d, d);
    for (stratum, psus) in &totals {
        let m = psus.len();
        if m == 1 {
            match lonely {
                LonelyPsu::Fail => return Err(Error::LonelyPsu(stratum.to_string())),
                LonelyPsu::CenterAtGrandMean => {
                    let dev = psus.values().next().unwrap() - &grand_mean;
                    meat += &dev * dev.transpose();
                }
            }
            continue;
        }
        let mean = psus.values().fold(DVector::zeros(d), |acc, t| acc + t) / m as f64;
        let factor = m as f64 / (m as f64 - 1.0);
        for t in psus.values() {
            let dev = t - &mean;
            meat += (&dev * dev.transpose()) * factor;
        }
    }
    meat /= n;
    meat += superpop * model.lambda;

    let bread_inv = spd_inverse(&bread)?;
    Ok(symmetrize(&(&bread_inv * meat * &bread_inv)))
}

/// Fits γ̂ and fills Σ̂ᵛ in one call.
pub fn fit_reporting_model(
    records: &[SurveyRecord],
    feature_names: &[String],
    cfg: &DesignConfig,
) -> Result<PiModel> {
    let mut model = fit_weighted_logit(records, feature_names, cfg)?;
    let sigma = design_covariance(&model, records, cfg.lonely_psu)?;
    model.set_sigma_v(&sigma);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(d: usize) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain((1..d).map(|j| format!("z{j}")))
            .collect()
    }

    fn rec(z: &[f64], r: bool, weight: f64, stratum: &str, psu: &str) -> SurveyRecord {
        SurveyRecord {
            z: z.to_vec(),
            r,
            weight,
            stratum: stratum.into(),
            psu: psu.into(),
        }
    }

    #[test]
    fn intercept_only_symmetric_case_is_zero() {
        let recs: Vec<_> = [true, false, true, false]
            .iter()
            .enumerate()
            .map(|(i, &r)| rec(&[1.0], r, 1.0, "s", &i.to_string()))
            .collect();
        let m = fit_weighted_logit(&recs, &names(1), &DesignConfig::default()).unwrap();
        assert!(m.gamma_hat[0].abs() < 1e-14);
    }

    #[test]
    fn predict_pi_examples() {
        let m = PiModel {
            feature_names: names(1),
            gamma_hat: vec![3f64.ln()],
            sigma_v: None,
            n_survey: 1,
            lambda: 0.0,
            iterations: 0,
        };
        assert!((predict_pi(&m, &[1.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(
            predict_pi(&m, &[1.0, 2.0]),
            Err(Error::FeatureMismatch(_))
        ));
        let zero = PiModel {
            gamma_hat: vec![0.0],
            ..m.clone()
        };
        assert_eq!(predict_pi(&zero, &[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn feature_names_must_match_in_order() {
        let m = PiModel {
            feature_names: names(3),
            gamma_hat: vec![0.0; 3],
            sigma_v: None,
            n_survey: 1,
            lambda: 0.0,
            iterations: 0,
        };
        let mut swapped = names(3);
        swapped.swap(1, 2);
        assert!(m.check_feature_names(&names(3)).is_ok());
        assert!(matches!(
            m.check_feature_names(&swapped),
            Err(Error::FeatureMismatch(_))
        ));
    }

    #[test]
    fn rejects_bad_weights_and_bounds() {
        let recs = vec![rec(&[1.0, 2.0], true, -1.0, "s", "1"), rec(&[1.0, 0.0], false, 1.0, "s", "2")];
        assert!(matches!(
            fit_weighted_logit(&recs, &names(2), &DesignConfig::default()),
            Err(Error::InvalidInput(_))
        ));
        let recs = vec![rec(&[1.0, 20.0], true, 1.0, "s", "1"), rec(&[1.0, 0.0], false, 1.0, "s", "2")];
        let cfg = DesignConfig {
            covariate_bound: 10.0,
            ..DesignConfig::default()
        };
        assert!(matches!(
            fit_weighted_logit(&recs, &names(2), &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn identical_outcomes_are_separation() {
        let recs: Vec<_> = (0..4).map(|i| rec(&[1.0], true, 1.0, "s", &i.to_string())).collect();
        assert!(matches!(
            fit_weighted_logit(&recs, &names(1), &DesignConfig::default()),
            Err(Error::Separation(_))
        ));
    }

    #[test]
    fn lonely_psu_fails_or_centers() {
        let recs = vec![
            rec(&[1.0], true, 1.0, "a", "1"),
            rec(&[1.0], false, 1.0, "a", "2"),
            rec(&[1.0], true, 1.0, "a", "2"),
            rec(&[1.0], false, 2.0, "b", "3"),
        ];
        let m = fit_weighted_logit(&recs, &names(1), &DesignConfig::default()).unwrap();
        assert_eq!(
            design_covariance(&m, &recs, LonelyPsu::Fail),
            Err(Error::LonelyPsu("b".into()))
        );
        let s = design_covariance(&m, &recs, LonelyPsu::CenterAtGrandMean).unwrap();
        assert!(s[(0, 0)] > 0.0);
    }
}
