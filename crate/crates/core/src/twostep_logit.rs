//! Inverse-propensity corrected logistic estimating equation for the
//! probability of arrest over all offenses, with the two-step sandwich.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::design_glm::INTERCEPT;
use crate::error::{Error, Result};
use crate::linalg::{add_outer_lower, dot_row, expit, fill_upper, spd_inverse, symmetrize};
use crate::logit::{fit_weighted_logistic, SolverConfig};
use crate::reweight::{check_positivity, FirstStage, OffenseRecord, RateConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ArrestConfig {
    pub solver: SolverConfig,
    pub rates: RateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub odds_ratio: f64,
    pub se: f64,
    pub odds_ratio_se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrestFit {
    pub feature_names: Vec<String>,
    pub theta_hat: DVector<f64>,
    /// Covariance of √n (θ̂ − θ₀); `None` until the sandwich is computed.
    pub sigma: Option<DMatrix<f64>>,
    pub j_theta: Option<DMatrix<f64>>,
    pub j_gamma: Option<DMatrix<f64>>,
    pub xi: Option<DMatrix<f64>>,
    pub n: usize,
    pub kappa: f64,
    pub iterations: usize,
    /// Records whose fitted q/π̂ exceeds one.
    pub q_over_pi_above_one: usize,
    pub first_stage_included: bool,
    pub warnings: Vec<String>,
}

impl ArrestFit {
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        let s = self.sigma.as_ref()?;
        let n = self.n as f64;
        Some((0..s.nrows()).map(|j| (s[(j, j)] / n).max(0.0).sqrt()).collect())
    }

    pub fn coefficients(&self) -> Vec<Coefficient> {
        let se = self
            .standard_errors()
            .unwrap_or_else(|| vec![f64::NAN; self.theta_hat.len()]);
        self.feature_names
            .iter()
            .zip(self.theta_hat.iter())
            .zip(se)
            .map(|((name, &est), se)| coefficient(name, est, se))
            .collect()
    }
}

pub(crate) fn coefficient(name: &str, estimate: f64, se: f64) -> Coefficient {
    let or = estimate.exp();
    Coefficient {
        name: name.to_string(),
        estimate,
        odds_ratio: or,
        se,
        odds_ratio_se: or * se,
        p_value: wald_p_value(estimate, se),
    }
}

/// Two-sided normal p-value of estimate/se.
pub fn wald_p_value(estimate: f64, se: f64) -> f64 {
    if !(se > 0.0) {
        return f64::NAN;
    }
    erfc((estimate / se).abs() / std::f64::consts::SQRT_2)
}

pub(crate) fn offender_design(records: &[OffenseRecord]) -> Result<DMatrix<f64>> {
    let d = records
        .first()
        .map(|r| r.x.len())
        .ok_or_else(|| Error::InvalidInput("no reported records".into()))?;
    if let Some(r) = records.iter().find(|r| r.x.len() != d) {
        return Err(Error::FeatureMismatch(format!(
            "record {} has {} offender covariates, expected {d}",
            r.incident_id,
            r.x.len()
        )));
    }
    Ok(DMatrix::from_fn(records.len(), d, |i, j| records[i].x[j]))
}

fn check_columns(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    if names.len() != x.ncols() {
        return Err(Error::FeatureMismatch(format!(
            "{} feature names for {} columns",
            names.len(),
            x.ncols()
        )));
    }
    if names.first().map(String::as_str) != Some(INTERCEPT) {
        return Err(Error::FeatureMismatch(
            "first offender feature must be `intercept`".into(),
        ));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign);
    }
    for j in 1..x.ncols() {
        let first = x[(0, j)];
        if (0..x.nrows()).all(|i| x[(i, j)] == first) {
            return Err(Error::InvalidInput(format!(
                "offender feature `{}` is constant",
                names[j]
            )));
        }
    }
    Ok(())
}

fn outcomes(records: &[OffenseRecord]) -> Result<Vec<f64>> {
    let arrests = records.iter().filter(|r| r.a).count();
    if arrests == 0 || arrests == records.len() {
        return Err(Error::Separation(
            "arrest indicator is constant across records".into(),
        ));
    }
    Ok(records.iter().map(|r| if r.a { 1.0 } else { 0.0 }).collect())
}

/// Σ_i (a_i − q(x_i; θ)/π_i) x_i.
pub fn arrest_score(records: &[OffenseRecord], theta: &DVector<f64>, pi: &[f64]) -> Result<DVector<f64>> {
    let x = offender_design(records)?;
    let mut g = DVector::zeros(x.ncols());
    for (i, rec) in records.iter().enumerate() {
        let q = expit(dot_row(&x, i, theta));
        let r = if rec.a { 1.0 } else { 0.0 } - q / pi[i];
        for j in 0..x.ncols() {
            g[j] += r * x[(i, j)];
        }
    }
    Ok(g)
}

/// ∂/∂θ of [`arrest_score`]: −Σ q(1−q)/π x xᵀ.
pub fn arrest_score_jacobian(records: &[OffenseRecord], theta: &DVector<f64>, pi: &[f64]) -> Result<DMatrix<f64>> {
    let x = offender_design(records)?;
    let d = x.ncols();
    let mut h = DMatrix::zeros(d, d);
    for i in 0..records.len() {
        let q = expit(dot_row(&x, i, theta));
        add_outer_lower(&mut h, &x, i, q * (1.0 - q) / pi[i]);
    }
    fill_upper(&mut h);
    Ok(-h)
}

/// ∂/∂γ of [`arrest_score`] with π_i = expit(γᵀz_i): Σ q e^{−γᵀz} x zᵀ.
pub fn arrest_score_gamma_jacobian(
    records: &[OffenseRecord],
    theta: &DVector<f64>,
    gamma: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let x = offender_design(records)?;
    let dz = gamma.len();
    let mut j = DMatrix::zeros(x.ncols(), dz);
    for (i, rec) in records.iter().enumerate() {
        let q = expit(dot_row(&x, i, theta));
        let eta_z: f64 = rec.z.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum();
        let c = q * (-eta_z).exp();
        for a in 0..x.ncols() {
            for b in 0..dz {
                j[(a, b)] += c * x[(i, a)] * rec.z[b];
            }
        }
    }
    Ok(j)
}

fn fit_with_propensities(
    records: &[OffenseRecord],
    feature_names: &[String],
    pi: &[f64],
    init: Option<&DVector<f64>>,
    cfg: &ArrestConfig,
) -> Result<ArrestFit> {
    let x = offender_design(records)?;
    check_columns(&x, feature_names)?;
    let a = outcomes(records)?;
    let y: Vec<f64> = a.iter().zip(pi).map(|(a, p)| a * p).collect();
    let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    let sol = fit_weighted_logistic(&x, &y, &w, init, &cfg.solver)?;

    let above = (0..records.len())
        .filter(|&i| expit(dot_row(&x, i, &sol.beta)) / pi[i] > 1.0)
        .count();
    let mut warnings = Vec::new();
    if above as f64 > 0.01 * records.len() as f64 {
        warnings.push(format!(
            "fitted q/pi exceeds 1 on {above} of {} records",
            records.len()
        ));
    }
    Ok(ArrestFit {
        feature_names: feature_names.to_vec(),
        theta_hat: sol.beta,
        sigma: None,
        j_theta: None,
        j_gamma: None,
        xi: None,
        n: records.len(),
        kappa: 0.0,
        iterations: sol.iterations,
        q_over_pi_above_one: above,
        first_stage_included: false,
        warnings,
    })
}

/// Plain logistic regression of a on x among reported records.
pub fn compare_unadjusted(
    records: &[OffenseRecord],
    feature_names: &[String],
    cfg: &ArrestConfig,
) -> Result<ArrestFit> {
    let pi = vec![1.0; records.len()];
    let fit = fit_with_propensities(records, feature_names, &pi, None, cfg)?;
    sandwich(fit, records, &pi, None)
}

/// Solves Σ_i (a_i − q(x_i; θ)/π̂_i) x_i = 0, started from the unadjusted fit.
pub fn fit_arrest_model(
    records: &[OffenseRecord],
    first_stage: &FirstStage,
    feature_names: &[String],
    cfg: &ArrestConfig,
) -> Result<ArrestFit> {
    let pi = first_stage.propensities(records)?;
    check_positivity(&pi, &cfg.rates)?;
    let ones = vec![1.0; records.len()];
    let init = fit_with_propensities(records, feature_names, &ones, None, cfg)
        .ok()
        .map(|f| f.theta_hat);
    fit_with_propensities(records, feature_names, &pi, init.as_ref(), cfg)
}

/// Fills Σ = J_θ⁻¹ Ξ J_θ⁻¹ with Ξ = E[h hᵀ | R=1] + κ J_γ Σ̂ᵛ J_γᵀ.
///
/// With external propensities the first-stage term is left out and the fit
/// is flagged.
pub fn arrest_sandwich_covariance(
    fit: ArrestFit,
    records: &[OffenseRecord],
    first_stage: &FirstStage,
) -> Result<ArrestFit> {
    let pi = first_stage.propensities(records)?;
    let cov = first_stage.covariance();
    let mut fit = sandwich(fit, records, &pi, cov.as_ref())?;
    if cov.is_none() {
        fit.warnings
            .push(format!("{}; first-stage uncertainty omitted", Error::MissingFirstStageCovariance));
    }
    Ok(fit)
}

fn sandwich(
    mut fit: ArrestFit,
    records: &[OffenseRecord],
    pi: &[f64],
    first_stage: Option<&(DVector<f64>, DMatrix<f64>, usize)>,
) -> Result<ArrestFit> {
    if records.len() != fit.n {
        return Err(Error::InvalidInput("records differ from the fitted sample".into()));
    }
    let x = offender_design(records)?;
    let d = x.ncols();
    let n = records.len() as f64;
    let theta = &fit.theta_hat;
    let mut j_theta = DMatrix::zeros(d, d);
    let mut meat = DMatrix::zeros(d, d);
    let dz = first_stage.map_or(0, |(g, _, _)| g.len());
    let mut j_gamma = DMatrix::zeros(d, dz);
    for (i, rec) in records.iter().enumerate() {
        let q = expit(dot_row(&x, i, theta));
        add_outer_lower(&mut j_theta, &x, i, q * (1.0 - q) / pi[i]);
        let r = if rec.a { 1.0 } else { 0.0 } - q / pi[i];
        add_outer_lower(&mut meat, &x, i, r * r);
        if dz > 0 {
            let c = q * (1.0 / pi[i] - 1.0);
            for a in 0..d {
                for b in 0..dz {
                    j_gamma[(a, b)] += c * x[(i, a)] * rec.z[b];
                }
            }
        }
    }
    fill_upper(&mut j_theta);
    fill_upper(&mut meat);
    j_theta /= n;
    meat /= n;
    let mut xi = meat;
    if let Some((_, sigma_v, n_v)) = first_stage {
        j_gamma /= n;
        let kappa = n / *n_v as f64;
        xi += symmetrize(&(&j_gamma * sigma_v * j_gamma.transpose())) * kappa;
        fit.kappa = kappa;
        fit.j_gamma = Some(j_gamma);
        fit.first_stage_included = true;
    }
    let j_inv = spd_inverse(&j_theta)?;
    fit.sigma = Some(symmetrize(&(&j_inv * &xi * &j_inv)));
    fit.j_theta = Some(j_theta);
    fit.xi = Some(xi);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(xs: &[f64], a: &[bool], pi: &[f64]) -> Vec<OffenseRecord> {
        xs.iter()
            .zip(a)
            .zip(pi)
            .enumerate()
            .map(|(i, ((&x, &a), &p))| OffenseRecord {
                incident_id: i.to_string(),
                offender_id: "1".into(),
                z: vec![1.0],
                x: vec![1.0, x],
                a,
                pi_hat: Some(p),
            })
            .collect()
    }

    fn names() -> Vec<String> {
        vec![INTERCEPT.into(), "x1".into()]
    }

    #[test]
    fn all_arrested_is_separation() {
        let r = recs(&[0.0, 1.0, 2.0], &[true; 3], &[1.0; 3]);
        let err = fit_arrest_model(&r, &FirstStage::External, &names(), &ArrestConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Separation(_)));
    }

    #[test]
    fn constant_column_rejected() {
        let r = recs(&[1.0, 1.0, 1.0], &[true, false, true], &[1.0; 3]);
        let err = fit_arrest_model(&r, &FirstStage::External, &names(), &ArrestConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn root_and_odds_ratios() {
        let xs = [-1.0, -0.5, 0.0, 0.3, 0.8, 1.2, 1.5, -0.2];
        let a = [false, true, false, true, true, false, true, false];
        let pi = [0.9, 0.8, 0.7, 0.95, 0.85, 0.9, 0.99, 0.75];
        let r = recs(&xs, &a, &pi);
        let fs = FirstStage::External;
        let fit = fit_arrest_model(&r, &fs, &names(), &ArrestConfig::default()).unwrap();
        let g = arrest_score(&r, &fit.theta_hat, &pi).unwrap();
        assert!(g.amax() < 1e-8 * r.len() as f64);
        let fit = arrest_sandwich_covariance(fit, &r, &fs).unwrap();
        assert!(!fit.first_stage_included);
        assert!(fit.warnings.iter().any(|w| w.contains("first-stage")));
        for c in fit.coefficients() {
            assert_eq!(c.odds_ratio, c.estimate.exp());
            assert!((c.odds_ratio_se - c.odds_ratio * c.se).abs() < 1e-15);
            assert!(c.p_value > 0.0 && c.p_value <= 1.0);
        }
    }

    #[test]
    fn wald_p_value_reference_points() {
        assert!((wald_p_value(1.959964, 1.0) - 0.05).abs() < 1e-6);
        assert!((wald_p_value(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(wald_p_value(1.0, 0.0).is_nan());
    }
}
