//! Inverse-propensity corrected GEE for incidents with several offenders,
//! using an exchangeable working correlation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design_glm::predict_pi;
use crate::error::{Error, Result};
use crate::linalg::{expit, max_abs, spd_inverse, spd_solve, symmetrize};
use crate::logit::SolverConfig;
use crate::reweight::{check_positivity, FirstStage, OffenseRecord, RateConfig};
use crate::twostep_logit::{coefficient, fit_arrest_model, ArrestConfig, Coefficient};

const CLAMP_EPS: f64 = 1e-6;

/// All offenders of one reported incident.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidentCluster {
    pub incident_id: String,
    /// K×d offender covariates.
    pub x: DMatrix<f64>,
    pub z: Vec<f64>,
    pub a: Vec<bool>,
    pub pi_hat: Option<f64>,
}

impl IncidentCluster {
    pub fn size(&self) -> usize {
        self.a.len()
    }
}

/// Groups offender rows by incident id (ordered by id). Rows of one incident
/// must agree on the incident covariates and propensity.
pub fn group_clusters(records: &[OffenseRecord]) -> Result<Vec<IncidentCluster>> {
    let mut groups: BTreeMap<&str, Vec<&OffenseRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.incident_id.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(id, rows)| {
            let first = rows[0];
            if let Some(bad) = rows.iter().find(|r| r.z != first.z || r.pi_hat != first.pi_hat) {
                return Err(Error::InvalidInput(format!(
                    "incident {id}: offender {} disagrees on incident covariates",
                    bad.offender_id
                )));
            }
            let d = first.x.len();
            if rows.iter().any(|r| r.x.len() != d) {
                return Err(Error::FeatureMismatch(format!(
                    "incident {id}: offender rows have different lengths"
                )));
            }
            Ok(IncidentCluster {
                incident_id: id.to_string(),
                x: DMatrix::from_fn(rows.len(), d, |i, j| rows[i].x[j]),
                z: first.z.clone(),
                a: rows.iter().map(|r| r.a).collect(),
                pi_hat: first.pi_hat,
            })
        })
        .collect()
}

fn check_alpha(k: usize, alpha: f64) -> Result<()> {
    let ok = alpha.is_finite() && (k <= 1 || (alpha < 1.0 && alpha > -1.0 / (k as f64 - 1.0)));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidCorrelation { alpha, k })
    }
}

/// C(α)⁻¹ = (1−α)⁻¹ [I − α/(1+(K−1)α) J] for the K×K exchangeable matrix.
pub fn exchangeable_inverse(k: usize, alpha: f64) -> Result<DMatrix<f64>> {
    check_alpha(k, alpha)?;
    if k == 1 {
        return Ok(DMatrix::from_element(1, 1, 1.0));
    }
    let c = alpha / (1.0 + (k as f64 - 1.0) * alpha);
    let scale = 1.0 / (1.0 - alpha);
    Ok(DMatrix::from_fn(k, k, |i, j| {
        scale * (if i == j { 1.0 } else { 0.0 } - c)
    }))
}

/// C(α)⁻¹ v without forming the matrix.
fn apply_exchangeable_inverse(v: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let k = v.len() as f64;
    let c = alpha / (1.0 + (k - 1.0) * alpha);
    let shift = c * v.sum();
    v.map(|e| (e - shift) / (1.0 - alpha))
}

pub fn cluster_propensities(clusters: &[IncidentCluster], first_stage: &FirstStage) -> Result<Vec<f64>> {
    clusters
        .iter()
        .map(|c| match first_stage {
            FirstStage::Model(m) => predict_pi(m, &c.z).map_err(|_| {
                Error::ModelMismatch(format!(
                    "incident {} has {} covariates, model expects {}",
                    c.incident_id,
                    c.z.len(),
                    m.dim()
                ))
            }),
            FirstStage::External => c.pi_hat.ok_or_else(|| {
                Error::ModelMismatch(format!("incident {} has no external propensity", c.incident_id))
            }),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    #[default]
    Estimate,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GeeConfig {
    pub solver: SolverConfig,
    pub rates: RateConfig,
    pub alpha: AlphaMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeFit {
    pub feature_names: Vec<String>,
    pub theta_hat: DVector<f64>,
    pub alpha_hat: f64,
    /// Covariance of √n (θ̂ − θ₀), n = number of reported incidents.
    pub sigma_gee: DMatrix<f64>,
    pub j_theta: DMatrix<f64>,
    pub j_gamma: Option<DMatrix<f64>>,
    pub xi: DMatrix<f64>,
    pub n_clusters: usize,
    pub kappa: f64,
    pub iterations: usize,
    pub first_stage_included: bool,
    pub warnings: Vec<String>,
}

impl GeeFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.n_clusters as f64;
        (0..self.sigma_gee.nrows())
            .map(|j| (self.sigma_gee[(j, j)] / n).max(0.0).sqrt())
            .collect()
    }

    pub fn coefficients(&self) -> Vec<Coefficient> {
        self.feature_names
            .iter()
            .zip(self.theta_hat.iter())
            .zip(self.standard_errors())
            .map(|((name, &est), se)| coefficient(name, est, se))
            .collect()
    }
}

struct ClusterTerms {
    /// q_k and sqrt(q_k (1 − q_k)).
    q: DVector<f64>,
    s: DVector<f64>,
    /// Raw residuals a − q/π.
    resid: DVector<f64>,
}

fn cluster_terms(c: &IncidentCluster, theta: &DVector<f64>, pi: f64) -> ClusterTerms {
    let eta = &c.x * theta;
    let q = eta.map(expit);
    let s = q.map(|v| (v * (1.0 - v)).sqrt());
    let resid = DVector::from_fn(c.size(), |k, _| if c.a[k] { 1.0 } else { 0.0 } - q[k] / pi);
    ClusterTerms { q, s, resid }
}

/// Pooled moment estimator of the exchangeable correlation from Pearson
/// residuals (a − q/π̂)/sqrt(q(1−q)), clamped to keep every C(α) positive
/// definite. Falls back to 0 (and returns a warning) without K ≥ 2 clusters.
pub fn estimate_exchangeable_alpha(
    clusters: &[IncidentCluster],
    theta: &DVector<f64>,
    pi: &[f64],
) -> (f64, Option<String>) {
    let mut num = 0.0;
    let mut pairs = 0.0;
    let mut k_max = 1;
    for (c, &p) in clusters.iter().zip(pi) {
        let k = c.size();
        if k < 2 {
            continue;
        }
        k_max = k_max.max(k);
        let t = cluster_terms(c, theta, p);
        let e = t.resid.component_div(&t.s);
        num += (e.sum().powi(2) - e.norm_squared()) / 2.0;
        pairs += (k * (k - 1)) as f64 / 2.0;
    }
    if pairs == 0.0 {
        return (0.0, Some("no multi-offender incidents; working correlation set to 0".into()));
    }
    let lo = -1.0 / (k_max as f64 - 1.0) + CLAMP_EPS;
    let hi = 1.0 - CLAMP_EPS;
    ((num / pairs).clamp(lo, hi), None)
}

struct Accumulated {
    score: DVector<f64>,
    j_theta: DMatrix<f64>,
    meat: DMatrix<f64>,
    j_gamma: DMatrix<f64>,
}

fn accumulate(
    clusters: &[IncidentCluster],
    pi: &[f64],
    theta: &DVector<f64>,
    alpha: f64,
    dz: usize,
    full: bool,
) -> Accumulated {
    let d = theta.len();
    let mut acc = Accumulated {
        score: DVector::zeros(d),
        j_theta: DMatrix::zeros(d, d),
        meat: DMatrix::zeros(d, d),
        j_gamma: DMatrix::zeros(d, dz),
    };
    for (c, &p) in clusters.iter().zip(pi) {
        let t = cluster_terms(c, theta, p);
        // X D W⁻¹ v = Xᵀ diag(s) C⁻¹ diag(s)⁻¹ v
        let u = apply_exchangeable_inverse(&t.resid.component_div(&t.s), alpha);
        let h = c.x.transpose() * t.s.component_mul(&u);
        acc.score += &h;
        // Xᵀ D^{1/2} C⁻¹ D^{1/2} X / π
        let b = DMatrix::from_fn(c.size(), d, |k, j| t.s[k] * c.x[(k, j)]);
        let mut cb = b.clone();
        for j in 0..d {
            let col = apply_exchangeable_inverse(&b.column(j).into_owned(), alpha);
            cb.set_column(j, &col);
        }
        acc.j_theta += (b.transpose() * cb) / p;
        if full {
            acc.meat += &h * h.transpose();
            if dz > 0 {
                let v = apply_exchangeable_inverse(&t.q.component_div(&t.s), alpha);
                let g = c.x.transpose() * t.s.component_mul(&v) * (1.0 / p - 1.0);
                acc.j_gamma += g * DVector::from_column_slice(&c.z).transpose();
            }
        }
    }
    acc.j_theta = symmetrize(&acc.j_theta);
    acc
}

/// GEE score Σ_i X_i D_i W_i⁻¹ (A_i − q_i/π̂_i) at (θ, α).
pub fn gee_score(clusters: &[IncidentCluster], pi: &[f64], theta: &DVector<f64>, alpha: f64) -> DVector<f64> {
    accumulate(clusters, pi, theta, alpha, 0, false).score
}

/// Fisher-scoring matrix Σ_i X_iᵀ D_i^{1/2} C⁻¹ D_i^{1/2} X_i / π_i, the
/// expected negative Jacobian of [`gee_score`] in θ.
pub fn gee_information(clusters: &[IncidentCluster], pi: &[f64], theta: &DVector<f64>, alpha: f64) -> DMatrix<f64> {
    accumulate(clusters, pi, theta, alpha, 0, false).j_theta
}

/// ∂/∂γ of [`gee_score`] with π_i = expit(γᵀz_i).
pub fn gee_score_gamma_jacobian(
    clusters: &[IncidentCluster],
    theta: &DVector<f64>,
    alpha: f64,
    gamma: &DVector<f64>,
) -> DMatrix<f64> {
    let pi: Vec<f64> = clusters
        .iter()
        .map(|c| expit(c.z.iter().zip(gamma.iter()).map(|(a, b)| a * b).sum()))
        .collect();
    accumulate(clusters, &pi, theta, alpha, gamma.len(), true).j_gamma
}

/// Alternates Fisher-scoring steps in θ with moment updates of α, then
/// assembles the two-step sandwich.
pub fn fit_arrest_gee(
    clusters: &[IncidentCluster],
    first_stage: &FirstStage,
    feature_names: &[String],
    cfg: &GeeConfig,
) -> Result<GeeFit> {
    if clusters.is_empty() {
        return Err(Error::InvalidInput("no reported incidents".into()));
    }
    let d = clusters[0].x.ncols();
    if feature_names.len() != d {
        return Err(Error::FeatureMismatch(format!(
            "{} feature names for {d} offender covariates",
            feature_names.len()
        )));
    }
    let pi = cluster_propensities(clusters, first_stage)?;
    check_positivity(&pi, &cfg.rates)?;
    let mut warnings = Vec::new();
    let k_max = clusters.iter().map(IncidentCluster::size).max().unwrap_or(1);
    if let AlphaMode::Fixed(a) = cfg.alpha {
        check_alpha(k_max, a)?;
    }

    // Independence fit on the offender rows as the starting point.
    let rows: Vec<OffenseRecord> = clusters
        .iter()
        .zip(&pi)
        .flat_map(|(c, &p)| {
            (0..c.size()).map(move |k| OffenseRecord {
                incident_id: c.incident_id.clone(),
                offender_id: k.to_string(),
                z: c.z.clone(),
                x: c.x.row(k).iter().cloned().collect(),
                a: c.a[k],
                pi_hat: Some(p),
            })
        })
        .collect();
    let init_cfg = ArrestConfig {
        solver: cfg.solver,
        rates: RateConfig {
            allow_positivity_violation: true,
            ..cfg.rates
        },
    };
    let mut theta = fit_arrest_model(&rows, &FirstStage::External, feature_names, &init_cfg)?.theta_hat;

    let update_alpha = |theta: &DVector<f64>, warnings: &mut Vec<String>| -> f64 {
        match cfg.alpha {
            AlphaMode::Fixed(a) => a,
            AlphaMode::Estimate => {
                let (a, w) = estimate_exchangeable_alpha(clusters, theta, &pi);
                if let Some(w) = w {
                    if !warnings.contains(&w) {
                        warnings.push(w);
                    }
                }
                a
            }
        }
    };
    let mut alpha = update_alpha(&theta, &mut warnings);
    let solver = cfg.solver;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for iter in 1..=solver.max_iter {
        iterations = iter;
        let acc = accumulate(clusters, &pi, &theta, alpha, 0, false);
        let step = spd_solve(&acc.j_theta, &acc.score)?;
        let base = max_abs(&acc.score);
        let mut scale = 1.0;
        let mut candidate = &theta + &step;
        for _ in 0..solver.max_halvings {
            let s = max_abs(&gee_score(clusters, &pi, &candidate, alpha));
            if s.is_finite() && s <= base {
                break;
            }
            scale *= 0.5;
            candidate = &theta + &step * scale;
        }
        let dtheta = max_abs(&(&step * scale)) / (1.0 + max_abs(&theta));
        theta = candidate;
        let new_alpha = update_alpha(&theta, &mut warnings);
        let dalpha = (new_alpha - alpha).abs();
        alpha = new_alpha;
        last_change = dtheta.max(dalpha);
        if dtheta < solver.tolerance && dalpha < solver.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations,
            last_change,
        });
    }

    let cov = first_stage.covariance();
    let dz = cov.as_ref().map_or(0, |(g, _, _)| g.len());
    let acc = accumulate(clusters, &pi, &theta, alpha, dz, true);
    let n = clusters.len() as f64;
    let j_theta = acc.j_theta / n;
    let mut xi = symmetrize(&(acc.meat / n));
    let mut kappa = 0.0;
    let mut j_gamma = None;
    if let Some((_, sigma_v, n_v)) = &cov {
        let jg = acc.j_gamma / n;
        kappa = n / *n_v as f64;
        xi += symmetrize(&(&jg * sigma_v * jg.transpose())) * kappa;
        j_gamma = Some(jg);
    } else {
        warnings.push(format!("{}; first-stage uncertainty omitted", Error::MissingFirstStageCovariance));
    }
    let j_inv = spd_inverse(&j_theta)?;
    let sigma_gee = symmetrize(&(&j_inv * &xi * &j_inv));
    Ok(GeeFit {
        feature_names: feature_names.to_vec(),
        theta_hat: theta,
        alpha_hat: alpha,
        sigma_gee,
        j_theta,
        j_gamma,
        xi,
        n_clusters: clusters.len(),
        kappa,
        iterations,
        first_stage_included: cov.is_some(),
        warnings,
    })
}
