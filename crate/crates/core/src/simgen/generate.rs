use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::quadrature::composite;
use super::{CovariateDist, Level, ScenarioSpec};
use crate::design_glm::SurveyRecord;
use crate::error::Result;
use crate::linalg::expit;
use crate::reweight::OffenseRecord;
use crate::seed::rng_for;

/// Survey sample with the true propensity of every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignedSurvey {
    pub feature_names: Vec<String>,
    pub records: Vec<SurveyRecord>,
    pub true_pi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimIncident {
    /// Incident covariates, intercept first.
    pub z: Vec<f64>,
    /// One covariate row per offender, intercept first.
    pub x: Vec<Vec<f64>>,
    pub pi: f64,
    pub q: Vec<f64>,
    pub r: bool,
    /// Arrests; all false when the incident went unreported.
    pub a: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    /// Incidents in the population.
    pub n: usize,
    /// E[π(Z; γ₀)].
    pub pi_star: f64,
    /// E[q(X; θ₀)] per offender.
    pub q_star: f64,
    pub gamma0: Vec<f64>,
    pub theta0: Vec<f64>,
    /// Limit of the pooled working-correlation estimator; `None` without
    /// multi-offender incidents.
    pub alpha0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffensePopulation {
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
    pub incidents: Vec<SimIncident>,
    pub n_offenders: usize,
    pub truth: Truth,
}

pub(crate) fn incident_id(i: usize) -> String {
    format!("{i:07}")
}

impl OffensePopulation {
    /// Offender rows of reported incidents, without propensities.
    pub fn reported_records(&self) -> Vec<OffenseRecord> {
        let mut out = Vec::new();
        for (i, inc) in self.incidents.iter().enumerate().filter(|(_, inc)| inc.r) {
            for (k, x) in inc.x.iter().enumerate() {
                out.push(OffenseRecord {
                    incident_id: incident_id(i),
                    offender_id: (k + 1).to_string(),
                    z: inc.z.clone(),
                    x: x.clone(),
                    a: inc.a[k],
                    pi_hat: None,
                });
            }
        }
        out
    }

    /// One row per reported incident (first offender's covariates), arrested
    /// when any offender was.
    pub fn reported_incident_records(&self) -> Vec<OffenseRecord> {
        self.incidents
            .iter()
            .enumerate()
            .filter(|(_, inc)| inc.r)
            .map(|(i, inc)| OffenseRecord {
                incident_id: incident_id(i),
                offender_id: "1".into(),
                z: inc.z.clone(),
                x: inc.x[0].clone(),
                a: inc.a.iter().any(|&a| a),
                pi_hat: None,
            })
            .collect()
    }

    pub fn reported_count(&self) -> usize {
        self.incidents.iter().filter(|i| i.r).count()
    }
}

fn draw<R: Rng>(dist: &CovariateDist, shift: f64, rng: &mut R) -> f64 {
    match dist {
        CovariateDist::Bernoulli { p } => {
            let p = if shift == 0.0 || *p <= 0.0 || *p >= 1.0 {
                *p
            } else {
                expit((p / (1.0 - p)).ln() + shift)
            };
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }
        CovariateDist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        CovariateDist::Discrete { values, probs } => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (v, p) in values.iter().zip(probs) {
                acc += p;
                if u < acc {
                    return *v;
                }
            }
            *values.last().unwrap()
        }
    }
}

/// Stratified two-stage sample: every PSU gets its own shift of the
/// Bernoulli incident covariates on the logit scale, units within a PSU are
/// drawn independently, and R ~ Bernoulli(π(z; γ₀)).
pub fn generate_survey(spec: &ScenarioSpec) -> Result<DesignedSurvey> {
    generate_survey_with(spec, &mut rng_for(spec.seed, &[1]))
}

pub fn generate_survey_with(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<DesignedSurvey> {
    spec.validate()?;
    let sources = spec.z_sources()?;
    let s = &spec.survey;
    let mut records = Vec::with_capacity(s.sample_size());
    let mut true_pi = Vec::with_capacity(s.sample_size());
    let mut raw = vec![0.0; spec.covariates.len()];
    for h in 0..s.strata {
        let weight = 1.0 / s.inclusion_prob(h);
        for m in 0..s.psus_per_stratum {
            let shift = s.psu_heterogeneity * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..s.units_per_psu {
                for (v, c) in raw.iter_mut().zip(&spec.covariates) {
                    let sh = if c.level == Level::Incident { shift } else { 0.0 };
                    *v = draw(&c.dist, sh, rng);
                }
                let z = spec.coarsen(&raw, &sources);
                let pi = spec.pi_of(&z);
                let r = rng.random::<f64>() < pi;
                records.push(SurveyRecord {
                    z,
                    r,
                    weight,
                    stratum: format!("s{:02}", h + 1),
                    psu: format!("s{:02}p{:03}", h + 1, m + 1),
                });
                true_pi.push(pi);
            }
        }
    }
    Ok(DesignedSurvey {
        feature_names: spec.z_names(),
        records,
        true_pi,
    })
}

fn draw_cluster_size<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k + 1;
        }
    }
    probs.len()
}

/// Conditional arrest probabilities given the common factor value.
struct Latent {
    rho: f64,
    normal: Normal,
}

impl Latent {
    fn new(rho: f64) -> Self {
        Latent {
            rho,
            normal: Normal::standard(),
        }
    }

    fn threshold(&self, p: f64) -> f64 {
        if p <= 0.0 {
            f64::NEG_INFINITY
        } else if p >= 1.0 {
            f64::INFINITY
        } else {
            self.normal.inverse_cdf(p)
        }
    }

    /// P(arrest | factor u) for marginal probability with threshold `t`.
    fn given(&self, t: f64, u: f64) -> f64 {
        self.normal.cdf((t - self.rho.sqrt() * u) / (1.0 - self.rho).sqrt())
    }
}

/// Draws the offense population: incident covariates once per incident,
/// offender covariates per offender, R ~ Bernoulli(π(Z)), and for reported
/// incidents arrests with marginals q/π tied by a common Gaussian factor.
pub fn generate_offenses(spec: &ScenarioSpec) -> Result<OffensePopulation> {
    let truth = population_truth(spec)?;
    generate_offenses_with(spec, &truth, &mut rng_for(spec.seed, &[2]))
}

/// Population targets implied by the scenario.
pub fn population_truth(spec: &ScenarioSpec) -> Result<Truth> {
    spec.validate()?;
    let multi = spec.cluster_size_probs.iter().skip(1).any(|&p| p > 0.0);
    Ok(Truth {
        n: spec.population,
        pi_star: spec.pi_star()?,
        q_star: spec.q_star()?,
        gamma0: spec.gamma0.clone(),
        theta0: spec.theta0.clone(),
        alpha0: if multi { Some(implied_alpha(spec, 20_000)?) } else { None },
    })
}

/// Draws a population with a precomputed `truth`.
pub fn generate_offenses_with(spec: &ScenarioSpec, truth: &Truth, rng: &mut ChaCha8Rng) -> Result<OffensePopulation> {
    spec.validate()?;
    let sources = spec.z_sources()?;
    let inter = spec.interaction_pairs()?;
    let latent = Latent::new(spec.latent_correlation);
    let mut incidents = Vec::with_capacity(spec.population);
    let mut raw = vec![0.0; spec.covariates.len()];
    let mut n_offenders = 0;
    for _ in 0..spec.population {
        let k = draw_cluster_size(&spec.cluster_size_probs, rng);
        n_offenders += k;
        for (v, c) in raw.iter_mut().zip(&spec.covariates) {
            if c.level == Level::Incident {
                *v = draw(&c.dist, 0.0, rng);
            }
        }
        let z = spec.coarsen(&raw, &sources);
        let pi = spec.pi_of(&z);
        let mut x = Vec::with_capacity(k);
        let mut q = Vec::with_capacity(k);
        for _ in 0..k {
            for (v, c) in raw.iter_mut().zip(&spec.covariates) {
                if c.level == Level::Offender {
                    *v = draw(&c.dist, 0.0, rng);
                }
            }
            x.push(std::iter::once(1.0).chain(raw.iter().cloned()).collect::<Vec<_>>());
            q.push(spec.q_of(&raw, &inter));
        }
        let r = pi >= 1.0 || rng.random::<f64>() < pi;
        let a = if !r {
            vec![false; k]
        } else if latent.rho == 0.0 {
            q.iter().map(|qj| rng.random::<f64>() < qj / pi).collect()
        } else {
            let u: f64 = rng.sample(StandardNormal);
            q.iter()
                .map(|qj| {
                    let e: f64 = rng.sample(StandardNormal);
                    latent.rho.sqrt() * u + (1.0 - latent.rho).sqrt() * e <= latent.threshold(qj / pi)
                })
                .collect()
        };
        incidents.push(SimIncident { z, x, pi, q, r, a });
    }
    Ok(OffensePopulation {
        z_names: spec.z_names(),
        x_names: spec.x_names(),
        incidents,
        n_offenders,
        truth: truth.clone(),
    })
}

/// Σ_{j<k} E[e_j e_k] and the pair count for one reported incident, with
/// e = (A − q/π)/sqrt(q(1 − q)). Sums over all 2^K arrest patterns, each
/// weighted by its probability integrated over the common factor.
pub fn pair_moment(q: &[f64], pi: f64, rho: f64) -> f64 {
    let k = q.len();
    if k < 2 {
        return 0.0;
    }
    let latent = Latent::new(rho);
    let t: Vec<f64> = q.iter().map(|qj| latent.threshold(qj / pi)).collect();
    let s: Vec<f64> = q.iter().map(|qj| (qj * (1.0 - qj)).sqrt()).collect();
    let nodes = if rho == 0.0 {
        vec![(0.0, 1.0)]
    } else {
        composite(-8.0, 8.0, 20, 16)
            .into_iter()
            .map(|(u, w)| (u, w * (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()))
            .collect()
    };
    let mut total = 0.0;
    for pattern in 0u32..(1 << k) {
        let e: Vec<f64> = (0..k)
            .map(|j| {
                let a = if pattern >> j & 1 == 1 { 1.0 } else { 0.0 };
                (a - q[j] / pi) / s[j]
            })
            .collect();
        let mut cross = 0.0;
        for j in 0..k {
            for l in j + 1..k {
                cross += e[j] * e[l];
            }
        }
        if cross == 0.0 {
            continue;
        }
        let prob: f64 = nodes
            .iter()
            .map(|&(u, w)| {
                let mut p = w;
                for j in 0..k {
                    let pj = if rho == 0.0 { q[j] / pi } else { latent.given(t[j], u) };
                    p *= if pattern >> j & 1 == 1 { pj } else { 1.0 - pj };
                }
                p
            })
            .sum();
        total += prob * cross;
    }
    total
}

/// Population limit of the pooled exchangeable-correlation estimator:
/// E[π Σ_{j<k} e_j e_k] / E[π K(K−1)/2], with the inner moment computed by
/// exact pattern enumeration and the outer expectation over `draws`
/// covariate configurations from a fixed stream.
pub fn implied_alpha(spec: &ScenarioSpec, draws: usize) -> Result<f64> {
    spec.validate()?;
    let sources = spec.z_sources()?;
    let inter = spec.interaction_pairs()?;
    let mut rng = rng_for(spec.seed, &[3]);
    let mut raw = vec![0.0; spec.covariates.len()];
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..draws {
        let k = draw_cluster_size(&spec.cluster_size_probs, &mut rng);
        for (v, c) in raw.iter_mut().zip(&spec.covariates) {
            if c.level == Level::Incident {
                *v = draw(&c.dist, 0.0, &mut rng);
            }
        }
        let pi = spec.pi_of(&spec.coarsen(&raw, &sources));
        let mut q = Vec::with_capacity(k);
        for _ in 0..k {
            for (v, c) in raw.iter_mut().zip(&spec.covariates) {
                if c.level == Level::Offender {
                    *v = draw(&c.dist, 0.0, &mut rng);
                }
            }
            q.push(spec.q_of(&raw, &inter));
        }
        if k < 2 {
            continue;
        }
        num += pi * pair_moment(&q, pi, spec.latent_correlation);
        den += pi * (k * (k - 1)) as f64 / 2.0;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}
