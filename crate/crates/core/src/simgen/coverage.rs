use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{generate_offenses_with, generate_survey_with, population_truth, OffensePopulation, Truth};
use super::ScenarioSpec;
use crate::design_glm::{fit_reporting_model, DesignConfig, PiModel};
use crate::error::{Error, Result};
use crate::gee_twostep::{fit_arrest_gee, group_clusters, GeeConfig};
use crate::reweight::{estimate_population_total, estimate_rates, FirstStage, OffenseRecord, RateConfig, Z_975};
use crate::seed::rng_for;
use crate::twostep_logit::{arrest_sandwich_covariance, fit_arrest_model, ArrestConfig};

/// Which estimators each replication runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSelection {
    pub reporting: bool,
    pub rates: bool,
    pub twostep: bool,
    pub gee: bool,
}

impl Default for EstimatorSelection {
    fn default() -> Self {
        EstimatorSelection {
            reporting: true,
            rates: true,
            twostep: true,
            gee: false,
        }
    }
}

/// One estimate with its standard error, or the reason it is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub estimates: BTreeMap<String, (f64, f64)>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageRow {
    pub parameter: String,
    pub truth: f64,
    pub successes: usize,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte Carlo standard error of the bias.
    pub bias_mc_se: f64,
    pub rmse: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub coverage: f64,
    /// Binomial standard error of the coverage.
    pub coverage_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub scenario: String,
    pub reps: usize,
    pub rows: Vec<CoverageRow>,
    /// Failure message (module-qualified) → count.
    pub failures: BTreeMap<String, usize>,
    pub truth: Truth,
}

impl CoverageReport {
    pub fn row(&self, parameter: &str) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "parameter",
            "truth",
            "successes",
            "mean_estimate",
            "bias",
            "bias_mc_se",
            "rmse",
            "empirical_sd",
            "mean_se",
            "coverage",
            "coverage_se",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.parameter.clone(),
                r.truth.to_string(),
                r.successes.to_string(),
                r.mean_estimate.to_string(),
                r.bias.to_string(),
                r.bias_mc_se.to_string(),
                r.rmse.to_string(),
                r.empirical_sd.to_string(),
                r.mean_se.to_string(),
                r.coverage.to_string(),
                r.coverage_se.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

fn truths(spec: &ScenarioSpec, truth: &Truth, sel: &EstimatorSelection) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if sel.reporting && !spec.all_reported_mode() {
        for (name, g) in spec.z_names().iter().zip(&truth.gamma0) {
            out.push((format!("gamma.{name}"), *g));
        }
    }
    if sel.rates {
        out.push(("N".to_string(), truth.n as f64));
        out.push(("pi_star".to_string(), truth.pi_star));
        if spec.cluster_size_probs.len() == 1 {
            out.push(("q_star".to_string(), truth.q_star));
        }
    }
    for (on, prefix) in [(sel.twostep, "theta"), (sel.gee, "theta_gee")] {
        if on {
            for (name, t) in spec.x_names().iter().zip(&truth.theta0) {
                out.push((format!("{prefix}.{name}"), *t));
            }
        }
    }
    out
}

fn with_true_pi(records: Vec<OffenseRecord>, pop: &OffensePopulation) -> Vec<OffenseRecord> {
    records
        .into_iter()
        .map(|mut r| {
            let i: usize = r.incident_id.parse().expect("generated incident ids are numeric");
            r.pi_hat = Some(pop.incidents[i].pi);
            r
        })
        .collect()
}

/// Runs the estimation chain on one simulated survey and population.
pub fn estimate_replicate(
    spec: &ScenarioSpec,
    sel: &EstimatorSelection,
    survey_records: &[crate::design_glm::SurveyRecord],
    pop: &OffensePopulation,
) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        estimates: BTreeMap::new(),
        failures: Vec::new(),
    };
    let z_names = spec.z_names();
    let x_names = spec.x_names();
    let all_reported = spec.all_reported_mode();

    let first_stage = if all_reported {
        Some(FirstStage::External)
    } else {
        match fit_reporting_model(survey_records, &z_names, &DesignConfig::default()) {
            Ok(model) => {
                if sel.reporting {
                    record_gamma(&mut out, &model, &z_names);
                }
                Some(FirstStage::Model(model))
            }
            Err(e) => {
                out.failures.push(format!("design_glm: {e}"));
                None
            }
        }
    };
    let Some(fs) = first_stage else {
        return out;
    };
    let prepare = |recs: Vec<OffenseRecord>| if all_reported { with_true_pi(recs, pop) } else { recs };

    if sel.rates {
        let incidents = prepare(pop.reported_incident_records());
        let cfg = RateConfig::default();
        match estimate_population_total(&incidents, &fs, &cfg) {
            Ok(t) => {
                out.estimates.insert("N".into(), (t.total.value, t.total.se));
            }
            Err(e) => out.failures.push(format!("reweight: {e}")),
        }
        match estimate_rates(&incidents, &fs, &cfg) {
            Ok(r) => {
                out.estimates.insert("pi_star".into(), (r.pi_star.value, r.pi_star.se));
                out.estimates.insert("q_star".into(), (r.q_star.value, r.q_star.se));
            }
            Err(e) => out.failures.push(format!("reweight: {e}")),
        }
    }

    let offenders = prepare(pop.reported_records());
    if sel.twostep {
        // Single-offender incidents only, as the independent-rows equation assumes.
        let singles: Vec<OffenseRecord> = {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &offenders {
                *counts.entry(r.incident_id.as_str()).or_default() += 1;
            }
            offenders
                .iter()
                .filter(|r| counts[r.incident_id.as_str()] == 1)
                .cloned()
                .collect()
        };
        let cfg = ArrestConfig::default();
        match fit_arrest_model(&singles, &fs, &x_names, &cfg)
            .and_then(|f| arrest_sandwich_covariance(f, &singles, &fs))
        {
            Ok(fit) => {
                let se = fit.standard_errors().unwrap_or_default();
                for (j, name) in x_names.iter().enumerate() {
                    out.estimates.insert(format!("theta.{name}"), (fit.theta_hat[j], se[j]));
                }
            }
            Err(e) => out.failures.push(format!("twostep_logit: {e}")),
        }
    }
    if sel.gee {
        match group_clusters(&offenders).and_then(|c| fit_arrest_gee(&c, &fs, &x_names, &GeeConfig::default())) {
            Ok(fit) => {
                let se = fit.standard_errors();
                for (j, name) in x_names.iter().enumerate() {
                    out.estimates.insert(format!("theta_gee.{name}"), (fit.theta_hat[j], se[j]));
                }
                out.estimates.insert("alpha_gee".into(), (fit.alpha_hat, f64::NAN));
            }
            Err(e) => out.failures.push(format!("gee_twostep: {e}")),
        }
    }
    out
}

fn record_gamma(out: &mut ReplicateOutcome, model: &PiModel, names: &[String]) {
    let se = model.standard_errors().unwrap_or_default();
    for (j, name) in names.iter().enumerate() {
        out.estimates.insert(format!("gamma.{name}"), (model.gamma_hat[j], se[j]));
    }
}

/// Regenerates data `reps` times, runs the selected estimators, and
/// summarizes bias, RMSE, and 95% Wald coverage per parameter. Replications
/// run in parallel and are merged in index order.
pub fn run_coverage(spec: &ScenarioSpec, sel: &EstimatorSelection, reps: usize) -> Result<CoverageReport> {
    if reps < 100 {
        return Err(Error::InvalidInput(format!("coverage needs at least 100 replications, got {reps}")));
    }
    let (report, _) = run_coverage_detailed(spec, sel, reps)?;
    Ok(report)
}

/// As [`run_coverage`], without the replication floor, also returning the
/// per-replication outcomes.
pub fn run_coverage_detailed(
    spec: &ScenarioSpec,
    sel: &EstimatorSelection,
    reps: usize,
) -> Result<(CoverageReport, Vec<ReplicateOutcome>)> {
    spec.validate()?;
    let truth = population_truth(spec)?;
    let outcomes: Vec<ReplicateOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut survey_rng = rng_for(spec.seed, &[rep as u64, 1]);
            let mut pop_rng = rng_for(spec.seed, &[rep as u64, 2]);
            let survey = generate_survey_with(spec, &mut survey_rng);
            let pop = generate_offenses_with(spec, &truth, &mut pop_rng);
            match (survey, pop) {
                (Ok(s), Ok(p)) => estimate_replicate(spec, sel, &s.records, &p),
                (Err(e), _) | (_, Err(e)) => ReplicateOutcome {
                    estimates: BTreeMap::new(),
                    failures: vec![format!("simgen: {e}")],
                },
            }
        })
        .collect();
    let rows = truths(spec, &truth, sel)
        .into_iter()
        .map(|(name, t)| summarize(&name, t, &outcomes))
        .collect();
    let mut failures = BTreeMap::new();
    for o in &outcomes {
        for f in &o.failures {
            *failures.entry(f.clone()).or_insert(0) += 1;
        }
    }
    Ok((
        CoverageReport {
            scenario: spec.name.clone(),
            reps,
            rows,
            failures,
            truth,
        },
        outcomes,
    ))
}

fn summarize(name: &str, truth: f64, outcomes: &[ReplicateOutcome]) -> CoverageRow {
    let hits: Vec<(f64, f64)> = outcomes
        .iter()
        .filter_map(|o| o.estimates.get(name).copied())
        .filter(|(e, s)| e.is_finite() && s.is_finite())
        .collect();
    let m = hits.len() as f64;
    if hits.is_empty() {
        return CoverageRow {
            parameter: name.into(),
            truth,
            successes: 0,
            mean_estimate: f64::NAN,
            bias: f64::NAN,
            bias_mc_se: f64::NAN,
            rmse: f64::NAN,
            empirical_sd: f64::NAN,
            mean_se: f64::NAN,
            coverage: f64::NAN,
            coverage_se: f64::NAN,
        };
    }
    let mean = hits.iter().map(|h| h.0).sum::<f64>() / m;
    let var = if hits.len() > 1 {
        hits.iter().map(|h| (h.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let rmse = (hits.iter().map(|h| (h.0 - truth).powi(2)).sum::<f64>() / m).sqrt();
    let covered = hits.iter().filter(|(e, s)| (e - truth).abs() <= Z_975 * s).count() as f64;
    let coverage = covered / m;
    CoverageRow {
        parameter: name.into(),
        truth,
        successes: hits.len(),
        mean_estimate: mean,
        bias: mean - truth,
        bias_mc_se: (var / m).sqrt(),
        rmse,
        empirical_sd: var.sqrt(),
        mean_se: hits.iter().map(|h| h.1).sum::<f64>() / m,
        coverage,
        coverage_se: (coverage * (1.0 - coverage) / m).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        let mut s = ScenarioSpec::baseline();
        s.population = 4000;
        s.survey.psus_per_stratum = 6;
        s
    }

    #[test]
    fn too_few_replications_rejected() {
        assert!(matches!(
            run_coverage(&small(), &EstimatorSelection::default(), 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn detailed_run_is_deterministic_and_ordered() {
        let s = small();
        let sel = EstimatorSelection::default();
        let (a, oa) = run_coverage_detailed(&s, &sel, 4).unwrap();
        let (b, ob) = run_coverage_detailed(&s, &sel, 4).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.rows.len(), b.rows.len());
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert!(a.row("theta.intercept").is_some());
        assert_eq!(a.row("N").unwrap().truth, 4000.0);
    }
}
