//! End-to-end estimation over CSV inputs: reporting model, population total
//! and rates, arrest models, and diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::config::{GeeMode, PipelineConfig};
use crate::design_glm::{fit_reporting_model, predict_pi, DesignConfig, PiModel, SurveyRecord};
use crate::diagnostics::{
    cross_validated_pi, focal_slope, positivity_report, weighted_auc, weighted_calibration, FocalConfig,
    FocalSlopeReport, PositivityReport,
};
use crate::error::{Context, Error, Result};
use crate::gee_twostep::{fit_arrest_gee, group_clusters, GeeConfig, GeeFit};
use crate::io::{offenses_from_table, propensities_from_table, survey_from_table, write_file, Table};
use crate::report::{
    calibration_csv, coefficients_csv, coefficients_text, focal_csv, grouped_rates_csv, positivity_csv, rates_csv,
    sig6,
};
use crate::reweight::{
    estimate_population_total, estimate_rates, grouped_rates, FirstStage, GroupRates, OffenseRecord,
    PopulationTotal, RateConfig, RateEstimate, Rates,
};
use crate::twostep_logit::{
    arrest_sandwich_covariance, coefficient, compare_unadjusted, fit_arrest_model, ArrestConfig, ArrestFit,
    Coefficient,
};

/// Parsed and encoded inputs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
    pub survey: Option<Vec<SurveyRecord>>,
    pub offenses: Vec<OffenseRecord>,
    /// Group label per offense row.
    pub groups: Option<Vec<String>>,
}

/// Output file name → contents.
pub type Bundle = BTreeMap<String, String>;

impl Inputs {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let survey = cfg.survey.as_deref().map(Table::read).transpose().within("cli")?;
        let offenses = Table::read(&cfg.offenses).within("cli")?;
        let props = cfg.propensities.as_deref().map(Table::read).transpose().within("cli")?;
        Self::from_tables(cfg, survey.as_ref(), &offenses, props.as_ref())
    }

    pub fn from_tables(
        cfg: &PipelineConfig,
        survey: Option<&Table>,
        offenses: &Table,
        propensities: Option<&Table>,
    ) -> Result<Self> {
        let z = cfg.z_encoder().within("cli")?;
        let x = cfg.x_encoder().within("cli")?;
        let survey = survey
            .map(|t| survey_from_table(t, &z, "survey"))
            .transpose()
            .within("design_glm")?;
        let (mut records, groups) =
            offenses_from_table(offenses, &z, &x, &cfg.group_by, "offenses").within("reweight")?;
        if let Some(t) = propensities {
            let map = propensities_from_table(t, "propensities").within("reweight")?;
            for r in &mut records {
                let p = map.get(&r.incident_id).ok_or_else(|| {
                    Error::Schema(format!("propensities: no entry for incident `{}`", r.incident_id))
                });
                r.pi_hat = Some(p.within("reweight")?.to_owned());
            }
        }
        Ok(Inputs {
            z_names: z.names().to_vec(),
            x_names: x.names().to_vec(),
            survey,
            offenses: records,
            groups,
        })
    }

    /// One row per incident (ordered by id): covariates of the first
    /// offender row, arrested when any offender was.
    pub fn incident_records(&self) -> (Vec<OffenseRecord>, Option<Vec<String>>) {
        let mut seen: BTreeMap<&str, (usize, bool)> = BTreeMap::new();
        for (i, r) in self.offenses.iter().enumerate() {
            let e = seen.entry(r.incident_id.as_str()).or_insert((i, false));
            e.1 |= r.a;
        }
        let records = seen
            .values()
            .map(|&(i, a)| OffenseRecord {
                a,
                ..self.offenses[i].clone()
            })
            .collect();
        let keys = self
            .groups
            .as_ref()
            .map(|g| seen.values().map(|&(i, _)| g[i].clone()).collect());
        (records, keys)
    }

    /// Offender rows of incidents with exactly one offender.
    pub fn single_offender_records(&self) -> Vec<OffenseRecord> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.offenses {
            *counts.entry(r.incident_id.as_str()).or_default() += 1;
        }
        self.offenses
            .iter()
            .filter(|r| counts[r.incident_id.as_str()] == 1)
            .cloned()
            .collect()
    }

    pub fn has_clusters(&self) -> bool {
        let (incidents, _) = self.incident_records();
        incidents.len() < self.offenses.len()
    }
}

pub fn design_config(cfg: &PipelineConfig) -> DesignConfig {
    DesignConfig {
        solver: cfg.solver,
        lonely_psu: cfg.lonely_psu,
        lambda: cfg.lambda,
        covariate_bound: cfg.covariate_bound,
    }
}

pub fn rate_config(cfg: &PipelineConfig) -> RateConfig {
    RateConfig {
        positivity_floor: cfg.positivity_floor,
        allow_positivity_violation: cfg.allow_positivity_violation,
    }
}

pub fn arrest_config(cfg: &PipelineConfig) -> ArrestConfig {
    ArrestConfig {
        solver: cfg.solver,
        rates: rate_config(cfg),
    }
}

/// Fits the reporting model on the survey.
pub fn fit_reporting(cfg: &PipelineConfig, inputs: &Inputs) -> Result<PiModel> {
    let survey = inputs.survey.as_ref().ok_or_else(|| Error::Module {
        module: "design_glm",
        source: Box::new(Error::EncodingMismatch("no survey file configured".into())),
    })?;
    fit_reporting_model(survey, &inputs.z_names, &design_config(cfg)).within("design_glm")
}

/// A supplied model, else a model fitted on the survey, else the offense
/// file's `pi_hat` column.
pub fn first_stage(cfg: &PipelineConfig, inputs: &Inputs, model: Option<PiModel>) -> Result<FirstStage> {
    if let Some(m) = model {
        m.check_feature_names(&inputs.z_names).within("design_glm")?;
        return Ok(FirstStage::Model(m));
    }
    if inputs.survey.is_some() {
        return Ok(FirstStage::Model(fit_reporting(cfg, inputs)?));
    }
    if inputs.offenses.iter().all(|r| r.pi_hat.is_some()) {
        return Ok(FirstStage::External);
    }
    Err(Error::Module {
        module: "reweight",
        source: Box::new(Error::EncodingMismatch(
            "no first stage: configure a survey file, or supply `pi_hat` in the offense file or a propensities file"
                .into(),
        )),
    })
}

#[derive(Debug, Clone)]
pub struct RateResults {
    pub total: PopulationTotal,
    pub rates: Rates,
    pub groups: Option<BTreeMap<String, GroupRates>>,
}

pub fn rates_stage(cfg: &PipelineConfig, inputs: &Inputs, fs: &FirstStage) -> Result<RateResults> {
    let (incidents, keys) = inputs.incident_records();
    let rc = rate_config(cfg);
    let total = estimate_population_total(&incidents, fs, &rc).within("reweight")?;
    let rates = estimate_rates(&incidents, fs, &rc).within("reweight")?;
    let groups = keys
        .map(|k| grouped_rates(&incidents, &k, fs, &rc))
        .transpose()
        .within("reweight")?;
    Ok(RateResults { total, rates, groups })
}

#[derive(Debug, Clone)]
pub struct ArrestResults {
    pub adjusted: ArrestFit,
    pub unadjusted: ArrestFit,
}

pub fn twostep_stage(cfg: &PipelineConfig, inputs: &Inputs, fs: &FirstStage) -> Result<ArrestResults> {
    let rows = inputs.single_offender_records();
    let ac = arrest_config(cfg);
    let fit = fit_arrest_model(&rows, fs, &inputs.x_names, &ac).within("twostep_logit")?;
    let adjusted = arrest_sandwich_covariance(fit, &rows, fs).within("twostep_logit")?;
    let unadjusted = compare_unadjusted(&rows, &inputs.x_names, &ac).within("twostep_logit")?;
    Ok(ArrestResults { adjusted, unadjusted })
}

pub fn gee_stage(cfg: &PipelineConfig, inputs: &Inputs, fs: &FirstStage) -> Result<GeeFit> {
    let clusters = group_clusters(&inputs.offenses).within("gee_twostep")?;
    let gc = GeeConfig {
        solver: cfg.solver,
        rates: rate_config(cfg),
        alpha: cfg.alpha,
    };
    fit_arrest_gee(&clusters, fs, &inputs.x_names, &gc).within("gee_twostep")
}

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub positivity: PositivityReport,
    /// In-sample and cross-validated weighted AUC of π̂ on the survey.
    pub auc: Option<(f64, f64)>,
    pub calibration: Option<String>,
    pub focal: Vec<FocalSlopeReport>,
}

pub fn diagnostics_stage(cfg: &PipelineConfig, inputs: &Inputs, fs: &FirstStage) -> Result<Diagnostics> {
    let positivity = positivity_report(&inputs.offenses, fs, inputs.groups.as_deref(), cfg.positivity_floor)
        .within("diagnostics")?;
    let mut auc = None;
    let mut calibration = None;
    if let (Some(survey), FirstStage::Model(model)) = (&inputs.survey, fs) {
        let outcomes: Vec<bool> = survey.iter().map(|r| r.r).collect();
        let weights: Vec<f64> = survey.iter().map(|r| r.weight).collect();
        let fitted = survey
            .iter()
            .map(|r| predict_pi(model, &r.z))
            .collect::<Result<Vec<_>>>()
            .within("diagnostics")?;
        let cv = cross_validated_pi(survey, &inputs.z_names, &design_config(cfg), cfg.cv_folds, cfg.seed)
            .within("diagnostics")?;
        auc = Some((
            weighted_auc(&fitted, &outcomes, &weights).within("diagnostics")?,
            weighted_auc(&cv, &outcomes, &weights).within("diagnostics")?,
        ));
        calibration = Some(calibration_csv(&weighted_calibration(&cv, &outcomes, &weights, cfg.calibration_bins))?);
    }
    let focal_cfg = FocalConfig {
        replicates: cfg.focal_replicates,
        resample_size: cfg.focal_resample_size,
        seed: cfg.seed,
        arrest: arrest_config(cfg),
    };
    let rows = inputs.single_offender_records();
    let focal = cfg
        .focal
        .iter()
        .map(|f| focal_slope(&rows, fs, &inputs.x_names, f, &focal_cfg))
        .collect::<Result<Vec<_>>>()
        .within("diagnostics")?;
    Ok(Diagnostics {
        positivity,
        auc,
        calibration,
        focal,
    })
}

fn rate_line(s: &mut String, label: &str, e: &RateEstimate) {
    let _ = writeln!(
        s,
        "  {label:<22} {:>12}  se {:>12}  95% CI [{}, {}]",
        sig6(e.value),
        sig6(e.se),
        sig6(e.ci_low),
        sig6(e.ci_high)
    );
}

pub fn reporting_coefficients(model: &PiModel) -> Vec<Coefficient> {
    let se = model
        .standard_errors()
        .unwrap_or_else(|| vec![f64::NAN; model.dim()]);
    model
        .feature_names
        .iter()
        .zip(&model.gamma_hat)
        .zip(se)
        .map(|((n, &g), s)| coefficient(n, g, s))
        .collect()
}

fn collect_warnings(w: &mut Vec<String>, module: &str, items: &[String]) {
    for i in items {
        let line = format!("{module}: {i}");
        if !w.contains(&line) {
            w.push(line);
        }
    }
}

/// Runs every stage and renders the report bundle in memory.
pub fn run_pipeline_inputs(cfg: &PipelineConfig, inputs: &Inputs) -> Result<Bundle> {
    let mut bundle = Bundle::new();
    let mut warnings = Vec::new();
    let mut summary = String::new();

    let fs = first_stage(cfg, inputs, None)?;
    match &fs {
        FirstStage::Model(model) => {
            let coefs = reporting_coefficients(model);
            bundle.insert("reporting_model.csv".into(), coefficients_csv(&coefs)?);
            bundle.insert("reporting_model.json".into(), model.to_json()?);
            summary += &coefficients_text(
                &format!(
                    "Reporting model (survey records {}, iterations {})",
                    model.n_survey, model.iterations
                ),
                &coefs,
            );
        }
        FirstStage::External => {
            warnings.push("reweight: using external propensities; first-stage uncertainty omitted".to_string());
            summary += "Reporting model: external propensities\n";
        }
    }

    let diag = diagnostics_stage(cfg, inputs, &fs)?;
    bundle.insert("positivity.csv".into(), positivity_csv(&diag.positivity)?);
    let _ = writeln!(
        summary,
        "\nPositivity (floor {}): min {}, below floor {}{}",
        sig6(diag.positivity.floor),
        sig6(diag.positivity.overall.min),
        diag.positivity.overall.below_floor,
        if diag.positivity.pass { "" } else { "  FAIL" }
    );
    if !diag.positivity.failing_groups.is_empty() {
        warnings.push(format!(
            "diagnostics: groups below the positivity floor: {}",
            diag.positivity.failing_groups.join(", ")
        ));
    }
    if let Some((fitted, cv)) = diag.auc {
        let _ = writeln!(summary, "Weighted AUC of reporting model: in-sample {}, cross-validated {}", sig6(fitted), sig6(cv));
    }
    if let Some(c) = diag.calibration {
        bundle.insert("calibration.csv".into(), c);
    }
    if !diag.focal.is_empty() {
        bundle.insert("focal_slope.csv".into(), focal_csv(&diag.focal)?);
        for r in &diag.focal {
            collect_warnings(&mut warnings, "diagnostics", &r.notices);
            let _ = writeln!(summary, "Focal slope `{}`:", r.focal);
            for c in &r.cells {
                let _ = writeln!(
                    summary,
                    "  {} = {}: n {}, mean {}, sd {}, failed {}",
                    c.feature,
                    sig6(c.center),
                    c.count,
                    sig6(c.mean),
                    sig6(c.sd),
                    c.failures.len()
                );
            }
        }
    }

    let rates = rates_stage(cfg, inputs, &fs)?;
    bundle.insert("rates.csv".into(), rates_csv(&rates.total, &rates.rates)?);
    let _ = writeln!(summary, "\nOffenses (reported incidents {})", rates.total.n);
    rate_line(&mut summary, "total offenses", &rates.total.total);
    rate_line(&mut summary, "offenses per report", &rates.total.inflation);
    rate_line(&mut summary, "reporting rate", &rates.rates.pi_star);
    rate_line(&mut summary, "arrest rate", &rates.rates.q_star);
    let _ = writeln!(summary, "  {:<22} {:>12}", "arrests per report", sig6(rates.rates.alpha_star));
    if let Some(g) = &rates.groups {
        bundle.insert("rates_by_group.csv".into(), grouped_rates_csv(g)?);
    }

    let arrest = twostep_stage(cfg, inputs, &fs)?;
    collect_warnings(&mut warnings, "twostep_logit", &arrest.adjusted.warnings);
    if arrest.adjusted.q_over_pi_above_one > 0 {
        warnings.push(format!(
            "twostep_logit: {} record(s) with fitted q/pi above one",
            arrest.adjusted.q_over_pi_above_one
        ));
    }
    let adj = arrest.adjusted.coefficients();
    let unadj = arrest.unadjusted.coefficients();
    bundle.insert("arrest_adjusted.csv".into(), coefficients_csv(&adj)?);
    bundle.insert("arrest_unadjusted.csv".into(), coefficients_csv(&unadj)?);
    summary += "\n";
    summary += &coefficients_text(
        &format!("Arrest model, reweighted (single-offender records {})", arrest.adjusted.n),
        &adj,
    );
    summary += "\n";
    summary += &coefficients_text("Arrest model, reported offenses only", &unadj);

    let run_gee = match cfg.gee {
        GeeMode::Always => true,
        GeeMode::Never => false,
        GeeMode::Auto => inputs.has_clusters(),
    };
    if run_gee {
        let gee = gee_stage(cfg, inputs, &fs)?;
        collect_warnings(&mut warnings, "gee_twostep", &gee.warnings);
        let coefs = gee.coefficients();
        bundle.insert("arrest_gee.csv".into(), coefficients_csv(&coefs)?);
        summary += "\n";
        summary += &coefficients_text(
            &format!(
                "Arrest model, clustered (incidents {}, working correlation {})",
                gee.n_clusters,
                sig6(gee.alpha_hat)
            ),
            &coefs,
        );
    }

    let _ = writeln!(summary, "\nWarnings: {}", warnings.len());
    bundle.insert("summary.txt".into(), summary);
    let mut w = warnings.join("\n");
    if !w.is_empty() {
        w.push('\n');
    }
    bundle.insert("warnings.txt".into(), w);
    Ok(bundle)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Bundle> {
    let inputs = Inputs::load(cfg)?;
    run_pipeline_inputs(cfg, &inputs)
}

pub fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<()> {
    for (name, contents) in bundle {
        write_file(&dir.join(name), contents)?;
    }
    Ok(())
}

/// Survey, offense file, truth and a ready-to-run configuration for a
/// simulated scenario. In the all-reported mode (or with `with_pi`) the
/// offense file carries the true propensities and no survey is written.
pub fn simulate_bundle(spec: &crate::simgen::ScenarioSpec, with_pi: bool) -> Result<Bundle> {
    use crate::config::FeatureDecl;
    use crate::simgen::{generate_offenses, generate_survey};

    let external = with_pi || spec.all_reported_mode();
    let pop = generate_offenses(spec).within("simgen")?;
    let mut bundle = Bundle::new();
    bundle.insert("offenses.csv".into(), crate::io::offenses_csv(&pop, external)?);
    if !external {
        let survey = generate_survey(spec).within("simgen")?;
        bundle.insert("survey.csv".into(), crate::io::survey_csv(&survey)?);
    }
    bundle.insert(
        "truth.json".into(),
        serde_json::to_string_pretty(&pop.truth).map_err(|e| Error::Io(e.to_string()))? + "\n",
    );
    let cfg = PipelineConfig {
        survey: (!external).then(|| "survey.csv".into()),
        offenses: "offenses.csv".into(),
        propensities: None,
        output_dir: "report".into(),
        seed: spec.seed,
        positivity_floor: spec.positivity_floor,
        allow_positivity_violation: false,
        solver: Default::default(),
        lonely_psu: Default::default(),
        lambda: 0.0,
        covariate_bound: 1e6,
        group_by: Vec::new(),
        z: pop.z_names[1..].iter().map(|n| FeatureDecl::numeric(n)).collect(),
        x: pop.x_names[1..].iter().map(|n| FeatureDecl::numeric(n)).collect(),
        gee: GeeMode::Auto,
        alpha: Default::default(),
        calibration_bins: 10,
        cv_folds: 5,
        focal: Vec::new(),
        focal_replicates: 50,
        focal_resample_size: 10_000,
    };
    bundle.insert("pipeline.toml".into(), cfg.to_toml()?);
    Ok(bundle)
}
