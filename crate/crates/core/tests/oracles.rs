mod common;

use common::*;
use darkfig::design_glm::{
    design_covariance, fit_reporting_model, fit_weighted_logit, weighted_score, weighted_score_jacobian,
    DesignConfig, LonelyPsu, PiModel,
};
use darkfig::diagnostics::weighted_auc;
use darkfig::gee_twostep::{fit_arrest_gee, gee_score, gee_score_gamma_jacobian, group_clusters, GeeConfig};
use darkfig::reweight::{estimate_population_total, estimate_rates, FirstStage, OffenseRecord, RateConfig};
use darkfig::twostep_logit::{
    arrest_sandwich_covariance, arrest_score, arrest_score_gamma_jacobian, arrest_score_jacobian, fit_arrest_model,
    ArrestConfig,
};
use nalgebra::DVector;

fn eight_records() -> Vec<darkfig::design_glm::SurveyRecord> {
    let rows = [
        ([1.0, 0.0, -1.0], true, 1.0),
        ([1.0, 1.0, 0.5], true, 2.0),
        ([1.0, 0.0, 0.2], false, 1.5),
        ([1.0, 1.0, -0.3], false, 3.0),
        ([1.0, 1.0, 1.0], true, 1.0),
        ([1.0, 0.0, 0.8], false, 2.5),
        ([1.0, 0.0, -0.6], true, 1.0),
        ([1.0, 1.0, -0.9], false, 0.5),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (z, r, w))| survey_record(z.to_vec(), *r, *w, if i < 4 { "a" } else { "b" }, &format!("p{}", i / 2)))
        .collect()
}

#[test]
fn weighted_logit_matches_newton_oracle() {
    let recs = eight_records();
    let x: Vec<Vec<f64>> = recs.iter().map(|r| r.z.clone()).collect();
    let y: Vec<f64> = recs.iter().map(|r| if r.r { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = recs.iter().map(|r| r.weight).collect();
    let want = newton_logit(&x, &y, &w);
    let got = fit_weighted_logit(&recs, &names("z", 3), &DesignConfig::default()).unwrap();
    for (g, o) in got.gamma_hat.iter().zip(&want) {
        assert!((g - o).abs() < 1e-8, "{g} vs {o}");
    }
}

/// Stratified between-PSU linearization written out directly.
fn linearization_oracle(recs: &[darkfig::design_glm::SurveyRecord], gamma: &[f64]) -> Mat {
    let n = recs.len() as f64;
    let d = gamma.len();
    let mean_w = recs.iter().map(|r| r.weight).sum::<f64>() / n;
    let mut bread = zeros(d, d);
    let mut strata: std::collections::BTreeMap<String, std::collections::BTreeMap<String, Vec<f64>>> =
        Default::default();
    for r in recs {
        let w = r.weight / mean_w;
        let p = sigmoid(dot(&r.z, gamma));
        for a in 0..d {
            for b in 0..d {
                bread[a][b] += w * p * (1.0 - p) * r.z[a] * r.z[b] / n;
            }
        }
        let t = strata
            .entry(r.stratum.clone())
            .or_default()
            .entry(r.psu.clone())
            .or_insert_with(|| vec![0.0; d]);
        let y = if r.r { 1.0 } else { 0.0 };
        for a in 0..d {
            t[a] += w * (y - p) * r.z[a];
        }
    }
    let mut meat = zeros(d, d);
    for psus in strata.values() {
        let m = psus.len() as f64;
        let mean: Vec<f64> = (0..d).map(|a| psus.values().map(|t| t[a]).sum::<f64>() / m).collect();
        for t in psus.values() {
            for a in 0..d {
                for b in 0..d {
                    meat[a][b] += m / (m - 1.0) * (t[a] - mean[a]) * (t[b] - mean[b]) / n;
                }
            }
        }
    }
    sandwich(&bread, &meat)
}

#[test]
fn design_covariance_matches_hand_linearization() {
    // Two strata, two PSUs each, two records per PSU.
    let recs = eight_records();
    let model = fit_weighted_logit(&recs, &names("z", 3), &DesignConfig::default()).unwrap();
    let got = to_mat(&design_covariance(&model, &recs, LonelyPsu::Fail).unwrap());
    let want = linearization_oracle(&recs, &model.gamma_hat);
    assert!(max_rel_diff(&want, &got) < 1e-10, "{got:?} vs {want:?}");

    let big = random_survey(3, 4, 5, 7);
    let model = fit_weighted_logit(&big, &names("z", 3), &DesignConfig::default()).unwrap();
    let got = to_mat(&design_covariance(&model, &big, LonelyPsu::Fail).unwrap());
    assert!(max_rel_diff(&linearization_oracle(&big, &model.gamma_hat), &got) < 1e-10);
}

#[test]
fn iid_design_reduces_to_scaled_hc0_sandwich() {
    // One stratum, one record per PSU, equal weights: n/(n−1) times the
    // classical robust sandwich of logistic regression.
    let mut recs = random_survey(11, 1, 1, 300);
    for (i, r) in recs.iter_mut().enumerate() {
        r.weight = 1.0;
        r.psu = format!("u{i}");
    }
    let model = fit_weighted_logit(&recs, &names("z", 3), &DesignConfig::default()).unwrap();
    let g = &model.gamma_hat;
    let n = recs.len() as f64;
    let mut bread = zeros(3, 3);
    let mut meat = zeros(3, 3);
    for r in &recs {
        let p = sigmoid(dot(&r.z, g));
        let e = if r.r { 1.0 } else { 0.0 } - p;
        for a in 0..3 {
            for b in 0..3 {
                bread[a][b] += p * (1.0 - p) * r.z[a] * r.z[b] / n;
                meat[a][b] += e * e * r.z[a] * r.z[b] / n * n / (n - 1.0);
            }
        }
    }
    let want = sandwich(&bread, &meat);
    let got = to_mat(&design_covariance(&model, &recs, LonelyPsu::Fail).unwrap());
    assert!(max_rel_diff(&want, &got) < 1e-8);
}

#[test]
fn weight_scaling_leaves_fit_and_covariance_unchanged() {
    let recs = random_survey(5, 3, 4, 10);
    let scaled: Vec<_> = recs
        .iter()
        .map(|r| darkfig::design_glm::SurveyRecord {
            weight: r.weight * 1234.5,
            ..r.clone()
        })
        .collect();
    let cfg = DesignConfig::default();
    let a = fit_reporting_model(&recs, &names("z", 3), &cfg).unwrap();
    let b = fit_reporting_model(&scaled, &names("z", 3), &cfg).unwrap();
    for (x, y) in a.gamma_hat.iter().zip(&b.gamma_hat) {
        assert!((x - y).abs() < 1e-10);
    }
    let (sa, sb) = (a.sigma_v_matrix().unwrap(), b.sigma_v_matrix().unwrap());
    assert!(max_rel_diff(&to_mat(&sa), &to_mat(&sb)) < 1e-10);
}

fn central_difference<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, at: &DVector<f64>) -> Mat {
    let d = at.len();
    let m = f(at).len();
    let mut out = zeros(m, d);
    for j in 0..d {
        let h = 1e-5 * (1.0 + at[j].abs());
        let mut up = at.clone();
        let mut dn = at.clone();
        up[j] += h;
        dn[j] -= h;
        let df = (f(&up) - f(&dn)) / (2.0 * h);
        for i in 0..m {
            out[i][j] = df[i];
        }
    }
    out
}

#[test]
fn jacobians_match_finite_differences() {
    let survey = random_survey(21, 2, 3, 20);
    let gamma = DVector::from_vec(vec![0.2, 0.5, -0.4]);
    let fd = central_difference(|g| weighted_score(&survey, g), &gamma);
    assert!(max_rel_diff(&to_mat(&weighted_score_jacobian(&survey, &gamma)), &fd) < 1e-6);

    let recs = random_offenses(22, 400, &[0.5, 0.8, -0.3], &[-1.5, 0.4, 0.3, -0.2]);
    let theta = DVector::from_vec(vec![-1.2, 0.3, 0.2, -0.1]);
    let pi_of = |g: &DVector<f64>| -> Vec<f64> {
        recs.iter().map(|r| sigmoid(dot(&r.z, g.as_slice()))).collect()
    };
    let pi = pi_of(&gamma);
    let fd = central_difference(|t| arrest_score(&recs, t, &pi).unwrap(), &theta);
    assert!(max_rel_diff(&to_mat(&arrest_score_jacobian(&recs, &theta, &pi).unwrap()), &fd) < 1e-6);
    let fd = central_difference(|g| arrest_score(&recs, &theta, &pi_of(g)).unwrap(), &gamma);
    assert!(max_rel_diff(&to_mat(&arrest_score_gamma_jacobian(&recs, &theta, &gamma).unwrap()), &fd) < 1e-6);

    let clustered: Vec<OffenseRecord> = recs
        .iter()
        .enumerate()
        .map(|(i, r)| OffenseRecord {
            incident_id: format!("{:05}", i / 3),
            z: recs[i / 3 * 3].z.clone(),
            ..r.clone()
        })
        .collect();
    let clusters = group_clusters(&clustered).unwrap();
    let cpi = |g: &DVector<f64>| -> Vec<f64> {
        clusters.iter().map(|c| sigmoid(dot(&c.z, g.as_slice()))).collect()
    };
    let fd = central_difference(|g| gee_score(&clusters, &cpi(g), &theta, 0.3), &gamma);
    assert!(max_rel_diff(&to_mat(&gee_score_gamma_jacobian(&clusters, &theta, 0.3, &gamma)), &fd) < 1e-6);
}

#[test]
fn weighted_auc_matches_pair_enumeration() {
    let p = [0.1, 0.4, 0.4, 0.8, 0.3];
    let y = [false, true, false, true, false];
    let w = [1.0, 2.0, 0.5, 1.5, 3.0];
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..5 {
        for j in 0..5 {
            if y[i] && !y[j] {
                let s = if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
                num += w[i] * w[j] * s;
                den += w[i] * w[j];
            }
        }
    }
    assert!((weighted_auc(&p, &y, &w).unwrap() - num / den).abs() < 1e-15);
}

/// Delta-method variances of N̂, π̂*, q̂*: sampling part written out, first
/// stage part from numerically differentiated estimates and Var(γ̂) = Σᵛ/n_v.
#[test]
fn rate_standard_errors_match_delta_method_oracle() {
    let survey = random_survey(31, 4, 6, 12);
    let model = fit_reporting_model(&survey, &names("z", 3), &DesignConfig::default()).unwrap();
    let recs = random_offenses(32, 1500, &model.gamma_hat, &[-1.5, 0.4, 0.3, -0.2]);
    let fs = FirstStage::Model(model.clone());
    let cfg = RateConfig::default();
    let total = estimate_population_total(&recs, &fs, &cfg).unwrap();
    let rates = estimate_rates(&recs, &fs, &cfg).unwrap();

    let gamma = model.gamma();
    let estimates = |g: &DVector<f64>| -> DVector<f64> {
        let n_hat: f64 = recs.iter().map(|r| 1.0 / sigmoid(dot(&r.z, g.as_slice()))).sum();
        let arrests = recs.iter().filter(|r| r.a).count() as f64;
        DVector::from_vec(vec![n_hat, recs.len() as f64 / n_hat, arrests / n_hat])
    };
    let grad = central_difference(estimates, &gamma);
    let vg: Mat = to_mat(&(model.sigma_v_matrix().unwrap() / model.n_survey as f64));
    let fs_var = |row: &[f64]| -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                s += row[a] * vg[a][b] * row[b];
            }
        }
        s
    };
    let pi: Vec<f64> = recs.iter().map(|r| sigmoid(dot(&r.z, gamma.as_slice()))).collect();
    let n = recs.len() as f64;
    let n_hat: f64 = pi.iter().map(|p| 1.0 / p).sum();
    let ps = n / n_hat;
    let qs = recs.iter().filter(|r| r.a).count() as f64 / n_hat;

    let var_n = pi.iter().map(|p| (1.0 - p) / (p * p)).sum::<f64>() + fs_var(&grad[0]);
    let var_pi = ps * ps * pi.iter().map(|p| (1.0 - ps / p).powi(2)).sum::<f64>() / (n * n) + fs_var(&grad[1]);
    let var_q = ps * ps
        * recs
            .iter()
            .zip(&pi)
            .map(|(r, p)| (if r.a { 1.0 } else { 0.0 } - qs / p).powi(2))
            .sum::<f64>()
        / (n * n)
        + fs_var(&grad[2]);
    for (got, want) in [
        (total.total.se, var_n.sqrt()),
        (rates.pi_star.se, var_pi.sqrt()),
        (rates.q_star.se, var_q.sqrt()),
    ] {
        assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
    }
}

/// Two-step sandwich assembled from finite-difference Jacobians.
#[test]
fn twostep_sandwich_matches_oracle() {
    let survey = random_survey(41, 4, 6, 12);
    let model: PiModel = fit_reporting_model(&survey, &names("z", 3), &DesignConfig::default()).unwrap();
    let recs = random_offenses(42, 2000, &model.gamma_hat, &[-1.5, 0.4, 0.3, -0.2]);
    let fs = FirstStage::Model(model.clone());
    let xn = names("x", 4);
    let fit = fit_arrest_model(&recs, &fs, &xn, &ArrestConfig::default()).unwrap();
    let fit = arrest_sandwich_covariance(fit, &recs, &fs).unwrap();
    let theta = fit.theta_hat.clone();
    let gamma = model.gamma();
    let n = recs.len() as f64;
    let pi: Vec<f64> = recs.iter().map(|r| sigmoid(dot(&r.z, gamma.as_slice()))).collect();

    let jt = central_difference(|t| arrest_score(&recs, t, &pi).unwrap() / n, &theta);
    let jg = central_difference(
        |g| {
            let p: Vec<f64> = recs.iter().map(|r| sigmoid(dot(&r.z, g.as_slice()))).collect();
            arrest_score(&recs, &theta, &p).unwrap() / n
        },
        &gamma,
    );
    let mut xi = zeros(4, 4);
    for (r, p) in recs.iter().zip(&pi) {
        let e = if r.a { 1.0 } else { 0.0 } - sigmoid(dot(&r.x, theta.as_slice())) / p;
        for a in 0..4 {
            for b in 0..4 {
                xi[a][b] += e * e * r.x[a] * r.x[b] / n;
            }
        }
    }
    let kappa = n / model.n_survey as f64;
    let sv = to_mat(&model.sigma_v_matrix().unwrap());
    let extra = matmul(&matmul(&jg, &sv), &transpose(&jg));
    for a in 0..4 {
        for b in 0..4 {
            xi[a][b] += kappa * extra[a][b];
        }
    }
    let want = sandwich(&jt, &xi);
    let got = to_mat(fit.sigma.as_ref().unwrap());
    assert!(max_rel_diff(&want, &got) < 1e-6);
}

#[test]
fn gee_with_independence_matches_twostep() {
    let recs = random_offenses(51, 1500, &[0.5, 0.8, -0.3], &[-1.5, 0.4, 0.3, -0.2]);
    let recs: Vec<OffenseRecord> = recs
        .into_iter()
        .map(|r| OffenseRecord {
            pi_hat: Some(sigmoid(dot(&r.z, &[0.5, 0.8, -0.3]))),
            ..r
        })
        .collect();
    let xn = names("x", 4);
    let ts = fit_arrest_model(&recs, &FirstStage::External, &xn, &ArrestConfig::default()).unwrap();
    let ts = arrest_sandwich_covariance(ts, &recs, &FirstStage::External).unwrap();
    let clusters = group_clusters(&recs).unwrap();
    let gee = fit_arrest_gee(&clusters, &FirstStage::External, &xn, &GeeConfig::default()).unwrap();
    for j in 0..4 {
        assert!((ts.theta_hat[j] - gee.theta_hat[j]).abs() < 1e-6);
    }
    assert!(max_rel_diff(&to_mat(ts.sigma.as_ref().unwrap()), &to_mat(&gee.sigma_gee)) < 1e-6);
}
