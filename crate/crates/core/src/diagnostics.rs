//! Evaluation of the propensity model and misspecification probes for the
//! arrest model.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_glm::{fit_weighted_logit, predict_pi, DesignConfig, SurveyRecord};
use crate::error::{Error, Result};
use crate::reweight::{FirstStage, OffenseRecord, RateConfig, Z_975};
use crate::seed::rng_for;
use crate::twostep_logit::{fit_arrest_model, ArrestConfig};

/// Weighted probability that a random positive outranks a random negative;
/// ties count one half.
pub fn weighted_auc(predictions: &[f64], outcomes: &[bool], weights: &[f64]) -> Result<f64> {
    let n = predictions.len();
    if outcomes.len() != n || weights.len() != n {
        return Err(Error::InvalidInput("length mismatch".into()));
    }
    let w_pos: f64 = (0..n).filter(|&i| outcomes[i]).map(|i| weights[i]).sum();
    let w_neg: f64 = (0..n).filter(|&i| !outcomes[i]).map(|i| weights[i]).sum();
    if !(w_pos > 0.0 && w_neg > 0.0) {
        return Err(Error::DegenerateOutcomes);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predictions[a].total_cmp(&predictions[b]));
    let mut below_neg = 0.0;
    let mut acc = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let (mut tie_pos, mut tie_neg) = (0.0, 0.0);
        while j < n && predictions[order[j]] == predictions[order[i]] {
            let k = order[j];
            if outcomes[k] {
                tie_pos += weights[k];
            } else {
                tie_neg += weights[k];
            }
            j += 1;
        }
        acc += tie_pos * (below_neg + 0.5 * tie_neg);
        below_neg += tie_neg;
        i = j;
    }
    Ok(acc / (w_pos * w_neg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: f64,
    pub observed: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Equal-width bins on [0, 1]; empty bins are omitted. The interval uses the
/// Kish effective sample size of the bin.
pub fn weighted_calibration(
    predictions: &[f64],
    outcomes: &[bool],
    weights: &[f64],
    bins: usize,
) -> Vec<CalibrationBin> {
    let bins = bins.max(1);
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0, 0.0); bins];
    for ((&p, &y), &w) in predictions.iter().zip(outcomes).zip(weights) {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        let s = &mut sums[b];
        s.0 += 1;
        s.1 += w;
        s.2 += w * w;
        s.3 += w * p;
        if y {
            s.4 += w;
        }
    }
    sums.iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(b, &(count, w, w2, wp, wy))| {
            let observed = wy / w;
            let n_eff = w * w / w2;
            let se = (observed * (1.0 - observed) / n_eff).sqrt();
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                count,
                mean_predicted: wp / w,
                observed,
                ci_low: (observed - Z_975 * se).max(0.0),
                ci_high: (observed + Z_975 * se).min(1.0),
            }
        })
        .collect()
}

/// Out-of-fold propensity predictions for the survey records.
pub fn cross_validated_pi(
    records: &[SurveyRecord],
    feature_names: &[String],
    cfg: &DesignConfig,
    folds: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let folds = folds.max(2);
    let mut rng = rng_for(seed, &[0xCF]);
    let fold: Vec<usize> = (0..records.len()).map(|_| rng.random_range(0..folds)).collect();
    let mut out = vec![f64::NAN; records.len()];
    for f in 0..folds {
        let train: Vec<SurveyRecord> = records
            .iter()
            .zip(&fold)
            .filter(|(_, &k)| k != f)
            .map(|(r, _)| r.clone())
            .collect();
        let model = fit_weighted_logit(&train, feature_names, cfg)?;
        for (i, r) in records.iter().enumerate() {
            if fold[i] == f {
                out[i] = predict_pi(&model, &r.z)?;
            }
        }
    }
    Ok(out)
}

/// Indices drawn with replacement, with probability proportional to weight.
pub fn weighted_resample<R: Rng>(weights: &[f64], size: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok((0..size).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivitySummary {
    pub n: usize,
    pub min: f64,
    pub q01: f64,
    pub q05: f64,
    pub median: f64,
    pub below_floor: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    pub floor: f64,
    pub overall: PositivitySummary,
    pub groups: BTreeMap<String, PositivitySummary>,
    pub pass: bool,
    pub failing_groups: Vec<String>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(pi: &[f64], floor: f64) -> PositivitySummary {
    let mut s = pi.to_vec();
    s.sort_by(f64::total_cmp);
    PositivitySummary {
        n: s.len(),
        min: s[0],
        q01: quantile(&s, 0.01),
        q05: quantile(&s, 0.05),
        median: quantile(&s, 0.5),
        below_floor: s.iter().filter(|&&p| p < floor).count(),
    }
}

/// Summary of the reporting propensities, overall and per group, with a
/// verdict against `floor`.
pub fn positivity_report(
    records: &[OffenseRecord],
    first_stage: &FirstStage,
    keys: Option<&[String]>,
    floor: f64,
) -> Result<PositivityReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records".into()));
    }
    let pi = first_stage.propensities(records)?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if let Some(keys) = keys {
        if keys.len() != records.len() {
            return Err(Error::InvalidInput("group keys do not match records".into()));
        }
        for (k, &p) in keys.iter().zip(&pi) {
            groups.entry(k.clone()).or_default().push(p);
        }
    }
    let groups: BTreeMap<String, PositivitySummary> =
        groups.into_iter().map(|(k, v)| (k, summarize(&v, floor))).collect();
    let overall = summarize(&pi, floor);
    let failing_groups = groups
        .iter()
        .filter(|(_, s)| s.below_floor > 0)
        .map(|(k, _)| k.clone())
        .collect();
    Ok(PositivityReport {
        floor,
        pass: overall.below_floor == 0,
        overall,
        groups,
        failing_groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    pub replicates: usize,
    pub resample_size: usize,
    pub seed: u64,
    pub arrest: ArrestConfig,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            replicates: 50,
            resample_size: 10_000,
            seed: 20240601,
            arrest: ArrestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocalCell {
    pub feature: String,
    pub center: f64,
    /// Records assigned to this cell.
    pub count: usize,
    pub estimates: Vec<f64>,
    pub failures: Vec<String>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FocalSlopeReport {
    pub focal: String,
    pub cells: Vec<FocalCell>,
    pub notices: Vec<String>,
}

fn is_binary(values: &[f64]) -> bool {
    values.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Grid centers for a feature: {0, 1} when binary, else five evenly spaced
/// values spanning the observed range.
pub fn cell_centers(values: &[f64]) -> Vec<f64> {
    if is_binary(values) {
        return vec![0.0, 1.0];
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..5).map(|k| lo + (hi - lo) * k as f64 / 4.0).collect()
}

/// Index of the nearest center; ties go to the lower cell.
pub fn assign_cell(value: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (k, c) in centers.iter().enumerate().skip(1) {
        if (value - c).abs() < (value - centers[best]).abs() {
            best = k;
        }
    }
    best
}

/// Bootstrap distribution of the focal coefficient within cells of every
/// other offender feature.
pub fn focal_slope(
    records: &[OffenseRecord],
    first_stage: &FirstStage,
    feature_names: &[String],
    focal: &str,
    cfg: &FocalConfig,
) -> Result<FocalSlopeReport> {
    let focal_idx = feature_names
        .iter()
        .position(|n| n == focal)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidInput(format!("unknown focal coefficient `{focal}`")))?;
    let pi = first_stage.propensities(records)?;
    let base: Vec<OffenseRecord> = records
        .iter()
        .zip(&pi)
        .map(|(r, &p)| OffenseRecord {
            pi_hat: Some(p),
            ..r.clone()
        })
        .collect();
    let arrest_cfg = ArrestConfig {
        rates: RateConfig {
            allow_positivity_violation: true,
            ..cfg.arrest.rates
        },
        ..cfg.arrest
    };

    let mut notices = Vec::new();
    let mut jobs = Vec::new();
    for (j, name) in feature_names.iter().enumerate().skip(1) {
        let values: Vec<f64> = base.iter().map(|r| r.x[j]).collect();
        let binary = is_binary(&values);
        if binary && j == focal_idx {
            notices.push(format!("`{name}` is binary and focal; not probed"));
            continue;
        }
        let centers = cell_centers(&values);
        let mut members = vec![Vec::new(); centers.len()];
        for (i, &v) in values.iter().enumerate() {
            members[assign_cell(v, &centers)].push(i);
        }
        for (c, idx) in members.into_iter().enumerate() {
            if idx.is_empty() {
                notices.push(format!("`{name}` cell {:.6} is empty; skipped", centers[c]));
                continue;
            }
            jobs.push((j, c, centers[c], binary, idx));
        }
    }

    let cells = jobs
        .par_iter()
        .map(|(j, c, center, binary, idx)| {
            let keep: Vec<usize> = (0..feature_names.len()).filter(|&k| !(*binary && k == *j)).collect();
            let names: Vec<String> = keep.iter().map(|&k| feature_names[k].clone()).collect();
            let focal_pos = keep.iter().position(|&k| k == focal_idx).unwrap();
            let mut estimates = Vec::new();
            let mut failures = Vec::new();
            for b in 0..cfg.replicates {
                let mut rng = rng_for(cfg.seed, &[*j as u64, *c as u64, b as u64]);
                let sample: Vec<OffenseRecord> = (0..cfg.resample_size)
                    .map(|_| {
                        let r = &base[idx[rng.random_range(0..idx.len())]];
                        OffenseRecord {
                            x: keep.iter().map(|&k| r.x[k]).collect(),
                            ..r.clone()
                        }
                    })
                    .collect();
                match fit_arrest_model(&sample, &FirstStage::External, &names, &arrest_cfg) {
                    Ok(fit) => estimates.push(fit.theta_hat[focal_pos]),
                    Err(e) => failures.push(format!("replicate {b}: {e}")),
                }
            }
            let m = estimates.len() as f64;
            let mean = estimates.iter().sum::<f64>() / m;
            let sd = if estimates.len() > 1 {
                (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                f64::NAN
            };
            FocalCell {
                feature: feature_names[*j].clone(),
                center: *center,
                count: idx.len(),
                estimates,
                failures,
                mean,
                sd,
            }
        })
        .collect();
    Ok(FocalSlopeReport {
        focal: focal.to_string(),
        cells,
        notices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_trivial_cases() {
        let y = [false, false, true, true];
        let w = [1.0; 4];
        assert_eq!(weighted_auc(&[0.1, 0.2, 0.8, 0.9], &y, &w).unwrap(), 1.0);
        assert_eq!(weighted_auc(&[0.5; 4], &y, &w).unwrap(), 0.5);
        assert_eq!(
            weighted_auc(&[0.5; 2], &[true, true], &[1.0; 2]),
            Err(Error::DegenerateOutcomes)
        );
    }

    #[test]
    fn calibration_matches_bin_frequencies() {
        // predictions equal to the within-bin outcome frequency
        let p = [0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75];
        let y = [true, false, false, false, true, true, true, false];
        let bins = weighted_calibration(&p, &y, &[1.0; 8], 10);
        assert_eq!(bins.len(), 2);
        for b in &bins {
            assert!((b.observed - b.mean_predicted).abs() < 1e-15);
        }
        let doubled = weighted_calibration(&p, &y, &[2.0; 8], 10);
        assert_eq!(bins, doubled);
    }

    #[test]
    fn cells_and_tie_break() {
        assert_eq!(cell_centers(&[0.0, 1.0, 1.0]), vec![0.0, 1.0]);
        let c = cell_centers(&[0.0, 2.0, 4.0]);
        assert_eq!(c, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(assign_cell(0.5, &c), 0);
        assert_eq!(assign_cell(0.51, &c), 1);
        assert_eq!(assign_cell(4.0, &c), 4);
    }

    #[test]
    fn positivity_floor_verdicts() {
        let recs: Vec<OffenseRecord> = [0.05, 0.3, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &p)| OffenseRecord {
                incident_id: i.to_string(),
                offender_id: "1".into(),
                z: vec![1.0],
                x: vec![1.0],
                a: false,
                pi_hat: Some(p),
            })
            .collect();
        let fs = FirstStage::External;
        assert!(positivity_report(&recs, &fs, None, 0.01).unwrap().pass);
        assert!(!positivity_report(&recs, &fs, None, 0.1).unwrap().pass);
        let keys: Vec<String> = ["sex", "rob", "rob"].iter().map(|s| s.to_string()).collect();
        let r = positivity_report(&recs, &fs, Some(&keys), 0.1).unwrap();
        assert_eq!(r.failing_groups, vec!["sex".to_string()]);
        assert_eq!(r.groups["sex"].min, 0.05);
    }
}
