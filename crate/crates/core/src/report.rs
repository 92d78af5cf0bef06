//! Text and CSV renderings of estimates.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::diagnostics::{CalibrationBin, FocalSlopeReport, PositivityReport, PositivitySummary};
use crate::error::Result;
use crate::io::{cell, finish};
use crate::reweight::{GroupRates, PopulationTotal, RateEstimate, Rates, Z_975};
use crate::twostep_logit::Coefficient;

pub const SIGNIFICANCE_LEGEND: &str = "Signif. codes: p<0.001 '***', p<0.01 '**', p<0.05 '*', p<0.1 '.'";

pub fn significance_code(p: f64) -> &'static str {
    if !p.is_finite() {
        ""
    } else if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "."
    } else {
        ""
    }
}

/// Six significant digits; scientific outside [1e-4, 1e6).
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NA".into() } else if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let a = x.abs();
    if !(1e-4..1e6).contains(&a) {
        return format!("{x:.5e}");
    }
    let mag = a.log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (e.g. 9.999996 → 10.00000).
    if s.parse::<f64>().map_or(false, |r| r.abs() >= 10f64.powi(mag + 1)) && decimals > 0 {
        format!("{x:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

pub fn coefficients_csv(coefs: &[Coefficient]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "name",
        "estimate",
        "odds_ratio",
        "se",
        "odds_ratio_se",
        "ci_low",
        "ci_high",
        "p_value",
        "signif",
    ])?;
    for c in coefs {
        w.write_record([
            c.name.clone(),
            cell(c.estimate),
            cell(c.odds_ratio),
            cell(c.se),
            cell(c.odds_ratio_se),
            cell(c.estimate - Z_975 * c.se),
            cell(c.estimate + Z_975 * c.se),
            cell(c.p_value),
            significance_code(c.p_value).into(),
        ])?;
    }
    finish(w)
}

pub fn coefficients_text(title: &str, coefs: &[Coefficient]) -> String {
    let width = coefs.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(
        s,
        "{:width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12}",
        "name", "estimate", "odds ratio", "se", "z", "p"
    );
    for c in coefs {
        let _ = writeln!(
            s,
            "{:width$}  {:>12}  {:>12}  {:>12}  {:>12}  {:>12} {}",
            c.name,
            sig6(c.estimate),
            sig6(c.odds_ratio),
            sig6(c.se),
            sig6(c.estimate / c.se),
            sig6(c.p_value),
            significance_code(c.p_value)
        );
    }
    let _ = writeln!(s, "{SIGNIFICANCE_LEGEND}");
    s
}

fn rate_fields(e: &RateEstimate) -> [String; 4] {
    [cell(e.value), cell(e.se), cell(e.ci_low), cell(e.ci_high)]
}

pub fn rates_csv(total: &PopulationTotal, rates: &Rates) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["quantity", "estimate", "se", "ci_low", "ci_high"])?;
    for (name, e) in [
        ("total_offenses", &total.total),
        ("inflation", &total.inflation),
        ("reporting_rate", &rates.pi_star),
        ("arrest_rate", &rates.q_star),
    ] {
        let [v, se, lo, hi] = rate_fields(e);
        w.write_record([name.to_string(), v, se, lo, hi])?;
    }
    finish(w)
}

pub fn grouped_rates_csv(groups: &BTreeMap<String, GroupRates>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "group",
        "reported",
        "total_offenses",
        "total_offenses_se",
        "reporting_rate",
        "reporting_rate_se",
        "arrest_rate",
        "arrest_rate_se",
        "arrests_per_report",
    ])?;
    for (k, g) in groups {
        w.write_record([
            k.clone(),
            g.rates.n.to_string(),
            cell(g.total.total.value),
            cell(g.total.total.se),
            cell(g.rates.pi_star.value),
            cell(g.rates.pi_star.se),
            cell(g.rates.q_star.value),
            cell(g.rates.q_star.se),
            cell(g.rates.alpha_star),
        ])?;
    }
    finish(w)
}

fn positivity_row(label: &str, s: &PositivitySummary) -> [String; 7] {
    [
        label.to_string(),
        s.n.to_string(),
        cell(s.min),
        cell(s.q01),
        cell(s.q05),
        cell(s.median),
        s.below_floor.to_string(),
    ]
}

pub fn positivity_csv(r: &PositivityReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group", "n", "min", "q01", "q05", "median", "below_floor"])?;
    w.write_record(positivity_row("(all)", &r.overall))?;
    for (k, s) in &r.groups {
        w.write_record(positivity_row(k, s))?;
    }
    finish(w)
}

pub fn calibration_csv(bins: &[CalibrationBin]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lower", "upper", "count", "mean_predicted", "observed", "ci_low", "ci_high"])?;
    for b in bins {
        w.write_record([
            cell(b.lower),
            cell(b.upper),
            b.count.to_string(),
            cell(b.mean_predicted),
            cell(b.observed),
            cell(b.ci_low),
            cell(b.ci_high),
        ])?;
    }
    finish(w)
}

/// Long format: one row per (feature, cell, replicate).
pub fn focal_csv(reports: &[FocalSlopeReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["focal", "feature", "center", "count", "replicate", "estimate"])?;
    for r in reports {
        for c in &r.cells {
            for (b, e) in c.estimates.iter().enumerate() {
                w.write_record([
                    r.focal.clone(),
                    c.feature.clone(),
                    cell(c.center),
                    c.count.to_string(),
                    b.to_string(),
                    cell(*e),
                ])?;
            }
        }
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significance_thresholds() {
        assert_eq!(significance_code(0.0005), "***");
        assert_eq!(significance_code(0.001), "**");
        assert_eq!(significance_code(0.03), "*");
        assert_eq!(significance_code(0.07), ".");
        assert_eq!(significance_code(0.5), "");
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(-2.0), "-2.00000");
        assert_eq!(sig6(12345.678), "12345.7");
        assert_eq!(sig6(9.9999996), "10.0000");
        assert_eq!(sig6(1234567.0), "1.23457e6");
        assert_eq!(sig6(0.0), "0");
    }
}
