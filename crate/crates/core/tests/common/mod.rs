//! Plain-vector linear algebra and data builders shared by the integration
//! tests. Deliberately independent of the library's own routines.
#![allow(dead_code)]

use darkfig::design_glm::SurveyRecord;
use darkfig::reweight::OffenseRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = zeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            for j in 0..b[0].len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Gauss–Jordan with partial pivoting.
pub fn invert(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let inv = invert(a);
    inv.iter().map(|r| r.iter().zip(b).map(|(x, y)| x * y).sum()).collect()
}

pub fn sandwich(bread: &Mat, meat: &Mat) -> Mat {
    let bi = invert(bread);
    matmul(&matmul(&bi, meat), &bi)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_rel_diff(a: &Mat, b: &Mat) -> f64 {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

pub fn to_mat(m: &nalgebra::DMatrix<f64>) -> Mat {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Newton–Raphson for Σ w (y − σ(βᵀx)) x = 0.
pub fn newton_logit(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut beta = vec![0.0; d];
    for _ in 0..100 {
        let mut g = vec![0.0; d];
        let mut h = zeros(d, d);
        for i in 0..x.len() {
            let p = sigmoid(dot(&x[i], &beta));
            for a in 0..d {
                g[a] += w[i] * (y[i] - p) * x[i][a];
                for b in 0..d {
                    h[a][b] += w[i] * p * (1.0 - p) * x[i][a] * x[i][b];
                }
            }
        }
        let step = solve(&h, &g);
        for a in 0..d {
            beta[a] += step[a];
        }
        if step.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-14 {
            break;
        }
    }
    beta
}

pub fn survey_record(z: Vec<f64>, r: bool, weight: f64, stratum: &str, psu: &str) -> SurveyRecord {
    SurveyRecord {
        z,
        r,
        weight,
        stratum: stratum.into(),
        psu: psu.into(),
    }
}

/// Random survey with `strata` × `psus` × `units` records and d_z = 3.
pub fn random_survey(seed: u64, strata: usize, psus: usize, units: usize) -> Vec<SurveyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = [0.3, 0.9, -0.6];
    let mut out = Vec::new();
    for h in 0..strata {
        for m in 0..psus {
            for _ in 0..units {
                let z = vec![1.0, if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }, rng.random::<f64>() * 2.0 - 1.0];
                let r = rng.random::<f64>() < sigmoid(dot(&z, &gamma));
                out.push(survey_record(z, r, 1.0 + rng.random::<f64>() * 4.0, &format!("h{h}"), &format!("h{h}m{m}")));
            }
        }
    }
    out
}

/// Random single-offender records with d_z = 3, d_x = 4 and E[A | X] = q.
pub fn random_offenses(seed: u64, n: usize, gamma: &[f64], theta: &[f64]) -> Vec<OffenseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let b = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
        let u = rng.random::<f64>() * 2.0 - 1.0;
        let z = vec![1.0, b, u];
        let x = vec![1.0, b, u, rng.random::<f64>()];
        let pi = sigmoid(dot(&z, gamma));
        let q = sigmoid(dot(&x, theta));
        if rng.random::<f64>() >= pi {
            continue;
        }
        let a = rng.random::<f64>() < (q / pi).min(1.0);
        out.push(OffenseRecord {
            incident_id: format!("{:06}", out.len()),
            offender_id: "1".into(),
            z,
            x,
            a,
            pi_hat: None,
        });
    }
    out
}

pub fn names(prefix: &str, d: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..d).map(|j| format!("{prefix}{j}")))
        .collect()
}
