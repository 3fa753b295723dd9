//! Representation-diversity metrics over the Gram spectrum of an N×d
//! representation matrix Z.
//!
//! The spectrum is taken from the d×d second-moment matrix ZᵀZ, whose
//! eigenvalues are the nonzero eigenvalues of the N×N Gram matrix ZZᵀ (padded
//! with zeros when N < d).
//!
//! HM-k follows the literal formula (Σ_{i≤k} 1/λᵢ)⁻¹, i.e. it does **not**
//! include the factor k of the classical harmonic mean. Multiply by k for the
//! classical value.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{pinv, spd_inverse, spd_logdet, sym_eig, Matrix};

/// k values reported for GM-k / HM-k.
pub const GM_HM_KS: [usize; 3] = [5, 10, 20];
/// k values reported for normalized top-k mass.
pub const MASS_KS: [usize; 5] = [1, 2, 5, 10, 20];
/// Eigenvalues written per CSV row.
pub const CSV_EIGENVALUES: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KValue {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub n: usize,
    pub d: usize,
    /// Descending, nonnegative. Divided by their sum when `normalized`.
    pub eigenvalues: Vec<f64>,
    pub normalized: bool,
    /// GM-k for the k in [`GM_HM_KS`] that do not exceed d.
    pub gm: Vec<KValue>,
    pub hm: Vec<KValue>,
    /// Σ_{i≤k} λᵢ / Σ λᵢ for k in [`MASS_KS`] not exceeding d.
    pub mass: Vec<KValue>,
}

impl SpectrumReport {
    fn from_eigenvalues(n: usize, d: usize, eigenvalues: Vec<f64>, normalized: bool) -> Self {
        let mut report = Self {
            n,
            d,
            eigenvalues,
            normalized,
            gm: vec![],
            hm: vec![],
            mass: vec![],
        };
        for k in GM_HM_KS.into_iter().filter(|&k| k <= d) {
            report.gm.push(KValue {
                k,
                value: gm_k(&report, k).expect("k in range"),
            });
            report.hm.push(KValue {
                k,
                value: hm_k(&report, k).expect("k in range"),
            });
        }
        for k in MASS_KS.into_iter().filter(|&k| k <= d) {
            report.mass.push(KValue {
                k,
                value: normalized_mass(&report, k).expect("k in range"),
            });
        }
        report
    }

    pub fn gm(&self, k: usize) -> Option<f64> {
        self.gm.iter().find(|v| v.k == k).map(|v| v.value)
    }

    pub fn hm(&self, k: usize) -> Option<f64> {
        self.hm.iter().find(|v| v.k == k).map(|v| v.value)
    }

    pub fn mass(&self, k: usize) -> Option<f64> {
        self.mass.iter().find(|v| v.k == k).map(|v| v.value)
    }

    pub fn total(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// λᵢ / Σλ (all zero when the total is zero).
    pub fn normalized_eigenvalues(&self) -> Vec<f64> {
        let t = self.total();
        if t > 0.0 {
            self.eigenvalues.iter().map(|l| l / t).collect()
        } else {
            vec![0.0; self.eigenvalues.len()]
        }
    }
}

fn check_finite(z: &Matrix) -> Result<()> {
    if let Some(pos) = z.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / z.cols().max(1),
            col: pos % z.cols().max(1),
        });
    }
    Ok(())
}

/// Spectrum of ZᵀZ with GM/HM/mass statistics.
pub fn gram_spectrum(z: &Matrix) -> Result<SpectrumReport> {
    spectrum(z, false)
}

/// As [`gram_spectrum`] but with eigenvalues scaled to sum to one before the
/// GM/HM statistics are taken.
pub fn gram_spectrum_normalized(z: &Matrix) -> Result<SpectrumReport> {
    spectrum(z, true)
}

fn spectrum(z: &Matrix, normalized: bool) -> Result<SpectrumReport> {
    let (n, d) = z.shape();
    if n == 0 || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "representation matrix must be at least 1x1, got {n}x{d}"
        )));
    }
    check_finite(z)?;
    let mut eigenvalues = sym_eig(&z.gram())?.eigenvalues;
    for l in &mut eigenvalues {
        *l = l.max(0.0);
    }
    if normalized {
        let t: f64 = eigenvalues.iter().sum();
        if t > 0.0 {
            eigenvalues.iter_mut().for_each(|l| *l /= t);
        }
    }
    Ok(SpectrumReport::from_eigenvalues(n, d, eigenvalues, normalized))
}

/// Eigenvalues of the N×N Gram matrix ZZᵀ, descending.
pub fn full_gram_eigenvalues(z: &Matrix) -> Result<Vec<f64>> {
    check_finite(z)?;
    Ok(sym_eig(&z.outer_gram())?.eigenvalues)
}

fn check_k(report: &SpectrumReport, k: usize) -> Result<()> {
    if k == 0 || k > report.eigenvalues.len() {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            min: 1,
            max: report.eigenvalues.len(),
        });
    }
    Ok(())
}

/// (Π_{i≤k} λᵢ)^{1/k}; zero if any of the top-k eigenvalues is zero.
pub fn gm_k(report: &SpectrumReport, k: usize) -> Result<f64> {
    check_k(report, k)?;
    let top = &report.eigenvalues[..k];
    if top.iter().any(|&l| l <= 0.0) {
        return Ok(0.0);
    }
    Ok((top.iter().map(|l| l.ln()).sum::<f64>() / k as f64).exp())
}

/// (Σ_{i≤k} 1/λᵢ)⁻¹; zero if any of the top-k eigenvalues is zero.
pub fn hm_k(report: &SpectrumReport, k: usize) -> Result<f64> {
    check_k(report, k)?;
    let top = &report.eigenvalues[..k];
    if top.iter().any(|&l| l <= 0.0) {
        return Ok(0.0);
    }
    Ok(1.0 / top.iter().map(|l| 1.0 / l).sum::<f64>())
}

/// Share of the total spectrum carried by the top-k eigenvalues.
pub fn normalized_mass(report: &SpectrumReport, k: usize) -> Result<f64> {
    check_k(report, k)?;
    let total = report.total();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(report.eigenvalues[..k].iter().sum::<f64>() / total)
}

/// det(ZᵀZ)^{1/d} through a Cholesky log-determinant; zero for singular ZᵀZ.
pub fn gm_full(z: &Matrix) -> Result<f64> {
    check_finite(z)?;
    let d = z.cols();
    match spd_logdet(&z.gram()) {
        Ok(logdet) => Ok((logdet / d as f64).exp()),
        Err(Error::Singular(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// trace((ZᵀZ)⁻¹)⁻¹ through a Cholesky inverse.
pub fn hm_full(z: &Matrix) -> Result<f64> {
    check_finite(z)?;
    let inv = spd_inverse(&z.gram())?;
    Ok(1.0 / inv.trace())
}

/// Monte-Carlo covariance of the least-squares error ŵ − w for labels
/// y = Zw + σε, ε ~ N(0, I). With σ = 1 the covariance tends to (ZᵀZ)⁻¹.
pub fn param_error_simulation<R: Rng + ?Sized>(
    z: &Matrix,
    true_w: &[f64],
    trials: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<Matrix> {
    check_finite(z)?;
    let (n, d) = z.shape();
    if true_w.len() != d {
        return Err(Error::Dimension(format!(
            "weight has {} entries, representations have {d} columns",
            true_w.len()
        )));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter("need at least two trials".into()));
    }
    // Singular G has no finite error covariance.
    spd_inverse(&z.gram())?;
    let z_pinv = pinv(z)?;
    let clean = z.matvec(true_w)?;
    let mut errors = Matrix::zeros(trials, d);
    let mut y = vec![0.0; n];
    for t in 0..trials {
        for (yi, ci) in y.iter_mut().zip(&clean) {
            let e: f64 = StandardNormal.sample(rng);
            *yi = ci + noise_std * e;
        }
        let w_hat = z_pinv.matvec(&y)?;
        for (o, (a, b)) in errors.row_mut(t).iter_mut().zip(w_hat.iter().zip(true_w)) {
            *o = a - b;
        }
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| errors.col(j).iter().sum::<f64>() / trials as f64)
        .collect();
    let mut cov = Matrix::zeros(d, d);
    for e in errors.row_iter() {
        for i in 0..d {
            for j in 0..d {
                let v = cov.get(i, j) + (e[i] - mean[i]) * (e[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    Ok(cov.scale(1.0 / (trials - 1) as f64))
}

/// One row of the spectra table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub report: SpectrumReport,
}

/// CSV header: method, task, seed, n, d, lambda_1..lambda_32, gm_*, hm_*, mass_*.
pub fn spectra_csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["method", "task", "seed", "n", "d"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=CSV_EIGENVALUES).map(|i| format!("lambda_{i}")));
    h.extend(GM_HM_KS.iter().map(|k| format!("gm_{k}")));
    h.extend(GM_HM_KS.iter().map(|k| format!("hm_{k}")));
    h.extend(MASS_KS.iter().map(|k| format!("mass_{k}")));
    h
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn write_spectra_csv<W: Write>(out: W, records: &[SpectrumRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(spectra_csv_header())?;
    for r in records {
        let rep = &r.report;
        let mut row = vec![
            r.method.clone(),
            r.task.clone(),
            r.seed.to_string(),
            rep.n.to_string(),
            rep.d.to_string(),
        ];
        row.extend((0..CSV_EIGENVALUES).map(|i| opt_cell(rep.eigenvalues.get(i).copied())));
        row.extend(GM_HM_KS.iter().map(|&k| opt_cell(rep.gm(k))));
        row.extend(GM_HM_KS.iter().map(|&k| opt_cell(rep.hm(k))));
        row.extend(MASS_KS.iter().map(|&k| opt_cell(rep.mass(k))));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
