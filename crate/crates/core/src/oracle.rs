//! Numerical checks of the pseudo-task theory: least-squares residuals,
//! their Gaussian expectation over random linear labelings, the
//! min-over-linear-maps reconstruction loss and the multi-task reduction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm_sq, pinv, projector, Matrix};
use crate::net::EncoderModel;

/// Samples per independently seeded Monte-Carlo chunk.
pub const MC_CHUNK: usize = 4096;
pub const MIN_MC_SAMPLES: usize = 100;

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_rows(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "representation matrices have {} and {} rows",
            a.rows(),
            b.rows()
        )));
    }
    check_finite(a, "Z_pre")?;
    check_finite(b, "Z_fin")
}

/// Residual of `y` after projection onto col(B), given B's pseudo-inverse.
fn residual_sq(b: &Matrix, b_pinv: &Matrix, y: &[f64]) -> f64 {
    let v = b_pinv.matvec(y).expect("shapes checked");
    let fit = b.matvec(&v).expect("shapes checked");
    y.iter().zip(&fit).map(|(a, f)| (a - f) * (a - f)).sum()
}

/// min_v ‖y − Bv‖², i.e. ‖(I − P_B) y‖².
pub fn ls_residual_loss(b: &Matrix, y: &[f64]) -> Result<f64> {
    if b.rows() != y.len() {
        return Err(Error::Dimension(format!(
            "design has {} rows, labels have {} entries",
            b.rows(),
            y.len()
        )));
    }
    check_finite(b, "design")?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("labels contain non-finite values".into()));
    }
    Ok(residual_sq(b, &pinv(b)?, y))
}

/// ‖(P_fin − I) Z_pre‖²_F.
pub fn closed_form_pseudo_loss(z_pre: &Matrix, z_fin: &Matrix) -> Result<f64> {
    check_rows(z_pre, z_fin)?;
    let p = projector(z_fin)?;
    Ok(p.matmul(z_pre)?.sub(z_pre)?.frobenius_sq())
}

/// min_W Σⱼ ‖z_preʲ − W z_finʲ‖² and the minimizer W (d_pre × d_fin).
pub fn min_linear_map_loss(z_pre: &Matrix, z_fin: &Matrix) -> Result<(f64, Matrix)> {
    check_rows(z_pre, z_fin)?;
    let w_t = pinv(z_fin)?.matmul(z_pre)?;
    let recon = z_fin.matmul(&w_t)?;
    Ok((z_pre.sub(&recon)?.frobenius_sq(), w_t.transpose()))
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let w = other.n as f64 / n as f64;
        Moments {
            n,
            mean: self.mean + delta * w,
            m2: self.m2 + other.m2 + delta * delta * self.n as f64 * w,
        }
    }

    fn standard_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn chunk_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Monte-Carlo mean and standard error of `f(u)` for u ~ N(0, I_dim), in
/// fixed-size chunks on independent streams merged in chunk order.
fn gaussian_mc<F>(dim: usize, num_samples: usize, seed: u64, f: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let chunks = num_samples.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = chunk_rng(seed, c);
            let count = MC_CHUNK.min(num_samples - c * MC_CHUNK);
            let mut u = vec![0.0; dim];
            let mut m = Moments::default();
            for _ in 0..count {
                for x in &mut u {
                    *x = StandardNormal.sample(&mut rng);
                }
                m.push(f(&u));
            }
            m
        })
        .collect();
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    (total.mean, total.standard_error())
}

fn check_samples(num_samples: usize) -> Result<()> {
    if num_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {num_samples}"
        )));
    }
    Ok(())
}

/// E_u[min_v ‖Z_pre u − Z_fin v‖²] for u ~ N(0, I) by sampling.
pub fn mc_pseudo_loss(
    z_pre: &Matrix,
    z_fin: &Matrix,
    num_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_rows(z_pre, z_fin)?;
    check_samples(num_samples)?;
    let fin_pinv = pinv(z_fin)?;
    Ok(gaussian_mc(z_pre.cols(), num_samples, seed, |u| {
        let y = z_pre.matvec(u).expect("shapes checked");
        residual_sq(z_fin, &fin_pinv, &y)
    }))
}

/// E_u ‖M u‖² for u ~ N(0, I) by sampling; tends to ‖M‖²_F.
pub fn mc_gaussian_norm_sq(m: &Matrix, num_samples: usize, seed: u64) -> Result<(f64, f64)> {
    check_finite(m, "matrix")?;
    check_samples(num_samples)?;
    Ok(gaussian_mc(m.cols(), num_samples, seed, |u| {
        norm_sq(&m.matvec(u).expect("shapes checked"))
    }))
}

/// A random linear labeling y = wᵀz + b of frozen representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoTask {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl PseudoTask {
    pub fn sample<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let weight = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let bias = StandardNormal.sample(rng);
        Self { weight, bias }
    }

    /// Draws `count` tasks from one seeded stream.
    pub fn sample_many(dim: usize, count: usize, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::sample(dim, &mut rng)).collect()
    }

    pub fn labels(&self, z: &Matrix) -> Result<Vec<f64>> {
        Ok(z.matvec(&self.weight)?.into_iter().map(|v| v + self.bias).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Per-task closed form on bias-augmented representations.
    pub closed_form_value: f64,
    /// Mean over tasks of the optimal linear-plus-bias head loss.
    pub mc_estimate: f64,
    pub mc_standard_error: f64,
    /// min over linear maps on the bias-augmented representations.
    pub min_w_value: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Σ over tasks of the per-task losses.
    pub empirical_sum: f64,
    /// T × closed form.
    pub closed_form_total: f64,
    pub sum_standard_error: f64,
}

impl EquivalenceReport {
    /// Empirical side within `sigmas` standard errors of the closed form.
    /// A zero standard error requires agreement to rounding.
    pub fn within(&self, sigmas: f64) -> bool {
        let diff = (self.mc_estimate - self.closed_form_value).abs();
        diff <= sigmas * self.mc_standard_error + 1e-9 * (1.0 + self.closed_form_value)
    }

    pub fn z_score(&self) -> f64 {
        let diff = self.mc_estimate - self.closed_form_value;
        if self.mc_standard_error > 0.0 {
            diff / self.mc_standard_error
        } else {
            0.0
        }
    }
}

/// Compares the multi-task pseudo loss with `tasks` random linear-plus-bias
/// tasks on the final-layer representations of `pre` against the closed form.
pub fn verify_theorem_1(
    pre: &EncoderModel,
    fin: &EncoderModel,
    inputs: &Matrix,
    tasks: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if tasks == 0 {
        return Err(Error::InvalidParameter("need at least one pseudo-task".into()));
    }
    let z_pre = pre.representations(inputs, pre.num_layers())?;
    let z_fin = fin.representations(inputs, fin.num_layers())?;
    check_rows(&z_pre, &z_fin)?;
    let pre_aug = z_pre.with_constant_column(1.0);
    let fin_aug = z_fin.with_constant_column(1.0);

    let (closed, _) = min_linear_map_loss(&pre_aug, &fin_aug)?;
    let fin_pinv = pinv(&fin_aug)?;
    let mut moments = Moments::default();
    let mut sum = 0.0;
    for task in PseudoTask::sample_many(z_pre.cols(), tasks, seed) {
        let loss = residual_sq(&fin_aug, &fin_pinv, &task.labels(&z_pre)?);
        sum += loss;
        moments.push(loss);
    }
    let se = moments.standard_error();
    let closed_direct = closed_form_pseudo_loss(&pre_aug, &fin_aug)?;
    Ok(EquivalenceReport {
        closed_form_value: closed_direct,
        mc_estimate: moments.mean,
        mc_standard_error: se,
        min_w_value: closed,
        num_samples: tasks,
        seed,
        empirical_sum: sum,
        closed_form_total: tasks as f64 * closed_direct,
        sum_standard_error: se * tasks as f64,
    })
}
