//! Diagonal (sine-mode) model of the iteration on the square and the annulus.
//!
//! Each model keeps, per mode `j ≥ 1`, the closed-form value `λ_j`, the
//! eigenvalue `μ_j` of the linear part of one full step, and the gap
//! `1 − μ_j` computed without cancellation. The gap is what distinguishes
//! high modes once `μ_j` rounds to 1.
//!
//! Square: `λ_j = tanh(2jπ)` and a step multiplies mode `j` by `μ_j = λ_j²`.
//! Annulus with inner radius `r0`: with `q = r0^{2j}`, the closed form
//! `λ_j = ((1 − q)/(1 + q))²` is already the per-step factor, so `μ_j = λ_j`.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_MODES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainKind {
    Square,
    Annulus { r0: f64 },
    /// Eigenvalues supplied directly, e.g. from a discrete operator audit.
    Discrete,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel {
    pub domain: DomainKind,
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    pub gaps: Vec<f64>,
}

/// `tanh(2jπ)` via `(1 − e)/(1 + e)` with `e = e^{−4jπ}`.
pub fn square_eigenvalue(j: usize) -> Result<f64> {
    check_mode(j)?;
    let e = (-4.0 * PI * j as f64).exp();
    Ok((1.0 - e) / (1.0 + e))
}

/// `((1 − r0^{2j})/(1 + r0^{2j}))²`, the factored form of the closed formula.
pub fn annulus_eigenvalue(j: usize, r0: f64) -> Result<f64> {
    check_mode(j)?;
    check_radius(r0)?;
    let q = annulus_q(j, r0);
    Ok(((1.0 - q) / (1.0 + q)).powi(2))
}

/// `1 − tanh²(2jπ) = 4e/(1 + e)²`.
pub fn square_gap(j: usize) -> Result<f64> {
    check_mode(j)?;
    let e = (-4.0 * PI * j as f64).exp();
    Ok(4.0 * e / (1.0 + e).powi(2))
}

/// `1 − λ_j = 4q/(1 + q)²`.
pub fn annulus_gap(j: usize, r0: f64) -> Result<f64> {
    check_mode(j)?;
    check_radius(r0)?;
    let q = annulus_q(j, r0);
    Ok(4.0 * q / (1.0 + q).powi(2))
}

fn annulus_q(j: usize, r0: f64) -> f64 {
    (2.0 * j as f64 * r0.ln()).exp()
}

fn check_mode(j: usize) -> Result<()> {
    if j == 0 {
        return Err(Error::InvalidArgument("mode index starts at 1".into()));
    }
    Ok(())
}

fn check_radius(r0: f64) -> Result<()> {
    if !(r0 > 0.0 && r0 < 1.0) {
        return Err(Error::InvalidArgument(format!("inner radius must lie in (0, 1), got {r0}")));
    }
    Ok(())
}

impl SpectralModel {
    pub fn square(modes: usize) -> Result<Self> {
        let lambdas = (1..=modes).map(square_eigenvalue).collect::<Result<Vec<_>>>()?;
        let gaps = (1..=modes).map(square_gap).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain: DomainKind::Square,
            mus: lambdas.iter().map(|l| l * l).collect(),
            lambdas,
            gaps,
        })
    }

    pub fn annulus(modes: usize, r0: f64) -> Result<Self> {
        check_radius(r0)?;
        let lambdas = (1..=modes)
            .map(|j| annulus_eigenvalue(j, r0))
            .collect::<Result<Vec<_>>>()?;
        let gaps = (1..=modes).map(|j| annulus_gap(j, r0)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            domain: DomainKind::Annulus { r0 },
            mus: lambdas.clone(),
            lambdas,
            gaps,
        })
    }

    /// Per-step eigenvalues given directly; each must lie in `[0, 1)`.
    pub fn from_eigenvalues(mus: Vec<f64>) -> Result<Self> {
        if let Some(bad) = mus.iter().find(|m| !(**m >= 0.0 && **m < 1.0)) {
            return Err(Error::InvalidArgument(format!("eigenvalue {bad} outside [0, 1)")));
        }
        Ok(Self {
            domain: DomainKind::Discrete,
            lambdas: mus.clone(),
            gaps: mus.iter().map(|m| 1.0 - m).collect(),
            mus,
        })
    }

    pub fn modes(&self) -> usize {
        self.mus.len()
    }

    /// CSV with header `j,lambda,mu,gap`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "lambda", "mu", "gap"])?;
        for j in 0..self.modes() {
            w.serialize((j + 1, self.lambdas[j], self.mus[j], self.gaps[j]))?;
        }
        w.flush()?;
        Ok(())
    }

    fn check_len(&self, v: &ModeVector) -> Result<()> {
        if v.len() != self.modes() {
            return Err(Error::InvalidArgument(format!(
                "mode vector has {} entries, model has {}",
                v.len(),
                self.modes()
            )));
        }
        Ok(())
    }
}

/// Modes `j` at which `a` is not strictly closer to 1 than `b`.
pub fn ordering_violations(a: &SpectralModel, b: &SpectralModel) -> Vec<usize> {
    a.gaps
        .iter()
        .zip(&b.gaps)
        .enumerate()
        .filter(|(_, (ga, gb))| ga >= gb)
        .map(|(j, _)| j + 1)
        .collect()
}

/// Sine-series coefficients `c_1, c_2, …`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeVector {
    pub coefficients: Vec<f64>,
}

impl ModeVector {
    pub fn new(coefficients: Vec<f64>) -> Self {
        Self { coefficients }
    }

    pub fn zeros(modes: usize) -> Self {
        Self::new(vec![0.0; modes])
    }

    pub fn unit(modes: usize, j: usize) -> Self {
        let mut v = Self::zeros(modes);
        v.coefficients[j - 1] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn euclidean_norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &ModeVector) -> ModeVector {
        Self::new(
            self.coefficients
                .iter()
                .zip(&other.coefficients)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// `Σ_j c_j sin(jx)`.
    pub fn evaluate(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(i, c)| c * ((i + 1) as f64 * x).sin())
            .sum()
    }
}

/// `(Σ_j (1 + j²)^s c_j²)^{1/2}`.
pub fn sobolev_norm(v: &ModeVector, s: f64) -> f64 {
    v.coefficients
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let j = (i + 1) as f64;
            (1.0 + j * j).powf(s) * c * c
        })
        .sum::<f64>()
        .sqrt()
}

/// `(μ^k, (1 − μ^k)/(1 − μ))` from the gap, accurate when `μ` is near 1.
fn power_and_sum(gap: f64, k: f64) -> (f64, f64) {
    if gap <= 0.0 {
        return (1.0, k);
    }
    let log_mu = (-gap).ln_1p();
    let pk = (k * log_mu).exp();
    let sum = if gap >= 1.0 { 1.0 } else { -(k * log_mu).exp_m1() / gap };
    (pk, sum)
}

/// `k` steps of the affine diagonal iteration:
/// `φ_j(k) = μ_j^k φ_{0,j} + (1 − μ_j^k)/(1 − μ_j) z_j`.
pub fn spectral_iterate(model: &SpectralModel, phi0: &ModeVector, z: &ModeVector, k: u64) -> Result<ModeVector> {
    model.check_len(phi0)?;
    model.check_len(z)?;
    let k = k as f64;
    Ok(ModeVector::new(
        (0..model.modes())
            .map(|j| {
                if k == 0.0 {
                    return phi0.coefficients[j];
                }
                let (pk, sum) = power_and_sum(model.gaps[j], k);
                pk * phi0.coefficients[j] + sum * z.coefficients[j]
            })
            .collect(),
    ))
}

/// Source-type weights for the two-term bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundWeights {
    /// Positive, nondecreasing `c_j`, one per mode.
    pub c: Vec<f64>,
    /// Split mode `J` (1-based).
    pub split: usize,
}

/// Bound on `‖ε_k‖²` in the `j^{−1}`-weighted norm.
///
/// Without weights: `Σ_j j^{−1} (μ_j^k ε_{0,j})²`, exact for the diagonal
/// model. With weights: `μ_J^{2k} (c_J/c_1)² ‖ε_0‖² + M/c_J²` where
/// `M = Σ_j j^{−1} c_j² ε_{0,j}²`.
pub fn error_bound(model: &SpectralModel, eps0: &ModeVector, k: u64, weights: Option<&BoundWeights>) -> Result<f64> {
    model.check_len(eps0)?;
    let kf = k as f64;
    let weighted = |j: usize, c: f64| c * c / (j + 1) as f64;
    match weights {
        None => Ok((0..model.modes())
            .map(|j| {
                let (pk, _) = power_and_sum(model.gaps[j], kf);
                weighted(j, pk * eps0.coefficients[j])
            })
            .sum()),
        Some(w) => {
            if w.c.len() != model.modes() {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {} modes",
                    w.c.len(),
                    model.modes()
                )));
            }
            if w.c.iter().any(|c| !(*c > 0.0)) || w.c.windows(2).any(|p| p[1] < p[0]) {
                return Err(Error::InvalidArgument("weights must be positive and nondecreasing".into()));
            }
            if w.split == 0 || w.split > model.modes() {
                return Err(Error::InvalidArgument(format!("split mode {} out of range", w.split)));
            }
            let jj = w.split - 1;
            let norm0: f64 = (0..model.modes()).map(|j| weighted(j, eps0.coefficients[j])).sum();
            let m: f64 = (0..model.modes())
                .map(|j| weighted(j, w.c[j] * eps0.coefficients[j]))
                .sum();
            let (pk, _) = power_and_sum(model.gaps[jj], 2.0 * kf);
            Ok(pk * (w.c[jj] / w.c[0]).powi(2) * norm0 + m / (w.c[jj] * w.c[jj]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayPoint {
    pub k: u64,
    /// Bound on the squared weighted error norm.
    pub bound: f64,
    /// Squared `H^{−1/2}` norm of the actual diagonal-model error.
    pub actual: f64,
}

pub fn decay_curve(model: &SpectralModel, eps0: &ModeVector, ks: &[u64]) -> Result<Vec<DecayPoint>> {
    let zero = ModeVector::zeros(model.modes());
    ks.iter()
        .map(|&k| {
            let e = spectral_iterate(model, eps0, &zero, k)?;
            Ok(DecayPoint {
                k,
                bound: error_bound(model, eps0, k, None)?,
                actual: sobolev_norm(&e, -0.5).powi(2),
            })
        })
        .collect()
}

/// First-eigenvalue powers at `k` steps: `λ₁^{2k}` and `λ₁^{4k}`, the latter
/// being the squared-norm decay of a pure mode-1 error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FirstModePowers {
    pub k: u64,
    pub lambda1: f64,
    pub lambda1_pow_2k: f64,
    pub lambda1_pow_4k: f64,
}

pub fn square_first_mode_powers(k: u64) -> FirstModePowers {
    let e = (-4.0 * PI).exp();
    // ln λ₁ = ln(1 − e) − ln(1 + e)
    let log_l = (-e).ln_1p() - e.ln_1p();
    FirstModePowers {
        k,
        lambda1: (1.0 - e) / (1.0 + e),
        lambda1_pow_2k: (2.0 * k as f64 * log_l).exp(),
        lambda1_pow_4k: (4.0 * k as f64 * log_l).exp(),
    }
}

/// `u_k(x, y) = (πk)^{−2} sinh(πky) sin(πkx)`, harmonic with zero trace at
/// `y = 0` and normal derivative [`hadamard_datum`] there.
pub fn hadamard_solution(k: u32, x: f64, y: f64) -> f64 {
    let a = PI * k as f64;
    (a * y).sinh() * (a * x).sin() / (a * a)
}

/// `φ_k(x) = (πk)^{−1} sin(πkx)`.
pub fn hadamard_datum(k: u32, x: f64) -> f64 {
    let a = PI * k as f64;
    (a * x).sin() / a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HadamardRow {
    pub k: u32,
    pub data_sup: f64,
    pub solution_sup: f64,
    pub ratio: f64,
    pub data_sup_exact: f64,
    pub solution_sup_exact: f64,
}

/// Grid size for the sup-norm samples; divisible by `2k` for `k ≤ 10`, so the
/// maximizers `x = (2m+1)/(2k)` are grid points.
pub const HADAMARD_SAMPLES: usize = 5040;

/// Sampled `sup_x |φ_k|` and `sup_x |u_k(x, 1/2)|` next to their closed forms.
pub fn hadamard_table(ks: &[u32]) -> Result<Vec<HadamardRow>> {
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::InvalidArgument("frequency starts at 1".into()));
            }
            let n = HADAMARD_SAMPLES;
            let sup = |f: &dyn Fn(f64) -> f64| (0..=n).map(|i| f(i as f64 / n as f64).abs()).fold(0.0, f64::max);
            let data_sup = sup(&|x| hadamard_datum(k, x));
            let solution_sup = sup(&|x| hadamard_solution(k, x, 0.5));
            let a = PI * k as f64;
            Ok(HadamardRow {
                k,
                data_sup,
                solution_sup,
                ratio: solution_sup / data_sup,
                data_sup_exact: 1.0 / a,
                solution_sup_exact: (a / 2.0).sinh() / (a * a),
            })
        })
        .collect()
}
