//! Data smoothing and the two spectral regularizations of the step operator
//! on the diagonal model: cut-off `A_n` (keep eigenvalues `μ ≤ 1 − 1/n`) and
//! power damping `B_n` (`μ ↦ μ − μⁿ`).
//!
//! All norms of mode vectors here are plain Euclidean norms of the
//! coefficients.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmf::OperatorAudit;
use crate::spectral::{ModeVector, SpectralModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cutoff,
    Power,
}

/// Source-condition function `G(λ) = (1 − λ)^{−p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceFunction {
    pub p: f64,
}

impl Default for SourceFunction {
    fn default() -> Self {
        Self { p: 1.0 }
    }
}

impl SourceFunction {
    /// `G` evaluated from the gap `1 − λ`.
    pub fn from_gap(&self, gap: f64) -> f64 {
        gap.powf(-self.p)
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        self.from_gap(1.0 - lambda)
    }

    /// Continuity, monotone increase and blow-up at 1, checked on samples.
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::InvalidArgument(format!("source exponent must be positive, got {}", self.p)));
        }
        let samples: Vec<f64> = (0..1000).map(|i| self.eval(i as f64 / 1000.0)).collect();
        if samples.windows(2).any(|w| !(w[1] > w[0])) || !(self.eval(1.0 - 1e-12) > 1e6) {
            return Err(Error::InvalidArgument("source function must increase to infinity at 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub strategy: Strategy,
    pub n: u32,
    pub source: SourceFunction,
    /// Source-condition constant `M`.
    pub m: f64,
    pub epsilon: f64,
}

impl RegularizationConfig {
    pub fn new(strategy: Strategy, n: u32) -> Self {
        Self {
            strategy,
            n,
            source: SourceFunction::default(),
            m: 1.0,
            epsilon: 0.0,
        }
    }

    pub fn with_n(&self, n: u32) -> Self {
        Self { n, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("n must be at least 2, got {}", self.n)));
        }
        if !(self.epsilon >= 0.0) || !(self.m >= 0.0) {
            return Err(Error::InvalidArgument("epsilon and M must be nonnegative".into()));
        }
        self.source.validate()
    }

    /// `(μ̃, 1 − μ̃)` for one mode given `μ` and its gap `1 − μ`.
    fn factor(&self, mu: f64, gap: f64) -> (f64, f64) {
        match self.strategy {
            Strategy::Cutoff => {
                if gap >= 1.0 / self.n as f64 {
                    (mu, gap)
                } else {
                    (0.0, 1.0)
                }
            }
            Strategy::Power => {
                let mun = mu.powf(self.n as f64);
                (mu - mun, gap + mun)
            }
        }
    }
}

/// Applies `A_n` or `B_n` mode-wise.
pub fn apply_regularized(model: &SpectralModel, config: &RegularizationConfig, phi: &ModeVector) -> Result<ModeVector> {
    config.validate()?;
    check_len(model, phi)?;
    Ok(ModeVector::new(
        (0..model.modes())
            .map(|j| config.factor(model.mus[j], model.gaps[j]).0 * phi.coefficients[j])
            .collect(),
    ))
}

/// Fixed point of `φ = T_reg φ + z`: `z_j / (1 − μ̃_j)`.
pub fn regularized_fixed_point(model: &SpectralModel, config: &RegularizationConfig, z: &ModeVector) -> Result<ModeVector> {
    config.validate()?;
    check_len(model, z)?;
    Ok(ModeVector::new(
        (0..model.modes())
            .map(|j| z.coefficients[j] / config.factor(model.mus[j], model.gaps[j]).1)
            .collect(),
    ))
}

/// Fixed point of the unregularized map: `z_j / (1 − μ_j)`.
pub fn fixed_point(model: &SpectralModel, z: &ModeVector) -> Result<ModeVector> {
    check_len(model, z)?;
    Ok(ModeVector::new(
        (0..model.modes()).map(|j| z.coefficients[j] / model.gaps[j]).collect(),
    ))
}

/// `z_j = (1 − μ_j) φ̄_j`, the offset that makes `φ̄` the fixed point.
pub fn offset_for(model: &SpectralModel, phi_bar: &ModeVector) -> Result<ModeVector> {
    check_len(model, phi_bar)?;
    Ok(ModeVector::new(
        (0..model.modes()).map(|j| model.gaps[j] * phi_bar.coefficients[j]).collect(),
    ))
}

fn check_len(model: &SpectralModel, v: &ModeVector) -> Result<()> {
    if v.len() != model.modes() {
        return Err(Error::InvalidArgument(format!(
            "mode vector has {} entries, model has {}",
            v.len(),
            model.modes()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorSplit {
    pub n: u32,
    /// `‖(I − T_reg)^{−1}(T_reg − T_l) φ̄‖`.
    pub approx_term: f64,
    /// `ε ‖(I − T_reg)^{−1}‖`.
    pub noise_term: f64,
    pub total: f64,
}

pub fn error_split(model: &SpectralModel, config: &RegularizationConfig, phi_bar: &ModeVector, epsilon: f64) -> Result<ErrorSplit> {
    config.validate()?;
    check_len(model, phi_bar)?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument("epsilon must be nonnegative".into()));
    }
    let mut approx_sq = 0.0;
    let mut amplification: f64 = 1.0;
    for j in 0..model.modes() {
        let (mu, gap) = (model.mus[j], model.gaps[j]);
        let (reg, one_minus) = config.factor(mu, gap);
        // μ̃ − μ, kept accurate near μ = 1
        let diff = match config.strategy {
            Strategy::Cutoff if reg == 0.0 => -mu,
            Strategy::Cutoff => 0.0,
            Strategy::Power => -mu.powf(config.n as f64),
        };
        approx_sq += (diff * phi_bar.coefficients[j] / one_minus).powi(2);
        amplification = amplification.max(1.0 / one_minus);
    }
    let approx_term = approx_sq.sqrt();
    let noise_term = epsilon * amplification;
    Ok(ErrorSplit {
        n: config.n,
        approx_term,
        noise_term,
        total: approx_term + noise_term,
    })
}

/// `‖φ^{(n)} − φ̄‖` where `φ^{(n)}` solves the regularized equation with the
/// perturbed offset `z_eps` and `φ̄` solves the exact one.
pub fn true_error(model: &SpectralModel, config: &RegularizationConfig, phi_bar: &ModeVector, z_eps: &ModeVector) -> Result<f64> {
    let phi_n = regularized_fixed_point(model, config, z_eps)?;
    Ok(phi_n.sub(phi_bar).euclidean_norm())
}

/// Largest `μ_j` strictly below `threshold`, or 0 if none.
pub fn largest_below(model: &SpectralModel, threshold_gap: f64) -> f64 {
    (0..model.modes())
        .filter(|&j| model.gaps[j] > threshold_gap)
        .map(|j| model.mus[j])
        .fold(0.0, f64::max)
}

/// `Λ(n)`: largest eigenvalue below `1 − 1/n`.
pub fn cutoff_lambda(model: &SpectralModel, n: u32) -> f64 {
    largest_below(model, 1.0 / n as f64)
}

/// `μ(n) = n^{1/(1−n)}` and `δ(n) = 1 − μ(n)`.
pub fn mu_of_n(n: u32) -> (f64, f64) {
    let e = (n as f64).ln() / (1.0 - n as f64);
    (e.exp(), -e.exp_m1())
}

/// `Υ(n)`: largest eigenvalue below `μ(n)`.
pub fn power_upsilon(model: &SpectralModel, n: u32) -> f64 {
    largest_below(model, mu_of_n(n).1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalN {
    pub strategy: Strategy,
    pub n_opt: u32,
    pub objective: f64,
    pub curve: Vec<(u32, f64)>,
}

/// The a-priori objective minimized over `n`.
pub fn objective(
    model: &SpectralModel,
    strategy: Strategy,
    source: &SourceFunction,
    phi_bar_norm: f64,
    m: f64,
    epsilon: f64,
    n: u32,
) -> f64 {
    match strategy {
        Strategy::Cutoff => {
            let lam = cutoff_lambda(model, n);
            m / source.from_gap(1.0 / n as f64) + epsilon / (1.0 - lam)
        }
        Strategy::Power => {
            let (mu, delta) = mu_of_n(n);
            let mun = mu.powf(n as f64);
            let ups = power_upsilon(model, n);
            mun * phi_bar_norm / (delta + mun) + m / source.from_gap(delta) + epsilon / (1.0 + ups.powf(n as f64) - ups)
        }
    }
}

/// Exhaustive scan over `n = 2..=n_max`; ties go to the smaller `n`.
pub fn optimal_n(
    model: &SpectralModel,
    strategy: Strategy,
    source: &SourceFunction,
    phi_bar_norm: f64,
    m: f64,
    epsilon: f64,
    n_max: u32,
) -> Result<OptimalN> {
    if n_max < 2 {
        return Err(Error::InvalidArgument(format!("n_max must be at least 2, got {n_max}")));
    }
    if !(m > 0.0) || !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("M and epsilon must be positive".into()));
    }
    source.validate()?;
    let curve: Vec<(u32, f64)> = (2..=n_max)
        .map(|n| (n, objective(model, strategy, source, phi_bar_norm, m, epsilon, n)))
        .collect();
    let (n_opt, best) = curve
        .iter()
        .copied()
        .fold((0, f64::INFINITY), |acc, (n, v)| if v < acc.1 { (n, v) } else { acc });
    Ok(OptimalN {
        strategy,
        n_opt,
        objective: best,
        curve,
    })
}

/// `(approx, noise, total)` for each `n` in `ns`.
pub fn tradeoff_curve(model: &SpectralModel, config: &RegularizationConfig, phi_bar: &ModeVector, ns: impl IntoIterator<Item = u32>) -> Result<Vec<ErrorSplit>> {
    ns.into_iter()
        .map(|n| error_split(model, &config.with_n(n), phi_bar, config.epsilon))
        .collect()
}

/// CSV with header `n,approx_term,noise_term,total`.
pub fn write_tradeoff_csv<W: Write>(curve: &[ErrorSplit], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "approx_term", "noise_term", "total"])?;
    for p in curve {
        w.serialize((p.n, p.approx_term, p.noise_term, p.total))?;
    }
    w.flush()?;
    Ok(())
}

/// Diagonal model built from the eigenvalues of an assembled discrete operator.
pub fn model_from_audit(audit: &OperatorAudit) -> Result<SpectralModel> {
    SpectralModel::from_eigenvalues(audit.eigenvalues.clone())
}

/// Noisy samples of a trace on `[0, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyData {
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub epsilon: f64,
}

impl NoisyData {
    /// `samples + 1` equispaced points with additive noise uniform in `[−ε, ε]`.
    pub fn sample<R: Rng>(f: impl Fn(f64) -> f64, samples: usize, epsilon: f64, rng: &mut R) -> Self {
        let xs: Vec<f64> = (0..=samples)
            .map(|i| std::f64::consts::PI * i as f64 / samples as f64)
            .collect();
        let values = xs
            .iter()
            .map(|&x| f(x) + if epsilon > 0.0 { rng.gen_range(-epsilon..=epsilon) } else { 0.0 })
            .collect();
        Self { xs, values, epsilon }
    }
}

/// Cut-off frequency `⌈ε^{−1/r}⌉`.
pub fn smoothing_cutoff(epsilon: f64, r: f64) -> usize {
    epsilon.powf(-1.0 / r).ceil().max(1.0) as usize
}

/// `ε^{(r−s)/r}`, the rate of the smoothing error in the order-`s` norm.
pub fn smoothing_rate(epsilon: f64, r: f64, s: f64) -> f64 {
    epsilon.powf((r - s) / r)
}

/// Sine-series projection of the samples, truncated at
/// [`smoothing_cutoff`] (and at the number of sample intervals).
pub fn smooth_data(data: &NoisyData, r: f64, s: f64) -> Result<ModeVector> {
    if !(s > 0.0 && r > s) {
        return Err(Error::InvalidArgument(format!("need r > s > 0, got r = {r}, s = {s}")));
    }
    if !(data.epsilon > 0.0) {
        return Err(Error::InvalidArgument("noise level must be positive".into()));
    }
    if data.xs.len() != data.values.len() || data.xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples with matching values".into()));
    }
    let n = smoothing_cutoff(data.epsilon, r).min(data.xs.len() - 1);
    let coeffs = (1..=n)
        .map(|j| {
            // trapezoid rule for (2/π) ∫ f(x) sin(jx) dx
            let integrand: Vec<f64> = data
                .xs
                .iter()
                .zip(&data.values)
                .map(|(&x, &v)| v * (j as f64 * x).sin())
                .collect();
            let integral: f64 = data
                .xs
                .windows(2)
                .zip(integrand.windows(2))
                .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
                .sum();
            2.0 / std::f64::consts::PI * integral
        })
        .collect();
    Ok(ModeVector::new(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Strategy;
    use rand::Rng;
    use crate::spectral::sobolev_norm;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn dense_model(modes: usize) -> SpectralModel {
        SpectralModel::from_eigenvalues((1..=modes).map(|j| 1.0 - 1.0 / (j as f64 + 1.5)).collect()).unwrap()
    }

    #[test]
    fn power_factor_hand_value() {
        let model = SpectralModel::from_eigenvalues(vec![0.5]).unwrap();
        let out = apply_regularized(&model, &RegularizationConfig::new(Strategy::Power, 2), &ModeVector::new(vec![1.0])).unwrap();
        assert_eq!(out.coefficients[0], 0.25);
    }

    #[test]
    fn cutoff_threshold() {
        let model = SpectralModel::from_eigenvalues(vec![0.3, 0.6, 0.9]).unwrap();
        let cfg = RegularizationConfig::new(Strategy::Cutoff, 3);
        let out = apply_regularized(&model, &cfg, &ModeVector::new(vec![1.0; 3])).unwrap();
        assert_eq!(out.coefficients, vec![0.3, 0.6, 0.0]);
        let fp = regularized_fixed_point(&model, &cfg, &ModeVector::new(vec![1.0; 3])).unwrap();
        assert_eq!(fp.coefficients[2], 1.0);
        assert!((fp.coefficients[0] - 1.0 / 0.7).abs() < 1e-15);
        // large n passes every mode
        let all = apply_regularized(&model, &cfg.with_n(1000), &ModeVector::new(vec![1.0; 3])).unwrap();
        assert_eq!(all.coefficients, vec![0.3, 0.6, 0.9]);
        assert!(apply_regularized(&model, &cfg.with_n(1), &ModeVector::new(vec![1.0; 3])).is_err());
    }

    #[test]
    fn zero_offset_and_noise_free_limits() {
        let model = SpectralModel::annulus(10, 0.5).unwrap();
        let cfg = RegularizationConfig::new(Strategy::Power, 5);
        let fp = regularized_fixed_point(&model, &cfg, &ModeVector::zeros(10)).unwrap();
        assert!(fp.coefficients.iter().all(|&c| c == 0.0));
        let split = error_split(&model, &cfg, &ModeVector::unit(10, 1), 0.0).unwrap();
        assert_eq!(split.noise_term, 0.0);
        // n → ∞ recovers the true fixed point
        let z = ModeVector::new((1..=10).map(|j| 1.0 / j as f64).collect());
        let exact = fixed_point(&model, &z).unwrap();
        for strategy in [Strategy::Cutoff, Strategy::Power] {
            let far = regularized_fixed_point(&model, &RegularizationConfig::new(strategy, 1_000_000_000), &z).unwrap();
            assert!(far.sub(&exact).euclidean_norm() < 1e-3 * exact.euclidean_norm(), "{strategy:?}");
        }
    }

    #[test]
    fn cutoff_approx_term_closed_form() {
        let model = dense_model(30);
        let phi_bar = ModeVector::new((1..=30).map(|j| 1.0 / j as f64).collect());
        for n in [2, 5, 10, 20, 40] {
            let split = error_split(&model, &RegularizationConfig::new(Strategy::Cutoff, n), &phi_bar, 0.0).unwrap();
            let expected: f64 = (0..30)
                .filter(|&j| model.mus[j] > 1.0 - 1.0 / n as f64)
                .map(|j| (model.mus[j] * phi_bar.coefficients[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((split.approx_term - expected).abs() < 1e-14, "n {n}");
        }
    }

    #[test]
    fn power_difference_is_minus_power() {
        let model = SpectralModel::annulus(8, 0.3).unwrap();
        let phi = ModeVector::new((1..=8).map(|j| (j as f64).cos()).collect());
        let n = 7;
        let b = apply_regularized(&model, &RegularizationConfig::new(Strategy::Power, n), &phi).unwrap();
        for j in 0..8 {
            let tl = model.mus[j] * phi.coefficients[j];
            let expected = -model.mus[j].powi(n as i32) * phi.coefficients[j];
            assert!((b.coefficients[j] - tl - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mu_of_n_values() {
        let (mu, delta) = mu_of_n(2);
        assert!((mu - 0.5).abs() < 1e-15 && (delta - 0.5).abs() < 1e-15);
        let (mu, _) = mu_of_n(3);
        assert!((mu - 3f64.powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn lambda_and_upsilon() {
        let model = SpectralModel::from_eigenvalues(vec![0.2, 0.55, 0.7, 0.95]).unwrap();
        assert_eq!(cutoff_lambda(&model, 2), 0.2);
        assert_eq!(cutoff_lambda(&model, 4), 0.7);
        assert_eq!(cutoff_lambda(&model, 100), 0.95);
        assert_eq!(power_upsilon(&model, 2), 0.2);
        let empty = SpectralModel::from_eigenvalues(vec![0.9]).unwrap();
        assert_eq!(cutoff_lambda(&empty, 2), 0.0);
    }

    #[test]
    fn large_noise_picks_smallest_n() {
        // eigenvalues spread over (0, 1), so Λ(n) and Υ(n) grow with n
        let model = SpectralModel::from_eigenvalues((1..=200).map(|j| j as f64 / 201.0).collect()).unwrap();
        for strategy in [Strategy::Cutoff, Strategy::Power] {
            let opt = optimal_n(&model, strategy, &SourceFunction::default(), 1.0, 1e-3, 1e3, 100).unwrap();
            assert_eq!(opt.n_opt, 2, "{strategy:?}");
        }
    }

    #[test]
    fn optimal_n_is_argmin_with_small_ties() {
        let model = SpectralModel::square(64).unwrap();
        // the first square gap is about 1.4e-5, so Λ(n) leaves 0 near n = 7.2e4
        let n_max = 200_000;
        let opt = optimal_n(&model, Strategy::Cutoff, &SourceFunction::default(), 1.0, 1.0, 1e-6, n_max).unwrap();
        let min = opt.curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let first = opt.curve.iter().find(|p| p.1 == min).unwrap().0;
        assert_eq!(opt.n_opt, first);
        assert!(opt.n_opt > 2 && opt.n_opt < n_max, "{}", opt.n_opt);
        let last_before_jump = (1.0 / model.gaps[0]).floor() as u32;
        assert!(opt.n_opt.abs_diff(last_before_jump) <= 1, "{} vs {last_before_jump}", opt.n_opt);
        let at = |n: u32| opt.curve[(n - 2) as usize].1;
        assert!(at(opt.n_opt) <= at(opt.n_opt - 1) && at(opt.n_opt) <= at(opt.n_opt + 1));
        assert!(optimal_n(&model, Strategy::Cutoff, &SourceFunction::default(), 1.0, 1.0, 1e-6, 1).is_err());
    }

    #[test]
    fn source_function_checks() {
        assert!(SourceFunction { p: 1.0 }.validate().is_ok());
        assert!(SourceFunction { p: 0.0 }.validate().is_err());
        assert!((SourceFunction { p: 2.0 }.eval(0.5) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn source_condition_bookkeeping() {
        // φ̄_j = w_j / G(μ_j) with Σ w_j² = M²
        let model = dense_model(40);
        let g = SourceFunction::default();
        let w: Vec<f64> = (1..=40).map(|j| 1.0 / j as f64).collect();
        let m = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let phi_bar = ModeVector::new((0..40).map(|j| w[j] / g.from_gap(model.gaps[j])).collect());
        for n in 2..60 {
            let split = error_split(&model, &RegularizationConfig::new(Strategy::Cutoff, n), &phi_bar, 0.0).unwrap();
            assert!(split.approx_term <= m / g.from_gap(1.0 / n as f64) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn smoothing_recovers_first_mode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut first: Vec<f64> = (0..100)
            .map(|_| {
                let data = NoisyData::sample(f64::sin, 400, 0.01, &mut rng);
                smooth_data(&data, 2.0, 0.5).unwrap().coefficients[0]
            })
            .collect();
        first.sort_by(f64::total_cmp);
        let median = 0.5 * (first[49] + first[50]);
        assert!((median - 1.0).abs() < 0.05, "{median}");
        assert_eq!(smoothing_cutoff(0.01, 2.0), 10);
    }

    #[test]
    fn smoothing_of_pure_noise_is_small() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (eps, r, s) = (0.1, 2.0, 0.5);
        let data = NoisyData::sample(|_| 0.0, 400, eps, &mut rng);
        let out = smooth_data(&data, r, s).unwrap();
        let ratio = sobolev_norm(&out, s) / smoothing_rate(eps, r, s);
        assert!(ratio < 1.0, "constant {ratio}");
    }

    #[test]
    fn smoothing_argument_checks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data = NoisyData::sample(f64::sin, 10, 0.1, &mut rng);
        assert!(smooth_data(&data, 0.5, 1.0).is_err());
        let exact = NoisyData::sample(f64::sin, 10, 0.0, &mut rng);
        assert!(smooth_data(&exact, 2.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn regularized_factors_are_contractive(
            mus in prop::collection::vec(0.0f64..0.999_999, 1..30),
            n in 2u32..300,
            power in any::<bool>(),
        ) {
            let model = SpectralModel::from_eigenvalues(mus.clone()).unwrap();
            let strategy = if power { Strategy::Power } else { Strategy::Cutoff };
            let ones = ModeVector::new(vec![1.0; mus.len()]);
            let out = apply_regularized(&model, &RegularizationConfig::new(strategy, n), &ones).unwrap();
            for c in out.coefficients {
                prop_assert!((0.0..1.0).contains(&c));
            }
        }

        #[test]
        fn tradeoff_is_monotone_and_bound_holds(
            seed in 0u64..1000,
            power in any::<bool>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let modes = 24;
            let model = SpectralModel::from_eigenvalues(
                (0..modes).map(|_| rng.gen_range(0.0..0.9999)).collect()
            ).unwrap();
            let phi_bar = ModeVector::new((0..modes).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let eps = 1e-3;
            let noise: Vec<f64> = (0..modes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = eps / noise.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z = offset_for(&model, &phi_bar).unwrap();
            let z_eps = ModeVector::new(z.coefficients.iter().zip(&noise).map(|(a, b)| a + scale * b).collect());
            let strategy = if power { Strategy::Power } else { Strategy::Cutoff };
            let mut cfg = RegularizationConfig::new(strategy, 2);
            cfg.epsilon = eps;
            let curve = tradeoff_curve(&model, &cfg, &phi_bar, 2..=120).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].approx_term <= w[0].approx_term * (1.0 + 1e-12) + 1e-300);
                prop_assert!(w[1].noise_term >= w[0].noise_term * (1.0 - 1e-12));
            }
            for p in &curve {
                let actual = true_error(&model, &cfg.with_n(p.n), &phi_bar, &z_eps).unwrap();
                prop_assert!(actual <= p.total * (1.0 + 1e-10));
            }
        }
    }
}
