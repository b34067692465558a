//! Unconditional mean/variance models over Gaussian noise: closed-form
//! propagation for the joint fit and the second-order delta method, each in
//! an as-printed (`Paper`) and an analytically exact (`Exact`) mode.

use crate::error::{Error, Result};
use crate::glm::{Link, VarianceFunction};
use crate::jmmd::JointFit;
use crate::probstats::GaussianNoise;
use crate::terms::{LinearPredictorSpec, NoiseMonomial, Term};
use ndarray::Array1;
use serde::Serialize;

/// E(e^{a1 Z}) for Z ~ N(mu, sigma2).
pub fn exp_moment_linear(alpha1: f64, mu: f64, sigma2: f64) -> f64 {
    (alpha1 * mu + alpha1 * alpha1 * sigma2 / 2.0).exp()
}

/// E(e^{a1 Z + a2 Z^2}) for Z ~ N(mu, sigma2); diverges unless
/// k2 = 1 - 2 sigma2 a2 > 0.
pub fn exp_moment_quadratic(alpha1: f64, alpha2: f64, mu: f64, sigma2: f64) -> Result<f64> {
    let k2 = 1.0 - 2.0 * sigma2 * alpha2;
    if k2 <= 0.0 {
        return Err(Error::InfeasibleMoment { k2 });
    }
    if sigma2 == 0.0 {
        return Ok((alpha1 * mu + alpha2 * mu * mu).exp());
    }
    let k1 = alpha1 * sigma2 + mu;
    Ok((1.0 / k2.sqrt()) * ((k1 * k1 / k2 - mu * mu) / (2.0 * sigma2)).exp())
}

/// Var(a1 Z + a2 Z^2) for Z ~ N(mu, sigma2).
pub fn var_quadratic(alpha1: f64, alpha2: f64, mu: f64, sigma2: f64) -> f64 {
    sigma2
        * (alpha1 * alpha1
            + 2.0 * alpha2 * alpha2 * (2.0 * mu * mu + sigma2)
            + 4.0 * alpha1 * alpha2 * mu)
}

/// Which flavor of the closed forms to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EvalMode {
    /// Reproduce the as-printed formulas (m5 restricted to the x3 z1 carrier
    /// for the joint model; inflated curvature terms for the delta method).
    Paper,
    /// Analytically exact propagation (default).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MomentMethod {
    Jmmd,
    Delta,
}

/// Coefficient functions of the blend grouped by noise monomial, restricted
/// to {1, z1, z2, z1^2}.
#[derive(Debug, Clone)]
struct QuadInZ1 {
    spec: LinearPredictorSpec,
    coeffs: Array1<f64>,
}

#[derive(Debug, Clone, Copy)]
struct QuadCoeffs {
    c0: f64,
    c_z1: f64,
    c_z2: f64,
    c_z1sq: f64,
}

impl QuadInZ1 {
    fn new(spec: LinearPredictorSpec, coeffs: Array1<f64>) -> Result<Self> {
        let allowed = [
            NoiseMonomial::ONE,
            NoiseMonomial::Z1,
            NoiseMonomial::Z2,
            NoiseMonomial::Z1_SQ,
        ];
        for m in spec.noise_monomials() {
            if !allowed.contains(&m) {
                return Err(Error::UnsupportedForm(format!(
                    "closed-form propagation supports noise monomials 1, z1, z2, z1^2 only \
                     (found z1^{} z2^{})",
                    m.e1, m.e2
                )));
            }
        }
        Ok(Self { spec, coeffs })
    }

    fn at(&self, x: &[f64; 3]) -> Result<QuadCoeffs> {
        let map = self.spec.noise_polynomial_coefficients(&self.coeffs, x)?;
        let get = |m: NoiseMonomial| map.get(&m).copied().unwrap_or(0.0);
        Ok(QuadCoeffs {
            c0: get(NoiseMonomial::ONE),
            c_z1: get(NoiseMonomial::Z1),
            c_z2: get(NoiseMonomial::Z2),
            c_z1sq: get(NoiseMonomial::Z1_SQ),
        })
    }

    /// The z1 coefficient restricted to one mixture carrier (used by the
    /// as-printed joint-model variance, which keeps only the x3 z1 term).
    fn z1_coefficient_of(&self, carrier: &Term, x: &[f64; 3]) -> f64 {
        match self.spec.position(carrier) {
            Some(j) => self.coeffs[j] * carrier.mixture.eval(x),
            None => 0.0,
        }
    }
}

/// Unconditional moment functions of the blend under a Gaussian noise law.
#[derive(Debug, Clone)]
pub struct MomentModel {
    method: MomentMethod,
    mode: EvalMode,
    noise: GaussianNoise,
    mean_poly: QuadInZ1,
    /// Joint model: log conditional-variance polynomial.
    logvar_poly: Option<QuadInZ1>,
    /// Delta method: residual variance added to Var(Y).
    residual_sigma2: f64,
}

impl MomentModel {
    pub fn method(&self) -> MomentMethod {
        self.method
    }

    pub fn mode(&self) -> EvalMode {
        self.mode
    }

    pub fn noise(&self) -> &GaussianNoise {
        &self.noise
    }

    /// E(Y) at a blend.
    pub fn mean_of(&self, x: &[f64; 3]) -> Result<f64> {
        let a = self.mean_poly.at(x)?;
        let [mu1, mu2] = self.noise.mu;
        let [s1, _s2] = self.noise.sigma2;
        let ez1sq = match (self.method, self.mode) {
            // as-printed delta mean carries 2 c4 sigma1^2 instead of c4 sigma1^2
            (MomentMethod::Delta, EvalMode::Paper) => mu1 * mu1 + 2.0 * s1,
            _ => mu1 * mu1 + s1,
        };
        Ok(a.c0 + a.c_z1 * mu1 + a.c_z2 * mu2 + a.c_z1sq * ez1sq)
    }

    /// Var(Y) at a blend.
    pub fn var_of(&self, x: &[f64; 3]) -> Result<f64> {
        let a = self.mean_poly.at(x)?;
        let [mu1, mu2] = self.noise.mu;
        let [s1, s2] = self.noise.sigma2;
        match self.method {
            MomentMethod::Jmmd => {
                let b = self
                    .logvar_poly
                    .as_ref()
                    .expect("joint moment model carries a log-variance polynomial")
                    .at(x)?;
                // E(Var(Y|Z)): factorized over independent Z1, Z2
                let e_cond_var = b.c0.exp()
                    * exp_moment_linear(b.c_z2, mu2, s2)
                    * exp_moment_quadratic(b.c_z1, b.c_z1sq, mu1, s1)?;
                // Var(E(Y|Z)) = Var(a1 Z1 + a3 Z1^2) + a2^2 sigma2^2
                let a1 = match self.mode {
                    EvalMode::Exact => a.c_z1,
                    EvalMode::Paper => {
                        let carrier = Term::new(
                            crate::terms::MixtureFactor::Linear(3),
                            NoiseMonomial::Z1,
                        );
                        self.mean_poly.z1_coefficient_of(&carrier, x)
                    }
                };
                let var_cond_mean =
                    var_quadratic(a1, a.c_z1sq, mu1, s1) + a.c_z2 * a.c_z2 * s2;
                Ok(e_cond_var + var_cond_mean)
            }
            MomentMethod::Delta => {
                let c2 = a.c_z1;
                let c3 = a.c_z2;
                let c4 = a.c_z1sq;
                let slope = c2 + 2.0 * c4 * mu1;
                let curvature = match self.mode {
                    // as-printed: 8 c4^2 sigma1^4
                    EvalMode::Paper => 8.0 * c4 * c4 * s1 * s1,
                    // exact for a quadratic predictor: 2 c4^2 sigma1^4
                    EvalMode::Exact => 2.0 * c4 * c4 * s1 * s1,
                };
                Ok(slope * slope * s1 + curvature + c3 * c3 * s2 + self.residual_sigma2)
            }
        }
    }

    /// Margin of the joint model's moment-existence constraint,
    /// k2 = 1 - 2 sigma1^2 * a3_logvar(x); always 1 for the delta method.
    pub fn k2_margin(&self, x: &[f64; 3]) -> Result<f64> {
        match &self.logvar_poly {
            Some(poly) => {
                let b = poly.at(x)?;
                Ok(1.0 - 2.0 * self.noise.sigma2[0] * b.c_z1sq)
            }
            None => Ok(1.0),
        }
    }

    /// Whether the closed-form variance exists at the blend.
    pub fn feasible(&self, x: &[f64; 3]) -> bool {
        matches!(self.k2_margin(x), Ok(margin) if margin > 0.0)
    }
}

/// Closed-form moment model from a converged joint fit. Requires an identity
/// mean link, V(mu) = 1, and noise monomials within {1, z1, z2, z1^2}.
pub fn jmmd_moment_model(
    fit: &JointFit,
    noise: &GaussianNoise,
    mode: EvalMode,
) -> Result<MomentModel> {
    if fit.spec.mean_link != Link::Identity || fit.spec.mean_variance != VarianceFunction::Constant
    {
        return Err(Error::UnsupportedForm(
            "closed-form propagation needs the Gaussian mean family (identity link, V = 1)"
                .into(),
        ));
    }
    let mean_poly = QuadInZ1::new(fit.spec.mean.clone(), fit.mean_fit.beta.clone())?;
    let logvar_poly = QuadInZ1::new(fit.spec.dispersion.clone(), fit.dispersion_fit.beta.clone())?;
    Ok(MomentModel {
        method: MomentMethod::Jmmd,
        mode,
        noise: *noise,
        mean_poly,
        logvar_poly: Some(logvar_poly),
        residual_sigma2: 0.0,
    })
}

/// Delta-method moment model from a homoscedastic mean model's coefficients
/// and residual variance.
pub fn delta_moment_model(
    mean_spec: &LinearPredictorSpec,
    coeffs: &Array1<f64>,
    sigma2_resid: f64,
    noise: &GaussianNoise,
    mode: EvalMode,
) -> Result<MomentModel> {
    if sigma2_resid < 0.0 {
        return Err(Error::Domain(format!(
            "residual variance must be nonnegative, got {sigma2_resid}"
        )));
    }
    let mean_poly = QuadInZ1::new(mean_spec.clone(), coeffs.clone())?;
    Ok(MomentModel {
        method: MomentMethod::Delta,
        mode,
        noise: *noise,
        mean_poly,
        logvar_poly: None,
        residual_sigma2: sigma2_resid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ExperimentDataset;
    use crate::glm::ols_fit;
    use crate::jmmd::{fit_joint, JointModelSpec};
    use crate::probstats::{mc_moments, SeededStream};
    use crate::terms::presets;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    proptest! {
        /// Setting the quadratic coefficient to zero reduces the
        /// quadratic-exponential moment to the linear one.
        #[test]
        fn quadratic_moment_reduces_to_linear(
            a1 in -2.0f64..2.0,
            mu in -2.0f64..2.0,
            s2 in 0.0f64..2.0,
        ) {
            let q = exp_moment_quadratic(a1, 0.0, mu, s2).unwrap();
            let l = exp_moment_linear(a1, mu, s2);
            prop_assert!((q - l).abs() <= 1e-12 * l.max(1e-300));
        }
    }

    #[test]
    fn exp_moment_linear_reference() {
        assert_relative_eq!(exp_moment_linear(0.0, 1.7, 0.9), 1.0);
        assert_relative_eq!(exp_moment_linear(1.0, 0.0, 1.0), 0.5f64.exp(), max_relative = 1e-12);
        assert_relative_eq!(exp_moment_linear(2.0, 1.0, 0.25), 2.5f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn exp_moment_quadratic_reference() {
        // alpha2 = 0 reduces to the linear moment
        for (a1, mu, s2) in [(0.7, 0.3, 0.8), (-1.2, 1.5, 0.1), (0.0, -0.4, 2.0)] {
            assert_relative_eq!(
                exp_moment_quadratic(a1, 0.0, mu, s2).unwrap(),
                exp_moment_linear(a1, mu, s2),
                max_relative = 1e-12
            );
        }
        assert_relative_eq!(
            exp_moment_quadratic(0.0, 0.25, 0.0, 1.0).unwrap(),
            1.0 / 0.5f64.sqrt(),
            max_relative = 1e-12
        );
        match exp_moment_quadratic(0.0, 0.5, 0.0, 1.0) {
            Err(Error::InfeasibleMoment { k2 }) => assert_relative_eq!(k2, 0.0),
            other => panic!("expected infeasible moment, got {other:?}"),
        }
    }

    #[test]
    fn var_quadratic_reference() {
        assert_relative_eq!(var_quadratic(1.0, 0.0, 0.7, 2.3), 2.3);
        assert_relative_eq!(var_quadratic(0.0, 1.0, 0.0, 1.0), 2.0);
        assert_relative_eq!(var_quadratic(1.0, 1.0, 1.0, 1.0), 11.0);
    }

    #[test]
    fn moments_match_monte_carlo_oracle() {
        let noise = GaussianNoise::new([0.2, -0.3], [0.35, 0.5]).unwrap();
        let mut s = SeededStream::new(2024);
        let est = mc_moments(
            |z1, _| (0.4 * z1).exp(),
            &noise,
            1_000_000,
            &mut s,
        )
        .unwrap();
        let exact = exp_moment_linear(0.4, 0.2, 0.35);
        assert!((est.mean - exact).abs() < 3.0 * est.se_mean);

        let mut s = SeededStream::new(2025);
        let est = mc_moments(
            |z1, _| (0.3 * z1 + 0.2 * z1 * z1).exp(),
            &noise,
            1_000_000,
            &mut s,
        )
        .unwrap();
        let exact = exp_moment_quadratic(0.3, 0.2, 0.2, 0.35).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.se_mean);

        let mut s = SeededStream::new(2026);
        let est = mc_moments(|z1, _| 1.1 * z1 + 0.6 * z1 * z1, &noise, 1_000_000, &mut s).unwrap();
        let exact = var_quadratic(1.1, 0.6, 0.2, 0.35);
        let se_var = est.var * (2.0 / 1_000_000f64).sqrt() * 3.0;
        assert!((est.var - exact).abs() < 3.0 * se_var.max(1e-3));
    }

    fn jm2_fit(data: &ExperimentDataset) -> crate::jmmd::JointFit {
        let spec = JointModelSpec::gaussian(presets::mean_model_18(), presets::dispersion_model_16());
        fit_joint(&spec, data).unwrap()
    }

    #[test]
    fn degenerate_noise_recovers_conditional_moments() {
        let data = ExperimentDataset::bread_corpus();
        let fit = jm2_fit(&data);
        let noise = GaussianNoise::new([0.5, -0.25], [0.0, 0.0]).unwrap();
        let model = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
        let x = [0.4, 0.35, 0.25];
        // conditional mean at z = mu
        let a = fit
            .spec
            .mean
            .noise_polynomial_coefficients(&fit.mean_fit.beta, &x)
            .unwrap();
        let eta: f64 = a
            .iter()
            .map(|(m, c)| c * m.eval(&[0.5, -0.25]))
            .sum();
        assert_relative_eq!(model.mean_of(&x).unwrap(), eta, max_relative = 1e-12);
        // conditional variance at z = mu
        let b = fit
            .spec
            .dispersion
            .noise_polynomial_coefficients(&fit.dispersion_fit.beta, &x)
            .unwrap();
        let xi: f64 = b
            .iter()
            .map(|(m, c)| c * m.eval(&[0.5, -0.25]))
            .sum();
        assert_relative_eq!(model.var_of(&x).unwrap(), xi.exp(), max_relative = 1e-10);
    }

    #[test]
    fn jmmd_model_matches_monte_carlo_on_corpus_fit() {
        let data = ExperimentDataset::bread_corpus();
        let fit = jm2_fit(&data);
        let noise = GaussianNoise::new([0.0, -0.5], [0.0625, 0.0625]).unwrap();
        let model = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
        let x = [0.306, 0.568, 0.126];

        let a = fit
            .spec
            .mean
            .noise_polynomial_coefficients(&fit.mean_fit.beta, &x)
            .unwrap();
        let b = fit
            .spec
            .dispersion
            .noise_polynomial_coefficients(&fit.dispersion_fit.beta, &x)
            .unwrap();
        let cond_mean = move |z1: f64, z2: f64| {
            a.iter().map(|(m, c)| c * m.eval(&[z1, z2])).sum::<f64>()
        };
        let cond_var = move |z1: f64, z2: f64| {
            b.iter()
                .map(|(m, c)| c * m.eval(&[z1, z2]))
                .sum::<f64>()
                .exp()
        };
        let mean_est = mc_moments(&cond_mean, &noise, 1_000_000, &mut SeededStream::new(31)).unwrap();
        assert!((mean_est.mean - model.mean_of(&x).unwrap()).abs() < 3.0 * mean_est.se_mean);
        // Var(Y) = Var(E(Y|Z)) + E(Var(Y|Z))
        let evar_est = mc_moments(&cond_var, &noise, 1_000_000, &mut SeededStream::new(32)).unwrap();
        let total = mean_est.var + evar_est.mean;
        let tol = 3.0 * (evar_est.se_mean + mean_est.var * (2.0 / 1_000_000f64).sqrt() * 3.0);
        assert!(
            (total - model.var_of(&x).unwrap()).abs() < tol.max(0.5),
            "mc {total} vs formula {}",
            model.var_of(&x).unwrap()
        );
    }

    #[test]
    fn delta_modes_coincide_without_curvature() {
        let spec = crate::terms::LinearPredictorSpec::from_labels(&["x1", "x2", "x3", "x1:z1", "x2:z2"]).unwrap();
        let coeffs = Array1::from(vec![400.0, 450.0, 500.0, 20.0, 30.0]);
        let noise = GaussianNoise::new([0.3, -0.2], [0.04, 0.09]).unwrap();
        let x = [0.5, 0.3, 0.2];
        let paper = delta_moment_model(&spec, &coeffs, 58.36, &noise, EvalMode::Paper).unwrap();
        let exact = delta_moment_model(&spec, &coeffs, 58.36, &noise, EvalMode::Exact).unwrap();
        assert_relative_eq!(
            paper.mean_of(&x).unwrap(),
            exact.mean_of(&x).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            paper.var_of(&x).unwrap(),
            exact.var_of(&x).unwrap(),
            max_relative = 1e-12
        );
        // c4 = 0 closed form
        let c2 = 20.0 * 0.5;
        let c3 = 30.0 * 0.3;
        assert_relative_eq!(
            exact.var_of(&x).unwrap(),
            c2 * c2 * 0.04 + c3 * c3 * 0.09 + 58.36,
            max_relative = 1e-12
        );
    }

    #[test]
    fn delta_exact_matches_monte_carlo_and_paper_differs_with_curvature() {
        let data = ExperimentDataset::bread_corpus();
        let spec = presets::mean_model_18();
        let ols = ols_fit(&spec, &data).unwrap();
        let noise = GaussianNoise::new([0.5, 0.5], [0.0625, 0.0625]).unwrap();
        let x = [0.25, 0.423, 0.327];
        let exact = delta_moment_model(&spec, &ols.beta, 58.36, &noise, EvalMode::Exact).unwrap();
        let paper = delta_moment_model(&spec, &ols.beta, 58.36, &noise, EvalMode::Paper).unwrap();

        let poly = spec.noise_polynomial_coefficients(&ols.beta, &x).unwrap();
        let poly_for_eta = poly.clone();
        let eta = move |z1: f64, z2: f64| {
            poly_for_eta
                .iter()
                .map(|(m, c)| c * m.eval(&[z1, z2]))
                .sum::<f64>()
        };
        let est = mc_moments(&eta, &noise, 1_000_000, &mut SeededStream::new(77)).unwrap();
        assert!((est.mean - exact.mean_of(&x).unwrap()).abs() < 3.0 * est.se_mean);
        let var_exact = est.var + 58.36;
        let se_var = est.var * (2.0 / 1_000_000f64).sqrt();
        assert!(
            (var_exact - exact.var_of(&x).unwrap()).abs() < 4.0 * se_var.max(0.05),
            "mc {var_exact} vs exact {}",
            exact.var_of(&x).unwrap()
        );
        // the as-printed mode differs where c4 sigma1^2 is material
        let c4 = poly
            .get(&NoiseMonomial::Z1_SQ)
            .copied()
            .unwrap_or(0.0);
        assert!(c4.abs() > 1.0);
        assert!(
            (paper.var_of(&x).unwrap() - exact.var_of(&x).unwrap()).abs() > 1e-3
                || (paper.mean_of(&x).unwrap() - exact.mean_of(&x).unwrap()).abs() > 1e-3
        );
    }

    #[test]
    fn feasibility_is_monotone_in_sigma1() {
        let data = ExperimentDataset::bread_corpus();
        let fit = jm2_fit(&data);
        // k2 flips sign near sigma1^2 ~ 0.55 at this blend; scanning from
        // large to small variance, feasibility must switch on exactly once
        let x = [0.25, 0.541, 0.209];
        let mut seen_feasible = false;
        let mut seen_infeasible_after_feasible = false;
        for s1 in [0.65, 0.5625, 0.4, 0.25, 0.1, 0.0625, 0.01] {
            let noise = GaussianNoise::new([0.0, 0.0], [s1, 0.0625]).unwrap();
            let model = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
            let f = model.feasible(&x);
            if seen_feasible && !f {
                seen_infeasible_after_feasible = true;
            }
            if f {
                seen_feasible = true;
            }
        }
        assert!(seen_feasible, "never feasible even at tiny sigma1^2");
        assert!(
            !seen_infeasible_after_feasible,
            "feasibility not monotone in sigma1^2"
        );
    }

    #[test]
    fn variance_nonnegative_across_feasible_sweep() {
        let data = ExperimentDataset::bread_corpus();
        let fit = jm2_fit(&data);
        let spec = presets::mean_model_18();
        let ols = ols_fit(&spec, &data).unwrap();
        let noise = GaussianNoise::new([0.25, -0.25], [0.1, 0.1]).unwrap();
        let jm = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
        let dm = delta_moment_model(&spec, &ols.beta, 58.36, &noise, EvalMode::Exact).unwrap();
        let mut s = SeededStream::new(4041);
        let mut checked = 0;
        while checked < 10_000 {
            let a = s.uniform();
            let b = s.uniform();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let x = [lo, hi - lo, 1.0 - hi];
            if jm.feasible(&x) {
                assert!(jm.var_of(&x).unwrap() >= 0.0, "joint var < 0 at {x:?}");
            }
            assert!(dm.var_of(&x).unwrap() >= 0.0, "delta var < 0 at {x:?}");
            checked += 1;
        }
    }

    #[test]
    fn unsupported_monomials_are_rejected() {
        let spec = crate::terms::LinearPredictorSpec::from_labels(&["x1", "x1:z2^2"]).unwrap();
        let coeffs = Array1::from(vec![1.0, 2.0]);
        let noise = GaussianNoise::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        match delta_moment_model(&spec, &coeffs, 0.0, &noise, EvalMode::Exact) {
            Err(Error::UnsupportedForm(_)) => {}
            other => panic!("expected unsupported form, got {other:?}"),
        }
    }

    #[test]
    fn continuity_under_tiny_perturbations() {
        let data = ExperimentDataset::bread_corpus();
        let fit = jm2_fit(&data);
        let noise = GaussianNoise::new([0.0, -0.5], [0.0625, 0.0625]).unwrap();
        let model = jmmd_moment_model(&fit, &noise, EvalMode::Exact).unwrap();
        let x = [0.4, 0.35, 0.25];
        let m0 = model.mean_of(&x).unwrap();
        let v0 = model.var_of(&x).unwrap();
        let eps = 1e-8;
        let x2 = [0.4 + eps, 0.35 - eps, 0.25];
        assert!((model.mean_of(&x2).unwrap() - m0).abs() < 1e-4);
        assert!((model.var_of(&x2).unwrap() - v0).abs() < 1e-4);
    }
}
