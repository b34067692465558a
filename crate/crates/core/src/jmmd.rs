//! Alternating joint fit of mean and dispersion models, extended
//! quasi-likelihood scoring, term tests, backward selection, residual
//! diagnostics, and the simulated half-normal envelope.

use crate::dataset::ExperimentDataset;
use crate::error::{Error, Result};
use crate::glm::{
    deviance_component, irls_fit_design, GlmFit, IrlsOptions, Link, VarianceFunction,
};
use crate::linalg::weighted_least_squares;
use crate::probstats::{chisq_sf, SeededStream};
use crate::terms::{LinearPredictorSpec, Term};
use ndarray::{Array1, Array2};
use serde::Serialize;

/// Specs, tolerances, and family choices for one joint fit. The dispersion
/// model is always gamma with a log link; the mean family is configurable.
#[derive(Debug, Clone)]
pub struct JointModelSpec {
    pub mean: LinearPredictorSpec,
    pub dispersion: LinearPredictorSpec,
    pub mean_link: Link,
    pub mean_variance: VarianceFunction,
    /// Outer convergence: relative change of -2Q+_A between cycles.
    pub outer_tol: f64,
    /// Inner IRLS convergence on the squared step norm.
    pub inner_tol: f64,
    pub max_cycles: usize,
    pub max_inner_iterations: usize,
    /// Standardized deviance components are floored here before the gamma
    /// dispersion fit (a log link cannot accept a zero response).
    pub dstar_floor: f64,
}

impl JointModelSpec {
    pub fn gaussian(mean: LinearPredictorSpec, dispersion: LinearPredictorSpec) -> Self {
        Self {
            mean,
            dispersion,
            mean_link: Link::Identity,
            mean_variance: VarianceFunction::Constant,
            outer_tol: 1e-8,
            inner_tol: 1e-10,
            max_cycles: 100,
            max_inner_iterations: 1000,
            dstar_floor: 1e-10,
        }
    }
}

/// Converged joint fit. Keeps the designs and response so term tests and
/// diagnostics can run without re-ingesting data.
#[derive(Debug, Clone)]
pub struct JointFit {
    pub spec: JointModelSpec,
    pub mean_design: Array2<f64>,
    pub dispersion_design: Array2<f64>,
    pub response: Array1<f64>,
    pub mean_fit: GlmFit,
    pub dispersion_fit: GlmFit,
    /// Floored standardized deviance components feeding the dispersion model.
    pub dstar: Array1<f64>,
    pub minus2_qa: f64,
    pub cycles: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

impl JointFit {
    pub fn n(&self) -> usize {
        self.response.len()
    }

    pub fn p(&self) -> usize {
        self.spec.mean.p()
    }

    pub fn q(&self) -> usize {
        self.spec.dispersion.p()
    }

    pub fn phi(&self) -> &Array1<f64> {
        &self.dispersion_fit.fitted
    }

    /// Total gamma deviance of the dispersion model at its fitted values.
    pub fn dispersion_deviance(&self) -> f64 {
        self.dispersion_fit.deviance()
    }

    /// Linear predictor of the unit-weight (ordinary) fit of the mean spec;
    /// the comparison report's pseudo-R^2 is computed from this so it
    /// measures the mean structure independent of the dispersion weighting.
    pub fn unit_weight_eta(&self) -> Result<Array1<f64>> {
        let sol = weighted_least_squares(
            &self.mean_design,
            &Array1::ones(self.n()),
            &self.response,
        )?;
        Ok(self.mean_design.dot(&sol.beta))
    }
}

/// -2Q+_A = sum d*_i/phi_i + ln(2 pi phi_i V(y_i)).
pub fn adjusted_eql(
    y: &Array1<f64>,
    phi: &Array1<f64>,
    dstar: &Array1<f64>,
    variance: VarianceFunction,
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..y.len() {
        if phi[i].is_nan() || phi[i] <= 0.0 {
            return Err(Error::Domain(format!("phi[{i}] = {} must be positive", phi[i])));
        }
        let vy = variance.eval(y[i]);
        if vy.is_nan() || vy <= 0.0 {
            return Err(Error::Domain(format!(
                "V(y[{i}]) = {vy} must be positive in the adjusted EQL"
            )));
        }
        total += dstar[i] / phi[i] + (2.0 * std::f64::consts::PI * phi[i] * vy).ln();
    }
    Ok(total)
}

/// AICq = -2Q+_A + 2 (p + q).
pub fn aicq(minus2_qa: f64, p: usize, q: usize) -> f64 {
    minus2_qa + 2.0 * (p + q) as f64
}

/// Squared Pearson correlation between a linear predictor and the
/// link-transformed response.
pub fn pseudo_r2(eta: &Array1<f64>, y: &Array1<f64>, link: Link) -> Result<f64> {
    let n = eta.len();
    if n < 3 {
        return Err(Error::Validation("pseudo R^2 needs n >= 3".into()));
    }
    let ty = y.mapv(|v| link.eval(v));
    if ty.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("link(y) must be finite for all y".into()));
    }
    let me = eta.sum() / n as f64;
    let my = ty.sum() / n as f64;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let a = eta[i] - me;
        let b = ty[i] - my;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a series has zero variance".into(),
        ));
    }
    Ok(((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0))
}

fn compute_dstar(
    response: &Array1<f64>,
    mean_fit: &GlmFit,
    variance: VarianceFunction,
    floor: f64,
) -> Result<Array1<f64>> {
    let n = response.len();
    let mut dstar = Array1::zeros(n);
    for i in 0..n {
        if mean_fit.hat[i] >= 1.0 - 1e-12 {
            return Err(Error::DegenerateLeverage {
                index: i,
                value: mean_fit.hat[i],
            });
        }
        let d = deviance_component(response[i], mean_fit.fitted[i], variance)?;
        dstar[i] = (d / (1.0 - mean_fit.hat[i])).max(floor);
    }
    Ok(dstar)
}

/// Alternate mean IRLS (prior weights 1/phi) and gamma/log dispersion IRLS
/// (response d*, prior weights (1-h)/2) until the relative change of -2Q+_A
/// falls below `outer_tol`. Cycle 1 fits the mean with unit weights.
pub fn fit_joint(spec: &JointModelSpec, data: &ExperimentDataset) -> Result<JointFit> {
    let response = Array1::from(data.responses());
    let mean_design = spec.mean.design_matrix(data);
    let dispersion_design = spec.dispersion.design_matrix(data);
    fit_joint_designs(spec, &mean_design, &dispersion_design, &response)
}

/// `fit_joint` on prebuilt designs (used by refits and simulations).
pub fn fit_joint_designs(
    spec: &JointModelSpec,
    mean_design: &Array2<f64>,
    dispersion_design: &Array2<f64>,
    response: &Array1<f64>,
) -> Result<JointFit> {
    let n = response.len();
    let p = spec.mean.p();
    let q = spec.dispersion.p();
    if n <= p.max(q) {
        return Err(Error::Validation(format!(
            "need n > max(p, q) (n = {n}, p = {p}, q = {q})"
        )));
    }
    let inner = IrlsOptions {
        delta_tol: spec.inner_tol,
        max_iterations: spec.max_inner_iterations,
    };

    let mut phi = Array1::ones(n);
    let mut minus2_prev = 0.0;
    let mut history = Vec::new();

    for cycle in 1..=spec.max_cycles {
        let prior_mean = phi.mapv(|v| 1.0 / v);
        let mean_fit = irls_fit_design(
            mean_design,
            response,
            spec.mean_link,
            spec.mean_variance,
            &prior_mean,
            &Array1::zeros(p),
            &inner,
        )
        .map_err(|e| cycle_error(e, cycle, "mean"))?;

        let dstar = compute_dstar(response, &mean_fit, spec.mean_variance, spec.dstar_floor)?;
        let prior_disp = mean_fit.hat.mapv(|h| (1.0 - h) / 2.0);
        let dispersion_fit = irls_fit_design(
            dispersion_design,
            &dstar,
            Link::Log,
            VarianceFunction::Squared,
            &prior_disp,
            &Array1::zeros(q),
            &inner,
        )
        .map_err(|e| cycle_error(e, cycle, "dispersion"))?;

        phi = dispersion_fit.fitted.clone();
        let minus2 = adjusted_eql(response, &phi, &dstar, spec.mean_variance)?;
        history.push(minus2);

        if (minus2 - minus2_prev).abs() < spec.outer_tol * minus2.abs() {
            return Ok(JointFit {
                spec: spec.clone(),
                mean_design: mean_design.clone(),
                dispersion_design: dispersion_design.clone(),
                response: response.clone(),
                mean_fit,
                dispersion_fit,
                dstar,
                minus2_qa: minus2,
                cycles: cycle,
                converged: true,
                history,
            });
        }
        minus2_prev = minus2;
    }

    let last = history.last().copied().unwrap_or(f64::NAN);
    let prev = history.iter().rev().nth(1).copied().unwrap_or(f64::NAN);
    Err(Error::NonConvergence {
        what: format!(
            "joint fit (history tail {prev:.6} -> {last:.6})"
        ),
        iterations: spec.max_cycles,
        last_change: (last - prev).abs(),
    })
}

fn cycle_error(e: Error, cycle: usize, which: &str) -> Error {
    match e {
        Error::NonConvergence {
            what,
            iterations,
            last_change,
        } => Error::NonConvergence {
            what: format!("cycle {cycle} {which} {what}"),
            iterations,
            last_change,
        },
        other => other,
    }
}

/// Result of a single-term test.
#[derive(Debug, Clone, Serialize)]
pub struct TermTest {
    pub term: String,
    /// -2Q+_Ax for mean terms, D^d_x for dispersion terms.
    pub reduced_stat: f64,
    pub chisq: f64,
    pub p_value: f64,
}

/// EQL test for one mean term: the term's contribution is removed from the
/// fitted mean predictor (coefficient zeroed, dispersion fit and leverages
/// held fixed) and the adjusted EQL re-evaluated; the increase is referred
/// to chi-square with one degree of freedom.
pub fn eql_lrt_mean_term(fit: &JointFit, term: &Term) -> Result<TermTest> {
    let j = fit
        .spec
        .mean
        .position(term)
        .ok_or_else(|| Error::Validation(format!("term {term} not in the mean model")))?;
    let n = fit.n();
    let mut dstar_x = Array1::zeros(n);
    for i in 0..n {
        let mu_x = fit.mean_fit.fitted[i] - fit.mean_fit.beta[j] * fit.mean_design[[i, j]];
        let d = deviance_component(fit.response[i], mu_x, fit.spec.mean_variance)?;
        dstar_x[i] = (d / (1.0 - fit.mean_fit.hat[i])).max(fit.spec.dstar_floor);
    }
    let reduced = adjusted_eql(&fit.response, fit.phi(), &dstar_x, fit.spec.mean_variance)?;
    let chisq = reduced - fit.minus2_qa;
    Ok(TermTest {
        term: term.label(),
        reduced_stat: reduced,
        chisq,
        p_value: chisq_sf(chisq.max(0.0), 1)?,
    })
}

/// Deviance test for one dispersion term: the term's contribution is removed
/// from the fitted log-dispersion predictor (coefficient zeroed, mean fit
/// held fixed) and the gamma deviance re-evaluated against the same
/// standardized components.
pub fn deviance_test_dispersion_term(fit: &JointFit, term: &Term) -> Result<TermTest> {
    let j = fit
        .spec
        .dispersion
        .position(term)
        .ok_or_else(|| Error::Validation(format!("term {term} not in the dispersion model")))?;
    let n = fit.n();
    let mut reduced = 0.0;
    for i in 0..n {
        let xi_x = fit.dispersion_fit.eta[i]
            - fit.dispersion_fit.beta[j] * fit.dispersion_design[[i, j]];
        let phi_x = xi_x.exp();
        reduced += deviance_component(fit.dstar[i], phi_x, VarianceFunction::Squared)?;
    }
    let chisq = reduced - fit.dispersion_deviance();
    Ok(TermTest {
        term: term.label(),
        reduced_stat: reduced,
        chisq,
        p_value: chisq_sf(chisq.max(0.0), 1)?,
    })
}

/// Model-comparison summary for one joint fit.
#[derive(Debug, Clone, Serialize)]
pub struct ModelComparison {
    pub p: usize,
    pub q: usize,
    pub minus2_qa: f64,
    pub aicq: f64,
    pub pseudo_r2: f64,
}

impl ModelComparison {
    pub fn for_fit(fit: &JointFit) -> Result<Self> {
        let eta = fit.unit_weight_eta()?;
        Ok(Self {
            p: fit.p(),
            q: fit.q(),
            minus2_qa: fit.minus2_qa,
            aicq: aicq(fit.minus2_qa, fit.p(), fit.q()),
            pseudo_r2: pseudo_r2(&eta, &fit.response, fit.spec.mean_link)?,
        })
    }
}

/// One row of a backward-selection trace.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionStep {
    pub action: String,
    pub mean_p: usize,
    pub dispersion_q: usize,
    pub minus2_qa: f64,
    pub aicq: f64,
    pub pseudo_r2: f64,
}

/// Alternating backward elimination: in each round the least significant
/// removable dispersion term (deviance test), then mean term (EQL test),
/// with p-value above `alpha` is tentatively removed and the joint model
/// refit; the removal is kept only when the refit converges and strictly
/// improves AICq. Ties on p-value go to the term latest in spec order.
pub fn backward_select(
    start: &JointModelSpec,
    data: &ExperimentDataset,
    alpha: f64,
) -> Result<(JointFit, Vec<SelectionStep>)> {
    let mut current = fit_joint(start, data)?;
    let mut trace = vec![step_row("start", &current)?];

    loop {
        let candidate = pick_candidate(&current, alpha)?;
        let Some((which, label, p_value)) = candidate else {
            break; // all terms significant
        };
        let mut spec = current.spec.clone();
        let action;
        match which {
            Model::Dispersion => {
                spec.dispersion = spec.dispersion.without_label(&label)?;
                action = format!("drop dispersion {label} (p = {p_value:.4})");
            }
            Model::Mean => {
                spec.mean = spec.mean.without_label(&label)?;
                action = format!("drop mean {label} (p = {p_value:.4})");
            }
        }
        match fit_joint(&spec, data) {
            Ok(fit) if aicq(fit.minus2_qa, fit.p(), fit.q()) < aicq(current.minus2_qa, current.p(), current.q()) => {
                trace.push(step_row(&action, &fit)?);
                current = fit;
            }
            Ok(fit) => {
                trace.push(SelectionStep {
                    action: format!("{action}: rejected, AICq would worsen"),
                    mean_p: fit.p(),
                    dispersion_q: fit.q(),
                    minus2_qa: fit.minus2_qa,
                    aicq: aicq(fit.minus2_qa, fit.p(), fit.q()),
                    pseudo_r2: f64::NAN,
                });
                break;
            }
            Err(e) => {
                trace.push(SelectionStep {
                    action: format!("{action}: rejected, refit failed ({e})"),
                    mean_p: current.p(),
                    dispersion_q: current.q(),
                    minus2_qa: f64::NAN,
                    aicq: f64::NAN,
                    pseudo_r2: f64::NAN,
                });
                break;
            }
        }
    }
    Ok((current, trace))
}

enum Model {
    Mean,
    Dispersion,
}

fn pick_candidate(fit: &JointFit, alpha: f64) -> Result<Option<(Model, String, f64)>> {
    // dispersion phase first: the mean structure is assumed settled upstream
    if fit.q() > 1 {
        let mut best: Option<(f64, usize)> = None;
        for (idx, term) in fit.spec.dispersion.terms().iter().enumerate() {
            let t = deviance_test_dispersion_term(fit, term)?;
            if t.p_value > alpha {
                let better = match best {
                    None => true,
                    Some((p, i)) => t.p_value > p || (t.p_value == p && idx > i),
                };
                if better {
                    best = Some((t.p_value, idx));
                }
            }
        }
        if let Some((p, idx)) = best {
            let label = fit.spec.dispersion.terms()[idx].label();
            return Ok(Some((Model::Dispersion, label, p)));
        }
    }
    if fit.p() > 1 {
        let mut best: Option<(f64, usize)> = None;
        for (idx, term) in fit.spec.mean.terms().iter().enumerate() {
            let t = eql_lrt_mean_term(fit, term)?;
            if t.p_value > alpha {
                let better = match best {
                    None => true,
                    Some((p, i)) => t.p_value > p || (t.p_value == p && idx > i),
                };
                if better {
                    best = Some((t.p_value, idx));
                }
            }
        }
        if let Some((p, idx)) = best {
            let label = fit.spec.mean.terms()[idx].label();
            return Ok(Some((Model::Mean, label, p)));
        }
    }
    Ok(None)
}

fn step_row(action: &str, fit: &JointFit) -> Result<SelectionStep> {
    let cmp = ModelComparison::for_fit(fit)?;
    Ok(SelectionStep {
        action: action.to_string(),
        mean_p: fit.p(),
        dispersion_q: fit.q(),
        minus2_qa: fit.minus2_qa,
        aicq: cmp.aicq,
        pseudo_r2: cmp.pseudo_r2,
    })
}

/// Standardized deviance residuals for the mean and dispersion models.
#[derive(Debug, Clone, Serialize)]
pub struct JointResiduals {
    pub r_mean: Vec<f64>,
    pub r_dispersion: Vec<f64>,
    /// Global dispersion estimate of the dispersion model used in r_dispersion.
    pub phi_hat: f64,
}

pub fn residuals(fit: &JointFit) -> Result<JointResiduals> {
    let n = fit.n();
    let phi = fit.phi();
    let mut r_mean = Vec::with_capacity(n);
    for i in 0..n {
        let sign = (fit.response[i] - fit.mean_fit.fitted[i]).signum();
        r_mean.push(sign * (fit.dstar[i] / phi[i]).sqrt());
    }

    // dispersion-model deviance components and their standardization
    let mut dd = Array1::zeros(n);
    for i in 0..n {
        dd[i] = deviance_component(fit.dstar[i], phi[i], VarianceFunction::Squared)?;
    }
    let phi_hat = dd.sum() / (n - fit.q()) as f64;
    let mut r_disp = Vec::with_capacity(n);
    for i in 0..n {
        let h = fit.dispersion_fit.hat[i];
        if h >= 1.0 - 1e-12 {
            return Err(Error::DegenerateLeverage { index: i, value: h });
        }
        let d_raw = deviance_component(
            fit.response[i],
            fit.mean_fit.fitted[i],
            fit.spec.mean_variance,
        )?;
        let sign = (d_raw - phi[i]).signum();
        r_disp.push(sign * (dd[i] / (1.0 - h) / phi_hat).sqrt());
    }
    Ok(JointResiduals {
        r_mean,
        r_dispersion: r_disp,
        phi_hat,
    })
}

/// Rank-wise simulated envelope for the half-normal plot of |r_mean|.
#[derive(Debug, Clone, Serialize)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
    pub observed: Vec<f64>,
    pub replicates_used: usize,
    pub replicates_failed: usize,
}

/// Simulate `n_sim` Gaussian datasets from the fitted mean and dispersion,
/// refit the mean model per replicate with the dispersion frozen, and return
/// the rank-wise min/median/max of the sorted absolute standardized deviance
/// residuals. Deterministic for a given seed.
pub fn simulate_envelope(fit: &JointFit, n_sim: usize, seed: u64) -> Result<Envelope> {
    if n_sim < 19 {
        return Err(Error::Validation(format!(
            "envelope needs at least 19 replicates, got {n_sim}"
        )));
    }
    if fit.spec.mean_link != Link::Identity || fit.spec.mean_variance != VarianceFunction::Constant
    {
        return Err(Error::UnsupportedForm(
            "envelope simulation needs the Gaussian mean family (identity link, V = 1)".into(),
        ));
    }
    let n = fit.n();
    let phi = fit.phi();
    let sd: Vec<f64> = phi.iter().map(|&v| v.sqrt()).collect();
    let prior = phi.mapv(|v| 1.0 / v);
    let base = SeededStream::new(seed);

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n_sim);
    let mut failed = 0usize;
    for rep in 0..n_sim {
        let mut stream = base.substream(rep as u64);
        let mut y = Array1::zeros(n);
        for i in 0..n {
            y[i] = fit.mean_fit.fitted[i] + sd[i] * stream.standard_normal();
        }
        match weighted_least_squares(&fit.mean_design, &prior, &y) {
            Ok(sol) => {
                let fitted = fit.mean_design.dot(&sol.beta);
                let mut abs_r: Vec<f64> = (0..n)
                    .map(|i| {
                        let d = (y[i] - fitted[i]) * (y[i] - fitted[i]);
                        (d / (1.0 - sol.hat[i]) / phi[i]).sqrt()
                    })
                    .collect();
                abs_r.sort_by(|a, b| a.partial_cmp(b).unwrap());
                columns.push(abs_r);
            }
            Err(_) => failed += 1,
        }
    }
    if failed * 5 > n_sim {
        return Err(Error::SimulationFailed {
            failed,
            total: n_sim,
        });
    }

    let used = columns.len();
    let mut lower = Vec::with_capacity(n);
    let mut median = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for rank in 0..n {
        let mut vals: Vec<f64> = columns.iter().map(|c| c[rank]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        lower.push(vals[0]);
        upper.push(vals[used - 1]);
        let mid = used / 2;
        median.push(if used % 2 == 1 {
            vals[mid]
        } else {
            0.5 * (vals[mid - 1] + vals[mid])
        });
    }

    let r = residuals(fit)?;
    let mut observed: Vec<f64> = r.r_mean.iter().map(|v| v.abs()).collect();
    observed.sort_by(|a, b| a.partial_cmp(b).unwrap());

    Ok(Envelope {
        lower,
        median,
        upper,
        observed,
        replicates_used: used,
        replicates_failed: failed,
    })
}
