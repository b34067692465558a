//! Robust-design optimization: minimize Var(Y)(x) subject to E(Y)(x) on
//! target over the constrained mixture simplex, with a brute-force grid
//! oracle and scenario batches.

use crate::dataset::NoiseCoding;
use crate::error::{Error, Result};
use crate::jmmd::JointFit;
use crate::moments::{delta_moment_model, jmmd_moment_model, EvalMode, MomentModel};
use crate::probstats::{GaussianNoise, SeededStream};
use crate::terms::LinearPredictorSpec;
use ndarray::Array1;
use serde::Serialize;

/// Mixing/proofing scenario in raw minutes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioSpec {
    pub mu_raw: [f64; 2],
    pub sigma2_raw: [f64; 2],
}

/// Map a raw-minutes scenario into coded noise moments: the means go through
/// the linear coding, the variances through the squared scales.
pub fn scenario_to_coded(spec: &ScenarioSpec, coding: &NoiseCoding) -> Result<GaussianNoise> {
    GaussianNoise::new(
        [
            coding.code(0, spec.mu_raw[0]),
            coding.code(1, spec.mu_raw[1]),
        ],
        [
            spec.sigma2_raw[0] / (coding.scale[0] * coding.scale[0]),
            spec.sigma2_raw[1] / (coding.scale[1] * coding.scale[1]),
        ],
    )
}

/// Minimize Var(Y) subject to E(Y) = target over the bounded simplex slice.
#[derive(Debug, Clone)]
pub struct RobustDesignProblem {
    pub model: MomentModel,
    pub target: f64,
    /// Per-component [lower, upper] bounds.
    pub bounds: [[f64; 2]; 3],
    /// Enforce the moment-existence margin k2 > 0 (always true for the
    /// delta method, where the margin is identically 1).
    pub enforce_k2: bool,
}

/// Bounds used throughout the bread analysis.
pub const BREAD_BOUNDS: [[f64; 2]; 3] = [[0.25, 1.0], [0.0, 0.75], [0.0, 0.75]];

impl RobustDesignProblem {
    pub fn new(model: MomentModel, target: f64, bounds: [[f64; 2]; 3]) -> Result<Self> {
        let mut lo_sum = 0.0;
        let mut hi_sum = 0.0;
        for [l, u] in bounds {
            if !(0.0 <= l && l <= u && u <= 1.0) {
                return Err(Error::Validation(format!(
                    "bounds [{l}, {u}] outside 0 <= l <= u <= 1"
                )));
            }
            lo_sum += l;
            hi_sum += u;
        }
        if lo_sum > 1.0 || hi_sum < 1.0 {
            return Err(Error::Validation(
                "bounds exclude the whole simplex".into(),
            ));
        }
        Ok(Self {
            model,
            target,
            bounds,
            enforce_k2: true,
        })
    }

    fn in_box(&self, x: &[f64; 3]) -> bool {
        const TOL: f64 = 1e-8;
        x.iter()
            .zip(self.bounds.iter())
            .all(|(&xi, &[l, u])| xi >= l - TOL && xi <= u + TOL)
    }

    fn point(&self, x1: f64, x2: f64) -> [f64; 3] {
        [x1, x2, 1.0 - x1 - x2]
    }

    fn admissible(&self, x: &[f64; 3]) -> bool {
        self.in_box(x) && (!self.enforce_k2 || self.model.feasible(x))
    }

    fn evaluate(&self, x: &[f64; 3]) -> Option<(f64, f64)> {
        if !self.admissible(x) {
            return None;
        }
        match (self.model.mean_of(x), self.model.var_of(x)) {
            (Ok(m), Ok(v)) if m.is_finite() && v.is_finite() => Some((m, v)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolverDiagnostics {
    pub starts_tried: usize,
    pub best_start: usize,
    pub constraint_violation: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OptimResult {
    pub x_star: [f64; 3],
    pub var_star: f64,
    pub mean_at_star: f64,
    pub feasible: bool,
    pub diagnostics: SolverDiagnostics,
}

// ---------------------------------------------------------------------------
// Nelder-Mead on the reduced (x1, x2) plane
// ---------------------------------------------------------------------------

fn nelder_mead<F: Fn(&[f64; 2]) -> f64>(
    f: &F,
    start: [f64; 2],
    scale: f64,
    max_iter: usize,
) -> ([f64; 2], f64) {
    let mut pts = [
        start,
        [start[0] + scale, start[1]],
        [start[0], start[1] + scale],
    ];
    let mut vals = [f(&pts[0]), f(&pts[1]), f(&pts[2])];
    // nudge infeasible initial vertices toward the start
    for k in 1..3 {
        let mut shrink = 0.5;
        while !vals[k].is_finite() && shrink > 1e-6 {
            pts[k] = [
                start[0] + (pts[k][0] - start[0]) * shrink,
                start[1] + (pts[k][1] - start[1]) * shrink,
            ];
            vals[k] = f(&pts[k]);
            shrink *= 0.5;
        }
        if !vals[k].is_finite() {
            // try the opposite direction
            pts[k] = [
                start[0] - (if k == 1 { scale } else { 0.0 }),
                start[1] - (if k == 2 { scale } else { 0.0 }),
            ];
            vals[k] = f(&pts[k]);
        }
    }
    if !vals[0].is_finite() {
        return (start, f64::INFINITY);
    }

    for _ in 0..max_iter {
        // order ascending
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let (b, m, w) = (idx[0], idx[1], idx[2]);
        let spread = (vals[w] - vals[b]).abs();
        let diam = pts
            .iter()
            .map(|p| ((p[0] - pts[b][0]).powi(2) + (p[1] - pts[b][1]).powi(2)).sqrt())
            .fold(0.0f64, f64::max);
        if diam < 1e-11 || (spread.is_finite() && spread < 1e-13 * (1.0 + vals[b].abs())) {
            break;
        }
        let centroid = [
            0.5 * (pts[b][0] + pts[m][0]),
            0.5 * (pts[b][1] + pts[m][1]),
        ];
        let reflect = [
            centroid[0] + (centroid[0] - pts[w][0]),
            centroid[1] + (centroid[1] - pts[w][1]),
        ];
        let fr = f(&reflect);
        if fr < vals[b] {
            let expand = [
                centroid[0] + 2.0 * (centroid[0] - pts[w][0]),
                centroid[1] + 2.0 * (centroid[1] - pts[w][1]),
            ];
            let fe = f(&expand);
            if fe < fr {
                pts[w] = expand;
                vals[w] = fe;
            } else {
                pts[w] = reflect;
                vals[w] = fr;
            }
        } else if fr < vals[m] {
            pts[w] = reflect;
            vals[w] = fr;
        } else {
            let contract = [
                centroid[0] + 0.5 * (pts[w][0] - centroid[0]),
                centroid[1] + 0.5 * (pts[w][1] - centroid[1]),
            ];
            let fc = f(&contract);
            if fc < vals[w] {
                pts[w] = contract;
                vals[w] = fc;
            } else {
                for k in 0..3 {
                    if k != b {
                        pts[k] = [
                            pts[b][0] + 0.5 * (pts[k][0] - pts[b][0]),
                            pts[b][1] + 0.5 * (pts[k][1] - pts[b][1]),
                        ];
                        vals[k] = f(&pts[k]);
                    }
                }
            }
        }
    }
    let mut best = 0;
    for k in 1..3 {
        if vals[k] < vals[best] {
            best = k;
        }
    }
    (pts[best], vals[best])
}

// ---------------------------------------------------------------------------
// coarse scan
// ---------------------------------------------------------------------------

struct ScanSummary {
    /// Point with the smallest |E(Y) - target| among admissible points.
    closest: Option<([f64; 3], f64, f64)>, // (x, mean, var)
    /// The target level is crossed inside the admissible set.
    crossing: bool,
    /// Low-variance admissible points near the target level, used as starts.
    seeds: Vec<[f64; 2]>,
}

fn coarse_scan(problem: &RobustDesignProblem, resolution: usize) -> ScanSummary {
    let [l1, u1] = problem.bounds[0];
    let [l2, u2] = problem.bounds[1];
    let step1 = (u1 - l1) / resolution as f64;
    let step2 = (u2 - l2) / resolution as f64;
    let mut closest: Option<([f64; 3], f64, f64)> = None;
    let mut crossing = false;
    let mut near: Vec<([f64; 2], f64, f64)> = Vec::new(); // (start, |c|, var)
    let mut prev_sign_row: Vec<Option<f64>> = vec![None; resolution + 1];
    for i in 0..=resolution {
        let x1 = l1 + step1 * i as f64;
        let mut prev_sign_col: Option<f64> = None;
        for (j, row_sign) in prev_sign_row.iter_mut().enumerate() {
            let x2 = l2 + step2 * j as f64;
            let x = problem.point(x1, x2);
            let Some((mean, var)) = problem.evaluate(&x) else {
                prev_sign_col = None;
                *row_sign = None;
                continue;
            };
            let c = mean - problem.target;
            if closest.is_none_or(|(_, m, _)| c.abs() < (m - problem.target).abs()) {
                closest = Some((x, mean, var));
            }
            let sign = c.signum();
            if let Some(ps) = prev_sign_col {
                if ps != sign {
                    crossing = true;
                }
            }
            if let Some(ps) = *row_sign {
                if ps != sign {
                    crossing = true;
                }
            }
            prev_sign_col = Some(sign);
            *row_sign = Some(sign);
            near.push(([x1, x2], c.abs(), var));
        }
    }
    // keep the lowest-variance points among those nearest the target level
    near.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let cutoff = near.len().min(400);
    let mut band: Vec<([f64; 2], f64, f64)> = near[..cutoff].to_vec();
    band.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
    let seeds = band.iter().take(8).map(|e| e.0).collect();
    ScanSummary {
        closest,
        crossing,
        seeds,
    }
}

// ---------------------------------------------------------------------------
// solver
// ---------------------------------------------------------------------------

/// Multi-start augmented-Lagrangian solve of the robust-design problem on the
/// reduced (x1, x2) parameterization. The mean constraint is driven to
/// equality by multiplier updates, then a bounded local polish minimizes the
/// variance within |E(Y) - target| <= mean_tol. Deterministic per seed.
pub fn solve(
    problem: &RobustDesignProblem,
    mean_tol: f64,
    n_starts: usize,
    seed: u64,
) -> Result<OptimResult> {
    let scan = coarse_scan(problem, 200);
    let Some((closest_x, closest_mean, closest_var)) = scan.closest else {
        return Err(Error::Validation(
            "no admissible point in the bounded simplex slice".into(),
        ));
    };
    let reachable = scan.crossing || (closest_mean - problem.target).abs() <= mean_tol;
    if !reachable {
        return Err(Error::NoFeasiblePoint {
            closest_x1: closest_x[0],
            closest_x2: closest_x[1],
            closest_x3: closest_x[2],
            closest_gap: (closest_mean - problem.target).abs(),
            closest_var,
        });
    }

    // stratified jittered starts plus the scan seeds
    let mut stream = SeededStream::new(seed);
    let [l1, u1] = problem.bounds[0];
    let [l2, u2] = problem.bounds[1];
    let k = (n_starts as f64).sqrt().ceil().max(1.0) as usize;
    let mut starts: Vec<[f64; 2]> = Vec::with_capacity(n_starts + scan.seeds.len());
    'outer: for i in 0..k {
        for j in 0..k {
            if starts.len() >= n_starts {
                break 'outer;
            }
            let x1 = l1 + (u1 - l1) * (i as f64 + stream.uniform()) / k as f64;
            let x2 = l2 + (u2 - l2) * (j as f64 + stream.uniform()) / k as f64;
            starts.push([x1, x2]);
        }
    }
    starts.extend(scan.seeds.iter().copied());

    let scale = problem.target.abs().max(1.0);
    let mut best: Option<(OptimResult, usize)> = None;
    for (start_idx, &start) in starts.iter().enumerate() {
        if let Some(candidate) = solve_one_start(problem, start, mean_tol, scale) {
            let better = match &best {
                None => true,
                Some((b, _)) => {
                    let dv = candidate.var_star - b.var_star;
                    if dv.abs() > 1e-12 * (1.0 + b.var_star.abs()) {
                        dv < 0.0
                    } else if (candidate.x_star[0] - b.x_star[0]).abs() > 1e-9 {
                        candidate.x_star[0] < b.x_star[0]
                    } else {
                        candidate.x_star[1] < b.x_star[1]
                    }
                }
            };
            if better {
                best = Some((candidate, start_idx));
            }
        }
    }

    match best {
        Some((mut result, best_start)) => {
            result.diagnostics = SolverDiagnostics {
                starts_tried: starts.len(),
                best_start,
                constraint_violation: (result.mean_at_star - problem.target).abs(),
            };
            Ok(result)
        }
        None => Err(Error::NoFeasiblePoint {
            closest_x1: closest_x[0],
            closest_x2: closest_x[1],
            closest_x3: closest_x[2],
            closest_gap: (closest_mean - problem.target).abs(),
            closest_var,
        }),
    }
}

fn solve_one_start(
    problem: &RobustDesignProblem,
    start: [f64; 2],
    mean_tol: f64,
    scale: f64,
) -> Option<OptimResult> {
    // augmented-Lagrangian phase: drive the mean constraint toward equality
    let mut lambda = 0.0;
    let mut rho = 100.0;
    let mut current = start;
    let mut c_prev = f64::INFINITY;
    for _outer in 0..20 {
        let objective = |v: &[f64; 2]| {
            let x = problem.point(v[0], v[1]);
            match problem.evaluate(&x) {
                Some((mean, var)) => {
                    let c = mean - problem.target;
                    var + lambda * c + 0.5 * rho * c * c
                }
                None => f64::INFINITY,
            }
        };
        let (pt, val) = nelder_mead(&objective, current, 0.04, 400);
        if !val.is_finite() {
            return None;
        }
        current = pt;
        let x = problem.point(current[0], current[1]);
        let (mean, _) = problem.evaluate(&x)?;
        let c = mean - problem.target;
        if c.abs() < 1e-9 * scale {
            break;
        }
        lambda += rho * c;
        if c.abs() > 0.25 * c_prev {
            rho = (rho * 4.0).min(1e8);
        }
        c_prev = c.abs();
    }

    // feasibility restoration: the multiplier loop can stall a little off
    // the constraint when the penalty is stiff, so close the remaining gap
    // by minimizing c^2 directly
    let gap = |v: &[f64; 2]| {
        let x = problem.point(v[0], v[1]);
        match problem.evaluate(&x) {
            Some((mean, _)) => {
                let c = mean - problem.target;
                c * c
            }
            None => f64::INFINITY,
        }
    };
    if gap(&current) > (0.5 * mean_tol) * (0.5 * mean_tol) {
        let (pt, val) = nelder_mead(&gap, current, 0.01, 400);
        if val.is_finite() {
            current = pt;
        }
    }

    // polish: minimize the variance inside the tolerance band, first with a
    // simplex wide enough to travel, then a tight one
    let banded = |v: &[f64; 2]| {
        let x = problem.point(v[0], v[1]);
        match problem.evaluate(&x) {
            Some((mean, var)) if (mean - problem.target).abs() <= mean_tol => var,
            _ => f64::INFINITY,
        }
    };
    let mut final_pt = current;
    for polish_scale in [mean_tol.min(0.02), 2e-3, 2e-4] {
        let (pt, val) = nelder_mead(&banded, final_pt, polish_scale, 600);
        if val.is_finite() {
            final_pt = pt;
        }
    }
    // snap coordinates sitting on a bound to the bound exactly, unless the
    // nudge pushes a band-edge optimum out of the tolerance band
    let mut snapped = final_pt;
    for (k, v) in snapped.iter_mut().enumerate() {
        for b in problem.bounds[k] {
            if (*v - b).abs() < 1e-9 {
                *v = b;
            }
        }
    }
    if snapped != final_pt && banded(&snapped).is_finite() {
        final_pt = snapped;
    }
    let x = problem.point(final_pt[0], final_pt[1]);
    let (mean, var) = problem.evaluate(&x)?;
    let feasible = (mean - problem.target).abs() <= mean_tol;
    if !feasible {
        return None;
    }
    Some(OptimResult {
        x_star: x,
        var_star: var,
        mean_at_star: mean,
        feasible: true,
        diagnostics: SolverDiagnostics {
            starts_tried: 0,
            best_start: 0,
            constraint_violation: (mean - problem.target).abs(),
        },
    })
}

/// Exhaustive scan of the bounded simplex slice at resolution `step`:
/// admissible points with |E(Y) - target| <= mean_tol survive; returns the
/// minimum-variance survivor. Deterministic, independent of `solve`.
pub fn grid_oracle(
    problem: &RobustDesignProblem,
    step: f64,
    mean_tol: f64,
) -> Result<OptimResult> {
    if step.is_nan() || step <= 0.0 || step > 0.1 {
        return Err(Error::Validation(format!(
            "grid step must be in (0, 0.1], got {step}"
        )));
    }
    let [l1, u1] = problem.bounds[0];
    let [l2, u2] = problem.bounds[1];
    let n1 = ((u1 - l1) / step).round() as usize;
    let n2 = ((u2 - l2) / step).round() as usize;
    let mut best: Option<([f64; 3], f64, f64)> = None;
    let mut closest: Option<([f64; 3], f64, f64)> = None;
    let mut scanned = 0usize;
    for i in 0..=n1 {
        let x1 = l1 + step * i as f64;
        for j in 0..=n2 {
            let x2 = l2 + step * j as f64;
            let x = problem.point(x1, x2);
            let Some((mean, var)) = problem.evaluate(&x) else {
                continue;
            };
            scanned += 1;
            let gap = (mean - problem.target).abs();
            if closest.is_none_or(|(_, m, _)| gap < (m - problem.target).abs()) {
                closest = Some((x, mean, var));
            }
            if gap <= mean_tol {
                let better = match best {
                    None => true,
                    Some((bx, _, bv)) => {
                        var < bv - 1e-15
                            || (var <= bv + 1e-15
                                && (x[0] < bx[0] - 1e-15
                                    || ((x[0] - bx[0]).abs() <= 1e-15 && x[1] < bx[1])))
                    }
                };
                if better {
                    best = Some((x, mean, var));
                }
            }
        }
    }
    match best {
        Some((x, mean, var)) => Ok(OptimResult {
            x_star: x,
            var_star: var,
            mean_at_star: mean,
            feasible: true,
            diagnostics: SolverDiagnostics {
                starts_tried: scanned,
                best_start: 0,
                constraint_violation: (mean - problem.target).abs(),
            },
        }),
        None => match closest {
            Some((x, mean, var)) => Err(Error::NoFeasiblePoint {
                closest_x1: x[0],
                closest_x2: x[1],
                closest_x3: x[2],
                closest_gap: (mean - problem.target).abs(),
                closest_var: var,
            }),
            None => Err(Error::Validation(
                "no admissible point in the bounded simplex slice".into(),
            )),
        },
    }
}

// ---------------------------------------------------------------------------
// scenario batches
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScenarioMethod {
    Jmmd,
    Delta,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScenarioRequest {
    pub scenario: ScenarioSpec,
    pub method: ScenarioMethod,
    pub mode: EvalMode,
}

/// Fitted inputs a scenario batch draws from.
pub struct ScenarioSources<'a> {
    pub joint: Option<&'a JointFit>,
    pub delta: Option<DeltaSource<'a>>,
}

pub struct DeltaSource<'a> {
    pub spec: &'a LinearPredictorSpec,
    pub coeffs: &'a Array1<f64>,
    pub sigma2_resid: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: ScenarioSpec,
    pub method: ScenarioMethod,
    pub mode: EvalMode,
    pub result: Option<OptimResult>,
    pub error: Option<String>,
}

/// One solver run per request row; failures are recorded in-row and the
/// batch continues. Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn run_scenarios(
    requests: &[ScenarioRequest],
    sources: &ScenarioSources<'_>,
    coding: &NoiseCoding,
    target: f64,
    bounds: [[f64; 2]; 3],
    mean_tol: f64,
    n_starts: usize,
    seed: u64,
) -> Vec<ScenarioOutcome> {
    let mut out = Vec::with_capacity(requests.len());
    for (row, req) in requests.iter().enumerate() {
        let run = || -> Result<OptimResult> {
            let noise = scenario_to_coded(&req.scenario, coding)?;
            let model = match req.method {
                ScenarioMethod::Jmmd => {
                    let fit = sources.joint.ok_or_else(|| {
                        Error::Validation("no joint fit supplied for a joint-model row".into())
                    })?;
                    jmmd_moment_model(fit, &noise, req.mode)?
                }
                ScenarioMethod::Delta => {
                    let d = sources.delta.as_ref().ok_or_else(|| {
                        Error::Validation("no delta source supplied for a delta row".into())
                    })?;
                    delta_moment_model(d.spec, d.coeffs, d.sigma2_resid, &noise, req.mode)?
                }
            };
            let problem = RobustDesignProblem::new(model, target, bounds)?;
            solve(&problem, mean_tol, n_starts, seed.wrapping_add(row as u64))
        };
        match run() {
            Ok(result) => out.push(ScenarioOutcome {
                scenario: req.scenario,
                method: req.method,
                mode: req.mode,
                result: Some(result),
                error: None,
            }),
            Err(e) => out.push(ScenarioOutcome {
                scenario: req.scenario,
                method: req.method,
                mode: req.mode,
                result: None,
                error: Some(e.to_string()),
            }),
        }
    }
    out
}

/// The eight noise scenarios explored in the bread analysis, in raw minutes.
pub fn bread_scenarios() -> Vec<ScenarioSpec> {
    vec![
        ScenarioSpec { mu_raw: [10.0, 47.50], sigma2_raw: [6.25, 9.766] },
        ScenarioSpec { mu_raw: [12.5, 44.375], sigma2_raw: [6.25, 9.766] },
        ScenarioSpec { mu_raw: [15.0, 41.25], sigma2_raw: [6.25, 9.766] },
        ScenarioSpec { mu_raw: [15.0, 47.500], sigma2_raw: [25.0, 39.063] },
        ScenarioSpec { mu_raw: [15.0, 47.50], sigma2_raw: [56.25, 87.891] },
        ScenarioSpec { mu_raw: [20.0, 53.75], sigma2_raw: [6.25, 9.766] },
        ScenarioSpec { mu_raw: [20.0, 53.75], sigma2_raw: [25.0, 39.0625] },
        ScenarioSpec { mu_raw: [20.0, 53.75], sigma2_raw: [56.25, 87.891] },
    ]
}
