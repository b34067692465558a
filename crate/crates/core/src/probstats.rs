//! Distribution functions, the studentized heteroscedasticity check, and the
//! seeded Monte Carlo machinery used as an oracle by the moment formulas.

use crate::error::{Error, Result};
use crate::linalg::project_onto_columns;
use ndarray::{Array1, Array2};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

// ---------------------------------------------------------------------------
// special functions
// ---------------------------------------------------------------------------

const LANCZOS: [f64; 6] = [
    76.18009172947146,
    -86.50532032941677,
    24.01409824083091,
    -1.231739572450155,
    0.1208650973866179e-2,
    -0.5395239384953e-5,
];

pub fn ln_gamma(x: f64) -> f64 {
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for (j, &c) in LANCZOS.iter().enumerate() {
        ser += c / (x + 1.0 + j as f64);
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 500;

/// Regularized lower incomplete gamma P(a, x) by series expansion (x < a+1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut sum = 1.0 / a;
    let mut term = sum;
    for n in 1..GAMMA_MAX_ITER {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < GAMMA_EPS * sum.abs() {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction (x >= a+1).
fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..GAMMA_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized upper incomplete gamma Q(a, x), a > 0, x >= 0.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let q = if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    };
    q.clamp(0.0, 1.0)
}

/// Chi-square upper-tail probability.
pub fn chisq_sf(x: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Domain("chi-square needs df >= 1".into()));
    }
    if x < 0.0 {
        return Err(Error::Domain(format!("chi-square statistic {x} must be >= 0")));
    }
    Ok(gamma_q(df as f64 / 2.0, x / 2.0))
}

/// Complementary error function through the incomplete gamma.
pub fn erfc(x: f64) -> f64 {
    if x >= 0.0 {
        gamma_q(0.5, x * x)
    } else {
        2.0 - gamma_q(0.5, x * x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

const BETA_MAX_ITER: usize = 500;

/// Continued fraction for the regularized incomplete beta function.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln())
        .exp();
    let v = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    };
    v.clamp(0.0, 1.0)
}

/// Student-t upper-tail probability P(T > x) for df >= 1 (df may be
/// non-integer; the Wald tables use n - p).
pub fn t_sf(x: f64, df: f64) -> Result<f64> {
    if df.is_nan() || df < 1.0 {
        return Err(Error::Domain(format!("t distribution needs df >= 1, got {df}")));
    }
    let tail = 0.5 * beta_inc(df / 2.0, 0.5, df / (df + x * x));
    Ok(if x >= 0.0 { tail } else { 1.0 - tail })
}

// ---------------------------------------------------------------------------
// heteroscedasticity check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BreuschPaganResult {
    pub stat: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Studentized (Koenker) heteroscedasticity statistic: n * R^2 from the
/// auxiliary regression of squared residuals on `aux_design`. A constant
/// column is appended when the design's span does not already contain it;
/// df = rank of the augmented design minus one.
pub fn breusch_pagan_studentized(
    aux_design: &Array2<f64>,
    residuals: &Array1<f64>,
) -> Result<BreuschPaganResult> {
    let n = residuals.len();
    if aux_design.nrows() != n {
        return Err(Error::Validation(format!(
            "auxiliary design has {} rows for {} residuals",
            aux_design.nrows(),
            n
        )));
    }
    let e2 = residuals.mapv(|e| e * e);
    let mean = e2.sum() / n as f64;

    // augment with a constant, then project; rank counting handles the case
    // where the constant is already in the span
    let k = aux_design.ncols();
    let mut z = Array2::zeros((n, k + 1));
    for i in 0..n {
        z[[i, 0]] = 1.0;
        for j in 0..k {
            z[[i, j + 1]] = aux_design[[i, j]];
        }
    }
    let (fitted, rank) = project_onto_columns(&z, &e2);
    if rank < 2 {
        return Err(Error::Validation(
            "auxiliary regression needs at least one regressor beyond the constant".into(),
        ));
    }
    let df = rank - 1;
    let tss: f64 = e2.iter().map(|&v| (v - mean) * (v - mean)).sum();
    if tss <= 0.0 {
        // residuals all equal in magnitude: nothing to explain
        return Ok(BreuschPaganResult {
            stat: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let ssr: f64 = fitted.iter().map(|&v| (v - mean) * (v - mean)).sum();
    let r2 = (ssr / tss).clamp(0.0, 1.0);
    let stat = n as f64 * r2;
    let p_value = chisq_sf(stat, df)?;
    Ok(BreuschPaganResult { stat, df, p_value })
}

// ---------------------------------------------------------------------------
// seeded sampling
// ---------------------------------------------------------------------------

/// Independent Gaussian noise levels in coded units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianNoise {
    pub mu: [f64; 2],
    pub sigma2: [f64; 2],
}

impl GaussianNoise {
    pub fn new(mu: [f64; 2], sigma2: [f64; 2]) -> Result<Self> {
        if sigma2.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "noise variances must be nonnegative, got {sigma2:?}"
            )));
        }
        Ok(Self { mu, sigma2 })
    }
}

/// Deterministic random stream (ChaCha8, counter-based); identical seeds
/// produce identical streams on every platform. `substream` jumps to an
/// independent stream for parallel use.
#[derive(Debug, Clone)]
pub struct SeededStream {
    seed: u64,
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream k of the same seed (ChaCha stream id).
    pub fn substream(&self, k: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        Self {
            seed: self.seed,
            rng,
            cached_normal: None,
        }
    }

    /// Uniform draw in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u = (self.rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal via Box-Muller (second draw cached).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub var: f64,
    pub se_mean: f64,
    pub n_samples: usize,
}

/// Sample mean and variance of f(z1, z2) over independent Gaussian draws.
pub fn mc_moments<F: Fn(f64, f64) -> f64>(
    f: F,
    noise: &GaussianNoise,
    n_samples: usize,
    stream: &mut SeededStream,
) -> Result<McEstimate> {
    if n_samples < 1000 {
        return Err(Error::Validation(format!(
            "need at least 1000 samples, got {n_samples}"
        )));
    }
    let sd1 = noise.sigma2[0].sqrt();
    let sd2 = noise.sigma2[1].sqrt();
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for i in 0..n_samples {
        let z1 = noise.mu[0] + sd1 * stream.standard_normal();
        let z2 = noise.mu[1] + sd2 * stream.standard_normal();
        let v = f(z1, z2);
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite evaluation at draw {i}: f({z1}, {z2}) = {v}"
            )));
        }
        sum += v;
        sumsq += v * v;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sumsq - n * mean * mean) / (n - 1.0);
    Ok(McEstimate {
        mean,
        var,
        se_mean: (var / n).sqrt(),
        n_samples,
    })
}
