//! Scheffé-type mixture factors crossed with noise-variable monomials:
//! term grammar, design matrices, and grouping of a fitted predictor as a
//! polynomial in the noise variables.

use crate::dataset::ExperimentDataset;
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const N_COMPONENTS: usize = 3;

/// A canonical mixture-model factor in three components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixtureFactor {
    /// xi
    Linear(u8),
    /// xi*xj, i < j
    Binary(u8, u8),
    /// xi*xj*xk, i < j < k
    Ternary(u8, u8, u8),
    /// xi*xj*(xi-xj), i < j; `negated` flips the difference, so
    /// x2*x1*(x2-x1) normalizes to CubicDiff{1,2,negated}.
    CubicDiff { i: u8, j: u8, negated: bool },
}

impl MixtureFactor {
    fn check_index(i: u8) -> Result<()> {
        if i == 0 || i as usize > N_COMPONENTS {
            return Err(Error::Parse {
                context: "term".to_string(),
                message: format!("component x{i} out of range 1..={N_COMPONENTS}"),
            });
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let v = |i: u8| x[(i - 1) as usize];
        match *self {
            MixtureFactor::Linear(i) => v(i),
            MixtureFactor::Binary(i, j) => v(i) * v(j),
            MixtureFactor::Ternary(i, j, k) => v(i) * v(j) * v(k),
            MixtureFactor::CubicDiff { i, j, negated } => {
                let d = v(i) * v(j) * (v(i) - v(j));
                if negated {
                    -d
                } else {
                    d
                }
            }
        }
    }

    fn label(&self) -> String {
        match *self {
            MixtureFactor::Linear(i) => format!("x{i}"),
            MixtureFactor::Binary(i, j) => format!("x{i}*x{j}"),
            MixtureFactor::Ternary(i, j, k) => format!("x{i}*x{j}*x{k}"),
            MixtureFactor::CubicDiff { i, j, negated } => {
                if negated {
                    format!("x{j}*x{i}*(x{j}-x{i})")
                } else {
                    format!("x{i}*x{j}*(x{i}-x{j})")
                }
            }
        }
    }
}

/// z1^e1 * z2^e2 with e1 + e2 <= 2 for the model family used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoiseMonomial {
    pub e1: u8,
    pub e2: u8,
}

impl NoiseMonomial {
    pub const ONE: NoiseMonomial = NoiseMonomial { e1: 0, e2: 0 };
    pub const Z1: NoiseMonomial = NoiseMonomial { e1: 1, e2: 0 };
    pub const Z2: NoiseMonomial = NoiseMonomial { e1: 0, e2: 1 };
    pub const Z1_SQ: NoiseMonomial = NoiseMonomial { e1: 2, e2: 0 };
    pub const Z2_SQ: NoiseMonomial = NoiseMonomial { e1: 0, e2: 2 };
    pub const Z1_Z2: NoiseMonomial = NoiseMonomial { e1: 1, e2: 1 };

    pub fn eval(&self, z: &[f64; 2]) -> f64 {
        z[0].powi(self.e1 as i32) * z[1].powi(self.e2 as i32)
    }

    fn label(&self) -> Option<String> {
        match (self.e1, self.e2) {
            (0, 0) => None,
            (1, 0) => Some("z1".to_string()),
            (0, 1) => Some("z2".to_string()),
            (2, 0) => Some("z1^2".to_string()),
            (0, 2) => Some("z2^2".to_string()),
            (1, 1) => Some("z1*z2".to_string()),
            (e1, e2) => Some(format!("z1^{e1}*z2^{e2}")),
        }
    }
}

/// One column of a design matrix: a mixture factor times a noise monomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Term {
    pub mixture: MixtureFactor,
    pub noise: NoiseMonomial,
}

impl Term {
    pub fn new(mixture: MixtureFactor, noise: NoiseMonomial) -> Self {
        Self { mixture, noise }
    }

    pub fn eval(&self, x: &[f64; 3], z: &[f64; 2]) -> f64 {
        self.mixture.eval(x) * self.noise.eval(z)
    }

    pub fn label(&self) -> String {
        match self.noise.label() {
            Some(nz) => format!("{}:{}", self.mixture.label(), nz),
            None => self.mixture.label(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn parse_component(tok: &str) -> Result<u8> {
    let rest = tok.strip_prefix('x').ok_or_else(|| Error::Parse {
        context: "term".to_string(),
        message: format!("expected a component like x1, got {tok:?}"),
    })?;
    let i: u8 = rest.parse().map_err(|_| Error::Parse {
        context: "term".to_string(),
        message: format!("expected a component like x1, got {tok:?}"),
    })?;
    MixtureFactor::check_index(i)?;
    Ok(i)
}

fn parse_mixture(text: &str) -> Result<MixtureFactor> {
    let bad = |msg: String| Error::Parse {
        context: "term".to_string(),
        message: msg,
    };
    // difference factor: xi*xj*(xi-xj)
    if let Some(open) = text.find('(') {
        let close = text
            .rfind(')')
            .ok_or_else(|| bad(format!("unbalanced parenthesis in {text:?}")))?;
        let prod = text[..open]
            .strip_suffix('*')
            .ok_or_else(|| bad(format!("malformed difference factor in {text:?}")))?;
        let inner = &text[open + 1..close];
        if !text[close + 1..].is_empty() {
            return Err(bad(format!("trailing input after ) in {text:?}")));
        }
        let prod_parts: Vec<&str> = prod.split('*').collect();
        if prod_parts.len() != 2 {
            return Err(bad(format!(
                "difference factor needs a two-component product, got {prod:?}"
            )));
        }
        let a = parse_component(prod_parts[0])?;
        let b = parse_component(prod_parts[1])?;
        let diff_parts: Vec<&str> = inner.split('-').collect();
        if diff_parts.len() != 2 {
            return Err(bad(format!("expected xi-xj inside parentheses, got {inner:?}")));
        }
        let c = parse_component(diff_parts[0])?;
        let d = parse_component(diff_parts[1])?;
        if a == b || c == d {
            return Err(bad(format!("repeated component in {text:?}")));
        }
        if !((c == a && d == b) || (c == b && d == a)) {
            return Err(bad(format!(
                "difference indices ({c},{d}) do not match product indices ({a},{b})"
            )));
        }
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        // canonical sign is (xi - xj) with i < j
        let negated = c != i;
        return Ok(MixtureFactor::CubicDiff { i, j, negated });
    }
    let parts: Vec<&str> = text.split('*').collect();
    match parts.len() {
        1 => Ok(MixtureFactor::Linear(parse_component(parts[0])?)),
        2 => {
            let a = parse_component(parts[0])?;
            let b = parse_component(parts[1])?;
            if a == b {
                return Err(bad(format!("repeated component in {text:?}")));
            }
            Ok(MixtureFactor::Binary(a.min(b), a.max(b)))
        }
        3 => {
            let mut ix = [
                parse_component(parts[0])?,
                parse_component(parts[1])?,
                parse_component(parts[2])?,
            ];
            ix.sort_unstable();
            if ix[0] == ix[1] || ix[1] == ix[2] {
                return Err(bad(format!("repeated component in {text:?}")));
            }
            Ok(MixtureFactor::Ternary(ix[0], ix[1], ix[2]))
        }
        _ => Err(bad(format!("too many factors in {text:?}"))),
    }
}

fn parse_noise(text: &str) -> Result<NoiseMonomial> {
    let bad = |msg: String| Error::Parse {
        context: "term".to_string(),
        message: msg,
    };
    let mut e1 = 0u8;
    let mut e2 = 0u8;
    for tok in text.split('*') {
        let (var, exp) = match tok.split_once('^') {
            Some((v, e)) => {
                let exp: u8 = e.parse().map_err(|_| bad(format!("bad exponent in {tok:?}")))?;
                (v, exp)
            }
            None => (tok, 1),
        };
        match var {
            "z1" => e1 += exp,
            "z2" => e2 += exp,
            other => return Err(bad(format!("unknown noise variable {other:?}"))),
        }
    }
    if e1 + e2 > 2 {
        return Err(bad(format!(
            "noise monomial degree {} exceeds 2 in {text:?}",
            e1 + e2
        )));
    }
    Ok(NoiseMonomial { e1, e2 })
}

/// Parse the grammar `mix_part[':'noise_part]`, whitespace-insensitive.
pub fn parse_term(text: &str) -> Result<Term> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return Err(Error::Parse {
            context: "term".to_string(),
            message: "empty term".to_string(),
        });
    }
    let (mix_part, noise_part) = match compact.split_once(':') {
        Some((m, n)) => (m, Some(n)),
        None => (compact.as_str(), None),
    };
    let mixture = parse_mixture(mix_part)?;
    let noise = match noise_part {
        Some(n) => parse_noise(n)?,
        None => NoiseMonomial::ONE,
    };
    Ok(Term { mixture, noise })
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_term(s)
    }
}

impl Serialize for Term {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_term(&s).map_err(D::Error::custom)
    }
}

/// An ordered set of terms defining a linear predictor and its design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinearPredictorSpec {
    terms: Vec<Term>,
}

impl LinearPredictorSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Validation("a predictor needs at least one term".into()));
        }
        let mut labels: Vec<String> = terms.iter().map(Term::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != terms.len() {
            return Err(Error::Validation("duplicate terms in predictor".into()));
        }
        Ok(Self { terms })
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let terms = labels
            .iter()
            .map(|l| parse_term(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn p(&self) -> usize {
        self.terms.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.terms.iter().map(Term::label).collect()
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.terms.iter().any(|t| t.label() == label)
    }

    pub fn position(&self, term: &Term) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    /// A copy with one term removed (by label).
    pub fn without_label(&self, label: &str) -> Result<Self> {
        let terms: Vec<Term> = self
            .terms
            .iter()
            .copied()
            .filter(|t| t.label() != label)
            .collect();
        if terms.len() == self.terms.len() {
            return Err(Error::Validation(format!("term {label} not in predictor")));
        }
        Self::new(terms)
    }

    /// Largest noise-monomial set used by any term.
    pub fn noise_monomials(&self) -> Vec<NoiseMonomial> {
        let mut set: Vec<NoiseMonomial> = Vec::new();
        for t in &self.terms {
            if !set.contains(&t.noise) {
                set.push(t.noise);
            }
        }
        set.sort();
        set
    }

    /// Design matrix row for one (x, z) point, in spec order.
    pub fn row(&self, x: &[f64; 3], z: &[f64; 2]) -> Vec<f64> {
        self.terms.iter().map(|t| t.eval(x, z)).collect()
    }

    /// n x p design matrix over a dataset, in spec order.
    pub fn design_matrix(&self, data: &ExperimentDataset) -> Array2<f64> {
        let n = data.n();
        let p = self.p();
        let mut m = Array2::zeros((n, p));
        for (i, obs) in data.observations.iter().enumerate() {
            for (j, t) in self.terms.iter().enumerate() {
                m[[i, j]] = t.eval(&obs.x, &obs.z);
            }
        }
        m
    }

    /// Group `coeffs` by noise monomial at a fixed blend: the value attached
    /// to each monomial is the sum of coefficient x mixture-factor over the
    /// terms carrying that monomial. Evaluating the returned polynomial at
    /// any (z1, z2) equals the full linear predictor there.
    pub fn noise_polynomial_coefficients(
        &self,
        coeffs: &Array1<f64>,
        x: &[f64; 3],
    ) -> Result<BTreeMap<NoiseMonomial, f64>> {
        if coeffs.len() != self.p() {
            return Err(Error::Validation(format!(
                "coefficient length {} does not match p = {}",
                coeffs.len(),
                self.p()
            )));
        }
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || x.iter().any(|&xi| !(-1e-9..=1.0 + 1e-9).contains(&xi)) {
            return Err(Error::Domain(format!(
                "blend {x:?} is not on the simplex"
            )));
        }
        let mut map = BTreeMap::new();
        for (t, &c) in self.terms.iter().zip(coeffs.iter()) {
            *map.entry(t.noise).or_insert(0.0) += c * t.mixture.eval(x);
        }
        Ok(map)
    }
}

/// Canonical model families for the three-component, two-noise-variable
/// bread corpus, ordered exactly as they are conventionally tabulated.
pub mod presets {
    use super::*;

    fn cross(mixtures: &[MixtureFactor], monomials: &[NoiseMonomial]) -> LinearPredictorSpec {
        let mut terms = Vec::with_capacity(mixtures.len() * monomials.len());
        for &nz in monomials {
            for &m in mixtures {
                terms.push(Term::new(m, nz));
            }
        }
        LinearPredictorSpec::new(terms).expect("preset is valid")
    }

    const CUBIC_10: [MixtureFactor; 10] = [
        MixtureFactor::Linear(1),
        MixtureFactor::Linear(2),
        MixtureFactor::Linear(3),
        MixtureFactor::Binary(1, 2),
        MixtureFactor::Binary(1, 3),
        MixtureFactor::Binary(2, 3),
        MixtureFactor::Ternary(1, 2, 3),
        MixtureFactor::CubicDiff { i: 1, j: 2, negated: false },
        MixtureFactor::CubicDiff { i: 1, j: 3, negated: false },
        MixtureFactor::CubicDiff { i: 2, j: 3, negated: false },
    ];

    const REDUCED_7: [MixtureFactor; 7] = [
        MixtureFactor::Linear(1),
        MixtureFactor::Linear(2),
        MixtureFactor::Linear(3),
        MixtureFactor::Binary(1, 2),
        MixtureFactor::Binary(1, 3),
        MixtureFactor::CubicDiff { i: 1, j: 2, negated: false },
        MixtureFactor::CubicDiff { i: 1, j: 3, negated: false },
    ];

    /// Full Scheffé cubic crossed with the quadratic noise model:
    /// 10 mixture terms x {1, z1, z2, z1^2, z2^2, z1*z2} = 60 terms.
    pub fn full_crossed_60() -> LinearPredictorSpec {
        cross(
            &CUBIC_10,
            &[
                NoiseMonomial::ONE,
                NoiseMonomial::Z1,
                NoiseMonomial::Z2,
                NoiseMonomial::Z1_SQ,
                NoiseMonomial::Z2_SQ,
                NoiseMonomial::Z1_Z2,
            ],
        )
    }

    /// The 28-term starting model: 7 reduced mixture terms crossed with
    /// {1, z1, z2, z1^2}.
    pub fn reduced_crossed_28() -> LinearPredictorSpec {
        cross(
            &REDUCED_7,
            &[
                NoiseMonomial::ONE,
                NoiseMonomial::Z1,
                NoiseMonomial::Z2,
                NoiseMonomial::Z1_SQ,
            ],
        )
    }

    /// The 18-term loaf-volume mean model selected by backward elimination.
    pub fn mean_model_18() -> LinearPredictorSpec {
        LinearPredictorSpec::from_labels(&[
            "x1",
            "x2",
            "x3",
            "x1*x3",
            "x1*x2*(x1-x2)",
            "x1*x3*(x1-x3)",
            "x1:z1",
            "x3:z1",
            "x1*x2*(x1-x2):z1",
            "x1:z2",
            "x2:z2",
            "x1*x3:z2",
            "x1*x3*(x1-x3):z2",
            "x2:z1^2",
            "x3:z1^2",
            "x1*x3:z1^2",
            "x1*x2*(x1-x2):z1^2",
            "x1*x3*(x1-x3):z1^2",
        ])
        .expect("preset is valid")
    }

    /// The 16-term dispersion model: the 18-term set minus {x1:z1, x2:z1^2}.
    pub fn dispersion_model_16() -> LinearPredictorSpec {
        let full = mean_model_18();
        full.without_label("x1:z1")
            .and_then(|s| s.without_label("x2:z1^2"))
            .expect("preset is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn parse_direct_grammar() {
        let t = parse_term("x1*x3:z2").unwrap();
        assert_eq!(t.mixture, MixtureFactor::Binary(1, 3));
        assert_eq!(t.noise, NoiseMonomial::Z2);

        let t = parse_term("x1*x2*(x1-x2):z1^2").unwrap();
        assert_eq!(
            t.mixture,
            MixtureFactor::CubicDiff { i: 1, j: 2, negated: false }
        );
        assert_eq!(t.noise, NoiseMonomial::Z1_SQ);

        assert!(parse_term("x4").is_err());
        assert!(parse_term("x1*x2*(x1-x3)").is_err());
        assert!(parse_term("x1:z1^3").is_err());
        assert!(parse_term("x1:z3").is_err());
        assert!(parse_term("x1*x1").is_err());
    }

    #[test]
    fn reversed_difference_normalizes_with_sign() {
        let t = parse_term("x2*x1*(x2-x1)").unwrap();
        assert_eq!(
            t.mixture,
            MixtureFactor::CubicDiff { i: 1, j: 2, negated: true }
        );
        let x = [0.25, 0.75, 0.0];
        let plain = parse_term("x1*x2*(x1-x2)").unwrap();
        assert_relative_eq!(t.mixture.eval(&x), -plain.mixture.eval(&x));
        // label round-trips
        assert_eq!(parse_term(&t.label()).unwrap(), t);
    }

    #[test]
    fn whitespace_insensitive() {
        assert_eq!(
            parse_term(" x1 * x3 : z2 ").unwrap(),
            parse_term("x1*x3:z2").unwrap()
        );
    }

    #[test]
    fn reduced_28_shape() {
        let s = presets::reduced_crossed_28();
        assert_eq!(s.p(), 28);
        assert!(s.contains_label("x3:z1^2"));
        assert!(!s.labels().iter().any(|l| l.contains("z2^2")));
        assert!(!s.labels().iter().any(|l| l.contains("z1*z2")));
        // each mixture factor appears once per noise block
        for m in ["x1", "x2", "x3", "x1*x2", "x1*x3"] {
            let count = s
                .labels()
                .iter()
                .filter(|l| {
                    l.as_str() == m || l.starts_with(&format!("{m}:"))
                })
                .count();
            assert_eq!(count, 4, "{m}");
        }
    }

    #[test]
    fn full_crossed_60_shape() {
        let s = presets::full_crossed_60();
        assert_eq!(s.p(), 60);
        assert!(s.contains_label("x1*x2*x3:z1*z2"));
        // the 28-term model is a subset
        let labels = s.labels();
        for l in presets::reduced_crossed_28().labels() {
            assert!(labels.contains(&l), "{l} missing");
        }
    }

    #[test]
    fn design_matrix_entries() {
        let data = ExperimentDataset::bread_corpus();
        let spec = LinearPredictorSpec::from_labels(&["x1", "x1*x2*(x1-x2):z1^2", "x3:z2"])
            .unwrap();
        let m = spec.design_matrix(&data);
        // observation 0: x = (0.25, 0.75, 0), z = (-1, -1)
        assert_relative_eq!(m[[0, 0]], 0.25);
        assert_relative_eq!(m[[0, 1]], 0.25 * 0.75 * (-0.5) * 1.0);
        assert_relative_eq!(m[[0, 2]], 0.0);
    }

    #[test]
    fn vertex_annihilates_higher_factors() {
        let x = [1.0, 0.0, 0.0];
        for lab in ["x1*x2", "x1*x2*x3", "x1*x3*(x1-x3)", "x2*x3*(x2-x3)"] {
            assert_eq!(parse_term(lab).unwrap().mixture.eval(&x), 0.0, "{lab}");
        }
    }

    #[test]
    fn noise_polynomial_zero_coeffs() {
        let spec = presets::mean_model_18();
        let coeffs = Array1::zeros(spec.p());
        let map = spec
            .noise_polynomial_coefficients(&coeffs, &[0.2, 0.3, 0.5])
            .unwrap();
        assert!(map.values().all(|&v| v == 0.0));
        assert!(spec
            .noise_polynomial_coefficients(&coeffs, &[0.5, 0.4, 0.5])
            .is_err());
    }

    #[test]
    fn spec_serializes_as_labels() {
        let s = LinearPredictorSpec::from_labels(&["x1", "x1*x3:z2"]).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"["x1","x1*x3:z2"]"#);
        let back: LinearPredictorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    fn arb_term() -> impl Strategy<Value = Term> {
        let mixture = prop_oneof![
            (1u8..=3).prop_map(MixtureFactor::Linear),
            prop_oneof![
                Just(MixtureFactor::Binary(1, 2)),
                Just(MixtureFactor::Binary(1, 3)),
                Just(MixtureFactor::Binary(2, 3)),
            ],
            Just(MixtureFactor::Ternary(1, 2, 3)),
            (prop_oneof![Just((1u8, 2u8)), Just((1u8, 3u8)), Just((2u8, 3u8))], any::<bool>())
                .prop_map(|((i, j), negated)| MixtureFactor::CubicDiff { i, j, negated }),
        ];
        let noise = prop_oneof![
            Just(NoiseMonomial::ONE),
            Just(NoiseMonomial::Z1),
            Just(NoiseMonomial::Z2),
            Just(NoiseMonomial::Z1_SQ),
            Just(NoiseMonomial::Z2_SQ),
            Just(NoiseMonomial::Z1_Z2),
        ];
        (mixture, noise).prop_map(|(m, n)| Term::new(m, n))
    }

    proptest! {
        /// Parsing is the left inverse of label printing.
        #[test]
        fn parse_label_round_trip(t in arb_term()) {
            prop_assert_eq!(parse_term(&t.label()).unwrap(), t);
        }

        /// Grouping by noise monomial reconstructs the linear predictor.
        #[test]
        fn noise_polynomial_matches_design_row(
            seed in any::<u64>(),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
            z1 in -1.5f64..1.5,
            z2 in -1.5f64..1.5,
        ) {
            // random point on the simplex
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let x = [lo, hi - lo, 1.0 - hi];
            let spec = presets::full_crossed_60();
            let mut state = seed;
            let coeffs = Array1::from_iter((0..spec.p()).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            }));
            let z = [z1, z2];
            let direct: f64 = spec
                .row(&x, &z)
                .iter()
                .zip(coeffs.iter())
                .map(|(v, c)| v * c)
                .sum();
            let poly = spec.noise_polynomial_coefficients(&coeffs, &x).unwrap();
            let grouped: f64 = poly.iter().map(|(m, c)| c * m.eval(&z)).sum();
            let scale = direct.abs().max(1.0);
            prop_assert!((direct - grouped).abs() <= 1e-10 * scale);
        }
    }
}
