//! Experiment data ingestion: wide and long CSV layouts, noise-variable coding.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tolerance under which mixture proportions must sum to one.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Rows whose proportions sum to one within this looser tolerance are
/// renormalized with a warning (data-entry rounding is common in mixture
/// tables).
pub const RENORM_TOL: f64 = 1e-6;

/// Linear coding of a noise variable: coded = (raw - center) / scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCoding {
    pub center: [f64; 2],
    pub scale: [f64; 2],
}

impl NoiseCoding {
    pub fn new(center: [f64; 2], scale: [f64; 2]) -> Result<Self> {
        if scale.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Domain(format!(
                "noise coding scale must be strictly positive, got {scale:?}"
            )));
        }
        Ok(Self { center, scale })
    }

    /// Coding used by the bread corpus: mixing time (t-15)/10, proofing time
    /// (t-47.5)/12.5.
    pub fn bread() -> Self {
        Self {
            center: [15.0, 47.5],
            scale: [10.0, 12.5],
        }
    }

    pub fn code(&self, which: usize, raw: f64) -> f64 {
        (raw - self.center[which]) / self.scale[which]
    }

    pub fn decode(&self, which: usize, coded: f64) -> f64 {
        coded * self.scale[which] + self.center[which]
    }
}

/// coded = (raw - center) / scale; errors if scale <= 0.
pub fn code_noise(raw: f64, center: f64, scale: f64) -> Result<f64> {
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Domain(format!(
            "noise coding scale must be strictly positive, got {scale}"
        )));
    }
    Ok((raw - center) / scale)
}

/// One blend evaluated at one noise setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: [f64; 3],
    pub z: [f64; 2],
    pub y: f64,
}

/// One row of the wide layout: a blend plus its responses over the noise grid.
#[derive(Debug, Clone)]
pub struct RawWideRow {
    pub run_id: u32,
    pub x: [f64; 3],
    pub volumes: Vec<f64>,
}

/// The full long-format dataset.
#[derive(Debug, Clone)]
pub struct ExperimentDataset {
    pub observations: Vec<Observation>,
    pub provenance: String,
    /// Renormalization notices collected during ingestion.
    pub warnings: Vec<String>,
}

impl ExperimentDataset {
    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    /// The bread-making corpus shipped with the crate: 10 flour blends
    /// crossed with a 3x3 grid of mixing and proofing times, 90 loaf volumes.
    pub fn bread_corpus() -> Self {
        let text = include_str!("../data/bread_volumes_wide.csv");
        parse_wide_str(text, &NoiseCoding::bread(), "bread_volumes_wide.csv")
            .expect("embedded corpus is valid")
    }
}

fn validate_simplex(
    x: &mut [f64; 3],
    context: &str,
    warnings: &mut Vec<String>,
) -> Result<()> {
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() || !(-SIMPLEX_TOL..=1.0 + RENORM_TOL).contains(&xi) {
            return Err(Error::Validation(format!(
                "{context}: proportion x{} = {xi} outside [0, 1]",
                i + 1
            )));
        }
    }
    let sum: f64 = x.iter().sum();
    let gap = (sum - 1.0).abs();
    if gap > SIMPLEX_TOL {
        if gap <= RENORM_TOL {
            for xi in x.iter_mut() {
                *xi /= sum;
            }
            warnings.push(format!(
                "{context}: proportions sum to {sum:.12}, renormalized"
            ));
        } else {
            return Err(Error::Validation(format!(
                "{context}: proportions sum to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        context: context.to_string(),
        message: format!("expected a number, got {field:?}"),
    })
}

/// Parse the wide layout. The header names the response columns as
/// `v_<mix minutes>_<proof minutes>`; raw minutes are coded through `coding`.
pub fn parse_wide_str(
    text: &str,
    coding: &NoiseCoding,
    provenance: &str,
) -> Result<ExperimentDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        context: provenance.to_string(),
        message: "empty file".to_string(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 5 || cols[0] != "run" {
        return Err(Error::Parse {
            context: format!("{provenance} header"),
            message: "expected `run,x1,x2,x3,v_<mix>_<proof>,...`".to_string(),
        });
    }
    let mut settings = Vec::new();
    for col in &cols[4..] {
        let rest = col.strip_prefix("v_").ok_or_else(|| Error::Parse {
            context: format!("{provenance} header"),
            message: format!("response column {col:?} must look like v_<mix>_<proof>"),
        })?;
        let (mix, proof) = rest.split_once('_').ok_or_else(|| Error::Parse {
            context: format!("{provenance} header"),
            message: format!("response column {col:?} must look like v_<mix>_<proof>"),
        })?;
        let mix = parse_f64(mix, &format!("{provenance} header {col}"))?;
        let proof = parse_f64(proof, &format!("{provenance} header {col}"))?;
        let setting = [coding.code(0, mix), coding.code(1, proof)];
        if settings.contains(&setting) {
            return Err(Error::Validation(format!(
                "{provenance} header: duplicate noise setting column {col}"
            )));
        }
        settings.push(setting);
    }

    let mut warnings = Vec::new();
    let mut observations = Vec::new();
    let mut seen_runs = Vec::new();
    for (lineno, line) in lines {
        let context = format!("{provenance} line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + settings.len() {
            return Err(Error::Parse {
                context,
                message: format!(
                    "expected {} columns, got {}",
                    4 + settings.len(),
                    fields.len()
                ),
            });
        }
        let run_id: u32 = fields[0].trim().parse().map_err(|_| Error::Parse {
            context: context.clone(),
            message: format!("bad run id {:?}", fields[0]),
        })?;
        if seen_runs.contains(&run_id) {
            return Err(Error::Validation(format!(
                "{context}: duplicate run id {run_id}"
            )));
        }
        seen_runs.push(run_id);
        let mut x = [
            parse_f64(fields[1], &context)?,
            parse_f64(fields[2], &context)?,
            parse_f64(fields[3], &context)?,
        ];
        validate_simplex(&mut x, &context, &mut warnings)?;
        for (k, setting) in settings.iter().enumerate() {
            let y = parse_f64(fields[4 + k], &context)?;
            if !y.is_finite() || y <= 0.0 {
                return Err(Error::Validation(format!(
                    "{context}: response {y} must be finite and positive"
                )));
            }
            observations.push(Observation { x, z: *setting, y });
        }
    }
    if observations.is_empty() {
        return Err(Error::Parse {
            context: provenance.to_string(),
            message: "no data rows".to_string(),
        });
    }
    Ok(ExperimentDataset {
        observations,
        provenance: provenance.to_string(),
        warnings,
    })
}

/// Parse the long layout `x1,x2,x3,z1_raw,z2_raw,y`; raw noise levels are
/// coded through `coding`.
pub fn parse_long_str(
    text: &str,
    coding: &NoiseCoding,
    provenance: &str,
) -> Result<ExperimentDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        context: provenance.to_string(),
        message: "empty file".to_string(),
    })?;
    let expect = "x1,x2,x3,z1_raw,z2_raw,y";
    if header.split(',').map(str::trim).collect::<Vec<_>>().join(",") != expect {
        return Err(Error::Parse {
            context: format!("{provenance} header"),
            message: format!("expected `{expect}`"),
        });
    }
    let mut warnings = Vec::new();
    let mut observations = Vec::new();
    for (lineno, line) in lines {
        let context = format!("{provenance} line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                context,
                message: format!("expected 6 columns, got {}", fields.len()),
            });
        }
        let mut x = [
            parse_f64(fields[0], &context)?,
            parse_f64(fields[1], &context)?,
            parse_f64(fields[2], &context)?,
        ];
        validate_simplex(&mut x, &context, &mut warnings)?;
        let z = [
            coding.code(0, parse_f64(fields[3], &context)?),
            coding.code(1, parse_f64(fields[4], &context)?),
        ];
        let y = parse_f64(fields[5], &context)?;
        if !y.is_finite() || y <= 0.0 {
            return Err(Error::Validation(format!(
                "{context}: response {y} must be finite and positive"
            )));
        }
        observations.push(Observation { x, z, y });
    }
    if observations.is_empty() {
        return Err(Error::Parse {
            context: provenance.to_string(),
            message: "no data rows".to_string(),
        });
    }
    Ok(ExperimentDataset {
        observations,
        provenance: provenance.to_string(),
        warnings,
    })
}

/// Load the wide layout from a file.
pub fn load_wide_csv(path: &Path, coding: &NoiseCoding) -> Result<ExperimentDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_wide_str(&text, coding, &path.display().to_string())
}

/// Load the long layout from a file.
pub fn load_long_csv(path: &Path, coding: &NoiseCoding) -> Result<ExperimentDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_long_str(&text, coding, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn code_noise_matches_coding_of_levels() {
        assert_relative_eq!(code_noise(5.0, 15.0, 10.0).unwrap(), -1.0);
        assert_relative_eq!(code_noise(47.5, 47.5, 12.5).unwrap(), 0.0);
        assert_relative_eq!(code_noise(60.0, 47.5, 12.5).unwrap(), 1.0);
        assert!(code_noise(5.0, 15.0, 0.0).is_err());
        assert!(code_noise(5.0, 15.0, -1.0).is_err());
    }

    #[test]
    fn coding_round_trips() {
        let c = NoiseCoding::bread();
        for raw in [5.0, 12.3, 25.0, 60.0] {
            let coded = c.code(0, raw);
            assert_relative_eq!(c.decode(0, coded), raw, max_relative = 1e-12);
        }
    }

    #[test]
    fn corpus_loads_90_observations() {
        let d = ExperimentDataset::bread_corpus();
        assert_eq!(d.n(), 90);
        assert!(d.warnings.is_empty());
        let total: f64 = d.observations.iter().map(|o| o.y).sum();
        assert_relative_eq!(total, 44558.96, epsilon = 1e-9);
        // first run, (mix=5, proof=35)
        let first = d.observations[0];
        assert_eq!(first.x, [0.25, 0.75, 0.0]);
        assert_eq!(first.z, [-1.0, -1.0]);
        assert_relative_eq!(first.y, 378.89);
        // last run, (mix=25, proof=60)
        let last = d.observations[89];
        assert_eq!(last.x, [0.25, 0.0, 0.75]);
        assert_eq!(last.z, [1.0, 1.0]);
        assert_relative_eq!(last.y, 638.89);
        for o in &d.observations {
            assert!((o.x.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
            assert!(o.x.iter().all(|&xi| (0.0..=1.0).contains(&xi)));
        }
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let err = parse_wide_str("", &NoiseCoding::bread(), "t").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = parse_long_str("x1,x2,x3,z1_raw,z2_raw,y\n", &NoiseCoding::bread(), "t");
        assert!(err.is_err());
    }

    #[test]
    fn wrong_column_count_names_the_row() {
        let text = "run,x1,x2,x3,v_5_35\n1,0.25,0.75,0.0,378.89\n2,0.5,0.5\n";
        let err = parse_wide_str(text, &NoiseCoding::bread(), "t").unwrap_err();
        match err {
            Error::Parse { context, .. } => assert!(context.contains("line 3")),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let dup_col = "run,x1,x2,x3,v_5_35,v_5_35\n1,0.25,0.75,0.0,378.89,380.0\n";
        assert!(parse_wide_str(dup_col, &NoiseCoding::bread(), "t").is_err());
        let dup_run = "run,x1,x2,x3,v_5_35\n1,0.25,0.75,0.0,378.89\n1,0.5,0.5,0.0,400.0\n";
        assert!(parse_wide_str(dup_run, &NoiseCoding::bread(), "t").is_err());
    }

    #[test]
    fn off_simplex_rows_are_rejected_or_renormalized() {
        let bad = "run,x1,x2,x3,v_5_35\n1,0.25,0.70,0.00,378.89\n";
        assert!(parse_wide_str(bad, &NoiseCoding::bread(), "t").is_err());
        let close = "run,x1,x2,x3,v_5_35\n1,0.2500001,0.75,0.00,378.89\n";
        let d = parse_wide_str(close, &NoiseCoding::bread(), "t").unwrap();
        assert_eq!(d.warnings.len(), 1);
        assert!((d.observations[0].x.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
    }

    #[test]
    fn long_format_round_trip_against_wide() {
        let wide = ExperimentDataset::bread_corpus();
        let coding = NoiseCoding::bread();
        let mut text = String::from("x1,x2,x3,z1_raw,z2_raw,y\n");
        for o in &wide.observations {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                o.x[0],
                o.x[1],
                o.x[2],
                coding.decode(0, o.z[0]),
                coding.decode(1, o.z[1]),
                o.y
            ));
        }
        let long = parse_long_str(&text, &coding, "t").unwrap();
        assert_eq!(long.n(), wide.n());
        for (a, b) in long.observations.iter().zip(&wide.observations) {
            assert_relative_eq!(a.y, b.y);
            assert_relative_eq!(a.z[0], b.z[0], epsilon = 1e-12);
            assert_relative_eq!(a.z[1], b.z[1], epsilon = 1e-12);
        }
    }
}
