//! Command-line surface: ingestion, fitting, diagnostics, moment models, and
//! robust-design optimization as deterministic, file-producing runs.

mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::FileConfig;
use ndarray::Array1;
use robmix::dataset::{load_long_csv, load_wide_csv};
use robmix::glm::{ols_fit, wald_table, TailReference};
use robmix::jmmd::{
    backward_select, deviance_test_dispersion_term, eql_lrt_mean_term, fit_joint, residuals,
    simulate_envelope, ModelComparison,
};
use robmix::moments::{delta_moment_model, jmmd_moment_model};
use robmix::optimizer::{
    bread_scenarios, grid_oracle, run_scenarios, scenario_to_coded, DeltaSource,
    RobustDesignProblem, ScenarioMethod, ScenarioRequest, ScenarioSources, ScenarioSpec,
    BREAD_BOUNDS,
};
use robmix::probstats::breusch_pagan_studentized;
use robmix::terms::presets;
use robmix::{
    Error, EvalMode, ExperimentDataset, JointFit, JointModelSpec, LinearPredictorSpec,
    NoiseCoding, Result, VarianceFunction,
};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "robmix", version, about = "Joint mean/dispersion modelling and robust blend optimization for mixture experiments with noise variables")]
struct Cli {
    /// Flat key = value configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every stochastic step; reruns are byte-identical.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Closed-form evaluation mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Table output format.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Paper,
    Exact,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Paper => EvalMode::Paper,
            ModeArg::Exact => EvalMode::Exact,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LayoutArg {
    Wide,
    Long,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Jmmd,
    Delta,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset CSV; defaults to the embedded bread corpus.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Dataset layout.
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write it in long form with a summary.
    Ingest(DataArgs),
    /// Ordinary least-squares fit of the mean model.
    FitOls {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated mean-model terms (defaults to the 18-term model).
        #[arg(long)]
        mean_terms: Option<String>,
    },
    /// Joint mean/dispersion fit with Wald and single-term test columns.
    FitJmmd {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        mean_terms: Option<String>,
        #[arg(long)]
        dispersion_terms: Option<String>,
        /// Relative tolerance on the outer EQL criterion.
        #[arg(long)]
        outer_tol: Option<f64>,
    },
    /// Fit and score the four canonical joint models.
    Compare {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Residual, leverage, envelope, and heteroscedasticity diagnostics.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        /// Envelope replicates.
        #[arg(long)]
        n_sim: Option<usize>,
    },
    /// Evaluate E(Y) and Var(Y) at blends under a noise scenario.
    Moments {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "jmmd")]
        method: MethodArg,
        /// Raw mixing-time mean (minutes).
        #[arg(long)]
        mu_mix: f64,
        /// Raw mixing-time variance (minutes^2).
        #[arg(long)]
        var_mix: f64,
        /// Raw proofing-time mean (minutes).
        #[arg(long)]
        mu_proof: f64,
        /// Raw proofing-time variance (minutes^2).
        #[arg(long)]
        var_proof: f64,
        /// Blend "x1,x2,x3"; repeatable.
        #[arg(long = "x", required = true)]
        blends: Vec<String>,
        /// Residual variance for the delta method (defaults to the OLS estimate).
        #[arg(long)]
        delta_sigma2: Option<f64>,
    },
    /// Solve the robust-design problem over a scenario batch.
    Optimize {
        #[command(flatten)]
        data: DataArgs,
        /// Scenario CSV `mu_mix,var_mix,mu_proof,var_proof,method,mode`;
        /// defaults to the eight canonical scenarios for both methods.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long)]
        target: Option<f64>,
        #[arg(long)]
        mean_tol: Option<f64>,
        #[arg(long)]
        n_starts: Option<usize>,
        /// Residual variance for the delta method (defaults to the OLS estimate).
        #[arg(long)]
        delta_sigma2: Option<f64>,
        /// Also run the brute-force grid oracle and emit its column.
        #[arg(long)]
        with_oracle: bool,
    },
    /// Backward term selection from a starting joint model.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        mean_terms: Option<String>,
        #[arg(long)]
        dispersion_terms: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

/// Settings resolved from defaults, then the config file, then flags.
struct Run {
    file: FileConfig,
    seed: u64,
    mode: EvalMode,
    out: PathBuf,
    format: FormatArg,
}

impl Run {
    fn resolve(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let seed = cli.seed.or(file.get_u64("seed")?).unwrap_or(20_240);
        let mode = cli
            .mode
            .map(EvalMode::from)
            .or_else(|| match file.get("mode") {
                Some("paper") => Some(EvalMode::Paper),
                Some("exact") => Some(EvalMode::Exact),
                _ => None,
            })
            .unwrap_or(EvalMode::Exact);
        let out = cli
            .out
            .clone()
            .or_else(|| file.get("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let format = cli
            .format
            .or_else(|| match file.get("format") {
                Some("json") => Some(FormatArg::Json),
                Some("csv") => Some(FormatArg::Csv),
                _ => None,
            })
            .unwrap_or(FormatArg::Csv);
        Ok(Self {
            file,
            seed,
            mode,
            out,
            format,
        })
    }

    fn dataset(&self, args: &DataArgs) -> Result<ExperimentDataset> {
        let coding = NoiseCoding::bread();
        let path = args
            .data
            .clone()
            .or_else(|| self.file.get("data").map(PathBuf::from));
        let layout = args.layout.or_else(|| match self.file.get("layout") {
            Some("long") => Some(LayoutArg::Long),
            Some("wide") => Some(LayoutArg::Wide),
            _ => None,
        });
        let data = match path {
            Some(p) => match layout.unwrap_or(LayoutArg::Wide) {
                LayoutArg::Wide => load_wide_csv(&p, &coding)?,
                LayoutArg::Long => load_long_csv(&p, &coding)?,
            },
            None => ExperimentDataset::bread_corpus(),
        };
        for w in &data.warnings {
            eprintln!("warning: {w}");
        }
        Ok(data)
    }

    fn spec_from(
        &self,
        flag: &Option<String>,
        key: &str,
        default: fn() -> LinearPredictorSpec,
    ) -> Result<LinearPredictorSpec> {
        let text = flag.clone().or_else(|| self.file.get(key).map(String::from));
        match text {
            Some(t) => {
                let labels: Vec<&str> = t.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                LinearPredictorSpec::from_labels(&labels)
            }
            None => Ok(default()),
        }
    }

    fn write(&self, name: &str, content: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        std::fs::write(&path, content)?;
        Ok(path)
    }

    fn table_name(&self, stem: &str) -> String {
        match self.format {
            FormatArg::Csv => format!("{stem}.csv"),
            FormatArg::Json => format!("{stem}.json"),
        }
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn csv_of<S: Serialize>(header: &str, rows: &[S], to_line: impl Fn(&S) -> String) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&to_line(r));
        out.push('\n');
    }
    out
}

fn table_payload<S: Serialize>(
    format: FormatArg,
    header: &str,
    rows: &[S],
    to_line: impl Fn(&S) -> String,
) -> Result<String> {
    Ok(match format {
        FormatArg::Csv => csv_of(header, rows, to_line),
        FormatArg::Json => {
            let mut s = serde_json::to_string_pretty(rows)
                .map_err(|e| Error::Io(e.to_string()))?;
            s.push('\n');
            s
        }
    })
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_ingest(run: &Run, args: &DataArgs) -> Result<()> {
    let data = run.dataset(args)?;
    let coding = NoiseCoding::bread();
    let mut long = String::from("x1,x2,x3,z1_raw,z2_raw,y\n");
    for o in &data.observations {
        long.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt(o.x[0]),
            fmt(o.x[1]),
            fmt(o.x[2]),
            fmt(coding.decode(0, o.z[0])),
            fmt(coding.decode(1, o.z[1])),
            fmt(o.y)
        ));
    }
    let p1 = run.write("long.csv", &long)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        n: usize,
        provenance: &'a str,
        y_total: f64,
        warnings: &'a [String],
    }
    let summary = Summary {
        n: data.n(),
        provenance: &data.provenance,
        y_total: data.observations.iter().map(|o| o.y).sum(),
        warnings: &data.warnings,
    };
    let p2 = run.write(
        "ingest_summary.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?
        ),
    )?;
    println!("wrote {} and {}", p1.display(), p2.display());
    Ok(())
}

fn cmd_fit_ols(run: &Run, args: &DataArgs, mean_terms: &Option<String>) -> Result<()> {
    let data = run.dataset(args)?;
    let spec = run.spec_from(mean_terms, "mean_terms", presets::mean_model_18)?;
    let fit = ols_fit(&spec, &data)?;
    let n = data.n();
    let p = spec.p();
    let deviance = fit.deviance();
    let sigma2 = deviance / (n - p) as f64;

    let design = spec.design_matrix(&data);
    let rows = wald_table(
        &spec,
        &design,
        &fit,
        robmix::Link::Identity,
        VarianceFunction::Constant,
        &Array1::from_elem(n, sigma2),
        TailReference::StudentT,
    )?;
    let table = table_payload(
        run.format,
        "term,estimate,std_error,t_value,p_value",
        &rows,
        |r| {
            format!(
                "{},{},{},{},{}",
                r.term,
                fmt(r.estimate),
                fmt(r.std_error),
                fmt(r.t_value),
                fmt(r.p_value)
            )
        },
    )?;
    let p1 = run.write(&run.table_name("ols_coefficients"), &table)?;

    #[derive(Serialize)]
    struct OlsSummary {
        n: usize,
        p: usize,
        deviance: f64,
        sigma2: f64,
        pseudo_r2: f64,
    }
    let eta = design.dot(&fit.beta);
    let summary = OlsSummary {
        n,
        p,
        deviance,
        sigma2,
        pseudo_r2: robmix::jmmd::pseudo_r2(
            &eta,
            &Array1::from(data.responses()),
            robmix::Link::Identity,
        )?,
    };
    let p2 = run.write(
        "ols_summary.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?
        ),
    )?;
    println!("wrote {} and {}", p1.display(), p2.display());
    Ok(())
}

fn joint_fit_from(
    run: &Run,
    data: &ExperimentDataset,
    mean_terms: &Option<String>,
    dispersion_terms: &Option<String>,
    outer_tol: Option<f64>,
) -> Result<(JointModelSpec, JointFit)> {
    let mean = run.spec_from(mean_terms, "mean_terms", presets::mean_model_18)?;
    let dispersion =
        run.spec_from(dispersion_terms, "dispersion_terms", presets::dispersion_model_16)?;
    let mut spec = JointModelSpec::gaussian(mean, dispersion);
    if let Some(t) = outer_tol.or(run.file.get_f64("outer_tol")?) {
        spec.outer_tol = t;
    }
    if let Some(t) = run.file.get_f64("inner_tol")? {
        spec.inner_tol = t;
    }
    let fit = fit_joint(&spec, data)?;
    Ok((spec, fit))
}

#[derive(Serialize)]
struct TermTableRow {
    term: String,
    estimate: f64,
    std_error: f64,
    t_value: f64,
    p_value: f64,
    reduced_stat: f64,
    chisq: f64,
    chisq_p: f64,
}

fn jmmd_tables(fit: &JointFit) -> Result<(Vec<TermTableRow>, Vec<TermTableRow>)> {
    let n = fit.n();
    // mean model: dispersion vector = fitted phi
    let wald_mean = wald_table(
        &fit.spec.mean,
        &fit.mean_design,
        &fit.mean_fit,
        fit.spec.mean_link,
        fit.spec.mean_variance,
        fit.phi(),
        TailReference::StudentT,
    )?;
    let mut mean_rows = Vec::with_capacity(fit.p());
    for (w, term) in wald_mean.into_iter().zip(fit.spec.mean.terms()) {
        let t = eql_lrt_mean_term(fit, term)?;
        mean_rows.push(TermTableRow {
            term: w.term,
            estimate: w.estimate,
            std_error: w.std_error,
            t_value: w.t_value,
            p_value: w.p_value,
            reduced_stat: t.reduced_stat,
            chisq: t.chisq,
            chisq_p: t.p_value,
        });
    }
    // dispersion model: gamma with dispersion 2 and prior weight (1-h)/2
    let mut disp_dispersion = Array1::zeros(n);
    for i in 0..n {
        disp_dispersion[i] = 2.0 / (1.0 - fit.mean_fit.hat[i]);
    }
    let wald_disp = wald_table(
        &fit.spec.dispersion,
        &fit.dispersion_design,
        &fit.dispersion_fit,
        robmix::Link::Log,
        VarianceFunction::Squared,
        &disp_dispersion,
        TailReference::StudentT,
    )?;
    let mut disp_rows = Vec::with_capacity(fit.q());
    for (w, term) in wald_disp.into_iter().zip(fit.spec.dispersion.terms()) {
        let t = deviance_test_dispersion_term(fit, term)?;
        disp_rows.push(TermTableRow {
            term: w.term,
            estimate: w.estimate,
            std_error: w.std_error,
            t_value: w.t_value,
            p_value: w.p_value,
            reduced_stat: t.reduced_stat,
            chisq: t.chisq,
            chisq_p: t.p_value,
        });
    }
    Ok((mean_rows, disp_rows))
}

fn cmd_fit_jmmd(
    run: &Run,
    args: &DataArgs,
    mean_terms: &Option<String>,
    dispersion_terms: &Option<String>,
    outer_tol: Option<f64>,
) -> Result<()> {
    let data = run.dataset(args)?;
    let (_, fit) = joint_fit_from(run, &data, mean_terms, dispersion_terms, outer_tol)?;
    let (mean_rows, disp_rows) = jmmd_tables(&fit)?;

    let header = "term,estimate,std_error,t_value,p_value,reduced_stat,chisq,chisq_p";
    let line = |r: &TermTableRow| {
        format!(
            "{},{},{},{},{},{},{},{}",
            r.term,
            fmt(r.estimate),
            fmt(r.std_error),
            fmt(r.t_value),
            fmt(r.p_value),
            fmt(r.reduced_stat),
            fmt(r.chisq),
            fmt(r.chisq_p)
        )
    };
    let p1 = run.write(
        &run.table_name("jmmd_mean_coefficients"),
        &table_payload(run.format, header, &mean_rows, line)?,
    )?;
    let p2 = run.write(
        &run.table_name("jmmd_dispersion_coefficients"),
        &table_payload(run.format, header, &disp_rows, line)?,
    )?;

    #[derive(Serialize)]
    struct JointSummary {
        n: usize,
        p: usize,
        q: usize,
        minus2_qa: f64,
        aicq: f64,
        pseudo_r2: f64,
        dispersion_deviance: f64,
        cycles: usize,
        converged: bool,
        history: Vec<f64>,
    }
    let cmp = ModelComparison::for_fit(&fit)?;
    let summary = JointSummary {
        n: fit.n(),
        p: fit.p(),
        q: fit.q(),
        minus2_qa: fit.minus2_qa,
        aicq: cmp.aicq,
        pseudo_r2: cmp.pseudo_r2,
        dispersion_deviance: fit.dispersion_deviance(),
        cycles: fit.cycles,
        converged: fit.converged,
        history: fit.history.clone(),
    };
    let p3 = run.write(
        "jmmd_fit.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.to_string()))?
        ),
    )?;
    println!("wrote {}, {} and {}", p1.display(), p2.display(), p3.display());
    Ok(())
}

/// The four canonical joint models, described by their differences from the
/// base 18-term predictor.
fn canonical_joint_models() -> Vec<(String, String, JointModelSpec)> {
    let mean18 = presets::mean_model_18();
    let disp16 = presets::dispersion_model_16();
    let mean17 = mean18.without_label("x1:z1").unwrap();
    let mean16 = mean17.without_label("x1*x2*(x1-x2):z1").unwrap();
    let disp14 = mean18
        .without_label("x3:z1")
        .and_then(|s| s.without_label("x1*x2*(x1-x2):z1"))
        .and_then(|s| s.without_label("x1*x3:z2"))
        .and_then(|s| s.without_label("x1*x3*(x1-x3):z2"))
        .unwrap();
    vec![
        (
            "jm0".to_string(),
            "mean = base, dispersion = base".to_string(),
            JointModelSpec::gaussian(mean18.clone(), mean18.clone()),
        ),
        (
            "jm1".to_string(),
            "mean = base - {x1:z1}, dispersion = base".to_string(),
            JointModelSpec::gaussian(mean17, mean18.clone()),
        ),
        (
            "jm2".to_string(),
            "mean = base, dispersion = base - {x1:z1, x2:z1^2}".to_string(),
            JointModelSpec::gaussian(mean18.clone(), disp16),
        ),
        (
            "jm3".to_string(),
            "mean = base - {x1:z1, x1*x2*(x1-x2):z1}, dispersion = base - {x3:z1, x1*x2*(x1-x2):z1, x1*x3:z2, x1*x3*(x1-x3):z2}".to_string(),
            JointModelSpec::gaussian(mean16, disp14),
        ),
    ]
}

fn cmd_compare(run: &Run, args: &DataArgs) -> Result<()> {
    let data = run.dataset(args)?;
    #[derive(Serialize)]
    struct CompareRow {
        label: String,
        spec: String,
        p: usize,
        q: usize,
        minus2_qa: f64,
        aicq: f64,
        pseudo_r2: f64,
        cycles: usize,
    }
    let mut rows = Vec::new();
    for (label, desc, spec) in canonical_joint_models() {
        let fit = fit_joint(&spec, &data)?;
        let cmp = ModelComparison::for_fit(&fit)?;
        rows.push(CompareRow {
            label,
            spec: desc,
            p: fit.p(),
            q: fit.q(),
            minus2_qa: fit.minus2_qa,
            aicq: cmp.aicq,
            pseudo_r2: cmp.pseudo_r2,
            cycles: fit.cycles,
        });
    }
    let payload = table_payload(
        run.format,
        "label,spec,p,q,minus2_qa,aicq,pseudo_r2,cycles",
        &rows,
        |r| {
            format!(
                "{},\"{}\",{},{},{},{},{},{}",
                r.label,
                r.spec,
                r.p,
                r.q,
                fmt(r.minus2_qa),
                fmt(r.aicq),
                fmt(r.pseudo_r2),
                r.cycles
            )
        },
    )?;
    let p1 = run.write(&run.table_name("comparison"), &payload)?;
    println!("wrote {}", p1.display());
    Ok(())
}

fn cmd_diagnose(run: &Run, args: &DataArgs, n_sim: Option<usize>) -> Result<()> {
    let data = run.dataset(args)?;
    let (_, fit) = joint_fit_from(run, &data, &None, &None, None)?;
    let r = residuals(&fit)?;
    let p = fit.p() as f64;

    let mut mean_csv = String::from("order,y,fitted,eta,leverage,cooks,r_mean\n");
    for i in 0..fit.n() {
        let h = fit.mean_fit.hat[i];
        let cooks = r.r_mean[i] * r.r_mean[i] * h / (p * (1.0 - h));
        mean_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            fmt(fit.response[i]),
            fmt(fit.mean_fit.fitted[i]),
            fmt(fit.mean_fit.eta[i]),
            fmt(h),
            fmt(cooks),
            fmt(r.r_mean[i])
        ));
    }
    let p1 = run.write("mean_residuals.csv", &mean_csv)?;

    let mut disp_csv = String::from("order,dstar,phi,xi,leverage,r_dispersion\n");
    for i in 0..fit.n() {
        disp_csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            fmt(fit.dstar[i]),
            fmt(fit.phi()[i]),
            fmt(fit.dispersion_fit.eta[i]),
            fmt(fit.dispersion_fit.hat[i]),
            fmt(r.r_dispersion[i])
        ));
    }
    let p2 = run.write("dispersion_residuals.csv", &disp_csv)?;

    let n_sim = n_sim.or(run.file.get_usize("n_sim")?).unwrap_or(100);
    let env = simulate_envelope(&fit, n_sim, run.seed)?;
    let mut env_csv = String::from("rank,lower,median,upper,observed\n");
    for i in 0..fit.n() {
        env_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            fmt(env.lower[i]),
            fmt(env.median[i]),
            fmt(env.upper[i]),
            fmt(env.observed[i])
        ));
    }
    let p3 = run.write("envelope.csv", &env_csv)?;

    let mut pvo = String::from("order,observed,predicted\n");
    for i in 0..fit.n() {
        pvo.push_str(&format!(
            "{},{},{}\n",
            i + 1,
            fmt(fit.response[i]),
            fmt(fit.mean_fit.fitted[i])
        ));
    }
    let p4 = run.write("predicted_vs_observed.csv", &pvo)?;

    // heteroscedasticity check on the unit-weight mean fit, with the
    // dispersion design as the auxiliary regressor set
    let ols = ols_fit(&fit.spec.mean, &data)?;
    let resid = Array1::from(data.responses()) - &ols.fitted;
    let bp = breusch_pagan_studentized(&fit.dispersion_design, &resid)?;
    let bp_mean_aux = breusch_pagan_studentized(&fit.mean_design, &resid)?;
    #[derive(Serialize)]
    struct Diag {
        bp_stat: f64,
        bp_df: usize,
        bp_p_value: f64,
        bp_mean_aux_stat: f64,
        bp_mean_aux_df: usize,
        bp_mean_aux_p_value: f64,
        envelope_replicates: usize,
        envelope_failures: usize,
        dispersion_phi_hat: f64,
    }
    let diag = Diag {
        bp_stat: bp.stat,
        bp_df: bp.df,
        bp_p_value: bp.p_value,
        bp_mean_aux_stat: bp_mean_aux.stat,
        bp_mean_aux_df: bp_mean_aux.df,
        bp_mean_aux_p_value: bp_mean_aux.p_value,
        envelope_replicates: env.replicates_used,
        envelope_failures: env.replicates_failed,
        dispersion_phi_hat: r.phi_hat,
    };
    let p5 = run.write(
        "diagnostics.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&diag).map_err(|e| Error::Io(e.to_string()))?
        ),
    )?;
    println!(
        "wrote {}, {}, {}, {} and {}",
        p1.display(),
        p2.display(),
        p3.display(),
        p4.display(),
        p5.display()
    );
    Ok(())
}

fn parse_blend(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            context: "blend".to_string(),
            message: format!("expected x1,x2,x3 got {text:?}"),
        });
    }
    let mut x = [0.0; 3];
    for (i, part) in parts.iter().enumerate() {
        x[i] = part.parse().map_err(|_| Error::Parse {
            context: "blend".to_string(),
            message: format!("bad number {part:?}"),
        })?;
    }
    Ok(x)
}

#[allow(clippy::too_many_arguments)]
fn cmd_moments(
    run: &Run,
    args: &DataArgs,
    method: MethodArg,
    scenario: ScenarioSpec,
    blends: &[String],
    delta_sigma2: Option<f64>,
) -> Result<()> {
    let data = run.dataset(args)?;
    let coding = NoiseCoding::bread();
    let noise = scenario_to_coded(&scenario, &coding)?;
    let model = match method {
        MethodArg::Jmmd => {
            let (_, fit) = joint_fit_from(run, &data, &None, &None, None)?;
            jmmd_moment_model(&fit, &noise, run.mode)?
        }
        MethodArg::Delta => {
            let spec = run.spec_from(&None, "mean_terms", presets::mean_model_18)?;
            let fit = ols_fit(&spec, &data)?;
            let sigma2 = delta_sigma2
                .unwrap_or_else(|| fit.deviance() / (data.n() - spec.p()) as f64);
            delta_moment_model(&spec, &fit.beta, sigma2, &noise, run.mode)?
        }
    };

    #[derive(Serialize)]
    struct MomentRow {
        x: [f64; 3],
        mean: Option<f64>,
        var: Option<f64>,
        feasible: bool,
        mode: String,
        method: String,
        error: Option<String>,
    }
    let mut rows = Vec::new();
    for b in blends {
        let x = parse_blend(b)?;
        let feasible = model.feasible(&x);
        let (mean, var, error) = match (model.mean_of(&x), model.var_of(&x)) {
            (Ok(m), Ok(v)) => (Some(m), Some(v), None),
            (m, v) => {
                let e = m.err().or(v.err()).map(|e| e.to_string());
                (None, None, e)
            }
        };
        rows.push(MomentRow {
            x,
            mean,
            var,
            feasible,
            mode: format!("{:?}", run.mode).to_lowercase(),
            method: match method {
                MethodArg::Jmmd => "jmmd".to_string(),
                MethodArg::Delta => "delta".to_string(),
            },
            error,
        });
    }
    let payload = format!(
        "{}\n",
        serde_json::to_string_pretty(&rows).map_err(|e| Error::Io(e.to_string()))?
    );
    let p1 = run.write("moments.json", &payload)?;
    print!("{payload}");
    println!("wrote {}", p1.display());
    Ok(())
}

fn parse_scenario_file(path: &Path) -> Result<Vec<ScenarioRequest>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        context: path.display().to_string(),
        message: "empty scenario file".to_string(),
    })?;
    let expect = "mu_mix,var_mix,mu_proof,var_proof,method,mode";
    if header.trim() != expect {
        return Err(Error::Parse {
            context: format!("{} header", path.display()),
            message: format!("expected `{expect}`"),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in lines {
        let context = format!("{} line {}", path.display(), lineno + 1);
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Parse {
                context,
                message: format!("expected 6 columns, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                context: context.clone(),
                message: format!("bad number {s:?}"),
            })
        };
        let method = match f[4] {
            "jmmd" => ScenarioMethod::Jmmd,
            "delta" => ScenarioMethod::Delta,
            other => {
                return Err(Error::Parse {
                    context,
                    message: format!("method must be jmmd or delta, got {other:?}"),
                })
            }
        };
        let mode = match f[5] {
            "paper" => EvalMode::Paper,
            "exact" => EvalMode::Exact,
            other => {
                return Err(Error::Parse {
                    context,
                    message: format!("mode must be paper or exact, got {other:?}"),
                })
            }
        };
        out.push(ScenarioRequest {
            scenario: ScenarioSpec {
                mu_raw: [num(f[0])?, num(f[2])?],
                sigma2_raw: [num(f[1])?, num(f[3])?],
            },
            method,
            mode,
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_optimize(
    run: &Run,
    args: &DataArgs,
    scenarios: &Option<PathBuf>,
    target: Option<f64>,
    mean_tol: Option<f64>,
    n_starts: Option<usize>,
    delta_sigma2: Option<f64>,
    with_oracle: bool,
) -> Result<()> {
    let data = run.dataset(args)?;
    let coding = NoiseCoding::bread();
    let target = target.or(run.file.get_f64("target")?).unwrap_or(530.0);
    let mean_tol = mean_tol.or(run.file.get_f64("mean_tol")?).unwrap_or(1e-3);
    let n_starts = n_starts.or(run.file.get_usize("n_starts")?).unwrap_or(32);

    let requests = match scenarios {
        Some(p) => parse_scenario_file(p)?,
        None => {
            let mut reqs = Vec::new();
            for s in bread_scenarios() {
                for method in [ScenarioMethod::Jmmd, ScenarioMethod::Delta] {
                    reqs.push(ScenarioRequest {
                        scenario: s,
                        method,
                        mode: run.mode,
                    });
                }
            }
            reqs
        }
    };

    let (_, joint) = joint_fit_from(run, &data, &None, &None, None)?;
    let mean_spec = run.spec_from(&None, "mean_terms", presets::mean_model_18)?;
    let ols = ols_fit(&mean_spec, &data)?;
    let sigma2 = delta_sigma2.unwrap_or_else(|| {
        ols.deviance() / (data.n() - mean_spec.p()) as f64
    });
    let sources = ScenarioSources {
        joint: Some(&joint),
        delta: Some(DeltaSource {
            spec: &mean_spec,
            coeffs: &ols.beta,
            sigma2_resid: sigma2,
        }),
    };
    let outcomes = run_scenarios(
        &requests,
        &sources,
        &coding,
        target,
        BREAD_BOUNDS,
        mean_tol,
        n_starts,
        run.seed,
    );

    let mut csv = String::from(
        "mu_mix,var_mix,mu_proof,var_proof,method,mode,x1,x2,x3,variance,mean,feasible,starts_tried,best_start,constraint_violation,oracle_variance,error\n",
    );
    for (req, out) in requests.iter().zip(&outcomes) {
        let oracle_var = if with_oracle {
            let noise = scenario_to_coded(&req.scenario, &coding)?;
            let model = match req.method {
                ScenarioMethod::Jmmd => jmmd_moment_model(&joint, &noise, req.mode),
                ScenarioMethod::Delta => {
                    delta_moment_model(&mean_spec, &ols.beta, sigma2, &noise, req.mode)
                }
            };
            match model
                .and_then(|m| RobustDesignProblem::new(m, target, BREAD_BOUNDS))
                .and_then(|p| grid_oracle(&p, 0.002, mean_tol.max(0.01)))
            {
                Ok(r) => fmt(r.var_star),
                Err(_) => String::from("NaN"),
            }
        } else {
            String::new()
        };
        let method = match req.method {
            ScenarioMethod::Jmmd => "jmmd",
            ScenarioMethod::Delta => "delta",
        };
        let mode = match req.mode {
            EvalMode::Paper => "paper",
            EvalMode::Exact => "exact",
        };
        match (&out.result, &out.error) {
            (Some(r), _) => csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},\n",
                fmt(req.scenario.mu_raw[0]),
                fmt(req.scenario.sigma2_raw[0]),
                fmt(req.scenario.mu_raw[1]),
                fmt(req.scenario.sigma2_raw[1]),
                method,
                mode,
                fmt(r.x_star[0]),
                fmt(r.x_star[1]),
                fmt(r.x_star[2]),
                fmt(r.var_star),
                fmt(r.mean_at_star),
                r.feasible,
                r.diagnostics.starts_tried,
                r.diagnostics.best_start,
                fmt(r.diagnostics.constraint_violation),
                oracle_var,
            )),
            (None, Some(e)) => csv.push_str(&format!(
                "{},{},{},{},{},{},,,,,,,,,,{},\"{}\"\n",
                fmt(req.scenario.mu_raw[0]),
                fmt(req.scenario.sigma2_raw[0]),
                fmt(req.scenario.mu_raw[1]),
                fmt(req.scenario.sigma2_raw[1]),
                method,
                mode,
                oracle_var,
                e.replace('"', "'"),
            )),
            (None, None) => unreachable!(),
        }
    }
    let p1 = run.write("optimization.csv", &csv)?;
    println!("wrote {}", p1.display());
    Ok(())
}

fn cmd_select(
    run: &Run,
    args: &DataArgs,
    mean_terms: &Option<String>,
    dispersion_terms: &Option<String>,
    alpha: Option<f64>,
) -> Result<()> {
    let data = run.dataset(args)?;
    let mean = run.spec_from(mean_terms, "mean_terms", presets::mean_model_18)?;
    let dispersion = run.spec_from(dispersion_terms, "dispersion_terms", presets::mean_model_18)?;
    let spec = JointModelSpec::gaussian(mean, dispersion);
    let alpha = alpha.or(run.file.get_f64("alpha")?).unwrap_or(0.05);
    let (fit, trace) = backward_select(&spec, &data, alpha)?;

    let payload = table_payload(
        run.format,
        "action,mean_p,dispersion_q,minus2_qa,aicq,pseudo_r2",
        &trace,
        |s| {
            format!(
                "\"{}\",{},{},{},{},{}",
                s.action,
                s.mean_p,
                s.dispersion_q,
                fmt(s.minus2_qa),
                fmt(s.aicq),
                fmt(s.pseudo_r2)
            )
        },
    )?;
    let p1 = run.write(&run.table_name("selection_trace"), &payload)?;

    #[derive(Serialize)]
    struct Selected {
        mean_terms: Vec<String>,
        dispersion_terms: Vec<String>,
        aicq: f64,
    }
    let selected = Selected {
        mean_terms: fit.spec.mean.labels(),
        dispersion_terms: fit.spec.dispersion.labels(),
        aicq: robmix::jmmd::aicq(fit.minus2_qa, fit.p(), fit.q()),
    };
    let p2 = run.write(
        "selected_model.json",
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&selected).map_err(|e| Error::Io(e.to_string()))?
        ),
    )?;
    println!("wrote {} and {}", p1.display(), p2.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let run = match Run::resolve(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let result = match &cli.command {
        Command::Ingest(args) => cmd_ingest(&run, args),
        Command::FitOls { data, mean_terms } => cmd_fit_ols(&run, data, mean_terms),
        Command::FitJmmd {
            data,
            mean_terms,
            dispersion_terms,
            outer_tol,
        } => cmd_fit_jmmd(&run, data, mean_terms, dispersion_terms, *outer_tol),
        Command::Compare { data } => cmd_compare(&run, data),
        Command::Diagnose { data, n_sim } => cmd_diagnose(&run, data, *n_sim),
        Command::Moments {
            data,
            method,
            mu_mix,
            var_mix,
            mu_proof,
            var_proof,
            blends,
            delta_sigma2,
        } => cmd_moments(
            &run,
            data,
            *method,
            ScenarioSpec {
                mu_raw: [*mu_mix, *mu_proof],
                sigma2_raw: [*var_mix, *var_proof],
            },
            blends,
            *delta_sigma2,
        ),
        Command::Optimize {
            data,
            scenarios,
            target,
            mean_tol,
            n_starts,
            delta_sigma2,
            with_oracle,
        } => cmd_optimize(
            &run,
            data,
            scenarios,
            *target,
            *mean_tol,
            *n_starts,
            *delta_sigma2,
            *with_oracle,
        ),
        Command::Select {
            data,
            mean_terms,
            dispersion_terms,
            alpha,
        } => cmd_select(&run, data, mean_terms, dispersion_terms, *alpha),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
