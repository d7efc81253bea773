//! Implementations of the CLI subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msir::dataset::{parse_csv, parse_predictors_csv, CsvOptions, Dataset, WidePolicy};
use msir::dimension::{
    bic_dimension, permutation_test, DimensionReport, Penalty, PermutationOptions,
};
use msir::fitdoc::{DatasetDigest, FitDocument, FitOptionsDigest};
use msir::simbench::{run_grid, Method, SimModel, SimulationSpec};
use msir::{
    classify as clf, fit_msir, CovParam, GmmOptions, MsirFit, MsirOptions, SliceSpec, Treatment,
};

use crate::{CliError, GmmArgs};

type CmdResult = Result<(), CliError>;

fn parse_slices(s: &str) -> Result<SliceSpec, CliError> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(SliceSpec::Auto);
    }
    match s.parse::<usize>() {
        Ok(h) if h >= 1 => Ok(SliceSpec::Fixed(h)),
        _ => Err(CliError::Usage(format!(
            "--slices must be \"auto\" or a positive integer, got {s:?}"
        ))),
    }
}

fn gmm_options(args: &GmmArgs) -> Result<GmmOptions, CliError> {
    let params = match &args.models {
        None => CovParam::ALL_MULTI.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<CovParam>())
            .collect::<msir::Result<Vec<_>>>()
            .map_err(CliError::Lib)?,
    };
    Ok(GmmOptions {
        max_components: args.max_components,
        params,
        tol: args.tol,
        max_iter: args.max_iter,
        restarts: args.restarts,
        ..GmmOptions::default()
    })
}

fn msir_options(
    slices: &str,
    discrete: bool,
    gmm: &GmmArgs,
    seed: u64,
) -> Result<MsirOptions, CliError> {
    Ok(MsirOptions {
        slices: parse_slices(slices)?,
        treatment: if discrete {
            Treatment::Discrete
        } else {
            Treatment::Auto
        },
        gmm: gmm_options(gmm)?,
        seed,
    })
}

fn digests(
    data: &Dataset,
    slices: &str,
    discrete: bool,
    gmm: &GmmArgs,
    seed: u64,
) -> (DatasetDigest, FitOptionsDigest) {
    let models = match &gmm.models {
        Some(m) => m.clone(),
        None => CovParam::ALL_MULTI.iter().map(|p| p.to_string()).collect(),
    };
    (
        DatasetDigest {
            n: data.n(),
            p: data.p(),
            predictors: data.predictor_names.clone(),
            response: data.response_name.clone(),
        },
        FitOptionsDigest {
            slices: slices.to_owned(),
            discrete,
            max_components: gmm.max_components,
            models,
            tol: gmm.tol,
            max_iter: gmm.max_iter,
            restarts: gmm.restarts,
            seed,
        },
    )
}

fn fit_summary(fit: &MsirFit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "slices: {}   components: {}", fit.sliced.h, fit.total_components());
    if !fit.slice_mixtures.is_empty() {
        let per: Vec<String> = fit
            .slice_mixtures
            .iter()
            .map(|m| format!("{}x{}", m.k(), m.param))
            .collect();
        let _ = writeln!(out, "per-slice models: {}", per.join(" "));
    }
    let eig: Vec<String> = fit.eigenvalues.iter().map(|l| format!("{l:.4}")).collect();
    let _ = writeln!(out, "eigenvalues: {}", eig.join(" "));
    out
}

pub fn fit(
    input: &Path,
    response: &str,
    slices: &str,
    discrete: bool,
    gmm: &GmmArgs,
    seed: u64,
    output: &Path,
) -> CmdResult {
    let csv_opts = CsvOptions {
        wide_policy: WidePolicy::Error,
    };
    let data = parse_csv(input, response, &csv_opts)?;
    let opts = msir_options(slices, discrete, gmm, seed)?;
    let fit = fit_msir(&data, &opts)?;
    print!("{}", fit_summary(&fit));
    let (ds, od) = digests(&data, slices, discrete, gmm, seed);
    let doc = FitDocument::from_fit(&fit, ds, od);
    doc.save(output)?;
    println!("fit written to {}", output.display());
    Ok(())
}

pub struct DimArgs {
    pub fit: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub response: Option<String>,
    pub slices: String,
    pub discrete: bool,
    pub gmm: GmmArgs,
    pub method: String,
    pub permutations: usize,
    pub alpha: f64,
    pub penalty: String,
    pub exhaustive: bool,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

fn print_dimension_table(report: &DimensionReport) {
    let p = report.lambda_stats.len();
    let mut header = String::from("Structural dimension ");
    for d in 0..p {
        let _ = write!(header, "{d:>10}");
    }
    println!("{header}");
    let mut stat = String::from("Test statistic       ");
    for v in &report.lambda_stats {
        let _ = write!(stat, "{v:>10.4}");
    }
    println!("{stat}");
    if let Some(g) = &report.g {
        let mut row = String::from("BIC-type criterion   ");
        for v in g {
            let _ = write!(row, "{v:>10.4}");
        }
        println!("{row}");
    }
    if let Some(pvals) = &report.p_values {
        let mut row = String::from("Permutation p-value  ");
        for v in pvals {
            let _ = write!(row, "{v:>10.4}");
        }
        println!("{row}");
    }
    match (report.d_perm, report.d_bic) {
        (Some(dp), Some(db)) => println!("selected dimension: permutation={dp} bic={db}"),
        (Some(dp), None) => println!("selected dimension: permutation={dp}"),
        (None, Some(db)) => println!("selected dimension: bic={db}"),
        (None, None) => {}
    }
}

pub fn dim(args: DimArgs) -> CmdResult {
    let penalty: Penalty = args.penalty.parse()?;
    let want_perm = matches!(args.method.as_str(), "perm" | "both");
    let want_bic = matches!(args.method.as_str(), "bic" | "both");
    if !want_perm && !want_bic {
        return Err(CliError::Usage(format!(
            "--method must be perm, bic, or both, got {:?}",
            args.method
        )));
    }

    let data = match (&args.input, &args.response) {
        (Some(input), Some(response)) => Some(parse_csv(
            input,
            response,
            &CsvOptions {
                wide_policy: WidePolicy::Error,
            },
        )?),
        (Some(_), None) => {
            return Err(CliError::Usage(
                "--input requires --response to name the response column".into(),
            ))
        }
        _ => None,
    };

    let perm_report = if want_perm {
        let Some(data) = &data else {
            return Err(CliError::Usage(
                "the permutation test re-runs the estimation on raw data; pass --input and --response (a fit document alone is not enough)"
                    .into(),
            ));
        };
        let opts = PermutationOptions {
            fit: msir_options(&args.slices, args.discrete, &args.gmm, args.seed)?,
            n_perms: args.permutations,
            alpha: args.alpha,
            exhaustive: args.exhaustive,
            ..PermutationOptions::default()
        };
        Some(permutation_test(data, &opts)?)
    } else {
        None
    };

    let bic_report = if want_bic {
        if let Some(doc_path) = &args.fit {
            let doc = FitDocument::load(doc_path)?;
            Some(doc.bic_dimension(penalty))
        } else if let Some(data) = &data {
            let opts = msir_options(&args.slices, args.discrete, &args.gmm, args.seed)?;
            let fit = fit_msir(data, &opts)?;
            Some(bic_dimension(&fit, penalty))
        } else {
            return Err(CliError::Usage(
                "--method bic needs either --fit or (--input, --response)".into(),
            ));
        }
    } else {
        None
    };

    let report = match (perm_report, bic_report) {
        (Some(p), Some(b)) => DimensionReport::merged(p, b),
        (Some(p), None) => p,
        (None, Some(b)) => b,
        (None, None) => unreachable!("at least one method is requested"),
    };
    print_dimension_table(&report);
    if let Some(out) = &args.output {
        std::fs::write(out, serde_json::to_string_pretty(&report).map_err(msir::Error::from)?)
            .map_err(msir::Error::from)?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

pub fn project(
    fit_path: &Path,
    input: &Path,
    response: Option<&str>,
    dims: usize,
    output: &Path,
) -> CmdResult {
    let doc = FitDocument::load(fit_path)?;
    let x = match response {
        Some(col) => {
            let data = parse_csv(input, col, &CsvOptions::default())?;
            data.predictors
        }
        None => parse_predictors_csv(input)?.0,
    };
    let z = doc.project(x.view(), dims)?;
    let mut out = String::new();
    let cols: Vec<String> = (1..=dims).map(|j| format!("z{j}")).collect();
    out.push_str(&cols.join(","));
    out.push('\n');
    for row in z.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(output, out).map_err(msir::Error::from)?;
    println!(
        "projected {} rows onto {} directions -> {}",
        z.nrows(),
        dims,
        output.display()
    );
    Ok(())
}

pub struct SimulateArgs {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub sigma: f64,
    pub rho: f64,
    pub a: f64,
    pub reps: usize,
    pub methods: Option<Vec<String>>,
    pub h_sweep: Option<Vec<usize>>,
    pub gmm: GmmArgs,
    pub seed: u64,
    pub output: PathBuf,
    pub summary: Option<PathBuf>,
}

pub fn simulate(args: SimulateArgs) -> CmdResult {
    let model: SimModel = args.model.parse()?;
    let methods = match &args.methods {
        None => Method::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Method>())
            .collect::<msir::Result<Vec<_>>>()
            .map_err(CliError::Lib)?,
    };
    let base = SimulationSpec {
        sigma: args.sigma,
        rho: args.rho,
        a: args.a,
        methods,
        reps: args.reps,
        seed: args.seed,
        msir: MsirOptions {
            gmm: gmm_options(&args.gmm)?,
            ..MsirOptions::default()
        },
        ..SimulationSpec::new(model, args.n, args.p)
    };
    let specs: Vec<SimulationSpec> = match &args.h_sweep {
        None => vec![base],
        Some(hs) => hs
            .iter()
            .map(|&h| SimulationSpec {
                h: Some(h),
                ..base.clone()
            })
            .collect(),
    };
    let result = run_grid(&specs)?;
    std::fs::write(&args.output, result.to_csv()).map_err(msir::Error::from)?;
    println!("{} rows -> {}", result.rows.len(), args.output.display());
    if let Some(summary) = &args.summary {
        std::fs::write(summary, result.aggregate_csv()).map_err(msir::Error::from)?;
        println!("aggregates -> {}", summary.display());
    }
    Ok(())
}

pub fn classify(
    train_path: &Path,
    test_path: &Path,
    label_col: &str,
    dims: usize,
    gmm: &GmmArgs,
    seed: u64,
    output: &Path,
) -> CmdResult {
    let train_data = parse_csv(
        train_path,
        label_col,
        &CsvOptions {
            wide_policy: WidePolicy::Error,
        },
    )?;
    let test_data = parse_csv(test_path, label_col, &CsvOptions::default())?;
    let clf = clf::train(
        &train_data,
        dims,
        &clf::TrainOptions {
            gmm: gmm_options(gmm)?,
            seed,
        },
    )?;
    let train_err = clf.error_rate(&train_data)?;
    let test_err = clf.error_rate(&test_data)?;
    println!(
        "classes: {}   training error: {:.4}   test error: {:.4}",
        clf.classes.join(","),
        train_err,
        test_err
    );

    let mut out = String::from("row_id,predicted");
    for class in &clf.classes {
        out.push_str(&format!(",posterior_{class}"));
    }
    out.push('\n');
    for (i, row) in test_data.predictors.rows().into_iter().enumerate() {
        let post = clf.posterior(row)?;
        let pred = &clf.classes[clf.predict(row)?];
        out.push_str(&format!("{},{}", i + 1, pred));
        for p in post {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    std::fs::write(output, out).map_err(msir::Error::from)?;
    println!("predictions -> {}", output.display());
    Ok(())
}
