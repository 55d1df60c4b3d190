use std::fmt::Write as _;

use anyhow::anyhow;
use latentdif::simulation::StudySummary;
use latentdif::{
    classify_map, flag_dif_items, generate, make_grid, run_path, run_study, select_num_classes, EmConfig, ModelParams,
    PathConfig, PathReport, QuadratureGrid, ResponseMatrix, SimulationDesign, StudyOptions,
};
use serde::Serialize;

use crate::io::{parse_list, read_json, read_params, read_responses, responses_csv, to_json, OutputDir};
use crate::{
    ClassifyArgs, CliError, Command, EstimationArgs, FitArgs, LambdaArgs, PathArgs, SelectKArgs, SimulateArgs,
    StudyArgs,
};

pub fn run(command: Command) -> Result<u8, CliError> {
    match command {
        Command::Simulate(args) => simulate(args),
        Command::Fit(args) => fit(args),
        Command::Path(args) => path(args),
        Command::SelectK(args) => select_k(args),
        Command::Classify(args) => classify(args),
        Command::Study(args) => study(args),
    }
}

fn em_config(args: &EstimationArgs, seed: u64) -> Result<EmConfig, CliError> {
    let config = EmConfig {
        max_iterations: args.max_iter,
        objective_tolerance: args.tol,
        n_random_starts: args.starts,
        seed,
        ..EmConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn path_config(args: &LambdaArgs) -> Result<PathConfig, CliError> {
    let config = match &args.lambdas {
        Some(text) => PathConfig::with_lambdas(parse_list(text).map_err(|e| CliError::Usage(e.context("--lambdas")))?),
        None => PathConfig { n_lambdas: args.n_lambdas, ..PathConfig::default() },
    };
    config.validate()?;
    Ok(config)
}

fn grid(nodes: usize) -> Result<QuadratureGrid, CliError> {
    Ok(make_grid(nodes)?)
}

fn candidates(text: &str) -> Result<Vec<usize>, CliError> {
    parse_list(text).map_err(|e| CliError::Usage(e.context("--k-candidates")))
}

fn check_params(params: &ModelParams) -> Result<(), CliError> {
    if params.is_valid() {
        Ok(())
    } else {
        Err(CliError::Invariant(anyhow!("selected parameters violate the model constraints: {:?}", params.validate())))
    }
}

#[derive(Serialize)]
struct Truth<'a> {
    params: &'a ModelParams,
    labels: &'a [usize],
    thetas: &'a [f64],
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    replication: u64,
    design: &'a SimulationDesign,
}

fn load_design(path: &std::path::Path, seed: u64) -> Result<SimulationDesign, CliError> {
    let mut design: SimulationDesign = read_json(path)?;
    design.seed = seed;
    design.validate()?;
    Ok(design)
}

fn simulate(args: SimulateArgs) -> Result<u8, CliError> {
    let design = load_design(&args.design, args.seed)?;
    let out = OutputDir::prepare(&args.output_dir)?;
    let bundle = generate(&design, args.replication)?;
    out.write("responses.csv", &responses_csv(&bundle.data))?;
    out.write(
        "truth.json",
        &to_json(&Truth { params: &bundle.true_params, labels: &bundle.true_labels, thetas: &bundle.true_thetas }),
    )?;
    out.write(
        "manifest.json",
        &to_json(&Manifest {
            tool: "latentdif",
            version: env!("CARGO_PKG_VERSION"),
            seed: args.seed,
            replication: args.replication,
            design: &design,
        }),
    )?;
    println!(
        "simulated {} respondents x {} items (seed {}, replication {})",
        bundle.data.n_respondents(),
        bundle.data.n_items(),
        args.seed,
        args.replication
    );
    Ok(0)
}

fn fit(args: FitArgs) -> Result<u8, CliError> {
    let data = read_responses(&args.input)?;
    let em = em_config(&args.estimation, args.seed)?;
    let path = path_config(&args.lambda)?;
    let grid = grid(args.estimation.quad_nodes)?;
    let ks = if args.k_auto { Some(candidates(&args.k_candidates)?) } else { None };
    let out = OutputDir::prepare(&args.output_dir)?;

    let (report, bic_by_k) = match ks {
        Some(ks) => {
            let selection = select_num_classes(&data, &ks, &path, &em, &grid)?;
            let report = selection.reports[&selection.best_k].clone();
            (report, Some(selection.bic_by_k))
        }
        None => (run_path(&data, args.k.expect("clap enforces --k or --k-auto"), &path, &em, &grid)?, None),
    };
    let params = report.selected_params();
    check_params(params)?;
    let classification = classify_map(&data, params, &grid)?;

    out.write("params.json", &to_json(params))?;
    out.write("path.csv", &report.to_csv())?;
    let flagged: String = flag_dif_items(&report).iter().map(|j| format!("item_{}\n", j + 1)).collect();
    out.write("flagged.txt", &flagged)?;
    out.write("labels.csv", &classification.to_csv())?;
    if let Some(bics) = &bic_by_k {
        out.write("bic_by_k.csv", &bic_table(bics))?;
    }
    let text = fit_report(&data, &report, bic_by_k.as_ref(), &classification.map_labels);
    out.write("report.txt", &text)?;
    print!("{text}");
    Ok(0)
}

fn bic_table(bics: &std::collections::BTreeMap<usize, f64>) -> String {
    let mut s = String::from("k,bic\n");
    for (k, b) in bics {
        let _ = writeln!(s, "{k},{b}");
    }
    s
}

fn fit_report(
    data: &ResponseMatrix,
    report: &PathReport,
    bic_by_k: Option<&std::collections::BTreeMap<usize, f64>>,
    labels: &[usize],
) -> String {
    let params = report.selected_params();
    let record = report.selected();
    let k = params.n_extra_classes();
    let mut s = String::new();
    let _ = writeln!(s, "respondents: {}  items: {}", data.n_respondents(), data.n_items());
    let _ = writeln!(s, "K* = {k} non-reference class(es)");
    let _ = writeln!(s, "selected lambda: {:.4}", report.selected_lambda);
    let _ = writeln!(s, "BIC: {:.2}", report.selected_bic());
    if let Some(refit) = &record.refit {
        let _ = writeln!(s, "log-likelihood: {:.2}", refit.final_loglik);
    }
    if let Some(bics) = bic_by_k {
        let _ = writeln!(s, "\nBIC by K:");
        for (kk, b) in bics {
            let _ = writeln!(s, "  K={kk}  {b:.2}");
        }
    }
    let _ = writeln!(s, "\nclass  proportion  mean    sd      MAP share");
    for c in 0..params.n_classes() {
        let share = labels.iter().filter(|&&l| l == c).count() as f64 / labels.len() as f64;
        let _ = writeln!(
            s,
            "{c:<6} {:<11.4} {:<7.3} {:<7.3} {share:.4}",
            params.class_proportions[c], params.class_means[c], params.class_sds[c]
        );
    }
    if k > 0 {
        let _ = writeln!(s, "\nDIF items:");
        let flagged = flag_dif_items(report);
        if flagged.is_empty() {
            let _ = writeln!(s, "  none");
        }
        for j in flagged {
            for c in 1..=k {
                let d = params.dif(j, c);
                if d != 0.0 {
                    let _ = writeln!(s, "  item_{}  class {c}  delta {d:.4}", j + 1);
                }
            }
        }
    }
    let _ = writeln!(s, "\nitem parameters:");
    let mut header = String::from("item      a        d");
    for c in 1..=k {
        let _ = write!(header, "        delta_{c}");
    }
    let _ = writeln!(s, "{header}");
    for j in 0..params.n_items() {
        let mut line =
            format!("{:<9} {:<8.4} {:<8.4}", format!("item_{}", j + 1), params.discriminations[j], params.easiness[j]);
        for c in 1..=k {
            let _ = write!(line, " {:<14.4}", params.dif(j, c));
        }
        let _ = writeln!(s, "{}", line.trim_end());
    }
    s
}

fn path(args: PathArgs) -> Result<u8, CliError> {
    let data = read_responses(&args.input)?;
    let em = em_config(&args.estimation, args.seed)?;
    let path = path_config(&args.lambda)?;
    let grid = grid(args.estimation.quad_nodes)?;
    let out = OutputDir::prepare(&args.output_dir)?;
    let report = run_path(&data, args.k, &path, &em, &grid)?;
    check_params(report.selected_params())?;
    out.write("path.csv", &report.to_csv())?;
    out.write("path.json", &to_json(&report))?;
    out.write("params.json", &to_json(report.selected_params()))?;
    print!("{}", report.to_csv());
    println!("selected lambda {:.4} (BIC {:.2})", report.selected_lambda, report.selected_bic());
    Ok(0)
}

fn select_k(args: SelectKArgs) -> Result<u8, CliError> {
    let data = read_responses(&args.input)?;
    let em = em_config(&args.estimation, args.seed)?;
    let path = path_config(&args.lambda)?;
    let grid = grid(args.estimation.quad_nodes)?;
    let ks = candidates(&args.k_candidates)?;
    let out = OutputDir::prepare(&args.output_dir)?;
    let selection = select_num_classes(&data, &ks, &path, &em, &grid)?;
    let best = &selection.reports[&selection.best_k];
    check_params(best.selected_params())?;
    out.write("bic_by_k.csv", &bic_table(&selection.bic_by_k))?;
    out.write("params.json", &to_json(best.selected_params()))?;
    print!("{}", bic_table(&selection.bic_by_k));
    println!("selected K = {}", selection.best_k);
    Ok(0)
}

fn classify(args: ClassifyArgs) -> Result<u8, CliError> {
    let data = read_responses(&args.input)?;
    let params = read_params(&args.params)?;
    let grid = grid(args.quad_nodes)?;
    let out = OutputDir::prepare(&args.output_dir)?;
    let result = classify_map(&data, &params, &grid)?;
    out.write("labels.csv", &result.to_csv())?;
    for c in 0..params.n_classes() {
        let count = result.map_labels.iter().filter(|&&l| l == c).count();
        println!("class {c}: {count} respondents");
    }
    Ok(0)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub const STUDY_COLUMNS: &str = "n_items,n_respondents,n_classes,replications,succeeded,classification_error,\
classification_error_true,auc,auc_true,tpr,fpr,tpr_oracle,fpr_oracle";

fn study_row(design: &SimulationDesign, succeeded: usize, s: &StudySummary) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        design.n_items,
        design.n_respondents,
        design.class_proportions.len(),
        design.n_replications,
        succeeded,
        s.classification_error,
        s.classification_error_true,
        fmt_list(&s.auc),
        fmt_list(&s.auc_true),
        s.tpr,
        s.fpr,
        fmt_opt(s.tpr_oracle),
        fmt_opt(s.fpr_oracle)
    )
}

fn study(args: StudyArgs) -> Result<u8, CliError> {
    let mut design = load_design(&args.design, args.seed)?;
    if let Some(b) = args.replications {
        design.n_replications = b;
        design.validate()?;
    }
    let em = em_config(&args.estimation, args.seed)?;
    let path = path_config(&args.lambda)?;
    let grid = grid(args.estimation.quad_nodes)?;
    let out = OutputDir::prepare(&args.output_dir)?;
    let options = StudyOptions { oracle: !args.no_oracle, ..StudyOptions::default() };
    let report = run_study(&design, &em, &path, &grid, &options)?;

    out.write("replications.json", &to_json(&report.replications))?;
    if !report.failures.is_empty() {
        out.write("failures.json", &to_json(&report.failures))?;
    }
    println!("replications: {} succeeded, {} failed", report.n_succeeded, report.n_failed);
    for f in &report.failures {
        println!("  replication {} failed: {}", f.replication, f.error);
    }
    if let Some(summary) = &report.summary {
        let row = study_row(&design, report.n_succeeded, summary);
        out.write("study.csv", &format!("{STUDY_COLUMNS}\n{row}\n"))?;
        println!(
            "classification error {:.4} (true parameters {:.4}), TPR {:.4}, FPR {:.4}, AUC {}",
            summary.classification_error,
            summary.classification_error_true,
            summary.tpr,
            summary.fpr,
            fmt_list(&summary.auc)
        );
    }
    Ok(if report.success_rate() >= 0.9 { 0 } else { 3 })
}
