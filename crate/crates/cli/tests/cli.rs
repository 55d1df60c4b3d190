use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentdif::simulation::{Range, TraitLaw};
use latentdif::SimulationDesign;

fn latentdif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentdif")).args(args).env_remove("LATENT_DIF_THREADS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_design(dir: &Path, design: &SimulationDesign) -> PathBuf {
    let path = dir.join("design.json");
    fs::write(&path, serde_json::to_string(design).unwrap()).unwrap();
    path
}

fn strong_design() -> SimulationDesign {
    let mut design = SimulationDesign::two_group(12, 1500, 0.5);
    design.dif_item_positions = vec![0, 1, 2];
    design.dif_effect_ranges = vec![Range::new(2.5, 3.0)];
    design.trait_laws[1] = TraitLaw::new(0.0, 1.0);
    design.item_param_ranges.d = Range::new(-1.0, 0.0);
    design.n_replications = 2;
    design
}

fn simulate(dir: &Path, design: &SimulationDesign, seed: &str) -> PathBuf {
    let design_path = write_design(dir, design);
    let out_dir = dir.join(format!("sim-{seed}"));
    let out = latentdif(&[
        "simulate",
        "--design",
        design_path.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        seed,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    out_dir
}

const QUICK: [&str; 6] = ["--starts", "2", "--max-iter", "800", "--quad-nodes", "21"];

#[test]
fn simulate_writes_a_binary_matrix_of_the_design_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &SimulationDesign::two_group(25, 1000, 0.5), "3");
    let csv = fs::read_to_string(sim.join("responses.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 25);
    assert_eq!(header[0], "item_1");
    assert_eq!(header[24], "item_25");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1000);
    assert!(rows.iter().all(|r| r.split(',').count() == 25 && r.split(',').all(|v| v == "0" || v == "1")));
    assert!(!csv.contains('\r'));
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["labels"].as_array().unwrap().len(), 1000);
    assert_eq!(truth["thetas"].as_array().unwrap().len(), 1000);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sim.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn simulate_is_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let design = SimulationDesign::two_group(10, 200, 0.5);
    let a = simulate(tmp.path(), &design, "9");
    let first: Vec<Vec<u8>> =
        ["responses.csv", "truth.json", "manifest.json"].iter().map(|f| fs::read(a.join(f)).unwrap()).collect();
    fs::remove_dir_all(&a).unwrap();
    let b = simulate(tmp.path(), &design, "9");
    let second: Vec<Vec<u8>> =
        ["responses.csv", "truth.json", "manifest.json"].iter().map(|f| fs::read(b.join(f)).unwrap()).collect();
    assert_eq!(first, second);
    let other = simulate(tmp.path(), &design, "10");
    assert_ne!(fs::read(other.join("responses.csv")).unwrap(), first[0]);
}

#[test]
fn simulated_labels_follow_the_class_proportions() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &SimulationDesign::two_group(5, 20_000, 0.1), "1");
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(sim.join("truth.json")).unwrap()).unwrap();
    let labels = truth["labels"].as_array().unwrap();
    let share = labels.iter().filter(|l| l.as_u64() == Some(1)).count() as f64 / labels.len() as f64;
    assert!((share - 0.1).abs() < 0.01, "{share}");
}

#[test]
fn simulate_requires_a_seed_and_a_valid_design() {
    let tmp = tempfile::tempdir().unwrap();
    let design = write_design(tmp.path(), &SimulationDesign::two_group(5, 10, 0.5));
    let out_dir = tmp.path().join("out");
    let out = latentdif(&["simulate", "--design", design.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    let mut bad = SimulationDesign::two_group(5, 10, 0.5);
    bad.class_proportions = vec![0.7, 0.7];
    let design = write_design(tmp.path(), &bad);
    let out = latentdif(&[
        "simulate",
        "--design",
        design.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum to"));
}

#[test]
fn fit_flags_the_simulated_dif_items_and_leaves_the_input_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &strong_design(), "5");
    let input = sim.join("responses.csv");
    let before = fs::read(&input).unwrap();
    let fit_dir = tmp.path().join("fit");
    let mut args =
        vec!["fit", "--input", input.to_str().unwrap(), "--output-dir", fit_dir.to_str().unwrap(), "--k", "1"];
    args.extend(QUICK);
    let out = latentdif(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&input).unwrap(), before);

    let flagged = fs::read_to_string(fit_dir.join("flagged.txt")).unwrap();
    for item in ["item_1", "item_2", "item_3"] {
        assert!(flagged.lines().any(|l| l == item), "{flagged}");
    }
    let report = fs::read_to_string(fit_dir.join("report.txt")).unwrap();
    assert!(report.contains("K* = 1"));
    assert!(report.contains("DIF items:"));
    let labels = fs::read_to_string(fit_dir.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1501);
    assert!(labels.starts_with("respondent,map_class,post_0,post_1\n"));
    let path = fs::read_to_string(fit_dir.join("path.csv")).unwrap();
    assert!(path.starts_with("lambda,bic,n_nonzero,loglik\n"));

    let class_dir = tmp.path().join("classify");
    let out = latentdif(&[
        "classify",
        "--input",
        input.to_str().unwrap(),
        "--params",
        fit_dir.join("params.json").to_str().unwrap(),
        "--output-dir",
        class_dir.to_str().unwrap(),
        "--quad-nodes",
        "21",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(class_dir.join("labels.csv")).unwrap(), labels);
}

#[test]
fn fit_with_k_zero_has_no_dif_section() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &strong_design(), "6");
    let fit_dir = tmp.path().join("fit0");
    let input = sim.join("responses.csv");
    let mut args =
        vec!["fit", "--input", input.to_str().unwrap(), "--output-dir", fit_dir.to_str().unwrap(), "--k", "0"];
    args.extend(QUICK);
    let out = latentdif(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(fit_dir.join("report.txt")).unwrap();
    assert!(report.contains("K* = 0"));
    assert!(!report.contains("DIF items"));
    assert!(!report.contains("delta"));
    assert_eq!(fs::read_to_string(fit_dir.join("flagged.txt")).unwrap(), "");
}

#[test]
fn select_k_and_path_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &strong_design(), "7");
    let input = sim.join("responses.csv");
    let out_dir = tmp.path().join("sel");
    let mut args = vec![
        "select-k",
        "--input",
        input.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--k-candidates",
        "0,1",
    ];
    args.extend(QUICK);
    let out = latentdif(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(out_dir.join("bic_by_k.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("k,bic\n0,"));

    let path_dir = tmp.path().join("path");
    let mut args = vec![
        "path",
        "--input",
        input.to_str().unwrap(),
        "--output-dir",
        path_dir.to_str().unwrap(),
        "--k",
        "1",
        "--lambdas",
        "1,4,16,64",
    ];
    args.extend(QUICK);
    let out = latentdif(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let path = fs::read_to_string(path_dir.join("path.csv")).unwrap();
    assert_eq!(path.lines().count(), 5);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(path_dir.join("path.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_inputs_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cases = [
        ("nonbinary.csv", "item_1,item_2\n0,1\n2,0\n"),
        ("header.csv", "a,b\n0,1\n"),
        ("ragged.csv", "item_1,item_2\n0,1\n1\n"),
        ("empty.csv", "item_1,item_2\n"),
    ];
    for (name, contents) in cases {
        let input = tmp.path().join(name);
        fs::write(&input, contents).unwrap();
        let out = latentdif(&[
            "fit",
            "--input",
            input.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--k",
            "1",
        ]);
        assert_eq!(code(&out), 2, "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let missing = tmp.path().join("missing.csv");
    let out = latentdif(&[
        "fit",
        "--input",
        missing.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--k",
        "1",
    ]);
    assert_eq!(code(&out), 2);

    let input = tmp.path().join("ok.csv");
    fs::write(&input, "item_1,item_2\n0,1\n1,0\n").unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let unwritable = blocker.join("sub");
    let out = latentdif(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--output-dir",
        unwritable.to_str().unwrap(),
        "--k",
        "0",
    ]);
    assert_eq!(code(&out), 2);
    let out = latentdif(&["fit", "--input", input.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "either --k or --k-auto is required");
    let out = latentdif(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--k",
        "1",
        "--lambdas",
        "4,2",
    ]);
    assert_eq!(code(&out), 2);
    let out = latentdif(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--k",
        "0",
        "--tol",
        "-1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn study_smoke_run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let design = write_design(tmp.path(), &strong_design());
    let run = |dir: &str| {
        let out_dir = tmp.path().join(dir);
        let mut args = vec![
            "study",
            "--design",
            design.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--seed",
            "4",
            "--lambdas",
            "2,8,32",
        ];
        args.extend(QUICK);
        let out = latentdif(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(out_dir.join("study.csv")).unwrap()
    };
    let first = run("a");
    let header: Vec<&str> = first.lines().next().unwrap().split(',').collect();
    for column in [
        "classification_error",
        "classification_error_true",
        "auc",
        "auc_true",
        "tpr",
        "fpr",
        "tpr_oracle",
        "fpr_oracle",
    ] {
        assert!(header.contains(&column), "{column}");
    }
    assert_eq!(first.lines().count(), 2);
    assert_eq!(run("b"), first);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), &strong_design(), "8");
    let input = sim.join("responses.csv");
    let run = |dir: &str, threads: &str| {
        let out_dir = tmp.path().join(dir);
        let mut args = vec![
            "select-k",
            "--input",
            input.to_str().unwrap(),
            "--output-dir",
            out_dir.to_str().unwrap(),
            "--k-candidates",
            "0,1",
            "--lambdas",
            "2,8,32",
            "--threads",
            threads,
        ];
        args.extend(QUICK);
        assert_eq!(code(&latentdif(&args)), 0);
        fs::read(out_dir.join("params.json")).unwrap()
    };
    assert_eq!(run("t1", "1"), run("t2", "2"));
}
