//! Drive the built `ablate` binary over the shipped demo fixtures:
//! run --mock, warm-cache rerun, analyze, verify, variant-compare,
//! coverage-check, cost-report, and the exit-code families.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/demo")
}

fn ablate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ablate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Copy the demo fixture tree into a sandbox and point its run configs
/// at sandbox-local output/cache directories.
fn sandboxed_fixtures(root: &Path) -> PathBuf {
    let dest = root.join("demo");
    copy_tree(&fixtures(), &dest);
    for name in ["run_phase0.json", "run_phase1.json"] {
        let path = dest.join(name);
        let mut config: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let tag = name.trim_end_matches(".json");
        config["output_dir"] = serde_json::json!(root.join(format!("out-{tag}")));
        config["cache_dir"] = serde_json::json!(root.join("cache"));
        fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    }
    dest
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), &target).unwrap();
        }
    }
}

#[test]
fn full_demo_pipeline_through_the_binary() {
    let sandbox = tempfile::tempdir().unwrap();
    let demo = sandboxed_fixtures(sandbox.path());
    let config = demo.join("run_phase0.json");
    let out_dir = sandbox.path().join("out-run_phase0");

    // Cold run.
    let run = ablate(&["run", "--config", config.to_str().unwrap(), "--mock"]);
    assert_ok(&run, "run --mock");
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("run complete: 180 cells"), "{stdout}");
    let first_bytes = fs::read(out_dir.join("results.jsonl")).unwrap();

    // Warm rerun: zero network calls, identical bytes.
    let rerun = ablate(&["run", "--config", config.to_str().unwrap(), "--mock"]);
    assert_ok(&rerun, "warm rerun");
    let stdout = String::from_utf8_lossy(&rerun.stdout);
    assert!(stdout.contains("(0 network)"), "{stdout}");
    assert_eq!(first_bytes, fs::read(out_dir.join("results.jsonl")).unwrap());

    // Analyze phase 0 with encoding variance inputs.
    let analysis = sandbox.path().join("analysis");
    let analyze = ablate(&[
        "analyze",
        "--mode",
        "phase0",
        "--results",
        out_dir.join("results.jsonl").to_str().unwrap(),
        "--plan",
        out_dir.join("plan.json").to_str().unwrap(),
        "--corpus",
        demo.join("en/manifest.json").to_str().unwrap(),
        "--probes",
        demo.join("probes.json").to_str().unwrap(),
        "--out",
        analysis.to_str().unwrap(),
    ]);
    assert_ok(&analyze, "analyze phase0");
    assert!(analysis.join("main_effects.csv").exists());
    assert!(analysis.join("topology.csv").exists());
    assert!(analysis.join("encoding_variance.csv").exists());
    assert!(analysis.join("summary.md").exists());

    // Verify both the analysis dir and the run dir (with cache).
    let verify = ablate(&["verify", "--out", analysis.to_str().unwrap()]);
    assert_ok(&verify, "verify analysis");
    let verify = ablate(&[
        "verify",
        "--out",
        out_dir.to_str().unwrap(),
        "--cache",
        sandbox.path().join("cache").to_str().unwrap(),
    ]);
    assert_ok(&verify, "verify run + cache");
    assert!(String::from_utf8_lossy(&verify.stdout).contains("PASS ledger-conservation"));

    // Cost report.
    let cost = ablate(&[
        "cost-report",
        "--ledger",
        out_dir.join("ledger.json").to_str().unwrap(),
    ]);
    assert_ok(&cost, "cost-report");
    assert!(String::from_utf8_lossy(&cost.stdout).contains("mock/alpha"));
}

#[test]
fn variant_compare_between_register_variants() {
    let sandbox = tempfile::tempdir().unwrap();
    let demo = sandboxed_fixtures(sandbox.path());

    // Run the original Spanish corpus and the declarative rewrite with
    // their scripted effect sets.
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(demo.join("run_phase0.json")).unwrap()).unwrap();
    config["corpora"] = serde_json::json!(["es/manifest.json"]);
    let orig_out = sandbox.path().join("es-orig");
    config["output_dir"] = serde_json::json!(orig_out);
    fs::write(
        demo.join("run_es.json"),
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .unwrap();
    assert_ok(
        &ablate(&[
            "run",
            "--config",
            demo.join("run_es.json").to_str().unwrap(),
            "--mock",
        ]),
        "run es",
    );

    config["corpora"] = serde_json::json!(["es_decl/manifest.json"]);
    config["mock_effects"] = serde_json::json!("mock_effects_decl.json");
    let decl_out = sandbox.path().join("es-decl");
    config["output_dir"] = serde_json::json!(decl_out);
    fs::write(
        demo.join("run_es_decl.json"),
        serde_json::to_string_pretty(&config).unwrap(),
    )
    .unwrap();
    assert_ok(
        &ablate(&[
            "run",
            "--config",
            demo.join("run_es_decl.json").to_str().unwrap(),
            "--mock",
        ]),
        "run es_decl",
    );

    let analysis = sandbox.path().join("compare");
    let compare = ablate(&[
        "analyze",
        "--mode",
        "variant-compare",
        "--results",
        orig_out.join("results.jsonl").to_str().unwrap(),
        "--results-b",
        decl_out.join("results.jsonl").to_str().unwrap(),
        "--probes",
        demo.join("probes.json").to_str().unwrap(),
        "--targets",
        "task-tool,todo-discipline",
        "--permuted-unit",
        "target-probe",
        "--out",
        analysis.to_str().unwrap(),
    ]);
    assert_ok(&compare, "variant-compare");
    let shifts = fs::read_to_string(analysis.join("variant_shift.csv")).unwrap();
    // The rewritten blocks flipped from removal-hurts to removal-helps
    // under the scripted effects, so their deltas shift positive; the
    // verdict column must be populated for every probe.
    assert!(shifts.lines().count() >= 6, "{shifts}");
    assert!(analysis.join("variance_reduction.csv").exists());
    let verify = ablate(&["verify", "--out", analysis.to_str().unwrap()]);
    assert_ok(&verify, "verify variant-compare");
}

#[test]
fn exit_code_families_from_the_binary() {
    let sandbox = tempfile::tempdir().unwrap();
    let demo = sandboxed_fixtures(sandbox.path());

    // Family 1: config errors.
    let bad_config = sandbox.path().join("bad.json");
    fs::write(&bad_config, "{not json").unwrap();
    let out = ablate(&["run", "--config", bad_config.to_str().unwrap(), "--mock"]);
    assert_eq!(out.status.code(), Some(1), "config family");

    // Family 2: corpus errors (missing block file).
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(demo.join("run_phase0.json")).unwrap()).unwrap();
    fs::remove_file(demo.join("en/tone.txt")).unwrap();
    config["corpora"] = serde_json::json!(["en/manifest.json"]);
    let broken = demo.join("run_broken.json");
    fs::write(&broken, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = ablate(&["run", "--config", broken.to_str().unwrap(), "--mock"]);
    assert_eq!(out.status.code(), Some(2), "corpus family");

    // Family 3: budget exhausted before any call.
    let sandbox2 = tempfile::tempdir().unwrap();
    let demo2 = sandboxed_fixtures(sandbox2.path());
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(demo2.join("run_phase0.json")).unwrap())
            .unwrap();
    config["budget_usd"] = serde_json::json!(0.0);
    let zero = demo2.join("run_zero.json");
    fs::write(&zero, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let out = ablate(&["run", "--config", zero.to_str().unwrap(), "--mock"]);
    assert_eq!(out.status.code(), Some(3), "budget family");

    // Family 4: analysis-input errors.
    let out = ablate(&[
        "analyze",
        "--mode",
        "phase1",
        "--results",
        demo2.join("probes.json").to_str().unwrap(),
        "--out",
        sandbox2.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "analysis family");
}

#[test]
fn coverage_check_passes_and_fails_properly() {
    let out = ablate(&["coverage-check", "--k", "22"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("missing=0"));
    assert!(stdout.contains("PASS coverage"));

    // A phase-0 plan checked at strength 2 misses every co-absent pair.
    let sandbox = tempfile::tempdir().unwrap();
    let demo = sandboxed_fixtures(sandbox.path());
    let config = demo.join("run_phase0.json");
    assert_ok(
        &ablate(&["run", "--config", config.to_str().unwrap(), "--mock"]),
        "run for plan",
    );
    let plan = sandbox.path().join("out-run_phase0/plan.json");
    let out = ablate(&["coverage-check", "--plan", plan.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL coverage"));
}
