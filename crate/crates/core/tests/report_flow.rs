//! End-to-end report flows on disk: run → analyze → verify, replay
//! byte-identity, budget-abort resume, verification failure on a
//! corrupted table, cross-format consistency, and markdown value
//! containment.

mod support;

use std::fs;
use std::path::PathBuf;

use ablate_core::corpus::write_corpus;
use ablate_core::design::Phase;
use ablate_core::probes::Probe;
use ablate_core::report::{
    cmd_analyze, cmd_cost_report, cmd_run, cmd_verify, AnalyzeMode, AnalyzeOptions, PlanSpec,
    ReportError, RunConfig,
};
use ablate_core::runner::{MockEffects, ModelSpec, SynergySpec};

use support::{ablation_corpus, length_probe};

struct Workbench {
    root: tempfile::TempDir,
    config: RunConfig,
}

/// A complete on-disk experiment: one corpus directory, a probe
/// battery, mock effects, and a run config pointing at them.
fn workbench(k: usize, effects: &MockEffects, phase: Phase, budget: f64) -> Workbench {
    let root = tempfile::tempdir().unwrap();
    let corpus = ablation_corpus("en", k);
    let corpus_dir = root.path().join("corpus-en");
    let manifest = write_corpus(&corpus, &corpus_dir).unwrap();

    let probes: Vec<Probe> = (0..k)
        .map(|i| length_probe(&format!("p{i}"), &format!("blk-{i}"), 1000))
        .collect();
    let probes_path = root.path().join("probes.json");
    fs::write(&probes_path, serde_json::to_string_pretty(&probes).unwrap()).unwrap();

    let effects_path = root.path().join("mock_effects.json");
    fs::write(&effects_path, serde_json::to_string(effects).unwrap()).unwrap();

    let config = RunConfig {
        corpora: vec![manifest],
        probes: probes_path,
        plan: PlanSpec {
            phase,
            seed: 7,
            strength: 2,
        },
        models: vec![ModelSpec::new("mock/alpha")],
        trials: 3,
        temperature: 0.0,
        budget_usd: budget,
        concurrency: 4,
        per_model_concurrency: 4,
        output_dir: root.path().join("out"),
        cache_dir: root.path().join("cache"),
        endpoint: None,
        mock_effects: Some(effects_path),
    };
    Workbench { root, config }
}

fn planted_effects() -> MockEffects {
    MockEffects {
        penalties: [
            ("blk-0".to_string(), 0.1),
            ("blk-1".to_string(), 0.05),
            ("blk-2".to_string(), 0.15),
        ]
        .into(),
        synergies: vec![SynergySpec {
            block_a: "blk-0".into(),
            block_b: "blk-1".into(),
            delta: -0.2,
        }],
        cost_per_call_usd: 0.0001,
        ..Default::default()
    }
}

#[test]
fn rerun_from_cache_reproduces_results_byte_for_byte() {
    let bench = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    let first = cmd_run(&bench.config, true, false).unwrap();
    assert!(first.ledger.total_network_calls() > 0);
    let bytes_first = fs::read(&first.results_path).unwrap();

    let second = cmd_run(&bench.config, true, false).unwrap();
    assert_eq!(
        second.ledger.total_network_calls(),
        0,
        "warm cache must avoid the endpoint entirely"
    );
    let bytes_second = fs::read(&second.results_path).unwrap();
    assert_eq!(bytes_first, bytes_second);
    // Attributed ledger identical across the replay.
    assert_eq!(first.ledger.total_cost(), second.ledger.total_cost());
    assert_eq!(first.ledger.total_calls(), second.ledger.total_calls());
}

#[test]
fn budget_abort_then_resume_matches_uninterrupted_run() {
    // Reference: same fixture, ample budget.
    let reference = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    let ref_run = cmd_run(&reference.config, true, false).unwrap();
    let ref_bytes = fs::read(&ref_run.results_path).unwrap();

    // Interrupted: the budget covers ~30 of 36 calls.
    let bench = workbench(3, &planted_effects(), Phase::Phase0, 0.003);
    let err = cmd_run(&bench.config, true, false).unwrap_err();
    assert!(matches!(err, ReportError::Runner(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    let partial = fs::read(bench.config.output_dir.join("results.jsonl")).unwrap();
    assert!(!partial.is_empty());
    assert!(partial.len() < ref_bytes.len());
    assert_eq!(partial[..], ref_bytes[..partial.len()]);

    // Resume with a refilled budget: only missing cells are emitted and
    // the final file is byte-identical to the uninterrupted one.
    let mut refilled = bench.config.clone();
    refilled.budget_usd = 1.0;
    let resumed = cmd_run(&refilled, true, true).unwrap();
    assert!(resumed.resumed_from > 0);
    assert!(resumed.lines_emitted < resumed.cells);
    let final_bytes = fs::read(&resumed.results_path).unwrap();
    assert_eq!(final_bytes, ref_bytes);
}

#[test]
fn zero_budget_cold_cache_fails_with_budget_family() {
    let bench = workbench(2, &planted_effects(), Phase::Phase0, 0.0);
    let err = cmd_run(&bench.config, true, false).unwrap_err();
    assert_eq!(err.exit_code(), 3, "budget family exit code");
}

fn analyze_phase0(bench: &Workbench) -> (AnalyzeOptions, PathBuf) {
    let out = bench.root.path().join("analysis");
    let options = AnalyzeOptions {
        mode: AnalyzeMode::Phase0,
        results: bench.config.output_dir.join("results.jsonl"),
        results_b: None,
        plan: Some(bench.config.output_dir.join("plan.json")),
        phase0_results: None,
        corpora: vec![bench.config.corpora[0].clone()],
        probes: None,
        q: 0.05,
        epsilon: 0.005,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 1000,
        seed: 3,
        hub_block: None,
        top_n: 20,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: out.clone(),
    };
    (options, out)
}

#[test]
fn verify_passes_then_fails_on_corruption() {
    let bench = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    cmd_run(&bench.config, true, false).unwrap();
    let (options, out) = analyze_phase0(&bench);
    cmd_analyze(&options).unwrap();

    let report = cmd_verify(&out, None).unwrap();
    assert!(report.all_passed(), "{report:?}");
    let run_report = cmd_verify(
        &bench.config.output_dir,
        Some(bench.config.cache_dir.as_path()),
    )
    .unwrap();
    assert!(run_report.all_passed(), "{run_report:?}");

    // Corrupt one emitted value; verification must fail.
    let victim = out.join("block_deltas.csv");
    let text = fs::read_to_string(&victim).unwrap().replace("-0.1", "-0.9");
    fs::write(&victim, text).unwrap();
    let report = cmd_verify(&out, None).unwrap();
    assert!(!report.all_passed(), "corruption must be caught");
}

#[test]
fn csv_and_json_emissions_carry_identical_values() {
    let bench = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    cmd_run(&bench.config, true, false).unwrap();
    let (options, out) = analyze_phase0(&bench);
    cmd_analyze(&options).unwrap();

    // block_deltas.csv values equal main_effects.json row deltas at the
    // CSV's 4-decimal formatting.
    let table: ablate_core::analysis::EffectTable =
        serde_json::from_str(&fs::read_to_string(out.join("main_effects.json")).unwrap())
            .unwrap();
    let csv_text = fs::read_to_string(out.join("block_deltas.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut csv_rows = Vec::new();
    for record in reader.records() {
        let record = record.unwrap();
        csv_rows.push((record[3].to_string(), record[4].to_string()));
    }
    assert_eq!(csv_rows.len(), table.rows.len());
    for row in &table.rows {
        let label = row.key.label();
        let formatted = format!("{:.4}", row.delta);
        assert!(
            csv_rows.iter().any(|(b, d)| *b == label && *d == formatted),
            "row {label} delta {formatted} missing from CSV"
        );
    }
}

#[test]
fn markdown_summary_values_all_appear_in_tables() {
    let bench = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    cmd_run(&bench.config, true, false).unwrap();
    let (options, out) = analyze_phase0(&bench);
    cmd_analyze(&options).unwrap();

    let md = fs::read_to_string(out.join("summary.md")).unwrap();
    // Pool every CSV/JSON character stream emitted alongside.
    let mut corpus_text = String::new();
    for entry in fs::read_dir(&out).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv" || e == "json") {
            corpus_text.push_str(&fs::read_to_string(path).unwrap());
        }
    }
    // Every numeric token in the summary must appear in some table.
    for token in md.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-')) {
        if token.contains('.') && token.len() > 2 && token.parse::<f64>().is_ok() {
            assert!(
                corpus_text.contains(token),
                "markdown value {token} not found in any emitted table"
            );
        }
    }
}

#[test]
fn phase1_analysis_emits_pair_tables_and_hub() {
    let bench = workbench(3, &planted_effects(), Phase::Phase1, 1.0);
    cmd_run(&bench.config, true, false).unwrap();
    // Main effects come from a separate phase-0 run over the same fixture.
    let bench0 = workbench(3, &planted_effects(), Phase::Phase0, 1.0);
    cmd_run(&bench0.config, true, false).unwrap();

    let out = bench.root.path().join("analysis");
    let options = AnalyzeOptions {
        mode: AnalyzeMode::Phase1,
        results: bench.config.output_dir.join("results.jsonl"),
        results_b: None,
        plan: Some(bench.config.output_dir.join("plan.json")),
        phase0_results: Some(bench0.config.output_dir.join("results.jsonl")),
        corpora: vec![],
        probes: None,
        q: 0.05,
        epsilon: 0.005,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 2000,
        seed: 3,
        hub_block: Some("blk-0".into()),
        top_n: 2,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: out.clone(),
    };
    cmd_analyze(&options).unwrap();
    assert!(out.join("pairwise.csv").exists());
    assert!(out.join("topology.csv").exists());
    assert!(out.join("hub.json").exists());
    let verify = cmd_verify(&out, None).unwrap();
    assert!(verify.all_passed(), "{verify:?}");

    // The planted (blk-0, blk-1) synergy must surface in the pair CSV.
    let pairwise = fs::read_to_string(out.join("pairwise.csv")).unwrap();
    assert!(pairwise.lines().any(|l| l.contains("blk-0,blk-1")));
}

#[test]
fn missing_mode_input_is_analysis_family() {
    let bench = workbench(2, &planted_effects(), Phase::Phase1, 1.0);
    cmd_run(&bench.config, true, false).unwrap();
    let out = bench.root.path().join("analysis");
    let options = AnalyzeOptions {
        mode: AnalyzeMode::Phase1,
        results: bench.config.output_dir.join("results.jsonl"),
        results_b: None,
        plan: None,
        phase0_results: None, // required for interactions
        corpora: vec![],
        probes: None,
        q: 0.05,
        epsilon: 0.005,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 100,
        seed: 0,
        hub_block: None,
        top_n: 20,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: out,
    };
    let err = cmd_analyze(&options).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn cost_report_reads_run_ledger() {
    let bench = workbench(2, &planted_effects(), Phase::Phase0, 1.0);
    let summary = cmd_run(&bench.config, true, false).unwrap();
    let report = cmd_cost_report(&bench.config.output_dir.join("ledger.json")).unwrap();
    assert_eq!(report.total_calls, summary.ledger.total_calls());
    assert!((report.total_cost_usd - summary.ledger.total_cost().as_dollars()).abs() < 1e-12);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].model, "mock/alpha");
}
