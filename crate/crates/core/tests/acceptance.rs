//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `cargo test --test acceptance -- --nocapture` to see them
//! on success). Tolerances are pinned in the assertions, not
//! configurable.

mod support;

use std::fs;
use std::time::Instant;

use ablate_core::analysis::{
    main_effects, pairwise_interactions, topology_classify, variance_reduction_pct, EffectKey,
    TopologyClass, DEFAULT_TOPOLOGY_EPSILON,
};
use ablate_core::corpus::{char_stats_from_counts, write_corpus, Register};
use ablate_core::design::{covering_array, verify_coverage, Phase};
use ablate_core::probes::Probe;
use ablate_core::register::{classify_register, RegisterLexicon};
use ablate_core::report::{
    cmd_analyze, cmd_run, cmd_verify, read_plan, AnalyzeMode, AnalyzeOptions, PlanSpec, RunConfig,
};
use ablate_core::runner::{MockEffects, ModelSpec, RunLedger, SynergySpec, UsdMicros};
use ablate_core::stats::{
    bh_adjust, mean_difference, permutation_test, permutation_test_monte_carlo, t_cdf, welch_t,
    PermutationMode, Sample,
};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use support::{ablation_corpus, length_probe, oracle_bh_rejections, oracle_t_cdf};

#[test]
fn accept_01_covering_array_validity() {
    let started = Instant::now();
    for k in 2..=30 {
        let plan = covering_array(k, 2, 42).unwrap();
        let report = verify_coverage(&plan, 2).unwrap();
        assert!(
            report.is_covering(),
            "k={k}: {} tuples missing",
            report.missing.len()
        );
        if k == 2 {
            assert_eq!(plan.len(), 4, "k=2 is the full factorial");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("ACCEPTANCE 01 PASS: covering arrays k=2..30 fully cover in {elapsed:?}");
}

#[test]
fn accept_02_exact_t_cdf() {
    let t_grid: Vec<f64> = vec![
        -50.0, -35.0, -20.0, -10.0, -5.0, -3.674, -2.0, -1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0,
        2.0, 3.674, 5.0, 10.0, 20.0, 35.0, 50.0,
    ];
    let mut worst: f64 = 0.0;
    for &df in &[1.0, 2.0, 3.0, 4.0, 10.0, 30.0, 100.0, 200.0] {
        for &t in &t_grid {
            let got = t_cdf(t, df).unwrap();
            let want = oracle_t_cdf(t, df);
            let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            assert!(rel <= 1e-10, "df={df} t={t}: rel error {rel:e}");
        }
        assert!((t_cdf(0.0, df).unwrap() - 0.5).abs() <= 1e-12);
    }
    for &t in &t_grid {
        let cauchy = 0.5 + t.atan() / std::f64::consts::PI;
        assert!((t_cdf(t, 1.0).unwrap() - cauchy).abs() <= 1e-12, "t={t}");
    }
    println!("ACCEPTANCE 02 PASS: exact t-CDF, worst relative error {worst:.2e}");
}

#[test]
fn accept_03_welch_fixture() {
    let a = Sample::new("a", vec![0.8, 0.9, 1.0]).unwrap();
    let b = Sample::new("b", vec![0.5, 0.6, 0.7]).unwrap();
    let r = welch_t(&a, &b).unwrap();
    assert!((r.statistic - 3.674).abs() <= 0.001, "t = {}", r.statistic);
    assert!((r.df - 4.00).abs() <= 0.01, "df = {}", r.df);
    let p_oracle = 2.0 * (1.0 - oracle_t_cdf(r.statistic.abs(), r.df));
    assert!(
        (r.p_value - p_oracle).abs() <= 1e-9,
        "p = {} vs oracle {}",
        r.p_value,
        p_oracle
    );
    println!(
        "ACCEPTANCE 03 PASS: Welch fixture t={:.4} df={:.2} p={:.6}",
        r.statistic, r.df, r.p_value
    );
}

#[test]
fn accept_04_permutation_exactness() {
    let values = [1.0, 2.0, 3.0, 4.0];
    let labels = [0u32, 0, 1, 1];
    let observed = mean_difference(&values, &labels);
    let exact = permutation_test(observed, mean_difference, &values, &labels, 10, 1).unwrap();
    assert_eq!(exact.mode, PermutationMode::Exhaustive);
    assert_eq!(exact.p_value, 2.0 / 6.0, "exhaustive mode is exact");

    // Monte Carlo with 100k permutations and a fixed seed lands within
    // 0.01 of 2/6 on the same fixture and is rerun-identical.
    let mc1 = permutation_test_monte_carlo(
        observed,
        mean_difference,
        &values,
        &labels,
        100_000,
        42,
    )
    .unwrap();
    let mc2 = permutation_test_monte_carlo(
        observed,
        mean_difference,
        &values,
        &labels,
        100_000,
        42,
    )
    .unwrap();
    assert_eq!(mc1.mode, PermutationMode::MonteCarlo);
    assert_eq!(mc1.p_value, mc2.p_value, "fixed seed is rerun-identical");
    assert!(
        (mc1.p_value - 2.0 / 6.0).abs() <= 0.01,
        "MC {} vs exact {}",
        mc1.p_value,
        2.0 / 6.0
    );
    println!(
        "ACCEPTANCE 04 PASS: exhaustive p=2/6 exact; MC(100k) p={:.4} within 0.01 of 2/6",
        mc1.p_value
    );
}

#[test]
fn accept_05_bh_correctness() {
    let fixture = bh_adjust(&[0.01, 0.02, 0.03, 0.04], 0.05).unwrap();
    assert!(fixture.rejected.iter().all(|&r| r), "fixture rejects all 4");

    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    for round in 0..1000 {
        let m = rng.gen_range(1..=50);
        let q = rng.gen_range(0.01..0.30);
        let ps: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let got = bh_adjust(&ps, q).unwrap();
        let want = oracle_bh_rejections(&ps, q);
        assert_eq!(got.rejected, want, "round {round}");
    }
    println!("ACCEPTANCE 05 PASS: BH matches the step-up oracle on 1000 random vectors");
}

/// Write a full on-disk experiment and return its run config.
fn pipeline_config(
    root: &std::path::Path,
    tag: &str,
    effects: &MockEffects,
    phase: Phase,
) -> RunConfig {
    let corpus = ablation_corpus("en", 4);
    let corpus_dir = root.join(format!("{tag}-corpus"));
    let manifest = write_corpus(&corpus, &corpus_dir).unwrap();
    let probes: Vec<Probe> = (0..4)
        .map(|i| length_probe(&format!("p{i}"), &format!("blk-{i}"), 1000))
        .collect();
    let probes_path = root.join(format!("{tag}-probes.json"));
    fs::write(&probes_path, serde_json::to_string(&probes).unwrap()).unwrap();
    let effects_path = root.join(format!("{tag}-effects.json"));
    fs::write(&effects_path, serde_json::to_string(effects).unwrap()).unwrap();
    RunConfig {
        corpora: vec![manifest],
        probes: probes_path,
        plan: PlanSpec {
            phase,
            seed: 23,
            strength: 2,
        },
        models: vec![ModelSpec::new("mock/alpha")],
        trials: 3,
        temperature: 0.0,
        budget_usd: 5.0,
        concurrency: 4,
        per_model_concurrency: 4,
        output_dir: root.join(format!("{tag}-out")),
        cache_dir: root.join(format!("{tag}-cache")),
        endpoint: None,
        mock_effects: Some(effects_path),
    }
}

#[test]
fn accept_06_planted_topology_recovery_end_to_end() {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();

    // Cooperative fixture: additive penalties plus one planted synergy.
    let coop = MockEffects {
        penalties: [
            ("blk-0".to_string(), 0.1),
            ("blk-1".to_string(), 0.05),
            ("blk-2".to_string(), 0.15),
            ("blk-3".to_string(), 0.05),
        ]
        .into(),
        synergies: vec![SynergySpec {
            block_a: "blk-0".into(),
            block_b: "blk-1".into(),
            delta: -0.2,
        }],
        ..Default::default()
    };

    // Phase 0 run (mains) and phase 1 run (pairs) through cmd_run --mock.
    let config0 = pipeline_config(root.path(), "coop0", &coop, Phase::Phase0);
    cmd_run(&config0, true, false).unwrap();
    let config1 = pipeline_config(root.path(), "coop1", &coop, Phase::Phase1);
    cmd_run(&config1, true, false).unwrap();

    // cmd_analyze phase0: every main-effect sign recovered exactly.
    let analysis0 = root.path().join("coop0-analysis");
    cmd_analyze(&AnalyzeOptions {
        mode: AnalyzeMode::Phase0,
        results: config0.output_dir.join("results.jsonl"),
        results_b: None,
        plan: Some(config0.output_dir.join("plan.json")),
        phase0_results: None,
        corpora: vec![],
        probes: None,
        q: 0.05,
        epsilon: DEFAULT_TOPOLOGY_EPSILON,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 1000,
        seed: 1,
        hub_block: None,
        top_n: 20,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: analysis0.clone(),
    })
    .unwrap();
    let main_table: ablate_core::analysis::EffectTable = serde_json::from_str(
        &fs::read_to_string(analysis0.join("main_effects.json")).unwrap(),
    )
    .unwrap();
    for row in &main_table.rows {
        assert!(
            row.delta < 0.0,
            "cooperative fixture: every removal hurts, {:?} = {}",
            row.key,
            row.delta
        );
    }

    // cmd_analyze phase1: planted interaction recovered at -0.200 +/- 0.01.
    let analysis1 = root.path().join("coop1-analysis");
    cmd_analyze(&AnalyzeOptions {
        mode: AnalyzeMode::Phase1,
        results: config1.output_dir.join("results.jsonl"),
        results_b: None,
        plan: Some(config1.output_dir.join("plan.json")),
        phase0_results: Some(config0.output_dir.join("results.jsonl")),
        corpora: vec![],
        probes: None,
        q: 0.05,
        epsilon: DEFAULT_TOPOLOGY_EPSILON,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 1000,
        seed: 1,
        hub_block: None,
        top_n: 20,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: analysis1.clone(),
    })
    .unwrap();
    let pair_table: ablate_core::analysis::EffectTable =
        serde_json::from_str(&fs::read_to_string(analysis1.join("pairwise.json")).unwrap())
            .unwrap();
    let planted = pair_table
        .rows
        .iter()
        .find(|r| r.key == EffectKey::Pair("blk-0".into(), "blk-1".into()))
        .expect("planted pair present");
    let interaction = planted.interaction.unwrap();
    assert!(
        (interaction + 0.200).abs() <= 0.01,
        "planted synergy -0.200, measured {interaction}"
    );

    // Cooperative topology from the negative-mean fixture.
    let topo: Vec<ablate_core::analysis::TopologySummary> =
        serde_json::from_str(&fs::read_to_string(analysis1.join("topology.json")).unwrap())
            .unwrap();
    assert_eq!(topo[0].classification, TopologyClass::Cooperative);
    assert!(topo[0].mean_delta < -DEFAULT_TOPOLOGY_EPSILON);

    // Competitive fixture: removals help (mirrors the published
    // -0.116 / +0.010 dichotomy).
    let comp = MockEffects {
        base: 0.7,
        penalties: (0..4).map(|i| (format!("blk-{i}"), -0.01)).collect(),
        ..Default::default()
    };
    let comp0 = pipeline_config(root.path(), "comp0", &comp, Phase::Phase0);
    cmd_run(&comp0, true, false).unwrap();
    let comp1 = pipeline_config(root.path(), "comp1", &comp, Phase::Phase1);
    cmd_run(&comp1, true, false).unwrap();
    let plan1 = read_plan(&comp1.output_dir.join("plan.json")).unwrap();
    let results0 =
        ablate_core::analysis::read_results_jsonl(&comp0.output_dir.join("results.jsonl"))
            .unwrap();
    let results1 =
        ablate_core::analysis::read_results_jsonl(&comp1.output_dir.join("results.jsonl"))
            .unwrap();
    let plan0 = read_plan(&comp0.output_dir.join("plan.json")).unwrap();
    let mains = main_effects(&results0, &plan0, 0.05).unwrap();
    let pairs = pairwise_interactions(&results1, &plan1, &mains, 0.05).unwrap();
    let topo = topology_classify(&pairs, DEFAULT_TOPOLOGY_EPSILON);
    assert_eq!(topo[0].classification, TopologyClass::Competitive);
    assert!(topo[0].mean_delta > DEFAULT_TOPOLOGY_EPSILON);

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "pipeline took {elapsed:?}");
    println!(
        "ACCEPTANCE 06 PASS: signs exact, I(blk-0,blk-1)={interaction:.4}, \
         cooperative/competitive dichotomy recovered in {elapsed:?}"
    );
}

#[test]
fn accept_07_derived_quantity_arithmetic() {
    // Variance reduction: 0.1567 -> 0.0290 reports 81% +/- 1%.
    let reduction = variance_reduction_pct(0.1567, 0.0290);
    assert!((reduction - 81.0).abs() <= 1.0, "reduction = {reduction}");

    // Character statistics reproduce the published percentages.
    let rows = char_stats_from_counts(
        &[
            ("en".into(), 15_970),
            ("zh".into(), 6_910),
            ("es".into(), 19_178),
            ("fr".into(), 20_744),
        ],
        "en",
    )
    .unwrap();
    let pct_of = |lang: &str| {
        rows.iter()
            .find(|r| r.language == lang)
            .unwrap()
            .percent_of_reference
    };
    assert_eq!(pct_of("zh"), 43.3);
    assert_eq!(pct_of("es"), 120.1);
    assert_eq!(pct_of("fr"), 129.9);

    // Ledger fixture with the published per-model rows.
    let mut ledger = RunLedger::new();
    ledger.add_row(
        "anthropic/claude-haiku-4-5",
        14_270,
        UsdMicros::from_dollars(66.10),
    );
    ledger.add_row(
        "mistralai/mistral-medium-3.1",
        1_560,
        UsdMicros::from_dollars(1.21),
    );
    ledger.add_row(
        "deepseek/deepseek-chat-v3-0324",
        1_560,
        UsdMicros::from_dollars(1.12),
    );
    ledger.add_row(
        "google/gemini-2.0-flash-001",
        1_728,
        UsdMicros::from_dollars(0.53),
    );
    assert_eq!(ledger.total_calls(), 19_118);
    let total = ledger.total_cost().as_dollars();
    assert!((total - 68.95).abs() <= 0.02, "total = {total}");
    println!(
        "ACCEPTANCE 07 PASS: reduction {reduction:.1}%, char stats 43.3/120.1/129.9, \
         ledger 19118 calls ${total:.2}"
    );
}

#[test]
fn accept_08_cache_determinism_and_verify() {
    let root = tempfile::tempdir().unwrap();
    let effects = MockEffects {
        penalties: [("blk-0".to_string(), 0.1), ("blk-2".to_string(), 0.2)].into(),
        cost_per_call_usd: 0.0002,
        ..Default::default()
    };
    let config = pipeline_config(root.path(), "cache", &effects, Phase::Phase0);
    let first = cmd_run(&config, true, false).unwrap();
    assert!(first.ledger.total_network_calls() > 0);
    let bytes_first = fs::read(config.output_dir.join("results.jsonl")).unwrap();

    let second = cmd_run(&config, true, false).unwrap();
    assert_eq!(second.ledger.total_network_calls(), 0, "zero network calls");
    let bytes_second = fs::read(config.output_dir.join("results.jsonl")).unwrap();
    assert_eq!(bytes_first, bytes_second, "JSONL byte-for-byte");

    // verify recomputes analysis tables with zero mismatches, checks
    // ledger conservation, and cross-checks the cache.
    let analysis = root.path().join("cache-analysis");
    cmd_analyze(&AnalyzeOptions {
        mode: AnalyzeMode::Phase0,
        results: config.output_dir.join("results.jsonl"),
        results_b: None,
        plan: Some(config.output_dir.join("plan.json")),
        phase0_results: None,
        corpora: vec![],
        probes: None,
        q: 0.05,
        epsilon: DEFAULT_TOPOLOGY_EPSILON,
        targets: vec![],
        permuted_unit: ablate_core::analysis::PermutedUnit::VariantWithinCell,
        n_perm: 500,
        seed: 2,
        hub_block: None,
        top_n: 20,
        hub_null: ablate_core::analysis::HubNull::SlotShuffle,
        out_dir: analysis.clone(),
    })
    .unwrap();
    let verify_analysis = cmd_verify(&analysis, None).unwrap();
    assert!(verify_analysis.all_passed(), "{verify_analysis:?}");
    let verify_run = cmd_verify(&config.output_dir, Some(config.cache_dir.as_path())).unwrap();
    assert!(verify_run.all_passed(), "{verify_run:?}");
    println!("ACCEPTANCE 08 PASS: warm replay byte-identical with zero network calls; verify clean");
}

#[test]
fn accept_09_register_audit() {
    let english = RegisterLexicon::builtin_english();
    let (label, hits) = classify_register("NEVER use TodoWrite during commits.", &english);
    assert_eq!(label, Register::Imperative, "hits: {hits:?}");

    let spanish = RegisterLexicon::builtin_spanish();
    let (label, hits) = classify_register("Herramienta Task: Estado: disponible", &spanish);
    assert_eq!(label, Register::Declarative, "hits: {hits:?}");
    println!("ACCEPTANCE 09 PASS: shipped lexicons classify both published fragments correctly");
}

#[test]
fn accept_10_variance_ratio_recovery() {
    // Seeded generator with a true 3x procedural/declarative variance
    // structure (pattern variance 0.03 vs 0.01 across languages).
    use ablate_core::analysis::variance_by_encoding;
    use ablate_core::corpus::Encoding;
    use ablate_core::runner::{Outcome, TrialResult};

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let languages = ["en", "zh", "fr", "es"];
    let models = ["m1", "m2", "m3", "m4"];
    let mut corpus = ablation_corpus("en", 0);
    let mut probes = Vec::new();
    let mut results = Vec::new();
    for class in ["procedural", "declarative"] {
        for b in 0..11 {
            let block_id = format!("{class}-{b}");
            let mut blk = support::block(&block_id, &format!("text {class} {b}"), true);
            blk.encoding = if class == "procedural" {
                Encoding::Procedural
            } else {
                Encoding::Declarative
            };
            corpus.blocks.push(blk);
            let probe_id = format!("probe-{block_id}");
            probes.push(length_probe(&probe_id, &block_id, 1000));
            let scale = if class == "procedural" {
                0.1 * 3f64.sqrt()
            } else {
                0.1
            };
            for model in models {
                let flip = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                for (li, language) in languages.iter().enumerate() {
                    let pattern = if li % 2 == 0 { 1.0 } else { -1.0 };
                    let jitter = 0.01 * (rng.gen::<f64>() - 0.5);
                    let score = (0.5 + scale * pattern * flip + jitter).clamp(0.0, 1.0);
                    for trial in 0..3u32 {
                        results.push(TrialResult {
                            probe_id: probe_id.clone(),
                            config_id: "baseline".into(),
                            language: language.to_string(),
                            variant: "original".into(),
                            model_id: model.to_string(),
                            trial,
                            absent: vec![],
                            raw_response: "r".into(),
                            outcome: Outcome::Scored { score },
                            prompt_chars: 1,
                            completion_chars: 1,
                            cost_usd: UsdMicros::ZERO,
                            retries: 0,
                            temperature: 0.0,
                            timestamp: "1970-01-01T00:00:00Z".into(),
                            cached: false,
                        });
                    }
                }
            }
        }
    }
    let ev = variance_by_encoding(&results, &probes, &corpus).unwrap();
    let ratio = ev.ratio.expect("ratio defined");
    assert!(
        (2.5..=3.5).contains(&ratio),
        "true ratio 3, measured {ratio:.3}"
    );
    println!("ACCEPTANCE 10 PASS: planted 3x variance ratio measured at {ratio:.3}");

    // The class memberships drive the ratio: sanity-check both classes
    // landed 11 blocks.
    let procedural = ev.blocks.iter().filter(|b| b.encoding == Encoding::Procedural).count();
    let declarative = ev.blocks.iter().filter(|b| b.encoding == Encoding::Declarative).count();
    assert_eq!((procedural, declarative), (11, 11));
}
