//! Derived quantities over trial results.
//!
//! Everything here is a pure function of the results JSONL (each
//! [`TrialResult`] carries its own absent-block set), so reruns are
//! byte-identical and the verify path can recompute any table from the
//! raw file. Invalid trials are excluded from every mean and surfaced
//! as counts; a silent zero would masquerade as a violation.
//!
//! Sign convention, fixed throughout: delta = ablated minus baseline,
//! so negative means removal hurts (cooperative) and positive means
//! removal helps (competitive).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Encoding};
use crate::design::{verify_coverage, Phase, Plan};
use crate::probes::Probe;
use crate::runner::TrialResult;
use crate::stats::{
    bh_adjust, mean, pearson_r, permutation_test, variance, welch_t, PermutationMode, Sample,
    StatsError, TestResult,
};

/// Mean-delta band treated as flat topology.
pub const DEFAULT_TOPOLOGY_EPSILON: f64 = 0.005;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("cannot read results {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: bad JSONL line: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("no baseline results for: {}", format_pairs(.0))]
    MissingCell(Vec<(String, String)>),
    #[error("no results for configuration absent={{{block}}} in group {group}")]
    MissingConfig { group: String, block: String },
    #[error("plan is not a phase-0 plan")]
    NotPhase0,
    #[error("plan fails strength-2 coverage: {missing} tuples missing")]
    PlanNotCovering { missing: usize },
    #[error("no configuration co-absents pair ({0}, {1})")]
    UncoveredPair(String, String),
    #[error("main-effect table lacks block `{0}` for group {1}")]
    MissingMainEffect(String, String),
    #[error("block `{0}` is not in the pair table")]
    BlockNotInTable(String),
    #[error("top_n {top_n} exceeds the {pairs} pairs available")]
    NotEnoughPairs { top_n: usize, pairs: usize },
    #[error("block `{0}` has no encoding label")]
    UnlabeledBlock(String),
    #[error("need at least two languages, found {0}")]
    TooFewLanguages(usize),
    #[error("result sets do not match: {0}")]
    ProbeSetMismatch(String),
    #[error("effect table is empty")]
    EmptyEffects,
    #[error("probe `{0}` targets a block missing from the corpus")]
    UnknownProbe(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn format_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(m, l)| format!("({m}, {l})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Read a results JSONL file.
pub fn read_results_jsonl(path: &Path) -> Result<Vec<TrialResult>, AnalysisError> {
    let text = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| AnalysisError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// One (language, variant, model) slice of a result set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub language: String,
    pub variant: String,
    pub model: String,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.language, self.variant, self.model)
    }
}

fn group_of(r: &TrialResult) -> Group {
    Group {
        language: r.language.clone(),
        variant: r.variant.clone(),
        model: r.model_id.clone(),
    }
}

/// Valid trial scores for (group, probe) bucketed by absent-set,
/// ordered deterministically.
struct ResultIndex {
    /// (group, probe, absent-set) -> scores in (config, trial) order.
    scores: BTreeMap<(Group, String, Vec<String>), Vec<f64>>,
    groups: BTreeSet<Group>,
    probes: BTreeSet<String>,
    invalid: u64,
}

impl ResultIndex {
    fn build(results: &[TrialResult]) -> Self {
        let mut sorted: Vec<&TrialResult> = results.iter().collect();
        sorted.sort_by(|a, b| {
            (
                &a.language,
                &a.variant,
                &a.model_id,
                &a.probe_id,
                &a.config_id,
                a.trial,
            )
                .cmp(&(
                    &b.language,
                    &b.variant,
                    &b.model_id,
                    &b.probe_id,
                    &b.config_id,
                    b.trial,
                ))
        });
        let mut scores: BTreeMap<(Group, String, Vec<String>), Vec<f64>> = BTreeMap::new();
        let mut groups = BTreeSet::new();
        let mut probes = BTreeSet::new();
        let mut invalid = 0;
        for r in sorted {
            groups.insert(group_of(r));
            probes.insert(r.probe_id.clone());
            match r.outcome.score() {
                Some(s) => {
                    scores
                        .entry((group_of(r), r.probe_id.clone(), r.absent.clone()))
                        .or_default()
                        .push(s);
                }
                None => invalid += 1,
            }
        }
        ResultIndex {
            scores,
            groups,
            probes,
            invalid,
        }
    }

    fn baseline(&self, group: &Group, probe: &str) -> Option<&Vec<f64>> {
        self.scores
            .get(&(group.clone(), probe.to_string(), Vec::new()))
    }

    /// Scores pooled over every configuration whose absent set
    /// satisfies the predicate.
    fn pooled<F: Fn(&[String]) -> bool>(&self, group: &Group, probe: &str, pred: F) -> Vec<f64> {
        let mut out = Vec::new();
        for ((g, p, absent), scores) in &self.scores {
            if g == group && p == probe && pred(absent) {
                out.extend_from_slice(scores);
            }
        }
        out
    }

    /// (absent set, trial scores) per configuration matching the
    /// predicate.
    fn per_config<F: Fn(&[String]) -> bool>(
        &self,
        group: &Group,
        probe: &str,
        pred: F,
    ) -> Vec<(&Vec<String>, &Vec<f64>)> {
        self.scores
            .iter()
            .filter(|((g, p, absent), _)| g == group && p == probe && pred(absent))
            .map(|((_, _, absent), scores)| (absent, scores))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Baseline matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub model: String,
    pub per_language: BTreeMap<String, f64>,
    /// max - min across languages.
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMatrix {
    pub languages: Vec<String>,
    pub rows: Vec<BaselineRow>,
    pub invalid_trials: u64,
    /// Cells where an empty response scored 1.0; suspicious, so flagged.
    pub empty_response_cells: u64,
}

/// Mean adherence per (model, language) over baseline-configuration
/// trials: mean over probes of mean over trials.
pub fn baseline_matrix(results: &[TrialResult]) -> Result<BaselineMatrix, AnalysisError> {
    let index = ResultIndex::build(results);
    let models: BTreeSet<String> = index.groups.iter().map(|g| g.model.clone()).collect();
    let languages: BTreeSet<String> = index.groups.iter().map(|g| g.language.clone()).collect();

    let empty_response_cells = results
        .iter()
        .filter(|r| {
            r.absent.is_empty() && r.raw_response.is_empty() && r.outcome.score() == Some(1.0)
        })
        .count() as u64;

    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for model in &models {
        let mut per_language = BTreeMap::new();
        for language in &languages {
            // Pool variants sharing the (model, language) cell.
            let groups: Vec<&Group> = index
                .groups
                .iter()
                .filter(|g| &g.model == model && &g.language == language)
                .collect();
            let mut probe_means = Vec::new();
            for probe in &index.probes {
                let mut trials = Vec::new();
                for g in &groups {
                    if let Some(scores) = index.baseline(g, probe) {
                        trials.extend_from_slice(scores);
                    }
                }
                if !trials.is_empty() {
                    probe_means.push(mean(&trials));
                }
            }
            if probe_means.is_empty() {
                missing.push((model.clone(), language.clone()));
            } else {
                per_language.insert(language.clone(), mean(&probe_means));
            }
        }
        let range = match (
            per_language.values().cloned().reduce(f64::max),
            per_language.values().cloned().reduce(f64::min),
        ) {
            (Some(hi), Some(lo)) => hi - lo,
            _ => 0.0,
        };
        rows.push(BaselineRow {
            model: model.clone(),
            per_language,
            range,
        });
    }
    if !missing.is_empty() {
        return Err(AnalysisError::MissingCell(missing));
    }
    Ok(BaselineMatrix {
        languages: languages.into_iter().collect(),
        rows,
        invalid_trials: index.invalid,
        empty_response_cells,
    })
}

// ---------------------------------------------------------------------------
// Effect tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EffectKey {
    Block(String),
    Pair(String, String),
}

impl EffectKey {
    pub fn contains(&self, block: &str) -> bool {
        match self {
            EffectKey::Block(b) => b == block,
            EffectKey::Pair(a, b) => a == block || b == block,
        }
    }

    pub fn label(&self) -> String {
        match self {
            EffectKey::Block(b) => b.clone(),
            EffectKey::Pair(a, b) => format!("{a}+{b}"),
        }
    }
}

impl Serialize for EffectKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(1))?;
        match self {
            EffectKey::Block(b) => map.serialize_entry("block", b)?,
            EffectKey::Pair(a, b) => map.serialize_entry("pair", &vec![a, b])?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for EffectKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            block: Option<String>,
            #[serde(default)]
            pair: Option<(String, String)>,
        }
        let raw = Raw::deserialize(d)?;
        match (raw.block, raw.pair) {
            (Some(b), None) => Ok(EffectKey::Block(b)),
            (None, Some((a, b))) => Ok(EffectKey::Pair(a, b)),
            _ => Err(serde::de::Error::custom("expected `block` xor `pair`")),
        }
    }
}

/// Per-probe delta with its significance test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEffect {
    pub delta: f64,
    /// None when the probe was deterministic (both samples constant)
    /// or trials were too few to test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub key: EffectKey,
    pub language: String,
    pub variant: String,
    pub model: String,
    /// Mean over probes of the per-probe raw deltas.
    pub delta: f64,
    /// Pairs only: interaction beyond additive main effects,
    /// I_ij = delta_ij - (delta_i + delta_j), mean over probes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<f64>,
    pub per_probe: BTreeMap<String, ProbeEffect>,
    /// Pairs only: per-probe interaction values.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_probe_interaction: BTreeMap<String, f64>,
}

impl EffectRow {
    fn group(&self) -> Group {
        Group {
            language: self.language.clone(),
            variant: self.variant.clone(),
            model: self.model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTable {
    pub rows: Vec<EffectRow>,
    /// FDR level used for the Benjamini-Hochberg adjustment.
    pub q: f64,
    pub invalid_trials: u64,
}

impl EffectTable {
    pub fn groups(&self) -> BTreeSet<Group> {
        self.rows.iter().map(|r| r.group()).collect()
    }

    pub fn rows_for(&self, group: &Group) -> Vec<&EffectRow> {
        self.rows.iter().filter(|r| &r.group() == group).collect()
    }

    /// Per-probe mean delta across this group's rows.
    pub fn probe_deltas(&self, group: &Group) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in self.rows_for(group) {
            for (probe, eff) in &row.per_probe {
                acc.entry(probe.clone()).or_default().push(eff.delta);
            }
        }
        acc.into_iter().map(|(p, v)| (p, mean(&v))).collect()
    }
}

fn welch_or_none(
    label_a: &str,
    a: &[f64],
    label_b: &str,
    b: &[f64],
) -> Result<Option<TestResult>, AnalysisError> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(None);
    }
    let sa = Sample::new(label_a, a.to_vec())?;
    let sb = Sample::new(label_b, b.to_vec())?;
    match welch_t(&sa, &sb) {
        Ok(t) => Ok(Some(t)),
        Err(StatsError::DegenerateSamples(_, _)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Apply BH across every (row, probe) test in the table.
fn apply_bh(rows: &mut [EffectRow], q: f64) -> Result<(), AnalysisError> {
    let mut locations = Vec::new();
    let mut p_values = Vec::new();
    for (ri, row) in rows.iter().enumerate() {
        for (probe, eff) in &row.per_probe {
            if let Some(test) = &eff.test {
                locations.push((ri, probe.clone()));
                p_values.push(test.p_value);
            }
        }
    }
    let adjustment = bh_adjust(&p_values, q)?;
    for ((ri, probe), adj) in locations.into_iter().zip(adjustment.adjusted_p) {
        rows[ri]
            .per_probe
            .get_mut(&probe)
            .expect("location points at existing probe")
            .p_adjusted = Some(adj);
    }
    Ok(())
}

/// Phase-0 main effects: per block, the change in mean adherence when
/// that block alone is removed, with a Welch test per probe and BH
/// adjustment across all (block, probe) tests in the table.
pub fn main_effects(
    results: &[TrialResult],
    plan: &Plan,
    q: f64,
) -> Result<EffectTable, AnalysisError> {
    if plan.phase != Phase::Phase0 {
        return Err(AnalysisError::NotPhase0);
    }
    let index = ResultIndex::build(results);
    let mut rows = Vec::new();
    for group in &index.groups {
        for block in &plan.block_ids {
            let mut per_probe = BTreeMap::new();
            let mut deltas = Vec::new();
            for probe in &index.probes {
                let baseline = index
                    .baseline(group, probe)
                    .ok_or_else(|| AnalysisError::MissingConfig {
                        group: group.to_string(),
                        block: "<baseline>".into(),
                    })?
                    .clone();
                let ablated = index.pooled(group, probe, |absent| absent == [block.clone()]);
                if ablated.is_empty() {
                    return Err(AnalysisError::MissingConfig {
                        group: group.to_string(),
                        block: block.clone(),
                    });
                }
                let delta = mean(&ablated) - mean(&baseline);
                let test = welch_or_none(
                    &format!("{block}/{probe}/ablated"),
                    &ablated,
                    &format!("{probe}/baseline"),
                    &baseline,
                )?;
                deltas.push(delta);
                per_probe.insert(
                    probe.to_string(),
                    ProbeEffect {
                        delta,
                        test,
                        p_adjusted: None,
                    },
                );
            }
            rows.push(EffectRow {
                key: EffectKey::Block(block.clone()),
                language: group.language.clone(),
                variant: group.variant.clone(),
                model: group.model.clone(),
                delta: mean(&deltas),
                interaction: None,
                per_probe,
                per_probe_interaction: BTreeMap::new(),
            });
        }
    }
    apply_bh(&mut rows, q)?;
    Ok(EffectTable {
        rows,
        q,
        invalid_trials: index.invalid,
    })
}

/// Phase-1 pairwise effects.
///
/// The raw pair delta is measured on configurations where both blocks
/// are absent, whatever else the covering array removed alongside. The
/// interaction is the residual beyond additivity: per configuration,
/// the observed delta minus the summed phase-0 main effects of *every*
/// absent block, averaged over the pair's configurations. Subtracting
/// only the pair's own main effects would leave the other co-removed
/// blocks' effects in the estimate and break the additive null. BH
/// runs across all (pair, probe) tests.
pub fn pairwise_interactions(
    results: &[TrialResult],
    plan: &Plan,
    main: &EffectTable,
    q: f64,
) -> Result<EffectTable, AnalysisError> {
    let coverage = verify_coverage(plan, 2).map_err(|_| AnalysisError::PlanNotCovering {
        missing: usize::MAX,
    })?;
    if !coverage.is_covering() {
        return Err(AnalysisError::PlanNotCovering {
            missing: coverage.missing.len(),
        });
    }
    let index = ResultIndex::build(results);

    // Main-effect per-probe deltas by (group, block).
    let mut main_by_block: BTreeMap<(Group, &str), &BTreeMap<String, ProbeEffect>> =
        BTreeMap::new();
    for row in &main.rows {
        if let EffectKey::Block(b) = &row.key {
            main_by_block.insert((row.group(), b.as_str()), &row.per_probe);
        }
    }

    let mut rows = Vec::new();
    for group in &index.groups {
        for (i, block_i) in plan.block_ids.iter().enumerate() {
            for block_j in &plan.block_ids[i + 1..] {
                let mut per_probe = BTreeMap::new();
                let mut per_probe_interaction = BTreeMap::new();
                let mut deltas = Vec::new();
                let mut interactions = Vec::new();
                for probe in &index.probes {
                    let baseline = index
                        .baseline(group, probe)
                        .ok_or_else(|| AnalysisError::MissingConfig {
                            group: group.to_string(),
                            block: "<baseline>".into(),
                        })?
                        .clone();
                    let configs = index.per_config(group, probe, |absent| {
                        absent.contains(block_i) && absent.contains(block_j)
                    });
                    if configs.is_empty() {
                        return Err(AnalysisError::UncoveredPair(
                            block_i.clone(),
                            block_j.clone(),
                        ));
                    }
                    let main_of = |block: &str| -> Result<f64, AnalysisError> {
                        Ok(main_by_block
                            .get(&(group.clone(), block))
                            .and_then(|m| m.get(probe))
                            .ok_or_else(|| {
                                AnalysisError::MissingMainEffect(
                                    block.to_string(),
                                    group.to_string(),
                                )
                            })?
                            .delta)
                    };
                    let baseline_mean = mean(&baseline);
                    let mut config_deltas = Vec::with_capacity(configs.len());
                    let mut residuals = Vec::with_capacity(configs.len());
                    let mut co_absent = Vec::new();
                    for (absent, scores) in &configs {
                        let config_delta = mean(scores) - baseline_mean;
                        let mut additive = 0.0;
                        for block in absent.iter() {
                            additive += main_of(block)?;
                        }
                        config_deltas.push(config_delta);
                        residuals.push(config_delta - additive);
                        co_absent.extend_from_slice(scores);
                    }
                    let delta = mean(&config_deltas);
                    let interaction = mean(&residuals);
                    let test = welch_or_none(
                        &format!("{block_i}+{block_j}/{probe}"),
                        &co_absent,
                        &format!("{probe}/baseline"),
                        &baseline,
                    )?;
                    deltas.push(delta);
                    interactions.push(interaction);
                    per_probe.insert(
                        probe.to_string(),
                        ProbeEffect {
                            delta,
                            test,
                            p_adjusted: None,
                        },
                    );
                    per_probe_interaction.insert(probe.to_string(), interaction);
                }
                rows.push(EffectRow {
                    key: EffectKey::Pair(block_i.clone(), block_j.clone()),
                    language: group.language.clone(),
                    variant: group.variant.clone(),
                    model: group.model.clone(),
                    delta: mean(&deltas),
                    interaction: Some(mean(&interactions)),
                    per_probe,
                    per_probe_interaction,
                });
            }
        }
    }
    apply_bh(&mut rows, q)?;
    Ok(EffectTable {
        rows,
        q,
        invalid_trials: index.invalid,
    })
}

/// Mean of the raw pairwise deltas per group, the aggregate a topology
/// verdict is read from.
pub fn mean_delta_by_group(table: &EffectTable) -> BTreeMap<Group, f64> {
    let mut acc: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
    for row in &table.rows {
        acc.entry(row.group()).or_default().push(row.delta);
    }
    acc.into_iter().map(|(g, v)| (g, mean(&v))).collect()
}

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyClass {
    Cooperative,
    Competitive,
    Flat,
}

impl fmt::Display for TopologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopologyClass::Cooperative => "cooperative",
            TopologyClass::Competitive => "competitive",
            TopologyClass::Flat => "flat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySummary {
    pub language: String,
    pub variant: String,
    pub model: String,
    pub mean_delta: f64,
    pub classification: TopologyClass,
    /// Probes whose mean delta across rows is positive.
    pub competitive_probe_count: usize,
    pub total_probes: usize,
}

pub fn classify_mean_delta(mean_delta: f64, epsilon: f64) -> TopologyClass {
    if mean_delta < -epsilon {
        TopologyClass::Cooperative
    } else if mean_delta > epsilon {
        TopologyClass::Competitive
    } else {
        TopologyClass::Flat
    }
}

/// Classify each group of an effect table: cooperative when the mean
/// delta is below -epsilon, competitive above +epsilon, flat otherwise.
pub fn topology_classify(table: &EffectTable, epsilon: f64) -> Vec<TopologySummary> {
    let means = mean_delta_by_group(table);
    means
        .into_iter()
        .map(|(group, mean_delta)| {
            let probe_deltas = table.probe_deltas(&group);
            TopologySummary {
                language: group.language.clone(),
                variant: group.variant.clone(),
                model: group.model.clone(),
                mean_delta,
                classification: classify_mean_delta(mean_delta, epsilon),
                competitive_probe_count: probe_deltas.values().filter(|&&d| d > 0.0).count(),
                total_probes: probe_deltas.len(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Cross-language correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub languages: Vec<String>,
    /// r[i][j]; None where a vector had zero variance.
    pub r: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.languages.iter().position(|l| l == a)?;
        let j = self.languages.iter().position(|l| l == b)?;
        self.r[i][j]
    }
}

/// Block order plus per-language delta vectors aligned to it.
pub type AlignedVectors = (Vec<String>, BTreeMap<String, Vec<f64>>);

/// Per-language block-delta vectors for one (model, variant), aligned
/// on sorted block ids. Input for [`cross_language_correlation`].
pub fn effect_vectors_by_language(
    table: &EffectTable,
    model: &str,
    variant: &str,
) -> Result<AlignedVectors, AnalysisError> {
    let mut block_ids: BTreeSet<String> = BTreeSet::new();
    for row in &table.rows {
        if let EffectKey::Block(b) = &row.key {
            if row.model == model && row.variant == variant {
                block_ids.insert(b.clone());
            }
        }
    }
    if block_ids.is_empty() {
        return Err(AnalysisError::EmptyEffects);
    }
    let order: Vec<String> = block_ids.into_iter().collect();
    let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let languages: BTreeSet<String> = table
        .rows
        .iter()
        .filter(|r| r.model == model && r.variant == variant)
        .map(|r| r.language.clone())
        .collect();
    for language in languages {
        let mut vec = Vec::with_capacity(order.len());
        for block in &order {
            let row = table
                .rows
                .iter()
                .find(|r| {
                    r.model == model
                        && r.variant == variant
                        && r.language == language
                        && r.key == EffectKey::Block(block.clone())
                })
                .ok_or_else(|| AnalysisError::MissingMainEffect(block.clone(), language.clone()))?;
            vec.push(row.delta);
        }
        vectors.insert(language, vec);
    }
    Ok((order, vectors))
}

/// Pearson correlation between every pair of per-language delta
/// vectors; the diagonal is exactly 1.
pub fn cross_language_correlation(
    vectors: &BTreeMap<String, Vec<f64>>,
) -> Result<CorrelationMatrix, AnalysisError> {
    let languages: Vec<String> = vectors.keys().cloned().collect();
    let n = languages.len();
    let mut r = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                r[i][j] = Some(1.0);
                continue;
            }
            let x = &vectors[&languages[i]];
            let y = &vectors[&languages[j]];
            if x.len() != y.len() {
                return Err(AnalysisError::Stats(StatsError::MismatchedLengths(
                    x.len(),
                    y.len(),
                )));
            }
            r[i][j] = match pearson_r(x, y) {
                Ok(v) => Some(v),
                Err(StatsError::ZeroVariance(_)) => None,
                Err(e) => return Err(e.into()),
            };
        }
    }
    Ok(CorrelationMatrix { languages, r })
}

// ---------------------------------------------------------------------------
// Hub concentration
// ---------------------------------------------------------------------------

/// Null model for the hub permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HubNull {
    /// Shuffle block identities across all pair slots (default).
    SlotShuffle,
    /// Relabel blocks by a uniform bijection; degrees are preserved, so
    /// the null reduces to drawing a uniformly random block.
    DegreePreserving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubResult {
    pub block: String,
    /// Appearances among the top_n pairs by |interaction|.
    pub count: usize,
    pub top_n: usize,
    /// Total pairs the block appears in.
    pub degree: usize,
    pub total_pairs: usize,
    pub p_value: f64,
    pub null_model: HubNull,
    pub exhaustive: bool,
}

/// How concentrated is a block among the strongest interactions?
/// Pairs are ranked by |interaction|; the permutation p-value asks how
/// often a random relabeling puts the block in at least as many of the
/// top pairs.
pub fn hub_concentration(
    table: &EffectTable,
    group: &Group,
    block: &str,
    top_n: usize,
    null_model: HubNull,
    n_perm: usize,
    seed: u64,
) -> Result<HubResult, AnalysisError> {
    let mut pairs: Vec<(&EffectRow, f64)> = table
        .rows_for(group)
        .into_iter()
        .filter(|r| matches!(r.key, EffectKey::Pair(_, _)))
        .map(|r| (r, r.interaction.unwrap_or(r.delta)))
        .collect();
    if pairs.iter().all(|(r, _)| !r.key.contains(block)) {
        return Err(AnalysisError::BlockNotInTable(block.to_string()));
    }
    if pairs.len() < top_n {
        return Err(AnalysisError::NotEnoughPairs {
            top_n,
            pairs: pairs.len(),
        });
    }
    pairs.sort_by(|(ra, va), (rb, vb)| {
        vb.abs()
            .partial_cmp(&va.abs())
            .unwrap()
            .then_with(|| ra.key.cmp(&rb.key))
    });
    let in_top: Vec<bool> = (0..pairs.len()).map(|i| i < top_n).collect();
    let count = pairs
        .iter()
        .zip(&in_top)
        .filter(|((r, _), &top)| top && r.key.contains(block))
        .count();
    let degree = pairs.iter().filter(|(r, _)| r.key.contains(block)).count();

    let (p_value, exhaustive) = match null_model {
        HubNull::SlotShuffle => {
            // One slot per pair endpoint: value = pair in top set,
            // label = slot currently holds the hub block. Shuffling the
            // label multiset is exactly a relabeling of blocks across
            // pair slots.
            let mut values = Vec::with_capacity(pairs.len() * 2);
            let mut labels = Vec::with_capacity(pairs.len() * 2);
            for ((row, _), &top) in pairs.iter().zip(&in_top) {
                let EffectKey::Pair(a, b) = &row.key else {
                    unreachable!("pairs filtered above")
                };
                for endpoint in [a, b] {
                    values.push(if top { 1.0 } else { 0.0 });
                    labels.push(u32::from(endpoint == block));
                }
            }
            let stat = |values: &[f64], labels: &[u32]| -> f64 {
                values
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == 1)
                    .map(|(v, _)| v)
                    .sum()
            };
            let outcome = permutation_test(count as f64, stat, &values, &labels, n_perm, seed)?;
            (outcome.p_value, outcome.mode == PermutationMode::Exhaustive)
        }
        HubNull::DegreePreserving => {
            // Under a uniform bijective relabeling the hub maps to a
            // uniformly random block, so the p-value is the exact
            // fraction of blocks at least as concentrated.
            let mut blocks: BTreeSet<&str> = BTreeSet::new();
            for (row, _) in &pairs {
                if let EffectKey::Pair(a, b) = &row.key {
                    blocks.insert(a);
                    blocks.insert(b);
                }
            }
            let at_least = blocks
                .iter()
                .filter(|candidate| {
                    pairs
                        .iter()
                        .zip(&in_top)
                        .filter(|((r, _), &top)| top && r.key.contains(candidate))
                        .count()
                        >= count
                })
                .count();
            (at_least as f64 / blocks.len() as f64, true)
        }
    };

    Ok(HubResult {
        block: block.to_string(),
        count,
        top_n,
        degree,
        total_pairs: pairs.len(),
        p_value,
        null_model,
        exhaustive,
    })
}

// ---------------------------------------------------------------------------
// Variance by encoding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVariance {
    pub block: String,
    pub probe: String,
    pub encoding: Encoding,
    /// Population variance across languages of the per-language mean
    /// baseline score, averaged over models.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingVariance {
    pub blocks: Vec<BlockVariance>,
    pub procedural_mean: Option<f64>,
    pub declarative_mean: Option<f64>,
    /// procedural / declarative; None when undefined (missing class or
    /// zero declarative variance).
    pub ratio: Option<f64>,
    pub ratio_defined: bool,
}

/// Cross-linguistic variance of baseline adherence, stratified by each
/// probed block's encoding label.
pub fn variance_by_encoding(
    results: &[TrialResult],
    probes: &[Probe],
    corpus: &Corpus,
) -> Result<EncodingVariance, AnalysisError> {
    let index = ResultIndex::build(results);
    let languages: BTreeSet<String> = index.groups.iter().map(|g| g.language.clone()).collect();
    if languages.len() < 2 {
        return Err(AnalysisError::TooFewLanguages(languages.len()));
    }
    let models: BTreeSet<String> = index.groups.iter().map(|g| g.model.clone()).collect();

    let mut blocks = Vec::new();
    for probe in probes {
        let block = corpus
            .block(&probe.target_block)
            .ok_or_else(|| AnalysisError::UnknownProbe(probe.id.clone()))?;
        if block.encoding == Encoding::Unlabeled {
            return Err(AnalysisError::UnlabeledBlock(block.id.clone()));
        }
        let mut per_model_variance = Vec::new();
        for model in &models {
            let mut lang_means = Vec::new();
            for language in &languages {
                let groups: Vec<&Group> = index
                    .groups
                    .iter()
                    .filter(|g| &g.model == model && &g.language == language)
                    .collect();
                let mut trials = Vec::new();
                for g in groups {
                    if let Some(scores) = index.baseline(g, &probe.id) {
                        trials.extend_from_slice(scores);
                    }
                }
                if trials.is_empty() {
                    return Err(AnalysisError::MissingCell(vec![(
                        model.clone(),
                        language.clone(),
                    )]));
                }
                lang_means.push(mean(&trials));
            }
            per_model_variance.push(variance(&lang_means)?);
        }
        blocks.push(BlockVariance {
            block: block.id.clone(),
            probe: probe.id.clone(),
            encoding: block.encoding,
            variance: mean(&per_model_variance),
        });
    }

    let class_mean = |enc: Encoding| -> Option<f64> {
        let vals: Vec<f64> = blocks
            .iter()
            .filter(|b| b.encoding == enc)
            .map(|b| b.variance)
            .collect();
        (!vals.is_empty()).then(|| mean(&vals))
    };
    let procedural_mean = class_mean(Encoding::Procedural);
    let declarative_mean = class_mean(Encoding::Declarative);
    let ratio = match (procedural_mean, declarative_mean) {
        (Some(p), Some(d)) if d > 0.0 => Some(p / d),
        _ => None,
    };
    Ok(EncodingVariance {
        blocks,
        procedural_mean,
        declarative_mean,
        ratio_defined: ratio.is_some(),
        ratio,
    })
}

// ---------------------------------------------------------------------------
// Variant comparison
// ---------------------------------------------------------------------------

/// 100 * (1 - v_b / v_a): how much of the cross-linguistic variance the
/// variant removed.
pub fn variance_reduction_pct(v_a: f64, v_b: f64) -> f64 {
    100.0 * (1.0 - v_b / v_a)
}

/// What gets shuffled under the null of the variance-reduction
/// permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutedUnit {
    /// Swap variant labels within each (model, language) cell.
    VariantWithinCell,
    /// Re-draw which probe counts as the target; exact over probes.
    TargetProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeShift {
    pub probe_id: String,
    pub is_target: bool,
    pub delta_a: f64,
    pub delta_b: f64,
    /// delta_b - delta_a.
    pub shift: f64,
    /// Table vocabulary: Fixed, Reduced, Improved, Regressed, unchanged.
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub probe_id: String,
    pub block_id: String,
    pub variance_a: Option<f64>,
    pub variance_b: Option<f64>,
    pub reduction_pct: Option<f64>,
    /// (target shift - mean control shift) / population stdev of
    /// control shifts.
    pub z_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub shifts: Vec<ProbeShift>,
    pub targets: Vec<TargetOutcome>,
    pub aggregate_reduction_pct: Option<f64>,
    pub permutation_p: Option<f64>,
    pub permuted_unit: PermutedUnit,
    pub permutation_exhaustive: bool,
    pub mean_control_shift: f64,
    pub control_shift_stdev: f64,
}

const SHIFT_TOLERANCE: f64 = 1e-9;

fn verdict(delta_a: f64, delta_b: f64) -> String {
    let shift = delta_b - delta_a;
    if shift.abs() <= SHIFT_TOLERANCE {
        "unchanged".into()
    } else if delta_a > 0.0 && delta_b <= 0.0 {
        "Fixed".into()
    } else if delta_a > 0.0 && shift < 0.0 {
        "Reduced".into()
    } else if shift < 0.0 {
        "Improved".into()
    } else {
        "Regressed".into()
    }
}

struct VariantView {
    index: ResultIndex,
    models: BTreeSet<String>,
    languages: BTreeSet<String>,
    probes: BTreeSet<String>,
}

impl VariantView {
    fn build(results: &[TrialResult]) -> Self {
        let index = ResultIndex::build(results);
        let models = index.groups.iter().map(|g| g.model.clone()).collect();
        let languages = index.groups.iter().map(|g| g.language.clone()).collect();
        let probes = index.probes.clone();
        VariantView {
            index,
            models,
            languages,
            probes,
        }
    }

    /// Mean probe delta across (model, language) cells: ablated minus
    /// baseline when ablation configs exist, otherwise the baseline
    /// adherence itself (baseline-only result sets). None when the
    /// probe has no valid trials anywhere.
    fn probe_delta(&self, probe: &str) -> Option<f64> {
        let mut cell_values = Vec::new();
        for group in &self.index.groups {
            let baseline = match self.index.baseline(group, probe) {
                Some(b) => mean(b),
                None => continue,
            };
            let ablated = self.index.pooled(group, probe, |absent| !absent.is_empty());
            if ablated.is_empty() {
                cell_values.push(baseline);
            } else {
                cell_values.push(mean(&ablated) - baseline);
            }
        }
        (!cell_values.is_empty()).then(|| mean(&cell_values))
    }

    /// Baseline mean of a probe in one (model, language) cell.
    fn cell_baseline(&self, model: &str, language: &str, probe: &str) -> Option<f64> {
        let mut trials = Vec::new();
        for group in &self.index.groups {
            if group.model == model && group.language == language {
                if let Some(scores) = self.index.baseline(group, probe) {
                    trials.extend_from_slice(scores);
                }
            }
        }
        (!trials.is_empty()).then(|| mean(&trials))
    }

    /// Cross-linguistic variance of a probe's baseline adherence,
    /// averaged over models. None with fewer than two languages.
    fn cross_language_variance(&self, probe: &str) -> Option<f64> {
        if self.languages.len() < 2 {
            return None;
        }
        let mut per_model = Vec::new();
        for model in &self.models {
            let means: Vec<f64> = self
                .languages
                .iter()
                .filter_map(|lang| self.cell_baseline(model, lang, probe))
                .collect();
            if means.len() < 2 {
                return None;
            }
            per_model.push(variance(&means).ok()?);
        }
        (!per_model.is_empty()).then(|| mean(&per_model))
    }
}

/// Compare two result sets over the same probes, models, and languages
/// (original vs rewritten variant): per-probe delta shifts, target
/// variance reduction with a permutation p-value, and the control
/// z-score for each target probe.
pub fn variant_comparison(
    results_a: &[TrialResult],
    results_b: &[TrialResult],
    probes: &[Probe],
    target_blocks: &[String],
    permuted_unit: PermutedUnit,
    n_perm: usize,
    seed: u64,
) -> Result<VariantComparison, AnalysisError> {
    let view_a = VariantView::build(results_a);
    let view_b = VariantView::build(results_b);
    if view_a.probes != view_b.probes {
        return Err(AnalysisError::ProbeSetMismatch(format!(
            "probe sets differ: {:?} vs {:?}",
            view_a.probes, view_b.probes
        )));
    }
    if view_a.models != view_b.models {
        return Err(AnalysisError::ProbeSetMismatch("model sets differ".into()));
    }
    if view_a.languages != view_b.languages {
        return Err(AnalysisError::ProbeSetMismatch(
            "language sets differ".into(),
        ));
    }

    let target_probes: BTreeSet<String> = probes
        .iter()
        .filter(|p| target_blocks.contains(&p.target_block))
        .map(|p| p.id.clone())
        .collect();

    let mut shifts = Vec::new();
    for probe in &view_a.probes {
        let (Some(delta_a), Some(delta_b)) =
            (view_a.probe_delta(probe), view_b.probe_delta(probe))
        else {
            return Err(AnalysisError::ProbeSetMismatch(format!(
                "probe `{probe}` has no valid trials in one of the result sets"
            )));
        };
        shifts.push(ProbeShift {
            probe_id: probe.clone(),
            is_target: target_probes.contains(probe),
            delta_a,
            delta_b,
            shift: delta_b - delta_a,
            verdict: verdict(delta_a, delta_b),
        });
    }

    let control_shifts: Vec<f64> = shifts
        .iter()
        .filter(|s| !s.is_target)
        .map(|s| s.shift)
        .collect();
    let mean_control = if control_shifts.is_empty() {
        0.0
    } else {
        mean(&control_shifts)
    };
    let stdev_control = if control_shifts.len() >= 2 {
        variance(&control_shifts)?.sqrt()
    } else {
        0.0
    };
    let z_of = |shift: f64| -> f64 {
        if stdev_control == 0.0 {
            if (shift - mean_control).abs() <= SHIFT_TOLERANCE {
                0.0
            } else if shift > mean_control {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }
        } else {
            (shift - mean_control) / stdev_control
        }
    };

    let mut targets = Vec::new();
    for probe in probes {
        if !target_probes.contains(&probe.id) {
            continue;
        }
        let v_a = view_a.cross_language_variance(&probe.id);
        let v_b = view_b.cross_language_variance(&probe.id);
        let reduction = match (v_a, v_b) {
            (Some(a), Some(b)) if a > 0.0 => Some(variance_reduction_pct(a, b)),
            (Some(a), Some(b)) if a == 0.0 && b == 0.0 => Some(0.0),
            _ => None,
        };
        let shift = shifts
            .iter()
            .find(|s| s.probe_id == probe.id)
            .map(|s| s.shift)
            .unwrap_or(0.0);
        targets.push(TargetOutcome {
            probe_id: probe.id.clone(),
            block_id: probe.target_block.clone(),
            variance_a: v_a,
            variance_b: v_b,
            reduction_pct: reduction,
            z_score: z_of(shift),
        });
    }

    let aggregate = aggregate_reduction(&view_a, &view_b, &targets);
    let (permutation_p, permutation_exhaustive) = match aggregate {
        Some(observed) => permute_reduction(
            &view_a,
            &view_b,
            &targets,
            &view_a.probes,
            observed,
            permuted_unit,
            n_perm,
            seed,
        ),
        None => (None, false),
    };

    Ok(VariantComparison {
        shifts,
        targets,
        aggregate_reduction_pct: aggregate,
        permutation_p,
        permuted_unit,
        permutation_exhaustive,
        mean_control_shift: mean_control,
        control_shift_stdev: stdev_control,
    })
}

fn aggregate_reduction(
    view_a: &VariantView,
    view_b: &VariantView,
    targets: &[TargetOutcome],
) -> Option<f64> {
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for t in targets {
        va.push(view_a.cross_language_variance(&t.probe_id)?);
        vb.push(view_b.cross_language_variance(&t.probe_id)?);
    }
    if va.is_empty() {
        return None;
    }
    let ma = mean(&va);
    let mb = mean(&vb);
    if ma == 0.0 {
        return (mb == 0.0).then_some(0.0);
    }
    Some(variance_reduction_pct(ma, mb))
}

/// Permutation p-value for the aggregate variance reduction.
#[allow(clippy::too_many_arguments)]
fn permute_reduction(
    view_a: &VariantView,
    view_b: &VariantView,
    targets: &[TargetOutcome],
    all_probes: &BTreeSet<String>,
    observed: f64,
    unit: PermutedUnit,
    n_perm: usize,
    seed: u64,
) -> (Option<f64>, bool) {
    match unit {
        PermutedUnit::TargetProbe => {
            // Exact: how many probes, named target instead, would show
            // at least as large a reduction?
            let mut at_least = 0usize;
            let mut defined = 0usize;
            for probe in all_probes {
                let (Some(a), Some(b)) = (
                    view_a.cross_language_variance(probe),
                    view_b.cross_language_variance(probe),
                ) else {
                    continue;
                };
                if a == 0.0 {
                    continue;
                }
                defined += 1;
                if variance_reduction_pct(a, b) >= observed - 1e-12 {
                    at_least += 1;
                }
            }
            if defined == 0 {
                (None, false)
            } else {
                (Some(at_least as f64 / defined as f64), true)
            }
        }
        PermutedUnit::VariantWithinCell => {
            // Cells are (model, language); one flip swaps a/b for every
            // target probe in that cell.
            let mut cells: Vec<(String, String)> = Vec::new();
            for model in &view_a.models {
                for language in &view_a.languages {
                    cells.push((model.clone(), language.clone()));
                }
            }
            let target_probe_ids: Vec<&str> =
                targets.iter().map(|t| t.probe_id.as_str()).collect();
            if cells.is_empty() || target_probe_ids.is_empty() {
                return (None, false);
            }

            let mut value_a = BTreeMap::new();
            let mut value_b = BTreeMap::new();
            for (ci, (model, language)) in cells.iter().enumerate() {
                for probe in &target_probe_ids {
                    let (Some(a), Some(b)) = (
                        view_a.cell_baseline(model, language, probe),
                        view_b.cell_baseline(model, language, probe),
                    ) else {
                        return (None, false);
                    };
                    value_a.insert((ci, *probe), a);
                    value_b.insert((ci, *probe), b);
                }
            }

            let n_models = view_a.models.len();
            let n_langs = view_a.languages.len();
            let stat = |flips: &[bool]| -> f64 {
                let mut va_sum = 0.0;
                let mut vb_sum = 0.0;
                for probe in &target_probe_ids {
                    let mut per_model_a = Vec::with_capacity(n_models);
                    let mut per_model_b = Vec::with_capacity(n_models);
                    for mi in 0..n_models {
                        let mut means_a = Vec::with_capacity(n_langs);
                        let mut means_b = Vec::with_capacity(n_langs);
                        for li in 0..n_langs {
                            let ci = mi * n_langs + li;
                            let a = value_a[&(ci, *probe)];
                            let b = value_b[&(ci, *probe)];
                            if flips[ci] {
                                means_a.push(b);
                                means_b.push(a);
                            } else {
                                means_a.push(a);
                                means_b.push(b);
                            }
                        }
                        per_model_a.push(variance(&means_a).unwrap_or(0.0));
                        per_model_b.push(variance(&means_b).unwrap_or(0.0));
                    }
                    va_sum += mean(&per_model_a);
                    vb_sum += mean(&per_model_b);
                }
                let ma = va_sum / target_probe_ids.len() as f64;
                let mb = vb_sum / target_probe_ids.len() as f64;
                if ma == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    variance_reduction_pct(ma, mb)
                }
            };

            let n_cells = cells.len();
            let tol = 1e-9 * observed.abs().max(1.0);
            if n_cells <= 13 {
                // 2^cells <= 8192: exhaustive and exact.
                let total = 1usize << n_cells;
                let mut extreme = 0usize;
                let mut flips = vec![false; n_cells];
                for mask in 0..total {
                    for (i, f) in flips.iter_mut().enumerate() {
                        *f = mask & (1 << i) != 0;
                    }
                    if stat(&flips) >= observed - tol {
                        extreme += 1;
                    }
                }
                (Some(extreme as f64 / total as f64), true)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut extreme = 0usize;
                let mut flips = vec![false; n_cells];
                for _ in 0..n_perm {
                    for f in flips.iter_mut() {
                        *f = rng.gen::<bool>();
                    }
                    if stat(&flips) >= observed - tol {
                        extreme += 1;
                    }
                }
                (Some((1.0 + extreme as f64) / (1.0 + n_perm as f64)), false)
            }
        }
    }
}
