//! Plan execution against chat-completion endpoints.
//!
//! Every (corpus, configuration, probe, model, trial) cell becomes one
//! [`TrialResult`]. Responses are content-addressed in a [`CacheStore`]
//! keyed on the assembled prompt bytes (renaming configurations never
//! invalidates results) and a completed run replays from cache with
//! zero network calls, byte-identical scores and costs.
//!
//! Money is fixed-point micro-dollars throughout so ledger conservation
//! (sum of per-result costs equals the ledger total) is exact decimal
//! equality, never float drift.

mod cache;
mod http;
mod mock;

pub use cache::{CacheStore, CachedCall, CachedCell, CachedJudge};
pub use http::{HttpEndpoint, RetryPolicy};
pub use mock::{MockEffects, MockEndpoint, SynergySpec, MOCK_TIMESTAMP};

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::io::Write;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble_prompt, Corpus};
use crate::design::Plan;
use crate::probes::{
    build_judge_request, parse_judge_verdict, score_length, score_not_contains, validate_battery,
    JudgePolicy, Probe, ScorerSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("request to `{model}` timed out after {attempts} attempts")]
    Timeout { model: String, attempts: u32 },
    #[error("`{model}` rate-limited after {attempts} attempts")]
    RateLimited { model: String, attempts: u32 },
    #[error("provider error {status} from `{model}`: {detail}")]
    ProviderError {
        model: String,
        status: u16,
        detail: String,
    },
    #[error("budget exhausted; no request sent")]
    BudgetExceeded,
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("transport error talking to `{model}`: {detail}")]
    Transport { model: String, detail: String },
    #[error("plan does not match corpus {language}/{variant}: {detail}")]
    PlanCorpusMismatch {
        language: String,
        variant: String,
        detail: String,
    },
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
    #[error("trials must be >= 1")]
    InvalidTrials,
    #[error("temperature {0} outside [0, 2]")]
    InvalidTemperature(f64),
    #[error("resume mismatch at line {line}: existing file does not match this run")]
    ResumeMismatch { line: usize },
    #[error("cache I/O: {0}")]
    CacheIo(String),
    #[error("serialization: {0}")]
    Serialization(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("mock endpoint: {0}")]
    Mock(String),
}

impl RunnerError {
    /// True for per-cell failures that degrade one trial to invalid
    /// instead of aborting the run.
    fn is_cell_level(&self) -> bool {
        matches!(
            self,
            RunnerError::Timeout { .. }
                | RunnerError::RateLimited { .. }
                | RunnerError::ProviderError { .. }
                | RunnerError::Transport { .. }
        )
    }
}

// ---------------------------------------------------------------------------
// Money
// ---------------------------------------------------------------------------

/// Fixed-point USD in micro-dollars. Serializes as a JSON decimal in
/// dollars; round-trips exactly for any value this harness can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct UsdMicros(pub i64);

impl UsdMicros {
    pub const ZERO: UsdMicros = UsdMicros(0);

    pub fn from_dollars(d: f64) -> Self {
        UsdMicros((d * 1e6).round() as i64)
    }

    pub fn as_dollars(&self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn is_zero(&self) -> bool {
        self.0 == 0
    }
}

impl Add for UsdMicros {
    type Output = UsdMicros;
    fn add(self, rhs: UsdMicros) -> UsdMicros {
        UsdMicros(self.0 + rhs.0)
    }
}

impl AddAssign for UsdMicros {
    fn add_assign(&mut self, rhs: UsdMicros) {
        self.0 += rhs.0;
    }
}

impl Sum for UsdMicros {
    fn sum<I: Iterator<Item = UsdMicros>>(iter: I) -> Self {
        UsdMicros(iter.map(|u| u.0).sum())
    }
}

impl fmt::Display for UsdMicros {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${:.6}", self.as_dollars())
    }
}

impl Serialize for UsdMicros {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_dollars())
    }
}

impl<'de> Deserialize<'de> for UsdMicros {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let dollars = f64::deserialize(d)?;
        Ok(UsdMicros::from_dollars(dollars))
    }
}

// ---------------------------------------------------------------------------
// Models, requests, responses
// ---------------------------------------------------------------------------

/// A provider-qualified model and its run roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    #[serde(default)]
    pub display_name: String,
    /// Receives subject calls (one per cell).
    #[serde(default = "default_true")]
    pub subject: bool,
    /// Eligible as an LLM judge.
    #[serde(default = "default_true")]
    pub judge: bool,
    /// Fallback pricing when the provider does not report cost, in USD
    /// per million tokens.
    #[serde(default)]
    pub prompt_usd_per_mtok: Option<f64>,
    #[serde(default)]
    pub completion_usd_per_mtok: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn new(id: impl Into<String>) -> Self {
        let id = id.into();
        ModelSpec {
            display_name: id.clone(),
            id,
            subject: true,
            judge: true,
            prompt_usd_per_mtok: None,
            completion_usd_per_mtok: None,
        }
    }

    fn price(&self, prompt_tokens: u64, completion_tokens: u64) -> UsdMicros {
        let p = self.prompt_usd_per_mtok.unwrap_or(0.0) * prompt_tokens as f64 / 1e6;
        let c = self.completion_usd_per_mtok.unwrap_or(0.0) * completion_tokens as f64 / 1e6;
        UsdMicros::from_dollars(p + c)
    }
}

/// Wire-shaped chat request: one system message, one user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChatUsage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    /// Provider-reported cost, when the API returns one.
    pub reported_cost: Option<UsdMicros>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: ChatUsage,
    /// Retries performed before success.
    pub retries: u32,
    /// RFC 3339; deterministic endpoints return a fixed epoch so replay
    /// is byte-stable.
    pub timestamp: String,
}

/// Transport abstraction: HTTPS in production, scripted mocks offline.
pub trait ChatEndpoint: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, RunnerError>;
}

/// Thread-safe remaining-budget tracker in micro-dollars.
///
/// The guard is pre-flight: a call may start only while the remaining
/// budget is positive, so the run can overshoot by at most the cost of
/// the calls already in flight, and never starts a call at zero.
pub struct BudgetTracker {
    remaining: Mutex<i64>,
}

impl BudgetTracker {
    pub fn new(budget: UsdMicros) -> Self {
        BudgetTracker {
            remaining: Mutex::new(budget.0),
        }
    }

    pub fn remaining(&self) -> UsdMicros {
        UsdMicros(*self.remaining.lock().unwrap())
    }

    fn check(&self) -> Result<(), RunnerError> {
        if *self.remaining.lock().unwrap() <= 0 {
            Err(RunnerError::BudgetExceeded)
        } else {
            Ok(())
        }
    }

    fn deduct(&self, cost: UsdMicros) {
        *self.remaining.lock().unwrap() -= cost.0;
    }
}

/// One budget-guarded chat call: checks the budget before any network
/// traffic, resolves cost (provider-reported when present, else the
/// model's price table), and deducts it.
pub fn chat_complete(
    endpoint: &dyn ChatEndpoint,
    model: &ModelSpec,
    system: &str,
    user: &str,
    temperature: f64,
    budget: &BudgetTracker,
) -> Result<(ChatResponse, UsdMicros), RunnerError> {
    if !(0.0..=2.0).contains(&temperature) {
        return Err(RunnerError::InvalidTemperature(temperature));
    }
    budget.check()?;
    let response = endpoint.chat(&ChatRequest {
        model: model.id.clone(),
        system: system.to_string(),
        user: user.to_string(),
        temperature,
    })?;
    let cost = response.usage.reported_cost.unwrap_or_else(|| {
        model.price(
            response.usage.prompt_tokens.unwrap_or(0),
            response.usage.completion_tokens.unwrap_or(0),
        )
    });
    budget.deduct(cost);
    Ok((response, cost))
}

// ---------------------------------------------------------------------------
// Trial results
// ---------------------------------------------------------------------------

/// Score or invalid marker; exactly one is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Scored { score: f64 },
    Invalid { invalid: String },
}

impl Outcome {
    pub fn score(&self) -> Option<f64> {
        match self {
            Outcome::Scored { score } => Some(*score),
            Outcome::Invalid { .. } => None,
        }
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, Outcome::Invalid { .. })
    }
}

/// One scored model response for (corpus, configuration, probe, model,
/// trial). Serialized as one JSONL line; field order is frozen by
/// struct order so replays are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub probe_id: String,
    pub config_id: String,
    pub language: String,
    pub variant: String,
    pub model_id: String,
    /// 0-based trial index, always < trials_per_probe.
    pub trial: u32,
    /// Ids absent from the assembled prompt (sorted), so every analysis
    /// is recomputable from the results file alone.
    pub absent: Vec<String>,
    pub raw_response: String,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub prompt_chars: u64,
    pub completion_chars: u64,
    /// Full cost of the cell, judge calls included.
    pub cost_usd: UsdMicros,
    pub retries: u32,
    pub temperature: f64,
    pub timestamp: String,
    /// True when the response came from the content-addressed store.
    /// Not serialized: replayed files must be byte-identical to the
    /// original run, and this is the one field that legitimately
    /// differs between a cold and a warm run.
    #[serde(skip)]
    pub cached: bool,
}

impl TrialResult {
    /// Identity of the cell within a run.
    pub fn cell_id(&self) -> (String, String, String, String, String, u32) {
        (
            self.language.clone(),
            self.variant.clone(),
            self.config_id.clone(),
            self.probe_id.clone(),
            self.model_id.clone(),
            self.trial,
        )
    }
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LedgerRow {
    /// Calls attributed to results, cache-served ones included.
    pub calls: u64,
    /// Wire calls actually performed by this process.
    pub network_calls: u64,
    pub cost_usd: UsdMicros,
}

/// Per-model call counts and summed cost. Totals always equal the sum
/// of the per-model rows; they are recomputed, never stored
/// independently.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunLedger {
    pub models: BTreeMap<String, LedgerRow>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, model_id: &str, cost: UsdMicros, fresh: bool) {
        let row = self.models.entry(model_id.to_string()).or_default();
        row.calls += 1;
        if fresh {
            row.network_calls += 1;
        }
        row.cost_usd += cost;
    }

    pub fn add_row(&mut self, model_id: &str, calls: u64, cost: UsdMicros) {
        let row = self.models.entry(model_id.to_string()).or_default();
        row.calls += calls;
        row.network_calls += calls;
        row.cost_usd += cost;
    }

    pub fn total_calls(&self) -> u64 {
        self.models.values().map(|r| r.calls).sum()
    }

    pub fn total_network_calls(&self) -> u64 {
        self.models.values().map(|r| r.network_calls).sum()
    }

    pub fn total_cost(&self) -> UsdMicros {
        self.models.values().map(|r| r.cost_usd).sum()
    }
}

impl Serialize for RunLedger {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("RunLedger", 4)?;
        st.serialize_field("models", &self.models)?;
        st.serialize_field("total_calls", &self.total_calls())?;
        st.serialize_field("total_network_calls", &self.total_network_calls())?;
        st.serialize_field("total_cost_usd", &self.total_cost())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for RunLedger {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            models: BTreeMap<String, LedgerRow>,
            total_calls: u64,
            total_cost_usd: UsdMicros,
        }
        let raw = Raw::deserialize(d)?;
        let ledger = RunLedger { models: raw.models };
        if ledger.total_calls() != raw.total_calls {
            return Err(serde::de::Error::custom(
                "ledger total_calls does not equal the sum of per-model rows",
            ));
        }
        if ledger.total_cost() != raw.total_cost_usd {
            return Err(serde::de::Error::custom(
                "ledger total_cost_usd does not equal the sum of per-model rows",
            ));
        }
        Ok(ledger)
    }
}

// ---------------------------------------------------------------------------
// Cache keying
// ---------------------------------------------------------------------------

/// Collision-resistant digest identifying a cell's response: model id,
/// assembled prompt bytes, probe user message, scorer spec, and trial
/// index. Configuration *names* are deliberately excluded.
pub fn cache_key(
    model_id: &str,
    assembled_prompt: &str,
    probe_user_message: &str,
    scorer: &ScorerSpec,
    trial: u32,
) -> String {
    use sha2::{Digest, Sha256};
    let scorer_json = serde_json::to_string(scorer).expect("scorer serializes");
    let mut hasher = Sha256::new();
    for field in [
        model_id.as_bytes(),
        assembled_prompt.as_bytes(),
        probe_user_message.as_bytes(),
        scorer_json.as_bytes(),
        &trial.to_le_bytes(),
    ] {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Plan execution
// ---------------------------------------------------------------------------

pub struct RunSpec<'a> {
    pub plan: &'a Plan,
    pub corpora: &'a [Corpus],
    pub probes: &'a [Probe],
    pub models: &'a [ModelSpec],
    pub trials: u32,
    pub temperature: f64,
    pub budget: UsdMicros,
    /// Maximum in-flight requests per model.
    pub per_model_concurrency: usize,
    /// Worker threads across all models.
    pub workers: usize,
    /// Cells below this index are not re-emitted; their existing lines
    /// (if provided) are checked against the recomputation instead.
    pub resume_from: usize,
    pub existing_lines: Option<&'a [String]>,
}

impl<'a> RunSpec<'a> {
    pub fn new(
        plan: &'a Plan,
        corpora: &'a [Corpus],
        probes: &'a [Probe],
        models: &'a [ModelSpec],
        trials: u32,
    ) -> Self {
        RunSpec {
            plan,
            corpora,
            probes,
            models,
            trials,
            temperature: 0.0,
            budget: UsdMicros::from_dollars(1.0),
            per_model_concurrency: 4,
            workers: 4,
            resume_from: 0,
            existing_lines: None,
        }
    }

    pub fn cell_count(&self) -> usize {
        self.plan.len()
            * self.corpora.len()
            * self.probes.len()
            * self.subject_models().len()
            * self.trials as usize
    }

    fn subject_models(&self) -> Vec<&'a ModelSpec> {
        self.models.iter().filter(|m| m.subject).collect()
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    /// All results, in canonical cell order.
    pub results: Vec<TrialResult>,
    pub ledger: RunLedger,
    pub invalid_trials: u64,
    pub cache_hits: u64,
    pub lines_emitted: usize,
}

struct Cell<'a> {
    corpus: &'a Corpus,
    config_index: usize,
    probe: &'a Probe,
    model: &'a ModelSpec,
    trial: u32,
    prompt: &'a str,
}

/// Execute every cell of the plan, streaming JSONL lines to `sink` in
/// canonical cell order (corpus, then configuration, probe, model,
/// trial). Identical cells are served from the cache. Per-cell endpoint
/// failures degrade that trial to invalid; only budget exhaustion
/// aborts the run, after flushing everything already completed in
/// order.
pub fn execute_plan(
    spec: &RunSpec,
    endpoint: &dyn ChatEndpoint,
    cache: &CacheStore,
    sink: &mut dyn Write,
) -> Result<RunOutcome, RunnerError> {
    if spec.trials == 0 {
        return Err(RunnerError::InvalidTrials);
    }
    if !(0.0..=2.0).contains(&spec.temperature) {
        return Err(RunnerError::InvalidTemperature(spec.temperature));
    }
    let subject_models = spec.subject_models();
    for corpus in spec.corpora {
        let ablatable = corpus.ablatable_ids();
        if !spec.plan.matches_ids(&ablatable) {
            return Err(RunnerError::PlanCorpusMismatch {
                language: corpus.language.clone(),
                variant: corpus.variant.as_label().to_string(),
                detail: "plan block ids differ from corpus ablatable ids".into(),
            });
        }
        validate_battery(spec.probes, corpus)?;
    }

    // Assemble each (corpus, configuration) prompt once.
    let mut prompts: Vec<Vec<String>> = Vec::with_capacity(spec.corpora.len());
    for corpus in spec.corpora {
        let mut per_config = Vec::with_capacity(spec.plan.len());
        for config in &spec.plan.configurations {
            per_config.push(assemble_prompt(corpus, config)?);
        }
        prompts.push(per_config);
    }

    // Canonical cell order.
    let mut cells = Vec::with_capacity(spec.cell_count());
    for (ci, corpus) in spec.corpora.iter().enumerate() {
        for (gi, _config) in spec.plan.configurations.iter().enumerate() {
            for probe in spec.probes {
                for model in &subject_models {
                    for trial in 0..spec.trials {
                        cells.push(Cell {
                            corpus,
                            config_index: gi,
                            probe,
                            model,
                            trial,
                            prompt: &prompts[ci][gi],
                        });
                    }
                }
            }
        }
    }

    let budget = BudgetTracker::new(spec.budget);
    let permits = PermitTable::new(spec.per_model_concurrency.max(1));
    let aborted = AtomicBool::new(false);
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..cells.len()).collect());
    let slots: Vec<Mutex<Option<CellOutcome>>> =
        (0..cells.len()).map(|_| Mutex::new(None)).collect();

    let worker_count = spec.workers.max(1).min(cells.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                if aborted.load(Ordering::SeqCst) {
                    break;
                }
                let next = queue.lock().unwrap().pop_front();
                let Some(idx) = next else { break };
                let cell = &cells[idx];
                let _permit = permits.acquire(&cell.model.id);
                let outcome = run_cell(cell, spec, endpoint, cache, &budget);
                match outcome {
                    Ok(done) => {
                        *slots[idx].lock().unwrap() = Some(done);
                    }
                    Err(RunnerError::BudgetExceeded) => {
                        aborted.store(true, Ordering::SeqCst);
                        break;
                    }
                    Err(other) => {
                        // Defensive: treat unexpected errors as abort.
                        *slots[idx].lock().unwrap() = Some(CellOutcome::failed(cell, spec, other));
                    }
                }
            });
        }
    });

    // Flush the contiguous completed prefix in canonical order.
    let mut results = Vec::new();
    let mut ledger = RunLedger::new();
    let mut invalid_trials = 0;
    let mut cache_hits = 0;
    let mut lines_emitted = 0;
    let mut seen_cells: HashSet<(String, String, String, String, String, u32)> = HashSet::new();
    for (idx, slot) in slots.iter().enumerate() {
        let Some(done) = slot.lock().unwrap().take() else {
            break;
        };
        let line = serde_json::to_string(&done.result)
            .map_err(|e| RunnerError::Serialization(e.to_string()))?;
        if idx < spec.resume_from {
            if let Some(existing) = spec.existing_lines {
                if existing.get(idx).map(String::as_str) != Some(line.as_str()) {
                    return Err(RunnerError::ResumeMismatch { line: idx + 1 });
                }
            }
        } else {
            sink.write_all(line.as_bytes())
                .and_then(|_| sink.write_all(b"\n"))
                .map_err(|e| RunnerError::Io(e.to_string()))?;
            lines_emitted += 1;
        }
        if !seen_cells.insert(done.result.cell_id()) {
            return Err(RunnerError::Serialization(format!(
                "duplicate cell emission: {:?}",
                done.result.cell_id()
            )));
        }
        if done.result.outcome.is_invalid() {
            invalid_trials += 1;
        }
        if done.result.cached {
            cache_hits += 1;
        }
        for (model_id, cost, fresh) in &done.ledger_events {
            ledger.record(model_id, *cost, *fresh);
        }
        results.push(done.result);
    }
    sink.flush().map_err(|e| RunnerError::Io(e.to_string()))?;

    if aborted.load(Ordering::SeqCst) {
        return Err(RunnerError::BudgetExceeded);
    }
    if results.len() != cells.len() {
        return Err(RunnerError::Serialization(format!(
            "run incomplete: {} of {} cells",
            results.len(),
            cells.len()
        )));
    }
    Ok(RunOutcome {
        results,
        ledger,
        invalid_trials,
        cache_hits,
        lines_emitted,
    })
}

struct CellOutcome {
    result: TrialResult,
    /// (model id, cost, was a fresh network call)
    ledger_events: Vec<(String, UsdMicros, bool)>,
}

impl CellOutcome {
    fn failed(cell: &Cell, spec: &RunSpec, err: RunnerError) -> CellOutcome {
        CellOutcome {
            result: base_result(
                cell,
                spec,
                String::new(),
                Outcome::Invalid {
                    invalid: err.to_string(),
                },
                0,
                UsdMicros::ZERO,
                0,
                String::new(),
                false,
            ),
            ledger_events: vec![],
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn base_result(
    cell: &Cell,
    spec: &RunSpec,
    raw_response: String,
    outcome: Outcome,
    completion_chars: u64,
    cost: UsdMicros,
    retries: u32,
    timestamp: String,
    cached: bool,
) -> TrialResult {
    let config = &spec.plan.configurations[cell.config_index];
    let prompt_chars =
        (cell.prompt.chars().count() + cell.probe.user_message.chars().count()) as u64;
    TrialResult {
        probe_id: cell.probe.id.clone(),
        config_id: config.id.clone(),
        language: cell.corpus.language.clone(),
        variant: cell.corpus.variant.as_label().to_string(),
        model_id: cell.model.id.clone(),
        trial: cell.trial,
        absent: config.absent.iter().cloned().collect(),
        raw_response,
        outcome,
        prompt_chars,
        completion_chars,
        cost_usd: cost,
        retries,
        temperature: spec.temperature,
        timestamp,
        cached,
    }
}

fn judge_model<'a>(cell: &Cell<'a>, spec: &'a RunSpec, policy: &JudgePolicy) -> ModelSpec {
    match policy {
        JudgePolicy::SameModel => cell.model.clone(),
        JudgePolicy::FixedModel(fixed_model) => spec
            .models
            .iter()
            .find(|m| &m.id == fixed_model)
            .cloned()
            .unwrap_or_else(|| ModelSpec::new(fixed_model.clone())),
    }
}

/// Derive the outcome from the subject response and any judge attempts.
/// Pure: replaying the same parts always yields the same outcome.
fn derive_outcome(scorer: &ScorerSpec, response: &str, judge_texts: &[String]) -> Outcome {
    match scorer {
        ScorerSpec::NotContains { patterns } => Outcome::Scored {
            score: score_not_contains(response, patterns),
        },
        ScorerSpec::Length { baseline_chars } => Outcome::Scored {
            score: score_length(response, *baseline_chars),
        },
        ScorerSpec::LlmJudge { .. } => {
            for text in judge_texts {
                if let Ok(score) = parse_judge_verdict(text) {
                    return Outcome::Scored { score };
                }
            }
            Outcome::Invalid {
                invalid: "judge verdict unparseable after retry".into(),
            }
        }
    }
}

fn run_cell(
    cell: &Cell,
    spec: &RunSpec,
    endpoint: &dyn ChatEndpoint,
    cache: &CacheStore,
    budget: &BudgetTracker,
) -> Result<CellOutcome, RunnerError> {
    let key = cache_key(
        &cell.model.id,
        cell.prompt,
        &cell.probe.user_message,
        &cell.probe.scorer,
        cell.trial,
    );

    if let Some(cached) = cache.get(&key) {
        return Ok(replay_cached(cell, spec, &cached));
    }

    let mut ledger_events = Vec::new();

    // Subject call.
    let (response, subject_cost) = match chat_complete(
        endpoint,
        cell.model,
        cell.prompt,
        &cell.probe.user_message,
        spec.temperature,
        budget,
    ) {
        Ok(ok) => ok,
        Err(e) if e.is_cell_level() => {
            return Ok(CellOutcome::failed(cell, spec, e));
        }
        Err(e) => return Err(e),
    };
    ledger_events.push((cell.model.id.clone(), subject_cost, true));

    let mut total_cost = subject_cost;
    let mut total_retries = response.retries;
    let mut judge_record: Option<CachedJudge> = None;
    let mut judge_texts: Vec<String> = Vec::new();
    let mut judge_transport_failure: Option<String> = None;

    if let ScorerSpec::LlmJudge {
        criteria,
        judge_policy,
    } = &cell.probe.scorer
    {
        let judge = judge_model(cell, spec, judge_policy);
        let request = build_judge_request(&response.text, criteria);
        let mut attempts = Vec::new();
        for _attempt in 0..2 {
            match chat_complete(
                endpoint,
                &judge,
                &request.system,
                &request.user,
                0.0,
                budget,
            ) {
                Ok((judge_response, judge_cost)) => {
                    ledger_events.push((judge.id.clone(), judge_cost, true));
                    total_cost += judge_cost;
                    total_retries += judge_response.retries;
                    let parseable = parse_judge_verdict(&judge_response.text).is_ok();
                    judge_texts.push(judge_response.text.clone());
                    attempts.push(CachedCall {
                        text: judge_response.text,
                        cost_usd: judge_cost,
                        retries: judge_response.retries,
                    });
                    if parseable {
                        break;
                    }
                }
                Err(e) if e.is_cell_level() => {
                    judge_transport_failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        judge_record = Some(CachedJudge {
            model_id: judge.id.clone(),
            attempts,
        });
    }

    let outcome = match judge_transport_failure {
        Some(reason) => Outcome::Invalid {
            invalid: format!("judge call failed: {reason}"),
        },
        None => derive_outcome(&cell.probe.scorer, &response.text, &judge_texts),
    };
    let completion_chars = response.text.chars().count() as u64;

    // Only fully valid cells enter the cache: a failed cell must be
    // retried by the next run, not replayed.
    if !outcome.is_invalid() {
        cache
            .put(
                &key,
                &CachedCell {
                    response: response.text.clone(),
                    completion_chars,
                    subject_cost,
                    subject_retries: response.retries,
                    timestamp: response.timestamp.clone(),
                    judge: judge_record,
                },
            )
            .map_err(|e| RunnerError::CacheIo(e.to_string()))?;
    }

    Ok(CellOutcome {
        result: base_result(
            cell,
            spec,
            response.text,
            outcome,
            completion_chars,
            total_cost,
            total_retries,
            response.timestamp,
            false,
        ),
        ledger_events,
    })
}

fn replay_cached(cell: &Cell, spec: &RunSpec, cached: &CachedCell) -> CellOutcome {
    let mut ledger_events = vec![(cell.model.id.clone(), cached.subject_cost, false)];
    let mut total_cost = cached.subject_cost;
    let mut total_retries = cached.subject_retries;
    let mut judge_texts = Vec::new();
    if let Some(judge) = &cached.judge {
        for attempt in &judge.attempts {
            ledger_events.push((judge.model_id.clone(), attempt.cost_usd, false));
            total_cost += attempt.cost_usd;
            total_retries += attempt.retries;
            judge_texts.push(attempt.text.clone());
        }
    }
    let outcome = derive_outcome(&cell.probe.scorer, &cached.response, &judge_texts);
    CellOutcome {
        result: base_result(
            cell,
            spec,
            cached.response.clone(),
            outcome,
            cached.completion_chars,
            total_cost,
            total_retries,
            cached.timestamp.clone(),
            true,
        ),
        ledger_events,
    }
}

/// Per-model in-flight bound: acquire blocks while `limit` requests to
/// the same model are outstanding.
struct PermitTable {
    counts: Mutex<BTreeMap<String, usize>>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a> {
    table: &'a PermitTable,
    model: String,
}

impl PermitTable {
    fn new(limit: usize) -> Self {
        PermitTable {
            counts: Mutex::new(BTreeMap::new()),
            freed: Condvar::new(),
            limit,
        }
    }

    fn acquire(&self, model: &str) -> Permit<'_> {
        let mut counts = self.counts.lock().unwrap();
        loop {
            let n = counts.entry(model.to_string()).or_insert(0);
            if *n < self.limit {
                *n += 1;
                return Permit {
                    table: self,
                    model: model.to_string(),
                };
            }
            counts = self.freed.wait(counts).unwrap();
        }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut counts = self.table.counts.lock().unwrap();
        if let Some(n) = counts.get_mut(&self.model) {
            *n -= 1;
        }
        self.table.freed.notify_all();
    }
}

/// Test-only constructor for a scored trial row.
#[cfg(test)]
pub(crate) fn test_trial(
    probe: &str,
    config: &str,
    absent: &[&str],
    language: &str,
    model: &str,
    trial_idx: u32,
    score: f64,
) -> TrialResult {
    TrialResult {
        probe_id: probe.into(),
        config_id: config.into(),
        language: language.into(),
        variant: "original".into(),
        model_id: model.into(),
        trial: trial_idx,
        absent: absent.iter().map(|s| s.to_string()).collect(),
        raw_response: "r".into(),
        outcome: Outcome::Scored { score },
        prompt_chars: 1,
        completion_chars: 1,
        cost_usd: UsdMicros::ZERO,
        retries: 0,
        temperature: 0.0,
        timestamp: "1970-01-01T00:00:00Z".into(),
        cached: false,
    }
}

/// Valid (non-invalid) scores grouped for analysis; declared here so
/// tests and the analysis module share one notion of validity.
pub fn valid_scores<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> Vec<f64> {
    results
        .into_iter()
        .filter_map(|r| r.outcome.score())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probes::Pattern;

    #[test]
    fn usd_micros_round_trips_through_json() {
        for micros in [0i64, 1, 999_999, 1_000_000, 68_950_000, 123_456_789] {
            let v = UsdMicros(micros);
            let json = serde_json::to_string(&v).unwrap();
            let back: UsdMicros = serde_json::from_str(&json).unwrap();
            assert_eq!(v, back, "json was {json}");
        }
    }

    #[test]
    fn ledger_totals_are_sums() {
        let mut ledger = RunLedger::new();
        ledger.add_row("anthropic/claude-haiku-4-5", 14_270, UsdMicros::from_dollars(66.10));
        ledger.add_row("mistralai/mistral-medium-3.1", 1_560, UsdMicros::from_dollars(1.21));
        ledger.add_row("deepseek/deepseek-chat-v3-0324", 1_560, UsdMicros::from_dollars(1.12));
        ledger.add_row("google/gemini-2.0-flash-001", 1_728, UsdMicros::from_dollars(0.53));
        assert_eq!(ledger.total_calls(), 19_118);
        let total = ledger.total_cost().as_dollars();
        assert!((total - 68.95).abs() <= 0.02, "total = {total}");
        // Round trip preserves the invariant check.
        let json = serde_json::to_string(&ledger).unwrap();
        let back: RunLedger = serde_json::from_str(&json).unwrap();
        assert_eq!(back.total_calls(), 19_118);
    }

    #[test]
    fn ledger_rejects_inconsistent_totals() {
        let json = r#"{"models":{"m":{"calls":2,"network_calls":2,"cost_usd":1.0}},"total_calls":3,"total_network_calls":2,"total_cost_usd":1.0}"#;
        assert!(serde_json::from_str::<RunLedger>(json).is_err());
    }

    #[test]
    fn cache_key_is_deterministic_and_sensitive() {
        let scorer = ScorerSpec::NotContains {
            patterns: vec![Pattern::Literal("x".into())],
        };
        let a = cache_key("m", "prompt", "user", &scorer, 0);
        let b = cache_key("m", "prompt", "user", &scorer, 0);
        assert_eq!(a, b);
        assert_ne!(a, cache_key("m", "prompt2", "user", &scorer, 0));
        assert_ne!(a, cache_key("m", "prompt", "user", &scorer, 1));
        assert_ne!(a, cache_key("m2", "prompt", "user", &scorer, 0));
        let scorer2 = ScorerSpec::Length { baseline_chars: 5 };
        assert_ne!(a, cache_key("m", "prompt", "user", &scorer2, 0));
    }

    #[test]
    fn trial_result_line_shape() {
        let r = TrialResult {
            probe_id: "p".into(),
            config_id: "baseline".into(),
            language: "en".into(),
            variant: "original".into(),
            model_id: "mock/alpha".into(),
            trial: 0,
            absent: vec![],
            raw_response: "ok".into(),
            outcome: Outcome::Scored { score: 1.0 },
            prompt_chars: 10,
            completion_chars: 2,
            cost_usd: UsdMicros(1_500),
            retries: 0,
            temperature: 0.0,
            timestamp: "1970-01-01T00:00:00Z".into(),
            cached: true,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"score\":1.0"));
        assert!(!line.contains("cached"), "cached must not serialize");
        let back: TrialResult = serde_json::from_str(&line).unwrap();
        assert_eq!(back.outcome.score(), Some(1.0));
        assert!(!back.cached);
        assert_eq!(back.cost_usd, UsdMicros(1_500));

        let invalid = TrialResult {
            outcome: Outcome::Invalid {
                invalid: "judge verdict unparseable after retry".into(),
            },
            ..r
        };
        let line = serde_json::to_string(&invalid).unwrap();
        assert!(line.contains("\"invalid\""));
        assert!(!line.contains("\"score\""));
        let back: TrialResult = serde_json::from_str(&line).unwrap();
        assert!(back.outcome.is_invalid());
    }

    struct EchoEndpoint;

    impl ChatEndpoint for EchoEndpoint {
        fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, RunnerError> {
            Ok(ChatResponse {
                text: request.user.clone(),
                usage: ChatUsage::default(),
                retries: 0,
                timestamp: "1970-01-01T00:00:00Z".into(),
            })
        }
    }

    #[test]
    fn chat_complete_echo_identity() {
        let budget = BudgetTracker::new(UsdMicros::from_dollars(1.0));
        let model = ModelSpec::new("mock/echo");
        let (resp, cost) =
            chat_complete(&EchoEndpoint, &model, "sys", "hello there", 0.0, &budget).unwrap();
        assert_eq!(resp.text, "hello there");
        assert_eq!(cost, UsdMicros::ZERO);
        assert_eq!(budget.remaining(), UsdMicros::from_dollars(1.0));
    }

    struct PanicEndpoint;

    impl ChatEndpoint for PanicEndpoint {
        fn chat(&self, _request: &ChatRequest) -> Result<ChatResponse, RunnerError> {
            panic!("endpoint must not be reached");
        }
    }

    #[test]
    fn zero_budget_blocks_before_any_call() {
        let budget = BudgetTracker::new(UsdMicros::ZERO);
        let model = ModelSpec::new("mock/echo");
        let err = chat_complete(&PanicEndpoint, &model, "s", "u", 0.0, &budget).unwrap_err();
        assert!(matches!(err, RunnerError::BudgetExceeded));
    }

    #[test]
    fn price_table_fallback() {
        let model = ModelSpec {
            prompt_usd_per_mtok: Some(3.0),
            completion_usd_per_mtok: Some(15.0),
            ..ModelSpec::new("m")
        };
        // 1M prompt tokens at $3/M + 200k completion at $15/M = $6.
        assert_eq!(model.price(1_000_000, 200_000), UsdMicros::from_dollars(6.0));
    }
}
