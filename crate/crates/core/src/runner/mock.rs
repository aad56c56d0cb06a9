//! Scripted offline model for deterministic end-to-end runs.
//!
//! The mock computes a target adherence score for each cell (a base
//! score minus a penalty for every absent block it is scripted to care
//! about, plus synergy terms when scripted pairs are co-absent) and
//! then emits a response that the probe's own scorer maps back to that
//! score. Absence is detected from the assembled prompt itself (a
//! block's text no longer appears), so the mock sees exactly what a
//! real model would see and nothing more.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatEndpoint, ChatRequest, ChatResponse, ChatUsage, RunnerError, UsdMicros};
use crate::corpus::Corpus;
use crate::probes::{CharClass, Pattern, Probe, ScorerSpec, RESPONSE_BEGIN, RESPONSE_END};

/// Fixed timestamp for all mock responses; replay byte-identity depends
/// on it.
pub const MOCK_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

/// Marker the mock plants in passing judge-scored responses.
pub const JUDGE_PASS_MARKER: &str = "OK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergySpec {
    pub block_a: String,
    pub block_b: String,
    /// Added to the score when both blocks are absent.
    pub delta: f64,
}

/// Scripted effect structure: what the mock "model" does when blocks
/// disappear from its system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEffects {
    /// Score when everything is present (default 1.0).
    #[serde(default = "default_base")]
    pub base: f64,
    /// Per-probe base override.
    #[serde(default)]
    pub probe_base: BTreeMap<String, f64>,
    /// Subtracted from the score when the named block is absent.
    /// Positive = removal hurts (cooperative); negative = removal helps
    /// (competitive).
    #[serde(default)]
    pub penalties: BTreeMap<String, f64>,
    /// Pairwise terms beyond the additive penalties.
    #[serde(default)]
    pub synergies: Vec<SynergySpec>,
    /// Flat per-call cost, for budget and ledger tests.
    #[serde(default)]
    pub cost_per_call_usd: f64,
    /// When true the judge replies without a verdict line, exercising
    /// the retry-then-invalid path.
    #[serde(default)]
    pub garble_judge: bool,
}

fn default_base() -> f64 {
    1.0
}

impl Default for MockEffects {
    fn default() -> Self {
        MockEffects {
            base: 1.0,
            probe_base: BTreeMap::new(),
            penalties: BTreeMap::new(),
            synergies: Vec::new(),
            cost_per_call_usd: 0.0,
            garble_judge: false,
        }
    }
}

pub struct MockEndpoint {
    corpora: Vec<Corpus>,
    probes: Vec<Probe>,
    effects: MockEffects,
    calls: AtomicU64,
}

impl MockEndpoint {
    pub fn new(corpora: Vec<Corpus>, probes: Vec<Probe>, effects: MockEffects) -> Self {
        MockEndpoint {
            corpora,
            probes,
            effects,
            calls: AtomicU64::new(0),
        }
    }

    /// Endpoint invocations so far: the mock's notion of a network call.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// The corpus whose blocks best explain this system prompt, and the
    /// set of its ablatable blocks missing from the prompt.
    fn absent_blocks(&self, system: &str) -> Vec<String> {
        let best = self
            .corpora
            .iter()
            .max_by_key(|c| {
                c.blocks
                    .iter()
                    .filter(|b| system.contains(b.text.as_str()))
                    .count()
            })
            .expect("mock endpoint has at least one corpus");
        best.blocks
            .iter()
            .filter(|b| b.ablatable && !system.contains(b.text.as_str()))
            .map(|b| b.id.clone())
            .collect()
    }

    fn score_for(&self, probe_id: &str, absent: &[String]) -> f64 {
        let mut score = *self
            .effects
            .probe_base
            .get(probe_id)
            .unwrap_or(&self.effects.base);
        for id in absent {
            if let Some(p) = self.effects.penalties.get(id) {
                score -= p;
            }
        }
        for syn in &self.effects.synergies {
            if absent.contains(&syn.block_a) && absent.contains(&syn.block_b) {
                score += syn.delta;
            }
        }
        score.clamp(0.0, 1.0)
    }

    /// A response the probe's scorer maps to (approximately) `score`.
    /// Length probes are exact up to integer rounding of the response
    /// length; binary scorers threshold at 0.5.
    fn realize(&self, probe: &Probe, score: f64) -> String {
        match &probe.scorer {
            ScorerSpec::Length { baseline_chars } => {
                let len = if score >= 1.0 {
                    *baseline_chars as usize
                } else {
                    (*baseline_chars as f64 / score.max(1e-3)).round() as usize
                };
                "x".repeat(len)
            }
            ScorerSpec::NotContains { patterns } => {
                if score >= 0.5 {
                    "Understood, proceeding without the prohibited patterns.".into()
                } else {
                    let violation = patterns
                        .first()
                        .map(|p| match p {
                            Pattern::Literal(s) => s.clone(),
                            Pattern::Class { class: CharClass::Emoji } => "✅".to_string(),
                            Pattern::Class { class: CharClass::NonAscii } => "\u{00A9}".to_string(),
                        })
                        .unwrap_or_default();
                    format!("Done {}", violation)
                }
            }
            ScorerSpec::LlmJudge { .. } => {
                if score >= 0.5 {
                    format!("{JUDGE_PASS_MARKER} - proceeding exactly as instructed.")
                } else {
                    "Ignoring the guidance and doing it another way.".into()
                }
            }
        }
    }

    fn judge_reply(&self, user: &str) -> String {
        if self.effects.garble_judge {
            return "I am not certain either way.".into();
        }
        let embedded = user
            .split_once(RESPONSE_BEGIN)
            .and_then(|(_, rest)| rest.split_once(RESPONSE_END))
            .map(|(inner, _)| inner)
            .unwrap_or("");
        if embedded.contains(JUDGE_PASS_MARKER) {
            "The response follows the criteria.\nVERDICT: PASS".into()
        } else {
            "The response violates the criteria.\nVERDICT: FAIL".into()
        }
    }
}

impl ChatEndpoint for MockEndpoint {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, RunnerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = if request.user.starts_with("Criteria:\n") && request.user.contains(RESPONSE_BEGIN)
        {
            self.judge_reply(&request.user)
        } else {
            let probe = self
                .probes
                .iter()
                .find(|p| p.user_message == request.user)
                .ok_or_else(|| {
                    RunnerError::Mock(format!(
                        "no probe matches user message {:?}",
                        request.user.chars().take(40).collect::<String>()
                    ))
                })?;
            let absent = self.absent_blocks(&request.system);
            let score = self.score_for(&probe.id, &absent);
            self.realize(probe, score)
        };
        Ok(ChatResponse {
            text,
            usage: ChatUsage {
                prompt_tokens: None,
                completion_tokens: None,
                reported_cost: Some(UsdMicros::from_dollars(self.effects.cost_per_call_usd)),
            },
            retries: 0,
            timestamp: MOCK_TIMESTAMP.into(),
        })
    }
}
