//! Ablation plans: single-removal sweeps and strength-2 covering arrays.
//!
//! A configuration assigns present/absent to every ablatable block. A
//! phase-0 plan removes each block individually; a phase-1 plan is a
//! binary covering array of strength 2, so every unordered block pair
//! is observed in all four joint presence/absence states. Coverage is
//! never assumed: [`verify_coverage`] re-checks any plan exhaustively.
//!
//! Generation is greedy density maximization: each new row is the
//! best of a batch of seeded-random candidates, scored by how many
//! still-uncovered pair states it hits. Not minimal, but near-minimal
//! for binary strength 2 and trivially auditable after the fact.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DesignError {
    #[error("block id list is empty")]
    EmptyBlockList,
    #[error("duplicate block id `{0}` in plan input")]
    DuplicateBlockId(String),
    #[error("unsupported strength {0} (supported: 1, 2)")]
    InvalidStrength(u32),
    #[error("row budget of {budget} rows exhausted before full coverage (k={k})")]
    RowBudgetExceeded { k: usize, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Phase0,
    Phase1,
}

/// One present/absent assignment over the ablatable blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: String,
    pub phase: Phase,
    /// Ids removed from the assembled prompt; everything else present.
    pub absent: BTreeSet<String>,
}

impl Configuration {
    /// The all-present baseline every delta is computed against.
    pub fn baseline() -> Self {
        Self {
            id: "baseline".into(),
            phase: Phase::Baseline,
            absent: BTreeSet::new(),
        }
    }

    /// A phase-0 configuration removing exactly one block.
    pub fn single(id: impl Into<String>, block: impl Into<String>) -> Self {
        let mut absent = BTreeSet::new();
        absent.insert(block.into());
        Self {
            id: id.into(),
            phase: Phase::Phase0,
            absent,
        }
    }

    pub fn new(id: impl Into<String>, absent: Vec<String>) -> Self {
        Self {
            id: id.into(),
            phase: Phase::Phase1,
            absent: absent.into_iter().collect(),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.absent.is_empty()
    }
}

/// An ordered list of configurations over a fixed block-id domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub phase: Phase,
    /// 0 for phase-0 sweeps, 2 for covering arrays.
    pub strength: u32,
    /// Domain: the ablatable ids, in corpus order.
    pub block_ids: Vec<String>,
    pub configurations: Vec<Configuration>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.configurations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configurations.is_empty()
    }

    /// True when the plan's domain equals the corpus's ablatable ids
    /// (order-insensitive).
    pub fn matches_ids(&self, ablatable_ids: &[String]) -> bool {
        let a: BTreeSet<&String> = self.block_ids.iter().collect();
        let b: BTreeSet<&String> = ablatable_ids.iter().collect();
        a == b
    }
}

fn check_ids(block_ids: &[String]) -> Result<(), DesignError> {
    if block_ids.is_empty() {
        return Err(DesignError::EmptyBlockList);
    }
    let mut seen = BTreeSet::new();
    for id in block_ids {
        if !seen.insert(id) {
            return Err(DesignError::DuplicateBlockId(id.clone()));
        }
    }
    Ok(())
}

/// Baseline-only plan: the single all-present configuration. Useful
/// when only baseline adherence is being measured (e.g. comparing
/// corpus variants without ablation).
pub fn baseline_plan(block_ids: &[String]) -> Result<Plan, DesignError> {
    check_ids(block_ids)?;
    Ok(Plan {
        phase: Phase::Baseline,
        strength: 0,
        block_ids: block_ids.to_vec(),
        configurations: vec![Configuration::baseline()],
    })
}

/// Phase-0 plan: the baseline plus one single-removal configuration per
/// block, in input order. Size is always k + 1.
pub fn phase0_plan(block_ids: &[String]) -> Result<Plan, DesignError> {
    check_ids(block_ids)?;
    let mut configurations = vec![Configuration::baseline()];
    for id in block_ids {
        configurations.push(Configuration::single(format!("ablate-{id}"), id.clone()));
    }
    Ok(Plan {
        phase: Phase::Phase0,
        strength: 0,
        block_ids: block_ids.to_vec(),
        configurations,
    })
}

/// Row budget before generation fails loudly: coverage must never
/// degrade silently into "almost a covering array".
pub fn row_budget(k: usize) -> usize {
    4 * (k.max(2) as f64).log2().ceil() as usize + 8
}

/// Candidate rows drawn per greedy step.
const CANDIDATES_PER_ROW: usize = 64;

/// Binary covering array CA(N; strength, k, 2) over synthetic ids
/// b01..bk. N is not guaranteed minimal.
pub fn covering_array(k: usize, strength: u32, seed: u64) -> Result<Plan, DesignError> {
    let ids: Vec<String> = (1..=k).map(|i| format!("b{i:02}")).collect();
    covering_array_for_ids(&ids, strength, seed)
}

/// Binary covering array over explicit block ids. The all-present
/// baseline is always row 0: every delta is computed against it, and it
/// covers the all-present state of every pair for free.
pub fn covering_array_for_ids(
    block_ids: &[String],
    strength: u32,
    seed: u64,
) -> Result<Plan, DesignError> {
    check_ids(block_ids)?;
    if !(1..=2).contains(&strength) || (block_ids.len() as u32) < strength {
        return Err(DesignError::InvalidStrength(strength));
    }
    let k = block_ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Row encoding: bit set = block absent.
    let mut rows: Vec<Vec<bool>> = vec![vec![false; k]];
    let mut tracker = CoverageTracker::new(k, strength);
    tracker.cover(&rows[0]);

    let budget = row_budget(k);
    while !tracker.complete() {
        if rows.len() >= budget {
            return Err(DesignError::RowBudgetExceeded { k, budget });
        }
        let mut best: Option<(usize, Vec<bool>)> = None;
        for _ in 0..CANDIDATES_PER_ROW {
            let cand: Vec<bool> = (0..k).map(|_| rng.gen::<bool>()).collect();
            let gain = tracker.gain(&cand);
            if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                best = Some((gain, cand));
            }
        }
        // Local improvement: flip each factor if it increases the gain.
        let (_, mut row) = best.expect("at least one candidate");
        loop {
            let mut improved = false;
            for i in 0..k {
                let before = tracker.gain(&row);
                row[i] = !row[i];
                if tracker.gain(&row) > before {
                    improved = true;
                } else {
                    row[i] = !row[i];
                }
            }
            if !improved {
                break;
            }
        }
        if tracker.gain(&row) == 0 {
            // Every candidate is redundant; target one missing tuple directly.
            if let Some(forced) = tracker.forced_row(k) {
                row = forced;
            }
        }
        tracker.cover(&row);
        rows.push(row);
    }

    let configurations = rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if i == 0 {
                Configuration::baseline()
            } else {
                let absent: Vec<String> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(j, _)| block_ids[j].clone())
                    .collect();
                let mut c = Configuration::new(format!("ca-{i:03}"), absent);
                c.phase = Phase::Phase1;
                c
            }
        })
        .collect();

    Ok(Plan {
        phase: Phase::Phase1,
        strength,
        block_ids: block_ids.to_vec(),
        configurations,
    })
}

/// Incremental tuple-coverage bookkeeping for the greedy generator.
struct CoverageTracker {
    k: usize,
    strength: u32,
    /// strength 2: [pair][state 2*ai+aj]; strength 1: [factor][state].
    covered: Vec<[bool; 4]>,
    remaining: usize,
}

impl CoverageTracker {
    fn new(k: usize, strength: u32) -> Self {
        let (slots, remaining) = match strength {
            1 => (k, 2 * k),
            2 => (k * (k - 1) / 2, 4 * k * (k - 1) / 2),
            _ => unreachable!("validated strength"),
        };
        Self {
            k,
            strength,
            covered: vec![[false; 4]; slots],
            remaining,
        }
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        // Index of (i, j), i < j, in lexicographic pair order.
        i * self.k - i * (i + 1) / 2 + (j - i - 1)
    }

    fn complete(&self) -> bool {
        self.remaining == 0
    }

    fn gain(&self, row: &[bool]) -> usize {
        let mut g = 0;
        if self.strength == 1 {
            for (i, &a) in row.iter().enumerate() {
                if !self.covered[i][a as usize] {
                    g += 1;
                }
            }
            return g;
        }
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                let state = 2 * row[i] as usize + row[j] as usize;
                if !self.covered[self.pair_index(i, j)][state] {
                    g += 1;
                }
            }
        }
        g
    }

    fn cover(&mut self, row: &[bool]) {
        if self.strength == 1 {
            for (i, &a) in row.iter().enumerate() {
                if !self.covered[i][a as usize] {
                    self.covered[i][a as usize] = true;
                    self.remaining -= 1;
                }
            }
            return;
        }
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                let state = 2 * row[i] as usize + row[j] as usize;
                let idx = self.pair_index(i, j);
                if !self.covered[idx][state] {
                    self.covered[idx][state] = true;
                    self.remaining -= 1;
                }
            }
        }
    }

    /// A row hitting the first still-missing tuple.
    fn forced_row(&self, k: usize) -> Option<Vec<bool>> {
        if self.strength == 1 {
            for i in 0..k {
                for state in 0..2 {
                    if !self.covered[i][state] {
                        let mut row = vec![false; k];
                        row[i] = state == 1;
                        return Some(row);
                    }
                }
            }
            return None;
        }
        for i in 0..k {
            for j in (i + 1)..k {
                for state in 0..4 {
                    if !self.covered[self.pair_index(i, j)][state] {
                        let mut row = vec![false; k];
                        row[i] = state & 2 != 0;
                        row[j] = state & 1 != 0;
                        return Some(row);
                    }
                }
            }
        }
        None
    }
}

/// One uncovered (factor tuple, value tuple) combination. `absent`
/// values mirror the configuration encoding: true = block absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingTuple {
    pub blocks: Vec<String>,
    pub absent: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub strength: u32,
    pub total_tuples: usize,
    pub covered_tuples: usize,
    pub missing: Vec<MissingTuple>,
}

impl CoverageReport {
    pub fn is_covering(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Exhaustive coverage check, O(N·k²) for strength 2. Diagnostic only:
/// an incomplete plan is reported, not rejected.
pub fn verify_coverage(plan: &Plan, strength: u32) -> Result<CoverageReport, DesignError> {
    if !(1..=2).contains(&strength) {
        return Err(DesignError::InvalidStrength(strength));
    }
    let k = plan.block_ids.len();
    if (k as u32) < strength {
        return Err(DesignError::InvalidStrength(strength));
    }
    let rows: Vec<Vec<bool>> = plan
        .configurations
        .iter()
        .map(|c| {
            plan.block_ids
                .iter()
                .map(|id| c.absent.contains(id))
                .collect()
        })
        .collect();

    let mut tracker = CoverageTracker::new(k, strength);
    for row in &rows {
        tracker.cover(row);
    }

    let mut missing = Vec::new();
    if strength == 1 {
        for i in 0..k {
            for state in 0..2 {
                if !tracker.covered[i][state] {
                    missing.push(MissingTuple {
                        blocks: vec![plan.block_ids[i].clone()],
                        absent: vec![state == 1],
                    });
                }
            }
        }
    } else {
        for i in 0..k {
            for j in (i + 1)..k {
                for state in 0..4 {
                    if !tracker.covered[tracker.pair_index(i, j)][state] {
                        missing.push(MissingTuple {
                            blocks: vec![plan.block_ids[i].clone(), plan.block_ids[j].clone()],
                            absent: vec![state & 2 != 0, state & 1 != 0],
                        });
                    }
                }
            }
        }
    }
    let total = match strength {
        1 => 2 * k,
        _ => 4 * k * (k - 1) / 2,
    };
    Ok(CoverageReport {
        strength,
        total_tuples: total,
        covered_tuples: total - missing.len(),
        missing,
    })
}
