//! Instruction-block ablation harness.
//!
//! Measures how the individual instruction blocks of a system prompt
//! interact: cooperatively or competitively; across languages, models,
//! and prompt variants. The pipeline is:
//!
//! 1. [`corpus`]: load a block-decomposed prompt corpus and assemble
//!    prompts for arbitrary present/absent configurations.
//! 2. [`design`]: generate single-removal plans and strength-2 covering
//!    arrays over the ablatable blocks, with exhaustive coverage
//!    verification.
//! 3. [`probes`]: the probe battery and its three scoring methods
//!    (pattern absence, length vs. baseline, LLM-as-judge).
//! 4. [`runner`]: execute every (corpus, configuration, probe, model,
//!    trial) cell against a chat-completions endpoint with caching,
//!    retries, budget control, and exact cost accounting.
//! 5. [`stats`]: Welch's t with exact t-distribution CDF,
//!    Benjamini-Hochberg, permutation tests, Pearson r, variance.
//! 6. [`analysis`]: baselines, main effects, pairwise interactions,
//!    topology classification, encoding-variance ratios, and variant
//!    comparisons derived from trial results.
//! 7. [`register`]: imperative/declarative register audit and
//!    hand-authored rewrite patches.
//! 8. [`report`]: run/analyze/verify entry points and table emission.

pub mod analysis;
pub mod corpus;
pub mod design;
pub mod probes;
pub mod register;
pub mod report;
pub mod runner;
pub mod stats;
