//! Register classification and hand-authored rewrite patches.
//!
//! The classifier only audits: it counts imperative vs declarative
//! marker hits from a per-language lexicon and labels the block by
//! majority, staying `unlabeled` on ties so stratified analyses are
//! never fed a forced label. Rewrites themselves are data, a patch
//! file pairing each block's original text with its hand-written
//! file pairing originals with replacements, because automated rewriting is exactly
//! the kind of semantic edit this harness must not perform.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Register, Variant};

#[derive(Debug, thiserror::Error)]
pub enum RegisterError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} does not parse: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("lexicon is for `{lexicon}` but corpus is `{corpus}`")]
    LexiconLanguageMismatch { lexicon: String, corpus: String },
    #[error("lexicon marker `{0}` appears in both the imperative and declarative lists")]
    OverlappingMarker(String),
    #[error("lexicon `{0}` has an empty marker list")]
    EmptyMarkerList(String),
    #[error("patch for unknown block id `{0}`")]
    UnknownBlockId(String),
    #[error("patch original for `{0}` does not match the corpus text byte-for-byte")]
    OriginalMismatch(String),
    #[error("patch for `{0}` is empty or identical to the original")]
    InvalidRewrite(String),
}

/// Per-language marker lists operationalizing the imperative vs
/// declarative contrast.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterLexicon {
    pub language: String,
    /// Bare-verb openers, uppercase deontic tokens, and per-language
    /// equivalents.
    pub imperative_markers: Vec<String>,
    /// Colon-status patterns, copular statements.
    pub declarative_markers: Vec<String>,
    /// Marker matching honors case only when true; the lexicon decides,
    /// not the classifier.
    #[serde(default)]
    pub case_sensitive: bool,
}

impl RegisterLexicon {
    pub fn validate(&self) -> Result<(), RegisterError> {
        if self.imperative_markers.is_empty() || self.declarative_markers.is_empty() {
            return Err(RegisterError::EmptyMarkerList(self.language.clone()));
        }
        for m in &self.imperative_markers {
            if self.declarative_markers.contains(m) {
                return Err(RegisterError::OverlappingMarker(m.clone()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RegisterError> {
        let text = fs::read_to_string(path).map_err(|source| RegisterError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let lex: RegisterLexicon =
            serde_json::from_str(&text).map_err(|source| RegisterError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        lex.validate()?;
        Ok(lex)
    }

    /// The English lexicon shipped with the harness.
    pub fn builtin_english() -> Self {
        let lex: RegisterLexicon =
            serde_json::from_str(include_str!("../lexicons/en.json")).expect("en lexicon parses");
        lex.validate().expect("en lexicon valid");
        lex
    }

    /// The Spanish lexicon shipped with the harness.
    pub fn builtin_spanish() -> Self {
        let lex: RegisterLexicon =
            serde_json::from_str(include_str!("../lexicons/es.json")).expect("es lexicon parses");
        lex.validate().expect("es lexicon valid");
        lex
    }
}

/// Marker hits backing a classification, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerHits {
    /// (marker, occurrence count) for every marker that hit.
    pub imperative: Vec<(String, usize)>,
    pub declarative: Vec<(String, usize)>,
}

impl MarkerHits {
    pub fn imperative_total(&self) -> usize {
        self.imperative.iter().map(|(_, n)| n).sum()
    }

    pub fn declarative_total(&self) -> usize {
        self.declarative.iter().map(|(_, n)| n).sum()
    }
}

fn count_occurrences(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    haystack.matches(needle).count()
}

fn tally(text: &str, markers: &[String], case_sensitive: bool) -> Vec<(String, usize)> {
    let lowered;
    let haystack = if case_sensitive {
        text
    } else {
        lowered = text.to_lowercase();
        &lowered
    };
    markers
        .iter()
        .filter_map(|m| {
            let needle = if case_sensitive {
                m.clone()
            } else {
                m.to_lowercase()
            };
            let n = count_occurrences(haystack, &needle);
            (n > 0).then(|| (m.clone(), n))
        })
        .collect()
}

/// Classify a block text by marker majority: more imperative hits than
/// declarative is imperative, the reverse is declarative, ties
/// (including zero hits) stay unlabeled.
pub fn classify_register(text: &str, lexicon: &RegisterLexicon) -> (Register, MarkerHits) {
    let hits = MarkerHits {
        imperative: tally(text, &lexicon.imperative_markers, lexicon.case_sensitive),
        declarative: tally(text, &lexicon.declarative_markers, lexicon.case_sensitive),
    };
    let label = match hits.imperative_total().cmp(&hits.declarative_total()) {
        std::cmp::Ordering::Greater => Register::Imperative,
        std::cmp::Ordering::Less => Register::Declarative,
        std::cmp::Ordering::Equal => Register::Unlabeled,
    };
    (label, hits)
}

/// Audit every block of a corpus against a lexicon of the same language.
pub fn audit_corpus(
    corpus: &Corpus,
    lexicon: &RegisterLexicon,
) -> Result<Vec<(String, Register, MarkerHits)>, RegisterError> {
    if corpus.language != lexicon.language {
        return Err(RegisterError::LexiconLanguageMismatch {
            lexicon: lexicon.language.clone(),
            corpus: corpus.language.clone(),
        });
    }
    Ok(corpus
        .blocks
        .iter()
        .map(|b| {
            let (label, hits) = classify_register(&b.text, lexicon);
            (b.id.clone(), label, hits)
        })
        .collect())
}

/// One hand-authored rewrite of a block's text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPatch {
    pub block_id: String,
    pub original_text: String,
    pub rewritten_text: String,
    pub register_before: Register,
    pub register_after: Register,
}

/// Disk form of a patch: text lives in files next to the patch list.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPatch {
    block_id: String,
    original_file: String,
    rewritten_file: String,
    register_before: Register,
    register_after: Register,
}

/// Load a patch file (JSON array) resolving the referenced text files
/// relative to the patch file's directory.
pub fn load_patches(path: &Path) -> Result<Vec<VariantPatch>, RegisterError> {
    let text = fs::read_to_string(path).map_err(|source| RegisterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: Vec<RawPatch> = serde_json::from_str(&text).map_err(|source| RegisterError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let read = |rel: &str| -> Result<String, RegisterError> {
        let p = base.join(rel);
        fs::read_to_string(&p).map_err(|source| RegisterError::Io { path: p, source })
    };
    raw.into_iter()
        .map(|r| {
            let patch = VariantPatch {
                original_text: read(&r.original_file)?,
                rewritten_text: read(&r.rewritten_file)?,
                block_id: r.block_id,
                register_before: r.register_before,
                register_after: r.register_after,
            };
            if patch.rewritten_text.is_empty() || patch.rewritten_text == patch.original_text {
                return Err(RegisterError::InvalidRewrite(patch.block_id));
            }
            Ok(patch)
        })
        .collect()
}

/// Apply rewrite patches, producing a new corpus under `variant_label`.
///
/// Each patch must name an existing block whose current text equals the
/// patch's original byte-for-byte; patching a drifted corpus is an
/// error, not a silent partial rewrite. Untouched blocks stay
/// byte-identical; patched blocks change only text and register.
pub fn apply_patches(
    corpus: &Corpus,
    patches: &[VariantPatch],
    variant_label: &str,
) -> Result<Corpus, RegisterError> {
    let mut out = corpus.clone();
    out.variant = Variant::from_label(variant_label);
    for patch in patches {
        if patch.rewritten_text.is_empty() || patch.rewritten_text == patch.original_text {
            return Err(RegisterError::InvalidRewrite(patch.block_id.clone()));
        }
        let block = out
            .blocks
            .iter_mut()
            .find(|b| b.id == patch.block_id)
            .ok_or_else(|| RegisterError::UnknownBlockId(patch.block_id.clone()))?;
        if block.text != patch.original_text {
            return Err(RegisterError::OriginalMismatch(patch.block_id.clone()));
        }
        block.text = patch.rewritten_text.clone();
        block.register = patch.register_after;
    }
    Ok(out)
}

/// The patches inverted, for restoring the original corpus.
pub fn invert_patches(patches: &[VariantPatch]) -> Vec<VariantPatch> {
    patches
        .iter()
        .map(|p| VariantPatch {
            block_id: p.block_id.clone(),
            original_text: p.rewritten_text.clone(),
            rewritten_text: p.original_text.clone(),
            register_before: p.register_after,
            register_after: p.register_before,
        })
        .collect()
}
