//! Block-decomposed prompt corpora.
//!
//! A corpus is an ordered list of classified instruction blocks in one
//! language and one variant. Blocks marked `ablatable` are the ones a
//! configuration may toggle; the rest are constrained (removing them
//! would break tool definitions or security policy) and are always
//! present at assembly.
//!
//! On disk a corpus is a directory: one JSON manifest carrying the
//! metadata plus one raw UTF-8 text file per block, so translators and
//! reviewers can diff prose without touching structure.
//!
//! All character counts are Unicode scalar values, never bytes -
//! cross-script size comparisons would otherwise be distorted.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::Configuration;

pub const DEFAULT_SEPARATOR: &str = "\n\n";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("manifest or block file missing: {path} (block `{block_id}`)")]
    MissingFile { path: PathBuf, block_id: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} does not parse: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate block id `{0}`")]
    DuplicateBlockId(String),
    #[error("block `{0}` has empty text")]
    EmptyBlockText(String),
    #[error("block `{block_id}`: unknown {field} value `{value}`")]
    UnknownEnumValue {
        block_id: String,
        field: &'static str,
        value: String,
    },
    #[error("manifest has zero blocks")]
    EmptyCorpus,
    #[error("block id is empty")]
    EmptyBlockId,
    #[error("configuration `{config_id}` does not match corpus ablatable blocks: {detail}")]
    ConfigCorpusMismatch { config_id: String, detail: String },
    #[error("reference language `{0}` not present in corpus family")]
    MissingReferenceLanguage(String),
    #[error("padding target {target} is smaller than current length {current}")]
    TargetSmallerThanCurrent { target: usize, current: usize },
    #[error("filler unit must be non-empty")]
    EmptyFiller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    System,
    Domain,
    Application,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Mandate,
    Prohibition,
    Guidance,
    Information,
}

/// How the instruction encodes its rule: a conditional workflow
/// ("when X, do Y not Z") or a direct statement ("do X").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Procedural,
    Declarative,
    Unlabeled,
}

/// Sociolinguistic register of the block text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Register {
    Imperative,
    Declarative,
    Unlabeled,
}

/// One contiguous, classified instruction unit of the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub text: String,
    pub tier: Tier,
    pub category: String,
    pub modality: Modality,
    /// Free blocks may be toggled by configurations; constrained ones
    /// are always assembled.
    pub ablatable: bool,
    pub encoding: Encoding,
    pub register: Register,
    /// Relative path of the backing text file, when loaded from disk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Original,
    Declarative,
    Scoped,
    Padded,
    Custom(String),
}

impl Variant {
    pub fn as_label(&self) -> &str {
        match self {
            Variant::Original => "original",
            Variant::Declarative => "declarative",
            Variant::Scoped => "scoped",
            Variant::Padded => "padded",
            Variant::Custom(s) => s,
        }
    }

    pub fn from_label(label: &str) -> Variant {
        match label {
            "original" => Variant::Original,
            "declarative" => Variant::Declarative,
            "scoped" => Variant::Scoped,
            "padded" => Variant::Padded,
            other => Variant::Custom(other.to_string()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_label())
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_label())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let label = String::deserialize(d)?;
        Ok(Variant::from_label(&label))
    }
}

/// An ordered set of blocks in one language and one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    /// Corpus family name; all languages/variants of the same prompt
    /// share it and the same block-id sequence.
    pub family: String,
    /// BCP-47-style language code (en, zh, fr, es, ...).
    pub language: String,
    pub variant: Variant,
    /// String joined between blocks at assembly time.
    pub separator: String,
    pub blocks: Vec<Block>,
}

impl Corpus {
    pub fn block(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    /// Ids of the free (ablatable) blocks, in corpus order.
    pub fn ablatable_ids(&self) -> Vec<String> {
        self.blocks
            .iter()
            .filter(|b| b.ablatable)
            .map(|b| b.id.clone())
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.ablatable).count()
    }

    /// Unicode scalar count of the fully assembled prompt.
    pub fn all_present_chars(&self) -> usize {
        let text: usize = self.blocks.iter().map(|b| b.text.chars().count()).sum();
        let seps = self.blocks.len().saturating_sub(1) * self.separator.chars().count();
        text + seps
    }
}

// ---------------------------------------------------------------------------
// Manifest (disk format)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawManifest {
    family: String,
    language: String,
    variant: String,
    #[serde(default = "default_separator")]
    separator: String,
    blocks: Vec<RawBlock>,
}

fn default_separator() -> String {
    DEFAULT_SEPARATOR.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawBlock {
    id: String,
    file: String,
    tier: String,
    category: String,
    modality: String,
    ablatable: bool,
    #[serde(default = "unlabeled")]
    encoding: String,
    #[serde(default = "unlabeled")]
    register: String,
}

fn unlabeled() -> String {
    "unlabeled".to_string()
}

fn parse_enum<T>(block_id: &str, field: &'static str, value: &str) -> Result<T, CorpusError>
where
    T: serde::de::DeserializeOwned,
{
    serde_json::from_value(serde_json::Value::String(value.to_string())).map_err(|_| {
        CorpusError::UnknownEnumValue {
            block_id: block_id.to_string(),
            field,
            value: value.to_string(),
        }
    })
}

/// Load and validate a corpus from its manifest file.
///
/// Block text files are resolved relative to the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    let raw_text = fs::read_to_string(manifest_path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::MissingFile {
                path: manifest_path.to_path_buf(),
                block_id: "<manifest>".into(),
            }
        } else {
            CorpusError::Io {
                path: manifest_path.to_path_buf(),
                source,
            }
        }
    })?;
    let raw: RawManifest =
        serde_json::from_str(&raw_text).map_err(|source| CorpusError::Parse {
            path: manifest_path.to_path_buf(),
            source,
        })?;
    if raw.blocks.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = BTreeSet::new();
    let mut blocks = Vec::with_capacity(raw.blocks.len());
    for rb in &raw.blocks {
        if rb.id.is_empty() {
            return Err(CorpusError::EmptyBlockId);
        }
        if !seen.insert(rb.id.clone()) {
            return Err(CorpusError::DuplicateBlockId(rb.id.clone()));
        }
        let file_path = base.join(&rb.file);
        let text = fs::read_to_string(&file_path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                CorpusError::MissingFile {
                    path: file_path.clone(),
                    block_id: rb.id.clone(),
                }
            } else {
                CorpusError::Io {
                    path: file_path.clone(),
                    source,
                }
            }
        })?;
        if text.is_empty() {
            return Err(CorpusError::EmptyBlockText(rb.id.clone()));
        }
        blocks.push(Block {
            id: rb.id.clone(),
            text,
            tier: parse_enum(&rb.id, "tier", &rb.tier)?,
            category: rb.category.clone(),
            modality: parse_enum(&rb.id, "modality", &rb.modality)?,
            ablatable: rb.ablatable,
            encoding: parse_enum(&rb.id, "encoding", &rb.encoding)?,
            register: parse_enum(&rb.id, "register", &rb.register)?,
            source_file: Some(rb.file.clone()),
        });
    }
    Ok(Corpus {
        family: raw.family,
        language: raw.language,
        variant: Variant::from_label(&raw.variant),
        separator: raw.separator,
        blocks,
    })
}

fn enum_label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v).expect("enum serializes") {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Write a corpus back to disk as manifest + block files.
///
/// Blocks loaded from disk keep their file names; programmatically
/// built blocks get `<id>.txt`. Loading the result yields the same
/// corpus, and the manifest is byte-stable modulo JSON key ordering.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut raw_blocks = Vec::with_capacity(corpus.blocks.len());
    for b in &corpus.blocks {
        let file = b
            .source_file
            .clone()
            .unwrap_or_else(|| format!("{}.txt", b.id));
        let file_path = dir.join(&file);
        if let Some(parent) = file_path.parent() {
            fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&file_path, &b.text).map_err(|source| CorpusError::Io {
            path: file_path.clone(),
            source,
        })?;
        raw_blocks.push(RawBlock {
            id: b.id.clone(),
            file,
            tier: enum_label(&b.tier),
            category: b.category.clone(),
            modality: enum_label(&b.modality),
            ablatable: b.ablatable,
            encoding: enum_label(&b.encoding),
            register: enum_label(&b.register),
        });
    }
    let raw = RawManifest {
        family: corpus.family.clone(),
        language: corpus.language.clone(),
        variant: corpus.variant.as_label().to_string(),
        separator: corpus.separator.clone(),
        blocks: raw_blocks,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&raw).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|source| CorpusError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

/// Assemble the prompt for a configuration: all constrained blocks plus
/// the present ablatable blocks, joined in corpus order by the corpus
/// separator. Deterministic for fixed inputs.
pub fn assemble_prompt(corpus: &Corpus, config: &Configuration) -> Result<String, CorpusError> {
    let ablatable: BTreeSet<&str> = corpus
        .blocks
        .iter()
        .filter(|b| b.ablatable)
        .map(|b| b.id.as_str())
        .collect();
    for absent in &config.absent {
        if !ablatable.contains(absent.as_str()) {
            return Err(CorpusError::ConfigCorpusMismatch {
                config_id: config.id.clone(),
                detail: format!("absent id `{absent}` is not an ablatable block of this corpus"),
            });
        }
    }
    let parts: Vec<&str> = corpus
        .blocks
        .iter()
        .filter(|b| !b.ablatable || !config.absent.contains(&b.id))
        .map(|b| b.text.as_str())
        .collect();
    Ok(parts.join(&corpus.separator))
}

// ---------------------------------------------------------------------------
// Character statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharStatRow {
    pub language: String,
    pub chars: usize,
    /// 100 x chars / chars(reference), rounded to one decimal.
    pub percent_of_reference: f64,
}

/// Percent of the reference count, rounded to one decimal place.
pub fn percent_of_reference(chars: usize, reference_chars: usize) -> f64 {
    let pct = 100.0 * chars as f64 / reference_chars as f64;
    (pct * 10.0).round() / 10.0
}

/// Character statistics over raw per-language counts.
pub fn char_stats_from_counts(
    counts: &[(String, usize)],
    reference_language: &str,
) -> Result<Vec<CharStatRow>, CorpusError> {
    let reference = counts
        .iter()
        .find(|(lang, _)| lang == reference_language)
        .map(|(_, c)| *c)
        .ok_or_else(|| CorpusError::MissingReferenceLanguage(reference_language.to_string()))?;
    Ok(counts
        .iter()
        .map(|(language, chars)| CharStatRow {
            language: language.clone(),
            chars: *chars,
            percent_of_reference: percent_of_reference(*chars, reference),
        })
        .collect())
}

/// Character statistics for a corpus family, one row per corpus, with
/// sizes taken from the fully assembled (all blocks present) prompt.
pub fn char_stats(
    family: &[Corpus],
    reference_language: &str,
) -> Result<Vec<CharStatRow>, CorpusError> {
    let counts: Vec<(String, usize)> = family
        .iter()
        .map(|c| (c.language.clone(), c.all_present_chars()))
        .collect();
    char_stats_from_counts(&counts, reference_language)
}

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

/// Pad a corpus with a repeated neutral filler sentence until the
/// assembled all-present length reaches `target_chars`, within one
/// filler unit (the joining separator is counted against the padding
/// budget). The filler lands in a dedicated non-ablatable block, so no
/// instruction text changes and no configuration can toggle it.
pub fn pad_corpus(
    corpus: &Corpus,
    target_chars: usize,
    filler_unit: &str,
) -> Result<Corpus, CorpusError> {
    if filler_unit.is_empty() {
        return Err(CorpusError::EmptyFiller);
    }
    let current = corpus.all_present_chars();
    if target_chars < current {
        return Err(CorpusError::TargetSmallerThanCurrent {
            target: target_chars,
            current,
        });
    }
    let mut padded = corpus.clone();
    padded.variant = Variant::Padded;
    if target_chars == current {
        return Ok(padded);
    }
    let unit_len = filler_unit.chars().count();
    let sep_len = if corpus.blocks.is_empty() {
        0
    } else {
        corpus.separator.chars().count()
    };
    let room = target_chars - current;
    if room < sep_len + unit_len {
        // No whole unit fits without overshooting; label-only change.
        return Ok(padded);
    }
    let units = (room - sep_len) / unit_len;
    let mut filler_id = "padding-filler".to_string();
    while padded.blocks.iter().any(|b| b.id == filler_id) {
        filler_id.push('x');
    }
    padded.blocks.push(Block {
        id: filler_id,
        text: filler_unit.repeat(units),
        tier: Tier::Application,
        category: "padding".into(),
        modality: Modality::Information,
        ablatable: false,
        encoding: Encoding::Unlabeled,
        register: Register::Unlabeled,
        source_file: None,
    });
    Ok(padded)
}
