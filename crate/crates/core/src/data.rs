//! Annotation record schema, validation, JSONL round-trip, and assembly of
//! training examples.
//!
//! One annotation record per line, UTF-8, field names are normative:
//!
//! ```json
//! {"video_id": "...", "category": "Action", "question": "...",
//!  "chosen": "...", "rejected_relevant": "...", "rejected_irrelevant": "...",
//!  "keyframes": [{"frame_idx": 2, "objects": [{"label": "cat", "bbox": [x,y,w,h]}]}],
//!  "segments": [{"start": 1, "end": 3, "label": "run"}]}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::TokenTable;
use crate::negatives::{self, StrategySet};
use crate::policy::{Role, TokenSeq};
use crate::video::{BBox, SyntheticVideo};

/// What a wrong answer misrepresents. The first six categories are
/// perception errors, the last four temporal ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HallucinationCategory {
    Object,
    Number,
    Location,
    Color,
    StaticRelation,
    OCR,
    Action,
    DynamicAttribute,
    DynamicRelation,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HallucinationDimension {
    Perception,
    Temporal,
}

impl HallucinationCategory {
    pub const ALL: [Self; 10] = [
        Self::Object,
        Self::Number,
        Self::Location,
        Self::Color,
        Self::StaticRelation,
        Self::OCR,
        Self::Action,
        Self::DynamicAttribute,
        Self::DynamicRelation,
        Self::Sequence,
    ];

    /// Derived, never stored: the category/dimension split is fixed.
    pub fn dimension(self) -> HallucinationDimension {
        match self {
            Self::Object
            | Self::Number
            | Self::Location
            | Self::Color
            | Self::StaticRelation
            | Self::OCR => HallucinationDimension::Perception,
            Self::Action | Self::DynamicAttribute | Self::DynamicRelation | Self::Sequence => {
                HallucinationDimension::Temporal
            }
        }
    }

    /// Whether the chosen/rejected pair flips meaning when the timeline is
    /// reversed.
    pub fn order_dependent(self) -> bool {
        matches!(self, Self::Sequence)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Object => "Object",
            Self::Number => "Number",
            Self::Location => "Location",
            Self::Color => "Color",
            Self::StaticRelation => "StaticRelation",
            Self::OCR => "OCR",
            Self::Action => "Action",
            Self::DynamicAttribute => "DynamicAttribute",
            Self::DynamicRelation => "DynamicRelation",
            Self::Sequence => "Sequence",
        }
    }
}

impl fmt::Display for HallucinationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for HallucinationCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown hallucination category '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeObject {
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeAnnotation {
    pub frame_idx: usize,
    pub objects: Vec<KeyframeObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// One annotated QA example: prompt, chosen response, the two rejected
/// responses, and the spatial-temporal grounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub category: HallucinationCategory,
    pub question: String,
    pub chosen: String,
    pub rejected_relevant: String,
    pub rejected_irrelevant: String,
    pub keyframes: Vec<KeyframeAnnotation>,
    pub segments: Vec<SegmentAnnotation>,
}

// --- validation --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingRejected { field: &'static str },
    BboxOutOfRange { frame_idx: usize, detail: String },
    SegmentOutOfBounds { start: usize, end: usize },
    KeyframeOutOfBounds { frame_idx: usize },
    IrrelevantMentionsVideoObject { word: String },
    RejectedEqualsChosen,
    MissingGrounding { field: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MissingRejected { field } => write!(f, "missing rejected response '{field}'"),
            Self::BboxOutOfRange { frame_idx, detail } => {
                write!(f, "keyframe {frame_idx}: {detail}")
            }
            Self::SegmentOutOfBounds { start, end } => {
                write!(f, "segment [{start}, {end}] out of bounds")
            }
            Self::KeyframeOutOfBounds { frame_idx } => {
                write!(f, "keyframe index {frame_idx} outside the video")
            }
            Self::IrrelevantMentionsVideoObject { word } => {
                write!(f, "irrelevant rejection mentions in-video object '{word}'")
            }
            Self::RejectedEqualsChosen => {
                write!(f, "relevant rejection identical to the chosen response")
            }
            Self::MissingGrounding { field } => write!(f, "no {field} annotated"),
        }
    }
}

/// Everything wrong with a record; empty means accepted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Mechanical cross-checks of an annotation against its video. Reports every
/// violation instead of stopping at the first.
pub fn validate_record(
    rec: &AnnotationRecord,
    video: &SyntheticVideo,
    table: &TokenTable,
) -> ValidationReport {
    let mut violations = Vec::new();

    if rec.rejected_relevant.trim().is_empty() {
        violations.push(Violation::MissingRejected {
            field: "rejected_relevant",
        });
    }
    if rec.rejected_irrelevant.trim().is_empty() {
        violations.push(Violation::MissingRejected {
            field: "rejected_irrelevant",
        });
    }
    if rec.keyframes.is_empty() {
        violations.push(Violation::MissingGrounding { field: "keyframes" });
    }
    if rec.segments.is_empty() {
        violations.push(Violation::MissingGrounding { field: "segments" });
    }

    let frame_indices: BTreeSet<usize> = video.frames.iter().map(|f| f.index).collect();
    for kf in &rec.keyframes {
        if !frame_indices.contains(&kf.frame_idx) {
            violations.push(Violation::KeyframeOutOfBounds {
                frame_idx: kf.frame_idx,
            });
        }
        for obj in &kf.objects {
            if let Err(e) = obj.bbox.validate() {
                violations.push(Violation::BboxOutOfRange {
                    frame_idx: kf.frame_idx,
                    detail: e.to_string(),
                });
            }
        }
    }

    for seg in &rec.segments {
        if seg.start > seg.end || seg.end >= video.frames.len() {
            violations.push(Violation::SegmentOutOfBounds {
                start: seg.start,
                end: seg.end,
            });
        }
    }

    // The irrelevant rejection must not name any object class present in any
    // frame of the video.
    let video_classes: BTreeSet<u32> = video
        .frames
        .iter()
        .flat_map(|f| f.objects.iter().map(|o| o.class_token))
        .collect();
    for word in rec.rejected_irrelevant.split_whitespace() {
        if let Some(id) = table.id(word) {
            if video_classes.contains(&id) {
                violations.push(Violation::IrrelevantMentionsVideoObject {
                    word: word.to_string(),
                });
            }
        }
    }

    let chosen_words: Vec<&str> = rec.chosen.split_whitespace().collect();
    let rejected_words: Vec<&str> = rec.rejected_relevant.split_whitespace().collect();
    if !rec.rejected_relevant.trim().is_empty() && chosen_words == rejected_words {
        violations.push(Violation::RejectedEqualsChosen);
    }

    ValidationReport { violations }
}

// --- JSONL -------------------------------------------------------------------

pub fn write_jsonl_to<W: Write>(records: &[AnnotationRecord], mut w: W) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl_from<R: Read>(r: R) -> Result<Vec<AnnotationRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_jsonl(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_jsonl_to(records, std::io::BufWriter::new(file))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    read_jsonl_from(file)
}

/// Videos use the same one-JSON-object-per-line convention.
pub fn write_videos_jsonl(videos: &[SyntheticVideo], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for v in videos {
        let line = serde_json::to_string(v)
            .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_videos_jsonl(path: &Path) -> Result<Vec<SyntheticVideo>> {
    let file = std::fs::File::open(path)?;
    let mut videos = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let v: SyntheticVideo = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        v.validate_invariants()?;
        videos.push(v);
    }
    Ok(videos)
}

impl SyntheticVideo {
    fn validate_invariants(&self) -> Result<()> {
        // Re-run the constructor checks on deserialized data.
        SyntheticVideo::new(
            self.video_id.clone(),
            self.frames.clone(),
            self.segments.clone(),
        )
        .map(|_| ())
    }
}

// --- training example assembly ------------------------------------------------

/// Preferred/non-preferred visual pair at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPair {
    pub chosen: SyntheticVideo,
    pub rejected: SyntheticVideo,
}

/// Fully tokenized training example with visual pairs at the video, clip and
/// keyframe levels, plus provenance back to the annotation it came from.
#[derive(Debug, Clone)]
pub struct PreferenceRecord {
    pub source_id: String,
    pub category: HallucinationCategory,
    pub strategies: StrategySet,
    /// Degenerate-contrast and similar soft diagnostics.
    pub warnings: Vec<String>,
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected_relevant: TokenSeq,
    pub rejected_irrelevant: TokenSeq,
    pub video_pair: VisualPair,
    pub clip_pair: VisualPair,
    pub frame_pair: VisualPair,
    /// Positional bounds of the annotated event segment.
    pub event_segment: (usize, usize),
    /// Position of the annotated keyframe in the source video.
    pub keyframe_index: usize,
    pub key_object_id: u32,
}

/// Validates and tokenizes an annotation, then builds the visual preference
/// pairs. `pool`/`self_index` provide the candidate set for batch-sampled
/// negatives.
pub fn assemble_training_example(
    rec: &AnnotationRecord,
    video: &SyntheticVideo,
    table: &TokenTable,
    strategies: &StrategySet,
    seed: u64,
    pool: &[SyntheticVideo],
    self_index: usize,
) -> Result<PreferenceRecord> {
    let report = validate_record(rec, video, table);
    if !report.is_clean() {
        return Err(Error::InvalidInput(format!(
            "annotation {} failed validation: {}",
            rec.video_id,
            report
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    negatives::make_preference_record(video, rec, table, strategies, seed, pool, self_index)
}

/// Assembles one preference record per (annotation, video) pair, using the
/// full corpus as the sampling pool for batch negatives.
pub fn assemble_corpus(
    records: &[AnnotationRecord],
    videos: &[SyntheticVideo],
    table: &TokenTable,
    strategies: &StrategySet,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    if records.len() != videos.len() {
        return Err(Error::InvalidInput(format!(
            "{} annotation records but {} videos",
            records.len(),
            videos.len()
        )));
    }
    records
        .iter()
        .zip(videos)
        .enumerate()
        .map(|(i, (rec, video))| {
            let rec_seed = crate::rng::derive_seed(seed, 0xA55E, i as u64);
            assemble_training_example(rec, video, table, strategies, rec_seed, videos, i)
        })
        .collect()
}

/// Tokenizes the four text fields of an annotation.
pub fn tokenize_annotation(
    rec: &AnnotationRecord,
    table: &TokenTable,
) -> Result<(TokenSeq, TokenSeq, TokenSeq, TokenSeq)> {
    Ok((
        table.tokenize(&rec.question, Role::Prompt)?,
        table.tokenize(&rec.chosen, Role::Response)?,
        table.tokenize(&rec.rejected_relevant, Role::Response)?,
        table.tokenize(&rec.rejected_irrelevant, Role::Response)?,
    ))
}
