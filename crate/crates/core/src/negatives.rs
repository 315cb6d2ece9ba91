//! Construction of non-preferred (rejected) visual samples at the video,
//! clip and object levels, and assembly of full preference records.
//!
//! Thirteen (level, kind) combinations are valid:
//!
//! | level  | kinds                                                    |
//! |--------|----------------------------------------------------------|
//! | video  | randomness, blackness, reverse, random_mask               |
//! | clip   | randomness, blackness, reverse, random_mask, relevant_segments |
//! | object | randomness, blackness, roi_mask, roi_move                 |
//!
//! Clip-level blackness/reverse/random_mask corrupt the event clip (the
//! chosen sample at that level), not the whole video.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize_annotation, AnnotationRecord, PreferenceRecord, VisualPair};
use crate::error::{Error, Result};
use crate::lexicon::TokenTable;
use crate::rng::{derive_seed, rng_from};
use crate::video::{
    bbox_bin, extract_clip, extract_keyframe, featurize_video, BBox, EventSegment, SyntheticVideo,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeLevel {
    Video,
    Clip,
    Object,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    Randomness,
    Blackness,
    Reverse,
    RandomMask,
    RelevantSegments,
    RoiMask,
    RoiMove,
}

impl NegativeKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Randomness => "randomness",
            Self::Blackness => "blackness",
            Self::Reverse => "reverse",
            Self::RandomMask => "random_mask",
            Self::RelevantSegments => "relevant_segments",
            Self::RoiMask => "roi_mask",
            Self::RoiMove => "roi_move",
        }
    }
}

impl std::str::FromStr for NegativeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "randomness" => Ok(Self::Randomness),
            "blackness" => Ok(Self::Blackness),
            "reverse" => Ok(Self::Reverse),
            "random_mask" => Ok(Self::RandomMask),
            "relevant_segments" => Ok(Self::RelevantSegments),
            "roi_mask" => Ok(Self::RoiMask),
            "roi_move" => Ok(Self::RoiMove),
            _ => Err(Error::InvalidInput(format!("unknown negative kind '{s}'"))),
        }
    }
}

impl std::str::FromStr for NegativeLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video" => Ok(Self::Video),
            "clip" => Ok(Self::Clip),
            "object" => Ok(Self::Object),
            _ => Err(Error::InvalidInput(format!("unknown negative level '{s}'"))),
        }
    }
}

pub fn valid_combo(level: NegativeLevel, kind: NegativeKind) -> bool {
    use NegativeKind::*;
    use NegativeLevel::*;
    matches!(
        (level, kind),
        (Video, Randomness)
            | (Video, Blackness)
            | (Video, Reverse)
            | (Video, RandomMask)
            | (Clip, Randomness)
            | (Clip, Blackness)
            | (Clip, Reverse)
            | (Clip, RandomMask)
            | (Clip, RelevantSegments)
            | (Object, Randomness)
            | (Object, Blackness)
            | (Object, RoiMask)
            | (Object, RoiMove)
    )
}

/// A validated (level, kind) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeStrategy {
    pub level: NegativeLevel,
    pub kind: NegativeKind,
}

impl NegativeStrategy {
    pub fn new(level: NegativeLevel, kind: NegativeKind) -> Result<Self> {
        if valid_combo(level, kind) {
            Ok(Self { level, kind })
        } else {
            Err(Error::Config(format!(
                "'{}' is not a valid {:?}-level strategy",
                kind.name(),
                level
            )))
        }
    }
}

/// One strategy per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySet {
    pub video: NegativeKind,
    pub clip: NegativeKind,
    pub object: NegativeKind,
}

impl Default for StrategySet {
    /// The main configuration: batch-sampled video negatives, event-
    /// complement clips, masked key objects.
    fn default() -> Self {
        Self {
            video: NegativeKind::Randomness,
            clip: NegativeKind::RelevantSegments,
            object: NegativeKind::RoiMask,
        }
    }
}

impl StrategySet {
    pub fn validate(&self) -> Result<()> {
        NegativeStrategy::new(NegativeLevel::Video, self.video)?;
        NegativeStrategy::new(NegativeLevel::Clip, self.clip)?;
        NegativeStrategy::new(NegativeLevel::Object, self.object)?;
        Ok(())
    }
}

// --- the constructors ---------------------------------------------------------

/// Reverses the frame order. A segment `[s, e]` lands on `[T-1-e, T-1-s]`.
/// Applying it twice restores the input bit-exactly.
///
/// Mean pooling is frame-order invariant, so at the video level this
/// strategy always produces a degenerate-contrast warning; temporal order is
/// only visible through clips.
pub fn reverse_frames(video: &SyntheticVideo) -> SyntheticVideo {
    let t = video.frames.len();
    let mut out = video.clone();
    out.frames.reverse();
    for seg in &mut out.segments {
        let (s, e) = (seg.start, seg.end);
        seg.start = t - 1 - e;
        seg.end = t - 1 - s;
    }
    out
}

/// Marks every frame blacked out; the video featurizes to zero.
pub fn blackout(video: &SyntheticVideo) -> SyntheticVideo {
    let mut out = video.clone();
    for f in &mut out.frames {
        f.blacked_out = true;
    }
    out
}

/// Blacks out exactly `ceil(T/2)` frames, chosen by a seeded draw without
/// replacement.
pub fn random_frame_mask(video: &SyntheticVideo, seed: u64) -> Result<SyntheticVideo> {
    let t = video.frames.len();
    if t < 2 {
        return Err(Error::InvalidInput(
            "frame masking needs at least two frames".into(),
        ));
    }
    let k = t.div_ceil(2);
    let mut rng = rng_from(seed);
    let mut positions: Vec<usize> = (0..t).collect();
    positions.shuffle(&mut rng);
    let mut out = video.clone();
    for &p in positions.iter().take(k) {
        out.frames[p].blacked_out = true;
    }
    Ok(out)
}

/// A different video drawn uniformly from the batch; never the element at
/// `self_index`.
pub fn sample_batch_negative(
    batch: &[SyntheticVideo],
    self_index: usize,
    seed: u64,
) -> Result<SyntheticVideo> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput(
            "batch negatives need a batch of at least two videos".into(),
        ));
    }
    if self_index >= batch.len() {
        return Err(Error::InvalidInput(format!(
            "self index {self_index} outside batch of {}",
            batch.len()
        )));
    }
    let mut rng = rng_from(seed);
    let j = rng.random_range(0..batch.len() - 1);
    let pick = if j >= self_index { j + 1 } else { j };
    Ok(batch[pick].clone())
}

/// Batch negative that is unrelated to the record's query: none of the
/// chosen answer's tokens may appear among the candidate's object classes or
/// event tokens. Rejection-samples up to a bounded number of seeded draws
/// and falls back to any other video when the pool is too related.
fn sample_unrelated_batch_negative(
    batch: &[SyntheticVideo],
    self_index: usize,
    chosen_tokens: &[u32],
    seed: u64,
) -> Result<SyntheticVideo> {
    for attempt in 0..32u64 {
        let candidate =
            sample_batch_negative(batch, self_index, derive_seed(seed, 0x0BAD, attempt))?;
        let related = candidate.frames.iter().any(|f| {
            f.objects.iter().any(|o| {
                chosen_tokens.contains(&o.class_token)
                    || o.attribute_tokens.iter().any(|a| chosen_tokens.contains(a))
            })
        }) || candidate
            .segments
            .iter()
            .any(|s| chosen_tokens.contains(&s.event_token));
        if !related {
            return Ok(candidate);
        }
    }
    sample_batch_negative(batch, self_index, derive_seed(seed, 0x0BAD, 32))
}

/// The frames where the event does not occur, order preserved.
pub fn relevant_complement_segments(
    video: &SyntheticVideo,
    segment: &EventSegment,
) -> Result<SyntheticVideo> {
    let t = video.frames.len();
    if segment.start > segment.end || segment.end >= t {
        return Err(Error::InvalidInput(format!(
            "segment [{}, {}] out of range",
            segment.start, segment.end
        )));
    }
    if segment.start == 0 && segment.end == t - 1 {
        return Err(Error::InvalidInput(
            "event segment covers the whole video; no complement exists".into(),
        ));
    }
    let keep: Vec<usize> = (0..t)
        .filter(|p| *p < segment.start || *p > segment.end)
        .collect();
    let frames: Vec<_> = keep.iter().map(|&p| video.frames[p].clone()).collect();
    // Remap surviving segment spans onto the concatenated positions.
    let mut segments = Vec::new();
    for s in &video.segments {
        let positions: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= s.start && p <= s.end)
            .map(|(new_pos, _)| new_pos)
            .collect();
        if let (Some(&lo), Some(&hi)) = (positions.first(), positions.last()) {
            segments.push(EventSegment {
                start: lo,
                end: hi,
                event_token: s.event_token,
            });
        }
    }
    SyntheticVideo::from_frames(
        format!(
            "{}/complement[{},{}]",
            video.video_id, segment.start, segment.end
        ),
        frames,
        segments,
    )
}

/// Removes one object from the (single-frame) keyframe video.
pub fn roi_mask(keyframe_video: &SyntheticVideo, object_id: u32) -> Result<SyntheticVideo> {
    let mut out = keyframe_video.clone();
    let mut removed = 0usize;
    for f in &mut out.frames {
        let before = f.objects.len();
        f.objects.retain(|o| o.object_id != object_id);
        removed += before - f.objects.len();
    }
    if removed == 0 {
        return Err(Error::InvalidInput(format!(
            "object {object_id} not present in {}",
            keyframe_video.video_id
        )));
    }
    out.video_id = format!("{}/roi_mask[{object_id}]", keyframe_video.video_id);
    Ok(out)
}

/// Moves one object to a seeded position whose grid cell differs from the
/// original, disrupting its spatial relationships while keeping it visible.
pub fn roi_move(
    keyframe_video: &SyntheticVideo,
    object_id: u32,
    seed: u64,
) -> Result<SyntheticVideo> {
    use crate::video::POSITION_BINS;
    let n_bins = POSITION_BINS * POSITION_BINS;
    if n_bins < 2 {
        return Err(Error::Constraint(
            "position binning is degenerate; no alternative cell exists".into(),
        ));
    }
    let mut out = keyframe_video.clone();
    let mut rng = rng_from(seed);
    let mut moved = false;
    for f in &mut out.frames {
        for obj in &mut f.objects {
            if obj.object_id != object_id {
                continue;
            }
            let old_bin = bbox_bin(&obj.bbox);
            let pick = rng.random_range(0..n_bins - 1);
            let new_bin = if pick >= old_bin { pick + 1 } else { pick };
            let (bx, by) = (new_bin % POSITION_BINS, new_bin / POSITION_BINS);
            let cell = 1.0 / POSITION_BINS as f64;
            // Size that always fits inside one cell keeps the center's bin
            // equal to the drawn bin.
            let w = obj.bbox.w.min(cell * 0.8);
            let h = obj.bbox.h.min(cell * 0.8);
            let cx = (bx as f64 + 0.5) * cell;
            let cy = (by as f64 + 0.5) * cell;
            obj.bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)?;
            debug_assert_eq!(bbox_bin(&obj.bbox), new_bin);
            moved = true;
        }
    }
    if !moved {
        return Err(Error::InvalidInput(format!(
            "object {object_id} not present in {}",
            keyframe_video.video_id
        )));
    }
    out.video_id = format!("{}/roi_move[{object_id}]", keyframe_video.video_id);
    Ok(out)
}

// --- record assembly ------------------------------------------------------------

// Pooled features equal up to summation-order rounding. Real contrasts sit
// orders of magnitude above this; reversal only reassociates the mean.
fn pooled_equal(a: &SyntheticVideo, b: &SyntheticVideo) -> bool {
    let fa = featurize_video(a).pooled;
    let fb = featurize_video(b).pooled;
    fa.iter().zip(&fb).all(|(x, y)| (x - y).abs() <= 1e-9)
}

fn resolve_key_object(
    video: &SyntheticVideo,
    annotation: &AnnotationRecord,
    table: &TokenTable,
) -> Result<(usize, u32)> {
    let kf = annotation
        .keyframes
        .first()
        .ok_or_else(|| Error::InvalidInput("annotation has no keyframes".into()))?;
    let position = video
        .frames
        .iter()
        .position(|f| f.index == kf.frame_idx)
        .ok_or_else(|| Error::InvalidInput(format!("keyframe {} not in video", kf.frame_idx)))?;
    let label = &kf
        .objects
        .first()
        .ok_or_else(|| Error::InvalidInput("keyframe annotates no objects".into()))?
        .label;
    let class = table
        .id(label)
        .ok_or_else(|| Error::InvalidInput(format!("key object label '{label}' not in lexicon")))?;
    let object_id = video.frames[position]
        .objects
        .iter()
        .find(|o| o.class_token == class)
        .map(|o| o.object_id)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "no object of class '{label}' in keyframe {}",
                kf.frame_idx
            ))
        })?;
    Ok((position, object_id))
}

/// Builds the full preference record: tokenized texts plus chosen/rejected
/// visual pairs at all three levels.
///
/// `pool`/`self_index` supply candidates for `randomness` strategies; the
/// pool may be empty when no strategy needs it.
pub fn make_preference_record(
    video: &SyntheticVideo,
    annotation: &AnnotationRecord,
    table: &TokenTable,
    strategies: &StrategySet,
    seed: u64,
    pool: &[SyntheticVideo],
    self_index: usize,
) -> Result<PreferenceRecord> {
    strategies.validate()?;
    let (prompt, chosen, rejected_relevant, rejected_irrelevant) =
        tokenize_annotation(annotation, table)?;

    let seg_ann = annotation
        .segments
        .first()
        .ok_or_else(|| Error::InvalidInput("annotation has no event segment".into()))?;
    let event_segment = EventSegment {
        start: seg_ann.start,
        end: seg_ann.end,
        event_token: table.id(&seg_ann.label).unwrap_or(crate::lexicon::UNK_ID),
    };
    let (keyframe_index, key_object_id) = resolve_key_object(video, annotation, table)?;

    // Video level.
    let v_w_video = video.clone();
    let v_l_video = match strategies.video {
        NegativeKind::Randomness => sample_unrelated_batch_negative(
            pool,
            self_index,
            chosen.tokens(),
            derive_seed(seed, 1, 0),
        )?,
        NegativeKind::Blackness => blackout(video),
        NegativeKind::Reverse => reverse_frames(video),
        NegativeKind::RandomMask => random_frame_mask(video, derive_seed(seed, 1, 1))?,
        other => {
            return Err(Error::Config(format!(
                "'{}' is not a video-level strategy",
                other.name()
            )))
        }
    };

    // Clip level: the chosen sample is the event clip.
    let v_w_clip = extract_clip(video, &event_segment)?;
    let v_l_clip = match strategies.clip {
        NegativeKind::RelevantSegments => relevant_complement_segments(video, &event_segment)?,
        NegativeKind::Randomness => {
            let other = sample_batch_negative(pool, self_index, derive_seed(seed, 2, 0))?;
            match other.segments.first().copied() {
                Some(seg) => extract_clip(&other, &seg)?,
                None => other,
            }
        }
        NegativeKind::Blackness => blackout(&v_w_clip),
        NegativeKind::Reverse => reverse_frames(&v_w_clip),
        NegativeKind::RandomMask => random_frame_mask(&v_w_clip, derive_seed(seed, 2, 1))?,
        other => {
            return Err(Error::Config(format!(
                "'{}' is not a clip-level strategy",
                other.name()
            )))
        }
    };

    // Object level: the chosen sample is the annotated keyframe.
    let v_w_frame = extract_keyframe(video, keyframe_index)?;
    let v_l_frame = match strategies.object {
        NegativeKind::RoiMask => roi_mask(&v_w_frame, key_object_id)?,
        NegativeKind::RoiMove => roi_move(&v_w_frame, key_object_id, derive_seed(seed, 3, 0))?,
        NegativeKind::Blackness => blackout(&v_w_frame),
        NegativeKind::Randomness => {
            let other = sample_batch_negative(pool, self_index, derive_seed(seed, 3, 1))?;
            let mid = other.frames.len() / 2;
            extract_keyframe(&other, mid)?
        }
        other => {
            return Err(Error::Config(format!(
                "'{}' is not an object-level strategy",
                other.name()
            )))
        }
    };

    let mut warnings = Vec::new();
    for (level, w, l) in [
        ("video", &v_w_video, &v_l_video),
        ("clip", &v_w_clip, &v_l_clip),
        ("object", &v_w_frame, &v_l_frame),
    ] {
        if pooled_equal(w, l) {
            warnings.push(format!(
                "degenerate contrast at {level} level: rejected sample featurizes identically"
            ));
        }
    }

    Ok(PreferenceRecord {
        source_id: annotation.video_id.clone(),
        category: annotation.category,
        strategies: *strategies,
        warnings,
        prompt,
        chosen,
        rejected_relevant,
        rejected_irrelevant,
        video_pair: VisualPair {
            chosen: v_w_video,
            rejected: v_l_video,
        },
        clip_pair: VisualPair {
            chosen: v_w_clip,
            rejected: v_l_clip,
        },
        frame_pair: VisualPair {
            chosen: v_w_frame,
            rejected: v_l_frame,
        },
        event_segment: (event_segment.start, event_segment.end),
        keyframe_index,
        key_object_id,
    })
}
