//! Symbolic synthetic videos: frames hold scene objects with class and
//! attribute tokens plus a bounding box, and event segments mark where things
//! happen. Featurization is deterministic, so every loss term and negative
//! construction is exactly checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the visual feature vectors (the policy's `d_v`).
pub const FEATURE_DIM: usize = 16;

/// Bounding boxes are quantized on a `POSITION_BINS x POSITION_BINS` grid of
/// their centers before embedding.
pub const POSITION_BINS: usize = 4;

/// Normalized bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0
            && self.y + self.h <= 1.0
            && [self.x, self.y, self.w, self.h]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "bbox [{}, {}, {}, {}] violates the unit-square constraints",
                self.x, self.y, self.w, self.h
            )))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

// Serialized as the 4-element array [x, y, w, h].
impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.x, self.y, self.w, self.h].serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(Self { x, y, w, h })
    }
}

/// One object in a frame. The class token ties the object to a word in the
/// lexicon; attribute tokens carry color, action state, and similar marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: u32,
    pub class_token: u32,
    pub attribute_tokens: Vec<u32>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub objects: Vec<SceneObject>,
    pub blacked_out: bool,
}

/// Contiguous run of frame positions tagged with an event token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSegment {
    pub start: usize,
    pub end: usize,
    pub event_token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub segments: Vec<EventSegment>,
}

impl SyntheticVideo {
    /// Builds a top-level video; at least two frames, unique frame indices,
    /// segments within bounds. Derived clips and keyframes bypass the
    /// two-frame floor via [`SyntheticVideo::from_frames`].
    pub fn new(video_id: String, frames: Vec<Frame>, segments: Vec<EventSegment>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidInput(
                "a synthetic video needs at least two frames".into(),
            ));
        }
        let v = Self::from_frames(video_id, frames, segments)?;
        Ok(v)
    }

    /// Like [`SyntheticVideo::new`] but allows single-frame videos (clip and
    /// keyframe extraction results).
    pub fn from_frames(
        video_id: String,
        frames: Vec<Frame>,
        segments: Vec<EventSegment>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("video with no frames".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &frames {
            if !seen.insert(f.index) {
                return Err(Error::InvalidInput(format!(
                    "duplicate frame index {}",
                    f.index
                )));
            }
            for o in &f.objects {
                o.bbox.validate()?;
            }
        }
        for s in &segments {
            if s.start > s.end || s.end >= frames.len() {
                return Err(Error::InvalidInput(format!(
                    "segment [{}, {}] outside a {}-frame video",
                    s.start,
                    s.end,
                    frames.len()
                )));
            }
        }
        Ok(Self {
            video_id,
            frames,
            segments,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Pooled video feature plus the per-frame vectors it was pooled from.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub pooled: Vec<f64>,
    pub per_frame: Vec<Vec<f64>>,
}

// --- deterministic embeddings ----------------------------------------------
//
// Token vectors live on a seeded orthonormal basis of the feature space,
// with one block of basis columns per symbol family (object classes, action
// verbs, colors, speeds) and one column per bbox axis. Families therefore
// never leak into each other's readout directions, and within a family two
// tokens share a column only as an antipodal (+/-) pair. Position enters as
// signed level coordinates along the axis columns, so side-of-frame is a
// plain sign readout.

const EMBED_SEED: u64 = 0x5EED_FEA7;
const EMBED_SCALE: f64 = 2.5;

// Basis column allocation.
const CLASS_BASE: usize = 0; // 6 columns: 10 nouns + the sign class
const VERB_BASE: usize = 6; // 4 columns: 8 verbs
const COLOR_BASE: usize = 10; // 2 columns: 4 colors
const SPEED_BASE: usize = 12; // 1 column: 2 speeds
const COL_AXIS: usize = 13; // bbox column as a signed level
const ROW_AXIS: usize = 14; // bbox row as a signed level

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

fn unit_from_hash(h: u64) -> f64 {
    // top 53 bits -> [0, 1) -> [-0.5, 0.5)
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn hash_direction(salt: u64, id: u64) -> Vec<f64> {
    (0..FEATURE_DIM)
        .map(|c| {
            unit_from_hash(mix64(
                EMBED_SEED
                    ^ salt.wrapping_mul(0xA24B)
                    ^ id.wrapping_mul(0x9FB2_1C65)
                    ^ ((c as u64) << 17),
            ))
        })
        .collect()
}

/// Seeded orthonormal basis of the feature space: Gram-Schmidt over hash
/// directions, computed once.
fn basis() -> &'static Vec<Vec<f64>> {
    use std::sync::OnceLock;
    static BASIS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(FEATURE_DIM);
        let mut raw_id = 0u64;
        while basis.len() < FEATURE_DIM {
            let mut v = hash_direction(0x0B, raw_id);
            raw_id += 1;
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in &mut v {
                    *x /= norm;
                }
                basis.push(v);
            }
        }
        basis
    })
}

fn basis_vec(column: usize, scale: f64) -> Vec<f64> {
    basis()[column].iter().map(|x| x * scale).collect()
}

/// Embedding of one token: its family's basis column with an antipodal sign
/// for the pair sharing the column; tokens outside the known families fall
/// back to a plain hash direction.
fn token_embed(id: u32) -> Vec<f64> {
    use crate::lexicon::{family_of_token, TokenFamily};
    let (base, idx) = match family_of_token(id) {
        TokenFamily::Noun(i) => (CLASS_BASE, i),
        TokenFamily::Sign => (CLASS_BASE, 10),
        TokenFamily::Verb(i) => (VERB_BASE, i),
        TokenFamily::Color(i) => (COLOR_BASE, i),
        TokenFamily::Speed(i) => (SPEED_BASE, i),
        TokenFamily::Other => {
            return hash_direction(0x7E, id as u64);
        }
    };
    let sign = if idx % 2 == 0 { 1.0 } else { -1.0 };
    basis_vec(base + idx / 2, sign * EMBED_SCALE)
}

/// Fixed seeded deterministic embedding of an object's class and attributes:
/// class vector plus the sum of the attribute vectors.
pub fn hash_embed(class_token: u32, attribute_tokens: &[u32]) -> Vec<f64> {
    let mut v = token_embed(class_token);
    for &a in attribute_tokens {
        for (dst, src) in v.iter_mut().zip(token_embed(a)) {
            *dst += src;
        }
    }
    v
}

/// Grid cell of a bbox center.
pub fn bbox_bin(b: &BBox) -> usize {
    let (cx, cy) = b.center();
    let clamp = |v: f64| ((v * POSITION_BINS as f64) as usize).min(POSITION_BINS - 1);
    clamp(cy) * POSITION_BINS + clamp(cx)
}

/// Embedding of a bbox's grid cell: signed level coordinates along one axis
/// column per dimension, so cells sharing an axis coordinate share that part
/// of the embedding and side-of-frame is a sign readout.
pub fn bbox_bin_embed(b: &BBox) -> Vec<f64> {
    let bin = bbox_bin(b);
    let col = (bin % POSITION_BINS) as f64 - (POSITION_BINS - 1) as f64 / 2.0;
    let row = (bin / POSITION_BINS) as f64 - (POSITION_BINS - 1) as f64 / 2.0;
    let mut v = basis_vec(COL_AXIS, col * EMBED_SCALE);
    for (dst, src) in v.iter_mut().zip(basis_vec(ROW_AXIS, row * EMBED_SCALE)) {
        *dst += src;
    }
    v
}

// --- featurization ----------------------------------------------------------

/// Per-frame feature: zero for blacked-out frames, otherwise the sum over
/// objects of `hash_embed(class, attrs) + bbox_bin_embed(bbox)`.
pub fn featurize_frame(frame: &Frame) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    if frame.blacked_out {
        return v;
    }
    for obj in &frame.objects {
        for (dst, src) in v
            .iter_mut()
            .zip(hash_embed(obj.class_token, &obj.attribute_tokens))
        {
            *dst += src;
        }
        for (dst, src) in v.iter_mut().zip(bbox_bin_embed(&obj.bbox)) {
            *dst += src;
        }
    }
    v
}

/// Pooled feature = mean of the per-frame features. Mean pooling is frame-
/// order invariant on purpose: temporal order is carried by clip selection
/// and clip-level negatives, not by the pooled vector.
pub fn featurize_video(video: &SyntheticVideo) -> VisualFeatures {
    let per_frame: Vec<Vec<f64>> = video.frames.iter().map(featurize_frame).collect();
    let mut pooled = vec![0.0; FEATURE_DIM];
    let scale = 1.0 / per_frame.len() as f64;
    for f in &per_frame {
        for (p, &v) in pooled.iter_mut().zip(f) {
            *p += scale * v;
        }
    }
    VisualFeatures { pooled, per_frame }
}

// --- extraction -------------------------------------------------------------

/// Frames at positions `start..=end`, originals' indices retained. Segments
/// are intersected with the window and shifted to the clip's positions.
pub fn extract_range(video: &SyntheticVideo, start: usize, end: usize) -> Result<SyntheticVideo> {
    if start > end || end >= video.frames.len() {
        return Err(Error::InvalidInput(format!(
            "clip [{start}, {end}] out of range for a {}-frame video",
            video.frames.len()
        )));
    }
    let frames: Vec<Frame> = video.frames[start..=end].to_vec();
    let segments: Vec<EventSegment> = video
        .segments
        .iter()
        .filter_map(|s| {
            let lo = s.start.max(start);
            let hi = s.end.min(end);
            (lo <= hi).then(|| EventSegment {
                start: lo - start,
                end: hi - start,
                event_token: s.event_token,
            })
        })
        .collect();
    SyntheticVideo::from_frames(
        format!("{}/clip[{start},{end}]", video.video_id),
        frames,
        segments,
    )
}

/// Event-segment clip: the preferred temporal sample.
pub fn extract_clip(video: &SyntheticVideo, segment: &EventSegment) -> Result<SyntheticVideo> {
    extract_range(video, segment.start, segment.end)
}

/// Single-frame video at `frame_index` (a position in the frame list).
pub fn extract_keyframe(video: &SyntheticVideo, frame_index: usize) -> Result<SyntheticVideo> {
    if frame_index >= video.frames.len() {
        return Err(Error::InvalidInput(format!(
            "keyframe {frame_index} out of range for a {}-frame video",
            video.frames.len()
        )));
    }
    let frame = video.frames[frame_index].clone();
    SyntheticVideo::from_frames(
        format!("{}/kf[{frame_index}]", video.video_id),
        vec![frame],
        Vec::new(),
    )
}

/// Removes an object from every frame it appears in. Evaluation helper that
/// generalizes single-frame ROI masking to the whole video (the adversarial
/// "evidence never appears" condition).
pub fn remove_object_everywhere(video: &SyntheticVideo, object_id: u32) -> Result<SyntheticVideo> {
    if !video
        .frames
        .iter()
        .any(|f| f.objects.iter().any(|o| o.object_id == object_id))
    {
        return Err(Error::InvalidInput(format!(
            "object {object_id} not present in video {}",
            video.video_id
        )));
    }
    let mut out = video.clone();
    out.video_id = format!("{}/masked[{object_id}]", video.video_id);
    for f in &mut out.frames {
        f.objects.retain(|o| o.object_id != object_id);
    }
    Ok(out)
}
