//! Synthetic benchmark generator: each record is a video with one annotated
//! ground-truth event plus distractors, a question, the correct answer, a
//! plausible-but-wrong answer (single-token edit of the correct one), and an
//! unrelated answer naming an object absent from the video.
//!
//! Nouns and verbs in the answers are the same tokens that appear as object
//! classes and action attributes in the frames, so every answer is grounded
//! in the features and preference separation is learnable by construction.
//!
//! One deliberate exception: `Sequence` records pair two equal-length events
//! on the same actor and both orderings occur across the corpus. Because
//! pooled features are frame-order invariant, those records cannot be
//! separated from the whole-video feature alone; distinguishing them requires
//! clip-level alignment. Use perception-style categories when a fully
//! separable corpus is needed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    AnnotationRecord, HallucinationCategory, KeyframeAnnotation, KeyframeObject, SegmentAnnotation,
};
use crate::error::{Error, Result};
use crate::lexicon::{TokenTable, COLOR_WORDS, COUNT_WORDS, NOUN_WORDS, SPEED_WORDS, VERB_WORDS};
use crate::rng::{derive_seed, rng_from};
use crate::video::{BBox, EventSegment, Frame, SceneObject, SyntheticVideo};

/// How many records to generate per category, and how long the videos are.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub counts: BTreeMap<HallucinationCategory, usize>,
    pub frames_per_video: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            frames_per_video: 6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_video < 4 || !self.frames_per_video.is_multiple_of(2) {
            return Err(Error::Config(
                "frames_per_video must be an even number of at least 4".into(),
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

struct Draft {
    actor: &'static str,
    distractor: &'static str,
    partner: &'static str,
    absent: &'static str,
    verb: &'static str,
    wrong_verb: &'static str,
    distractor_verb: &'static str,
    absent_verb: &'static str,
    color: &'static str,
    wrong_color: &'static str,
    speed: &'static str,
    wrong_speed: &'static str,
}

fn draw_draft(rng: &mut ChaCha8Rng) -> Draft {
    let mut nouns: Vec<&'static str> = NOUN_WORDS.to_vec();
    nouns.shuffle(rng);
    let mut verbs: Vec<&'static str> = VERB_WORDS.to_vec();
    verbs.shuffle(rng);
    let mut colors: Vec<&'static str> = COLOR_WORDS.to_vec();
    colors.shuffle(rng);
    let mut speeds: Vec<&'static str> = SPEED_WORDS.to_vec();
    speeds.shuffle(rng);
    Draft {
        actor: nouns[0],
        distractor: nouns[1],
        partner: nouns[2],
        absent: nouns[3],
        verb: verbs[0],
        wrong_verb: verbs[1],
        distractor_verb: verbs[2],
        absent_verb: verbs[3],
        color: colors[0],
        wrong_color: colors[1],
        speed: speeds[0],
        wrong_speed: speeds[1],
    }
}

/// Where to place an object's center horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placement {
    Anywhere,
    /// Outermost grid column of the given side; makes side-of-frame maximally
    /// visible in the position features.
    OuterSide {
        left: bool,
    },
    /// Inner grid column of the given side.
    InnerSide {
        left: bool,
    },
}

fn draw_bbox(rng: &mut ChaCha8Rng, placement: Placement) -> BBox {
    let w = rng.random_range(0.08..0.18);
    let h = rng.random_range(0.08..0.18);
    let (lo, hi) = match placement {
        Placement::Anywhere => (0.01 + w / 2.0, 0.99 - w / 2.0),
        Placement::OuterSide { left: true } => (0.01 + w / 2.0, 0.24),
        Placement::InnerSide { left: true } => (0.26, 0.49),
        Placement::InnerSide { left: false } => (0.51, 0.74),
        Placement::OuterSide { left: false } => (0.76, 0.99 - w / 2.0),
    };
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(h / 2.0 + 0.01..0.99 - h / 2.0);
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).expect("generated bbox is valid")
}

struct BuiltVideo {
    video: SyntheticVideo,
    keyframe_idx: usize,
    key_label: String,
    key_bbox: BBox,
    segments: Vec<SegmentAnnotation>,
    extra_keyframe_objects: Vec<KeyframeObject>,
}

/// Lays out a single-event video: the actor (with its color and, inside the
/// event segment, the action verb as attributes) plus a distractor object
/// doing something else in the complement frames.
#[allow(clippy::too_many_arguments)]
fn build_event_video(
    table: &TokenTable,
    rng: &mut ChaCha8Rng,
    video_id: String,
    frames: usize,
    draft: &Draft,
    actor_bbox: BBox,
    n_actor_instances: usize,
    partner_in_event: Option<BBox>,
    extra_actor_attrs: &[&str],
    color_on_actor: bool,
    verb_on_actor: bool,
) -> BuiltVideo {
    // Long event segments keep the action's features dominant in the pooled
    // mean; the complement still has at least two frames for clip negatives.
    let seg_len = frames - 2;
    let seg_start = rng.random_range(0..=frames - seg_len - 1);
    let seg_end = seg_start + seg_len - 1;

    let actor_class = table.id_of(draft.actor);
    let distractor_class = table.id_of(draft.distractor);
    let partner_class = table.id_of(draft.partner);
    let verb_attr = table.id_of(draft.verb);
    let distractor_verb_attr = table.id_of(draft.distractor_verb);

    // Keep the per-video symbol load low: every attribute vector in the
    // pooled feature is crosstalk for all the others, so the actor carries
    // only the marks the question can ask about; bystanders are bare class
    // + position.
    let mut actor_attrs = Vec::new();
    if verb_on_actor {
        actor_attrs.push(verb_attr);
    }
    if color_on_actor {
        actor_attrs.push(table.id_of(draft.color));
    }
    for a in extra_actor_attrs {
        actor_attrs.push(table.id_of(a));
    }

    let instance_bboxes: Vec<BBox> = (0..n_actor_instances)
        .map(|k| {
            if k == 0 {
                actor_bbox
            } else {
                draw_bbox(rng, Placement::Anywhere)
            }
        })
        .collect();
    let distractor_bbox = draw_bbox(rng, Placement::Anywhere);

    let mut fs = Vec::with_capacity(frames);
    for i in 0..frames {
        let mut objects = Vec::new();
        if i >= seg_start && i <= seg_end {
            for (k, bb) in instance_bboxes.iter().enumerate() {
                let attrs = if k == 0 {
                    actor_attrs.clone()
                } else {
                    Vec::new()
                };
                objects.push(SceneObject {
                    object_id: k as u32,
                    class_token: actor_class,
                    attribute_tokens: attrs,
                    bbox: *bb,
                });
            }
            if let Some(pb) = partner_in_event {
                objects.push(SceneObject {
                    object_id: 100,
                    class_token: partner_class,
                    attribute_tokens: Vec::new(),
                    bbox: pb,
                });
            }
        } else if objects.is_empty()
            && fs
                .iter()
                .all(|f: &Frame| f.objects.iter().all(|o| o.object_id != 200))
        {
            // The bystander shows up in a single complement frame: enough to
            // exist (and to serve as a plausible wrong answer) without
            // drowning the event's features in the pooled mean.
            objects.push(SceneObject {
                object_id: 200,
                class_token: distractor_class,
                attribute_tokens: Vec::new(),
                bbox: distractor_bbox,
            });
        }
        fs.push(Frame {
            index: i,
            objects,
            blacked_out: false,
        });
    }

    let mut segments = vec![EventSegment {
        start: seg_start,
        end: seg_end,
        event_token: verb_attr,
    }];
    // Distractor event over the longest complement run.
    let tail_len = frames - 1 - seg_end;
    let head_len = seg_start;
    if tail_len >= head_len && tail_len > 0 {
        segments.push(EventSegment {
            start: seg_end + 1,
            end: frames - 1,
            event_token: distractor_verb_attr,
        });
    } else if head_len > 0 {
        segments.push(EventSegment {
            start: 0,
            end: seg_start - 1,
            event_token: distractor_verb_attr,
        });
    }

    let keyframe_idx = (seg_start + seg_end) / 2;
    let seg_annotations = segments
        .iter()
        .enumerate()
        .map(|(i, s)| SegmentAnnotation {
            start: s.start,
            end: s.end,
            label: if i == 0 {
                draft.verb.to_string()
            } else {
                draft.distractor_verb.to_string()
            },
        })
        .collect();

    let extra_keyframe_objects = partner_in_event
        .map(|pb| {
            vec![KeyframeObject {
                label: draft.partner.to_string(),
                bbox: pb,
            }]
        })
        .unwrap_or_default();

    let video = SyntheticVideo::new(video_id, fs, segments).expect("generated video is valid");
    BuiltVideo {
        video,
        keyframe_idx,
        key_label: draft.actor.to_string(),
        key_bbox: actor_bbox,
        segments: seg_annotations,
        extra_keyframe_objects,
    }
}

/// Generates `config.total()` (video, annotation) pairs. Deterministic in the
/// seed; records are emitted in category order.
pub fn generate_world(
    config: &WorldConfig,
    seed: u64,
) -> Result<Vec<(SyntheticVideo, AnnotationRecord)>> {
    config.validate()?;
    let table = TokenTable::world();
    let mut out = Vec::with_capacity(config.total());
    let mut rid: u64 = 0;
    for (&category, &count) in &config.counts {
        for _ in 0..count {
            let mut rng = rng_from(derive_seed(seed, 0xD0_07, rid));
            let video_id = format!("vid-{seed}-{rid:05}");
            out.push(gen_record(
                &table,
                &mut rng,
                category,
                video_id,
                config.frames_per_video,
            ));
            rid += 1;
        }
    }
    Ok(out)
}

fn gen_record(
    table: &TokenTable,
    rng: &mut ChaCha8Rng,
    category: HallucinationCategory,
    video_id: String,
    frames: usize,
) -> (SyntheticVideo, AnnotationRecord) {
    use HallucinationCategory as Cat;
    let draft = draw_draft(rng);

    match category {
        Cat::Sequence => {
            let irrelevant = format!("the {} {}", draft.absent, draft.absent_verb);
            gen_sequence_record(table, rng, &draft, video_id, frames, irrelevant)
        }
        _ => {
            let mut draft = draft;
            if category == Cat::Number {
                // Counting reads the magnitude of the class feature, so the
                // actor must sit on the positive side of its antipodal pair.
                let positive = |w: &str| {
                    NOUN_WORDS
                        .iter()
                        .position(|n| *n == w)
                        .is_some_and(|i| i % 2 == 0)
                };
                if !positive(draft.actor) {
                    if positive(draft.distractor) {
                        std::mem::swap(&mut draft.actor, &mut draft.distractor);
                    } else if positive(draft.partner) {
                        std::mem::swap(&mut draft.actor, &mut draft.partner);
                    } else if positive(draft.absent) {
                        std::mem::swap(&mut draft.actor, &mut draft.absent);
                    } else {
                        // All four draws were negative-parity; the first noun
                        // is positive and cannot collide with any of them.
                        draft.actor = NOUN_WORDS[0];
                    }
                }
            }
            let draft = &draft;
            let irrelevant = format!("the {} {}", draft.absent, draft.absent_verb);

            let actor_side_left = rng.random_bool(0.5);
            // Side questions place the actor in the outermost column so the
            // signed position level is unambiguous; the partner sits on the
            // inner opposite column.
            let actor_placement = match category {
                Cat::Location | Cat::StaticRelation => Placement::OuterSide {
                    left: actor_side_left,
                },
                _ => Placement::Anywhere,
            };
            let actor_bbox = draw_bbox(rng, actor_placement);
            let location = if actor_side_left { "left" } else { "right" };
            let wrong_location = if actor_side_left { "right" } else { "left" };

            let n_instances = if category == Cat::Number {
                rng.random_range(1..=4usize)
            } else {
                1
            };
            // Clearly-wrong counts: at least two off, so the wrong answer is
            // never a near-miss of the amplitude readout.
            let wrong_count = {
                let mut c = rng.random_range(1..=4usize);
                while c.abs_diff(n_instances) < 2 {
                    c = rng.random_range(1..=4usize);
                }
                c
            };

            // Partner placement for relation categories: same frame as the
            // actor, on the opposite side.
            let partner_in_event = matches!(category, Cat::StaticRelation | Cat::DynamicRelation)
                .then(|| {
                    draw_bbox(
                        rng,
                        Placement::InnerSide {
                            left: !actor_side_left,
                        },
                    )
                });

            let extra_attrs: Vec<&str> = match category {
                Cat::DynamicAttribute => vec![draft.speed],
                Cat::OCR => vec![],
                _ => vec![],
            };
            let color_on_actor = matches!(category, Cat::Color);
            let verb_on_actor = matches!(category, Cat::Action | Cat::DynamicAttribute);

            let mut built = build_event_video(
                table,
                rng,
                video_id.clone(),
                frames,
                draft,
                actor_bbox,
                n_instances,
                partner_in_event,
                &extra_attrs,
                color_on_actor,
                verb_on_actor,
            );

            // OCR swaps the actor for a sign whose "text" is a color word.
            if category == Cat::OCR {
                let sign_class = table.id_of("sign");
                let text_attr = table.id_of(draft.color);
                for f in &mut built.video.frames {
                    for o in &mut f.objects {
                        if o.object_id == 0 {
                            o.class_token = sign_class;
                            o.attribute_tokens = vec![text_attr];
                        }
                    }
                }
                built.key_label = "sign".to_string();
            }

            let a = draft.actor;
            let (question, chosen, rejected) = match category {
                Cat::Object => (
                    format!("who does {}", draft.verb),
                    format!("the {a} {}", draft.verb),
                    format!("the {} {}", draft.distractor, draft.verb),
                ),
                Cat::Number => (
                    format!("how many {a}"),
                    format!("{} {a}", COUNT_WORDS[n_instances - 1]),
                    format!("{} {a}", COUNT_WORDS[wrong_count - 1]),
                ),
                Cat::Location => (
                    format!("where is the {a}"),
                    format!("at the {location}"),
                    format!("at the {wrong_location}"),
                ),
                Cat::Color => (
                    format!("what color is the {a}"),
                    format!("the {} {a}", draft.color),
                    format!("the {} {a}", draft.wrong_color),
                ),
                Cat::StaticRelation => (
                    format!("where is the {a} near the {}", draft.partner),
                    format!("the {a} is {location} at the {}", draft.partner),
                    format!("the {a} is {wrong_location} at the {}", draft.partner),
                ),
                Cat::OCR => (
                    "what does the sign reads".to_string(),
                    format!("it reads {}", draft.color),
                    format!("it reads {}", draft.wrong_color),
                ),
                Cat::Action => (
                    format!("what does the {a} does"),
                    format!("the {a} {}", draft.verb),
                    format!("the {a} {}", draft.wrong_verb),
                ),
                Cat::DynamicAttribute => (
                    format!("how does the {a} {}", draft.verb),
                    format!("the {a} {} {}", draft.verb, draft.speed),
                    format!("the {a} {} {}", draft.verb, draft.wrong_speed),
                ),
                Cat::DynamicRelation => (
                    format!("who is with the {a}"),
                    format!("the {} is with the {a}", draft.partner),
                    format!("the {} is with the {a}", draft.distractor),
                ),
                Cat::Sequence => unreachable!(),
            };

            let mut keyframe_objects = vec![KeyframeObject {
                label: built.key_label.clone(),
                bbox: built.key_bbox,
            }];
            keyframe_objects.extend(built.extra_keyframe_objects.clone());

            let annotation = AnnotationRecord {
                video_id,
                category,
                question,
                chosen,
                rejected_relevant: rejected,
                rejected_irrelevant: irrelevant,
                keyframes: vec![KeyframeAnnotation {
                    frame_idx: built.keyframe_idx,
                    objects: keyframe_objects,
                }],
                segments: built.segments.clone(),
            };
            (built.video, annotation)
        }
    }
}

/// Two equal-length events on the same actor, first one verb then another.
/// The mirror-symmetric layout means reversing the frames exchanges which
/// verb occupies the leading window.
fn gen_sequence_record(
    table: &TokenTable,
    rng: &mut ChaCha8Rng,
    draft: &Draft,
    video_id: String,
    frames: usize,
    irrelevant: String,
) -> (SyntheticVideo, AnnotationRecord) {
    let half = frames / 2;
    let actor_class = table.id_of(draft.actor);
    let first_verb = table.id_of(draft.verb);
    let second_verb = table.id_of(draft.wrong_verb);
    let bbox = draw_bbox(rng, Placement::Anywhere);

    let fs: Vec<Frame> = (0..frames)
        .map(|i| {
            let verb = if i < half { first_verb } else { second_verb };
            Frame {
                index: i,
                objects: vec![SceneObject {
                    object_id: 0,
                    class_token: actor_class,
                    attribute_tokens: vec![verb],
                    bbox,
                }],
                blacked_out: false,
            }
        })
        .collect();
    let segments = vec![
        EventSegment {
            start: 0,
            end: half - 1,
            event_token: first_verb,
        },
        EventSegment {
            start: half,
            end: frames - 1,
            event_token: second_verb,
        },
    ];
    let video = SyntheticVideo::new(video_id.clone(), fs, segments).expect("valid sequence video");

    let a = draft.actor;
    let annotation = AnnotationRecord {
        video_id,
        category: HallucinationCategory::Sequence,
        question: format!("what does the {a} does first"),
        chosen: format!("the {a} {} first", draft.verb),
        rejected_relevant: format!("the {a} {} first", draft.wrong_verb),
        rejected_irrelevant: irrelevant,
        keyframes: vec![KeyframeAnnotation {
            frame_idx: (half - 1) / 2,
            objects: vec![KeyframeObject {
                label: a.to_string(),
                bbox,
            }],
        }],
        segments: vec![
            SegmentAnnotation {
                start: 0,
                end: half - 1,
                label: draft.verb.to_string(),
            },
            SegmentAnnotation {
                start: half,
                end: frames - 1,
                label: draft.wrong_verb.to_string(),
            },
        ],
    };
    (video, annotation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_record;
    use crate::policy::Role;

    fn config(pairs: &[(HallucinationCategory, usize)]) -> WorldConfig {
        WorldConfig {
            counts: pairs.iter().cloned().collect(),
            frames_per_video: 6,
        }
    }

    #[test]
    fn empty_config_gives_empty_world() {
        let world = generate_world(&WorldConfig::default(), 1).unwrap();
        assert!(world.is_empty());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = config(&[
            (HallucinationCategory::Object, 4),
            (HallucinationCategory::Sequence, 3),
        ]);
        let a = generate_world(&cfg, 99).unwrap();
        let b = generate_world(&cfg, 99).unwrap();
        assert_eq!(a.len(), 7);
        for ((va, ra), (vb, rb)) in a.iter().zip(&b) {
            assert_eq!(va, vb);
            assert_eq!(ra, rb);
        }
        let c = generate_world(&cfg, 100).unwrap();
        assert_ne!(a[0].1.question, c[0].1.question);
    }

    #[test]
    fn every_category_generates_valid_records() {
        let table = TokenTable::world();
        let pairs: Vec<(HallucinationCategory, usize)> =
            HallucinationCategory::ALL.iter().map(|&c| (c, 2)).collect();
        let world = generate_world(&config(&pairs), 31).unwrap();
        assert_eq!(world.len(), 20);
        for (video, rec) in &world {
            let report = validate_record(rec, video, &table);
            assert!(
                report.is_clean(),
                "{} [{:?}]: {:?}",
                rec.video_id,
                rec.category,
                report.violations
            );
            // All texts tokenize without falling back to unk.
            for (text, role) in [
                (&rec.question, Role::Prompt),
                (&rec.chosen, Role::Response),
                (&rec.rejected_relevant, Role::Response),
                (&rec.rejected_irrelevant, Role::Response),
            ] {
                let seq = table.tokenize(text, role).unwrap();
                assert!(
                    !seq.tokens().contains(&crate::lexicon::UNK_ID),
                    "'{text}' hit the unk token"
                );
            }
        }
    }

    #[test]
    fn chosen_and_relevant_rejection_differ_in_exactly_one_word() {
        let pairs: Vec<(HallucinationCategory, usize)> =
            HallucinationCategory::ALL.iter().map(|&c| (c, 3)).collect();
        let world = generate_world(&config(&pairs), 8).unwrap();
        for (_, rec) in &world {
            let c: Vec<&str> = rec.chosen.split_whitespace().collect();
            let r: Vec<&str> = rec.rejected_relevant.split_whitespace().collect();
            assert_eq!(c.len(), r.len(), "{}", rec.video_id);
            let diffs = c.iter().zip(&r).filter(|(a, b)| a != b).count();
            assert_eq!(
                diffs, 1,
                "{}: '{}' vs '{}'",
                rec.video_id, rec.chosen, rec.rejected_relevant
            );
        }
    }

    #[test]
    fn irrelevant_object_is_absent_from_frames() {
        let table = TokenTable::world();
        let pairs: Vec<(HallucinationCategory, usize)> =
            HallucinationCategory::ALL.iter().map(|&c| (c, 2)).collect();
        let world = generate_world(&config(&pairs), 13).unwrap();
        for (video, rec) in &world {
            let classes: std::collections::BTreeSet<u32> = video
                .frames
                .iter()
                .flat_map(|f| f.objects.iter().map(|o| o.class_token))
                .collect();
            for word in rec.rejected_irrelevant.split_whitespace() {
                if NOUN_WORDS.contains(&word) {
                    let id = table.id_of(word);
                    assert!(!classes.contains(&id), "{}: '{word}' appears", rec.video_id);
                }
            }
        }
    }

    #[test]
    fn sequence_records_are_mirror_symmetric() {
        let world = generate_world(&config(&[(HallucinationCategory::Sequence, 5)]), 3).unwrap();
        for (video, rec) in &world {
            assert_eq!(rec.segments.len(), 2);
            let t = video.frames.len();
            let (s0, s1) = (&rec.segments[0], &rec.segments[1]);
            assert_eq!(s0.end - s0.start, s1.end - s1.start);
            assert_eq!(s0.start, 0);
            assert_eq!(s1.end, t - 1);
            assert_eq!(s1.start, s0.end + 1);
        }
    }

    #[test]
    fn odd_frame_count_is_rejected() {
        let cfg = WorldConfig {
            counts: BTreeMap::new(),
            frames_per_video: 5,
        };
        assert!(generate_world(&cfg, 0).is_err());
    }
}
