//! Command-line interface: corpus generation, training, evaluation, gradient
//! checking, negative-sample application, and schema printing.
//!
//! Exit codes: 0 ok, 1 assertion failure, 2 usage error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    self, assemble_corpus, AnnotationRecord, HallucinationCategory, PreferenceRecord,
};
use crate::error::{Error, Result};
use crate::generator::{generate_world, WorldConfig};
use crate::lexicon::TokenTable;
use crate::losses::{LossConfig, LossWeights, RejectedKind};
use crate::negatives::{self, NegativeKind, NegativeLevel, NegativeStrategy, StrategySet};
use crate::oracle;
use crate::policy::{load_params, save_params, PolicyParams};
use crate::rng::derive_seed;
use crate::train::{self, TrainConfig};
use crate::video::{extract_keyframe, extract_range, EventSegment, FEATURE_DIM};

#[derive(Debug, Parser)]
#[command(
    name = "hsdpo",
    version,
    about = "Hierarchical spatial-temporal preference optimization on symbolic synthetic videos"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated corpus (records + videos JSONL).
    GenData(GenDataArgs),
    /// Train the toy policy on a generated corpus.
    Train(TrainArgs),
    /// Evaluate trained parameters: preference accuracy plus the adversarial
    /// suites, emitted as one JSON report.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    CheckGrad(CheckGradArgs),
    /// Apply one negative-sample strategy to a stored video and dump the
    /// result as JSON.
    Negatives(NegativesArgs),
    /// Print the corpus schema.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Category counts, e.g. --counts Action=10,Object=5 (repeatable).
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<String>,
    #[arg(long, default_value_t = 6)]
    pub frames: usize,
    /// Annotation records JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Videos JSONL path (defaults to <out>.videos.jsonl).
    #[arg(long)]
    pub videos: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long, default_value = "randomness")]
    pub video_strategy: String,
    #[arg(long, default_value = "relevant_segments")]
    pub clip_strategy: String,
    #[arg(long, default_value = "roi_mask")]
    pub object_strategy: String,
}

impl StrategyArgs {
    fn parse(&self) -> Result<StrategySet> {
        let set = StrategySet {
            video: self.video_strategy.parse()?,
            clip: self.clip_strategy.parse()?,
            object: self.object_strategy.parse()?,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Videos JSONL (defaults to <corpus>.videos.jsonl).
    #[arg(long)]
    pub videos: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.7)]
    pub beta_re: f64,
    #[arg(long, default_value_t = 0.3)]
    pub beta_ir: f64,
    /// Clip-term weight (0 disables the term).
    #[arg(long, default_value_t = 0.4)]
    pub lambda: f64,
    /// Object-term weight.
    #[arg(long, default_value_t = 0.2)]
    pub mu: f64,
    /// Token-term weight.
    #[arg(long, default_value_t = 0.1)]
    pub rho: f64,
    /// Which rejection conditions the video/token terms: relevant | irrelevant.
    #[arg(long, default_value = "relevant")]
    pub rejected: String,
    #[command(flatten)]
    pub strategies: StrategyArgs,
    /// Where to write trained parameters.
    #[arg(long)]
    pub params_out: PathBuf,
    /// Optional JSONL training log (one loss breakdown per step).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub videos: Option<PathBuf>,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub strategies: StrategyArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[arg(long)]
    pub videos: PathBuf,
    /// Which video in the file to transform.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub level: String,
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Object id for roi strategies (defaults to the first object of the
    /// keyframe).
    #[arg(long)]
    pub object_id: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Print the schema (the only mode).
    #[arg(long, default_value_t = true)]
    pub print: bool,
}

fn parse_counts(specs: &[String]) -> Result<BTreeMap<HallucinationCategory, usize>> {
    let mut counts = BTreeMap::new();
    for spec in specs {
        let (name, n) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidInput(format!("count '{spec}' must look like Category=N"))
        })?;
        let category: HallucinationCategory = name.trim().parse()?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad count in '{spec}': {e}")))?;
        *counts.entry(category).or_insert(0) += n;
    }
    Ok(counts)
}

fn default_videos_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_os_string();
    s.push(".videos.jsonl");
    PathBuf::from(s)
}

fn load_corpus(
    corpus_path: &Path,
    videos_path: Option<&PathBuf>,
    strategies: &StrategySet,
    seed: u64,
) -> Result<Vec<PreferenceRecord>> {
    let records = data::read_jsonl(corpus_path)?;
    let videos_path = videos_path
        .cloned()
        .unwrap_or_else(|| default_videos_path(corpus_path));
    let videos = data::read_videos_jsonl(&videos_path)?;
    let table = TokenTable::world();
    assemble_corpus(&records, &videos, &table, strategies, seed)
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => {
            let counts = parse_counts(&args.counts)?;
            let config = WorldConfig {
                counts,
                frames_per_video: args.frames,
            };
            let world = generate_world(&config, args.seed)?;
            let records: Vec<AnnotationRecord> = world.iter().map(|(_, r)| r.clone()).collect();
            let videos: Vec<_> = world.iter().map(|(v, _)| v.clone()).collect();
            data::write_jsonl(&records, &args.out)?;
            let videos_path = args
                .videos
                .unwrap_or_else(|| default_videos_path(&args.out));
            data::write_videos_jsonl(&videos, &videos_path)?;
            eprintln!(
                "wrote {} records to {} and videos to {}",
                records.len(),
                args.out.display(),
                videos_path.display()
            );
            Ok(0)
        }

        Command::Train(args) => {
            let strategies = args.strategies.parse()?;
            let corpus = load_corpus(&args.corpus, args.videos.as_ref(), &strategies, args.seed)?;
            let weights = LossWeights {
                beta: args.beta,
                beta_re: args.beta_re,
                beta_ir: args.beta_ir,
                lambda_c: args.lambda,
                mu_o: args.mu,
                rho_t: args.rho,
            };
            let rejected = match args.rejected.as_str() {
                "relevant" => RejectedKind::Relevant,
                "irrelevant" => RejectedKind::Irrelevant,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "--rejected must be relevant|irrelevant, got '{other}'"
                    )))
                }
            };
            let cfg = TrainConfig {
                learning_rate: args.lr,
                epochs: args.epochs,
                batch_size: args.batch_size,
                seed: args.seed,
                weights,
                adam: Default::default(),
                loss_config: LossConfig {
                    video_rejected: rejected,
                    token_rejected: rejected,
                },
            };
            let table = TokenTable::world();
            let init = PolicyParams::gaussian(
                table.vocab(),
                args.embed_dim,
                FEATURE_DIM,
                derive_seed(args.seed, 0x1217, 0),
            );
            let out = train::train_loop(&corpus, &init, &cfg)?;
            save_params(&out.params, &args.params_out)?;
            if let Some(log_path) = args.log {
                let mut buf = String::new();
                for entry in &out.log {
                    buf.push_str(&serde_json::to_string(entry).map_err(|e| {
                        Error::InvalidInput(format!("log serialization failed: {e}"))
                    })?);
                    buf.push('\n');
                }
                std::fs::write(&log_path, buf)?;
            }
            eprintln!(
                "trained {} steps over {} records; params -> {}",
                out.log.len(),
                corpus.len(),
                args.params_out.display()
            );
            Ok(0)
        }

        Command::Eval(args) => {
            let strategies = args.strategies.parse()?;
            let corpus = load_corpus(&args.corpus, args.videos.as_ref(), &strategies, args.seed)?;
            let params = load_params(&args.params)?;
            let report = train::evaluate(&params, &corpus)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))?;
            match args.report {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(0)
        }

        Command::CheckGrad(args) => {
            let code = check_grad(args.seed, args.instances, args.epsilon)?;
            Ok(code)
        }

        Command::Negatives(args) => {
            let videos = data::read_videos_jsonl(&args.videos)?;
            let video = videos.get(args.index).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "index {} outside the {} stored videos",
                    args.index,
                    videos.len()
                ))
            })?;
            let level: NegativeLevel = args.level.parse()?;
            let kind: NegativeKind = args.kind.parse()?;
            NegativeStrategy::new(level, kind)?;
            let result = apply_strategy(
                video,
                &videos,
                args.index,
                level,
                kind,
                args.seed,
                args.object_id,
            )?;
            let json = serde_json::to_string(&result)
                .map_err(|e| Error::InvalidInput(format!("serialization failed: {e}")))?;
            match args.out {
                Some(path) => std::fs::write(path, json)?,
                None => println!("{json}"),
            }
            Ok(0)
        }

        Command::Schema(args) => {
            if args.print {
                println!("{}", schema_text());
            }
            Ok(0)
        }
    }
}

fn apply_strategy(
    video: &crate::video::SyntheticVideo,
    pool: &[crate::video::SyntheticVideo],
    self_index: usize,
    level: NegativeLevel,
    kind: NegativeKind,
    seed: u64,
    object_id: Option<u32>,
) -> Result<crate::video::SyntheticVideo> {
    let segment = video.segments.first().copied().unwrap_or(EventSegment {
        start: 0,
        end: video.frames.len() - 1,
        event_token: 0,
    });
    match level {
        NegativeLevel::Video => match kind {
            NegativeKind::Randomness => negatives::sample_batch_negative(pool, self_index, seed),
            NegativeKind::Blackness => Ok(negatives::blackout(video)),
            NegativeKind::Reverse => Ok(negatives::reverse_frames(video)),
            NegativeKind::RandomMask => negatives::random_frame_mask(video, seed),
            _ => unreachable!("combo validated"),
        },
        NegativeLevel::Clip => {
            let clip = extract_range(video, segment.start, segment.end)?;
            match kind {
                NegativeKind::RelevantSegments => {
                    negatives::relevant_complement_segments(video, &segment)
                }
                NegativeKind::Randomness => {
                    let other = negatives::sample_batch_negative(pool, self_index, seed)?;
                    match other.segments.first().copied() {
                        Some(seg) => extract_range(&other, seg.start, seg.end),
                        None => Ok(other),
                    }
                }
                NegativeKind::Blackness => Ok(negatives::blackout(&clip)),
                NegativeKind::Reverse => Ok(negatives::reverse_frames(&clip)),
                NegativeKind::RandomMask => negatives::random_frame_mask(&clip, seed),
                _ => unreachable!("combo validated"),
            }
        }
        NegativeLevel::Object => {
            let mid = (segment.start + segment.end) / 2;
            let keyframe = extract_keyframe(video, mid)?;
            let object_id = object_id
                .or_else(|| keyframe.frames[0].objects.first().map(|o| o.object_id))
                .ok_or_else(|| Error::InvalidInput("keyframe holds no objects".into()))?;
            match kind {
                NegativeKind::RoiMask => negatives::roi_mask(&keyframe, object_id),
                NegativeKind::RoiMove => negatives::roi_move(&keyframe, object_id, seed),
                NegativeKind::Blackness => Ok(negatives::blackout(&keyframe)),
                NegativeKind::Randomness => {
                    let other = negatives::sample_batch_negative(pool, self_index, seed)?;
                    let mid = other.frames.len() / 2;
                    extract_keyframe(&other, mid)
                }
                _ => unreachable!("combo validated"),
            }
        }
    }
}

fn check_grad(seed: u64, instances: usize, epsilon: f64) -> Result<i32> {
    use crate::losses::{chosen_seq_kl, total_loss, total_loss_value_sg_frozen};
    use crate::policy::freeze_reference;

    let table = TokenTable::world();
    let fd_cfg = oracle::FDConfig { epsilon };
    let weights = LossWeights::default();
    let loss_cfg = LossConfig::default();

    let mut counts = BTreeMap::new();
    counts.insert(HallucinationCategory::Action, instances.div_ceil(2));
    counts.insert(HallucinationCategory::Object, instances.div_ceil(2));
    let world = generate_world(
        &WorldConfig {
            counts,
            frames_per_video: 6,
        },
        seed,
    )?;
    let records: Vec<_> = world.iter().map(|(_, r)| r.clone()).collect();
    let videos: Vec<_> = world.iter().map(|(v, _)| v.clone()).collect();
    let corpus = assemble_corpus(&records, &videos, &table, &StrategySet::default(), seed)?;

    let mut block_worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut overall: f64 = 0.0;
    for (i, rec) in corpus.iter().take(instances).enumerate() {
        // Small policies keep the finite-difference sweep quick.
        let vocab = table.vocab();
        let theta =
            PolicyParams::gaussian(vocab, 8, FEATURE_DIM, derive_seed(seed, 0xC4AD, i as u64));
        let reference = freeze_reference(&PolicyParams::gaussian(
            vocab,
            8,
            FEATURE_DIM,
            derive_seed(seed, 0xC4AE, i as u64),
        ));
        let b = total_loss(&theta, &reference, rec, &weights)?;
        let frozen_kw = chosen_seq_kl(&theta, &reference, rec)?;
        let fd = oracle::finite_diff_grad(
            |p| total_loss_value_sg_frozen(p, &reference, rec, &weights, &loss_cfg, frozen_kw),
            &theta,
            &fd_cfg,
        )?;
        for (name, err) in oracle::per_block_max_rel_err(&b.grad, &fd) {
            let slot = block_worst.entry(name).or_insert(0.0);
            *slot = slot.max(err);
            overall = overall.max(err);
        }
    }

    for (name, err) in &block_worst {
        println!("{name}: max rel err {err:.3e}");
    }
    println!("overall: max rel err {overall:.3e}");
    if overall < 1e-5 {
        println!("gradient check PASS");
        Ok(0)
    } else {
        println!("gradient check FAIL (tolerance 1e-5)");
        Ok(1)
    }
}

fn schema_text() -> String {
    let categories: Vec<&str> = HallucinationCategory::ALL
        .iter()
        .map(|c| c.name())
        .collect();
    format!(
        r#"Annotation records: one JSON object per line (UTF-8).

  video_id             string   id of the video the record annotates
  category             string   one of: {}
  question             string   whitespace-tokenized prompt
  chosen               string   correct answer
  rejected_relevant    string   plausible but wrong answer
  rejected_irrelevant  string   answer naming an object absent from the video
  keyframes            array    [{{"frame_idx": int, "objects": [{{"label": string, "bbox": [x, y, w, h]}}]}}]
  segments             array    [{{"start": int, "end": int, "label": string}}]

Videos: one JSON object per line.

  video_id  string
  frames    array of {{"index": int, "blacked_out": bool,
                      "objects": [{{"object_id": int, "class_token": int,
                                   "attribute_tokens": [int], "bbox": [x, y, w, h]}}]}}
  segments  array of {{"start": int, "end": int, "event_token": int}}

Bounding boxes are normalized: 0 <= x, y; x+w <= 1; y+h <= 1; w, h > 0.
The first six categories are Perception, the last four Temporal."#,
        categories.join(", ")
    )
}
