//! Deterministic generator of a biased video-query corpus.
//!
//! Frame features for a moment come from a per-(object, predicate) prototype
//! built as object-component + predicate-component, so a model that only
//! sees nouns can locate the object but genuinely cannot disambiguate the
//! predicate except through co-occurrence statistics. Subtitles mention the
//! object but never the predicate. A bias knob selects each object's
//! dominant predicate with probability beta.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GroundTruthSpan, SubtitleEntry, VideoSample};
use crate::numcore::Tensor;
use crate::seeds;
use crate::textproc::{Lexicon, PosClass, QueryText, TokenId};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("version error: file is version {found}, reader supports version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const OBJECT_WORDS: &[&str] = &[
    "television", "bicycle", "coffee", "chair", "guitar", "door", "phone", "book", "car", "dog",
    "piano", "window", "mirror", "ladder", "camera", "violin", "bottle", "kettle", "garden",
    "letter", "cake", "lamp", "table", "boat",
];

const PREDICATE_WORDS: &[&str] = &[
    "watches", "rides", "drinks", "fixes", "opens", "plays", "cleans", "breaks", "paints",
    "carries", "moves", "builds",
];

const SUBJECT_WORD: &str = "someone";
const FILLER_WORD: &str = "the";

/// Scalar knobs of the world; everything else derives deterministically
/// from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_objects: usize,
    pub n_predicates: usize,
    /// Probability that a training moment uses its object's dominant
    /// predicate.
    pub beta: f64,
    pub noise_scale: f64,
    pub frames_per_video: usize,
    pub moments_per_video: usize,
    pub d_in: usize,
    pub n_train: usize,
    pub n_test_congruent: usize,
    pub n_test_adverse: usize,
    /// Plant an unqueried same-object dominant-predicate moment in every
    /// adverse test video, so the bias has a concrete wrong answer to pull
    /// toward.
    pub adverse_distractor: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_objects: 12,
            n_predicates: 6,
            beta: 0.9,
            noise_scale: 0.3,
            frames_per_video: 24,
            moments_per_video: 2,
            d_in: 16,
            n_train: 600,
            n_test_congruent: 150,
            n_test_adverse: 150,
            adverse_distractor: true,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(CorpusError::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.n_objects == 0 || self.n_objects > OBJECT_WORDS.len() {
            return Err(CorpusError::Config(format!(
                "n_objects must be in 1..={}, got {}",
                OBJECT_WORDS.len(),
                self.n_objects
            )));
        }
        if self.n_predicates < 2 || self.n_predicates > PREDICATE_WORDS.len() {
            return Err(CorpusError::Config(format!(
                "n_predicates must be in 2..={}, got {}",
                PREDICATE_WORDS.len(),
                self.n_predicates
            )));
        }
        if self.moments_per_video == 0 {
            return Err(CorpusError::Config("moments_per_video must be >= 1".into()));
        }
        if self.frames_per_video / self.moments_per_video < 3 {
            return Err(CorpusError::Config(
                "frames_per_video must allow at least 3 frames per moment block".into(),
            ));
        }
        if self.d_in == 0 || self.noise_scale < 0.0 {
            return Err(CorpusError::Config("d_in must be >= 1 and noise_scale >= 0".into()));
        }
        if self.n_train == 0 {
            return Err(CorpusError::Config("n_train must be >= 1".into()));
        }
        Ok(())
    }
}

/// The config plus everything derived from the seed: the dominant-predicate
/// map and the per-(object, predicate) feature prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub config: WorldConfig,
    /// dominant[o] is the predicate index bound to object o.
    pub dominant: Vec<usize>,
    /// Row o * n_predicates + p is the D_in prototype for the pair.
    pub prototypes: Vec<Vec<f64>>,
}

impl WorldSpec {
    pub fn build(config: WorldConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        let mut rng = seeds::rng(config.seed, "dominant", 0);
        let dominant: Vec<usize> =
            (0..config.n_objects).map(|_| rng.gen_range(0..config.n_predicates)).collect();

        let normal = Normal::new(0.0, 1.0).unwrap();
        let component = |label: &str, idx: u64, d: usize| -> Vec<f64> {
            let mut rng = seeds::rng(config.seed, label, idx);
            (0..d).map(|_| normal.sample(&mut rng)).collect()
        };
        let obj_parts: Vec<Vec<f64>> =
            (0..config.n_objects).map(|o| component("proto_obj", o as u64, config.d_in)).collect();
        let pred_parts: Vec<Vec<f64>> = (0..config.n_predicates)
            .map(|p| component("proto_pred", p as u64, config.d_in))
            .collect();
        let mut prototypes = Vec::with_capacity(config.n_objects * config.n_predicates);
        for o in 0..config.n_objects {
            for p in 0..config.n_predicates {
                prototypes.push(
                    obj_parts[o].iter().zip(&pred_parts[p]).map(|(a, b)| a + b).collect(),
                );
            }
        }
        for i in 0..prototypes.len() {
            for j in (i + 1)..prototypes.len() {
                if prototypes[i] == prototypes[j] {
                    return Err(CorpusError::Config("prototypes are not pairwise distinct".into()));
                }
            }
        }
        Ok(WorldSpec { config, dominant, prototypes })
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for w in OBJECT_WORDS.iter().take(self.config.n_objects) {
            lex.insert(w, PosClass::Noun).unwrap();
        }
        for w in PREDICATE_WORDS.iter().take(self.config.n_predicates) {
            lex.insert(w, PosClass::Predicate).unwrap();
        }
        lex.insert(SUBJECT_WORD, PosClass::Other).unwrap();
        lex.insert(FILLER_WORD, PosClass::Other).unwrap();
        lex
    }

    fn prototype(&self, object: usize, predicate: usize) -> &[f64] {
        &self.prototypes[object * self.config.n_predicates + predicate]
    }
}

/// Which portion of the corpus a query belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestCongruent,
    TestAdverse,
    Unsplit,
}

/// One query with its ground-truth link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusQuery {
    pub id: usize,
    pub text: String,
    pub video_id: usize,
    pub span: (usize, usize),
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMeta {
    pub config: WorldConfig,
    pub dominant: Vec<usize>,
}

/// Videos, queries and the lexicon they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub lexicon: Lexicon,
    pub videos: Vec<VideoSample>,
    pub queries: Vec<CorpusQuery>,
    pub meta: GeneratorMeta,
}

impl Corpus {
    pub fn video(&self, id: usize) -> &VideoSample {
        &self.videos[id]
    }

    pub fn query_views(&self, q: &CorpusQuery) -> QueryText {
        QueryText::new(&q.text, &self.lexicon)
    }

    pub fn queries_in(&self, split: Split) -> impl Iterator<Item = &CorpusQuery> {
        self.queries.iter().filter(move |q| q.split == split)
    }

    /// Object index of a query (its first noun), if any.
    pub fn object_index(&self, q: &CorpusQuery) -> Option<usize> {
        let views = self.query_views(q);
        views.nouns.first().map(|t| self.object_index_of_token(*t)).and_then(|x| x)
    }

    pub fn object_index_of_token(&self, token: TokenId) -> Option<usize> {
        let word = self.lexicon.token(token);
        OBJECT_WORDS.iter().take(self.meta.config.n_objects).position(|w| *w == word)
    }

    /// Predicate index of a query (its first predicate), if any.
    pub fn predicate_index(&self, q: &CorpusQuery) -> Option<usize> {
        let views = self.query_views(q);
        let word = views.predicates.first().map(|t| self.lexicon.token(*t).to_string())?;
        PREDICATE_WORDS.iter().take(self.meta.config.n_predicates).position(|w| *w == word)
    }

    /// True when the query's predicate differs from its object's dominant
    /// predicate.
    pub fn is_adverse(&self, q: &CorpusQuery) -> Option<bool> {
        let o = self.object_index(q)?;
        let p = self.predicate_index(q)?;
        Some(self.meta.dominant[o] != p)
    }
}

// ── Generation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
enum MomentKind {
    /// Queried; predicate drawn by the beta rule.
    TrainBiased,
    /// Queried; predicate forced dominant.
    Congruent,
    /// Queried; predicate forced non-dominant.
    Adverse,
    /// Not queried; dominant-predicate distractor reusing the object of the
    /// preceding queried moment.
    Distractor,
    /// Background block, features only.
    Empty,
}

struct VideoPlan {
    split: Split,
    moments: Vec<MomentKind>,
}

fn sample_predicate(spec: &WorldSpec, object: usize, kind: MomentKind, rng: &mut impl Rng) -> usize {
    let np = spec.config.n_predicates;
    let dom = spec.dominant[object];
    match kind {
        MomentKind::Congruent => dom,
        MomentKind::Adverse => {
            let mut p = rng.gen_range(0..np - 1);
            if p >= dom {
                p += 1;
            }
            p
        }
        _ => {
            if rng.gen_bool(spec.config.beta.min(1.0)) {
                dom
            } else {
                let mut p = rng.gen_range(0..np - 1);
                if p >= dom {
                    p += 1;
                }
                p
            }
        }
    }
}

fn build_video(
    spec: &WorldSpec,
    lexicon: &Lexicon,
    video_id: usize,
    plan: &VideoPlan,
    next_query_id: &mut usize,
    queries: &mut Vec<CorpusQuery>,
) -> VideoSample {
    let cfg = &spec.config;
    let mut rng = seeds::rng(cfg.seed, "video", video_id as u64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n_v = cfg.frames_per_video;
    let d_in = cfg.d_in;
    let block = n_v / plan.moments.len().max(1);

    // Background noise everywhere first.
    let mut frames: Vec<f64> =
        (0..n_v * d_in).map(|_| normal.sample(&mut rng) * cfg.noise_scale).collect();
    let mut subtitles = Vec::new();
    let mut moments = Vec::new();
    let mut prev_object: Option<usize> = None;

    for (b, kind) in plan.moments.iter().enumerate() {
        if matches!(kind, MomentKind::Empty) {
            continue;
        }
        let block_start = b * block;
        let block_len = if b + 1 == plan.moments.len() { n_v - block_start } else { block };
        let max_len = block_len.min(8).max(2);
        let len = rng.gen_range(2..=max_len);
        let start = block_start + rng.gen_range(0..=block_len - len);
        let span = (start, start + len - 1);

        let object = match kind {
            MomentKind::Distractor => prev_object.expect("distractor follows a queried moment"),
            _ => rng.gen_range(0..cfg.n_objects),
        };
        prev_object = Some(object);
        let predicate = match kind {
            MomentKind::Distractor => spec.dominant[object],
            _ => sample_predicate(spec, object, *kind, &mut rng),
        };

        let proto = spec.prototype(object, predicate);
        for f in span.0..=span.1 {
            for j in 0..d_in {
                frames[f * d_in + j] = proto[j] + normal.sample(&mut rng) * cfg.noise_scale;
            }
        }

        subtitles.push(SubtitleEntry {
            span,
            tokens: vec![lexicon.id(FILLER_WORD), lexicon.id(OBJECT_WORDS[object])],
        });

        if !matches!(kind, MomentKind::Distractor) {
            let text = format!(
                "{SUBJECT_WORD} {} {}",
                PREDICATE_WORDS[predicate], OBJECT_WORDS[object]
            );
            let qid = *next_query_id;
            *next_query_id += 1;
            queries.push(CorpusQuery { id: qid, text, video_id, span, split: plan.split });
            moments.push(GroundTruthSpan { query_id: qid, span });
        }
    }

    let sample = VideoSample {
        id: video_id,
        frames: Tensor::matrix(n_v, d_in, frames).expect("finite features"),
        subtitles,
        moments,
    };
    sample.validate().expect("generated video is well-formed");
    sample
}

fn plans_for_quota(spec: &WorldSpec) -> Vec<VideoPlan> {
    let cfg = &spec.config;
    let mpv = cfg.moments_per_video;
    let mut plans = Vec::new();

    let mut remaining = cfg.n_train;
    while remaining > 0 {
        let take = remaining.min(mpv);
        let mut moments = vec![MomentKind::TrainBiased; take];
        moments.resize(mpv, MomentKind::Empty);
        plans.push(VideoPlan { split: Split::Train, moments });
        remaining -= take;
    }
    let mut remaining = cfg.n_test_congruent;
    while remaining > 0 {
        let take = remaining.min(mpv);
        let mut moments = vec![MomentKind::Congruent; take];
        moments.resize(mpv, MomentKind::Empty);
        plans.push(VideoPlan { split: Split::TestCongruent, moments });
        remaining -= take;
    }
    for _ in 0..cfg.n_test_adverse {
        // One adverse query per video, optionally shadowed by an unqueried
        // dominant-predicate moment on the same object.
        let mut moments = vec![MomentKind::Adverse];
        if cfg.adverse_distractor && mpv >= 2 {
            moments.push(MomentKind::Distractor);
        }
        moments.resize(mpv.max(moments.len()), MomentKind::Empty);
        plans.push(VideoPlan { split: Split::TestAdverse, moments });
    }
    plans
}

/// Generate the default quota corpus: train moments follow the beta rule,
/// the congruent split uses dominant predicates only, the adverse split
/// non-dominant ones only. Videos never straddle splits.
pub fn generate_corpus(spec: &WorldSpec) -> Result<Corpus, CorpusError> {
    spec.config.validate()?;
    let lexicon = spec.lexicon();
    let mut queries = Vec::new();
    let mut videos = Vec::new();
    let mut next_query_id = 0;

    for (video_id, plan) in plans_for_quota(spec).into_iter().enumerate() {
        videos.push(build_video(spec, &lexicon, video_id, &plan, &mut next_query_id, &mut queries));
    }

    Ok(Corpus {
        lexicon,
        videos,
        queries,
        meta: GeneratorMeta { config: spec.config.clone(), dominant: spec.dominant.clone() },
    })
}

/// Generate an unlabeled corpus where every moment follows the beta rule;
/// pair with [`split_corpus`].
pub fn generate_corpus_unsplit(spec: &WorldSpec, n_queries: usize) -> Result<Corpus, CorpusError> {
    spec.config.validate()?;
    if n_queries == 0 {
        return Err(CorpusError::Config("n_queries must be >= 1".into()));
    }
    let lexicon = spec.lexicon();
    let mpv = spec.config.moments_per_video;
    let mut queries = Vec::new();
    let mut videos = Vec::new();
    let mut next_query_id = 0;
    let mut remaining = n_queries;
    let mut video_id = 0;
    while remaining > 0 {
        let take = remaining.min(mpv);
        let mut moments = vec![MomentKind::TrainBiased; take];
        moments.resize(mpv, MomentKind::Empty);
        let plan = VideoPlan { split: Split::Unsplit, moments };
        videos.push(build_video(spec, &lexicon, video_id, &plan, &mut next_query_id, &mut queries));
        remaining -= take;
        video_id += 1;
    }
    Ok(Corpus {
        lexicon,
        videos,
        queries,
        meta: GeneratorMeta { config: spec.config.clone(), dominant: spec.dominant.clone() },
    })
}

/// Partition an unlabeled corpus into (train, test-congruent, test-adverse)
/// by fractions. Whole videos move together; the adverse split holds only
/// non-dominant-predicate queries. Errors when the corpus cannot fill the
/// requested test splits.
pub fn split_corpus(corpus: &mut Corpus, fractions: (f64, f64, f64)) -> Result<(), CorpusError> {
    let (ft, fc, fa) = fractions;
    if (ft + fc + fa - 1.0).abs() > 1e-9 || ft < 0.0 || fc < 0.0 || fa < 0.0 {
        return Err(CorpusError::Config(format!(
            "fractions must be nonnegative and sum to 1, got ({ft}, {fc}, {fa})"
        )));
    }
    let n = corpus.queries.len();
    let target_adv = (fa * n as f64).round() as usize;
    let target_cong = (fc * n as f64).round() as usize;

    let adverse_flags: Vec<bool> = corpus
        .queries
        .iter()
        .map(|q| corpus.is_adverse(q).unwrap_or(false))
        .collect();

    // Per-video query composition.
    let n_videos = corpus.videos.len();
    let mut video_adv = vec![0usize; n_videos];
    let mut video_cong = vec![0usize; n_videos];
    for (q, adv) in corpus.queries.iter().zip(&adverse_flags) {
        if *adv {
            video_adv[q.video_id] += 1;
        } else {
            video_cong[q.video_id] += 1;
        }
    }

    let mut order: Vec<usize> = (0..n_videos).collect();
    order.shuffle(&mut seeds::rng(corpus.meta.config.seed, "split", 0));

    let mut needed_adv = target_adv;
    let mut needed_cong = target_cong;
    let mut in_test = vec![false; n_videos];
    // First pull in videos that contribute adverse queries, then top up the
    // congruent quota with adverse-free videos.
    for &v in &order {
        if video_adv[v] > 0 && video_adv[v] <= needed_adv && video_cong[v] <= needed_cong {
            in_test[v] = true;
            needed_adv -= video_adv[v];
            needed_cong -= video_cong[v];
        }
    }
    if needed_adv > 0 {
        return Err(CorpusError::Data(format!(
            "cannot fill the adverse split: {needed_adv} more non-dominant queries needed; \
             lower beta or generate more data"
        )));
    }
    for &v in &order {
        if !in_test[v] && video_adv[v] == 0 && video_cong[v] <= needed_cong {
            in_test[v] = true;
            needed_cong -= video_cong[v];
            if needed_cong == 0 {
                break;
            }
        }
    }
    if needed_cong > 0 {
        return Err(CorpusError::Data(format!(
            "cannot fill the congruent split: {needed_cong} more dominant queries needed; \
             generate more data"
        )));
    }

    for (i, q) in corpus.queries.iter_mut().enumerate() {
        q.split = if in_test[q.video_id] {
            if adverse_flags[i] {
                Split::TestAdverse
            } else {
                Split::TestCongruent
            }
        } else {
            Split::Train
        };
    }
    Ok(())
}

// ── Persistence ──────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"SQDC";
const VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn w_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32(r: &mut impl Read) -> Result<u32, CorpusError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncation(e))?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read) -> Result<u64, CorpusError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| truncation(e))?;
    Ok(u64::from_le_bytes(b))
}

fn r_f64(r: &mut impl Read) -> Result<f64, CorpusError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| truncation(e))?;
    Ok(f64::from_le_bytes(b))
}

fn truncation(e: std::io::Error) -> CorpusError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CorpusError::Format("file is truncated".into())
    } else {
        CorpusError::Io(e)
    }
}

fn w_string(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn r_string(r: &mut impl Read) -> Result<String, CorpusError> {
    let len = r_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(CorpusError::Format(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncation)?;
    String::from_utf8(buf).map_err(|_| CorpusError::Format("invalid utf-8 string".into()))
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::TestCongruent => 1,
        Split::TestAdverse => 2,
        Split::Unsplit => 3,
    }
}

fn split_from(code: u8) -> Result<Split, CorpusError> {
    Ok(match code {
        0 => Split::Train,
        1 => Split::TestCongruent,
        2 => Split::TestAdverse,
        3 => Split::Unsplit,
        other => return Err(CorpusError::Format(format!("unknown split code {other}"))),
    })
}

fn class_code(c: PosClass) -> u8 {
    match c {
        PosClass::Noun => 0,
        PosClass::Predicate => 1,
        PosClass::Other => 2,
    }
}

fn class_from(code: u8) -> Result<PosClass, CorpusError> {
    Ok(match code {
        0 => PosClass::Noun,
        1 => PosClass::Predicate,
        2 => PosClass::Other,
        other => return Err(CorpusError::Format(format!("unknown POS class code {other}"))),
    })
}

/// Write the versioned binary corpus plus a human-readable JSONL companion
/// (`<path>.queries.jsonl`). Writes are atomic (temp file + rename).
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w_u32(&mut w, VERSION)?;

        let cfg = &corpus.meta.config;
        w_u32(&mut w, cfg.n_objects as u32)?;
        w_u32(&mut w, cfg.n_predicates as u32)?;
        for d in &corpus.meta.dominant {
            w_u32(&mut w, *d as u32)?;
        }
        w_f64(&mut w, cfg.beta)?;
        w_f64(&mut w, cfg.noise_scale)?;
        w_u32(&mut w, cfg.frames_per_video as u32)?;
        w_u32(&mut w, cfg.moments_per_video as u32)?;
        w_u32(&mut w, cfg.d_in as u32)?;
        w_u32(&mut w, cfg.n_train as u32)?;
        w_u32(&mut w, cfg.n_test_congruent as u32)?;
        w_u32(&mut w, cfg.n_test_adverse as u32)?;
        w_u32(&mut w, cfg.adverse_distractor as u32)?;
        w_u64(&mut w, cfg.seed)?;

        let entries: Vec<_> = corpus.lexicon.entries().collect();
        w_u32(&mut w, entries.len() as u32)?;
        for (_, token, class) in entries {
            w_string(&mut w, token)?;
            w.write_all(&[class_code(class)])?;
        }

        w_u32(&mut w, corpus.videos.len() as u32)?;
        for v in &corpus.videos {
            w_u32(&mut w, v.id as u32)?;
            w_u32(&mut w, v.frames.rows() as u32)?;
            w_u32(&mut w, v.frames.cols() as u32)?;
            for x in v.frames.values() {
                w_f64(&mut w, *x)?;
            }
            w_u32(&mut w, v.subtitles.len() as u32)?;
            for s in &v.subtitles {
                w_u32(&mut w, s.span.0 as u32)?;
                w_u32(&mut w, s.span.1 as u32)?;
                w_u32(&mut w, s.tokens.len() as u32)?;
                for t in &s.tokens {
                    w_u32(&mut w, *t as u32)?;
                }
            }
            w_u32(&mut w, v.moments.len() as u32)?;
            for m in &v.moments {
                w_u32(&mut w, m.query_id as u32)?;
                w_u32(&mut w, m.span.0 as u32)?;
                w_u32(&mut w, m.span.1 as u32)?;
            }
        }

        w_u32(&mut w, corpus.queries.len() as u32)?;
        for q in &corpus.queries {
            w_u32(&mut w, q.id as u32)?;
            w_u32(&mut w, q.video_id as u32)?;
            w_u32(&mut w, q.span.0 as u32)?;
            w_u32(&mut w, q.span.1 as u32)?;
            w.write_all(&[split_code(q.split)])?;
            w_string(&mut w, &q.text)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;

    let jsonl = companion_path(path);
    let tmp = jsonl.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for q in &corpus.queries {
            let line = serde_json::json!({
                "id": q.id,
                "text": q.text,
                "video_id": q.video_id,
                "span": [q.span.0, q.span.1],
                "split": q.split,
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, &jsonl)?;
    Ok(())
}

/// Path of the JSONL companion written next to a corpus file.
pub fn companion_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".queries.jsonl");
    std::path::PathBuf::from(os)
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncation)?;
    if &magic != MAGIC {
        return Err(CorpusError::Format("bad magic bytes (not a corpus file)".into()));
    }
    let version = r_u32(&mut r)?;
    if version != VERSION {
        return Err(CorpusError::Version { found: version, supported: VERSION });
    }

    let n_objects = r_u32(&mut r)? as usize;
    let n_predicates = r_u32(&mut r)? as usize;
    let mut dominant = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        dominant.push(r_u32(&mut r)? as usize);
    }
    let beta = r_f64(&mut r)?;
    let noise_scale = r_f64(&mut r)?;
    let frames_per_video = r_u32(&mut r)? as usize;
    let moments_per_video = r_u32(&mut r)? as usize;
    let d_in = r_u32(&mut r)? as usize;
    let n_train = r_u32(&mut r)? as usize;
    let n_test_congruent = r_u32(&mut r)? as usize;
    let n_test_adverse = r_u32(&mut r)? as usize;
    let adverse_distractor = r_u32(&mut r)? != 0;
    let seed = r_u64(&mut r)?;
    let config = WorldConfig {
        n_objects,
        n_predicates,
        beta,
        noise_scale,
        frames_per_video,
        moments_per_video,
        d_in,
        n_train,
        n_test_congruent,
        n_test_adverse,
        adverse_distractor,
        seed,
    };

    let n_entries = r_u32(&mut r)? as usize;
    let mut lexicon = Lexicon::new();
    for _ in 0..n_entries {
        let token = r_string(&mut r)?;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(truncation)?;
        lexicon
            .insert(&token, class_from(code[0])?)
            .map_err(|e| CorpusError::Format(e.to_string()))?;
    }

    let n_videos = r_u32(&mut r)? as usize;
    let mut videos = Vec::with_capacity(n_videos);
    for _ in 0..n_videos {
        let id = r_u32(&mut r)? as usize;
        let rows = r_u32(&mut r)? as usize;
        let cols = r_u32(&mut r)? as usize;
        if rows * cols > 1 << 24 {
            return Err(CorpusError::Format("implausible video size".into()));
        }
        let mut vals = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            vals.push(r_f64(&mut r)?);
        }
        let frames = Tensor::matrix(rows, cols, vals)
            .map_err(|e| CorpusError::Format(e.to_string()))?;
        let n_subs = r_u32(&mut r)? as usize;
        let mut subtitles = Vec::with_capacity(n_subs);
        for _ in 0..n_subs {
            let st = r_u32(&mut r)? as usize;
            let ed = r_u32(&mut r)? as usize;
            let n_tok = r_u32(&mut r)? as usize;
            let mut tokens = Vec::with_capacity(n_tok);
            for _ in 0..n_tok {
                tokens.push(r_u32(&mut r)? as usize);
            }
            subtitles.push(SubtitleEntry { span: (st, ed), tokens });
        }
        let n_moments = r_u32(&mut r)? as usize;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let query_id = r_u32(&mut r)? as usize;
            let st = r_u32(&mut r)? as usize;
            let ed = r_u32(&mut r)? as usize;
            moments.push(GroundTruthSpan { query_id, span: (st, ed) });
        }
        let sample = VideoSample { id, frames, subtitles, moments };
        sample.validate().map_err(|e| CorpusError::Format(e.to_string()))?;
        videos.push(sample);
    }

    let n_queries = r_u32(&mut r)? as usize;
    let mut queries = Vec::with_capacity(n_queries);
    for _ in 0..n_queries {
        let id = r_u32(&mut r)? as usize;
        let video_id = r_u32(&mut r)? as usize;
        let st = r_u32(&mut r)? as usize;
        let ed = r_u32(&mut r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code).map_err(truncation)?;
        let split = split_from(code[0])?;
        let text = r_string(&mut r)?;
        if video_id >= videos.len() {
            return Err(CorpusError::Format(format!("query {id} links to missing video {video_id}")));
        }
        queries.push(CorpusQuery { id, text, video_id, span: (st, ed), split });
    }

    Ok(Corpus { lexicon, videos, queries, meta: GeneratorMeta { config, dominant } })
}
