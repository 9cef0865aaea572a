//! Evaluation protocols (VR / SVMR / VCMR), bias correlation analysis and
//! the ablation runner.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{split_name, EvalReport, Prediction, QueryEval, Span, Task};
use super::train::{pretrain_bank, train};
use super::{HarnessError, TrainConfig, Variant};
use crate::model::{
    cmp_from_similarity, decode_moment, embed_text, embed_video, match_query, match_subtitles,
    moment_distribution, rank_moments, sentence_encode, ModelMode, MomentDistribution,
    RetrievalModel,
};
use crate::numcore::{Graph, Tensor};
use crate::synthcorpus::{Corpus, CorpusQuery, Split};

/// How many videos survive preselection and how many spans each contributes
/// to the corpus-level candidate list.
const PRESELECT_VIDEOS: usize = 10;
const SPANS_PER_VIDEO: usize = 10;

fn query_tokens(model: &RetrievalModel, corpus: &Corpus, q: &CorpusQuery) -> Vec<usize> {
    let views = corpus.query_views(q);
    match model.mode {
        ModelMode::Naive => views.tokens,
        ModelMode::Biased => views.nouns,
    }
}

/// Subtitle-matched video features, computed once per video for a fixed
/// model.
fn precompute_video_features(
    model: &RetrievalModel,
    corpus: &Corpus,
    video_ids: &[usize],
) -> Result<BTreeMap<usize, Tensor>, HarnessError> {
    let mut out = BTreeMap::new();
    for &vid in video_ids {
        let video = &corpus.videos[vid];
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false);
        let v = embed_video(&mut g, &bm, &video.frames)?;
        let v_star = match_subtitles(&mut g, &bm, v, video)?;
        out.insert(vid, g.tensor(v_star));
    }
    Ok(out)
}

/// Frame-by-query similarity column for every candidate video of one query.
fn similarity_columns(
    model: &RetrievalModel,
    tokens: &[usize],
    candidates: &[usize],
    features: &BTreeMap<usize, Tensor>,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let q_emb = embed_text(&mut g, &bm, tokens)?;
    let sentence = sentence_encode(&mut g, &bm, q_emb)?;
    let mut sims = Vec::with_capacity(candidates.len());
    for vid in candidates {
        let v_star = g.input(&features[vid]);
        let v_dag = match_query(&mut g, &bm, v_star, q_emb)?;
        let sim = g.matmul_nt(v_dag, sentence);
        sims.push(g.value(sim).to_vec());
    }
    Ok(sims)
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Moment distribution from a precomputed similarity column.
fn distribution_from_sims(
    model: &RetrievalModel,
    sims: &[f64],
) -> Result<MomentDistribution, HarnessError> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let sim = g.constant(sims.len(), 1, sims.to_vec());
    let cmp = cmp_from_similarity(&mut g, &bm, sim)?;
    Ok(moment_distribution(&g, &cmp)?)
}

/// Run one evaluation protocol for a model over the queries of the given
/// splits. The video pool is the union of those queries' videos.
pub fn evaluate(
    model: &RetrievalModel,
    corpus: &Corpus,
    task: Task,
    splits: &[Split],
    l_max: usize,
    ks: &[usize],
    thresholds: &[f64],
) -> Result<EvalReport, HarnessError> {
    if corpus.meta.config.d_in != model.dims.d_in {
        return Err(HarnessError::Data(format!(
            "corpus features are {}-dim but the model expects {}",
            corpus.meta.config.d_in, model.dims.d_in
        )));
    }
    if corpus.lexicon.vocab_size() != model.dims.vocab_size {
        return Err(HarnessError::Data(format!(
            "corpus vocabulary is {} but the model expects {}",
            corpus.lexicon.vocab_size(),
            model.dims.vocab_size
        )));
    }
    let queries: Vec<&CorpusQuery> =
        corpus.queries.iter().filter(|q| splits.contains(&q.split)).collect();
    if queries.is_empty() {
        return Err(HarnessError::Data("no queries in the requested splits".into()));
    }
    let mut pool: Vec<usize> = queries.iter().map(|q| q.video_id).collect();
    pool.sort_unstable();
    pool.dedup();

    let features = precompute_video_features(model, corpus, &pool)?;

    let mut evals = Vec::with_capacity(queries.len());
    for q in &queries {
        let tokens = query_tokens(model, corpus, q);
        let gt_span = Span::new(q.span.0, q.span.1)?;
        if tokens.is_empty() {
            evals.push(QueryEval {
                query_id: q.id,
                split: q.split,
                gt_video: q.video_id,
                gt_span,
                predictions: Vec::new(),
            });
            continue;
        }

        let predictions = match task {
            Task::Svmr => {
                let sims = similarity_columns(model, &tokens, &[q.video_id], &features)?;
                let dist = distribution_from_sims(model, &sims[0])?;
                rank_moments(&dist, l_max, SPANS_PER_VIDEO * PRESELECT_VIDEOS)
                    .into_iter()
                    .map(|(s, e, p)| Prediction {
                        video_id: q.video_id,
                        span: Some(Span { start: s, end: e }),
                        score: p,
                    })
                    .collect()
            }
            Task::Vr | Task::Vcmr => {
                let sims = similarity_columns(model, &tokens, &pool, &features)?;
                let scores: Vec<f64> = sims.iter().map(|s| max_of(s)).collect();
                // Rank videos by score, ties to the lower video id.
                let mut ranked: Vec<usize> = (0..pool.len()).collect();
                ranked.sort_by(|a, b| {
                    scores[*b].partial_cmp(&scores[*a]).unwrap().then(pool[*a].cmp(&pool[*b]))
                });
                if task == Task::Vr {
                    ranked
                        .iter()
                        .map(|&i| Prediction { video_id: pool[i], span: None, score: scores[i] })
                        .collect()
                } else {
                    // Softmax turns scores into positive weights so the
                    // video-by-span product preserves the video ranking.
                    let probs = crate::numcore::softmax(&scores)?;
                    let mut cands = Vec::new();
                    for &i in ranked.iter().take(PRESELECT_VIDEOS) {
                        let dist = distribution_from_sims(model, &sims[i])?;
                        for (s, e, p) in rank_moments(&dist, l_max, SPANS_PER_VIDEO) {
                            cands.push(Prediction {
                                video_id: pool[i],
                                span: Some(Span { start: s, end: e }),
                                score: probs[i] * p,
                            });
                        }
                    }
                    cands.sort_by(|a, b| {
                        b.score
                            .partial_cmp(&a.score)
                            .unwrap()
                            .then(a.video_id.cmp(&b.video_id))
                            .then(a.span.unwrap().start.cmp(&b.span.unwrap().start))
                            .then(a.span.unwrap().end.cmp(&b.span.unwrap().end))
                    });
                    cands
                }
            }
        };
        evals.push(QueryEval {
            query_id: q.id,
            split: q.split,
            gt_video: q.video_id,
            gt_span,
            predictions,
        });
    }
    Ok(EvalReport::build(task, ks, thresholds, &evals))
}

/// Moment-level R@1 at one tIoU threshold, decoded on the ground-truth
/// video; the training loop's validation metric.
pub fn svmr_r1(
    model: &RetrievalModel,
    corpus: &Corpus,
    splits: &[Split],
    l_max: usize,
    threshold: f64,
) -> Result<f64, HarnessError> {
    let report = evaluate(model, corpus, Task::Svmr, splits, l_max, &[1], &[threshold])?;
    report
        .recall(None, 1, threshold)
        .ok_or_else(|| HarnessError::Data("missing recall entry".into()))
}

// ── Bias correlation analysis ────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasRow {
    pub query_id: usize,
    pub split: Split,
    pub tiou_biased: f64,
    pub tiou_naive: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Pearson correlation; None when either side has zero variance.
    pub pearson: Option<f64>,
    pub degenerate: bool,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Per-query moment tIoU of a biased model against a naive model on the
/// same queries, with their correlation.
pub fn analyze_bias(
    naive: &RetrievalModel,
    biased: &RetrievalModel,
    corpus: &Corpus,
    splits: &[Split],
    l_max: usize,
) -> Result<BiasReport, HarnessError> {
    let queries: Vec<&CorpusQuery> =
        corpus.queries.iter().filter(|q| splits.contains(&q.split)).collect();
    if queries.is_empty() {
        return Err(HarnessError::Data("no queries in the requested splits".into()));
    }
    let pool: Vec<usize> = {
        let mut p: Vec<usize> = queries.iter().map(|q| q.video_id).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    let feats_naive = precompute_video_features(naive, corpus, &pool)?;
    let feats_biased = precompute_video_features(biased, corpus, &pool)?;

    let top1_tiou = |model: &RetrievalModel,
                     feats: &BTreeMap<usize, Tensor>,
                     q: &CorpusQuery|
     -> Result<f64, HarnessError> {
        let tokens = query_tokens(model, corpus, q);
        if tokens.is_empty() {
            return Ok(0.0);
        }
        let sims = similarity_columns(model, &tokens, &[q.video_id], feats)?;
        let dist = distribution_from_sims(model, &sims[0])?;
        let (s, e) = decode_moment(&dist, l_max);
        Ok(super::metrics::tiou(Span { start: s, end: e }, Span { start: q.span.0, end: q.span.1 }))
    };

    let mut rows = Vec::with_capacity(queries.len());
    for q in &queries {
        rows.push(BiasRow {
            query_id: q.id,
            split: q.split,
            tiou_biased: top1_tiou(biased, &feats_biased, q)?,
            tiou_naive: top1_tiou(naive, &feats_naive, q)?,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.tiou_biased).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.tiou_naive).collect();
    let pearson = pearson(&xs, &ys);
    Ok(BiasReport { degenerate: pearson.is_none(), rows, pearson })
}

impl BiasReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "query_id,split,tiou_biased,tiou_naive")?;
        for r in &self.rows {
            writeln!(f, "{},{},{},{}", r.query_id, split_name(r.split), r.tiou_biased, r.tiou_naive)?;
        }
        Ok(())
    }

    /// 10x10 joint histogram over [0,1]^2 for external plotting.
    pub fn write_histogram_json(&self, path: &Path) -> Result<(), HarnessError> {
        let bins = 10usize;
        let mut counts = vec![vec![0u32; bins]; bins];
        for r in &self.rows {
            let bx = ((r.tiou_biased * bins as f64) as usize).min(bins - 1);
            let by = ((r.tiou_naive * bins as f64) as usize).min(bins - 1);
            counts[bx][by] += 1;
        }
        let payload = serde_json::json!({
            "bins": bins,
            "x": "tiou_biased",
            "y": "tiou_naive",
            "counts": counts,
            "pearson": self.pearson,
            "degenerate": self.degenerate,
        });
        std::fs::write(path, serde_json::to_string_pretty(&payload)?)?;
        Ok(())
    }
}

// ── Ablation runner ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub adverse_r1_05: f64,
    pub congruent_r1_05: f64,
    pub adverse_r1_07: f64,
    pub congruent_r1_07: f64,
    pub overall_r1_05: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean of a column across seeds for one variant.
    pub fn mean(&self, variant: Variant, pick: impl Fn(&AblationRow) -> f64) -> f64 {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.variant == variant).map(&pick).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "variant,seed,adverse_r1_iou05,congruent_r1_iou05,adverse_r1_iou07,congruent_r1_iou07,overall_r1_iou05"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                r.adverse_r1_05,
                r.congruent_r1_05,
                r.adverse_r1_07,
                r.congruent_r1_07,
                r.overall_r1_05
            )?;
        }
        Ok(())
    }

    pub fn summary_table(&self, seeds: &[u64]) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<18} {:>14} {:>14} {:>14} ({} seeds, VCMR R@1)\n",
            "variant",
            "adverse@0.5",
            "congruent@0.5",
            "adverse@0.7",
            seeds.len()
        ));
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        for v in variants {
            s.push_str(&format!(
                "{:<18} {:>14.4} {:>14.4} {:>14.4}\n",
                v.name(),
                self.mean(v, |r| r.adverse_r1_05),
                self.mean(v, |r| r.congruent_r1_05),
                self.mean(v, |r| r.adverse_r1_07),
            ));
        }
        s
    }
}

/// Train a single variant end to end (pretraining the bank when the rule
/// needs it) and report VCMR R@1 on both test splits.
pub fn run_variant(
    cfg: &TrainConfig,
    corpus: &Corpus,
    variant: Variant,
) -> Result<(AblationRow, super::Checkpoint), HarnessError> {
    let needs_bank = matches!(variant, Variant::FullConfounder | Variant::NoCmp);
    let bank = if needs_bank { Some(pretrain_bank(cfg, corpus)?.0) } else { None };
    let outcome = train(cfg, corpus, variant, bank.as_ref(), None)?;
    let nmr = outcome.checkpoint.model(ModelMode::Naive)?;
    let report = evaluate(
        &nmr,
        corpus,
        Task::Vcmr,
        &[Split::TestCongruent, Split::TestAdverse],
        cfg.l_max,
        &[1, 10, 100],
        &[0.5, 0.7],
    )?;
    let get = |split: Option<Split>, thr: f64| report.recall(split, 1, thr).unwrap_or(0.0);
    Ok((
        AblationRow {
            variant,
            seed: cfg.seed,
            adverse_r1_05: get(Some(Split::TestAdverse), 0.5),
            congruent_r1_05: get(Some(Split::TestCongruent), 0.5),
            adverse_r1_07: get(Some(Split::TestAdverse), 0.7),
            congruent_r1_07: get(Some(Split::TestCongruent), 0.7),
            overall_r1_05: get(None, 0.5),
        },
        outcome.checkpoint,
    ))
}

/// Train every requested variant across the shared seeds and tabulate.
pub fn run_ablation(
    cfg: &TrainConfig,
    corpus: &Corpus,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationReport, HarnessError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one variant and seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let seeded = TrainConfig { seed, ..cfg.clone() };
        for &variant in variants {
            let (row, _) = run_variant(&seeded, corpus, variant)?;
            rows.push(row);
        }
    }
    Ok(AblationReport { rows })
}
