//! Joint training of the naive and biased retrieval models with the
//! selective debiasing loss, plus confounder pretraining.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::svmr_r1;
use super::{BankArtifact, Checkpoint, HarnessError, TrainConfig, Variant};
use crate::model::{
    conditional_moment_predict, embed_text, embed_video, match_query, match_subtitles,
    retrieval_loss, sentence_encoding_value, video_score, ModelDims, ModelMode, RetrievalModel,
};
use crate::numcore::{Adam, Graph, Tensor};
use crate::seeds;
use crate::squid::{
    confounder_predicate_value, decide_confounder, pretrain_confounder, squid_loss, Branch,
    ConfounderBank, DecisionRecord, DecisionRule, PretrainItem, PretrainReport, SquidDecision,
};
use crate::synthcorpus::{Corpus, CorpusQuery, Split};
use crate::textproc::{build_cooc_table, decide_cooc, QueryText};

/// Per-epoch aggregates written to the metric trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_naive: f64,
    pub loss_biased: f64,
    pub loss_debias: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_r1: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochStats>,
    pub decisions: Vec<DecisionRecord>,
}

/// How a variant bends the training loop.
#[derive(Debug, Clone, Copy)]
struct VariantKnobs {
    rule: Option<DecisionRule>,
    lambda: f64,
    use_bmr: bool,
    freeze_alpha: bool,
}

fn knobs(variant: Variant, cfg: &TrainConfig) -> VariantKnobs {
    match variant {
        Variant::FullConfounder => VariantKnobs {
            rule: Some(DecisionRule::Confounder),
            lambda: cfg.lambda_debias,
            use_bmr: true,
            freeze_alpha: false,
        },
        Variant::FullCooc => VariantKnobs {
            rule: Some(DecisionRule::CoocTable),
            lambda: cfg.lambda_debias,
            use_bmr: true,
            freeze_alpha: false,
        },
        Variant::AllNegative => VariantKnobs {
            rule: Some(DecisionRule::AllNegative),
            lambda: cfg.lambda_debias,
            use_bmr: true,
            freeze_alpha: false,
        },
        Variant::AllPositive => VariantKnobs {
            rule: Some(DecisionRule::AllPositive),
            lambda: cfg.lambda_debias,
            use_bmr: true,
            freeze_alpha: false,
        },
        Variant::NoBmr => VariantKnobs { rule: None, lambda: 0.0, use_bmr: false, freeze_alpha: false },
        Variant::NoCmp => VariantKnobs {
            rule: Some(DecisionRule::Confounder),
            lambda: cfg.lambda_debias,
            use_bmr: true,
            freeze_alpha: true,
        },
    }
}

pub fn model_dims(cfg: &TrainConfig, corpus: &Corpus) -> ModelDims {
    ModelDims {
        d_in: corpus.meta.config.d_in,
        d: cfg.d,
        heads: cfg.heads,
        attention_layers: cfg.attention_layers,
        kernel_width: cfg.kernel_width,
        vocab_size: corpus.lexicon.vocab_size(),
    }
}

/// Recover model dimensions from a checkpoint's stored tensors.
pub fn model_dims_from(
    cfg: &TrainConfig,
    params: &[(String, Tensor)],
) -> Result<ModelDims, HarnessError> {
    let find = |name: &str| {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| HarnessError::Data(format!("checkpoint lacks {name}")))
    };
    Ok(ModelDims {
        d_in: find("embed.video_proj")?.rows(),
        d: cfg.d,
        heads: cfg.heads,
        attention_layers: cfg.attention_layers,
        kernel_width: cfg.kernel_width,
        vocab_size: find("embed.token_table")?.rows(),
    })
}

/// Compute the per-query decisions once; they are constant over training
/// because rules depend only on the corpus, the table or the frozen bank.
pub fn compute_decisions(
    cfg: &TrainConfig,
    corpus: &Corpus,
    rule: DecisionRule,
    bank: Option<&BankArtifact>,
) -> Result<Vec<(usize, SquidDecision)>, HarnessError> {
    let train_queries: Vec<(&CorpusQuery, QueryText)> = corpus
        .queries_in(Split::Train)
        .map(|q| (q, corpus.query_views(q)))
        .collect();
    let mut out = Vec::with_capacity(train_queries.len());
    match rule {
        DecisionRule::AllPositive | DecisionRule::AllNegative => {
            let branch = if rule == DecisionRule::AllPositive {
                Branch::Positive
            } else {
                Branch::Negative
            };
            for (q, views) in &train_queries {
                let d = if views.nouns.is_empty() {
                    SquidDecision::degenerate(rule)
                } else {
                    SquidDecision::fixed(rule, branch)
                };
                out.push((q.id, d));
            }
        }
        DecisionRule::CoocTable => {
            let views: Vec<QueryText> = train_queries.iter().map(|(_, v)| v.clone()).collect();
            let table = build_cooc_table(&views, &corpus.lexicon, cfg.cooc_k, cfg.count_mode)?;
            for (q, views) in &train_queries {
                let d = decide_cooc(views, &table, cfg.top_n, &corpus.lexicon);
                out.push((
                    q.id,
                    SquidDecision {
                        rule: DecisionRule::CoocTable,
                        branch: d.branch,
                        cosine: None,
                        degenerate: d.degenerate,
                    },
                ));
            }
        }
        DecisionRule::Confounder => {
            let artifact = bank.ok_or_else(|| {
                HarnessError::Config(
                    "decision rule is confounder but no pretrained bank was supplied".into(),
                )
            })?;
            if !artifact.bank.frozen {
                return Err(HarnessError::Data("confounder bank is not pretrained/frozen".into()));
            }
            for (q, views) in &train_queries {
                let d = if views.nouns.is_empty() || views.predicates.is_empty() {
                    SquidDecision::degenerate(DecisionRule::Confounder)
                } else {
                    let noun_sentence = sentence_encoding_value(&artifact.encoder, &views.nouns)?;
                    let query_predicate =
                        sentence_encoding_value(&artifact.encoder, &views.predicates)?;
                    let biased_predicate =
                        confounder_predicate_value(&artifact.bank, &noun_sentence);
                    decide_confounder(&biased_predicate, &query_predicate)
                };
                out.push((q.id, d));
            }
        }
    }
    Ok(out)
}

/// Pretrain the confounder bank against the naive model's (frozen, initial)
/// sentence encoder and freeze it.
pub fn pretrain_bank(
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(BankArtifact, PretrainReport), HarnessError> {
    cfg.validate()?;
    let dims = model_dims(cfg, corpus);
    let encoder = RetrievalModel::init(ModelMode::Naive, dims, cfg.seed, "nmr")?;
    let mut items = Vec::new();
    for q in corpus.queries_in(Split::Train) {
        let views = corpus.query_views(q);
        if views.nouns.is_empty() || views.predicates.is_empty() {
            continue;
        }
        items.push(PretrainItem {
            query_id: q.id,
            noun_sentence: sentence_encoding_value(&encoder, &views.nouns)?,
            target: sentence_encoding_value(&encoder, &views.predicates)?,
        });
    }
    let mut bank = ConfounderBank::init(cfg.cooc_k, cfg.d, seeds::stream(cfg.seed, "bank", 0))?;
    let report = pretrain_confounder(&items, &mut bank, cfg.confounder_epochs, cfg.confounder_lr)?;
    Ok((BankArtifact { bank, encoder, seed: cfg.seed }, report))
}

struct TrainSample {
    query_id: usize,
    video_id: usize,
    span: (usize, usize),
    tokens_full: Vec<usize>,
    tokens_nouns: Vec<usize>,
}

/// Train one variant on a corpus. `resume` continues from a checkpoint
/// bit-exactly; the bank artifact is required for confounder-rule variants.
pub fn train(
    cfg: &TrainConfig,
    corpus: &Corpus,
    variant: Variant,
    bank: Option<&BankArtifact>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let kn = knobs(variant, cfg);
    let margins = cfg.margins();
    let dims = model_dims(cfg, corpus);
    dims.validate()?;

    let mut nmr = RetrievalModel::init(ModelMode::Naive, dims, cfg.seed, "nmr")?;
    let mut bmr = RetrievalModel::init(ModelMode::Biased, dims, cfg.seed, "bmr")?;
    if kn.freeze_alpha {
        nmr.alpha = Tensor::scalar(0.0).unwrap();
        bmr.alpha = Tensor::scalar(0.0).unwrap();
    }

    let n_params: Vec<usize> = {
        let mut sizes = Vec::new();
        nmr.visit_params(&mut |_, t| sizes.push(t.numel()));
        bmr.visit_params(&mut |_, t| sizes.push(t.numel()));
        sizes
    };
    let mut adam = Adam::new(cfg.learning_rate, &n_params);
    let mut start_epoch = 0;

    if let Some(ckpt) = resume {
        if ckpt.config != *cfg {
            return Err(HarnessError::Config(
                "resume checkpoint was produced with a different config".into(),
            ));
        }
        if ckpt.variant != variant {
            return Err(HarnessError::Config("resume checkpoint trained a different variant".into()));
        }
        super::restore_params(&mut nmr, &ckpt.nmr)?;
        super::restore_params(&mut bmr, &ckpt.bmr)?;
        adam = ckpt.adam;
        start_epoch = ckpt.epoch;
    }

    // Decisions are pure functions of (corpus, rule, bank); compute once.
    let decisions: Vec<(usize, SquidDecision)> = match kn.rule {
        Some(rule) => compute_decisions(cfg, corpus, rule, bank)?,
        None => Vec::new(),
    };
    let decision_records: Vec<DecisionRecord> = decisions
        .iter()
        .map(|(qid, d)| DecisionRecord {
            query_id: *qid,
            rule: d.rule,
            branch: d.branch,
            cosine: d.cosine,
            degenerate: d.degenerate,
        })
        .collect();
    let decision_of = |query_id: usize| -> Option<&SquidDecision> {
        decisions
            .binary_search_by_key(&query_id, |(qid, _)| *qid)
            .ok()
            .map(|i| &decisions[i].1)
    };

    let samples: Vec<TrainSample> = corpus
        .queries_in(Split::Train)
        .map(|q| {
            let views = corpus.query_views(q);
            TrainSample {
                query_id: q.id,
                video_id: q.video_id,
                span: q.span,
                tokens_full: views.tokens,
                tokens_nouns: views.nouns,
            }
        })
        .collect();
    if samples.is_empty() {
        return Err(HarnessError::Data("corpus has no training queries".into()));
    }

    let param_count = n_params.len();
    let nmr_count = param_count - {
        let mut c = 0;
        bmr.visit_params(&mut |_, _| c += 1);
        c
    };

    let mut trace = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, "order", epoch as u64));

        let mut sum_naive = 0.0;
        let mut sum_biased = 0.0;
        let mut sum_debias = 0.0;
        let mut n_debias = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let batch_len = batch.len();
            // The debiasing term averages over the batch's non-degenerate
            // samples only.
            let n_active = batch
                .iter()
                .filter(|i| {
                    kn.use_bmr
                        && !samples[**i].tokens_nouns.is_empty()
                        && decision_of(samples[**i].query_id).map(|d| !d.degenerate).unwrap_or(false)
                })
                .count();

            let mut grad_acc: Vec<Option<Vec<f64>>> = vec![None; param_count];
            for &si in batch {
                let sample = &samples[si];
                let video = &corpus.videos[sample.video_id];

                let mut g = Graph::new();
                let bound_nmr = nmr.bind(&mut g, true);
                let v = embed_video(&mut g, &bound_nmr, &video.frames)?;
                let v_star = match_subtitles(&mut g, &bound_nmr, v, video)?;
                let q_emb = embed_text(&mut g, &bound_nmr, &sample.tokens_full)?;
                let v_dag = match_query(&mut g, &bound_nmr, v_star, q_emb)?;
                let cmp_n = conditional_moment_predict(&mut g, &bound_nmr, v_dag, q_emb)?;
                let loss_naive = retrieval_loss(&mut g, &cmp_n, sample.span.0, sample.span.1)?;
                sum_naive += g.scalar_value(loss_naive);
                let mut total = g.scale(loss_naive, 1.0 / batch_len as f64);

                let use_sample_bmr = kn.use_bmr && !sample.tokens_nouns.is_empty();
                let mut bound_bmr = None;
                if use_sample_bmr {
                    let bb = bmr.bind(&mut g, true);
                    let vb = embed_video(&mut g, &bb, &video.frames)?;
                    let vb_star = match_subtitles(&mut g, &bb, vb, video)?;
                    let qo_emb = embed_text(&mut g, &bb, &sample.tokens_nouns)?;
                    let vb_dag = match_query(&mut g, &bb, vb_star, qo_emb)?;
                    let cmp_b = conditional_moment_predict(&mut g, &bb, vb_dag, qo_emb)?;
                    let loss_biased = retrieval_loss(&mut g, &cmp_b, sample.span.0, sample.span.1)?;
                    sum_biased += g.scalar_value(loss_biased);
                    let scaled = g.scale(loss_biased, 1.0 / batch_len as f64);
                    total = g.add(total, scaled);

                    if let Some(decision) = decision_of(sample.query_id) {
                        if !decision.degenerate && kn.lambda > 0.0 && n_active > 0 {
                            // The biased similarity is read out as a value so
                            // the hinge cannot backpropagate into the biased
                            // model.
                            let sim_b_node = video_score(&mut g, &cmp_b);
                            let sim_biased = g.scalar_value(sim_b_node);
                            let sim_naive = video_score(&mut g, &cmp_n);
                            if let Some(hinge) =
                                squid_loss(&mut g, decision, sim_naive, sim_biased, &margins)
                            {
                                sum_debias += g.scalar_value(hinge);
                                n_debias += 1;
                                let scaled = g.scale(hinge, kn.lambda / n_active as f64);
                                total = g.add(total, scaled);
                            }
                        }
                    }
                    bound_bmr = Some(bb);
                }

                let total_value = g.scalar_value(total);
                if !total_value.is_finite() {
                    return Err(HarnessError::Divergence(format!(
                        "non-finite loss {total_value} at epoch {epoch}, query {}",
                        sample.query_id
                    )));
                }
                let grads = g.backward(total)?;
                for (slot, (_, id)) in bound_nmr.named_ids().enumerate() {
                    if let Some(gv) = grads.get(id) {
                        accumulate(&mut grad_acc[slot], gv);
                    }
                }
                if let Some(bb) = bound_bmr {
                    for (slot, (_, id)) in bb.named_ids().enumerate() {
                        if let Some(gv) = grads.get(id) {
                            accumulate(&mut grad_acc[nmr_count + slot], gv);
                        }
                    }
                }
            }

            if kn.freeze_alpha {
                let mut idx = 0;
                let mut freeze = |name: String| {
                    if name == "alpha" {
                        grad_acc[idx] = None;
                    }
                    idx += 1;
                };
                nmr.visit_params(&mut |n, _| freeze(n));
                bmr.visit_params(&mut |n, _| freeze(n));
            }

            adam.begin_step();
            let mut slot = 0;
            let mut step_err: Option<crate::numcore::NumError> = None;
            let mut apply = |adam: &mut Adam, t: &mut Tensor, grad: &Option<Vec<f64>>, slot: usize| {
                if let Some(grad) = grad {
                    if let Err(e) = adam.update_param(slot, t, grad) {
                        step_err.get_or_insert(e);
                    }
                }
            };
            nmr.visit_params_mut(&mut |_, t| {
                apply(&mut adam, t, &grad_acc[slot], slot);
                slot += 1;
            });
            bmr.visit_params_mut(&mut |_, t| {
                apply(&mut adam, t, &grad_acc[slot], slot);
                slot += 1;
            });
            if let Some(e) = step_err {
                return Err(HarnessError::Divergence(e.to_string()));
            }
        }

        let n = samples.len() as f64;
        let val_r1 = if cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs)
        {
            Some(svmr_r1(
                &nmr,
                corpus,
                &[Split::TestCongruent, Split::TestAdverse],
                cfg.l_max,
                0.5,
            )?)
        } else {
            None
        };
        trace.push(EpochStats {
            epoch,
            loss_naive: sum_naive / n,
            loss_biased: if kn.use_bmr { sum_biased / n } else { 0.0 },
            loss_debias: if n_debias > 0 { sum_debias / n_debias as f64 } else { 0.0 },
            val_r1,
        });
    }

    let checkpoint = Checkpoint {
        config: cfg.clone(),
        variant,
        epoch: cfg.epochs,
        nmr: nmr.named_params(),
        bmr: bmr.named_params(),
        bank: bank.cloned(),
        adam,
    };
    Ok(TrainOutcome { checkpoint, trace, decisions: decision_records })
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grad) {
                *a += g;
            }
        }
        None => *slot = Some(grad.to_vec()),
    }
}

/// Write the decision audit log as JSON lines.
pub fn write_decision_log(records: &[DecisionRecord], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Write the per-epoch metric trace as JSON lines.
pub fn write_trace(trace: &[EpochStats], path: &Path) -> Result<(), HarnessError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trace {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}
