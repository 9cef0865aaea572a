//! Retrieval model: input embedders, modality matching attention,
//! video-subtitle and video-query matching, conditional moment prediction,
//! and the per-model retrieval loss.
//!
//! The same structure is instantiated twice with independent parameters: a
//! naive model fed the full query and a biased model fed only the query's
//! nouns.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::{
    lstm_mean_pool, multihead_self_attention, AttentionIds, Graph, LstmIds, NumError, NumResult,
    Tensor, TensorId,
};
use crate::seeds;
use crate::textproc::TokenId;

// ── Data types ───────────────────────────────────────────────────────

/// One subtitle: an inclusive frame span plus its token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtitleEntry {
    pub span: (usize, usize),
    pub tokens: Vec<TokenId>,
}

/// Ground-truth moment span for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSpan {
    pub query_id: usize,
    pub span: (usize, usize),
}

/// A video: synthetic frame features, a subtitle track and the ground-truth
/// moments annotated on it.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: usize,
    /// N_v x D_in frame feature matrix.
    pub frames: Tensor,
    pub subtitles: Vec<SubtitleEntry>,
    pub moments: Vec<GroundTruthSpan>,
}

impl VideoSample {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Subtitle spans must be sorted, disjoint and within range; moment
    /// spans must satisfy start <= end < N_v.
    pub fn validate(&self) -> NumResult<()> {
        let n = self.n_frames();
        let mut prev_end: Option<usize> = None;
        for sub in &self.subtitles {
            let (st, ed) = sub.span;
            if st > ed || ed >= n {
                return Err(NumError::Dimension(format!(
                    "subtitle span ({st},{ed}) invalid for {n} frames"
                )));
            }
            if let Some(pe) = prev_end {
                if st <= pe {
                    return Err(NumError::Dimension("subtitle spans overlap or are unsorted".into()));
                }
            }
            if sub.tokens.is_empty() {
                return Err(NumError::Dimension("subtitle with no tokens".into()));
            }
            prev_end = Some(ed);
        }
        for m in &self.moments {
            let (st, ed) = m.span;
            if st > ed || ed >= n {
                return Err(NumError::Dimension(format!(
                    "moment span ({st},{ed}) invalid for {n} frames"
                )));
            }
        }
        Ok(())
    }
}

/// Start/end probability sequences plus the nonnegative start-information
/// signal feeding the end-time prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentDistribution {
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
    pub i_start: Vec<f64>,
}

impl MomentDistribution {
    /// Validates the normalization invariants: both distributions sum to 1
    /// within 1e-9 and the start signal is elementwise nonnegative.
    pub fn new(p_start: Vec<f64>, p_end: Vec<f64>, i_start: Vec<f64>) -> NumResult<Self> {
        for (name, p) in [("p_start", &p_start), ("p_end", &p_end)] {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(NumError::Numeric(format!("{name} sums to {sum}, outside 1e-9 of 1")));
            }
            if p.iter().any(|v| *v < 0.0) {
                return Err(NumError::Numeric(format!("{name} has a negative entry")));
            }
        }
        if i_start.iter().any(|v| *v < 0.0) {
            return Err(NumError::Numeric("i_start has a negative entry".into()));
        }
        Ok(MomentDistribution { p_start, p_end, i_start })
    }

    pub fn len(&self) -> usize {
        self.p_start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_start.is_empty()
    }
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::matrix(1, d, vec![1.0; d]).unwrap(),
            beta: Tensor::zeros(1, d),
            eps: 1e-5,
        }
    }
}

/// Shared input embedders: a video projection, a token table, per-modality
/// layer norms, and the two token-type vectors that mark video rows apart
/// from text rows inside the matching attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    pub video_proj: Tensor,
    pub token_table: Tensor,
    pub ln_video: LayerNormParams,
    pub ln_text: LayerNormParams,
    pub type_video: Tensor,
    pub type_text: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayerParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
}

/// One modality-matching-attention block: self-attention layers over the
/// typed concatenation plus the residual layer norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmaParams {
    pub layers: Vec<AttentionLayerParams>,
    pub ln: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_ii: Tensor,
    pub w_if: Tensor,
    pub w_ig: Tensor,
    pub w_io: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_hg: Tensor,
    pub w_ho: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_g: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dParams {
    pub taps: Tensor,
    pub bias: Tensor,
}

/// Which query view the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    /// Full query.
    Naive,
    /// Noun view only; learns the retrieval bias on purpose.
    Biased,
}

/// Structural hyperparameters shared by both model instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub attention_layers: usize,
    pub kernel_width: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn validate(&self) -> NumResult<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(NumError::Config(format!(
                "model width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.kernel_width % 2 == 0 {
            return Err(NumError::Config(format!(
                "conv kernel width must be odd, got {}",
                self.kernel_width
            )));
        }
        if self.attention_layers == 0 {
            return Err(NumError::Config("need at least one attention layer".into()));
        }
        if self.d < 2 {
            return Err(NumError::Config("model width must be >= 2".into()));
        }
        Ok(())
    }
}

/// Full parameter set of one retrieval model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalModel {
    pub mode: ModelMode,
    pub dims: ModelDims,
    pub embed: EmbedderParams,
    pub mma_subtitle: MmaParams,
    pub mma_query: MmaParams,
    pub sentence_lstm: LstmParams,
    pub conv_start: Conv1dParams,
    pub conv_end: Conv1dParams,
    /// Learnable scalar coupling the start logits into the end prediction.
    pub alpha: Tensor,
}

fn randn(rows: usize, cols: usize, std: f64, seed: u64, tag: &str, idx: u64) -> Tensor {
    let mut rng = seeds::rng(seed, tag, idx);
    let dist = Normal::new(0.0, std).unwrap();
    let vals: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Tensor::matrix(rows, cols, vals).unwrap()
}

fn init_attention(dims: &ModelDims, seed: u64, tag: &str) -> MmaParams {
    let dh = dims.d / dims.heads;
    let std = 1.0 / (dims.d as f64).sqrt();
    let layers = (0..dims.attention_layers)
        .map(|l| AttentionLayerParams {
            wq: (0..dims.heads)
                .map(|h| randn(dims.d, dh, std, seed, &format!("{tag}.l{l}.wq"), h as u64))
                .collect(),
            wk: (0..dims.heads)
                .map(|h| randn(dims.d, dh, std, seed, &format!("{tag}.l{l}.wk"), h as u64))
                .collect(),
            wv: (0..dims.heads)
                .map(|h| randn(dims.d, dh, std, seed, &format!("{tag}.l{l}.wv"), h as u64))
                .collect(),
            wo: (0..dims.heads)
                .map(|h| randn(dh, dims.d, std, seed, &format!("{tag}.l{l}.wo"), h as u64))
                .collect(),
        })
        .collect();
    MmaParams { layers, ln: LayerNormParams::identity(dims.d) }
}

impl RetrievalModel {
    /// Seeded initialization. The two model instances of a run use different
    /// tags so they share no parameters.
    pub fn init(mode: ModelMode, dims: ModelDims, seed: u64, tag: &str) -> NumResult<Self> {
        dims.validate()?;
        let d = dims.d;
        // Small sentence-encoder init keeps video-query similarities near
        // zero at the start, where the hinge margins are live. The token
        // table starts large relative to the positional encoding so distinct
        // tokens yield well-spread (near-orthogonal) sentence vectors; the
        // confounder rule thresholds cosines of these vectors at zero.
        let lstm_std = 0.35 / (d as f64).sqrt();
        let t = |sub: &str| format!("{tag}.{sub}");
        Ok(RetrievalModel {
            mode,
            dims,
            embed: EmbedderParams {
                video_proj: randn(dims.d_in, d, 1.0 / (dims.d_in as f64).sqrt(), seed, &t("video_proj"), 0),
                token_table: randn(dims.vocab_size, d, 3.0, seed, &t("token_table"), 0),
                ln_video: LayerNormParams::identity(d),
                ln_text: LayerNormParams::identity(d),
                type_video: randn(1, d, 0.1, seed, &t("type_video"), 0),
                type_text: randn(1, d, 0.1, seed, &t("type_text"), 0),
            },
            mma_subtitle: init_attention(&dims, seed, &t("mma_subtitle")),
            mma_query: init_attention(&dims, seed, &t("mma_query")),
            sentence_lstm: LstmParams {
                w_ii: randn(d, d, lstm_std, seed, &t("lstm.w_ii"), 0),
                w_if: randn(d, d, lstm_std, seed, &t("lstm.w_if"), 0),
                w_ig: randn(d, d, lstm_std, seed, &t("lstm.w_ig"), 0),
                w_io: randn(d, d, lstm_std, seed, &t("lstm.w_io"), 0),
                w_hi: randn(d, d, lstm_std, seed, &t("lstm.w_hi"), 0),
                w_hf: randn(d, d, lstm_std, seed, &t("lstm.w_hf"), 0),
                w_hg: randn(d, d, lstm_std, seed, &t("lstm.w_hg"), 0),
                w_ho: randn(d, d, lstm_std, seed, &t("lstm.w_ho"), 0),
                b_i: Tensor::zeros(1, d),
                b_f: Tensor::zeros(1, d),
                b_g: Tensor::zeros(1, d),
                b_o: Tensor::zeros(1, d),
            },
            conv_start: Conv1dParams {
                taps: randn(1, dims.kernel_width, 0.5, seed, &t("conv_start.taps"), 0),
                bias: Tensor::zeros(1, 1),
            },
            conv_end: Conv1dParams {
                taps: randn(1, dims.kernel_width, 0.5, seed, &t("conv_end.taps"), 0),
                bias: Tensor::zeros(1, 1),
            },
            alpha: Tensor::scalar(1.0).unwrap(),
        })
    }

    /// Visit every parameter tensor with a stable name, in a fixed order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        let e = &self.embed;
        f("embed.video_proj".into(), &e.video_proj);
        f("embed.token_table".into(), &e.token_table);
        f("embed.ln_video.gamma".into(), &e.ln_video.gamma);
        f("embed.ln_video.beta".into(), &e.ln_video.beta);
        f("embed.ln_text.gamma".into(), &e.ln_text.gamma);
        f("embed.ln_text.beta".into(), &e.ln_text.beta);
        f("embed.type_video".into(), &e.type_video);
        f("embed.type_text".into(), &e.type_text);
        for (name, mma) in [("mma_subtitle", &self.mma_subtitle), ("mma_query", &self.mma_query)] {
            for (l, layer) in mma.layers.iter().enumerate() {
                for h in 0..layer.wq.len() {
                    f(format!("{name}.l{l}.h{h}.wq"), &layer.wq[h]);
                    f(format!("{name}.l{l}.h{h}.wk"), &layer.wk[h]);
                    f(format!("{name}.l{l}.h{h}.wv"), &layer.wv[h]);
                    f(format!("{name}.l{l}.h{h}.wo"), &layer.wo[h]);
                }
            }
            f(format!("{name}.ln.gamma"), &mma.ln.gamma);
            f(format!("{name}.ln.beta"), &mma.ln.beta);
        }
        let l = &self.sentence_lstm;
        f("lstm.w_ii".into(), &l.w_ii);
        f("lstm.w_if".into(), &l.w_if);
        f("lstm.w_ig".into(), &l.w_ig);
        f("lstm.w_io".into(), &l.w_io);
        f("lstm.w_hi".into(), &l.w_hi);
        f("lstm.w_hf".into(), &l.w_hf);
        f("lstm.w_hg".into(), &l.w_hg);
        f("lstm.w_ho".into(), &l.w_ho);
        f("lstm.b_i".into(), &l.b_i);
        f("lstm.b_f".into(), &l.b_f);
        f("lstm.b_g".into(), &l.b_g);
        f("lstm.b_o".into(), &l.b_o);
        f("conv_start.taps".into(), &self.conv_start.taps);
        f("conv_start.bias".into(), &self.conv_start.bias);
        f("conv_end.taps".into(), &self.conv_end.taps);
        f("conv_end.bias".into(), &self.conv_end.bias);
        f("alpha".into(), &self.alpha);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        let e = &mut self.embed;
        f("embed.video_proj".into(), &mut e.video_proj);
        f("embed.token_table".into(), &mut e.token_table);
        f("embed.ln_video.gamma".into(), &mut e.ln_video.gamma);
        f("embed.ln_video.beta".into(), &mut e.ln_video.beta);
        f("embed.ln_text.gamma".into(), &mut e.ln_text.gamma);
        f("embed.ln_text.beta".into(), &mut e.ln_text.beta);
        f("embed.type_video".into(), &mut e.type_video);
        f("embed.type_text".into(), &mut e.type_text);
        for (name, mma) in [
            ("mma_subtitle", &mut self.mma_subtitle),
            ("mma_query", &mut self.mma_query),
        ] {
            for (l, layer) in mma.layers.iter_mut().enumerate() {
                for h in 0..layer.wq.len() {
                    f(format!("{name}.l{l}.h{h}.wq"), &mut layer.wq[h]);
                    f(format!("{name}.l{l}.h{h}.wk"), &mut layer.wk[h]);
                    f(format!("{name}.l{l}.h{h}.wv"), &mut layer.wv[h]);
                    f(format!("{name}.l{l}.h{h}.wo"), &mut layer.wo[h]);
                }
            }
            f(format!("{name}.ln.gamma"), &mut mma.ln.gamma);
            f(format!("{name}.ln.beta"), &mut mma.ln.beta);
        }
        let l = &mut self.sentence_lstm;
        f("lstm.w_ii".into(), &mut l.w_ii);
        f("lstm.w_if".into(), &mut l.w_if);
        f("lstm.w_ig".into(), &mut l.w_ig);
        f("lstm.w_io".into(), &mut l.w_io);
        f("lstm.w_hi".into(), &mut l.w_hi);
        f("lstm.w_hf".into(), &mut l.w_hf);
        f("lstm.w_hg".into(), &mut l.w_hg);
        f("lstm.w_ho".into(), &mut l.w_ho);
        f("lstm.b_i".into(), &mut l.b_i);
        f("lstm.b_f".into(), &mut l.b_f);
        f("lstm.b_g".into(), &mut l.b_g);
        f("lstm.b_o".into(), &mut l.b_o);
        f("conv_start.taps".into(), &mut self.conv_start.taps);
        f("conv_start.bias".into(), &mut self.conv_start.bias);
        f("conv_end.taps".into(), &mut self.conv_end.taps);
        f("conv_end.bias".into(), &mut self.conv_end.bias);
        f("alpha".into(), &mut self.alpha);
    }

    /// Flat named parameter list, in visiting order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Register every parameter on a graph, marking them trainable when
    /// `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut names = Vec::new();
        let mut ids = Vec::new();
        self.visit_params(&mut |name, t| {
            let tensor = if trainable { t.clone().with_grad() } else { t.clone() };
            names.push(name);
            ids.push(g.input(&tensor));
        });
        BoundModel {
            mode: self.mode,
            dims: self.dims,
            ln_video_eps: self.embed.ln_video.eps,
            ln_text_eps: self.embed.ln_text.eps,
            ln_mma_sub_eps: self.mma_subtitle.ln.eps,
            ln_mma_query_eps: self.mma_query.ln.eps,
            names,
            ids,
        }
    }
}

// ── Graph-bound model ────────────────────────────────────────────────

/// A model's parameters registered on one graph, addressable by name.
pub struct BoundModel {
    pub mode: ModelMode,
    pub dims: ModelDims,
    ln_video_eps: f64,
    ln_text_eps: f64,
    ln_mma_sub_eps: f64,
    ln_mma_query_eps: f64,
    names: Vec<String>,
    ids: Vec<TensorId>,
}

impl BoundModel {
    pub fn id(&self, name: &str) -> TensorId {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.ids[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn named_ids(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.names.iter().map(|s| s.as_str()).zip(self.ids.iter().copied())
    }

    fn attention_ids(&self, block: &str, layer: usize, heads: usize) -> AttentionIds {
        AttentionIds {
            wq: (0..heads).map(|h| self.id(&format!("{block}.l{layer}.h{h}.wq"))).collect(),
            wk: (0..heads).map(|h| self.id(&format!("{block}.l{layer}.h{h}.wk"))).collect(),
            wv: (0..heads).map(|h| self.id(&format!("{block}.l{layer}.h{h}.wv"))).collect(),
            wo: (0..heads).map(|h| self.id(&format!("{block}.l{layer}.h{h}.wo"))).collect(),
        }
    }

    fn lstm_ids(&self) -> LstmIds {
        LstmIds {
            w_ii: self.id("lstm.w_ii"),
            w_if: self.id("lstm.w_if"),
            w_ig: self.id("lstm.w_ig"),
            w_io: self.id("lstm.w_io"),
            w_hi: self.id("lstm.w_hi"),
            w_hf: self.id("lstm.w_hf"),
            w_hg: self.id("lstm.w_hg"),
            w_ho: self.id("lstm.w_ho"),
            b_i: self.id("lstm.b_i"),
            b_f: self.id("lstm.b_f"),
            b_g: self.id("lstm.b_g"),
            b_o: self.id("lstm.b_o"),
        }
    }
}

/// Sinusoidal positional encoding for `n` positions of width `d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut vals = Vec::with_capacity(n * d);
    for pos in 0..n {
        for j in 0..d {
            let pair = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            vals.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(n, d, vals).unwrap()
}

/// Project frame features to model width, add positional encoding, layer
/// norm. Output is N_v x d.
pub fn embed_video(g: &mut Graph, bm: &BoundModel, frames: &Tensor) -> NumResult<TensorId> {
    if frames.cols() != bm.dims.d_in {
        return Err(NumError::Dimension(format!(
            "video features have width {}, embedder expects {}",
            frames.cols(),
            bm.dims.d_in
        )));
    }
    let v = g.input(frames);
    let proj = g.matmul(v, bm.id("embed.video_proj"));
    let pe = g.constant(
        frames.rows(),
        bm.dims.d,
        positional_encoding(frames.rows(), bm.dims.d).values().to_vec(),
    );
    let summed = g.add(proj, pe);
    g.layer_norm(summed, bm.id("embed.ln_video.gamma"), bm.id("embed.ln_video.beta"), bm.ln_video_eps)
}

/// Token table lookup, positional encoding, layer norm. Output is L x d.
/// Used identically for subtitles, the full query and its filtered views.
pub fn embed_text(g: &mut Graph, bm: &BoundModel, tokens: &[TokenId]) -> NumResult<TensorId> {
    if tokens.is_empty() {
        return Err(NumError::Dimension("embed_text of an empty token sequence".into()));
    }
    let emb = g.embed_lookup(bm.id("embed.token_table"), tokens)?;
    let pe = g.constant(
        tokens.len(),
        bm.dims.d,
        positional_encoding(tokens.len(), bm.dims.d).values().to_vec(),
    );
    let summed = g.add(emb, pe);
    g.layer_norm(summed, bm.id("embed.ln_text.gamma"), bm.id("embed.ln_text.beta"), bm.ln_text_eps)
}

#[derive(Debug, Clone, Copy)]
enum MmaBlock {
    Subtitle,
    Query,
}

/// Modality matching attention: type-tag both inputs, concatenate along the
/// row axis, self-attend, slice the video rows back, residual-add and layer
/// norm. Output keeps the shape of `x`.
fn mma(g: &mut Graph, bm: &BoundModel, block: MmaBlock, x: TensorId, y: TensorId) -> NumResult<TensorId> {
    let (n, dx) = g.shape(x);
    let (_, dy) = g.shape(y);
    if dx != dy || dx != bm.dims.d {
        return Err(NumError::Dimension(format!(
            "mma width mismatch: x is {dx}, y is {dy}, model is {}",
            bm.dims.d
        )));
    }
    let (name, eps) = match block {
        MmaBlock::Subtitle => ("mma_subtitle", bm.ln_mma_sub_eps),
        MmaBlock::Query => ("mma_query", bm.ln_mma_query_eps),
    };
    let typed_x = g.add_row(x, bm.id("embed.type_video"));
    let typed_y = g.add_row(y, bm.id("embed.type_text"));
    let mut z = g.concat_rows(typed_x, typed_y);
    for layer in 0..bm.dims.attention_layers {
        let ids = bm.attention_ids(name, layer, bm.dims.heads);
        z = multihead_self_attention(g, z, &ids, bm.dims.heads)?;
    }
    let video_rows = g.slice_rows(z, 0, n);
    let residual = g.add(video_rows, typed_x);
    g.layer_norm(
        residual,
        bm.id(&format!("{name}.ln.gamma")),
        bm.id(&format!("{name}.ln.beta")),
        eps,
    )
}

/// Assign every frame to a subtitle clip. Covered frames go to their own
/// subtitle; uncovered frames join the temporally nearest one (ties to the
/// earlier subtitle). Because spans are sorted and disjoint the clips come
/// out as consecutive frame ranges covering [0, n).
pub fn frame_clips(n_frames: usize, spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if spans.is_empty() {
        return vec![(0, n_frames)];
    }
    let owner: Vec<usize> = (0..n_frames)
        .map(|f| {
            let mut best = 0usize;
            let mut best_dist = usize::MAX;
            for (i, (st, ed)) in spans.iter().enumerate() {
                let dist = if f < *st {
                    *st - f
                } else if f > *ed {
                    f - *ed
                } else {
                    0
                };
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut clips = Vec::with_capacity(spans.len());
    let mut start = 0;
    for f in 1..=n_frames {
        if f == n_frames || owner[f] != owner[f - 1] {
            clips.push((start, f - start));
            start = f;
        }
    }
    clips
}

/// Video-subtitle matching: split frames into clips, run each clip through
/// the subtitle MMA with its subtitle embedding, and reunite the clips in
/// original frame order. A video with no subtitles passes through unchanged.
pub fn match_subtitles(
    g: &mut Graph,
    bm: &BoundModel,
    video: TensorId,
    sample: &VideoSample,
) -> NumResult<TensorId> {
    if sample.subtitles.is_empty() {
        return Ok(video);
    }
    let (n, _) = g.shape(video);
    let spans: Vec<(usize, usize)> = sample.subtitles.iter().map(|s| s.span).collect();
    let clips = frame_clips(n, &spans);
    debug_assert_eq!(clips.len(), sample.subtitles.len());
    let mut out: Option<TensorId> = None;
    for (i, (start, len)) in clips.iter().enumerate() {
        let clip = g.slice_rows(video, *start, *len);
        let sub = embed_text(g, bm, &sample.subtitles[i].tokens)?;
        let matched = mma(g, bm, MmaBlock::Subtitle, clip, sub)?;
        out = Some(match out {
            None => matched,
            Some(acc) => g.concat_rows(acc, matched),
        });
    }
    Ok(out.expect("at least one clip"))
}

/// Video-query matching through the query MMA block.
pub fn match_query(
    g: &mut Graph,
    bm: &BoundModel,
    subtitle_matched: TensorId,
    query_emb: TensorId,
) -> NumResult<TensorId> {
    mma(g, bm, MmaBlock::Query, subtitle_matched, query_emb)
}

/// Graph handles produced by conditional moment prediction.
pub struct CmpNodes {
    /// Frame-by-query similarity column (N_v x 1); also the video score
    /// source and the hinge similarity.
    pub sim: TensorId,
    pub p_start: TensorId,
    pub p_end: TensorId,
    pub i_start: TensorId,
}

/// Sentence encoder: LSTM over the embedded tokens, mean-pooled to 1 x d.
pub fn sentence_encode(g: &mut Graph, bm: &BoundModel, text_emb: TensorId) -> NumResult<TensorId> {
    lstm_mean_pool(g, &bm.lstm_ids(), text_emb)
}

/// Value-level sentence encoding of a raw token sequence through one model.
pub fn sentence_encoding_value(model: &RetrievalModel, tokens: &[TokenId]) -> NumResult<Vec<f64>> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let emb = embed_text(&mut g, &bm, tokens)?;
    let pooled = sentence_encode(&mut g, &bm, emb)?;
    Ok(g.value(pooled).to_vec())
}

/// Conditional moment prediction. The start conv is evaluated once and
/// reused for both the start distribution and the ReLU'd start information
/// that conditions the end distribution through the learnable alpha.
pub fn conditional_moment_predict(
    g: &mut Graph,
    bm: &BoundModel,
    query_matched: TensorId,
    query_emb: TensorId,
) -> NumResult<CmpNodes> {
    let sentence = sentence_encode(g, bm, query_emb)?;
    let sim = g.matmul_nt(query_matched, sentence);
    cmp_from_similarity(g, bm, sim)
}

/// The conv/softmax tail of conditional moment prediction, given the
/// frame-by-query similarity column.
pub fn cmp_from_similarity(g: &mut Graph, bm: &BoundModel, sim: TensorId) -> NumResult<CmpNodes> {
    let start_logits = g.conv1d_same(sim, bm.id("conv_start.taps"), bm.id("conv_start.bias"))?;
    let p_start = g.softmax_col(start_logits);
    let i_start = g.relu(start_logits);
    let scaled = g.mul_scalar(i_start, bm.id("alpha"));
    let end_input = g.add(sim, scaled);
    let end_logits = g.conv1d_same(end_input, bm.id("conv_end.taps"), bm.id("conv_end.bias"))?;
    let p_end = g.softmax_col(end_logits);
    Ok(CmpNodes { sim, p_start, p_end, i_start })
}

/// Cross-entropy retrieval loss against the ground-truth span.
pub fn retrieval_loss(
    g: &mut Graph,
    cmp: &CmpNodes,
    gt_start: usize,
    gt_end: usize,
) -> NumResult<TensorId> {
    let (n, _) = g.shape(cmp.p_start);
    if gt_start > gt_end || gt_end >= n {
        return Err(NumError::Dimension(format!(
            "ground-truth span ({gt_start},{gt_end}) invalid for {n} frames"
        )));
    }
    let ce_st = g.cross_entropy(cmp.p_start, gt_start)?;
    let ce_ed = g.cross_entropy(cmp.p_end, gt_end)?;
    Ok(g.add(ce_st, ce_ed))
}

/// Extract a validated [`MomentDistribution`] from CMP graph nodes.
pub fn moment_distribution(g: &Graph, cmp: &CmpNodes) -> NumResult<MomentDistribution> {
    MomentDistribution::new(
        g.value(cmp.p_start).to_vec(),
        g.value(cmp.p_end).to_vec(),
        g.value(cmp.i_start).to_vec(),
    )
}

/// Joint argmax over start/end pairs with i <= j and span length at most
/// `l_max`. Ties prefer the smallest start, then the smallest end.
pub fn decode_moment(dist: &MomentDistribution, l_max: usize) -> (usize, usize) {
    assert!(l_max >= 1, "l_max must be >= 1");
    let n = dist.len();
    let mut best = (0usize, 0usize);
    let mut best_p = f64::NEG_INFINITY;
    for i in 0..n {
        let j_hi = (i + l_max - 1).min(n - 1);
        for j in i..=j_hi {
            let p = dist.p_start[i] * dist.p_end[j];
            if p > best_p {
                best_p = p;
                best = (i, j);
            }
        }
    }
    best
}

/// Ranked span candidates (score descending, ties by start then end),
/// limited to `top` entries.
pub fn rank_moments(dist: &MomentDistribution, l_max: usize, top: usize) -> Vec<(usize, usize, f64)> {
    let n = dist.len();
    let mut cands = Vec::new();
    for i in 0..n {
        let j_hi = (i + l_max - 1).min(n - 1);
        for j in i..=j_hi {
            cands.push((i, j, dist.p_start[i] * dist.p_end[j]));
        }
    }
    cands.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.cmp(&b.1))
    });
    cands.truncate(top);
    cands
}

/// Video-level score: max over frames of the frame-query similarity. This
/// is the same quantity the hinge losses contrast.
pub fn video_score(g: &mut Graph, cmp: &CmpNodes) -> TensorId {
    g.max_all(cmp.sim)
}
