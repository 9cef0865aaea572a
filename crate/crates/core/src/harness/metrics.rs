//! Temporal IoU, recall@K and evaluation reports.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::synthcorpus::Split;

/// Inclusive frame span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self, HarnessError> {
        if start > end {
            return Err(HarnessError::Data(format!("invalid span ({start}, {end})")));
        }
        Ok(Span { start, end })
    }

    fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Temporal intersection over union of two inclusive spans, computed over
/// the half-open intervals [start, end + 1).
pub fn tiou(a: Span, b: Span) -> f64 {
    let inter_lo = a.start.max(b.start);
    let inter_hi = a.end.min(b.end) + 1;
    let inter = inter_hi.saturating_sub(inter_lo);
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Video retrieval: rank videos, a hit is the ground-truth video.
    Vr,
    /// Single-video moment retrieval: rank spans inside the ground-truth
    /// video, a hit overlaps the ground-truth span.
    Svmr,
    /// Corpus moment retrieval: both conditions at once.
    Vcmr,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Vr => write!(f, "vr"),
            Task::Svmr => write!(f, "svmr"),
            Task::Vcmr => write!(f, "vcmr"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_lowercase().as_str() {
            "vr" => Ok(Task::Vr),
            "svmr" => Ok(Task::Svmr),
            "vcmr" => Ok(Task::Vcmr),
            other => Err(HarnessError::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// One ranked candidate for a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: usize,
    pub span: Option<Span>,
    pub score: f64,
}

/// Everything needed to score one query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: usize,
    pub split: Split,
    pub gt_video: usize,
    pub gt_span: Span,
    /// Ranked best-first. May be shorter than K; missing entries are misses.
    pub predictions: Vec<Prediction>,
}

/// Does a single prediction satisfy the task's hit condition?
pub fn is_hit(task: Task, p: &Prediction, gt_video: usize, gt_span: Span, threshold: f64) -> bool {
    match task {
        Task::Vr => p.video_id == gt_video,
        Task::Svmr => p.span.is_some_and(|s| tiou(s, gt_span) >= threshold),
        Task::Vcmr => {
            p.video_id == gt_video && p.span.is_some_and(|s| tiou(s, gt_span) >= threshold)
        }
    }
}

/// Fraction of queries with a hit among their first K predictions.
pub fn recall_at_k(queries: &[QueryEval], task: Task, k: usize, threshold: f64) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .filter(|q| {
            q.predictions
                .iter()
                .take(k)
                .any(|p| is_hit(task, p, q.gt_video, q.gt_span, threshold))
        })
        .count();
    hits as f64 / queries.len() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallEntry {
    /// None aggregates over all evaluated splits.
    pub split: Option<Split>,
    pub k: usize,
    pub threshold: f64,
    pub value: f64,
}

/// Top-1 outcome for one query, for the per-query CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: usize,
    pub split: Split,
    pub predicted_video: Option<usize>,
    pub predicted_span: Option<Span>,
    /// tIoU of the top-1 span against ground truth; 0 when the predicted
    /// video is wrong (or no span applies).
    pub tiou_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub recalls: Vec<RecallEntry>,
    pub rows: Vec<QueryOutcome>,
}

impl EvalReport {
    /// Score a batch of query evaluations at every (K, threshold) pair,
    /// overall and per split.
    pub fn build(task: Task, ks: &[usize], thresholds: &[f64], queries: &[QueryEval]) -> Self {
        let splits: BTreeSet<u8> = queries.iter().map(|q| split_rank(q.split)).collect();
        let mut recalls = Vec::new();
        for &k in ks {
            for &t in thresholds {
                recalls.push(RecallEntry {
                    split: None,
                    k,
                    threshold: t,
                    value: recall_at_k(queries, task, k, t),
                });
                for s in &splits {
                    let split = split_from_rank(*s);
                    let subset: Vec<QueryEval> =
                        queries.iter().filter(|q| q.split == split).cloned().collect();
                    recalls.push(RecallEntry {
                        split: Some(split),
                        k,
                        threshold: t,
                        value: recall_at_k(&subset, task, k, t),
                    });
                }
            }
        }
        let rows = queries
            .iter()
            .map(|q| {
                let top = q.predictions.first();
                let tiou_top1 = top
                    .map(|p| match task {
                        Task::Svmr => p.span.map(|s| tiou(s, q.gt_span)).unwrap_or(0.0),
                        _ => {
                            if p.video_id == q.gt_video {
                                p.span.map(|s| tiou(s, q.gt_span)).unwrap_or(0.0)
                            } else {
                                0.0
                            }
                        }
                    })
                    .unwrap_or(0.0);
                QueryOutcome {
                    query_id: q.query_id,
                    split: q.split,
                    predicted_video: top.map(|p| p.video_id),
                    predicted_span: top.and_then(|p| p.span),
                    tiou_top1,
                }
            })
            .collect();
        EvalReport { task, ks: ks.to_vec(), thresholds: thresholds.to_vec(), recalls, rows }
    }

    pub fn recall(&self, split: Option<Split>, k: usize, threshold: f64) -> Option<f64> {
        self.recalls
            .iter()
            .find(|r| r.split == split && r.k == k && (r.threshold - threshold).abs() < 1e-9)
            .map(|r| r.value)
    }

    /// Summary metrics as CSV (split, k, threshold, recall).
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "task,split,k,threshold,recall")?;
        for r in &self.recalls {
            let split = r.split.map(split_name).unwrap_or("all");
            writeln!(f, "{},{},{},{},{}", self.task, split, r.k, r.threshold, r.value)?;
        }
        Ok(())
    }

    /// Per-query outcomes as JSON lines.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.rows {
            writeln!(f, "{}", serde_json::to_string(row)?)?;
        }
        Ok(())
    }
}

pub(crate) fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::TestCongruent => "test-congruent",
        Split::TestAdverse => "test-adverse",
        Split::Unsplit => "unsplit",
    }
}

fn split_rank(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::TestCongruent => 1,
        Split::TestAdverse => 2,
        Split::Unsplit => 3,
    }
}

fn split_from_rank(r: u8) -> Split {
    match r {
        0 => Split::Train,
        1 => Split::TestCongruent,
        2 => Split::TestAdverse,
        _ => Split::Unsplit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tiou_hand_cases() {
        let s = |a, b| Span::new(a, b).unwrap();
        assert_eq!(tiou(s(3, 7), s(3, 7)), 1.0);
        assert_eq!(tiou(s(0, 2), s(5, 9)), 0.0);
        // [2,5] vs [4,7]: intersection 2 frames, union 6.
        assert!((tiou(s(2, 5), s(4, 7)) - 1.0 / 3.0).abs() < 1e-12);
        // Symmetry.
        assert_eq!(tiou(s(2, 5), s(4, 7)), tiou(s(4, 7), s(2, 5)));
        assert!(Span::new(5, 2).is_err());
    }

    fn q(gt_video: usize, gt: (usize, usize), preds: Vec<(usize, Option<(usize, usize)>)>) -> QueryEval {
        QueryEval {
            query_id: 0,
            split: Split::TestCongruent,
            gt_video,
            gt_span: Span::new(gt.0, gt.1).unwrap(),
            predictions: preds
                .into_iter()
                .enumerate()
                .map(|(i, (v, s))| Prediction {
                    video_id: v,
                    span: s.map(|(a, b)| Span::new(a, b).unwrap()),
                    score: 1.0 - i as f64 * 0.01,
                })
                .collect(),
        }
    }

    #[test]
    fn recall_trivial_cases() {
        // All top-1 exact.
        let qs = vec![
            q(3, (2, 5), vec![(3, Some((2, 5)))]),
            q(1, (0, 4), vec![(1, Some((0, 4)))]),
        ];
        assert_eq!(recall_at_k(&qs, Task::Vcmr, 1, 0.7), 1.0);

        // Hit only at rank 7.
        let mut preds = vec![(9usize, Some((0usize, 1usize))); 6];
        preds.push((2, Some((4, 8))));
        let qs = vec![q(2, (4, 8), preds)];
        assert_eq!(recall_at_k(&qs, Task::Vcmr, 1, 0.5), 0.0);
        assert_eq!(recall_at_k(&qs, Task::Vcmr, 10, 0.5), 1.0);

        // SVMR ignores the video id; VR ignores the span.
        let qs = vec![q(5, (0, 3), vec![(9, Some((0, 3)))])];
        assert_eq!(recall_at_k(&qs, Task::Svmr, 1, 0.99), 1.0);
        assert_eq!(recall_at_k(&qs, Task::Vr, 1, 0.5), 0.0);
        assert_eq!(recall_at_k(&qs, Task::Vcmr, 1, 0.5), 0.0);
    }

    /// Independent oracle: recompute recall with explicit loops and its own
    /// hit logic.
    fn recall_oracle(queries: &[QueryEval], task: Task, k: usize, thr: f64) -> f64 {
        if queries.is_empty() {
            return 0.0;
        }
        let mut hits = 0usize;
        for q in queries {
            let mut hit = false;
            for (rank, p) in q.predictions.iter().enumerate() {
                if rank >= k {
                    break;
                }
                let video_ok = p.video_id == q.gt_video;
                let span_ok = match p.span {
                    None => false,
                    Some(s) => {
                        let inter = (s.end.min(q.gt_span.end) + 1)
                            .saturating_sub(s.start.max(q.gt_span.start));
                        let union = (s.end - s.start + 1) + (q.gt_span.end - q.gt_span.start + 1)
                            - inter;
                        inter as f64 / union as f64 >= thr
                    }
                };
                let ok = match task {
                    Task::Vr => video_ok,
                    Task::Svmr => span_ok,
                    Task::Vcmr => video_ok && span_ok,
                };
                if ok {
                    hit = true;
                    break;
                }
            }
            if hit {
                hits += 1;
            }
        }
        hits as f64 / queries.len() as f64
    }

    #[test]
    fn recall_matches_oracle_on_randomized_instances() {
        let mut rng = crate::seeds::rng(42, "recall_oracle", 0);
        for case in 0..120 {
            let n_q = rng.gen_range(1..12);
            let queries: Vec<QueryEval> = (0..n_q)
                .map(|qi| {
                    let gt_video = rng.gen_range(0..6);
                    let a = rng.gen_range(0..20);
                    let b = a + rng.gen_range(0..6);
                    let n_p = rng.gen_range(0..15);
                    let preds = (0..n_p)
                        .map(|i| Prediction {
                            video_id: rng.gen_range(0..6),
                            span: if rng.gen_bool(0.8) {
                                let s = rng.gen_range(0..20);
                                Some(Span::new(s, s + rng.gen_range(0..6)).unwrap())
                            } else {
                                None
                            },
                            score: 1.0 / (i + 1) as f64,
                        })
                        .collect();
                    QueryEval {
                        query_id: qi,
                        split: Split::TestAdverse,
                        gt_video,
                        gt_span: Span::new(a, b).unwrap(),
                        predictions: preds,
                    }
                })
                .collect();
            for task in [Task::Vr, Task::Svmr, Task::Vcmr] {
                for k in [1usize, 3, 10] {
                    for thr in [0.3, 0.5, 0.7] {
                        assert_eq!(
                            recall_at_k(&queries, task, k, thr),
                            recall_oracle(&queries, task, k, thr),
                            "case {case} task {task} k {k} thr {thr}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k_and_antitone_in_threshold() {
        let mut rng = crate::seeds::rng(43, "recall_mono", 0);
        let queries: Vec<QueryEval> = (0..40)
            .map(|qi| {
                let gt_video = rng.gen_range(0..5);
                let a = rng.gen_range(0..20);
                let preds = (0..20)
                    .map(|i| {
                        let s = rng.gen_range(0..20);
                        Prediction {
                            video_id: rng.gen_range(0..5),
                            span: Some(Span::new(s, s + rng.gen_range(0..5)).unwrap()),
                            score: 1.0 / (i + 1) as f64,
                        }
                    })
                    .collect();
                QueryEval {
                    query_id: qi,
                    split: Split::TestCongruent,
                    gt_video,
                    gt_span: Span::new(a, a + 3).unwrap(),
                    predictions: preds,
                }
            })
            .collect();
        let report = EvalReport::build(Task::Vcmr, &[1, 5, 10, 100], &[0.3, 0.5, 0.7], &queries);
        for &t in &[0.3, 0.5, 0.7] {
            let mut prev = 0.0;
            for &k in &[1usize, 5, 10, 100] {
                let r = report.recall(None, k, t).unwrap();
                assert!(r >= prev, "recall must be nondecreasing in K");
                prev = r;
            }
        }
        for &k in &[1usize, 5, 10, 100] {
            let mut prev = 1.0;
            for &t in &[0.3, 0.5, 0.7] {
                let r = report.recall(None, k, t).unwrap();
                assert!(r <= prev, "recall must be antitone in the threshold");
                prev = r;
            }
        }
    }
}
