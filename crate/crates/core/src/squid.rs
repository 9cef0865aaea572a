//! Selective query-guided debiasing: contrastive hinge losses, the
//! learnable confounder with its pretraining, and the per-sample decision
//! that picks the positive or negative branch.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{Adam, Graph, NumError, Tensor, TensorId};
use crate::seeds;
pub use crate::textproc::Branch;

#[derive(Debug, Error)]
pub enum SquidError {
    #[error("margin error: {0}")]
    Margins(String),
    #[error("confounder error: {0}")]
    Confounder(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Hinge margins. The positive margin is deliberately larger to promote
/// learning of positives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub negative: f64,
    pub positive: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins { negative: 0.2, positive: 0.4 }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<(), SquidError> {
        if !(self.positive > self.negative) {
            return Err(SquidError::Margins(format!(
                "positive margin {} must exceed negative margin {}",
                self.positive, self.negative
            )));
        }
        Ok(())
    }
}

/// Negative-branch hinge: push the naive similarity above the biased one by
/// the margin.
pub fn hinge_negative(sim_naive: f64, sim_biased: f64, margin: f64) -> f64 {
    (margin - sim_naive + sim_biased).max(0.0)
}

/// Positive-branch hinge: push both similarities upward jointly until their
/// sum clears the margin.
pub fn hinge_positive(sim_naive: f64, sim_biased: f64, margin: f64) -> f64 {
    (margin - sim_naive - sim_biased).max(0.0)
}

/// Which rule produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionRule {
    CoocTable,
    Confounder,
    AllPositive,
    AllNegative,
}

/// Per-sample decision on how the biased retrieval enters the contrastive
/// loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquidDecision {
    pub rule: DecisionRule,
    pub branch: Branch,
    /// Cosine score, present only for the confounder rule.
    pub cosine: Option<f64>,
    /// Degenerate samples (empty noun view) skip the debiasing loss.
    pub degenerate: bool,
}

impl SquidDecision {
    pub fn fixed(rule: DecisionRule, branch: Branch) -> Self {
        SquidDecision { rule, branch, cosine: None, degenerate: false }
    }

    pub fn degenerate(rule: DecisionRule) -> Self {
        SquidDecision { rule, branch: Branch::Negative, cosine: None, degenerate: true }
    }
}

/// One line of the decision audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub query_id: usize,
    pub rule: DecisionRule,
    pub branch: Branch,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cosine: Option<f64>,
    pub degenerate: bool,
}

/// K learnable confounders plus the two projection matrices of the
/// dot-product attention that synthesizes a biased predicate feature from a
/// noun-view sentence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderBank {
    pub z: Tensor,
    pub w_obj: Tensor,
    pub w_conf: Tensor,
    pub frozen: bool,
}

impl ConfounderBank {
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self, SquidError> {
        if k == 0 || d == 0 {
            return Err(SquidError::Confounder(format!("bank needs k, d >= 1, got {k}, {d}")));
        }
        let randn = |rows: usize, cols: usize, tag: &str, std: f64| {
            let mut rng = seeds::rng(seed, tag, 0);
            let dist = Normal::new(0.0, std).unwrap();
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                .unwrap()
        };
        Ok(ConfounderBank {
            z: randn(k, d, "bank.z", 1.0),
            w_obj: randn(d, d, "bank.w_obj", 1.0 / (d as f64).sqrt()),
            w_conf: randn(d, d, "bank.w_conf", 1.0 / (d as f64).sqrt()),
            frozen: false,
        })
    }

    pub fn k(&self) -> usize {
        self.z.rows()
    }

    pub fn d(&self) -> usize {
        self.z.cols()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("bank.z".to_string(), self.z.clone()),
            ("bank.w_obj".to_string(), self.w_obj.clone()),
            ("bank.w_conf".to_string(), self.w_conf.clone()),
        ]
    }
}

/// Graph ids for the bank's three tensors.
pub struct BankIds {
    pub z: TensorId,
    pub w_obj: TensorId,
    pub w_conf: TensorId,
}

impl ConfounderBank {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BankIds {
        let reg = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.input(&t.clone().with_grad())
            } else {
                g.input(t)
            }
        };
        BankIds { z: reg(g, &self.z), w_obj: reg(g, &self.w_obj), w_conf: reg(g, &self.w_conf) }
    }
}

/// Dot-product attention over the confounders: weights are a softmax of
/// (q W_obj)(Z W_conf)^T and the output is weights * Z, a d-vector.
pub fn confounder_predicate(g: &mut Graph, bank: &BankIds, noun_sentence: TensorId) -> TensorId {
    let q = g.matmul(noun_sentence, bank.w_obj);
    let keys = g.matmul(bank.z, bank.w_conf);
    let scores = g.matmul_nt(q, keys);
    let weights = g.softmax_rows(scores);
    g.matmul(weights, bank.z)
}

/// Value-level convenience wrapper around [`confounder_predicate`].
pub fn confounder_predicate_value(bank: &ConfounderBank, noun_sentence: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let ids = bank.bind(&mut g, false);
    let q = g.constant(1, noun_sentence.len(), noun_sentence.to_vec());
    let y = confounder_predicate(&mut g, &ids, q);
    g.value(y).to_vec()
}

/// One pretraining item: a noun-view sentence vector and its fixed target
/// predicate feature (both computed by the naive model's sentence encoder,
/// which receives no gradient).
#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub query_id: usize,
    pub noun_sentence: Vec<f64>,
    pub target: Vec<f64>,
}

/// Per-epoch mean regression loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub per_epoch_loss: Vec<f64>,
}

/// Minimize ||target - Y_B||^2 over the bank parameters with full-batch
/// adaptive-moment steps, then freeze the bank.
pub fn pretrain_confounder(
    items: &[PretrainItem],
    bank: &mut ConfounderBank,
    epochs: usize,
    lr: f64,
) -> Result<PretrainReport, SquidError> {
    if items.is_empty() {
        return Err(SquidError::Confounder(
            "no eligible queries for confounder pretraining (need non-empty noun and predicate views)"
                .into(),
        ));
    }
    if bank.frozen {
        return Err(SquidError::Confounder("bank is frozen".into()));
    }
    let mut adam = Adam::new(lr, &[bank.z.numel(), bank.w_obj.numel(), bank.w_conf.numel()]);
    let mut per_epoch_loss = Vec::with_capacity(epochs + 1);
    let inv = 1.0 / items.len() as f64;

    for _epoch in 0..=epochs {
        let mut g = Graph::new();
        let ids = bank.bind(&mut g, true);
        let mut total: Option<TensorId> = None;
        for item in items {
            let q = g.constant(1, item.noun_sentence.len(), item.noun_sentence.clone());
            let target = g.constant(1, item.target.len(), item.target.clone());
            let y_b = confounder_predicate(&mut g, &ids, q);
            let diff = g.sub(target, y_b);
            let sq = g.mul(diff, diff);
            let loss = g.sum_all(sq);
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss),
            });
        }
        let mean = g.scale(total.expect("non-empty items"), inv);
        per_epoch_loss.push(g.scalar_value(mean));
        if per_epoch_loss.len() > epochs {
            break; // final epoch only records the loss
        }
        let grads = g.backward(mean)?;
        let gz = grads.get(ids.z).map(|s| s.to_vec());
        let gwo = grads.get(ids.w_obj).map(|s| s.to_vec());
        let gwc = grads.get(ids.w_conf).map(|s| s.to_vec());
        adam.step(&mut [&mut bank.z, &mut bank.w_obj, &mut bank.w_conf], &[gz, gwo, gwc])?;
    }
    bank.frozen = true;
    Ok(PretrainReport { per_epoch_loss })
}

/// Cosine similarity; zero-norm vectors yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Confounder rule: positive iff cosine(Y_B, Y_C) > 0; the boundary r = 0 is
/// negative.
pub fn decide_confounder(biased_predicate: &[f64], query_predicate: &[f64]) -> SquidDecision {
    let r = cosine(biased_predicate, query_predicate);
    SquidDecision {
        rule: DecisionRule::Confounder,
        branch: if r > 0.0 { Branch::Positive } else { Branch::Negative },
        cosine: Some(r),
        degenerate: false,
    }
}

/// Build the selected hinge on the graph. The naive similarity enters as a
/// live node; the biased similarity enters as a plain constant so no
/// gradient ever reaches the biased model. Degenerate decisions contribute
/// nothing and return None.
pub fn squid_loss(
    g: &mut Graph,
    decision: &SquidDecision,
    sim_naive: TensorId,
    sim_biased: f64,
    margins: &Margins,
) -> Option<TensorId> {
    if decision.degenerate {
        return None;
    }
    let offset = match decision.branch {
        Branch::Negative => margins.negative + sim_biased,
        Branch::Positive => margins.positive - sim_biased,
    };
    let c = g.constant_scalar(offset);
    let neg_sim = g.scale(sim_naive, -1.0);
    let pre = g.add(c, neg_sim);
    Some(g.relu(pre))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;

    #[test]
    fn margin_ordering_is_validated() {
        assert!(Margins::default().validate().is_ok());
        assert!(Margins { negative: 0.4, positive: 0.4 }.validate().is_err());
        assert!(Margins { negative: 0.5, positive: 0.2 }.validate().is_err());
    }

    #[test]
    fn hinge_arithmetic_cases() {
        // Negative branch, margin 0.2.
        assert_eq!(hinge_negative(0.9, 0.3, 0.2), 0.0);
        assert!((hinge_negative(0.3, 0.4, 0.2) - 0.3).abs() < 1e-15);
        assert!((hinge_negative(0.7, 0.7, 0.2) - 0.2).abs() < 1e-15);
        // Positive branch, margin 0.4.
        assert!((hinge_positive(0.1, 0.1, 0.4) - 0.2).abs() < 1e-15);
        assert_eq!(hinge_positive(0.3, 0.3, 0.4), 0.0);
    }

    #[test]
    fn hinge_gradient_is_minus_one_inside_margin() {
        for (branch, sim_biased, expect_active) in [
            (Branch::Negative, 0.4, true),
            (Branch::Negative, -0.5, false),
            (Branch::Positive, 0.05, true),
            (Branch::Positive, 0.9, false),
        ] {
            let margins = Margins::default();
            let params = vec![("sim".to_string(), Tensor::scalar(0.3).unwrap())];
            let decision = SquidDecision::fixed(DecisionRule::AllNegative, branch);
            let report = finite_diff_check(&params, 1e-5, |g, ids| {
                Ok(squid_loss(g, &decision, ids[0], sim_biased, &margins).unwrap())
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-6);
            let grad = report.params[0].analytic[0];
            if expect_active {
                assert!((grad + 1.0).abs() < 1e-12, "expected -1, got {grad}");
            } else {
                assert_eq!(grad, 0.0);
            }
        }
    }

    #[test]
    fn single_confounder_ignores_the_query() {
        let bank = ConfounderBank::init(1, 4, 3).unwrap();
        let y1 = confounder_predicate_value(&bank, &[0.3, -0.2, 0.9, 0.0]);
        let y2 = confounder_predicate_value(&bank, &[-5.0, 2.0, 0.1, 4.0]);
        assert_eq!(y1, bank.z.values());
        assert_eq!(y1, y2);
    }

    #[test]
    fn confounder_attention_weights_sum_to_one() {
        for k in [1usize, 3, 17] {
            let bank = ConfounderBank::init(k, 4, 5).unwrap();
            let mut g = Graph::new();
            let ids = bank.bind(&mut g, false);
            let q = g.constant(1, 4, vec![0.2, -1.0, 0.4, 0.9]);
            let qp = g.matmul(q, ids.w_obj);
            let keys = g.matmul(ids.z, ids.w_conf);
            let scores = g.matmul_nt(qp, keys);
            let weights = g.softmax_rows(scores);
            let sum: f64 = g.value(weights).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn confounder_matches_scalar_reference() {
        // K = 3, d = 4, seeded; reference computed with explicit loops.
        let bank = ConfounderBank::init(3, 4, 9).unwrap();
        let q = [0.5, -0.3, 0.8, 0.1];
        let d = 4;
        let mut qw = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                qw[j] += q[i] * bank.w_obj.at(i, j);
            }
        }
        let mut scores = vec![0.0; 3];
        for kk in 0..3 {
            let mut key = vec![0.0; d];
            for j in 0..d {
                for i in 0..d {
                    key[j] += bank.z.at(kk, i) * bank.w_conf.at(i, j);
                }
            }
            scores[kk] = qw.iter().zip(&key).map(|(a, b)| a * b).sum();
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut expect = vec![0.0; d];
        for kk in 0..3 {
            for j in 0..d {
                expect[j] += exps[kk] / denom * bank.z.at(kk, j);
            }
        }
        let got = confounder_predicate_value(&bank, &q);
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_with_perfect_init_starts_at_zero_loss() {
        // All Z rows equal to the single target: Y_B is a convex combination
        // of identical rows, so the loss is 0 at step 0.
        let d = 4;
        let target = vec![0.3, -0.7, 0.2, 0.9];
        let mut bank = ConfounderBank::init(2, d, 1).unwrap();
        let mut z = Vec::new();
        for _ in 0..2 {
            z.extend_from_slice(&target);
        }
        bank.z = Tensor::matrix(2, d, z).unwrap();
        let items = vec![PretrainItem {
            query_id: 0,
            noun_sentence: vec![0.1, 0.2, 0.3, 0.4],
            target: target.clone(),
        }];
        let report = pretrain_confounder(&items, &mut bank, 0, 1e-2).unwrap();
        assert!(report.per_epoch_loss[0] < 1e-20);
        assert!(bank.frozen);
    }

    #[test]
    fn pretrain_rejects_empty_corpus_and_frozen_banks() {
        let mut bank = ConfounderBank::init(2, 4, 1).unwrap();
        assert!(pretrain_confounder(&[], &mut bank, 1, 1e-2).is_err());
        bank.frozen = true;
        let items = vec![PretrainItem {
            query_id: 0,
            noun_sentence: vec![0.0; 4],
            target: vec![0.0; 4],
        }];
        assert!(pretrain_confounder(&items, &mut bank, 1, 1e-2).is_err());
    }

    #[test]
    fn pretrain_gradient_matches_finite_differences() {
        let bank = ConfounderBank::init(3, 4, 7).unwrap();
        let items = vec![
            PretrainItem {
                query_id: 0,
                noun_sentence: vec![0.4, -0.1, 0.3, 0.8],
                target: vec![0.2, 0.2, -0.5, 0.1],
            },
            PretrainItem {
                query_id: 1,
                noun_sentence: vec![-0.6, 0.9, 0.0, 0.2],
                target: vec![-0.3, 0.4, 0.1, 0.6],
            },
        ];
        let params = bank.named_params();
        let report = finite_diff_check(&params, 1e-5, |g, ids| {
            let bids = BankIds { z: ids[0], w_obj: ids[1], w_conf: ids[2] };
            let mut total: Option<TensorId> = None;
            for item in &items {
                let q = g.constant(1, 4, item.noun_sentence.clone());
                let t = g.constant(1, 4, item.target.clone());
                let y = confounder_predicate(g, &bids, q);
                let diff = g.sub(t, y);
                let sq = g.mul(diff, diff);
                let l = g.sum_all(sq);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            Ok(g.scale(total.unwrap(), 0.5))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn pretraining_halves_the_loss_on_a_small_regression() {
        let mut bank = ConfounderBank::init(4, 6, 11).unwrap();
        let mut items = Vec::new();
        let mut rng = seeds::rng(11, "pretrain_items", 0);
        let dist = Normal::new(0.0, 1.0).unwrap();
        for qid in 0..20 {
            items.push(PretrainItem {
                query_id: qid,
                noun_sentence: (0..6).map(|_| dist.sample(&mut rng)).collect(),
                target: (0..6).map(|_| dist.sample(&mut rng) * 0.3 + 0.5).collect(),
            });
        }
        let report = pretrain_confounder(&items, &mut bank, 150, 0.05).unwrap();
        let first = report.per_epoch_loss[0];
        let last = *report.per_epoch_loss.last().unwrap();
        assert!(last < 0.5 * first, "loss went {first} -> {last}");
    }

    #[test]
    fn decide_confounder_boundary_cases() {
        let y = vec![0.3, -0.2, 0.5];
        let d = decide_confounder(&y, &y);
        assert_eq!(d.branch, Branch::Positive);
        assert!((d.cosine.unwrap() - 1.0).abs() < 1e-12);

        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let d = decide_confounder(&y, &neg);
        assert_eq!(d.branch, Branch::Negative);
        assert!((d.cosine.unwrap() + 1.0).abs() < 1e-12);

        // Exactly orthogonal: r = 0 goes to the negative branch.
        let d = decide_confounder(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(d.branch, Branch::Negative);
        assert_eq!(d.cosine, Some(0.0));

        // Zero-norm input: cosine defined as 0, negative branch.
        let d = decide_confounder(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(d.branch, Branch::Negative);
        assert_eq!(d.cosine, Some(0.0));
    }

    #[test]
    fn squid_loss_composes_the_right_hinge() {
        let margins = Margins::default();
        let mut g = Graph::new();
        let sim = g.input(&Tensor::scalar(0.3).unwrap());
        let d = SquidDecision::fixed(DecisionRule::AllNegative, Branch::Negative);
        let l = squid_loss(&mut g, &d, sim, 0.4, &margins).unwrap();
        assert!((g.scalar_value(l) - 0.3).abs() < 1e-15);

        let sim = g.input(&Tensor::scalar(0.1).unwrap());
        let d = SquidDecision::fixed(DecisionRule::AllPositive, Branch::Positive);
        let l = squid_loss(&mut g, &d, sim, 0.1, &margins).unwrap();
        assert!((g.scalar_value(l) - 0.2).abs() < 1e-15);

        let d = SquidDecision::degenerate(DecisionRule::Confounder);
        assert!(squid_loss(&mut g, &d, sim, 0.1, &margins).is_none());
    }

    #[test]
    fn frozen_bank_is_deterministic() {
        let mut bank = ConfounderBank::init(3, 4, 13).unwrap();
        let items = vec![PretrainItem {
            query_id: 0,
            noun_sentence: vec![0.4, -0.1, 0.3, 0.8],
            target: vec![0.2, 0.2, -0.5, 0.1],
        }];
        pretrain_confounder(&items, &mut bank, 20, 0.05).unwrap();
        let q = [0.3, 0.3, -0.4, 0.2];
        let a: Vec<u64> = confounder_predicate_value(&bank, &q).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = confounder_predicate_value(&bank, &q).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn decide_confounder_is_scale_invariant(
                a in proptest::collection::vec(-1.0f64..1.0, 3..6),
                c in 1e-6f64..1e6,
            ) {
                let b: Vec<f64> = a.iter().rev().cloned().collect();
                let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
                let d1 = decide_confounder(&a, &b);
                let d2 = decide_confounder(&scaled, &b);
                prop_assert_eq!(d1.branch, d2.branch);
            }
        }
    }
}
