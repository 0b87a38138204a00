use super::*;
use crate::model::{ForwardOutput, ModelConfig};
use std::collections::BTreeSet;

const P: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

/// Context-free unigram model. A hook edits the logits of layer 0.
struct Unigram(ModelConfig);

fn unigram() -> Unigram {
    Unigram(ModelConfig {
        vocab_size: 4,
        d_model: 4,
        n_layers: 1,
        moe_layers: BTreeSet::from([0]),
        n_experts: 2,
        top_k: 1,
        n_shared: 0,
        d_expert_hidden: 2,
        seed: 0,
    })
}

impl LanguageModel<f64> for Unigram {
    fn config(&self) -> &ModelConfig {
        &self.0
    }

    fn forward(&self, tokens: &[usize], hook: Option<&dyn RouterHook<f64>>) -> Result<ForwardOutput<f64>> {
        let mut z: Vec<f64> = P.iter().map(|p| p.ln()).collect();
        if let Some(h) = hook {
            h.adjust(0, &mut z);
        }
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let lp: Vec<f64> = z.iter().map(|v| v - lse).collect();
        Ok(ForwardOutput {
            log_probs: vec![lp; tokens.len()],
            routing: Vec::new(),
        })
    }
}

/// Raises token 3 by two nats.
struct Boost;

impl RouterHook<f64> for Boost {
    fn adjust(&self, _layer: usize, logits: &mut [f64]) {
        logits[3] += 2.0;
    }
}

fn near(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

fn pairs() -> Vec<MinimalPair> {
    vec![
        MinimalPair::new(vec![0, 0], vec![0, 1], "age").unwrap(),
        MinimalPair::new(vec![0, 2], vec![0, 2], "age").unwrap(),
        MinimalPair::new(vec![0, 3], vec![0, 1], "age").unwrap(),
    ]
}

#[test]
fn preference_counts_wins_and_half_ties() {
    let r = preference_score(&unigram(), &pairs(), None, PairScoring::FullSentence).unwrap();
    assert_eq!((r.n_wins, r.n_ties, r.n_pairs), (1, 1, 3));
    near(r.preference, 0.5);
    near(r.per_pair_diffs[0], 0.4f64.ln() - 0.3f64.ln());
    assert_eq!(r.outcomes(), vec![1.0, 0.5, 0.0]);
    assert!(preference_score::<f64, _>(&unigram(), &[], None, PairScoring::FullSentence).is_err());
}

#[test]
fn scoring_mode_changes_length_mismatched_pairs() {
    let p = vec![MinimalPair::new(vec![0, 0, 0], vec![0, 1], "age").unwrap()];
    let full = preference_score(&unigram(), &p, None, PairScoring::FullSentence).unwrap();
    let norm = preference_score(&unigram(), &p, None, PairScoring::LengthNormalized).unwrap();
    assert_eq!((full.preference, norm.preference), (0.0, 1.0));
}

#[test]
fn mc_accuracy_requires_a_strict_win() {
    let items = vec![
        McItem::new(vec![0], vec![0], vec![vec![1], vec![2]]).unwrap(),
        McItem::new(vec![0], vec![3], vec![vec![0]]).unwrap(),
        // Equal mean log-likelihood: a tie counts as wrong.
        McItem::new(vec![0], vec![1], vec![vec![1, 1]]).unwrap(),
    ];
    let r = utility_accuracy(&unigram(), &items, None).unwrap();
    assert_eq!(r.per_item, vec![true, false, false]);
    near(r.accuracy, 1.0 / 3.0);
    near(continuation_score(&unigram(), &[2], &[0, 1], None).unwrap(), (0.4f64.ln() + 0.3f64.ln()) / 2.0);
    assert!(utility_accuracy::<f64, _>(&unigram(), &[], None).is_err());
}

#[test]
fn budget_boundary_is_inclusive() {
    assert!(ppl_budget_check(2.0, 1.0, 1.0).unwrap().feasible);
    assert!(!ppl_budget_check(2.0, 1.0, 0.5).unwrap().feasible);
    assert!(ppl_budget_check(1.96, 1.0, 1.0).unwrap().feasible);
    near(ppl_budget_check(3.0, 2.0, 0.0).unwrap().ratio, 1.5);
    assert!(ppl_budget_check(0.5, 1.0, 1.0).is_err());
    assert!(ppl_budget_check(2.0, 1.0, -0.1).is_err());
    assert!(ppl_budget_check(2.0, 1.0, f64::NAN).is_err());
}

#[test]
fn split_is_by_index_parity() {
    let mut ps = pairs();
    ps.extend(pairs().into_iter().take(2));
    let b = EvalBundle::new(ps.clone(), vec![], vec![]);
    let (val, test) = b.split_validation();
    assert_eq!(val.pairs, vec![ps[0].clone(), ps[2].clone(), ps[4].clone()]);
    assert_eq!(test.pairs, vec![ps[1].clone(), ps[3].clone()]);
}

fn bundle() -> EvalBundle {
    let items = vec![McItem::new(vec![0], vec![0], vec![vec![3]]).unwrap()];
    EvalBundle::new(pairs(), items, vec![vec![0, 1, 2]])
}

#[test]
fn endpoints_on_the_unigram_model() {
    let e = evaluate_endpoints(&unigram(), &bundle(), None).unwrap();
    near(e.ppl, 1.0 / (0.3f64 * 0.2).sqrt());
    near(e.utility.accuracy, 1.0);
    let s = EndpointSummary::from(&e);
    assert_eq!(s.n_pairs, 3);
}

#[test]
fn report_compares_hooked_and_plain_runs() {
    let st = StatsSettings {
        n_perm: 200,
        n_boot: 200,
        ..StatsSettings::default()
    };
    let r = evaluation_report(&unigram(), &bundle(), &Boost, 1.0, vec![0], 1.0, &st).unwrap();
    let names: Vec<&str> = r.subsets.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, vec!["full", "length_matched"]);
    let full = &r.subsets[0];
    // The boost flips the third pair from a loss to a win.
    near(full.delta_preference_points, 100.0 / 3.0);
    near(full.intervened.preference, 2.5 / 3.0);
    // Token 3 is now likelier than token 0, so the one MC item fails.
    near(full.delta_utility_points, -100.0);
    assert!(full.ppl_ratio > 1.0);
    assert_eq!(r.test_labels.len(), 4);
    assert_eq!(r.bh.adjusted.len(), 4);
    assert_eq!(r.test_labels[1], "full/utility");
    assert_eq!(r, evaluation_report(&unigram(), &bundle(), &Boost, 1.0, vec![0], 1.0, &st).unwrap());
    let mut plain = bundle();
    plain.length_matched = false;
    let r = evaluation_report(&unigram(), &plain, &Boost, 1.0, vec![0], 1.0, &st).unwrap();
    assert_eq!(r.subsets.len(), 1);
}
