use super::*;
use crate::capture::AggregationMode;
use crate::prompts::{Axis, GroupKey};

fn near(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

fn key(axis: Axis, group: &str) -> GroupKey {
    GroupKey {
        axis,
        group: group.into(),
    }
}

/// Two layers of three experts, top-1, two groups. Group `old` moves expert 2
/// in layer 0; nothing moves in layer 1.
fn stats() -> ActivationStats<f64> {
    ActivationStats {
        mode: AggregationMode::SelectionFrequency,
        layers: vec![1, 3],
        n_experts: 3,
        groups: vec![key(Axis::Gender, "female"), key(Axis::Age, "old")],
        baseline: vec![vec![0.5, 0.3, 0.2], vec![0.4, 0.4, 0.2]],
        conditional: vec![
            vec![vec![0.5, 0.3, 0.2], vec![0.4, 0.4, 0.2]],
            vec![vec![0.3, 0.1, 0.6], vec![0.4, 0.4, 0.2]],
        ],
        group_marginal: vec![0.5, 0.5],
        frequency: vec![vec![0.45, 0.25, 0.3], vec![0.4, 0.4, 0.2]],
        neutral_tokens: 10,
        group_tokens: vec![5, 5],
    }
}

#[test]
fn jsd_closed_forms() {
    near(jsd(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    near(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    // M = (0.75, 0.25): 0.5 KL(P||M) + 0.5 KL(Q||M).
    let want = 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * 2f64.log2()) + 0.5 * (1.0f64 / 0.75).log2();
    near(jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), want);
    near(jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), want);
    assert!(jsd(&[0.5, 0.5], &[1.0]).is_err());
    assert!(jsd(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    assert!(jsd(&[1.5, -0.5], &[0.5, 0.5]).is_err());
}

#[test]
fn entropy_closed_forms() {
    near(entropy(&[0.25; 4]), 2.0);
    near(entropy(&[1.0, 0.0]), 0.0);
    near(entropy(&[0.5, 0.25, 0.25]), 1.5);
}

#[test]
fn pmi_forms_and_floor() {
    near(pmi_value(0.5, 0.25, 0.5, 1e-6, PmiForm::AsWritten), 2.0);
    near(pmi_value(0.5, 0.25, 0.5, 1e-6, PmiForm::Standard), 1.0);
    near(pmi_value(0.0, 0.25, 0.5, 1e-6, PmiForm::Standard), (1e-6f64 / 0.25).log2());
    assert!(pmi_value::<f64>(0.0, 0.0, 0.0, 1e-6, PmiForm::AsWritten).is_finite());
    near(activation_rate_difference(0.1, 0.3), 0.2);
}

#[test]
fn per_layer_min_max() {
    let n = normalize_per_layer(&[vec![1.0, 3.0, 2.0], vec![4.0, 4.0]]);
    assert_eq!(n, vec![vec![0.0, 1.0, 0.5], vec![0.0, 0.0]]);
}

#[test]
fn metrics_match_hand_values() {
    let m = compute_metrics(&stats(), MetricOptions::default()).unwrap();
    near(m.ard[0][2][0], 0.0);
    near(m.ard[0][2][1], 0.4);
    near(m.ard[0][0][1], 0.2);
    assert!(m.ard[1].iter().flatten().all(|&v| v == 0.0));
    near(m.jsd[0][0], 0.0);
    near(m.jsd[0][1], jsd(&[0.3, 0.1, 0.6], &[0.5, 0.3, 0.2]).unwrap());
    // Unchanged rates give log2(1 / P(g)) under the as-written form.
    near(m.pmi[1][0][0], 1.0);
    near(m.pmi[0][2][1], (0.6f64 / (0.2 * 0.5)).log2());
    near(m.entropy[0][0], entropy(&[0.5, 0.3, 0.2]));
    assert_eq!(m.entropy[0].len(), 3);
    assert_eq!(m.expert_csv().lines().count(), 1 + 2 * 3 * 2);
    assert_eq!(m.layer_csv().lines().count(), 1 + 2 * 2);
}

#[test]
fn collapse_then_normalize() {
    let m = compute_metrics(&stats(), MetricOptions::default()).unwrap();
    let mean = collapse_and_normalize(&m, GroupCollapse::Mean);
    // Collapsed ARD in layer 0 is (0.1, 0.1, 0.2).
    for (a, b) in mean.ard[0].iter().zip([0.0, 0.0, 1.0]) {
        near(*a, b);
    }
    assert_eq!(mean.ard[1], vec![0.0; 3]);
    assert_eq!(mean.jsd, vec![1.0, 0.0]);
    assert_eq!(mean.entropy, vec![1.0, 0.0]);
    let max = collapse_and_normalize(&m, GroupCollapse::Max);
    for (a, b) in max.ard[0].iter().zip([0.0, 0.0, 1.0]) {
        near(*a, b);
    }
}

#[test]
fn composite_score_is_the_weighted_sum() {
    let m = compute_metrics(&stats(), MetricOptions::default()).unwrap();
    let n = collapse_and_normalize(&m, GroupCollapse::Mean);
    let w = MetricWeights::default();
    let p = fsp_score(&n, &w).unwrap();
    for l in 0..2 {
        for e in 0..3 {
            near(p.phi[l][e], n.ard[l][e] + 0.5 * n.jsd[l] + 0.3 * n.pmi[l][e]);
        }
    }
    assert_eq!(p.ranked()[0], (1, 2));
    let only_ard = MetricWeights {
        ard: 1.0,
        jsd: 0.0,
        pmi: 0.0,
        entropy: 0.0,
    };
    assert_eq!(fsp_score(&n, &only_ard).unwrap().phi, n.ard);
    let with_entropy = MetricWeights { entropy: 2.0, ..w };
    near(fsp_score(&n, &with_entropy).unwrap().phi[0][0], p.phi[0][0] + 2.0);
}

#[test]
fn weights_are_validated() {
    let zero = MetricWeights {
        ard: 0.0,
        jsd: 0.0,
        pmi: 0.0,
        entropy: 0.0,
    };
    assert!(zero.validate().is_err());
    assert!(MetricWeights { ard: -1.0, ..MetricWeights::default() }.validate().is_err());
    assert!(MetricWeights { jsd: f64::NAN, ..MetricWeights::default() }.validate().is_err());
}

#[test]
fn profile_ranking_and_ties() {
    let p = SensitivityProfile::new(vec![0, 2], vec![vec![0.5, 0.9], vec![0.9, 0.1]]).unwrap();
    assert_eq!(p.ranked(), vec![(0, 1), (2, 0), (0, 0), (2, 1)]);
    assert_eq!(p.ranked_in_layer(2), Some(vec![0, 1]));
    assert_eq!(p.ranked_in_layer(1), None);
    assert_eq!(p.layer(2), Some(&[0.9, 0.1][..]));
    assert_eq!(p.csv().lines().nth(1), Some("0,0,0.5"));
    assert!(SensitivityProfile::new(vec![0], vec![vec![f64::NAN]]).is_err());
    assert!(SensitivityProfile::<f64>::new(vec![0, 1], vec![vec![1.0]]).is_err());
    assert!(SensitivityProfile::<f64>::new(vec![0, 1], vec![vec![1.0], vec![]]).is_err());
}

#[test]
fn profile_pass_records_provenance() {
    let (_, p) = profile(&stats(), &ProfileOptions::default(), Some("log-1".into())).unwrap();
    let prov = p.provenance.unwrap();
    assert_eq!(prov.log_id.as_deref(), Some("log-1"));
    assert_eq!(prov.aggregation, AggregationMode::SelectionFrequency);
    assert_eq!(prov.weights, MetricWeights::default());
}

#[test]
fn gini_and_top_share() {
    near(gini(&[1.0; 5]), 0.0);
    near(gini(&[0.0, 0.0, 0.0, 1.0]), 0.75);
    near(gini::<f64>(&[]), 0.0);
    near(gini(&[0.0, 0.0]), 0.0);
    let brute = |x: &[f64]| {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let s: f64 = x.iter().flat_map(|a| x.iter().map(move |b| (a - b).abs())).sum();
        s / (2.0 * n * n * mean)
    };
    let x = [0.3, 0.05, 0.2, 0.15, 0.3];
    near(gini(&x), brute(&x));
    let (s, short) = top_share(&[4.0, 3.0, 2.0, 1.0], 2);
    near(s, 0.7);
    assert!(!short);
    assert_eq!(top_share(&[1.0, 1.0], 10), (1.0, true));
}

#[test]
fn ranks_and_spearman() {
    assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 30.0]), vec![1.0, 2.5, 2.5, 4.0]);
    near(spearman(&[1.0, 2.0, 3.0], &[10.0, 40.0, 90.0]).unwrap(), 1.0);
    near(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    near(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
    assert!(spearman(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn descriptive_stats_check_shapes() {
    let s = stats();
    let (_, p) = profile(&s, &ProfileOptions::default(), None).unwrap();
    let d = descriptive_stats(&s, &p).unwrap();
    assert_eq!(d.gini_per_layer.len(), 2);
    assert!(d.top10_short);
    near(d.top10_share, 1.0);
    let other = SensitivityProfile::<f64>::zeros(vec![1], 3);
    assert!(descriptive_stats(&s, &other).is_err());
}
