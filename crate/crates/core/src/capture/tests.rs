use super::*;
use crate::model::{build_model, ModelConfig, ModelPreset};
use crate::prompts::{manifest, Axis, DeskInventory};

fn rec(pos: usize, probs: [f64; 3], selected: usize) -> RoutingRecord<f64> {
    RoutingRecord {
        layer: 0,
        position: pos,
        pre_logits: None,
        logits: probs.iter().map(|p| p.ln()).collect(),
        probs: probs.to_vec(),
        selected: vec![selected],
        weights: vec![1.0],
    }
}

fn demo(axis: Axis, group: &str) -> Condition {
    Condition::Demographic {
        axis,
        group: group.into(),
    }
}

fn entry(id: &str, condition: Condition, record: RoutingRecord<f64>) -> LogEntry<f64> {
    LogEntry {
        prompt_id: id.into(),
        condition,
        record,
    }
}

fn manifest_entry(id: &str, condition: &Condition, tokens: usize) -> ManifestEntry {
    let g = condition.group();
    ManifestEntry {
        prompt_id: id.into(),
        text: String::new(),
        condition: condition.label().into(),
        axis: g.as_ref().map(|g| g.axis),
        group: g.map(|g| g.group),
        token_count: tokens,
        paired_neutral: None,
    }
}

/// One neutral prompt of 2 tokens, one `age/old` prompt of 1 token, one
/// `gender/female` prompt of 3 tokens; one MoE layer, K = 3, k = 1.
fn hand_log() -> RoutingLog<f64> {
    let old = demo(Axis::Age, "old");
    let female = demo(Axis::Gender, "female");
    RoutingLog {
        n_experts: 3,
        top_k: 1,
        moe_layers: vec![0],
        manifest: vec![
            manifest_entry("n0", &Condition::Neutral, 2),
            manifest_entry("a", &old, 1),
            manifest_entry("b", &female, 3),
        ],
        entries: vec![
            entry("n0", Condition::Neutral, rec(0, [0.6, 0.3, 0.1], 0)),
            entry("n0", Condition::Neutral, rec(1, [0.2, 0.7, 0.1], 1)),
            entry("a", old, rec(0, [0.1, 0.1, 0.8], 2)),
            entry("b", female.clone(), rec(0, [0.5, 0.25, 0.25], 0)),
            entry("b", female.clone(), rec(1, [0.5, 0.25, 0.25], 0)),
            entry("b", female, rec(2, [0.5, 0.25, 0.25], 2)),
        ],
    }
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn selection_frequency_matches_hand_counts() {
    let s = aggregate(&hand_log(), AggregationMode::SelectionFrequency).unwrap();
    // Gender sorts before age in the axis enumeration.
    assert_eq!(s.groups[0].group, "female");
    assert_eq!(s.groups[1].group, "old");
    close(&s.baseline[0], &[0.5, 0.5, 0.0]);
    close(&s.conditional[0][0], &[2.0 / 3.0, 0.0, 1.0 / 3.0]);
    close(&s.conditional[1][0], &[0.0, 0.0, 1.0]);
    close(&s.group_marginal, &[0.75, 0.25]);
    close(&s.frequency[0], &[0.5, 1.0 / 6.0, 1.0 / 3.0]);
    assert_eq!((s.neutral_tokens, s.group_tokens.clone()), (2, vec![3, 1]));
}

#[test]
fn probability_mass_matches_hand_means() {
    let s = aggregate(&hand_log(), AggregationMode::ProbabilityMass).unwrap();
    close(&s.baseline[0], &[0.4, 0.5, 0.1]);
    close(&s.conditional[0][0], &[0.5, 0.25, 0.25]);
    close(&s.neutral_distribution(0), &[0.4, 0.5, 0.1]);
}

#[test]
fn aggregation_ignores_entry_order() {
    let log = hand_log();
    let mut shuffled = log.clone();
    shuffled.entries.reverse();
    shuffled.entries.swap(1, 4);
    for mode in [AggregationMode::SelectionFrequency, AggregationMode::ProbabilityMass] {
        assert_eq!(aggregate(&log, mode).unwrap(), aggregate(&shuffled, mode).unwrap());
    }
}

#[test]
fn aggregation_protocol_errors() {
    let mut no_neutral = hand_log();
    no_neutral.entries.retain(|e| e.condition != Condition::Neutral);
    assert!(matches!(
        aggregate(&no_neutral, AggregationMode::SelectionFrequency),
        Err(FareError::Protocol(_))
    ));
    let log = hand_log();
    let mut groups = log.manifest_groups();
    groups.push(GroupKey {
        axis: Axis::Race,
        group: "white".into(),
    });
    let err = aggregate_for_groups(&log, AggregationMode::SelectionFrequency, &groups).unwrap_err();
    assert!(err.to_string().contains("race/white"), "{err}");
    let mut orphan = hand_log();
    orphan.entries[0].prompt_id = "zz".into();
    assert!(orphan.check_consistency().is_err());
    let mut relabeled = hand_log();
    relabeled.entries[2].condition = demo(Axis::Age, "young");
    assert!(relabeled.check_consistency().is_err());
}

fn small_model(top_k: usize) -> crate::model::MoeModel<f64> {
    let inv = DeskInventory::new(2, 2, 1, 4).unwrap();
    let mut cfg: ModelConfig = ModelPreset::MixtralLike.config(inv.vocabulary().len(), 4);
    cfg.n_experts = 4;
    cfg.top_k = top_k;
    cfg.moe_layers = [1, 3].into_iter().collect();
    build_model(&cfg).unwrap()
}

fn small_suite() -> crate::prompts::PromptSet {
    let inv = DeskInventory::new(2, 2, 1, 4).unwrap();
    inv.suite(&inv.vocabulary(), None).unwrap()
}

#[test]
fn capture_records_every_position_and_layer() {
    let m = small_model(2);
    let suite = small_suite();
    let mut p = suite.neutral().next().unwrap().clone();
    p.tokens = p.tokens.iter().cycle().take(5).copied().collect();
    p.token_count = 5;
    let one = crate::prompts::PromptSet { prompts: vec![p] };
    let log = capture_run(&m, &one, None).unwrap();
    assert_eq!(log.entries.len(), 10);
    assert_eq!(log.manifest, manifest(&one));
    for e in &log.entries {
        let z = &e.record.logits;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (p, v) in e.record.probs.iter().zip(z) {
            assert!((p - (v - max).exp() / denom).abs() < 1e-9);
        }
    }
    let empty = crate::prompts::PromptSet { prompts: vec![] };
    assert!(capture_run(&m, &empty, None).is_err());
}

#[test]
fn capture_is_deterministic() {
    let m = small_model(2);
    let suite = small_suite();
    let a = serialize_log(&capture_run(&m, &suite, None).unwrap()).unwrap();
    let b = serialize_log(&capture_run(&m, &suite, None).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rate_sums_follow_the_mode() {
    let m = small_model(2);
    let log = capture_run(&m, &small_suite(), None).unwrap();
    let sel = aggregate(&log, AggregationMode::SelectionFrequency).unwrap();
    let mass = aggregate(&log, AggregationMode::ProbabilityMass).unwrap();
    for li in 0..2 {
        assert!((sel.baseline[li].iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((mass.baseline[li].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for g in 0..sel.groups.len() {
            assert!((sel.group_distribution(g, li).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(sel.conditional[g][li].iter().all(|r| (0.0..=1.0).contains(r)));
        }
    }
    assert!(sel.group_marginal.iter().sum::<f64>() <= 1.0 + 1e-12);
}

#[test]
fn full_top_k_activates_everything() {
    let m = small_model(4);
    let s = aggregate(&capture_run(&m, &small_suite(), None).unwrap(), AggregationMode::SelectionFrequency).unwrap();
    assert!(s.conditional.iter().flatten().flatten().all(|&r| r == 1.0));
}

#[test]
fn encodings_round_trip_and_agree() {
    let m = small_model(2);
    let log = capture_run(&m, &small_suite(), None).unwrap();
    let text = serialize_log(&log).unwrap();
    let bin = serialize_log_binary(&log).unwrap();
    let from_text: RoutingLog<f64> = deserialize_log(&text, "t").unwrap();
    let from_bin: RoutingLog<f64> = deserialize_log_binary(&bin, "b").unwrap();
    assert_eq!(from_text, log);
    assert_eq!(from_bin, log);
    assert_eq!(hand_log(), deserialize_log(&serialize_log(&hand_log()).unwrap(), "h").unwrap());
}

#[test]
fn corrupt_logs_are_parse_errors() {
    let log = hand_log();
    let text = serialize_log(&log).unwrap();
    let truncated = &text[..text.len() - 20];
    let err = deserialize_log::<f64>(truncated, "t").unwrap_err();
    assert!(matches!(&err, FareError::Parse { .. }), "{err}");
    let wrong_version = text.replacen("\"version\":1", "\"version\":9", 1);
    assert!(deserialize_log::<f64>(&wrong_version, "t").unwrap_err().to_string().contains("line 1"));
    let bin = serialize_log_binary(&log).unwrap();
    let err = deserialize_log_binary::<f64>(&bin[..bin.len() - 3], "b").unwrap_err();
    assert!(err.to_string().contains("byte offset"), "{err}");
    let mut bad_magic = bin.clone();
    bad_magic[0] = b'X';
    assert!(deserialize_log_binary::<f64>(&bad_magic, "b").is_err());
    let mut trailing = bin;
    trailing.push(0);
    assert!(deserialize_log_binary::<f64>(&trailing, "b").is_err());
}

#[test]
fn read_log_detects_the_encoding() {
    let log = hand_log();
    let dir = tempfile::tempdir().unwrap();
    let (j, b) = (dir.path().join("l.jsonl"), dir.path().join("l.bin"));
    std::fs::write(&j, serialize_log(&log).unwrap()).unwrap();
    std::fs::write(&b, serialize_log_binary(&log).unwrap()).unwrap();
    assert_eq!(read_log::<f64>(&j).unwrap(), log);
    assert_eq!(read_log::<f64>(&b).unwrap(), log);
}
