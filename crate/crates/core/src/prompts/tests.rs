use super::*;
use std::collections::{BTreeMap, BTreeSet};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn tiny() -> (Vec<String>, Vec<String>, Vec<Descriptor>, Vocabulary) {
    let templates = vec!["the [D] [P] left".to_string(), "a [P] met the [D] man".to_string()];
    let professions = words("cook pilot");
    let descriptors = vec![
        Descriptor::new(Axis::Age, "old", "old").unwrap(),
        Descriptor::new(Axis::Age, "young", "very young").unwrap(),
        Descriptor::new(Axis::Gender, "female", "female").unwrap(),
    ];
    let vocab = Vocabulary::new(words("the a left met man cook pilot old very young female")).unwrap();
    (templates, professions, descriptors, vocab)
}

#[test]
fn vocabulary_round_trips_and_rejects_bad_words() {
    let v = Vocabulary::new(words("a b c")).unwrap();
    assert_eq!(v.tokenize("c a  b").unwrap(), vec![2, 0, 1]);
    assert_eq!(v.decode(&[1, 2, 7]), "b c <unk>");
    assert!(matches!(v.tokenize("a z"), Err(FareError::Input(m)) if m.contains('z')));
    assert!(Vocabulary::new(words("a a")).is_err());
    assert!(Vocabulary::new(["x y"]).is_err());
    assert!(Vocabulary::new([""]).is_err());
    let json = serde_json::to_string(&v).unwrap();
    let back: Vocabulary = serde_json::from_str(&json).unwrap();
    assert_eq!(back.id("b"), None);
    assert_eq!(back.reindex().unwrap().id("b"), Some(1));
}

#[test]
fn descriptor_needs_surface_text() {
    assert!(Descriptor::new(Axis::Race, "x", "  ").is_err());
    assert_eq!("political_ideology".parse::<Axis>().unwrap(), Axis::PoliticalIdeology);
    assert!("height".parse::<Axis>().is_err());
    assert_eq!(Axis::ALL.len(), 9);
}

#[test]
fn suite_counts_and_pairing() {
    let (t, p, d, v) = tiny();
    let s = generate_suite(&t, &p, &d, &v, None).unwrap();
    assert_eq!(s.neutral().count(), 4);
    assert_eq!(s.demographic().count(), 12);
    let neutral: BTreeMap<&str, &Prompt> = s.neutral().map(|q| (q.id.as_str(), q)).collect();
    for q in s.demographic() {
        let n = neutral[q.paired_neutral.as_deref().unwrap()];
        let pos = q.descriptor_position.unwrap();
        let inserted = q.tokens.len() - n.tokens.len();
        assert!(inserted >= 1);
        let mut removed = q.tokens.clone();
        removed.drain(pos..pos + inserted);
        assert_eq!(removed, n.tokens, "{} vs {}", q.text, n.text);
        assert_eq!(q.token_count, q.tokens.len());
        assert!(q.token_count >= n.token_count);
    }
    assert_eq!(s, generate_suite(&t, &p, &d, &v, None).unwrap());
}

#[test]
fn descriptor_lands_in_the_template_slot() {
    let (t, p, d, v) = tiny();
    let s = generate_suite(&t, &p, &d, &v, None).unwrap();
    let q = s.prompts.iter().find(|q| q.id == "d-t01-p00-x001").unwrap();
    assert_eq!(q.text, "a cook met the very young man");
    assert_eq!(q.descriptor_position, Some(4));
    assert_eq!(q.condition.group().unwrap().group, "young");
}

#[test]
fn sixteen_contexts_times_ten_descriptors() {
    let inv = DeskInventory::new(4, 4, 1, 4).unwrap();
    let v = inv.vocabulary();
    let s = generate_suite(&inv.templates, &inv.professions, &inv.descriptors[..10], &v, None).unwrap();
    assert_eq!((s.neutral().count(), s.demographic().count()), (16, 160));
}

#[test]
fn full_scale_counts_with_a_budget() {
    let inv = DeskInventory::new(24, 24, 2, 4).unwrap();
    let v = inv.vocabulary();
    let s = inv.suite(&v, Some(3280)).unwrap();
    assert_eq!((s.neutral().count(), s.demographic().count()), (576, 3280));
    // Round-robin: no context sees the same descriptor twice.
    let ids: BTreeSet<&str> = s.demographic().map(|q| q.id.as_str()).collect();
    assert_eq!(ids.len(), 3280);
    assert!(inv.suite(&v, Some(576 * 36 + 1)).is_err());
}

#[test]
fn suite_rejects_bad_inputs() {
    let (t, p, d, v) = tiny();
    assert!(generate_suite(&[], &p, &d, &v, None).is_err());
    assert!(generate_suite(&t, &p, &d, &Vocabulary::new(words("the")).unwrap(), None).is_err());
    let no_slot = vec!["the [P] left".to_string()];
    assert!(generate_suite(&no_slot, &p, &d, &v, None).is_err());
}

#[test]
fn groups_are_sorted_and_distinct() {
    let (t, p, d, v) = tiny();
    let g = generate_suite(&t, &p, &d, &v, None).unwrap().groups();
    let labels: Vec<&str> = g.iter().map(|k| k.group.as_str()).collect();
    assert_eq!(labels, vec!["female", "old", "young"]);
}

fn pair(s: usize, a: usize) -> MinimalPair {
    MinimalPair::new(vec![1; s], vec![2; a], "x").unwrap()
}

#[test]
fn length_matched_subset_fixtures() {
    let equal: Vec<MinimalPair> = (1..4).map(|n| pair(n, n)).collect();
    assert_eq!(length_matched_subset(&equal), equal);
    assert!(length_matched_subset(&[pair(1, 2), pair(3, 2)]).is_empty());
    let lens = [(3, 3), (4, 5), (2, 2), (5, 5), (1, 2), (6, 6), (7, 7), (4, 3), (2, 2), (8, 8)];
    let mixed: Vec<MinimalPair> = lens.iter().map(|&(s, a)| pair(s, a)).collect();
    let kept = length_matched_subset(&mixed);
    let want: Vec<MinimalPair> = [0, 2, 3, 5, 6, 8, 9].iter().map(|&i| mixed[i].clone()).collect();
    assert_eq!(kept, want);
}

#[test]
fn item_constructors_validate() {
    assert!(MinimalPair::new(vec![], vec![1], "x").is_err());
    assert!(McItem::new(vec![1], vec![2], vec![]).is_err());
    assert!(McItem::new(vec![1], vec![2], vec![vec![2]]).is_err());
    assert!(McItem::new(vec![1], vec![2], vec![vec![3], vec![3]]).is_err());
    assert!(McItem::new(vec![1], vec![2], vec![vec![3], vec![4]]).is_ok());
}

#[test]
fn minimal_pair_files_round_trip() {
    let inv = DeskInventory::desk();
    let v = inv.vocabulary();
    let pairs = inv.minimal_pairs(&v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    write_minimal_pairs(&path, &pairs, &v).unwrap();
    let back = ingest_minimal_pairs(&path, &v).unwrap();
    assert_eq!(back, pairs);
    for (p, line) in back.iter().zip(std::fs::read_to_string(&path).unwrap().lines()) {
        let row: PairRow = serde_json::from_str(line).unwrap();
        assert_eq!(p.stereo_len, row.stereo.split_whitespace().count());
        assert_eq!(p.anti_len, row.anti.split_whitespace().count());
    }
}

#[test]
fn ingest_reports_row_numbers() {
    let v = Vocabulary::new(words("a b")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert!(ingest_minimal_pairs(&empty, &v).unwrap().is_empty());
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"stereo\":\"a\",\"anti\":\"b\",\"axis\":\"age\"}\n{\"stereo\":\"a\",\"axis\":\"age\"}\n").unwrap();
    let err = ingest_minimal_pairs(&bad, &v).unwrap_err();
    assert!(matches!(&err, FareError::Parse { .. }), "{err}");
    assert!(err.to_string().contains("row 2"), "{err}");
    assert!(ingest_minimal_pairs(&dir.path().join("missing.jsonl"), &v).is_err());
}

#[test]
fn mc_files_round_trip() {
    let inv = DeskInventory::desk();
    let v = inv.vocabulary();
    let items = inv.mc_items(&v).unwrap();
    assert_eq!(items.len(), 24);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mc.jsonl");
    write_mc_items(&path, &items, &v).unwrap();
    assert_eq!(ingest_mc_items(&path, &v).unwrap(), items);
}

#[test]
fn desk_pairs_name_the_group_attribute() {
    let inv = DeskInventory::desk();
    let v = inv.vocabulary();
    let pairs = inv.minimal_pairs(&v).unwrap();
    // 4 frames x 18 groups x 2 surfaces.
    assert_eq!(pairs.len(), 144);
    for p in &pairs {
        assert_eq!(p.stereo.len(), p.stereo_len);
        let attr = |s: &[usize]| s.iter().filter(|&&t| v.word(t).unwrap().starts_with("trait_")).count();
        assert_eq!((attr(&p.stereo), attr(&p.anti)), (1, 1));
    }
    assert!(pairs.iter().any(|p| !p.is_length_matched()));
}

#[test]
fn manifest_mirrors_the_suite() {
    let (t, p, d, v) = tiny();
    let s = generate_suite(&t, &p, &d, &v, None).unwrap();
    let m = manifest(&s);
    assert_eq!(m.len(), s.len());
    assert!(m.iter().filter(|e| e.condition == "neutral").all(|e| e.axis.is_none() && e.group.is_none()));
    assert!(m.iter().filter(|e| e.condition == "demographic").all(|e| e.paired_neutral.is_some()));
}
