use super::*;
use std::collections::BTreeSet;

fn small(n_shared: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 3,
        moe_layers: BTreeSet::from([1, 2]),
        n_experts: 4,
        top_k: 2,
        n_shared,
        d_expert_hidden: 6,
        seed: 9,
    }
}

struct Shift(f64);

impl RouterHook<f64> for Shift {
    fn adjust(&self, _layer: usize, logits: &mut [f64]) {
        logits.iter_mut().for_each(|z| *z += self.0);
    }
}

struct Flat;

impl RouterHook<f64> for Flat {
    fn adjust(&self, _layer: usize, logits: &mut [f64]) {
        logits.iter_mut().for_each(|z| *z = 0.0);
    }
}

/// Reverses the routing preference completely.
struct Negate;

impl RouterHook<f64> for Negate {
    fn adjust(&self, _layer: usize, logits: &mut [f64]) {
        logits.iter_mut().for_each(|z| *z = -*z);
    }
}

const TOKENS: [usize; 6] = [3, 1, 4, 1, 5, 9];

#[test]
fn build_is_deterministic_in_config() {
    let a = build_model::<f64>(&small(1)).unwrap();
    let b = build_model::<f64>(&small(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checksum(), b.checksum());
    let mut other = small(1);
    other.seed += 1;
    assert_ne!(build_model::<f64>(&other).unwrap().checksum(), a.checksum());
    assert!(a.is_finite());
}

#[test]
fn build_rejects_invalid_config() {
    let mut c = small(0);
    c.top_k = 5;
    assert!(matches!(build_model::<f64>(&c), Err(FareError::Config(m)) if m.contains("top_k")));
    let mut c = small(0);
    c.vocab_size = 0;
    assert!(build_model::<f64>(&c).unwrap_err().to_string().contains("vocab_size"));
}

#[test]
fn forward_output_invariants() {
    let cfg = small(1);
    let m = build_model::<f64>(&cfg).unwrap();
    let out = m.forward(&TOKENS, None).unwrap();
    assert_eq!(out.log_probs.len(), TOKENS.len());
    for lp in &out.log_probs {
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    assert_eq!(out.routing.len(), cfg.moe_layers.len() * TOKENS.len());
    let mut seen = BTreeSet::new();
    for r in &out.routing {
        assert!(seen.insert((r.layer, r.position)));
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.selected.len(), cfg.top_k);
        assert!(r.pre_logits.is_none());
        let floor = r.selected.iter().map(|&e| r.logits[e]).fold(f64::INFINITY, f64::min);
        for e in (0..cfg.n_experts).filter(|e| !r.selected.contains(e)) {
            assert!(r.logits[e] <= floor);
        }
    }
}

#[test]
fn zero_shift_is_bitwise_identity() {
    let m = build_model::<f64>(&small(1)).unwrap();
    let base = m.forward(&TOKENS, None).unwrap();
    let hooked = m.forward(&TOKENS, Some(&Shift(0.0))).unwrap();
    assert_eq!(base.log_probs, hooked.log_probs);
    for (a, b) in base.routing.iter().zip(&hooked.routing) {
        assert_eq!(a.logits, b.logits);
        assert_eq!(b.pre_logits.as_ref(), Some(&a.logits));
    }
}

#[test]
fn constant_logit_shift_changes_nothing() {
    let m = build_model::<f64>(&small(1)).unwrap();
    let base = m.forward(&TOKENS, None).unwrap();
    let hooked = m.forward(&TOKENS, Some(&Shift(-7.5))).unwrap();
    for (a, b) in base.routing.iter().zip(&hooked.routing) {
        assert_eq!(a.selected, b.selected);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    for (a, b) in base.log_probs.iter().flatten().zip(hooked.log_probs.iter().flatten()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn shared_experts_ignore_routing_hooks() {
    let mut m = build_model::<f64>(&small(2)).unwrap();
    for l in [1, 2] {
        for e in &mut m.moe_block_mut(l).unwrap().experts {
            e.w_out.iter_mut().for_each(|w| *w = 0.0);
        }
    }
    let base = m.forward(&TOKENS, None).unwrap();
    let negated = m.forward(&TOKENS, Some(&Negate)).unwrap();
    assert_ne!(base.routing[0].selected, negated.routing[0].selected);
    assert_eq!(base.log_probs, negated.log_probs);
    let x = vec![0.3; 8];
    assert!(m.shared_output(1, &x).unwrap().iter().any(|v| *v != 0.0));
    assert!(m.shared_output(0, &x).is_none());
}

#[test]
fn full_top_k_selects_every_expert() {
    let mut c = small(0);
    c.top_k = 4;
    let m = build_model::<f64>(&c).unwrap();
    for r in m.forward(&TOKENS, None).unwrap().routing {
        let set: BTreeSet<usize> = r.selected.iter().copied().collect();
        assert_eq!(set, (0..4).collect());
    }
}

#[test]
fn logit_ties_go_to_lower_ids() {
    let m = build_model::<f64>(&small(0)).unwrap();
    for r in m.forward(&TOKENS, Some(&Flat)).unwrap().routing {
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }
}

#[test]
fn uniform_head_gives_closed_forms() {
    let mut m = build_model::<f64>(&small(1)).unwrap();
    m.zero_output_head();
    let ll = sequence_log_likelihood(&m, &TOKENS, None).unwrap();
    assert!((ll + 5.0 * 20f64.ln()).abs() < 1e-9);
    let ppl = perplexity(&m, &[TOKENS.to_vec(), vec![2, 2]], None).unwrap();
    assert!((ppl - 20.0).abs() < 1e-9);
}

#[test]
fn log_likelihood_matches_prefix_rescoring() {
    let m = build_model::<f64>(&small(1)).unwrap();
    let ll = sequence_log_likelihood(&m, &TOKENS, None).unwrap();
    let oracle: f64 = (1..TOKENS.len())
        .map(|i| m.forward(&TOKENS[..i], None).unwrap().log_probs[i - 1][TOKENS[i]])
        .sum();
    assert!((ll - oracle).abs() < 1e-9);
    assert!(ll <= 0.0);
    assert_eq!(ll, sequence_log_likelihood(&m, &TOKENS, None).unwrap());
    assert!(sequence_log_likelihood(&m, &[1], None).is_err());
}

/// Next token is `t + 1` with probability 3/4, otherwise uniform over the rest.
struct Bigram(ModelConfig);

impl LanguageModel<f64> for Bigram {
    fn config(&self) -> &ModelConfig {
        &self.0
    }

    fn forward(&self, tokens: &[usize], _hook: Option<&dyn RouterHook<f64>>) -> Result<ForwardOutput<f64>> {
        let v = self.0.vocab_size;
        let rest = 0.25 / (v - 1) as f64;
        Ok(ForwardOutput {
            log_probs: tokens
                .iter()
                .map(|&t| (0..v).map(|u| if u == (t + 1) % v { 0.75f64.ln() } else { rest.ln() }).collect())
                .collect(),
            routing: Vec::new(),
        })
    }
}

#[test]
fn perplexity_of_known_probabilities() {
    let lm = Bigram(small(0));
    // Predicted tokens: 1|0 hit, 2|1 hit, 7|2 miss.
    let corpus = vec![vec![0, 1], vec![1, 2, 7]];
    let rest: f64 = 0.25 / 19.0;
    let want = (-(2.0 * 0.75f64.ln() + rest.ln()) / 3.0).exp();
    assert!((perplexity(&lm, &corpus, None).unwrap() - want).abs() < 1e-12);
    assert!(perplexity::<f64, _>(&lm, &[], None).is_err());
}

#[test]
fn greedy_decode_follows_argmax() {
    let m = build_model::<f64>(&small(1)).unwrap();
    assert_eq!(greedy_decode(&m, &TOKENS, 0, None).unwrap(), TOKENS.to_vec());
    let one = greedy_decode(&m, &TOKENS, 1, None).unwrap();
    let last = m.forward(&TOKENS, None).unwrap().log_probs.pop().unwrap();
    let best = (0..20).fold(0, |b, t| if last[t] > last[b] { t } else { b });
    assert_eq!(one[TOKENS.len()], best);
    assert_eq!(greedy_decode(&m, &TOKENS, 4, None).unwrap(), greedy_decode(&m, &TOKENS, 4, None).unwrap());
    assert_eq!(greedy_decode(&Bigram(small(0)), &[18], 3, None).unwrap(), vec![18, 19, 0, 1]);
}

#[test]
fn forward_rejects_bad_tokens() {
    let m = build_model::<f64>(&small(0)).unwrap();
    assert!(matches!(m.forward(&[], None), Err(FareError::Input(_))));
    let err = m.forward(&[1, 20], None).unwrap_err().to_string();
    assert!(err.contains("20") && err.contains("position 1"), "{err}");
}

#[test]
fn save_and_load_round_trip() {
    let m = build_model::<f64>(&small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    save_model(&m, &path).unwrap();
    let back: MoeModel<f64> = load_model(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.checksum(), m.checksum());
    assert!(std::fs::read_to_string(&path).unwrap().starts_with(MODEL_MAGIC));
}

#[test]
fn load_rejects_bad_files() {
    let text = model_to_string(&build_model::<f64>(&small(0)).unwrap()).unwrap();
    let wrong_magic = text.replacen(MODEL_MAGIC, "FARELAB-MODEL-v0", 1);
    assert!(model_from_str::<f64>(&wrong_magic, "x").unwrap_err().to_string().contains("line 1"));
    assert!(model_from_str::<f64>("FARELAB-MODEL-v1\n{", "x").is_err());
    let mut broken = build_model::<f64>(&small(0)).unwrap();
    broken.head[0] = f64::NAN;
    let nan_text = model_to_string(&broken).unwrap_or_else(|_| text.clone());
    assert!(model_from_str::<f64>(&nan_text, "x").is_err());
}

#[test]
fn f32_models_run() {
    let m = build_model::<f32>(&small(1)).unwrap();
    let out = m.forward(&TOKENS, None).unwrap();
    let total: f32 = out.log_probs[0].iter().map(|x| x.exp()).sum();
    assert!((total - 1.0).abs() < 1e-5);
}
