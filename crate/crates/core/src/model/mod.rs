//! Deterministic toy MoE decoder.
//!
//! Each layer is a pre-norm residual block: single-head causal attention
//! followed by either a dense MLP or a routed MoE block. Router logits pass
//! through an optional [`RouterHook`] before softmax and top-k selection,
//! which is where routing interventions and expert masks act.

mod config;
mod io;

pub use config::{ModelConfig, ModelPreset};
pub use io::{load_model, model_from_str, model_to_string, save_model, MODEL_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::RoutingRecord;
use crate::error::{FareError, Result};
use crate::scalar::{log_softmax, softmax, top_k_indices, Scalar};

const RMS_EPS: f64 = 1e-6;

/// In-place edit of routed-expert gate logits, applied before softmax/top-k.
pub trait RouterHook<T: Scalar>: Sync {
    fn adjust(&self, layer: usize, logits: &mut [T]);
}

/// Applies several hooks in order.
pub struct HookChain<'a, T: Scalar>(pub Vec<&'a dyn RouterHook<T>>);

impl<T: Scalar> RouterHook<T> for HookChain<'_, T> {
    fn adjust(&self, layer: usize, logits: &mut [T]) {
        for hook in &self.0 {
            hook.adjust(layer, logits);
        }
    }
}

/// Anything that can run a routed forward pass over a token sequence.
pub trait LanguageModel<T: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;

    fn forward(&self, tokens: &[usize], hook: Option<&dyn RouterHook<T>>)
        -> Result<ForwardOutput<T>>;
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `log_probs[t]` is the next-token distribution after reading `tokens[..=t]`.
    pub log_probs: Vec<Vec<T>>,
    /// Ordered by MoE layer, then position.
    pub routing: Vec<RoutingRecord<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub(crate) struct Mlp<T> {
    pub(crate) hidden: usize,
    /// `hidden x d_model`, row-major.
    pub(crate) w_in: Vec<T>,
    pub(crate) b_in: Vec<T>,
    /// `d_model x hidden`, row-major.
    pub(crate) w_out: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub(crate) struct Attention<T> {
    pub(crate) wq: Vec<T>,
    pub(crate) wk: Vec<T>,
    pub(crate) wv: Vec<T>,
    pub(crate) wo: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub(crate) struct MoeBlock<T> {
    /// `n_experts x d_model`, row-major.
    pub(crate) router: Vec<T>,
    pub(crate) experts: Vec<Mlp<T>>,
    pub(crate) shared: Vec<Mlp<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", rename_all = "snake_case")]
pub(crate) enum FeedForward<T> {
    Dense(Mlp<T>),
    Moe(MoeBlock<T>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub(crate) struct Layer<T> {
    pub(crate) attn: Attention<T>,
    pub(crate) ffn: FeedForward<T>,
}

/// Toy MoE decoder language model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MoeModel<T> {
    pub(crate) config: ModelConfig,
    /// `vocab_size x d_model`.
    pub(crate) embedding: Vec<T>,
    pub(crate) layers: Vec<Layer<T>>,
    /// `vocab_size x d_model`.
    pub(crate) head: Vec<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn gaussian<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect()
    }

    fn mlp<T: Scalar>(&mut self, d: usize, hidden: usize) -> Mlp<T> {
        Mlp {
            hidden,
            w_in: self.gaussian(hidden * d, 1.0 / (d as f64).sqrt()),
            b_in: vec![T::zero(); hidden],
            w_out: self.gaussian(d * hidden, 0.5 / (hidden as f64).sqrt()),
        }
    }
}

/// Attention output is kept small so routing stays mostly token-local.
const ATTN_OUT_SCALE: f64 = 0.25;

/// Build a randomly initialised model. Weights are a pure function of `config`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<MoeModel<T>> {
    config.validate()?;
    let d = config.d_model;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let embedding = init.gaussian(config.vocab_size * d, 1.0);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let attn = Attention {
            wq: init.gaussian(d * d, 0.5 * inv_sqrt_d),
            wk: init.gaussian(d * d, 0.5 * inv_sqrt_d),
            wv: init.gaussian(d * d, inv_sqrt_d),
            wo: init.gaussian(d * d, ATTN_OUT_SCALE * inv_sqrt_d),
        };
        let ffn = if config.is_moe_layer(layer) {
            FeedForward::Moe(MoeBlock {
                router: init.gaussian(config.n_experts * d, inv_sqrt_d),
                experts: (0..config.n_experts)
                    .map(|_| init.mlp(d, config.d_expert_hidden))
                    .collect(),
                shared: (0..config.n_shared)
                    .map(|_| init.mlp(d, config.d_expert_hidden))
                    .collect(),
            })
        } else {
            FeedForward::Dense(init.mlp(d, config.d_expert_hidden * config.top_k))
        };
        layers.push(Layer { attn, ffn });
    }
    let head = init.gaussian(config.vocab_size * d, 1.5 * inv_sqrt_d);
    Ok(MoeModel {
        config: config.clone(),
        embedding,
        layers,
        head,
    })
}

fn matvec<T: Scalar>(w: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn rms_norm<T: Scalar>(x: &[T]) -> Vec<T> {
    let ms: T = x.iter().map(|&v| v * v).sum::<T>() / T::lit(x.len() as f64);
    let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
    x.iter().map(|&v| v * inv).collect()
}

impl<T: Scalar> Mlp<T> {
    pub(crate) fn apply(&self, x: &[T]) -> Vec<T> {
        let d = x.len();
        let mut h = matvec(&self.w_in, self.hidden, d, x);
        for (v, &b) in h.iter_mut().zip(&self.b_in) {
            *v = (*v + b).max(T::zero());
        }
        matvec(&self.w_out, d, self.hidden, &h)
    }
}

/// What the forward pass should keep besides the output distributions.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trace {
    Routing,
    RouterInputs,
}

pub(crate) struct Traced<T> {
    pub(crate) out: ForwardOutput<T>,
    /// `[moe layer index][position]` normalized router inputs, when requested.
    pub(crate) router_inputs: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> MoeModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// SHA-256 over the config and every weight, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut feed = |v: &[T]| {
            for &x in v {
                h.update(x.le_bytes());
            }
        };
        feed(&self.embedding);
        for layer in &self.layers {
            feed(&layer.attn.wq);
            feed(&layer.attn.wk);
            feed(&layer.attn.wv);
            feed(&layer.attn.wo);
            let mlps: Vec<&Mlp<T>> = match &layer.ffn {
                FeedForward::Dense(m) => vec![m],
                FeedForward::Moe(b) => {
                    feed(&b.router);
                    b.experts.iter().chain(&b.shared).collect()
                }
            };
            for m in mlps {
                feed(&m.w_in);
                feed(&m.b_in);
                feed(&m.w_out);
            }
        }
        feed(&self.head);
        hex::encode(h.finalize())
    }

    /// Zero the output head so every next-token distribution is uniform.
    pub fn zero_output_head(&mut self) {
        self.head.iter_mut().for_each(|w| *w = T::zero());
    }

    /// Every weight is finite.
    pub fn is_finite(&self) -> bool {
        let ok = |v: &[T]| v.iter().all(|x| x.is_finite());
        ok(&self.embedding)
            && ok(&self.head)
            && self.layers.iter().all(|l| {
                ok(&l.attn.wq)
                    && ok(&l.attn.wk)
                    && ok(&l.attn.wv)
                    && ok(&l.attn.wo)
                    && match &l.ffn {
                        FeedForward::Dense(m) => ok(&m.w_in) && ok(&m.w_out),
                        FeedForward::Moe(b) => {
                            ok(&b.router)
                                && b.experts
                                    .iter()
                                    .chain(&b.shared)
                                    .all(|m| ok(&m.w_in) && ok(&m.b_in) && ok(&m.w_out))
                        }
                    }
            })
    }

    pub(crate) fn moe_block(&self, layer: usize) -> Option<&MoeBlock<T>> {
        match &self.layers.get(layer)?.ffn {
            FeedForward::Moe(b) => Some(b),
            FeedForward::Dense(_) => None,
        }
    }

    pub(crate) fn moe_block_mut(&mut self, layer: usize) -> Option<&mut MoeBlock<T>> {
        match &mut self.layers.get_mut(layer)?.ffn {
            FeedForward::Moe(b) => Some(b),
            FeedForward::Dense(_) => None,
        }
    }

    pub(crate) fn embedding_row(&self, token: usize) -> &[T] {
        let d = self.config.d_model;
        &self.embedding[token * d..(token + 1) * d]
    }

    pub(crate) fn head_row(&self, token: usize) -> &[T] {
        let d = self.config.d_model;
        &self.head[token * d..(token + 1) * d]
    }

    /// Sum of shared-expert outputs for a normalized input at `layer`.
    pub fn shared_output(&self, layer: usize, x: &[T]) -> Option<Vec<T>> {
        let block = self.moe_block(layer)?;
        let mut acc = vec![T::zero(); self.config.d_model];
        for m in &block.shared {
            for (a, v) in acc.iter_mut().zip(m.apply(x)) {
                *a += v;
            }
        }
        Some(acc)
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(FareError::Input("token sequence is empty".into()));
        }
        if let Some((pos, &t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab_size)
        {
            return Err(FareError::Input(format!(
                "token id {t} at position {pos} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn run(
        &self,
        tokens: &[usize],
        hook: Option<&dyn RouterHook<T>>,
        trace: Trace,
    ) -> Result<Traced<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = tokens.len();
        let scale = T::one() / T::lit((d as f64).sqrt());

        let mut x: Vec<Vec<T>> = tokens.iter().map(|&t| self.embedding_row(t).to_vec()).collect();
        let mut routing = Vec::new();
        let mut router_inputs = Vec::new();

        for (layer_id, layer) in self.layers.iter().enumerate() {
            // attention
            let normed: Vec<Vec<T>> = x.iter().map(|v| rms_norm(v)).collect();
            let q: Vec<Vec<T>> = normed.iter().map(|h| matvec(&layer.attn.wq, d, d, h)).collect();
            let k: Vec<Vec<T>> = normed.iter().map(|h| matvec(&layer.attn.wk, d, d, h)).collect();
            let v: Vec<Vec<T>> = normed.iter().map(|h| matvec(&layer.attn.wv, d, d, h)).collect();
            for t in 0..n {
                let scores: Vec<T> = (0..=t)
                    .map(|s| q[t].iter().zip(&k[s]).map(|(&a, &b)| a * b).sum::<T>() * scale)
                    .collect();
                let attn = softmax(&scores);
                let mut ctx = vec![T::zero(); d];
                for (s, &a) in attn.iter().enumerate() {
                    for (c, &vv) in ctx.iter_mut().zip(&v[s]) {
                        *c += a * vv;
                    }
                }
                let out = matvec(&layer.attn.wo, d, d, &ctx);
                for (xi, o) in x[t].iter_mut().zip(out) {
                    *xi += o;
                }
            }

            // feed-forward
            let normed: Vec<Vec<T>> = x.iter().map(|v| rms_norm(v)).collect();
            match &layer.ffn {
                FeedForward::Dense(mlp) => {
                    for t in 0..n {
                        for (xi, o) in x[t].iter_mut().zip(mlp.apply(&normed[t])) {
                            *xi += o;
                        }
                    }
                }
                FeedForward::Moe(block) => {
                    for t in 0..n {
                        let h = &normed[t];
                        let raw = matvec(&block.router, cfg.n_experts, d, h);
                        let mut logits = raw.clone();
                        if let Some(hook) = hook {
                            hook.adjust(layer_id, &mut logits);
                        }
                        let probs = softmax(&logits);
                        let selected = top_k_indices(&logits, cfg.top_k);
                        let mass: T = selected.iter().map(|&e| probs[e]).sum();
                        let weights: Vec<T> = selected.iter().map(|&e| probs[e] / mass).collect();

                        let mut out = vec![T::zero(); d];
                        for (&e, &w) in selected.iter().zip(&weights) {
                            for (o, y) in out.iter_mut().zip(block.experts[e].apply(h)) {
                                *o += w * y;
                            }
                        }
                        for m in &block.shared {
                            for (o, y) in out.iter_mut().zip(m.apply(h)) {
                                *o += y;
                            }
                        }
                        for (xi, o) in x[t].iter_mut().zip(out) {
                            *xi += o;
                        }
                        if trace == Trace::Routing {
                            routing.push(RoutingRecord {
                                layer: layer_id,
                                position: t,
                                pre_logits: hook.map(|_| raw),
                                logits,
                                probs,
                                selected,
                                weights,
                            });
                        }
                    }
                    if trace == Trace::RouterInputs {
                        router_inputs.push(normed);
                    }
                }
            }
        }

        let log_probs = x
            .iter()
            .map(|v| log_softmax(&matvec(&self.head, cfg.vocab_size, d, &rms_norm(v))))
            .collect();
        Ok(Traced {
            out: ForwardOutput { log_probs, routing },
            router_inputs,
        })
    }

    /// Normalized router inputs `[moe layer index][position]` for one sequence.
    pub(crate) fn router_inputs(&self, tokens: &[usize]) -> Result<Vec<Vec<Vec<T>>>> {
        Ok(self.run(tokens, None, Trace::RouterInputs)?.router_inputs)
    }
}

impl<T: Scalar> LanguageModel<T> for MoeModel<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn forward(
        &self,
        tokens: &[usize],
        hook: Option<&dyn RouterHook<T>>,
    ) -> Result<ForwardOutput<T>> {
        Ok(self.run(tokens, hook, Trace::Routing)?.out)
    }
}

/// Sum of `log p(tokens[i] | tokens[..i])` for `i >= 1`, in nats.
pub fn sequence_log_likelihood<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    tokens: &[usize],
    hook: Option<&dyn RouterHook<T>>,
) -> Result<T> {
    if tokens.len() < 2 {
        return Err(FareError::Input(
            "log-likelihood needs at least two tokens".into(),
        ));
    }
    let out = model.forward(tokens, hook)?;
    Ok((1..tokens.len())
        .map(|i| out.log_probs[i - 1][tokens[i]])
        .sum())
}

/// `exp(total NLL / predicted tokens)` over a corpus.
pub fn perplexity<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    corpus: &[Vec<usize>],
    hook: Option<&dyn RouterHook<T>>,
) -> Result<T> {
    use rayon::prelude::*;
    if corpus.is_empty() {
        return Err(FareError::Input("perplexity corpus is empty".into()));
    }
    let lls = corpus
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            sequence_log_likelihood(model, seq, hook)
                .map_err(|e| e.context(format_args!("corpus sequence {i}")))
        })
        .collect::<Result<Vec<T>>>()?;
    let total: T = lls.into_iter().sum();
    let count: usize = corpus.iter().map(|s| s.len() - 1).sum();
    Ok((-total / T::lit(count as f64)).exp())
}

/// Argmax continuation; ties go to the lowest token id.
pub fn greedy_decode<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    prompt: &[usize],
    max_new: usize,
    hook: Option<&dyn RouterHook<T>>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(FareError::Input("prompt is empty".into()));
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let out = model.forward(&seq, hook)?;
        let last = out.log_probs.last().expect("non-empty sequence");
        seq.push(top_k_indices(last, 1)[0]);
    }
    Ok(seq)
}

#[cfg(test)]
mod tests;
