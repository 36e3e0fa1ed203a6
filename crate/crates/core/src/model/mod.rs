//! The reference autoregressive LM (embeddings plus a small causal
//! transformer encoder), the residual debias adapter, next-token
//! distributions for both models, sentence likelihoods, and the
//! self-normalized likelihood-ratio weights.

pub mod checkpoint;
pub mod graph;
mod train;

use rand::Rng;

use crate::corpus::Vocab;
use crate::numerics::{log_softmax, log_sum_exp, LogProbVector, Matrix, ParameterSet, Tape};
use crate::{Error, Result};

pub use graph::{AdapterVars, ReferenceVars};
pub use train::{train_reference, AdamOptimizer, ReferenceTrainConfig};

/// MLP hidden width as a multiple of the model width.
pub const MLP_WIDTH_FACTOR: usize = 4;

/// Transformer dimensions. Desk-scale defaults: d=64, b=16, 2 layers,
/// 2 heads, context 32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Hidden width d.
    pub d: usize,
    /// Adapter bottleneck width b (< d).
    pub adapter_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context length C.
    pub ctx: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            adapter_dim: 16,
            layers: 2,
            heads: 2,
            ctx: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.ctx == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.d {
            return Err(Error::invalid(format!(
                "adapter width {} must be in (0, {})",
                self.adapter_dim, self.d
            )));
        }
        Ok(())
    }
}

/// The frozen reference language model. Debiasing never mutates it.
#[derive(Debug, Clone)]
pub struct ReferenceLM {
    config: ModelConfig,
    vocab: Vocab,
    params: ParameterSet,
}

/// The trainable residual layer: h + W2 W1 h.
#[derive(Debug, Clone)]
pub struct DebiasAdapter {
    pub params: ParameterSet,
}

/// Per-position hidden states of one sentence under the selected model;
/// entry i is the state after reading tokens 1..=i+1.
#[derive(Debug, Clone)]
pub struct HiddenTrace(pub Vec<Vec<f64>>);

fn randn_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    // Box-Muller; two uniforms per normal keeps the draw count deterministic.
    let data = (0..rows * cols)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Matrix::new(rows, cols, data).expect("finite init")
}

impl ReferenceLM {
    /// Fresh random initialization (weights N(0, 0.02), layer norms identity).
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::training::seeded_rng(seed);
        let mut params = ParameterSet::new();
        for name in graph::parameter_names(&config) {
            let (rows, cols) = graph::parameter_shape(&config, vocab.len(), &name);
            let value = if name.ends_with(".g") {
                let mut m = Matrix::zeros(rows, cols);
                m.fill(1.0);
                m
            } else if name.ends_with(".b") || name.contains("b_in") || name.contains("b_out") {
                Matrix::zeros(rows, cols)
            } else {
                randn_matrix(&mut rng, rows, cols, 0.02)
            };
            params.insert(name, value);
        }
        Ok(ReferenceLM {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        Ok(ReferenceLM {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Raw embedding row for one token.
    pub fn embedding(&self, token_id: usize) -> &[f64] {
        self.params.get("emb").row(token_id)
    }

    /// Map words through the model vocabulary, failing on unknown tokens.
    pub fn token_ids(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.vocab
                    .id(w)
                    .ok_or_else(|| Error::invalid(format!("unknown token '{w}'")))
            })
            .collect()
    }
}

impl DebiasAdapter {
    /// W1 small random, W2 zero: the adapter starts as the identity, so the
    /// debiased model initially matches the reference exactly.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::training::seeded_rng(seed);
        let mut params = ParameterSet::new();
        params.insert(
            "w1",
            randn_matrix(&mut rng, config.adapter_dim, config.d, 0.02),
        );
        params.insert("w2", Matrix::zeros(config.d, config.adapter_dim));
        Ok(DebiasAdapter { params })
    }

    pub fn from_params(params: ParameterSet) -> Self {
        DebiasAdapter { params }
    }
}

/// Run the encoder (and optionally the adapter) over a full token sequence,
/// returning the per-position hidden states as plain values.
pub fn hidden_trace(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    tokens: &[usize],
) -> Result<HiddenTrace> {
    let mut tape = Tape::new();
    let vars = ReferenceVars::register(&mut tape, &reference.params, &reference.config, None);
    let mut hidden = vars.hidden_states(&mut tape, tokens)?;
    if let Some(adapter) = adapter {
        let avars = AdapterVars::register(&mut tape, &adapter.params, None);
        hidden = avars.apply(&mut tape, hidden);
    }
    let m = tape.value(hidden);
    Ok(HiddenTrace(
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
    ))
}

/// Hidden state for one prefix: the encoder state after reading all of it,
/// with the adapter's residual applied when present.
pub fn encode(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let trace = hidden_trace(reference, adapter, prefix)?;
    Ok(trace.0.last().expect("nonempty prefix").clone())
}

/// Next-token log-probabilities after `prefix`, over the full vocabulary or
/// restricted (and renormalized) to `subset` token ids.
pub fn next_token_logprobs(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    prefix: &[usize],
    subset: Option<&[usize]>,
) -> Result<LogProbVector> {
    if let Some(s) = subset {
        if s.is_empty() {
            return Err(Error::invalid("empty token subset"));
        }
        if let Some(&bad) = s.iter().find(|&&id| id >= reference.vocab.len()) {
            return Err(Error::invalid(format!("subset token id {bad} out of range")));
        }
    }
    let h = encode(reference, adapter, prefix)?;
    let emb = reference.params.get("emb");
    let score = |id: usize| -> f64 {
        emb.row(id)
            .iter()
            .zip(&h)
            .map(|(e, x)| e * x)
            .sum()
    };
    let scores: Vec<f64> = match subset {
        Some(ids) => ids.iter().map(|&id| score(id)).collect(),
        None => (0..reference.vocab.len()).map(score).collect(),
    };
    log_softmax(&scores)
}

/// Sum over t = 2..T of log P(x_t | X_{<t}); the start-token prior is never
/// modeled (it cancels in every likelihood ratio).
pub fn sentence_loglik(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    tokens: &[usize],
) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::invalid(
            "sentence likelihood needs at least 2 tokens",
        ));
    }
    let mut tape = Tape::new();
    let vars = ReferenceVars::register(&mut tape, &reference.params, &reference.config, None);
    let mut hidden = vars.hidden_states(&mut tape, tokens)?;
    if let Some(adapter) = adapter {
        let avars = AdapterVars::register(&mut tape, &adapter.params, None);
        hidden = avars.apply(&mut tape, hidden);
    }
    let ll = graph::sentence_loglik_var(&mut tape, hidden, vars.emb, tokens)?;
    Ok(tape.scalar(ll))
}

/// log l(X) = log P_deb(X) - log P_ref(X) (start-token priors cancel).
pub fn log_likelihood_ratio(
    reference: &ReferenceLM,
    adapter: &DebiasAdapter,
    tokens: &[usize],
) -> Result<f64> {
    let deb = sentence_loglik(reference, Some(adapter), tokens)?;
    let reference_ll = sentence_loglik(reference, None, tokens)?;
    Ok(deb - reference_ll)
}

/// Self-normalize a batch of log likelihood ratios: weights
/// m_i = l_i / sum l_i computed in log space, plus the estimated
/// polarized-probability ratio R = N / sum l_i.
pub fn normalize_log_ratios(log_ratios: &[f64]) -> Result<(Vec<f64>, f64)> {
    if log_ratios.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let max = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_ratios.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    let weights = shifted.iter().map(|e| e / total).collect();
    let lse = log_sum_exp(log_ratios);
    let r_polar = ((log_ratios.len() as f64).ln() - lse).exp();
    Ok((weights, r_polar))
}

/// Likelihood-ratio weights for a batch of polarized sentences, plus the
/// R^polar estimate.
pub fn normalized_weights(
    batch: &[&[usize]],
    reference: &ReferenceLM,
    adapter: &DebiasAdapter,
) -> Result<(Vec<f64>, f64)> {
    let log_ratios: Vec<f64> = batch
        .iter()
        .map(|tokens| log_likelihood_ratio(reference, adapter, tokens))
        .collect::<Result<_>>()?;
    normalize_log_ratios(&log_ratios)
}

/// Ancestral sampling from the next-token distribution until the end token
/// or `max_len` tokens total. Temperature 0 is greedy argmax.
pub fn sample_sentence<R: Rng>(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    prompt: &[usize],
    rng: &mut R,
    max_len: usize,
    temperature: f64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::invalid("prompt must be nonempty"));
    }
    if max_len > reference.config.ctx {
        return Err(Error::invalid(format!(
            "max_len {max_len} exceeds context length {}",
            reference.config.ctx
        )));
    }
    let mut tokens = prompt.to_vec();
    while tokens.len() < max_len {
        let lp = next_token_logprobs(reference, adapter, &tokens, None)?;
        let next = if temperature <= 0.0 {
            lp.values()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite log-probs"))
                .map(|(i, _)| i)
                .expect("nonempty vocabulary")
        } else {
            let scaled: Vec<f64> = lp.values().iter().map(|v| v / temperature).collect();
            let probs = log_softmax(&scaled)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, v) in probs.values().iter().enumerate() {
                acc += v.exp();
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        tokens.push(next);
        if next == Vocab::END_ID {
            break;
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Corpus;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            adapter_dim: 3,
            layers: 1,
            heads: 2,
            ctx: 12,
        }
    }

    fn tiny_model(seed: u64) -> ReferenceLM {
        let corpus = Corpus::parse("he works as a doctor\nshe works as a nurse\nthe clinic opened\n").unwrap();
        ReferenceLM::init(tiny_config(), corpus.vocab().clone(), seed).unwrap()
    }

    fn random_adapter(model: &ReferenceLM, seed: u64) -> DebiasAdapter {
        let mut adapter = DebiasAdapter::init(model.config(), seed).unwrap();
        // make W2 nonzero so the adapter actually perturbs the model
        let mut rng = crate::training::seeded_rng(seed + 1);
        let slot = adapter.params.slot("w2");
        for v in adapter.params.value_mut(slot).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        adapter
    }

    #[test]
    fn zero_adapter_is_identity() {
        let model = tiny_model(1);
        let adapter = DebiasAdapter::init(model.config(), 2).unwrap();
        let prefix = [1usize, 2, 3];
        assert_eq!(
            encode(&model, None, &prefix).unwrap(),
            encode(&model, Some(&adapter), &prefix).unwrap()
        );
        let s = [1usize, 2, 3, 4, 0];
        assert_eq!(
            sentence_loglik(&model, None, &s).unwrap(),
            sentence_loglik(&model, Some(&adapter), &s).unwrap()
        );
        assert_eq!(log_likelihood_ratio(&model, &adapter, &s).unwrap(), 0.0);
    }

    #[test]
    fn encode_deterministic() {
        let model = tiny_model(3);
        let prefix = [2usize, 4, 1];
        assert_eq!(
            encode(&model, None, &prefix).unwrap(),
            encode(&model, None, &prefix).unwrap()
        );
    }

    #[test]
    fn encode_rejects_long_prefix() {
        let model = tiny_model(3);
        let long: Vec<usize> = vec![1; model.config().ctx + 1];
        assert!(encode(&model, None, &long).is_err());
    }

    #[test]
    fn adapter_matches_matmul_oracle() {
        let model = tiny_model(5);
        let adapter = random_adapter(&model, 6);
        let prefix = [1usize, 3, 5, 2];
        let plain = encode(&model, None, &prefix).unwrap();
        let adapted = encode(&model, Some(&adapter), &prefix).unwrap();
        // independent dense oracle: f + W2 (W1 f)
        let w1 = adapter.params.get("w1");
        let w2 = adapter.params.get("w2");
        let b = w1.rows();
        let d = w1.cols();
        let mut low = vec![0.0; b];
        for i in 0..b {
            low[i] = (0..d).map(|j| w1.at(i, j) * plain[j]).sum();
        }
        for i in 0..d {
            let delta: f64 = (0..b).map(|j| w2.at(i, j) * low[j]).sum();
            assert!((adapted[i] - (plain[i] + delta)).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_of_one_is_certain() {
        let model = tiny_model(7);
        let lp = next_token_logprobs(&model, None, &[1, 2], Some(&[3])).unwrap();
        assert_eq!(lp.values(), &[0.0]);
    }

    #[test]
    fn restricted_equals_renormalized_full() {
        let model = tiny_model(8);
        let prefix = [2usize, 1, 4];
        let full = next_token_logprobs(&model, None, &prefix, None).unwrap();
        let subset = [1usize, 4, 6];
        let restricted = next_token_logprobs(&model, None, &prefix, Some(&subset)).unwrap();
        let lse = log_sum_exp(&subset.iter().map(|&i| full.values()[i]).collect::<Vec<_>>());
        for (k, &id) in subset.iter().enumerate() {
            assert!((restricted.values()[k] - (full.values()[id] - lse)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_term_softmax_oracle() {
        let model = tiny_model(9);
        let prefix = [1usize, 5];
        let h = encode(&model, None, &prefix).unwrap();
        let ids = [2usize, 3];
        let scores: Vec<f64> = ids
            .iter()
            .map(|&id| {
                model
                    .embedding(id)
                    .iter()
                    .zip(&h)
                    .map(|(e, x)| e * x)
                    .sum::<f64>()
            })
            .collect();
        let denom = scores[0].exp() + scores[1].exp();
        let lp = next_token_logprobs(&model, None, &prefix, Some(&ids)).unwrap();
        assert!((lp.values()[0] - (scores[0].exp() / denom).ln()).abs() < 1e-12);
        assert!((lp.values()[1] - (scores[1].exp() / denom).ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_sums_per_position_terms() {
        let model = tiny_model(10);
        let adapter = random_adapter(&model, 11);
        let s = [1usize, 3, 2, 5];
        let full = sentence_loglik(&model, Some(&adapter), &s).unwrap();
        // per-position oracle
        let mut acc = 0.0;
        for t in 2..=s.len() {
            let lp = next_token_logprobs(&model, Some(&adapter), &s[..t - 1], None).unwrap();
            acc += lp.values()[s[t - 1]];
        }
        assert!((full - acc).abs() < 1e-10, "{full} vs {acc}");
        // additivity: dropping the last token removes exactly the last term
        let shorter = sentence_loglik(&model, Some(&adapter), &s[..3]).unwrap();
        let last = next_token_logprobs(&model, Some(&adapter), &s[..3], None).unwrap().values()[s[3]];
        assert!((full - (shorter + last)).abs() < 1e-10);
    }

    #[test]
    fn single_token_sentence_rejected() {
        let model = tiny_model(10);
        assert!(sentence_loglik(&model, None, &[1]).is_err());
    }

    #[test]
    fn two_token_sentence_is_one_term() {
        let model = tiny_model(12);
        let s = [1usize, 4];
        let ll = sentence_loglik(&model, None, &s).unwrap();
        let lp = next_token_logprobs(&model, None, &s[..1], None).unwrap();
        assert!((ll - lp.values()[4]).abs() < 1e-12);
    }

    #[test]
    fn likelihood_ratio_matches_product_oracle() {
        let model = tiny_model(13);
        let adapter = random_adapter(&model, 14);
        let s = [2usize, 1, 3];
        let log_l = log_likelihood_ratio(&model, &adapter, &s).unwrap();
        // brute-force ratio of products of conditional probabilities
        let mut num = 1.0;
        let mut den = 1.0;
        for t in 2..=s.len() {
            let deb = next_token_logprobs(&model, Some(&adapter), &s[..t - 1], None).unwrap();
            let reference = next_token_logprobs(&model, None, &s[..t - 1], None).unwrap();
            num *= deb.values()[s[t - 1]].exp();
            den *= reference.values()[s[t - 1]].exp();
        }
        assert!((log_l.exp() - num / den).abs() < 1e-10);
    }

    #[test]
    fn equal_models_give_uniform_weights() {
        let model = tiny_model(15);
        let adapter = DebiasAdapter::init(model.config(), 16).unwrap();
        let s1 = [1usize, 2, 3, 0];
        let s2 = [2usize, 3, 1, 0];
        let s3 = [3usize, 1, 4, 0];
        let batch: Vec<&[usize]> = vec![&s1, &s2, &s3];
        let (weights, r_polar) = normalized_weights(&batch, &model, &adapter).unwrap();
        assert_eq!(weights, vec![1.0 / 3.0; 3]);
        assert_eq!(r_polar, 1.0);
    }

    #[test]
    fn hand_computed_weights() {
        let (w, _) = normalize_log_ratios(&[2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15);
        assert!((w[1] - 0.25).abs() < 1e-15);
        assert!((w[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn extreme_log_ratios_stay_normalized() {
        let (w, r) = normalize_log_ratios(&[-700.0, -700.5, -699.5]).unwrap();
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn greedy_sampling_repeatable() {
        let model = tiny_model(17);
        let mut r1 = crate::training::seeded_rng(0);
        let mut r2 = crate::training::seeded_rng(0);
        let a = sample_sentence(&model, None, &[1, 2], &mut r1, 10, 0.0).unwrap();
        let b = sample_sentence(&model, None, &[1, 2], &mut r2, 10, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_sampling_repeatable() {
        let model = tiny_model(18);
        let mut r1 = crate::training::seeded_rng(7);
        let mut r2 = crate::training::seeded_rng(7);
        let a = sample_sentence(&model, None, &[1], &mut r1, 10, 1.0).unwrap();
        let b = sample_sentence(&model, None, &[1], &mut r2, 10, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_sampling_frequencies() {
        // Known 3-way next-token distribution from a fixed prefix; check
        // empirical frequencies within a 3-sigma multinomial bound.
        let model = tiny_model(19);
        let prefix = [1usize, 2];
        let lp = next_token_logprobs(&model, None, &prefix, None).unwrap();
        let mut rng = crate::training::seeded_rng(23);
        let n = 10_000usize;
        let mut counts = vec![0usize; lp.len()];
        for _ in 0..n {
            let s = sample_sentence(&model, None, &prefix, &mut rng, 3, 1.0).unwrap();
            counts[s[2]] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = lp.values()[i].exp();
            let sigma = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.5 * sigma,
                "token {i}: {c} draws, p={p}"
            );
        }
    }
}
