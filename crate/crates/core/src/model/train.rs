//! Reference-model pretraining: next-token cross-entropy with Adam.

use rand::seq::SliceRandom;

use super::graph::{self, ReferenceVars};
use super::{ModelConfig, ReferenceLM};
use crate::corpus::Corpus;
use crate::numerics::{Matrix, ParameterSet, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReferenceTrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ReferenceTrainConfig {
    fn default() -> Self {
        ReferenceTrainConfig {
            model: ModelConfig::default(),
            steps: 1500,
            batch_size: 16,
            lr: 3e-3,
        }
    }
}

/// Standard Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamOptimizer {
    pub fn new(params: &ParameterSet) -> Self {
        let shapes: Vec<Matrix> = (0..params.len())
            .map(|s| {
                let m = params.value(s);
                Matrix::zeros(m.rows(), m.cols())
            })
            .collect();
        AdamOptimizer {
            m: shapes.clone(),
            v: shapes,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One descent step using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..params.len() {
            let grad = params.grad(slot).data().to_vec();
            for (k, &g) in grad.iter().enumerate() {
                let m = &mut self.m[slot].data_mut()[k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[slot].data_mut()[k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (self.m[slot].data()[k] / bc1)
                    / ((self.v[slot].data()[k] / bc2).sqrt() + self.eps);
                params.value_mut(slot).data_mut()[k] -= lr * update;
            }
        }
    }
}

/// Mean per-token negative log-likelihood of a batch of sentences, recorded
/// on a fresh tape with gradients in `params` after backward.
pub(crate) fn batch_nll(
    params: &mut ParameterSet,
    config: &ModelConfig,
    batch: &[&[usize]],
    with_grad: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let set = if with_grad { Some(0) } else { None };
    let vars = ReferenceVars::register(&mut tape, params, config, set);
    let mut terms = Vec::with_capacity(batch.len());
    let mut token_count = 0usize;
    for &tokens in batch {
        let hidden = vars.hidden_states(&mut tape, tokens)?;
        let ll = graph::sentence_loglik_var(&mut tape, hidden, vars.emb, tokens)?;
        terms.push(ll);
        token_count += tokens.len() - 1;
    }
    let total = tape.stack_scalars(terms);
    let total = tape.sum_all(total);
    let loss = tape.scale(total, -1.0 / token_count as f64);
    let value = tape.scalar(loss);
    if with_grad {
        params.zero_grads();
        tape.backward(loss, &mut [params])?;
    }
    Ok(value)
}

/// Pretrain a reference LM on a corpus by minibatch next-token
/// cross-entropy. Deterministic per seed; sentences longer than the model
/// context are skipped.
pub fn train_reference(corpus: &Corpus, hyper: &ReferenceTrainConfig, seed: u64) -> Result<ReferenceLM> {
    if corpus.len() == 0 {
        return Err(Error::invalid("empty training corpus"));
    }
    hyper.model.validate()?;
    if hyper.batch_size == 0 || hyper.steps == 0 {
        return Err(Error::invalid("steps and batch size must be positive"));
    }
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let n = corpus.sentence(i).len();
            n >= 2 && n <= hyper.model.ctx
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no sentence fits the model context"));
    }
    let mut model = ReferenceLM::init(hyper.model.clone(), corpus.vocab().clone(), seed)?;
    let mut rng = crate::training::seeded_rng(seed.wrapping_add(1));
    let mut optimizer = AdamOptimizer::new(model.params());
    let config = hyper.model.clone();
    for step in 0..hyper.steps {
        let batch: Vec<&[usize]> = (0..hyper.batch_size)
            .map(|_| corpus.sentence(*usable.choose(&mut rng).expect("nonempty pool")))
            .collect();
        let loss = batch_nll(model.params_mut(), &config, &batch, true)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite loss {loss}"),
            });
        }
        optimizer.step(model.params_mut(), hyper.lr);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{next_token_logprobs, sentence_loglik};

    #[test]
    fn memorizes_repeated_sentence() {
        let text = "the doctor said hello\n".repeat(100);
        let corpus = Corpus::parse(&text).unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 16,
                adapter_dim: 4,
                layers: 1,
                heads: 2,
                ctx: 8,
            },
            steps: 300,
            batch_size: 4,
            lr: 3e-3,
        };
        let model = train_reference(&corpus, &hyper, 11).unwrap();
        let tokens = corpus.sentence(0);
        let ll = sentence_loglik(&model, None, tokens).unwrap();
        let per_token = -ll / (tokens.len() - 1) as f64;
        assert!(per_token < 0.1, "per-token loss {per_token}");
    }

    #[test]
    fn beats_uniform_on_held_out() {
        let mut text = String::new();
        for i in 0..40 {
            if i % 2 == 0 {
                text.push_str("he works as a doctor\n");
            } else {
                text.push_str("she works as a nurse\n");
            }
        }
        let corpus = Corpus::parse(&text).unwrap();
        let (train, held) = corpus.split_held_out(5);
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 16,
                adapter_dim: 4,
                layers: 1,
                heads: 2,
                ctx: 10,
            },
            steps: 200,
            batch_size: 8,
            lr: 3e-3,
        };
        let model = train_reference(&train, &hyper, 3).unwrap();
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for i in 0..held.len() {
            let s = held.sentence(i);
            nll -= sentence_loglik(&model, None, s).unwrap();
            tokens += s.len() - 1;
        }
        let ppl = (nll / tokens as f64).exp();
        assert!(
            ppl <= corpus.vocab().len() as f64,
            "perplexity {ppl} vs vocab {}",
            corpus.vocab().len()
        );
    }

    #[test]
    fn learns_stereotyped_conditional() {
        // 80/20 split between occupations after a fixed group prompt.
        let mut text = String::new();
        for i in 0..50 {
            if i % 5 < 4 {
                text.push_str("he works as a doctor\n");
            } else {
                text.push_str("he works as a nurse\n");
            }
        }
        let corpus = Corpus::parse(&text).unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 16,
                adapter_dim: 4,
                layers: 1,
                heads: 2,
                ctx: 10,
            },
            steps: 250,
            batch_size: 8,
            lr: 3e-3,
        };
        let model = train_reference(&corpus, &hyper, 5).unwrap();
        let prompt = model.token_ids(&["he", "works", "as", "a"]).unwrap();
        let lp = next_token_logprobs(&model, None, &prompt, None).unwrap();
        let doctor = model.vocab().id("doctor").unwrap();
        let nurse = model.vocab().id("nurse").unwrap();
        assert!(
            lp.values()[doctor] > lp.values()[nurse],
            "doctor {} vs nurse {}",
            lp.values()[doctor],
            lp.values()[nurse]
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let corpus = Corpus::parse("a b c\nb c a\nc a b\n").unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 8,
                adapter_dim: 2,
                layers: 1,
                heads: 2,
                ctx: 6,
            },
            steps: 20,
            batch_size: 4,
            lr: 1e-3,
        };
        let a = train_reference(&corpus, &hyper, 9).unwrap();
        let b = train_reference(&corpus, &hyper, 9).unwrap();
        for slot in 0..a.params().len() {
            assert_eq!(a.params().value(slot).data(), b.params().value(slot).data());
        }
    }

    #[test]
    fn rejects_corpus_with_no_fitting_sentence() {
        let corpus = Corpus::parse("a b c d e f g h i j\n").unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 8,
                adapter_dim: 2,
                layers: 1,
                heads: 2,
                ctx: 4,
            },
            ..ReferenceTrainConfig::default()
        };
        assert!(train_reference(&corpus, &hyper, 0).is_err());
    }
}
