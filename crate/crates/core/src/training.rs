//! The debias training loop: the fairness loss, sensitive-word
//! distillation, the neutral language-modeling loss, and the combined
//! objective L = L_fair + alpha1 * L_LM + alpha2 * L_VG.
//!
//! One step follows the paper's alternating schedule: sample hidden
//! positions, take one ascent step on the polarity classifier q, then one
//! descent step on the adapter. The reference model is never touched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::corpus::{BatchTriple, Corpus, sample_batch_triple, partition_pools};
use crate::lexicon::DemographicLexicon;
use crate::mi::{
    fit_q_step, weighted_club_var, PolarityClassifier, QVars, WeightedPairBatch,
};
use crate::model::graph::{self, AdapterVars, ReferenceVars};
use crate::model::{normalize_log_ratios, DebiasAdapter, ReferenceLM};
use crate::numerics::{Matrix, Tape, Var};
use crate::{Error, Result};

/// The project-wide RNG: every seeded code path goes through here.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Which vocabulary the distillation KL is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    /// Only the demographic-sensitive words V_G.
    Sensitive,
    /// The full vocabulary.
    Full,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    /// Adapter learning rate (plain SGD).
    pub lr: f64,
    /// Classifier learning rate (gradient ascent).
    pub q_lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Treat the importance weights as constants during the adapter update.
    pub stop_grad_weights: bool,
    pub distill_mode: DistillMode,
    /// Average the fairness loss over every hidden position instead of the
    /// one sampled position per sentence.
    pub all_positions: bool,
    /// Emit an adapter checkpoint every this many steps.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha1: 2.0,
            alpha2: 2.0,
            lr: 1e-2,
            q_lr: 1e-2,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            stop_grad_weights: false,
            distill_mode: DistillMode::Sensitive,
            all_positions: false,
            checkpoint_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::invalid("alpha coefficients must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.q_lr.is_finite()) {
            return Err(Error::invalid("learning rates must be finite"));
        }
        Ok(())
    }
}

/// The four logged loss components plus the running R^polar estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub fair: f64,
    pub lm: f64,
    pub vg: f64,
    pub r_polar: f64,
}

/// Mutable debias-training state; the reference model stays outside and is
/// only ever borrowed immutably.
pub struct TrainState {
    pub adapter: DebiasAdapter,
    pub q: PolarityClassifier,
    pub step: usize,
    pub rng: ChaCha12Rng,
    pub records: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(reference: &ReferenceLM, group_count: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            adapter: DebiasAdapter::init(reference.config(), config.seed)?,
            q: PolarityClassifier::init(reference.config().d, group_count, config.seed ^ 0x9e37_79b9)?,
            step: 0,
            rng: seeded_rng(config.seed.wrapping_add(1)),
            records: Vec::new(),
        })
    }
}

/// The demographic-sensitive vocabulary V_G as sorted token ids; words not
/// in the model vocabulary are dropped.
pub fn sensitive_vocab_ids(lex: &DemographicLexicon, reference: &ReferenceLM) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = lex
        .all_sensitive_words()
        .iter()
        .filter_map(|w| reference.vocab().id(w))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Configuration(
            "no lexicon word appears in the model vocabulary".into(),
        ));
    }
    Ok(ids)
}

/// The fairness loss recorded on a tape. `batch` pairs token sequences with
/// their polarity group; `positions` holds one 1-based hidden position per
/// sentence (ignored when `all_positions` is set). Returns the loss node
/// and the scalar R^polar estimate.
fn fair_var(
    tape: &mut Tape,
    refvars: &ReferenceVars,
    avars: &AdapterVars,
    qvars: &QVars,
    batch: &[(Vec<usize>, usize)],
    positions: &[usize],
    stop_grad_weights: bool,
    all_positions: bool,
) -> Result<(Var, f64)> {
    if batch.is_empty() || positions.len() != batch.len() {
        return Err(Error::invalid("fair batch and positions must be nonempty and aligned"));
    }
    let n = batch.len();
    let mut log_ratios = Vec::with_capacity(n);
    let mut q_rows = Vec::with_capacity(n);
    for (i, ((tokens, _), &pos)) in batch.iter().zip(positions).enumerate() {
        if pos == 0 || pos > tokens.len() {
            return Err(Error::invalid(format!(
                "sentence {i}: position {pos} outside [1, {}]",
                tokens.len()
            )));
        }
        let hidden = refvars.hidden_states(tape, tokens)?;
        let adapted = avars.apply(tape, hidden);
        let ll_deb = graph::sentence_loglik_var(tape, adapted, refvars.emb, tokens)?;
        let ll_ref = graph::sentence_loglik_var(tape, hidden, refvars.emb, tokens)?;
        let ratio = tape.sub(ll_deb, ll_ref);
        if !tape.scalar(ratio).is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite likelihood ratio for sentence {i}"
            )));
        }
        log_ratios.push(ratio);
        let row = if all_positions {
            let rows = qvars.log_prob_rows(tape, adapted);
            let t = tokens.len();
            let avg = tape.constant(Matrix::new(1, t, vec![1.0 / t as f64; t])?);
            tape.matmul(avg, rows)
        } else {
            let h = tape.gather_rows(adapted, vec![pos - 1]);
            qvars.log_prob_rows(tape, h)
        };
        q_rows.push(row);
    }
    let ratio_col = tape.stack_scalars(log_ratios);
    let lse = tape.log_sum_exp_all(ratio_col);
    let r_polar = ((n as f64).ln() - tape.scalar(lse)).exp();
    let shifted = tape.sub_scalar_broadcast(ratio_col, lse);
    let mut m = tape.exp(shifted);
    if stop_grad_weights {
        let frozen = tape.value(m).clone();
        m = tape.constant(frozen);
    }
    let labels: Vec<usize> = batch.iter().map(|(_, g)| *g).collect();
    let loss = weighted_club_var(tape, &q_rows, &labels, m)?;
    Ok((loss, r_polar))
}

/// Mean per-token next-token cross-entropy of the debiased model over a
/// batch of sentences.
fn lm_var(
    tape: &mut Tape,
    refvars: &ReferenceVars,
    avars: &AdapterVars,
    batch: &[Vec<usize>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty language-modeling batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut token_count = 0usize;
    for tokens in batch {
        let hidden = refvars.hidden_states(tape, tokens)?;
        let adapted = avars.apply(tape, hidden);
        terms.push(graph::sentence_loglik_var(tape, adapted, refvars.emb, tokens)?);
        token_count += tokens.len() - 1;
    }
    let total = tape.stack_scalars(terms);
    let total = tape.sum_all(total);
    Ok(tape.scale(total, -1.0 / token_count as f64))
}

/// Mean over the batch of KL(P_ref(. | prefix; V) || P_deb(. | prefix; V))
/// at each (sentence, cut) pair; V is V_G or the full vocabulary.
fn vg_var(
    tape: &mut Tape,
    refvars: &ReferenceVars,
    avars: &AdapterVars,
    batch: &[(Vec<usize>, usize)],
    subset: Option<&[usize]>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty distillation batch"));
    }
    let mut kls = Vec::with_capacity(batch.len());
    for (tokens, cut) in batch {
        if *cut < 2 || *cut > tokens.len() {
            return Err(Error::invalid(format!(
                "cut position {cut} outside [2, {}]",
                tokens.len()
            )));
        }
        let prefix = &tokens[..cut - 1];
        let hidden = refvars.hidden_states(tape, prefix)?;
        let adapted = avars.apply(tape, hidden);
        let last = vec![prefix.len() - 1];
        let h_ref = tape.gather_rows(hidden, last.clone());
        let h_deb = tape.gather_rows(adapted, last);
        let (logits_ref, logits_deb) = match subset {
            Some(ids) => (
                graph::subset_logits(tape, h_ref, refvars.emb, ids),
                graph::subset_logits(tape, h_deb, refvars.emb, ids),
            ),
            None => (
                graph::full_logits(tape, h_ref, refvars.emb),
                graph::full_logits(tape, h_deb, refvars.emb),
            ),
        };
        let lp_ref = tape.log_softmax_rows(logits_ref);
        let lp_deb = tape.log_softmax_rows(logits_deb);
        let p_ref = tape.exp(lp_ref);
        let diff = tape.sub(lp_ref, lp_deb);
        kls.push(tape.dot(p_ref, diff));
    }
    let stacked = tape.stack_scalars(kls);
    Ok(tape.mean_all(stacked))
}

/// L_fair on its own tape, with gradients into the adapter when asked.
/// Returns (loss, R^polar estimate).
pub fn loss_fair(
    reference: &ReferenceLM,
    adapter: &mut DebiasAdapter,
    q: &PolarityClassifier,
    batch: &[(Vec<usize>, usize)],
    positions: &[usize],
    stop_grad_weights: bool,
    with_grad: bool,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let refvars = ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
    let set = if with_grad { Some(0) } else { None };
    let avars = AdapterVars::register(&mut tape, &adapter.params, set);
    let qvars = QVars::register(&mut tape, q, None);
    let (loss, r_polar) = fair_var(
        &mut tape,
        &refvars,
        &avars,
        &qvars,
        batch,
        positions,
        stop_grad_weights,
        false,
    )?;
    let value = tape.scalar(loss);
    if with_grad {
        adapter.params.zero_grads();
        tape.backward(loss, &mut [&mut adapter.params])?;
    }
    Ok((value, r_polar))
}

/// L_VG on its own tape: distillation of the reference's restricted
/// next-token distribution at mention-bearing cuts.
pub fn loss_distill_sensitive(
    reference: &ReferenceLM,
    adapter: &mut DebiasAdapter,
    lex: &DemographicLexicon,
    batch: &[(Vec<usize>, usize)],
    mode: DistillMode,
    with_grad: bool,
) -> Result<f64> {
    let subset = match mode {
        DistillMode::Sensitive => Some(sensitive_vocab_ids(lex, reference)?),
        DistillMode::Full => None,
    };
    let mut tape = Tape::new();
    let refvars = ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
    let set = if with_grad { Some(0) } else { None };
    let avars = AdapterVars::register(&mut tape, &adapter.params, set);
    let loss = vg_var(&mut tape, &refvars, &avars, batch, subset.as_deref())?;
    let value = tape.scalar(loss);
    if with_grad {
        adapter.params.zero_grads();
        tape.backward(loss, &mut [&mut adapter.params])?;
    }
    Ok(value)
}

/// L_LM on its own tape. Every sentence must classify as Neutral under the
/// lexicon; a polarized sentence is a contract violation.
pub fn loss_lm_neutral(
    reference: &ReferenceLM,
    adapter: &mut DebiasAdapter,
    lex: &DemographicLexicon,
    batch: &[Vec<usize>],
    with_grad: bool,
) -> Result<f64> {
    for (i, tokens) in batch.iter().enumerate() {
        let words: Vec<&str> = tokens.iter().map(|&id| reference.vocab().token(id)).collect();
        if crate::lexicon::classify_polarity(&words, lex) != crate::lexicon::PolarityLabel::Neutral
        {
            return Err(Error::Validation(format!(
                "sentence {i} in the neutral batch is polarized"
            )));
        }
    }
    let mut tape = Tape::new();
    let refvars = ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
    let set = if with_grad { Some(0) } else { None };
    let avars = AdapterVars::register(&mut tape, &adapter.params, set);
    let loss = lm_var(&mut tape, &refvars, &avars, batch)?;
    let value = tape.scalar(loss);
    if with_grad {
        adapter.params.zero_grads();
        tape.backward(loss, &mut [&mut adapter.params])?;
    }
    Ok(value)
}

/// The full objective L_fair + alpha1 * L_LM + alpha2 * L_VG on one tape,
/// with gradients into the adapter when asked. Returns (loss, R^polar).
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    reference: &ReferenceLM,
    adapter: &mut DebiasAdapter,
    q: &PolarityClassifier,
    lex: &DemographicLexicon,
    polarized: &[(Vec<usize>, usize)],
    positions: &[usize],
    neutral: &[Vec<usize>],
    mention: &[(Vec<usize>, usize)],
    config: &TrainConfig,
    with_grad: bool,
) -> Result<(f64, f64)> {
    config.validate()?;
    let subset = match config.distill_mode {
        DistillMode::Sensitive => Some(sensitive_vocab_ids(lex, reference)?),
        DistillMode::Full => None,
    };
    let mut tape = Tape::new();
    let refvars = ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
    let set = if with_grad { Some(0) } else { None };
    let avars = AdapterVars::register(&mut tape, &adapter.params, set);
    let qvars = QVars::register(&mut tape, q, None);
    let (fair, r_polar) = fair_var(
        &mut tape,
        &refvars,
        &avars,
        &qvars,
        polarized,
        positions,
        config.stop_grad_weights,
        config.all_positions,
    )?;
    let lm = lm_var(&mut tape, &refvars, &avars, neutral)?;
    let vg = vg_var(&mut tape, &refvars, &avars, mention, subset.as_deref())?;
    let lm_s = tape.scale(lm, config.alpha1);
    let vg_s = tape.scale(vg, config.alpha2);
    let partial = tape.add(fair, lm_s);
    let total = tape.add(partial, vg_s);
    let value = tape.scalar(total);
    if with_grad {
        adapter.params.zero_grads();
        tape.backward(total, &mut [&mut adapter.params])?;
    }
    Ok((value, r_polar))
}

/// One Algorithm-1 step: sample positions, build the weighted pair batch,
/// one ascent step on q, then one SGD step on the adapter under
/// L = L_fair + alpha1 * L_LM + alpha2 * L_VG.
pub fn train_step(
    reference: &ReferenceLM,
    corpus: &Corpus,
    lex: &DemographicLexicon,
    state: &mut TrainState,
    batch: &BatchTriple,
    config: &TrainConfig,
) -> Result<LossRecord> {
    config.validate()?;
    let polarized: Vec<(Vec<usize>, usize)> = batch
        .polarized
        .iter()
        .map(|&(idx, g)| (corpus.sentence(idx).to_vec(), g))
        .collect();
    let neutral: Vec<Vec<usize>> = batch
        .neutral
        .iter()
        .map(|&idx| corpus.sentence(idx).to_vec())
        .collect();
    let mention: Vec<(Vec<usize>, usize)> = batch
        .mention_cuts
        .iter()
        .map(|&(idx, cut)| (corpus.sentence(idx).to_vec(), cut))
        .collect();

    // (i) one hidden position per polarized sentence
    let positions: Vec<usize> = polarized
        .iter()
        .map(|(tokens, _)| state.rng.gen_range(1..=tokens.len()))
        .collect();

    // (ii) ascend q on the current adapter's weighted pairs
    let mut hiddens = Vec::with_capacity(polarized.len());
    let mut log_ratios = Vec::with_capacity(polarized.len());
    for ((tokens, _), &pos) in polarized.iter().zip(&positions) {
        let trace = crate::model::hidden_trace(reference, Some(&state.adapter), tokens)?;
        hiddens.push(trace.0[pos - 1].clone());
        log_ratios.push(crate::model::log_likelihood_ratio(
            reference,
            &state.adapter,
            tokens,
        )?);
    }
    let (weights, _) = normalize_log_ratios(&log_ratios)?;
    let labels: Vec<usize> = polarized.iter().map(|(_, g)| *g).collect();
    let pair_batch = WeightedPairBatch::new(labels, hiddens, weights)?;
    fit_q_step(&mut state.q, &pair_batch, config.q_lr)?;

    // (iii) the combined objective on one tape, adapter as the only
    // trainable set; reference and q enter as constants
    let subset = match config.distill_mode {
        DistillMode::Sensitive => Some(sensitive_vocab_ids(lex, reference)?),
        DistillMode::Full => None,
    };
    let mut tape = Tape::new();
    let refvars = ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
    let avars = AdapterVars::register(&mut tape, &state.adapter.params, Some(0));
    let qvars = QVars::register(&mut tape, &state.q, None);
    let (fair, r_polar) = fair_var(
        &mut tape,
        &refvars,
        &avars,
        &qvars,
        &polarized,
        &positions,
        config.stop_grad_weights,
        config.all_positions,
    )?;
    let lm = lm_var(&mut tape, &refvars, &avars, &neutral)?;
    let vg = vg_var(&mut tape, &refvars, &avars, &mention, subset.as_deref())?;
    let lm_scaled = tape.scale(lm, config.alpha1);
    let vg_scaled = tape.scale(vg, config.alpha2);
    let partial = tape.add(fair, lm_scaled);
    let total = tape.add(partial, vg_scaled);
    let record = LossRecord {
        step: state.step,
        total: tape.scalar(total),
        fair: tape.scalar(fair),
        lm: tape.scalar(lm),
        vg: tape.scalar(vg),
        r_polar,
    };
    if !record.total.is_finite() {
        return Err(Error::Training {
            step: state.step,
            message: format!("non-finite total loss {}", record.total),
        });
    }

    // (iv) plain SGD on the adapter only
    state.adapter.params.zero_grads();
    tape.backward(total, &mut [&mut state.adapter.params])?;
    state.adapter.params.apply_grads(-config.lr);
    state.step += 1;
    state.records.push(record);
    Ok(record)
}

/// A finished debias run: the trained adapter and classifier, the per-step
/// loss records, and any interval checkpoints as (step, serialized text).
pub struct DebiasRun {
    pub adapter: DebiasAdapter,
    pub q: PolarityClassifier,
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<(usize, String)>,
}

/// The full training loop: partition the corpus into pools, then repeat
/// sample_batch_triple + train_step for the configured step count.
pub fn run_debias(
    reference: &ReferenceLM,
    corpus: &Corpus,
    lex: &DemographicLexicon,
    config: &TrainConfig,
) -> Result<DebiasRun> {
    config.validate()?;
    let pools = partition_pools(corpus, lex)?;
    let mut state = TrainState::new(reference, lex.group_count(), config)?;
    let mut checkpoints = Vec::new();
    for _ in 0..config.steps {
        let batch = sample_batch_triple(&pools, config.batch_size, &mut state.rng)?;
        train_step(reference, corpus, lex, &mut state, &batch, config)?;
        if let Some(k) = config.checkpoint_interval {
            if k > 0 && state.step % k == 0 {
                checkpoints.push((
                    state.step,
                    crate::model::checkpoint::save_adapter(
                        reference.config(),
                        &state.adapter,
                        &state.q.params,
                    ),
                ));
            }
        }
    }
    Ok(DebiasRun {
        adapter: state.adapter,
        q: state.q,
        records: state.records,
        checkpoints,
    })
}

/// The metrics log as CSV.
pub fn metrics_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,loss_total,loss_fair,loss_lm,loss_vg,r_polar_est\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.total, r.fair, r.lm, r.vg, r.r_polar
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, BiasSpec};
    use crate::model::{train_reference, ModelConfig, ReferenceTrainConfig};
    use crate::numerics::check_gradients;
    use crate::numerics::ParameterSet;

    fn tiny_lexicon() -> DemographicLexicon {
        DemographicLexicon::parse("female: she, her\nmale: he, him\n").unwrap()
    }

    fn tiny_setup() -> (ReferenceLM, Corpus, DemographicLexicon) {
        let lex = tiny_lexicon();
        let spec = BiasSpec::default_for(lex.clone(), 0.8, 60).unwrap();
        let corpus = generate_synthetic_corpus(&spec, 7).unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 16,
                adapter_dim: 4,
                layers: 1,
                heads: 2,
                ctx: 16,
            },
            steps: 60,
            batch_size: 8,
            lr: 3e-3,
        };
        let reference = train_reference(&corpus, &hyper, 3).unwrap();
        (reference, corpus, lex)
    }

    fn polarized_batch(corpus: &Corpus, lex: &DemographicLexicon, n: usize) -> Vec<(Vec<usize>, usize)> {
        let pools = partition_pools(corpus, lex).unwrap();
        pools
            .polarized
            .iter()
            .take(n)
            .map(|&(idx, g)| (corpus.sentence(idx).to_vec(), g))
            .collect()
    }

    #[test]
    fn identity_adapter_constant_q_is_zero() {
        let (reference, corpus, lex) = tiny_setup();
        let mut adapter = DebiasAdapter::init(reference.config(), 1).unwrap();
        let q = PolarityClassifier::zeros(reference.config().d, 2).unwrap();
        let batch = polarized_batch(&corpus, &lex, 3);
        let positions = vec![1; batch.len()];
        let (value, r_polar) =
            loss_fair(&reference, &mut adapter, &q, &batch, &positions, false, true).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(r_polar, 1.0);
        for slot in 0..adapter.params.len() {
            assert!(adapter.params.grad(slot).data().iter().all(|&g| g == 0.0));
        }
    }

    fn perturbed_adapter(reference: &ReferenceLM, seed: u64) -> DebiasAdapter {
        let mut adapter = DebiasAdapter::init(reference.config(), seed).unwrap();
        let mut rng = seeded_rng(seed + 100);
        let slot = adapter.params.slot("w2");
        for v in adapter.params.value_mut(slot).data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        adapter
    }

    #[test]
    fn stop_grad_same_value_different_gradient() {
        let (reference, corpus, lex) = tiny_setup();
        let q = PolarityClassifier::init(reference.config().d, 2, 5).unwrap();
        let batch = polarized_batch(&corpus, &lex, 3);
        let positions: Vec<usize> = batch.iter().map(|(t, _)| t.len().min(3)).collect();
        let mut a = perturbed_adapter(&reference, 4);
        let mut b = DebiasAdapter::from_params(a.params.clone());
        let (va, _) = loss_fair(&reference, &mut a, &q, &batch, &positions, false, true).unwrap();
        let (vb, _) = loss_fair(&reference, &mut b, &q, &batch, &positions, true, true).unwrap();
        assert!((va - vb).abs() < 1e-14, "loss values must agree");
        let ga = a.params.grad_of("w2").data().to_vec();
        let gb = b.params.grad_of("w2").data().to_vec();
        assert!(
            ga.iter().zip(&gb).any(|(x, y)| (x - y).abs() > 1e-10),
            "gradients should differ between conventions"
        );
    }

    #[test]
    fn fair_gradient_matches_finite_differences() {
        // weights differentiable: FD sees the full dependence, including m
        let (reference, corpus, lex) = tiny_setup();
        let q = PolarityClassifier::init(reference.config().d, 2, 6).unwrap();
        let batch = polarized_batch(&corpus, &lex, 2);
        let positions: Vec<usize> = batch.iter().map(|(t, _)| t.len().min(2)).collect();
        let adapter = perturbed_adapter(&reference, 8);
        let mut params = adapter.params.clone();
        let max_rel = check_gradients(
            |p: &mut ParameterSet, with_grad| {
                let mut tape = Tape::new();
                let refvars =
                    ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
                let set = if with_grad { Some(0) } else { None };
                let avars = AdapterVars::register(&mut tape, p, set);
                let qvars = QVars::register(&mut tape, &q, None);
                let (loss, _) = fair_var(
                    &mut tape, &refvars, &avars, &qvars, &batch, &positions, false, false,
                )?;
                let value = tape.scalar(loss);
                if with_grad {
                    p.zero_grads();
                    tape.backward(loss, &mut [p])?;
                }
                Ok(value)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn fair_gradient_stop_grad_matches_frozen_weight_oracle() {
        // under the stop-gradient convention the weights are constants, so
        // the FD oracle must hold them at their base-point values too
        let (reference, corpus, lex) = tiny_setup();
        let q = PolarityClassifier::init(reference.config().d, 2, 6).unwrap();
        let batch = polarized_batch(&corpus, &lex, 2);
        let positions: Vec<usize> = batch.iter().map(|(t, _)| t.len().min(2)).collect();
        let adapter = perturbed_adapter(&reference, 8);
        let log_ratios: Vec<f64> = batch
            .iter()
            .map(|(tokens, _)| {
                crate::model::log_likelihood_ratio(&reference, &adapter, tokens).unwrap()
            })
            .collect();
        let (frozen, _) = normalize_log_ratios(&log_ratios).unwrap();
        let labels: Vec<usize> = batch.iter().map(|(_, g)| *g).collect();
        let mut params = adapter.params.clone();
        let max_rel = check_gradients(
            |p: &mut ParameterSet, with_grad| {
                let mut tape = Tape::new();
                let refvars =
                    ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
                let set = if with_grad { Some(0) } else { None };
                let avars = AdapterVars::register(&mut tape, p, set);
                let qvars = QVars::register(&mut tape, &q, None);
                let mut q_rows = Vec::with_capacity(batch.len());
                for ((tokens, _), &pos) in batch.iter().zip(&positions) {
                    let hidden = refvars.hidden_states(&mut tape, tokens)?;
                    let adapted = avars.apply(&mut tape, hidden);
                    let h = tape.gather_rows(adapted, vec![pos - 1]);
                    q_rows.push(qvars.log_prob_rows(&mut tape, h));
                }
                let m = tape.constant(Matrix::new(batch.len(), 1, frozen.clone())?);
                let loss = weighted_club_var(&mut tape, &q_rows, &labels, m)?;
                let value = tape.scalar(loss);
                if with_grad {
                    p.zero_grads();
                    tape.backward(loss, &mut [p])?;
                }
                Ok(value)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn distill_zero_for_identity_adapter() {
        let (reference, corpus, lex) = tiny_setup();
        let mut adapter = DebiasAdapter::init(reference.config(), 9).unwrap();
        let pools = partition_pools(&corpus, &lex).unwrap();
        let batch: Vec<(Vec<usize>, usize)> = pools
            .mention_bearing
            .iter()
            .take(3)
            .map(|(idx, cuts)| (corpus.sentence(*idx).to_vec(), cuts[0]))
            .collect();
        let v = loss_distill_sensitive(&reference, &mut adapter, &lex, &batch, DistillMode::Sensitive, false)
            .unwrap();
        assert_eq!(v, 0.0);
        let v = loss_distill_sensitive(&reference, &mut adapter, &lex, &batch, DistillMode::Full, false)
            .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn distill_single_word_vocab_is_zero() {
        let (reference, corpus, _) = tiny_setup();
        let lex1 = DemographicLexicon::parse("female: she\nmale: zzzz\n").unwrap();
        // only "she" survives the vocabulary intersection -> |V_G| = 1
        let mut adapter = perturbed_adapter(&reference, 10);
        let pools = partition_pools(&corpus, &tiny_lexicon()).unwrap();
        let batch: Vec<(Vec<usize>, usize)> = pools
            .mention_bearing
            .iter()
            .take(2)
            .map(|(idx, cuts)| (corpus.sentence(*idx).to_vec(), cuts[0]))
            .collect();
        let v = loss_distill_sensitive(&reference, &mut adapter, &lex1, &batch, DistillMode::Sensitive, false)
            .unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn distill_matches_direct_kl_oracle() {
        let (reference, corpus, lex) = tiny_setup();
        let mut adapter = perturbed_adapter(&reference, 11);
        let pools = partition_pools(&corpus, &lex).unwrap();
        let batch: Vec<(Vec<usize>, usize)> = pools
            .mention_bearing
            .iter()
            .take(3)
            .map(|(idx, cuts)| (corpus.sentence(*idx).to_vec(), *cuts.last().unwrap()))
            .collect();
        let v = loss_distill_sensitive(&reference, &mut adapter, &lex, &batch, DistillMode::Sensitive, false)
            .unwrap();
        let ids = sensitive_vocab_ids(&lex, &reference).unwrap();
        let mut acc = 0.0;
        for (tokens, cut) in &batch {
            let prefix = &tokens[..cut - 1];
            let p_ref =
                crate::model::next_token_logprobs(&reference, None, prefix, Some(&ids)).unwrap();
            let p_deb =
                crate::model::next_token_logprobs(&reference, Some(&adapter), prefix, Some(&ids))
                    .unwrap();
            acc += crate::numerics::kl_divergence(&p_ref, &p_deb).unwrap();
        }
        assert!((v - acc / batch.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn lm_loss_matches_per_position_oracle_and_rejects_polarized() {
        let (reference, corpus, lex) = tiny_setup();
        let mut adapter = perturbed_adapter(&reference, 12);
        let pools = partition_pools(&corpus, &lex).unwrap();
        let batch: Vec<Vec<usize>> = pools
            .neutral
            .iter()
            .take(3)
            .map(|&idx| corpus.sentence(idx).to_vec())
            .collect();
        let v = loss_lm_neutral(&reference, &mut adapter, &lex, &batch, false).unwrap();
        let mut nll = 0.0;
        let mut count = 0usize;
        for tokens in &batch {
            for t in 2..=tokens.len() {
                let lp = crate::model::next_token_logprobs(
                    &reference,
                    Some(&adapter),
                    &tokens[..t - 1],
                    None,
                )
                .unwrap();
                nll -= lp.values()[tokens[t - 1]];
                count += 1;
            }
        }
        assert!((v - nll / count as f64).abs() < 1e-10);
        // contract violation: a polarized sentence sneaks in
        let polarized = corpus.sentence(pools.polarized[0].0).to_vec();
        assert!(loss_lm_neutral(&reference, &mut adapter, &lex, &[polarized], false).is_err());
    }

    #[test]
    fn train_step_zero_lr_only_advances_counters() {
        let (reference, corpus, lex) = tiny_setup();
        let config = TrainConfig {
            lr: 0.0,
            q_lr: 0.0,
            batch_size: 3,
            steps: 1,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&reference, 2, &config).unwrap();
        let before: Vec<Vec<f64>> = (0..state.adapter.params.len())
            .map(|s| state.adapter.params.value(s).data().to_vec())
            .collect();
        let pools = partition_pools(&corpus, &lex).unwrap();
        let batch = sample_batch_triple(&pools, 3, &mut state.rng).unwrap();
        let record = train_step(&reference, &corpus, &lex, &mut state, &batch, &config).unwrap();
        assert_eq!(state.step, 1);
        assert!(
            (record.total - (record.fair + config.alpha1 * record.lm + config.alpha2 * record.vg))
                .abs()
                < 1e-12
        );
        for (s, b) in before.iter().enumerate() {
            assert_eq!(state.adapter.params.value(s).data(), b.as_slice());
        }
    }

    #[test]
    fn debias_deterministic_and_reference_frozen() {
        let (reference, corpus, lex) = tiny_setup();
        let ref_before = crate::model::checkpoint::save_reference(&reference);
        let config = TrainConfig {
            steps: 25,
            batch_size: 3,
            seed: 11,
            lr: 5e-3,
            q_lr: 5e-2,
            ..TrainConfig::default()
        };
        let a = run_debias(&reference, &corpus, &lex, &config).unwrap();
        let b = run_debias(&reference, &corpus, &lex, &config).unwrap();
        let ca = crate::model::checkpoint::save_adapter(reference.config(), &a.adapter, &a.q.params);
        let cb = crate::model::checkpoint::save_adapter(reference.config(), &b.adapter, &b.q.params);
        assert_eq!(ca, cb, "identical seeds must give bit-identical checkpoints");
        assert_eq!(ref_before, crate::model::checkpoint::save_reference(&reference));
        assert_eq!(a.records.len(), 25);
        let csv = metrics_csv(&a.records);
        assert!(csv.starts_with("step,loss_total,loss_fair,loss_lm,loss_vg,r_polar_est\n"));
        assert_eq!(csv.lines().count(), 26);
    }

    #[test]
    fn zero_steps_leaves_identity_adapter() {
        let (reference, corpus, lex) = tiny_setup();
        let config = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let run = run_debias(&reference, &corpus, &lex, &config).unwrap();
        assert!(run.adapter.params.get("w2").data().iter().all(|&v| v == 0.0));
        assert!(run.records.is_empty());
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        // d = 8, N = 2 configuration from the spec'd invariant
        let lex = tiny_lexicon();
        let spec = BiasSpec::default_for(lex.clone(), 0.8, 40).unwrap();
        let corpus = generate_synthetic_corpus(&spec, 13).unwrap();
        let hyper = ReferenceTrainConfig {
            model: ModelConfig {
                d: 8,
                adapter_dim: 2,
                layers: 1,
                heads: 2,
                ctx: 16,
            },
            steps: 30,
            batch_size: 4,
            lr: 3e-3,
        };
        let reference = train_reference(&corpus, &hyper, 17).unwrap();
        let q = PolarityClassifier::init(8, 2, 18).unwrap();
        let pools = partition_pools(&corpus, &lex).unwrap();
        let polarized: Vec<(Vec<usize>, usize)> = pools.polarized[..2]
            .iter()
            .map(|&(idx, g)| (corpus.sentence(idx).to_vec(), g))
            .collect();
        let positions: Vec<usize> = polarized.iter().map(|(t, _)| t.len().min(3)).collect();
        let neutral: Vec<Vec<usize>> = pools.neutral[..2]
            .iter()
            .map(|&idx| corpus.sentence(idx).to_vec())
            .collect();
        let mention: Vec<(Vec<usize>, usize)> = pools.mention_bearing[..2]
            .iter()
            .map(|(idx, cuts)| (corpus.sentence(*idx).to_vec(), cuts[0]))
            .collect();
        let subset = sensitive_vocab_ids(&lex, &reference).unwrap();
        let adapter = perturbed_adapter(&reference, 19);
        let mut params = adapter.params.clone();
        let (alpha1, alpha2) = (2.0, 2.0);
        let max_rel = check_gradients(
            |p: &mut ParameterSet, with_grad| {
                let mut tape = Tape::new();
                let refvars =
                    ReferenceVars::register(&mut tape, reference.params(), reference.config(), None);
                let set = if with_grad { Some(0) } else { None };
                let avars = AdapterVars::register(&mut tape, p, set);
                let qvars = QVars::register(&mut tape, &q, None);
                let (fair, _) = fair_var(
                    &mut tape, &refvars, &avars, &qvars, &polarized, &positions, false, false,
                )?;
                let lm = lm_var(&mut tape, &refvars, &avars, &neutral)?;
                let vg = vg_var(&mut tape, &refvars, &avars, &mention, Some(&subset))?;
                let lm_s = tape.scale(lm, alpha1);
                let vg_s = tape.scale(vg, alpha2);
                let partial = tape.add(fair, lm_s);
                let total = tape.add(partial, vg_s);
                let value = tape.scalar(total);
                if with_grad {
                    p.zero_grads();
                    tape.backward(total, &mut [p])?;
                }
                Ok(value)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
