//! Measurement: the F_ngram and F_max fairness ratios, counterfactual KL
//! on swapped prompt pairs, perplexity, the mention inconsistency rate, and
//! the fairness/fluency tradeoff table.

use crate::corpus::{Corpus, Vocab};
use crate::lexicon::{classify_polarity, mention_occurrences, DemographicLexicon, PolarityLabel};
use crate::model::{next_token_logprobs, sentence_loglik, DebiasAdapter, ReferenceLM};
use crate::numerics::kl_divergence;
use crate::{Error, Result};

/// Two prefixes identical except for demographic-sensitive words swapped
/// between the two groups, e.g. "he works as" / "she works as".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

impl PromptPair {
    pub fn new(a: Vec<String>, b: Vec<String>) -> Self {
        PromptPair { a, b }
    }

    /// Check the structural invariants: equal token length, non-sensitive
    /// tokens identical position-wise, every differing position a pair of
    /// sensitive words from different groups.
    pub fn validate(&self, lex: &DemographicLexicon) -> Result<()> {
        if self.a.is_empty() || self.a.len() != self.b.len() {
            return Err(Error::Validation(format!(
                "prompt pair lengths differ: {} vs {}",
                self.a.len(),
                self.b.len()
            )));
        }
        for (x, y) in self.a.iter().zip(&self.b) {
            if x == y {
                continue;
            }
            match (lex.group_of(x), lex.group_of(y)) {
                (Some(gx), Some(gy)) if gx != gy => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "differing tokens '{x}' / '{y}' are not a cross-group sensitive pair"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parse a prompt-pair file: two tab-separated prefixes per line; blank
/// lines and `#` comments are skipped.
pub fn parse_prompt_pairs(text: &str) -> Result<Vec<PromptPair>> {
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut halves = line.split('\t');
        let (Some(a), Some(b), None) = (halves.next(), halves.next(), halves.next()) else {
            return Err(Error::Parse(format!(
                "line {}: expected exactly two tab-separated prefixes",
                no + 1
            )));
        };
        pairs.push(PromptPair::new(
            crate::corpus::tokenize(a),
            crate::corpus::tokenize(b),
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Parse("prompt-pair file has no pairs".into()));
    }
    Ok(pairs)
}

fn binary_ratio(counts: &[usize]) -> Option<f64> {
    let (a, b) = (counts[0], counts[1]);
    match (a, b) {
        (0, 0) => None,
        (0, _) | (_, 0) => Some(0.0),
        _ => Some((a as f64 / b as f64).min(b as f64 / a as f64)),
    }
}

fn polarity_counts(generations: &[Vec<usize>], vocab: &Vocab, lex: &DemographicLexicon) -> Vec<usize> {
    // one slot per group, plus a trailing slot for neutral
    let mut counts = vec![0usize; lex.group_count() + 1];
    for tokens in generations {
        let words: Vec<&str> = tokens.iter().map(|&id| vocab.token(id)).collect();
        match classify_polarity(&words, lex) {
            PolarityLabel::Group(g) => counts[g] += 1,
            PolarityLabel::Neutral => counts[lex.group_count()] += 1,
        }
    }
    counts
}

/// Eq. 22: min{#group0 / #group1, #group1 / #group0} over the polarity
/// counts of the generations. Neutral sentences count for neither side.
/// Returns None when both counts are zero (undefined), 0 when exactly one is.
pub fn f_ngram(
    generations: &[Vec<usize>],
    vocab: &Vocab,
    lex: &DemographicLexicon,
) -> Result<Option<f64>> {
    if lex.group_count() != 2 {
        return Err(Error::invalid("f_ngram is defined for exactly 2 groups"));
    }
    Ok(binary_ratio(&polarity_counts(generations, vocab, lex)))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean reference embedding of each group's sensitive words (those present
/// in the vocabulary).
pub fn group_centroids(reference: &ReferenceLM, lex: &DemographicLexicon) -> Result<Vec<Vec<f64>>> {
    let d = reference.config().d;
    let mut centroids = Vec::with_capacity(lex.group_count());
    for k in 0..lex.group_count() {
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for word in lex.group_words(k) {
            if let Some(id) = reference.vocab().id(word) {
                for (a, e) in acc.iter_mut().zip(reference.embedding(id)) {
                    *a += e;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Configuration(format!(
                "no word of group '{}' appears in the vocabulary",
                lex.group_name(k)
            )));
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        centroids.push(acc);
    }
    Ok(centroids)
}

/// Embedding-based polarity ratio: a sentence's polarity is the group of
/// its single most-similar token (cosine to the group centroids) when that
/// similarity exceeds `threshold`, else neutral; then the Eq. 22 ratio.
pub fn f_max(
    generations: &[Vec<usize>],
    reference: &ReferenceLM,
    lex: &DemographicLexicon,
    threshold: f64,
) -> Result<Option<f64>> {
    if lex.group_count() != 2 {
        return Err(Error::invalid("f_max is defined for exactly 2 groups"));
    }
    let centroids = group_centroids(reference, lex)?;
    let mut counts = vec![0usize; 2];
    for tokens in generations {
        let mut best = f64::NEG_INFINITY;
        let mut best_group = None;
        for &id in tokens {
            let e = reference.embedding(id);
            for (k, c) in centroids.iter().enumerate() {
                let s = cosine(e, c);
                if s > best {
                    best = s;
                    best_group = Some(k);
                }
            }
        }
        if let Some(k) = best_group {
            if best > threshold {
                counts[k] += 1;
            }
        }
    }
    Ok(binary_ratio(&counts))
}

/// Mean over pairs of KL(P(. | a) || P(. | b)) under the debiased model's
/// full-vocabulary next-token distribution.
pub fn counterfactual_kl(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    pairs: &[PromptPair],
    lex: &DemographicLexicon,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no prompt pairs"));
    }
    let mut total = 0.0;
    for pair in pairs {
        pair.validate(lex)?;
        let a: Vec<&str> = pair.a.iter().map(String::as_str).collect();
        let b: Vec<&str> = pair.b.iter().map(String::as_str).collect();
        let ids_a = reference.token_ids(&a)?;
        let ids_b = reference.token_ids(&b)?;
        let pa = next_token_logprobs(reference, adapter, &ids_a, None)?;
        let pb = next_token_logprobs(reference, adapter, &ids_b, None)?;
        total += kl_divergence(&pa, &pb)?;
    }
    Ok(total / pairs.len() as f64)
}

/// exp(mean per-token negative log-likelihood) over all positions t >= 2.
pub fn perplexity(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    corpus: &Corpus,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty evaluation corpus"));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for i in 0..corpus.len() {
        let tokens = corpus.sentence(i);
        nll -= sentence_loglik(reference, adapter, tokens)?;
        count += tokens.len() - 1;
    }
    Ok((nll / count as f64).exp())
}

/// Fraction of generations containing at least one inconsistent mention: a
/// mention with another group's mention within (window-1)/2 tokens on
/// either side (distance measured between mention start indices).
pub fn inconsistency_rate(
    generations: &[Vec<usize>],
    vocab: &Vocab,
    lex: &DemographicLexicon,
    window: usize,
) -> Result<f64> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid("window must be odd and >= 3"));
    }
    if generations.is_empty() {
        return Err(Error::invalid("no generations"));
    }
    let half = (window - 1) / 2;
    let mut inconsistent = 0usize;
    for tokens in generations {
        let words: Vec<&str> = tokens.iter().map(|&id| vocab.token(id)).collect();
        let mentions = mention_occurrences(&words, lex);
        let hit = mentions.iter().enumerate().any(|(i, &(p1, _, g1))| {
            mentions
                .iter()
                .skip(i + 1)
                .any(|&(p2, _, g2)| g1 != g2 && p1.abs_diff(p2) <= half)
        });
        if hit {
            inconsistent += 1;
        }
    }
    Ok(inconsistent as f64 / generations.len() as f64)
}

/// Complete metric set for one model checkpoint.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// F_ngram per prompt set, in input order.
    pub f_ngram_sets: Vec<Option<f64>>,
    /// Mean over the defined per-set values.
    pub f_ngram_avg: Option<f64>,
    pub f_max_sets: Vec<Option<f64>>,
    pub f_max_avg: Option<f64>,
    pub counterfactual_kl: f64,
    pub perplexity: f64,
    pub inconsistency: f64,
    /// Generations per group, with neutral in the trailing slot.
    pub polarity_counts: Vec<usize>,
}

fn average_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Compute every metric for one model: `generation_sets` holds the
/// completions for each prompt set (already generated, as token ids).
pub fn evaluate(
    reference: &ReferenceLM,
    adapter: Option<&DebiasAdapter>,
    generation_sets: &[Vec<Vec<usize>>],
    pairs: &[PromptPair],
    held_out: &Corpus,
    lex: &DemographicLexicon,
    f_max_threshold: f64,
    window: usize,
) -> Result<MetricsReport> {
    if generation_sets.is_empty() {
        return Err(Error::invalid("no generation sets"));
    }
    let vocab = reference.vocab();
    let mut f_ngram_sets = Vec::with_capacity(generation_sets.len());
    let mut f_max_sets = Vec::with_capacity(generation_sets.len());
    for set in generation_sets {
        f_ngram_sets.push(f_ngram(set, vocab, lex)?);
        f_max_sets.push(f_max(set, reference, lex, f_max_threshold)?);
    }
    let all: Vec<Vec<usize>> = generation_sets.iter().flatten().cloned().collect();
    Ok(MetricsReport {
        f_ngram_avg: average_defined(&f_ngram_sets),
        f_max_avg: average_defined(&f_max_sets),
        f_ngram_sets,
        f_max_sets,
        counterfactual_kl: counterfactual_kl(reference, adapter, pairs, lex)?,
        perplexity: perplexity(reference, adapter, held_out)?,
        inconsistency: inconsistency_rate(&all, vocab, lex, window)?,
        polarity_counts: polarity_counts(&all, vocab, lex),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "undefined".to_string(),
    }
}

impl MetricsReport {
    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (i, v) in self.f_ngram_sets.iter().enumerate() {
            out.push_str(&format!("f_ngram_set{},{}\n", i, fmt_opt(*v)));
        }
        out.push_str(&format!("f_ngram_avg,{}\n", fmt_opt(self.f_ngram_avg)));
        for (i, v) in self.f_max_sets.iter().enumerate() {
            out.push_str(&format!("f_max_set{},{}\n", i, fmt_opt(*v)));
        }
        out.push_str(&format!("f_max_avg,{}\n", fmt_opt(self.f_max_avg)));
        out.push_str(&format!("counterfactual_kl,{}\n", self.counterfactual_kl));
        out.push_str(&format!("perplexity,{}\n", self.perplexity));
        out.push_str(&format!("inconsistency_rate,{}\n", self.inconsistency));
        for (i, c) in self.polarity_counts.iter().enumerate() {
            if i + 1 == self.polarity_counts.len() {
                out.push_str(&format!("generations_neutral,{c}\n"));
            } else {
                out.push_str(&format!("generations_group{i},{c}\n"));
            }
        }
        out
    }

    /// Human-readable block.
    pub fn summary(&self) -> String {
        format!(
            "F_ngram (avg over sets): {}\nF_max   (avg over sets): {}\nCounterfactual KL:       {}\nPerplexity:              {}\nInconsistency rate:      {}\nGenerations by polarity: {:?}\n",
            fmt_opt(self.f_ngram_avg),
            fmt_opt(self.f_max_avg),
            self.counterfactual_kl,
            self.perplexity,
            self.inconsistency,
            self.polarity_counts,
        )
    }
}

/// One row of the fairness/fluency tradeoff data.
#[derive(Debug, Clone)]
pub struct TradeoffRow {
    pub alpha1: f64,
    pub alpha2: f64,
    pub mode: String,
    pub kl: f64,
    pub ppl: f64,
}

/// Combine counterfactual KL and perplexity for a series of checkpoints
/// (None = the bare reference baseline); rows come back ordered by
/// alpha1 then alpha2.
pub fn tradeoff_table(
    reference: &ReferenceLM,
    checkpoints: &[(f64, f64, String, Option<DebiasAdapter>)],
    pairs: &[PromptPair],
    held_out: &Corpus,
    lex: &DemographicLexicon,
) -> Result<Vec<TradeoffRow>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("no checkpoints"));
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (alpha1, alpha2, mode, adapter) in checkpoints {
        rows.push(TradeoffRow {
            alpha1: *alpha1,
            alpha2: *alpha2,
            mode: mode.clone(),
            kl: counterfactual_kl(reference, adapter.as_ref(), pairs, lex)?,
            ppl: perplexity(reference, adapter.as_ref(), held_out)?,
        });
    }
    rows.sort_by(|a, b| {
        (a.alpha1, a.alpha2)
            .partial_cmp(&(b.alpha1, b.alpha2))
            .expect("finite coefficients")
    });
    Ok(rows)
}

/// `alpha1,alpha2,mode,kl,ppl` rows.
pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut out = String::from("alpha1,alpha2,mode,kl,ppl\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.alpha1, r.alpha2, r.mode, r.kl, r.ppl
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn lex2() -> DemographicLexicon {
        DemographicLexicon::parse("female: she, her, woman\nmale: he, his, man\n").unwrap()
    }

    fn model_from(text: &str) -> ReferenceLM {
        let corpus = Corpus::parse(text).unwrap();
        ReferenceLM::init(
            ModelConfig {
                d: 8,
                adapter_dim: 3,
                layers: 1,
                heads: 2,
                ctx: 16,
            },
            corpus.vocab().clone(),
            99,
        )
        .unwrap()
    }

    fn ids(vocab: &Vocab, words: &[&str]) -> Vec<usize> {
        words.iter().map(|w| vocab.id(w).unwrap()).collect()
    }

    #[test]
    fn f_ngram_ratios() {
        let lex = lex2();
        let corpus = Corpus::parse("she works\nhe works\nthe sky\n").unwrap();
        let v = corpus.vocab();
        let she = ids(v, &["she", "works"]);
        let he = ids(v, &["he", "works"]);
        let neutral = ids(v, &["the", "sky"]);
        let mk = |nf: usize, nm: usize| -> Vec<Vec<usize>> {
            let mut g = vec![neutral.clone()];
            g.extend(std::iter::repeat_n(she.clone(), nf));
            g.extend(std::iter::repeat_n(he.clone(), nm));
            g
        };
        assert_eq!(f_ngram(&mk(4, 4), v, &lex).unwrap(), Some(1.0));
        assert_eq!(f_ngram(&mk(3, 4), v, &lex).unwrap(), Some(0.75));
        assert_eq!(f_ngram(&mk(0, 7), v, &lex).unwrap(), Some(0.0));
        assert_eq!(f_ngram(&mk(0, 0), v, &lex).unwrap(), None);
    }

    #[test]
    fn f_ngram_symmetric_and_matches_recount() {
        let lex = lex2();
        let flipped =
            DemographicLexicon::parse("male: he, his, man\nfemale: she, her, woman\n").unwrap();
        let corpus = Corpus::parse("she works\nhe works\nhis job\nher job\nthe sky\n").unwrap();
        let v = corpus.vocab();
        let gens: Vec<Vec<usize>> = (0..corpus.len()).map(|i| corpus.sentence(i)[..2].to_vec()).collect();
        let a = f_ngram(&gens, v, &lex).unwrap();
        let b = f_ngram(&gens, v, &flipped).unwrap();
        assert_eq!(a, b);
        // brute-force recount
        let mut nf = 0;
        let mut nm = 0;
        for g in &gens {
            let words: Vec<&str> = g.iter().map(|&id| v.token(id)).collect();
            let f = words.iter().filter(|w| ["she", "her", "woman"].contains(&w.as_ref())).count();
            let m = words.iter().filter(|w| ["he", "his", "man"].contains(&w.as_ref())).count();
            if f > m {
                nf += 1;
            } else if m > f {
                nm += 1;
            }
        }
        let expected = (nf as f64 / nm as f64).min(nm as f64 / nf as f64);
        assert_eq!(a, Some(expected));
    }

    #[test]
    fn f_ngram_needs_two_groups() {
        let lex3 = DemographicLexicon::parse("a: she\nb: he\nc: they\n").unwrap();
        let corpus = Corpus::parse("she he they\n").unwrap();
        assert!(f_ngram(&[corpus.sentence(0).to_vec()], corpus.vocab(), &lex3).is_err());
    }

    #[test]
    fn f_max_self_similarity_and_degenerate_threshold() {
        let lex = lex2();
        let reference = model_from("she works as a doctor\nhe works as a nurse\n");
        let v = reference.vocab();
        let gen = vec![ids(v, &["she", "works"]), ids(v, &["he", "works"])];
        // a group word's own embedding has cosine 1 with a singleton
        // centroid direction only in general position; with multi-word
        // centroids it is still the argmax here
        let r = f_max(&gen, &reference, &lex, 0.5).unwrap();
        assert_eq!(r, Some(1.0));
        assert_eq!(f_max(&gen, &reference, &lex, f64::INFINITY).unwrap(), None);
    }

    #[test]
    fn f_max_matches_hand_oracle() {
        // three-word vocabulary with hand-planted embeddings
        let corpus = Corpus::parse("she he rock\n").unwrap();
        let mut reference = model_from("she he rock\n");
        let v = corpus.vocab().clone();
        let lex = DemographicLexicon::parse("female: she\nmale: he\n").unwrap();
        // overwrite embeddings: she = e1, he = e2, rock halfway to she
        {
            let slot = 0; // emb is the first registered parameter
            assert_eq!(reference.params().names()[slot], "emb");
            let mut params = reference.params().clone();
            let emb = params.value_mut(slot);
            for val in emb.data_mut() {
                *val = 0.0;
            }
            let she = v.id("she").unwrap();
            let he = v.id("he").unwrap();
            let rock = v.id("rock").unwrap();
            emb.set(she, 0, 1.0);
            emb.set(he, 1, 1.0);
            emb.set(rock, 0, 0.8);
            emb.set(rock, 1, 0.6);
            // eos token gets an orthogonal direction
            emb.set(0, 2, 1.0);
            reference =
                ReferenceLM::from_parts(reference.config().clone(), v.clone(), params).unwrap();
        }
        // sentence "rock": cosine to she-centroid = 0.8, to he-centroid 0.6
        let gen = vec![vec![v.id("rock").unwrap()]];
        assert_eq!(f_max(&gen, &reference, &lex, 0.7).unwrap(), Some(0.0)); // one-sided
        assert_eq!(f_max(&gen, &reference, &lex, 0.9).unwrap(), None);
    }

    #[test]
    fn counterfactual_kl_identity_and_oracle() {
        let lex = lex2();
        let reference = model_from("she works as a doctor\nhe works as a nurse\n");
        let same = PromptPair::new(
            vec!["works".into(), "as".into()],
            vec!["works".into(), "as".into()],
        );
        assert!(counterfactual_kl(&reference, None, &[same], &lex).unwrap().abs() < 1e-12);
        let pair = PromptPair::new(
            vec!["she".into(), "works".into(), "as".into()],
            vec!["he".into(), "works".into(), "as".into()],
        );
        let got = counterfactual_kl(&reference, None, std::slice::from_ref(&pair), &lex).unwrap();
        let a = ids(reference.vocab(), &["she", "works", "as"]);
        let b = ids(reference.vocab(), &["he", "works", "as"]);
        let pa = next_token_logprobs(&reference, None, &a, None).unwrap();
        let pb = next_token_logprobs(&reference, None, &b, None).unwrap();
        let direct = kl_divergence(&pa, &pb).unwrap();
        assert!((got - direct).abs() < 1e-10);
        assert!(got >= 0.0);
    }

    #[test]
    fn counterfactual_kl_zero_for_tied_embeddings() {
        let lex = lex2();
        let mut reference = model_from("she works as a doctor\nhe works as a nurse\n");
        let v = reference.vocab().clone();
        let mut params = reference.params().clone();
        let slot = params.slot("emb");
        let she = v.id("she").unwrap();
        let he = v.id("he").unwrap();
        let she_row: Vec<f64> = params.value(slot).row(she).to_vec();
        {
            let emb = params.value_mut(slot);
            for (c, val) in she_row.iter().enumerate() {
                emb.set(he, c, *val);
            }
        }
        reference = ReferenceLM::from_parts(reference.config().clone(), v, params).unwrap();
        let pair = PromptPair::new(
            vec!["she".into(), "works".into()],
            vec!["he".into(), "works".into()],
        );
        let kl = counterfactual_kl(&reference, None, &[pair], &lex).unwrap();
        assert!(kl.abs() < 1e-12, "tied embeddings must give zero KL, got {kl}");
    }

    #[test]
    fn malformed_pairs_rejected() {
        let lex = lex2();
        let reference = model_from("she he works the sky\n");
        let unequal = PromptPair::new(vec!["she".into()], vec!["he".into(), "works".into()]);
        assert!(counterfactual_kl(&reference, None, &[unequal], &lex).is_err());
        let not_sensitive = PromptPair::new(
            vec!["the".into(), "works".into()],
            vec!["sky".into(), "works".into()],
        );
        assert!(counterfactual_kl(&reference, None, &[not_sensitive], &lex).is_err());
        let same_group = PromptPair::new(vec!["she".into()], vec!["her".into()]);
        assert!(same_group.validate(&lex).is_err());
    }

    #[test]
    fn prompt_pair_parsing() {
        let text = "# comment\nshe works as\the works as\n\nher job was\this job was\n";
        let pairs = parse_prompt_pairs(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].a, vec!["she", "works", "as"]);
        assert_eq!(pairs[0].b, vec!["he", "works", "as"]);
        assert!(parse_prompt_pairs("no tab here\n").is_err());
        assert!(parse_prompt_pairs("a\tb\tc\n").is_err());
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let corpus = Corpus::parse("she works as a doctor\nhe works\n").unwrap();
        let mut reference = model_from("she works as a doctor\nhe works\n");
        // zero embeddings -> all logits equal -> uniform next-token dist
        let mut params = reference.params().clone();
        let slot = params.slot("emb");
        params.value_mut(slot).fill(0.0);
        reference = ReferenceLM::from_parts(
            reference.config().clone(),
            corpus.vocab().clone(),
            params,
        )
        .unwrap();
        let ppl = perplexity(&reference, None, &corpus).unwrap();
        assert!((ppl - corpus.vocab().len() as f64).abs() < 1e-9);
    }

    #[test]
    fn perplexity_matches_lm_loss_on_neutral_set() {
        let lex = lex2();
        let text = "the sky is blue\nthe grass is green\n";
        let corpus = Corpus::parse(text).unwrap();
        let reference = model_from(text);
        let mut adapter = DebiasAdapter::init(reference.config(), 3).unwrap();
        let batch: Vec<Vec<usize>> = (0..corpus.len()).map(|i| corpus.sentence(i).to_vec()).collect();
        let lm = crate::training::loss_lm_neutral(&reference, &mut adapter, &lex, &batch, false)
            .unwrap();
        let ppl = perplexity(&reference, Some(&adapter), &corpus).unwrap();
        assert!((ppl - lm.exp()).abs() < 1e-10);
    }

    #[test]
    fn inconsistency_window_rules() {
        let lex = lex2();
        let corpus = Corpus::parse(
            "she is known for her work\nthe woman was known for his hard work\nshe a b c d e f g h he end\n",
        )
        .unwrap();
        let v = corpus.vocab();
        let single = corpus.sentence(0).to_vec();
        let mixed = corpus.sentence(1).to_vec();
        let far = corpus.sentence(2).to_vec(); // she..he start indices 0 and 9
        assert_eq!(inconsistency_rate(&[single.clone()], v, &lex, 15).unwrap(), 0.0);
        assert_eq!(inconsistency_rate(&[mixed.clone()], v, &lex, 15).unwrap(), 1.0);
        // mentions 9 apart: outside window 15, inside window 19
        assert_eq!(inconsistency_rate(&[far.clone()], v, &lex, 15).unwrap(), 0.0);
        assert_eq!(inconsistency_rate(&[far.clone()], v, &lex, 19).unwrap(), 1.0);
        // monotone in window size
        let gens = vec![single, mixed, far];
        let mut last = 0.0;
        for w in [3, 7, 15, 19, 31] {
            let r = inconsistency_rate(&gens, v, &lex, w).unwrap();
            assert!(r >= last);
            last = r;
        }
        assert!(inconsistency_rate(&gens, v, &lex, 4).is_err());
        assert!(inconsistency_rate(&gens, v, &lex, 1).is_err());
    }

    #[test]
    fn mentions_exactly_eight_apart_consistent_under_fifteen() {
        let lex = lex2();
        let corpus = Corpus::parse("she a b c d e f g he end\n").unwrap();
        // start indices 0 and 8 -> distance 8 > 7
        let r = inconsistency_rate(
            &[corpus.sentence(0).to_vec()],
            corpus.vocab(),
            &lex,
            15,
        )
        .unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn tradeoff_single_row_matches_individual_calls() {
        let lex = lex2();
        let text = "she works as a doctor\nhe works as a nurse\nthe sky is blue\n";
        let corpus = Corpus::parse(text).unwrap();
        let reference = model_from(text);
        let pair = PromptPair::new(
            vec!["she".into(), "works".into()],
            vec!["he".into(), "works".into()],
        );
        let rows = tradeoff_table(
            &reference,
            &[(0.0, 0.0, "baseline".into(), None)],
            std::slice::from_ref(&pair),
            &corpus,
            &lex,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        let kl = counterfactual_kl(&reference, None, std::slice::from_ref(&pair), &lex).unwrap();
        let ppl = perplexity(&reference, None, &corpus).unwrap();
        assert_eq!(rows[0].kl, kl);
        assert_eq!(rows[0].ppl, ppl);
        let csv = tradeoff_csv(&rows);
        assert!(csv.starts_with("alpha1,alpha2,mode,kl,ppl\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn tradeoff_rows_sorted() {
        let lex = lex2();
        let text = "she works\nhe works\n";
        let corpus = Corpus::parse(text).unwrap();
        let reference = model_from(text);
        let pair = PromptPair::new(vec!["she".into()], vec!["he".into()]);
        let entries = vec![
            (4.0, 2.0, "s".to_string(), None),
            (0.0, 2.0, "s".to_string(), None),
            (4.0, 0.0, "s".to_string(), None),
        ];
        let rows = tradeoff_table(&reference, &entries, &[pair], &corpus, &lex).unwrap();
        let order: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha1, r.alpha2)).collect();
        assert_eq!(order, vec![(0.0, 2.0), (4.0, 0.0), (4.0, 2.0)]);
    }

    #[test]
    fn report_csv_round_trip_shape() {
        let lex = lex2();
        let text = "she works as a doctor\nhe works as a nurse\nthe sky is blue\n";
        let corpus = Corpus::parse(text).unwrap();
        let reference = model_from(text);
        let v = reference.vocab();
        let gens = vec![vec![
            ids(v, &["she", "works"]),
            ids(v, &["he", "works"]),
            ids(v, &["the", "sky"]),
        ]];
        let pair = PromptPair::new(
            vec!["she".into(), "works".into()],
            vec!["he".into(), "works".into()],
        );
        let report = evaluate(&reference, None, &gens, &[pair], &corpus, &lex, 0.5, 15).unwrap();
        assert_eq!(report.polarity_counts, vec![1, 1, 1]);
        assert_eq!(report.f_ngram_avg, Some(1.0));
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("counterfactual_kl,"));
        assert!(csv.contains("generations_neutral,1\n"));
        assert!(report.summary().contains("Perplexity"));
    }
}
