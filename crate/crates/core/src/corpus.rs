//! Corpus handling: a word-level tokenizer with a dedicated end token, the
//! synthetic biased-corpus generator (known ground-truth bias strength), and
//! the three sampling pools a training step draws from: polarized sentences,
//! neutral sentences, and mention-bearing (sentence, cut position) pairs.

use std::collections::HashMap;

use rand::Rng;

use crate::lexicon::{classify_polarity, mention_prefix_positions, DemographicLexicon, PolarityLabel};
use crate::{Error, Result};

pub const END_TOKEN: &str = "</s>";

/// Ordered token set. The end token always has id 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.intern(END_TOKEN);
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(END_TOKEN) {
            return Err(Error::Validation(format!(
                "vocabulary must start with the end token {END_TOKEN}"
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub const END_ID: usize = 0;
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

/// Lowercase, split on whitespace. The model-facing id form appends the end
/// token; the string form is raw.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Sentences as token-id sequences (each ending with the end token) plus the
/// shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    sentences: Vec<Vec<usize>>,
    vocab: Vocab,
}

impl Corpus {
    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut vocab = Vocab::new();
        let mut sentences = Vec::new();
        for line in lines {
            let words = tokenize(line);
            if words.is_empty() {
                continue;
            }
            let mut ids: Vec<usize> = words.iter().map(|w| vocab.intern(w)).collect();
            ids.push(Vocab::END_ID);
            sentences.push(ids);
        }
        if sentences.is_empty() {
            return Err(Error::Validation("corpus has no sentences".into()));
        }
        Ok(Corpus { sentences, vocab })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_lines(text.lines())
    }

    /// Parse under an existing vocabulary (token ids must line up with a
    /// trained model's); unknown words are an error.
    pub fn parse_with_vocab(text: &str, vocab: &Vocab) -> Result<Self> {
        let mut sentences = Vec::new();
        for line in text.lines() {
            let words = tokenize(line);
            if words.is_empty() {
                continue;
            }
            let mut ids = Vec::with_capacity(words.len() + 1);
            for w in &words {
                ids.push(vocab.id(w).ok_or_else(|| {
                    Error::Validation(format!("word '{w}' is not in the model vocabulary"))
                })?);
            }
            ids.push(Vocab::END_ID);
            sentences.push(ids);
        }
        if sentences.is_empty() {
            return Err(Error::Validation("corpus has no sentences".into()));
        }
        Ok(Corpus {
            sentences,
            vocab: vocab.clone(),
        })
    }

    /// One sentence per line, tokens space-separated; the end token is not
    /// written (it is re-appended on load).
    pub fn to_file_format(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            let words: Vec<&str> = s[..s.len() - 1].iter().map(|&id| self.vocab.token(id)).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.sentences[i]
    }

    pub fn sentence_tokens(&self, i: usize) -> Vec<&str> {
        self.sentences[i]
            .iter()
            .map(|&id| self.vocab.token(id))
            .collect()
    }

    /// Deterministic split into (train, held_out) by taking every k-th
    /// sentence into the held-out part.
    pub fn split_held_out(&self, every_kth: usize) -> (Corpus, Corpus) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if i % every_kth == every_kth - 1 {
                held.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        (
            Corpus {
                sentences: train,
                vocab: self.vocab.clone(),
            },
            Corpus {
                sentences: held,
                vocab: self.vocab.clone(),
            },
        )
    }
}

/// Ground-truth recipe for a synthetic biased corpus. Among polarized
/// sentences, a group's stereotyped occupation co-occurs with that group
/// with probability (1 + beta) / 2.
#[derive(Debug, Clone)]
pub struct BiasSpec {
    pub lexicon: DemographicLexicon,
    /// Stereotyped occupation words, one list per lexicon group.
    pub group_occupations: Vec<Vec<String>>,
    /// Bias strength in [0, 1].
    pub beta: f64,
    /// Fraction of neutral filler sentences in [0, 1].
    pub neutral_fraction: f64,
    pub n_sentences: usize,
    /// Polarized templates containing `<g>` (group word) and `<occ>` slots.
    pub polarized_templates: Vec<String>,
    /// Neutral templates; may contain an `<occ>` slot, never sensitive words.
    pub neutral_templates: Vec<String>,
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta {} outside [0,1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.neutral_fraction) {
            return Err(Error::invalid(format!(
                "neutral_fraction {} outside [0,1]",
                self.neutral_fraction
            )));
        }
        if self.polarized_templates.is_empty() || self.neutral_templates.is_empty() {
            return Err(Error::invalid("empty template set"));
        }
        if self.group_occupations.len() != self.lexicon.group_count() {
            return Err(Error::invalid(
                "need one occupation list per lexicon group",
            ));
        }
        if self.group_occupations.iter().any(|l| l.is_empty()) {
            return Err(Error::invalid("empty occupation list"));
        }
        Ok(())
    }

    /// Built-in gender default: templates plus stereotyped occupation lists.
    pub fn default_for(lexicon: DemographicLexicon, beta: f64, n_sentences: usize) -> Result<Self> {
        if lexicon.group_count() != 2 {
            return Err(Error::invalid(
                "default bias spec is defined for two-group lexicons",
            ));
        }
        let spec = BiasSpec {
            lexicon,
            group_occupations: vec![
                ["doctor", "engineer", "pilot", "carpenter"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
                ["nurse", "teacher", "dancer", "librarian"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ],
            beta,
            neutral_fraction: 0.3,
            n_sentences,
            polarized_templates: vec![
                "<g> works as a <occ>".into(),
                "the <occ> said <g> is busy".into(),
                "<g> trained as a <occ> last year".into(),
                "as a <occ> <g> earns a fair wage".into(),
            ],
            neutral_templates: vec![
                "the <occ> job is steady work".into(),
                "people value good <occ> training".into(),
                "the clinic opened early today".into(),
                "every <occ> deserves fair pay".into(),
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parse the key = value spec format. Recognized keys: `beta`,
    /// `n_sentences`, `neutral_fraction`, `seed` (returned separately),
    /// `occupations.<group>`, `polarized_template`, `neutral_template`
    /// (the template keys repeat). Lines starting with `#` are ignored.
    pub fn parse(text: &str, lexicon: DemographicLexicon) -> Result<(Self, Option<u64>)> {
        let mut beta = None;
        let mut n_sentences = None;
        let mut neutral_fraction = 0.3;
        let mut seed = None;
        let mut occupations: Vec<Vec<String>> = vec![Vec::new(); lexicon.group_count()];
        let mut polarized_templates = Vec::new();
        let mut neutral_templates = Vec::new();

        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bias spec line {}: missing '='", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_f64 = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bias spec: bad number '{v}' for {key}")))
            };
            match key {
                "beta" => beta = Some(parse_f64(value)?),
                "neutral_fraction" => neutral_fraction = parse_f64(value)?,
                "n_sentences" => {
                    n_sentences = Some(value.parse::<usize>().map_err(|_| {
                        Error::Parse(format!("bias spec: bad count '{value}'"))
                    })?)
                }
                "seed" => {
                    seed = Some(value.parse::<u64>().map_err(|_| {
                        Error::Parse(format!("bias spec: bad seed '{value}'"))
                    })?)
                }
                "polarized_template" => polarized_templates.push(value.to_string()),
                "neutral_template" => neutral_templates.push(value.to_string()),
                _ => {
                    if let Some(group) = key.strip_prefix("occupations.") {
                        let k = (0..lexicon.group_count())
                            .find(|&k| lexicon.group_name(k) == group)
                            .ok_or_else(|| {
                                Error::Parse(format!("bias spec: unknown group '{group}'"))
                            })?;
                        occupations[k] = value
                            .split(',')
                            .map(|w| w.trim().to_lowercase())
                            .filter(|w| !w.is_empty())
                            .collect();
                    } else {
                        return Err(Error::Parse(format!("bias spec: unknown key '{key}'")));
                    }
                }
            }
        }
        let spec = BiasSpec {
            lexicon,
            group_occupations: occupations,
            beta: beta.ok_or_else(|| Error::Parse("bias spec: missing beta".into()))?,
            neutral_fraction,
            n_sentences: n_sentences
                .ok_or_else(|| Error::Parse("bias spec: missing n_sentences".into()))?,
            polarized_templates,
            neutral_templates,
        };
        spec.validate()?;
        Ok((spec, seed))
    }

    /// All occupation words across groups, deduplicated in order.
    pub fn all_occupations(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for list in &self.group_occupations {
            for occ in list {
                if !seen.contains(&occ.as_str()) {
                    seen.push(occ);
                }
            }
        }
        seen
    }
}

/// Emit a synthetic corpus per the bias recipe. Deterministic for a fixed seed.
pub fn generate_synthetic_corpus(spec: &BiasSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = crate::training::seeded_rng(seed);
    let k = spec.lexicon.group_count();
    let mut lines = Vec::with_capacity(spec.n_sentences);
    for _ in 0..spec.n_sentences {
        if rng.gen::<f64>() < spec.neutral_fraction {
            let tmpl = &spec.neutral_templates[rng.gen_range(0..spec.neutral_templates.len())];
            let occs = spec.all_occupations();
            let occ = occs[rng.gen_range(0..occs.len())];
            lines.push(tmpl.replace("<occ>", occ));
        } else {
            let g = rng.gen_range(0..k);
            let tmpl = &spec.polarized_templates[rng.gen_range(0..spec.polarized_templates.len())];
            let words = spec.lexicon.group_words(g);
            let word = &words[rng.gen_range(0..words.len())];
            // Stereotyped co-occurrence with probability (1 + beta) / 2.
            let occ_group = if rng.gen::<f64>() < (1.0 + spec.beta) / 2.0 {
                g
            } else {
                let mut other = rng.gen_range(0..k - 1);
                if other >= g {
                    other += 1;
                }
                other
            };
            let occs = &spec.group_occupations[occ_group];
            let occ = &occs[rng.gen_range(0..occs.len())];
            lines.push(tmpl.replace("<g>", word).replace("<occ>", occ));
        }
    }
    Corpus::from_lines(lines.iter().map(String::as_str))
}

/// The three disjoint sampling views over one corpus.
#[derive(Debug, Clone)]
pub struct Pools {
    /// Sentence indices with a polarized label, plus the group index.
    pub polarized: Vec<(usize, usize)>,
    pub neutral: Vec<usize>,
    /// Sentence indices with at least one valid mention-bearing cut, plus
    /// the valid cut positions.
    pub mention_bearing: Vec<(usize, Vec<usize>)>,
}

/// Partition a corpus by polarity and collect mention-bearing sentences.
pub fn partition_pools(corpus: &Corpus, lex: &DemographicLexicon) -> Result<Pools> {
    let mut polarized = Vec::new();
    let mut neutral = Vec::new();
    let mut mention_bearing = Vec::new();
    for i in 0..corpus.len() {
        let tokens = corpus.sentence_tokens(i);
        match classify_polarity(&tokens, lex) {
            PolarityLabel::Group(g) => polarized.push((i, g)),
            PolarityLabel::Neutral => neutral.push(i),
        }
        let cuts = mention_prefix_positions(&tokens, lex);
        if !cuts.is_empty() {
            mention_bearing.push((i, cuts));
        }
    }
    if polarized.is_empty() {
        return Err(Error::Configuration(
            "polarized pool is empty: cannot estimate the likelihood-ratio weights".into(),
        ));
    }
    Ok(Pools {
        polarized,
        neutral,
        mention_bearing,
    })
}

/// One training step's worth of batches: N polarized sentences, N neutral
/// sentences, and N (sentence, cut position) pairs.
#[derive(Debug, Clone)]
pub struct BatchTriple {
    /// (sentence index, polarity group)
    pub polarized: Vec<(usize, usize)>,
    pub neutral: Vec<usize>,
    /// (sentence index, 1-based cut position t)
    pub mention_cuts: Vec<(usize, usize)>,
}

/// N independent uniform draws with replacement from each pool; the cut
/// position is drawn uniformly from the sentence's valid cuts.
pub fn sample_batch_triple<R: Rng>(pools: &Pools, n: usize, rng: &mut R) -> Result<BatchTriple> {
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if pools.neutral.is_empty() || pools.mention_bearing.is_empty() {
        return Err(Error::Configuration(
            "neutral or mention-bearing pool is empty".into(),
        ));
    }
    let polarized = (0..n)
        .map(|_| pools.polarized[rng.gen_range(0..pools.polarized.len())])
        .collect();
    let neutral = (0..n)
        .map(|_| pools.neutral[rng.gen_range(0..pools.neutral.len())])
        .collect();
    let mention_cuts = (0..n)
        .map(|_| {
            let (idx, cuts) = &pools.mention_bearing[rng.gen_range(0..pools.mention_bearing.len())];
            (*idx, cuts[rng.gen_range(0..cuts.len())])
        })
        .collect();
    Ok(BatchTriple {
        polarized,
        neutral,
        mention_cuts,
    })
}
