//! Demographic groups, sensitive-word sets, and the polarity rule: a
//! sentence is polarized toward the group with strictly the most mentions,
//! and neutral on ties or when nothing is mentioned.

use std::collections::HashSet;

use crate::{Error, Result};

/// K demographic groups, each with a disjoint set of lowercase sensitive words.
#[derive(Debug, Clone)]
pub struct DemographicLexicon {
    groups: Vec<(String, Vec<String>)>,
}

/// Demographic polarity of a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolarityLabel {
    Group(usize),
    Neutral,
}

/// Per-group mention counts for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionCounts(pub Vec<usize>);

impl DemographicLexicon {
    pub fn new(groups: Vec<(String, Vec<String>)>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::Validation(format!(
                "lexicon needs at least 2 groups, got {}",
                groups.len()
            )));
        }
        let mut seen: HashSet<&str> = HashSet::new();
        for (name, words) in &groups {
            if name.is_empty() {
                return Err(Error::Validation("empty group name".into()));
            }
            if words.is_empty() {
                return Err(Error::Validation(format!("group '{name}' has no words")));
            }
            let mut within: HashSet<&str> = HashSet::new();
            for w in words {
                if w.is_empty() {
                    return Err(Error::Validation(format!("group '{name}' has an empty word")));
                }
                if w.chars().any(|c| c.is_uppercase()) {
                    return Err(Error::Validation(format!(
                        "word '{w}' in group '{name}' is not lowercase"
                    )));
                }
                if !within.insert(w) {
                    return Err(Error::Validation(format!(
                        "duplicate word '{w}' in group '{name}'"
                    )));
                }
                if !seen.insert(w) {
                    return Err(Error::Validation(format!(
                        "word '{w}' appears in more than one group"
                    )));
                }
            }
        }
        Ok(DemographicLexicon { groups })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn group_name(&self, k: usize) -> &str {
        &self.groups[k].0
    }

    pub fn group_words(&self, k: usize) -> &[String] {
        &self.groups[k].1
    }

    /// Index of the group containing `word`, if any.
    pub fn group_of(&self, word: &str) -> Option<usize> {
        self.groups
            .iter()
            .position(|(_, words)| words.iter().any(|w| w == word))
    }

    /// Union of all group word sets (V_G), in group then word order.
    pub fn all_sensitive_words(&self) -> Vec<&str> {
        self.groups
            .iter()
            .flat_map(|(_, words)| words.iter().map(|w| w.as_str()))
            .collect()
    }

    /// Parse the lexicon format: one group per line,
    /// `group_name: word1, word2, ...`; lines starting with `#` ignored.
    pub fn parse(source: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for (lineno, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| {
                Error::Parse(format!("lexicon line {}: missing ':'", lineno + 1))
            })?;
            let words: Vec<String> = rest
                .split(',')
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect();
            groups.push((name.trim().to_string(), words));
        }
        DemographicLexicon::new(groups)
    }

    /// Serialize back to the lexicon file format.
    pub fn to_file_format(&self) -> String {
        let mut out = String::new();
        for (name, words) in &self.groups {
            out.push_str(name);
            out.push_str(": ");
            out.push_str(&words.join(", "));
            out.push('\n');
        }
        out
    }
}

/// Load a lexicon from file contents.
pub fn load_lexicon(source: &str) -> Result<DemographicLexicon> {
    DemographicLexicon::parse(source)
}

/// One matched mention: 0-based start index, token length, group index.
pub(crate) fn mention_occurrences(
    tokens: &[&str],
    lex: &DemographicLexicon,
) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for k in 0..lex.group_count() {
        for entry in lex.group_words(k) {
            let parts: Vec<&str> = entry.split_whitespace().collect();
            if parts.len() == 1 {
                for (i, tok) in tokens.iter().enumerate() {
                    if *tok == parts[0] {
                        out.push((i, 1, k));
                    }
                }
            } else if tokens.len() >= parts.len() {
                // Multi-word entries match as contiguous token subsequences,
                // counted once per occurrence.
                for i in 0..=tokens.len() - parts.len() {
                    if tokens[i..i + parts.len()] == parts[..] {
                        out.push((i, parts.len(), k));
                    }
                }
            }
        }
    }
    out
}

/// Count per-group mentions: occurrences of any of the group's sensitive
/// words. Repeated occurrences count each time.
pub fn count_mentions(tokens: &[&str], lex: &DemographicLexicon) -> MentionCounts {
    let mut counts = vec![0usize; lex.group_count()];
    for (_, _, k) in mention_occurrences(tokens, lex) {
        counts[k] += 1;
    }
    MentionCounts(counts)
}

/// Group with strictly the most mentions; Neutral on zero mentions or ties.
pub fn classify_polarity(tokens: &[&str], lex: &DemographicLexicon) -> PolarityLabel {
    let counts = count_mentions(tokens, lex).0;
    let max = *counts.iter().max().unwrap_or(&0);
    if max == 0 {
        return PolarityLabel::Neutral;
    }
    let winners: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == max)
        .map(|(k, _)| k)
        .collect();
    if winners.len() == 1 {
        PolarityLabel::Group(winners[0])
    } else {
        PolarityLabel::Neutral
    }
}

/// All cut positions t in [2, T] such that the prefix X_{<t} (the first t-1
/// tokens) contains at least one sensitive word. Positions are 1-based.
pub fn mention_prefix_positions(tokens: &[&str], lex: &DemographicLexicon) -> Vec<usize> {
    let t_len = tokens.len();
    if t_len < 2 {
        return Vec::new();
    }
    // Earliest 1-based position at which a full mention has been seen.
    let first_end = mention_occurrences(tokens, lex)
        .iter()
        .map(|(start, len, _)| start + len)
        .min();
    match first_end {
        // prefix X_{<t} covers positions 1..=t-1, so it contains the
        // occurrence ending at position p iff t - 1 >= p
        Some(p) => ((p + 1).max(2)..=t_len).collect(),
        None => Vec::new(),
    }
}
