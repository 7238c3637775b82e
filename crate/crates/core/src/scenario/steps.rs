//! Expected steps: glob patterns matched in order against trace entries.

use serde::Serialize;
use wildmatch::WildMatch;

use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    /// Index of the first pattern that found no match.
    pub index: usize,
    pub pattern: String,
    /// Closest trace entry after the last match, as a trace line.
    pub nearest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Matched,
    Diverged(Divergence),
}

impl Verdict {
    pub fn is_matched(&self) -> bool {
        matches!(self, Verdict::Matched)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Matched => "Matched",
            Verdict::Diverged(_) => "Diverged",
        }
    }
}

/// Greedy in-order subsequence match of `expected` against each entry's
/// `<kind> <detail>` text.
pub fn check_expected_steps(trace: &Trace, expected: &[String]) -> Verdict {
    let texts: Vec<String> = trace.iter().map(|e| e.step_text()).collect();
    let mut pos = 0;
    for (i, pat) in expected.iter().enumerate() {
        let m = WildMatch::new(pat);
        match texts[pos..].iter().position(|t| m.matches(t)) {
            Some(k) => pos += k + 1,
            None => {
                let nearest = nearest(&texts[pos..], pat).map(|k| trace.entries()[pos + k].to_line());
                return Verdict::Diverged(Divergence { index: i, pattern: pat.clone(), nearest });
            }
        }
    }
    Verdict::Matched
}

/// Entry sharing the most literal words with the pattern; earliest wins.
/// With no overlap at all, the next unconsumed entry.
fn nearest(texts: &[String], pat: &str) -> Option<usize> {
    let words: Vec<&str> = pat.split_whitespace().filter(|w| !w.contains(['*', '?'])).collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, t) in texts.iter().enumerate() {
        let have: Vec<&str> = t.split_whitespace().collect();
        let mut score = words.iter().filter(|w| have.contains(w)).count() * 2;
        if have.first() == words.first() {
            score += 1;
        }
        if score > 0 && best.is_none_or(|(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i).or((!texts.is_empty()).then_some(0))
}
