use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::error::{Error, Result};

/// Inclusive token span `(first, last)`.
pub type Span = (usize, usize);

/// A bracketing over `n` tokens. Only spans of width ≥ 2 are stored; every
/// single token is implicitly a constituent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    n: usize,
    spans: BTreeSet<Span>,
    labels: BTreeMap<Span, Vec<String>>,
}

impl ParseTree {
    /// Validates that spans are in range, pairwise nested or disjoint, and
    /// that the whole-sentence span is present when `n >= 2`.
    pub fn new(n: usize, spans: impl IntoIterator<Item = Span>) -> Result<Self> {
        let spans: BTreeSet<Span> = spans.into_iter().filter(|&(i, j)| j > i).collect();
        for &(i, j) in &spans {
            if j >= n {
                return Err(Error::input(format!("span ({i},{j}) outside a {n}-token sentence")));
            }
        }
        let list: Vec<Span> = spans.iter().copied().collect();
        for (x, &(a, b)) in list.iter().enumerate() {
            for &(c, d) in &list[x + 1..] {
                let disjoint = b < c || d < a;
                let nested = (a <= c && d <= b) || (c <= a && b <= d);
                if !disjoint && !nested {
                    return Err(Error::input(format!("spans ({a},{b}) and ({c},{d}) cross")));
                }
            }
        }
        if n >= 2 && !spans.contains(&(0, n - 1)) {
            return Err(Error::input("tree lacks the whole-sentence span"));
        }
        Ok(ParseTree {
            n,
            spans,
            labels: BTreeMap::new(),
        })
    }

    pub fn with_labels(mut self, labels: BTreeMap<Span, Vec<String>>) -> Self {
        self.labels = labels;
        self
    }

    pub fn left_branching(n: usize) -> Self {
        ParseTree {
            n,
            spans: (1..n).map(|j| (0, j)).collect(),
            labels: BTreeMap::new(),
        }
    }

    pub fn right_branching(n: usize) -> Self {
        ParseTree {
            n,
            spans: (0..n.saturating_sub(1)).map(|i| (i, n - 1)).collect(),
            labels: BTreeMap::new(),
        }
    }

    pub(crate) fn from_spans_unchecked(n: usize, spans: BTreeSet<Span>) -> Self {
        ParseTree {
            n,
            spans,
            labels: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// All stored spans (width ≥ 2), including the whole-sentence span.
    pub fn spans(&self) -> &BTreeSet<Span> {
        &self.spans
    }

    pub fn contains(&self, span: Span) -> bool {
        span.0 == span.1 && span.1 < self.n || self.spans.contains(&span)
    }

    pub fn labels(&self, span: Span) -> &[String] {
        self.labels.get(&span).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn label_map(&self) -> &BTreeMap<Span, Vec<String>> {
        &self.labels
    }

    /// Spans scored by evaluation: width ≥ 2 and not the whole sentence.
    pub fn nontrivial_spans(&self) -> BTreeSet<Span> {
        let full = (0, self.n.saturating_sub(1));
        self.spans.iter().copied().filter(|&s| s != full).collect()
    }

    pub fn is_binary(&self) -> bool {
        self.n >= 1 && self.spans.len() == self.n - 1
    }

    /// Bracketed rendering with bare leaves, e.g. `(X (X a b) c)`.
    pub fn to_bracketed(&self, tokens: &[String]) -> Result<String> {
        if tokens.len() != self.n {
            return Err(Error::input(format!(
                "tree covers {} tokens but {} were given",
                self.n,
                tokens.len()
            )));
        }
        if self.n == 0 {
            return Ok("(X)".to_string());
        }
        let mut out = String::new();
        if self.n == 1 {
            write!(out, "(X {})", tokens[0]).unwrap();
            return Ok(out);
        }
        self.render(0, self.n - 1, tokens, &mut out);
        Ok(out)
    }

    fn render(&self, i: usize, j: usize, tokens: &[String], out: &mut String) {
        out.push_str("(X");
        let mut pos = i;
        while pos <= j {
            // widest stored child starting at `pos` strictly inside (i, j)
            let child = self
                .spans
                .range((pos, pos)..=(pos, j))
                .rev()
                .find(|&&s| s != (i, j))
                .copied();
            out.push(' ');
            match child {
                Some((a, b)) => {
                    self.render(a, b, tokens, out);
                    pos = b + 1;
                }
                None => {
                    out.push_str(&tokens[pos]);
                    pos += 1;
                }
            }
        }
        out.push(')');
    }
}
