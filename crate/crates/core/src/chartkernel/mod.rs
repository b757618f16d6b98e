//! Exact dynamic programming over binary grammars in Chomsky normal form:
//! a start rule `S -> A`, binary rules `A -> B C` with `B, C` ranging over
//! nonterminals and preterminals, and lexical rules `T -> w`.
//!
//! Category indices follow one convention throughout: nonterminals are
//! `0..N`, preterminals `N..N+P`. Width-1 chart cells hold preterminals,
//! wider cells hold nonterminals.

mod dp;
pub mod oracle;
mod tree;
mod viterbi;

pub use dp::{
    forward_mode_marginals, inside, posterior, span_marginals, Chart, Posterior, SpanWeights,
};
pub use oracle::enumerate_trees;
pub use tree::{ParseTree, Span};
pub use viterbi::{viterbi, viterbi_scored};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-space stand-in for `-inf`.
pub const LOG_ZERO: f64 = -1e30;

#[inline]
pub(crate) fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSizes {
    pub nonterminals: usize,
    pub preterminals: usize,
    pub terminals: usize,
}

impl GrammarSizes {
    pub fn new(nonterminals: usize, preterminals: usize, terminals: usize) -> Result<Self> {
        if nonterminals == 0 || preterminals == 0 || terminals == 0 {
            return Err(Error::input("grammar needs at least one category of each kind"));
        }
        Ok(GrammarSizes {
            nonterminals,
            preterminals,
            terminals,
        })
    }

    /// `|N| + |P|`, the child alphabet of binary rules.
    pub fn symbols(&self) -> usize {
        self.nonterminals + self.preterminals
    }
}

/// Rule log-probabilities for one grammar.
///
/// * `root[A]` for `S -> A`
/// * `binary[(A * S + B) * S + C]` for `A -> B C`, `S = |N| + |P|`
/// * `lexical[T * |Σ| + w]` for `T -> w`, `T` indexed from 0 within `P`
#[derive(Debug, Clone, PartialEq)]
pub struct RuleTensors {
    pub sizes: GrammarSizes,
    pub root: Vec<f64>,
    pub binary: Vec<f64>,
    pub lexical: Vec<f64>,
}

impl RuleTensors {
    pub fn new(sizes: GrammarSizes, root: Vec<f64>, binary: Vec<f64>, lexical: Vec<f64>) -> Result<Self> {
        let s = sizes.symbols();
        let check = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::input(format!("{name} rule tensor has {got} entries, expected {want}")))
            }
        };
        check("root", root.len(), sizes.nonterminals)?;
        check("binary", binary.len(), sizes.nonterminals * s * s)?;
        check("lexical", lexical.len(), sizes.preterminals * sizes.terminals)?;
        Ok(RuleTensors {
            sizes,
            root,
            binary,
            lexical,
        })
    }

    pub fn binary_index(&self, a: usize, b: usize, c: usize) -> usize {
        let s = self.sizes.symbols();
        (a * s + b) * s + c
    }

    /// Largest |logsumexp(row)| over every parent row of all three families.
    pub fn max_normalization_error(&self) -> f64 {
        let s = self.sizes.symbols();
        let v = self.sizes.terminals;
        let mut worst = lse(&self.root).abs();
        for row in self.binary.chunks(s * s) {
            worst = worst.max(lse(row).abs());
        }
        for row in self.lexical.chunks(v) {
            worst = worst.max(lse(row).abs());
        }
        worst
    }

    /// Restricts the lexical table to the words of one sentence.
    pub fn for_sentence(&self, sentence: &[usize]) -> Result<SentenceRules> {
        let v = self.sizes.terminals;
        let p = self.sizes.preterminals;
        let mut emit = Vec::with_capacity(sentence.len() * p);
        for &w in sentence {
            if w >= v {
                return Err(Error::input(format!("terminal id {w} outside vocabulary of {v}")));
            }
            emit.extend((0..p).map(|t| self.lexical[t * v + w]));
        }
        SentenceRules::new(
            self.sizes.nonterminals,
            p,
            self.root.clone(),
            self.binary.clone(),
            emit,
        )
    }
}

fn lse(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if is_log_zero(m) {
        return LOG_ZERO;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Rules specialised to one sentence: `emit[i * P + T] = log p(w_i | T)`.
#[derive(Debug, Clone)]
pub struct SentenceRules {
    pub(crate) nt: usize,
    pub(crate) pt: usize,
    pub(crate) n: usize,
    pub(crate) root: Vec<f64>,
    pub(crate) binary: Vec<f64>,
    pub(crate) emit: Vec<f64>,
}

impl SentenceRules {
    pub fn new(nt: usize, pt: usize, root: Vec<f64>, binary: Vec<f64>, emit: Vec<f64>) -> Result<Self> {
        let s = nt + pt;
        if nt == 0 || pt == 0 || root.len() != nt || binary.len() != nt * s * s || !emit.len().is_multiple_of(pt) {
            return Err(Error::input("inconsistent sentence rule shapes"));
        }
        let n = emit.len() / pt;
        if n < 2 {
            return Err(Error::UnsupportedLength(n));
        }
        let all = root.iter().chain(&binary).chain(&emit);
        for x in all {
            if x.is_nan() || *x == f64::INFINITY {
                return Err(Error::NonFinite("rule log-probabilities".into()));
            }
        }
        Ok(SentenceRules {
            nt,
            pt,
            n,
            root,
            binary,
            emit,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn nonterminals(&self) -> usize {
        self.nt
    }

    pub fn preterminals(&self) -> usize {
        self.pt
    }

    pub fn root(&self) -> &[f64] {
        &self.root
    }

    pub fn binary(&self) -> &[f64] {
        &self.binary
    }

    pub fn emit(&self) -> &[f64] {
        &self.emit
    }
}
