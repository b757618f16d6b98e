use std::collections::BTreeSet;

use super::{is_log_zero, ParseTree, RuleTensors, SentenceRules, LOG_ZERO};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Back {
    split: usize,
    left: usize,
    right: usize,
}

/// Highest-scoring binary tree (CYK in log space).
///
/// Ties go to the smaller left-child width, then the lower left category,
/// then the lower right category; at the root, to the lower nonterminal.
pub fn viterbi(rules: &RuleTensors, sentence: &[usize]) -> Result<ParseTree> {
    if sentence.len() < 2 {
        return Err(Error::UnsupportedLength(sentence.len()));
    }
    let g = rules.for_sentence(sentence)?;
    viterbi_scored(&g).map(|(_, t)| t)
}

/// Like [`viterbi`], also returning the best derivation's log-score.
pub fn viterbi_scored(g: &SentenceRules) -> Result<(f64, ParseTree)> {
    let (n, nt, pt) = (g.n, g.nt, g.pt);
    let s = nt + pt;
    // score[(i*n+j)*s + cat]
    let mut score = vec![LOG_ZERO; n * n * s];
    let mut back: Vec<Option<Back>> = vec![None; n * n * nt];
    for i in 0..n {
        for t in 0..pt {
            let e = g.emit[i * pt + t];
            score[(i * n + i) * s + nt + t] = if is_log_zero(e) { LOG_ZERO } else { e };
        }
    }
    for w in 2..=n {
        for i in 0..=n - w {
            let j = i + w - 1;
            for a in 0..nt {
                let mut best = LOG_ZERO;
                let mut arg = None;
                for k in i..j {
                    let (lcats, rcats) = (cats(i, k, nt, pt), cats(k + 1, j, nt, pt));
                    for b in lcats.clone() {
                        let l = score[(i * n + k) * s + b];
                        if is_log_zero(l) {
                            continue;
                        }
                        for c in rcats.clone() {
                            let r = score[((k + 1) * n + j) * s + c];
                            let p = g.binary[(a * s + b) * s + c];
                            if is_log_zero(r) || is_log_zero(p) {
                                continue;
                            }
                            let v = p + l + r;
                            if v > best {
                                best = v;
                                arg = Some(Back {
                                    split: k,
                                    left: b,
                                    right: c,
                                });
                            }
                        }
                    }
                }
                score[(i * n + j) * s + a] = best;
                back[(i * n + j) * nt + a] = arg;
            }
        }
    }
    let mut best = LOG_ZERO;
    let mut top = None;
    for a in 0..nt {
        let r = g.root[a];
        let v = score[(n - 1) * s + a];
        if is_log_zero(r) || is_log_zero(v) {
            continue;
        }
        if r + v > best {
            best = r + v;
            top = Some(a);
        }
    }
    let top = top.ok_or(Error::Unparseable)?;
    let mut spans = BTreeSet::new();
    let mut stack = vec![(0, n - 1, top)];
    while let Some((i, j, a)) = stack.pop() {
        if i == j {
            continue;
        }
        spans.insert((i, j));
        let b = back[(i * n + j) * nt + a].expect("reachable cell has a backpointer");
        if b.split > i {
            stack.push((i, b.split, b.left));
        }
        if b.split + 1 < j {
            stack.push((b.split + 1, j, b.right));
        }
    }
    Ok((best, ParseTree::from_spans_unchecked(n, spans)))
}

fn cats(i: usize, j: usize, nt: usize, pt: usize) -> std::ops::Range<usize> {
    if i == j {
        nt..nt + pt
    } else {
        0..nt
    }
}
