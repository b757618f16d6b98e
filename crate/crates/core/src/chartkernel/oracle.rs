//! Brute-force reference computations over every binary bracketing.
//!
//! Deliberately naive: plain log-space recursion per tree, no shared chart.
//! Used to validate the dynamic programs on short sentences.

use std::collections::BTreeSet;

use super::{is_log_zero, ParseTree, SentenceRules, Span, LOG_ZERO};
use crate::error::{Error, Result};

pub const MAX_ENUMERATION_LEN: usize = 10;

/// Every binary bracketing of `n` tokens (Catalan(n−1) of them).
pub fn enumerate_trees(n: usize) -> Result<Vec<ParseTree>> {
    if n < 2 {
        return Err(Error::UnsupportedLength(n));
    }
    if n > MAX_ENUMERATION_LEN {
        return Err(Error::TooManyTrees(n));
    }
    Ok(bracketings(0, n - 1)
        .into_iter()
        .map(|s| ParseTree::from_spans_unchecked(n, s))
        .collect())
}

fn bracketings(i: usize, j: usize) -> Vec<BTreeSet<Span>> {
    if i == j {
        return vec![BTreeSet::new()];
    }
    let mut out = Vec::new();
    for k in i..j {
        let left = bracketings(i, k);
        let right = bracketings(k + 1, j);
        for l in &left {
            for r in &right {
                let mut s: BTreeSet<Span> = l.union(r).copied().collect();
                s.insert((i, j));
                out.push(s);
            }
        }
    }
    out
}

/// Split point of every internal node: `(i, j) -> k` with children
/// `(i, k)` and `(k+1, j)`.
pub fn splits(tree: &ParseTree) -> Vec<(Span, usize)> {
    let spans = tree.spans();
    spans
        .iter()
        .map(|&(i, j)| {
            let k = (i..j)
                .rev()
                .find(|&k| k == i || spans.contains(&(i, k)))
                .filter(|&k| k + 1 == j || spans.contains(&(k + 1, j)))
                .expect("binary tree");
            ((i, j), k)
        })
        .collect()
}

fn lse(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().filter(|x| !is_log_zero(*x)).collect();
    if xs.is_empty() {
        return LOG_ZERO;
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn maxl(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter()
        .filter(|x| !is_log_zero(*x))
        .fold(LOG_ZERO, f64::max)
}

fn tree_score(g: &SentenceRules, tree: &ParseTree, sum: bool) -> f64 {
    let (n, nt, pt) = (g.n, g.nt, g.pt);
    let s = nt + pt;
    let split = splits(tree);
    let combine = |v: Vec<f64>| if sum { lse(v) } else { maxl(v) };
    // per-node label scores, innermost first
    let mut table: std::collections::HashMap<Span, Vec<f64>> = std::collections::HashMap::new();
    for i in 0..n {
        table.insert((i, i), (0..pt).map(|t| g.emit[i * pt + t]).collect());
    }
    let mut order = split.clone();
    order.sort_by_key(|&((i, j), _)| j - i);
    for ((i, j), k) in order {
        let (l, r) = (&table[&(i, k)], &table[&(k + 1, j)]);
        let (ob, oc) = (if k == i { nt } else { 0 }, if k + 1 == j { nt } else { 0 });
        let scores: Vec<f64> = (0..nt)
            .map(|a| {
                let mut terms = Vec::new();
                for (b, &lb) in l.iter().enumerate() {
                    for (c, &rc) in r.iter().enumerate() {
                        let p = g.binary[(a * s + ob + b) * s + oc + c];
                        if !is_log_zero(p) && !is_log_zero(lb) && !is_log_zero(rc) {
                            terms.push(p + lb + rc);
                        }
                    }
                }
                combine(terms)
            })
            .collect();
        table.insert((i, j), scores);
    }
    let top = &table[&(0, n - 1)];
    combine(
        (0..nt)
            .filter(|&a| !is_log_zero(top[a]) && !is_log_zero(g.root[a]))
            .map(|a| g.root[a] + top[a])
            .collect(),
    )
}

/// Log of the summed probability of all labelings of one bracketing.
pub fn tree_log_prob(g: &SentenceRules, tree: &ParseTree) -> f64 {
    tree_score(g, tree, true)
}

/// Best labeled derivation score for one bracketing.
pub fn tree_best_score(g: &SentenceRules, tree: &ParseTree) -> f64 {
    tree_score(g, tree, false)
}

/// `(log p, per-tree log-probs)` over all bracketings.
pub fn log_likelihood(g: &SentenceRules) -> Result<(f64, Vec<(ParseTree, f64)>)> {
    let trees = enumerate_trees(g.n)?;
    let scored: Vec<(ParseTree, f64)> = trees
        .into_iter()
        .map(|t| {
            let s = tree_log_prob(g, &t);
            (t, s)
        })
        .collect();
    Ok((lse(scored.iter().map(|x| x.1)), scored))
}

/// Best derivation score and every bracketing's best score.
pub fn best(g: &SentenceRules) -> Result<Vec<(ParseTree, f64)>> {
    Ok(enumerate_trees(g.n)?
        .into_iter()
        .map(|t| {
            let s = tree_best_score(g, &t);
            (t, s)
        })
        .collect())
}

/// Posterior frequency of each span, `out[i * n + j]`.
pub fn span_posteriors(g: &SentenceRules) -> Result<Vec<f64>> {
    let n = g.n;
    let (z, scored) = log_likelihood(g)?;
    if is_log_zero(z) {
        return Err(Error::Unparseable);
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    for (t, s) in scored {
        if is_log_zero(s) {
            continue;
        }
        let p = (s - z).exp();
        for &(i, j) in t.spans() {
            out[i * n + j] += p;
        }
    }
    Ok(out)
}

/// Expected rule counts `(root, binary, emit)` by walking every labeled
/// derivation explicitly. Exponential; keep `n` and the grammar tiny.
pub fn expected_counts(g: &SentenceRules) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, nt, pt) = (g.n, g.nt, g.pt);
    let s = nt + pt;
    let (z, _) = log_likelihood(g)?;
    if is_log_zero(z) {
        return Err(Error::Unparseable);
    }
    let mut root = vec![0.0; nt];
    let mut binary = vec![0.0; nt * s * s];
    let mut emit = vec![0.0; n * pt];
    for tree in enumerate_trees(n)? {
        let nodes = splits(&tree);
        let pos: std::collections::HashMap<Span, usize> =
            nodes.iter().enumerate().map(|(x, (sp, _))| (*sp, x)).collect();
        let m = nodes.len();
        // odometer over node labels (0..nt) then leaf labels (0..pt)
        let mut labels = vec![0usize; m + n];
        loop {
            let cat = |sp: Span, labels: &[usize]| {
                if sp.0 == sp.1 {
                    nt + labels[m + sp.0]
                } else {
                    labels[pos[&sp]]
                }
            };
            let full = labels[pos[&(0, n - 1)]];
            let mut score = g.root[full];
            let mut rules = Vec::with_capacity(m);
            for (x, &((i, j), k)) in nodes.iter().enumerate() {
                let idx = (labels[x] * s + cat((i, k), &labels)) * s + cat((k + 1, j), &labels);
                score += g.binary[idx];
                rules.push(idx);
            }
            for i in 0..n {
                score += g.emit[i * pt + labels[m + i]];
            }
            if score > LOG_ZERO * 0.5 {
                let p = (score - z).exp();
                root[full] += p;
                for idx in rules {
                    binary[idx] += p;
                }
                for i in 0..n {
                    emit[i * pt + labels[m + i]] += p;
                }
            }
            let mut d = 0;
            loop {
                if d == m + n {
                    break;
                }
                let limit = if d < m { nt } else { pt };
                labels[d] += 1;
                if labels[d] < limit {
                    break;
                }
                labels[d] = 0;
                d += 1;
            }
            if d == m + n {
                break;
            }
        }
    }
    Ok((root, binary, emit))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalan_counts() {
        assert_eq!(enumerate_trees(2).unwrap().len(), 1);
        assert_eq!(enumerate_trees(4).unwrap().len(), 5);
        assert_eq!(enumerate_trees(8).unwrap().len(), 429);
    }

    #[test]
    fn refuses_long_sentences() {
        assert!(matches!(enumerate_trees(11), Err(Error::TooManyTrees(11))));
    }

    #[test]
    fn trees_are_distinct_and_binary() {
        let trees = enumerate_trees(6).unwrap();
        let set: BTreeSet<Vec<Span>> = trees.iter().map(|t| t.spans().iter().copied().collect()).collect();
        assert_eq!(set.len(), trees.len());
        assert!(trees.iter().all(|t| t.is_binary()));
    }
}
