//! Unlabeled bracketing scores, per-label and per-width recall, baselines
//! and cross-run consistency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chartkernel::{ParseTree, Span};
use crate::error::{Error, Result};

/// Nontrivial spans of one sentence: width ≥ 2, whole sentence excluded.
pub fn eval_spans(tree: &ParseTree) -> BTreeSet<Span> {
    tree.nontrivial_spans()
}

fn check_aligned(pred: &[ParseTree], gold: &[ParseTree]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::input(format!(
            "{} predicted trees but {} gold trees",
            pred.len(),
            gold.len()
        )));
    }
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::input(format!(
                "sentence {k}: predicted tree covers {} tokens, gold has {}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(())
}

/// Per-sentence F1 in `[0, 1]`; `None` when the gold set is empty.
pub fn sentence_f1(pred: &BTreeSet<Span>, gold: &BTreeSet<Span>) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let tp = pred.intersection(gold).count();
    if tp == 0 {
        return Some(0.0);
    }
    let p = tp as f64 / pred.len() as f64;
    let r = tp as f64 / gold.len() as f64;
    Some(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    /// Corpus-level F1 from pooled counts, percent.
    pub c_f1: f64,
    /// Mean sentence-level F1, percent.
    pub s_f1: f64,
    /// Sentences with a nonempty gold set.
    pub sentences: usize,
    pub true_positives: usize,
    pub predicted_spans: usize,
    pub gold_spans: usize,
}

/// Sentences whose gold set is empty are left out of both scores.
pub fn f1_scores(pred: &[ParseTree], gold: &[ParseTree]) -> Result<F1Scores> {
    check_aligned(pred, gold)?;
    let (mut tp, mut np, mut ng, mut sum, mut count) = (0, 0, 0, 0.0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (ps, gs) = (eval_spans(p), eval_spans(g));
        let Some(f) = sentence_f1(&ps, &gs) else { continue };
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
        sum += f;
        count += 1;
    }
    Ok(F1Scores {
        c_f1: 100.0 * pooled_f1(tp, np, ng),
        s_f1: if count == 0 { 0.0 } else { 100.0 * sum / count as f64 },
        sentences: count,
        true_positives: tp,
        predicted_spans: np,
        gold_spans: ng,
    })
}

/// Harmonic mean of pooled precision and recall, in `[0, 1]`.
pub fn pooled_f1(tp: usize, predicted: usize, gold: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// Percent of gold spans carrying `label` that the prediction contains;
/// `None` when no gold span carries it.
pub fn label_recall(pred: &[ParseTree], gold: &[ParseTree], label: &str) -> Result<Option<f64>> {
    check_aligned(pred, gold)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let ps = eval_spans(p);
        for s in eval_spans(g) {
            if g.labels(s).iter().any(|l| l == label) {
                total += 1;
                hit += usize::from(ps.contains(&s));
            }
        }
    }
    Ok((total > 0).then(|| 100.0 * hit as f64 / total as f64))
}

/// Labels seen on nontrivial gold spans, most frequent first.
pub fn frequent_labels(gold: &[ParseTree]) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for g in gold {
        for s in eval_spans(g) {
            if let Some(l) = top_label(g, s) {
                *counts.entry(l).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().map(|(l, c)| (l.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

fn top_label(tree: &ParseTree, span: Span) -> Option<&str> {
    tree.labels(span).last().map(String::as_str)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub width: usize,
    pub recovered: usize,
    pub total: usize,
    pub recall: f64,
}

/// Gold-span recall grouped by span width, widths ascending.
pub fn recall_by_length(pred: &[ParseTree], gold: &[ParseTree]) -> Result<Vec<LengthBucket>> {
    check_aligned(pred, gold)?;
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        let ps = eval_spans(p);
        for s in eval_spans(g) {
            let b = buckets.entry(s.1 - s.0 + 1).or_default();
            b.0 += usize::from(ps.contains(&s));
            b.1 += 1;
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(width, (recovered, total))| LengthBucket {
            width,
            recovered,
            total,
            recall: 100.0 * recovered as f64 / total as f64,
        })
        .collect())
}

/// Counts of top labels on nontrivial gold spans, per width.
pub fn label_distribution(gold: &[ParseTree]) -> BTreeMap<usize, BTreeMap<String, usize>> {
    let mut out: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for g in gold {
        for s in eval_spans(g) {
            let label = top_label(g, s).unwrap_or("-").to_string();
            *out.entry(s.1 - s.0 + 1).or_default().entry(label).or_default() += 1;
        }
    }
    out
}

/// Random binary tree: each span splits at a uniformly chosen point.
pub fn random_tree(n: usize, rng: &mut impl Rng) -> ParseTree {
    let mut spans = BTreeSet::new();
    let mut stack = Vec::new();
    if n >= 2 {
        stack.push((0, n - 1));
    }
    while let Some((i, j)) = stack.pop() {
        spans.insert((i, j));
        let k = rng.random_range(i..j);
        if k > i {
            stack.push((i, k));
        }
        if j > k + 1 {
            stack.push((k + 1, j));
        }
    }
    ParseTree::new(n, spans).expect("split trees are well formed")
}

#[derive(Debug, Clone)]
pub struct Baselines {
    pub left: Vec<ParseTree>,
    pub right: Vec<ParseTree>,
    pub random: Vec<ParseTree>,
}

pub fn baselines(lengths: &[usize], seed: u64) -> Baselines {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Baselines {
        left: lengths.iter().map(|&n| ParseTree::left_branching(n)).collect(),
        right: lengths.iter().map(|&n| ParseTree::right_branching(n)).collect(),
        random: lengths.iter().map(|&n| random_tree(n, &mut rng)).collect(),
    }
}

/// Mean sentence F1 between two runs, percent. Sentences where both sets
/// are empty are skipped, so the measure is symmetric.
pub fn pairwise_s_f1(a: &[ParseTree], b: &[ParseTree]) -> Result<Option<f64>> {
    check_aligned(a, b)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (x, y) in a.iter().zip(b) {
        let (xs, ys) = (eval_spans(x), eval_spans(y));
        if xs.is_empty() && ys.is_empty() {
            continue;
        }
        let tp = xs.intersection(&ys).count();
        sum += if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (xs.len() + ys.len()) as f64
        };
        count += 1;
    }
    Ok((count > 0).then(|| 100.0 * sum / count as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyMatrix {
    pub models: Vec<String>,
    /// `entries[a][b]`; `None` where no run pair exists.
    pub entries: Vec<Vec<Option<f64>>>,
}

/// Model name and the predictions of each of its runs.
pub type ModelRuns = (String, Vec<Vec<ParseTree>>);

pub fn consistency(models: &[ModelRuns]) -> Result<ConsistencyMatrix> {
    let m = models.len();
    let mut entries = vec![vec![None; m]; m];
    for a in 0..m {
        for b in a..m {
            let (ra, rb) = (&models[a].1, &models[b].1);
            let (mut sum, mut count) = (0.0, 0usize);
            for (x, run_x) in ra.iter().enumerate() {
                for (y, run_y) in rb.iter().enumerate() {
                    if a == b && x == y {
                        continue;
                    }
                    if let Some(f) = pairwise_s_f1(run_x, run_y)? {
                        sum += f;
                        count += 1;
                    }
                }
            }
            let v = (count > 0).then(|| sum / count as f64);
            entries[a][b] = v;
            entries[b][a] = v;
        }
    }
    Ok(ConsistencyMatrix {
        models: models.iter().map(|m| m.0.clone()).collect(),
        entries,
    })
}

impl ConsistencyMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model");
        for m in &self.models {
            write!(s, ",{m}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.models.iter().zip(&self.entries) {
            s.push_str(name);
            for v in row {
                write!(s, ",{}", fmt_pct(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// One decimal, or `-` when absent.
pub fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.1}"),
        None => "-".to_string(),
    }
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub c_f1: f64,
    pub s_f1: f64,
    pub per_label_recall: BTreeMap<String, Option<f64>>,
    pub recall_by_length: Vec<LengthBucket>,
    pub label_distribution: BTreeMap<usize, BTreeMap<String, usize>>,
}

/// Full report with percentages rounded to one decimal. `labels` selects
/// the recall columns; empty picks the three most frequent gold labels.
pub fn evaluate(pred: &[ParseTree], gold: &[ParseTree], labels: &[String]) -> Result<EvalReport> {
    let f = f1_scores(pred, gold)?;
    let labels: Vec<String> = if labels.is_empty() {
        frequent_labels(gold).into_iter().take(3).map(|l| l.0).collect()
    } else {
        labels.to_vec()
    };
    let mut per_label_recall = BTreeMap::new();
    for l in labels {
        let r = label_recall(pred, gold, &l)?;
        per_label_recall.insert(l, r.map(round1));
    }
    Ok(EvalReport {
        c_f1: round1(f.c_f1),
        s_f1: round1(f.s_f1),
        per_label_recall,
        recall_by_length: recall_by_length(pred, gold)?
            .into_iter()
            .map(|b| LengthBucket {
                recall: round1(b.recall),
                ..b
            })
            .collect(),
        label_distribution: label_distribution(gold),
    })
}

impl EvalReport {
    /// Header and one row: `model,c_f1,s_f1,<label>...`.
    pub fn table_csv(&self, model: &str) -> String {
        let mut head = String::from("model,c_f1,s_f1");
        let mut row = format!("{model},{:.1},{:.1}", self.c_f1, self.s_f1);
        for (l, r) in &self.per_label_recall {
            write!(head, ",{l}").unwrap();
            write!(row, ",{}", fmt_pct(*r)).unwrap();
        }
        format!("{head}\n{row}\n")
    }
}
