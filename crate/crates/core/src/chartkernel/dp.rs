//! Inside and outside passes.
//!
//! Cells are stored in scaled probability space: a log scale shared by the
//! cell plus values normalised so the largest is 1. Products of cells add
//! scales; sums across splits rescale to the larger scale. This keeps the
//! inner loops as plain multiply-adds while matching log-space DP exactly
//! up to rounding.
//!
//! Optionally each span `(i, j)` carries a weight `h(i,j)`. The passes then
//! also propagate a first-order tangent: the derivative with respect to `t`
//! of the grammar where every span's inside score is multiplied by
//! `exp(t * h(i,j))`, evaluated at `t = 0`. The tangent of `log Z` is
//! `Σ marginal(c) h(c)`, and the tangents of the expected rule counts are the
//! gradients of that weighted sum with respect to the rule log-probabilities.

use super::{is_log_zero, RuleTensors, SentenceRules, Span, LOG_ZERO};
use crate::error::{Error, Result};

/// Per-span weights over a sentence of `n` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanWeights {
    n: usize,
    w: Vec<f64>,
}

impl SpanWeights {
    pub fn zeros(n: usize) -> Self {
        SpanWeights { n, w: vec![0.0; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, (i, j): Span) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn set(&mut self, (i, j): Span, v: f64) {
        assert!(i <= j && j < self.n, "span ({i},{j}) out of range");
        self.w[i * self.n + j] = v;
    }
}

#[derive(Debug, Clone)]
struct Cell {
    scale: f64,
    val: Vec<f64>,
    tan: Vec<f64>,
}

impl Cell {
    fn zero(len: usize, dual: bool) -> Self {
        Cell {
            scale: LOG_ZERO,
            val: vec![0.0; len],
            tan: if dual { vec![0.0; len] } else { Vec::new() },
        }
    }

    fn is_zero(&self) -> bool {
        is_log_zero(self.scale)
    }

    /// Adds `exp(scale) * (val, tan)` into the cell.
    fn merge(&mut self, scale: f64, val: &[f64], tan: &[f64]) {
        if is_log_zero(scale) || val.iter().all(|&v| v == 0.0) && tan.iter().all(|&t| t == 0.0) {
            return;
        }
        if self.is_zero() {
            self.scale = scale;
            self.val.copy_from_slice(val);
            if !self.tan.is_empty() {
                self.tan.copy_from_slice(tan);
            }
            return;
        }
        let top = self.scale.max(scale);
        let mine = (self.scale - top).exp();
        let theirs = (scale - top).exp();
        self.scale = top;
        for (a, &b) in self.val.iter_mut().zip(val) {
            *a = *a * mine + b * theirs;
        }
        for (a, &b) in self.tan.iter_mut().zip(tan) {
            *a = *a * mine + b * theirs;
        }
    }

    /// Rescales so the largest value is 1; all-zero cells become zero cells.
    fn normalize(&mut self) {
        if self.is_zero() {
            return;
        }
        let m = self.val.iter().copied().fold(0.0, f64::max);
        if m <= 0.0 || !m.is_finite() {
            let len = self.val.len();
            *self = Cell::zero(len, !self.tan.is_empty());
            return;
        }
        self.scale += m.ln();
        let inv = 1.0 / m;
        self.val.iter_mut().for_each(|v| *v *= inv);
        self.tan.iter_mut().for_each(|v| *v *= inv);
    }

    fn log(&self, k: usize) -> f64 {
        let v = self.val[k];
        if self.is_zero() || v <= 0.0 {
            LOG_ZERO
        } else {
            self.scale + v.ln()
        }
    }
}

struct Kernel<'a> {
    g: &'a SentenceRules,
    n: usize,
    nt: usize,
    pt: usize,
    s: usize,
    probs: Vec<f64>,
    root_p: Vec<f64>,
    weights: Option<&'a SpanWeights>,
}

fn exp_or_zero(x: f64) -> f64 {
    if is_log_zero(x) {
        0.0
    } else {
        x.exp()
    }
}

impl<'a> Kernel<'a> {
    fn new(g: &'a SentenceRules, weights: Option<&'a SpanWeights>) -> Result<Self> {
        if let Some(w) = weights {
            if w.len() != g.n {
                return Err(Error::input(format!(
                    "span weights cover {} tokens, sentence has {}",
                    w.len(),
                    g.n
                )));
            }
            if w.w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("span weights".into()));
            }
        }
        Ok(Kernel {
            g,
            n: g.n,
            nt: g.nt,
            pt: g.pt,
            s: g.nt + g.pt,
            probs: g.binary.iter().map(|&x| exp_or_zero(x)).collect(),
            root_p: g.root.iter().map(|&x| exp_or_zero(x)).collect(),
            weights,
        })
    }

    fn dual(&self) -> bool {
        self.weights.is_some()
    }

    fn weight(&self, span: Span) -> f64 {
        self.weights.map_or(0.0, |w| w.get(span))
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n + j
    }

    /// Offset of a cell's categories in the child alphabet.
    fn offset(&self, i: usize, j: usize) -> usize {
        if i == j {
            self.nt
        } else {
            0
        }
    }

    fn inside(&self) -> Vec<Cell> {
        let (n, nt, pt) = (self.n, self.nt, self.pt);
        let dual = self.dual();
        let mut cells: Vec<Cell> = (0..n * n).map(|_| Cell::zero(0, false)).collect();
        for i in 0..n {
            let row = &self.g.emit[i * pt..(i + 1) * pt];
            let top = row.iter().copied().fold(LOG_ZERO, f64::max);
            let mut c = Cell::zero(pt, dual);
            if !is_log_zero(top) {
                c.scale = top;
                for (v, &e) in c.val.iter_mut().zip(row) {
                    *v = if is_log_zero(e) { 0.0 } else { (e - top).exp() };
                }
                let h = self.weight((i, i));
                for (t, &v) in c.tan.iter_mut().zip(&c.val) {
                    *t = h * v;
                }
            }
            cells[self.idx(i, i)] = c;
        }
        let mut v = vec![0.0; nt];
        let mut t = vec![0.0; if dual { nt } else { 0 }];
        for w in 2..=n {
            for i in 0..=n - w {
                let j = i + w - 1;
                let mut acc = Cell::zero(nt, dual);
                for k in i..j {
                    let (l, r) = (&cells[self.idx(i, k)], &cells[self.idx(k + 1, j)]);
                    if l.is_zero() || r.is_zero() {
                        continue;
                    }
                    v.iter_mut().for_each(|x| *x = 0.0);
                    t.iter_mut().for_each(|x| *x = 0.0);
                    let (ob, oc) = (self.offset(i, k), self.offset(k + 1, j));
                    for a in 0..nt {
                        let (mut va, mut ta) = (0.0, 0.0);
                        for (b, &lb) in l.val.iter().enumerate() {
                            let ltb = if dual { l.tan[b] } else { 0.0 };
                            if lb == 0.0 && ltb == 0.0 {
                                continue;
                            }
                            let base = (a * self.s + ob + b) * self.s + oc;
                            let row = &self.probs[base..base + r.val.len()];
                            let inner: f64 = row.iter().zip(&r.val).map(|(p, x)| p * x).sum();
                            va += lb * inner;
                            if dual {
                                let inner_t: f64 = row.iter().zip(&r.tan).map(|(p, x)| p * x).sum();
                                ta += ltb * inner + lb * inner_t;
                            }
                        }
                        v[a] = va;
                        if dual {
                            t[a] = ta;
                        }
                    }
                    acc.merge(l.scale + r.scale, &v, &t);
                }
                acc.normalize();
                if dual && !acc.is_zero() {
                    let h = self.weight((i, j));
                    for (tv, &vv) in acc.tan.iter_mut().zip(&acc.val) {
                        *tv += h * vv;
                    }
                }
                cells[self.idx(i, j)] = acc;
            }
        }
        cells
    }

    /// `(log Z, dlogZ/dt)` from the inside chart.
    fn total(&self, cells: &[Cell]) -> (f64, f64) {
        let top = &cells[self.idx(0, self.n - 1)];
        if top.is_zero() {
            return (LOG_ZERO, 0.0);
        }
        let zv: f64 = self.root_p.iter().zip(&top.val).map(|(p, v)| p * v).sum();
        if zv <= 0.0 {
            return (LOG_ZERO, 0.0);
        }
        let zt: f64 = if self.dual() {
            self.root_p.iter().zip(&top.tan).map(|(p, v)| p * v).sum()
        } else {
            0.0
        };
        (top.scale + zv.ln(), zt / zv)
    }
}

/// Inside log-scores, and optionally outside scores and span marginals.
#[derive(Debug, Clone)]
pub struct Chart {
    n: usize,
    nt: usize,
    pt: usize,
    inside: Vec<f64>,
    outside: Option<Vec<f64>>,
    span_marginal: Option<Vec<f64>>,
    log_likelihood: f64,
}

impl Chart {
    fn from_cells(k: &Kernel<'_>, inside: &[Cell], outside: Option<&[Cell]>, log_z: f64) -> Self {
        let (n, s) = (k.n, k.s);
        let fill = |cells: &[Cell]| {
            let mut out = vec![LOG_ZERO; n * n * s];
            for i in 0..n {
                for j in i..n {
                    let c = &cells[k.idx(i, j)];
                    let off = k.offset(i, j);
                    for q in 0..c.val.len() {
                        out[(i * n + j) * s + off + q] = c.log(q);
                    }
                }
            }
            out
        };
        Chart {
            n,
            nt: k.nt,
            pt: k.pt,
            inside: fill(inside),
            outside: outside.map(fill),
            span_marginal: None,
            log_likelihood: log_z,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Inside log-score of category `cat` over `(i, j)`; categories not
    /// admissible at that width read as [`LOG_ZERO`].
    pub fn inside(&self, i: usize, j: usize, cat: usize) -> f64 {
        self.inside[(i * self.n + j) * (self.nt + self.pt) + cat]
    }

    pub fn outside(&self, i: usize, j: usize, cat: usize) -> Option<f64> {
        let s = self.nt + self.pt;
        self.outside.as_ref().map(|o| o[(i * self.n + j) * s + cat])
    }

    /// Posterior probability that `(i, j)` is a constituent.
    pub fn span_marginal(&self, i: usize, j: usize) -> Option<f64> {
        self.span_marginal.as_ref().map(|m| m[i * self.n + j])
    }
}

/// Everything a training step needs from one sentence's chart.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub n: usize,
    pub nonterminals: usize,
    pub preterminals: usize,
    pub log_z: f64,
    /// `Σ_c marginal(c) h(c)` for the supplied span weights (0 without).
    pub weighted_sum: f64,
    span_marginal: Vec<f64>,
    label_marginal: Vec<f64>,
    /// Expected counts, i.e. `∂ log Z / ∂` rule log-probabilities.
    pub root_counts: Vec<f64>,
    pub binary_counts: Vec<f64>,
    pub emit_counts: Vec<f64>,
    /// `∂ weighted_sum / ∂` rule log-probabilities (present with weights).
    pub root_tangent: Option<Vec<f64>>,
    pub binary_tangent: Option<Vec<f64>>,
    pub emit_tangent: Option<Vec<f64>>,
}

impl Posterior {
    pub fn span_marginal(&self, (i, j): Span) -> f64 {
        self.span_marginal[i * self.n + j]
    }

    /// Joint probability that `(i, j)` is a constituent with nonterminal `a`.
    pub fn label_marginal(&self, (i, j): Span, a: usize) -> f64 {
        self.label_marginal[(i * self.n + j) * self.nonterminals + a]
    }

    /// `p(a | span is a constituent)`, uniform when the span has no mass.
    pub fn label_posterior(&self, span: Span) -> Vec<f64> {
        let k = self.nonterminals;
        let row: Vec<f64> = (0..k).map(|a| self.label_marginal(span, a)).collect();
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter().map(|x| x / total).collect()
        } else {
            vec![1.0 / k as f64; k]
        }
    }
}

/// Inside pass: total log-likelihood and the inside chart. A sentence no
/// derivation can produce has log-likelihood [`LOG_ZERO`].
pub fn inside(rules: &RuleTensors, sentence: &[usize]) -> Result<(f64, Chart)> {
    if sentence.len() < 2 {
        return Err(Error::UnsupportedLength(sentence.len()));
    }
    let g = rules.for_sentence(sentence)?;
    let k = Kernel::new(&g, None)?;
    let cells = k.inside();
    let (log_z, _) = k.total(&cells);
    Ok((log_z, Chart::from_cells(&k, &cells, None, log_z)))
}

/// Inside–outside pass with span marginals filled in.
pub fn span_marginals(rules: &RuleTensors, sentence: &[usize]) -> Result<Chart> {
    if sentence.len() < 2 {
        return Err(Error::UnsupportedLength(sentence.len()));
    }
    let g = rules.for_sentence(sentence)?;
    let k = Kernel::new(&g, None)?;
    let cells = k.inside();
    let (log_z, _) = k.total(&cells);
    if is_log_zero(log_z) {
        return Err(Error::Unparseable);
    }
    let out = outside(&k, &cells, log_z, 0.0);
    let mut chart = Chart::from_cells(&k, &cells, Some(&out.cells), log_z);
    chart.span_marginal = Some(out.span_marginal);
    Ok(chart)
}

/// Full posterior for one sentence, with tangents when `weights` is given.
pub fn posterior(g: &SentenceRules, weights: Option<&SpanWeights>) -> Result<Posterior> {
    let k = Kernel::new(g, weights)?;
    let cells = k.inside();
    let (log_z, eh) = k.total(&cells);
    if is_log_zero(log_z) {
        return Err(Error::Unparseable);
    }
    let out = outside(&k, &cells, log_z, eh);
    Ok(Posterior {
        n: k.n,
        nonterminals: k.nt,
        preterminals: k.pt,
        log_z,
        weighted_sum: eh,
        span_marginal: out.span_marginal,
        label_marginal: out.label_marginal,
        root_counts: out.root_counts,
        binary_counts: out.binary_counts,
        emit_counts: out.emit_counts,
        root_tangent: out.root_tangent,
        binary_tangent: out.binary_tangent,
        emit_tangent: out.emit_tangent,
    })
}

/// Span marginals as derivatives of `log Z` with respect to per-span
/// potentials, computed by forward-mode differentiation of the inside pass
/// alone (one tangent pass per span). Independent of the outside pass.
pub fn forward_mode_marginals(g: &SentenceRules) -> Result<Vec<f64>> {
    let n = g.n;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    for w in 2..=n {
        for i in 0..=n - w {
            let j = i + w - 1;
            let mut h = SpanWeights::zeros(n);
            h.set((i, j), 1.0);
            let k = Kernel::new(g, Some(&h))?;
            let cells = k.inside();
            let (log_z, eh) = k.total(&cells);
            if is_log_zero(log_z) {
                return Err(Error::Unparseable);
            }
            out[i * n + j] = eh;
        }
    }
    Ok(out)
}

struct Outside {
    cells: Vec<Cell>,
    span_marginal: Vec<f64>,
    label_marginal: Vec<f64>,
    root_counts: Vec<f64>,
    binary_counts: Vec<f64>,
    emit_counts: Vec<f64>,
    root_tangent: Option<Vec<f64>>,
    binary_tangent: Option<Vec<f64>>,
    emit_tangent: Option<Vec<f64>>,
}

fn outside(k: &Kernel<'_>, inside: &[Cell], log_z: f64, eh: f64) -> Outside {
    let (n, nt, pt, s) = (k.n, k.nt, k.pt, k.s);
    let dual = k.dual();
    let mut cells: Vec<Cell> = (0..n * n)
        .map(|q| {
            let (i, j) = (q / n, q % n);
            let len = if i == j { pt } else { nt };
            Cell::zero(if i <= j { len } else { 0 }, dual)
        })
        .collect();
    let mut binary_counts = vec![0.0; nt * s * s];
    let mut binary_tan = if dual { vec![0.0; nt * s * s] } else { Vec::new() };

    // root
    let top = &inside[k.idx(0, n - 1)];
    let f = (top.scale - log_z).exp();
    let mut root_counts = vec![0.0; nt];
    let mut root_tan = vec![0.0; if dual { nt } else { 0 }];
    for a in 0..nt {
        root_counts[a] = f * k.root_p[a] * top.val[a];
        if dual {
            root_tan[a] = f * k.root_p[a] * top.tan[a];
        }
    }
    {
        let c = &mut cells[k.idx(0, n - 1)];
        c.scale = 0.0;
        c.val.copy_from_slice(&k.root_p);
        c.normalize();
    }

    let mut cl = vec![0.0; nt.max(pt)];
    let mut clt = vec![0.0; if dual { nt.max(pt) } else { 0 }];
    let mut cr = vec![0.0; nt.max(pt)];
    let mut crt = vec![0.0; if dual { nt.max(pt) } else { 0 }];
    for w in (2..=n).rev() {
        for i in 0..=n - w {
            let j = i + w - 1;
            cells[k.idx(i, j)].normalize();
            let parent = cells[k.idx(i, j)].clone();
            if parent.is_zero() {
                continue;
            }
            let h = k.weight((i, j));
            // parent outside times this span's potential
            let pv = &parent.val;
            let ptan: Vec<f64> = if dual {
                parent.tan.iter().zip(pv).map(|(t, v)| t + h * v).collect()
            } else {
                Vec::new()
            };
            for split in i..j {
                let (l, r) = (&inside[k.idx(i, split)], &inside[k.idx(split + 1, j)]);
                if l.is_zero() || r.is_zero() {
                    continue;
                }
                let (lb_len, rc_len) = (l.val.len(), r.val.len());
                let (ob, oc) = (k.offset(i, split), k.offset(split + 1, j));
                cl[..lb_len].iter_mut().for_each(|x| *x = 0.0);
                cr[..rc_len].iter_mut().for_each(|x| *x = 0.0);
                if dual {
                    clt[..lb_len].iter_mut().for_each(|x| *x = 0.0);
                    crt[..rc_len].iter_mut().for_each(|x| *x = 0.0);
                }
                let fc = (parent.scale + l.scale + r.scale - log_z).exp();
                let count = fc > 0.0;
                for a in 0..nt {
                    let oa = pv[a];
                    let ota = if dual { ptan[a] } else { 0.0 };
                    if oa == 0.0 && ota == 0.0 {
                        continue;
                    }
                    for b in 0..lb_len {
                        let lb = l.val[b];
                        let ltb = if dual { l.tan[b] } else { 0.0 };
                        if lb == 0.0 && ltb == 0.0 {
                            continue;
                        }
                        let base = (a * s + ob + b) * s + oc;
                        let row = &k.probs[base..base + rc_len];
                        let mut inner = 0.0;
                        let mut inner_t = 0.0;
                        let ol = oa * lb;
                        let olt = ota * lb + oa * ltb;
                        for c in 0..rc_len {
                            let p = row[c];
                            if p == 0.0 {
                                continue;
                            }
                            let rv = r.val[c];
                            inner += p * rv;
                            cr[c] += ol * p;
                            if dual {
                                let rt = r.tan[c];
                                inner_t += p * rt;
                                crt[c] += olt * p;
                                if count {
                                    binary_tan[base + c] += fc * p * (olt * rv + ol * rt);
                                }
                            }
                            if count {
                                binary_counts[base + c] += fc * ol * p * rv;
                            }
                        }
                        cl[b] += oa * inner;
                        if dual {
                            clt[b] += ota * inner + oa * inner_t;
                        }
                    }
                }
                let lt: &[f64] = if dual { &clt[..lb_len] } else { &[] };
                cells[k.idx(i, split)].merge(parent.scale + r.scale, &cl[..lb_len], lt);
                let rt: &[f64] = if dual { &crt[..rc_len] } else { &[] };
                cells[k.idx(split + 1, j)].merge(parent.scale + l.scale, &cr[..rc_len], rt);
            }
        }
    }

    let mut emit_counts = vec![0.0; n * pt];
    let mut emit_tan = vec![0.0; if dual { n * pt } else { 0 }];
    for i in 0..n {
        cells[k.idx(i, i)].normalize();
        let (o, c) = (&cells[k.idx(i, i)], &inside[k.idx(i, i)]);
        if o.is_zero() || c.is_zero() {
            continue;
        }
        let f = (o.scale + c.scale - log_z).exp();
        for t in 0..pt {
            emit_counts[i * pt + t] = f * o.val[t] * c.val[t];
            if dual {
                emit_tan[i * pt + t] = f * (o.tan[t] * c.val[t] + o.val[t] * c.tan[t]);
            }
        }
    }

    let mut span_marginal = vec![0.0; n * n];
    let mut label_marginal = vec![0.0; n * n * nt];
    for i in 0..n {
        for j in i..n {
            let (o, c) = (&cells[k.idx(i, j)], &inside[k.idx(i, j)]);
            if o.is_zero() || c.is_zero() {
                continue;
            }
            let f = (o.scale + c.scale - log_z).exp();
            let mut total = 0.0;
            for q in 0..c.val.len() {
                let m = f * o.val[q] * c.val[q];
                total += m;
                if i != j {
                    label_marginal[(i * n + j) * nt + q] = m;
                }
            }
            span_marginal[i * n + j] = total;
        }
    }

    let (root_tangent, binary_tangent, emit_tangent) = if dual {
        for (t, c) in root_tan.iter_mut().zip(&root_counts) {
            *t -= eh * c;
        }
        for (t, c) in binary_tan.iter_mut().zip(&binary_counts) {
            *t -= eh * c;
        }
        for (t, c) in emit_tan.iter_mut().zip(&emit_counts) {
            *t -= eh * c;
        }
        (Some(root_tan), Some(binary_tan), Some(emit_tan))
    } else {
        (None, None, None)
    };

    Outside {
        cells,
        span_marginal,
        label_marginal,
        root_counts,
        binary_counts,
        emit_counts,
        root_tangent,
        binary_tangent,
        emit_tangent,
    }
}
