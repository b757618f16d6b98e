//! Chart computations recorded on the tape as single custom nodes.
//!
//! Gradients come from the kernel directly: expected rule counts for
//! `log Z`, and the tangent pass for `Σ marginal(c) h(c)`.

use crate::chartkernel::{posterior, Posterior, SentenceRules, Span, SpanWeights};
use crate::diffcore::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Rule log-probabilities for one sentence, on the tape and as plain values.
pub struct ChartInput {
    pub root: Var,
    pub binary: Var,
    /// `[n, |P|]`, row `i` holding `log p(w_i | T)`.
    pub emit: Var,
    pub rules: SentenceRules,
}

fn to64<F: Real>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| x.to64()).collect()
}

fn scaled<F: Real>(v: &[f64], g: f64) -> Vec<F> {
    v.iter().map(|&x| F::of(x * g)).collect()
}

impl ChartInput {
    /// `root [N]`, `binary [N, S*S]`, `lexical [P, V]` log-probabilities.
    pub fn new<F: Real>(t: &mut Tape<'_, F>, root: Var, binary: Var, lexical: Var, sentence: &[usize]) -> Result<Self> {
        let (pt, v) = (t.shape(lexical)[0], t.shape(lexical)[1]);
        if let Some(&w) = sentence.iter().find(|&&w| w >= v) {
            return Err(Error::input(format!("terminal id {w} outside vocabulary of {v}")));
        }
        if sentence.len() < 2 {
            return Err(Error::UnsupportedLength(sentence.len()));
        }
        let lt = t.transpose(lexical)?;
        let emit = t.gather(lt, sentence)?;
        let nt = t.shape(root)[0];
        let rules = SentenceRules::new(
            nt,
            pt,
            to64(t.value(root)),
            to64(t.value(binary)),
            to64(t.value(emit)),
        )?;
        Ok(ChartInput {
            root,
            binary,
            emit,
            rules,
        })
    }
}

/// `log p(σ | z)` as a tape node, plus the posterior used for it.
pub fn log_likelihood<F: Real>(t: &mut Tape<'_, F>, input: &ChartInput) -> Result<(Var, Posterior)> {
    let post = posterior(&input.rules, None)?;
    let (rc, bc, ec) = (post.root_counts.clone(), post.binary_counts.clone(), post.emit_counts.clone());
    let v = t.custom(
        &[input.root, input.binary, input.emit],
        vec![1],
        vec![F::of(post.log_z)],
        move |g| {
            let g = g[0].to64();
            vec![Some(scaled(&rc, g)), Some(scaled(&bc, g)), Some(scaled(&ec, g))]
        },
    )?;
    Ok((v, post))
}

/// `Σ_c marginal(c) h(c)` over `spans`, where `h` holds one value per span.
/// Differentiable in both the weights and the rule scores.
pub fn weighted_marginal_sum<F: Real>(
    t: &mut Tape<'_, F>,
    input: &ChartInput,
    spans: &[Span],
    h: Var,
) -> Result<Var> {
    let n = input.rules.len();
    if t.shape(h) != [spans.len()] {
        return Err(Error::Shape {
            op: "weighted_marginal_sum",
            lhs: t.shape(h).to_vec(),
            rhs: vec![spans.len()],
        });
    }
    let mut w = SpanWeights::zeros(n);
    for (&s, x) in spans.iter().zip(t.value(h)) {
        w.set(s, w.get(s) + x.to64());
    }
    let post = posterior(&input.rules, Some(&w))?;
    let m: Vec<f64> = spans.iter().map(|&s| post.span_marginal(s)).collect();
    let rt = post.root_tangent.expect("weighted pass has tangents");
    let bt = post.binary_tangent.expect("weighted pass has tangents");
    let et = post.emit_tangent.expect("weighted pass has tangents");
    t.custom(
        &[input.root, input.binary, input.emit, h],
        vec![1],
        vec![F::of(post.weighted_sum)],
        move |g| {
            let g = g[0].to64();
            vec![
                Some(scaled(&rt, g)),
                Some(scaled(&bt, g)),
                Some(scaled(&et, g)),
                Some(scaled(&m, g)),
            ]
        },
    )
}

/// Spans of width ≥ 2, ordered by width then start; includes the full span.
pub fn wide_spans(n: usize) -> Vec<Span> {
    (2..=n)
        .flat_map(|w| (0..=n - w).map(move |i| (i, i + w - 1)))
        .collect()
}
