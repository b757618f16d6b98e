//! Span–video matching: label-weighted span vectors, one gated embedding
//! per expert, attention over experts, and the bidirectional hinge.

use serde::{Deserialize, Serialize};

use crate::chartkernel::{Posterior, Span};
use crate::compound::{weighted_marginal_sum, ChartInput};
use crate::diffcore::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{as_rows, lookup, Init, Linear, Lstm, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingConfig {
    /// Width of span vectors `c`.
    pub span_dim: usize,
    /// Width of expert embeddings `ξ`; must equal the video width.
    pub embed_dim: usize,
    pub word_dim: usize,
    pub encoder_hidden: usize,
    /// Hinge margin ε.
    pub margin: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            span_dim: 512,
            embed_dim: 512,
            word_dim: 256,
            encoder_hidden: 256,
            margin: 0.2,
        }
    }
}

/// `ξ = normalize(ξ1 ∘ sigmoid(W2 ξ1 + b2))`, `ξ1 = W1 c + b1`.
#[derive(Debug, Clone, Copy)]
pub struct GatedEmbed {
    pub w1: Linear,
    pub w2: Linear,
}

impl GatedEmbed {
    pub fn specs(prefix: &str, input: usize, output: usize) -> Vec<ParamSpec> {
        let mut v = Linear::specs(&format!("{prefix}.w1"), input, output, true);
        v.extend(Linear::specs(&format!("{prefix}.w2"), output, output, true));
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, prefix: &str, input: usize, output: usize) -> Result<Self> {
        Ok(GatedEmbed {
            w1: Linear::bind(store, &format!("{prefix}.w1"), input, output, true)?,
            w2: Linear::bind(store, &format!("{prefix}.w2"), output, output, true)?,
        })
    }

    /// Returns `(ξ, ξ2)`; rows of `c` are embedded independently.
    pub fn forward<F: Real>(&self, t: &mut Tape<'_, F>, c: Var) -> Result<(Var, Var)> {
        if t.value(c).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("span representation".into()));
        }
        let x1 = self.w1.forward(t, c)?;
        let g = self.w2.forward(t, x1)?;
        let g = t.sigmoid(g);
        let x2 = t.mul(x1, g)?;
        Ok((t.l2_normalize(x2), x2))
    }
}

/// Span vectors for one sentence.
pub struct SpanReps {
    pub spans: Vec<Span>,
    /// `[spans, span_dim]`
    pub c: Var,
}

/// Label posteriors `p(k | c, σ)` for each span, read off the chart.
pub fn label_posteriors(post: &Posterior, spans: &[Span]) -> Vec<Vec<f64>> {
    spans.iter().map(|&s| post.label_posterior(s)).collect()
}

#[derive(Debug, Clone)]
pub struct GroundingModel {
    pub cfg: GroundingConfig,
    pub labels: usize,
    pub experts: usize,
    word_emb: ParamId,
    fwd: Lstm,
    bwd: Lstm,
    /// All `f_k` side by side: `[2h, K * span_dim]`.
    fk: Linear,
    gates: Vec<GatedEmbed>,
    /// Expert attention `u_i`, `[span_dim, M]`; absent when `M = 1`.
    attn: Option<Linear>,
}

impl GroundingModel {
    pub fn specs(cfg: &GroundingConfig, vocab: usize, labels: usize, experts: usize) -> Vec<ParamSpec> {
        let h2 = 2 * cfg.encoder_hidden;
        let mut v = vec![ParamSpec::new("span.emb", &[vocab, cfg.word_dim], Init::Xavier)];
        v.extend(Lstm::specs("span.fwd", cfg.word_dim, cfg.encoder_hidden));
        v.extend(Lstm::specs("span.bwd", cfg.word_dim, cfg.encoder_hidden));
        v.extend(Linear::specs("span.fk", h2, labels * cfg.span_dim, true));
        for i in 0..experts {
            v.extend(GatedEmbed::specs(&format!("gate{i}"), cfg.span_dim, cfg.embed_dim));
        }
        if experts > 1 {
            v.extend(Linear::specs("match.attn", cfg.span_dim, experts, false));
        }
        v
    }

    pub fn bind<F: Real>(
        store: &ParamStore<F>,
        cfg: &GroundingConfig,
        vocab: usize,
        labels: usize,
        experts: usize,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(Error::input("matching needs at least one expert"));
        }
        let h2 = 2 * cfg.encoder_hidden;
        Ok(GroundingModel {
            cfg: cfg.clone(),
            labels,
            experts,
            word_emb: lookup(store, "span.emb", &[vocab, cfg.word_dim])?,
            fwd: Lstm::bind(store, "span.fwd", cfg.word_dim, cfg.encoder_hidden)?,
            bwd: Lstm::bind(store, "span.bwd", cfg.word_dim, cfg.encoder_hidden)?,
            fk: Linear::bind(store, "span.fk", h2, labels * cfg.span_dim, true)?,
            gates: (0..experts)
                .map(|i| GatedEmbed::bind(store, &format!("gate{i}"), cfg.span_dim, cfg.embed_dim))
                .collect::<Result<_>>()?,
            attn: if experts > 1 {
                Some(Linear::bind(store, "match.attn", cfg.span_dim, experts, false)?)
            } else {
                None
            },
        })
    }

    /// Word vectors `h_i` from the span encoder, `[n, 2h]`.
    pub fn word_states<F: Real>(&self, t: &mut Tape<'_, F>, sentence: &[usize]) -> Result<Var> {
        if sentence.is_empty() {
            return Err(Error::input("empty sentence"));
        }
        let emb = t.param(self.word_emb);
        let xs = t.gather(emb, sentence)?;
        let f = self.fwd.forward(t, xs, false)?;
        let b = self.bwd.forward(t, xs, true)?;
        t.concat(&[f, b], 1)
    }

    /// `c = Σ_k p(k|c,σ) f_k(mean h_i..h_j)` for each span.
    pub fn span_reps<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        sentence: &[usize],
        spans: &[Span],
        label_post: &[Vec<f64>],
    ) -> Result<SpanReps> {
        let h = self.word_states(t, sentence)?;
        let c = span_mixture(t, h, &self.fk, self.labels, self.cfg.span_dim, spans, label_post)?;
        Ok(SpanReps {
            spans: spans.to_vec(),
            c,
        })
    }

    /// Per-expert embeddings `ξ^i`, each `[spans, embed_dim]`.
    pub fn expert_embeddings<F: Real>(&self, t: &mut Tape<'_, F>, c: Var) -> Result<Vec<Var>> {
        self.gates.iter().map(|g| g.forward(t, c).map(|x| x.0)).collect()
    }

    /// Expert weights `ω(c)`, `[spans, M]`.
    pub fn expert_weights<F: Real>(&self, t: &mut Tape<'_, F>, c: Var) -> Result<Var> {
        let rows = t.shape(c)[0];
        match &self.attn {
            Some(a) => {
                let logits = a.forward(t, c)?;
                Ok(t.softmax(logits))
            }
            None => {
                let ones = vec![F::one(); rows];
                t.constant_matrix(rows, 1, ones)
            }
        }
    }

    /// Similarity `o(Ξ, Ψ)` of every span against one video, `[spans]`.
    pub fn similarity<F: Real>(&self, t: &mut Tape<'_, F>, c: Var, xis: &[Var], psi: &[Var]) -> Result<Var> {
        if xis.len() != self.experts || psi.len() != self.experts {
            return Err(Error::input(format!(
                "similarity over {} experts given {} span and {} video embeddings",
                self.experts,
                xis.len(),
                psi.len()
            )));
        }
        let omega = self.expert_weights(t, c)?;
        let cos = expert_cosines(t, xis, psi)?;
        combine_similarity(t, omega, cos)
    }
}

/// Label-weighted span mixture; `fk` maps `[2h] -> [K * dim]`.
pub fn span_mixture<F: Real>(
    t: &mut Tape<'_, F>,
    h: Var,
    fk: &Linear,
    labels: usize,
    dim: usize,
    spans: &[Span],
    label_post: &[Vec<f64>],
) -> Result<Var> {
    let n = t.shape(h)[0];
    if spans.is_empty() {
        return Err(Error::input("no spans to represent"));
    }
    if label_post.len() != spans.len() || label_post.iter().any(|p| p.len() != labels) {
        return Err(Error::input("label posteriors do not match spans and label count"));
    }
    // averaging matrix A[s, l] = 1/width on the span
    let mut avg = vec![F::zero(); spans.len() * n];
    for (r, &(i, j)) in spans.iter().enumerate() {
        if i > j || j >= n {
            return Err(Error::input(format!("span ({i},{j}) invalid for {n} tokens")));
        }
        let w = F::of(1.0 / (j - i + 1) as f64);
        for l in i..=j {
            avg[r * n + l] = w;
        }
    }
    let a = t.constant_matrix(spans.len(), n, avg)?;
    let means = t.matmul(a, h)?;
    let all = fk.forward(t, means)?;
    let mut out: Option<Var> = None;
    for k in 0..labels {
        let part = t.slice(all, 1, k * dim, dim)?;
        let pk = t.constant_vec(label_post.iter().map(|p| F::of(p[k])).collect());
        let term = t.mul_col(part, pk)?;
        out = Some(match out {
            Some(o) => t.add(o, term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one label"))
}

/// `cos(ξ^i_s, ψ^i)` arranged as `[spans, M]`.
pub fn expert_cosines<F: Real>(t: &mut Tape<'_, F>, xis: &[Var], psi: &[Var]) -> Result<Var> {
    let mut cols = Vec::with_capacity(xis.len());
    for (&x, &p) in xis.iter().zip(psi) {
        let rows = t.shape(x)[0];
        let pr = as_rows(t, p)?;
        let pb = t.gather(pr, &vec![0; rows])?;
        let c = t.cosine_similarity(x, pb)?;
        cols.push(t.reshape(c, &[rows, 1])?);
    }
    t.concat(&cols, 1)
}

/// `Σ_i ω_i cos_i` row by row; both inputs `[spans, M]`.
pub fn combine_similarity<F: Real>(t: &mut Tape<'_, F>, omega: Var, cos: Var) -> Result<Var> {
    let (rows, m) = (t.shape(cos)[0], t.shape(cos)[1]);
    let prod = t.mul(omega, cos)?;
    let ones = t.constant_matrix(m, 1, vec![F::one(); m])?;
    let s = t.matmul(prod, ones)?;
    t.reshape(s, &[rows])
}

/// `[o(Ξ′,Ψ) − o(Ξ,Ψ) + ε]₊ + [o(Ξ,Ψ′) − o(Ξ,Ψ) + ε]₊`, elementwise over spans.
pub fn hinge<F: Real>(t: &mut Tape<'_, F>, pos: Var, neg_span: Var, neg_video: Var, margin: f64) -> Result<Var> {
    let a = t.sub(neg_span, pos)?;
    let a = t.add_scalar(a, margin);
    let a = t.relu(a);
    let b = t.sub(neg_video, pos)?;
    let b = t.add_scalar(b, margin);
    let b = t.relu(b);
    t.add(a, b)
}

/// Video side for single-vector matching: temporally averaged expert
/// features concatenated and projected, `[embed_dim]`.
#[derive(Debug, Clone, Copy)]
pub struct ImageEncoder {
    proj: Linear,
}

impl ImageEncoder {
    pub fn specs(input: usize, output: usize) -> Vec<ParamSpec> {
        Linear::specs("image.proj", input, output, true)
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, input: usize, output: usize) -> Result<Self> {
        Ok(ImageEncoder {
            proj: Linear::bind(store, "image.proj", input, output, true)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.proj.input
    }

    /// `averaged` holds the concatenated per-expert means.
    pub fn forward<F: Real>(&self, t: &mut Tape<'_, F>, averaged: &[f32]) -> Result<Var> {
        if averaged.len() != self.proj.input {
            return Err(Error::input(format!(
                "averaged video vector has {} entries, expected {}",
                averaged.len(),
                self.proj.input
            )));
        }
        let x = t.constant_vec(averaged.iter().map(|&v| F::of(v as f64)).collect());
        self.proj.forward(t, x)
    }
}

impl GroundingModel {
    /// `h_vid` for every span of `c`: row `s` of `neg_c` is the negative span
    /// paired with span `s`, and `neg_psi` the negative video.
    pub fn span_hinges<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        c: Var,
        neg_c: Var,
        psi: &[Var],
        neg_psi: &[Var],
    ) -> Result<Var> {
        if t.shape(c) != t.shape(neg_c) {
            return Err(Error::Shape {
                op: "span_hinges",
                lhs: t.shape(c).to_vec(),
                rhs: t.shape(neg_c).to_vec(),
            });
        }
        let xi = self.expert_embeddings(t, c)?;
        let xn = self.expert_embeddings(t, neg_c)?;
        let pos = self.similarity(t, c, &xi, psi)?;
        let neg_span = self.similarity(t, neg_c, &xn, psi)?;
        let neg_video = self.similarity(t, c, &xi, neg_psi)?;
        if t.value(pos) == t.value(neg_span) && t.value(pos) == t.value(neg_video) {
            log::debug!("negative sample coincides with the positive pair");
        }
        hinge(t, pos, neg_span, neg_video, self.cfg.margin)
    }
}

/// `Σ_c p(c|σ) h(c)` over `spans`, differentiable in the rule scores too.
pub fn matching_loss<F: Real>(t: &mut Tape<'_, F>, input: &ChartInput, spans: &[Span], hinges: Var) -> Result<Var> {
    weighted_marginal_sum(t, input, spans, hinges)
}
