//! Multi-modal fusion of expert feature sequences.
//!
//! Each expert's frames are pooled, projected to a common width and laid
//! out as `[avg, f_1 .. f_L]`; all experts are concatenated into one token
//! stream. Expert-type embeddings `E` and sinusoidal positions `P` (index 0
//! at every `avg` token) are added before attention, and the outputs at the
//! `avg` positions form `Ψ`.

use serde::{Deserialize, Serialize};

use crate::dataio::{Category, ExpertDecl, ExpertFeatures, VideoFeatures};
use crate::diffcore::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{lookup, Init, Linear, ParamSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmtConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub chunks: usize,
    /// Add `E + P` at the input of every layer rather than only the first.
    pub encodings_every_layer: bool,
    /// Exclude missing experts' tokens from attention keys.
    pub mask_missing: bool,
}

impl Default for MmtConfig {
    fn default() -> Self {
        MmtConfig {
            width: 512,
            layers: 2,
            heads: 8,
            ffn: 2048,
            dropout: 0.1,
            chunks: 8,
            encodings_every_layer: true,
            mask_missing: false,
        }
    }
}

impl MmtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::input(format!(
                "transformer width {} must be a positive multiple of {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 || self.ffn == 0 || self.chunks == 0 {
            return Err(Error::input("transformer needs layers, feed-forward width and chunks"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Sizes of `chunks` contiguous parts of `len` frames, earliest parts
/// taking the remainder; fewer frames than chunks gives one part per frame.
pub fn chunk_sizes(len: usize, chunks: usize) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    let k = chunks.min(len);
    let (q, r) = (len / k, len % k);
    (0..k).map(|i| q + usize::from(i < r)).collect()
}

/// Pooled frames, row-major `[rows, dim]`, with the row count. Video
/// categories are chunk-averaged, the rest globally averaged.
pub fn chunk_pool(frames: &[f32], dim: usize, category: Category, chunks: usize) -> (Vec<f32>, usize) {
    let len = frames.len().checked_div(dim).unwrap_or(0);
    if len == 0 {
        return (Vec::new(), 0);
    }
    let sizes = if category.is_chunked() { chunk_sizes(len, chunks) } else { vec![len] };
    let mut out = Vec::with_capacity(sizes.len() * dim);
    let mut start = 0;
    for &s in &sizes {
        let mut acc = vec![0f64; dim];
        for f in start..start + s {
            for (a, &x) in acc.iter_mut().zip(&frames[f * dim..(f + 1) * dim]) {
                *a += x as f64;
            }
        }
        out.extend(acc.iter().map(|&a| (a / s as f64) as f32));
        start += s;
    }
    (out, sizes.len())
}

/// Fixed sinusoidal encoding of `pos`.
pub fn sinusoid(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| {
            let rate = 10000f64.powf((2 * (j / 2)) as f64 / width as f64);
            let a = pos as f64 / rate;
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// One projected expert: `[L, D]` sequence and `[D]` average.
#[derive(Debug, Clone, Copy)]
pub struct ExpertStream {
    pub seq: Var,
    pub avg: Var,
    pub len: usize,
    pub missing: bool,
}

/// What one forward pass added and attended, for inspection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrace {
    /// Row-major `[T, D]` encoding added at each layer input (empty when none).
    pub added: Vec<Vec<f64>>,
    /// `attention[layer][head]`, row-major `[T, T]`.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Expert index of every token.
    pub token_expert: Vec<usize>,
    /// Position index of every token; 0 at each `avg`.
    pub token_position: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct MmTransformer {
    pub cfg: MmtConfig,
    pub experts: Vec<ExpertDecl>,
    proj: Vec<Linear>,
    expert_emb: ParamId,
    layers: Vec<Layer>,
}

fn layer_prefix(l: usize) -> String {
    format!("mmt.l{l}")
}

impl MmTransformer {
    pub fn specs(cfg: &MmtConfig, experts: &[ExpertDecl]) -> Vec<ParamSpec> {
        let d = cfg.width;
        let mut v = Vec::new();
        for e in experts {
            v.extend(Linear::specs(&format!("proj.{}", e.name), e.dim, d, true));
        }
        v.push(ParamSpec::new("mmt.expert_emb", &[experts.len().max(1), d], Init::Xavier));
        for l in 0..cfg.layers {
            let p = layer_prefix(l);
            for n in ["q", "k", "v", "o"] {
                v.extend(Linear::specs(&format!("{p}.{n}"), d, d, true));
            }
            v.push(ParamSpec::new(format!("{p}.ln1.g"), &[d], Init::Ones));
            v.push(ParamSpec::new(format!("{p}.ln1.b"), &[d], Init::Zeros));
            v.extend(Linear::specs(&format!("{p}.ff1"), d, cfg.ffn, true));
            v.extend(Linear::specs(&format!("{p}.ff2"), cfg.ffn, d, true));
            v.push(ParamSpec::new(format!("{p}.ln2.g"), &[d], Init::Ones));
            v.push(ParamSpec::new(format!("{p}.ln2.b"), &[d], Init::Zeros));
        }
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &MmtConfig, experts: &[ExpertDecl]) -> Result<Self> {
        cfg.validate()?;
        if experts.is_empty() {
            return Err(Error::input("fusion needs at least one expert"));
        }
        let d = cfg.width;
        let proj = experts
            .iter()
            .map(|e| Linear::bind(store, &format!("proj.{}", e.name), e.dim, d, true))
            .collect::<Result<_>>()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = layer_prefix(l);
                let lin = |n: &str, i, o| Linear::bind(store, &format!("{p}.{n}"), i, o, true);
                let ln = |n: &str| -> Result<(ParamId, ParamId)> {
                    Ok((
                        lookup(store, &format!("{p}.{n}.g"), &[d])?,
                        lookup(store, &format!("{p}.{n}.b"), &[d])?,
                    ))
                };
                Ok(Layer {
                    q: lin("q", d, d)?,
                    k: lin("k", d, d)?,
                    v: lin("v", d, d)?,
                    o: lin("o", d, d)?,
                    ln1: ln("ln1")?,
                    ff1: lin("ff1", d, cfg.ffn)?,
                    ff2: lin("ff2", cfg.ffn, d)?,
                    ln2: ln("ln2")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MmTransformer {
            cfg: cfg.clone(),
            experts: experts.to_vec(),
            proj,
            expert_emb: lookup(store, "mmt.expert_emb", &[experts.len(), d])?,
            layers,
        })
    }

    /// Pools and projects every expert, in declaration order.
    pub fn project_experts<F: Real>(&self, t: &mut Tape<'_, F>, video: &VideoFeatures) -> Result<Vec<ExpertStream>> {
        if video.experts.len() != self.experts.len() {
            return Err(Error::input(format!(
                "video {} has {} expert streams, model expects {}",
                video.video_id,
                video.experts.len(),
                self.experts.len()
            )));
        }
        video
            .experts
            .iter()
            .zip(&self.experts)
            .zip(&self.proj)
            .map(|((f, decl), proj)| self.project_one(t, &video.video_id, f, decl, proj))
            .collect()
    }

    fn project_one<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        video_id: &str,
        f: &ExpertFeatures,
        decl: &ExpertDecl,
        proj: &Linear,
    ) -> Result<ExpertStream> {
        if f.name != decl.name || f.dim != decl.dim || f.data.len() != f.frames * f.dim {
            return Err(Error::input(format!(
                "video {video_id}, expert {}: expected width {}, got {} values of width {}",
                decl.name,
                decl.dim,
                f.data.len(),
                f.dim
            )));
        }
        let (pooled, rows) = chunk_pool(&f.data, f.dim, f.category, self.cfg.chunks);
        let missing = f.missing || rows == 0;
        let (pooled, rows) = if rows == 0 { (vec![0.0; f.dim], 1) } else { (pooled, rows) };
        let conv = |v: &[f32]| v.iter().map(|&x| F::of(x as f64)).collect::<Vec<F>>();
        let x = t.constant_matrix(rows, f.dim, conv(&pooled))?;
        let seq = proj.forward(t, x)?;
        let mean = if missing { vec![0.0; f.dim] } else { f.average() };
        let m = t.constant_vec(conv(&mean));
        let avg = proj.forward(t, m)?;
        Ok(ExpertStream {
            seq,
            avg,
            len: rows,
            missing,
        })
    }

    /// `Ψ`, one `[D]` vector per expert.
    pub fn fuse<F: Real>(&self, t: &mut Tape<'_, F>, streams: &[ExpertStream]) -> Result<Vec<Var>> {
        Ok(self.fuse_traced(t, streams, false)?.0)
    }

    pub fn fuse_traced<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        streams: &[ExpertStream],
        trace: bool,
    ) -> Result<(Vec<Var>, Option<FusionTrace>)> {
        if streams.len() != self.experts.len() {
            return Err(Error::input(format!(
                "{} streams given to a {}-expert fusion",
                streams.len(),
                self.experts.len()
            )));
        }
        if streams.iter().all(|s| s.missing) {
            return Err(Error::input("every expert is missing; video unusable"));
        }
        let d = self.cfg.width;
        let mut rows = Vec::new();
        let mut token_expert = Vec::new();
        let mut token_position = Vec::new();
        let mut avg_pos = Vec::new();
        for (m, s) in streams.iter().enumerate() {
            avg_pos.push(token_expert.len());
            let a = t.reshape(s.avg, &[1, d])?;
            rows.push(a);
            rows.push(s.seq);
            for p in 0..=s.len {
                token_expert.push(m);
                token_position.push(p);
            }
        }
        let tokens = token_expert.len();
        let mut x = t.concat(&rows, 0)?;

        let e_tab = t.param(self.expert_emb);
        let e = t.gather(e_tab, &token_expert)?;
        let pos: Vec<F> = token_position
            .iter()
            .flat_map(|&p| sinusoid(p, d))
            .map(F::of)
            .collect();
        let p = t.constant_matrix(tokens, d, pos)?;
        let enc = t.add(e, p)?;

        let mask = if self.cfg.mask_missing {
            let masked: Vec<bool> = token_expert.iter().map(|&m| streams[m].missing).collect();
            let mut v = vec![F::zero(); tokens * tokens];
            for r in 0..tokens {
                for c in 0..tokens {
                    if masked[c] {
                        v[r * tokens + c] = F::of(-1e9);
                    }
                }
            }
            Some(t.constant_matrix(tokens, tokens, v)?)
        } else {
            None
        };

        let mut tr = trace.then(|| FusionTrace {
            token_expert: token_expert.clone(),
            token_position: token_position.clone(),
            ..Default::default()
        });
        for (l, layer) in self.layers.iter().enumerate() {
            if l == 0 || self.cfg.encodings_every_layer {
                x = t.add(x, enc)?;
                if let Some(tr) = tr.as_mut() {
                    tr.added.push(t.value(enc).iter().map(|v| v.to64()).collect());
                }
            } else if let Some(tr) = tr.as_mut() {
                tr.added.push(Vec::new());
            }
            let (y, att) = self.layer_forward(t, layer, x, mask)?;
            if let Some(tr) = tr.as_mut() {
                tr.attention.push(att);
            }
            x = y;
        }
        let psi = avg_pos
            .iter()
            .map(|&r| {
                let row = t.slice(x, 0, r, 1)?;
                t.reshape(row, &[d])
            })
            .collect::<Result<_>>()?;
        Ok((psi, tr))
    }

    fn layer_forward<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        layer: &Layer,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let d = self.cfg.width;
        let dh = d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = layer.q.forward(t, x)?;
        let k = layer.k.forward(t, x)?;
        let v = layer.v.forward(t, x)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut att = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = t.slice(q, 1, h * dh, dh)?;
            let kh = t.slice(k, 1, h * dh, dh)?;
            let vh = t.slice(v, 1, h * dh, dh)?;
            let kt = t.transpose(kh)?;
            let s = t.matmul(qh, kt)?;
            let mut s = t.scale(s, scale);
            if let Some(m) = mask {
                s = t.add(s, m)?;
            }
            let a = t.softmax(s);
            att.push(t.value(a).iter().map(|x| x.to64()).collect());
            heads.push(t.matmul(a, vh)?);
        }
        let cat = t.concat(&heads, 1)?;
        let o = layer.o.forward(t, cat)?;
        let o = t.dropout(o, self.cfg.dropout);
        let r = t.add(x, o)?;
        let (g1, b1) = (t.param(layer.ln1.0), t.param(layer.ln1.1));
        let h = t.layer_norm(r, g1, b1)?;
        let f = layer.ff1.forward(t, h)?;
        let f = t.relu(f);
        let f = layer.ff2.forward(t, f)?;
        let f = t.dropout(f, self.cfg.dropout);
        let r = t.add(h, f)?;
        let (g2, b2) = (t.param(layer.ln2.0), t.param(layer.ln2.1));
        Ok((t.layer_norm(r, g2, b2)?, att))
    }

    /// Projection and fusion in one call.
    pub fn encode<F: Real>(&self, t: &mut Tape<'_, F>, video: &VideoFeatures) -> Result<Vec<Var>> {
        let streams = self.project_experts(t, video)?;
        self.fuse(t, &streams)
    }
}
