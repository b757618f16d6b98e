//! Compound PCFG: rule probabilities generated per sentence from a latent
//! vector `z`, an amortized Gaussian posterior over `z`, and the ELBO.

pub mod chartops;

pub use chartops::{log_likelihood, weighted_marginal_sum, wide_spans, ChartInput};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chartkernel::{viterbi_scored, GrammarSizes, ParseTree, Posterior, RuleTensors};
use crate::diffcore::{ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{lookup, Init, Linear, Lstm, ParamSpec, ResidualMlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompoundConfig {
    pub nonterminals: usize,
    pub preterminals: usize,
    pub z_dim: usize,
    /// Width of symbol embeddings and of the scorer MLPs.
    pub state_dim: usize,
    pub mlp_blocks: usize,
    pub word_dim: usize,
    pub encoder_hidden: usize,
}

impl Default for CompoundConfig {
    fn default() -> Self {
        CompoundConfig {
            nonterminals: 30,
            preterminals: 60,
            z_dim: 64,
            state_dim: 256,
            mlp_blocks: 2,
            word_dim: 256,
            encoder_hidden: 256,
        }
    }
}

impl CompoundConfig {
    pub fn symbols(&self) -> usize {
        self.nonterminals + self.preterminals
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("nonterminals", self.nonterminals),
            ("preterminals", self.preterminals),
            ("z_dim", self.z_dim),
            ("state_dim", self.state_dim),
            ("word_dim", self.word_dim),
            ("encoder_hidden", self.encoder_hidden),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::input(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Rule log-probabilities as tape values.
#[derive(Debug, Clone, Copy)]
pub struct RuleVars {
    /// `[N]`
    pub root: Var,
    /// `[N, S*S]`, child pair `(B, C)` at column `B * S + C`
    pub binary: Var,
    /// `[P, V]`
    pub lexical: Var,
}

/// Parameter handles for the grammar networks and the posterior encoder.
#[derive(Debug, Clone)]
pub struct CompoundModel {
    pub cfg: CompoundConfig,
    pub vocab: usize,
    root_emb: ParamId,
    nt_emb: ParamId,
    t_emb: ParamId,
    fs: ResidualMlp,
    root_u: ParamId,
    binary_u: ParamId,
    ft: ResidualMlp,
    lex_u: ParamId,
    word_emb: ParamId,
    fwd: Lstm,
    bwd: Lstm,
    head: Linear,
}

/// One sentence's `−ELBO` and its pieces.
pub struct ElboParts {
    pub loss: Var,
    pub log_likelihood: Var,
    pub kl: Var,
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
    pub chart: ChartInput,
    pub posterior: Posterior,
}

impl CompoundModel {
    pub fn specs(cfg: &CompoundConfig, vocab: usize) -> Vec<ParamSpec> {
        let (d, z, nt, pt, s) = (cfg.state_dim, cfg.z_dim, cfg.nonterminals, cfg.preterminals, cfg.symbols());
        let mut v = vec![
            ParamSpec::new("pcfg.root_emb", &[d], Init::Xavier),
            ParamSpec::new("pcfg.nt_emb", &[nt, d], Init::Xavier),
            ParamSpec::new("pcfg.t_emb", &[pt, d], Init::Xavier),
            ParamSpec::new("pcfg.root_u", &[d, nt], Init::Xavier),
            ParamSpec::new("pcfg.binary_u", &[d + z, s * s], Init::Xavier),
            ParamSpec::new("pcfg.lex_u", &[d, vocab], Init::Xavier),
            ParamSpec::new("enc.emb", &[vocab, cfg.word_dim], Init::Xavier),
        ];
        v.extend(ResidualMlp::specs("pcfg.fs", d + z, d, cfg.mlp_blocks));
        v.extend(ResidualMlp::specs("pcfg.ft", d + z, d, cfg.mlp_blocks));
        v.extend(Lstm::specs("enc.fwd", cfg.word_dim, cfg.encoder_hidden));
        v.extend(Lstm::specs("enc.bwd", cfg.word_dim, cfg.encoder_hidden));
        v.extend(Linear::specs("enc.head", 2 * cfg.encoder_hidden, 2 * z, true));
        v
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &CompoundConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let (d, z, nt, pt, s) = (cfg.state_dim, cfg.z_dim, cfg.nonterminals, cfg.preterminals, cfg.symbols());
        Ok(CompoundModel {
            cfg: cfg.clone(),
            vocab,
            root_emb: lookup(store, "pcfg.root_emb", &[d])?,
            nt_emb: lookup(store, "pcfg.nt_emb", &[nt, d])?,
            t_emb: lookup(store, "pcfg.t_emb", &[pt, d])?,
            fs: ResidualMlp::bind(store, "pcfg.fs", d + z, d, cfg.mlp_blocks)?,
            root_u: lookup(store, "pcfg.root_u", &[d, nt])?,
            binary_u: lookup(store, "pcfg.binary_u", &[d + z, s * s])?,
            ft: ResidualMlp::bind(store, "pcfg.ft", d + z, d, cfg.mlp_blocks)?,
            lex_u: lookup(store, "pcfg.lex_u", &[d, vocab])?,
            word_emb: lookup(store, "enc.emb", &[vocab, cfg.word_dim])?,
            fwd: Lstm::bind(store, "enc.fwd", cfg.word_dim, cfg.encoder_hidden)?,
            bwd: Lstm::bind(store, "enc.bwd", cfg.word_dim, cfg.encoder_hidden)?,
            head: Linear::bind(store, "enc.head", 2 * cfg.encoder_hidden, 2 * z, true)?,
        })
    }

    pub fn sizes(&self) -> GrammarSizes {
        GrammarSizes {
            nonterminals: self.cfg.nonterminals,
            preterminals: self.cfg.preterminals,
            terminals: self.vocab,
        }
    }

    /// `[rows, d+z]`: each embedding row followed by `z`.
    fn with_z<F: Real>(&self, t: &mut Tape<'_, F>, emb: Var, z: Var) -> Result<Var> {
        let rows = t.shape(emb)[0];
        let zr = t.reshape(z, &[1, self.cfg.z_dim])?;
        let zs = t.gather(zr, &vec![0; rows])?;
        t.concat(&[emb, zs], 1)
    }

    /// Rule log-probabilities given `z` (shape `[z_dim]`).
    pub fn rule_vars<F: Real>(&self, t: &mut Tape<'_, F>, z: Var) -> Result<RuleVars> {
        if t.shape(z) != [self.cfg.z_dim] {
            return Err(Error::Shape {
                op: "rule_vars",
                lhs: t.shape(z).to_vec(),
                rhs: vec![self.cfg.z_dim],
            });
        }
        if t.value(z).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent z".into()));
        }
        let ws = t.param(self.root_emb);
        let x = t.concat(&[ws, z], 0)?;
        let hs = self.fs.forward(t, x)?;
        let hs = t.reshape(hs, &[1, self.cfg.state_dim])?;
        let ru = t.param(self.root_u);
        let root = t.matmul(hs, ru)?;
        let root = t.reshape(root, &[self.cfg.nonterminals])?;
        let root = t.log_softmax(root);

        let wa = t.param(self.nt_emb);
        let xa = self.with_z(t, wa, z)?;
        let bu = t.param(self.binary_u);
        let binary = t.matmul(xa, bu)?;
        let binary = t.log_softmax(binary);

        let wt = t.param(self.t_emb);
        let xt = self.with_z(t, wt, z)?;
        let ht = self.ft.forward(t, xt)?;
        let lu = t.param(self.lex_u);
        let lexical = t.matmul(ht, lu)?;
        let lexical = t.log_softmax(lexical);
        Ok(RuleVars { root, binary, lexical })
    }

    /// Posterior mean and log-variance, each `[z_dim]`.
    pub fn encode<F: Real>(&self, t: &mut Tape<'_, F>, sentence: &[usize]) -> Result<(Var, Var)> {
        if sentence.is_empty() {
            return Err(Error::input("cannot encode an empty sentence"));
        }
        if let Some(&w) = sentence.iter().find(|&&w| w >= self.vocab) {
            return Err(Error::input(format!("token id {w} outside vocabulary of {}", self.vocab)));
        }
        let emb = t.param(self.word_emb);
        let xs = t.gather(emb, sentence)?;
        let f = self.fwd.forward(t, xs, false)?;
        let b = self.bwd.forward(t, xs, true)?;
        let h = t.concat(&[f, b], 1)?;
        let pooled = t.max_rows(h);
        let out = self.head.forward(t, pooled)?;
        let z = self.cfg.z_dim;
        let mu = t.slice(out, 0, 0, z)?;
        let logvar = t.slice(out, 0, z, z)?;
        Ok((mu, logvar))
    }

    /// `−ELBO` with the reparameterized sample `z = μ + exp(½ logvar) ⊙ eps`.
    pub fn elbo<F: Real>(&self, t: &mut Tape<'_, F>, sentence: &[usize], eps: &[f64]) -> Result<ElboParts> {
        if sentence.len() < 2 {
            return Err(Error::UnsupportedLength(sentence.len()));
        }
        if eps.len() != self.cfg.z_dim {
            return Err(Error::input(format!("noise has {} entries, z_dim is {}", eps.len(), self.cfg.z_dim)));
        }
        let (mu, logvar) = self.encode(t, sentence)?;
        let half = t.scale(logvar, 0.5);
        let sd = t.exp(half);
        let e = t.constant_vec(eps.iter().map(|&x| F::of(x)).collect());
        let noise = t.mul(sd, e)?;
        let z = t.add(mu, noise)?;
        let rv = self.rule_vars(t, z)?;
        let chart = ChartInput::new(t, rv.root, rv.binary, rv.lexical, sentence)?;
        let (ll, posterior) = log_likelihood(t, &chart)?;
        let kl = kl_gaussian(t, mu, logvar)?;
        let loss = t.sub(kl, ll)?;
        Ok(ElboParts {
            loss,
            log_likelihood: ll,
            kl,
            z,
            mu,
            logvar,
            chart,
            posterior,
        })
    }

    /// Plain rule tables for a given `z`.
    pub fn rule_probs<F: Real>(&self, store: &ParamStore<F>, z: &[f64]) -> Result<RuleTensors> {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent z".into()));
        }
        let mut t = Tape::new(store);
        let zv = t.constant_vec(z.iter().map(|&x| F::of(x)).collect());
        let rv = self.rule_vars(&mut t, zv)?;
        rule_tensors(&t, self.sizes(), &rv)
    }

    /// Posterior mean and log-variance as plain vectors.
    pub fn posterior_mean<F: Real>(&self, store: &ParamStore<F>, sentence: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new(store);
        let (mu, lv) = self.encode(&mut t, sentence)?;
        Ok((
            t.value(mu).iter().map(|x| x.to64()).collect(),
            t.value(lv).iter().map(|x| x.to64()).collect(),
        ))
    }

    /// Most likely tree under the grammar at `z = μ(σ)`, with its score.
    pub fn parse<F: Real>(&self, store: &ParamStore<F>, sentence: &[usize]) -> Result<(f64, ParseTree)> {
        if sentence.len() < 2 {
            return Err(Error::UnsupportedLength(sentence.len()));
        }
        let (mu, _) = self.posterior_mean(store, sentence)?;
        let rules = self.rule_probs(store, &mu)?;
        viterbi_scored(&rules.for_sentence(sentence)?)
    }
}

/// Copies tape values out as `f64` rule tables.
pub fn rule_tensors<F: Real>(t: &Tape<'_, F>, sizes: GrammarSizes, rv: &RuleVars) -> Result<RuleTensors> {
    let cv = |v: Var| t.value(v).iter().map(|x| x.to64()).collect::<Vec<f64>>();
    RuleTensors::new(sizes, cv(rv.root), cv(rv.binary), cv(rv.lexical))
}

/// `KL(N(μ, diag exp(logvar)) || N(0, I)) = ½ Σ (exp(lv) + μ² − 1 − lv)`.
pub fn kl_gaussian<F: Real>(t: &mut Tape<'_, F>, mu: Var, logvar: Var) -> Result<Var> {
    if t.value(mu).iter().chain(t.value(logvar)).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("posterior parameters".into()));
    }
    let ev = t.exp(logvar);
    let m2 = t.mul(mu, mu)?;
    let a = t.add(ev, m2)?;
    let a = t.sub(a, logvar)?;
    let a = t.add_scalar(a, -1.0);
    let s = t.sum(a);
    Ok(t.scale(s, 0.5))
}

/// Standard-normal draw for the reparameterization.
pub fn sample_noise(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
