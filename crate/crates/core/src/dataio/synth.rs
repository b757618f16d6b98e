//! A known generator PCFG, sampled into a corpus with gold derivations and
//! label-correlated pseudo-features.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::chartkernel::{GrammarSizes, ParseTree, RuleTensors, Span, LOG_ZERO};
use crate::dataio::{Category, CorpusEntry, ExpertDecl, ExpertFeatures, FeatureSet, GoldTree, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sym {
    Nt(usize),
    Pt(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRule {
    pub lhs: usize,
    pub left: Sym,
    pub right: Sym,
    pub prob: f64,
}

/// Binary generator grammar. Nonterminal names double as gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorGrammar {
    pub nonterminals: Vec<String>,
    pub preterminals: Vec<String>,
    pub start: Vec<f64>,
    pub rules: Vec<GenRule>,
    pub lexicon: Vec<Vec<(String, f64)>>,
}

fn words(list: &[&str]) -> Vec<(String, f64)> {
    let p = 1.0 / list.len() as f64;
    list.iter().map(|w| (w.to_string(), p)).collect()
}

impl GeneratorGrammar {
    /// Small English-like grammar with NP, VP and PP constituents.
    pub fn toy_english() -> Self {
        use Sym::{Nt, Pt};
        const S: usize = 0;
        const NP: usize = 1;
        const NOM: usize = 2;
        const VP: usize = 3;
        const PP: usize = 4;
        const DT: usize = 0;
        const NN: usize = 1;
        const JJ: usize = 2;
        const VB: usize = 3;
        const IN: usize = 4;
        const RB: usize = 5;
        let r = |lhs, left, right, prob| GenRule { lhs, left, right, prob };
        GeneratorGrammar {
            nonterminals: ["S", "NP", "NOM", "VP", "PP"].map(String::from).to_vec(),
            preterminals: ["DT", "NN", "JJ", "VB", "IN", "RB"].map(String::from).to_vec(),
            start: vec![1.0, 0.0, 0.0, 0.0, 0.0],
            rules: vec![
                r(S, Nt(NP), Nt(VP), 1.0),
                r(NP, Pt(DT), Pt(NN), 0.55),
                r(NP, Pt(DT), Nt(NOM), 0.3),
                r(NP, Nt(NP), Nt(PP), 0.15),
                r(NOM, Pt(JJ), Pt(NN), 0.8),
                r(NOM, Pt(JJ), Nt(NOM), 0.2),
                r(VP, Pt(VB), Nt(NP), 0.5),
                r(VP, Pt(VB), Nt(PP), 0.2),
                r(VP, Nt(VP), Nt(PP), 0.1),
                r(VP, Pt(VB), Pt(RB), 0.2),
                r(PP, Pt(IN), Nt(NP), 1.0),
            ],
            lexicon: vec![
                words(&["the", "a", "this", "every", "that", "each", "some", "my", "your", "our"]),
                words(&["man", "woman", "dog", "ball", "car", "table", "kitchen", "guitar", "knife", "door"]),
                words(&["red", "small", "old", "happy", "wooden", "loud"]),
                words(&["throws", "opens", "plays", "cuts", "holds", "watches", "pushes", "finds"]),
                words(&["on", "with", "near", "under", "behind"]),
                words(&["quickly", "slowly", "again", "carefully"]),
            ],
        }
    }

    /// `X -> T X | T T`, so every derivation is right-branching.
    pub fn right_branching(vocab: &[&str], continue_prob: f64) -> Self {
        GeneratorGrammar {
            nonterminals: vec!["X".into()],
            preterminals: vec!["T".into()],
            start: vec![1.0],
            rules: vec![
                GenRule {
                    lhs: 0,
                    left: Sym::Pt(0),
                    right: Sym::Nt(0),
                    prob: continue_prob,
                },
                GenRule {
                    lhs: 0,
                    left: Sym::Pt(0),
                    right: Sym::Pt(0),
                    prob: 1.0 - continue_prob,
                },
            ],
            lexicon: vec![words(vocab)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nt = self.nonterminals.len();
        let pt = self.preterminals.len();
        if nt == 0 || pt == 0 || self.start.len() != nt || self.lexicon.len() != pt {
            return Err(Error::input("generator grammar shapes are inconsistent"));
        }
        let close = |s: f64| (s - 1.0).abs() < 1e-9;
        if !close(self.start.iter().sum()) {
            return Err(Error::input("start distribution does not sum to 1"));
        }
        for a in 0..nt {
            let s: f64 = self.rules.iter().filter(|r| r.lhs == a).map(|r| r.prob).sum();
            if !close(s) {
                return Err(Error::input(format!("rules of {} sum to {s}", self.nonterminals[a])));
            }
        }
        for r in &self.rules {
            for c in [r.left, r.right] {
                let ok = match c {
                    Sym::Nt(i) => i < nt,
                    Sym::Pt(i) => i < pt,
                };
                if !ok || r.lhs >= nt {
                    return Err(Error::input("rule refers to an unknown category"));
                }
            }
        }
        for (t, lex) in self.lexicon.iter().enumerate() {
            if !close(lex.iter().map(|(_, p)| p).sum()) {
                return Err(Error::input(format!("lexicon of {} does not sum to 1", self.preterminals[t])));
            }
        }
        Ok(())
    }

    pub fn words(&self) -> BTreeSet<String> {
        self.lexicon.iter().flatten().map(|(w, _)| w.clone()).collect()
    }

    /// Log-probability tensors over `vocab`. Lexicon words missing from the
    /// vocabulary put their mass on `<unk>`.
    pub fn to_rule_tensors(&self, vocab: &Vocab) -> Result<RuleTensors> {
        let nt = self.nonterminals.len();
        let pt = self.preterminals.len();
        let s = nt + pt;
        let v = vocab.len();
        let ln = |p: f64| if p > 0.0 { p.ln() } else { LOG_ZERO };
        let sizes = GrammarSizes::new(nt, pt, v)?;
        let root = self.start.iter().map(|&p| ln(p)).collect();
        let mut binary = vec![0.0; nt * s * s];
        let sym = |c: Sym| match c {
            Sym::Nt(i) => i,
            Sym::Pt(i) => nt + i,
        };
        for r in &self.rules {
            binary[(r.lhs * s + sym(r.left)) * s + sym(r.right)] += r.prob;
        }
        let binary = binary.into_iter().map(ln).collect();
        let mut lexical = vec![0.0; pt * v];
        for (t, lex) in self.lexicon.iter().enumerate() {
            for (w, p) in lex {
                lexical[t * v + vocab.id(w)] += p;
            }
        }
        RuleTensors::new(sizes, root, binary, lexical.into_iter().map(ln).collect())
    }

    fn pick<R: Rng + ?Sized>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.enumerate() {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// One derivation; gives up past `max_nodes` binary expansions.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_nodes: usize) -> Option<Derivation> {
        let a = Self::pick(rng, self.start.iter().copied());
        let mut d = Derivation::default();
        self.expand(rng, Sym::Nt(a), &mut d, max_nodes)?;
        Some(d)
    }

    fn expand<R: Rng + ?Sized>(&self, rng: &mut R, sym: Sym, d: &mut Derivation, budget: usize) -> Option<Span> {
        match sym {
            Sym::Pt(t) => {
                let k = Self::pick(rng, self.lexicon[t].iter().map(|(_, p)| *p));
                let i = d.tokens.len();
                d.tokens.push(self.lexicon[t][k].0.clone());
                d.tags.push(t);
                Some((i, i))
            }
            Sym::Nt(a) => {
                if d.rules_used.len() >= budget {
                    return None;
                }
                let idx: Vec<usize> = (0..self.rules.len()).filter(|&r| self.rules[r].lhs == a).collect();
                let k = idx[Self::pick(rng, idx.iter().map(|&r| self.rules[r].prob))];
                d.rules_used.push(k);
                let (left, right) = (self.rules[k].left, self.rules[k].right);
                let (i, _) = self.expand(rng, left, d, budget)?;
                let (_, j) = self.expand(rng, right, d, budget)?;
                d.constituents.push(((i, j), a));
                Some((i, j))
            }
        }
    }
}

/// A sampled sentence with its derivation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Derivation {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    /// Indices into the generator's rule list, in expansion order.
    pub rules_used: Vec<usize>,
    /// `(span, nonterminal)` of every binary node, innermost first.
    pub constituents: Vec<(Span, usize)>,
}

impl Derivation {
    pub fn gold(&self, g: &GeneratorGrammar) -> Result<GoldTree> {
        let mut labels: BTreeMap<Span, Vec<String>> = BTreeMap::new();
        for &(s, a) in &self.constituents {
            labels.entry(s).or_default().push(g.nonterminals[a].clone());
        }
        let tree = ParseTree::new(self.tokens.len(), labels.keys().copied())?.with_labels(labels);
        Ok(GoldTree {
            tokens: self.tokens.clone(),
            tree,
        })
    }
}

/// Pseudo-expert: frames are noisy word-embedding means of the gold
/// constituents bearing one of `labels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthExpert {
    pub name: String,
    pub category: Category,
    pub dim: usize,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub noise: f64,
    pub seed: u64,
    pub experts: Vec<SynthExpert>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let e = |name: &str, category, dim, labels: &[&str]| SynthExpert {
            name: name.into(),
            category,
            dim,
            labels: labels.iter().map(|s| s.to_string()).collect(),
        };
        SynthConfig {
            train_sentences: 500,
            test_sentences: 100,
            max_len: 19,
            min_len: 3,
            noise: 0.1,
            seed: 0,
            experts: vec![
                e("syn_object", Category::Object, 16, &["NP"]),
                e("syn_action", Category::Action, 16, &["VP"]),
                e("syn_scene", Category::Scene, 8, &["S"]),
                e("syn_audio", Category::Audio, 8, &["PP"]),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub entries: Vec<CorpusEntry>,
    pub gold: Vec<GoldTree>,
    pub features: FeatureSet,
}

fn word_vector(seed: u64, expert: &str, word: &str, dim: usize) -> Vec<f64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in expert.bytes().chain([0u8]).chain(word.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Samples `train + test` sentences with lengths in `[min_len, max_len]`.
pub fn synth_corpus(g: &GeneratorGrammar, cfg: &SynthConfig) -> Result<SynthData> {
    g.validate()?;
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::input("synthetic length bounds must satisfy 2 <= min_len <= max_len"));
    }
    let decls: Vec<ExpertDecl> = cfg
        .experts
        .iter()
        .map(|e| ExpertDecl::new(&e.name, e.category, e.dim))
        .collect();
    let mut features = FeatureSet::new(decls.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.train_sentences + cfg.test_sentences;
    let mut entries = Vec::with_capacity(total);
    let mut gold = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while entries.len() < total {
        attempts += 1;
        if attempts > 1000 * total.max(1) {
            return Err(Error::input("generator rarely produces sentences in the requested length range"));
        }
        let Some(d) = g.sample(&mut rng, 4 * cfg.max_len) else {
            continue;
        };
        if d.tokens.len() < cfg.min_len || d.tokens.len() > cfg.max_len {
            continue;
        }
        let k = entries.len();
        let tree = d.gold(g)?;
        let vid = format!("v{k:05}");
        let mut present = Vec::new();
        for (e, decl) in cfg.experts.iter().zip(&decls) {
            let mut data = Vec::new();
            let mut frames = 0;
            for &(span, a) in &d.constituents {
                if !e.labels.contains(&g.nonterminals[a]) {
                    continue;
                }
                let mut acc = vec![0.0; e.dim];
                for w in &d.tokens[span.0..=span.1] {
                    for (x, v) in acc.iter_mut().zip(word_vector(cfg.seed, &e.name, w, e.dim)) {
                        *x += v;
                    }
                }
                let width = (span.1 - span.0 + 1) as f64;
                for x in &acc {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push((x / width + cfg.noise * eps) as f32);
                }
                frames += 1;
            }
            if frames > 0 {
                present.push(ExpertFeatures::new(decl, frames, data)?);
            }
        }
        features.insert(&vid, present)?;
        entries.push(CorpusEntry {
            id: format!("s{k:05}"),
            video_id: vid,
            tokens: d.tokens.clone(),
            split: if k < cfg.train_sentences { "train" } else { "test" }.into(),
        });
        gold.push(tree);
    }
    Ok(SynthData {
        entries,
        gold,
        features,
    })
}
