//! Self-verification suites behind `gramfuse oracle-check`: chart kernels
//! against brute-force tree enumeration, and reverse-mode gradients of the
//! training losses against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chartkernel::{inside, oracle, posterior, viterbi_scored, GrammarSizes, RuleTensors};
use crate::compound::{wide_spans, CompoundConfig, CompoundModel};
use crate::dataio::{build_vocab, synth_corpus, GeneratorGrammar, SynthConfig};
use crate::diffcore::{finite_difference_check, FdOptions, FdReport};
use crate::error::{Error, Result};
use crate::grounding::GroundingConfig;
use crate::mmtransformer::{MmTransformer, MmtConfig};
use crate::nn::init_store;
use crate::trainer::{init_params, mean_label_posteriors, ModelSet, Negative, SentenceSample, TrainConfig, Variant};

pub const INSIDE_TOL: f64 = 1e-6;
pub const VITERBI_TOL: f64 = 1e-9;
pub const MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartReport {
    pub instances: usize,
    pub inside_err: f64,
    pub viterbi_err: f64,
    pub marginal_err: f64,
}

impl ChartReport {
    pub fn passed(&self) -> bool {
        self.inside_err <= INSIDE_TOL && self.viterbi_err <= VITERBI_TOL && self.marginal_err <= MARGINAL_TOL
    }
}

fn log_normalized(rng: &mut ChaCha8Rng, len: usize, spread: f64) -> Vec<f64> {
    let row: Vec<f64> = (0..len).map(|_| rng.random_range(-spread..spread)).collect();
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.into_iter().map(|x| x - z).collect()
}

/// Random normalized grammar with 1..=3 nonterminals and preterminals.
pub fn random_grammar(rng: &mut ChaCha8Rng, terminals: usize) -> Result<RuleTensors> {
    let nt = rng.random_range(1..=3);
    let pt = rng.random_range(1..=3);
    let sizes = GrammarSizes::new(nt, pt, terminals)?;
    let s = sizes.symbols();
    let spread = rng.random_range(0.5..3.0);
    let root = log_normalized(rng, nt, spread);
    let binary = (0..nt).flat_map(|_| log_normalized(rng, s * s, spread)).collect();
    let lexical = (0..pt).flat_map(|_| log_normalized(rng, terminals, spread)).collect();
    RuleTensors::new(sizes, root, binary, lexical)
}

/// Inside, Viterbi and span marginals on `instances` random grammars and
/// sentences of 2 to 8 tokens, each compared with exhaustive enumeration.
pub fn chart_suite(instances: usize, seed: u64) -> Result<ChartReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = ChartReport {
        instances,
        inside_err: 0.0,
        viterbi_err: 0.0,
        marginal_err: 0.0,
    };
    for _ in 0..instances {
        let v = rng.random_range(2..=5);
        let rules = random_grammar(&mut rng, v)?;
        let n = rng.random_range(2..=8);
        let sent: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let g = rules.for_sentence(&sent)?;

        let post = posterior(&g, None)?;
        let (brute, _) = oracle::log_likelihood(&g)?;
        r.inside_err = r.inside_err.max((inside(&rules, &sent)?.0 - brute).abs());

        let (score, _) = viterbi_scored(&g)?;
        let best = oracle::best(&g)?.into_iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max);
        r.viterbi_err = r.viterbi_err.max((score - best).abs());

        let want = oracle::span_posteriors(&g)?;
        for i in 0..n {
            for j in i..n {
                r.marginal_err = r.marginal_err.max((post.span_marginal((i, j)) - want[i * n + j]).abs());
            }
        }
    }
    Ok(r)
}

/// One named gradient check.
#[derive(Debug, Clone)]
pub struct GradientCase {
    pub name: &'static str,
    pub report: FdReport,
}

fn grounded_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        vocab_size: 100,
        model: CompoundConfig {
            // one label keeps the detached label posteriors fixed under perturbation
            nonterminals: 1,
            preterminals: 3,
            z_dim: 3,
            state_dim: 6,
            mlp_blocks: 1,
            word_dim: 5,
            encoder_hidden: 5,
        },
        grounding: GroundingConfig {
            span_dim: 4,
            embed_dim: 6,
            word_dim: 4,
            encoder_hidden: 4,
            margin: 0.5,
        },
        fusion: MmtConfig {
            width: 6,
            layers: 1,
            heads: 2,
            ffn: 7,
            dropout: 0.0,
            ..MmtConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Gradient checks at step 1e-3 on the ELBO, the image and video matching
/// terms, and the fused video encoder. `max_entries` bounds the entries
/// sampled per parameter.
pub fn gradient_suite(seed: u64, max_entries: usize) -> Result<Vec<GradientCase>> {
    let opts = FdOptions {
        step: 1e-3,
        max_entries,
        seed,
        ..FdOptions::default()
    };
    let data = synth_corpus(
        &GeneratorGrammar::toy_english(),
        &SynthConfig {
            train_sentences: 4,
            test_sentences: 0,
            max_len: 5,
            seed,
            ..SynthConfig::default()
        },
    )?;
    let experts = &data.features.experts;
    let mut out = Vec::new();

    let cfg = CompoundConfig {
        nonterminals: 2,
        preterminals: 3,
        ..grounded_config(Variant::CPcfg).model
    };
    let vocab = build_vocab(&data.entries, 100)?;
    let toks: Vec<Vec<usize>> = data.entries.iter().map(|e| vocab.encode(&e.tokens)).collect();
    let store = init_store(&CompoundModel::specs(&cfg, vocab.len()), seed)?.cast::<f64>();
    let model = CompoundModel::bind(&store, &cfg, vocab.len())?;
    let eps = vec![0.4, -0.8, 0.1];
    let report = finite_difference_check(&store, |t| Ok(model.elbo(t, &toks[0], &eps)?.loss), &opts)?;
    out.push(GradientCase { name: "elbo", report });

    for (name, variant) in [("image matching", Variant::VcPcfg), ("video matching", Variant::MmcPcfg)] {
        let cfg = grounded_config(variant);
        let store = init_params(&cfg, seed, vocab.len(), experts)?.cast::<f64>();
        let models = ModelSet::bind(&store, &cfg, vocab.len(), experts)?;
        let pool = wide_spans(toks[1].len());
        let nlp = mean_label_posteriors(&models.compound, &store, &toks[1])?;
        let picks: Vec<usize> = (0..wide_spans(toks[0].len()).len()).map(|k| (k * 5 + 1) % pool.len()).collect();
        let video = |k: usize| {
            data.features
                .get(&data.entries[k].video_id)
                .ok_or_else(|| Error::input("synthetic video missing"))
        };
        let sample = SentenceSample {
            tokens: &toks[0],
            video: Some(video(0)?),
            eps: eps.clone(),
            negative: Some(Negative {
                tokens: &toks[1],
                video: video(1)?,
                spans: picks.iter().map(|&p| pool[p]).collect(),
                label_post: picks.iter().map(|&p| nlp[p].clone()).collect(),
            }),
        };
        // joint loss at alpha 1 minus the ELBO alone leaves the matching term
        let report = finite_difference_check(
            &store,
            |t| {
                let joint = models.sentence_loss(t, &sample, 1.0)?.0;
                let elbo = models.sentence_loss(t, &sample, 0.0)?.0;
                t.sub(joint, elbo)
            },
            &opts,
        )?;
        out.push(GradientCase { name, report });
    }

    let fcfg = grounded_config(Variant::MmcPcfg).fusion;
    let store = init_store(&MmTransformer::specs(&fcfg, experts), seed)?.cast::<f64>();
    let fused = MmTransformer::bind(&store, &fcfg, experts)?;
    let video = data
        .features
        .get(&data.entries[2].video_id)
        .ok_or_else(|| Error::input("synthetic video missing"))?;
    let report = finite_difference_check(
        &store,
        |t| {
            let psi = fused.encode(t, video)?;
            let all = t.concat(&psi, 0)?;
            let n = t.shape(all)[0];
            let w = t.constant_vec((0..n).map(|k| ((k * 7 % 11) as f64 - 5.0) / 4.0).collect());
            let p = t.mul(all, w)?;
            Ok(t.sum(p))
        },
        &opts,
    )?;
    out.push(GradientCase {
        name: "fused transformer",
        report,
    });
    Ok(out)
}
