//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gramfuse::chartkernel::ParseTree;
use gramfuse::checks::{chart_suite, gradient_suite};
use gramfuse::compound::{sample_noise, CompoundConfig};
use gramfuse::dataio::{parse_gold_text, synth_corpus, GeneratorGrammar, Punctuation, SynthConfig, SynthData};
use gramfuse::diffcore::Tape;
use gramfuse::evaluation::{baselines, consistency, f1_scores, label_recall, pairwise_s_f1, ModelRuns};
use gramfuse::grounding::GroundingConfig;
use gramfuse::mmtransformer::MmtConfig;
use gramfuse::trainer::{init_params, train_run, ModelSet, TrainConfig, Variant};

const CHART_INSTANCES: usize = 200;
const CHART_BUDGET: Duration = Duration::from_secs(120);
const FD_TOL: f64 = 1e-3;
const FD_ENTRIES: usize = 8;
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const RULE_TOL: f64 = 1e-5;
const OMEGA_TOL: f64 = 1e-6;
const NORM_TOL: f64 = 1e-5;
const INDUCTION_SEEDS: [u64; 4] = [0, 1, 2, 3];
const INDUCTION_MARGIN: f64 = 10.0;
const INDUCTION_BUDGET: Duration = Duration::from_secs(30 * 60);
const SYMMETRY_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let r = chart_suite(CHART_INSTANCES, 2024).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(
        r.passed() && took < CHART_BUDGET,
        format!(
            "{} instances, inside {:.1e}, viterbi {:.1e}, marginals {:.1e}, {:.1}s",
            r.instances,
            r.inside_err,
            r.viterbi_err,
            r.marginal_err,
            took.as_secs_f64()
        ),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cases = gradient_suite(0, FD_ENTRIES).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let mut ok = took < GRADIENT_BUDGET && cases.len() == 4;
    let mut parts = Vec::new();
    for c in &cases {
        ok &= c.report.tolerance <= FD_TOL && c.report.passed();
        parts.push(format!(
            "{} {:.1e} (refined {})",
            c.name,
            c.report.max_rel_err(),
            c.report.refined
        ));
    }
    parts.push(format!("{:.1}s", took.as_secs_f64()));
    ensure(ok, parts.join(", "))
}

/// The configuration the induction runs use.
fn induction_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 10,
        batch: 4,
        alpha: 1.0,
        lr: 1e-3,
        vocab_size: 100,
        model: CompoundConfig {
            nonterminals: 10,
            preterminals: 12,
            z_dim: 8,
            state_dim: 64,
            mlp_blocks: 1,
            word_dim: 32,
            encoder_hidden: 32,
        },
        grounding: GroundingConfig {
            span_dim: 16,
            embed_dim: 16,
            word_dim: 16,
            encoder_hidden: 16,
            margin: 0.2,
        },
        fusion: MmtConfig {
            width: 16,
            layers: 1,
            heads: 2,
            ffn: 32,
            dropout: 0.1,
            ..MmtConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn normalization_invariants(data: &SynthData) -> Outcome {
    let cfg = induction_config(Variant::MmcPcfg);
    let experts = &data.features.experts;
    let vocab = 100;
    let store = init_params(&cfg, 7, vocab, experts).map_err(|e| e.to_string())?;
    let models = ModelSet::bind(&store, &cfg, vocab, experts).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut rule_err = 0.0f64;
    for _ in 0..10 {
        let z = sample_noise(&mut rng, cfg.model.z_dim);
        let rules = models.compound.rule_probs(&store, &z).map_err(|e| e.to_string())?;
        rule_err = rule_err.max(rules.max_normalization_error());
    }

    let g = models.grounding.as_ref().ok_or("no grounding model")?;
    let rows = 12;
    let d = cfg.grounding.span_dim;
    let (mut omega_err, mut norm_err) = (0.0f64, 0.0f64);
    let mut t = Tape::new(&store);
    let c: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let c = t.constant_matrix(rows, d, c).map_err(|e| e.to_string())?;
    let w = g.expert_weights(&mut t, c).map_err(|e| e.to_string())?;
    for row in t.value(w).chunks(experts.len()) {
        omega_err = omega_err.max((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
    }
    for xi in g.expert_embeddings(&mut t, c).map_err(|e| e.to_string())? {
        for row in t.value(xi).chunks(cfg.grounding.embed_dim) {
            let n = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            norm_err = norm_err.max((n - 1.0).abs());
        }
    }
    ensure(
        rule_err <= RULE_TOL && omega_err <= OMEGA_TOL && norm_err <= NORM_TOL,
        format!("rule rows {rule_err:.1e}, expert weights {omega_err:.1e}, gated norms {norm_err:.1e}"),
    )
}

fn trees(text: &str) -> Result<Vec<ParseTree>, String> {
    parse_gold_text(text, &Punctuation::default())
        .map(|g| g.into_iter().map(|t| t.tree).collect())
        .map_err(|(line, e)| format!("line {line}: {e}"))
}

fn metric_fidelity(data: &SynthData) -> Outcome {
    let gold = trees("(S (NP a b) (VP c (NP d e)))\n")?;
    let pred = trees("(X a (X b (X c (X d e))))\n")?;
    let s = f1_scores(&pred, &gold).map_err(|e| e.to_string())?;
    let hand = (s.true_positives, s.predicted_spans, s.gold_spans) == (2, 3, 3)
        && format!("{:.1} {:.1}", s.c_f1, s.s_f1) == "66.7 66.7";

    let rb = synth_corpus(
        &GeneratorGrammar::right_branching(&["a", "b", "c", "d", "e", "f"], 0.75),
        &SynthConfig {
            train_sentences: 200,
            test_sentences: 0,
            ..SynthConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let rb_gold: Vec<ParseTree> = rb.gold.iter().map(|g| g.tree.clone()).collect();
    let lens: Vec<usize> = rb_gold.iter().map(|t| t.len()).collect();
    let r = f1_scores(&baselines(&lens, 0).right, &rb_gold).map_err(|e| e.to_string())?;
    let perfect = r.c_f1 == 100.0 && r.s_f1 == 100.0;

    let gold: Vec<ParseTree> = data.gold.iter().map(|g| g.tree.clone()).collect();
    let lens: Vec<usize> = gold.iter().map(|t| t.len()).collect();
    let b = baselines(&lens, 0);
    let vp = |p: &[ParseTree]| label_recall(p, &gold, "VP").ok().flatten().unwrap_or(f64::NAN);
    let (right_vp, left_vp) = (vp(&b.right), vp(&b.left));
    ensure(
        hand && perfect && right_vp > left_vp,
        format!(
            "example {:.1}/{:.1}, right-branching gold {:.1}/{:.1}, VP recall RBranch {right_vp:.1} > LBranch {left_vp:.1}",
            s.c_f1, s.s_f1, r.c_f1, r.s_f1
        ),
    )
}

/// Test-split predictions of every induction run, kept for the consistency check.
struct Induction {
    runs: Vec<ModelRuns>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn induction_signal(data: &SynthData, keep: &mut Option<Induction>) -> Outcome {
    let start = Instant::now();
    let test: Vec<usize> = (0..data.entries.len()).filter(|&k| data.entries[k].split == "test").collect();
    let gold: Vec<ParseTree> = test.iter().map(|&k| data.gold[k].tree.clone()).collect();
    let sentences: Vec<Vec<String>> = test.iter().map(|&k| data.entries[k].tokens.clone()).collect();
    let lens: Vec<usize> = gold.iter().map(|t| t.len()).collect();

    let mut runs = Vec::new();
    let mut means = Vec::new();
    for variant in [Variant::MmcPcfg, Variant::CPcfg] {
        let cfg = induction_config(variant);
        let mut preds = Vec::new();
        let mut scores = Vec::new();
        for seed in INDUCTION_SEEDS {
            let out = train_run(&cfg, seed, &data.entries, Some(&data.features), None).map_err(|e| e.to_string())?;
            let p = out.model.parse_all(&sentences).map_err(|e| e.to_string())?;
            scores.push(f1_scores(&p, &gold).map_err(|e| e.to_string())?.s_f1);
            preds.push(p);
        }
        means.push(mean(&scores));
        runs.push((variant.name().to_string(), preds));
    }
    let random: Vec<f64> = INDUCTION_SEEDS
        .iter()
        .map(|&s| f1_scores(&baselines(&lens, s).random, &gold).map(|r| r.s_f1))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let random = mean(&random);
    let took = start.elapsed();
    *keep = Some(Induction { runs });
    let (mmc, cp) = (means[0], means[1]);
    ensure(
        mmc >= random + INDUCTION_MARGIN && mmc >= cp && took < INDUCTION_BUDGET,
        format!(
            "S-F1 means over {} seeds: MMC-PCFG {mmc:.1}, C-PCFG {cp:.1}, Random {random:.1}, {:.0}s",
            INDUCTION_SEEDS.len(),
            took.as_secs_f64()
        ),
    )
}

fn small_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        epochs: 1,
        batch: 4,
        vocab_size: 100,
        model: CompoundConfig {
            nonterminals: 3,
            preterminals: 4,
            z_dim: 4,
            state_dim: 8,
            mlp_blocks: 1,
            word_dim: 8,
            encoder_hidden: 8,
        },
        ..TrainConfig::default()
    }
}

fn consistency_protocol(data: &SynthData, induction: Option<&Induction>) -> Outcome {
    let train: Vec<_> = data.entries.iter().filter(|e| e.split == "train").take(60).cloned().collect();
    let sentences: Vec<Vec<String>> = data.entries.iter().filter(|e| e.split == "test").map(|e| e.tokens.clone()).collect();
    let cfg = small_config(Variant::CPcfg);
    let mut same = Vec::new();
    for _ in 0..4 {
        let out = train_run(&cfg, 11, &train, None, None).map_err(|e| e.to_string())?;
        same.push(out.model.parse_all(&sentences).map_err(|e| e.to_string())?);
    }
    let m = consistency(&[("same".to_string(), same)]).map_err(|e| e.to_string())?;
    let identical = m.entries[0][0] == Some(100.0);

    let runs = &induction.ok_or("induction runs unavailable")?.runs;
    let m = consistency(runs).map_err(|e| e.to_string())?;
    let mut asym = 0.0f64;
    for a in 0..m.models.len() {
        for b in 0..m.models.len() {
            let (x, y) = (m.entries[a][b].ok_or("missing entry")?, m.entries[b][a].ok_or("missing entry")?);
            asym = asym.max((x - y).abs());
        }
    }
    let all: Vec<&Vec<ParseTree>> = runs.iter().flat_map(|r| &r.1).collect();
    for x in &all {
        for y in &all {
            let f = pairwise_s_f1(x, y).map_err(|e| e.to_string())?.ok_or("empty comparison")?;
            let g = pairwise_s_f1(y, x).map_err(|e| e.to_string())?.ok_or("empty comparison")?;
            asym = asym.max((f - g).abs());
        }
    }
    ensure(
        identical && asym <= SYMMETRY_TOL,
        format!(
            "4 identical runs self-F1 {}, largest asymmetry over {} seeded runs {asym:.1e}",
            if identical { "100.0" } else { "below 100" },
            all.len()
        ),
    )
}

const CLI_CONFIG: &str = r#"
epochs = 1
batch = 4
vocab_size = 100

[model]
nonterminals = 3
preterminals = 4
z_dim = 4
state_dim = 8
mlp_blocks = 1
word_dim = 8
encoder_hidden = 8

[grounding]
span_dim = 6
embed_dim = 8
word_dim = 6
encoder_hidden = 6

[fusion]
width = 8
layers = 1
heads = 2
ffn = 12
"#;

fn cli(args: &[&str]) -> Result<Output, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_gramfuse"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!("gramfuse {}: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

struct Workspace {
    _dir: tempfile::TempDir,
}

fn workspace() -> Result<(Workspace, std::path::PathBuf), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().to_path_buf();
    fs::write(root.join("config.toml"), CLI_CONFIG).map_err(|e| e.to_string())?;
    cli(&["synth", "--out", p(&root.join("data")), "--train", "40", "--test", "10", "--seed", "3"])?;
    Ok((Workspace { _dir: dir }, root))
}

fn train_cli(root: &Path, out: &str, extra: &[&str]) -> Result<Output, String> {
    let (config, corpus, feats) = (root.join("config.toml"), root.join("data/corpus.jsonl"), root.join("data/features.bin"));
    let out = root.join(out);
    let mut args = vec![
        "train",
        "--config",
        p(&config),
        "--corpus",
        p(&corpus),
        "--features",
        p(&feats),
        "--out",
        p(&out),
    ];
    args.extend_from_slice(extra);
    cli(&args)
}

fn determinism() -> Outcome {
    let (_w, root) = workspace()?;
    for out in ["a", "b"] {
        train_cli(&root, out, &["--variant", "mmc-pcfg", "--seed", "9"])?;
    }
    let read = |rel: &str| fs::read(root.join(rel)).map_err(|e| format!("{rel}: {e}"));
    let ckpt = read("a/seed_9/model.ckpt")? == read("b/seed_9/model.ckpt")?;
    let log = read("a/seed_9/loss.csv")? == read("b/seed_9/loss.csv")?;
    let corpus = root.join("data/corpus.jsonl");
    let parse = |run: &str| {
        let ckpt = root.join(run).join("seed_9/model.ckpt");
        cli(&["parse", "--checkpoint", p(&ckpt), "--corpus", p(&corpus)]).map(|o| o.stdout)
    };
    let (pa, pb) = (parse("a")?, parse("b")?);
    let parses = pa == pb && pa == parse("a")? && !pa.is_empty();
    ensure(
        ckpt && log && parses,
        format!("checkpoints identical {ckpt}, loss logs identical {log}, parses identical {parses}"),
    )
}

fn ablation_plumbing() -> Outcome {
    let (_w, root) = workspace()?;
    let gold = root.join("data/gold.txt");
    let corpus = root.join("data/corpus.jsonl");
    let runs = [
        ("full", None),
        ("video", Some("syn_object,syn_action,syn_scene")),
        ("no_video", Some("syn_audio")),
    ];
    let mut streams = Vec::new();
    let mut report = Vec::new();
    for (name, experts) in runs {
        let mut extra = vec!["--variant", "mmc-pcfg", "--seed", "2"];
        if let Some(e) = experts {
            extra.extend(["--experts", e]);
        }
        train_cli(&root, name, &extra)?;
        let dir = root.join(name).join("seed_2");
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let n = manifest["streams"].as_u64().ok_or("manifest lacks streams")?;
        let parsed = cli(&["parse", "--checkpoint", p(&dir.join("model.ckpt")), "--corpus", p(&corpus)])?;
        let pred = root.join(format!("{name}.txt"));
        fs::write(&pred, &parsed.stdout).map_err(|e| e.to_string())?;
        let eval = cli(&["evaluate", "--gold", p(&gold), "--pred", p(&pred)])?;
        let r: serde_json::Value = serde_json::from_slice(&eval.stdout).map_err(|e| e.to_string())?;
        let s_f1 = r["s_f1"].as_f64().ok_or("evaluation lacks s_f1")?;
        streams.push(n);
        report.push(format!("{name} {n} streams S-F1 {s_f1:.1}"));
    }
    ensure(streams[1] < streams[0] && streams[2] < streams[0], report.join(", "))
}

fn main() {
    let data = synth_corpus(&GeneratorGrammar::toy_english(), &SynthConfig::default()).expect("synthetic corpus");
    let mut induction = None;
    let mut failed = 0;
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match out {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {n}. {name}: {detail}");
    };
    check(1, "oracle equivalence", &mut oracle_equivalence);
    check(2, "gradient integrity", &mut gradient_integrity);
    check(3, "normalization invariants", &mut || normalization_invariants(&data));
    check(4, "metric fidelity", &mut || metric_fidelity(&data));
    check(5, "induction signal", &mut || induction_signal(&data, &mut induction));
    check(6, "consistency protocol", &mut || consistency_protocol(&data, induction.as_ref()));
    check(7, "determinism", &mut determinism);
    check(8, "ablation plumbing", &mut ablation_plumbing);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
