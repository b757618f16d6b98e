use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gramfuse::chartkernel::ParseTree;
use gramfuse::checks::{chart_suite, gradient_suite};
use gramfuse::dataio::{
    load_features, read_corpus, read_gold_trees, synth_corpus, to_labeled_bracketed, write_corpus, CorpusEntry,
    GeneratorGrammar, GoldTree, Punctuation, SynthConfig, Vocab,
};
use gramfuse::evaluation::{baselines, consistency, evaluate, ModelRuns};
use gramfuse::trainer::{self, run_dir, TrainConfig, TrainedModel, Variant};
use gramfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "gramfuse", version, about = "Compound PCFG induction with video grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Parse sentences with a trained checkpoint, one bracketed tree per line.
    Parse(ParseArgs),
    /// Score predicted trees against gold trees.
    Evaluate(EvalArgs),
    /// Pairwise sentence-F1 between runs, as CSV.
    Consistency(ConsistencyArgs),
    /// Run the brute-force chart and finite-difference gradient suites.
    OracleCheck(OracleArgs),
    /// Write a synthetic corpus, gold trees and features.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Comma-separated expert names to keep.
    #[arg(long, value_delimiter = ',')]
    experts: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines corpus to parse.
    #[arg(long)]
    corpus: PathBuf,
    /// Only parse entries of this split.
    #[arg(long)]
    split: Option<String>,
    /// Vocabulary the caller expects; must equal the checkpoint's.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Training config the checkpoint must agree with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Predicted bracketed trees aligned with the gold file.
    #[arg(long, required_unless_present = "baselines")]
    pred: Option<PathBuf>,
    /// Score left-branching, right-branching and random trees instead.
    #[arg(long)]
    baselines: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labels to report recall for; defaults to the three most frequent.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Also write the table row CSV here.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    model: String,
    /// Report JSON path instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// `MODEL=FILE` with one file of predicted trees per run; repeat per run.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    instances: usize,
    /// Entries checked per parameter in the gradient suite.
    #[arg(long, default_value_t = 8)]
    fd_entries: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML synthetic-corpus config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Generate from a right-branching grammar instead of the English-like one.
    #[arg(long)]
    right_branching: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Parse(a) => cmd_parse(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Consistency(a) => cmd_consistency(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if !a.seeds.is_empty() {
        cfg.seeds = a.seeds.clone();
    }
    if !a.experts.is_empty() {
        cfg.experts = a.experts.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if let Some(m) = a.margin {
        cfg.grounding.margin = m;
    }
    cfg.validate()?;

    let entries = read_corpus(&a.corpus, &Punctuation::default())?;
    let features = match (&a.features, cfg.variant.is_grounded()) {
        (Some(p), true) => Some(load_features(p, Some(&cfg.experts))?),
        (None, true) => {
            return Err(Error::input(format!("{} needs --features", cfg.variant)));
        }
        (_, false) => None,
    };
    mkdir(&a.out)?;
    let runs = trainer::train(&cfg, &entries, features.as_ref(), Some(&a.out))?;
    for run in &runs {
        let dir = run_dir(&a.out, run.manifest.seed);
        run.model.vocab.save(&dir.join("vocab.json"))?;
        let last = run.log.last().map_or(f64::NAN, |r| r.total);
        println!(
            "{}\tseed {}\tepochs {}\tfinal loss {last:.4}",
            dir.display(),
            run.manifest.seed,
            cfg.epochs
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_parse(a: ParseArgs) -> Result<ExitCode> {
    let model = TrainedModel::load(&a.checkpoint)?;
    if let Some(p) = &a.vocab {
        let v = Vocab::load(p)?;
        if v.words() != model.vocab.words() {
            return Err(Error::input(format!(
                "vocabulary mismatch: {} has {} words, the checkpoint {}",
                p.display(),
                v.len(),
                model.vocab.len()
            )));
        }
    }
    if let Some(p) = &a.config {
        let cfg = TrainConfig::load(p)?;
        if cfg.model != model.config.model || cfg.vocab_size != model.config.vocab_size {
            return Err(Error::input(format!(
                "checkpoint was trained with a different model config than {}",
                p.display()
            )));
        }
    }
    let entries: Vec<CorpusEntry> = read_corpus(&a.corpus, &Punctuation::default())?
        .into_iter()
        .filter(|e| a.split.as_ref().is_none_or(|s| &e.split == s))
        .collect();
    let sentences: Vec<Vec<String>> = entries.iter().map(|e| e.tokens.clone()).collect();
    let trees = model.parse_all(&sentences)?;
    let mut text = String::new();
    for (tree, toks) in trees.iter().zip(&sentences) {
        text.push_str(&tree.to_bracketed(toks)?);
        text.push('\n');
    }
    emit(a.out.as_deref(), &text)?;
    Ok(ExitCode::SUCCESS)
}

fn aligned(pred: &[GoldTree], gold: &[GoldTree], what: &Path) -> Result<Vec<ParseTree>> {
    if pred.len() != gold.len() {
        return Err(Error::input(format!(
            "{} has {} trees, gold has {}",
            what.display(),
            pred.len(),
            gold.len()
        )));
    }
    for (k, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.tokens != g.tokens {
            return Err(Error::input(format!(
                "{}: tree {} has different tokens from gold",
                what.display(),
                k + 1
            )));
        }
    }
    Ok(pred.iter().map(|p| p.tree.clone()).collect())
}

fn cmd_evaluate(a: EvalArgs) -> Result<ExitCode> {
    let punct = Punctuation::default();
    let gold = read_gold_trees(&a.gold, &punct)?;
    let gold_trees: Vec<ParseTree> = gold.iter().map(|g| g.tree.clone()).collect();
    let mut rows: Vec<(String, Vec<ParseTree>)> = Vec::new();
    if let Some(p) = &a.pred {
        rows.push((a.model.clone(), aligned(&read_gold_trees(p, &punct)?, &gold, p)?));
    }
    if a.baselines {
        let lengths: Vec<usize> = gold.iter().map(|g| g.tokens.len()).collect();
        let b = baselines(&lengths, a.seed);
        rows.push(("LBranch".into(), b.left));
        rows.push(("RBranch".into(), b.right));
        rows.push(("Random".into(), b.random));
    }
    let mut reports = BTreeMap::new();
    let mut table = String::new();
    for (name, pred) in &rows {
        let r = evaluate(pred, &gold_trees, &a.labels)?;
        let csv = r.table_csv(name);
        if table.is_empty() {
            table.push_str(&csv);
        } else {
            table.push_str(csv.lines().nth(1).unwrap_or_default());
            table.push('\n');
        }
        reports.insert(name.clone(), r);
    }
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(reports.values().next().expect("one report"))?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    emit(a.out.as_deref(), &(json + "\n"))?;
    if let Some(t) = &a.table {
        fs::write(t, &table).map_err(|e| Error::io(t, e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_consistency(a: ConsistencyArgs) -> Result<ExitCode> {
    let punct = Punctuation::default();
    let mut models: Vec<ModelRuns> = Vec::new();
    let mut tokens: Option<Vec<Vec<String>>> = None;
    for spec in &a.runs {
        let (name, file) = spec
            .split_once('=')
            .ok_or_else(|| Error::input(format!("--run expects MODEL=FILE, got {spec}")))?;
        let path = Path::new(file);
        let trees = read_gold_trees(path, &punct)?;
        let toks: Vec<Vec<String>> = trees.iter().map(|t| t.tokens.clone()).collect();
        match &tokens {
            Some(first) if *first != toks => {
                return Err(Error::input(format!("{file} does not cover the same sentences as the first run")));
            }
            None => tokens = Some(toks),
            _ => {}
        }
        let run: Vec<ParseTree> = trees.into_iter().map(|t| t.tree).collect();
        match models.iter_mut().find(|m| m.0 == name) {
            Some(m) => m.1.push(run),
            None => models.push((name.to_string(), vec![run])),
        }
    }
    emit(a.out.as_deref(), &consistency(&models)?.to_csv())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle_check(a: OracleArgs) -> Result<ExitCode> {
    let mut ok = true;
    let c = chart_suite(a.instances, a.seed)?;
    println!(
        "chart\t{} instances\tinside {:.2e}\tviterbi {:.2e}\tmarginals {:.2e}\t{}",
        c.instances,
        c.inside_err,
        c.viterbi_err,
        c.marginal_err,
        verdict(c.passed())
    );
    ok &= c.passed();
    for case in gradient_suite(a.seed, a.fd_entries)? {
        let pass = case.report.passed();
        println!(
            "gradient\t{}\tmax rel err {:.2e}\trefined {}\t{}",
            case.name,
            case.report.max_rel_err(),
            case.report.refined,
            verdict(pass)
        );
        if !pass {
            for w in case.report.params.iter().filter(|w| w.max_rel_err > case.report.tolerance) {
                println!("\t{w:?}");
            }
        }
        ok &= pass;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "ok"
    } else {
        "FAILED"
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.train {
        cfg.train_sentences = n;
    }
    if let Some(n) = a.test {
        cfg.test_sentences = n;
    }
    let grammar = if a.right_branching {
        GeneratorGrammar::right_branching(&["a", "b", "c", "d", "e", "f"], 0.75)
    } else {
        GeneratorGrammar::toy_english()
    };
    let data = synth_corpus(&grammar, &cfg)?;
    mkdir(&a.out)?;
    write_corpus(&a.out.join("corpus.jsonl"), &data.entries)?;
    data.features.write(&a.out.join("features.bin"))?;
    // gold.txt covers every entry, gold_<split>.txt one split each
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for (e, g) in data.entries.iter().zip(&data.gold) {
        let line = to_labeled_bracketed(&g.tree, &g.tokens)? + "\n";
        files.entry("gold.txt".into()).or_default().push_str(&line);
        files.entry(format!("gold_{}.txt", e.split)).or_default().push_str(&line);
    }
    for (name, text) in files {
        let path = a.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    println!(
        "{} sentences, {} videos, {} experts in {}",
        data.entries.len(),
        data.features.videos.len(),
        data.features.experts.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
