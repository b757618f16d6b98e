//! Joint training of the grammar and the matching model.

mod optim;

pub use optim::{clip_global_norm, global_norm, Adam};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chartkernel::{posterior, ParseTree, Span};
use crate::compound::{sample_noise, wide_spans, CompoundConfig, CompoundModel};
use crate::dataio::{
    build_vocab, check_references, make_batches, pick_negative, CorpusEntry, ExpertDecl, FeatureSet, VideoFeatures,
    Vocab, MAX_TRAIN_LEN,
};
use crate::diffcore::{read_checkpoint, write_checkpoint, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};
use crate::grounding::{label_posteriors, matching_loss, GroundingConfig, GroundingModel, ImageEncoder};
use crate::mmtransformer::{MmTransformer, MmtConfig};
use crate::nn::{init_store, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "c-pcfg")]
    CPcfg,
    #[serde(rename = "vc-pcfg")]
    VcPcfg,
    #[serde(rename = "mmc-pcfg")]
    MmcPcfg,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CPcfg, Variant::VcPcfg, Variant::MmcPcfg];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CPcfg => "c-pcfg",
            Variant::VcPcfg => "vc-pcfg",
            Variant::MmcPcfg => "mmc-pcfg",
        }
    }

    pub fn is_grounded(self) -> bool {
        self != Variant::CPcfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::input(format!("unknown variant {s:?}; expected c-pcfg, vc-pcfg or mmc-pcfg")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointSelect {
    /// The final epoch.
    Last,
    /// The epoch with the lowest mean training objective.
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Weight of the matching term.
    pub alpha: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip: f64,
    pub seeds: Vec<u64>,
    /// Expert names or categories to keep; empty keeps all.
    pub experts: Vec<String>,
    pub vocab_size: usize,
    /// Training sentences must be shorter than this.
    pub max_len: usize,
    pub checkpoint: CheckpointSelect,
    pub model: CompoundConfig,
    pub grounding: GroundingConfig,
    pub fusion: MmtConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::MmcPcfg,
            lr: 1e-3,
            beta1: 0.75,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 16,
            epochs: 10,
            alpha: 1.0,
            clip: 5.0,
            seeds: vec![0, 1, 2, 3],
            experts: Vec::new(),
            vocab_size: 10_000,
            max_len: MAX_TRAIN_LEN,
            checkpoint: CheckpointSelect::Last,
            model: CompoundConfig::default(),
            grounding: GroundingConfig::default(),
            fusion: MmtConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::input(format!("alpha must be a finite value >= 0, got {}", self.alpha)));
        }
        if self.epochs == 0 {
            return Err(Error::input("epochs must be at least 1"));
        }
        if self.batch < 2 {
            return Err(Error::input("batch must hold at least 2 sentences"));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::input("lr must be positive and betas in [0, 1)"));
        }
        if self.clip < 0.0 {
            return Err(Error::input("clip must be >= 0"));
        }
        if self.max_len < 3 {
            return Err(Error::input("max_len must be at least 3"));
        }
        if self.vocab_size == 0 {
            return Err(Error::input("vocab_size must be positive"));
        }
        if self.grounding.margin < 0.0 {
            return Err(Error::input("margin must be >= 0"));
        }
        self.model.validate()?;
        if self.variant == Variant::MmcPcfg {
            self.fusion.validate()?;
            if self.grounding.embed_dim != self.fusion.width {
                return Err(Error::input(format!(
                    "grounding.embed_dim ({}) must equal fusion.width ({})",
                    self.grounding.embed_dim, self.fusion.width
                )));
            }
        }
        Ok(())
    }
}

/// Video side of the matching model.
#[derive(Debug, Clone)]
pub enum VideoEncoder {
    /// Temporally averaged features, one projected vector.
    Averaged(ImageEncoder),
    /// Per-expert outputs of the fusion transformer.
    Fused(MmTransformer),
}

impl VideoEncoder {
    pub fn encode<F: Real>(&self, t: &mut Tape<'_, F>, video: &VideoFeatures) -> Result<Vec<Var>> {
        match self {
            VideoEncoder::Averaged(e) => Ok(vec![e.forward(t, &video.averaged())?]),
            VideoEncoder::Fused(m) => m.encode(t, video),
        }
    }
}

/// Everything the variant trains. Matching parts are absent without video.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub variant: Variant,
    pub compound: CompoundModel,
    pub grounding: Option<GroundingModel>,
    pub video: Option<VideoEncoder>,
}

impl ModelSet {
    pub fn specs(cfg: &TrainConfig, vocab: usize, experts: &[ExpertDecl]) -> Result<Vec<ParamSpec>> {
        let labels = cfg.model.nonterminals;
        let mut v = CompoundModel::specs(&cfg.model, vocab);
        match cfg.variant {
            Variant::CPcfg => {}
            Variant::VcPcfg => {
                let input = averaged_dim(experts)?;
                v.extend(GroundingModel::specs(&cfg.grounding, vocab, labels, 1));
                v.extend(ImageEncoder::specs(input, cfg.grounding.embed_dim));
            }
            Variant::MmcPcfg => {
                if experts.is_empty() {
                    return Err(Error::input("mmc-pcfg needs at least one expert"));
                }
                v.extend(GroundingModel::specs(&cfg.grounding, vocab, labels, experts.len()));
                v.extend(MmTransformer::specs(&cfg.fusion, experts));
            }
        }
        Ok(v)
    }

    pub fn bind<F: Real>(store: &ParamStore<F>, cfg: &TrainConfig, vocab: usize, experts: &[ExpertDecl]) -> Result<Self> {
        let compound = CompoundModel::bind(store, &cfg.model, vocab)?;
        let labels = cfg.model.nonterminals;
        let (grounding, video) = match cfg.variant {
            Variant::CPcfg => (None, None),
            Variant::VcPcfg => {
                let input = averaged_dim(experts)?;
                (
                    Some(GroundingModel::bind(store, &cfg.grounding, vocab, labels, 1)?),
                    Some(VideoEncoder::Averaged(ImageEncoder::bind(store, input, cfg.grounding.embed_dim)?)),
                )
            }
            Variant::MmcPcfg => (
                Some(GroundingModel::bind(store, &cfg.grounding, vocab, labels, experts.len())?),
                Some(VideoEncoder::Fused(MmTransformer::bind(store, &cfg.fusion, experts)?)),
            ),
        };
        Ok(ModelSet {
            variant: cfg.variant,
            compound,
            grounding,
            video,
        })
    }

    /// `−ELBO + α·s_vid` for one sentence; also returns the two terms.
    pub fn sentence_loss<F: Real>(
        &self,
        t: &mut Tape<'_, F>,
        sample: &SentenceSample<'_>,
        alpha: f64,
    ) -> Result<(Var, f64, f64)> {
        let parts = self.compound.elbo(t, sample.tokens, &sample.eps)?;
        let elbo = t.value(parts.loss)[0].to64();
        let (Some(g), Some(enc), Some(neg)) = (&self.grounding, &self.video, &sample.negative) else {
            return Ok((parts.loss, elbo, 0.0));
        };
        let video = sample
            .video
            .ok_or_else(|| Error::input("grounded variant needs the sentence's video"))?;
        let spans = wide_spans(sample.tokens.len());
        let pos_lp = label_posteriors(&parts.posterior, &spans);
        let reps = g.span_reps(t, sample.tokens, &spans, &pos_lp)?;
        let neg_reps = g.span_reps(t, neg.tokens, &neg.spans, &neg.label_post)?;
        let psi = enc.encode(t, video)?;
        let neg_psi = enc.encode(t, neg.video)?;
        let h = g.span_hinges(t, reps.c, neg_reps.c, &psi, &neg_psi)?;
        let m = matching_loss(t, &parts.chart, &spans, h)?;
        let mv = t.value(m)[0].to64();
        let scaled = t.scale(m, alpha);
        Ok((t.add(parts.loss, scaled)?, elbo, mv))
    }
}

fn averaged_dim(experts: &[ExpertDecl]) -> Result<usize> {
    match experts.iter().map(|e| e.dim).sum() {
        0 => Err(Error::input("vc-pcfg needs at least one expert")),
        d => Ok(d),
    }
}

/// The negative pair drawn for a sentence.
#[derive(Debug, Clone)]
pub struct Negative<'a> {
    pub tokens: &'a [usize],
    pub video: &'a VideoFeatures,
    /// One span of the negative sentence per wide span of the positive one.
    pub spans: Vec<Span>,
    pub label_post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SentenceSample<'a> {
    pub tokens: &'a [usize],
    pub video: Option<&'a VideoFeatures>,
    pub eps: Vec<f64>,
    pub negative: Option<Negative<'a>>,
}

/// All parameters of a fresh model.
pub fn init_params(cfg: &TrainConfig, seed: u64, vocab: usize, experts: &[ExpertDecl]) -> Result<ParamStore<f32>> {
    init_store(&ModelSet::specs(cfg, vocab, experts)?, seed)
}

/// Label posteriors at `z = μ(σ)` for every wide span. Used for negatives,
/// whose span vectors enter the loss as constants.
pub fn mean_label_posteriors<F: Real>(
    model: &CompoundModel,
    store: &ParamStore<F>,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let (mu, _) = model.posterior_mean(store, tokens)?;
    let rules = model.rule_probs(store, &mu)?;
    let post = posterior(&rules.for_sentence(tokens)?, None)?;
    Ok(label_posteriors(&post, &wide_spans(tokens.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub elbo_term: f64,
    pub match_term: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub seed: u64,
    pub experts: Vec<String>,
    pub streams: usize,
    pub vocab_size: usize,
    pub sentences: usize,
    pub checkpoints: Vec<String>,
    pub selected_epoch: usize,
    pub config: TrainConfig,
}

/// A trained run held in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: TrainedModel,
    /// Every trained module, bound to `model.store`.
    pub models: ModelSet,
    /// The feature set the run trained on, after expert selection.
    pub features: Option<FeatureSet>,
    pub log: Vec<LossRecord>,
    pub manifest: RunManifest,
}

impl RunOutcome {
    /// Mean logged values of one epoch (1-based).
    pub fn epoch_mean(&self, epoch: usize) -> Option<LossRecord> {
        epoch_mean(&self.log, epoch)
    }
}

fn epoch_mean(log: &[LossRecord], epoch: usize) -> Option<LossRecord> {
    let rows: Vec<_> = log.iter().filter(|r| r.epoch == epoch).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&LossRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(LossRecord {
        epoch,
        step: rows.len(),
        elbo_term: mean(|r| r.elbo_term),
        match_term: mean(|r| r.match_term),
        total: mean(|r| r.total),
    })
}

/// Worker count: `GF_THREADS` if set, otherwise rayon's default.
pub fn worker_threads() -> usize {
    std::env::var("GF_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts
    parts.iter().fold(0x9e37_79b9_7f4a_7c15u64, |h, &p| {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    })
}

struct Prepared<'a> {
    vocab: Vocab,
    ids: Vec<&'a str>,
    tokens: Vec<Vec<usize>>,
    videos: Vec<Option<&'a VideoFeatures>>,
}

fn prepare<'a>(
    cfg: &TrainConfig,
    entries: &'a [CorpusEntry],
    features: Option<&'a FeatureSet>,
) -> Result<Prepared<'a>> {
    let train: Vec<&CorpusEntry> = entries
        .iter()
        .filter(|e| e.split == "train" && (2..cfg.max_len).contains(&e.tokens.len()))
        .collect();
    if train.len() < 2 {
        return Err(Error::input(format!(
            "need at least 2 training sentences of 2..{} tokens, found {}",
            cfg.max_len,
            train.len()
        )));
    }
    let vocab = build_vocab(entries, cfg.vocab_size)?;
    let videos = match (cfg.variant.is_grounded(), features) {
        (false, _) => vec![None; train.len()],
        (true, None) => return Err(Error::input(format!("{} needs a feature file", cfg.variant))),
        (true, Some(f)) => {
            let owned: Vec<CorpusEntry> = train.iter().map(|e| (*e).clone()).collect();
            check_references(&owned, f)?;
            let videos: Vec<Option<&VideoFeatures>> =
                train.iter().map(|e| f.get(&e.video_id).filter(|v| !v.all_missing())).collect();
            let unusable = videos.iter().filter(|v| v.is_none()).count();
            if unusable > 0 {
                log::warn!("{unusable} sentences have no present expert stream and train without matching");
            }
            videos
        }
    };
    Ok(Prepared {
        ids: train.iter().map(|e| e.id.as_str()).collect(),
        tokens: train.iter().map(|e| vocab.encode(&e.tokens)).collect(),
        vocab,
        videos,
    })
}

fn select_features(cfg: &TrainConfig, features: Option<&FeatureSet>) -> Result<Option<FeatureSet>> {
    match features {
        Some(f) if cfg.variant.is_grounded() && !cfg.experts.is_empty() => Ok(Some(f.subset(&cfg.experts)?)),
        Some(f) if cfg.variant.is_grounded() => Ok(Some(f.clone())),
        _ => Ok(None),
    }
}

fn tag_sentence(e: Error, id: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (sentence {id})")),
        other => other,
    }
}

/// Trains one run. With `out`, writes per-epoch checkpoints, the selected
/// checkpoint as `model.ckpt`, `loss.csv` and `run_manifest.json`.
pub fn train_run(
    cfg: &TrainConfig,
    seed: u64,
    entries: &[CorpusEntry],
    features: Option<&FeatureSet>,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let selected = select_features(cfg, features)?;
    let data = prepare(cfg, entries, selected.as_ref())?;
    let experts: Vec<ExpertDecl> = selected.as_ref().map(|f| f.experts.clone()).unwrap_or_default();
    let vocab = data.vocab.len();
    let mut store = init_params(cfg, seed, vocab, &experts)?;
    let models = ModelSet::bind(&store, cfg, vocab, &experts)?;
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| Error::input(format!("thread pool: {e}")))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let meta_base = serde_json::json!({
        "variant": cfg.variant,
        "seed": seed,
        "config": cfg,
        "experts": experts,
        "vocab": data.vocab.words(),
    });
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let batches = make_batches(data.tokens.len(), cfg.batch, mix(&[seed, epoch as u64]))?;
        for (step, batch) in batches.iter().enumerate() {
            let step = step + 1;
            let rec = pool.install(|| {
                train_step(cfg, &models, &mut store, &mut adam, &data, batch, [seed, epoch as u64, step as u64])
            })?;
            log.push(LossRecord { epoch, step, ..rec });
        }
        let mean = epoch_mean(&log, epoch).expect("epoch has steps");
        log::info!(
            "{} seed {seed} epoch {epoch}: elbo {:.3} match {:.4} total {:.3}",
            cfg.variant,
            mean.elbo_term,
            mean.match_term,
            mean.total
        );
        if let Some(dir) = out {
            let name = format!("epoch_{epoch:02}.ckpt");
            let mut meta = meta_base.clone();
            meta["epoch"] = epoch.into();
            write_checkpoint(&dir.join(&name), &store, &meta)?;
            checkpoints.push(name);
        }
        if cfg.checkpoint == CheckpointSelect::Best && best.as_ref().is_none_or(|b| mean.total < b.0) {
            best = Some((mean.total, epoch, store.clone()));
        }
    }
    let (selected_epoch, final_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (cfg.epochs, store),
    };
    let manifest = RunManifest {
        variant: cfg.variant,
        seed,
        experts: experts.iter().map(|e| e.name.clone()).collect(),
        streams: experts.len(),
        vocab_size: vocab,
        sentences: data.tokens.len(),
        checkpoints,
        selected_epoch,
        config: cfg.clone(),
    };
    if let Some(dir) = out {
        let mut meta = meta_base.clone();
        meta["epoch"] = selected_epoch.into();
        write_checkpoint(&dir.join("model.ckpt"), &final_store, &meta)?;
        write_loss_csv(&dir.join("loss.csv"), &log)?;
        let path = dir.join("run_manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    }
    let compound = models.compound.clone();
    Ok(RunOutcome {
        models,
        features: selected.clone(),
        model: TrainedModel {
            config: cfg.clone(),
            vocab: data.vocab,
            compound,
            store: final_store,
        },
        log,
        manifest,
    })
}

/// Per-parameter gradients (absent when untouched), ELBO term and matching term.
type SentenceGrads = (Vec<Option<Vec<f32>>>, f64, f64);

fn train_step(
    cfg: &TrainConfig,
    models: &ModelSet,
    store: &mut ParamStore<f32>,
    adam: &mut Adam,
    data: &Prepared<'_>,
    batch: &[usize],
    key: [u64; 3],
) -> Result<LossRecord> {
    let frozen: &ParamStore<f32> = store;
    let grounded = models.grounding.is_some();
    let neg_posts: Vec<Vec<Vec<f64>>> = if grounded {
        batch
            .par_iter()
            .map(|&k| {
                mean_label_posteriors(&models.compound, frozen, &data.tokens[k]).map_err(|e| tag_sentence(e, data.ids[k]))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let results: Vec<Result<SentenceGrads>> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let k = batch[i];
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[key[0], key[1], key[2], i as u64]));
            let eps = sample_noise(&mut rng, cfg.model.z_dim);
            let usable: Vec<usize> = if grounded && data.videos[k].is_some() {
                (0..batch.len()).filter(|&b| data.videos[batch[b]].is_some()).collect()
            } else {
                Vec::new()
            };
            let negative = if usable.len() >= 2 {
                let me = usable.iter().position(|&b| b == i).expect("sentence is usable");
                let j = usable[pick_negative(&mut rng, usable.len(), me)];
                let nk = batch[j];
                let pool = wide_spans(data.tokens[nk].len());
                let picks: Vec<usize> = (0..wide_spans(data.tokens[k].len()).len())
                    .map(|_| rng.random_range(0..pool.len()))
                    .collect();
                Some(Negative {
                    tokens: &data.tokens[nk],
                    video: data.videos[nk].expect("usable negatives carry videos"),
                    spans: picks.iter().map(|&p| pool[p]).collect(),
                    label_post: picks.iter().map(|&p| neg_posts[j][p].clone()).collect(),
                })
            } else {
                None
            };
            let sample = SentenceSample {
                tokens: &data.tokens[k],
                video: data.videos[k],
                eps,
                negative,
            };
            let mut t = Tape::training(frozen, rng.random());
            let (loss, elbo, m) = models
                .sentence_loss(&mut t, &sample, cfg.alpha)
                .map_err(|e| tag_sentence(e, data.ids[k]))?;
            let total = t.value(loss)[0];
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("training loss (sentence {})", data.ids[k])));
            }
            let g = t.backward(loss)?.into_param_grads();
            if !optim::global_norm(&g).is_finite() {
                return Err(Error::NonFinite(format!("gradient (sentence {})", data.ids[k])));
            }
            Ok((g, elbo, m))
        })
        .collect();

    let n = batch.len();
    let mut sum: Vec<Option<Vec<f32>>> = vec![None; frozen.len()];
    let (mut elbo, mut matching) = (0.0, 0.0);
    for r in results {
        let (g, e, m) = r?;
        elbo += e;
        matching += m;
        for (acc, gi) in sum.iter_mut().zip(g) {
            if let Some(gi) = gi {
                match acc {
                    Some(a) => a.iter_mut().zip(&gi).for_each(|(x, y)| *x += *y),
                    None => *acc = Some(gi),
                }
            }
        }
    }
    let inv = 1.0 / n as f32;
    sum.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
    clip_global_norm(&mut sum, cfg.clip);
    adam.step(store, &sum);
    let (elbo, matching) = (elbo / n as f64, matching / n as f64);
    Ok(LossRecord {
        epoch: 0,
        step: 0,
        elbo_term: elbo,
        match_term: matching,
        total: elbo + cfg.alpha * matching,
    })
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,step,elbo_term,match_term,total\n");
    for r in log {
        text.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.step, r.elbo_term, r.match_term, r.total));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::Syntax {
            path: path.display().to_string(),
            line: no + 1,
            msg: "expected epoch,step,elbo_term,match_term,total".into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(LossRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            elbo_term: f[2].parse().map_err(|_| bad())?,
            match_term: f[3].parse().map_err(|_| bad())?,
            total: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// One run per seed in `cfg.seeds`, each under `out/seed_<seed>` when `out` is given.
pub fn train(
    cfg: &TrainConfig,
    entries: &[CorpusEntry],
    features: Option<&FeatureSet>,
    out: Option<&Path>,
) -> Result<Vec<RunOutcome>> {
    if cfg.seeds.is_empty() {
        return Err(Error::input("no seeds given"));
    }
    cfg.seeds
        .iter()
        .map(|&s| {
            let dir = out.map(|d| run_dir(d, s));
            train_run(cfg, s, entries, features, dir.as_deref())
        })
        .collect()
}

pub fn run_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// A grammar ready for parsing.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub compound: CompoundModel,
    pub store: ParamStore<f32>,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let (store, meta) = read_checkpoint(path)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        let config: TrainConfig =
            serde_json::from_value(meta.get("config").cloned().ok_or_else(|| bad("no config in checkpoint"))?)
                .map_err(|e| bad(&format!("config: {e}")))?;
        let words: Vec<String> =
            serde_json::from_value(meta.get("vocab").cloned().ok_or_else(|| bad("no vocabulary in checkpoint"))?)
                .map_err(|e| bad(&format!("vocabulary: {e}")))?;
        let vocab = Vocab::from_words(words)?;
        let compound = CompoundModel::bind(&store, &config.model, vocab.len())
            .map_err(|e| bad(&format!("checkpoint does not match its config: {e}")))?;
        Ok(TrainedModel {
            config,
            vocab,
            compound,
            store,
        })
    }

    /// Viterbi tree under `z = μ(σ)`; single tokens give the trivial tree.
    pub fn parse(&self, tokens: &[String]) -> Result<ParseTree> {
        match tokens.len() {
            0 => Err(Error::input("cannot parse an empty sentence")),
            1 => ParseTree::new(1, [(0, 0)]),
            _ => Ok(self.compound.parse(&self.store, &self.vocab.encode(tokens))?.1),
        }
    }

    pub fn parse_all(&self, sentences: &[Vec<String>]) -> Result<Vec<ParseTree>> {
        sentences.par_iter().map(|s| self.parse(s)).collect()
    }
}
