use gramfuse::chartkernel::{oracle, posterior, GrammarSizes, RuleTensors, Span};
use gramfuse::compound::{wide_spans, ChartInput};
use gramfuse::diffcore::{finite_difference_check, FdOptions, ParamStore, Tape, Tensor, Var};
use gramfuse::grounding::{
    combine_similarity, hinge, label_posteriors, matching_loss, span_mixture, GatedEmbed, GroundingConfig,
    GroundingModel, ImageEncoder,
};
use gramfuse::nn::{init_store, Init, Linear, ParamSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn put(s: &mut ParamStore<f64>, name: &str, shape: &[usize], data: Vec<f64>) {
    s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
}

fn values(t: &Tape<'_, f64>, v: Var) -> Vec<f64> {
    t.value(v).to_vec()
}

#[test]
fn single_label_mixture_is_the_label_transform() {
    let mut s = ParamStore::new();
    put(&mut s, "fk.w", &[2, 3], vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.0]);
    put(&mut s, "fk.b", &[3], vec![0.1, 0.2, 0.3]);
    let fk = Linear::bind(&s, "fk", 2, 3, true).unwrap();
    let mut t = Tape::new(&s);
    let h = t.constant_matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let c = span_mixture(&mut t, h, &fk, 1, 3, &[(0, 1), (0, 2)], &[vec![1.0], vec![1.0]]).unwrap();
    // mean rows (2,3) and (3,4)
    let want = [
        2.0 - 3.0 + 0.1,
        1.5 + 0.2,
        4.0 + 0.3,
        3.0 - 4.0 + 0.1,
        2.0 + 0.2,
        6.0 + 0.3,
    ];
    for (g, w) in values(&t, c).iter().zip(want) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn constant_word_states_give_width_independent_means() {
    let mut s = ParamStore::new();
    put(&mut s, "fk.w", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    put(&mut s, "fk.b", &[2], vec![0.0, 0.0]);
    let fk = Linear::bind(&s, "fk", 2, 2, true).unwrap();
    let mut t = Tape::new(&s);
    let h = t.constant_matrix(4, 2, [0.3, -0.7].repeat(4)).unwrap();
    let spans = wide_spans(4);
    let post = vec![vec![1.0]; spans.len()];
    let c = span_mixture(&mut t, h, &fk, 1, 2, &spans, &post).unwrap();
    for row in values(&t, c).chunks(2) {
        assert!((row[0] - 0.3).abs() < 1e-12 && (row[1] + 0.7).abs() < 1e-12);
    }
}

#[test]
fn two_label_mixture_by_hand() {
    // f_1(x) = (x0, x1), f_2(x) = (2 x1, -x0)
    let mut s = ParamStore::new();
    put(&mut s, "fk.w", &[2, 4], vec![1.0, 0.0, 0.0, -1.0, 0.0, 1.0, 2.0, 0.0]);
    put(&mut s, "fk.b", &[4], vec![0.0; 4]);
    let fk = Linear::bind(&s, "fk", 2, 4, true).unwrap();
    let mut t = Tape::new(&s);
    let h = t.constant_matrix(2, 2, vec![1.0, 3.0, 3.0, 1.0]).unwrap();
    let c = span_mixture(&mut t, h, &fk, 2, 2, &[(0, 1)], &[vec![0.25, 0.75]]).unwrap();
    // mean (2, 2): 0.25 (2, 2) + 0.75 (4, -2) = (3.5, -1)
    assert_eq!(values(&t, c), vec![3.5, -1.0]);
}

fn gate_store(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    put(&mut s, "g.w1.w", &[3, 3], w1);
    put(&mut s, "g.w1.b", &[3], b1);
    put(&mut s, "g.w2.w", &[3, 3], w2);
    put(&mut s, "g.w2.b", &[3], b2);
    s
}

#[test]
fn gated_embedding_by_hand() {
    let ln3 = 3f64.ln();
    let s = gate_store(
        vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.5, 0.0],
        vec![0.0; 9],
        vec![0.0, ln3, -ln3],
    );
    let g = GatedEmbed::bind(&s, "g", 3, 3).unwrap();
    let mut t = Tape::new(&s);
    let c = t.constant_vec(vec![1.0, 0.0, -1.0]);
    let (xi, x2) = g.forward(&mut t, c).unwrap();
    // ξ1 = (1, 0.5, -1); gates (1/2, 3/4, 1/4)
    let want = [0.5, 0.375, -0.25];
    let norm = (0.25f64 + 0.140625 + 0.0625).sqrt();
    for (k, w) in want.iter().enumerate() {
        assert!((t.value(x2)[k] - w).abs() < 1e-12);
        assert!((t.value(xi)[k] - w / norm).abs() < 1e-6);
    }
}

#[test]
fn saturated_gate_passes_the_projection_through() {
    let s = gate_store(
        vec![0.4, -1.0, 0.2, 0.0, 0.3, 1.1, -0.5, 0.9, 0.0],
        vec![0.1, 0.0, -0.2],
        vec![0.0; 9],
        vec![30.0; 3],
    );
    let g = GatedEmbed::bind(&s, "g", 3, 3).unwrap();
    let mut t = Tape::new(&s);
    let c = t.constant_vec(vec![0.7, -0.3, 1.5]);
    let (xi, _) = g.forward(&mut t, c).unwrap();
    let x1 = g.w1.forward(&mut t, c).unwrap();
    let x1n = t.l2_normalize(x1);
    for (a, b) in values(&t, xi).iter().zip(values(&t, x1n)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn gated_embedding_is_invariant_to_scaling_the_gated_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = ParamStore::<f64>::new();
    let mut t = Tape::new(&s);
    let v: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let a = t.constant_vec(v.clone());
    let b = t.constant_vec(v.iter().map(|x| x * 7.5).collect());
    let na = t.l2_normalize(a);
    let nb = t.l2_normalize(b);
    for (x, y) in values(&t, na).iter().zip(values(&t, nb)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn three_expert_similarity_by_hand() {
    let s = ParamStore::<f64>::new();
    let mut t = Tape::new(&s);
    let omega = t.constant_matrix(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
    let cos = t.constant_matrix(1, 3, vec![0.5, -0.2, 0.9]).unwrap();
    let o = combine_similarity(&mut t, omega, cos).unwrap();
    assert!((t.value(o)[0] - 0.49).abs() < 1e-12);
}

#[test]
fn hinge_cases() {
    let s = ParamStore::<f64>::new();
    let mut t = Tape::new(&s);
    let mut h = |p: f64, ns: f64, nv: f64, eps: f64| {
        let p = t.constant_vec(vec![p]);
        let a = t.constant_vec(vec![ns]);
        let b = t.constant_vec(vec![nv]);
        let h = hinge(&mut t, p, a, b, eps).unwrap();
        t.value(h)[0]
    };
    assert!((h(0.8, 0.75, 0.3, 0.2) - 0.15).abs() < 1e-12);
    assert_eq!(h(0.9, 0.6, 0.7, 0.2), 0.0);
    assert!((h(0.4, 0.4, 0.4, 0.2) - 0.4).abs() < 1e-12);
}

fn tiny_cfg() -> GroundingConfig {
    GroundingConfig {
        span_dim: 4,
        embed_dim: 3,
        word_dim: 3,
        encoder_hidden: 2,
        margin: 0.2,
    }
}

#[test]
fn one_expert_similarity_is_the_cosine_and_weights_sum_to_one() {
    let cfg = tiny_cfg();
    let s = init_store(&GroundingModel::specs(&cfg, 5, 2, 1), 1).unwrap().cast::<f64>();
    let m = GroundingModel::bind(&s, &cfg, 5, 2, 1).unwrap();
    let mut t = Tape::new(&s);
    let c = t.constant_matrix(2, 4, vec![0.1, 0.5, -0.3, 1.0, 0.9, -0.2, 0.0, 0.4]).unwrap();
    let xi = m.expert_embeddings(&mut t, c).unwrap();
    let psi = t.constant_vec(vec![0.3, -1.0, 0.2]);
    let o = m.similarity(&mut t, c, &xi, &[psi]).unwrap();
    let o = values(&t, o);
    let xv = values(&t, xi[0]);
    let p = [0.3, -1.0, 0.2];
    let pn = (0.09f64 + 1.0 + 0.04).sqrt();
    for r in 0..2 {
        let dot: f64 = (0..3).map(|k| xv[r * 3 + k] * p[k]).sum();
        assert!((o[r] - dot / pn).abs() < 1e-9);
    }

    let s3 = init_store(&GroundingModel::specs(&cfg, 5, 2, 3), 2).unwrap().cast::<f64>();
    let m3 = GroundingModel::bind(&s3, &cfg, 5, 2, 3).unwrap();
    let mut t = Tape::new(&s3);
    let c = t.constant_matrix(2, 4, vec![0.1, 0.5, -0.3, 1.0, 0.9, -0.2, 0.0, 4.0]).unwrap();
    let w = m3.expert_weights(&mut t, c).unwrap();
    for row in t.value(w).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn equal_attention_vectors_give_uniform_weights() {
    let cfg = tiny_cfg();
    let mut s = init_store(&GroundingModel::specs(&cfg, 5, 2, 3), 2).unwrap().cast::<f64>();
    let id = s.id("match.attn.w").unwrap();
    let data = s.get_mut(id).data_mut();
    for r in 0..4 {
        let v = data[r * 3];
        data[r * 3 + 1] = v;
        data[r * 3 + 2] = v;
    }
    let m = GroundingModel::bind(&s, &cfg, 5, 2, 3).unwrap();
    let mut t = Tape::new(&s);
    let c = t.constant_matrix(1, 4, vec![0.4, -1.2, 0.3, 2.0]).unwrap();
    let w = m.expert_weights(&mut t, c).unwrap();
    for x in t.value(w) {
        assert!((x - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn zero_experts_are_rejected() {
    let cfg = tiny_cfg();
    let s = init_store(&GroundingModel::specs(&cfg, 5, 2, 1), 1).unwrap();
    assert!(GroundingModel::bind(&s, &cfg, 5, 2, 0).is_err());
}

/// Rule logits `r`, `b`, `l` as parameters of a tiny grammar.
fn grammar_store(rng: &mut ChaCha8Rng, s: &mut ParamStore<f64>, nt: usize, pt: usize, v: usize) {
    let sym = nt + pt;
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
    put(s, "r", &[nt], draw(nt));
    put(s, "b", &[nt, sym * sym], draw(nt * sym * sym));
    put(s, "l", &[pt, v], draw(pt * v));
}

fn chart_input(t: &mut Tape<'_, f64>, sentence: &[usize]) -> ChartInput {
    let s = t.store();
    let (r, b, l) = (s.id("r").unwrap(), s.id("b").unwrap(), s.id("l").unwrap());
    let r = t.param(r);
    let r = t.log_softmax(r);
    let b = t.param(b);
    let b = t.log_softmax(b);
    let l = t.param(l);
    let l = t.log_softmax(l);
    ChartInput::new(t, r, b, l, sentence).unwrap()
}

fn rules_of(t: &Tape<'_, f64>, nt: usize, pt: usize, v: usize) -> RuleTensors {
    let s = t.store();
    let norm = |name: &str, row: usize| -> Vec<f64> {
        let x = s.get(s.id(name).unwrap()).data();
        x.chunks(row)
            .flat_map(|r| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z = m + r.iter().map(|y| (y - m).exp()).sum::<f64>().ln();
                r.iter().map(move |y| y - z).collect::<Vec<_>>()
            })
            .collect()
    };
    let sym = nt + pt;
    RuleTensors::new(
        GrammarSizes::new(nt, pt, v).unwrap(),
        norm("r", nt),
        norm("b", sym * sym),
        norm("l", v),
    )
    .unwrap()
}

#[test]
fn matching_loss_matches_span_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [3usize, 5, 6] {
        let mut s = ParamStore::new();
        grammar_store(&mut rng, &mut s, 2, 2, 4);
        let sent: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let spans = wide_spans(n);
        let h: Vec<f64> = spans.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        let mut t = Tape::new(&s);
        let input = chart_input(&mut t, &sent);
        let hv = t.constant_vec(h.clone());
        let loss = matching_loss(&mut t, &input, &spans, hv).unwrap();
        let g = rules_of(&t, 2, 2, 4).for_sentence(&sent).unwrap();
        let m = oracle::span_posteriors(&g).unwrap();
        let want: f64 = spans.iter().zip(&h).map(|(&(i, j), x)| m[i * n + j] * x).sum();
        assert!((t.scalar(loss) - want).abs() < 1e-9, "n={n}");
        if n == 3 {
            // m(0,2) = 1 and exactly one of (0,1), (1,2) is a constituent
            assert!((m[2] - 1.0).abs() < 1e-12);
            assert!((m[1] + m[n + 2] - 1.0).abs() < 1e-9);
        }
        let zeros = t.constant_vec(vec![0.0; spans.len()]);
        let z = matching_loss(&mut t, &input, &spans, zeros).unwrap();
        assert_eq!(t.scalar(z), 0.0);
    }
}

fn psi_params(s: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, prefix: &str, m: usize, d: usize) {
    for i in 0..m {
        put(s, &format!("{prefix}{i}"), &[d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
}

fn psi_vars(t: &mut Tape<'_, f64>, prefix: &str, m: usize) -> Vec<Var> {
    (0..m)
        .map(|i| {
            let id = t.store().id(&format!("{prefix}{i}")).unwrap();
            t.param(id)
        })
        .collect()
}

/// Label posteriors of the positive spans and of the chosen negative spans.
/// They enter span vectors as constants, so gradient checks hold them fixed.
type LabelPosts = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn label_posts(s: &ParamStore<f64>, sent: &[usize], neg: &[usize], chosen: &[Span]) -> LabelPosts {
    let mut t = Tape::new(s);
    let a = chart_input(&mut t, sent);
    let b = chart_input(&mut t, neg);
    let pa = posterior(&a.rules, None).unwrap();
    let pb = posterior(&b.rules, None).unwrap();
    (label_posteriors(&pa, &wide_spans(sent.len())), label_posteriors(&pb, chosen))
}

fn chosen_spans(neg: &[usize], pick: &[usize]) -> Vec<Span> {
    let all = wide_spans(neg.len());
    pick.iter().map(|&k| all[k]).collect()
}

/// The full video loss for one positive pair with fixed negatives.
fn video_loss(
    t: &mut Tape<'_, f64>,
    model: &GroundingModel,
    sent: &[usize],
    neg: &[usize],
    chosen: &[Span],
    lp: &LabelPosts,
) -> gramfuse::Result<Var> {
    let m = model.experts;
    let input = chart_input(t, sent);
    let spans = wide_spans(sent.len());
    let reps = model.span_reps(t, sent, &spans, &lp.0)?;
    let neg_reps = model.span_reps(t, neg, chosen, &lp.1)?;
    let psi = psi_vars(t, "psi", m);
    let neg_psi = psi_vars(t, "npsi", m);
    let h = model.span_hinges(t, reps.c, neg_reps.c, &psi, &neg_psi)?;
    matching_loss(t, &input, &spans, h)
}

#[test]
fn video_loss_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = init_store(&GroundingModel::specs(&cfg, 4, 2, 2), 6).unwrap().cast::<f64>();
    grammar_store(&mut rng, &mut s, 2, 2, 4);
    psi_params(&mut s, &mut rng, "psi", 2, 3);
    psi_params(&mut s, &mut rng, "npsi", 2, 3);
    let model = GroundingModel::bind(&s, &cfg, 4, 2, 2).unwrap();
    let sent = [0, 3, 1, 2];
    let neg = [2, 2, 0];
    let chosen = chosen_spans(&neg, &[0, 2, 1, 1, 0, 2]);
    let lp = label_posts(&s, &sent, &neg, &chosen);
    let report = finite_difference_check(
        &s,
        |t| video_loss(t, &model, &sent, &neg, &chosen, &lp),
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn image_loss_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut specs = GroundingModel::specs(&cfg, 4, 2, 1);
    specs.extend(ImageEncoder::specs(5, cfg.embed_dim));
    let mut s = init_store(&specs, 8).unwrap().cast::<f64>();
    grammar_store(&mut rng, &mut s, 2, 2, 4);
    let model = GroundingModel::bind(&s, &cfg, 4, 2, 1).unwrap();
    let enc = ImageEncoder::bind(&s, 5, cfg.embed_dim).unwrap();
    let video: Vec<f32> = vec![0.5, -1.0, 0.25, 2.0, 0.0];
    let other: Vec<f32> = vec![-0.5, 0.75, 1.0, 0.0, 1.5];
    let sent = [1, 0, 3];
    let neg = [2, 1, 1, 0];
    let chosen = [(0, 1), (1, 3), (0, 3)];
    let lp = label_posts(&s, &sent, &neg, &chosen);
    let report = finite_difference_check(
        &s,
        |t| {
            let input = chart_input(t, &sent);
            let spans = wide_spans(3);
            let reps = model.span_reps(t, &sent, &spans, &lp.0)?;
            let nr = model.span_reps(t, &neg, &chosen, &lp.1)?;
            let v = enc.forward(t, &video)?;
            let nv = enc.forward(t, &other)?;
            let h = model.span_hinges(t, reps.c, nr.c, &[v], &[nv])?;
            matching_loss(t, &input, &spans, h)
        },
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn identical_pairs_cost_twice_the_margin_per_unit_marginal() {
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut specs = GroundingModel::specs(&cfg, 4, 2, 1);
    specs.extend(ImageEncoder::specs(3, cfg.embed_dim));
    let mut s = init_store(&specs, 10).unwrap().cast::<f64>();
    grammar_store(&mut rng, &mut s, 2, 2, 4);
    let model = GroundingModel::bind(&s, &cfg, 4, 2, 1).unwrap();
    let enc = ImageEncoder::bind(&s, 3, cfg.embed_dim).unwrap();
    let sent = [0, 1, 2, 3, 1];
    let mut t = Tape::new(&s);
    let input = chart_input(&mut t, &sent);
    let spans = wide_spans(5);
    let post = posterior(&input.rules, None).unwrap();
    let reps = model
        .span_reps(&mut t, &sent, &spans, &label_posteriors(&post, &spans))
        .unwrap();
    let v = enc.forward(&mut t, &[0.2, 0.4, -0.6]).unwrap();
    let h = model.span_hinges(&mut t, reps.c, reps.c, &[v], &[v]).unwrap();
    let loss = matching_loss(&mut t, &input, &spans, h).unwrap();
    let total: f64 = spans.iter().map(|&sp| post.span_marginal(sp)).sum();
    assert!((t.scalar(loss) - 2.0 * 0.2 * total).abs() < 1e-9);
}

#[test]
fn gate_parameter_specs_are_linear_layers() {
    let specs = GatedEmbed::specs("g", 4, 3);
    let names: Vec<&str> = specs.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["g.w1.w", "g.w1.b", "g.w2.w", "g.w2.b"]);
    assert_eq!(specs[1], ParamSpec::new("g.w1.b", &[3], Init::Zeros));
}

proptest! {
    #[test]
    fn gated_embeddings_are_unit_norm(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let cfg = tiny_cfg();
        let s = init_store(&GroundingModel::specs(&cfg, 5, 2, 2), seed).unwrap().cast::<f64>();
        let m = GroundingModel::bind(&s, &cfg, 5, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new(&s);
        let c: Vec<f64> = (0..12).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let c = t.constant_matrix(3, 4, c).unwrap();
        for i in 0..2 {
            let g = GatedEmbed::bind(&s, &format!("gate{i}"), 4, 3).unwrap();
            let (xi, x2) = g.forward(&mut t, c).unwrap();
            for (row, raw) in t.value(xi).chunks(3).zip(t.value(x2).chunks(3)) {
                // saturated gates fall back to the stabilized denominator
                let raw_norm: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if raw_norm >= 1e-6 {
                    prop_assert!((n - 1.0).abs() < 1e-5);
                } else {
                    prop_assert!(n <= 1.0 + 1e-9);
                }
            }
        }
        let w = m.expert_weights(&mut t, c).unwrap();
        for row in t.value(w).chunks(2) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_loss_is_non_negative(seed in any::<u64>()) {
        let cfg = GroundingConfig { margin: 0.0, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = init_store(&GroundingModel::specs(&cfg, 4, 2, 2), seed).unwrap().cast::<f64>();
        grammar_store(&mut rng, &mut s, 2, 2, 4);
        psi_params(&mut s, &mut rng, "psi", 2, 3);
        psi_params(&mut s, &mut rng, "npsi", 2, 3);
        let model = GroundingModel::bind(&s, &cfg, 4, 2, 2).unwrap();
        let mut t = Tape::new(&s);
        let (sent, neg) = ([0, 1, 2, 3], [3, 2, 1]);
        let chosen = chosen_spans(&neg, &[0, 1, 2, 0, 1, 2]);
        let lp = label_posts(&s, &sent, &neg, &chosen);
        let loss = video_loss(&mut t, &model, &sent, &neg, &chosen, &lp).unwrap();
        prop_assert!(t.scalar(loss) >= 0.0);
    }
}
