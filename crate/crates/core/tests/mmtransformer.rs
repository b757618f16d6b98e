use gramfuse::dataio::{Category, ExpertDecl, ExpertFeatures, FeatureSet, VideoFeatures};
use gramfuse::diffcore::{finite_difference_check, FdOptions, ParamStore, Tape};
use gramfuse::mmtransformer::{chunk_pool, chunk_sizes, sinusoid, MmTransformer, MmtConfig};
use gramfuse::nn::init_store;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> MmtConfig {
    MmtConfig {
        width: 8,
        layers: 2,
        heads: 2,
        ffn: 12,
        dropout: 0.1,
        ..MmtConfig::default()
    }
}

fn decls() -> Vec<ExpertDecl> {
    vec![
        ExpertDecl::new("obj", Category::Object, 5),
        ExpertDecl::new("snd", Category::Audio, 3),
    ]
}

fn frames(rng: &mut ChaCha8Rng, d: &ExpertDecl, n: usize) -> ExpertFeatures {
    let data = (0..n * d.dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    ExpertFeatures::new(d, n, data).unwrap()
}

fn video(seed: u64, lens: &[usize], d: &[ExpertDecl]) -> VideoFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = FeatureSet::new(d.to_vec()).unwrap();
    let present = d
        .iter()
        .zip(lens)
        .filter(|(_, &l)| l > 0)
        .map(|(e, &l)| frames(&mut rng, e, l))
        .collect();
    set.insert("v", present).unwrap();
    set.get("v").unwrap().clone()
}

fn model(cfg: &MmtConfig, d: &[ExpertDecl], seed: u64) -> (ParamStore<f64>, MmTransformer) {
    let s = init_store(&MmTransformer::specs(cfg, d), seed).unwrap().cast::<f64>();
    let m = MmTransformer::bind(&s, cfg, d).unwrap();
    (s, m)
}

#[test]
fn chunk_partitions() {
    assert_eq!(chunk_sizes(16, 8), vec![2; 8]);
    assert_eq!(chunk_sizes(3, 8), vec![1; 3]);
    assert!(chunk_sizes(0, 8).is_empty());
    // partition oracle: chunk k covers [floor-ish boundaries] with remainder first
    for len in 1..40 {
        let sizes = chunk_sizes(len, 8);
        let k = sizes.len();
        assert_eq!(k, len.min(8));
        assert_eq!(sizes.iter().sum::<usize>(), len);
        let mut bounds = vec![0];
        for i in 0..k {
            bounds.push(bounds[i] + len / k + usize::from(i < len % k));
        }
        let oracle: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(sizes, oracle);
    }
    assert_eq!(chunk_sizes(10, 8), vec![2, 2, 1, 1, 1, 1, 1, 1]);
}

#[test]
fn pooling_by_category() {
    let seq: Vec<f32> = (0..16).flat_map(|f| [f as f32, 1.0]).collect();
    let (p, rows) = chunk_pool(&seq, 2, Category::Action, 8);
    assert_eq!(rows, 8);
    for k in 0..8 {
        assert_eq!(p[2 * k], (4 * k + 1) as f32 / 2.0);
        assert_eq!(p[2 * k + 1], 1.0);
    }
    let (g, rows) = chunk_pool(&seq, 2, Category::Speech, 8);
    assert_eq!(rows, 1);
    assert_eq!(g, vec![7.5, 1.0]);
    let constant = vec![0.25f32; 30];
    let (c, rows) = chunk_pool(&constant, 3, Category::Scene, 8);
    assert_eq!(rows, 8);
    assert!(c.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    assert_eq!(chunk_pool(&[], 3, Category::Object, 8).1, 0);
}

#[test]
fn projection_matches_explicit_matmul() {
    let d = vec![ExpertDecl::new("i3d", Category::Action, 400)];
    let cfg = small_cfg();
    let (s, m) = model(&cfg, &d, 1);
    let v = video(2, &[3], &d);
    let mut t = Tape::new(&s);
    let streams = m.project_experts(&mut t, &v).unwrap();
    assert_eq!(streams.len(), 1);
    assert_eq!(t.shape(streams[0].seq), [3, 8]);
    let w = s.get(s.id("proj.i3d.w").unwrap()).data();
    let b = s.get(s.id("proj.i3d.b").unwrap()).data();
    let x = &v.experts[0].data;
    for r in 0..3 {
        for c in 0..8 {
            let want: f64 = b[c] + (0..400).map(|k| x[r * 400 + k] as f64 * w[k * 8 + c]).sum::<f64>();
            assert!((t.value(streams[0].seq)[r * 8 + c] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn missing_expert_projects_to_bias() {
    let d = decls();
    let cfg = small_cfg();
    let (mut s, _) = model(&cfg, &d, 3);
    let id = s.id("proj.snd.b").unwrap();
    s.get_mut(id).data_mut().iter_mut().enumerate().for_each(|(k, x)| *x = k as f64 * 0.1);
    let m = MmTransformer::bind(&s, &cfg, &d).unwrap();
    let v = video(4, &[5, 0], &d);
    let mut t = Tape::new(&s);
    let streams = m.project_experts(&mut t, &v).unwrap();
    assert!(streams[1].missing && !streams[0].missing);
    let bias = s.get(id).data().to_vec();
    assert_eq!(t.value(streams[1].seq), bias.as_slice());
    assert_eq!(t.value(streams[1].avg), bias.as_slice());
}

#[test]
fn fused_output_shape_and_determinism() {
    let d = decls();
    let cfg = small_cfg();
    let (s, m) = model(&cfg, &d, 5);
    let v = video(6, &[11, 4], &d);
    let run = || {
        let mut t = Tape::new(&s);
        let psi = m.encode(&mut t, &v).unwrap();
        psi.iter().map(|&p| t.value(p).to_vec()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|p| p.len() == 8 && p.iter().all(|x| x.is_finite())));
    assert_eq!(a, run());
}

#[test]
fn positional_encodings_break_frame_permutation_symmetry() {
    let d = decls();
    let cfg = small_cfg();
    let (s, m) = model(&cfg, &d, 7);
    let v = video(8, &[3, 2], &d);
    let mut swapped = v.clone();
    let e = &mut swapped.experts[0];
    let (a, b) = e.data.split_at_mut(5);
    a.swap_with_slice(&mut b[..5]);
    let mut t = Tape::new(&s);
    let p1 = m.encode(&mut t, &v).unwrap();
    let p2 = m.encode(&mut t, &swapped).unwrap();
    let diff: f64 = t
        .value(p1[0])
        .iter()
        .zip(t.value(p2[0]))
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn trace_exposes_encodings_and_attention() {
    let d = decls();
    for every in [true, false] {
        let cfg = MmtConfig {
            encodings_every_layer: every,
            ..small_cfg()
        };
        let (s, m) = model(&cfg, &d, 9);
        let v = video(10, &[10, 3], &d);
        let mut t = Tape::new(&s);
        let streams = m.project_experts(&mut t, &v).unwrap();
        let (_, tr) = m.fuse_traced(&mut t, &streams, true).unwrap();
        let tr = tr.unwrap();
        // obj: 8 chunks + avg, snd: global average + avg
        assert_eq!(tr.token_expert, [vec![0; 9], vec![1; 2]].concat());
        assert_eq!(tr.token_position, [(0..9).collect::<Vec<_>>(), vec![0, 1]].concat());
        let e = s.get(s.id("mmt.expert_emb").unwrap()).data();
        let tokens = tr.token_expert.len();
        for (l, added) in tr.added.iter().enumerate() {
            if l > 0 && !every {
                assert!(added.is_empty());
                continue;
            }
            for r in 0..tokens {
                let p = sinusoid(tr.token_position[r], 8);
                for c in 0..8 {
                    assert_eq!(added[r * 8 + c], e[tr.token_expert[r] * 8 + c] + p[c]);
                }
            }
        }
        for layer in &tr.attention {
            assert_eq!(layer.len(), 2);
            for head in layer {
                for row in head.chunks(tokens) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn sinusoid_positions() {
    assert_eq!(sinusoid(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
    let p = sinusoid(3, 4);
    assert!((p[0] - 3f64.sin()).abs() < 1e-15);
    assert!((p[3] - (3.0f64 / 100.0).cos()).abs() < 1e-15);
}

#[test]
fn masking_missing_experts_removes_their_keys() {
    let d = decls();
    let cfg = MmtConfig {
        mask_missing: true,
        ..small_cfg()
    };
    let (s, m) = model(&cfg, &d, 11);
    let v = video(12, &[4, 0], &d);
    let mut t = Tape::new(&s);
    let streams = m.project_experts(&mut t, &v).unwrap();
    let (_, tr) = m.fuse_traced(&mut t, &streams, true).unwrap();
    let tr = tr.unwrap();
    let tokens = tr.token_expert.len();
    for head in tr.attention.iter().flatten() {
        for row in head.chunks(tokens) {
            for (c, &a) in row.iter().enumerate() {
                if tr.token_expert[c] == 1 {
                    assert!(a < 1e-12);
                }
            }
        }
    }
}

#[test]
fn invalid_videos_are_rejected() {
    let d = decls();
    let cfg = small_cfg();
    let (s, m) = model(&cfg, &d, 13);
    let v = video(14, &[0, 0], &d);
    let mut t = Tape::new(&s);
    assert!(m.encode(&mut t, &v).is_err());
    let mut bad = video(14, &[2, 1], &d);
    bad.experts[1].dim = 4;
    let msg = m.encode(&mut t, &bad).unwrap_err().to_string();
    assert!(msg.contains("snd") && msg.contains('3'), "{msg}");
    assert!(MmTransformer::bind(&s, &MmtConfig { heads: 3, ..cfg }, &d).is_err());
}

#[test]
fn fused_gradients_match_finite_differences() {
    let d = vec![
        ExpertDecl::new("a", Category::Object, 2),
        ExpertDecl::new("b", Category::Speech, 3),
    ];
    let cfg = MmtConfig {
        width: 4,
        layers: 2,
        heads: 2,
        ffn: 5,
        dropout: 0.0,
        ..MmtConfig::default()
    };
    let (s, m) = model(&cfg, &d, 15);
    let v = video(16, &[2, 3], &d);
    let weights = [0.3, -1.1, 0.7, 0.2, -0.4, 0.9, 1.3, -0.6];
    let report = finite_difference_check(
        &s,
        |t| {
            let psi = m.encode(t, &v)?;
            let both = t.concat(&psi, 0)?;
            let w = t.constant_vec(weights.to_vec());
            let p = t.mul(both, w)?;
            Ok(t.sum(p))
        },
        &FdOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

proptest! {
    #[test]
    fn pooling_preserves_constant_sequences(len in 1usize..40, value in -5.0f32..5.0, chunked in any::<bool>()) {
        let cat = if chunked { Category::Object } else { Category::Audio };
        let (p, rows) = chunk_pool(&vec![value; len * 2], 2, cat, 8);
        prop_assert_eq!(rows, if chunked { len.min(8) } else { 1 });
        prop_assert!(p.iter().all(|&x| (x - value).abs() < 1e-5));
    }
}
