use gramfuse::chartkernel::{
    forward_mode_marginals, inside, oracle, posterior, span_marginals, viterbi, viterbi_scored, GrammarSizes,
    ParseTree, RuleTensors, SentenceRules, SpanWeights, LOG_ZERO,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalize(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter_mut().for_each(|x| *x -= z);
}

fn random_rules(rng: &mut ChaCha8Rng, nt: usize, pt: usize, v: usize, spread: f64) -> RuleTensors {
    let sizes = GrammarSizes::new(nt, pt, v).unwrap();
    let s = sizes.symbols();
    let mut draw = |len: usize| {
        let mut row: Vec<f64> = (0..len).map(|_| rng.random_range(-spread..spread)).collect();
        normalize(&mut row);
        row
    };
    let root = draw(nt);
    let binary: Vec<f64> = (0..nt).flat_map(|_| draw(s * s)).collect();
    let lexical: Vec<f64> = (0..pt).flat_map(|_| draw(v)).collect();
    RuleTensors::new(sizes, root, binary, lexical).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

#[test]
fn inside_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 3..=8 {
        for _ in 0..4 {
            let rules = random_rules(&mut rng, 3, 2, 5, 2.0);
            let sent = random_sentence(&mut rng, n, 5);
            let (lp, _) = inside(&rules, &sent).unwrap();
            let (brute, _) = oracle::log_likelihood(&rules.for_sentence(&sent).unwrap()).unwrap();
            assert!((lp - brute).abs() < 1e-6, "n={n}: {lp} vs {brute}");
        }
    }
}

#[test]
fn marginals_match_enumeration_and_forward_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in 4..=8 {
        let rules = random_rules(&mut rng, 2, 3, 4, 2.0);
        let sent = random_sentence(&mut rng, n, 4);
        let g = rules.for_sentence(&sent).unwrap();
        let chart = span_marginals(&rules, &sent).unwrap();
        let brute = oracle::span_posteriors(&g).unwrap();
        let fwd = forward_mode_marginals(&g).unwrap();
        for i in 0..n {
            for j in i..n {
                let m = chart.span_marginal(i, j).unwrap();
                assert!((m - brute[i * n + j]).abs() < 1e-6, "({i},{j}) {m} vs {}", brute[i * n + j]);
                assert!((m - fwd[i * n + j]).abs() < 1e-6);
            }
        }
        assert!((chart.span_marginal(0, n - 1).unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn three_tokens_have_exactly_one_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rules = random_rules(&mut rng, 2, 2, 3, 1.0);
    let chart = span_marginals(&rules, &[0, 1, 2]).unwrap();
    let total = chart.span_marginal(0, 1).unwrap() + chart.span_marginal(1, 2).unwrap();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn viterbi_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for n in 4..=8 {
        for _ in 0..3 {
            let rules = random_rules(&mut rng, 3, 2, 5, 3.0);
            let sent = random_sentence(&mut rng, n, 5);
            let g = rules.for_sentence(&sent).unwrap();
            let (score, tree) = viterbi_scored(&g).unwrap();
            let mut scored = oracle::best(&g).unwrap();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            assert!((score - scored[0].1).abs() < 1e-9);
            if scored[0].1 - scored[1].1 > 1e-6 {
                assert_eq!(tree, scored[0].0);
            }
        }
    }
}

#[test]
fn rigged_grammar_decodes_right_branching() {
    // A -> T A dominates, A -> T T closes
    let sizes = GrammarSizes::new(1, 1, 3).unwrap();
    let mut binary = vec![LOG_ZERO; 4];
    // (B, C) order: AA, AT, TA, TT
    binary[2] = 0.9f64.ln();
    binary[3] = 0.05f64.ln();
    binary[0] = 0.05f64.ln();
    let rules = RuleTensors::new(sizes, vec![0.0], binary, vec![-(3f64).ln(); 3]).unwrap();
    for n in 2..=9 {
        let sent: Vec<usize> = (0..n).map(|i| i % 3).collect();
        assert_eq!(viterbi(&rules, &sent).unwrap(), ParseTree::right_branching(n));
    }
}

#[test]
fn unparseable_sentence_errors_in_viterbi() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut rules = random_rules(&mut rng, 2, 2, 3, 1.0);
    rules.lexical[2] = LOG_ZERO;
    rules.lexical[5] = LOG_ZERO;
    let (lp, _) = inside(&rules, &[0, 2, 1]).unwrap();
    assert_eq!(lp, LOG_ZERO);
    assert!(viterbi(&rules, &[0, 2, 1]).is_err());
}

#[test]
fn counts_match_derivation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for n in 2..=5 {
        let rules = random_rules(&mut rng, 2, 2, 3, 1.5);
        let sent = random_sentence(&mut rng, n, 3);
        let g = rules.for_sentence(&sent).unwrap();
        let post = posterior(&g, None).unwrap();
        let (root, binary, emit) = oracle::expected_counts(&g).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close(&post.root_counts, &root));
        assert!(close(&post.binary_counts, &binary));
        assert!(close(&post.emit_counts, &emit));
    }
}

fn perturbed(g: &SentenceRules, family: usize, idx: usize, d: f64) -> SentenceRules {
    let (mut r, mut b, mut e) = (g.root().to_vec(), g.binary().to_vec(), g.emit().to_vec());
    match family {
        0 => r[idx] += d,
        1 => b[idx] += d,
        _ => e[idx] += d,
    }
    SentenceRules::new(g.nonterminals(), g.preterminals(), r, b, e).unwrap()
}

#[test]
fn counts_and_tangents_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 5;
    let rules = random_rules(&mut rng, 2, 2, 3, 1.0);
    let sent = random_sentence(&mut rng, n, 3);
    let g = rules.for_sentence(&sent).unwrap();
    let mut h = SpanWeights::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            h.set((i, j), rng.random_range(-1.0..1.0));
        }
    }
    let post = posterior(&g, Some(&h)).unwrap();
    let step = 1e-5;
    let families = [
        (g.root().len(), &post.root_counts, post.root_tangent.as_ref().unwrap()),
        (g.binary().len(), &post.binary_counts, post.binary_tangent.as_ref().unwrap()),
        (g.emit().len(), &post.emit_counts, post.emit_tangent.as_ref().unwrap()),
    ];
    for (f, (len, counts, tangent)) in families.into_iter().enumerate() {
        for idx in 0..len {
            let up = posterior(&perturbed(&g, f, idx, step), Some(&h)).unwrap();
            let down = posterior(&perturbed(&g, f, idx, -step), Some(&h)).unwrap();
            let dz = (up.log_z - down.log_z) / (2.0 * step);
            let dw = (up.weighted_sum - down.weighted_sum) / (2.0 * step);
            assert!((dz - counts[idx]).abs() < 1e-6, "count f={f} idx={idx}");
            assert!((dw - tangent[idx]).abs() < 1e-6, "tangent f={f} idx={idx}: {dw} vs {}", tangent[idx]);
        }
    }
    // weighted sum equals Σ m h
    let direct: f64 = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .map(|s| post.span_marginal(s) * h.get(s))
        .sum();
    assert!((direct - post.weighted_sum).abs() < 1e-9);
}

#[test]
fn long_sentence_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let rules = random_rules(&mut rng, 4, 4, 50, 4.0);
    let sent = random_sentence(&mut rng, 40, 50);
    let chart = span_marginals(&rules, &sent).unwrap();
    assert!(chart.log_likelihood().is_finite() && chart.log_likelihood() > LOG_ZERO);
    assert!((chart.span_marginal(0, 39).unwrap() - 1.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn relabeling_terminals_preserves_log_likelihood(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 4;
        let rules = random_rules(&mut rng, 2, 2, v, 2.0);
        let sent = random_sentence(&mut rng, n, v);
        let perm = [2usize, 0, 3, 1];
        let mut lex = rules.lexical.clone();
        for t in 0..2 {
            for w in 0..v {
                lex[t * v + perm[w]] = rules.lexical[t * v + w];
            }
        }
        let permuted = RuleTensors::new(rules.sizes, rules.root.clone(), rules.binary.clone(), lex).unwrap();
        let sent2: Vec<usize> = sent.iter().map(|&w| perm[w]).collect();
        let (a, _) = inside(&rules, &sent).unwrap();
        let (b, _) = inside(&permuted, &sent2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn marginals_bounded_and_tree_identity(seed in any::<u64>(), n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rules = random_rules(&mut rng, 2, 2, 3, 2.0);
        let sent = random_sentence(&mut rng, n, 3);
        let g = rules.for_sentence(&sent).unwrap();
        let chart = span_marginals(&rules, &sent).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let m = chart.span_marginal(i, j).unwrap();
                prop_assert!((-1e-12..=1.0 + 1e-6).contains(&m));
                total += m;
            }
        }
        // every binary tree has n−1 wide spans, so the expectation does too
        prop_assert!((total - (n - 1) as f64).abs() < 1e-6);
        let (_, scored) = oracle::log_likelihood(&g).unwrap();
        let z = chart.log_likelihood();
        let mass: f64 = scored.iter().map(|(_, s)| (s - z).exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rule_tables_are_normalized(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rules = random_rules(&mut rng, 3, 2, 6, 3.0);
        prop_assert!(rules.max_normalization_error() < 1e-5);
    }
}
