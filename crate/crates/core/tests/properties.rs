mod common;

use common::{rand_mat, rand_vec, tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use star_dst::context::{
    apply_word_dropout, assemble_context, tokenize, HistoryWindow, Region, Vocabulary,
};
use star_dst::corpus::DialogueState;
use star_dst::correlation::nmi;
use star_dst::metrics::{joint_goal_accuracy, per_turn_jga};
use star_dst::model::{
    argmax_first, project, slot_self_attention, value_distribution, ProjectionParams,
    SelfAttentionLayer,
};
use star_dst::nn::{Dropout, FeedForwardParams, LayerNormParams, MultiHeadParams};
use star_dst::tensor::{Graph, Tensor, Var};
use star_dst::tracker::PredictionRecord;

fn words() -> impl Strategy<Value = Vec<String>> {
    vec("[a-z]{1,6}", 0..12)
}

fn vocab_for(lists: &[&[String]]) -> Vocabulary {
    Vocabulary::from_tokens(lists.iter().flat_map(|l| l.iter().cloned()))
}

proptest! {
    #[test]
    fn tokens_have_no_whitespace_and_retokenize_stably(text in "\\PC{0,80}") {
        let toks = tokenize(&text);
        prop_assert!(toks.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
        prop_assert_eq!(tokenize(&toks.join(" ")), toks);
    }

    #[test]
    fn context_respects_capacity_and_regions(
        history in vec(words(), 0..6),
        state in words(),
        current in words(),
        window in prop_oneof![Just(HistoryWindow::Full), (0usize..4).prop_map(HistoryWindow::Turns)],
        max_len in 3usize..60,
    ) {
        let all: Vec<&[String]> = history.iter().map(Vec::as_slice).chain([state.as_slice(), current.as_slice()]).collect();
        let vocab = vocab_for(&all);
        match assemble_context(&vocab, &history, &state, &current, window, max_len) {
            Err(_) => prop_assert!(3 + state.len() + current.len() > max_len),
            Ok(seq) => {
                prop_assert!(seq.len() <= max_len);
                prop_assert_eq!(seq.region_ids(Region::PrevState), vocab.encode(&state));
                prop_assert_eq!(seq.region_ids(Region::Current), vocab.encode(&current));
                prop_assert_eq!(seq.positions.clone(), (0..seq.len()).collect::<Vec<_>>());
                // Regions appear in the fixed order, segment 1 starts after the first [SEP].
                let rank = |r: &Region| match r {
                    Region::History => 1,
                    Region::PrevState => 2,
                    Region::Current => 4,
                    Region::Special | Region::Pad => 0,
                };
                let body: Vec<u8> = seq.regions.iter().map(rank).filter(|&r| r > 0).collect();
                prop_assert!(body.windows(2).all(|w| w[0] <= w[1]));
                let sep = seq.ids.iter().position(|&i| i == vocab.sep_id()).unwrap();
                for (i, &s) in seq.segments.iter().enumerate() {
                    prop_assert_eq!(s, usize::from(i > sep));
                }
                // History is a suffix of the windowed history.
                let kept = seq.region_ids(Region::History);
                let take = match window {
                    HistoryWindow::Full => history.len(),
                    HistoryWindow::Turns(n) => n.min(history.len()),
                };
                let turns = &history[history.len() - take..];
                let flat: Vec<usize> = turns.iter().flat_map(|t| vocab.encode(t)).collect();
                prop_assert!(flat.ends_with(&kept));
                // Whole oldest turns go first; only the last survivor is cut.
                let room = max_len - 3 - state.len() - current.len();
                let mut lens: Vec<usize> = turns.iter().map(Vec::len).collect();
                while lens.iter().sum::<usize>() > room && lens.len() > 1 {
                    lens.remove(0);
                }
                prop_assert_eq!(kept.len(), lens.iter().sum::<usize>().min(room));
            }
        }
    }

    #[test]
    fn nmi_is_symmetric_bounded_and_label_free(
        pairs in vec((0u8..5, 0u8..5), 1..60),
        shift in 1u8..50,
    ) {
        let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        prop_assert_eq!(nmi(&b, &a).unwrap(), v);
        let renamed: Vec<String> = a.iter().map(|x| format!("v{}", x.wrapping_mul(3).wrapping_add(shift))).collect();
        prop_assert_eq!(nmi(&renamed, &b).unwrap(), v);
        let distinct = { let mut s = a.clone(); s.sort(); s.dedup(); s.len() };
        if distinct > 1 {
            prop_assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn value_distribution_is_a_distribution_peaked_at_nearest(seed in any::<u64>(), m in 1usize..8, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = rand_vec(&mut rng, d, 1.0);
        let cands = rand_mat(&mut rng, m, d, 1.0);
        let p = value_distribution(&gamma, &tensor(&cands)).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let dist: Vec<f64> = cands.iter().map(|c| c.iter().zip(&gamma).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).collect();
        let nearest = argmax_first(&dist.iter().map(|x| -x).collect::<Vec<_>>());
        prop_assert_eq!(argmax_first(&p), nearest);
    }

    #[test]
    fn projection_output_is_normalized(seed in any::<u64>(), rows in 1usize..4, d in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let f = g.constant(tensor(&rand_mat(&mut rng, rows, d, 2.0)));
        let p = ProjectionParams {
            w: g.constant(tensor(&rand_mat(&mut rng, d, d, 1.0))),
            b: g.constant(Tensor::vector(rand_vec(&mut rng, d, 1.0))),
            ln: LayerNormParams {
                gain: g.constant(Tensor::vector(vec![1.0; d])),
                bias: g.constant(Tensor::vector(vec![0.0; d])),
            },
        };
        let out = project(&mut g, f, &p, 1e-12).unwrap();
        for r in 0..rows {
            let row = g.value(out).row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-6);
            // Rows whose linear output is constant normalize to zero.
            prop_assert!((var - 1.0).abs() < 1e-4 || var < 1e-12);
        }
    }

    #[test]
    fn slot_self_attention_is_permutation_equivariant(seed in any::<u64>(), j in 1usize..6, perm_seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let c = rand_mat(&mut rng, j, d, 1.0);
        let mut g = Graph::new();
        let layers = random_layers(&mut g, &mut rng, 2, d);
        let mut order: Vec<usize> = (0..j).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        use rand::seq::SliceRandom;
        order.shuffle(&mut prng);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| c[i].clone()).collect();
        let vc = g.constant(tensor(&c));
        let vp = g.constant(tensor(&permuted));
        let a = slot_self_attention(&mut g, vc, &layers, 1e-12, &mut Dropout::off()).unwrap();
        let b = slot_self_attention(&mut g, vp, &layers, 1e-12, &mut Dropout::off()).unwrap();
        for (k, &i) in order.iter().enumerate() {
            let diff = common::max_abs_diff(g.value(a).row(i), g.value(b).row(k));
            prop_assert!(diff < 1e-12, "row {} differs by {}", i, diff);
        }
        let empty = slot_self_attention(&mut g, vc, &[], 1e-12, &mut Dropout::off()).unwrap();
        prop_assert_eq!(g.value(empty), g.value(vc));
    }

    #[test]
    fn per_turn_counts_add_up(outcomes in vec((1usize..6, any::<bool>()), 1..40)) {
        let records: Vec<PredictionRecord> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &(turn, ok))| {
                let mut gold = DialogueState::new();
                gold.set("hotel-area", "north");
                let mut predicted = DialogueState::new();
                predicted.set("hotel-area", if ok { "north" } else { "south" });
                PredictionRecord { dialogue_id: format!("d{i}"), turn, predicted, gold, domains: vec!["hotel".into()] }
            })
            .collect();
        let all = joint_goal_accuracy(&records).unwrap();
        let per = per_turn_jga(&records);
        prop_assert_eq!(per.values().map(|r| r.correct).sum::<usize>(), all.correct);
        prop_assert_eq!(per.values().map(|r| r.total).sum::<usize>(), all.total);
        prop_assert_eq!(all.correct, outcomes.iter().filter(|o| o.1).count());
    }
}

fn random_layers(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<SelfAttentionLayer> {
    let mut m = |g: &mut Graph<f64>, r, c| -> Var { g.constant(tensor(&rand_mat(rng, r, c, 0.8))) };
    (0..n)
        .map(|_| {
            let ln = |g: &mut Graph<f64>| LayerNormParams {
                gain: g.constant(Tensor::vector(vec![1.0; d])),
                bias: g.constant(Tensor::vector(vec![0.0; d])),
            };
            SelfAttentionLayer {
                ln_a: ln(g),
                attn: MultiHeadParams { w_q: m(g, d, d), w_k: m(g, d, d), w_z: m(g, d, d), w_o: m(g, d, d), heads: 2 },
                ln_b: ln(g),
                ffn: FeedForwardParams { w1: m(g, d, d), b1: m(g, 1, d), w2: m(g, d, d), b2: m(g, 1, d) },
            }
        })
        .collect()
}

#[test]
fn word_dropout_rate_is_binomial() {
    let history: Vec<Vec<String>> = vec![(0..300).map(|i| format!("h{i}")).collect()];
    let state: Vec<String> = (0..50).map(|i| format!("s{i}")).collect();
    let current: Vec<String> = (0..300).map(|i| format!("c{i}")).collect();
    let vocab = vocab_for(&[&history[0], &state, &current]);
    let seq = assemble_context(&vocab, &history, &state, &current, HistoryWindow::Full, 1000).unwrap();
    let rate = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut dropped, mut eligible) = (0usize, 0usize);
    for _ in 0..20 {
        let out = apply_word_dropout(&seq, rate, vocab.unk_id(), &mut rng);
        for ((a, b), r) in seq.ids.iter().zip(&out.ids).zip(&seq.regions) {
            match r {
                Region::History | Region::Current => {
                    eligible += 1;
                    dropped += usize::from(a != b);
                }
                _ => assert_eq!(a, b, "{r:?} position changed"),
            }
        }
    }
    let n = eligible as f64;
    let sd = (n * rate * (1.0 - rate)).sqrt();
    let z = (dropped as f64 - n * rate) / sd;
    assert!(z.abs() < 4.0, "{dropped} of {eligible} dropped, z = {z:.2}");
    assert_eq!(apply_word_dropout(&seq, 0.0, vocab.unk_id(), &mut rng), seq);
}
