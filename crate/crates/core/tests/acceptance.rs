//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any failed.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 3 10`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{ffn, layer_norm, mha, rand_mat, rand_vec, rel_err, rows_of, tensor, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_dst::context::{
    context_for_turn, detokenize, tokenize, HistoryWindow, Region, TokenSequence, Vocabulary,
};
use star_dst::corpus::{generate_synthetic, Corpus, Dialogue, Ontology, Slot, SyntheticConfig};
use star_dst::correlation::{nmi, slot_correlation_topk, SampleUnit};
use star_dst::metrics::{
    domain_jga, joint_goal_accuracy, per_turn_jga, slot_accuracy, split_jga, Convention, Ratio,
};
use star_dst::model::{
    slot_self_attention, slot_token_attention, value_distribution, ModelConfig,
    SelfAttentionLayer, SlotTokenParams, StarModel,
};
use star_dst::nn::{
    multi_head_attention, Dropout, FeedForwardParams, LayerNormParams, MultiHeadParams,
};
use star_dst::tensor::{Graph, Tensor, Var};
use star_dst::tracker::{
    parse_predictions, predictions_to_string, PredictionHeader, PredictionRecord, TrackMode,
    Tracker,
};
use star_dst::train::{init_model, train, Checkpoint, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut tokens: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
    tokens.sort();
    let vocab = Vocabulary::from_tokens(tokens);
    assert_eq!(vocab.len(), 20);
    let ontology = Ontology::new([
        (Slot::new("hotel", "area"), vec!["w1".to_string(), "w2".to_string()]),
        (Slot::new("taxi", "leave"), vec!["w3".to_string(), "w4 w5".to_string()]),
    ])
    .unwrap();
    let cfg = ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 2,
        encoder_layers: 1,
        encoder_heads: 2,
        encoder_ffn: 8,
        vocab_size: 20,
        max_len: 6,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let mut model = StarModel::<f64>::new(cfg, &vocab, &ontology, 3).unwrap();
    let seq = TokenSequence {
        ids: vec![vocab.cls_id(), vocab.id("w6"), vocab.id("w1"), vocab.sep_id(), vocab.id("w9"), vocab.sep_id()],
        segments: vec![0, 0, 0, 0, 1, 1],
        positions: (0..6).collect(),
        regions: vec![
            Region::Special,
            Region::History,
            Region::PrevState,
            Region::Special,
            Region::Current,
            Region::Special,
        ],
        mask: vec![true; 6],
    };
    let gold = vec![2, 3];
    let (_, grads) = model.loss_and_grads(&seq, &gold, &mut Dropout::off()).unwrap();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, name) in names.iter().enumerate() {
        let n = model.params().get(name).unwrap().value.numel();
        for e in 0..n {
            let analytic = grads[i].as_ref().map_or(0.0, |g| g[e]);
            let mut loss_at = |delta: f64| {
                let p = model.params_mut().get_mut(name).unwrap();
                let orig = p.value.data()[e];
                p.value.data_mut()[e] = orig + delta;
                let (l, _) = model.loss_and_grads(&seq, &gold, &mut Dropout::off()).unwrap();
                model.params_mut().get_mut(name).unwrap().value.data_mut()[e] = orig;
                l
            };
            let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let err = rel_err(analytic, numeric);
            if err > worst.0 {
                worst = (err, format!("{name}[{e}]"));
            }
            checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "{} tensors, {checked} entries, max rel err {:.2e} at {}, {secs:.1} s",
            names.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn weights(g: &mut Graph<f64>, ws: &[&Mat], heads: usize) -> MultiHeadParams {
    let v: Vec<Var> = ws.iter().map(|w| g.constant(tensor(w))).collect();
    MultiHeadParams {
        w_q: v[0],
        w_k: v[1],
        w_z: v[2],
        w_o: v[3],
        heads,
    }
}

fn vec_const(g: &mut Graph<f64>, v: &[f64]) -> Var {
    g.constant(Tensor::vector(v.to_vec()))
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = (heads * rng.gen_range(1..4)).max(2);
        let (nq, nk) = (rng.gen_range(1..5), rng.gen_range(1..7));
        let q = rand_mat(&mut rng, nq, d, 1.0);
        let k = rand_mat(&mut rng, nk, d, 1.0);
        let z = rand_mat(&mut rng, nk, d, 1.0);
        let w: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, d, d, 0.8)).collect();

        // Multi-head attention.
        let mut g = Graph::new();
        let p = weights(&mut g, &[&w[0], &w[1], &w[2], &w[3]], heads);
        let (vq, vk, vz) = (g.constant(tensor(&q)), g.constant(tensor(&k)), g.constant(tensor(&z)));
        let out = multi_head_attention(&mut g, vq, vk, vz, &p, None, &mut Dropout::off()).unwrap();
        let expect = mha(&q, &k, &z, &w[0], &w[1], &w[2], &w[3], heads);
        note("multi_head_attention", common::mat_abs_diff(&rows_of(g.value(out)), &expect));

        // Slot-token attention: r = MHA(h_S, H, H), c = FFN([h_S ; r]).
        let w1 = rand_mat(&mut rng, d, 2 * d, 0.6);
        let b1 = rand_vec(&mut rng, d, 0.5);
        let w2 = rand_mat(&mut rng, d, d, 0.6);
        let b2 = rand_vec(&mut rng, d, 0.5);
        let ffn_p = FeedForwardParams {
            w1: g.constant(tensor(&w1)),
            b1: vec_const(&mut g, &b1),
            w2: g.constant(tensor(&w2)),
            b2: vec_const(&mut g, &b2),
        };
        let stp = SlotTokenParams { attn: p, ffn: ffn_p };
        let c = slot_token_attention(&mut g, vq, vk, &stp, None, &mut Dropout::off()).unwrap();
        let r = mha(&q, &k, &k, &w[0], &w[1], &w[2], &w[3], heads);
        let expect: Mat = q
            .iter()
            .zip(&r)
            .map(|(hs, ri)| {
                let cat: Vec<f64> = hs.iter().chain(ri).copied().collect();
                ffn(&cat, &w1, &b1, &w2, &b2)
            })
            .collect();
        note("slot_token_attention", common::mat_abs_diff(&rows_of(g.value(c)), &expect));

        // Slot self-attention, single slot, two layers.
        let f0 = rand_mat(&mut rng, 1, d, 1.5);
        let mut layers = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..2 {
            let ln_a = (rand_vec(&mut rng, d, 1.0), rand_vec(&mut rng, d, 0.5));
            let ln_b = (rand_vec(&mut rng, d, 1.0), rand_vec(&mut rng, d, 0.5));
            let aw: Vec<Mat> = (0..4).map(|_| rand_mat(&mut rng, d, d, 0.8)).collect();
            let fw = (
                rand_mat(&mut rng, d, d, 0.6),
                rand_vec(&mut rng, d, 0.5),
                rand_mat(&mut rng, d, d, 0.6),
                rand_vec(&mut rng, d, 0.5),
            );
            let attn = weights(&mut g, &[&aw[0], &aw[1], &aw[2], &aw[3]], heads);
            layers.push(SelfAttentionLayer {
                ln_a: LayerNormParams { gain: vec_const(&mut g, &ln_a.0), bias: vec_const(&mut g, &ln_a.1) },
                attn,
                ln_b: LayerNormParams { gain: vec_const(&mut g, &ln_b.0), bias: vec_const(&mut g, &ln_b.1) },
                ffn: FeedForwardParams {
                    w1: g.constant(tensor(&fw.0)),
                    b1: vec_const(&mut g, &fw.1),
                    w2: g.constant(tensor(&fw.2)),
                    b2: vec_const(&mut g, &fw.3),
                },
            });
            raw.push((ln_a, aw, ln_b, fw));
        }
        let vf = g.constant(tensor(&f0));
        let out = slot_self_attention(&mut g, vf, &layers, 1e-12, &mut Dropout::off()).unwrap();
        let mut f = f0[0].clone();
        for (ln_a, aw, ln_b, fw) in &raw {
            let ft = layer_norm(&f, &ln_a.0, &ln_a.1, 1e-12);
            let a = &mha(&vec![ft.clone()], &vec![ft.clone()], &vec![ft.clone()], &aw[0], &aw[1], &aw[2], &aw[3], heads)[0];
            let gg: Vec<f64> = a.iter().zip(&ft).map(|(x, y)| x + y).collect();
            let gt = layer_norm(&gg, &ln_b.0, &ln_b.1, 1e-12);
            let o = ffn(&gt, &fw.0, &fw.1, &fw.2, &fw.3);
            f = o.iter().zip(&gt).map(|(x, y)| x + y).collect();
        }
        note("slot_self_attention", common::max_abs_diff(g.value(out).row(0), &f));

        // Value distribution.
        let gamma = rand_vec(&mut rng, d, 1.0);
        let m = rng.gen_range(1..8);
        let cands = rand_mat(&mut rng, m, d, 1.0);
        let got = value_distribution(&gamma, &tensor(&cands)).unwrap();
        note("value_distribution", common::max_abs_diff(&got, &common::value_distribution(&gamma, &cands)));
    }
    let ok = worst.values().all(|&e| e <= 1e-9);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("100 instances; max abs diff: {detail}"))
}

// ---------------------------------------------------------------- 3

fn metric_oracles() -> Outcome {
    let text = include_str!("fixtures/metrics6.jsonl");
    let (header, recs) = parse_predictions(text).unwrap();
    let r = |c, t| Ratio::new(c, t);
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: Option<Ratio>, want: Option<Ratio>| {
        if got != want {
            failures.push(format!("{what}: got {got:?}, want {want:?}"));
        }
    };
    expect("jga", joint_goal_accuracy(&recs).ok(), r(7, 10));
    let per_turn = per_turn_jga(&recs);
    for (t, want) in [(1, r(5, 6)), (2, r(1, 3)), (3, r(1, 1))] {
        expect(&format!("turn {t}"), per_turn.get(&t).copied(), want);
    }
    expect("turns", Some(r(per_turn.len(), per_turn.len()).unwrap()), r(3, 3));
    for (dom, want) in [("restaurant", r(5, 6)), ("hotel", r(3, 3)), ("taxi", r(4, 5))] {
        expect(&format!("domain {dom}"), domain_jga(&recs, &header.slots, dom).unwrap(), want);
    }
    let all = [(9, 10), (9, 10), (10, 10), (9, 10)];
    let active = [(6, 6), (5, 6), (3, 3), (4, 5)];
    for (i, slot) in header.slots.iter().enumerate() {
        expect(&format!("{slot} all"), slot_accuracy(&recs, &header.slots, slot, Convention::All).unwrap(), r(all[i].0, all[i].1));
        expect(
            &format!("{slot} domain-active"),
            slot_accuracy(&recs, &header.slots, slot, Convention::DomainActive).unwrap(),
            r(active[i].0, active[i].1),
        );
    }
    let (single, multi) = split_jga(&recs);
    expect("single-domain", single, r(3, 4));
    expect("multi-domain", multi, r(3, 5));
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "6 dialogues, 10 turns: jga, per-turn, domain, both slot conventions, split all exact".into()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 4

fn brute_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |m: &[f64]| -> f64 {
        m.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
    };
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = table[i][j];
            if c > 0.0 {
                mi += c / n * (c * n / (row[i] * col[j])).ln();
            }
        }
    }
    let denom = h(&row) + h(&col);
    if denom == 0.0 {
        1.0
    } else {
        (2.0 * mi / denom).max(0.0)
    }
}

fn nmi_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut asymmetric = 0;
    let mut relabel_breaks = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let (ka, kb) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..kb)).collect();
        let v = nmi(&a, &b).unwrap();
        worst = worst.max((v - brute_nmi(&a, &b)).abs());
        if nmi(&b, &a).unwrap() != v {
            asymmetric += 1;
        }
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..ka).collect();
            for i in (1..p.len()).rev() {
                p.swap(i, rng.gen_range(0..=i));
            }
            p
        };
        let relabeled: Vec<String> = a.iter().map(|&x| format!("label-{}", perm[x] * 7 + 3)).collect();
        if nmi(&relabeled, &b).unwrap() != v {
            relabel_breaks += 1;
        }
    }
    check(
        worst <= 1e-9 && asymmetric == 0 && relabel_breaks == 0,
        format!(
            "1000 partitions: max diff {worst:.1e}, asymmetric {asymmetric}, relabeling changes {relabel_breaks}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10_000,
        batch_size: 16,
        lr_decoder: 2e-3,
        lr_encoder: 5e-4,
        seed,
        ..TrainConfig::default()
    }
}

fn memorization() -> Outcome {
    let t0 = Instant::now();
    let cfg = SyntheticConfig {
        dialogues: 32,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg, 0).unwrap();
    let model_cfg = ModelConfig {
        hidden: 64,
        heads: 4,
        layers: 2,
        ..ModelConfig::default()
    };
    let (vocab, mut model) = init_model(&corpus, model_cfg, 0).unwrap();
    let tc = TrainConfig {
        max_steps: Some(2000),
        eval_every: 100,
        patience: 1000,
        target_jga: Some(0.99),
        ..desk_train_config(0)
    };
    let out = train(
        &mut model,
        &vocab,
        &corpus.ontology,
        &corpus.dialogues,
        &corpus.dialogues,
        &tc,
        &mut |_| {},
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    check(
        out.best_jga >= 0.99 && out.best_step <= 2000 && secs < 300.0,
        format!(
            "32 dialogues: training JGA {:.4} at step {}, {secs:.0} s",
            out.best_jga, out.best_step
        ),
    )
}

// ---------------------------------------------------------------- 6 and 7

/// Optimizer steps per ablation run, sized so six runs fit the time budget
/// on a single core.
const ABLATION_STEPS: usize = 7000;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

struct AblationRun {
    test_jga: f64,
    predicted: Vec<PredictionRecord>,
    oracle: Vec<PredictionRecord>,
}

fn ablation_run(corpus: &Corpus, layers: usize, seed: u64, tracks: bool) -> AblationRun {
    let parts = corpus.split(&[0.8, 0.1, 0.1]);
    let model_cfg = ModelConfig {
        layers,
        ..ModelConfig::default()
    };
    let (vocab, mut model) = init_model(&parts[0], model_cfg, seed).unwrap();
    let tc = TrainConfig {
        max_steps: Some(ABLATION_STEPS),
        eval_every: 500,
        patience: 1000,
        ..desk_train_config(seed)
    };
    let out = train(
        &mut model,
        &vocab,
        &corpus.ontology,
        &parts[0].dialogues,
        &parts[1].dialogues,
        &tc,
        &mut |_| {},
    )
    .unwrap();
    let tracker = Tracker::new(&out.best, &vocab, &corpus.ontology, HistoryWindow::Full).unwrap();
    let test = &parts[2].dialogues;
    let predicted = tracker.batch_track(test, TrackMode::PredictedPrevState, 0).unwrap();
    let oracle = if tracks {
        tracker.batch_track(test, TrackMode::GroundTruthPrevState, 0).unwrap()
    } else {
        Vec::new()
    };
    AblationRun {
        test_jga: joint_goal_accuracy(&predicted).unwrap().value,
        predicted,
        oracle,
    }
}

#[derive(Default)]
struct Shared {
    /// L=2 runs, one per seed.
    stacked: Vec<AblationRun>,
}

fn ablation(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let mut diffs = Vec::new();
    for seed in ABLATION_SEEDS {
        let corpus = generate_synthetic(&SyntheticConfig::default(), seed).unwrap();
        let stacked = ablation_run(&corpus, 2, seed, true);
        let flat = ablation_run(&corpus, 0, seed, false);
        lines.push(format!(
            "seed {seed}: L=2 {:.4} L=0 {:.4}",
            stacked.test_jga, flat.test_jga
        ));
        diffs.push(stacked.test_jga - flat.test_jga);
        shared.stacked.push(stacked);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let secs = t0.elapsed().as_secs_f64();
    check(
        mean >= 0.05 && secs < 1800.0,
        format!(
            "{}; mean gain {:+.2} points, {secs:.0} s",
            lines.join(", "),
            100.0 * mean
        ),
    )
}

fn error_accumulation(shared: &Shared) -> Outcome {
    if shared.stacked.is_empty() {
        return Err("needs the ablation runs of criterion 6".into());
    }
    let predicted: Vec<PredictionRecord> =
        shared.stacked.iter().flat_map(|r| r.predicted.iter().cloned()).collect();
    let oracle: Vec<PredictionRecord> =
        shared.stacked.iter().flat_map(|r| r.oracle.iter().cloned()).collect();
    let p = per_turn_jga(&predicted);
    let o = per_turn_jga(&oracle);
    let mut inversions = Vec::new();
    for (t, rp) in p.range(2..) {
        if o[t].value < rp.value {
            inversions.push(*t);
        }
    }
    let mean = |it: Vec<f64>| it.iter().sum::<f64>() / it.len().max(1) as f64;
    let early = mean(p.range(..=2).map(|(_, r)| r.value).collect());
    let late = mean(p.range(3..).map(|(_, r)| r.value).collect());
    let series = p
        .iter()
        .map(|(t, r)| format!("t{t} {:.3}/{:.3}", r.value, o[t].value))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        inversions.is_empty() && late <= early,
        format!(
            "predicted/oracle {series}; mean t<=2 {early:.3}, t>=3 {late:.3}; oracle below predicted at {inversions:?}"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn correlation_recovery() -> Outcome {
    let cfg = SyntheticConfig::default();
    let corpus = generate_synthetic(&cfg, 1).unwrap();
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for rule in &cfg.copy_rules {
        for (slot, partner) in [(&rule.target, &rule.source), (&rule.source, &rule.target)] {
            let r = slot_correlation_topk(&corpus, slot, 5, SampleUnit::Turn).unwrap();
            let (top, score) = r.entries.first().cloned().unwrap_or_default();
            lines.push(format!("{slot} -> {top} {score:.3}"));
            if top != **partner || score < 0.8 {
                failures.push(slot.clone());
            }
        }
    }
    check(
        failures.is_empty(),
        format!("{}{}", lines.join(", "), if failures.is_empty() { String::new() } else { format!("; failed {failures:?}") }),
    )
}

// ---------------------------------------------------------------- 9

fn small_run(seed: u64) -> (Vec<u8>, String, String) {
    let cfg = SyntheticConfig {
        dialogues: 24,
        ..SyntheticConfig::default()
    };
    let corpus = generate_synthetic(&cfg, seed).unwrap();
    let parts = corpus.split(&[0.5, 0.25, 0.25]);
    let model_cfg = ModelConfig {
        hidden: 32,
        layers: 1,
        encoder_layers: 1,
        encoder_ffn: 32,
        ..ModelConfig::default()
    };
    let (vocab, mut model) = init_model(&parts[0], model_cfg, seed).unwrap();
    let tc = TrainConfig {
        max_steps: Some(40),
        eval_every: 20,
        batch_size: 4,
        ..desk_train_config(seed)
    };
    let out = train(
        &mut model,
        &vocab,
        &corpus.ontology,
        &parts[0].dialogues,
        &parts[1].dialogues,
        &tc,
        &mut |_| {},
    )
    .unwrap();
    let header = PredictionHeader::new(Some(TrackMode::PredictedPrevState), &corpus.ontology);
    let tracker = Tracker::new(&out.best, &vocab, &corpus.ontology, HistoryWindow::Full).unwrap();
    let one = tracker.batch_track(&parts[2].dialogues, TrackMode::PredictedPrevState, 1).unwrap();
    let four = tracker.batch_track(&parts[2].dialogues, TrackMode::PredictedPrevState, 4).unwrap();
    let ckpt = out.into_checkpoint(vocab, corpus.ontology.clone(), &tc);
    (
        ckpt.to_bytes(),
        predictions_to_string(&header, &one),
        predictions_to_string(&header, &four),
    )
}

fn determinism() -> Outcome {
    let mut failures = Vec::new();
    let a = generate_synthetic(&SyntheticConfig::default(), 9).unwrap();
    let b = generate_synthetic(&SyntheticConfig::default(), 9).unwrap();
    if a.to_json_string() != b.to_json_string() {
        failures.push("corpus generation");
    }
    if Corpus::from_json_str(&a.to_json_string()).unwrap() != a {
        failures.push("corpus round-trip");
    }
    let (ckpt1, one1, four1) = small_run(5);
    let (ckpt2, one2, four2) = small_run(5);
    if ckpt1 != ckpt2 || one1 != one2 {
        failures.push("end-to-end rerun");
    }
    if one1 != four1 || one2 != four2 {
        failures.push("1 vs 4 workers");
    }
    let restored = Checkpoint::from_bytes(&ckpt1).unwrap();
    if restored.to_bytes() != ckpt1 {
        failures.push("checkpoint round-trip");
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "generation, train+track reruns, checkpoint ({} bytes) and corpus round-trips, 1 vs 4 workers identical",
                ckpt1.len()
            )
        } else {
            format!("differs: {failures:?}")
        },
    )
}

// ---------------------------------------------------------------- 10

fn context_conformance() -> Outcome {
    let corpus = Corpus::from_json_str(include_str!("fixtures/table1.json")).unwrap();
    let vocab = Vocabulary::from_corpus(&corpus);
    let d: &Dialogue = &corpus.dialogues[0];
    let seq = context_for_turn(&vocab, &corpus.ontology, &d.turns, 2, &d.turns[1].state, HistoryWindow::Full, 512)
        .unwrap();
    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let history = words(
        "hi , what can i do for you ? please find me a chinese restaurant . \
         charlie chan fits your criterion , can i book it for you ? yes , i need a table on monday at 12 : 15 .",
    );
    let state = "restaurant-food chinese restaurant-name charlie chan restaurant-book day monday restaurant-book time 12 : 15";
    let current = words(
        "booking is successful . is there anything else i can assist you with today ? \
         i also need a taxi to get me to the restaurant on time .",
    );
    let mut expected = vec!["[CLS]".to_string()];
    expected.extend(history);
    expected.extend(words(state));
    expected.push("[SEP]".into());
    expected.extend(current);
    expected.push("[SEP]".into());
    let got: Vec<String> = seq.ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    let prev = detokenize(&vocab, &seq.region_ids(Region::PrevState));
    let segments_ok = {
        let first_sep = got.iter().position(|t| t == "[SEP]").unwrap();
        seq.segments.iter().enumerate().all(|(i, &s)| s == usize::from(i > first_sep))
    };
    let tokenizer_ok = tokenize("at 12:15.") == words("at 12 : 15 .");
    check(
        got == expected && prev == state && segments_ok && tokenizer_ok,
        format!("{} tokens; prev_state region \"{prev}\"", got.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut shared = Shared::default();
    type Criterion<'a> = (usize, &'a str, Box<dyn FnMut(&mut Shared) -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient fidelity", Box::new(|_| gradient_fidelity())),
        (2, "formula oracles", Box::new(|_| formula_oracles())),
        (3, "metric oracles", Box::new(|_| metric_oracles())),
        (4, "NMI oracle", Box::new(|_| nmi_oracle())),
        (5, "memorization", Box::new(|_| memorization())),
        (6, "ablation direction", Box::new(ablation)),
        (7, "error accumulation", Box::new(|s| error_accumulation(s))),
        (8, "correlation recovery", Box::new(|_| correlation_recovery())),
        (9, "determinism and round-trips", Box::new(|_| determinism())),
        (10, "context-assembly conformance", Box::new(|_| context_conformance())),
    ];
    let mut results: HashMap<usize, bool> = HashMap::new();
    for (n, name, mut run) in criteria {
        if !want(n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} #{n:<2} {name} ({secs:.1} s): {detail}");
        results.insert(n, outcome.is_ok());
    }
    let failed: Vec<usize> = {
        let mut f: Vec<usize> = results.iter().filter(|(_, ok)| !**ok).map(|(n, _)| *n).collect();
        f.sort();
        f
    };
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
