//! Property tests for the numerical kernels, corpus handling, similarity,
//! objective, training and metrics.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xltt::corpus::{
    build_parallel_corpus, parse_squad, serialize_squad, tokenize_instance, IdentityProvider,
    CipherProvider, ProviderMap, QAInstance, Vocabulary, CLS, SEP,
};
use xltt::eval::{em, evaluate, f1, normalize_answer};
use xltt::maa::{intra_attention, maa_forward, MaaConfig, MaaParams, MaaVars};
use xltt::objective::{alpha, decode_span, total_objective, weighted_source_loss};
use xltt::similarity::{normalize_weights, raw_weight, tfidf, QuestionDocument, WeightTable};
use xltt::tensor::{Tape, Tensor};
use xltt::trainer::{adamw_step, lr_schedule, AdamState, TrainConfig};

fn matrix(max_rows: usize, max_cols: usize, bound: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-bound..bound, r * c)
            .prop_map(move |d| Tensor::new(r, c, d).expect("sized"))
    })
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(a in matrix(6, 9, 50.0), c in -100.0f64..100.0) {
        let s = a.row_softmax();
        for r in 0..s.rows() {
            prop_assert!((s.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted = a.map(|x| x + c).row_softmax();
        for (x, y) in s.data().iter().zip(shifted.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_commutes_with_column_permutation(a in matrix(5, 8, 10.0), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..a.cols()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                for (j, &p) in perm.iter().enumerate() {
                    out.set(r, j, t.get(r, p));
                }
            }
            out
        };
        let lhs = permute(&a).row_softmax();
        let rhs = permute(&a.row_softmax());
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_standardizes(a in matrix(5, 12, 20.0)) {
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let g = tape.constant(Tensor::ones(1, a.cols()));
        let b = tape.constant(Tensor::zeros(1, a.cols()));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let y = tape.value(y);
        for r in 0..a.rows() {
            let row = a.row_slice(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            if var < 1e-4 {
                continue;
            }
            let out = y.row_slice(r);
            let m = out.iter().sum::<f64>() / n;
            let v = out.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            prop_assert!(m.abs() < 1e-9, "mean {m}");
            prop_assert!((v - 1.0).abs() < 1e-6, "var {v}");
        }
    }

    #[test]
    fn backward_is_repeatable(
        (a, w) in (1usize..5, 1usize..6, 1usize..4).prop_flat_map(|(r, k, c)| (
            prop::collection::vec(-3.0f64..3.0, r * k).prop_map(move |d| Tensor::new(r, k, d).unwrap()),
            prop::collection::vec(-3.0f64..3.0, k * c).prop_map(move |d| Tensor::new(k, c, d).unwrap()),
        )),
    ) {
        let mut tape = Tape::new();
        let x = tape.param(&a);
        let wv = tape.param(&w);
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.gelu(h);
        let s = tape.row_softmax(h);
        let loss = tape.mean_rows(s, 0, a.rows() - 1).unwrap();
        let loss = tape.sum(loss);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        prop_assert_eq!(g1.get(x), g2.get(x));
        prop_assert_eq!(g1.get(wv), g2.get(wv));
    }

    #[test]
    fn tokenized_members_keep_structure(
        q in prop::collection::vec(word(), 1..5),
        before in prop::collection::vec(word(), 0..6),
        answer in prop::collection::vec(word(), 1..4),
        after in prop::collection::vec(word(), 0..6),
    ) {
        let prefix = if before.is_empty() { String::new() } else { before.join(" ") + " " };
        let answer_text = answer.join(" ");
        let mut context = prefix.clone() + &answer_text;
        if !after.is_empty() {
            context += " ";
            context += &after.join(" ");
        }
        let inst = QAInstance {
            id: "q".into(),
            question: q.join(" ") + "?",
            context: context.clone(),
            answer_text: answer_text.clone(),
            answer_char_start: prefix.chars().count(),
            language: "en".into(),
            source_dataset: "d".into(),
        };
        let vocab = Vocabulary::build([inst.question.as_str(), context.as_str()]);
        let seq = tokenize_instance(&inst, &vocab, 64).unwrap();
        let cls = vocab.id(CLS);
        let sep = vocab.id(SEP);
        let p = seq.passage_range();
        prop_assert_eq!(seq.input_ids[0], cls);
        prop_assert_eq!(seq.input_ids[p.start - 1], sep);
        prop_assert_eq!(*seq.input_ids.last().unwrap(), sep);
        prop_assert!(seq.token_types[..p.start].iter().all(|&t| t == 0));
        prop_assert!(seq.token_types[p.start..].iter().all(|&t| t == 1));
        let (s, e) = seq.answer_span;
        prop_assert!(p.contains(&s) && p.contains(&e));
        prop_assert_eq!(seq.span_text(s, e).unwrap(), answer_text);
    }

    #[test]
    fn squad_round_trip(
        qs in prop::collection::vec((word(), word(), 0usize..3), 1..6),
    ) {
        let context = "alpha beta gamma delta".to_string();
        let words: Vec<&str> = context.split(' ').collect();
        let starts = [0usize, 6, 11];
        let instances: Vec<QAInstance> = qs
            .iter()
            .enumerate()
            .map(|(i, (a, b, k))| QAInstance {
                id: format!("id{i}"),
                question: format!("{a} {b}?"),
                context: context.clone(),
                answer_text: words[*k].to_string(),
                answer_char_start: starts[*k],
                language: "en".into(),
                source_dataset: "ds".into(),
            })
            .collect();
        let parsed = parse_squad(&serialize_squad(&instances), "ds", "en").unwrap();
        prop_assert_eq!(parsed.skipped(), 0);
        prop_assert_eq!(parsed.instances, instances);
    }

    #[test]
    fn tfidf_is_tf_homogeneous(
        docs in prop::collection::vec(prop::collection::btree_map("[a-e]", 1usize..4, 1..5), 2..5),
        k in 2usize..5,
    ) {
        let mk = |i: usize, counts: &BTreeMap<String, usize>, mult: usize| QuestionDocument {
            dataset_id: format!("d{i}"),
            counts: counts.iter().map(|(w, n)| (w.clone(), n * mult)).collect(),
        };
        let base: Vec<QuestionDocument> = docs.iter().enumerate().map(|(i, c)| mk(i, c, 1)).collect();
        let mut scaled = base.clone();
        scaled[0] = mk(0, &docs[0], k);
        let v = tfidf(&base);
        let w = tfidf(&scaled);
        for j in 1..v.len() {
            let a = raw_weight(&v[0], &v[j]);
            let b = raw_weight(&w[0], &w[j]);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((raw_weight(&v[0], &v[j]) - raw_weight(&v[j], &v[0])).abs() == 0.0);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&a));
        }
    }

    #[test]
    fn weight_tables_sum_to_one(raw in prop::collection::btree_map("[a-h]", 0.001f64..10.0, 2..6)) {
        let t = normalize_weights(&raw).unwrap();
        prop_assert!((t.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let drop = raw.keys().next().unwrap().clone();
        let survivors = t.without(&drop).unwrap();
        prop_assert!((survivors.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
        let ids: Vec<&String> = survivors.weights.keys().collect();
        for a in &ids {
            for b in &ids {
                let before = t.weights[*a] / t.weights[*b];
                let after = survivors.weights[*a] / survivors.weights[*b];
                prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
            }
        }
    }

    #[test]
    fn source_loss_is_linear_and_order_free(
        losses in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 1..4), 2..4),
        w in prop::collection::vec(0.01f64..1.0, 4),
        c in 0.1f64..5.0,
    ) {
        let ids: Vec<String> = (0..losses.len()).map(|i| format!("d{i}")).collect();
        let table = |scale: f64| WeightTable {
            weights: ids.iter().zip(&w).map(|(id, x)| (id.clone(), x * scale)).collect(),
        };
        let fwd: BTreeMap<String, Vec<f64>> = ids.iter().cloned().zip(losses.clone()).collect();
        let rev: BTreeMap<String, Vec<f64>> = ids.iter().rev().cloned().zip(losses.iter().rev().cloned()).collect();
        let a = weighted_source_loss(&fwd, &table(1.0)).unwrap();
        let b = weighted_source_loss(&rev, &table(1.0)).unwrap();
        let scaled = weighted_source_loss(&fwd, &table(c)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((scaled - c * a).abs() < 1e-12 * (1.0 + scaled.abs()));
    }

    #[test]
    fn total_objective_is_non_negative(
        ls in 0.0f64..20.0,
        aux in prop::collection::btree_map("[a-c]", (0.0f64..=1.0, 0.0f64..20.0), 0..3),
    ) {
        prop_assert!(total_objective(ls, &aux) >= 0.0);
        let zero: BTreeMap<String, (f64, f64)> = aux.iter().map(|(k, (_, l))| (k.clone(), (0.0, *l))).collect();
        prop_assert_eq!(total_objective(ls, &zero), ls);
    }

    #[test]
    fn alpha_ignores_positive_scale(
        u in prop::collection::vec(-5.0f64..5.0, 1..8),
        c1 in 0.01f64..100.0,
        c2 in 0.01f64..100.0,
    ) {
        let v: Vec<f64> = u.iter().rev().cloned().collect();
        let t = |x: &[f64], c: f64| Tensor::row(&x.iter().map(|e| e * c).collect::<Vec<_>>());
        let a = alpha(&t(&u, 1.0), &t(&v, 1.0)).unwrap();
        let b = alpha(&t(&u, c1), &t(&v, c2)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn decode_matches_exhaustive_search(
        l in 1usize..=20,
        seed in any::<u64>(),
        quantize in any::<bool>(),
        max_len in 1usize..25,
        lo in 0usize..5,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let x: f64 = rng.gen_range(0.0..1.0);
            if quantize { (x * 3.0).floor() / 3.0 } else { x }
        };
        let ps: Vec<f64> = (0..l).map(|_| draw()).collect();
        let pe: Vec<f64> = (0..l).map(|_| draw()).collect();
        let allowed = lo.min(l - 1)..l;
        let got = decode_span(&ps, &pe, allowed.clone(), max_len).unwrap();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for s in allowed.clone() {
            for e in allowed.clone() {
                if e < s || e - s + 1 > max_len {
                    continue;
                }
                let score = ps[s] * pe[e];
                if score > best.0 {
                    best = (score, s, e);
                }
            }
        }
        prop_assert_eq!((got.score, got.start, got.end), best);
        prop_assert!(got.start <= got.end && got.end - got.start < max_len);
    }

    #[test]
    fn metric_laws(p in "[A-Za-z ,.!]{0,20}", g in "[A-Za-z ,.!]{0,20}") {
        if em(&p, &g) == 1.0 {
            prop_assert_eq!(f1(&p, &g), 1.0);
        }
        prop_assert_eq!(f1(&p, &g), f1(&g, &p));
        prop_assert_eq!(em(&normalize_answer(&p), &normalize_answer(&g)), em(&p, &g));
        prop_assert_eq!(f1(&normalize_answer(&p), &normalize_answer(&g)), f1(&p, &g));
    }

    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,30}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn evaluate_counts_every_gold_entry(
        entries in prop::collection::vec(("[a-c]", "[a-z]{1,4}", any::<bool>()), 1..12),
    ) {
        use xltt::corpus::GoldEntry;
        let mut gold = BTreeMap::new();
        let mut preds = BTreeMap::new();
        for (i, (lang, ans, answered)) in entries.iter().enumerate() {
            gold.insert(format!("{i}"), GoldEntry { language: lang.clone(), answers: vec![ans.clone()] });
            if *answered {
                preds.insert(format!("{i}"), ans.clone());
            }
        }
        let r = evaluate(&preds, &gold).unwrap();
        prop_assert_eq!(r.languages.values().map(|s| s.count).sum::<usize>(), entries.len());
        prop_assert_eq!(r.languages.values().map(|s| s.missing).sum::<usize>(), entries.len() - preds.len());
    }

    #[test]
    fn lr_schedule_never_increases(lr0 in 1e-6f64..1.0, t in 1u64..500) {
        let cfg = TrainConfig { lr0, total_steps: t, ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for step in 0..=t + 3 {
            let lr = lr_schedule(step, &cfg);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn adamw_without_signal_is_identity(p in matrix(3, 4, 5.0), steps in 1usize..4) {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut param = p.clone();
        let mut state = AdamState::new([p.shape()]);
        let zero = Tensor::zeros(p.rows(), p.cols());
        for _ in 0..steps {
            adamw_step(&mut [&mut param], std::slice::from_ref(&zero), &mut state, &cfg, 1e-2).unwrap();
        }
        prop_assert_eq!(param, p);
    }
}

fn maa_case(seed: u64) -> (MaaParams, Tensor, Tensor, Tensor, usize) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = [8, 16, 32][rng.gen_range(0..3)];
    let params = MaaParams::init(h, 2, &mut rng);
    let b = |rng: &mut ChaCha8Rng| Tensor::normal(rng.gen_range(1..=32), h, 0.5, rng);
    let (s, m, n) = (b(&mut rng), b(&mut rng), b(&mut rng));
    (params, s, m, n, h)
}

fn run_maa(params: &MaaParams, s: &Tensor, m: &Tensor, n: &Tensor, cfg: &MaaConfig) -> Tensor {
    let mut tape = Tape::new();
    let vars = MaaVars::bind(params, &mut tape);
    let (s, m, n) = (tape.constant(s.clone()), tape.constant(m.clone()), tape.constant(n.clone()));
    let out = maa_forward(&mut tape, s, &[m, n], &vars, cfg).unwrap();
    tape.value(out.g).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn maa_ignores_auxiliary_token_order(seed in any::<u64>(), perm_seed in any::<u64>(), heads in 1usize..=2) {
        use rand::seq::SliceRandom;
        let (params, s, m, n, _) = maa_case(seed);
        let mut order: Vec<usize> = (0..m.rows()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let rows: Vec<Vec<f64>> = order.iter().map(|&r| m.row_slice(r).to_vec()).collect();
        let pm = Tensor::from_rows(&rows);
        let cfg = MaaConfig { heads, ..MaaConfig::default() };
        let a = run_maa(&params, &s, &m, &n, &cfg);
        let b = run_maa(&params, &s, &pm, &n, &cfg);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn maa_shape_and_pivot_half(seed in any::<u64>()) {
        let (params, s, m, n, h) = maa_case(seed);
        let g = run_maa(&params, &s, &m, &n, &MaaConfig::default());
        prop_assert_eq!(g.shape(), (s.rows(), 2 * h));
        prop_assert_eq!(g.slice_cols(0, h).unwrap(), s.clone());
        let mut tape = Tape::new();
        let b = tape.constant(s.clone());
        let a = intra_attention(&mut tape, b).unwrap();
        for r in 0..s.rows() {
            prop_assert!((tape.value(a).row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn corpus_building_is_deterministic() {
    let world = xltt::synth::SynthWorld::new(xltt::synth::SynthConfig::default()).unwrap();
    let spec = xltt::synth::DatasetSpec::new("d", 40, &[0, 1], &[0]);
    let raw = world.generate(&spec, 9).unwrap();
    let mut providers = ProviderMap::new();
    providers.insert("id".into(), Box::new(IdentityProvider));
    providers.insert("cx".into(), Box::new(CipherProvider::new(4, false)));
    let langs = vec!["src".to_string(), "id".into(), "cx".into()];
    let vocab = Vocabulary::build(raw.iter().flat_map(|q| [q.question.as_str(), q.context.as_str()]));
    let a = build_parallel_corpus(&raw, &providers, &langs, &vocab, 64).unwrap();
    let b = build_parallel_corpus(&raw, &providers, &langs, &vocab, 64).unwrap();
    assert_eq!(a.instances, b.instances);
    assert_eq!(a.texts, b.texts);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    xltt::corpus::write_jsonl(&pa, &a.texts).unwrap();
    xltt::corpus::write_jsonl(&pb, &b.texts).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    for inst in &a.instances {
        for m in inst.members() {
            let (s, e) = m.answer_span;
            assert_eq!(m.span_text(s, e).unwrap(), m.answer_text);
        }
    }
}
