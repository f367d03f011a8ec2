use jointslu::augment::{build_batch_pairs, generate_positive, FineTarget, UttRef};
use jointslu::config::TrainConfig;
use jointslu::contrastive::{info_nce_scores, margin_similarity, SimilarityConfig};
use jointslu::corpus::{extract_chunks, parse_tag, tags_from_chunks, SlotDictionary, Tag, Utterance};
use jointslu::distill::PredictionSnapshot;
use jointslu::intent::{vote, vote_raw, VotingConfig};
use jointslu::metrics::evaluate_predictions;
use jointslu::nn::Mode;
use jointslu::slot::GlobalGraph;
use jointslu::synthetic;
use jointslu::train::{predict_utterances, LossTerms, Trainer};
use jointslu::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| matrix(r, c, -20.0, 20.0))
}

fn tag_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("O".to_string()),
        Just("B-city".to_string()),
        Just("I-city".to_string()),
        Just("B-date".to_string()),
        Just("I-date".to_string()),
    ]
}

// autodiff ----------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(8), axis in 0usize..2) {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let s = tape.softmax(v, axis).unwrap();
        let out = tape.value(s).clone();
        prop_assert!(out.data().iter().all(|&p| p >= 0.0));
        let (r, c) = out.dims2().unwrap();
        if axis == 1 {
            for i in 0..r {
                prop_assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        } else {
            for j in 0..c {
                prop_assert!(((0..r).map(|i| out.get2(i, j)).sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(x in matrix(3, 4, -2.0, 2.0), w in matrix(4, 2, -2.0, 2.0)) {
        let build = |tape: &mut Tape, which: u8| {
            let a = tape.leaf(x.clone());
            let b = tape.leaf(w.clone());
            let y = tape.matmul(a, b).unwrap();
            let f = tape.tanh(y).unwrap();
            let f = tape.sum(f).unwrap();
            let g = tape.sigmoid(a).unwrap();
            let g = tape.mul(g, a).unwrap();
            let g = tape.sum(g).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            (grads.get(a).cloned().unwrap(), grads.get(b).cloned())
        };
        let (fa, fb) = build(&mut Tape::new(), 0);
        let (ga, gb) = build(&mut Tape::new(), 1);
        let (sa, sb) = build(&mut Tape::new(), 2);
        for i in 0..sa.len() {
            prop_assert!((sa.data()[i] - fa.data()[i] - ga.data()[i]).abs() < 1e-12);
        }
        // g does not touch w
        prop_assert!(gb.is_none());
        prop_assert_eq!(sb.unwrap(), fb.unwrap());
    }
}

#[test]
fn replaying_a_tape_is_bitwise_deterministic() {
    let data = synthetic::corpus(6, 9, 11).unwrap();
    let cfg = TrainConfig {
        dropout: 0.0,
        ..TrainConfig::tiny()
    };
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        let mut tape = Tape::new();
        let (total, _) = t.batch_objective(&mut tape, &[0, 1, 2, 3], None).unwrap();
        let mut store = t.store.clone();
        tape.backward_into(total, &mut store).unwrap();
        let grads: Vec<Vec<u64>> = store
            .iter()
            .map(|(_, p)| p.grad.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        (tape.scalar_value(total).unwrap().to_bits(), grads)
    };
    assert_eq!(run(), run());
}

// corpus ------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn chunk_round_trip_normalises_orphans(tags in prop::collection::vec(tag_strategy(), 1..12)) {
        let chunks = extract_chunks(&tags).unwrap();
        let again = tags_from_chunks(tags.len(), &chunks);
        // only orphan I-x tags may change, and only into B-x
        for (a, b) in tags.iter().zip(&again) {
            if a != b {
                let Tag::Inside(x) = parse_tag(a).unwrap() else { panic!("{a} became {b}") };
                prop_assert_eq!(b, &format!("B-{x}"));
            }
        }
        prop_assert_eq!(extract_chunks(&again).unwrap(), chunks.clone());
        prop_assert_eq!(tags_from_chunks(again.len(), &chunks), again);
    }
}

#[test]
fn dictionary_phrases_reparse_as_one_chunk() {
    let data = synthetic::corpus(120, 9, 3).unwrap();
    let dict = SlotDictionary::from_utterances(&data).unwrap();
    for (ty, phrases) in dict.iter() {
        for p in phrases {
            let mut tokens = vec!["please".to_string()];
            tokens.extend(p.iter().cloned());
            tokens.push("now".into());
            let mut tags = vec!["O".to_string()];
            tags.extend((0..p.len()).map(|k| format!("{}-{ty}", if k == 0 { "B" } else { "I" })));
            tags.push("O".into());
            let u = Utterance::new(tokens, tags, vec!["x".into()]).unwrap();
            let spans = u.spans().unwrap();
            assert_eq!(spans.len(), 1);
            assert_eq!(spans[0].slot_type, ty);
            assert_eq!(&spans[0].surface, p);
        }
    }
}

// augmentation ------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pairs_follow_their_level_rules(corpus_seed in 0u64..1000, seed in 0u64..1000, b in 2usize..7) {
        let data = synthetic::corpus(40, 9, corpus_seed).unwrap();
        let dict = SlotDictionary::from_utterances(&data).unwrap();
        let bases = &data[..b];
        let make = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pos: Vec<_> = bases.iter().map(|u| generate_positive(u, &dict, &mut rng).unwrap()).collect();
            let pairs = build_batch_pairs(bases, &pos, &mut rng, 8).unwrap();
            (pos, pairs)
        };
        let (pos, pairs) = make(seed);
        prop_assert_eq!(&make(seed).1, &pairs);

        let utt = |r: UttRef| match r {
            UttRef::Base(i) => &bases[i],
            UttRef::Positive(i) => &pos[i].utterance,
        };
        for p in &pairs.coarse_utt {
            prop_assert!(!p.negatives.contains(&p.anchor));
            prop_assert!(p.negatives.iter().all(|n| matches!(n, UttRef::Base(_))));
        }
        for p in &pairs.fine_utt {
            prop_assert!(!p.negatives.contains(&p.anchor));
            let UttRef::Base(i) = p.anchor.utt else { panic!("fine anchor on a positive") };
            let target = match p.positive {
                FineTarget::Token(t) => t.utt,
                FineTarget::ChunkMean(c) => c.utt,
            };
            prop_assert_eq!(target, UttRef::Positive(i));
            prop_assert!(p.negatives.iter().all(|n| matches!(n.utt, UttRef::Base(j) if j != i)));
        }
        for p in &pairs.slot {
            prop_assert!(!p.negatives.contains(&p.anchor));
            let ty = |c: jointslu::augment::ChunkRef| utt(c.utt).spans().unwrap()[c.chunk].slot_type.clone();
            prop_assert_eq!(ty(p.anchor), ty(p.positive));
            for &n in &p.negatives {
                prop_assert_ne!(ty(n), ty(p.anchor));
            }
        }
        for p in &pairs.word {
            prop_assert!(!p.negatives.contains(&p.anchor));
            let suffix = |t: jointslu::augment::TokenRef| match parse_tag(&utt(t.utt).slot_tags[t.pos]).unwrap() {
                Tag::Begin(x) | Tag::Inside(x) => Some(x.to_string()),
                Tag::Outside => None,
            };
            let a = suffix(p.anchor);
            prop_assert!(a.is_some());
            prop_assert_eq!(suffix(p.positive), a.clone());
            for &n in &p.negatives {
                let s = suffix(n);
                prop_assert!(s.is_some());
                prop_assert_ne!(s, a.clone());
            }
        }
    }
}

// contrastive -------------------------------------------------------------

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), n)
        .prop_filter("no zero vectors", |vs| vs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-3)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn margin_similarity_is_symmetric(vs in vectors(9, 5), k in 0usize..10) {
        let pool: Vec<&[f64]> = vs[2..].iter().map(Vec::as_slice).collect();
        let cfg = SimilarityConfig { k, ..SimilarityConfig::default() };
        let a = margin_similarity(&vs[0], &vs[1], &pool, &cfg).unwrap();
        let b = margin_similarity(&vs[1], &vs[0], &pool, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn info_nce_is_nonnegative_and_monotone(
        pos in -1.0..1.0f64,
        negs in prop::collection::vec(-1.0..1.0f64, 1..8),
        bump in 0.01..0.5f64,
        tau in 0.1..4.0f64,
    ) {
        let l = info_nce_scores(pos, &negs, tau);
        prop_assert!(l >= 0.0);
        prop_assert!(info_nce_scores(pos + bump, &negs, tau) < l);
        for i in 0..negs.len() {
            let mut up = negs.clone();
            up[i] += bump;
            prop_assert!(info_nce_scores(pos, &up, tau) > l);
        }
    }
}

#[test]
fn contrastive_losses_are_nonnegative_and_finite() {
    let data = synthetic::corpus(64, 9, 8).unwrap();
    for seed in 0..8 {
        let cfg = TrainConfig {
            seed,
            toggles: jointslu::config::LossToggles::ALL,
            ..TrainConfig::tiny()
        };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<usize> = (0..6).map(|_| rng.gen_range(0..data.len())).collect();
        let mut batch = batch;
        batch.sort();
        batch.dedup();
        if batch.len() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let (total, vars) = t.batch_objective(&mut tape, &batch, None).unwrap();
        let terms = LossTerms::read(&tape, &vars, total).unwrap();
        for v in [terms.cucl, terms.fucl, terms.scl, terms.wcl] {
            assert!(v.is_finite() && v >= 0.0, "{terms:?}");
        }
    }
}

// encoder -----------------------------------------------------------------

#[test]
fn encoder_rows_are_concatenations_and_eval_is_deterministic() {
    let data = synthetic::corpus(8, 9, 2).unwrap();
    let t = Trainer::new(TrainConfig::tiny(), &data).unwrap();
    let enc = |ids: &[usize]| {
        let mut tape = Tape::new();
        let o = t.model.encode(&mut tape, &t.store, ids, &mut Mode::Eval).unwrap();
        (tape.value(o.e).clone(), tape.value(o.h).clone(), tape.value(o.c).clone())
    };
    for ex in t.train_examples() {
        let (e, h, c) = enc(&ex.ids);
        let (n, dh) = h.dims2().unwrap();
        let dc = c.dims2().unwrap().1;
        assert_eq!(dh, 2 * t.cfg.lstm_hidden);
        assert_eq!(e.dims2().unwrap(), (n, dh + dc));
        for i in 0..n {
            assert_eq!(&e.row(i)[..dh], h.row(i));
            assert_eq!(&e.row(i)[dh..], c.row(i));
        }
        let (again, _, _) = enc(&ex.ids);
        assert_eq!(
            e.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

// intent voting -----------------------------------------------------------

fn prob_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..10, 1usize..6).prop_flat_map(|(n, k)| matrix(n, k, 0.0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vote_ignores_token_order(p in prob_matrix(), seed in 0u64..1000) {
        let (n, _) = p.dims2().unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| p.row(i).to_vec()).collect();
        let q = Tensor::from_rows(&rows).unwrap();
        let cfg = VotingConfig::default();
        prop_assert_eq!(vote(&p, cfg).unwrap(), vote(&q, cfg).unwrap());
    }

    #[test]
    fn raising_the_threshold_never_adds_intents(p in prob_matrix(), a in 0.01..0.99f64, b in 0.01..0.99f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = vote_raw(&p, VotingConfig { threshold: lo }).unwrap();
        let high = vote_raw(&p, VotingConfig { threshold: hi }).unwrap();
        prop_assert!(high.iter().all(|j| low.contains(j)));
    }

    #[test]
    fn vote_is_never_empty(p in prob_matrix(), t in 0.01..0.99f64) {
        let cfg = VotingConfig { threshold: t };
        prop_assert!(!vote(&p, cfg).unwrap().intents.is_empty());
    }

    #[test]
    fn graph_has_n_plus_m_nodes(n in 1usize..12, m in 1usize..5, window in 0usize..4) {
        let intents: Vec<usize> = (0..m).collect();
        let g = GlobalGraph::build(n, &intents, window).unwrap();
        prop_assert_eq!(g.num_nodes(), n + m);
        for (i, adj) in g.neighbors.iter().enumerate() {
            prop_assert!(adj.contains(&i));
        }
    }
}

// slot decoding -----------------------------------------------------------

#[test]
fn attention_is_a_distribution_over_each_neighbourhood() {
    let data = synthetic::corpus(10, 9, 4).unwrap();
    let t = Trainer::new(TrainConfig::tiny(), &data).unwrap();
    for ex in t.train_examples() {
        let mut tape = Tape::new();
        let f = t.model.forward(&mut tape, &t.store, &ex.ids, &mut Mode::Eval).unwrap();
        let mut tape2 = Tape::new();
        let enc = t.model.encode(&mut tape2, &t.store, &ex.ids, &mut Mode::Eval).unwrap();
        let ip = t.model.intent.forward(&mut tape2, &t.store, enc.e).unwrap();
        let out = t.model.slot.forward(&mut tape2, &t.store, enc.e, ip, &f.vote.intents).unwrap();
        let g = &out.graph;
        assert_eq!(g.num_nodes(), ex.len() + f.vote.intents.len());
        for alpha in &out.alphas {
            let a = tape2.value(*alpha);
            for (i, adj) in g.neighbors.iter().enumerate() {
                let row = a.row(i);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &v) in row.iter().enumerate() {
                    if !adj.contains(&j) {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        let slots = tape.value(f.slot_probs);
        for i in 0..ex.len() {
            assert!((slots.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn slot_predictions_do_not_read_gold_labels() {
    let data = synthetic::corpus(12, 9, 6).unwrap();
    let t = Trainer::new(TrainConfig::tiny(), &data).unwrap();
    let relabelled: Vec<Utterance> = data
        .iter()
        .map(|u| {
            let tags = vec!["O".to_string(); u.len()];
            Utterance::new(u.tokens.clone(), tags, vec!["get_weather".into()]).unwrap()
        })
        .collect();
    let a = predict_utterances(&t.model, &t.store, &t.vocab, &data).unwrap();
    let b = predict_utterances(&t.model, &t.store, &t.vocab, &relabelled).unwrap();
    assert_eq!(a, b);
}

// distillation ------------------------------------------------------------

#[test]
fn kl_terms_are_nonnegative_zero_at_snapshot_and_leave_it_untouched() {
    let data = synthetic::corpus(6, 9, 5).unwrap();
    let t = Trainer::new(TrainConfig::tiny(), &data).unwrap();
    let snap = PredictionSnapshot::from_gold(&data, &t.vocab).unwrap();
    let before = snap.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..data.len() {
        let n = data[i].len();
        let (v, k) = (t.vocab.num_slots(), t.vocab.num_intents());
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..v).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let mut tape = Tape::new();
        let cur = tape.leaf(Tensor::from_rows(&rows).unwrap());
        let ip = tape.leaf(Tensor::new(vec![n, k], (0..n * k).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap());
        let s = snap.slot_kl(&mut tape, i, cur).unwrap();
        let it = snap.intent_kl(&mut tape, i, ip).unwrap();
        assert!(tape.scalar_value(s).unwrap() > 0.0);
        assert!(tape.scalar_value(it).unwrap() > 0.0);
        let sum = tape.add(s, it).unwrap();
        let grads = tape.backward(sum).unwrap();
        assert!(grads.get(cur).is_some() && grads.get(ip).is_some());

        // the snapshot against itself
        let (ps, pi) = (&snap.slots[i], &snap.intents[i]);
        let mut tape = Tape::new();
        let cur = tape.leaf(ps.clone());
        let ip = tape.leaf(pi.clone());
        let s = snap.slot_kl(&mut tape, i, cur).unwrap();
        let it = snap.intent_kl(&mut tape, i, ip).unwrap();
        assert!(tape.scalar_value(s).unwrap().abs() < 1e-9);
        assert!(tape.scalar_value(it).unwrap().abs() < 1e-9);
    }
    assert_eq!(snap, before);
}

// training and metrics ----------------------------------------------------

#[test]
fn objective_is_the_exact_sum_of_its_terms() {
    let data = synthetic::corpus(16, 9, 9).unwrap();
    let mut t = Trainer::new(TrainConfig::tiny(), &data).unwrap();
    for _ in 0..3 {
        let batch: Vec<usize> = (0..8).collect();
        let terms = t.train_step(&batch, 0, None).unwrap();
        assert_eq!(terms.total, terms.weighted_sum(&t.cfg.toggles, &t.cfg.weights));
    }
}

fn random_prediction(gold: &Utterance, rng: &mut ChaCha8Rng) -> Utterance {
    const TAGS: [&str; 5] = ["O", "B-city", "I-city", "B-date", "I-date"];
    const INTENTS: [&str; 3] = ["a", "b", "c"];
    let tags = if rng.gen_bool(0.5) {
        gold.slot_tags.clone()
    } else {
        (0..gold.len()).map(|_| TAGS[rng.gen_range(0..5)].to_string()).collect()
    };
    let intents = if rng.gen_bool(0.5) {
        gold.intents.clone()
    } else {
        let mut v: Vec<String> = INTENTS.iter().filter(|_| rng.gen_bool(0.5)).map(|s| s.to_string()).collect();
        if v.is_empty() {
            v.push("a".into());
        }
        v
    };
    Utterance::new(gold.tokens.clone(), tags, intents).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn overall_accuracy_is_bounded_by_both_tasks(seed in 0u64..10_000, n in 1usize..20) {
        let gold = synthetic::corpus(n, 9, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<Utterance> = gold.iter().map(|g| random_prediction(g, &mut rng)).collect();
        let r = evaluate_predictions(&gold, &pred).unwrap();
        prop_assert!(r.overall_acc <= r.intent_acc);
        prop_assert!(r.overall_acc <= r.slot_sentence_acc);
        prop_assert!((0.0..=1.0).contains(&r.slot_f1));
    }
}
