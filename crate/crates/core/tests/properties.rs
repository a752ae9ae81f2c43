use std::collections::HashMap;

use proptest::prelude::*;

use kperm_core::embeddings::{cosine, embed_text, hash_embed, l2_norm, HashEmbedder};
use kperm_core::metrics::{
    embed_f1, eval_retriever, lcs_len, rouge_l, rouge_lsum, rouge_n, score_pair, Aggregates, MetricRow, ReportItem,
};
use kperm_core::model::{tokenize, tokens, Passage};
use kperm_core::persona_select::{persona_loss, select, SelectorConfig};
use kperm_core::retrieval::{corpus_to_jsonl, parse_corpus_jsonl, DenseIndex};
use kperm_core::reward::{bleu, bleu_stats, mover_similarity, solve_transport, BleuConfig, BleuStats};

const WORDS: [&str; 10] = ["lake", "tower", "old", "the", "is", "deep", "red", "hill", "a", "path"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 0..12).prop_map(|w| w.join(" "))
}

fn nonempty_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(&WORDS[..]), 1..12).prop_map(|w| w.join(" "))
}

fn emb() -> HashEmbedder {
    HashEmbedder::new(24, 3).unwrap()
}

fn ngram_counts(t: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut m = HashMap::new();
    if t.len() >= n {
        for w in t.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

fn index_set(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0..n.max(1), 0..=n).prop_map(move |s| s.into_iter().filter(|&i| i < n).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metrics_stay_in_unit_interval(r in text(), c in text()) {
        let e = emb();
        let (row, _) = score_pair(&r, &c, &e, &BleuConfig::default()).unwrap();
        for v in [row.bleu, row.rouge1, row.rouge2, row.rouge_l, row.rouge_lsum, row.embed_f1] {
            prop_assert!((0.0..=1.0).contains(&v), "{v} for {r:?} / {c:?}");
        }
        let smoothed = bleu(&tokens(&r), &tokens(&c), &BleuConfig::smoothed());
        prop_assert!((0.0..=1.0).contains(&smoothed));
        let m = mover_similarity(&tokenize(&r), &tokenize(&c), &e).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn identical_texts_score_one(t in nonempty_text()) {
        let e = emb();
        let (row, _) = score_pair(&t, &t, &e, &BleuConfig::default()).unwrap();
        prop_assert!((row.bleu - 1.0).abs() < 1e-12);
        prop_assert_eq!(row.rouge1, 1.0);
        prop_assert_eq!(row.rouge_l, 1.0);
        prop_assert_eq!(row.rouge_lsum, 1.0);
        prop_assert!((row.embed_f1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_n_matches_clipped_count_oracle(r in text(), c in text(), n in 1usize..4) {
        let (rt, ct) = (tokens(&r), tokens(&c));
        let (rc, cc) = (ngram_counts(&rt, n), ngram_counts(&ct, n));
        let overlap: usize = cc.iter().map(|(g, k)| (*k).min(rc.get(g).copied().unwrap_or(0))).sum();
        let ref_total: usize = rc.values().sum();
        let cand_total: usize = cc.values().sum();
        let got = rouge_n(&r, &c, n);
        let recall = if ref_total == 0 || cand_total == 0 { 0.0 } else { overlap as f64 / ref_total as f64 };
        let precision = if cand_total == 0 { 0.0 } else { overlap as f64 / cand_total as f64 };
        prop_assert!((got.recall - recall).abs() < 1e-12, "recall {} vs {recall}", got.recall);
        prop_assert!((got.precision - precision).abs() < 1e-12);
    }

    #[test]
    fn lcs_is_symmetric_and_bounded(a in text(), b in text()) {
        let (x, y) = (tokens(&a), tokens(&b));
        let l = lcs_len(&x, &y);
        prop_assert_eq!(l, lcs_len(&y, &x));
        prop_assert!(l <= x.len().min(y.len()));
        prop_assert!((rouge_l(&a, &b).f1 - rouge_l(&b, &a).f1).abs() < 1e-12);
    }

    #[test]
    fn single_sentence_lsum_equals_rouge_l(r in nonempty_text(), c in nonempty_text()) {
        prop_assert!((rouge_lsum(&r, &c) - rouge_l(&r, &c).f1).abs() < 1e-12);
    }

    #[test]
    fn retriever_score_grows_with_k(ground in nonempty_text(), ps in prop::collection::vec(nonempty_text(), 1..8)) {
        let e = emb();
        let mut prev = 0.0;
        for k in 1..=ps.len() {
            let s = eval_retriever(&ps[..k], &ground, &e).unwrap();
            prop_assert!(s >= prev);
            prev = s;
        }
        let single = eval_retriever(&ps[..1], &ground, &e).unwrap();
        prop_assert_eq!(single, embed_f1(&ground, &ps[0], &e, None).unwrap());
    }

    #[test]
    fn aggregates_are_recomputable(rows in prop::collection::vec(prop::array::uniform6(0.0f64..=1.0), 0..12), fail in prop::collection::vec(any::<bool>(), 12)) {
        let items: Vec<ReportItem> = rows
            .iter()
            .zip(&fail)
            .enumerate()
            .map(|(i, (v, &f))| if f {
                ReportItem::failed(format!("x{i}"), "boom")
            } else {
                let row = MetricRow { bleu: v[0], rouge1: v[1], rouge2: v[2], rouge_l: v[3], rouge_lsum: v[4], embed_f1: v[5] };
                ReportItem::scored(format!("x{i}"), row, BleuStats::zero(4))
            })
            .collect();
        let a = Aggregates::compute(&items, &BleuConfig::default());
        let scored: Vec<&MetricRow> = items.iter().filter_map(|i| i.metrics.as_ref()).collect();
        prop_assert_eq!(a.scored + a.failed, items.len());
        let mean = |f: &dyn Fn(&MetricRow) -> f64| if scored.is_empty() { 0.0 } else { scored.iter().map(|r| f(r)).sum::<f64>() / scored.len() as f64 };
        prop_assert!((a.bleu - mean(&|r| r.bleu)).abs() < 1e-12);
        prop_assert!((a.rouge_lsum - mean(&|r| r.rouge_lsum)).abs() < 1e-12);
        prop_assert!((a.embed_f1 - mean(&|r| r.embed_f1)).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_pools_counts(pairs in prop::collection::vec((nonempty_text(), nonempty_text()), 1..6)) {
        let cfg = BleuConfig::default();
        let mut pooled = BleuStats::zero(4);
        let (mut r_all, mut c_all) = (Vec::new(), Vec::new());
        for (r, c) in &pairs {
            pooled.add(&bleu_stats(&tokens(r), &tokens(c), 4));
            r_all.extend(tokens(r));
            c_all.extend(tokens(c));
        }
        prop_assert_eq!(pooled.cand_len as usize, c_all.len());
        prop_assert_eq!(pooled.ref_len as usize, r_all.len());
        let stats_bleu = kperm_core::reward::bleu_from_stats(&pooled, &cfg);
        prop_assert!((0.0..=1.0).contains(&stats_bleu));
    }

    #[test]
    fn persona_loss_is_a_bounded_metric((n, v) in (0usize..7).prop_flat_map(|n| (Just(n), prop::collection::vec(index_set(n), 3)))) {
        let (a, b, c) = (&v[0], &v[1], &v[2]);
        let ab = persona_loss(a, b, n).unwrap();
        prop_assert_eq!(ab, persona_loss(b, a, n).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 0.0, a == b);
        prop_assert!(ab <= persona_loss(a, c, n).unwrap() + persona_loss(c, b, n).unwrap() + 1e-12);
    }

    #[test]
    fn selection_respects_cap(scores in prop::collection::vec(-1.0f64..1.0, 1..10), cap in 0usize..4, tau in -1.0f64..1.0) {
        let n = scores.len() - 1;
        let cfg = SelectorConfig { threshold: tau, max_selected: cap, ..SelectorConfig::default() };
        let s = select(&scores, n, &cfg).unwrap();
        prop_assert!(s.selected_indices.len() <= cap);
        let bar = tau.max(scores[n]);
        for &i in &s.selected_indices {
            prop_assert!(i < n && scores[i] > bar);
        }
        for w in s.selected_indices.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn transport_plans_are_feasible(
        supply in prop::collection::vec(0.0f64..1.0, 1..6),
        demand in prop::collection::vec(0.0f64..1.0, 1..6),
        seed in any::<u64>(),
    ) {
        let (st, dt): (f64, f64) = (supply.iter().sum(), demand.iter().sum());
        prop_assume!(st > 1e-6 && dt > 1e-6);
        let supply: Vec<f64> = supply.iter().map(|x| x / st).collect();
        let demand: Vec<f64> = demand.iter().map(|x| x / dt).collect();
        let cost: Vec<Vec<f64>> = (0..supply.len())
            .map(|i| (0..demand.len()).map(|j| ((seed.rotate_left((i * 7 + j) as u32) % 1000) as f64) / 500.0).collect())
            .collect();
        let plan = solve_transport(&supply, &demand, &cost).unwrap();
        prop_assert!(plan.marginal_error(&supply, &demand) < 1e-7);
        prop_assert!(plan.flow.iter().flatten().all(|&f| f >= -1e-12));
        // no plan beats the optimum; the product coupling is one feasible plan
        let product: f64 = (0..supply.len()).flat_map(|i| (0..demand.len()).map(move |j| (i, j))).map(|(i, j)| supply[i] * demand[j] * cost[i][j]).sum();
        prop_assert!(plan.total_cost <= product + 1e-9);
    }

    #[test]
    fn hash_vectors_are_unit(token in "[a-z0-9]{1,12}", seed in any::<u64>(), dim in 1usize..64) {
        let v = hash_embed(&token, dim, seed).unwrap();
        prop_assert_eq!(v.len(), dim);
        prop_assert!((l2_norm(&v) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_embedding_is_unit_or_flagged(t in text()) {
        let e = embed_text(&t, &emb()).unwrap();
        if tokens(&t).is_empty() {
            prop_assert!(e.empty);
            prop_assert_eq!(l2_norm(&e.vector), 0.0);
        } else {
            prop_assert!((l2_norm(&e.vector) - 1.0).abs() < 1e-9);
            prop_assert!((cosine(&e.vector, &e.vector).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_weights_sum_to_one(t in nonempty_text()) {
        let d = tokenize(&t);
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(d.types.len(), d.weights.len());
    }

    #[test]
    fn corpus_jsonl_round_trips(bodies in prop::collection::vec("[^\u{0}]{1,40}", 1..6)) {
        let passages: Vec<Passage> = bodies
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.trim().is_empty())
            .map(|(i, b)| Passage::new(format!("p{i}"), "topic \"quoted\"", b.as_str()).unwrap())
            .collect();
        let back = parse_corpus_jsonl(&corpus_to_jsonl(&passages), "mem").unwrap();
        prop_assert_eq!(back, passages);
    }

    #[test]
    fn dense_index_bytes_round_trip(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..10), seed in any::<u64>()) {
        prop_assume!(rows.iter().all(|r| l2_norm(r) > 1e-9));
        let ids = (0..rows.len()).map(|i| format!("id{i}")).collect();
        let idx = DenseIndex::from_vectors(ids, rows, seed, "hash:3:1").unwrap();
        let bytes = idx.to_bytes();
        let back = DenseIndex::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.ids(), idx.ids());
    }
}
