use std::collections::BTreeSet;

use chrono::{DateTime, Duration, TimeZone, Utc};
use proptest::prelude::*;
use qroute::activity::{topic_fractions, TopicMap};
use qroute::communities::{louvain, modularity, vi_labels, Partition};
use qroute::eval::{precision_from_positions, reciprocal_rank, wilcoxon_paired};
use qroute::factorization::FactorModel;
use qroute::ingest::{parse_dump, write_dump, AnswerPost, Corpus, QuestionPost};
use qroute::routing::{rank_by_model, Denominator, Method, NewQuestion, Ranking};
use qroute::tag_graph::{rewire_random, TagGraph};

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn graph() -> impl Strategy<Value = TagGraph> {
    (3usize..14).prop_flat_map(|n| {
        prop::collection::btree_map((0..n, 0..n), 1u64..5, 1..(n * 2)).prop_map(move |m| {
            let edges: Vec<(usize, usize, u64)> = m
                .into_iter()
                .filter(|((a, b), _)| a < b)
                .map(|((a, b), w)| (a, b, w))
                .collect();
            let names = (0..n).map(|i| format!("t{i}")).collect();
            TagGraph::from_edges(names, edges, 1).unwrap()
        })
    })
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap()
}

fn corpus() -> impl Strategy<Value = Corpus> {
    let tag_pool = ["c", "c++", "git", "java", "linux", "rust", "x&y", "a\"b"];
    let question = (
        prop::collection::btree_set(0..tag_pool.len(), 1..=5),
        prop::option::of(1i64..50),
        0i64..10_000_000_000,
        -3i64..20,
    );
    let answer = (any::<prop::sample::Index>(), prop::option::of(1i64..50), 0i64..1_000_000_000, -3i64..20, any::<bool>());
    (prop::collection::vec(question, 1..12), prop::collection::vec(answer, 0..25)).prop_map(move |(qs, ans)| {
        let mut questions: Vec<QuestionPost> = qs
            .into_iter()
            .enumerate()
            .map(|(i, (tags, asker, ms, score))| QuestionPost {
                id: i as i64 + 1,
                asker,
                created_at: base_time() + Duration::milliseconds(ms),
                tags: tags.into_iter().map(|t| tag_pool[t].to_string()).collect(),
                accepted_answer: None,
                score,
            })
            .collect();
        let mut answers = Vec::new();
        for (i, (parent, answerer, after, score, accept)) in ans.into_iter().enumerate() {
            let k = parent.index(questions.len());
            let q = &mut questions[k];
            let id = 1000 + i as i64;
            if accept {
                q.accepted_answer = Some(id);
            }
            answers.push(AnswerPost {
                id,
                parent: q.id,
                answerer,
                created_at: q.created_at + Duration::milliseconds(after),
                score,
            });
        }
        Corpus::new(questions, answers, std::iter::empty()).unwrap()
    })
}

proptest! {
    #[test]
    fn vi_is_a_metric(n in 1usize..30, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || -> Vec<usize> {
            use rand::Rng;
            let k = rng.gen_range(1..=n);
            (0..n).map(|_| rng.gen_range(0..k)).collect()
        };
        let (x, y, z) = (draw(), draw(), draw());
        let xy = vi_labels(&x, &y).unwrap();
        prop_assert!(vi_labels(&x, &x).unwrap().abs() < 1e-12);
        prop_assert!((xy - vi_labels(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!(xy >= 0.0 && xy <= (n as f64).ln() + 1e-12);
        prop_assert!(xy <= vi_labels(&x, &z).unwrap() + vi_labels(&z, &y).unwrap() + 1e-9);
    }

    #[test]
    fn vi_ignores_label_names(x in labels(20, 5), shift in 1usize..100) {
        let renamed: Vec<usize> = x.iter().map(|l| (l * 7 + shift) % 1000).collect();
        prop_assert!(vi_labels(&x, &renamed).unwrap().abs() < 1e-12);
    }

    #[test]
    fn fractions_sum_to_one(assign in labels(12, 4), picks in prop::collection::vec(0usize..16, 1..6)) {
        let topics = TopicMap::from_pairs((0..12).map(|i| (format!("t{i}"), assign[i]))).unwrap_or_else(|_| {
            // labels may leave gaps; compact them
            let mut seen: Vec<usize> = assign.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            seen.sort();
            TopicMap::from_pairs((0..12).map(|i| (format!("t{i}"), seen.binary_search(&assign[i]).unwrap()))).unwrap()
        });
        let tags: Vec<String> = picks.iter().map(|p| format!("t{p}")).collect();
        match topic_fractions(&tags, &topics) {
            Ok(f) => {
                let s: f64 = f.iter().map(|&(_, x)| x).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(f.iter().all(|&(_, x)| x > 0.0));
            }
            Err(_) => prop_assert!(picks.iter().all(|&p| p >= 12)),
        }
    }

    #[test]
    fn ranking_is_invariant_to_positive_scaling(
        uf in prop::collection::vec(-2.0f64..2.0, 24),
        tf in prop::collection::vec(-2.0f64..2.0, 9),
        c in 0.01f64..50.0,
        tags in prop::collection::btree_set(0usize..3, 1..=3),
    ) {
        let users: Vec<i64> = (1..=8).collect();
        let topics = TopicMap::from_pairs((0..3).map(|i| (format!("t{i}"), i))).unwrap();
        let q = NewQuestion::new(1, tags.iter().map(|t| format!("t{t}")).collect(), base_time()).unwrap();
        let mut model = FactorModel::from_factors(users.clone(), uf, tf, 3, 0.01).unwrap();
        let before = rank_by_model(&q, &model, &topics, &users, Denominator::Mappable, Method::Tcteqr).unwrap();
        model.scale_predictions(c);
        let after = rank_by_model(&q, &model, &topics, &users, Denominator::Mappable, Method::Tcteqr).unwrap();
        // rounding may reorder exact near-ties only
        let e = before.entries();
        for i in 0..e.len() {
            for j in i + 1..e.len() {
                if e[i].1 - e[j].1 > 1e-9 {
                    prop_assert!(after.position(e[i].0) < after.position(e[j].0));
                }
            }
        }
    }

    #[test]
    fn rankings_are_sorted_and_unique(scores in prop::collection::btree_map(0i64..1000, -5.0f64..5.0, 1..40)) {
        let r = Ranking::from_scores(1, Method::Random, scores.clone().into_iter().collect()).unwrap();
        prop_assert_eq!(r.len(), scores.len());
        for w in r.entries().windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn precision_is_monotone(pos in prop::collection::vec(prop::option::of(1usize..30), 1..50)) {
        let mut last = 0.0;
        for r in 1..35 {
            let p = precision_from_positions(&pos, r).unwrap();
            prop_assert!(p >= last && p <= 1.0);
            last = p;
        }
    }

    #[test]
    fn irrelevant_candidate_below_truth_changes_nothing(
        scores in prop::collection::btree_map(0i64..500, 0.0f64..10.0, 2..30),
        pick in any::<prop::sample::Index>(),
        gap in 0.001f64..5.0,
    ) {
        let v: Vec<(i64, f64)> = scores.into_iter().collect();
        let (truth, ts) = v[pick.index(v.len())];
        let before = Ranking::from_scores(1, Method::Random, v.clone()).unwrap();
        let mut more = v.clone();
        more.push((10_000, ts - gap));
        let after = Ranking::from_scores(1, Method::Random, more).unwrap();
        let (pb, pa) = (before.position(truth), after.position(truth));
        prop_assert_eq!(pb, pa);
        prop_assert_eq!(reciprocal_rank(pb), reciprocal_rank(pa));
    }

    #[test]
    fn rewiring_preserves_degrees(g in graph(), seed in any::<u64>()) {
        prop_assume!(g.num_edges() >= 2);
        let out = rewire_random(&g, seed).unwrap();
        prop_assert_eq!(out.graph.degrees(), g.degrees());
        prop_assert_eq!(out.graph.num_edges(), g.num_edges());
        prop_assert_eq!(out.graph.names(), g.names());
    }

    #[test]
    fn louvain_beats_singletons(g in graph(), seed in any::<u64>(), weighted in any::<bool>()) {
        let p = louvain(&g, seed, weighted).unwrap();
        let single = Partition::singletons(&g, weighted);
        prop_assert!(p.modularity >= single.modularity - 1e-12);
        prop_assert!((modularity(&g, p.assignment(), weighted).unwrap() - p.modularity).abs() < 1e-12);
        prop_assert!(p.modularity <= 1.0);
        let again = louvain(&g, seed, weighted).unwrap();
        prop_assert_eq!(again.assignment(), p.assignment());
    }

    #[test]
    fn edge_list_round_trip(g in graph()) {
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let back = TagGraph::read_edge_list(buf.as_slice(), 1).unwrap();
        prop_assert_eq!(back.num_edges(), g.num_edges());
        for (a, b, w) in g.edges() {
            let (x, y) = (back.node(g.name(a)).unwrap(), back.node(g.name(b)).unwrap());
            prop_assert_eq!(back.weight(x, y), Some(w));
        }
    }

    #[test]
    fn dump_write_parse_is_a_fixed_point(c in corpus()) {
        let (mut posts, mut tags) = (Vec::new(), Vec::new());
        write_dump(&c, &mut posts, &mut tags).unwrap();
        let (back, summary) = parse_dump(posts.as_slice(), tags.as_slice()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(summary.questions, c.num_questions());
        let (mut p2, mut t2) = (Vec::new(), Vec::new());
        write_dump(&back, &mut p2, &mut t2).unwrap();
        prop_assert_eq!(p2, posts);
        prop_assert_eq!(t2, tags);
    }

    #[test]
    fn wilcoxon_is_symmetric(x in prop::collection::vec(0.0f64..1.0, 10..40), y in prop::collection::vec(0.0f64..1.0, 10..40)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let a = wilcoxon_paired(x, y).unwrap();
        let b = wilcoxon_paired(y, x).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.p_value));
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
        prop_assert_eq!(a.statistic, b.statistic);
    }
}
